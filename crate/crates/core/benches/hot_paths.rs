//! Hot-path benchmarks: batch training gradients, per-scenario box QPs, and
//! the real-time rollout.
//!
//! Run once with the default `parallel` feature and once with
//! `--no-default-features`, then compare criterion's saved baselines:
//!
//! ```text
//! cargo bench -p varnet-core -- --save-baseline parallel
//! cargo bench -p varnet-core --no-default-features -- --save-baseline sequential
//! ```

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use varnet_core::baselines::{solve_box_qp_from, QpConfig, QpInstance};
use varnet_core::eval::simulate_realtime;
use varnet_core::feeder::{
    build_sensitivities, FeederTopology, GridConditions, Inverter, Line, SensitivityMatrices,
    VoltageLimits,
};
use varnet_core::policy::{init_params, Architecture, PolicyParams};
use varnet_core::scenario::{InputMap, Origin, Scenario};
use varnet_core::trainer::{DualVars, TrainingProblem};

/// A 12-bus radial feeder shaped like the bundled fixture.
fn bench_topology() -> FeederTopology {
    let parents = [0, 1, 2, 1, 4, 1, 6, 7, 7, 6, 6, 11];
    let lines: Vec<Line> = parents
        .iter()
        .enumerate()
        .map(|(i, &p)| Line {
            from: p,
            to: i + 1,
            r_pu: 0.004 + 0.0005 * (i % 5) as f64,
            x_pu: 0.008 + 0.001 * (i % 3) as f64,
        })
        .collect();
    let inverters = vec![
        Inverter {
            bus: 9,
            qbar_pu: 0.3,
        },
        Inverter {
            bus: 12,
            qbar_pu: 0.3,
        },
    ];
    FeederTopology::new(lines, inverters, 1.0).unwrap()
}

fn scenarios(topo: &FeederTopology, count: usize, seed: u64) -> Vec<Scenario> {
    let map = InputMap::new(topo, &[2, 3, 7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let n = 12;
            let z = GridConditions::new(
                (0..n).map(|_| rng.random_range(0.0..0.1)).collect(),
                (0..n).map(|_| rng.random_range(0.0..0.05)).collect(),
                (0..n).map(|_| rng.random_range(0.0..0.3)).collect(),
            )
            .unwrap();
            let (w_u, w_local) = map.derive(&z);
            Scenario {
                z,
                w_u,
                w_local,
                origin: Origin::Measured,
                source_index: t,
            }
        })
        .collect()
}

fn batch_gradient(c: &mut Criterion) {
    let topo = bench_topology();
    let sens = build_sensitivities(&topo).unwrap();
    let limits = VoltageLimits::uniform(12, 0.97, 1.03).unwrap();
    let set = scenarios(&topo, 240, 1);
    let problem = TrainingProblem::new(&sens, &limits, 1.0, &set).unwrap();
    let arch = Architecture::two_tier(&topo, 3, 1, 6);
    let params = init_params(&arch, 7).unwrap();
    let lambda = DualVars {
        lambda: (0..24).map(|i| 0.01 * (i % 4) as f64).collect(),
    };
    c.bench_function("batch_gradient_240_scenarios", |b| {
        b.iter(|| {
            let grads = varnet_core::parallel::map_range(240, |k| {
                problem.grad_theta(black_box(&params), &lambda, k)
            });
            let mut acc = vec![0.0; params.param_count()];
            for g in &grads {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            black_box(acc)
        })
    });
}

fn inner_qps(c: &mut Criterion) {
    let topo = bench_topology();
    let sens: &'static SensitivityMatrices =
        Box::leak(Box::new(build_sensitivities(&topo).unwrap()));
    let limits: &'static VoltageLimits =
        Box::leak(Box::new(VoltageLimits::uniform(12, 0.97, 1.03).unwrap()));
    let set = scenarios(&topo, 240, 2);
    let instances: Vec<QpInstance<'static>> = set
        .iter()
        .map(|s| QpInstance::new(sens, limits, &s.z, 1.0, topo.qbar()).unwrap())
        .collect();
    let lambda = vec![0.02; 24];
    let cfg = QpConfig::default();
    c.bench_function("per_scenario_qps_240", |b| {
        b.iter(|| {
            let sols = varnet_core::parallel::map_collect(&instances, |inst| {
                solve_box_qp_from(inst, Some(black_box(&lambda)), &[0.0; 12], &cfg).unwrap()
            });
            black_box(sols)
        })
    });
}

fn realtime_rollout(c: &mut Criterion) {
    let topo = bench_topology();
    let sens = build_sensitivities(&topo).unwrap();
    let limits = VoltageLimits::uniform(12, 0.97, 1.03).unwrap();
    let window = scenarios(&topo, 60, 3);
    let arch = Architecture::two_tier(&topo, 3, 1, 6);
    let params: PolicyParams = init_params(&arch, 11).unwrap();
    c.bench_function("simulate_realtime_60_steps", |b| {
        b.iter(|| {
            simulate_realtime(
                black_box(&params),
                &sens,
                &limits,
                1.0,
                black_box(&window),
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, batch_gradient, inner_qps, realtime_rollout);
criterion_main!(benches);
