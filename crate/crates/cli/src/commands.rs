//! The four pipeline commands. Each one reads the resolved [`RunConfig`],
//! does its work through the core library, writes its artifacts into the run
//! directory, and drops a manifest recording the config hash and seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use varnet_core::baselines::{
    deterministic_opf, dual_decomposition, no_control, DualDecompConfig, OpfConfig, QpInstance,
};
use varnet_core::eval::{
    compare, report_for_setpoints, simulate_realtime, write_reports_csv, write_reports_json,
    ComparisonTable, EvalReport, Method,
};
use varnet_core::feeder::{
    build_sensitivities, read_bus_list, FeederTopology, SensitivityMatrices, VoltageLimits,
};
use varnet_core::policy::{deserialize_params, serialize_params, Architecture, ModelMetadata};
use varnet_core::scenario::{
    augment, ingest_traces, scenarios_from_traces, write_traces_csv, AugmentConfig, InputMap,
    Scenario, TimeSeriesTrace,
};
use varnet_core::trainer::{train, TrainConfig, TrainingProblem};
use varnet_core::{Error, Result};

use crate::config::RunConfig;
use crate::fixture::{self, FixturePaths};
use crate::gen::{generate_traces, GenSpec};
use crate::manifest::Manifest;

/// Everything the training and evaluation commands need about the feeder.
struct FeederBundle {
    topology: FeederTopology,
    sens: SensitivityMatrices,
    limits: VoltageLimits,
    telemetry: Vec<usize>,
    map: InputMap,
}

fn load_bundle(cfg: &RunConfig) -> Result<FeederBundle> {
    let topology = FeederTopology::from_csv_files(&cfg.feeder, &cfg.inverters, cfg.v0)?;
    let telemetry = read_bus_list(&cfg.telemetry)?;
    let sens = build_sensitivities(&topology)?;
    let limits = VoltageLimits::uniform(topology.bus_count, cfg.v_lo, cfg.v_hi)?;
    let map = InputMap::new(&topology, &telemetry)?;
    Ok(FeederBundle {
        topology,
        sens,
        limits,
        telemetry,
        map,
    })
}

/// Builds one measured scenario per trace step of the whole horizon, then
/// keeps those whose minute falls in `[start_min, end_min)`. Synthesizing
/// reactive loads over the full horizon first means the train and test
/// windows come from one consistent realization of the day.
fn scenarios_in_window(
    cfg: &RunConfig,
    traces: &[TimeSeriesTrace],
    map: &InputMap,
    start_min: u64,
    end_min: u64,
) -> Result<Vec<Scenario>> {
    let all = scenarios_from_traces(traces, map, cfg.pf_lo, cfg.pf_hi, cfg.pf_seed)?;
    let timestamps = &traces[0].timestamps;
    let picked: Vec<Scenario> = all
        .into_iter()
        .filter(|s| {
            let minute = timestamps[s.source_index];
            minute >= start_min && minute < end_min
        })
        .collect();
    if picked.is_empty() {
        return Err(Error::Contract(format!(
            "no trace samples in minutes {start_min}..{end_min} \
             (traces cover {}..={})",
            timestamps.first().copied().unwrap_or(0),
            timestamps.last().copied().unwrap_or(0),
        )));
    }
    Ok(picked)
}

fn prepare_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn prepare_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Writes the bundled feeder fixture and a synthetic trace file.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    for path in [&cfg.feeder, &cfg.inverters, &cfg.telemetry, &cfg.solar, &cfg.traces] {
        prepare_parent(path)?;
    }
    prepare_dir(&cfg.run_dir)?;

    fixture::write_fixture(&FixturePaths {
        feeder: &cfg.feeder,
        inverters: &cfg.inverters,
        telemetry: &cfg.telemetry,
        solar: &cfg.solar,
    })?;
    let traces = generate_traces(&GenSpec {
        days: cfg.gen_days,
        step_minutes: cfg.gen_step_minutes,
        scale: cfg.gen_scale,
        seed: cfg.gen_seed,
    })?;
    write_traces_csv(&cfg.traces, &traces)?;
    Manifest::for_command("gen-data", cfg).write(&cfg.run_dir.join("manifest.json"))?;

    log::info!(
        "wrote feeder fixture ({} buses, {} inverters) and {} trace steps to {}",
        fixture::BUS_COUNT,
        fixture::INVERTERS.len(),
        traces[0].timestamps.len(),
        cfg.traces.display()
    );
    Ok(())
}

/// Trains the two-tier policy on the configured window and saves the model,
/// the scenario set, and per-epoch training statistics.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    prepare_dir(&cfg.run_dir)?;
    let bundle = load_bundle(cfg)?;
    let traces = ingest_traces(&cfg.traces, cfg.ingest_scale)?;
    let (start, end) = cfg.train_window();
    let measured = scenarios_in_window(cfg, &traces, &bundle.map, start, end)?;
    let set = augment(
        &measured,
        &AugmentConfig {
            replication_factor: cfg.replication,
            noise_std: cfg.noise_std,
            seed: cfg.augment_seed,
        },
        &bundle.map,
    )?;
    set.write_jsonl(&cfg.run_dir.join("scenarios.jsonl"))?;
    log::info!(
        "training on {} scenarios ({} measured x{} replication), minutes {start}..{end}",
        set.len(),
        measured.len(),
        cfg.replication
    );

    let arch = Architecture::two_tier(
        &bundle.topology,
        bundle.telemetry.len(),
        cfg.control_dim,
        cfg.hidden,
    );
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        primal_lr: cfg.primal_lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
        dual_step0: cfg.dual_step0,
        dual_decay: cfg.dual_decay,
        seed: cfg.train_seed,
        epoch_reshuffle: cfg.epoch_reshuffle,
        batch_size: cfg.batch_size,
        record_lambda: cfg.record_lambda,
    };
    let problem = TrainingProblem::new(&bundle.sens, &bundle.limits, cfg.v0, &set.scenarios)?;
    let (params, duals, trace) = train(&problem, &arch, &train_cfg)?;

    let model_path = cfg.model_path();
    prepare_parent(&model_path)?;
    serialize_params(
        &params,
        &ModelMetadata {
            train_window: (start, end),
            scenario_count: set.len(),
            epochs: cfg.epochs,
            seed: cfg.train_seed,
        },
        &model_path,
    )?;
    trace.write_epoch_csv(&cfg.run_dir.join("training_trace.csv"))?;
    if cfg.record_lambda {
        trace.write_lambda_csv(&cfg.run_dir.join("lambda_trace.csv"))?;
    }
    Manifest::for_command("train", cfg).write(&cfg.run_dir.join("manifest.json"))?;

    if let Some(last) = trace.epochs.last() {
        log::info!(
            "trained {} epochs: avg loss {:.6e}, avg max constraint {:.3e}, \
             {} violating scenarios, max multiplier {:.3e}",
            trace.epochs.len(),
            last.avg_loss,
            last.avg_max_g,
            last.violations,
            duals.max()
        );
    }
    log::info!("model saved to {}", model_path.display());
    Ok(())
}

/// Per-snapshot diagnostics of the exact OPF baseline.
#[derive(Debug, Serialize)]
struct OpfStepMeta {
    timestep: u64,
    iterations: usize,
    kkt_residual: f64,
    converged: bool,
    active_upper: Vec<usize>,
    active_lower: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct SolverMetadata {
    dual_decomposition: DdMeta,
    deterministic_opf: OpfMeta,
}

#[derive(Debug, Serialize)]
struct DdMeta {
    iterations: usize,
    feasibility: f64,
    complementarity: f64,
    converged: bool,
    lambda_max: f64,
    lambda: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct OpfMeta {
    total_iterations: usize,
    max_kkt_residual: f64,
    all_converged: bool,
    steps: Vec<OpfStepMeta>,
}

/// Scores the trained model against the three baselines on the test window
/// and writes the per-timestep reports, the comparison table, and solver
/// diagnostics.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    prepare_dir(&cfg.run_dir)?;
    let bundle = load_bundle(cfg)?;
    let traces = ingest_traces(&cfg.traces, cfg.ingest_scale)?;
    let (start, end) = cfg.test_window();
    let scenarios = scenarios_in_window(cfg, &traces, &bundle.map, start, end)?;
    log::info!(
        "evaluating on {} test scenarios, minutes {start}..{end}",
        scenarios.len()
    );

    let model_path = cfg.model_path();
    let (params, metadata) = deserialize_params(&model_path)?;
    params.check_compatible(&bundle.topology)?;
    log::info!(
        "loaded model from {} (trained on minutes {}..{}, {} scenarios)",
        model_path.display(),
        metadata.train_window.0,
        metadata.train_window.1,
        metadata.scenario_count
    );

    let dnn_report =
        simulate_realtime(&params, &bundle.sens, &bundle.limits, cfg.v0, &scenarios)?;

    let qbar = bundle.topology.qbar();
    let dd = dual_decomposition(
        &bundle.sens,
        &bundle.limits,
        cfg.v0,
        &qbar,
        &scenarios,
        &DualDecompConfig {
            max_iters: cfg.dd_max_iters,
            dual_step0: cfg.dd_step0,
            tol: cfg.dd_tol,
            ..DualDecompConfig::default()
        },
    )?;
    log::info!(
        "optimal policy: {} dual iterations, feasibility {:.3e}, complementarity {:.3e}",
        dd.iterations,
        dd.feasibility,
        dd.complementarity
    );
    let inverter_count = bundle.topology.inverters.len();
    let optimal_report = report_for_setpoints(
        Method::OptimalPolicy,
        &bundle.sens,
        &bundle.limits,
        cfg.v0,
        &scenarios,
        &dd.setpoints,
        inverter_count,
    )?;

    let opf_cfg = OpfConfig {
        tol: cfg.opf_tol,
        ..OpfConfig::default()
    };
    let mut opf_setpoints = Vec::with_capacity(scenarios.len());
    let mut opf_steps = Vec::with_capacity(scenarios.len());
    for (t, s) in scenarios.iter().enumerate() {
        let inst = QpInstance::new(&bundle.sens, &bundle.limits, &s.z, cfg.v0, qbar.clone())?;
        let outcome = deterministic_opf(&inst, &opf_cfg)?;
        opf_steps.push(OpfStepMeta {
            timestep: t as u64,
            iterations: outcome.iterations,
            kkt_residual: outcome.kkt_residual,
            converged: outcome.converged,
            active_upper: outcome.active_upper,
            active_lower: outcome.active_lower,
        });
        opf_setpoints.push(outcome.q);
    }
    let opf_report = report_for_setpoints(
        Method::DeterministicOpf,
        &bundle.sens,
        &bundle.limits,
        cfg.v0,
        &scenarios,
        &opf_setpoints,
        inverter_count,
    )?;

    let idle: Vec<Vec<f64>> = scenarios.iter().map(|s| no_control(&s.z)).collect();
    let no_control_report = report_for_setpoints(
        Method::NoControl,
        &bundle.sens,
        &bundle.limits,
        cfg.v0,
        &scenarios,
        &idle,
        inverter_count,
    )?;

    let reports = vec![dnn_report, optimal_report, opf_report, no_control_report];
    write_reports_csv(&reports, &cfg.run_dir.join("report.csv"))?;
    write_reports_json(&reports, &cfg.run_dir.join("report.json"))?;

    let table = compare(&reports)?;
    table.write_csv(&cfg.run_dir.join("comparison.csv"))?;

    let solver_meta = SolverMetadata {
        dual_decomposition: DdMeta {
            iterations: dd.iterations,
            feasibility: dd.feasibility,
            complementarity: dd.complementarity,
            converged: dd.converged,
            lambda_max: dd.lambda.iter().copied().fold(0.0, f64::max),
            lambda: dd.lambda,
        },
        deterministic_opf: OpfMeta {
            total_iterations: opf_steps.iter().map(|s| s.iterations).sum(),
            max_kkt_residual: opf_steps.iter().fold(0.0, |m, s| s.kkt_residual.max(m)),
            all_converged: opf_steps.iter().all(|s| s.converged),
            steps: opf_steps,
        },
    };
    let file = std::fs::File::create(cfg.run_dir.join("solver_metadata.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &solver_meta)?;

    Manifest::for_command("evaluate", cfg).write(&cfg.run_dir.join("manifest.json"))?;

    print!("{}", render_table(&table));
    log::info!("reports written to {}", cfg.run_dir.display());
    Ok(())
}

/// Merges previously written per-timestep reports into one comparison table.
pub fn cmd_compare(cfg: &RunConfig, report_paths: &[PathBuf]) -> Result<()> {
    let default_path = cfg.run_dir.join("report.csv");
    let paths: Vec<PathBuf> = if report_paths.is_empty() {
        vec![default_path]
    } else {
        report_paths.to_vec()
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in &paths {
        for report in varnet_core::eval::read_reports_csv(path)? {
            if reports.iter().any(|r| r.method == report.method) {
                return Err(Error::Contract(format!(
                    "method {} appears in more than one report file",
                    report.method
                )));
            }
            reports.push(report);
        }
    }
    let table = compare(&reports)?;
    prepare_dir(&cfg.run_dir)?;
    table.write_csv(&cfg.run_dir.join("comparison.csv"))?;
    print!("{}", render_table(&table));
    Ok(())
}

/// Plain-text rendering of the comparison table, reference method starred.
fn render_table(table: &ComparisonTable) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<20} {:>13} {:>13} {:>11} {:>17} {:>11}",
        "method", "avg_loss", "loss_gap", "violations", "violation_energy", "comm_bytes"
    )
    .expect("string write");
    for row in &table.rows {
        let mark = if row.method == table.reference { "*" } else { "" };
        writeln!(
            out,
            "{:<20} {:>13.4e} {:>13.4e} {:>11} {:>17.4e} {:>11}",
            format!("{}{mark}", row.method),
            row.avg_loss,
            row.loss_gap,
            row.total_violations,
            row.total_violation_energy,
            row.total_comm_bytes
        )
        .expect("string write");
    }
    writeln!(out, "(* gap reference)").expect("string write");
    out
}
