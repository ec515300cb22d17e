//! Stochastic primal-dual training.
//!
//! Each iteration visits one scenario (or a small batch): the policy
//! parameters take an Adam step along the gradient of the per-scenario
//! Lagrangian, then the multipliers take a projected ascent step on the
//! constraint values at the new parameters, with a step size decaying as the
//! square root of the iteration count. The box constraint on setpoints never
//! appears here — the policy's scaled-tanh output satisfies it for free.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{ConstraintContext, SensitivityMatrices, VoltageLimits};
use crate::parallel;
use crate::policy::{init_params, Architecture, PolicyParams};
use crate::scenario::Scenario;

/// Multipliers for the stacked voltage constraints: upper band first, then
/// lower, `2N` entries total. Nonnegative at all times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVars {
    pub lambda: Vec<f64>,
}

impl DualVars {
    pub fn zeros(constraint_count: usize) -> Self {
        DualVars {
            lambda: vec![0.0; constraint_count],
        }
    }

    pub fn max(&self) -> f64 {
        self.lambda.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub primal_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Initial dual step; decays as `dual_step0 / (k+1)^dual_decay`.
    pub dual_step0: f64,
    pub dual_decay: f64,
    pub seed: u64,
    /// Visit scenarios in a fresh seeded order each epoch (on by default).
    pub epoch_reshuffle: bool,
    /// Scenario updates per parameter step; 1 recovers the pure stochastic
    /// iteration.
    pub batch_size: usize,
    /// Keep the full multiplier vector after every dual step.
    pub record_lambda: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            primal_lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dual_step0: 1.0,
            dual_decay: 0.5,
            seed: 0,
            epoch_reshuffle: true,
            batch_size: 1,
            record_lambda: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("primal_lr", self.primal_lr),
            ("epsilon", self.epsilon),
            ("dual_step0", self.dual_step0),
            ("batch_size", self.batch_size as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Contract(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Contract(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if !(self.dual_decay >= 0.0) {
            return Err(Error::Contract(format!(
                "dual_decay must be nonnegative, got {}",
                self.dual_decay
            )));
        }
        Ok(())
    }
}

/// Adam accumulators, shaped like the flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One training task: the feeder's sensitivity matrices and limits plus the
/// scenario set, with per-scenario contexts precomputed.
pub struct TrainingProblem<'a> {
    pub sens: &'a SensitivityMatrices,
    pub limits: &'a VoltageLimits,
    pub v0: f64,
    scenarios: &'a [Scenario],
    ctxs: Vec<ConstraintContext>,
}

impl<'a> TrainingProblem<'a> {
    pub fn new(
        sens: &'a SensitivityMatrices,
        limits: &'a VoltageLimits,
        v0: f64,
        scenarios: &'a [Scenario],
    ) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::Contract("scenario set is empty".into()));
        }
        let ctxs = parallel::map_collect(scenarios, |s| ConstraintContext::new(sens, &s.z, v0));
        Ok(TrainingProblem {
            sens,
            limits,
            v0,
            scenarios,
            ctxs,
        })
    }

    pub fn scenario_count(&self) -> usize {
        self.scenarios.len()
    }

    pub fn scenarios(&self) -> &[Scenario] {
        self.scenarios
    }

    pub fn context(&self, k: usize) -> &ConstraintContext {
        &self.ctxs[k]
    }

    /// Loss and constraint vector of scenario `k` under the current policy.
    pub fn scenario_terms(&self, params: &PolicyParams, k: usize) -> (f64, Vec<f64>) {
        let s = &self.scenarios[k];
        let q = params.forward(&s.w_u, &s.w_local);
        let loss = self.sens.losses(&self.ctxs[k], &q);
        let g = self.sens.constraint_g(&self.ctxs[k], &q, self.limits);
        (loss, g)
    }

    /// Sample-average Lagrangian `(1/K) Σ_k [ℓ_k + λ' g_k]`.
    pub fn lagrangian(&self, params: &PolicyParams, lambda: &DualVars) -> f64 {
        let terms = parallel::map_range(self.scenario_count(), |k| {
            let (loss, g) = self.scenario_terms(params, k);
            loss + dot(&lambda.lambda, &g)
        });
        terms.iter().sum::<f64>() / self.scenario_count() as f64
    }

    /// Gradient of the scenario-`k` Lagrangian term with respect to the
    /// flattened parameters: `J' (2 R π - b + X (λ_up - λ_lo))`.
    pub fn grad_theta(&self, params: &PolicyParams, lambda: &DualVars, k: usize) -> Vec<f64> {
        let s = &self.scenarios[k];
        let n = self.sens.bus_count();
        debug_assert_eq!(lambda.lambda.len(), 2 * n);
        let q = params.forward(&s.w_u, &s.w_local);
        let jac = params.jacobian(&s.w_u, &s.w_local);
        let qv = DVector::from_column_slice(&q);
        let lam_diff =
            DVector::from_fn(n, |i, _| lambda.lambda[i] - lambda.lambda[n + i]);
        let mut sens_vec = 2.0 * (&self.sens.r * qv) + &self.sens.x * lam_diff;
        for i in 0..n {
            sens_vec[i] -= self.ctxs[k].b[i];
        }
        let grad = jac.tr_mul(&sens_vec);
        grad.iter().copied().collect()
    }

    /// Average loss, average per-scenario max constraint, and count of
    /// scenarios with any violated constraint, at the current parameters.
    pub fn epoch_stats(&self, params: &PolicyParams) -> (f64, f64, usize) {
        let terms = parallel::map_range(self.scenario_count(), |k| {
            let (loss, g) = self.scenario_terms(params, k);
            let max_g = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (loss, max_g, (max_g > 0.0) as usize)
        });
        let k = self.scenario_count() as f64;
        let avg_loss = terms.iter().map(|t| t.0).sum::<f64>() / k;
        let avg_max_g = terms.iter().map(|t| t.1).sum::<f64>() / k;
        let violations = terms.iter().map(|t| t.2).sum();
        (avg_loss, avg_max_g, violations)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One Adam update with bias-corrected moments.
pub fn primal_step(theta: &mut [f64], state: &mut AdamState, grad: &[f64], cfg: &TrainConfig) {
    debug_assert_eq!(theta.len(), grad.len());
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= cfg.primal_lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Projected dual ascent `λ <- max(0, λ + μ(k) g)` with `μ(k) = dual_step0 /
/// (k+1)^dual_decay`; `k` counts scenario updates from the start of training.
pub fn dual_step(lambda: &mut DualVars, g: &[f64], k: usize, cfg: &TrainConfig) {
    debug_assert_eq!(lambda.lambda.len(), g.len());
    let mu = cfg.dual_step0 / ((k + 1) as f64).powf(cfg.dual_decay);
    for (l, &gi) in lambda.lambda.iter_mut().zip(g) {
        *l = (*l + mu * gi).max(0.0);
    }
}

/// Per-epoch snapshot of training progress, evaluated over the whole
/// scenario set at the epoch-end parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub avg_loss: f64,
    pub avg_max_g: f64,
    pub violations: usize,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochStats>,
    /// Full multiplier vector after every dual step, when recording is on.
    pub lambda_iterations: Vec<Vec<f64>>,
}

impl TrainingTrace {
    /// CSV with header `epoch,avg_loss,avg_max_g,violations,lambda_max`.
    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &self.epochs {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// CSV with header `iteration,lambda_0,...`; empty unless recording was
    /// enabled.
    pub fn write_lambda_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let width = self.lambda_iterations.first().map_or(0, Vec::len);
        let mut header = vec!["iteration".to_string()];
        header.extend((0..width).map(|i| format!("lambda_{i}")));
        writer.write_record(&header)?;
        for (it, lambda) in self.lambda_iterations.iter().enumerate() {
            writer.serialize((it, lambda))?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Runs `epochs` sweeps of stochastic primal-dual updates over the scenario
/// set and returns the trained parameters, final multipliers, and the trace.
/// Multipliers start at zero; parameters are drawn by [`init_params`] from
/// the config seed.
pub fn train(
    problem: &TrainingProblem,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, DualVars, TrainingTrace)> {
    cfg.validate()?;
    let mut params = init_params(arch, cfg.seed)?;
    let mut theta = params.to_flat();
    let mut adam = AdamState::new(theta.len());
    let mut lambda = DualVars::zeros(2 * problem.sens.bus_count());
    let mut trace = TrainingTrace::default();
    let count = problem.scenario_count();
    let mut order: Vec<usize> = (0..count).collect();
    let mut k_global = 0usize;

    for epoch in 0..cfg.epochs {
        if cfg.epoch_reshuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            let grads = parallel::map_collect(batch, |&k| {
                problem.grad_theta(&params, &lambda, k)
            });
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; theta.len()];
            for g in &grads {
                for (acc, &gi) in grad.iter_mut().zip(g) {
                    *acc += gi * scale;
                }
            }
            if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration: k_global,
                    scenario: batch[0],
                    detail: format!("gradient component {i} is {}", grad[i]),
                });
            }
            primal_step(&mut theta, &mut adam, &grad, cfg);
            params.set_flat(&theta)?;
            let gs = parallel::map_collect(batch, |&k| problem.scenario_terms(&params, k).1);
            let mut g_avg = vec![0.0; lambda.lambda.len()];
            for g in &gs {
                for (acc, &gi) in g_avg.iter_mut().zip(g) {
                    *acc += gi * scale;
                }
            }
            dual_step(&mut lambda, &g_avg, k_global, cfg);
            if cfg.record_lambda {
                trace.lambda_iterations.push(lambda.lambda.clone());
            }
            k_global += 1;
        }
        let (avg_loss, avg_max_g, violations) = problem.epoch_stats(&params);
        trace.epochs.push(EpochStats {
            epoch,
            avg_loss,
            avg_max_g,
            violations,
            lambda_max: lambda.max(),
        });
        if !avg_loss.is_finite() || avg_loss > 1e6 {
            return Err(Error::Divergence {
                iteration: k_global,
                scenario: 0,
                detail: format!("average loss reached {avg_loss} after epoch {epoch}"),
            });
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: k_global,
                scenario: 0,
                detail: format!("parameter {i} is {} after epoch {epoch}", theta[i]),
            });
        }
    }
    Ok((params, lambda, trace))
}
