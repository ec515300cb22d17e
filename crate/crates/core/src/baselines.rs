//! Comparison solvers: per-scenario box QPs, the unparameterized optimal
//! policy by dual decomposition, a deterministic per-snapshot OPF, and the
//! no-control baseline.
//!
//! All of them reuse the same projected-gradient box-QP kernel. Its step
//! size comes from the spectral bound of the loss Hessian, so iterations
//! descend monotonically and the fixed-point residual doubles as a KKT
//! certificate.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::feeder::{ConstraintContext, GridConditions, SensitivityMatrices, VoltageLimits};
use crate::parallel;
use crate::scenario::Scenario;

/// One box-constrained QP: minimize `q' R q - b' q + λ' g(q)` over
/// `|q_n| ≤ qbar_n`, where `g` is the affine voltage-band constraint.
/// Non-inverter buses carry `qbar_n = 0` and stay pinned at zero.
#[derive(Debug, Clone)]
pub struct QpInstance<'a> {
    pub sens: &'a SensitivityMatrices,
    pub limits: &'a VoltageLimits,
    pub ctx: ConstraintContext,
    pub qbar: Vec<f64>,
    /// Multipliers baked into the objective, used when the caller does not
    /// pass any to [`solve_box_qp`].
    pub fixed_lambda: Option<Vec<f64>>,
    step: f64,
}

impl<'a> QpInstance<'a> {
    pub fn new(
        sens: &'a SensitivityMatrices,
        limits: &'a VoltageLimits,
        z: &GridConditions,
        v0: f64,
        qbar: Vec<f64>,
    ) -> Result<Self> {
        let n = sens.bus_count();
        if qbar.len() != n {
            return Err(Error::Contract(format!(
                "qbar has {} entries for {} buses",
                qbar.len(),
                n
            )));
        }
        if let Some(bad) = qbar.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract(format!(
                "setpoint bounds must be finite and nonnegative, got {bad}"
            )));
        }
        if limits.v_hi.len() != n {
            return Err(Error::Contract(format!(
                "limits have {} entries for {} buses",
                limits.v_hi.len(),
                n
            )));
        }
        let eig = SymmetricEigen::new(sens.r.clone());
        let lam_max = eig.eigenvalues.max();
        let lam_min = eig.eigenvalues.min();
        if lam_min < -1e-10 * lam_max.max(1.0) {
            return Err(Error::Contract(format!(
                "loss matrix is not positive semidefinite (min eigenvalue {lam_min})"
            )));
        }
        Ok(QpInstance {
            sens,
            limits,
            ctx: ConstraintContext::new(sens, z, v0),
            qbar,
            fixed_lambda: None,
            step: 1.0 / (2.0 * lam_max + 1e-9),
        })
    }

    pub fn with_fixed_lambda(mut self, lambda: Vec<f64>) -> Result<Self> {
        check_multipliers(&lambda, self.sens.bus_count())?;
        self.fixed_lambda = Some(lambda);
        Ok(self)
    }

    /// Full objective `ℓ(q) + λ' g(q)`.
    pub fn objective(&self, q: &[f64], lambda: &[f64]) -> f64 {
        let g = self.sens.constraint_g(&self.ctx, q, self.limits);
        let penalty: f64 = lambda.iter().zip(&g).map(|(l, gi)| l * gi).sum();
        self.sens.losses(&self.ctx, q) + penalty
    }
}

fn check_multipliers(lambda: &[f64], bus_count: usize) -> Result<()> {
    if lambda.len() != 2 * bus_count {
        return Err(Error::Contract(format!(
            "{} multipliers for {} stacked constraints",
            lambda.len(),
            2 * bus_count
        )));
    }
    if let Some(bad) = lambda.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!(
            "multipliers must be finite and nonnegative, got {bad}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpConfig {
    /// Fixed-point residual below which the solve stops.
    pub tol: f64,
    pub max_iters: usize,
    /// Keep the objective value after every iteration (for descent checks).
    pub record_objective: bool,
}

impl Default for QpConfig {
    fn default() -> Self {
        QpConfig {
            tol: 1e-8,
            max_iters: 100_000,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub q: Vec<f64>,
    /// Objective `ℓ(q) + λ' g(q)` at the returned point; this is the dual
    /// function value when `q` solves the inner problem.
    pub objective: f64,
    pub iterations: usize,
    /// `max_n |q_n - clamp(q_n - ∂f/∂q_n)|` — zero exactly at a KKT point of
    /// the box problem.
    pub residual: f64,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

/// Solves the instance from a cold start with default settings. `lambda`
/// overrides the instance's `fixed_lambda`; with neither, multipliers are
/// zero.
pub fn solve_box_qp(inst: &QpInstance, lambda: Option<&[f64]>) -> Result<QpSolution> {
    let n = inst.sens.bus_count();
    solve_box_qp_from(inst, lambda, &vec![0.0; n], &QpConfig::default())
}

/// Projected-gradient solve warm-started at `q0` (clamped into the box).
pub fn solve_box_qp_from(
    inst: &QpInstance,
    lambda: Option<&[f64]>,
    q0: &[f64],
    cfg: &QpConfig,
) -> Result<QpSolution> {
    let n = inst.sens.bus_count();
    let zeros = vec![0.0; 2 * n];
    let lam: &[f64] = match (lambda, &inst.fixed_lambda) {
        (Some(l), _) => l,
        (None, Some(l)) => l,
        (None, None) => &zeros,
    };
    check_multipliers(lam, n)?;
    if q0.len() != n {
        return Err(Error::Contract(format!(
            "warm start has {} entries for {} buses",
            q0.len(),
            n
        )));
    }

    // linear coefficient of the gradient: -b + X (λ_up - λ_lo)
    let lam_diff = DVector::from_fn(n, |i, _| lam[i] - lam[n + i]);
    let mut lin = &inst.sens.x * lam_diff;
    for i in 0..n {
        lin[i] -= inst.ctx.b[i];
    }

    let clamp = |v: f64, bound: f64| v.max(-bound).min(bound);
    let mut q = DVector::from_fn(n, |i, _| clamp(q0[i], inst.qbar[i]));
    let mut trace = Vec::new();
    if cfg.record_objective {
        trace.push(inst.objective(q.as_slice(), lam));
    }
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let grad = 2.0 * (&inst.sens.r * &q) + &lin;
        residual = (0..n)
            .map(|i| (q[i] - clamp(q[i] - grad[i], inst.qbar[i])).abs())
            .fold(0.0, f64::max);
        if residual < cfg.tol {
            converged = true;
            break;
        }
        for i in 0..n {
            q[i] = clamp(q[i] - inst.step * grad[i], inst.qbar[i]);
        }
        iterations += 1;
        if cfg.record_objective {
            trace.push(inst.objective(q.as_slice(), lam));
        }
    }
    if !converged {
        log::warn!("box QP hit the {} iteration cap with residual {residual}", cfg.max_iters);
    }
    let q: Vec<f64> = q.iter().copied().collect();
    let objective = inst.objective(&q, lam);
    Ok(QpSolution {
        q,
        objective,
        iterations,
        residual,
        converged,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualDecompConfig {
    pub max_iters: usize,
    pub dual_step0: f64,
    pub dual_decay: f64,
    /// Stop when both the averaged-constraint violation and the
    /// complementarity measure fall below this.
    pub tol: f64,
    pub inner: QpConfig,
}

impl Default for DualDecompConfig {
    fn default() -> Self {
        DualDecompConfig {
            max_iters: 20_000,
            dual_step0: 1.0,
            dual_decay: 0.5,
            tol: 1e-6,
            inner: QpConfig::default(),
        }
    }
}

/// Progress of the shared-multiplier iteration, one row per dual step.
#[derive(Debug, Clone, PartialEq)]
pub struct DualIterStats {
    pub iteration: usize,
    /// `max_i max(0, avg_k g_i)` — violation of the averaged constraint.
    pub feasibility: f64,
    /// `max_i |λ_i · avg_k g_i|`.
    pub complementarity: f64,
    pub lambda_max: f64,
}

/// Converged state of the optimal-policy baseline: shared multipliers and
/// the per-scenario setpoints that minimize each inner Lagrangian.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPolicyState {
    pub lambda: Vec<f64>,
    pub setpoints: Vec<Vec<f64>>,
    pub iterations: usize,
    pub feasibility: f64,
    pub complementarity: f64,
    pub converged: bool,
    pub trace: Vec<DualIterStats>,
}

/// Solves the sample-averaged OPF over the scenario set by dual
/// decomposition: per-scenario box QPs under shared multipliers, then a
/// projected ascent step on the averaged constraint with step
/// `dual_step0 / (k+1)^dual_decay`.
pub fn dual_decomposition(
    sens: &SensitivityMatrices,
    limits: &VoltageLimits,
    v0: f64,
    qbar: &[f64],
    scenarios: &[Scenario],
    cfg: &DualDecompConfig,
) -> Result<OptimalPolicyState> {
    if scenarios.is_empty() {
        return Err(Error::Contract("scenario set is empty".into()));
    }
    let n = sens.bus_count();
    let count = scenarios.len();
    let instances = scenarios
        .iter()
        .map(|s| QpInstance::new(sens, limits, &s.z, v0, qbar.to_vec()))
        .collect::<Result<Vec<_>>>()?;

    let mut lambda = vec![0.0; 2 * n];
    let mut setpoints = vec![vec![0.0; n]; count];
    let mut trace = Vec::new();
    let mut feasibility = f64::INFINITY;
    let mut complementarity = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for k in 0..cfg.max_iters {
        iterations = k + 1;
        let solved = parallel::map_range(count, |i| {
            solve_box_qp_from(&instances[i], Some(&lambda), &setpoints[i], &cfg.inner)
        });
        let mut avg_g = vec![0.0; 2 * n];
        for (i, sol) in solved.into_iter().enumerate() {
            let sol = sol?;
            let g = sens.constraint_g(&instances[i].ctx, &sol.q, limits);
            for (acc, gi) in avg_g.iter_mut().zip(g) {
                *acc += gi / count as f64;
            }
            setpoints[i] = sol.q;
        }
        if avg_g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: k,
                scenario: 0,
                detail: "averaged constraint is non-finite".into(),
            });
        }
        feasibility = avg_g.iter().fold(0.0, |m: f64, &g| m.max(g.max(0.0)));
        complementarity = lambda
            .iter()
            .zip(&avg_g)
            .fold(0.0, |m: f64, (&l, &g)| m.max((l * g).abs()));
        trace.push(DualIterStats {
            iteration: k,
            feasibility,
            complementarity,
            lambda_max: lambda.iter().copied().fold(0.0, f64::max),
        });
        if feasibility < cfg.tol && complementarity < cfg.tol {
            converged = true;
            break;
        }
        let mu = cfg.dual_step0 / ((k + 1) as f64).powf(cfg.dual_decay);
        for (l, &g) in lambda.iter_mut().zip(&avg_g) {
            *l = (*l + mu * g).max(0.0);
        }
    }
    if !converged {
        log::warn!(
            "dual decomposition hit the {} iteration cap (feasibility {feasibility}, \
             complementarity {complementarity})",
            cfg.max_iters
        );
    }
    Ok(OptimalPolicyState {
        lambda,
        setpoints,
        iterations,
        feasibility,
        complementarity,
        converged,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpfConfig {
    /// KKT tolerance: primal feasibility, complementarity, and the inner
    /// fixed-point residual must all fall below this.
    pub tol: f64,
    pub max_iters: usize,
    pub inner: QpConfig,
    /// Extra margin on the dual step's spectral bound; the bound is exact
    /// only while the box is slack, so the step is shrunk by this factor.
    pub step_safety: f64,
    /// Multiplier magnitude beyond which the instance is declared
    /// infeasible (heuristic: feasible instances keep bounded multipliers).
    pub infeasible_lambda: f64,
    /// Declare infeasibility when the best feasibility residual has not
    /// improved by 0.1% over this many iterations while still far from tol.
    pub stall_window: usize,
}

impl Default for OpfConfig {
    fn default() -> Self {
        OpfConfig {
            tol: 1e-8,
            max_iters: 200_000,
            inner: QpConfig {
                tol: 1e-9,
                ..QpConfig::default()
            },
            step_safety: 4.0,
            infeasible_lambda: 1e6,
            stall_window: 25_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpfOutcome {
    pub q: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Loss value `ℓ(q)` at the minimizer (no multiplier terms).
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Buses whose upper/lower voltage constraint is within 1e-6 of binding.
    pub active_upper: Vec<usize>,
    pub active_lower: Vec<usize>,
    pub converged: bool,
}

/// Solves one snapshot's OPF exactly by projected gradient ascent on the
/// multipliers with warm-started inner box QPs. The dual step is constant,
/// from the spectral bound of the dual curvature `X (2R)^-1 X`.
pub fn deterministic_opf(inst: &QpInstance, cfg: &OpfConfig) -> Result<OpfOutcome> {
    let n = inst.sens.bus_count();
    let chol = Cholesky::new(2.0 * inst.sens.r.clone()).ok_or_else(|| {
        Error::Contract("loss matrix is singular; dual curvature is unbounded".into())
    })?;
    let a = &inst.sens.x * chol.solve(&inst.sens.x);
    let a = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let curvature = 2.0 * SymmetricEigen::new(a).eigenvalues.max();
    let step = 1.0 / (cfg.step_safety * curvature + 1e-9);

    let mut lambda = vec![0.0; 2 * n];
    let mut q = vec![0.0; n];
    let mut best_feasibility = f64::INFINITY;
    let mut last_improvement = 0usize;
    let mut kkt_residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut g = vec![0.0; 2 * n];

    for k in 0..cfg.max_iters {
        iterations = k + 1;
        let sol = solve_box_qp_from(inst, Some(&lambda), &q, &cfg.inner)?;
        q = sol.q;
        g = inst.sens.constraint_g(&inst.ctx, &q, inst.limits);
        let feasibility = g.iter().fold(0.0, |m: f64, &gi| m.max(gi.max(0.0)));
        let complementarity = lambda
            .iter()
            .zip(&g)
            .fold(0.0, |m: f64, (&l, &gi)| m.max((l * gi).abs()));
        kkt_residual = feasibility.max(complementarity).max(sol.residual);
        if kkt_residual < cfg.tol {
            converged = true;
            break;
        }
        if feasibility < best_feasibility * 0.999 {
            best_feasibility = feasibility;
            last_improvement = k;
        }
        let lambda_max = lambda.iter().copied().fold(0.0, f64::max);
        let stalled = k - last_improvement > cfg.stall_window && feasibility > 1e3 * cfg.tol;
        if lambda_max > cfg.infeasible_lambda || stalled {
            return Err(Error::Infeasible(format!(
                "dual ascent is not closing the voltage-band violation \
                 (residual {feasibility}, max multiplier {lambda_max} after {k} iterations); \
                 the band is likely unreachable for this snapshot"
            )));
        }
        for (l, &gi) in lambda.iter_mut().zip(&g) {
            *l = (*l + step * gi).max(0.0);
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: k,
                scenario: 0,
                detail: "multipliers became non-finite".into(),
            });
        }
    }
    if !converged {
        log::warn!(
            "snapshot OPF hit the {} iteration cap with KKT residual {kkt_residual}",
            cfg.max_iters
        );
    }
    let active = |block: &[f64]| -> Vec<usize> {
        block
            .iter()
            .enumerate()
            .filter(|(_, &gi)| gi > -1e-6)
            .map(|(i, _)| i + 1)
            .collect()
    };
    Ok(OpfOutcome {
        objective: inst.sens.losses(&inst.ctx, &q),
        q,
        lambda,
        iterations,
        kkt_residual,
        active_upper: active(&g[..n]),
        active_lower: active(&g[n..]),
        converged,
    })
}

/// Unit-power-factor baseline: every inverter holds zero reactive output.
pub fn no_control(z: &GridConditions) -> Vec<f64> {
    vec![0.0; z.bus_count()]
}
