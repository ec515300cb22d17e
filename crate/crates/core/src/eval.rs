//! Real-time rollout of a trained policy over a test window, baseline
//! rollouts, and the comparison table.
//!
//! The policy rollout consumes only the measurable inputs (`w_u`,
//! `w_local`); the full grid conditions `z` enter exclusively through the
//! metrics, mirroring the information boundary of real-time operation. Per
//! timestep the utility downlink is just the broadcast signal — `d_u`
//! scalars — while the setpoint-shipping baselines pay one scalar per
//! inverter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{ConstraintContext, SensitivityMatrices, VoltageLimits};
use crate::parallel;
use crate::policy::PolicyParams;
use crate::scenario::Scenario;

pub const BYTES_PER_SCALAR: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DnnPolicy,
    OptimalPolicy,
    DeterministicOpf,
    NoControl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DnnPolicy => "dnn_policy",
            Method::OptimalPolicy => "optimal_policy",
            Method::DeterministicOpf => "deterministic_opf",
            Method::NoControl => "no_control",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One timestep of one method's rollout. Field order fixes the CSV header:
/// `timestep,method,loss,vmax,vmin,violations,violation_energy,comm_bytes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub timestep: u64,
    pub method: Method,
    pub loss: f64,
    pub vmax: f64,
    pub vmin: f64,
    /// Buses outside the band at this step.
    pub violations: usize,
    /// Sum over buses of the excursion past either limit, in pu.
    pub violation_energy: f64,
    pub comm_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub records: Vec<StepRecord>,
    pub avg_loss: f64,
    pub total_violations: usize,
    pub total_violation_energy: f64,
    pub total_comm_bytes: u64,
    /// `max_i max(0, avg_t g_i)` — violation of the time-averaged voltage
    /// constraint. Not recoverable from the flat CSV, hence optional.
    pub avg_constraint_residual: Option<f64>,
}

fn build_report(
    method: Method,
    sens: &SensitivityMatrices,
    limits: &VoltageLimits,
    v0: f64,
    scenarios: &[Scenario],
    setpoints: &[Vec<f64>],
    comm_bytes_per_step: u64,
) -> EvalReport {
    assert_eq!(
        scenarios.len(),
        setpoints.len(),
        "one setpoint vector per timestep required"
    );
    let n = sens.bus_count();
    let per_step = parallel::map_range(scenarios.len(), |t| {
        let s = &scenarios[t];
        let q = &setpoints[t];
        let ctx = ConstraintContext::new(sens, &s.z, v0);
        let v = sens.predict_voltages(&s.z, q, v0);
        let g = sens.constraint_g(&ctx, q, limits);
        let mut violations = 0;
        let mut energy = 0.0;
        for i in 0..n {
            let over = (v[i] - limits.v_hi[i]).max(0.0);
            let under = (limits.v_lo[i] - v[i]).max(0.0);
            if over > 0.0 || under > 0.0 {
                violations += 1;
            }
            energy += over + under;
        }
        let record = StepRecord {
            timestep: t as u64,
            method,
            loss: sens.losses(&ctx, q),
            vmax: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            vmin: v.iter().copied().fold(f64::INFINITY, f64::min),
            violations,
            violation_energy: energy,
            comm_bytes: comm_bytes_per_step,
        };
        (record, g)
    });

    let count = per_step.len() as f64;
    let mut avg_g = vec![0.0; 2 * n];
    let mut records = Vec::with_capacity(per_step.len());
    for (record, g) in per_step {
        for (acc, gi) in avg_g.iter_mut().zip(g) {
            *acc += gi / count;
        }
        records.push(record);
    }
    let residual = avg_g.iter().fold(0.0, |m: f64, &g| m.max(g.max(0.0)));
    EvalReport {
        method,
        avg_loss: records.iter().map(|r| r.loss).sum::<f64>() / count,
        total_violations: records.iter().map(|r| r.violations).sum(),
        total_violation_energy: records.iter().map(|r| r.violation_energy).sum(),
        total_comm_bytes: records.iter().map(|r| r.comm_bytes).sum(),
        avg_constraint_residual: Some(residual),
        records,
    }
}

/// Rolls the trained policy over the test window. Control actions come from
/// `w_u` and `w_local` alone; `z` is touched only by the metrics. Downlink
/// per timestep is the broadcast signal: `d_u` scalars of 8 bytes.
pub fn simulate_realtime(
    params: &PolicyParams,
    sens: &SensitivityMatrices,
    limits: &VoltageLimits,
    v0: f64,
    scenarios: &[Scenario],
) -> Result<EvalReport> {
    if scenarios.is_empty() {
        return Err(Error::Contract("test window is empty".into()));
    }
    if params.arch.bus_count != sens.bus_count() {
        return Err(Error::ModelMismatch(format!(
            "model trained for {} buses, feeder has {}",
            params.arch.bus_count,
            sens.bus_count()
        )));
    }
    for s in scenarios {
        if s.w_u.len() != params.arch.utility_input_dim() {
            return Err(Error::ModelMismatch(format!(
                "model expects {} telemetry inputs, scenario carries {}",
                params.arch.utility_input_dim(),
                s.w_u.len()
            )));
        }
        if s.w_local.len() != params.arch.inverters.len() {
            return Err(Error::ModelMismatch(format!(
                "model has {} inverter heads, scenario carries {} local readings",
                params.arch.inverters.len(),
                s.w_local.len()
            )));
        }
    }
    let setpoints = parallel::map_collect(scenarios, |s| params.forward(&s.w_u, &s.w_local));
    let comm = params.arch.control_dim() as u64 * BYTES_PER_SCALAR;
    Ok(build_report(
        Method::DnnPolicy,
        sens,
        limits,
        v0,
        scenarios,
        &setpoints,
        comm,
    ))
}

/// Scores precomputed per-timestep setpoints (the baselines). Setpoint
/// shipping costs `inverter_count` scalars per timestep, except the inert
/// baseline which sends nothing.
pub fn report_for_setpoints(
    method: Method,
    sens: &SensitivityMatrices,
    limits: &VoltageLimits,
    v0: f64,
    scenarios: &[Scenario],
    setpoints: &[Vec<f64>],
    inverter_count: usize,
) -> Result<EvalReport> {
    if method == Method::DnnPolicy {
        return Err(Error::Contract(
            "policy rollouts go through simulate_realtime".into(),
        ));
    }
    if scenarios.is_empty() {
        return Err(Error::Contract("test window is empty".into()));
    }
    if scenarios.len() != setpoints.len() {
        return Err(Error::Contract(format!(
            "{} setpoint vectors for {} timesteps",
            setpoints.len(),
            scenarios.len()
        )));
    }
    let comm = match method {
        Method::NoControl => 0,
        _ => inverter_count as u64 * BYTES_PER_SCALAR,
    };
    Ok(build_report(
        method, sens, limits, v0, scenarios, setpoints, comm,
    ))
}

/// One line of the side-by-side summary. `loss_gap` is relative to the
/// reference method when its average loss is away from zero, absolute
/// otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub avg_loss: f64,
    pub loss_gap: f64,
    pub total_violations: usize,
    pub total_violation_energy: f64,
    pub total_comm_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub reference: Method,
    pub rows: Vec<ComparisonRow>,
}

/// Builds the summary table. The gap reference is the optimal policy when
/// present, otherwise the per-snapshot OPF.
pub fn compare(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to compare".into()));
    }
    let timesteps: Vec<u64> = reports[0].records.iter().map(|r| r.timestep).collect();
    for r in &reports[1..] {
        let other: Vec<u64> = r.records.iter().map(|x| x.timestep).collect();
        if other != timesteps {
            return Err(Error::Contract(format!(
                "report windows differ: {} covers {} timesteps, {} covers {}",
                reports[0].method,
                timesteps.len(),
                r.method,
                other.len()
            )));
        }
    }
    let reference = [Method::OptimalPolicy, Method::DeterministicOpf]
        .into_iter()
        .find(|m| reports.iter().any(|r| r.method == *m))
        .unwrap_or(reports[0].method);
    let ref_loss = reports
        .iter()
        .find(|r| r.method == reference)
        .expect("reference picked from present methods")
        .avg_loss;
    let rows = reports
        .iter()
        .map(|r| {
            let diff = r.avg_loss - ref_loss;
            let loss_gap = if ref_loss.abs() > 1e-12 {
                diff / ref_loss.abs()
            } else {
                diff
            };
            ComparisonRow {
                method: r.method,
                avg_loss: r.avg_loss,
                loss_gap,
                total_violations: r.total_violations,
                total_violation_energy: r.total_violation_energy,
                total_comm_bytes: r.total_comm_bytes,
            }
        })
        .collect();
    Ok(ComparisonTable { reference, rows })
}

impl ComparisonTable {
    /// CSV with header
    /// `method,avg_loss,loss_gap,total_violations,total_violation_energy,total_comm_bytes`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows: Vec<ComparisonRow> = reader
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        let reference = [Method::OptimalPolicy, Method::DeterministicOpf]
            .into_iter()
            .find(|m| rows.iter().any(|r| r.method == *m))
            .or_else(|| rows.first().map(|r| r.method))
            .ok_or_else(|| Error::Contract("comparison table is empty".into()))?;
        Ok(ComparisonTable { reference, rows })
    }
}

/// Writes every report's records into one flat CSV, grouped by report.
pub fn write_reports_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for report in reports {
        for record in &report.records {
            writer.serialize(record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads a flat records CSV back into one report per method, in first-seen
/// order, recomputing the aggregates. The averaged-constraint residual is
/// not stored in the CSV and comes back as `None`.
pub fn read_reports_csv(path: &Path) -> Result<Vec<EvalReport>> {
    let mut reader = csv::Reader::from_path(path)?;
    let records: Vec<StepRecord> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let mut order: Vec<Method> = Vec::new();
    for r in &records {
        if !order.contains(&r.method) {
            order.push(r.method);
        }
    }
    let reports = order
        .into_iter()
        .map(|method| {
            let rows: Vec<StepRecord> = records
                .iter()
                .filter(|r| r.method == method)
                .cloned()
                .collect();
            let count = rows.len() as f64;
            EvalReport {
                method,
                avg_loss: rows.iter().map(|r| r.loss).sum::<f64>() / count,
                total_violations: rows.iter().map(|r| r.violations).sum(),
                total_violation_energy: rows.iter().map(|r| r.violation_energy).sum(),
                total_comm_bytes: rows.iter().map(|r| r.comm_bytes).sum(),
                avg_constraint_residual: None,
                records: rows,
            }
        })
        .collect();
    Ok(reports)
}

pub fn write_reports_json(reports: &[EvalReport], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), reports)?;
    Ok(())
}

pub fn read_reports_json(path: &Path) -> Result<Vec<EvalReport>> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
