//! Linearized model of a radial distribution feeder.
//!
//! Buses are numbered `0..=N` with bus 0 the substation; vectors and matrices
//! over the `N` downstream buses use index `bus - 1`. All quantities are per
//! unit. Bus voltages are approximated as affine in the power injections via
//! a pair of sensitivity matrices assembled from path impedances, which keeps
//! voltage prediction, the voltage-band constraint, and the ohmic-loss
//! surrogate cheap enough to evaluate inside training loops.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One distribution line with per-unit impedance. Direction is cosmetic;
/// lines are oriented away from the substation during validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
}

/// A solar inverter and the reactive-power headroom it can offer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inverter {
    pub bus: usize,
    pub qbar_pu: f64,
}

/// A radial feeder: `bus_count` downstream buses, one line per bus, and the
/// set of controllable inverters. Constructed through [`FeederTopology::new`],
/// which checks the tree structure.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederTopology {
    /// Number of buses excluding the substation.
    pub bus_count: usize,
    pub lines: Vec<Line>,
    /// Inverters sorted by bus id.
    pub inverters: Vec<Inverter>,
    /// Substation (slack) voltage in pu.
    pub substation_voltage: f64,
}

impl FeederTopology {
    /// Validates that the lines form a tree rooted at bus 0 covering buses
    /// `1..=lines.len()`, with positive impedances and positive inverter
    /// limits. Inverters are sorted by bus id.
    pub fn new(
        lines: Vec<Line>,
        mut inverters: Vec<Inverter>,
        substation_voltage: f64,
    ) -> Result<Self> {
        let topo = FeederTopology {
            bus_count: lines.len(),
            lines,
            inverters: Vec::new(),
            substation_voltage,
        };
        topo.tree()?;
        inverters.sort_by_key(|inv| inv.bus);
        for pair in inverters.windows(2) {
            if pair[0].bus == pair[1].bus {
                return Err(Error::Topology(format!(
                    "duplicate inverter at bus {}",
                    pair[0].bus
                )));
            }
        }
        for inv in &inverters {
            if inv.bus == 0 || inv.bus > topo.bus_count {
                return Err(Error::Topology(format!(
                    "inverter bus {} is not a downstream bus (1..={})",
                    inv.bus, topo.bus_count
                )));
            }
            if !(inv.qbar_pu > 0.0) {
                return Err(Error::Topology(format!(
                    "inverter at bus {} needs a positive limit, got {}",
                    inv.bus, inv.qbar_pu
                )));
            }
        }
        Ok(FeederTopology { inverters, ..topo })
    }

    /// Loads a feeder from the two CSV files: lines (`from,to,r_pu,x_pu`) and
    /// inverters (`bus,qbar_pu`).
    pub fn from_csv_files(
        line_path: &Path,
        inverter_path: &Path,
        substation_voltage: f64,
    ) -> Result<Self> {
        let lines = read_lines_csv(line_path)?;
        let inverters = read_inverters_csv(inverter_path)?;
        FeederTopology::new(lines, inverters, substation_voltage)
    }

    /// Per-bus reactive capability: `qbar` at inverter buses, zero elsewhere.
    pub fn qbar(&self) -> Vec<f64> {
        let mut qbar = vec![0.0; self.bus_count];
        for inv in &self.inverters {
            qbar[inv.bus - 1] = inv.qbar_pu;
        }
        qbar
    }

    pub fn inverter_buses(&self) -> Vec<usize> {
        self.inverters.iter().map(|inv| inv.bus).collect()
    }

    /// Orients the lines away from the substation, verifying the tree
    /// structure in the process.
    pub(crate) fn tree(&self) -> Result<Tree> {
        let n = self.bus_count;
        for line in &self.lines {
            if line.from > n || line.to > n {
                return Err(Error::Topology(format!(
                    "line {}-{} references a bus outside 0..={}",
                    line.from, line.to, n
                )));
            }
            if line.from == line.to {
                return Err(Error::Topology(format!(
                    "line {}-{} is a self-loop",
                    line.from, line.to
                )));
            }
            if !(line.r_pu > 0.0) || !(line.x_pu > 0.0) {
                return Err(Error::Topology(format!(
                    "line {}-{} needs positive impedance, got r={} x={}",
                    line.from, line.to, line.r_pu, line.x_pu
                )));
            }
        }
        let mut adjacent: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n + 1];
        for line in &self.lines {
            adjacent[line.from].push((line.to, line.r_pu, line.x_pu));
            adjacent[line.to].push((line.from, line.r_pu, line.x_pu));
        }
        let mut parent = vec![usize::MAX; n];
        let mut r = vec![0.0; n];
        let mut x = vec![0.0; n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        let mut seen = vec![false; n + 1];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            let up = if u == 0 { None } else { Some(parent[u - 1]) };
            let mut parent_edge_seen = false;
            for &(v, lr, lx) in &adjacent[u] {
                if Some(v) == up && !parent_edge_seen {
                    parent_edge_seen = true;
                    continue;
                }
                if seen[v] {
                    return Err(Error::Topology(format!(
                        "lines form a cycle through buses {u} and {v}"
                    )));
                }
                seen[v] = true;
                parent[v - 1] = u;
                r[v - 1] = lr;
                x[v - 1] = lx;
                children[u].push(v);
                queue.push_back(v);
            }
        }
        if let Some(bus) = (1..=n).find(|&b| !seen[b]) {
            return Err(Error::Topology(format!(
                "bus {bus} is not connected to the substation"
            )));
        }
        Ok(Tree { r, x, children })
    }
}

/// The feeder oriented away from the substation. Entry `bus - 1` of `r`/`x`
/// describes the line feeding `bus`.
pub(crate) struct Tree {
    pub r: Vec<f64>,
    pub x: Vec<f64>,
    pub children: Vec<Vec<usize>>,
}

impl Tree {
    /// Buses in the subtree hanging off `bus`, including `bus` itself.
    pub fn subtree_members(&self, bus: usize) -> Vec<usize> {
        let mut members = Vec::new();
        let mut stack = vec![bus];
        while let Some(b) = stack.pop() {
            members.push(b);
            stack.extend_from_slice(&self.children[b]);
        }
        members
    }
}

/// Voltage-sensitivity matrices: `r` maps active-power injections to voltage
/// changes, `x` does the same for reactive power. Both are symmetric positive
/// semidefinite with strictly positive entries on a connected feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

/// Builds the sensitivity matrices from path impedances: entry `(m, n)` is
/// twice the impedance sum over the lines shared by the substation-to-`m` and
/// substation-to-`n` paths. Equivalently, each line adds twice its impedance
/// to every pair of buses in the subtree below it, which is how the
/// accumulation is implemented (symmetry is then structural).
pub fn build_sensitivities(topology: &FeederTopology) -> Result<SensitivityMatrices> {
    let tree = topology.tree()?;
    let n = topology.bus_count;
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for bus in 1..=n {
        let members = tree.subtree_members(bus);
        let lr = 2.0 * tree.r[bus - 1];
        let lx = 2.0 * tree.x[bus - 1];
        for &m in &members {
            for &k in &members {
                r[(m - 1, k - 1)] += lr;
                x[(m - 1, k - 1)] += lx;
            }
        }
    }
    Ok(SensitivityMatrices { r, x })
}

impl SensitivityMatrices {
    pub fn bus_count(&self) -> usize {
        self.r.nrows()
    }

    /// Approximate bus voltages `v = R (p_solar - p_load) + X (q_inv - q_load)
    /// + v0`. Panics if dimensions disagree.
    pub fn predict_voltages(&self, z: &GridConditions, q_inv: &[f64], v0: f64) -> Vec<f64> {
        let n = self.bus_count();
        assert_eq!(z.bus_count(), n, "grid conditions sized for another feeder");
        assert_eq!(q_inv.len(), n, "setpoint vector sized for another feeder");
        let p = DVector::from_fn(n, |i, _| z.p_solar[i] - z.p_load[i]);
        let q = DVector::from_fn(n, |i, _| q_inv[i] - z.q_load[i]);
        let v = &self.r * p + &self.x * q;
        v.iter().map(|d| d + v0).collect()
    }

    /// Stacked voltage-band constraint `g = [X q + y - v_hi ; -X q - y +
    /// v_lo]`; all entries nonpositive exactly when every bus voltage lies in
    /// the band.
    pub fn constraint_g(
        &self,
        ctx: &ConstraintContext,
        q_inv: &[f64],
        lim: &VoltageLimits,
    ) -> Vec<f64> {
        let n = self.bus_count();
        assert_eq!(ctx.y.len(), n, "context sized for another feeder");
        assert_eq!(q_inv.len(), n, "setpoint vector sized for another feeder");
        assert_eq!(lim.v_hi.len(), n, "limits sized for another feeder");
        let xq = &self.x * DVector::from_column_slice(q_inv);
        let mut g = Vec::with_capacity(2 * n);
        for i in 0..n {
            g.push(xq[i] + ctx.y[i] - lim.v_hi[i]);
        }
        for i in 0..n {
            g.push(-xq[i] - ctx.y[i] + lim.v_lo[i]);
        }
        g
    }

    /// Setpoint-dependent part of the ohmic losses, `q' R q - b' q`.
    /// Normalized so the no-control setpoint scores zero.
    pub fn losses(&self, ctx: &ConstraintContext, q_inv: &[f64]) -> f64 {
        let n = self.bus_count();
        assert_eq!(q_inv.len(), n, "setpoint vector sized for another feeder");
        let q = DVector::from_column_slice(q_inv);
        let rq = &self.r * &q;
        let quad = q.dot(&rq);
        let lin: f64 = (0..n).map(|i| ctx.b[i] * q_inv[i]).sum();
        quad - lin
    }

    /// Gradient of [`losses`](Self::losses): `2 R q - b`.
    pub fn losses_gradient(&self, ctx: &ConstraintContext, q_inv: &[f64]) -> Vec<f64> {
        let n = self.bus_count();
        assert_eq!(q_inv.len(), n, "setpoint vector sized for another feeder");
        let q = DVector::from_column_slice(q_inv);
        let rq = &self.r * &q;
        (0..n).map(|i| 2.0 * rq[i] - ctx.b[i]).collect()
    }
}

/// One realization of uncontrollable grid conditions: active/reactive load
/// and active solar generation per downstream bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConditions {
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
    pub p_solar: Vec<f64>,
}

impl GridConditions {
    pub fn new(p_load: Vec<f64>, q_load: Vec<f64>, p_solar: Vec<f64>) -> Result<Self> {
        let n = p_load.len();
        if q_load.len() != n || p_solar.len() != n {
            return Err(Error::Contract(format!(
                "grid-condition blocks differ in length: {} / {} / {}",
                n,
                q_load.len(),
                p_solar.len()
            )));
        }
        for (name, block) in [
            ("p_load", &p_load),
            ("q_load", &q_load),
            ("p_solar", &p_solar),
        ] {
            if let Some(i) = block.iter().position(|v| !(*v >= 0.0)) {
                return Err(Error::Contract(format!(
                    "{name}[{i}] = {} must be nonnegative and finite",
                    block[i]
                )));
            }
        }
        Ok(GridConditions {
            p_load,
            q_load,
            p_solar,
        })
    }

    pub fn zeros(bus_count: usize) -> Self {
        GridConditions {
            p_load: vec![0.0; bus_count],
            q_load: vec![0.0; bus_count],
            p_solar: vec![0.0; bus_count],
        }
    }

    pub fn bus_count(&self) -> usize {
        self.p_load.len()
    }
}

/// Per-bus voltage band, lower and upper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimits {
    pub v_lo: Vec<f64>,
    pub v_hi: Vec<f64>,
}

impl VoltageLimits {
    pub fn new(v_lo: Vec<f64>, v_hi: Vec<f64>) -> Result<Self> {
        if v_lo.len() != v_hi.len() {
            return Err(Error::Contract(format!(
                "limit vectors differ in length: {} vs {}",
                v_lo.len(),
                v_hi.len()
            )));
        }
        if let Some(i) = (0..v_lo.len()).find(|&i| !(v_lo[i] < v_hi[i])) {
            return Err(Error::Contract(format!(
                "v_lo[{i}] = {} must be below v_hi[{i}] = {}",
                v_lo[i], v_hi[i]
            )));
        }
        Ok(VoltageLimits { v_lo, v_hi })
    }

    /// The same band at every bus; 0.97/1.03 pu is the usual regulation range.
    pub fn uniform(bus_count: usize, lo: f64, hi: f64) -> Result<Self> {
        VoltageLimits::new(vec![lo; bus_count], vec![hi; bus_count])
    }
}

/// Quantities that depend on the grid conditions but not on the setpoints,
/// precomputed once per scenario: `y` is the uncontrolled voltage profile and
/// `b = 2 R q_load` the linear loss coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintContext {
    pub y: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConstraintContext {
    pub fn new(sens: &SensitivityMatrices, z: &GridConditions, v0: f64) -> Self {
        let y = sens.predict_voltages(z, &vec![0.0; sens.bus_count()], v0);
        let ql = DVector::from_column_slice(&z.q_load);
        let b = 2.0 * (&sens.r * ql);
        ConstraintContext {
            y,
            b: b.iter().copied().collect(),
        }
    }
}

/// Reads a line list from CSV with header `from,to,r_pu,x_pu`.
pub fn read_lines_csv(path: &Path) -> Result<Vec<Line>> {
    read_records(path)
}

/// Reads an inverter list from CSV with header `bus,qbar_pu`.
pub fn read_inverters_csv(path: &Path) -> Result<Vec<Inverter>> {
    read_records(path)
}

/// Reads a bare bus list from CSV with header `bus`.
pub fn read_bus_list(path: &Path) -> Result<Vec<usize>> {
    #[derive(Deserialize)]
    struct Row {
        bus: usize,
    }
    let rows: Vec<Row> = read_records(path)?;
    Ok(rows.into_iter().map(|row| row.bus).collect())
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, record) in reader.deserialize().enumerate() {
        let value: T = record.map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}
