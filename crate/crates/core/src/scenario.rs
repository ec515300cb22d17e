//! Turns load/solar time series into training scenarios.
//!
//! The pipeline is: ingest per-bus traces (scaled to feeder level), draw
//! lagging power factors to synthesize reactive loads, derive the policy
//! inputs from each grid snapshot, then replicate every snapshot with
//! Gaussian perturbations and shuffle. All randomness flows from explicit
//! seeds through per-parent ChaCha streams, so serial and parallel runs
//! produce the same set.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{FeederTopology, GridConditions, Inverter};
use crate::parallel;

/// Active load and solar series for one bus, on a shared minute clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTrace {
    pub bus: usize,
    /// Minutes; strictly increasing, identical across buses of one file.
    pub timestamps: Vec<u64>,
    pub p_load: Vec<f64>,
    pub p_solar: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    timestamp: u64,
    bus: usize,
    p_load_pu: f64,
    p_solar_pu: f64,
}

/// Reads a trace CSV (`timestamp,bus,p_load_pu,p_solar_pu`), multiplies both
/// series by `scale_factor`, and returns one aligned trace per bus, sorted by
/// bus id. Buses must all cover the same strictly increasing timestamps.
pub fn ingest_traces(path: &Path, scale_factor: f64) -> Result<Vec<TimeSeriesTrace>> {
    if !(scale_factor > 0.0) {
        return Err(Error::Contract(format!(
            "scale factor must be positive, got {scale_factor}"
        )));
    }
    let ingest = |line: usize, msg: String| Error::Ingest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let mut by_bus: std::collections::BTreeMap<usize, TimeSeriesTrace> =
        std::collections::BTreeMap::new();
    for (i, record) in reader.deserialize().enumerate() {
        let line = i + 2;
        let row: TraceRow = record.map_err(|e| ingest(line, e.to_string()))?;
        if row.p_load_pu < 0.0 || row.p_solar_pu < 0.0 {
            return Err(ingest(
                line,
                format!(
                    "negative value for bus {} (p_load={}, p_solar={})",
                    row.bus, row.p_load_pu, row.p_solar_pu
                ),
            ));
        }
        let trace = by_bus.entry(row.bus).or_insert_with(|| TimeSeriesTrace {
            bus: row.bus,
            timestamps: Vec::new(),
            p_load: Vec::new(),
            p_solar: Vec::new(),
        });
        if let Some(&last) = trace.timestamps.last() {
            if row.timestamp <= last {
                return Err(ingest(
                    line,
                    format!(
                        "timestamp {} for bus {} does not increase past {}",
                        row.timestamp, row.bus, last
                    ),
                ));
            }
        }
        trace.timestamps.push(row.timestamp);
        trace.p_load.push(row.p_load_pu * scale_factor);
        trace.p_solar.push(row.p_solar_pu * scale_factor);
    }
    let traces: Vec<TimeSeriesTrace> = by_bus.into_values().collect();
    if let Some(first) = traces.first() {
        for other in &traces[1..] {
            if other.timestamps != first.timestamps {
                let detail = misalignment(first, other);
                return Err(Error::Contract(format!(
                    "traces for buses {} and {} are misaligned: {detail}",
                    first.bus, other.bus
                )));
            }
        }
    }
    Ok(traces)
}

fn misalignment(a: &TimeSeriesTrace, b: &TimeSeriesTrace) -> String {
    if a.timestamps.len() != b.timestamps.len() {
        return format!(
            "{} vs {} samples",
            a.timestamps.len(),
            b.timestamps.len()
        );
    }
    match a
        .timestamps
        .iter()
        .zip(&b.timestamps)
        .position(|(ta, tb)| ta != tb)
    {
        Some(i) => format!(
            "minute {} vs {} at position {i}",
            a.timestamps[i], b.timestamps[i]
        ),
        None => "identical".to_string(),
    }
}

/// Writes traces in the same CSV layout `ingest_traces` reads, interleaved by
/// timestamp. Traces must be aligned.
pub fn write_traces_csv(path: &Path, traces: &[TimeSeriesTrace]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let timestamps = match traces.first() {
        Some(t) => &t.timestamps,
        None => return Err(Error::Contract("no traces to write".into())),
    };
    for trace in traces {
        if &trace.timestamps != timestamps {
            return Err(Error::Contract(format!(
                "trace for bus {} is misaligned with bus {}",
                trace.bus,
                traces[0].bus
            )));
        }
    }
    for (t, &minute) in timestamps.iter().enumerate() {
        for trace in traces {
            writer.serialize(TraceRow {
                timestamp: minute,
                bus: trace.bus,
                p_load_pu: trace.p_load[t],
                p_solar_pu: trace.p_solar[t],
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Restricts aligned traces to minutes in `[start_min, end_min)`.
pub fn window(
    traces: &[TimeSeriesTrace],
    start_min: u64,
    end_min: u64,
) -> Result<Vec<TimeSeriesTrace>> {
    let out: Vec<TimeSeriesTrace> = traces
        .iter()
        .map(|trace| {
            let keep: Vec<usize> = (0..trace.timestamps.len())
                .filter(|&i| trace.timestamps[i] >= start_min && trace.timestamps[i] < end_min)
                .collect();
            TimeSeriesTrace {
                bus: trace.bus,
                timestamps: keep.iter().map(|&i| trace.timestamps[i]).collect(),
                p_load: keep.iter().map(|&i| trace.p_load[i]).collect(),
                p_solar: keep.iter().map(|&i| trace.p_solar[i]).collect(),
            }
        })
        .collect();
    if out.first().is_none_or(|t| t.timestamps.is_empty()) {
        return Err(Error::Contract(format!(
            "no trace samples in minutes {start_min}..{end_min}"
        )));
    }
    Ok(out)
}

/// Draws a lagging power factor uniformly from `[pf_lo, pf_hi]` per sample
/// and converts active load to reactive: `q = p tan(acos(pf))`.
pub fn synthesize_reactive_loads(
    p_load: &[f64],
    pf_lo: f64,
    pf_hi: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    check_pf(pf_lo, pf_hi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(synthesize_with(p_load, pf_lo, pf_hi, &mut rng))
}

fn check_pf(pf_lo: f64, pf_hi: f64) -> Result<()> {
    if !(pf_lo > 0.0 && pf_lo <= pf_hi && pf_hi <= 1.0) {
        return Err(Error::Contract(format!(
            "power-factor range [{pf_lo}, {pf_hi}] must sit inside (0, 1]"
        )));
    }
    Ok(())
}

fn synthesize_with<R: Rng>(p_load: &[f64], pf_lo: f64, pf_hi: f64, rng: &mut R) -> Vec<f64> {
    p_load
        .iter()
        .map(|&p| {
            let pf = if pf_lo == pf_hi {
                pf_lo
            } else {
                rng.random_range(pf_lo..pf_hi)
            };
            p * pf.acos().tan()
        })
        .collect()
}

/// Maps a grid snapshot to what the networks can actually see: the utility
/// gets one active-flow proxy per telemetry bus (net load of the subtree it
/// feeds), each inverter gets its own bus readings.
#[derive(Debug, Clone)]
pub struct InputMap {
    bus_count: usize,
    telemetry_buses: Vec<usize>,
    /// 0-based indices of the buses in each telemetry subtree.
    subtrees: Vec<Vec<usize>>,
    inverters: Vec<Inverter>,
}

impl InputMap {
    pub fn new(topology: &FeederTopology, telemetry_buses: &[usize]) -> Result<Self> {
        let tree = topology.tree()?;
        let mut subtrees = Vec::with_capacity(telemetry_buses.len());
        for &bus in telemetry_buses {
            if bus == 0 || bus > topology.bus_count {
                return Err(Error::Contract(format!(
                    "telemetry bus {bus} is not a downstream bus (1..={})",
                    topology.bus_count
                )));
            }
            subtrees.push(tree.subtree_members(bus).iter().map(|&b| b - 1).collect());
        }
        Ok(InputMap {
            bus_count: topology.bus_count,
            telemetry_buses: telemetry_buses.to_vec(),
            subtrees,
            inverters: topology.inverters.clone(),
        })
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn telemetry_buses(&self) -> &[usize] {
        &self.telemetry_buses
    }

    pub fn utility_input_dim(&self) -> usize {
        self.telemetry_buses.len()
    }

    /// Entries of one local input vector: p_solar, p_load, q_load, qbar.
    pub const LOCAL_INPUT_DIM: usize = 4;

    pub fn inverters(&self) -> &[Inverter] {
        &self.inverters
    }

    /// Computes `(w_u, w_local)` for a snapshot. `w_u[i]` is the net active
    /// withdrawal (load minus solar) of telemetry subtree `i`, so positive
    /// means forward flow; `w_local[j]` stacks the j-th inverter's readings.
    pub fn derive(&self, z: &GridConditions) -> (Vec<f64>, Vec<Vec<f64>>) {
        assert_eq!(
            z.bus_count(),
            self.bus_count,
            "grid conditions sized for another feeder"
        );
        let w_u = self
            .subtrees
            .iter()
            .map(|members| {
                members
                    .iter()
                    .map(|&i| z.p_load[i] - z.p_solar[i])
                    .sum::<f64>()
            })
            .collect();
        let w_local = self
            .inverters
            .iter()
            .map(|inv| {
                let i = inv.bus - 1;
                vec![z.p_solar[i], z.p_load[i], z.q_load[i], inv.qbar_pu]
            })
            .collect();
        (w_u, w_local)
    }
}

/// Convenience wrapper over [`InputMap`] for a single snapshot.
pub fn derive_inputs(
    z: &GridConditions,
    topology: &FeederTopology,
    telemetry_buses: &[usize],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    Ok(InputMap::new(topology, telemetry_buses)?.derive(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Measured,
    Augmented,
}

/// One training/test sample: the grid snapshot plus the derived inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub z: GridConditions,
    pub w_u: Vec<f64>,
    pub w_local: Vec<Vec<f64>>,
    pub origin: Origin,
    /// Index of the measured parent this sample descends from.
    pub source_index: usize,
}

/// Ordered scenario collection; serialized as JSON lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for scenario in &self.scenarios {
            serde_json::to_writer(&mut out, scenario)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut scenarios = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scenario = serde_json::from_str(&line).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            scenarios.push(scenario);
        }
        Ok(ScenarioSet { scenarios })
    }
}

/// Builds one measured scenario per timestep from aligned traces. Buses not
/// present in the traces carry zero load and solar. Reactive loads are drawn
/// per bus on independent seeded streams.
pub fn scenarios_from_traces(
    traces: &[TimeSeriesTrace],
    map: &InputMap,
    pf_lo: f64,
    pf_hi: f64,
    seed: u64,
) -> Result<Vec<Scenario>> {
    check_pf(pf_lo, pf_hi)?;
    let steps = match traces.first() {
        Some(t) => t.timestamps.len(),
        None => return Err(Error::Contract("no traces supplied".into())),
    };
    let n = map.bus_count();
    for trace in traces {
        if trace.bus == 0 || trace.bus > n {
            return Err(Error::Contract(format!(
                "trace bus {} is not a downstream bus (1..={n})",
                trace.bus
            )));
        }
        if trace.timestamps.len() != steps {
            return Err(Error::Contract(format!(
                "trace for bus {} has {} samples, expected {steps}",
                trace.bus,
                trace.timestamps.len()
            )));
        }
    }
    let q_series: Vec<Vec<f64>> = traces
        .iter()
        .map(|trace| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trace.bus as u64);
            synthesize_with(&trace.p_load, pf_lo, pf_hi, &mut rng)
        })
        .collect();
    let mut scenarios = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut z = GridConditions::zeros(n);
        for (trace, q) in traces.iter().zip(&q_series) {
            let i = trace.bus - 1;
            z.p_load[i] = trace.p_load[t];
            z.p_solar[i] = trace.p_solar[t];
            z.q_load[i] = q[t];
        }
        let (w_u, w_local) = map.derive(&z);
        scenarios.push(Scenario {
            z,
            w_u,
            w_local,
            origin: Origin::Measured,
            source_index: t,
        });
    }
    Ok(scenarios)
}

/// Noise replication settings for [`augment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub replication_factor: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Replicates each measured scenario `replication_factor` times — the first
/// copy untouched, the rest with i.i.d. Gaussian noise on loads and (where
/// present) solar, clipped at zero — recomputes the derived inputs, and
/// shuffles the result. Each parent perturbs on its own RNG stream, so the
/// output does not depend on evaluation order.
pub fn augment(measured: &[Scenario], cfg: &AugmentConfig, map: &InputMap) -> Result<ScenarioSet> {
    if measured.is_empty() {
        return Err(Error::Contract("no measured scenarios to augment".into()));
    }
    if cfg.replication_factor < 1 {
        return Err(Error::Contract(
            "replication factor must be at least 1".into(),
        ));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::Contract(format!(
            "noise std must be nonnegative, got {}",
            cfg.noise_std
        )));
    }
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::Contract(format!("bad noise distribution: {e}")))?;
    let groups = parallel::map_range(measured.len(), |p| {
        let parent = &measured[p];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(p as u64 + 1);
        let mut group = Vec::with_capacity(cfg.replication_factor);
        group.push(parent.clone());
        for _ in 1..cfg.replication_factor {
            let mut z = parent.z.clone();
            for v in z.p_load.iter_mut().chain(z.q_load.iter_mut()) {
                *v = (*v + rng.sample(noise)).max(0.0);
            }
            for v in z.p_solar.iter_mut() {
                if *v > 0.0 {
                    *v = (*v + rng.sample(noise)).max(0.0);
                }
            }
            let (w_u, w_local) = map.derive(&z);
            group.push(Scenario {
                z,
                w_u,
                w_local,
                origin: Origin::Augmented,
                source_index: parent.source_index,
            });
        }
        group
    });
    let mut scenarios: Vec<Scenario> = groups.into_iter().flatten().collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(0);
    scenarios.shuffle(&mut shuffle_rng);
    Ok(ScenarioSet { scenarios })
}
