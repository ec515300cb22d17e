//! Bundled demonstration feeder: a single-phase 13-bus radial network
//! (substation plus 12 downstream buses) with rooftop solar at six buses,
//! smart inverters at the two largest plants, and utility telemetry at three
//! interior buses.
//!
//! The numbers are picked so that a clear midday overvoltage appears at the
//! feeder tail — buses 9–12 climb past a 1.03 pu ceiling when solar peaks —
//! while the two inverters together hold enough reactive headroom to pull the
//! whole profile back into the band, and night-time load alone stays inside
//! the band.

use std::path::Path;

use varnet_core::feeder::{FeederTopology, Inverter, Line};
use varnet_core::Result;

/// `PARENT[b - 1]` feeds bus `b`; bus 0 is the substation. The layout is a
/// main trunk 0-1-6 with laterals 1-2-3, 1-4-5, 6-7-{8,9}, 6-10, 6-11-12.
pub const PARENT: [usize; 12] = [0, 1, 2, 1, 4, 1, 6, 7, 7, 6, 6, 11];

/// Per-line resistance in pu on the system base; entry `b - 1` is the line
/// feeding bus `b`. The long laterals to buses 9 and 12 are deliberately the
/// weakest, which is where solar hurts the most.
pub const LINE_R: [f64; 12] = [
    0.006, 0.008, 0.008, 0.008, 0.008, 0.010, 0.008, 0.008, 0.020, 0.008, 0.015, 0.020,
];

/// Overhead distribution wire; reactance dominates resistance.
pub const X_OVER_R: f64 = 2.5;

/// Inverter buses and their reactive capability in pu.
pub const INVERTERS: [(usize, f64); 2] = [(9, 0.35), (12, 0.35)];

/// Buses hosting solar and the plant capacity in pu. The two inverter buses
/// carry the large plants; the rest is small rooftop generation.
pub const SOLAR_CAPACITY: [(usize, f64); 6] = [
    (1, 0.06),
    (5, 0.06),
    (9, 0.45),
    (10, 0.10),
    (11, 0.35),
    (12, 0.45),
];

/// Peak active load per bus in pu, uniform across the feeder.
pub const LOAD_WEIGHT: f64 = 0.04;

/// Buses whose net active flow the utility can observe.
pub const TELEMETRY_BUSES: [usize; 3] = [2, 3, 7];

pub const BUS_COUNT: usize = 12;

pub fn lines() -> Vec<Line> {
    (0..BUS_COUNT)
        .map(|i| Line {
            from: PARENT[i],
            to: i + 1,
            r_pu: LINE_R[i],
            x_pu: LINE_R[i] * X_OVER_R,
        })
        .collect()
}

pub fn inverters() -> Vec<Inverter> {
    INVERTERS
        .iter()
        .map(|&(bus, qbar_pu)| Inverter { bus, qbar_pu })
        .collect()
}

pub fn topology(substation_voltage: f64) -> Result<FeederTopology> {
    FeederTopology::new(lines(), inverters(), substation_voltage)
}

/// Solar capacity per bus (zero where no plant sits), indexed by `bus - 1`.
pub fn solar_capacities() -> Vec<f64> {
    let mut caps = vec![0.0; BUS_COUNT];
    for &(bus, cap) in &SOLAR_CAPACITY {
        caps[bus - 1] = cap;
    }
    caps
}

/// Peak load per bus, indexed by `bus - 1`.
pub fn load_weights() -> Vec<f64> {
    vec![LOAD_WEIGHT; BUS_COUNT]
}

/// Writes the feeder description in the CSV layouts the other commands read.
pub struct FixturePaths<'a> {
    pub feeder: &'a Path,
    pub inverters: &'a Path,
    pub telemetry: &'a Path,
    pub solar: &'a Path,
}

pub fn write_fixture(paths: &FixturePaths) -> Result<()> {
    write_lines_csv(paths.feeder)?;
    write_inverters_csv(paths.inverters)?;
    write_bus_list(paths.telemetry, &TELEMETRY_BUSES)?;
    let solar_buses: Vec<usize> = SOLAR_CAPACITY.iter().map(|&(bus, _)| bus).collect();
    write_bus_list(paths.solar, &solar_buses)?;
    Ok(())
}

fn write_lines_csv(path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for line in lines() {
        writer.serialize(line)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_inverters_csv(path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for inv in inverters() {
        writer.serialize(inv)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_bus_list(path: &Path, buses: &[usize]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["bus"])?;
    for &bus in buses {
        writer.write_record([bus.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}
