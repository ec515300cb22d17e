//! Synthetic day-long load and solar traces for the bundled feeder: smooth
//! diurnal shapes scaled by per-bus weights, with a small multiplicative
//! noise so no two minutes are identical. All randomness flows from one seed
//! through per-bus streams, so the output is reproducible and independent of
//! evaluation order.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use varnet_core::scenario::TimeSeriesTrace;
use varnet_core::{Error, Result};

use crate::fixture;

/// Relative standard deviation of the per-minute noise.
pub const NOISE_FRAC: f64 = 0.02;

/// Minute of day when solar production starts / stops.
pub const SUNRISE_MIN: f64 = 390.0; // 06:30
pub const SUNSET_MIN: f64 = 1230.0; // 20:30

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub days: u64,
    pub step_minutes: u64,
    /// Multiplies every load weight and solar capacity.
    pub scale: f64,
    pub seed: u64,
}

/// Clear-sky production as a fraction of capacity: a squared half-sine
/// between sunrise and sunset, peaking at 1.0 around 13:30, exactly zero at
/// night.
pub fn solar_shape(minute_of_day: f64) -> f64 {
    if !(SUNRISE_MIN..SUNSET_MIN).contains(&minute_of_day) {
        return 0.0;
    }
    let phase = std::f64::consts::PI * (minute_of_day - SUNRISE_MIN) / (SUNSET_MIN - SUNRISE_MIN);
    phase.sin().powi(2)
}

/// Demand as a fraction of peak load: an air-conditioning-driven afternoon
/// peak of 1.0 around 13:30 and a 0.55 trough in the small hours. The flat
/// top means the hours on either side of noon see nearly the same demand.
pub fn load_shape(minute_of_day: f64) -> f64 {
    let phase = std::f64::consts::PI * (minute_of_day - 90.0) / 1440.0;
    0.55 + 0.45 * phase.sin().powi(2)
}

/// Generates aligned traces for every bus of the bundled feeder. Each bus
/// draws its noise from its own seeded stream (one load and one solar factor
/// per step, in that order), so traces never depend on which other buses
/// exist.
pub fn generate_traces(spec: &GenSpec) -> Result<Vec<TimeSeriesTrace>> {
    if spec.days == 0 || spec.step_minutes == 0 || spec.step_minutes > 1440 {
        return Err(Error::Contract(format!(
            "need at least one day sampled every 1..=1440 minutes, got {} day(s) every {} min",
            spec.days, spec.step_minutes
        )));
    }
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::Contract(format!(
            "scale must be positive and finite, got {}",
            spec.scale
        )));
    }
    let timestamps: Vec<u64> = (0..spec.days * 1440)
        .step_by(spec.step_minutes as usize)
        .collect();
    let weights = fixture::load_weights();
    let capacities = fixture::solar_capacities();
    let noise = Normal::new(0.0, NOISE_FRAC).expect("finite std");

    let traces = (1..=fixture::BUS_COUNT)
        .map(|bus| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(bus as u64);
            let peak_load = weights[bus - 1] * spec.scale;
            let capacity = capacities[bus - 1] * spec.scale;
            let mut p_load = Vec::with_capacity(timestamps.len());
            let mut p_solar = Vec::with_capacity(timestamps.len());
            for &minute in &timestamps {
                let m = (minute % 1440) as f64;
                let load_factor = (1.0 + rng.sample(noise)).max(0.0);
                let solar_factor = (1.0 + rng.sample(noise)).max(0.0);
                p_load.push(peak_load * load_shape(m) * load_factor);
                p_solar.push(capacity * solar_shape(m) * solar_factor);
            }
            TimeSeriesTrace {
                bus,
                timestamps: timestamps.clone(),
                p_load,
                p_solar,
            }
        })
        .collect();
    Ok(traces)
}
