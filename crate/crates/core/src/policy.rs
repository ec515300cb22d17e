//! Two-tier neural policy.
//!
//! A utility-side network condenses feeder telemetry `w_u` into a short
//! broadcast signal `u`; a small head per inverter combines `u` with local
//! readings into a reactive setpoint. Heads end in tanh scaled by the
//! inverter limit, so setpoints respect their box for any parameters — no
//! projection step is ever needed. The whole thing trains as one network:
//! the utility parameters receive gradient contributions through every head.
//!
//! The topology is fixed (a stack of dense layers per tier), which keeps
//! exact reverse-mode Jacobians small and direct; no autograd engine.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{FeederTopology, Inverter};
use crate::scenario::InputMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Shapes of both tiers plus the inverters they drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Feeder buses; the policy emits one setpoint per bus (zero off-inverter).
    pub bus_count: usize,
    pub utility_layers: Vec<LayerSpec>,
    /// Layer shapes shared by every inverter head; input is `[u ; w_local]`.
    pub inverter_layers: Vec<LayerSpec>,
    /// Ascending bus order.
    pub inverters: Vec<Inverter>,
}

impl Architecture {
    /// The default two-tier shape: one tanh layer condensing `telemetry_count`
    /// flows into `control_dim` signals, and `(control_dim + 4) -> hidden -> 1`
    /// tanh heads.
    pub fn two_tier(
        topology: &FeederTopology,
        telemetry_count: usize,
        control_dim: usize,
        hidden: usize,
    ) -> Self {
        Architecture {
            bus_count: topology.bus_count,
            utility_layers: vec![LayerSpec {
                in_dim: telemetry_count,
                out_dim: control_dim,
                activation: Activation::Tanh,
            }],
            inverter_layers: vec![
                LayerSpec {
                    in_dim: control_dim + InputMap::LOCAL_INPUT_DIM,
                    out_dim: hidden,
                    activation: Activation::Tanh,
                },
                LayerSpec {
                    in_dim: hidden,
                    out_dim: 1,
                    activation: Activation::Tanh,
                },
            ],
            inverters: topology.inverters.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let chain = |name: &str, specs: &[LayerSpec]| -> Result<()> {
            if specs.is_empty() {
                return Err(Error::Contract(format!("{name} tier has no layers")));
            }
            for spec in specs {
                if spec.in_dim == 0 || spec.out_dim == 0 {
                    return Err(Error::Contract(format!(
                        "{name} tier has a zero-sized layer ({}x{})",
                        spec.out_dim, spec.in_dim
                    )));
                }
            }
            for pair in specs.windows(2) {
                if pair[0].out_dim != pair[1].in_dim {
                    return Err(Error::Contract(format!(
                        "{name} tier layers do not chain: {} out vs {} in",
                        pair[0].out_dim, pair[1].in_dim
                    )));
                }
            }
            Ok(())
        };
        chain("utility", &self.utility_layers)?;
        chain("inverter", &self.inverter_layers)?;
        let expected_in = self.control_dim() + InputMap::LOCAL_INPUT_DIM;
        if self.inverter_layers[0].in_dim != expected_in {
            return Err(Error::Contract(format!(
                "inverter heads expect input {} but broadcast plus local readings give {}",
                self.inverter_layers[0].in_dim, expected_in
            )));
        }
        if self.inverter_layers.last().unwrap().out_dim != 1 {
            return Err(Error::Contract(
                "inverter heads must end in a single output".into(),
            ));
        }
        if self.inverters.is_empty() {
            return Err(Error::Contract("architecture lists no inverters".into()));
        }
        for pair in self.inverters.windows(2) {
            if pair[0].bus >= pair[1].bus {
                return Err(Error::Contract(
                    "inverters must be listed in ascending bus order".into(),
                ));
            }
        }
        for inv in &self.inverters {
            if inv.bus == 0 || inv.bus > self.bus_count {
                return Err(Error::Contract(format!(
                    "inverter bus {} outside 1..={}",
                    inv.bus, self.bus_count
                )));
            }
            if !(inv.qbar_pu > 0.0) {
                return Err(Error::Contract(format!(
                    "inverter at bus {} needs a positive limit",
                    inv.bus
                )));
            }
        }
        Ok(())
    }

    /// Dimension of the broadcast signal `u`.
    pub fn control_dim(&self) -> usize {
        self.utility_layers.last().map(|s| s.out_dim).unwrap_or(0)
    }

    pub fn utility_input_dim(&self) -> usize {
        self.utility_layers.first().map(|s| s.in_dim).unwrap_or(0)
    }

    pub fn utility_param_count(&self) -> usize {
        self.utility_layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.inverter_layers
            .iter()
            .map(LayerSpec::param_count)
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.utility_param_count() + self.inverters.len() * self.head_param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// All parameters of the two-tier policy. The flattened view `theta` orders
/// utility layers first (each as row-major weights then bias), followed by
/// the inverter heads in ascending bus order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: Architecture,
    pub utility: Vec<Layer>,
    pub heads: Vec<Vec<Layer>>,
}

/// The broadcast signal; entries lie in (-1, 1) when the utility tier ends in
/// tanh (the default), saturating to ±1.0 in floating point under extreme
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub u: Vec<f64>,
}

/// Draws every weight and bias i.i.d. uniform from [-0.1, 0.1], in flattened
/// order, from a ChaCha stream seeded by `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<PolicyParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..arch.param_count())
        .map(|_| rng.random_range(-0.1..0.1))
        .collect();
    PolicyParams::from_flat(arch.clone(), &theta)
}

fn layers_from_flat(specs: &[LayerSpec], theta: &[f64], cursor: &mut usize) -> Vec<Layer> {
    specs
        .iter()
        .map(|spec| {
            let wn = spec.in_dim * spec.out_dim;
            let w = DMatrix::from_row_slice(spec.out_dim, spec.in_dim, &theta[*cursor..*cursor + wn]);
            *cursor += wn;
            let b = DVector::from_column_slice(&theta[*cursor..*cursor + spec.out_dim]);
            *cursor += spec.out_dim;
            Layer { w, b }
        })
        .collect()
}

fn layers_to_flat(layers: &[Layer], out: &mut Vec<f64>) {
    for layer in layers {
        for i in 0..layer.w.nrows() {
            for j in 0..layer.w.ncols() {
                out.push(layer.w[(i, j)]);
            }
        }
        out.extend(layer.b.iter());
    }
}

impl PolicyParams {
    pub fn from_flat(arch: Architecture, theta: &[f64]) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::ModelMismatch(format!(
                "{} parameters supplied, architecture needs {}",
                theta.len(),
                arch.param_count()
            )));
        }
        let mut cursor = 0;
        let utility = layers_from_flat(&arch.utility_layers, theta, &mut cursor);
        let heads = (0..arch.inverters.len())
            .map(|_| layers_from_flat(&arch.inverter_layers, theta, &mut cursor))
            .collect();
        Ok(PolicyParams {
            arch,
            utility,
            heads,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.arch.param_count());
        layers_to_flat(&self.utility, &mut theta);
        for head in &self.heads {
            layers_to_flat(head, &mut theta);
        }
        theta
    }

    /// Overwrites the parameters from a flattened vector without reshaping.
    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.arch.param_count() {
            return Err(Error::ModelMismatch(format!(
                "{} parameters supplied, architecture needs {}",
                theta.len(),
                self.arch.param_count()
            )));
        }
        let mut cursor = 0;
        for layer in self
            .utility
            .iter_mut()
            .chain(self.heads.iter_mut().flatten())
        {
            for i in 0..layer.w.nrows() {
                for j in 0..layer.w.ncols() {
                    layer.w[(i, j)] = theta[cursor];
                    cursor += 1;
                }
            }
            for i in 0..layer.b.len() {
                layer.b[i] = theta[cursor];
                cursor += 1;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Checks that the model drives this feeder: same bus count and the same
    /// inverter fleet.
    pub fn check_compatible(&self, topology: &FeederTopology) -> Result<()> {
        if self.arch.bus_count != topology.bus_count {
            return Err(Error::ModelMismatch(format!(
                "model trained for {} buses, feeder has {}",
                self.arch.bus_count, topology.bus_count
            )));
        }
        if self.arch.inverters != topology.inverters {
            return Err(Error::ModelMismatch(format!(
                "model trained for inverters {:?}, feeder has {:?}",
                self.arch.inverters, topology.inverters
            )));
        }
        Ok(())
    }

    /// Runs the utility tier on the telemetry vector.
    pub fn forward_utility(&self, w_u: &[f64]) -> ControlSignal {
        assert_eq!(
            w_u.len(),
            self.arch.utility_input_dim(),
            "telemetry vector sized for another architecture"
        );
        let hs = forward_stack(
            &self.utility,
            &self.arch.utility_layers,
            DVector::from_column_slice(w_u),
        );
        ControlSignal {
            u: hs.last().unwrap().iter().copied().collect(),
        }
    }

    /// Runs one inverter head, addressed by bus id.
    pub fn forward_inverter(&self, bus: usize, u: &ControlSignal, w_local: &[f64]) -> Result<f64> {
        let idx = self
            .arch
            .inverters
            .iter()
            .position(|inv| inv.bus == bus)
            .ok_or_else(|| Error::Contract(format!("no inverter at bus {bus}")))?;
        Ok(self.forward_head(idx, u, w_local))
    }

    fn head_input(&self, u: &ControlSignal, w_local: &[f64]) -> DVector<f64> {
        assert_eq!(
            w_local.len(),
            InputMap::LOCAL_INPUT_DIM,
            "local readings sized for another architecture"
        );
        let mut x = Vec::with_capacity(u.u.len() + w_local.len());
        x.extend_from_slice(&u.u);
        x.extend_from_slice(w_local);
        DVector::from_vec(x)
    }

    fn forward_head(&self, idx: usize, u: &ControlSignal, w_local: &[f64]) -> f64 {
        let hs = forward_stack(
            &self.heads[idx],
            &self.arch.inverter_layers,
            self.head_input(u, w_local),
        );
        self.arch.inverters[idx].qbar_pu * hs.last().unwrap()[0]
    }

    /// Full policy: one utility pass, then every head with the same broadcast
    /// signal. Returns the per-bus setpoint vector (zeros off-inverter).
    pub fn forward(&self, w_u: &[f64], w_locals: &[Vec<f64>]) -> Vec<f64> {
        assert_eq!(
            w_locals.len(),
            self.arch.inverters.len(),
            "one local-reading vector per inverter required"
        );
        let u = self.forward_utility(w_u);
        let mut q = vec![0.0; self.arch.bus_count];
        for (idx, inv) in self.arch.inverters.iter().enumerate() {
            q[inv.bus - 1] = self.forward_head(idx, &u, &w_locals[idx]);
        }
        q
    }

    /// Exact Jacobian of the setpoint vector with respect to the flattened
    /// parameters, by reverse-mode differentiation. Rows of non-inverter
    /// buses are zero; utility columns are shared across rows, head columns
    /// are block-diagonal.
    pub fn jacobian(&self, w_u: &[f64], w_locals: &[Vec<f64>]) -> DMatrix<f64> {
        assert_eq!(
            w_locals.len(),
            self.arch.inverters.len(),
            "one local-reading vector per inverter required"
        );
        let n = self.arch.bus_count;
        let pu = self.arch.utility_param_count();
        let pi = self.arch.head_param_count();
        let mut jac = DMatrix::zeros(n, self.arch.param_count());

        let hs_u = forward_stack(
            &self.utility,
            &self.arch.utility_layers,
            DVector::from_column_slice(w_u),
        );
        let u = ControlSignal {
            u: hs_u.last().unwrap().iter().copied().collect(),
        };
        let d_u = u.u.len();
        // Sensitivity of each broadcast coordinate to the utility parameters.
        let mut du_dtheta = DMatrix::zeros(d_u, pu);
        for j in 0..d_u {
            let mut seed = DVector::zeros(d_u);
            seed[j] = 1.0;
            let mut grads = vec![0.0; pu];
            backprop_stack(
                &self.utility,
                &self.arch.utility_layers,
                &hs_u,
                seed,
                &mut grads,
            );
            for c in 0..pu {
                du_dtheta[(j, c)] = grads[c];
            }
        }

        for (idx, inv) in self.arch.inverters.iter().enumerate() {
            let hs = forward_stack(
                &self.heads[idx],
                &self.arch.inverter_layers,
                self.head_input(&u, &w_locals[idx]),
            );
            let mut head_grads = vec![0.0; pi];
            let gx = backprop_stack(
                &self.heads[idx],
                &self.arch.inverter_layers,
                &hs,
                DVector::from_element(1, inv.qbar_pu),
                &mut head_grads,
            );
            let row = inv.bus - 1;
            // Chain the head's sensitivity to `u` through the utility tier.
            for c in 0..pu {
                let mut acc = 0.0;
                for j in 0..d_u {
                    acc += gx[j] * du_dtheta[(j, c)];
                }
                jac[(row, c)] = acc;
            }
            let base = pu + idx * pi;
            for (c, &g) in head_grads.iter().enumerate() {
                jac[(row, base + c)] = g;
            }
        }
        jac
    }
}

/// Forward pass keeping every activation; `result[0]` is the input and
/// `result[l]` the output of layer `l-1`.
fn forward_stack(layers: &[Layer], specs: &[LayerSpec], x: DVector<f64>) -> Vec<DVector<f64>> {
    let mut hs = Vec::with_capacity(layers.len() + 1);
    hs.push(x);
    for (layer, spec) in layers.iter().zip(specs) {
        let mut a = &layer.w * hs.last().unwrap() + &layer.b;
        if spec.activation == Activation::Tanh {
            a.apply(|v| *v = v.tanh());
        }
        hs.push(a);
    }
    hs
}

/// Reverse pass for one stack. `seed` is the gradient of the output scalar(s)
/// with respect to the stack output; parameter gradients land in `grads`
/// (flattened order for this stack) and the return value is the gradient with
/// respect to the stack input.
fn backprop_stack(
    layers: &[Layer],
    specs: &[LayerSpec],
    hs: &[DVector<f64>],
    seed: DVector<f64>,
    grads: &mut [f64],
) -> DVector<f64> {
    let mut g = seed;
    let mut cursor = grads.len();
    for l in (0..layers.len()).rev() {
        let h_out = &hs[l + 1];
        let h_in = &hs[l];
        let delta = match specs[l].activation {
            // tanh' = 1 - tanh^2, and h_out already holds tanh(a).
            Activation::Tanh => g.component_mul(&h_out.map(|v| 1.0 - v * v)),
            Activation::Identity => g,
        };
        let (out_dim, in_dim) = (specs[l].out_dim, specs[l].in_dim);
        let bias_start = cursor - out_dim;
        grads[bias_start..cursor].copy_from_slice(delta.as_slice());
        let w_start = bias_start - out_dim * in_dim;
        for i in 0..out_dim {
            for j in 0..in_dim {
                grads[w_start + i * in_dim + j] = delta[i] * h_in[j];
            }
        }
        cursor = w_start;
        g = layers[l].w.tr_mul(&delta);
    }
    debug_assert_eq!(cursor, 0);
    g
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Provenance carried inside a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    /// Minute window of the scenarios the parameters were trained on.
    pub train_window: (u64, u64),
    pub scenario_count: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    arch: Architecture,
    theta: Vec<f64>,
    metadata: ModelMetadata,
}

/// Writes the policy as versioned JSON: architecture, flattened parameters,
/// and training provenance. The round trip is bit-exact.
pub fn serialize_params(
    params: &PolicyParams,
    metadata: &ModelMetadata,
    path: &Path,
) -> Result<()> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        arch: params.arch.clone(),
        theta: params.to_flat(),
        metadata: metadata.clone(),
    };
    let out = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(out), &file)?;
    Ok(())
}

pub fn deserialize_params(path: &Path) -> Result<(PolicyParams, ModelMetadata)> {
    let file: ModelFile = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(path)?,
    ))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelMismatch(format!(
            "model format {} unsupported (expected {MODEL_FORMAT_VERSION})",
            file.format_version
        )));
    }
    let params = PolicyParams::from_flat(file.arch, &file.theta)?;
    Ok((params, file.metadata))
}
