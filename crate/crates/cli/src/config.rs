//! Run configuration: flat `key = value` text with `[section]` headers,
//! every key overridable from the command line via `section.key=value`
//! (overrides win).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use varnet_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [paths]
    pub feeder: PathBuf,
    pub inverters: PathBuf,
    pub telemetry: PathBuf,
    pub solar: PathBuf,
    pub traces: PathBuf,
    pub run_dir: PathBuf,
    /// Model file; defaults to `<run_dir>/model.json`.
    pub model: Option<PathBuf>,

    // [limits]
    pub v_lo: f64,
    pub v_hi: f64,
    pub v0: f64,

    // [window] — minutes since the start of the trace
    pub train_start_min: u64,
    pub train_minutes: u64,
    /// Defaults to the hour right after the training window.
    pub test_start_min: Option<u64>,
    pub test_minutes: Option<u64>,

    // [scenarios]
    pub ingest_scale: f64,
    pub pf_lo: f64,
    pub pf_hi: f64,
    pub pf_seed: u64,
    pub replication: usize,
    pub noise_std: f64,
    pub augment_seed: u64,

    // [train]
    pub epochs: usize,
    pub primal_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dual_step0: f64,
    pub dual_decay: f64,
    pub train_seed: u64,
    pub epoch_reshuffle: bool,
    pub batch_size: usize,
    pub record_lambda: bool,
    pub control_dim: usize,
    pub hidden: usize,

    // [gen]
    pub gen_days: u64,
    pub gen_step_minutes: u64,
    pub gen_scale: f64,
    pub gen_seed: u64,

    // [eval]
    pub opf_tol: f64,
    pub dd_tol: f64,
    pub dd_max_iters: usize,
    pub dd_step0: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            feeder: "fixture/feeder.csv".into(),
            inverters: "fixture/inverters.csv".into(),
            telemetry: "fixture/telemetry_buses.csv".into(),
            solar: "fixture/solar_buses.csv".into(),
            traces: "fixture/traces.csv".into(),
            run_dir: "runs/demo".into(),
            model: None,
            v_lo: 0.97,
            v_hi: 1.03,
            v0: 1.0,
            train_start_min: 750,
            train_minutes: 60,
            test_start_min: None,
            test_minutes: None,
            ingest_scale: 1.0,
            pf_lo: 0.90,
            pf_hi: 0.98,
            pf_seed: 11,
            replication: 4,
            noise_std: 0.002,
            augment_seed: 13,
            epochs: 30,
            primal_lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dual_step0: 1.0,
            dual_decay: 0.5,
            train_seed: 17,
            epoch_reshuffle: true,
            batch_size: 1,
            record_lambda: false,
            control_dim: 1,
            hidden: 6,
            gen_days: 1,
            gen_step_minutes: 1,
            gen_scale: 1.0,
            gen_seed: 99,
            opf_tol: 1e-8,
            dd_tol: 1e-6,
            dd_max_iters: 30_000,
            dd_step0: 1.0,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Contract(format!("config key {key}: cannot parse {value:?} as {what}"))
}

macro_rules! parse_as {
    ($key:expr, $value:expr, $what:expr) => {
        $value.parse().map_err(|_| bad($key, $value, $what))?
    };
}

impl RunConfig {
    /// Parses the config file and applies it over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Ingest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let dotted = format!("{section}.{}", key.trim());
            self.apply(&dotted, value.trim()).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Contract(format!(
                "override {assignment:?} must look like section.key=value"
            ))
        })?;
        self.apply(key.trim(), value.trim())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "paths.feeder" => self.feeder = value.into(),
            "paths.inverters" => self.inverters = value.into(),
            "paths.telemetry" => self.telemetry = value.into(),
            "paths.solar" => self.solar = value.into(),
            "paths.traces" => self.traces = value.into(),
            "paths.run_dir" => self.run_dir = value.into(),
            "paths.model" => self.model = Some(value.into()),
            "limits.v_lo" => self.v_lo = parse_as!(key, value, "a number"),
            "limits.v_hi" => self.v_hi = parse_as!(key, value, "a number"),
            "limits.v0" => self.v0 = parse_as!(key, value, "a number"),
            "window.train_start_min" => {
                self.train_start_min = parse_as!(key, value, "an integer")
            }
            "window.train_minutes" => self.train_minutes = parse_as!(key, value, "an integer"),
            "window.test_start_min" => {
                self.test_start_min = Some(parse_as!(key, value, "an integer"))
            }
            "window.test_minutes" => {
                self.test_minutes = Some(parse_as!(key, value, "an integer"))
            }
            "scenarios.ingest_scale" => self.ingest_scale = parse_as!(key, value, "a number"),
            "scenarios.pf_lo" => self.pf_lo = parse_as!(key, value, "a number"),
            "scenarios.pf_hi" => self.pf_hi = parse_as!(key, value, "a number"),
            "scenarios.pf_seed" => self.pf_seed = parse_as!(key, value, "an integer"),
            "scenarios.replication" => self.replication = parse_as!(key, value, "an integer"),
            "scenarios.noise_std" => self.noise_std = parse_as!(key, value, "a number"),
            "scenarios.augment_seed" => self.augment_seed = parse_as!(key, value, "an integer"),
            "train.epochs" => self.epochs = parse_as!(key, value, "an integer"),
            "train.primal_lr" => self.primal_lr = parse_as!(key, value, "a number"),
            "train.beta1" => self.beta1 = parse_as!(key, value, "a number"),
            "train.beta2" => self.beta2 = parse_as!(key, value, "a number"),
            "train.epsilon" => self.epsilon = parse_as!(key, value, "a number"),
            "train.dual_step0" => self.dual_step0 = parse_as!(key, value, "a number"),
            "train.dual_decay" => self.dual_decay = parse_as!(key, value, "a number"),
            "train.seed" => self.train_seed = parse_as!(key, value, "an integer"),
            "train.epoch_reshuffle" => {
                self.epoch_reshuffle = parse_as!(key, value, "true or false")
            }
            "train.batch_size" => self.batch_size = parse_as!(key, value, "an integer"),
            "train.record_lambda" => {
                self.record_lambda = parse_as!(key, value, "true or false")
            }
            "train.control_dim" => self.control_dim = parse_as!(key, value, "an integer"),
            "train.hidden" => self.hidden = parse_as!(key, value, "an integer"),
            "gen.days" => self.gen_days = parse_as!(key, value, "an integer"),
            "gen.step_minutes" => self.gen_step_minutes = parse_as!(key, value, "an integer"),
            "gen.scale" => self.gen_scale = parse_as!(key, value, "a number"),
            "gen.seed" => self.gen_seed = parse_as!(key, value, "an integer"),
            "eval.opf_tol" => self.opf_tol = parse_as!(key, value, "a number"),
            "eval.dd_tol" => self.dd_tol = parse_as!(key, value, "a number"),
            "eval.dd_max_iters" => self.dd_max_iters = parse_as!(key, value, "an integer"),
            "eval.dd_step0" => self.dd_step0 = parse_as!(key, value, "a number"),
            other => {
                return Err(Error::Contract(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn model_path(&self) -> PathBuf {
        self.model
            .clone()
            .unwrap_or_else(|| self.run_dir.join("model.json"))
    }

    pub fn train_window(&self) -> (u64, u64) {
        (
            self.train_start_min,
            self.train_start_min + self.train_minutes,
        )
    }

    /// Test window; by default the hour right after training ends.
    pub fn test_window(&self) -> (u64, u64) {
        let start = self
            .test_start_min
            .unwrap_or(self.train_start_min + self.train_minutes);
        let minutes = self.test_minutes.unwrap_or(self.train_minutes);
        (start, start + minutes)
    }

    /// Canonical rendering of every resolved setting, used for hashing.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let kv: Vec<(&str, String)> = vec![
            ("paths.feeder", self.feeder.display().to_string()),
            ("paths.inverters", self.inverters.display().to_string()),
            ("paths.telemetry", self.telemetry.display().to_string()),
            ("paths.solar", self.solar.display().to_string()),
            ("paths.traces", self.traces.display().to_string()),
            ("paths.run_dir", self.run_dir.display().to_string()),
            ("paths.model", self.model_path().display().to_string()),
            ("limits.v_lo", self.v_lo.to_string()),
            ("limits.v_hi", self.v_hi.to_string()),
            ("limits.v0", self.v0.to_string()),
            ("window.train_start_min", self.train_start_min.to_string()),
            ("window.train_minutes", self.train_minutes.to_string()),
            ("window.test_start_min", self.test_window().0.to_string()),
            (
                "window.test_minutes",
                (self.test_window().1 - self.test_window().0).to_string(),
            ),
            ("scenarios.ingest_scale", self.ingest_scale.to_string()),
            ("scenarios.pf_lo", self.pf_lo.to_string()),
            ("scenarios.pf_hi", self.pf_hi.to_string()),
            ("scenarios.pf_seed", self.pf_seed.to_string()),
            ("scenarios.replication", self.replication.to_string()),
            ("scenarios.noise_std", self.noise_std.to_string()),
            ("scenarios.augment_seed", self.augment_seed.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.primal_lr", self.primal_lr.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.epsilon", self.epsilon.to_string()),
            ("train.dual_step0", self.dual_step0.to_string()),
            ("train.dual_decay", self.dual_decay.to_string()),
            ("train.seed", self.train_seed.to_string()),
            ("train.epoch_reshuffle", self.epoch_reshuffle.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.record_lambda", self.record_lambda.to_string()),
            ("train.control_dim", self.control_dim.to_string()),
            ("train.hidden", self.hidden.to_string()),
            ("gen.days", self.gen_days.to_string()),
            ("gen.step_minutes", self.gen_step_minutes.to_string()),
            ("gen.scale", self.gen_scale.to_string()),
            ("gen.seed", self.gen_seed.to_string()),
            ("eval.opf_tol", self.opf_tol.to_string()),
            ("eval.dd_tol", self.dd_tol.to_string()),
            ("eval.dd_max_iters", self.dd_max_iters.to_string()),
            ("eval.dd_step0", self.dd_step0.to_string()),
        ];
        for (k, v) in kv {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
