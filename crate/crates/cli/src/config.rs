//! Flat TOML run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use csp_core::optim::OptimizerKind;
use csp_core::{LrSchedule, SensingController, SolverConfig, SparsitySchedule, Strategy, TaskSpec, TrainConfig};
use serde::Deserialize;

/// A configuration problem, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn key_err(key: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError(format!("config key `{key}`: {msg}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Adding,
    Copy,
    CharLm,
}

/// Every key is optional; omitted keys take the desk-scale defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub strategy: Option<Strategy>,
    pub seed: Option<u64>,

    pub task: Option<TaskKind>,
    pub seq_len: Option<usize>,
    pub n_symbols: Option<usize>,
    pub corpus: Option<PathBuf>,

    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub batch_size: Option<usize>,
    pub total_steps: Option<u64>,
    pub dropout: Option<f64>,
    pub grad_clip: Option<f64>,
    pub optimizer: Option<OptimizerKind>,

    pub lr_init: Option<f64>,
    pub lr_peak: Option<f64>,
    pub lr_final: Option<f64>,
    pub warm_end: Option<u64>,
    pub hold_end: Option<u64>,
    pub decay_end: Option<u64>,

    pub final_sparsity: Option<f64>,
    pub prune_start: Option<u64>,
    pub prune_end: Option<u64>,
    pub capture_interval: Option<u64>,
    pub capture_size: Option<usize>,
    pub capture_floor: Option<usize>,
    pub capture_batch: Option<usize>,
    pub gradual_interval: Option<u64>,

    pub solver_max_iters: Option<usize>,
    pub solver_step_safety: Option<f64>,
    pub solver_rel_tol: Option<f64>,

    pub lambda_init: Option<f64>,
    pub lambda_lower: Option<f64>,
    pub lambda_upper: Option<f64>,
    pub lambda_step: Option<f64>,
    pub rho_init: Option<f64>,
    pub rho_growth_cap: Option<f64>,

    pub eval_size: Option<usize>,
    pub log_interval: Option<u64>,
    pub checkpoint_interval: Option<u64>,
    /// Test hook: force a non-finite loss at this step.
    pub inject_nan_at: Option<u64>,
}

/// A parsed configuration with paths resolved against the file's directory.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

fn positive<T: PartialOrd + Default + fmt::Display + Copy>(key: &str, v: T) -> Result<T, ConfigError> {
    if v <= T::default() {
        return Err(key_err(key, format!("must be positive, got {v}")));
    }
    Ok(v)
}

fn unit_interval(key: &str, v: f64, upper_inclusive: bool) -> Result<f64, ConfigError> {
    let ok = v >= 0.0 && (v < 1.0 || (upper_inclusive && v == 1.0));
    if !ok {
        let range = if upper_inclusive { "[0, 1]" } else { "[0, 1)" };
        return Err(key_err(key, format!("must be in {range}, got {v}")));
    }
    Ok(v)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Builds the training configuration, checking every key.
    /// `base` anchors relative paths.
    pub fn resolve(&self, base: &Path) -> Result<Resolved, ConfigError> {
        let strategy = self.strategy.unwrap_or(Strategy::Csp);
        let final_sparsity = unit_interval("final_sparsity", self.final_sparsity.unwrap_or(0.5), false)?;
        let seed = self.seed.unwrap_or(0);
        let mut c = TrainConfig::desk(strategy, final_sparsity, seed);

        let seq_len = self.seq_len.map(|v| positive("seq_len", v)).transpose()?;
        c.task = match self.task.unwrap_or(TaskKind::Adding) {
            TaskKind::Adding => {
                let seq_len = seq_len.unwrap_or(20);
                if seq_len < 2 {
                    return Err(key_err("seq_len", "adding problem needs at least 2 steps"));
                }
                TaskSpec::Adding { seq_len }
            }
            TaskKind::Copy => {
                let seq_len = seq_len.unwrap_or(20);
                if seq_len < 3 {
                    return Err(key_err("seq_len", "copy task needs at least 3 steps"));
                }
                let n_symbols = positive("n_symbols", self.n_symbols.unwrap_or(8))?;
                TaskSpec::Copy { seq_len, n_symbols }
            }
            TaskKind::CharLm => {
                let path = self
                    .corpus
                    .as_ref()
                    .ok_or_else(|| key_err("corpus", "required when task = \"char_lm\""))?;
                TaskSpec::CharLm {
                    path: base.join(path),
                    seq_len: seq_len.unwrap_or(50),
                }
            }
        };
        if self.task != Some(TaskKind::Copy) && self.n_symbols.is_some() {
            return Err(key_err("n_symbols", "only valid with task = \"copy\""));
        }
        if self.task != Some(TaskKind::CharLm) && self.corpus.is_some() {
            return Err(key_err("corpus", "only valid with task = \"char_lm\""));
        }

        if let Some(v) = self.hidden {
            c.hidden = positive("hidden", v)?;
        }
        if let Some(v) = self.layers {
            c.layers = positive("layers", v)?;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = positive("batch_size", v)?;
        }
        if let Some(v) = self.total_steps {
            c.total_steps = positive("total_steps", v)?;
        }
        if let Some(v) = self.dropout {
            c.dropout = unit_interval("dropout", v, false)?;
        }
        if let Some(v) = self.grad_clip {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(key_err("grad_clip", format!("must be >= 0 (0 disables), got {v}")));
            }
            c.grad_clip = v;
        }
        if let Some(v) = self.optimizer {
            c.optimizer = v;
        }

        let d = LrSchedule::desk();
        c.lr = LrSchedule {
            lr_init: self.lr_init.unwrap_or(d.lr_init),
            lr_peak: self.lr_peak.unwrap_or(d.lr_peak),
            lr_final: self.lr_final.unwrap_or(d.lr_final),
            warm_end: self.warm_end.unwrap_or(d.warm_end),
            hold_end: self.hold_end.unwrap_or(d.hold_end),
            decay_end: self.decay_end.unwrap_or(d.decay_end),
        };
        if !(c.lr.lr_init >= 0.0) {
            return Err(key_err("lr_init", format!("must be >= 0, got {}", c.lr.lr_init)));
        }
        positive("lr_peak", c.lr.lr_peak)?;
        positive("lr_final", c.lr.lr_final)?;
        if c.lr.lr_init > c.lr.lr_peak {
            return Err(key_err("lr_init", format!("must not exceed lr_peak ({})", c.lr.lr_peak)));
        }
        if c.lr.warm_end > c.lr.hold_end {
            return Err(key_err("warm_end", format!("must not exceed hold_end ({})", c.lr.hold_end)));
        }
        if c.lr.hold_end > c.lr.decay_end {
            return Err(key_err("hold_end", format!("must not exceed decay_end ({})", c.lr.decay_end)));
        }

        c.schedule = SparsitySchedule {
            final_sparsity,
            start: self.prune_start.unwrap_or(c.schedule.start),
            end: self.prune_end.unwrap_or(c.schedule.end),
        };
        if c.schedule.start >= c.schedule.end {
            return Err(key_err("prune_start", format!("must be below prune_end ({})", c.schedule.end)));
        }
        if c.schedule.start <= c.lr.warm_end {
            return Err(key_err("prune_start", format!("must be after warm_end ({})", c.lr.warm_end)));
        }
        if c.schedule.end >= c.lr.decay_end {
            return Err(key_err("prune_end", format!("must be before decay_end ({})", c.lr.decay_end)));
        }
        if let Some(v) = self.capture_interval {
            c.capture_interval = positive("capture_interval", v)?;
        }
        if let Some(v) = self.capture_size {
            c.capture_size = Some(positive("capture_size", v)?);
        }
        if let Some(v) = self.capture_floor {
            c.capture_floor = positive("capture_floor", v)?;
        }
        if let Some(v) = self.capture_batch {
            c.capture_batch = positive("capture_batch", v)?;
        }
        if let Some(v) = self.gradual_interval {
            c.gradual_interval = positive("gradual_interval", v)?;
        }

        let s = SolverConfig::default();
        c.solver = SolverConfig {
            max_iters: positive("solver_max_iters", self.solver_max_iters.unwrap_or(s.max_iters))?,
            step_safety: self.solver_step_safety.unwrap_or(s.step_safety),
            rel_tol: self.solver_rel_tol.unwrap_or(s.rel_tol),
        };
        if !(c.solver.step_safety > 0.0 && c.solver.step_safety <= 1.0) {
            return Err(key_err("solver_step_safety", format!("must be in (0, 1], got {}", c.solver.step_safety)));
        }
        if !(c.solver.rel_tol >= 0.0) {
            return Err(key_err("solver_rel_tol", format!("must be >= 0, got {}", c.solver.rel_tol)));
        }

        let k = SensingController::default();
        c.controller = SensingController {
            lambda: self.lambda_init.unwrap_or(k.lambda),
            lambda_lower: self.lambda_lower.unwrap_or(k.lambda_lower),
            lambda_upper: self.lambda_upper.unwrap_or(k.lambda_upper),
            epsilon: self.lambda_step.unwrap_or(k.epsilon),
            rho: self.rho_init.unwrap_or(k.rho),
            rho_growth_cap: self.rho_growth_cap.unwrap_or(k.rho_growth_cap),
        };
        let k = &c.controller;
        if !(k.lambda_lower >= 0.0) {
            return Err(key_err("lambda_lower", format!("must be >= 0, got {}", k.lambda_lower)));
        }
        if !(k.lambda_upper >= k.lambda_lower) {
            return Err(key_err("lambda_upper", format!("must be >= lambda_lower ({})", k.lambda_lower)));
        }
        if !(k.lambda >= k.lambda_lower && k.lambda <= k.lambda_upper) {
            return Err(key_err(
                "lambda_init",
                format!("must lie in [{}, {}], got {}", k.lambda_lower, k.lambda_upper, k.lambda),
            ));
        }
        if !(k.epsilon >= 0.0) {
            return Err(key_err("lambda_step", format!("must be >= 0, got {}", k.epsilon)));
        }
        if !(k.rho >= 0.0) {
            return Err(key_err("rho_init", format!("must be >= 0, got {}", k.rho)));
        }
        if !(k.rho_growth_cap >= 1.0) {
            return Err(key_err("rho_growth_cap", format!("must be >= 1, got {}", k.rho_growth_cap)));
        }

        if let Some(v) = self.eval_size {
            c.eval_size = positive("eval_size", v)?;
        }
        if let Some(v) = self.log_interval {
            c.log_interval = positive("log_interval", v)?;
        }
        if let Some(v) = self.checkpoint_interval {
            c.checkpoint_interval = v;
        }
        c.inject_nan_at = self.inject_nan_at;

        c.validate().map_err(|e| ConfigError(e.to_string()))?;
        let out_dir = base.join(self.out_dir.clone().unwrap_or_else(|| PathBuf::from("run")));
        Ok(Resolved { train: c, out_dir })
    }
}
