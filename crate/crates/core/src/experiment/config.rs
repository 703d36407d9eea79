use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner_opt::OptOptions;
use crate::problems::{make_builtin, BuiltinParams, Problem};
use crate::solvers::{Algorithm, ArgmaxMode, TrainConfig};

/// Environment variable added to every seed.
pub const SEED_BASE_VAR: &str = "SMP_SEED_BASE";

/// File form of a run: a flat JSON object. Unknown keys are rejected and
/// every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: String,
    pub algorithm: Algorithm,
    pub n: usize,
    pub iterations: usize,
    pub steps: usize,
    pub batch: usize,
    pub test_paths: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_every: f64,
    /// `None` picks the per-problem preset.
    pub lambda: Option<f64>,
    pub eval_interval: usize,
    pub hidden_layers: usize,
    pub batch_norm: bool,
    pub per_time_nets: bool,
    pub argmax: ArgmaxMode,
    pub random_p0: bool,
    pub inner_max_iters: usize,
    pub inner_tol: f64,
    pub horizon: Option<f64>,
    pub x0: Option<f64>,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    /// Runs seeds `1..=seeds` (shifted by `SMP_SEED_BASE`).
    pub seeds: usize,
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
    pub output: PathBuf,
    /// Compute reference values and relative errors where an oracle exists.
    pub oracle: bool,
    /// Record wall-clock columns; off makes reruns byte-identical.
    pub timing: bool,
    /// Write one checkpoint per seed next to the CSVs.
    pub checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = BuiltinParams::default();
        Self {
            problem: "lq".into(),
            algorithm: Algorithm::Alg3,
            n: 5,
            iterations: t.iterations,
            steps: t.steps,
            batch: t.batch,
            test_paths: t.test_paths,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            decay_every: t.decay_every,
            lambda: None,
            eval_interval: t.eval_interval,
            hidden_layers: t.hidden_layers,
            batch_norm: t.batch_norm,
            per_time_nets: t.per_time_nets,
            argmax: t.argmax,
            random_p0: t.random_p0,
            inner_max_iters: t.inner.max_iters,
            inner_tol: t.inner.tol,
            horizon: p.horizon,
            x0: p.x0,
            sigma_lo: p.sigma_lo,
            sigma_hi: p.sigma_hi,
            seeds: 10,
            jobs: None,
            output: PathBuf::from("out"),
            oracle: true,
            timing: true,
            checkpoints: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn builtin_params(&self) -> BuiltinParams {
        BuiltinParams {
            horizon: self.horizon,
            x0: self.x0,
            sigma_lo: self.sigma_lo,
            sigma_hi: self.sigma_hi,
        }
    }

    pub fn build_problem(&self) -> Result<Problem> {
        make_builtin(&self.problem, self.n, &self.builtin_params())
    }

    pub fn train_config(&self) -> TrainConfig {
        let preset = TrainConfig::preset(&self.problem, self.n);
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            test_paths: self.test_paths,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            lambda: self.lambda.unwrap_or(preset.lambda),
            eval_interval: self.eval_interval,
            hidden_layers: self.hidden_layers,
            batch_norm: self.batch_norm,
            per_time_nets: self.per_time_nets,
            argmax: self.argmax,
            random_p0: self.random_p0,
            inner: OptOptions {
                max_iters: self.inner_max_iters,
                tol: self.inner_tol,
                ..preset.inner
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.train_config().validate()?;
        self.build_problem().map(|_| ())
    }

    pub fn jobs(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    /// Seeds `1..=seeds`, each offset by `SMP_SEED_BASE`.
    pub fn seed_list(&self) -> Result<Vec<u64>> {
        let base = seed_base()?;
        (1..=self.seeds as u64)
            .map(|s| {
                s.checked_add(base)
                    .ok_or_else(|| Error::Config(format!("{SEED_BASE_VAR} overflows seed {s}")))
            })
            .collect()
    }
}

/// Value of `SMP_SEED_BASE`, 0 when unset.
pub fn seed_base() -> Result<u64> {
    match std::env::var(SEED_BASE_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_BASE_VAR} must be an unsigned integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(Error::Config(format!("{SEED_BASE_VAR}: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"problem": "lq", "iters": 5}"#).unwrap_err();
        assert!(err.to_string().contains("iters"), "{err}");
    }

    #[test]
    fn file_keys_and_defaults() {
        let c = RunConfig::from_json(r#"{"problem": "nonlinear", "algorithm": "2", "n": 10, "argmax": "lbfgs"}"#)
            .unwrap();
        assert_eq!(c.algorithm, Algorithm::Alg2);
        assert_eq!(c.argmax, ArgmaxMode::Lbfgs);
        assert_eq!(c.train_config().lambda, 0.003);
        assert_eq!(c.steps, 25);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn explicit_lambda_wins_over_preset() {
        let c = RunConfig {
            lambda: Some(0.3),
            ..RunConfig::default()
        };
        assert_eq!(c.train_config().lambda, 0.3);
    }
}
