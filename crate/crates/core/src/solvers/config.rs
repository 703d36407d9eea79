use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner_opt::OptOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// One net for `q̃(t, x, p)`, control from the maximum condition.
    #[serde(rename = "1")]
    Alg1,
    /// Nets for `q̃(t, x)` and `ũ(t, x)`, `H_u` penalty.
    #[serde(rename = "2")]
    Alg2,
    /// One net for `q̃(t, x, p)` driving the control-free `H̄` system.
    #[serde(rename = "3")]
    Alg3,
    /// First- and second-order adjoints with the generalized Hamiltonian.
    #[serde(rename = "4")]
    Alg4,
    /// Control net trained on the cost functional directly.
    #[serde(rename = "direct")]
    Direct,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Alg1,
        Algorithm::Alg2,
        Algorithm::Alg3,
        Algorithm::Alg4,
        Algorithm::Direct,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Alg1 => "1",
            Algorithm::Alg2 => "2",
            Algorithm::Alg3 => "3",
            Algorithm::Alg4 => "4",
            Algorithm::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm `{s}` (expected 1, 2, 3, 4 or direct)")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// How the control is obtained where the maximum condition is needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgmaxMode {
    /// Closed form when the problem registers one, else L-BFGS.
    Auto,
    /// Always the inner L-BFGS / projected-gradient solver.
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub test_paths: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` fraction of the iterations.
    pub lr_decay: f64,
    pub decay_every: f64,
    /// Penalty weight; the `T/N` factor is folded in.
    pub lambda: f64,
    pub eval_interval: usize,
    pub hidden_layers: usize,
    pub batch_norm: bool,
    /// One network per time point instead of a shared one.
    pub per_time_nets: bool,
    pub argmax: ArgmaxMode,
    /// Draw `p̃₀` from `N(0, 1)` instead of `−h_x(x₀)`.
    pub random_p0: bool,
    pub inner: OptOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            batch: 64,
            test_paths: 512,
            iterations: 2000,
            learning_rate: 5e-3,
            lr_decay: 0.5,
            decay_every: 0.4,
            lambda: 0.01,
            eval_interval: 25,
            hidden_layers: 3,
            batch_norm: false,
            per_time_nets: false,
            argmax: ArgmaxMode::Auto,
            random_p0: false,
            inner: OptOptions::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the penalty weight suggested for `problem` at dimension `n`.
    pub fn preset(problem: &str, n: usize) -> Self {
        let lambda = match problem {
            "lq" | "lq_ones" if n >= 100 => 0.05,
            "lq" | "lq_ones" => 0.01,
            "nonlinear" => 0.003,
            "transcendental" => 0.1,
            _ => 0.01,
        };
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch < 2 || self.test_paths < 2 {
            return bad("batch and test_paths must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.decay_every > 0.0) {
            return bad("decay_every must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1");
        }
        if self.hidden_layers == 0 {
            return bad("hidden_layers must be at least 1");
        }
        Ok(())
    }

    /// Step size at iteration `l`.
    pub fn learning_rate_at(&self, l: usize) -> f64 {
        let period = ((self.decay_every * self.iterations as f64).round() as usize).max(1);
        self.learning_rate * self.lr_decay.powi((l / period) as i32)
    }
}
