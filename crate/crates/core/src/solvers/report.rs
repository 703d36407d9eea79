use serde::{Deserialize, Serialize};

use super::config::Algorithm;
use crate::error::{Error, Result};

/// Test-set statistics at one iteration. Costs carry the problem's display
/// sign (the G-expectation problem reports `Ê[φ]`, not the minimized `E[−φ]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    /// Training objective on the test paths.
    pub loss: f64,
    /// `mean |−h_x(x̃_T) − p̃_T|²` alone; `NaN` for the direct baseline.
    pub terminal_loss: f64,
    pub cost: f64,
    pub p0_mean: f64,
    pub p0_min: f64,
    pub p0_max: f64,
    pub wall_ms: u64,
    /// Mean over samples and steps of `|H_u|`, when the problem registers `H_u`.
    pub mean_abs_hu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub algorithm: Algorithm,
    pub problem: String,
    pub n: usize,
    pub seed: u64,
    pub iterations: usize,
    /// Final `p̃₀`; empty for the direct baseline.
    pub p0: Vec<f64>,
    /// Final `P̃₀`, row-major `n×n` (second-order runs only).
    pub big_p0: Option<Vec<f64>>,
    pub curve: Vec<EvalPoint>,
    /// Training-batch objective at every iteration.
    pub train_losses: Vec<f64>,
    pub final_loss: f64,
    pub final_cost: f64,
    pub wall_seconds: f64,
    /// Time spent in training iterations, excluding evaluation.
    pub train_seconds: f64,
    /// Largest Frobenius asymmetry of any `P̃ᵢ` seen in training.
    pub max_p_asymmetry: Option<f64>,
}

impl SolveReport {
    pub fn final_point(&self) -> &EvalPoint {
        self.curve.last().expect("reports always hold a final evaluation")
    }

    /// Mean of `p̃₀` components (`NaN` when there is none).
    pub fn p0_mean(&self) -> f64 {
        if self.p0.is_empty() {
            return f64::NAN;
        }
        self.p0.iter().sum::<f64>() / self.p0.len() as f64
    }
}

/// Population statistics (divisor `len`, not `len − 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Reference values for relative errors.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OracleValues {
    /// Common `p₀` component.
    pub p0_component: Option<f64>,
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub problem: String,
    pub n: usize,
    pub runs: usize,
    /// Componentwise statistics of `p̃₀` across runs.
    pub p0: Vec<Stats>,
    /// Statistics of the per-run component mean of `p̃₀`.
    pub p0_mean: Stats,
    pub loss: Stats,
    pub cost: Stats,
    pub time: Stats,
    pub p0_rel_err: Option<f64>,
    pub cost_rel_err: Option<f64>,
}

fn rel_err(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs()
}

pub fn aggregate_runs(reports: &[SolveReport], oracle: OracleValues) -> Result<RunSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("aggregate_runs needs at least one report"))?;
    if reports.iter().any(|r| {
        r.algorithm != first.algorithm
            || r.problem != first.problem
            || r.n != first.n
            || r.p0.len() != first.p0.len()
    }) {
        return Err(Error::invalid("reports come from different configurations"));
    }
    let col = |f: &dyn Fn(&SolveReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    let p0 = (0..first.p0.len())
        .map(|i| Stats::of(&col(&|r| r.p0[i])))
        .collect();
    let p0_mean = if first.p0.is_empty() {
        Stats::of(&[])
    } else {
        Stats::of(&col(&|r| r.p0_mean()))
    };
    let cost = Stats::of(&col(&|r| r.final_cost));
    Ok(RunSummary {
        algorithm: first.algorithm,
        problem: first.problem.clone(),
        n: first.n,
        runs: reports.len(),
        p0,
        p0_rel_err: oracle
            .p0_component
            .filter(|_| !first.p0.is_empty())
            .map(|r| rel_err(p0_mean.mean, r)),
        p0_mean,
        loss: Stats::of(&col(&|r| r.final_loss)),
        cost_rel_err: oracle.cost.map(|r| rel_err(cost.mean, r)),
        cost,
        time: Stats::of(&col(&|r| r.wall_seconds)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(cost: f64, p0: Vec<f64>) -> SolveReport {
        SolveReport {
            algorithm: Algorithm::Alg3,
            problem: "lq".into(),
            n: p0.len(),
            seed: 1,
            iterations: 0,
            p0,
            big_p0: None,
            curve: Vec::new(),
            train_losses: Vec::new(),
            final_loss: 0.0,
            final_cost: cost,
            wall_seconds: 1.0,
            train_seconds: 1.0,
            max_p_asymmetry: None,
        }
    }

    #[test]
    fn singleton_has_zero_spread() {
        let s = aggregate_runs(&[report(2.5, vec![-1.0, -2.0])], OracleValues::default()).unwrap();
        assert_eq!(s.cost.mean, 2.5);
        assert_eq!(s.cost.std, 0.0);
        assert_eq!(s.p0_mean.mean, -1.5);
    }

    #[test]
    fn population_std() {
        let s = aggregate_runs(
            &[report(2.0, vec![-1.0]), report(4.0, vec![-1.0])],
            OracleValues {
                p0_component: Some(-1.0),
                cost: Some(3.0),
            },
        )
        .unwrap();
        assert_eq!((s.cost.mean, s.cost.std), (3.0, 1.0));
        assert_eq!(s.cost_rel_err, Some(0.0));
        assert_eq!(s.p0_rel_err, Some(0.0));
    }

    #[test]
    fn mismatched_reports_are_rejected() {
        let mut b = report(1.0, vec![0.0]);
        b.problem = "nonlinear".into();
        assert!(aggregate_runs(&[report(1.0, vec![0.0]), b], OracleValues::default()).is_err());
        assert!(aggregate_runs(&[], OracleValues::default()).is_err());
    }
}
