//! Python module `smpcontrol_py`: oracles, a single-seed solver entry point
//! and the gradient-check suite. Training releases the GIL.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use smpcontrol::experiment::{gradcheck_suite, RunConfig, RICCATI_STEPS};
use smpcontrol::oracles::{gexp_exact_quadratic, hopf_cole_mc, riccati_rk4};
use smpcontrol::problems::{Terminal, BUILTIN_NAMES};
use smpcontrol::solvers::{Algorithm, SolveReport, Solver};
use smpcontrol::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::UnknownProblem(_)
        | Error::Unsupported(_)
        | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_terminal(name: &str) -> PyResult<Terminal> {
    match name {
        "identity" => Ok(Terminal::Identity),
        "ones" => Ok(Terminal::Ones),
        other => Err(PyValueError::new_err(format!(
            "terminal must be `identity` or `ones`, got `{other}`"
        ))),
    }
}

/// Run configuration from optional JSON overrides plus the required keys.
fn run_config(problem: &str, algorithm: &str, n: usize, overrides: Option<&str>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_json(overrides.unwrap_or("{}"))?;
    cfg.problem = problem.to_string();
    cfg.algorithm = Algorithm::parse(algorithm)?;
    cfg.n = n;
    cfg.validate()?;
    Ok(cfg)
}

fn train(cfg: &RunConfig, seed: u64) -> Result<SolveReport, Error> {
    let mut solver = Solver::new(cfg.algorithm, cfg.build_problem()?, cfg.train_config(), seed)?;
    solver.train(&mut |_| {})
}

/// Backward RK4 reference for the `lq` problems: `K0` (diagonal entry),
/// the common `p0` component and the optimal cost.
#[pyfunction]
#[pyo3(signature = (n, horizon=0.1, terminal="identity", x0=1.0, steps=RICCATI_STEPS))]
fn riccati<'py>(
    py: Python<'py>,
    n: usize,
    horizon: f64,
    terminal: &str,
    x0: f64,
    steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let sol = riccati_rk4(n, horizon, parse_terminal(terminal)?, steps).map_err(to_py)?;
    let x = vec![x0; n];
    let p0 = sol.p0(&x);
    let out = PyDict::new(py);
    out.set_item("K0", sol.k0()[(0, 0)])?;
    out.set_item("p0", p0.iter().sum::<f64>() / n as f64)?;
    out.set_item("optimal_cost", sol.optimal_cost(&x))?;
    Ok(out)
}

/// Monte Carlo value of the `nonlinear` problem as `(value, std_error)`.
#[pyfunction]
#[pyo3(signature = (n, samples=200_000, horizon=1.0, x0=0.0, seed=0x5eed))]
fn hopf_cole(py: Python<'_>, n: usize, samples: usize, horizon: f64, x0: f64, seed: u64) -> PyResult<(f64, f64)> {
    let est = py
        .detach(|| hopf_cole_mc(n, &vec![x0; n], horizon, samples, seed))
        .map_err(to_py)?;
    Ok((est.value, est.std_error))
}

#[pyfunction]
#[pyo3(signature = (n, sigma_hi=2.0, horizon=1.0))]
fn gexp_value(n: usize, sigma_hi: f64, horizon: f64) -> f64 {
    gexp_exact_quadratic(n, sigma_hi, horizon)
}

/// Trains one seed. `config` is a JSON object with any run keys, e.g.
/// `'{"iterations": 500, "steps": 25}'`.
#[pyfunction]
#[pyo3(signature = (problem, algorithm, n, seed=1, config=None))]
fn solve<'py>(
    py: Python<'py>,
    problem: &str,
    algorithm: &str,
    n: usize,
    seed: u64,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(problem, algorithm, n, config).map_err(to_py)?;
    let report = py.detach(|| train(&cfg, seed)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("algorithm", report.algorithm.to_string())?;
    out.set_item("problem", &report.problem)?;
    out.set_item("n", report.n)?;
    out.set_item("seed", report.seed)?;
    out.set_item("p0", &report.p0)?;
    out.set_item("cost", report.final_cost)?;
    out.set_item("loss", report.final_loss)?;
    out.set_item("train_seconds", report.train_seconds)?;
    let curve: Vec<(usize, f64, f64)> = report.curve.iter().map(|e| (e.iteration, e.loss, e.cost)).collect();
    out.set_item("curve", curve)?;
    Ok(out)
}

/// `[(name, max_rel_err, passed), ...]`.
#[pyfunction]
#[pyo3(signature = (seed=1))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let checks = py.detach(|| gradcheck_suite(seed)).map_err(to_py)?;
    Ok(checks.into_iter().map(|c| (c.name, c.max_rel_err, c.passed)).collect())
}

#[pyfunction]
fn problems() -> Vec<&'static str> {
    BUILTIN_NAMES.to_vec()
}

#[pymodule]
fn smpcontrol_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(riccati, m)?)?;
    m.add_function(wrap_pyfunction!(hopf_cole, m)?)?;
    m.add_function(wrap_pyfunction!(gexp_value, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(problems, m)?)?;
    Ok(())
}
