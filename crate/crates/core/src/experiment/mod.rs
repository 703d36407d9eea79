//! Seed orchestration, oracle lookups and the benchmark tables behind the
//! command-line front end.

mod config;
mod csv_out;
mod gradcheck;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub use config::{seed_base, RunConfig, SEED_BASE_VAR};
pub use gradcheck::{gradcheck_suite, penalty_loss_gradcheck, GradCheck, GRADCHECK_TOL};
pub use csv_out::{fmt_g, fmt_opt, write_curves, write_summaries, CURVE_HEADER, SUMMARY_HEADER};

use crate::error::{Error, Result};
use crate::oracles::{gexp_exact_quadratic, hopf_cole_mc, riccati_rk4};
use crate::problems::{BuiltinParams, Terminal};
use crate::solvers::{aggregate_runs, Algorithm, ArgmaxMode, OracleValues, RunSummary, SolveReport, Solver};

/// RK4 steps used for Riccati reference values.
pub const RICCATI_STEPS: usize = 10_000;
/// Monte Carlo samples (and the fixed seed) for Hopf-Cole reference values.
pub const HOPF_COLE_SAMPLES: usize = 200_000;
pub const HOPF_COLE_SEED: u64 = 0x5eed;

/// Reference `p₀` component and optimal cost for a builtin problem, where
/// one is known.
pub fn oracle_values(problem: &str, n: usize, params: &BuiltinParams) -> Result<OracleValues> {
    let horizon = |default: f64| params.horizon.unwrap_or(default);
    match problem {
        "lq" | "lq_ones" => {
            let terminal = if problem == "lq" {
                Terminal::Identity
            } else {
                Terminal::Ones
            };
            let x0 = vec![params.x0.unwrap_or(1.0); n];
            let sol = riccati_rk4(n, horizon(0.1), terminal, RICCATI_STEPS)?;
            let p0 = sol.p0(&x0);
            Ok(OracleValues {
                p0_component: Some(p0.iter().sum::<f64>() / n as f64),
                cost: Some(sol.optimal_cost(&x0)),
            })
        }
        // the closed form holds from the origin only
        "gexp" if params.x0.unwrap_or(0.0) == 0.0 => Ok(OracleValues {
            p0_component: None,
            cost: Some(gexp_exact_quadratic(n, params.sigma_hi, horizon(1.0))),
        }),
        "nonlinear" => {
            let x0 = vec![params.x0.unwrap_or(0.0); n];
            let est = hopf_cole_mc(n, &x0, horizon(1.0), HOPF_COLE_SAMPLES, HOPF_COLE_SEED)?;
            Ok(OracleValues {
                p0_component: None,
                cost: Some(est.value),
            })
        }
        _ => Ok(OracleValues::default()),
    }
}

/// Outcome of one seed.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub result: Result<SolveReport>,
    /// Solver checkpoint text, when requested.
    pub checkpoint: Option<Vec<u8>>,
}

fn run_one(cfg: &RunConfig, seed: u64, checkpoint: bool) -> SeedRun {
    let attempt = || -> Result<(SolveReport, Option<Vec<u8>>)> {
        let mut solver = Solver::new(cfg.algorithm, cfg.build_problem()?, cfg.train_config(), seed)?;
        let report = solver.train(&mut |_| {})?;
        let ckpt = if checkpoint {
            let mut buf = Vec::new();
            solver.save_checkpoint(&mut buf)?;
            Some(buf)
        } else {
            None
        };
        Ok((report, ckpt))
    };
    match attempt() {
        Ok((report, checkpoint)) => SeedRun {
            seed,
            result: Ok(report),
            checkpoint,
        },
        Err(e) => SeedRun {
            seed,
            result: Err(e),
            checkpoint: None,
        },
    }
}

/// Trains every seed on a pool of `jobs` threads. Results come back in seed
/// order regardless of completion order.
pub fn run_seeds(cfg: &RunConfig, seeds: &[u64], jobs: usize) -> Vec<SeedRun> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SeedRun>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, seeds.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let run = run_one(cfg, seed, cfg.checkpoints);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(run);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect()
}

/// Everything `run` produces for one configuration.
#[derive(Debug)]
pub struct RunOutput {
    pub runs: Vec<SeedRun>,
    pub summary: Option<RunSummary>,
    pub oracle: OracleValues,
}

impl RunOutput {
    pub fn reports(&self) -> Vec<SolveReport> {
        self.runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok().cloned())
            .collect()
    }

    pub fn failures(&self) -> Vec<(u64, &Error)> {
        self.runs
            .iter()
            .filter_map(|r| r.result.as_ref().err().map(|e| (r.seed, e)))
            .collect()
    }
}

pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let seeds = cfg.seed_list()?;
    let oracle = if cfg.oracle {
        oracle_values(&cfg.problem, cfg.n, &cfg.builtin_params())?
    } else {
        OracleValues::default()
    };
    let runs = run_seeds(cfg, &seeds, cfg.jobs());
    let reports: Vec<SolveReport> = runs
        .iter()
        .filter_map(|r| r.result.as_ref().ok().cloned())
        .collect();
    let summary = if reports.is_empty() {
        None
    } else {
        Some(aggregate_runs(&reports, oracle)?)
    };
    Ok(RunOutput {
        runs,
        summary,
        oracle,
    })
}

/// Paths written by [`write_run`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub curves: PathBuf,
    pub summary: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

fn stem(cfg: &RunConfig) -> String {
    format!("{}_alg{}_n{}", cfg.problem, cfg.algorithm, cfg.n)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(f))
}

/// Writes `<stem>_curves.csv`, `<stem>_summary.csv` and any checkpoints
/// into `cfg.output`.
pub fn write_run(cfg: &RunConfig, out: &RunOutput) -> Result<RunFiles> {
    std::fs::create_dir_all(&cfg.output)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", cfg.output.display())))?;
    let base = stem(cfg);
    let curves = cfg.output.join(format!("{base}_curves.csv"));
    write_curves(create(&curves)?, &out.reports(), cfg.timing)?;
    let summary = cfg.output.join(format!("{base}_summary.csv"));
    write_summaries(create(&summary)?, out.summary.as_slice(), cfg.timing)?;
    let mut checkpoints = Vec::new();
    for run in &out.runs {
        if let Some(bytes) = &run.checkpoint {
            let path = cfg.output.join(format!("{base}_seed{}.ckpt", run.seed));
            create(&path)?.write_all(bytes)?;
            checkpoints.push(path);
        }
    }
    Ok(RunFiles {
        curves,
        summary,
        checkpoints,
    })
}

/// One algorithm's row in a benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub algorithm: Algorithm,
    pub n: usize,
    pub summary: RunSummary,
}

fn table_entry(base: &RunConfig, problem: &str, alg: Algorithm, n: usize) -> Result<(TableEntry, OracleValues)> {
    let cfg = RunConfig {
        problem: problem.into(),
        algorithm: alg,
        n,
        argmax: if alg == Algorithm::Alg1 {
            ArgmaxMode::Lbfgs
        } else {
            base.argmax
        },
        ..base.clone()
    };
    let out = execute(&cfg)?;
    if let Some((seed, e)) = out.failures().first() {
        return Err(Error::Config(format!("{problem} n={n} alg {alg} seed {seed}: {e}")));
    }
    let summary = out.summary.expect("at least one successful seed");
    Ok((
        TableEntry {
            algorithm: alg,
            n,
            summary,
        },
        out.oracle,
    ))
}

/// The `lq` comparison at `n = 5`: algorithms 1 (inner L-BFGS), 2 and 3.
pub fn table1(base: &RunConfig) -> Result<(Vec<TableEntry>, OracleValues)> {
    let mut rows = Vec::new();
    let mut oracle = OracleValues::default();
    for alg in [Algorithm::Alg1, Algorithm::Alg2, Algorithm::Alg3] {
        let (row, o) = table_entry(base, "lq", alg, 5)?;
        oracle = o;
        rows.push(row);
    }
    Ok((rows, oracle))
}

pub const TABLE1_HEADER: [&str; 7] = ["alg", "p0_mean", "p0_rel_err", "cost_mean", "cost_rel_err", "loss_mean", "time_s"];

pub fn write_table1<W: Write>(w: W, rows: &[TableEntry], oracle: OracleValues, timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TABLE1_HEADER)?;
    out.write_record([
        "riccati".to_string(),
        fmt_opt(oracle.p0_component),
        String::new(),
        fmt_opt(oracle.cost),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    for r in rows {
        let s = &r.summary;
        out.write_record([
            r.algorithm.to_string(),
            fmt_g(s.p0_mean.mean),
            fmt_opt(s.p0_rel_err),
            fmt_g(s.cost.mean),
            fmt_opt(s.cost_rel_err),
            fmt_g(s.loss.mean),
            if timing { fmt_g(s.time.mean) } else { String::new() },
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub const TABLE2_DIMS: [usize; 5] = [1, 2, 5, 10, 20];
pub const TABLE2_HEADER: [&str; 8] = [
    "n",
    "riccati_p0",
    "alg2_p0",
    "alg2_rel_err",
    "alg2_cost",
    "alg3_p0",
    "alg3_rel_err",
    "alg3_cost",
];

/// Rows of the `lq_ones` comparison: `(n, riccati p₀ component, alg 2, alg 3)`.
pub type Table2Row = (usize, f64, TableEntry, TableEntry);

pub fn table2(base: &RunConfig, dims: &[usize]) -> Result<Vec<Table2Row>> {
    dims.iter()
        .map(|&n| {
            let (a2, oracle) = table_entry(base, "lq_ones", Algorithm::Alg2, n)?;
            let (a3, _) = table_entry(base, "lq_ones", Algorithm::Alg3, n)?;
            let reference = match oracle.p0_component {
                Some(v) => v,
                None => oracle_values("lq_ones", n, &base.builtin_params())?
                    .p0_component
                    .expect("riccati reference"),
            };
            Ok((n, reference, a2, a3))
        })
        .collect()
}

pub fn write_table2<W: Write>(w: W, rows: &[Table2Row]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TABLE2_HEADER)?;
    for (n, reference, a2, a3) in rows {
        let rel = |e: &TableEntry| fmt_g((e.summary.p0_mean.mean - reference).abs() / reference.abs());
        out.write_record([
            n.to_string(),
            fmt_g(*reference),
            fmt_g(a2.summary.p0_mean.mean),
            rel(a2),
            fmt_g(a2.summary.cost.mean),
            fmt_g(a3.summary.p0_mean.mean),
            rel(a3),
            fmt_g(a3.summary.cost.mean),
        ])?;
    }
    out.flush()?;
    Ok(())
}
