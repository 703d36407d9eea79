use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use smpcontrol::experiment::{
    execute, fmt_g, gradcheck_suite, table1, table2, write_run, write_table1, write_table2,
    RunConfig, HOPF_COLE_SEED, RICCATI_STEPS, TABLE2_DIMS,
};
use smpcontrol::oracles::{gexp_exact_quadratic, hopf_cole_mc, lq_fbsde_coefficients, monotonicity_check, riccati_rk4};
use smpcontrol::problems::Terminal;
use smpcontrol::solvers::{Algorithm, ArgmaxMode};

#[derive(Parser)]
#[command(name = "smpcontrol", version, about = "Stochastic optimal control through the stochastic maximum principle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over several seeds and write curve and summary CSVs.
    Run(RunArgs),
    /// Print reference values as `key,value` lines.
    Oracle {
        #[command(subcommand)]
        kind: OracleKind,
    },
    /// Reproduce a benchmark table as CSV on stdout (and in the output directory).
    Table(TableArgs),
    /// Compare tape gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Flags override the matching keys of `--config`.
#[derive(Args, Default)]
struct RunArgs {
    /// Flat JSON object with any of the run keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// 1, 2, 3, 4 or direct.
    #[arg(long, value_parser = parse_alg)]
    alg: Option<Algorithm>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    test_paths: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    batch_norm: Option<bool>,
    #[arg(long)]
    per_time_nets: Option<bool>,
    #[arg(long, value_enum)]
    argmax: Option<ArgmaxFlag>,
    #[arg(long)]
    random_p0: Option<bool>,
    #[arg(long)]
    inner_max_iters: Option<usize>,
    #[arg(long)]
    inner_tol: Option<f64>,
    #[arg(long = "T")]
    horizon: Option<f64>,
    #[arg(long)]
    x0: Option<f64>,
    #[arg(long)]
    sigma_lo: Option<f64>,
    #[arg(long)]
    sigma_hi: Option<f64>,
    /// Runs seeds 1..=k.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Skip reference values and relative errors.
    #[arg(long)]
    no_oracle: bool,
    /// Leave the wall-clock columns empty so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
    /// Write a solver checkpoint per seed.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArgmaxFlag {
    Auto,
    Lbfgs,
}

fn parse_alg(s: &str) -> std::result::Result<Algorithm, String> {
    Algorithm::parse(s).map_err(|e| e.to_string())
}

macro_rules! overlay {
    ($cfg:ident, $args:ident, $($field:ident => $key:ident),* $(,)?) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$key = v.into(); })*
    };
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let args = self;
        overlay!(cfg, args,
            problem => problem, alg => algorithm, n => n, iters => iterations, steps => steps,
            batch => batch, test_paths => test_paths, lr => learning_rate, lr_decay => lr_decay,
            decay_every => decay_every, eval_interval => eval_interval, hidden_layers => hidden_layers,
            batch_norm => batch_norm, per_time_nets => per_time_nets, random_p0 => random_p0,
            inner_max_iters => inner_max_iters, inner_tol => inner_tol, sigma_lo => sigma_lo,
            sigma_hi => sigma_hi, seeds => seeds, output => output,
        );
        if let Some(v) = self.lambda {
            cfg.lambda = Some(v);
        }
        if let Some(v) = self.horizon {
            cfg.horizon = Some(v);
        }
        if let Some(v) = self.x0 {
            cfg.x0 = Some(v);
        }
        if let Some(v) = self.jobs {
            cfg.jobs = Some(v);
        }
        if let Some(a) = self.argmax {
            cfg.argmax = match a {
                ArgmaxFlag::Auto => ArgmaxMode::Auto,
                ArgmaxFlag::Lbfgs => ArgmaxMode::Lbfgs,
            };
        }
        cfg.oracle &= !self.no_oracle;
        cfg.timing &= !self.no_timing;
        cfg.checkpoints |= self.checkpoints;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum OracleKind {
    /// Backward RK4 for the `lq` Riccati system.
    Riccati {
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long = "T", default_value_t = 0.1)]
        horizon: f64,
        #[arg(long, value_enum, default_value = "identity")]
        terminal: TerminalFlag,
        /// Every coordinate of the initial state.
        #[arg(long, default_value_t = 1.0)]
        x0: f64,
        #[arg(long, default_value_t = RICCATI_STEPS)]
        steps: usize,
    },
    /// Monte Carlo value of the `nonlinear` builtin.
    Hopfcole {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.0)]
        x0: f64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = HOPF_COLE_SEED)]
        seed: u64,
    },
    /// Exact `Ê[|x_T|²]` of the `gexp` builtin started at the origin.
    Gexp {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 2.0)]
        sigma_hi: f64,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
    },
    /// Random-pair check of the monotonicity conditions for the `lq` system.
    Monotonicity {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0.5)]
        nu1: f64,
        #[arg(long, default_value_t = 0.5)]
        nu2: f64,
        /// Replace the terminal map by `g(x) = −x`, which is not monotone.
        #[arg(long)]
        negate_terminal: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TerminalFlag {
    Identity,
    Ones,
}

#[derive(Args)]
struct TableArgs {
    /// 1 (algorithms 1 to 3 on `lq`, n = 5) or 2 (algorithms 2 and 3 on `lq_ones` across n).
    #[arg(value_parser = clap::value_parser!(u8).range(1..=2))]
    id: u8,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value = "out")]
    output: PathBuf,
    /// Dimensions for table 2.
    #[arg(long, value_delimiter = ',', default_values_t = TABLE2_DIMS)]
    dims: Vec<usize>,
    #[arg(long)]
    no_timing: bool,
}

fn kv(out: &mut impl Write, key: &str, value: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{key},{value}")?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    let out = execute(&cfg)?;
    let files = write_run(&cfg, &out)?;
    let mut stdout = std::io::stdout().lock();
    std::io::copy(
        &mut std::fs::File::open(&files.summary).context("re-reading summary")?,
        &mut stdout,
    )?;
    let failures = out.failures();
    for (seed, e) in &failures {
        eprintln!("seed {seed} failed: {e}");
    }
    eprintln!("wrote {} and {}", files.curves.display(), files.summary.display());
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_oracle(kind: &OracleKind) -> Result<ExitCode> {
    let mut out = std::io::stdout().lock();
    match *kind {
        OracleKind::Riccati {
            n,
            horizon,
            terminal,
            x0,
            steps,
        } => {
            let (term, name) = match terminal {
                TerminalFlag::Identity => (Terminal::Identity, "identity"),
                TerminalFlag::Ones => (Terminal::Ones, "ones"),
            };
            let sol = riccati_rk4(n, horizon, term, steps)?;
            let x = vec![x0; n];
            let p0 = sol.p0(&x);
            kv(&mut out, "n", n)?;
            kv(&mut out, "T", horizon)?;
            kv(&mut out, "terminal", name)?;
            kv(&mut out, "x0", x0)?;
            kv(&mut out, "steps", steps)?;
            kv(&mut out, "K0", fmt_g(sol.k0()[(0, 0)]))?;
            kv(&mut out, "M0", fmt_g(sol.m0()[(0, 0)]))?;
            kv(&mut out, "p0", fmt_g(p0.iter().sum::<f64>() / n as f64))?;
            kv(&mut out, "optimal_cost", fmt_g(sol.optimal_cost(&x)))?;
        }
        OracleKind::Hopfcole {
            n,
            horizon,
            x0,
            samples,
            seed,
        } => {
            let est = hopf_cole_mc(n, &vec![x0; n], horizon, samples, seed)?;
            kv(&mut out, "n", n)?;
            kv(&mut out, "T", horizon)?;
            kv(&mut out, "x0", x0)?;
            kv(&mut out, "samples", samples)?;
            kv(&mut out, "seed", seed)?;
            kv(&mut out, "value", fmt_g(est.value))?;
            kv(&mut out, "std_error", fmt_g(est.std_error))?;
        }
        OracleKind::Gexp { n, sigma_hi, horizon } => {
            if !(sigma_hi > 0.0 && horizon > 0.0) {
                bail!("sigma-hi and T must be positive");
            }
            kv(&mut out, "n", n)?;
            kv(&mut out, "sigma_hi", sigma_hi)?;
            kv(&mut out, "T", horizon)?;
            kv(&mut out, "value", fmt_g(gexp_exact_quadratic(n, sigma_hi, horizon)))?;
        }
        OracleKind::Monotonicity {
            n,
            samples,
            nu1,
            nu2,
            negate_terminal,
            seed,
        } => {
            let mut coeffs = lq_fbsde_coefficients(n);
            if negate_terminal {
                coeffs.g = Box::new(|x| x.iter().map(|v| -v).collect());
            }
            let r = monotonicity_check(&coeffs, nu1, nu2, samples, seed)?;
            kv(&mut out, "n", n)?;
            kv(&mut out, "samples", samples)?;
            kv(&mut out, "nu1", nu1)?;
            kv(&mut out, "nu2", nu2)?;
            kv(&mut out, "terminal", if negate_terminal { "-x" } else { "x" })?;
            kv(&mut out, "seed", seed)?;
            kv(&mut out, "worst_a_violation", fmt_g(r.worst_a_violation))?;
            kv(&mut out, "worst_g_violation", fmt_g(r.worst_g_violation))?;
            kv(&mut out, "worst_ratio", fmt_g(r.worst_ratio))?;
            kv(
                &mut out,
                "first_violation",
                r.first_violation.map(|i| i.to_string()).unwrap_or_default(),
            )?;
            kv(&mut out, "passed", r.passed)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_table(args: &TableArgs) -> Result<ExitCode> {
    let base = RunConfig {
        iterations: args.iters,
        seeds: args.seeds,
        jobs: args.jobs,
        output: args.output.clone(),
        timing: !args.no_timing,
        ..RunConfig::default()
    };
    std::fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let path = args.output.join(format!("table{}.csv", args.id));
    let mut buf = Vec::new();
    if args.id == 1 {
        let (rows, oracle) = table1(&base)?;
        write_table1(&mut buf, &rows, oracle, base.timing)?;
    } else {
        if args.dims.is_empty() {
            bail!("--dims needs at least one dimension");
        }
        write_table2(&mut buf, &table2(&base, &args.dims)?)?;
    }
    std::fs::write(&path, &buf).with_context(|| format!("writing {}", path.display()))?;
    std::io::stdout().write_all(&buf)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64) -> Result<ExitCode> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "check,max_rel_err,passed")?;
    let mut ok = true;
    for c in gradcheck_suite(seed)? {
        writeln!(out, "{},{},{}", c.name, fmt_g(c.max_rel_err), c.passed)?;
        ok &= c.passed;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Oracle { kind } => cmd_oracle(kind),
        Command::Table(args) => cmd_table(args),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

