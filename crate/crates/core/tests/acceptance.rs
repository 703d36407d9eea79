//! Acceptance criteria 1 to 13. The desk-scale criteria run inside a single
//! test so that wall-clock checks (runtime limits, the algorithm timing
//! order) never compete with other tests for the CPU. Each criterion prints
//! one `criterion N: PASS|FAIL ...` line; extended-scale runs are ignored by
//! default (`cargo test --test acceptance -- --ignored`).

use std::io::Write;
use std::time::Instant;

use smpcontrol::autodiff::Graph;
use smpcontrol::experiment::{penalty_loss_gradcheck, GRADCHECK_TOL, RICCATI_STEPS};
use smpcontrol::oracles::{
    gexp_exact_quadratic, hopf_cole_mc, lq_fbsde_coefficients, monotonicity_check, riccati_rk4,
};
use smpcontrol::problems::{make_builtin, BuiltinParams, Problem, Terminal};
use smpcontrol::rollout::{rollout_first_order, terminal_loss, BrownianBatch, LossVariant, TimeGrid};
use smpcontrol::solvers::{aggregate_runs, Algorithm, ArgmaxMode, OracleValues, SolveReport, Solver, TrainConfig};
use smpcontrol::Tensor;

const K0_REFERENCE: f64 = 0.9586;
const LQ_ONES_P0: [(usize, f64); 3] = [(1, -0.9586), (2, -1.8275), (5, -4.3638)];
const LQ5_ALG3_COST: f64 = 2.388;
const LQ5_ALG2_COST: f64 = 2.390;
const HOPF_COLE_N100: f64 = 4.591;
const LQ_N100_COST: f64 = 48.056;
const GEXP_N100: f64 = 400.0;

/// Monte Carlo samples for the nonlinear reference values.
const HOPF_COLE_SAMPLES: usize = 1_000_000;

struct Outcome {
    id: u32,
    passed: bool,
    detail: String,
}

fn report(id: u32, passed: bool, detail: String) -> Outcome {
    // the stdout handle bypasses libtest's capture, so the lines show up
    // in a plain `cargo test` run
    let verdict = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout().lock(), "criterion {id}: {verdict} {detail}");
    Outcome { id, passed, detail }
}

fn rel(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs()
}

fn builtin(name: &str, n: usize) -> Problem {
    make_builtin(name, n, &BuiltinParams::default()).unwrap()
}

/// Preset for `problem` with evaluation only at the start and the end.
fn config(problem: &str, n: usize, iterations: usize, test_paths: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        test_paths,
        eval_interval: iterations.max(1),
        ..TrainConfig::preset(problem, n)
    }
}

fn train(alg: Algorithm, problem: &str, n: usize, cfg: &TrainConfig, seed: u64) -> SolveReport {
    let mut solver = Solver::new(alg, builtin(problem, n), cfg.clone(), seed).unwrap();
    solver.train(&mut |_| {}).unwrap()
}

/// Trailing-100-iteration mean training loss is below the leading one.
fn loss_decreased(r: &SolveReport) -> bool {
    let l = &r.train_losses;
    let w = 100.min(l.len() / 2).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&l[l.len() - w..]) < mean(&l[..w])
}

fn riccati_p0(terminal: Terminal, n: usize) -> f64 {
    let sol = riccati_rk4(n, 0.1, terminal, RICCATI_STEPS).unwrap();
    sol.p0(&vec![1.0; n]).iter().sum::<f64>() / n as f64
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let k0 = riccati_rk4(1, 0.1, Terminal::Identity, RICCATI_STEPS).unwrap().k0()[(0, 0)];
    let secs = t.elapsed().as_secs_f64();
    let err = (k0 - K0_REFERENCE).abs();
    report(1, err <= 5e-4 && secs < 1.0, format!("K0 = {k0:.6} (|err| {err:.1e} ≤ 5e-4), {secs:.3}s < 1s"))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut values = Vec::new();
    for (n, expected) in LQ_ONES_P0 {
        let p0 = riccati_p0(Terminal::Ones, n);
        worst = worst.max((p0 - expected).abs());
        values.push(format!("n={n}: {p0:.4}"));
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        worst <= 1e-3 && secs < 10.0,
        format!("{} (max |err| {worst:.1e} ≤ 1e-3), {secs:.2}s < 10s", values.join(", ")),
    )
}

fn multi_seed(alg: Algorithm, cfg: &TrainConfig, oracle: OracleValues) -> (smpcontrol::solvers::RunSummary, Vec<SolveReport>) {
    let reports: Vec<SolveReport> = (1..=10).map(|s| train(alg, "lq", 5, cfg, s)).collect();
    (aggregate_runs(&reports, oracle).unwrap(), reports)
}

fn criterion_3() -> Outcome {
    let oracle_p0 = riccati_p0(Terminal::Identity, 5);
    let cfg = config("lq", 5, 2000, 512);
    let (s, reports) = multi_seed(Algorithm::Alg3, &cfg, OracleValues::default());
    let p0_err = rel(s.p0_mean.mean, oracle_p0);
    let cost_err = rel(s.cost.mean, LQ5_ALG3_COST);
    let slowest = reports.iter().map(|r| r.wall_seconds).fold(0.0, f64::max);
    let decreasing = reports.iter().all(loss_decreased);
    report(
        3,
        p0_err <= 5e-3 && cost_err <= 0.02 && slowest <= 600.0 && decreasing,
        format!(
            "10 seeds: p0 {:.5} (rel {:.3}% ≤ 0.5%), cost {:.4} (rel {:.2}% ≤ 2% of {LQ5_ALG3_COST}), slowest seed {slowest:.1}s, loss decreasing {decreasing}",
            s.p0_mean.mean,
            100.0 * p0_err,
            s.cost.mean,
            100.0 * cost_err
        ),
    )
}

fn criterion_4() -> Outcome {
    let oracle_p0 = riccati_p0(Terminal::Identity, 5);
    let cfg = TrainConfig {
        lambda: 0.01,
        ..config("lq", 5, 2000, 512)
    };
    let (s, reports) = multi_seed(Algorithm::Alg2, &cfg, OracleValues::default());
    let p0_err = rel(s.p0_mean.mean, oracle_p0);
    let cost_err = rel(s.cost.mean, LQ5_ALG2_COST);
    let hu = reports
        .iter()
        .map(|r| r.final_point().mean_abs_hu.unwrap())
        .sum::<f64>()
        / reports.len() as f64;
    let decreasing = reports.iter().all(loss_decreased);
    report(
        4,
        p0_err <= 0.01 && cost_err <= 0.02 && hu <= 1e-2 && decreasing,
        format!(
            "10 seeds, λ=0.01: p0 {:.5} (rel {:.3}% ≤ 1%), cost {:.4} (rel {:.2}% ≤ 2% of {LQ5_ALG2_COST}), mean |H_u| {hu:.2e} ≤ 1e-2, loss decreasing {decreasing}",
            s.p0_mean.mean,
            100.0 * p0_err,
            s.cost.mean,
            100.0 * cost_err
        ),
    )
}

fn criterion_5() -> Outcome {
    let oracle_p0 = riccati_p0(Terminal::Identity, 2);
    let base = config("lq", 2, 1000, 512);
    let alg1_cfg = TrainConfig {
        argmax: ArgmaxMode::Lbfgs,
        ..base.clone()
    };
    let a1 = train(Algorithm::Alg1, "lq", 2, &alg1_cfg, 1);
    let a2 = train(Algorithm::Alg2, "lq", 2, &base, 1);
    let a3 = train(Algorithm::Alg3, "lq", 2, &base, 1);
    let (p1, p3) = (a1.p0_mean(), a3.p0_mean());
    let (e_oracle, e_alg3) = (rel(p1, oracle_p0), rel(p1, p3));
    let ordered = a1.train_seconds > a2.train_seconds && a2.train_seconds > a3.train_seconds;
    let decreasing = [&a1, &a2, &a3].into_iter().all(loss_decreased);
    report(
        5,
        e_oracle <= 0.01 && e_alg3 <= 0.01 && ordered && decreasing,
        format!(
            "alg1 (L-BFGS) p0 {p1:.5}: rel {:.3}% vs oracle, {:.3}% vs alg3 (≤ 1%); train time alg1 {:.1}s > alg2 {:.1}s > alg3 {:.1}s: {ordered}, loss decreasing {decreasing}",
            100.0 * e_oracle,
            100.0 * e_alg3,
            a1.train_seconds,
            a2.train_seconds,
            a3.train_seconds
        ),
    )
}

fn criterion_6() -> Outcome {
    // the cheap proxy: trained cost against ½⟨K₀x₀,x₀⟩
    let n = 10;
    let sol = riccati_rk4(n, 0.1, Terminal::Identity, RICCATI_STEPS).unwrap();
    let reference = sol.optimal_cost(&vec![1.0; n]);
    let r = train(Algorithm::Alg3, "lq", n, &config("lq", n, 2000, 2048), 1);
    let err = (r.final_cost - reference).abs() / r.final_cost;
    let decreasing = loss_decreased(&r);
    report(
        6,
        err <= 0.03 && decreasing,
        format!(
            "proxy at n={n}: cost {:.4} vs ½⟨K0x0,x0⟩ = {reference:.4} (rel {:.2}% ≤ 3%), loss decreasing {decreasing}; n=100 against {LQ_N100_COST} is the ignored extended test",
            r.final_cost,
            100.0 * err
        ),
    )
}

fn criterion_7() -> Outcome {
    let n = 10;
    let hc100 = hopf_cole_mc(100, &[0.0; 100], 1.0, HOPF_COLE_SAMPLES, 1).unwrap();
    let reference = hopf_cole_mc(n, &[0.0; 10], 1.0, HOPF_COLE_SAMPLES, 1).unwrap().value;
    let a3 = train(Algorithm::Alg3, "nonlinear", n, &config("nonlinear", n, 2000, 4096), 1);
    let a2_cfg = TrainConfig {
        learning_rate: 0.01,
        ..config("nonlinear", n, 6000, 4096)
    };
    let a2 = train(Algorithm::Alg2, "nonlinear", n, &a2_cfg, 1);
    let (e2, e3) = (rel(a2.final_cost, reference), rel(a3.final_cost, reference));
    let oracle_ok = (hc100.value - HOPF_COLE_N100).abs() <= 0.02;
    let decreasing = loss_decreased(&a2) && loss_decreased(&a3);
    report(
        7,
        oracle_ok && e2 <= 0.02 && e3 <= 0.02 && decreasing,
        format!(
            "Hopf-Cole n=100 (1e6 samples) {:.4} (|err| {:.4} ≤ 0.02); n=10 oracle {reference:.4}: alg2 {:.4} (rel {:.2}%), alg3 {:.4} (rel {:.2}%), both ≤ 2%; loss decreasing {decreasing}",
            hc100.value,
            (hc100.value - HOPF_COLE_N100).abs(),
            a2.final_cost,
            100.0 * e2,
            a3.final_cost,
            100.0 * e3
        ),
    )
}

fn criterion_8() -> Outcome {
    let n = 10;
    let exact = gexp_exact_quadratic(n, 2.0, 1.0);
    let r = train(Algorithm::Alg3, "gexp", n, &config("gexp", n, 2000, 32_768), 1);
    let err = rel(r.final_cost, exact);
    let decreasing = loss_decreased(&r);
    report(
        8,
        err <= 0.01 && decreasing,
        format!(
            "n={n}: Ê[|x_T|²] {:.3} vs {exact} (rel {:.2}% ≤ 1%), loss decreasing {decreasing}",
            r.final_cost,
            100.0 * err
        ),
    )
}

fn criterion_9() -> Outcome {
    let n = 10;
    let cfg = config("transcendental", n, 2000, 4096);
    let a2 = train(Algorithm::Alg2, "transcendental", n, &cfg, 1);
    let direct = train(Algorithm::Direct, "transcendental", n, &cfg, 1);
    let gap = rel(a2.final_cost, direct.final_cost);
    let first = a2.curve.first().unwrap().terminal_loss;
    let last = a2.final_point().terminal_loss;
    let decreasing = loss_decreased(&a2) && loss_decreased(&direct);
    report(
        9,
        gap <= 0.02 && last <= 0.1 * first && decreasing,
        format!(
            "n={n}: alg2 {:.4} vs direct {:.4} (rel {:.2}% ≤ 2%); alg2 terminal loss {first:.3e} → {last:.3e} (≤ 10%), loss decreasing {decreasing}",
            a2.final_cost,
            direct.final_cost,
            100.0 * gap
        ),
    )
}

fn criterion_10() -> Outcome {
    let t = Instant::now();
    let err = penalty_loss_gradcheck(2, 2, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    report(
        10,
        err <= GRADCHECK_TOL && secs < 30.0,
        format!("full penalized loss (n=2, N=2, no batch norm): max rel err {err:.2e} ≤ 1e-5, {secs:.2}s < 30s"),
    )
}

fn criterion_11() -> Outcome {
    let oracle_p0 = riccati_p0(Terminal::Identity, 2);
    let r = train(Algorithm::Alg4, "lq", 2, &config("lq", 2, 2000, 512), 1);
    let asym = r.max_p_asymmetry.unwrap();
    let err = rel(r.p0_mean(), oracle_p0);
    let decreasing = loss_decreased(&r);
    report(
        11,
        r.final_loss <= 1e-3 && asym <= 1e-10 && err <= 0.01 && decreasing,
        format!(
            "combined loss {:.2e} ≤ 1e-3, max P asymmetry {asym:.1e} ≤ 1e-10, p0 {:.5} (rel {:.3}% ≤ 1%), loss decreasing {decreasing}",
            r.final_loss,
            r.p0_mean(),
            100.0 * err
        ),
    )
}

fn criterion_12() -> Outcome {
    let good = monotonicity_check(&lq_fbsde_coefficients(3), 0.5, 0.5, 10_000, 1).unwrap();
    let mut coeffs = lq_fbsde_coefficients(3);
    coeffs.g = Box::new(|x| x.iter().map(|v| -v).collect());
    let bad = monotonicity_check(&coeffs, 0.5, 0.5, 10_000, 1).unwrap();
    let flagged = bad.first_violation.is_some_and(|i| i < 100);
    report(
        12,
        good.passed && flagged,
        format!(
            "lq passes 1e4 pairs: {}; g(x) = −x flagged at sample {:?} (< 100)",
            good.passed, bad.first_violation
        ),
    )
}

/// Terminal loss of the Euler scheme driven by the Riccati feedback
/// `q = −M x` and the exact maximizer, on `lq` at `n = 1`.
fn euler_terminal_loss(prob: &Problem, dw: &BrownianBatch, grid: &TimeGrid) -> f64 {
    let sol = riccati_rk4(1, prob.horizon(), Terminal::Identity, RICCATI_STEPS).unwrap();
    let mut g = Graph::new();
    let x0 = g.constant(Tensor::row(prob.x0())).unwrap();
    let p0 = g.constant(Tensor::row(&sol.p0(prob.x0()))).unwrap();
    let paths = rollout_first_order(
        prob.as_ref(),
        &mut g,
        grid,
        dw,
        x0,
        p0,
        |g, _, t, x, _| g.scale(x, -sol.at(t).1[(0, 0)]),
        |g, _, t, x, p, q| prob.explicit_argmax(g, t, x, p, q),
        false,
    )
    .unwrap();
    let loss = terminal_loss(prob.as_ref(), &mut g, &paths, LossVariant::First).unwrap();
    g.value(loss).item()
}

fn criterion_13() -> Outcome {
    let prob = builtin("lq", 1);
    let fine = TimeGrid::new(prob.horizon(), 200).unwrap();
    let dw = BrownianBatch::sample(&fine, 20_000, 1, 13, 0);
    let mut points = Vec::new();
    for steps in [25, 50, 100, 200] {
        let grid = TimeGrid::new(prob.horizon(), steps).unwrap();
        let coarse = dw.coarsen(200 / steps).unwrap();
        points.push((grid.dt().ln(), euler_terminal_loss(&prob, &coarse, &grid).ln()));
    }
    let m = points.len() as f64;
    let (mx, my) = (
        points.iter().map(|p| p.0).sum::<f64>() / m,
        points.iter().map(|p| p.1).sum::<f64>() / m,
    );
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let losses: Vec<String> = points.iter().map(|p| format!("{:.2e}", p.1.exp())).collect();
    report(
        13,
        slope >= 0.8,
        format!("terminal loss over N = 25/50/100/200: {}; log-log slope {slope:.3} ≥ 0.8", losses.join(" ")),
    )
}

#[test]
fn desk_scale_criteria() {
    let outcomes = [
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
        criterion_11(),
        criterion_12(),
        criterion_13(),
    ];
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("criterion {}: {}", o.id, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed:\n{}", failed.join("\n"));
}

#[test]
#[ignore = "extended scale: about an hour on one core"]
fn extended_lq_n100() {
    let cfg = TrainConfig {
        iterations: 4000,
        ..config("lq", 100, 4000, 512)
    };
    let r = train(Algorithm::Alg3, "lq", 100, &cfg, 1);
    let err = rel(r.final_cost, LQ_N100_COST);
    let o = report(6, err <= 0.03, format!("n=100: cost {:.3} vs {LQ_N100_COST} (rel {:.2}% ≤ 3%)", r.final_cost, 100.0 * err));
    assert!(o.passed, "{}", o.detail);
}

#[test]
#[ignore = "extended scale"]
fn extended_nonlinear_n100() {
    let reference = hopf_cole_mc(100, &[0.0; 100], 1.0, HOPF_COLE_SAMPLES, 1).unwrap().value;
    let r = train(Algorithm::Alg3, "nonlinear", 100, &config("nonlinear", 100, 5000, 1024), 1);
    let err = rel(r.final_cost, HOPF_COLE_N100);
    let o = report(
        7,
        err <= 0.02,
        format!("n=100: alg3 cost {:.4} vs {HOPF_COLE_N100} (rel {:.2}% ≤ 2%; this run's oracle {reference:.4})", r.final_cost, 100.0 * err),
    );
    assert!(o.passed, "{}", o.detail);
}

#[test]
#[ignore = "extended scale"]
fn extended_gexp_n100() {
    let r = train(Algorithm::Alg3, "gexp", 100, &config("gexp", 100, 5000, 8192), 1);
    let err = rel(r.final_cost, GEXP_N100);
    let o = report(8, err <= 0.005, format!("n=100: {:.3} vs {GEXP_N100} (rel {:.3}% ≤ 0.5%)", r.final_cost, 100.0 * err));
    assert!(o.passed, "{}", o.detail);
}

#[test]
#[ignore = "extended scale"]
fn extended_transcendental_n100() {
    let cfg = config("transcendental", 100, 5000, 1024);
    let a2 = train(Algorithm::Alg2, "transcendental", 100, &cfg, 1);
    let direct = train(Algorithm::Direct, "transcendental", 100, &cfg, 1);
    let gap = rel(a2.final_cost, direct.final_cost);
    let o = report(9, gap <= 0.02, format!("n=100: alg2 {:.4} vs direct {:.4} (rel {:.2}% ≤ 2%)", a2.final_cost, direct.final_cost, 100.0 * gap));
    assert!(o.passed, "{}", o.detail);
}
