//! CSV schemas. Floats carry six significant digits; empty fields mean "not
//! applicable" (no `p̃₀` for the direct baseline, no oracle, timing off).

use std::io::Write;

use crate::error::Result;
use crate::solvers::{RunSummary, SolveReport};

pub const CURVE_HEADER: [&str; 8] = ["seed", "iteration", "loss", "cost", "p0_mean", "p0_min", "p0_max", "wall_ms"];
pub const SUMMARY_HEADER: [&str; 8] = ["alg", "problem", "n", "p0_mean", "p0_rel_err", "cost_mean", "cost_std", "time_s"];

/// `%g`-style rendering with six significant digits: fixed notation for
/// decimal exponents in `[-4, 6)`, scientific otherwise, trailing zeros
/// dropped. Non-finite values render as an empty field.
pub fn fmt_g(v: f64) -> String {
    if !v.is_finite() {
        return String::new();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_g).unwrap_or_default()
}

/// One row per evaluation point of every report.
pub fn write_curves<W: Write>(w: W, reports: &[SolveReport], timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVE_HEADER)?;
    for r in reports {
        for e in &r.curve {
            out.write_record([
                r.seed.to_string(),
                e.iteration.to_string(),
                fmt_g(e.loss),
                fmt_g(e.cost),
                fmt_g(e.p0_mean),
                fmt_g(e.p0_min),
                fmt_g(e.p0_max),
                if timing { e.wall_ms.to_string() } else { String::new() },
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_summaries<W: Write>(w: W, rows: &[RunSummary], timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for s in rows {
        out.write_record([
            s.algorithm.to_string(),
            s.problem.clone(),
            s.n.to_string(),
            fmt_g(s.p0_mean.mean),
            fmt_opt(s.p0_rel_err),
            fmt_g(s.cost.mean),
            fmt_g(s.cost.std),
            if timing { fmt_g(s.time.mean) } else { String::new() },
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        let cases = [
            (2.388, "2.388"),
            (-0.958634, "-0.958634"),
            (-0.95863449, "-0.958634"),
            (48.05612, "48.0561"),
            (400.268, "400.268"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (999999.6, "1e+06"),
            (0.0001234567, "0.000123457"),
            (0.00001234567, "1.23457e-05"),
            (3.0e-8, "3e-08"),
            (1.0, "1"),
            (0.0, "0"),
            (-2.5, "-2.5"),
        ];
        for (v, s) in cases {
            assert_eq!(fmt_g(v), s, "{v}");
        }
        assert_eq!(fmt_g(f64::NAN), "");
    }
}
