use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// `J = −ln E[exp(−h(x₀ + √2·W_T))]` by plain Monte Carlo; the standard error
/// comes from the delta method. Sample `j` uses ChaCha stream `j` under `seed`.
pub fn hopf_cole_mc_with<H>(
    h: H,
    x0: &[f64],
    horizon: f64,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate>
where
    H: Fn(&[f64]) -> f64,
{
    if samples < 2 {
        return Err(Error::invalid("hopf-cole needs at least two samples"));
    }
    let scale = (2.0 * horizon).sqrt();
    let mut x = vec![0.0; x0.len()];
    // Welford accumulation of exp(−h)
    let (mut mean, mut m2) = (0.0_f64, 0.0_f64);
    for j in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        for (xi, &x0i) in x.iter_mut().zip(x0) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *xi = x0i + scale * z;
        }
        let y = (-h(&x)).exp();
        let delta = y - mean;
        mean += delta / (j + 1) as f64;
        m2 += delta * (y - mean);
    }
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::NonFinite("hopf-cole expectation".into()));
    }
    let var = m2 / (samples - 1) as f64;
    Ok(MonteCarloEstimate {
        value: -mean.ln(),
        std_error: (var / samples as f64).sqrt() / mean,
        samples,
    })
}

/// Optimal cost of the `nonlinear` builtin, `h(x) = ln(½(1 + |x|²))`.
pub fn hopf_cole_mc(
    n: usize,
    x0: &[f64],
    horizon: f64,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if x0.len() != n {
        return Err(Error::invalid("x0 length does not match n"));
    }
    hopf_cole_mc_with(
        |x| (0.5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>())).ln(),
        x0,
        horizon,
        samples,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_terminal_is_lognormal() {
        let est = hopf_cole_mc_with(|x| x[0], &[0.0], 1.0, 200_000, 3).unwrap();
        assert!((est.value + 1.0).abs() < 4.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn seed_invariance() {
        let a = hopf_cole_mc(3, &[0.0; 3], 1.0, 20_000, 1).unwrap();
        let b = hopf_cole_mc(3, &[0.0; 3], 1.0, 20_000, 2).unwrap();
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.value - b.value).abs() <= 3.0 * se);
    }
}
