//! Seeded sampling and the handful of statistical primitives the simulator
//! and detector share.
//!
//! Every random quantity in the crate is drawn from a [`SimRng`] obtained
//! through a [`SeedStream`]. Child generators are addressed by
//! `(root, label, index)`, so a Monte-Carlo trial produces the same numbers
//! no matter which thread runs it or in what order.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Counter-based generator used everywhere in the crate.
pub type SimRng = ChaCha8Rng;

/// Complex baseband amplitude.
pub type ComplexSample = Complex64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Root of a tree of independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Seed of the child stream `(label, index)`.
    pub fn child_seed(&self, label: &str, index: u64) -> u64 {
        let h = splitmix64(self.root);
        let h = splitmix64(h ^ fnv1a(label.as_bytes()));
        splitmix64(h ^ index.wrapping_mul(GOLDEN))
    }

    /// A nested seed stream, for handing a whole subtree to a sub-task.
    pub fn derive(&self, label: &str, index: u64) -> SeedStream {
        SeedStream::new(self.child_seed(label, index))
    }

    pub fn rng(&self, label: &str, index: u64) -> SimRng {
        SimRng::seed_from_u64(self.child_seed(label, index))
    }
}

/// Circularly-symmetric complex Gaussian with the given mean and total
/// power `variance` (each quadrature gets `variance / 2`).
pub fn sample_cgauss<R: Rng + ?Sized>(
    gen: &mut R,
    mean: ComplexSample,
    variance: f64,
) -> Result<ComplexSample> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!(
            "complex Gaussian variance must be finite and >= 0, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(mean);
    }
    Ok(mean + standard_cgauss(gen) * (variance * 0.5).sqrt())
}

/// CN(0, 2): independent standard normal quadratures, unscaled. Hot loops
/// scale it themselves.
#[inline]
pub(crate) fn standard_cgauss<R: Rng + ?Sized>(gen: &mut R) -> ComplexSample {
    let re: f64 = gen.sample(StandardNormal);
    let im: f64 = gen.sample(StandardNormal);
    ComplexSample::new(re, im)
}

/// Gamma variate with integer shape, drawn as a sum of `shape` exponentials.
pub fn sample_gamma<R: Rng + ?Sized>(gen: &mut R, shape: u32, scale: f64) -> Result<f64> {
    if shape == 0 {
        return Err(Error::invalid("gamma shape must be a positive integer"));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!(
            "gamma scale must be finite and > 0, got {scale}"
        )));
    }
    let sum: f64 = (0..shape).map(|_| gen.sample::<f64, _>(Exp1)).sum();
    Ok(sum * scale)
}

/// Lower order statistic at index `ceil(q n) - 1` of the ascending sort.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty sequence"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_index(sorted.len(), q)])
}

pub(crate) fn quantile_index(n: usize, q: f64) -> usize {
    let k = (q * n as f64).ceil() as i64 - 1;
    k.clamp(0, n as i64 - 1) as usize
}

/// Wilson score interval for a binomial proportion.
pub fn binomial_ci(successes: u64, trials: u64, level: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::invalid("binomial interval needs at least one trial"));
    }
    if successes > trials {
        return Err(Error::invalid(format!(
            "{successes} successes out of {trials} trials"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("unit normal is valid")
        .inverse_cdf(p)
}

/// Regularized lower incomplete gamma `P(shape, x / scale)` for integer
/// shape, via the finite Poisson sum.
pub fn gamma_cdf(shape: u32, scale: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let t = x / scale;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..shape {
        term *= t / k as f64;
        sum += term;
    }
    (1.0 - (-t).exp() * sum).clamp(0.0, 1.0)
}

/// Two-sided Kolmogorov–Smirnov distance between a sample and a continuous
/// CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value `c(alpha) / sqrt(n)`.
pub fn ks_critical(n: usize, significance: f64) -> f64 {
    (-0.5 * (significance / 2.0).ln()).sqrt() / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng() -> SimRng {
        SeedStream::new(7).rng("statkit-test", 0)
    }

    #[test]
    fn child_streams_are_reproducible_and_distinct() {
        let s = SeedStream::new(42);
        assert_eq!(s.child_seed("train", 3), s.child_seed("train", 3));
        assert_ne!(s.child_seed("train", 3), s.child_seed("eval", 3));
        assert_ne!(s.child_seed("train", 3), s.child_seed("train", 4));
        let a: Vec<u64> = (0..4).map(|_| s.rng("x", 1).gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn cgauss_degenerate_and_negative() {
        let mut g = rng();
        let m = ComplexSample::new(1.5, -2.0);
        assert_eq!(sample_cgauss(&mut g, m, 0.0).unwrap(), m);
        assert!(sample_cgauss(&mut g, m, -1.0).is_err());
    }

    #[test]
    fn cgauss_moments() {
        let mut g = rng();
        let n = 1_000_000;
        let (mut p2, mut re, mut im) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = sample_cgauss(&mut g, ComplexSample::new(0.0, 0.0), 2.0).unwrap();
            p2 += x.norm_sqr();
        }
        let p2 = p2 / n as f64;
        assert!((1.99..=2.01).contains(&p2), "E|x|^2 = {p2}");
        for _ in 0..n {
            let x = sample_cgauss(&mut g, ComplexSample::new(0.0, 0.0), 1.0).unwrap();
            re += x.re;
            im += x.im;
        }
        assert!((re / n as f64).abs() < 0.004);
        assert!((im / n as f64).abs() < 0.004);
    }

    #[test]
    fn cgauss_fourth_moment_ratio() {
        let mut g = rng();
        let n = 100_000;
        let (mut m2, mut m4) = (0.0, 0.0);
        for _ in 0..n {
            let p = sample_cgauss(&mut g, ComplexSample::new(0.0, 0.0), 1.0)
                .unwrap()
                .norm_sqr();
            m2 += p;
            m4 += p * p;
        }
        let ratio = (m4 / n as f64) / (m2 / n as f64).powi(2);
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn gamma_sampling() {
        let mut g = rng();
        let n = 1_000_000;
        let mean: f64 = (0..n)
            .map(|_| sample_gamma(&mut g, 1, 1.0).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((0.997..=1.003).contains(&mean), "mean {mean}");

        let xs: Vec<f64> = (0..200_000)
            .map(|_| sample_gamma(&mut g, 5, 2.0).unwrap())
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((m - 10.0).abs() < 0.05, "mean {m}");
        assert!((v - 20.0).abs() < 0.5, "var {v}");

        assert!(sample_gamma(&mut g, 3, 0.0).is_err());
        assert!(sample_gamma(&mut g, 0, 1.0).is_err());
    }

    #[test]
    fn gamma_one_is_exponential() {
        let mut g = rng();
        let xs: Vec<f64> = (0..50_000)
            .map(|_| sample_gamma(&mut g, 1, 3.0).unwrap())
            .collect();
        let d = ks_statistic(&xs, |x| 1.0 - (-x / 3.0).exp());
        assert!(d < ks_critical(xs.len(), 0.01), "D = {d}");
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_quantile(&v, 0.95).unwrap(), 95.0);
        assert_eq!(empirical_quantile(&[7.0], 0.5).unwrap(), 7.0);
        assert_eq!(empirical_quantile(&[3.0, 1.0, 2.0], 1.0).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 1.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert!(empirical_quantile(&[1.0], 1.5).is_err());
    }

    #[test]
    fn wilson_examples() {
        let (lo, _) = binomial_ci(0, 40, 0.95).unwrap();
        assert_eq!(lo, 0.0);

        let (lo, hi) = binomial_ci(50, 100, 0.95).unwrap();
        assert!(lo < 0.5 && hi > 0.5);
        assert!(((0.5 - lo) - (hi - 0.5)).abs() < 1e-12);

        let (lo, hi) = binomial_ci(10, 100, 0.95).unwrap();
        assert!((lo - 0.0552).abs() < 5e-5, "lo {lo}");
        assert!((hi - 0.1744).abs() < 5e-5, "hi {hi}");

        assert!(binomial_ci(11, 10, 0.95).is_err());
    }

    #[test]
    fn gamma_cdf_matches_exponential() {
        for &x in &[0.1, 1.0, 3.7] {
            assert!((gamma_cdf(1, 2.0, x) - (1.0 - (-x / 2.0f64).exp())).abs() < 1e-15);
        }
        assert_eq!(gamma_cdf(5, 1.0, -1.0), 0.0);
    }

    #[test]
    fn ks_critical_value() {
        // 1.628 / sqrt(n) at the 1% level.
        assert!((ks_critical(1, 0.01) - 1.6276).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn quantile_is_monotone_and_order_free(
            mut v in proptest::collection::vec(-1e6f64..1e6, 1..60),
            q1 in 0.0f64..=1.0,
            q2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let a = empirical_quantile(&v, lo).unwrap();
            let b = empirical_quantile(&v, hi).unwrap();
            prop_assert!(a <= b);
            v.reverse();
            prop_assert_eq!(empirical_quantile(&v, hi).unwrap(), b);
        }
    }
}
