//! Closed-form statistics: the Gamma law of the noise-only radiometer
//! statistic, the Gaussian limit of the cascaded surface channel, and the
//! asymptotic signal-to-jamming-plus-noise ratio at Bob.

use crate::channel::{BobSignals, DrisProfile};
use crate::error::{Error, Result};

/// Mean squared reflection amplitude `sum_i p_i a_i^2`.
pub fn alpha_bar(profile: &DrisProfile) -> f64 {
    profile
        .probabilities()
        .iter()
        .zip(profile.amplitudes())
        .map(|(p, a)| p * a * a)
        .sum()
}

/// Variance of the cascaded channel in its complex-Gaussian limit:
/// `N_D * alpha_bar / (L_g * L_I)`.
pub fn prop_variance(n_elements: usize, alpha_bar: f64, l_g: f64, l_i: f64) -> f64 {
    n_elements as f64 * alpha_bar / (l_g * l_i)
}

/// Law of `Y_w` under H0: Gamma with integer shape `N` and scale equal to
/// the noise power.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaNull {
    shape: u32,
    scale: f64,
    log_norm: f64,
}

impl GammaNull {
    pub fn new(shape: u32, scale: f64) -> Result<Self> {
        if shape == 0 {
            return Err(Error::invalid("null shape must be >= 1"));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("null scale must be > 0, got {scale}")));
        }
        Ok(Self {
            shape,
            scale,
            log_norm: shape as f64 * scale.ln() + ln_gamma_int(shape),
        })
    }

    pub fn shape(&self) -> u32 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mean(&self) -> f64 {
        self.shape as f64 * self.scale
    }

    pub fn logpdf(&self, y: f64) -> Result<f64> {
        gamma_h0_logpdf(self, y)
    }
}

/// `log Gamma(n)` for positive integer `n`: exact factorial sum up to 20,
/// `ln_gamma` beyond.
pub fn ln_gamma_int(n: u32) -> f64 {
    if n <= 20 {
        (1..n).map(|k| (k as f64).ln()).sum()
    } else {
        statrs::function::gamma::ln_gamma(n as f64)
    }
}

pub fn gamma_h0_logpdf(null: &GammaNull, y: f64) -> Result<f64> {
    if !(y >= 0.0) {
        return Err(Error::invalid(format!("statistic must be >= 0, got {y}")));
    }
    Ok(gamma_logpdf_unchecked(null, y))
}

#[inline]
pub(crate) fn gamma_logpdf_unchecked(null: &GammaNull, y: f64) -> f64 {
    let k = null.shape as f64 - 1.0;
    let power = if null.shape == 1 {
        0.0
    } else if y == 0.0 {
        f64::NEG_INFINITY
    } else {
        k * y.ln()
    };
    power - y / null.scale - null.log_norm
}

/// Asymptotic SJNR at Bob:
/// `(P0 / L_d) / (P0 N_D alpha_bar / (L_g L_I) + noise)`.
pub fn sjnr_theory(
    tx_power: f64,
    n_elements: usize,
    alpha_bar: f64,
    l_d_b: f64,
    l_g: f64,
    l_i_b: f64,
    noise_bob: f64,
) -> f64 {
    let signal = tx_power / l_d_b;
    let jamming = tx_power * prop_variance(n_elements, alpha_bar, l_g, l_i_b);
    signal / (jamming + noise_bob)
}

/// Ratio of sample means: mean signal power over mean jamming power plus
/// noise.
pub fn sjnr_empirical(signals: &BobSignals) -> Result<f64> {
    let n = signals.signal.len();
    if n == 0 || signals.jamming.len() != n {
        return Err(Error::invalid(format!(
            "need matching non-empty signal/jamming samples, got {n} and {}",
            signals.jamming.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&signals.signal) / (mean(&signals.jamming) + signals.noise_power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        dbm_to_watts, distance, linear_to_db, noise_power_dbm, path_loss_linear, Geometry,
        PathLoss,
    };

    #[test]
    fn alpha_bar_values() {
        let p = DrisProfile::one_bit_default();
        assert!((alpha_bar(&p) - 0.82).abs() < 1e-12);
        let ones = DrisProfile::new(vec![0.0, 1.0], vec![1.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(alpha_bar(&ones), 1.0);
        let dead = DrisProfile::new(vec![0.3], vec![0.0], vec![1.0]).unwrap();
        assert_eq!(alpha_bar(&dead), 0.0);
    }

    #[test]
    fn prop_variance_values() {
        assert_eq!(prop_variance(1, 1.0, 1.0, 1.0), 1.0);
        assert_eq!(
            prop_variance(2048, 0.82, 3.0, 7.0),
            2.0 * prop_variance(1024, 0.82, 3.0, 7.0)
        );
        let geo = Geometry::default();
        let l_g = path_loss_linear(&PathLoss::LOS, distance(geo.alice, geo.dris_center)).unwrap();
        let l_i = path_loss_linear(&PathLoss::LOS, distance(geo.dris_center, geo.willie)).unwrap();
        assert!((distance(geo.dris_center, geo.willie) - 100.136).abs() < 1e-3);
        let v = prop_variance(2048, 0.82, l_g, l_i);
        assert!((v / 2.07e-9 - 1.0).abs() < 0.005, "{v}");
    }

    #[test]
    fn prop_variance_is_sum_of_per_term_variances() {
        // Each term g_r c_r h_r has variance E|g|^2 E|c|^2 E|h|^2 = alpha_bar.
        let ab = alpha_bar(&DrisProfile::one_bit_default());
        let summed: f64 = (0..2048).map(|_| ab).sum::<f64>() / (11.0 * 13.0);
        assert!((prop_variance(2048, ab, 11.0, 13.0) - summed).abs() < 1e-12);
    }

    #[test]
    fn gamma_logpdf_values() {
        let exp1 = GammaNull::new(1, 1.0).unwrap();
        assert!((exp1.logpdf(1.0).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(exp1.logpdf(0.0).unwrap(), 0.0);
        assert!(exp1.logpdf(-0.1).is_err());

        let g5 = GammaNull::new(5, 1.0).unwrap();
        assert_eq!(g5.logpdf(0.0).unwrap(), f64::NEG_INFINITY);
        let h = 1e-5;
        let d = (g5.logpdf(4.0 + h).unwrap() - g5.logpdf(4.0 - h).unwrap()) / (2.0 * h);
        assert!(d.abs() < 1e-8, "slope at mode {d}");
        assert!(g5.logpdf(4.0).unwrap() > g5.logpdf(3.9).unwrap());
        assert!(g5.logpdf(4.0).unwrap() > g5.logpdf(4.1).unwrap());

        assert!(GammaNull::new(0, 1.0).is_err());
        assert!(GammaNull::new(3, 0.0).is_err());
    }

    #[test]
    fn ln_gamma_switchover_is_continuous() {
        let exact21: f64 = (1..21).map(|k| (k as f64).ln()).sum();
        assert!((ln_gamma_int(21) - exact21).abs() < 1e-9);
        assert_eq!(ln_gamma_int(1), 0.0);
        assert!((ln_gamma_int(5) - 24f64.ln()).abs() < 1e-14);
    }

    /// Adaptive Simpson quadrature, used only as an independent check.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn gamma_null_integrates_to_one() {
        for n in 1..=10u32 {
            for &scale in &[1.0, 1.8e-15] {
                let null = GammaNull::new(n, scale).unwrap();
                let f = |y: f64| null.logpdf(y).unwrap().exp();
                // Unit-scale panels so the first probes never all miss the bulk.
                let total: f64 = (0..50 * n)
                    .map(|k| adaptive_simpson(&f, k as f64 * scale, (k + 1) as f64 * scale, 1e-12))
                    .sum();
                assert!((total - 1.0).abs() < 1e-6, "N={n} scale={scale}: {total}");
            }
        }
    }

    #[test]
    fn sjnr_limits() {
        assert_eq!(sjnr_theory(2.0, 0, 0.82, 10.0, 3.0, 5.0, 0.5), 2.0 / (10.0 * 0.5));
        let limit = 3.0 * 5.0 / (10.0 * 64.0 * 0.82);
        let big = sjnr_theory(1e12, 64, 0.82, 10.0, 3.0, 5.0, 0.5);
        assert!((big / limit - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sjnr_reference_operating_point() {
        let geo = Geometry::default();
        let bob = geo.bob.center;
        let l_d = path_loss_linear(&PathLoss::NLOS, distance(geo.alice, bob)).unwrap();
        let l_g = path_loss_linear(&PathLoss::LOS, distance(geo.alice, geo.dris_center)).unwrap();
        let l_i = path_loss_linear(&PathLoss::LOS, distance(geo.dris_center, bob)).unwrap();
        let noise = dbm_to_watts(noise_power_dbm(180e3));
        let p0 = dbm_to_watts(5.0);
        let with = linear_to_db(sjnr_theory(p0, 2048, 0.82, l_d, l_g, l_i, noise));
        let without = linear_to_db(sjnr_theory(p0, 0, 0.82, l_d, l_g, l_i, noise));
        assert!((with + 21.3).abs() < 0.1, "{with}");
        assert!((without - 11.1).abs() < 0.1, "{without}");
    }

    #[test]
    fn sjnr_monotonicity() {
        let f = |p: f64, n: usize, ab: f64| sjnr_theory(p, n, ab, 1e11, 1e4, 1e8, 1.8e-15);
        let mut prev = f64::INFINITY;
        for n in [0, 16, 256, 1024, 2048, 8192] {
            let v = f(3e-3, n, 0.82);
            assert!(v < prev);
            prev = v;
        }
        let mut prev = f64::INFINITY;
        for ab in [0.1, 0.3, 0.82, 1.0] {
            let v = f(3e-3, 2048, ab);
            assert!(v < prev);
            prev = v;
        }
        let mut prev = 0.0;
        for p in [1e-6, 1e-4, 1e-2, 1.0, 100.0] {
            let v = f(p, 2048, 0.82);
            assert!(v > prev);
            prev = v;
        }
        assert!(prev < 1e4 * 1e8 / (1e11 * 2048.0 * 0.82));
    }

    #[test]
    fn sjnr_empirical_cases() {
        let s = BobSignals {
            signal: vec![2.0; 4],
            jamming: vec![0.0; 4],
            noise_power: 0.5,
        };
        assert_eq!(sjnr_empirical(&s).unwrap(), 4.0);
        let s = BobSignals {
            signal: vec![3.0; 3],
            jamming: vec![1.0; 3],
            noise_power: 0.5,
        };
        assert_eq!(sjnr_empirical(&s).unwrap(), 2.0);
        let empty = BobSignals {
            signal: vec![],
            jamming: vec![],
            noise_power: 1.0,
        };
        assert!(sjnr_empirical(&empty).is_err());
    }
}
