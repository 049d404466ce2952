//! Channel and received-signal generation.
//!
//! Alice transmits through a direct Rayleigh link and through a cascaded
//! link reflected by a surface whose element coefficients are redrawn at
//! random for every symbol. Large-scale attenuation follows the log-distance
//! formulas in [`PathLoss`]; Alice→surface small-scale fading is Rician with
//! a near-field LOS steering vector, every other link is Rayleigh.
//!
//! Small-scale channels are block-fading: one draw per coherence interval.
//! Surface coefficients are not; they change with every symbol.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;

use crate::detector::{Hypothesis, ObservationBatch};
use crate::error::{Error, Result};
use crate::statkit::{sample_cgauss, standard_cgauss, ComplexSample, SeedStream};

pub type Point3 = [f64; 3];

/// Free-space wavelength at 3.5 GHz, rounded.
pub const DEFAULT_WAVELENGTH: f64 = 0.0857;

pub fn distance(a: Point3, b: Point3) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dbm_to_watts(p_dbm: f64) -> f64 {
    10f64.powf((p_dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(p: f64) -> f64 {
    10.0 * p.log10() + 30.0
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Thermal noise power in dBm for a `-170 dBm/Hz` floor.
pub fn noise_power_dbm(bandwidth_hz: f64) -> f64 {
    -170.0 + 10.0 * bandwidth_hz.log10()
}

/// Region Bob is dropped in, uniform by area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annulus {
    pub center: Point3,
    pub inner: f64,
    pub outer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub alice: Point3,
    pub willie: Point3,
    pub dris_center: Point3,
    pub bob: Annulus,
    pub elements_h: usize,
    pub elements_v: usize,
    pub element_spacing: f64,
    pub wavelength: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            alice: [0.0, 0.0, 5.0],
            willie: [0.0, 100.0, 0.0],
            dris_center: [-1.5, 0.0, 5.0],
            bob: Annulus {
                center: [0.0, 140.0, 0.0],
                inner: 10.0,
                outer: 20.0,
            },
            elements_h: 64,
            elements_v: 32,
            element_spacing: DEFAULT_WAVELENGTH / 2.0,
            wavelength: DEFAULT_WAVELENGTH,
        }
    }
}

impl Geometry {
    pub fn n_elements(&self) -> usize {
        self.elements_h * self.elements_v
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_elements() == 0 {
            return Err(Error::invalid("surface grid must have at least one element"));
        }
        if !(self.bob.inner >= 0.0 && self.bob.inner <= self.bob.outer) {
            return Err(Error::invalid(format!(
                "annulus radii must satisfy 0 <= inner <= outer, got {} and {}",
                self.bob.inner, self.bob.outer
            )));
        }
        if !(self.wavelength > 0.0) || !(self.element_spacing > 0.0) {
            return Err(Error::invalid("wavelength and element spacing must be > 0"));
        }
        for (name, d) in [
            ("alice-surface", distance(self.alice, self.dris_center)),
            ("alice-willie", distance(self.alice, self.willie)),
            ("surface-willie", distance(self.dris_center, self.willie)),
        ] {
            if !(d > 0.0) {
                return Err(Error::invalid(format!("{name} distance must be > 0")));
            }
        }
        Ok(())
    }

    /// Element positions on a planar grid in the y-z plane, centered on the
    /// surface center, horizontal index fastest.
    pub fn element_positions(&self) -> Vec<Point3> {
        let h0 = (self.elements_h as f64 - 1.0) / 2.0;
        let v0 = (self.elements_v as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(self.n_elements());
        for v in 0..self.elements_v {
            for h in 0..self.elements_h {
                out.push([
                    self.dris_center[0],
                    self.dris_center[1] + (h as f64 - h0) * self.element_spacing,
                    self.dris_center[2] + (v as f64 - v0) * self.element_spacing,
                ]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinkKind {
    Los,
    Nlos,
}

/// Log-distance path loss `intercept + slope * log10(d)` in dB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathLoss {
    pub kind: LinkKind,
    pub intercept_db: f64,
    pub slope_db: f64,
}

impl PathLoss {
    pub const LOS: PathLoss = PathLoss {
        kind: LinkKind::Los,
        intercept_db: 35.6,
        slope_db: 22.0,
    };
    pub const NLOS: PathLoss = PathLoss {
        kind: LinkKind::Nlos,
        intercept_db: 32.6,
        slope_db: 36.7,
    };

    pub fn db(&self, d: f64) -> f64 {
        self.intercept_db + self.slope_db * d.log10()
    }
}

pub fn path_loss_linear(model: &PathLoss, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::invalid(format!("path-loss distance must be > 0, got {d}")));
    }
    Ok(10f64.powf(model.db(d) / 10.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkFading {
    pub alice_dris: PathLoss,
    pub dris_willie: PathLoss,
    pub dris_bob: PathLoss,
    pub alice_willie: PathLoss,
    pub alice_bob: PathLoss,
    /// Linear Rician factor of the Alice→surface link.
    pub kappa_g: f64,
}

impl Default for LinkFading {
    fn default() -> Self {
        Self {
            alice_dris: PathLoss::LOS,
            dris_willie: PathLoss::LOS,
            dris_bob: PathLoss::LOS,
            alice_willie: PathLoss::NLOS,
            alice_bob: PathLoss::NLOS,
            kappa_g: 4.0,
        }
    }
}

/// Discrete reflection states of one surface element: phase, the amplitude
/// the hardware couples to it, and the probability of selecting it.
#[derive(Clone, Debug, PartialEq)]
pub struct DrisProfile {
    phases: Vec<f64>,
    amplitudes: Vec<f64>,
    probabilities: Vec<f64>,
}

impl DrisProfile {
    pub fn new(phases: Vec<f64>, amplitudes: Vec<f64>, probabilities: Vec<f64>) -> Result<Self> {
        let n = phases.len();
        if n == 0 || amplitudes.len() != n || probabilities.len() != n {
            return Err(Error::invalid(format!(
                "profile needs equal non-empty phase/amplitude/probability lists, got {}/{}/{}",
                n,
                amplitudes.len(),
                probabilities.len()
            )));
        }
        if !n.is_power_of_two() || n > 256 {
            return Err(Error::invalid(format!(
                "profile size {n} is not 2^b with b <= 8"
            )));
        }
        if let Some(a) = amplitudes.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid(format!("amplitude {a} outside [0, 1]")));
        }
        if probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("probabilities must be >= 0"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("phases must be finite"));
        }
        Ok(Self {
            phases,
            amplitudes,
            probabilities,
        })
    }

    /// 1-bit profile: phases {pi/9, 7pi/6} with amplitudes {0.8, 1.0},
    /// equiprobable.
    pub fn one_bit_default() -> Self {
        Self::new(
            vec![PI / 9.0, 7.0 * PI / 6.0],
            vec![0.8, 1.0],
            vec![0.5, 0.5],
        )
        .expect("built-in profile is valid")
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn bits(&self) -> u32 {
        self.phases.len().trailing_zeros()
    }

    /// Reflection coefficient of state `k`.
    pub fn coefficient(&self, k: usize) -> ComplexSample {
        Complex64::from_polar(self.amplitudes[k], self.phases[k])
    }
}

/// Draws element states from a profile. Equiprobable 2^b profiles consume b
/// random bits per element; anything else inverts the cumulative table.
#[derive(Clone, Debug)]
pub(crate) struct StateSampler {
    cumulative: Vec<f64>,
    bits: Option<u32>,
}

impl StateSampler {
    pub(crate) fn new(profile: &DrisProfile) -> Self {
        let n = profile.probabilities.len();
        let uniform = profile
            .probabilities
            .iter()
            .all(|&p| (p - 1.0 / n as f64).abs() < 1e-15);
        let mut acc = 0.0;
        let cumulative = profile
            .probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self {
            cumulative,
            bits: uniform.then(|| profile.bits()),
        }
    }

    pub(crate) fn fill<R: Rng + ?Sized>(&self, gen: &mut R, n: usize, out: &mut Vec<u8>) {
        out.clear();
        match self.bits {
            Some(0) => out.resize(n, 0),
            Some(b) => {
                let per_word = (64 / b) as usize;
                let mask = (1u64 << b) - 1;
                while out.len() < n {
                    let mut word: u64 = gen.gen();
                    for _ in 0..per_word.min(n - out.len()) {
                        out.push((word & mask) as u8);
                        word >>= b;
                    }
                }
            }
            None => {
                let last = self.cumulative.len() - 1;
                for _ in 0..n {
                    let u: f64 = gen.gen();
                    let k = self.cumulative.partition_point(|&c| c <= u).min(last);
                    out.push(k as u8);
                }
            }
        }
    }
}

/// Uniform-by-area drop inside the annulus, at the annulus center height.
pub fn sample_bob_position<R: Rng + ?Sized>(gen: &mut R, annulus: &Annulus) -> Point3 {
    let (r1, r2) = (annulus.inner, annulus.outer);
    let u: f64 = gen.gen();
    let radius = (u * (r2 * r2 - r1 * r1) + r1 * r1).sqrt();
    let theta = 2.0 * PI * gen.gen::<f64>();
    [
        annulus.center[0] + radius * theta.cos(),
        annulus.center[1] + radius * theta.sin(),
        annulus.center[2],
    ]
}

/// Near-field LOS steering from Alice to every surface element, referenced
/// to the surface center: `exp(-j 2pi/lambda (d_r - d_0))`.
pub fn los_steering(geometry: &Geometry) -> Vec<ComplexSample> {
    let d0 = distance(geometry.alice, geometry.dris_center);
    let k = 2.0 * PI / geometry.wavelength;
    geometry
        .element_positions()
        .into_iter()
        .map(|p| Complex64::from_polar(1.0, -k * (distance(geometry.alice, p) - d0)))
        .collect()
}

/// Alice→surface small-scale vector: Rician mix of the LOS steering vector
/// and unit-power Rayleigh scatter.
pub fn sample_rician_g<R: Rng + ?Sized>(
    gen: &mut R,
    geometry: &Geometry,
    kappa_g: f64,
) -> Result<Vec<ComplexSample>> {
    let los = los_steering(geometry);
    rician_from_steering(gen, &los, kappa_g)
}

pub(crate) fn rician_from_steering<R: Rng + ?Sized>(
    gen: &mut R,
    los: &[ComplexSample],
    kappa_g: f64,
) -> Result<Vec<ComplexSample>> {
    let (w_los, w_nlos) = rician_weights(kappa_g)?;
    Ok(los
        .iter()
        .map(|&l| l * w_los + standard_cgauss(gen) * w_nlos)
        .collect())
}

/// Returns (LOS amplitude, per-quadrature NLOS std) so that
/// `l * a + N(0,1) (1 + j) * b` has unit second moment.
fn rician_weights(kappa_g: f64) -> Result<(f64, f64)> {
    if !(kappa_g >= 0.0) {
        return Err(Error::invalid(format!("Rician factor must be >= 0, got {kappa_g}")));
    }
    if kappa_g.is_infinite() {
        return Ok((1.0, 0.0));
    }
    Ok((
        (kappa_g / (1.0 + kappa_g)).sqrt(),
        (0.5 / (1.0 + kappa_g)).sqrt(),
    ))
}

/// One independent coefficient per element, drawn from the profile.
pub fn sample_dris_coeffs<R: Rng + ?Sized>(
    gen: &mut R,
    profile: &DrisProfile,
    n: usize,
) -> Vec<ComplexSample> {
    let sampler = StateSampler::new(profile);
    let mut idx = Vec::with_capacity(n);
    sampler.fill(gen, n, &mut idx);
    idx.into_iter()
        .map(|k| profile.coefficient(k as usize))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Willie,
    Bob,
}

/// Linear large-scale attenuations of every link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LargeScale {
    pub l_g: f64,
    pub l_i_w: f64,
    pub l_i_b: f64,
    pub l_d_w: f64,
    pub l_d_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    /// Direct links including large-scale attenuation.
    pub h_d_w: ComplexSample,
    pub h_d_b: ComplexSample,
    /// Small-scale only; large-scale factors are kept in `large`.
    pub g_hat: Vec<ComplexSample>,
    pub h_i_w: Vec<ComplexSample>,
    pub h_i_b: Vec<ComplexSample>,
    pub large: LargeScale,
}

/// Cascaded surface channel `sum_r g_r c_r h_r / sqrt(L_g L_I)`.
pub fn cascaded_h(
    realization: &ChannelRealization,
    coeffs: &[ComplexSample],
    target: Target,
) -> Result<ComplexSample> {
    let (h, l_i) = match target {
        Target::Willie => (&realization.h_i_w, realization.large.l_i_w),
        Target::Bob => (&realization.h_i_b, realization.large.l_i_b),
    };
    let n = realization.g_hat.len();
    if h.len() != n || coeffs.len() != n {
        return Err(Error::invalid(format!(
            "length mismatch: g {n}, h {}, coefficients {}",
            h.len(),
            coeffs.len()
        )));
    }
    let sum: Complex64 = realization
        .g_hat
        .iter()
        .zip(coeffs)
        .zip(h)
        .map(|((g, c), h)| g * c * h)
        .sum();
    Ok(sum / (realization.large.l_g * l_i).sqrt())
}

/// Complete physical scenario at one transmit power. Construction caches
/// the LOS steering vector and the state sampler.
#[derive(Clone, Debug)]
pub struct Scenario {
    geometry: Geometry,
    dris: Option<DrisProfile>,
    links: LinkFading,
    tx_power: f64,
    noise_willie: f64,
    noise_bob: f64,
    steering: Vec<ComplexSample>,
    sampler: Option<StateSampler>,
}

impl Scenario {
    pub fn new(
        geometry: Geometry,
        dris: Option<DrisProfile>,
        links: LinkFading,
        tx_power: f64,
        noise_willie: f64,
        noise_bob: f64,
    ) -> Result<Self> {
        geometry.validate()?;
        rician_weights(links.kappa_g)?;
        if !(tx_power >= 0.0) || !tx_power.is_finite() {
            return Err(Error::invalid(format!("transmit power must be >= 0, got {tx_power}")));
        }
        if !(noise_willie > 0.0 && noise_bob > 0.0) {
            return Err(Error::invalid("noise powers must be > 0"));
        }
        let steering = if dris.is_some() {
            los_steering(&geometry)
        } else {
            Vec::new()
        };
        let sampler = dris.as_ref().map(StateSampler::new);
        Ok(Self {
            geometry,
            dris,
            links,
            tx_power,
            noise_willie,
            noise_bob,
            steering,
            sampler,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dris(&self) -> Option<&DrisProfile> {
        self.dris.as_ref()
    }

    pub fn links(&self) -> &LinkFading {
        &self.links
    }

    pub fn tx_power(&self) -> f64 {
        self.tx_power
    }

    pub fn noise_willie(&self) -> f64 {
        self.noise_willie
    }

    pub fn noise_bob(&self) -> f64 {
        self.noise_bob
    }

    /// Number of surface elements in use; zero without a surface.
    pub fn n_elements(&self) -> usize {
        if self.dris.is_some() {
            self.geometry.n_elements()
        } else {
            0
        }
    }

    pub fn with_tx_power(&self, tx_power: f64) -> Result<Self> {
        Self::new(
            self.geometry.clone(),
            self.dris.clone(),
            self.links,
            tx_power,
            self.noise_willie,
            self.noise_bob,
        )
    }

    pub fn without_dris(&self) -> Self {
        Self {
            dris: None,
            steering: Vec::new(),
            sampler: None,
            ..self.clone()
        }
    }

    pub fn with_grid(&self, elements_h: usize, elements_v: usize) -> Result<Self> {
        let geometry = Geometry {
            elements_h,
            elements_v,
            ..self.geometry.clone()
        };
        Self::new(
            geometry,
            self.dris.clone(),
            self.links,
            self.tx_power,
            self.noise_willie,
            self.noise_bob,
        )
    }

    pub fn large_scale(&self, bob: Point3) -> Result<LargeScale> {
        let g = &self.geometry;
        let l = &self.links;
        Ok(LargeScale {
            l_g: path_loss_linear(&l.alice_dris, distance(g.alice, g.dris_center))?,
            l_i_w: path_loss_linear(&l.dris_willie, distance(g.dris_center, g.willie))?,
            l_i_b: path_loss_linear(&l.dris_bob, distance(g.dris_center, bob))?,
            l_d_w: path_loss_linear(&l.alice_willie, distance(g.alice, g.willie))?,
            l_d_b: path_loss_linear(&l.alice_bob, distance(g.alice, bob))?,
        })
    }

    /// Fresh small-scale realization for one coherence interval.
    pub fn sample_realization<R: Rng + ?Sized>(
        &self,
        gen: &mut R,
        bob: Point3,
    ) -> Result<ChannelRealization> {
        let large = self.large_scale(bob)?;
        let zero = ComplexSample::new(0.0, 0.0);
        let h_d_w = sample_cgauss(gen, zero, 1.0)? / large.l_d_w.sqrt();
        let h_d_b = sample_cgauss(gen, zero, 1.0)? / large.l_d_b.sqrt();
        let n = self.n_elements();
        let g_hat = rician_from_steering(gen, &self.steering, self.links.kappa_g)?;
        let h_i_w = (0..n).map(|_| unit_cgauss(gen)).collect();
        let h_i_b = (0..n).map(|_| unit_cgauss(gen)).collect();
        Ok(ChannelRealization {
            h_d_w,
            h_d_b,
            g_hat,
            h_i_w,
            h_i_b,
            large,
        })
    }

    /// Per-element products `g_r h_r / sqrt(L_g L_I)` toward one receiver.
    fn element_gains<R: Rng + ?Sized>(
        &self,
        gen: &mut R,
        l_g: f64,
        l_i: f64,
        out: &mut Vec<ComplexSample>,
    ) {
        out.clear();
        let Ok((w_los, w_nlos)) = rician_weights(self.links.kappa_g) else {
            unreachable!("kappa validated at construction")
        };
        let scale = (0.5 / (l_g * l_i)).sqrt();
        out.extend(self.steering.iter().map(|&l| {
            let g = l * w_los + standard_cgauss(gen) * w_nlos;
            g * standard_cgauss(gen) * scale
        }));
    }
}

#[inline]
fn unit_cgauss<R: Rng + ?Sized>(gen: &mut R) -> ComplexSample {
    standard_cgauss(gen) * std::f64::consts::FRAC_1_SQRT_2
}

/// Sum of element gains weighted by freshly drawn surface states.
struct CascadeDraw<'a> {
    profile: &'a DrisProfile,
    sampler: &'a StateSampler,
    coeffs: Vec<ComplexSample>,
    states: Vec<u8>,
    groups: Vec<ComplexSample>,
}

impl<'a> CascadeDraw<'a> {
    fn new(profile: &'a DrisProfile, sampler: &'a StateSampler) -> Self {
        let n = profile.phases().len();
        Self {
            profile,
            sampler,
            coeffs: (0..n).map(|k| profile.coefficient(k)).collect(),
            states: Vec::new(),
            groups: vec![ComplexSample::new(0.0, 0.0); n],
        }
    }

    fn draw<R: Rng + ?Sized>(&mut self, gen: &mut R, gains: &[ComplexSample]) -> ComplexSample {
        self.sampler.fill(gen, gains.len(), &mut self.states);
        self.groups.fill(ComplexSample::new(0.0, 0.0));
        for (&k, &g) in self.states.iter().zip(gains) {
            self.groups[k as usize] += g;
        }
        debug_assert_eq!(self.coeffs.len(), self.profile.phases().len());
        self.groups
            .iter()
            .zip(&self.coeffs)
            .map(|(s, c)| s * c)
            .sum()
    }
}

fn map_intervals<T: Send>(n: usize, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n as u64).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n as u64).map(f).collect()
    }
}

/// Willie's radiometer statistics `Y_w = sum_{n<=N} |y_w(n)|^2`, one per
/// coherence interval. Interval `i` draws from the child stream
/// `("willie", i)` of `seeds`, so output does not depend on scheduling.
pub fn gen_willie_statistics(
    seeds: &SeedStream,
    scenario: &Scenario,
    hypothesis: Hypothesis,
    n_intervals: usize,
    samples_per_statistic: u32,
) -> Result<ObservationBatch> {
    if samples_per_statistic == 0 {
        return Err(Error::invalid("samples per statistic must be >= 1"));
    }
    let n = samples_per_statistic as usize;
    let noise_std = (scenario.noise_willie * 0.5).sqrt();
    let tx_std = (scenario.tx_power * 0.5).sqrt();
    let large = scenario.large_scale(scenario.geometry.bob.center)?;

    let stats = map_intervals(n_intervals, |i| {
        let mut gen = seeds.rng("willie", i);
        match hypothesis {
            Hypothesis::H0 => (0..n)
                .map(|_| (standard_cgauss(&mut gen) * noise_std).norm_sqr())
                .sum::<f64>(),
            Hypothesis::H1 => {
                let h_d = unit_cgauss(&mut gen) / large.l_d_w.sqrt();
                let mut gains = Vec::new();
                let mut cascade = match (&scenario.dris, &scenario.sampler) {
                    (Some(p), Some(s)) => {
                        scenario.element_gains(&mut gen, large.l_g, large.l_i_w, &mut gains);
                        Some(CascadeDraw::new(p, s))
                    }
                    _ => None,
                };
                let mut acc = 0.0;
                for _ in 0..n {
                    let h_dris = cascade
                        .as_mut()
                        .map_or(ComplexSample::new(0.0, 0.0), |c| c.draw(&mut gen, &gains));
                    let s = standard_cgauss(&mut gen) * tx_std;
                    let w = standard_cgauss(&mut gen) * noise_std;
                    acc += ((h_d + h_dris) * s + w).norm_sqr();
                }
                acc
            }
        }
    });

    Ok(ObservationBatch::new(
        stats,
        vec![hypothesis; n_intervals],
        scenario_fingerprint(scenario),
        seeds.root(),
    ))
}

/// Per-symbol received powers at Bob, split into the direct (useful) term
/// and the surface-induced jamming term.
#[derive(Clone, Debug, PartialEq)]
pub struct BobSignals {
    pub signal: Vec<f64>,
    pub jamming: Vec<f64>,
    pub noise_power: f64,
}

/// Bob's per-symbol powers over `n_symbols`, grouped into coherence
/// intervals of `symbols_per_interval` with a fresh channel each.
pub fn gen_bob_signals(
    seeds: &SeedStream,
    scenario: &Scenario,
    bob: Point3,
    n_symbols: usize,
    symbols_per_interval: usize,
) -> Result<BobSignals> {
    if symbols_per_interval == 0 {
        return Err(Error::invalid("symbols per interval must be >= 1"));
    }
    let large = scenario.large_scale(bob)?;
    let tx_std = (scenario.tx_power * 0.5).sqrt();
    let n_intervals = n_symbols.div_ceil(symbols_per_interval);

    let chunks = map_intervals(n_intervals, |i| {
        let mut gen = seeds.rng("bob", i);
        let m = symbols_per_interval.min(n_symbols - i as usize * symbols_per_interval);
        let h_d = unit_cgauss(&mut gen) / large.l_d_b.sqrt();
        let mut gains = Vec::new();
        let mut cascade = match (&scenario.dris, &scenario.sampler) {
            (Some(p), Some(s)) => {
                scenario.element_gains(&mut gen, large.l_g, large.l_i_b, &mut gains);
                Some(CascadeDraw::new(p, s))
            }
            _ => None,
        };
        (0..m)
            .map(|_| {
                let s = standard_cgauss(&mut gen) * tx_std;
                let jam = cascade
                    .as_mut()
                    .map_or(0.0, |c| (c.draw(&mut gen, &gains) * s).norm_sqr());
                ((h_d * s).norm_sqr(), jam)
            })
            .collect::<Vec<_>>()
    });

    let (signal, jamming) = chunks.into_iter().flatten().unzip();
    Ok(BobSignals {
        signal,
        jamming,
        noise_power: scenario.noise_bob,
    })
}

/// Stable hash of everything that shapes the generated statistics.
pub fn scenario_fingerprint(scenario: &Scenario) -> u64 {
    let desc = format!(
        "{:?}|{:?}|{:?}|{:e}|{:e}|{:e}",
        scenario.geometry,
        scenario.dris,
        scenario.links,
        scenario.tx_power,
        scenario.noise_willie,
        scenario.noise_bob
    );
    desc.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statkit::{gamma_cdf, ks_critical, ks_statistic};
    use crate::theory;

    fn reference_scenario(p0_dbm: f64) -> Scenario {
        let noise = dbm_to_watts(noise_power_dbm(180e3));
        Scenario::new(
            Geometry::default(),
            Some(DrisProfile::one_bit_default()),
            LinkFading::default(),
            dbm_to_watts(p0_dbm),
            noise,
            noise,
        )
        .unwrap()
    }

    #[test]
    fn dbm_conversion() {
        assert!((dbm_to_watts(0.0) - 1e-3).abs() < 1e-18);
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-15);
        let n = noise_power_dbm(180_000.0);
        assert!((n + 117.4473).abs() < 1e-3, "{n}");
        let w = dbm_to_watts(n);
        assert!((w / 1.8e-15 - 1.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn path_loss_values() {
        let los = path_loss_linear(&PathLoss::LOS, 1.0).unwrap();
        assert!((los / 10f64.powf(3.56) - 1.0).abs() < 1e-12);
        assert!((los - 3630.78).abs() < 0.01);
        let los100 = path_loss_linear(&PathLoss::LOS, 100.0).unwrap();
        assert!((los100 / 10f64.powf(7.96) - 1.0).abs() < 1e-12);
        let nlos10 = path_loss_linear(&PathLoss::NLOS, 10.0).unwrap();
        assert!((nlos10 / 10f64.powf(6.93) - 1.0).abs() < 1e-12);
        assert!(path_loss_linear(&PathLoss::LOS, 0.0).is_err());
        assert!(path_loss_linear(&PathLoss::NLOS, -3.0).is_err());
    }

    #[test]
    fn path_loss_monotone() {
        for model in [PathLoss::LOS, PathLoss::NLOS] {
            let mut prev = 0.0;
            for i in 1..200 {
                let v = path_loss_linear(&model, i as f64 * 0.7).unwrap();
                assert!(v > prev);
                prev = v;
            }
        }
    }

    #[test]
    fn bob_position_support_and_mean_radius() {
        let mut g = SeedStream::new(3).rng("bob-pos", 0);
        let ann = Geometry::default().bob;
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let p = sample_bob_position(&mut g, &ann);
            let r = distance(p, ann.center);
            assert!((10.0 - 1e-9..=20.0 + 1e-9).contains(&r));
            assert_eq!(p[2], ann.center[2]);
            sum += r;
        }
        let expected = 2.0 / 3.0 * (20f64.powi(3) - 1000.0) / (400.0 - 100.0);
        assert!((expected - 15.5556).abs() < 1e-3);
        assert!((sum / n as f64 - expected).abs() < 0.03);

        let ring = Annulus {
            center: [1.0, 2.0, 3.0],
            inner: 7.0,
            outer: 7.0,
        };
        for _ in 0..100 {
            let p = sample_bob_position(&mut g, &ring);
            assert!((distance(p, ring.center) - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_is_unit_modulus_and_scales_with_wavelength() {
        let geo = Geometry {
            elements_h: 5,
            elements_v: 3,
            ..Geometry::default()
        };
        let s = los_steering(&geo);
        assert!(s.iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
        // Odd grid: element 7 sits on the center.
        assert!(s[7].arg().abs() < 1e-12);

        let geo2 = Geometry {
            wavelength: geo.wavelength * 2.0,
            ..geo.clone()
        };
        let s2 = los_steering(&geo2);
        let d0 = distance(geo.alice, geo.dris_center);
        for (p, (a, b)) in geo.element_positions().iter().zip(s.iter().zip(&s2)) {
            let phase = -2.0 * PI / geo.wavelength * (distance(geo.alice, *p) - d0);
            let wrap = |x: f64| (x + PI).rem_euclid(2.0 * PI) - PI;
            assert!(wrap(a.arg() - phase).abs() < 1e-9);
            assert!(wrap(b.arg() - phase / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rician_limits_and_power() {
        let geo = Geometry::default();
        let mut g = SeedStream::new(5).rng("rician", 0);
        let los = los_steering(&geo);
        let inf = sample_rician_g(&mut g, &geo, f64::INFINITY).unwrap();
        assert_eq!(inf, los);

        let mut p = 0.0;
        let mut count = 0;
        while count < 100_000 {
            let v = sample_rician_g(&mut g, &geo, 0.0).unwrap();
            p += v.iter().map(|c| c.norm_sqr()).sum::<f64>();
            count += v.len();
        }
        let p0 = p / count as f64;
        assert!((p0 - 1.0).abs() < 0.015, "kappa=0 power {p0}");

        let (mut p, mut count) = (0.0, 0);
        while count < 100_000 {
            let v = sample_rician_g(&mut g, &geo, 4.0).unwrap();
            p += v.iter().map(|c| c.norm_sqr()).sum::<f64>();
            count += v.len();
        }
        let p4 = p / count as f64;
        assert!((0.99..=1.01).contains(&p4), "kappa=4 power {p4}");
        assert!(sample_rician_g(&mut g, &geo, -1.0).is_err());
    }

    #[test]
    fn dris_coefficients() {
        let prof = DrisProfile::one_bit_default();
        let mut g = SeedStream::new(9).rng("coeffs", 0);
        let a = Complex64::from_polar(0.8, PI / 9.0);
        let b = Complex64::from_polar(1.0, 7.0 * PI / 6.0);
        let v = sample_dris_coeffs(&mut g, &prof, 1_000_000);
        assert!(v.iter().all(|c| *c == a || *c == b));
        let mean = v.iter().map(|c| c.norm_sqr()).sum::<f64>() / v.len() as f64;
        assert!((0.8185..=0.8215).contains(&mean), "{mean}");

        let single = DrisProfile::new(vec![0.0], vec![1.0], vec![1.0]).unwrap();
        assert!(sample_dris_coeffs(&mut g, &single, 50)
            .iter()
            .all(|c| *c == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn non_uniform_profile_sampling() {
        let prof = DrisProfile::new(
            vec![0.0, 1.0, 2.0, 3.0],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        let sampler = StateSampler::new(&prof);
        let mut g = SeedStream::new(1).rng("states", 0);
        let mut idx = Vec::new();
        sampler.fill(&mut g, 200_000, &mut idx);
        for k in 0..4 {
            let f = idx.iter().filter(|&&i| i as usize == k).count() as f64 / 200_000.0;
            assert!((f - prof.probabilities()[k]).abs() < 0.005, "state {k}: {f}");
        }
    }

    #[test]
    fn profile_validation() {
        assert!(DrisProfile::new(vec![0.0, 1.0], vec![0.5, 1.2], vec![0.5, 0.5]).is_err());
        assert!(DrisProfile::new(vec![0.0, 1.0], vec![0.5, 1.0], vec![0.6, 0.5]).is_err());
        assert!(DrisProfile::new(vec![0.0, 1.0, 2.0], vec![1.0; 3], vec![1.0 / 3.0; 3]).is_err());
        assert!(DrisProfile::new(vec![], vec![], vec![]).is_err());
        assert_eq!(DrisProfile::one_bit_default().bits(), 1);
    }

    #[test]
    fn cascaded_channel_basics() {
        let large = LargeScale {
            l_g: 1.0,
            l_i_w: 1.0,
            l_i_b: 1.0,
            l_d_w: 1.0,
            l_d_b: 1.0,
        };
        let one = Complex64::new(1.0, 0.0);
        let real = ChannelRealization {
            h_d_w: one,
            h_d_b: one,
            g_hat: vec![one],
            h_i_w: vec![one],
            h_i_b: vec![one],
            large,
        };
        let c = Complex64::from_polar(0.8, PI / 9.0);
        assert_eq!(cascaded_h(&real, &[c], Target::Willie).unwrap(), c);
        assert_eq!(
            cascaded_h(&real, &[Complex64::new(0.0, 0.0)], Target::Bob).unwrap(),
            Complex64::new(0.0, 0.0)
        );
        assert!(cascaded_h(&real, &[c, c], Target::Willie).is_err());
    }

    #[test]
    fn cascaded_variance_matches_closed_form_small() {
        // Reduced-size check; the full-size one lives in the acceptance suite.
        let sc = reference_scenario(5.0).with_grid(16, 16).unwrap();
        let prof = sc.dris().unwrap().clone();
        let large = sc.large_scale(sc.geometry().bob.center).unwrap();
        let seeds = SeedStream::new(11);
        let n = 20_000;
        let mut m2 = 0.0;
        for i in 0..n {
            let mut g = seeds.rng("prop1", i);
            let real = sc.sample_realization(&mut g, sc.geometry().bob.center).unwrap();
            let coeffs = sample_dris_coeffs(&mut g, &prof, 256);
            m2 += cascaded_h(&real, &coeffs, Target::Willie).unwrap().norm_sqr();
        }
        let var = m2 / n as f64;
        let expect = theory::prop_variance(256, theory::alpha_bar(&prof), large.l_g, large.l_i_w);
        assert!((var / expect - 1.0).abs() < 0.03, "{var} vs {expect}");
    }

    #[test]
    fn h0_statistics_are_gamma() {
        let sc = reference_scenario(5.0);
        let batch = gen_willie_statistics(&SeedStream::new(21), &sc, Hypothesis::H0, 50_000, 5)
            .unwrap();
        let noise = sc.noise_willie();
        let d = ks_statistic(batch.statistics(), |y| gamma_cdf(5, noise, y));
        assert!(d < ks_critical(50_000, 0.01), "D = {d}");
        assert!(batch.hidden_labels().iter().all(|&h| h == Hypothesis::H0));
    }

    #[test]
    fn zero_power_h1_is_noise_only() {
        let sc = reference_scenario(5.0).with_tx_power(0.0).unwrap();
        let batch = gen_willie_statistics(&SeedStream::new(4), &sc, Hypothesis::H1, 20_000, 5)
            .unwrap();
        let d = ks_statistic(batch.statistics(), |y| gamma_cdf(5, sc.noise_willie(), y));
        assert!(d < ks_critical(20_000, 0.01), "D = {d}");
    }

    #[test]
    fn willie_statistics_are_reproducible() {
        let sc = reference_scenario(-7.0).with_grid(8, 8).unwrap();
        let s = SeedStream::new(99);
        let a = gen_willie_statistics(&s, &sc, Hypothesis::H1, 300, 5).unwrap();
        let b = gen_willie_statistics(&s, &sc, Hypothesis::H1, 300, 5).unwrap();
        assert_eq!(a.statistics(), b.statistics());
        // A prefix of a longer run is the same numbers.
        let c = gen_willie_statistics(&s, &sc, Hypothesis::H1, 100, 5).unwrap();
        assert_eq!(&a.statistics()[..100], c.statistics());
    }

    #[test]
    fn bob_without_dris_has_no_jamming() {
        let sc = reference_scenario(5.0).without_dris();
        let sig = gen_bob_signals(&SeedStream::new(2), &sc, [0.0, 140.0, 0.0], 1000, 20).unwrap();
        assert_eq!(sig.jamming.len(), 1000);
        assert!(sig.jamming.iter().all(|&j| j == 0.0));
    }

    #[test]
    fn bob_power_scaling() {
        let base = reference_scenario(5.0).with_grid(8, 8).unwrap();
        let double = base.with_tx_power(2.0 * base.tx_power()).unwrap();
        let seeds = SeedStream::new(8);
        let bob = base.geometry().bob.center;
        let a = gen_bob_signals(&seeds, &base, bob, 5000, 20).unwrap();
        let b = gen_bob_signals(&seeds, &double, bob, 5000, 20).unwrap();
        // Same streams, so every sample scales exactly.
        for (x, y) in a.signal.iter().zip(&b.signal) {
            assert!((y / x - 2.0).abs() < 1e-12);
        }
        for (x, y) in a.jamming.iter().zip(&b.jamming) {
            assert!((y / x - 2.0).abs() < 1e-12);
        }
    }
}
