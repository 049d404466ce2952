//! Experiment driver: sweep points, the three figure sweeps, CSV output and
//! the self-validation suite.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::time::Instant;

use crate::channel::{
    cascaded_h, gen_bob_signals, gen_willie_statistics, linear_to_db, sample_bob_position,
    sample_dris_coeffs, Point3, Scenario, Target,
};
use crate::config::{grid_for, BobPlacement, ScenarioConfig};
use crate::detector::{
    evaluate, fit_supervised, fit_unsupervised, DetectorConfig, FittedDetector, Hypothesis,
    ObservationBatch, Rate,
};
use crate::error::{Error, Result};
use crate::flow::{
    grad_nll, nll, made_forward, EnrichmentMode, FlowArchitecture, FlowModel, Standardizer,
    TrainConfig,
};
use crate::statkit::{
    binomial_ci, gamma_cdf, ks_critical, ks_statistic, sample_gamma, SeedStream,
};
use crate::theory::{alpha_bar, prop_variance, sjnr_empirical, sjnr_theory, GammaNull};

pub const CSV_HEADER: &str = "sweep_var,sweep_value,mdr_unsup,mdr_unsup_lo,mdr_unsup_hi,mdr_sup,mdr_sup_lo,mdr_sup_hi,mdr_no_dris,mdr_no_dris_lo,mdr_no_dris_hi,far_target,far_empirical,sjnr_sim_db,sjnr_theory_db,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub sweep_var: String,
    pub sweep_value: f64,
    pub mdr_unsup: Rate,
    /// Absent when only the unsupervised detector was evaluated.
    pub mdr_sup: Option<Rate>,
    pub mdr_no_dris: Option<Rate>,
    pub far_target: f64,
    /// FAR of the unsupervised detector on the evaluation set.
    pub far_empirical: Rate,
    pub sjnr_sim_db: f64,
    pub sjnr_theory_db: f64,
    pub seed: u64,
    /// Not written to CSV, which must be reproducible byte for byte.
    pub wall_seconds: f64,
}

/// One sweep point to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSpec {
    pub sweep_var: String,
    pub sweep_value: f64,
    pub p0_dbm: f64,
    /// Surface size override; `Some(0)` removes the surface.
    pub n_elements: Option<usize>,
    pub samples: u32,
    pub seed: u64,
}

/// Which detectors a point fits besides the unsupervised one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Baselines {
    pub supervised: bool,
    pub no_dris: bool,
}

impl Baselines {
    pub const ALL: Baselines = Baselines {
        supervised: true,
        no_dris: true,
    };
}

/// Scenario of a point: the configured surface at `p0_dbm`, regridded or
/// removed when `n_elements` is given.
pub fn point_scenario(config: &ScenarioConfig, spec: &PointSpec) -> Result<Scenario> {
    let scen = config.scenario(spec.p0_dbm)?;
    match spec.n_elements {
        None => Ok(scen),
        Some(0) => Ok(scen.without_dris()),
        Some(n) => {
            let (h, v) = grid_for(n);
            scen.with_grid(h, v)
        }
    }
}

fn bob_position(config: &ScenarioConfig, seeds: &SeedStream) -> Point3 {
    match config.bob_placement {
        BobPlacement::Center => config.geometry.bob.center,
        BobPlacement::Sampled => {
            sample_bob_position(&mut seeds.rng("bob-position", 0), &config.geometry.bob)
        }
    }
}

/// Empirical and closed-form SJNR at Bob, in dB.
pub fn sjnr_pair(
    config: &ScenarioConfig,
    scenario: &Scenario,
    seeds: &SeedStream,
) -> Result<(f64, f64)> {
    let bob = bob_position(config, seeds);
    let signals = gen_bob_signals(
        &seeds.derive("bob", 0),
        scenario,
        bob,
        config.sjnr_symbols,
        config.symbols as usize,
    )?;
    let large = scenario.large_scale(bob)?;
    let theory = sjnr_theory(
        scenario.tx_power(),
        scenario.n_elements(),
        alpha_bar(&config.dris),
        large.l_d_b,
        large.l_g,
        large.l_i_b,
        scenario.noise_bob(),
    );
    Ok((linear_to_db(sjnr_empirical(&signals)?), linear_to_db(theory)))
}

/// Data and fitting recipe shared by every detector at one point. Training,
/// evaluation and calibration draw from disjoint child streams.
pub struct PointData<'a> {
    config: &'a ScenarioConfig,
    seeds: SeedStream,
    samples: u32,
    null: GammaNull,
}

impl<'a> PointData<'a> {
    pub fn new(config: &'a ScenarioConfig, scenario: &Scenario, samples: u32, seed: u64) -> Result<Self> {
        if samples > config.symbols {
            return Err(Error::invalid(format!(
                "N = {samples} exceeds M = {} symbols per coherence interval",
                config.symbols
            )));
        }
        Ok(Self {
            config,
            seeds: SeedStream::new(seed),
            samples,
            null: GammaNull::new(samples, scenario.noise_willie())?,
        })
    }

    pub fn null(&self) -> &GammaNull {
        &self.null
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            samples_per_statistic: self.samples,
            ..self.config.detector.clone()
        }
    }

    pub fn train_config(&self, label: &str) -> TrainConfig {
        TrainConfig {
            seed: self.seeds.child_seed(label, 0),
            ..self.config.flow.clone()
        }
    }

    fn gen(&self, label: &str, scen: &Scenario, h: Hypothesis, n: usize) -> Result<ObservationBatch> {
        gen_willie_statistics(&self.seeds.derive(label, 0), scen, h, n, self.samples)
    }

    /// Unlabeled training stream with the configured H1 share.
    pub fn unlabeled(&self, scen: &Scenario) -> Result<ObservationBatch> {
        let t = self.config.train_size;
        let n1 = (t as f64 * self.config.detector.h1_fraction).round() as usize;
        let h0 = self.gen("train-h0", scen, Hypothesis::H0, t - n1)?;
        let h1 = self.gen("train-h1", scen, Hypothesis::H1, n1)?;
        Ok(h0.concat(&h1))
    }

    pub fn supervised(&self, scen: &Scenario) -> Result<ObservationBatch> {
        self.gen("train-sup", scen, Hypothesis::H1, self.config.train_size)
    }

    pub fn eval_h0(&self, scen: &Scenario) -> Result<ObservationBatch> {
        self.gen("eval-h0", scen, Hypothesis::H0, self.config.eval_size)
    }

    pub fn eval_h1(&self, scen: &Scenario) -> Result<ObservationBatch> {
        self.gen("eval-h1", scen, Hypothesis::H1, self.config.eval_size)
    }

    pub fn fit_unsupervised(&self, scen: &Scenario) -> Result<FittedDetector> {
        fit_unsupervised(
            &self.unlabeled(scen)?,
            &self.null,
            &self.detector_config(),
            &self.train_config("flow-unsup"),
        )
    }

    pub fn fit_supervised(&self, scen: &Scenario) -> Result<FittedDetector> {
        fit_supervised(
            &self.supervised(scen)?,
            &self.null,
            &self.detector_config(),
            &self.train_config("flow-sup"),
        )
    }
}

fn rates(det: &FittedDetector, h0: &ObservationBatch, h1: &ObservationBatch) -> Result<(Rate, Rate)> {
    let rep = evaluate(det, &h0.concat(h1))?;
    match (rep.mdr, rep.far) {
        (Some(m), Some(f)) => Ok((m, f)),
        _ => Err(Error::Internal("evaluation set lacks a hypothesis".into())),
    }
}

/// Fits and evaluates the detectors of one sweep point.
pub fn run_point(config: &ScenarioConfig, spec: &PointSpec, baselines: Baselines) -> Result<SweepResult> {
    let start = Instant::now();
    let scen = point_scenario(config, spec)?;
    let data = PointData::new(config, &scen, spec.samples, spec.seed)?;
    let eval_h0 = data.eval_h0(&scen)?;
    let eval_h1 = data.eval_h1(&scen)?;

    let unsup = data.fit_unsupervised(&scen)?;
    let (mdr_unsup, far_empirical) = rates(&unsup, &eval_h0, &eval_h1)?;

    let mdr_sup = if baselines.supervised {
        let sup = data.fit_supervised(&scen)?;
        Some(rates(&sup, &eval_h0, &eval_h1)?.0)
    } else {
        None
    };
    let mdr_no_dris = match (baselines.no_dris, scen.dris().is_some()) {
        (false, _) => None,
        // Without a surface the baseline is the same computation.
        (true, false) => Some(mdr_unsup),
        (true, true) => {
            let bare = scen.without_dris();
            let det = data.fit_unsupervised(&bare)?;
            Some(rates(&det, &eval_h0, &data.eval_h1(&bare)?)?.0)
        }
    };

    let (sjnr_sim_db, sjnr_theory_db) = sjnr_pair(config, &scen, &data.seeds)?;
    Ok(SweepResult {
        sweep_var: spec.sweep_var.clone(),
        sweep_value: spec.sweep_value,
        mdr_unsup,
        mdr_sup,
        mdr_no_dris,
        far_target: config.detector.alpha,
        far_empirical,
        sjnr_sim_db,
        sjnr_theory_db,
        seed: spec.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs points (in parallel when enabled); results keep input order.
pub fn run_points(
    config: &ScenarioConfig,
    specs: &[PointSpec],
    baselines: Baselines,
) -> Result<Vec<SweepResult>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        specs
            .par_iter()
            .map(|s| run_point(config, s, baselines))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        specs.iter().map(|s| run_point(config, s, baselines)).collect()
    }
}

fn point_seed(config: &ScenarioConfig, label: &str, index: usize) -> u64 {
    SeedStream::new(config.seed).child_seed(label, index as u64)
}

pub fn power_sweep_specs(config: &ScenarioConfig) -> Vec<PointSpec> {
    config
        .sweep_dbm
        .iter()
        .enumerate()
        .map(|(i, &p)| PointSpec {
            sweep_var: "p0_dbm".into(),
            sweep_value: p,
            p0_dbm: p,
            n_elements: None,
            samples: config.detector.samples_per_statistic,
            seed: point_seed(config, "p0_dbm", i),
        })
        .collect()
}

fn fixed_power_label(what: &str, p: f64) -> String {
    format!("{what}@{p}dBm")
}

pub fn elements_sweep_specs(config: &ScenarioConfig) -> Vec<PointSpec> {
    let mut out = Vec::new();
    for &p in &config.fixed_dbm {
        let var = fixed_power_label("n_elements", p);
        for (i, &n) in config.sweep_elements.iter().enumerate() {
            out.push(PointSpec {
                seed: point_seed(config, &var, i),
                sweep_var: var.clone(),
                sweep_value: n as f64,
                p0_dbm: p,
                n_elements: Some(n),
                samples: config.detector.samples_per_statistic,
            });
        }
    }
    out
}

pub fn samples_sweep_specs(config: &ScenarioConfig) -> Vec<PointSpec> {
    let mut out = Vec::new();
    for &p in &config.fixed_dbm {
        let var = fixed_power_label("samples", p);
        for (i, &n) in config.sweep_samples.iter().enumerate() {
            out.push(PointSpec {
                seed: point_seed(config, &var, i),
                sweep_var: var.clone(),
                sweep_value: n as f64,
                p0_dbm: p,
                n_elements: None,
                samples: n,
            });
        }
    }
    out
}

/// MDR and SJNR versus transmit power.
pub fn run_power_sweep(config: &ScenarioConfig) -> Result<Vec<SweepResult>> {
    config.validate()?;
    run_points(config, &power_sweep_specs(config), Baselines::ALL)
}

/// MDR and SJNR versus surface size, at each fixed power.
pub fn run_elements_sweep(config: &ScenarioConfig) -> Result<Vec<SweepResult>> {
    config.validate()?;
    run_points(config, &elements_sweep_specs(config), Baselines::ALL)
}

/// MDR and SJNR versus samples per statistic, at each fixed power.
pub fn run_samples_sweep(config: &ScenarioConfig) -> Result<Vec<SweepResult>> {
    config.validate()?;
    run_points(config, &samples_sweep_specs(config), Baselines::ALL)
}

/// `%g`-style rendering with 9 significant digits.
pub fn fmt_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-5..9).contains(&exp) {
        format!("{}e{exp}", trim(mant))
    } else {
        trim(&format!("{:.*}", (8 - exp) as usize, x))
    }
}

fn rate_fields(r: Option<&Rate>) -> String {
    match r {
        Some(r) => format!("{},{},{}", fmt_sig9(r.value), fmt_sig9(r.lo), fmt_sig9(r.hi)),
        None => ",,".into(),
    }
}

/// CSV text: `#` preamble with the resolved config, header, one row per
/// result.
pub fn render_csv(results: &[SweepResult], config: &ScenarioConfig) -> String {
    let mut out = String::new();
    out.push_str("# dris-covert sweep output\n");
    for (k, v) in config.entries() {
        let _ = writeln!(out, "# {k} = {v}");
    }
    let _ = writeln!(out, "# derived.alpha_bar = {}", fmt_sig9(alpha_bar(&config.dris)));
    let _ = writeln!(out, "# derived.noise_power_w = {}", fmt_sig9(config.noise_power()));
    let _ = writeln!(out, "# derived.ci_level = {}", crate::detector::REPORT_CI_LEVEL);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.sweep_var,
            fmt_sig9(r.sweep_value),
            rate_fields(Some(&r.mdr_unsup)),
            rate_fields(r.mdr_sup.as_ref()),
            rate_fields(r.mdr_no_dris.as_ref()),
            fmt_sig9(r.far_target),
            fmt_sig9(r.far_empirical.value),
            fmt_sig9(r.sjnr_sim_db),
            fmt_sig9(r.sjnr_theory_db),
            r.seed,
        );
    }
    out
}

pub fn emit_csv(results: &[SweepResult], config: &ScenarioConfig, path: &Path) -> Result<()> {
    std::fs::write(path, render_csv(results, config)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<24} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationOptions {
    pub cascade_draws: usize,
    pub null_draws: usize,
    pub seed: u64,
    /// Negative control: switch on one masked connection before the
    /// autoregressive check.
    pub corrupt_mask: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            cascade_draws: 100_000,
            null_draws: 100_000,
            seed: 0,
            corrupt_mask: false,
        }
    }
}

/// Monte-Carlo moments of the cascaded channel toward Willie.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeMoments {
    pub variance: f64,
    pub predicted: f64,
    /// `E|h|^4 / (E|h|^2)^2`; 2 for a circular Gaussian.
    pub fourth_ratio: f64,
}

pub fn cascade_moments(scenario: &Scenario, draws: usize, seed: u64) -> Result<CascadeMoments> {
    let profile = scenario
        .dris()
        .ok_or_else(|| Error::invalid("cascade moments need a surface"))?;
    let bob = scenario.geometry().bob.center;
    let mut gen = SeedStream::new(seed).rng("cascade", 0);
    let (mut m2, mut m4) = (0.0, 0.0);
    for _ in 0..draws {
        let real = scenario.sample_realization(&mut gen, bob)?;
        let coeffs = sample_dris_coeffs(&mut gen, profile, scenario.n_elements());
        let p = cascaded_h(&real, &coeffs, Target::Willie)?.norm_sqr();
        m2 += p;
        m4 += p * p;
    }
    m2 /= draws as f64;
    m4 /= draws as f64;
    let large = scenario.large_scale(bob)?;
    Ok(CascadeMoments {
        variance: m2,
        predicted: prop_variance(scenario.n_elements(), alpha_bar(profile), large.l_g, large.l_i_w),
        fourth_ratio: m4 / (m2 * m2),
    })
}

/// KS distance of simulated H0 statistics from the Gamma null, with the
/// critical value at significance 0.01.
pub fn null_ks(scenario: &Scenario, samples: u32, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let batch = gen_willie_statistics(
        &SeedStream::new(seed),
        scenario,
        Hypothesis::H0,
        draws,
        samples,
    )?;
    let scale = scenario.noise_willie();
    let d = ks_statistic(batch.statistics(), |y| gamma_cdf(samples, scale, y));
    Ok((d, ks_critical(draws, 0.01)))
}

/// Largest violation of `|analytic - fd| <= max(1e-7, 1e-4 * scale)` over
/// every parameter, as a fraction of the allowance (pass iff `<= 1`).
pub fn gradient_check(model: &FlowModel, batch: &[f64]) -> Result<f64> {
    let grad = grad_nll(model, batch)?;
    let base = model.params();
    let mut probe = model.clone();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params(&p)?;
        let up = nll(&probe, batch)?;
        p[k] = base[k] - h;
        probe.set_params(&p)?;
        let down = nll(&probe, batch)?;
        let fd = (up - down) / (2.0 * h);
        let allowance = (1e-4 * fd.abs().max(grad[k].abs())).max(1e-7);
        worst = worst.max((fd - grad[k]).abs() / allowance);
    }
    Ok(worst)
}

/// Worst `|inverse(forward(y)) - y|` over `n` points drawn in [-10, 10]^d.
pub fn round_trip_error(model: &FlowModel, n: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    let mut gen = SeedStream::new(seed).rng("round-trip", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let y: Vec<f64> = (0..model.dim()).map(|_| gen.gen_range(-10.0..10.0)).collect();
        let (z, _) = model.forward(&y);
        let back = model.inverse(&z)?;
        for (a, b) in y.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Midpoint-rule integral of a one-dimensional flow density over
/// `mean +- 40 std`.
pub fn density_mass(model: &FlowModel) -> f64 {
    let s = model.standardizer();
    let (lo, hi) = (s.mean[0] - 40.0 * s.std[0], s.mean[0] + 40.0 * s.std[0]);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..n).map(|k| lo + (k as f64 + 0.5) * h).collect();
    model.log_density_batch(&xs).iter().map(|l| l.exp()).sum::<f64>() * h
}

/// True when every conditioner output `t` ignores inputs `>= t`, probed by
/// perturbing each input in turn.
pub fn autoregressive_ok(model: &FlowModel) -> bool {
    let d = model.dim();
    let base: Vec<f64> = (0..d).map(|t| 0.37 * t as f64 - 0.5).collect();
    model.blocks().iter().all(|b| {
        let (mu0, s0) = made_forward(b.made(), &base);
        (0..d).all(|j| {
            let mut y = base.clone();
            y[j] += 0.913;
            let (mu, s) = made_forward(b.made(), &y);
            (0..=j).all(|t| mu[t] == mu0[t] && s[t] == s0[t])
        })
    })
}

/// Gamma quantile by bisection on the closed-form CDF.
pub fn gamma_quantile(shape: u32, scale: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, scale * (shape as f64 + 10.0));
    while gamma_cdf(shape, scale, hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_cdf(shape, scale, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Radiometer surrogate where the NP test is known in closed form:
/// H0 = Gamma(N, d), H1 = Gamma(N, 2 d).
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOutcome {
    pub mdr_pipeline: Rate,
    pub far_pipeline: Rate,
    /// Analytic MDR of the threshold test `Y > c` at level alpha.
    pub mdr_optimal: f64,
    /// Share of evaluation points where pipeline and oracle disagree.
    pub disagreement: f64,
}

pub fn surrogate_comparison(config: &ScenarioConfig, seed: u64) -> Result<SurrogateOutcome> {
    let n = config.detector.samples_per_statistic;
    let delta = config.noise_power();
    let null = GammaNull::new(n, delta)?;
    let seeds = SeedStream::new(seed);
    let draw = |label: &str, scale: f64, count: usize| -> Result<Vec<f64>> {
        let mut gen = seeds.rng(label, 0);
        (0..count).map(|_| sample_gamma(&mut gen, n, scale)).collect()
    };
    let t = config.train_size;
    let n1 = (t as f64 * config.detector.h1_fraction).round() as usize;
    let mut train = draw("train-h0", delta, t - n1)?;
    train.extend(draw("train-h1", 2.0 * delta, n1)?);
    let labels: Vec<Hypothesis> = (0..t)
        .map(|i| if i < t - n1 { Hypothesis::H0 } else { Hypothesis::H1 })
        .collect();
    let batch = ObservationBatch::from_parts(train, labels, 0, seed)?;
    let det_cfg = DetectorConfig {
        window: 1,
        ..config.detector.clone()
    };
    let det = fit_unsupervised(
        &batch,
        &null,
        &det_cfg,
        &TrainConfig {
            seed: seeds.child_seed("flow", 0),
            ..config.flow.clone()
        },
    )?;

    let m = config.eval_size;
    let h0 = ObservationBatch::labeled(draw("eval-h0", delta, m)?, Hypothesis::H0)?;
    let h1 = ObservationBatch::labeled(draw("eval-h1", 2.0 * delta, m)?, Hypothesis::H1)?;
    let (mdr_pipeline, far_pipeline) = rates(&det, &h0, &h1)?;

    let c = gamma_quantile(n, delta, 1.0 - config.detector.alpha);
    let eval = h0.concat(&h1);
    let disagree = eval
        .statistics()
        .iter()
        .map(|&y| Ok((crate::detector::llr(&det, y)? > det.threshold()) != (y > c)))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&d| d)
        .count();
    Ok(SurrogateOutcome {
        mdr_pipeline,
        far_pipeline,
        mdr_optimal: gamma_cdf(n, 2.0 * delta, c),
        disagreement: disagree as f64 / eval.len() as f64,
    })
}

fn random_flow(dim: usize, enrich: EnrichmentMode, seed: u64) -> Result<FlowModel> {
    let arch = FlowArchitecture {
        blocks: 3,
        hidden: vec![8],
        enrichment: enrich,
    };
    let std = Standardizer {
        mean: vec![0.5; dim],
        std: vec![1.5; dim],
    };
    let mut m = FlowModel::new(&arch, std, seed)?;
    m.jitter(seed ^ 0x5eed, 0.3);
    Ok(m)
}

/// Runs every self-check; failures are report entries, never errors.
pub fn run_validation(config: &ScenarioConfig) -> ValidationReport {
    run_validation_with(config, &ValidationOptions::default())
}

pub fn run_validation_with(config: &ScenarioConfig, opts: &ValidationOptions) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let seeds = SeedStream::new(opts.seed);

    let ab = alpha_bar(&config.dris);
    rep.push(
        "alpha_bar",
        Ok((ab > 0.0 && ab <= 1.0, format!("alpha_bar = {}", fmt_sig9(ab)))),
    );

    let scenario = config.scenario(config.train_dbm);
    rep.push(
        "cascade_clt",
        scenario.as_ref().map_err(clone_err).and_then(|s| {
            let m = cascade_moments(s, opts.cascade_draws, seeds.child_seed("cascade", 0))?;
            let rel = (m.variance / m.predicted - 1.0).abs();
            Ok((
                rel <= 0.02 && (1.9..=2.1).contains(&m.fourth_ratio),
                format!(
                    "variance {} vs {} (rel {}), fourth-moment ratio {}",
                    fmt_sig9(m.variance),
                    fmt_sig9(m.predicted),
                    fmt_sig9(rel),
                    fmt_sig9(m.fourth_ratio)
                ),
            ))
        }),
    );

    rep.push(
        "null_gamma_ks",
        scenario.as_ref().map_err(clone_err).and_then(|s| {
            let (d, crit) = null_ks(
                s,
                config.detector.samples_per_statistic,
                opts.null_draws,
                seeds.child_seed("ks", 0),
            )?;
            Ok((d <= crit, format!("D = {} (critical {})", fmt_sig9(d), fmt_sig9(crit))))
        }),
    );

    rep.push("flow_gradient", (|| {
        let mut worst: f64 = 0.0;
        for (dim, enrich) in [(1, EnrichmentMode::On), (3, EnrichmentMode::Off), (2, EnrichmentMode::On)] {
            let m = random_flow(dim, enrich, seeds.child_seed("grad", dim as u64))?;
            let mut gen = seeds.rng("grad-batch", dim as u64);
            let batch: Vec<f64> = (0..6 * dim)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut gen))
                .collect();
            worst = worst.max(gradient_check(&m, &batch)?);
        }
        Ok((worst <= 1.0, format!("worst error / allowance = {}", fmt_sig9(worst))))
    })());

    rep.push("flow_round_trip", (|| {
        let mut worst: f64 = 0.0;
        for dim in [1, 4] {
            let m = random_flow(dim, EnrichmentMode::On, seeds.child_seed("rt", dim as u64))?;
            worst = worst.max(round_trip_error(&m, 1000, opts.seed)?);
        }
        Ok((worst <= 1e-9, format!("max |y - inv(fwd(y))| = {}", fmt_sig9(worst))))
    })());

    rep.push("flow_normalization", (|| {
        let m = random_flow(1, EnrichmentMode::On, seeds.child_seed("norm", 0))?;
        let mass = density_mass(&m);
        Ok(((mass - 1.0).abs() <= 1e-3, format!("mass = {}", fmt_sig9(mass))))
    })());

    rep.push("flow_autoregressive", (|| {
        let mut m = random_flow(5, EnrichmentMode::Off, seeds.child_seed("ar", 0))?;
        if opts.corrupt_mask {
            m.corrupt_mask(0, 0.7);
        }
        let ok = autoregressive_ok(&m);
        Ok((ok, if ok { "masks respected".into() } else { "output depends on a later input".into() }))
    })());

    let surrogate = surrogate_comparison(config, seeds.child_seed("surrogate", 0));
    rep.push(
        "far_calibration",
        surrogate.as_ref().map_err(clone_err).and_then(|s| {
            let (lo, hi) = binomial_ci(
                (config.detector.alpha * s.far_pipeline.trials as f64).round() as u64,
                s.far_pipeline.trials,
                0.99,
            )?;
            let far = s.far_pipeline.value;
            Ok((
                far >= lo && far <= hi,
                format!("FAR {} (99% band {}..{})", fmt_sig9(far), fmt_sig9(lo), fmt_sig9(hi)),
            ))
        }),
    );
    rep.push(
        "np_oracle_surrogate",
        surrogate.as_ref().map_err(clone_err).map(|s| {
            let gap = s.mdr_pipeline.value - s.mdr_optimal;
            (
                gap <= 0.05,
                format!(
                    "MDR {} vs optimal {} (gap {})",
                    fmt_sig9(s.mdr_pipeline.value),
                    fmt_sig9(s.mdr_optimal),
                    fmt_sig9(gap)
                ),
            )
        }),
    );

    rep.push(
        "sjnr_theory",
        scenario.as_ref().map_err(clone_err).and_then(|s| {
            let probe = ScenarioConfig {
                bob_placement: BobPlacement::Center,
                ..config.clone()
            };
            let (sim, theory) = sjnr_pair(&probe, s, &seeds.derive("sjnr", 0))?;
            Ok((
                (sim - theory).abs() <= 0.5,
                format!("simulated {} dB vs closed form {} dB", fmt_sig9(sim), fmt_sig9(theory)),
            ))
        }),
    );
    rep
}

fn clone_err(e: &Error) -> Error {
    Error::Internal(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(0.05), "0.05");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-21.3456789012), "-21.3456789");
        assert_eq!(fmt_sig9(123456789.0), "123456789");
        assert_eq!(fmt_sig9(1234567890.0), "1.23456789e9");
        assert_eq!(fmt_sig9(1.8e-15), "1.8e-15");
        assert_eq!(fmt_sig9(0.000123), "0.000123");
        assert_eq!(fmt_sig9(2.0 / 3.0), "0.666666667");
        assert_eq!(fmt_sig9(f64::NAN), "nan");
    }

    #[test]
    fn empty_csv_is_preamble_and_header() {
        let cfg = ScenarioConfig::default();
        let text = render_csv(&[], &cfg);
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, vec![CSV_HEADER]);
        assert!(text.contains("# detector.rho = 0.5"));
        assert!(text.contains("# derived.alpha_bar = 0.82"));
    }

    #[test]
    fn csv_row_shape() {
        let rate = Rate::new(5, 100, 0.95).unwrap();
        let r = SweepResult {
            sweep_var: "p0_dbm".into(),
            sweep_value: 5.0,
            mdr_unsup: rate,
            mdr_sup: None,
            mdr_no_dris: Some(rate),
            far_target: 0.05,
            far_empirical: rate,
            sjnr_sim_db: -21.3,
            sjnr_theory_db: -21.31,
            seed: 42,
            wall_seconds: 1.0,
        };
        let text = render_csv(&[r], &ScenarioConfig::default());
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 2);
        let fields: Vec<&str> = data[1].split(',').collect();
        assert_eq!(fields.len(), CSV_HEADER.split(',').count());
        assert_eq!(fields[0], "p0_dbm");
        assert_eq!(fields[2], "0.05");
        assert_eq!(fields[5], "");
        assert_eq!(fields[15], "42");
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn gamma_quantile_inverts_cdf() {
        let c = gamma_quantile(5, 2.0, 0.95);
        assert!((gamma_cdf(5, 2.0, c) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn corrupted_mask_fails_validation_check() {
        let m = random_flow(5, EnrichmentMode::Off, 3).unwrap();
        assert!(autoregressive_ok(&m));
        let mut bad = m.clone();
        bad.corrupt_mask(0, 0.7);
        assert!(!autoregressive_ok(&bad));
    }

    #[test]
    fn specs_cover_sweeps() {
        let cfg = ScenarioConfig::default();
        assert_eq!(power_sweep_specs(&cfg).len(), 7);
        let e = elements_sweep_specs(&cfg);
        assert_eq!(e.len(), 10);
        assert_eq!(e[0].n_elements, Some(0));
        assert_eq!(e[0].sweep_var, "n_elements@-7dBm");
        let s = samples_sweep_specs(&cfg);
        assert_eq!(s.iter().map(|p| p.samples).max(), Some(20));
        let seeds: std::collections::HashSet<u64> =
            e.iter().chain(&s).map(|p| p.seed).collect();
        assert_eq!(seeds.len(), 20);
    }
}
