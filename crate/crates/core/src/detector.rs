//! Neyman-Pearson detection on Willie's radiometer statistic.
//!
//! The unsupervised pipeline discards the observations that look most like
//! noise under the closed-form Gamma null, fits a one-dimensional flow to
//! what is left as a stand-in for the H1 density, and sets the LLR threshold
//! by Monte-Carlo sampling of the null.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{self, FlowModel, TrainConfig};
use crate::statkit::{binomial_ci, quantile_index, sample_gamma, SeedStream};
use crate::theory::{gamma_h0_logpdf, gamma_logpdf_unchecked, GammaNull};

/// Level of the intervals attached to reported rates.
pub const REPORT_CI_LEVEL: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Hypothesis {
    /// Alice silent.
    H0,
    /// Alice transmitting.
    H1,
}

/// Radiometer statistics with their (hidden) ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationBatch {
    statistics: Vec<f64>,
    hidden_labels: Vec<Hypothesis>,
    fingerprint: u64,
    seed: u64,
}

impl ObservationBatch {
    /// Unchecked constructor for generator output.
    pub(crate) fn new(
        statistics: Vec<f64>,
        hidden_labels: Vec<Hypothesis>,
        fingerprint: u64,
        seed: u64,
    ) -> Self {
        debug_assert_eq!(statistics.len(), hidden_labels.len());
        Self {
            statistics,
            hidden_labels,
            fingerprint,
            seed,
        }
    }

    pub fn from_parts(
        statistics: Vec<f64>,
        hidden_labels: Vec<Hypothesis>,
        fingerprint: u64,
        seed: u64,
    ) -> Result<Self> {
        if statistics.len() != hidden_labels.len() {
            return Err(Error::invalid(format!(
                "{} statistics but {} labels",
                statistics.len(),
                hidden_labels.len()
            )));
        }
        if let Some(y) = statistics.iter().find(|y| !(**y >= 0.0) || !y.is_finite()) {
            return Err(Error::invalid(format!("statistic {y} is not finite and >= 0")));
        }
        Ok(Self::new(statistics, hidden_labels, fingerprint, seed))
    }

    /// All observations labeled with a single hypothesis.
    pub fn labeled(statistics: Vec<f64>, label: Hypothesis) -> Result<Self> {
        let n = statistics.len();
        Self::from_parts(statistics, vec![label; n], 0, 0)
    }

    pub fn statistics(&self) -> &[f64] {
        &self.statistics
    }

    pub fn hidden_labels(&self) -> &[Hypothesis] {
        &self.hidden_labels
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.statistics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statistics.is_empty()
    }

    pub fn count(&self, label: Hypothesis) -> usize {
        self.hidden_labels.iter().filter(|&&l| l == label).count()
    }

    /// Concatenation; provenance is taken from `self`.
    pub fn concat(&self, other: &ObservationBatch) -> ObservationBatch {
        let mut out = self.clone();
        out.statistics.extend_from_slice(&other.statistics);
        out.hidden_labels.extend_from_slice(&other.hidden_labels);
        out
    }

    pub fn select(&self, indices: &[usize]) -> ObservationBatch {
        Self::new(
            indices.iter().map(|&i| self.statistics[i]).collect(),
            indices.iter().map(|&i| self.hidden_labels[i]).collect(),
            self.fingerprint,
            self.seed,
        )
    }

    pub fn shuffled<R: Rng + ?Sized>(&self, gen: &mut R) -> ObservationBatch {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(gen);
        self.select(&idx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Target false-alarm rate.
    pub alpha: f64,
    /// Null draws used to place the threshold.
    pub threshold_samples: usize,
    /// Fraction of unlabeled observations discarded as noise-like.
    pub rho: f64,
    /// Received samples summed into each statistic.
    pub samples_per_statistic: u32,
    /// Share of H1 intervals in the simulated unlabeled training stream.
    pub h1_fraction: f64,
    /// Consecutive statistics grouped into one flow input; 1 models the
    /// scalar marginal.
    pub window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            threshold_samples: 1_000_000,
            rho: 0.5,
            samples_per_statistic: 5,
            h1_fraction: 0.5,
            window: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("rho {} outside (0, 1)", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.h1_fraction) {
            return Err(Error::invalid(format!(
                "H1 fraction {} outside [0, 1]",
                self.h1_fraction
            )));
        }
        if self.threshold_samples == 0 {
            return Err(Error::invalid("threshold sample count must be >= 1"));
        }
        if self.samples_per_statistic == 0 {
            return Err(Error::invalid("samples per statistic must be >= 1"));
        }
        if self.window == 0 {
            return Err(Error::invalid("window must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub alpha: f64,
    pub samples: usize,
    /// Index of the threshold in the ascending sort of the null LLRs.
    pub quantile_index: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedDetector {
    flow: FlowModel,
    null: GammaNull,
    calibration: Calibration,
}

impl FittedDetector {
    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn null(&self) -> &GammaNull {
        &self.null
    }

    pub fn threshold(&self) -> f64 {
        self.calibration.threshold
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    /// Statistics consumed per decision.
    pub fn window(&self) -> usize {
        self.flow.dim()
    }

    /// Assembles a detector from a flow and an explicit threshold.
    pub fn from_parts(flow: FlowModel, null: GammaNull, calibration: Calibration) -> Result<Self> {
        Ok(Self {
            flow,
            null,
            calibration,
        })
    }

    /// LLRs of consecutive windows of statistics; no validation.
    fn llr_many(&self, ys: &[f64]) -> Vec<f64> {
        llr_values(&self.flow, &self.null, ys)
    }
}

fn llr_values(flow: &FlowModel, null: &GammaNull, ys: &[f64]) -> Vec<f64> {
    flow.log_density_batch(ys)
        .into_iter()
        .zip(ys.chunks_exact(flow.dim()))
        .map(|(lp, w)| lp - w.iter().map(|&y| gamma_logpdf_unchecked(null, y)).sum::<f64>())
        .collect()
}

/// Null density of a statistic.
pub fn h0_likelihood(null: &GammaNull, y: f64) -> Result<f64> {
    Ok(gamma_h0_logpdf(null, y)?.exp())
}

/// Drops the `floor(rho n)` observations with the highest null likelihood.
///
/// The cut `tau` is the likelihood at ascending index `n - floor(rho n)`
/// and every observation with likelihood `>= tau` is discarded, so ties at
/// the cut are removed together.
pub fn prefilter(batch: &ObservationBatch, null: &GammaNull, rho: f64) -> Result<ObservationBatch> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho {rho} outside (0, 1)")));
    }
    if batch.is_empty() {
        return Err(Error::invalid("cannot prefilter an empty batch"));
    }
    let scores = batch
        .statistics()
        .iter()
        .map(|&y| gamma_h0_logpdf(null, y))
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = n - (rho * n as f64).floor() as usize;
    let tau = sorted[cut.min(n - 1)];
    let keep: Vec<usize> = (0..n).filter(|&i| scores[i] < tau).collect();
    if keep.is_empty() {
        return Err(Error::DegenerateSplit { rho, total: n });
    }
    Ok(batch.select(&keep))
}

/// `eta = ` the `(1 - alpha)` empirical quantile of LLR values.
pub fn threshold_from_llr(values: &[f64], alpha: f64) -> Result<(f64, usize)> {
    if values.is_empty() {
        return Err(Error::invalid("no LLR values to calibrate on"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = quantile_index(sorted.len(), 1.0 - alpha);
    Ok((sorted[k], k))
}

/// Places the LLR threshold at the `(1 - alpha)` quantile of `samples`
/// fresh null draws.
pub fn calibrate_threshold<R: Rng + ?Sized>(
    flow: &FlowModel,
    null: &GammaNull,
    alpha: f64,
    samples: usize,
    gen: &mut R,
) -> Result<Calibration> {
    if samples == 0 {
        return Err(Error::invalid("threshold sample count must be >= 1"));
    }
    if (samples as f64) * alpha.min(1.0 - alpha) < 100.0 {
        log::warn!(
            "only {samples} null draws for alpha = {alpha}; the threshold quantile is poorly resolved"
        );
    }
    let draws = (0..samples * flow.dim())
        .map(|_| sample_gamma(gen, null.shape(), null.scale()))
        .collect::<Result<Vec<_>>>()?;
    let llr = llr_values(flow, null, &draws);
    let (threshold, quantile_index) = threshold_from_llr(&llr, alpha)?;
    Ok(Calibration {
        alpha,
        samples,
        quantile_index,
        threshold,
    })
}

fn fit_on(
    data: &ObservationBatch,
    null: &GammaNull,
    config: &DetectorConfig,
    train_config: &TrainConfig,
) -> Result<FittedDetector> {
    let w = config.window;
    let usable = data.len() / w * w;
    let model = flow::train(&data.statistics()[..usable], w, train_config)?;
    let mut gen = SeedStream::new(train_config.seed).rng("calibrate", 0);
    let calibration = calibrate_threshold(
        &model,
        null,
        config.alpha,
        config.threshold_samples,
        &mut gen,
    )?;
    FittedDetector::from_parts(model, *null, calibration)
}

/// Unsupervised fit: prefilter, train the flow on the retained set, then
/// calibrate. Labels in `batch` are never read.
pub fn fit_unsupervised(
    batch: &ObservationBatch,
    null: &GammaNull,
    config: &DetectorConfig,
    train_config: &TrainConfig,
) -> Result<FittedDetector> {
    config.validate()?;
    let retained = prefilter(batch, null, config.rho)?;
    fit_on(&retained, null, config, train_config)
}

/// Supervised baseline trained directly on H1 observations.
pub fn fit_supervised(
    batch: &ObservationBatch,
    null: &GammaNull,
    config: &DetectorConfig,
    train_config: &TrainConfig,
) -> Result<FittedDetector> {
    config.validate()?;
    if batch.hidden_labels().iter().any(|&l| l != Hypothesis::H1) {
        return Err(Error::invalid("supervised training data must be all H1"));
    }
    fit_on(batch, null, config, train_config)
}

fn check_statistic(y: f64) -> Result<()> {
    if !(y >= 0.0) {
        return Err(Error::invalid(format!("statistic {y} must be >= 0")));
    }
    Ok(())
}

/// `log f1(y) - log f0(y)` with the flow as `f1`.
pub fn llr(detector: &FittedDetector, y: f64) -> Result<f64> {
    llr_window(detector, &[y])
}

/// LLR of one window of consecutive statistics.
pub fn llr_window(detector: &FittedDetector, ys: &[f64]) -> Result<f64> {
    if ys.len() != detector.window() {
        return Err(Error::invalid(format!(
            "detector expects windows of {}, got {}",
            detector.window(),
            ys.len()
        )));
    }
    for &y in ys {
        check_statistic(y)?;
    }
    Ok(detector.llr_many(ys)[0])
}

/// H1 iff the LLR strictly exceeds the threshold.
pub fn classify(detector: &FittedDetector, y: f64) -> Result<Hypothesis> {
    Ok(decide(llr(detector, y)?, detector.threshold()))
}

pub fn decide(llr: f64, threshold: f64) -> Hypothesis {
    if llr > threshold {
        Hypothesis::H1
    } else {
        Hypothesis::H0
    }
}

/// An error rate with its Wilson interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rate {
    pub errors: u64,
    pub trials: u64,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Rate {
    pub fn new(errors: u64, trials: u64, level: f64) -> Result<Self> {
        let (lo, hi) = binomial_ci(errors, trials, level)?;
        let value = errors as f64 / trials as f64;
        Ok(Self {
            errors,
            trials,
            value,
            lo: lo.min(value),
            hi: hi.max(value),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionReport {
    /// Missed-detection rate; `None` when the batch holds no H1 samples.
    pub mdr: Option<Rate>,
    /// False-alarm rate; `None` when the batch holds no H0 samples.
    pub far: Option<Rate>,
}

/// Scores decisions against ground truth.
pub fn score_decisions(decisions: &[Hypothesis], labels: &[Hypothesis]) -> Result<DetectionReport> {
    if decisions.len() != labels.len() {
        return Err(Error::invalid("decision and label counts differ"));
    }
    let (mut h0, mut h1, mut fa, mut md) = (0u64, 0u64, 0u64, 0u64);
    for (d, l) in decisions.iter().zip(labels) {
        match l {
            Hypothesis::H0 => {
                h0 += 1;
                fa += u64::from(*d == Hypothesis::H1);
            }
            Hypothesis::H1 => {
                h1 += 1;
                md += u64::from(*d == Hypothesis::H0);
            }
        }
    }
    Ok(DetectionReport {
        mdr: (h1 > 0).then(|| Rate::new(md, h1, REPORT_CI_LEVEL)).transpose()?,
        far: (h0 > 0).then(|| Rate::new(fa, h0, REPORT_CI_LEVEL)).transpose()?,
    })
}

/// MDR and FAR of `detector` on a labeled batch. With windows longer than
/// one, each hypothesis' statistics are grouped in order and any remainder
/// is dropped.
pub fn evaluate(detector: &FittedDetector, batch: &ObservationBatch) -> Result<DetectionReport> {
    for &y in batch.statistics() {
        check_statistic(y)?;
    }
    let eta = detector.threshold();
    let w = detector.window();
    if w == 1 {
        let decisions: Vec<Hypothesis> = detector
            .llr_many(batch.statistics())
            .into_iter()
            .map(|l| decide(l, eta))
            .collect();
        return score_decisions(&decisions, batch.hidden_labels());
    }
    let mut decisions = Vec::new();
    let mut labels = Vec::new();
    for label in [Hypothesis::H0, Hypothesis::H1] {
        let ys: Vec<f64> = batch
            .statistics()
            .iter()
            .zip(batch.hidden_labels())
            .filter(|(_, &l)| l == label)
            .map(|(&y, _)| y)
            .collect();
        let usable = ys.len() / w * w;
        for l in detector.llr_many(&ys[..usable]) {
            decisions.push(decide(l, eta));
            labels.push(label);
        }
    }
    score_decisions(&decisions, &labels)
}
