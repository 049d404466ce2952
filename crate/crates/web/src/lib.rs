//! Browser bindings for three small experiments on the core simulator.
//!
//! Every entry point is synchronous and sized to finish in about a second in
//! a browser tab.

use wasm_bindgen::prelude::*;

use dris_covert::channel::{cascaded_h, sample_dris_coeffs, Target};
use dris_covert::config::ScenarioConfig;
use dris_covert::detector::{llr, Hypothesis};
use dris_covert::flow::FlowArchitecture;
use dris_covert::harness::{
    cascade_moments, point_scenario, sjnr_pair, PointData, PointSpec,
};
use dris_covert::statkit::SeedStream;
use dris_covert::theory::alpha_bar;

fn js(e: dris_covert::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn spec(p0_dbm: f64, n_elements: usize, samples: u32, seed: u64) -> PointSpec {
    PointSpec {
        sweep_var: "web".into(),
        sweep_value: p0_dbm,
        p0_dbm,
        n_elements: Some(n_elements),
        samples,
        seed,
    }
}

/// Density-normalized histogram on `bins` equal cells over `[lo, hi)`.
fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> (Vec<f64>, Vec<f64>) {
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &v in values {
        let k = ((v - lo) / w).floor();
        if k >= 0.0 && (k as usize) < bins {
            counts[k as usize] += 1.0;
        }
    }
    let norm = 1.0 / (values.len().max(1) as f64 * w);
    let centers = (0..bins).map(|k| lo + (k as f64 + 0.5) * w).collect();
    (centers, counts.into_iter().map(|c| c * norm).collect())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Histogram of the normalized cascaded gain `|h|^2 / E|h|^2` at Willie
/// against the unit exponential it should follow.
#[wasm_bindgen]
pub struct CascadeView {
    centers: Vec<f64>,
    empirical: Vec<f64>,
    predicted: Vec<f64>,
    variance_ratio: f64,
    fourth_ratio: f64,
    alpha_bar: f64,
}

#[wasm_bindgen]
impl CascadeView {
    #[wasm_bindgen(getter)]
    pub fn centers(&self) -> Vec<f64> {
        self.centers.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn empirical(&self) -> Vec<f64> {
        self.empirical.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn predicted(&self) -> Vec<f64> {
        self.predicted.clone()
    }
    /// Simulated over predicted `E|h|^2`.
    #[wasm_bindgen(getter, js_name = varianceRatio)]
    pub fn variance_ratio(&self) -> f64 {
        self.variance_ratio
    }
    #[wasm_bindgen(getter, js_name = fourthRatio)]
    pub fn fourth_ratio(&self) -> f64 {
        self.fourth_ratio
    }
    #[wasm_bindgen(getter, js_name = alphaBar)]
    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }
}

#[wasm_bindgen(js_name = cascadeHistogram)]
pub fn cascade_histogram(n_elements: usize, draws: usize, seed: u64) -> Result<CascadeView, JsError> {
    if n_elements == 0 || draws == 0 {
        return Err(JsError::new("need at least one element and one draw"));
    }
    let cfg = ScenarioConfig::default();
    let scen = point_scenario(&cfg, &spec(cfg.train_dbm, n_elements, 1, seed)).map_err(js)?;
    let m = cascade_moments(&scen, draws, seed).map_err(js)?;
    let profile = scen.dris().expect("surface present");
    let bob = scen.geometry().bob.center;
    let mut gen = SeedStream::new(seed).rng("web-cascade", 0);
    let mut gains = Vec::with_capacity(draws);
    for _ in 0..draws {
        let real = scen.sample_realization(&mut gen, bob).map_err(js)?;
        let coeffs = sample_dris_coeffs(&mut gen, profile, scen.n_elements());
        gains.push(cascaded_h(&real, &coeffs, Target::Willie).map_err(js)?.norm_sqr() / m.predicted);
    }
    let (centers, empirical) = histogram(&gains, 0.0, 6.0, 60);
    let predicted = centers.iter().map(|x| (-x).exp()).collect();
    Ok(CascadeView {
        centers,
        empirical,
        predicted,
        variance_ratio: m.variance / m.predicted,
        fourth_ratio: m.fourth_ratio,
        alpha_bar: alpha_bar(profile),
    })
}

/// LLR histograms under both hypotheses for a freshly fitted unsupervised
/// detector, with its threshold and error rates.
#[wasm_bindgen]
pub struct DetectionView {
    centers: Vec<f64>,
    h0: Vec<f64>,
    h1: Vec<f64>,
    threshold: f64,
    mdr: f64,
    far: f64,
}

#[wasm_bindgen]
impl DetectionView {
    #[wasm_bindgen(getter)]
    pub fn centers(&self) -> Vec<f64> {
        self.centers.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn h0(&self) -> Vec<f64> {
        self.h0.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn h1(&self) -> Vec<f64> {
        self.h1.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn threshold(&self) -> f64 {
        self.threshold
    }
    #[wasm_bindgen(getter)]
    pub fn mdr(&self) -> f64 {
        self.mdr
    }
    #[wasm_bindgen(getter)]
    pub fn far(&self) -> f64 {
        self.far
    }
}

#[wasm_bindgen(js_name = detectionDemo)]
pub fn detection_demo(
    p0_dbm: f64,
    n_elements: usize,
    samples: u32,
    alpha: f64,
    seed: u64,
) -> Result<DetectionView, JsError> {
    let mut cfg = ScenarioConfig::default();
    cfg.train_size = 4000;
    cfg.eval_size = 5000;
    cfg.detector.alpha = alpha;
    cfg.detector.threshold_samples = 50_000;
    cfg.flow.epochs = 30;
    cfg.flow.architecture = FlowArchitecture {
        hidden: vec![32],
        ..FlowArchitecture::default()
    };
    cfg.validate().map_err(js)?;
    let scen = point_scenario(&cfg, &spec(p0_dbm, n_elements, samples, seed)).map_err(js)?;
    let data = PointData::new(&cfg, &scen, samples, seed).map_err(js)?;
    let det = data.fit_unsupervised(&scen).map_err(js)?;
    let score = |h: Hypothesis| -> Result<Vec<f64>, JsError> {
        let batch = match h {
            Hypothesis::H0 => data.eval_h0(&scen),
            Hypothesis::H1 => data.eval_h1(&scen),
        }
        .map_err(js)?;
        batch
            .statistics()
            .iter()
            .map(|&y| llr(&det, y).map_err(js))
            .collect()
    };
    let (l0, l1) = (score(Hypothesis::H0)?, score(Hypothesis::H1)?);
    let t = det.threshold();
    let far = l0.iter().filter(|&&v| v > t).count() as f64 / l0.len() as f64;
    let mdr = l1.iter().filter(|&&v| v <= t).count() as f64 / l1.len() as f64;

    let mut all: Vec<f64> = l0.iter().chain(&l1).copied().filter(|v| v.is_finite()).collect();
    all.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (quantile(&all, 0.005), quantile(&all, 0.995));
    lo = lo.min(t);
    hi = hi.max(t);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let (centers, h0) = histogram(&l0, lo, hi, 80);
    let (_, h1) = histogram(&l1, lo, hi, 80);
    Ok(DetectionView {
        centers,
        h0,
        h1,
        threshold: t,
        mdr,
        far,
    })
}

/// Simulated and closed-form SJNR at Bob over a power grid, with and
/// without the surface. Arrays are in dB.
#[wasm_bindgen]
pub struct SjnrView {
    p0_dbm: Vec<f64>,
    with_sim: Vec<f64>,
    with_theory: Vec<f64>,
    without_sim: Vec<f64>,
    without_theory: Vec<f64>,
}

#[wasm_bindgen]
impl SjnrView {
    #[wasm_bindgen(getter, js_name = p0Dbm)]
    pub fn p0_dbm(&self) -> Vec<f64> {
        self.p0_dbm.clone()
    }
    #[wasm_bindgen(getter, js_name = withSim)]
    pub fn with_sim(&self) -> Vec<f64> {
        self.with_sim.clone()
    }
    #[wasm_bindgen(getter, js_name = withTheory)]
    pub fn with_theory(&self) -> Vec<f64> {
        self.with_theory.clone()
    }
    #[wasm_bindgen(getter, js_name = withoutSim)]
    pub fn without_sim(&self) -> Vec<f64> {
        self.without_sim.clone()
    }
    #[wasm_bindgen(getter, js_name = withoutTheory)]
    pub fn without_theory(&self) -> Vec<f64> {
        self.without_theory.clone()
    }
}

#[wasm_bindgen(js_name = sjnrCurve)]
pub fn sjnr_curve(
    n_elements: usize,
    p_min_dbm: f64,
    p_max_dbm: f64,
    steps: usize,
    seed: u64,
) -> Result<SjnrView, JsError> {
    if steps < 2 || p_max_dbm <= p_min_dbm {
        return Err(JsError::new("need at least two increasing powers"));
    }
    let mut cfg = ScenarioConfig::default();
    cfg.sjnr_symbols = 20_000;
    let seeds = SeedStream::new(seed);
    let mut v = SjnrView {
        p0_dbm: Vec::new(),
        with_sim: Vec::new(),
        with_theory: Vec::new(),
        without_sim: Vec::new(),
        without_theory: Vec::new(),
    };
    for k in 0..steps {
        let p = p_min_dbm + (p_max_dbm - p_min_dbm) * k as f64 / (steps - 1) as f64;
        let point = seeds.derive("sjnr", k as u64);
        let with = point_scenario(&cfg, &spec(p, n_elements, 1, seed)).map_err(js)?;
        let (s, t) = sjnr_pair(&cfg, &with, &point).map_err(js)?;
        let (s0, t0) = sjnr_pair(&cfg, &with.without_dris(), &point).map_err(js)?;
        v.p0_dbm.push(p);
        v.with_sim.push(s);
        v.with_theory.push(t);
        v.without_sim.push(s0);
        v.without_theory.push(t0);
    }
    Ok(v)
}
