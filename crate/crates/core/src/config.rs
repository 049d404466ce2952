//! Experiment configuration: `section.key = value` lines, `#` comments.
//!
//! Every key has a default, so an empty file is a complete configuration.
//! Lists are comma separated; points are `x, y, z`; path-loss entries are a
//! tag (`los` or `nlos`) optionally followed by intercept and slope in dB.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::channel::{
    dbm_to_watts, noise_power_dbm, DrisProfile, Geometry, LinkFading, LinkKind, PathLoss, Point3,
    Scenario,
};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::flow::{EnrichmentMode, TrainConfig};

type ProfileLists = (Vec<f64>, Vec<f64>, Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BobPlacement {
    /// Bob sits at the annulus center.
    Center,
    /// Bob is dropped uniformly in the annulus once per sweep point.
    Sampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub geometry: Geometry,
    pub bob_placement: BobPlacement,
    pub links: LinkFading,
    pub dris: DrisProfile,
    pub bandwidth_hz: f64,
    /// Transmit powers of the power sweep, dBm.
    pub sweep_dbm: Vec<f64>,
    /// Powers at which the element and sample sweeps run, dBm.
    pub fixed_dbm: Vec<f64>,
    /// Power used by `train` and `eval`, dBm.
    pub train_dbm: f64,
    pub detector: DetectorConfig,
    /// Symbols per coherence interval (M).
    pub symbols: u32,
    /// Unlabeled training statistics per fit (T_w).
    pub train_size: usize,
    /// Evaluation statistics per hypothesis.
    pub eval_size: usize,
    /// Bob symbols per SJNR estimate.
    pub sjnr_symbols: usize,
    pub flow: TrainConfig,
    pub seed: u64,
    pub csv_path: String,
    pub model_path: String,
    pub sweep_elements: Vec<usize>,
    pub sweep_samples: Vec<u32>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            bob_placement: BobPlacement::Center,
            links: LinkFading::default(),
            dris: DrisProfile::one_bit_default(),
            bandwidth_hz: 180e3,
            sweep_dbm: vec![-10.0, -7.0, -4.0, -1.0, 2.0, 5.0, 8.0],
            fixed_dbm: vec![-7.0, 5.0],
            train_dbm: 5.0,
            detector: DetectorConfig::default(),
            symbols: 20,
            train_size: 20_000,
            eval_size: 100_000,
            sjnr_symbols: 200_000,
            flow: TrainConfig::default(),
            seed: 1,
            csv_path: "results.csv".into(),
            model_path: "model.maf".into(),
            sweep_elements: vec![0, 256, 512, 1024, 2048],
            sweep_samples: vec![1, 3, 5, 10, 20],
        }
    }
}

const KEYS: &[&str] = &[
    "geometry.alice",
    "geometry.willie",
    "geometry.dris_center",
    "geometry.bob_center",
    "geometry.bob_inner",
    "geometry.bob_outer",
    "geometry.bob_placement",
    "geometry.wavelength",
    "geometry.element_spacing",
    "dris.elements_h",
    "dris.elements_v",
    "dris.phases",
    "dris.amplitudes",
    "dris.probabilities",
    "fading.kappa_g",
    "fading.alice_dris",
    "fading.dris_willie",
    "fading.dris_bob",
    "fading.alice_willie",
    "fading.alice_bob",
    "power.bandwidth_hz",
    "power.sweep_dbm",
    "power.fixed_dbm",
    "power.train_dbm",
    "detector.alpha",
    "detector.rho",
    "detector.samples",
    "detector.symbols",
    "detector.threshold_samples",
    "detector.train_size",
    "detector.eval_size",
    "detector.h1_fraction",
    "detector.window",
    "detector.sjnr_symbols",
    "flow.layers",
    "flow.hidden",
    "flow.learning_rate",
    "flow.epochs",
    "flow.batch",
    "flow.enrichment",
    "flow.clip",
    "flow.beta1",
    "flow.beta2",
    "flow.eps",
    "flow.validation_fraction",
    "seeds.root",
    "output.csv",
    "output.model",
    "sweep.elements",
    "sweep.samples",
];

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("expected a number, got {v:?}"))?;
    if !x.is_finite() {
        return Err(format!("{v:?} is not finite"));
    }
    Ok(x)
}

fn parse_int<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("expected a non-negative integer, got {v:?}"))
}

fn parse_list<T>(
    v: &str,
    item: impl Fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(s.trim())).collect()
}

fn parse_point(v: &str) -> std::result::Result<Point3, String> {
    let xs = parse_list(v, parse_f64)?;
    xs.try_into()
        .map_err(|xs: Vec<f64>| format!("expected 3 coordinates, got {}", xs.len()))
}

fn positive(x: f64, what: &str) -> std::result::Result<f64, String> {
    if x > 0.0 {
        Ok(x)
    } else {
        Err(format!("{what} must be > 0"))
    }
}

fn nonzero<T: PartialEq + Default>(x: T, what: &str) -> std::result::Result<T, String> {
    if x == T::default() {
        Err(format!("{what} must be >= 1"))
    } else {
        Ok(x)
    }
}

fn parse_path_loss(v: &str) -> std::result::Result<PathLoss, String> {
    let mut parts = v.split_whitespace();
    let base = match parts.next() {
        Some("los") => PathLoss::LOS,
        Some("nlos") => PathLoss::NLOS,
        _ => return Err(format!("expected los or nlos, got {v:?}")),
    };
    let rest: Vec<&str> = parts.collect();
    match rest.as_slice() {
        [] => Ok(base),
        [a, b] => Ok(PathLoss {
            intercept_db: parse_f64(a)?,
            slope_db: parse_f64(b)?,
            ..base
        }),
        _ => Err("path loss takes a tag and optionally intercept and slope".into()),
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_list<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(", ")
}

fn fmt_path_loss(p: &PathLoss) -> String {
    let tag = match p.kind {
        LinkKind::Los => "los",
        LinkKind::Nlos => "nlos",
    };
    format!("{tag} {} {}", fmt_f64(p.intercept_db), fmt_f64(p.slope_db))
}

impl ScenarioConfig {
    /// Sets one key from its textual value. Per-key constraints are checked
    /// here; cross-key ones in [`ScenarioConfig::validate`].
    fn set(
        &mut self,
        pending: &mut Option<ProfileLists>,
        key: &str,
        v: &str,
    ) -> std::result::Result<(), String> {
        let g = &mut self.geometry;
        let d = &mut self.detector;
        let f = &mut self.flow;
        match key {
            "geometry.alice" => g.alice = parse_point(v)?,
            "geometry.willie" => g.willie = parse_point(v)?,
            "geometry.dris_center" => g.dris_center = parse_point(v)?,
            "geometry.bob_center" => g.bob.center = parse_point(v)?,
            "geometry.bob_inner" => g.bob.inner = parse_f64(v)?,
            "geometry.bob_outer" => g.bob.outer = parse_f64(v)?,
            "geometry.bob_placement" => {
                self.bob_placement = match v {
                    "center" => BobPlacement::Center,
                    "sampled" => BobPlacement::Sampled,
                    _ => return Err(format!("expected center or sampled, got {v:?}")),
                }
            }
            "geometry.wavelength" => g.wavelength = positive(parse_f64(v)?, "wavelength")?,
            "geometry.element_spacing" => {
                g.element_spacing = positive(parse_f64(v)?, "element spacing")?
            }
            "dris.elements_h" => g.elements_h = nonzero(parse_int(v)?, "dris.elements_h")?,
            "dris.elements_v" => g.elements_v = nonzero(parse_int(v)?, "dris.elements_v")?,
            "dris.phases" | "dris.amplitudes" | "dris.probabilities" => {
                let xs = parse_list(v, parse_f64)?;
                let p = &self.dris;
                let (mut ph, mut am, mut pr) = pending.take().unwrap_or_else(|| {
                    (
                        p.phases().to_vec(),
                        p.amplitudes().to_vec(),
                        p.probabilities().to_vec(),
                    )
                });
                match key {
                    "dris.phases" => ph = xs,
                    "dris.amplitudes" => am = xs,
                    _ => pr = xs,
                }
                // Lists may be resized one key at a time; only a complete
                // profile is checked, in validate().
                *pending = Some((ph, am, pr));
                return Ok(());
            }
            "fading.kappa_g" => {
                let k = parse_f64(v).or_else(|e| if v == "inf" { Ok(f64::INFINITY) } else { Err(e) })?;
                if !(k >= 0.0) {
                    return Err("kappa_g must be >= 0".into());
                }
                self.links.kappa_g = k;
            }
            "fading.alice_dris" => self.links.alice_dris = parse_path_loss(v)?,
            "fading.dris_willie" => self.links.dris_willie = parse_path_loss(v)?,
            "fading.dris_bob" => self.links.dris_bob = parse_path_loss(v)?,
            "fading.alice_willie" => self.links.alice_willie = parse_path_loss(v)?,
            "fading.alice_bob" => self.links.alice_bob = parse_path_loss(v)?,
            "power.bandwidth_hz" => self.bandwidth_hz = positive(parse_f64(v)?, "bandwidth")?,
            "power.sweep_dbm" => self.sweep_dbm = parse_list(v, parse_f64)?,
            "power.fixed_dbm" => self.fixed_dbm = parse_list(v, parse_f64)?,
            "power.train_dbm" => self.train_dbm = parse_f64(v)?,
            "detector.alpha" => d.alpha = parse_f64(v)?,
            "detector.rho" => d.rho = parse_f64(v)?,
            "detector.samples" => {
                d.samples_per_statistic = nonzero(parse_int(v)?, "detector.samples")?
            }
            "detector.symbols" => self.symbols = nonzero(parse_int(v)?, "detector.symbols")?,
            "detector.threshold_samples" => {
                d.threshold_samples = nonzero(parse_int(v)?, "detector.threshold_samples")?
            }
            "detector.train_size" => self.train_size = parse_int(v)?,
            "detector.eval_size" => {
                self.eval_size = nonzero(parse_int(v)?, "detector.eval_size")?
            }
            "detector.h1_fraction" => d.h1_fraction = parse_f64(v)?,
            "detector.window" => d.window = nonzero(parse_int(v)?, "detector.window")?,
            "detector.sjnr_symbols" => {
                self.sjnr_symbols = nonzero(parse_int(v)?, "detector.sjnr_symbols")?
            }
            "flow.layers" => f.architecture.blocks = nonzero(parse_int(v)?, "flow.layers")?,
            "flow.hidden" => {
                let h: Vec<usize> = parse_list(v, parse_int)?;
                if h.is_empty() || h.contains(&0) {
                    return Err("flow.hidden needs one or more positive widths".into());
                }
                f.architecture.hidden = h;
            }
            "flow.learning_rate" => f.learning_rate = positive(parse_f64(v)?, "learning rate")?,
            "flow.epochs" => f.epochs = nonzero(parse_int(v)?, "flow.epochs")?,
            "flow.batch" => f.batch_size = nonzero(parse_int(v)?, "flow.batch")?,
            "flow.enrichment" => {
                f.architecture.enrichment = match v {
                    "auto" => EnrichmentMode::Auto,
                    "on" => EnrichmentMode::On,
                    "off" => EnrichmentMode::Off,
                    _ => return Err(format!("expected auto, on or off, got {v:?}")),
                }
            }
            "flow.clip" => f.clip_norm = parse_f64(v)?,
            "flow.beta1" => f.beta1 = parse_f64(v)?,
            "flow.beta2" => f.beta2 = parse_f64(v)?,
            "flow.eps" => f.eps = positive(parse_f64(v)?, "eps")?,
            "flow.validation_fraction" => f.validation_fraction = parse_f64(v)?,
            "seeds.root" => self.seed = parse_int(v)?,
            "output.csv" => self.csv_path = v.to_string(),
            "output.model" => self.model_path = v.to_string(),
            "sweep.elements" => self.sweep_elements = parse_list(v, parse_int)?,
            "sweep.samples" => {
                self.sweep_samples = parse_list(v, |s| nonzero(parse_int(s)?, "sweep.samples"))?
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Cross-key constraints, each tagged with the keys it involves.
    fn violations(&self) -> Vec<(&'static [&'static str], String)> {
        let mut out: Vec<(&'static [&'static str], String)> = Vec::new();
        let mut check = |keys: &'static [&'static str], r: Result<()>| {
            if let Err(e) = r {
                out.push((keys, e.to_string()));
            }
        };
        check(
            &[
                "geometry.bob_inner",
                "geometry.bob_outer",
                "dris.elements_h",
                "dris.elements_v",
            ],
            self.geometry.validate(),
        );
        check(
            &[
                "detector.alpha",
                "detector.rho",
                "detector.h1_fraction",
                "detector.threshold_samples",
            ],
            self.detector.validate(),
        );
        check(
            &[
                "flow.learning_rate",
                "flow.beta1",
                "flow.beta2",
                "flow.validation_fraction",
            ],
            self.flow.validate(),
        );
        let n = self.detector.samples_per_statistic;
        if n > self.symbols || self.sweep_samples.iter().any(|&s| s > self.symbols) {
            out.push((
                &["detector.samples", "detector.symbols", "sweep.samples"],
                format!(
                    "samples per statistic must not exceed the {} symbols per coherence interval",
                    self.symbols
                ),
            ));
        }
        if self.train_size < 4 {
            out.push((&["detector.train_size"], "train size must be >= 4".into()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some((_, message)) => Err(Error::Config { line: 0, message }),
            None => Ok(()),
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig::default();
        let mut lines: HashMap<&str, usize> = HashMap::new();
        let mut profile_line = 0;
        let mut pending = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Config {
                    line,
                    message: format!("expected `section.key = value`, got {body:?}"),
                });
            };
            let key = key.trim();
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {key:?}"),
                });
            };
            if lines.insert(known, line).is_some() {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key {key:?}"),
                });
            }
            cfg.set(&mut pending, known, value.trim())
                .map_err(|message| Error::Config { line, message })?;
            if known.starts_with("dris.p") || known == "dris.amplitudes" {
                profile_line = line;
            }
        }
        if let Some((ph, am, pr)) = pending {
            cfg.dris = DrisProfile::new(ph, am, pr).map_err(|e| Error::Config {
                line: profile_line,
                message: e.to_string(),
            })?;
        }
        if let Some((keys, message)) = cfg.violations().into_iter().next() {
            let line = keys.iter().filter_map(|k| lines.get(k)).max().copied().unwrap_or(0);
            return Err(Error::Config { line, message });
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.geometry;
        let d = &self.detector;
        let f = &self.flow;
        let pt = |p: &Point3| fmt_list(p, |x| fmt_f64(*x));
        let vals = vec![
            pt(&g.alice),
            pt(&g.willie),
            pt(&g.dris_center),
            pt(&g.bob.center),
            fmt_f64(g.bob.inner),
            fmt_f64(g.bob.outer),
            match self.bob_placement {
                BobPlacement::Center => "center".into(),
                BobPlacement::Sampled => "sampled".into(),
            },
            fmt_f64(g.wavelength),
            fmt_f64(g.element_spacing),
            g.elements_h.to_string(),
            g.elements_v.to_string(),
            fmt_list(self.dris.phases(), |x| fmt_f64(*x)),
            fmt_list(self.dris.amplitudes(), |x| fmt_f64(*x)),
            fmt_list(self.dris.probabilities(), |x| fmt_f64(*x)),
            if self.links.kappa_g.is_infinite() {
                "inf".into()
            } else {
                fmt_f64(self.links.kappa_g)
            },
            fmt_path_loss(&self.links.alice_dris),
            fmt_path_loss(&self.links.dris_willie),
            fmt_path_loss(&self.links.dris_bob),
            fmt_path_loss(&self.links.alice_willie),
            fmt_path_loss(&self.links.alice_bob),
            fmt_f64(self.bandwidth_hz),
            fmt_list(&self.sweep_dbm, |x| fmt_f64(*x)),
            fmt_list(&self.fixed_dbm, |x| fmt_f64(*x)),
            fmt_f64(self.train_dbm),
            fmt_f64(d.alpha),
            fmt_f64(d.rho),
            d.samples_per_statistic.to_string(),
            self.symbols.to_string(),
            d.threshold_samples.to_string(),
            self.train_size.to_string(),
            self.eval_size.to_string(),
            fmt_f64(d.h1_fraction),
            d.window.to_string(),
            self.sjnr_symbols.to_string(),
            f.architecture.blocks.to_string(),
            fmt_list(&f.architecture.hidden, |x| x.to_string()),
            fmt_f64(f.learning_rate),
            f.epochs.to_string(),
            f.batch_size.to_string(),
            match f.architecture.enrichment {
                EnrichmentMode::Auto => "auto".into(),
                EnrichmentMode::On => "on".into(),
                EnrichmentMode::Off => "off".into(),
            },
            fmt_f64(f.clip_norm),
            fmt_f64(f.beta1),
            fmt_f64(f.beta2),
            fmt_f64(f.eps),
            fmt_f64(f.validation_fraction),
            self.seed.to_string(),
            self.csv_path.clone(),
            self.model_path.clone(),
            fmt_list(&self.sweep_elements, |x| x.to_string()),
            fmt_list(&self.sweep_samples, |x| x.to_string()),
        ];
        KEYS.iter().copied().zip(vals).collect()
    }

    /// Text that parses back to an identical config.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {s}");
                section = s;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn noise_power(&self) -> f64 {
        dbm_to_watts(noise_power_dbm(self.bandwidth_hz))
    }

    /// The full surface scenario at transmit power `p0_dbm`.
    pub fn scenario(&self, p0_dbm: f64) -> Result<Scenario> {
        let noise = self.noise_power();
        Scenario::new(
            self.geometry.clone(),
            Some(self.dris.clone()),
            self.links,
            dbm_to_watts(p0_dbm),
            noise,
            noise,
        )
    }
}

/// Most-square `(h, v)` with `h * v = n` and `h >= v`.
pub fn grid_for(n: usize) -> (usize, usize) {
    let mut v = (n as f64).sqrt() as usize;
    while v > 1 && n % v != 0 {
        v -= 1;
    }
    let v = v.max(1);
    (n / v, v)
}
