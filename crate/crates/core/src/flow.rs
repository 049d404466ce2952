//! Masked autoregressive flow.
//!
//! A [`FlowModel`] maps an observation `y` to a latent `z` through a fixed
//! standardization followed by a stack of [`FlowBlock`]s. Each block is an
//! affine autoregressive transform `v_t = (u_t - mu_t(u_<t)) exp(-s_t(u_<t))`
//! whose shift and log-scale come from a MADE network, optionally followed by
//! a monotone elementwise map `g(v) = v + a tanh(b v)`. Odd blocks read their
//! input in reversed order.
//!
//! Everything is written out by hand: forward pass, exact log-determinant,
//! sequential inverse, reverse-mode gradient of the average negative
//! log-likelihood, and Adam. Observations are passed as flat row-major
//! slices of `n * dim` values.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::statkit::SeedStream;

/// Bound applied to every predicted log-scale.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
/// Keeps `a * b` strictly inside (-1, 1) so `g' > 0`.
const ENRICH_LIMIT: f64 = 0.999;

const MAGIC: &[u8; 8] = b"DRISMAF\0";
const FORMAT_VERSION: u32 = 1;

/// Per-dimension affine standardization fitted on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, y: &[f64], out: &mut [f64]) {
        for (t, (o, &x)) in out.iter_mut().zip(y).enumerate() {
            *o = (x - self.mean[t]) / self.std[t];
        }
    }

    /// `sum_t log std_t`, subtracted from every log-density.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

/// Population mean and standard deviation of each dimension.
pub fn standardizer_fit(data: &[f64], dim: usize) -> Result<Standardizer> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::invalid(format!(
            "{} values do not form rows of dimension {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if n < 2 {
        return Err(Error::DegenerateData(format!(
            "need at least 2 samples to standardize, got {n}"
        )));
    }
    let mut mean = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        for t in 0..dim {
            var[t] += (row[t] - mean[t]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    if let Some(t) = std.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::DegenerateData(format!(
            "dimension {t} has zero or non-finite spread"
        )));
    }
    if mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::DegenerateData("non-finite training data".into()));
    }
    Ok(Standardizer { mean, std })
}

/// Dense layer whose weights are multiplied elementwise by a fixed 0/1 mask.
#[derive(Clone, Debug, PartialEq)]
struct MaskedLinear {
    n_in: usize,
    n_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    mask: Vec<f64>,
}

impl MaskedLinear {
    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n_out {
            let row = i * self.n_in;
            let mut acc = self.bias[i];
            for j in 0..self.n_in {
                acc += self.weight[row + j] * self.mask[row + j] * x[j];
            }
            out[i] = acc;
        }
    }

    /// Accumulates parameter gradients into `grad` (weights then biases) and,
    /// when requested, the input gradient into `g_x`.
    fn backward(&self, x: &[f64], g_pre: &[f64], grad: &mut [f64], g_x: Option<&mut [f64]>) {
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        for i in 0..self.n_out {
            let g = g_pre[i];
            gb[i] += g;
            if g == 0.0 {
                continue;
            }
            let row = i * self.n_in;
            for j in 0..self.n_in {
                gw[row + j] += g * x[j] * self.mask[row + j];
            }
        }
        if let Some(g_x) = g_x {
            for i in 0..self.n_out {
                let g = g_pre[i];
                if g == 0.0 {
                    continue;
                }
                let row = i * self.n_in;
                for j in 0..self.n_in {
                    g_x[j] += self.weight[row + j] * self.mask[row + j] * g;
                }
            }
        }
    }
}

/// Autoregressive conditioner: outputs `(mu_t, s_t)` for every dimension,
/// each a function of inputs strictly before `t` only.
#[derive(Clone, Debug, PartialEq)]
pub struct MadeNetwork {
    dim: usize,
    hidden: Vec<usize>,
    // Hidden layers followed by the output head (2 * dim outputs: mu then s).
    layers: Vec<MaskedLinear>,
}

/// Activations kept for the backward pass: the input of every layer, plus
/// the head output.
#[derive(Clone, Debug, Default)]
struct MadeTape {
    acts: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl MadeNetwork {
    fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], gen: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be >= 1"));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("MADE needs at least one non-empty hidden layer"));
        }
        // Degrees: inputs 1..=d, hidden cyclic over 1..d-1 (0 when d = 1, which
        // leaves the hidden units disconnected from the input).
        let input_deg: Vec<usize> = (1..=dim).collect();
        let hidden_deg = |k: usize| if dim == 1 { 0 } else { k % (dim - 1) + 1 };

        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev_deg = input_deg;
        for &width in hidden {
            let deg: Vec<usize> = (0..width).map(hidden_deg).collect();
            let n_in = prev_deg.len();
            let limit = (6.0 / (n_in + width) as f64).sqrt();
            let mut mask = Vec::with_capacity(width * n_in);
            let mut weight = Vec::with_capacity(width * n_in);
            for &dh in &deg {
                for &dp in &prev_deg {
                    let m = if dh >= dp { 1.0 } else { 0.0 };
                    let w: f64 = gen.gen_range(-limit..limit);
                    mask.push(m);
                    weight.push(w * m);
                }
            }
            layers.push(MaskedLinear {
                n_in,
                n_out: width,
                weight,
                bias: vec![0.0; width],
                mask,
            });
            prev_deg = deg;
        }
        // Output t (both heads) has degree t + 1 and sees hidden degree < t + 1.
        let n_in = prev_deg.len();
        let mut mask = Vec::with_capacity(2 * dim * n_in);
        for head in 0..2 * dim {
            let d_out = head % dim + 1;
            mask.extend(prev_deg.iter().map(|&dp| if d_out > dp { 1.0 } else { 0.0 }));
        }
        layers.push(MaskedLinear {
            n_in,
            n_out: 2 * dim,
            weight: vec![0.0; 2 * dim * n_in],
            bias: vec![0.0; 2 * dim],
            mask,
        });
        Ok(Self {
            dim,
            hidden: hidden.to_vec(),
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(MaskedLinear::param_count).sum()
    }

    /// True when no input reaches the outputs, so the conditioner is a
    /// constant (always the case for `dim == 1`).
    pub fn is_input_independent(&self) -> bool {
        self.layers[0].mask.iter().all(|&m| m == 0.0)
    }

    fn forward_tape(&self, u: &[f64], tape: &mut MadeTape) {
        tape.acts.resize(self.layers.len(), Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(u);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.n_out];
            layer.forward(&tape.acts[l], &mut out);
            if l < last {
                out.iter_mut().for_each(|x| *x = x.tanh());
                tape.acts[l + 1] = out;
            } else {
                tape.out = out;
            }
        }
    }

    /// Backpropagates `g_out` (gradient w.r.t. the 2d head outputs) through
    /// a recorded pass. `grad` is this network's parameter segment.
    fn backward(&self, tape: &MadeTape, g_out: &[f64], grad: &mut [f64], g_u: Option<&mut [f64]>) {
        let offsets = self.layer_offsets();
        let last = self.layers.len() - 1;
        let mut g_pre = g_out.to_vec();
        let mut g_u = g_u;
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let seg = &mut grad[offsets[l]..offsets[l] + layer.param_count()];
            if l == 0 {
                layer.backward(&tape.acts[0], &g_pre, seg, g_u.as_deref_mut());
            } else {
                let mut g_x = vec![0.0; layer.n_in];
                layer.backward(&tape.acts[l], &g_pre, seg, Some(&mut g_x));
                // acts[l] = tanh(pre of layer l-1)
                g_pre = g_x
                    .iter()
                    .zip(&tape.acts[l])
                    .map(|(g, h)| g * (1.0 - h * h))
                    .collect();
            }
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_count();
                o
            })
            .collect()
    }
}

/// Conditioner outputs `(mu, s)` for one input; `s` is the raw log-scale
/// before clamping.
pub fn made_forward(net: &MadeNetwork, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut tape = MadeTape::default();
    net.forward_tape(y, &mut tape);
    let (mu, s) = tape.out.split_at(net.dim);
    (mu.to_vec(), s.to_vec())
}

/// Elementwise monotone map `g(v) = v + a tanh(b v)` with
/// `b = softplus(raw_b)` and `a b = 0.999 tanh(raw_a)`.
#[derive(Clone, Debug, PartialEq)]
struct Enrichment {
    raw_a: Vec<f64>,
    raw_b: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct EnrichParams {
    ab: f64,
    b: f64,
}

impl Enrichment {
    fn identity(dim: usize) -> Self {
        Self {
            raw_a: vec![0.0; dim],
            raw_b: vec![0.0; dim],
        }
    }

    fn params(&self, t: usize) -> EnrichParams {
        EnrichParams {
            ab: ENRICH_LIMIT * self.raw_a[t].tanh(),
            b: softplus(self.raw_b[t]),
        }
    }
}

impl EnrichParams {
    fn apply(&self, v: f64) -> f64 {
        v + self.ab / self.b * (self.b * v).tanh()
    }

    fn log_deriv(&self, v: f64) -> f64 {
        let th = (self.b * v).tanh();
        (1.0 + self.ab * (1.0 - th * th)).ln()
    }

    /// Solves `g(v) = w`. `|g(v) - v| <= |a|`, which brackets the root.
    fn invert(&self, w: f64) -> Result<f64> {
        let a = self.ab / self.b;
        let (mut lo, mut hi) = (w - a.abs() - 1e-12, w + a.abs() + 1e-12);
        let mut v = w;
        for _ in 0..200 {
            let th = (self.b * v).tanh();
            let f = v + a * th - w;
            if f.abs() <= 1e-14 * (1.0 + w.abs()) {
                return Ok(v);
            }
            if f > 0.0 {
                hi = v;
            } else {
                lo = v;
            }
            let fp = 1.0 + self.ab * (1.0 - th * th);
            let newton = v - f / fp;
            v = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-15 * (1.0 + w.abs()) {
                return Ok(v);
            }
        }
        Err(Error::Internal(format!(
            "monotone inverse did not converge for w = {w}"
        )))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One autoregressive affine transform, optionally followed by the monotone
/// enrichment map.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBlock {
    made: MadeNetwork,
    reversed: bool,
    enrich: Option<Enrichment>,
}

/// Per-batch record of one block's forward pass.
#[derive(Debug, Default)]
struct BlockTape {
    n: usize,
    // Permuted input, pre-enrichment value, and clamped log-scale per sample.
    u: Vec<f64>,
    v: Vec<f64>,
    s: Vec<f64>,
    live: Vec<bool>,
    // One tape shared by the batch when the conditioner is input-independent.
    made: Vec<MadeTape>,
}

impl FlowBlock {
    pub fn made(&self) -> &MadeNetwork {
        &self.made
    }

    pub fn is_reversed(&self) -> bool {
        self.reversed
    }

    pub fn has_enrichment(&self) -> bool {
        self.enrich.is_some()
    }

    fn dim(&self) -> usize {
        self.made.dim
    }

    fn param_count(&self) -> usize {
        self.made.param_count() + self.enrich.as_ref().map_or(0, |_| 2 * self.dim())
    }

    fn permute(&self, x: &[f64], out: &mut [f64]) {
        if self.reversed {
            for (o, v) in out.iter_mut().zip(x.iter().rev()) {
                *o = *v;
            }
        } else {
            out.copy_from_slice(x);
        }
    }

    /// Core transform in the block's own (possibly reversed) ordering:
    /// returns the output and its log-determinant. The Jacobian of this map
    /// is lower triangular.
    pub fn forward_core(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let (mu, s_raw) = made_forward(&self.made, u);
        let mut out = vec![0.0; self.dim()];
        let mut logdet = 0.0;
        for t in 0..self.dim() {
            let s = s_raw[t].clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
            let v = (u[t] - mu[t]) * (-s).exp();
            logdet -= s;
            out[t] = match &self.enrich {
                Some(e) => {
                    let p = e.params(t);
                    logdet += p.log_deriv(v);
                    p.apply(v)
                }
                None => v,
            };
        }
        (out, logdet)
    }

    /// Forward over a batch, writing outputs in natural order and adding
    /// each sample's log-determinant into `logdet`.
    fn forward_batch(
        &self,
        x: &[f64],
        out: &mut [f64],
        logdet: &mut [f64],
        mut tape: Option<&mut BlockTape>,
    ) {
        let d = self.dim();
        let n = x.len() / d;
        let shared = self.made.is_input_independent();
        let mut made_tape = MadeTape::default();
        if shared {
            self.made.forward_tape(&vec![0.0; d], &mut made_tape);
        }
        if let Some(tp) = tape.as_deref_mut() {
            tp.n = n;
            tp.u.resize(n * d, 0.0);
            tp.v.resize(n * d, 0.0);
            tp.s.resize(n * d, 0.0);
            tp.live.resize(n * d, true);
            tp.made.clear();
        }
        let enrich: Vec<EnrichParams> = match &self.enrich {
            Some(e) => (0..d).map(|t| e.params(t)).collect(),
            None => Vec::new(),
        };
        let mut u = vec![0.0; d];
        let mut w = vec![0.0; d];
        for i in 0..n {
            self.permute(&x[i * d..(i + 1) * d], &mut u);
            if !shared {
                self.made.forward_tape(&u, &mut made_tape);
            }
            let (mu, s_raw) = made_tape.out.split_at(d);
            let mut ld = 0.0;
            for t in 0..d {
                let s = s_raw[t].clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
                let v = (u[t] - mu[t]) * (-s).exp();
                ld -= s;
                w[t] = match enrich.get(t) {
                    Some(p) => {
                        ld += p.log_deriv(v);
                        p.apply(v)
                    }
                    None => v,
                };
                if let Some(tp) = tape.as_deref_mut() {
                    tp.u[i * d + t] = u[t];
                    tp.v[i * d + t] = v;
                    tp.s[i * d + t] = s;
                    tp.live[i * d + t] = s_raw[t].abs() < LOG_SCALE_CLAMP;
                }
            }
            logdet[i] += ld;
            self.permute(&w, &mut out[i * d..(i + 1) * d]);
            if let Some(tp) = tape.as_deref_mut() {
                if !shared {
                    tp.made.push(made_tape.clone());
                }
            }
        }
        if let Some(tp) = tape {
            if shared {
                tp.made.push(made_tape);
            }
        }
    }

    /// Reverse pass. `g_out` is dL/d(output) in natural order, `c_logdet`
    /// is dL/d(logdet) (the same for every sample). Writes dL/d(input) into
    /// `g_in` and accumulates parameter gradients into `grad`.
    fn backward_batch(
        &self,
        tape: &BlockTape,
        g_out: &[f64],
        c_logdet: f64,
        g_in: &mut [f64],
        grad: &mut [f64],
    ) {
        let d = self.dim();
        let n = tape.n;
        let made_len = self.made.param_count();
        let (g_made, g_enrich) = grad.split_at_mut(made_len);
        let shared = tape.made.len() == 1 && self.made.is_input_independent();
        let enrich: Vec<EnrichParams> = match &self.enrich {
            Some(e) => (0..d).map(|t| e.params(t)).collect(),
            None => Vec::new(),
        };
        let mut g_ab = vec![0.0; d];
        let mut g_b = vec![0.0; d];
        let mut g_heads_sum = vec![0.0; 2 * d];
        let mut g_heads = vec![0.0; 2 * d];
        let mut g_w = vec![0.0; d];
        let mut g_u = vec![0.0; d];

        for i in 0..n {
            self.permute(&g_out[i * d..(i + 1) * d], &mut g_w);
            for t in 0..d {
                let k = i * d + t;
                let (v, s) = (tape.v[k], tape.s[k]);
                let g_v = match enrich.get(t) {
                    Some(p) => {
                        let th = (p.b * v).tanh();
                        let sech2 = 1.0 - th * th;
                        let gp = 1.0 + p.ab * sech2;
                        let a = p.ab / p.b;
                        // d g / d(ab), d g / d b and the matching log g' terms.
                        g_ab[t] += g_w[t] * th / p.b + c_logdet * sech2 / gp;
                        g_b[t] += g_w[t] * (-a * th / p.b + a * v * sech2)
                            + c_logdet * p.ab * (-2.0 * v * sech2 * th) / gp;
                        g_w[t] * gp + c_logdet * p.ab * (-2.0 * p.b * sech2 * th) / gp
                    }
                    None => g_w[t],
                };
                let e = (-s).exp();
                g_u[t] = g_v * e;
                g_heads[t] = -g_v * e;
                g_heads[d + t] = if tape.live[k] { -g_v * v - c_logdet } else { 0.0 };
            }
            if shared {
                for (acc, g) in g_heads_sum.iter_mut().zip(&g_heads) {
                    *acc += g;
                }
            } else {
                self.made
                    .backward(&tape.made[i], &g_heads, g_made, Some(&mut g_u));
            }
            self.permute(&g_u, &mut g_in[i * d..(i + 1) * d]);
        }
        if shared {
            self.made.backward(&tape.made[0], &g_heads_sum, g_made, None);
        }
        if let Some(e) = &self.enrich {
            for t in 0..d {
                let ta = e.raw_a[t].tanh();
                g_enrich[t] += g_ab[t] * ENRICH_LIMIT * (1.0 - ta * ta);
                g_enrich[d + t] += g_b[t] * sigmoid(e.raw_b[t]);
            }
        }
    }

    /// Sequential inverse of the core transform (block ordering).
    fn inverse_core(&self, w: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut u = vec![0.0; d];
        for t in 0..d {
            let (mu, s_raw) = made_forward(&self.made, &u);
            let s = s_raw[t].clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
            let v = match &self.enrich {
                Some(e) => e.params(t).invert(w[t])?,
                None => w[t],
            };
            u[t] = mu[t] + v * s.exp();
        }
        Ok(u)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.made.layers {
            f(&l.weight);
            f(&l.bias);
        }
        if let Some(e) = &self.enrich {
            f(&e.raw_a);
            f(&e.raw_b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.made.layers {
            f(&mut l.weight);
            f(&mut l.bias);
        }
        if let Some(e) = &mut self.enrich {
            f(&mut e.raw_a);
            f(&mut e.raw_b);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EnrichmentMode {
    /// On for one-dimensional flows, off otherwise.
    #[default]
    Auto,
    On,
    Off,
}

impl EnrichmentMode {
    pub fn resolve(self, dim: usize) -> bool {
        match self {
            EnrichmentMode::Auto => dim == 1,
            EnrichmentMode::On => true,
            EnrichmentMode::Off => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowArchitecture {
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub enrichment: EnrichmentMode,
}

impl Default for FlowArchitecture {
    fn default() -> Self {
        Self {
            blocks: 5,
            hidden: vec![64],
            enrichment: EnrichmentMode::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    blocks: Vec<FlowBlock>,
    standardizer: Standardizer,
}

impl FlowModel {
    /// Fresh model: Glorot-uniform hidden weights, zero output heads and
    /// identity enrichment, so the flow starts as pure standardization.
    pub fn new(arch: &FlowArchitecture, standardizer: Standardizer, seed: u64) -> Result<Self> {
        let dim = standardizer.dim();
        if arch.blocks == 0 {
            return Err(Error::invalid("flow needs at least one block"));
        }
        let enrich = arch.enrichment.resolve(dim);
        let seeds = SeedStream::new(seed);
        let blocks = (0..arch.blocks)
            .map(|k| {
                let mut gen = seeds.rng("flow-init", k as u64);
                Ok(FlowBlock {
                    made: MadeNetwork::new(dim, &arch.hidden, &mut gen)?,
                    reversed: k % 2 == 1,
                    enrich: enrich.then(|| Enrichment::identity(dim)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            blocks,
            standardizer,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn architecture(&self) -> FlowArchitecture {
        FlowArchitecture {
            blocks: self.blocks.len(),
            hidden: self.blocks[0].made.hidden.clone(),
            enrichment: if self.blocks[0].enrich.is_some() {
                EnrichmentMode::On
            } else {
                EnrichmentMode::Off
            },
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(FlowBlock::param_count).sum()
    }

    /// All trainable parameters in declaration order: per block, each
    /// layer's weights then biases, then enrichment `raw_a`, `raw_b`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.blocks {
            b.visit_params(&mut |s| out.extend_from_slice(s));
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Internal(format!(
                "parameter vector has {} entries, model has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for b in &mut self.blocks {
            b.visit_params_mut(&mut |s| {
                s.copy_from_slice(&params[off..off + s.len()]);
                off += s.len();
            });
        }
        Ok(())
    }

    /// Adds uniform noise in `[-scale, scale]` to every unmasked parameter.
    /// Used to move away from the identity initialization in tests.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        let mut gen = SeedStream::new(seed).rng("flow-jitter", 0);
        for b in &mut self.blocks {
            for l in &mut b.made.layers {
                for (w, m) in l.weight.iter_mut().zip(&l.mask) {
                    *w += m * gen.gen_range(-scale..=scale);
                }
                for x in &mut l.bias {
                    *x += gen.gen_range(-scale..=scale);
                }
            }
            if let Some(e) = &mut b.enrich {
                for x in e.raw_a.iter_mut().chain(e.raw_b.iter_mut()) {
                    *x += gen.gen_range(-scale..=scale);
                }
            }
        }
    }

    /// Switches on one masked connection of a hidden layer. Only meant for
    /// exercising the autoregressive-property check.
    #[doc(hidden)]
    pub fn corrupt_mask(&mut self, block: usize, value: f64) {
        let layer = &mut self.blocks[block].made.layers[0];
        if let Some(k) = layer.mask.iter().position(|&m| m == 0.0) {
            layer.mask[k] = 1.0;
            layer.weight[k] = value;
        }
        let head = self.blocks[block].made.layers.last_mut().expect("head layer");
        for (w, m) in head.weight.iter_mut().zip(&head.mask) {
            if *w == 0.0 && *m == 1.0 {
                *w = value;
            }
        }
    }

    /// `z` and `log|det dz/dy|`, standardization included.
    pub fn forward(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let (z, ld) = self.forward_batch(y);
        (z, ld[0])
    }

    fn forward_batch(&self, ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = ys.len() / self.dim;
        let mut x = vec![0.0; ys.len()];
        for (row, out) in ys.chunks_exact(self.dim).zip(x.chunks_exact_mut(self.dim)) {
            self.standardizer.apply(row, out);
        }
        let mut logdet = vec![-self.standardizer.log_scale(); n];
        let mut next = vec![0.0; ys.len()];
        for b in &self.blocks {
            b.forward_batch(&x, &mut next, &mut logdet, None);
            std::mem::swap(&mut x, &mut next);
        }
        (x, logdet)
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut x = z.to_vec();
        let mut buf = vec![0.0; d];
        for b in self.blocks.iter().rev() {
            b.permute(&x, &mut buf);
            let u = b.inverse_core(&buf)?;
            b.permute(&u, &mut x);
        }
        Ok(x
            .iter()
            .enumerate()
            .map(|(t, v)| v * self.standardizer.std[t] + self.standardizer.mean[t])
            .collect())
    }

    /// Exact log-density of one observation in original units.
    pub fn log_density(&self, y: &[f64]) -> f64 {
        self.log_density_batch(y)[0]
    }

    /// Log-densities of `ys.len() / dim` observations.
    pub fn log_density_batch(&self, ys: &[f64]) -> Vec<f64> {
        let (z, logdet) = self.forward_batch(ys);
        z.chunks_exact(self.dim)
            .zip(logdet)
            .map(|(zr, ld)| base_logpdf(zr) + ld)
            .collect()
    }

    /// Average NLL over the batch and its gradient w.r.t. every parameter.
    fn nll_and_grad(&self, batch: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let n = batch.len() / d;
        let mut x = vec![0.0; batch.len()];
        for (row, out) in batch.chunks_exact(d).zip(x.chunks_exact_mut(d)) {
            self.standardizer.apply(row, out);
        }
        let mut logdet = vec![-self.standardizer.log_scale(); n];
        let mut tapes: Vec<BlockTape> = Vec::with_capacity(self.blocks.len());
        let mut inputs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut out = vec![0.0; x.len()];
            let mut tape = BlockTape::default();
            b.forward_batch(&x, &mut out, &mut logdet, Some(&mut tape));
            tapes.push(tape);
            inputs.push(std::mem::replace(&mut x, out));
        }
        let inv_n = 1.0 / n as f64;
        let loss = -x
            .chunks_exact(d)
            .zip(&logdet)
            .map(|(z, ld)| base_logpdf(z) + ld)
            .sum::<f64>()
            * inv_n;

        let mut grad = vec![0.0; self.param_count()];
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut off = 0;
        for b in &self.blocks {
            offsets.push(off);
            off += b.param_count();
        }
        let mut g = x.iter().map(|z| z * inv_n).collect::<Vec<_>>();
        let mut g_in = vec![0.0; g.len()];
        for (k, b) in self.blocks.iter().enumerate().rev() {
            let seg = &mut grad[offsets[k]..offsets[k] + b.param_count()];
            b.backward_batch(&tapes[k], &g, -inv_n, &mut g_in, seg);
            std::mem::swap(&mut g, &mut g_in);
        }
        (loss, grad)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.architecture();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(arch.blocks as u32).to_le_bytes());
        out.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
        for w in &arch.hidden {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.push(u8::from(arch.enrichment == EnrichmentMode::On));
        for v in self.standardizer.mean.iter().chain(&self.standardizer.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = rd.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = rd.u32()? as usize;
        let blocks = rd.u32()? as usize;
        let n_hidden = rd.u32()? as usize;
        if dim == 0 || blocks == 0 || n_hidden == 0 || n_hidden > 64 {
            return Err(Error::Format("implausible header".into()));
        }
        let hidden = (0..n_hidden)
            .map(|_| rd.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let enrichment = match rd.take(1)?[0] {
            0 => EnrichmentMode::Off,
            1 => EnrichmentMode::On,
            x => return Err(Error::Format(format!("bad enrichment flag {x}"))),
        };
        let mean = (0..dim).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..dim).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
        let arch = FlowArchitecture {
            blocks,
            hidden,
            enrichment,
        };
        let mut model = FlowModel::new(&arch, Standardizer { mean, std }, 0)?;
        let params = (0..model.param_count())
            .map(|_| rd.f64())
            .collect::<Result<Vec<_>>>()?;
        if rd.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - rd.pos
            )));
        }
        model.set_params(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated model file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn base_logpdf(z: &[f64]) -> f64 {
    z.iter().map(|v| -0.5 * v * v - HALF_LN_2PI).sum()
}

pub fn flow_forward(model: &FlowModel, y: &[f64]) -> (Vec<f64>, f64) {
    model.forward(y)
}

pub fn flow_inverse(model: &FlowModel, z: &[f64]) -> Result<Vec<f64>> {
    model.inverse(z)
}

/// Average negative log-likelihood of a flat batch.
pub fn nll(model: &FlowModel, batch: &[f64]) -> Result<f64> {
    check_batch(model, batch)?;
    let lp = model.log_density_batch(batch);
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Reverse-mode gradient of [`nll`], laid out like [`FlowModel::params`].
pub fn grad_nll(model: &FlowModel, batch: &[f64]) -> Result<Vec<f64>> {
    check_batch(model, batch)?;
    Ok(model.nll_and_grad(batch).1)
}

fn check_batch(model: &FlowModel, batch: &[f64]) -> Result<()> {
    if batch.is_empty() || batch.len() % model.dim != 0 {
        return Err(Error::invalid(format!(
            "batch of {} values is not a non-empty set of {}-vectors",
            batch.len(),
            model.dim
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub architecture: FlowArchitecture,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; non-positive disables clipping.
    pub clip_norm: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: FlowArchitecture::default(),
            learning_rate: 2e-4,
            epochs: 200,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Internal(format!(
            "Adam shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - config.beta1.powi(state.t as i32);
    let bc2 = 1.0 - config.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

fn clip(grad: &mut [f64], bound: f64) {
    if bound <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > bound {
        let k = bound / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
}

/// Maximum-likelihood fit of a flow to flat `dim`-dimensional data.
///
/// Fits the standardizer on all of `data`, holds out
/// `validation_fraction` of the rows, and returns the parameters with the
/// lowest held-out NLL seen at the end of any epoch.
pub fn train(data: &[f64], dim: usize, config: &TrainConfig) -> Result<FlowModel> {
    config.validate()?;
    let standardizer = standardizer_fit(data, dim)?;
    let seeds = SeedStream::new(config.seed);
    let mut model = FlowModel::new(&config.architecture, standardizer, config.seed)?;

    let n = data.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds.rng("split", 0));
    let n_val = if config.validation_fraction > 0.0 {
        ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let gather = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
            .collect()
    };
    let val = gather(val_idx);
    let mut train_idx = train_idx.to_vec();
    let batch_size = config.batch_size.min(train_idx.len());

    let mut params = model.params();
    let mut adam = AdamState::new(params.len());
    let mut best = (f64::INFINITY, params.clone());
    let mut batch = Vec::with_capacity(batch_size * dim);

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut seeds.rng("epoch", epoch as u64));
        for chunk in train_idx.chunks(batch_size) {
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(&data[i * dim..(i + 1) * dim]);
            }
            let (_, mut grad) = model.nll_and_grad(&batch);
            if grad.iter().any(|g| !g.is_finite()) {
                continue;
            }
            clip(&mut grad, config.clip_norm);
            adam_step(&mut params, &grad, &mut adam, config)?;
            model.set_params(&params)?;
        }
        let score = if val.is_empty() {
            nll(&model, &gather(&train_idx))?
        } else {
            nll(&model, &val)?
        };
        if score < best.0 {
            best = (score, params.clone());
        }
    }
    model.set_params(&best.1)?;
    log::debug!(
        "flow trained on {n} rows, best held-out NLL {:.5}",
        best.0
    );
    Ok(model)
}

/// Differential entropy of a normal with standard deviation `sigma`.
pub fn normal_entropy(sigma: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * sigma * sigma).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_arch(enrich: EnrichmentMode) -> FlowArchitecture {
        FlowArchitecture {
            blocks: 3,
            hidden: vec![8],
            enrichment: enrich,
        }
    }

    fn random_model(dim: usize, enrich: EnrichmentMode, seed: u64) -> FlowModel {
        let std = Standardizer {
            mean: (0..dim).map(|t| 0.3 * t as f64 - 0.2).collect(),
            std: (0..dim).map(|t| 1.0 + 0.25 * t as f64).collect(),
        };
        let mut m = FlowModel::new(&small_arch(enrich), std, seed).unwrap();
        m.jitter(seed + 100, 0.3);
        m
    }

    fn random_batch(dim: usize, n: usize, seed: u64) -> Vec<f64> {
        let mut g = SeedStream::new(seed).rng("batch", 0);
        (0..n * dim)
            .map(|_| StandardNormal.sample(&mut g))
            .collect()
    }

    #[test]
    fn standardizer_examples() {
        let s = standardizer_fit(&[0.0, 2.0], 1).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
        assert!(matches!(
            standardizer_fit(&[3.0; 10], 1),
            Err(Error::DegenerateData(_))
        ));
        assert!(standardizer_fit(&[1.0], 1).is_err());

        let data: Vec<f64> = random_batch(2, 500, 1).iter().map(|x| 5.0 * x + 3.0).collect();
        let s = standardizer_fit(&data, 2).unwrap();
        let mut out = vec![0.0; data.len()];
        for (r, o) in data.chunks_exact(2).zip(out.chunks_exact_mut(2)) {
            s.apply(r, o);
        }
        let again = standardizer_fit(&out, 2).unwrap();
        for t in 0..2 {
            assert!(again.mean[t].abs() < 1e-12);
            assert!((again.std[t] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_at_initialization() {
        let std = Standardizer {
            mean: vec![1.0, -2.0],
            std: vec![2.0, 0.5],
        };
        let m = FlowModel::new(&FlowArchitecture::default(), std.clone(), 3).unwrap();
        for b in m.blocks() {
            let (mu, s) = made_forward(b.made(), &[0.7, -1.3]);
            assert_eq!(mu, vec![0.0, 0.0]);
            assert_eq!(s, vec![0.0, 0.0]);
        }
        let y = [3.0, -1.0];
        let (z, ld) = m.forward(&y);
        assert_eq!(z, vec![1.0, 2.0]);
        assert!((ld + std.log_scale()).abs() < 1e-15);
        assert_eq!(m.inverse(&[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(m.inverse(&z).unwrap(), y.to_vec());
    }

    #[test]
    fn one_dimensional_conditioner_is_constant() {
        let m = random_model(1, EnrichmentMode::On, 5);
        for b in m.blocks() {
            assert!(b.made().is_input_independent());
            let a = made_forward(b.made(), &[-4.0]);
            let c = made_forward(b.made(), &[9.0]);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn autoregressive_property_by_perturbation() {
        for dim in [4, 6] {
            let m = random_model(dim, EnrichmentMode::Off, 17);
            for b in m.blocks() {
                let base = random_batch(dim, 1, 2);
                let (mu0, s0) = made_forward(b.made(), &base);
                for j in 0..dim {
                    let mut y = base.clone();
                    y[j] += 0.731;
                    let (mu, s) = made_forward(b.made(), &y);
                    for t in 0..=j {
                        assert_eq!(mu[t], mu0[t], "mu_{t} depends on y_{j}");
                        assert_eq!(s[t], s0[t], "s_{t} depends on y_{j}");
                    }
                }
            }
        }
    }

    #[test]
    fn corrupted_mask_breaks_autoregression() {
        let mut m = random_model(4, EnrichmentMode::Off, 23);
        m.corrupt_mask(0, 0.9);
        let b = &m.blocks()[0];
        let base = random_batch(4, 1, 3);
        let (mu0, s0) = made_forward(b.made(), &base);
        let leaked = (0..4).any(|j| {
            let mut y = base.clone();
            y[j] += 0.5;
            let (mu, s) = made_forward(b.made(), &y);
            (0..=j).any(|t| mu[t] != mu0[t] || s[t] != s0[t])
        });
        assert!(leaked);
    }

    #[test]
    fn core_jacobian_is_triangular() {
        let m = random_model(4, EnrichmentMode::On, 31);
        let u = random_batch(4, 1, 4);
        let h = 1e-6;
        for b in m.blocks() {
            for src in 0..4 {
                let mut up = u.clone();
                up[src] += h;
                let (a, _) = b.forward_core(&u);
                let (c, _) = b.forward_core(&up);
                for t in 0..src {
                    assert_eq!(a[t], c[t], "dz_{t}/du_{src} != 0");
                }
            }
        }
    }

    fn fd_logdet(m: &FlowModel, y: &[f64]) -> f64 {
        let h = 1e-6;
        let d = y.len();
        let mut jac = vec![0.0; d * d];
        for u in 0..d {
            let mut yp = y.to_vec();
            let mut ym = y.to_vec();
            yp[u] += h;
            ym[u] -= h;
            let (zp, _) = m.forward(&yp);
            let (zm, _) = m.forward(&ym);
            for t in 0..d {
                jac[t * d + u] = (zp[t] - zm[t]) / (2.0 * h);
            }
        }
        assert_eq!(d, 2);
        (jac[0] * jac[3] - jac[1] * jac[2]).abs().ln()
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        for seed in 0..3 {
            for enrich in [EnrichmentMode::Off, EnrichmentMode::On] {
                let m = random_model(2, enrich, 40 + seed);
                let y = random_batch(2, 1, seed);
                let (_, ld) = m.forward(&y);
                let fd = fd_logdet(&m, &y);
                assert!(
                    ((ld - fd) / ld.abs().max(1e-3)).abs() < 1e-5,
                    "{ld} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        for dim in [1, 4] {
            let m = random_model(dim, EnrichmentMode::On, 60 + dim as u64);
            let mut g = SeedStream::new(8).rng("rt", dim as u64);
            for _ in 0..1000 {
                let y: Vec<f64> = (0..dim).map(|_| g.gen_range(-10.0..10.0)).collect();
                let (z, _) = m.forward(&y);
                let back = m.inverse(&z).unwrap();
                for (a, b) in y.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn enrichment_inverse_handles_extremes() {
        let p = EnrichParams { ab: -0.998, b: 3.0 };
        for &w in &[-50.0, -1.0, -1e-9, 0.0, 0.3, 12.0] {
            let v = p.invert(w).unwrap();
            assert!((p.apply(v) - w).abs() < 1e-12);
        }
    }

    fn fd_check(m: &FlowModel, batch: &[f64]) {
        let grad = grad_nll(m, batch).unwrap();
        let base = m.params();
        let h = 1e-5;
        let mut probe = m.clone();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + h;
            probe.set_params(&p).unwrap();
            let up = nll(&probe, batch).unwrap();
            p[k] = base[k] - h;
            probe.set_params(&p).unwrap();
            let down = nll(&probe, batch).unwrap();
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[k]).abs();
            assert!(
                err <= 1e-7 || err <= 1e-4 * fd.abs().max(grad[k].abs()),
                "param {k}: analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for dim in [1, 4] {
            for seed in 0..3 {
                let m = random_model(dim, EnrichmentMode::On, 200 + seed);
                fd_check(&m, &random_batch(dim, 7, seed));
            }
        }
        let m = random_model(3, EnrichmentMode::Off, 300);
        fd_check(&m, &random_batch(3, 5, 9));
    }

    #[test]
    fn masked_weights_get_zero_gradient() {
        let m = random_model(4, EnrichmentMode::Off, 5);
        let grad = grad_nll(&m, &random_batch(4, 9, 1)).unwrap();
        let mut off = 0;
        for b in m.blocks() {
            for l in &b.made().layers {
                for (k, mask) in l.mask.iter().enumerate() {
                    if *mask == 0.0 {
                        assert_eq!(grad[off + k], 0.0);
                    }
                }
                off += l.param_count();
            }
            off += b.param_count() - b.made().param_count();
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_single_gradients() {
        let m = random_model(4, EnrichmentMode::On, 77);
        let batch = random_batch(4, 2, 5);
        let g = grad_nll(&m, &batch).unwrap();
        let g1 = grad_nll(&m, &batch[..4]).unwrap();
        let g2 = grad_nll(&m, &batch[4..]).unwrap();
        for k in 0..g.len() {
            assert!((g[k] - 0.5 * (g1[k] + g2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_normal_nll_is_entropy() {
        let m = FlowModel::new(&small_arch(EnrichmentMode::Off), Standardizer::identity(1), 0)
            .unwrap();
        let data = random_batch(1, 200_000, 12);
        let v = nll(&m, &data).unwrap();
        assert!((v - normal_entropy(1.0)).abs() < 0.01, "{v}");
        assert!((normal_entropy(1.0) - 1.41894).abs() < 1e-5);
    }

    #[test]
    fn shifting_data_leaves_nll_unchanged() {
        let data: Vec<f64> = random_batch(1, 2000, 2).iter().map(|x| x * x).collect();
        let shifted: Vec<f64> = data.iter().map(|x| x + 1234.5).collect();
        let a = FlowModel::new(&small_arch(EnrichmentMode::On), standardizer_fit(&data, 1).unwrap(), 1)
            .unwrap();
        let b = FlowModel::new(
            &small_arch(EnrichmentMode::On),
            standardizer_fit(&shifted, 1).unwrap(),
            1,
        )
        .unwrap();
        let (x, y) = (nll(&a, &data).unwrap(), nll(&b, &shifted).unwrap());
        assert!((x - y).abs() < 1e-9);
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);

        let mut p = vec![0.0, 0.0, 0.0];
        let mut st = AdamState::new(3);
        let g = [0.3, -2.0, 1e-3];
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        // Step one: m_hat = g, v_hat = g^2, update = -lr g / (|g| + eps).
        for (x, gi) in p.iter().zip(g) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-15);
        }

        let mut a = vec![0.2, 0.4];
        let mut b = a.clone();
        let mut sa = AdamState::new(2);
        let mut sb = sa.clone();
        adam_step(&mut a, &[0.1, -0.3], &mut sa, &cfg).unwrap();
        adam_step(&mut b, &[0.1, -0.3], &mut sb, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);

        assert!(adam_step(&mut a, &[0.1], &mut sa, &cfg).is_err());
    }

    #[test]
    fn one_adam_step_descends() {
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        let mut wins = 0;
        for seed in 0..100 {
            let mut m = random_model(1, EnrichmentMode::On, 1000 + seed);
            let batch: Vec<f64> = random_batch(1, 64, seed).iter().map(|x| x.exp()).collect();
            let before = nll(&m, &batch).unwrap();
            let grad = grad_nll(&m, &batch).unwrap();
            let mut p = m.params();
            let mut st = AdamState::new(p.len());
            adam_step(&mut p, &grad, &mut st, &cfg).unwrap();
            m.set_params(&p).unwrap();
            if nll(&m, &batch).unwrap() <= before {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}/100");
    }

    #[test]
    fn serialization_reproduces_log_densities() {
        let m = random_model(3, EnrichmentMode::On, 9);
        let bytes = m.to_bytes();
        let back = FlowModel::from_bytes(&bytes).unwrap();
        let ys = random_batch(3, 50, 4);
        let a = m.log_density_batch(&ys);
        let b = back.log_density_batch(&ys);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(&bytes[..8], MAGIC);
        assert!(FlowModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FlowModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<f64> = random_batch(1, 600, 3).iter().map(|x| x.exp()).collect();
        let cfg = TrainConfig {
            architecture: small_arch(EnrichmentMode::Auto),
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&data, 1, &cfg).unwrap();
        let b = train(&data, 1, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(matches!(
            train(&[1.0; 100], 1, &cfg),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn training_reduces_nll() {
        let data: Vec<f64> = random_batch(1, 4000, 6).iter().map(|x| x.exp()).collect();
        let cfg = TrainConfig {
            architecture: FlowArchitecture {
                blocks: 5,
                hidden: vec![16],
                enrichment: EnrichmentMode::Auto,
            },
            epochs: 30,
            learning_rate: 1e-2,
            seed: 1,
            ..TrainConfig::default()
        };
        let init = FlowModel::new(&cfg.architecture, standardizer_fit(&data, 1).unwrap(), 1).unwrap();
        let m = train(&data, 1, &cfg).unwrap();
        let (a, b) = (nll(&init, &data).unwrap(), nll(&m, &data).unwrap());
        assert!(b < a - 0.1, "{a} -> {b}");
    }
}
