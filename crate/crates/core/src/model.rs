//! Pre-norm causal decoder with optional memory branches.
//!
//! Each layer is `[memory branch] -> attention -> feedforward`, where the
//! memory branch (when present) acts on the layer input before attention.
//! Attention uses rotary position encoding; the feedforward is a dense GELU
//! MLP. Gradients are computed by hand.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LngramError, Result};
use crate::lngram::{LngramCache, LngramConfig, LngramParams, LngramStepState};
use crate::memory::TableResidency;
use crate::numerics::{gelu, gelu_grad, inv_rms, rmsnorm_backward_row, rmsnorm_rows, Real};
use crate::params::{ParamCounts, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// 1-based layers that carry a memory branch.
    pub insert_layers: Vec<usize>,
    /// Branch settings shared by every insertion layer.
    pub lngram: LngramConfig,
    pub norm_eps: f64,
    pub rope_base: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            ffn_dim: 512,
            vocab_size: 256,
            max_seq_len: 128,
            insert_layers: vec![1, 3],
            lngram: LngramConfig::default(),
            norm_eps: crate::numerics::DEFAULT_EPS,
            rope_base: 10_000.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim;
        if self.layers == 0 || d == 0 || self.heads == 0 || self.ffn_dim == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(LngramError::Config("layers, model_dim, heads, ffn_dim, vocab_size and max_seq_len must be positive".into()));
        }
        if !d.is_multiple_of(self.heads) || !(d / self.heads).is_multiple_of(2) {
            return Err(LngramError::Config(format!("model_dim {d} must split into {} heads of even width", self.heads)));
        }
        let mut seen = vec![false; self.layers + 1];
        for &l in &self.insert_layers {
            if l == 0 || l > self.layers {
                return Err(LngramError::Config(format!("insertion layer {l} is outside 1..={}", self.layers)));
            }
            if std::mem::replace(&mut seen[l], true) {
                return Err(LngramError::Config(format!("insertion layer {l} listed twice")));
            }
        }
        if !self.insert_layers.is_empty() {
            self.lngram.validate(d)?;
        }
        if !(self.norm_eps >= 0.0) || !(self.rope_base > 1.0) {
            return Err(LngramError::Config("norm_eps must be non-negative and rope_base above 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// The same shape with no memory branches.
    pub fn without_lngram(&self) -> Self {
        Self { insert_layers: Vec::new(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Real> {
    pub attn_norm: Array2<F>,
    /// `d x 3d`, columns ordered `[q | k | v]`.
    pub w_qkv: Array2<F>,
    pub w_o: Array2<F>,
    pub mlp_norm: Array2<F>,
    pub w_1: Array2<F>,
    pub b_1: Array2<F>,
    pub w_2: Array2<F>,
    pub b_2: Array2<F>,
    pub lngram: Option<LngramParams<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<F: Real> {
    pub config: DecoderConfig,
    pub embed: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Array2<F>,
    pub head: Array2<F>,
}

fn normal<F: Real, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(rng)))
}

impl<F: Real> Decoder<F> {
    pub fn init<R: Rng>(config: &DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.model_dim, config.ffn_dim, config.vocab_size);
        let std = 0.02;
        let out_std = std / (2.0 * config.layers as f64).sqrt();
        let embed = normal(v, d, std, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            let w_qkv = normal(d, 3 * d, std, rng);
            let w_o = normal(d, d, out_std, rng);
            let w_1 = normal(d, f, std, rng);
            let w_2 = normal(f, d, out_std, rng);
            let lngram = if config.insert_layers.contains(&l) { Some(LngramParams::init(d, &config.lngram, rng)?) } else { None };
            layers.push(LayerParams {
                attn_norm: Array2::ones((1, d)),
                w_qkv,
                w_o,
                mlp_norm: Array2::ones((1, d)),
                w_1,
                b_1: Array2::zeros((1, f)),
                w_2,
                b_2: Array2::zeros((1, d)),
                lngram,
            });
        }
        let head = normal(d, v, std, rng);
        Ok(Self { config: config.clone(), embed, layers, final_norm: Array2::ones((1, d)), head })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    /// Zeroes every table, readout bias and conv kernel.
    pub fn make_branches_inert(&mut self) {
        for layer in &mut self.layers {
            if let Some(l) = layer.lngram.as_mut() {
                l.make_inert();
            }
        }
    }

    /// The backbone alone, sharing every non-branch parameter.
    pub fn without_lngram(&self) -> Self {
        let mut out = self.clone();
        out.config = self.config.without_lngram();
        for layer in &mut out.layers {
            layer.lngram = None;
        }
        out
    }

    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Array2<F>)> {
        let bb = ParamGroup::Backbone;
        let mut out = vec![("embed".to_string(), bb, &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer{}", i + 1);
            out.push((format!("{p}.attn_norm"), bb, &l.attn_norm));
            out.push((format!("{p}.w_qkv"), bb, &l.w_qkv));
            out.push((format!("{p}.w_o"), bb, &l.w_o));
            out.push((format!("{p}.mlp_norm"), bb, &l.mlp_norm));
            out.push((format!("{p}.w_1"), bb, &l.w_1));
            out.push((format!("{p}.b_1"), bb, &l.b_1));
            out.push((format!("{p}.w_2"), bb, &l.w_2));
            out.push((format!("{p}.b_2"), bb, &l.b_2));
            if let Some(m) = &l.lngram {
                out.extend(m.tensors().into_iter().map(|(n, g, t)| (format!("{p}.lngram.{n}"), g, t)));
            }
        }
        out.push(("final_norm".into(), bb, &self.final_norm));
        out.push(("head".into(), bb, &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamGroup, &mut Array2<F>)> {
        let bb = ParamGroup::Backbone;
        let mut out = vec![("embed".to_string(), bb, &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layer{}", i + 1);
            out.push((format!("{p}.attn_norm"), bb, &mut l.attn_norm));
            out.push((format!("{p}.w_qkv"), bb, &mut l.w_qkv));
            out.push((format!("{p}.w_o"), bb, &mut l.w_o));
            out.push((format!("{p}.mlp_norm"), bb, &mut l.mlp_norm));
            out.push((format!("{p}.w_1"), bb, &mut l.w_1));
            out.push((format!("{p}.b_1"), bb, &mut l.b_1));
            out.push((format!("{p}.w_2"), bb, &mut l.w_2));
            out.push((format!("{p}.b_2"), bb, &mut l.b_2));
            if let Some(m) = l.lngram.as_mut() {
                out.extend(m.tensors_mut().into_iter().map(|(n, g, t)| (format!("{p}.lngram.{n}"), g, t)));
            }
        }
        out.push(("final_norm".into(), bb, &mut self.final_norm));
        out.push(("head".into(), bb, &mut self.head));
        out
    }

    pub fn parameter_counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (_, g, t) in self.tensors() {
            c.add(g, t.len());
        }
        c
    }

    fn check_tokens(&self, tokens: &[u32], seq_len: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(LngramError::Input("empty token sequence".into()));
        }
        if seq_len == 0 || !tokens.len().is_multiple_of(seq_len) {
            return Err(dim_err!("{} tokens are not whole sequences of length {seq_len}", tokens.len()));
        }
        if seq_len > self.config.max_seq_len {
            return Err(LngramError::Input(format!("sequence length {seq_len} exceeds max_seq_len {}", self.config.max_seq_len)));
        }
        let v = self.config.vocab_size as u32;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(LngramError::Input(format!("token {bad} outside vocabulary of size {v}")));
        }
        Ok(())
    }

    /// Batched forward over `tokens.len() / seq_len` sequences; returns logits
    /// `(B * T) x V` and the activations needed for [`Self::backward`].
    pub fn forward(&self, tokens: &[u32], seq_len: usize) -> Result<(Array2<F>, DecoderCache<F>)> {
        self.forward_inner(tokens, seq_len, false)
    }

    fn forward_inner(&self, tokens: &[u32], seq_len: usize, keep_states: bool) -> Result<(Array2<F>, DecoderCache<F>)> {
        self.check_tokens(tokens, seq_len)?;
        let cfg = &self.config;
        let eps = F::lit(cfg.norm_eps);
        let rope = Rope::new(seq_len, cfg.head_dim(), cfg.rope_base);
        let mut x = self.embed.select(Axis(0), &tokens.iter().map(|&t| t as usize).collect::<Vec<_>>());
        let mut states = Vec::new();
        if keep_states {
            states.push(x.clone());
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let lngram = match &layer.lngram {
                Some(m) => {
                    let (y, c) = m.forward(x.view(), seq_len)?;
                    x = y;
                    Some(c)
                }
                None => None,
            };
            let (attn_normed, attn_inv) = rmsnorm_rows(x.view(), eps);
            let a = &attn_normed * &layer.attn_norm;
            let mut qkv = a.dot(&layer.w_qkv);
            rope.apply(&mut qkv, cfg.heads, 2, false);
            let (att, probs) = attention_forward(&qkv, seq_len, cfg.heads);
            let x_mlp = &x + &att.dot(&layer.w_o);
            let (mlp_normed, mlp_inv) = rmsnorm_rows(x_mlp.view(), eps);
            let m = &mlp_normed * &layer.mlp_norm;
            let h1 = m.dot(&layer.w_1) + &layer.b_1;
            let g = h1.mapv(gelu);
            let out = &x_mlp + &g.dot(&layer.w_2) + &layer.b_2;
            caches.push(LayerCache { lngram, attn_normed, attn_inv, qkv, probs, att, mlp_normed, mlp_inv, h1, g });
            x = out;
            if keep_states {
                states.push(x.clone());
            }
        }
        let (final_normed, final_inv) = rmsnorm_rows(x.view(), eps);
        let logits = (&final_normed * &self.final_norm).dot(&self.head);
        Ok((logits, DecoderCache { seq_len, tokens: tokens.to_vec(), layers: caches, final_normed, final_inv, states }))
    }

    /// Logits `T x V` for a single sequence.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Array2<F>> {
        Ok(self.forward(tokens, tokens.len())?.0)
    }

    /// Every layer's output (embedding output first) plus the final logits.
    pub fn forward_with_hidden(&self, tokens: &[u32]) -> Result<LayerStates<F>> {
        let (logits, cache) = self.forward_inner(tokens, tokens.len(), true)?;
        Ok(LayerStates { states: cache.states, logits })
    }

    /// Applies the final normalization and head to any hidden state.
    pub fn project_to_vocab(&self, h: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if h.ncols() != self.config.model_dim {
            return Err(LngramError::Input(format!("hidden state has {} columns, model has {}", h.ncols(), self.config.model_dim)));
        }
        let (normed, _) = rmsnorm_rows(h, F::lit(self.config.norm_eps));
        Ok((&normed * &self.final_norm).dot(&self.head))
    }

    /// Mean next-token cross-entropy over all positions.
    pub fn loss(&self, inputs: &[u32], targets: &[u32], seq_len: usize) -> Result<f64> {
        let (logits, _) = self.forward(inputs, seq_len)?;
        Ok(cross_entropy(&logits, targets, self.config.vocab_size)?.0)
    }

    /// Loss and gradients; gradients are accumulated into `grads`.
    pub fn loss_and_grad(&self, inputs: &[u32], targets: &[u32], seq_len: usize, grads: &mut Self) -> Result<f64> {
        let (logits, cache) = self.forward(inputs, seq_len)?;
        let (loss, d_logits) = cross_entropy(&logits, targets, self.config.vocab_size)?;
        self.backward(&cache, d_logits.view(), grads)?;
        Ok(loss)
    }

    pub fn backward(&self, cache: &DecoderCache<F>, d_logits: ArrayView2<'_, F>, grads: &mut Self) -> Result<()> {
        let cfg = &self.config;
        let seq_len = cache.seq_len;
        let rope = Rope::new(seq_len, cfg.head_dim(), cfg.rope_base);

        let fin = &cache.final_normed * &self.final_norm;
        grads.head += &fin.t().dot(&d_logits);
        let d_fin = d_logits.dot(&self.head.t());
        let mut dx = Array2::zeros(d_fin.raw_dim());
        norm_backward(&cache.final_normed, &cache.final_inv, &self.final_norm, &d_fin, &mut grads.final_norm, &mut dx);

        for ((layer, lc), lg) in self.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
            // feedforward
            lg.w_2 += &lc.g.t().dot(&dx);
            lg.b_2 += &dx.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut dh1 = dx.dot(&layer.w_2.t());
            ndarray::Zip::from(&mut dh1).and(&lc.h1).for_each(|g, &h| *g *= gelu_grad(h));
            let m = &lc.mlp_normed * &layer.mlp_norm;
            lg.w_1 += &m.t().dot(&dh1);
            lg.b_1 += &dh1.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dm = dh1.dot(&layer.w_1.t());
            let mut d_mlp_in = dx;
            norm_backward(&lc.mlp_normed, &lc.mlp_inv, &layer.mlp_norm, &dm, &mut lg.mlp_norm, &mut d_mlp_in);

            // attention
            lg.w_o += &lc.att.t().dot(&d_mlp_in);
            let d_att = d_mlp_in.dot(&layer.w_o.t());
            let mut d_qkv = attention_backward(&lc.qkv, &lc.probs, &d_att, seq_len, cfg.heads);
            rope.apply(&mut d_qkv, cfg.heads, 2, true);
            let a = &lc.attn_normed * &layer.attn_norm;
            lg.w_qkv += &a.t().dot(&d_qkv);
            let da = d_qkv.dot(&layer.w_qkv.t());
            let mut d_in = d_mlp_in;
            norm_backward(&lc.attn_normed, &lc.attn_inv, &layer.attn_norm, &da, &mut lg.attn_norm, &mut d_in);

            dx = match (&layer.lngram, &lc.lngram, lg.lngram.as_mut()) {
                (Some(m), Some(c), Some(g)) => m.backward(c, d_in.view(), g)?,
                (None, None, None) => d_in,
                _ => return Err(LngramError::Usage("gradient buffers do not match the model layout".into())),
            };
        }
        for (p, &t) in cache.tokens.iter().enumerate() {
            let mut row = grads.embed.row_mut(t as usize);
            row += &dx.row(p);
        }
        Ok(())
    }

    /// Gate trace of the branch at 1-based `layer` for sequence `seq` of the
    /// cached batch.
    pub fn gate_trace(&self, cache: &DecoderCache<F>, layer: usize, seq: usize) -> Result<crate::readout::GateTrace> {
        let lc = cache
            .layers
            .get(layer.wrapping_sub(1))
            .and_then(|l| l.lngram.as_ref())
            .ok_or_else(|| LngramError::Input(format!("layer {layer} has no memory branch")))?;
        Ok(lc.gate_trace(seq))
    }
}

/// Returns the mean loss and `dL/dlogits`.
pub fn cross_entropy<F: Real>(logits: &Array2<F>, targets: &[u32], vocab: usize) -> Result<(f64, Array2<F>)> {
    if logits.nrows() != targets.len() || logits.ncols() != vocab {
        return Err(dim_err!("logits {:?} do not match {} targets over {vocab} classes", logits.dim(), targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(LngramError::Input(format!("target {bad} outside vocabulary")));
    }
    let n = F::lit(targets.len() as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0f64;
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let mut z = F::zero();
        for (o, &x) in g.iter_mut().zip(row.iter()) {
            *o = (x - max).exp();
            z += *o;
        }
        total += (z.ln() + max - row[t as usize]).as_f64();
        for o in g.iter_mut() {
            *o /= z * n;
        }
        g[t as usize] -= F::one() / n;
    }
    Ok((total / targets.len() as f64, grad))
}

fn norm_backward<F: Real>(normed: &Array2<F>, inv: &[F], gain: &Array2<F>, dy: &Array2<F>, d_gain: &mut Array2<F>, dx: &mut Array2<F>) {
    let gain = gain.row(0);
    let mut dg = d_gain.row_mut(0);
    let mut scaled = vec![F::zero(); gain.len()];
    for (p, &iv) in inv.iter().enumerate() {
        let y = normed.row(p);
        let g = dy.row(p);
        for c in 0..scaled.len() {
            dg[c] += g[c] * y[c];
            scaled[c] = g[c] * gain[c];
        }
        let mut out = dx.row_mut(p);
        rmsnorm_backward_row(y.as_slice().unwrap(), iv, &scaled, out.as_slice_mut().unwrap());
    }
}

/// Rotary position tables for one sequence length.
struct Rope<F: Real> {
    cos: Array2<F>,
    sin: Array2<F>,
}

impl<F: Real> Rope<F> {
    fn new(seq_len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let angle = |t: usize, i: usize| t as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
        Self {
            cos: Array2::from_shape_fn((seq_len, half), |(t, i)| F::lit(angle(t, i).cos())),
            sin: Array2::from_shape_fn((seq_len, half), |(t, i)| F::lit(angle(t, i).sin())),
        }
    }

    /// Rotates the first `blocks` d-wide column blocks (queries and keys) of
    /// every row in place; `inverse` applies the transpose rotation.
    fn apply(&self, x: &mut Array2<F>, heads: usize, blocks: usize, inverse: bool) {
        let seq_len = self.cos.nrows();
        let half = self.cos.ncols();
        let hd = 2 * half;
        for (p, mut row) in x.rows_mut().into_iter().enumerate() {
            let t = p % seq_len;
            for h in 0..blocks * heads {
                let base = h * hd;
                for i in 0..half {
                    let (c, mut s) = (self.cos[[t, i]], self.sin[[t, i]]);
                    if inverse {
                        s = -s;
                    }
                    let (a, b) = (row[base + 2 * i], row[base + 2 * i + 1]);
                    row[base + 2 * i] = a * c - b * s;
                    row[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

fn causal_softmax_rows<F: Real>(scores: &mut Array2<F>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row.slice(s![..=i]).iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let mut z = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                z += *v;
            } else {
                *v = F::zero();
            }
        }
        row.slice_mut(s![..=i]).mapv_inplace(|v| v / z);
    }
}

fn head_cols(block: usize, h: usize, d: usize, hd: usize) -> std::ops::Range<usize> {
    block * d + h * hd..block * d + (h + 1) * hd
}

fn attention_forward<F: Real>(qkv: &Array2<F>, seq_len: usize, heads: usize) -> (Array2<F>, Vec<Array2<F>>) {
    let rows = qkv.nrows();
    let d = qkv.ncols() / 3;
    let hd = d / heads;
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let mut out = Array2::zeros((rows, d));
    let mut probs = Vec::with_capacity(rows / seq_len * heads);
    for start in (0..rows).step_by(seq_len) {
        let r = start..start + seq_len;
        for h in 0..heads {
            let q = qkv.slice(s![r.clone(), head_cols(0, h, d, hd)]);
            let k = qkv.slice(s![r.clone(), head_cols(1, h, d, hd)]);
            let v = qkv.slice(s![r.clone(), head_cols(2, h, d, hd)]);
            let mut sc = q.dot(&k.t()) * scale;
            causal_softmax_rows(&mut sc);
            out.slice_mut(s![r.clone(), head_cols(0, h, d, hd)]).assign(&sc.dot(&v));
            probs.push(sc);
        }
    }
    (out, probs)
}

fn attention_backward<F: Real>(qkv: &Array2<F>, probs: &[Array2<F>], d_att: &Array2<F>, seq_len: usize, heads: usize) -> Array2<F> {
    let rows = qkv.nrows();
    let d = qkv.ncols() / 3;
    let hd = d / heads;
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let mut d_qkv = Array2::zeros(qkv.raw_dim());
    let mut pi = probs.iter();
    for start in (0..rows).step_by(seq_len) {
        let r = start..start + seq_len;
        for h in 0..heads {
            let p = pi.next().expect("one probability block per head");
            let q = qkv.slice(s![r.clone(), head_cols(0, h, d, hd)]);
            let k = qkv.slice(s![r.clone(), head_cols(1, h, d, hd)]);
            let v = qkv.slice(s![r.clone(), head_cols(2, h, d, hd)]);
            let d_o = d_att.slice(s![r.clone(), head_cols(0, h, d, hd)]);
            d_qkv.slice_mut(s![r.clone(), head_cols(2, h, d, hd)]).assign(&p.t().dot(&d_o));
            let mut ds = d_o.dot(&v.t());
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let m: F = row.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                ndarray::Zip::from(&mut row).and(&prow).for_each(|g, &pp| *g = pp * (*g - m) * scale);
            }
            d_qkv.slice_mut(s![r.clone(), head_cols(0, h, d, hd)]).assign(&ds.dot(&k));
            d_qkv.slice_mut(s![r.clone(), head_cols(1, h, d, hd)]).assign(&ds.t().dot(&q));
        }
    }
    d_qkv
}

#[derive(Debug, Clone)]
struct LayerCache<F: Real> {
    lngram: Option<LngramCache<F>>,
    attn_normed: Array2<F>,
    attn_inv: Vec<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    att: Array2<F>,
    mlp_normed: Array2<F>,
    mlp_inv: Vec<F>,
    h1: Array2<F>,
    g: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<F: Real> {
    seq_len: usize,
    tokens: Vec<u32>,
    layers: Vec<LayerCache<F>>,
    final_normed: Array2<F>,
    final_inv: Vec<F>,
    states: Vec<Array2<F>>,
}

impl<F: Real> DecoderCache<F> {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sequences(&self) -> usize {
        self.tokens.len() / self.seq_len
    }
}

/// Per-layer hidden states `H^(0..=L)` (each `T x d`) and the final logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates<F: Real> {
    pub states: Vec<Array2<F>>,
    pub logits: Array2<F>,
}

const STATES_MAGIC: &[u8; 4] = b"LNHS";

impl<F: Real> LayerStates<F> {
    /// Binary dump: magic, `u32` count/rows/cols, then little-endian f32 rows.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (rows, cols) = self.states.first().map(|s| s.dim()).unwrap_or((0, 0));
        w.write_all(STATES_MAGIC)?;
        for v in [self.states.len(), rows, cols] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for s in &self.states {
            for &x in s.iter() {
                w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a dump written by [`Self::write_to`]; logits are not stored.
    pub fn read_states<Rd: Read>(mut r: Rd) -> Result<Vec<Array2<F>>> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| LngramError::Input("hidden-state dump is truncated".into()))?;
        if &magic != STATES_MAGIC {
            return Err(LngramError::Input("not a hidden-state dump".into()));
        }
        let mut word = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut word).map_err(|_| LngramError::Input("hidden-state dump is truncated".into()))?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let [count, rows, cols] = dims;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut word).map_err(|_| LngramError::Input("hidden-state dump is truncated".into()))?;
                data.push(F::lit(f32::from_le_bytes(word) as f64));
            }
            out.push(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"));
        }
        Ok(out)
    }
}

/// Token-by-token decoding with a key/value cache and fixed-size scratch
/// buffers allocated once for `capacity` positions.
pub struct DecodeSession<'a, F: Real> {
    model: &'a Decoder<F>,
    residency: TableResidency,
    capacity: usize,
    position: usize,
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
    branch_states: Vec<Option<LngramStepState<F>>>,
    x: Array1<F>,
    normed: Array1<F>,
    qkv: Array1<F>,
    att: Array1<F>,
    hidden: Array1<F>,
    ffn_out: Array1<F>,
    scores: Vec<F>,
    logits: Array1<F>,
}

impl<'a, F: Real> DecodeSession<'a, F> {
    pub fn new(model: &'a Decoder<F>, capacity: usize, residency: TableResidency) -> Self {
        let cfg = &model.config;
        let d = cfg.model_dim;
        Self {
            model,
            residency,
            capacity,
            position: 0,
            keys: (0..cfg.layers).map(|_| Array2::zeros((capacity, d))).collect(),
            values: (0..cfg.layers).map(|_| Array2::zeros((capacity, d))).collect(),
            branch_states: model.layers.iter().map(|l| l.lngram.as_ref().map(|m| m.step_state())).collect(),
            x: Array1::zeros(d),
            normed: Array1::zeros(d),
            qkv: Array1::zeros(3 * d),
            att: Array1::zeros(d),
            hidden: Array1::zeros(cfg.ffn_dim),
            ffn_out: Array1::zeros(d),
            scores: vec![F::zero(); capacity],
            logits: Array1::zeros(cfg.vocab_size),
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Bytes of cache state written per step: one key and one value row per
    /// layer, stored in place in the preallocated cache.
    pub fn state_bytes_per_step(&self) -> usize {
        2 * self.keys.len() * self.model.config.model_dim * std::mem::size_of::<F>()
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<&[F]> {
        let model = self.model;
        let cfg = &model.config;
        if token as usize >= cfg.vocab_size {
            return Err(LngramError::Input(format!("token {token} outside vocabulary")));
        }
        if self.position >= self.capacity {
            return Err(LngramError::Capacity(format!("decode cache holds {} positions", self.capacity)));
        }
        let (d, heads) = (cfg.model_dim, cfg.heads);
        let hd = cfg.head_dim();
        let eps = F::lit(cfg.norm_eps);
        let t = self.position;
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        self.x.assign(&model.embed.row(token as usize));
        for (li, layer) in model.layers.iter().enumerate() {
            if let (Some(m), Some(state)) = (&layer.lngram, self.branch_states[li].as_mut()) {
                m.step(self.x.as_slice_mut().unwrap(), state, self.residency);
            }
            norm_into(&self.x, &layer.attn_norm, eps, &mut self.normed);
            ndarray::linalg::general_mat_vec_mul(F::one(), &layer.w_qkv.t(), &self.normed, F::zero(), &mut self.qkv);
            rope_row(self.qkv.as_slice_mut().unwrap(), t, heads, hd, cfg.rope_base);
            self.keys[li].row_mut(t).assign(&self.qkv.slice(s![d..2 * d]));
            self.values[li].row_mut(t).assign(&self.qkv.slice(s![2 * d..]));
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let q = self.qkv.slice(s![cols.clone()]);
                let mut max = F::neg_infinity();
                for j in 0..=t {
                    let sc = q.dot(&self.keys[li].slice(s![j, cols.clone()])) * scale;
                    self.scores[j] = sc;
                    max = max.max(sc);
                }
                let mut z = F::zero();
                for sc in &mut self.scores[..=t] {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let mut out = self.att.slice_mut(s![cols.clone()]);
                out.fill(F::zero());
                for j in 0..=t {
                    out.scaled_add(self.scores[j] / z, &self.values[li].slice(s![j, cols.clone()]));
                }
            }
            ndarray::linalg::general_mat_vec_mul(F::one(), &layer.w_o.t(), &self.att, F::one(), &mut self.x);
            norm_into(&self.x, &layer.mlp_norm, eps, &mut self.normed);
            self.hidden.assign(&layer.b_1.row(0));
            ndarray::linalg::general_mat_vec_mul(F::one(), &layer.w_1.t(), &self.normed, F::one(), &mut self.hidden);
            self.hidden.mapv_inplace(gelu);
            self.ffn_out.assign(&layer.b_2.row(0));
            ndarray::linalg::general_mat_vec_mul(F::one(), &layer.w_2.t(), &self.hidden, F::one(), &mut self.ffn_out);
            self.x += &self.ffn_out;
        }
        norm_into(&self.x, &model.final_norm, eps, &mut self.normed);
        ndarray::linalg::general_mat_vec_mul(F::one(), &model.head.t(), &self.normed, F::zero(), &mut self.logits);
        self.position += 1;
        Ok(self.logits.as_slice().unwrap())
    }
}

fn norm_into<F: Real>(x: &Array1<F>, gain: &Array2<F>, eps: F, out: &mut Array1<F>) {
    let inv = inv_rms(x.as_slice().unwrap(), eps);
    ndarray::Zip::from(out).and(x).and(gain.row(0)).for_each(|o, &v, &g| *o = v * inv * g);
}

fn rope_row<F: Real>(qkv: &mut [F], t: usize, heads: usize, hd: usize, base: f64) {
    let half = hd / 2;
    for h in 0..2 * heads {
        let off = h * hd;
        for i in 0..half {
            let angle = t as f64 * base.powf(-2.0 * i as f64 / hd as f64);
            let (c, s) = (F::lit(angle.cos()), F::lit(angle.sin()));
            let (a, b) = (qkv[off + 2 * i], qkv[off + 2 * i + 1]);
            qkv[off + 2 * i] = a * c - b * s;
            qkv[off + 2 * i + 1] = a * s + b * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(insert: Vec<usize>) -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 12,
            vocab_size: 11,
            max_seq_len: 16,
            insert_layers: insert,
            lngram: LngramConfig { bits: 2, memory_dim: 3, ..Default::default() },
            ..Default::default()
        }
    }

    fn randomized(cfg: &DecoderConfig, seed: u64) -> Decoder<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Decoder::init(cfg, &mut rng).unwrap();
        for (_, _, t) in m.tensors_mut() {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        m
    }

    fn tokens(seed: u64, n: usize, v: u32) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..v)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config(vec![1, 2]).validate().is_ok());
        assert!(tiny_config(vec![0]).validate().is_err());
        assert!(tiny_config(vec![3]).validate().is_err());
        assert!(tiny_config(vec![1, 1]).validate().is_err());
        assert!(DecoderConfig { heads: 3, ..tiny_config(vec![]) }.validate().is_err());
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let m = randomized(&tiny_config(vec![1]), 1);
        assert!(matches!(m.forward_logits(&[1, 11]), Err(LngramError::Input(_))));
    }

    #[test]
    fn inert_branches_match_baseline_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Decoder::<f32>::init(&tiny_config(vec![1, 2]), &mut rng).unwrap();
        m.make_branches_inert();
        let toks = tokens(2, 16, 11);
        assert_eq!(m.forward_logits(&toks).unwrap(), m.without_lngram().forward_logits(&toks).unwrap());
    }

    #[test]
    fn logits_are_causal() {
        let m = randomized(&tiny_config(vec![1, 2]), 3);
        let toks = tokens(3, 16, 11);
        let base = m.forward_logits(&toks).unwrap();
        for t in 0..16 {
            let mut alt = toks.clone();
            alt[t] = (alt[t] + 5) % 11;
            let out = m.forward_logits(&alt).unwrap();
            for q in 0..t {
                assert_eq!(out.row(q), base.row(q), "t={t} q={q}");
            }
        }
    }

    #[test]
    fn hidden_states_reproduce_logits() {
        let m = randomized(&tiny_config(vec![1]), 4);
        let toks = tokens(4, 10, 11);
        let st = m.forward_with_hidden(&toks).unwrap();
        assert_eq!(st.states.len(), 3);
        assert!(st.states.iter().all(|s| s.iter().all(|v| v.is_finite())));
        assert_eq!(m.project_to_vocab(st.states[2].view()).unwrap(), m.forward_logits(&toks).unwrap());
        assert_eq!(st.logits, m.forward_logits(&toks).unwrap());
    }

    #[test]
    fn states_dump_round_trips() {
        let m = randomized(&tiny_config(vec![1]), 5);
        let st = m.forward_with_hidden(&tokens(5, 6, 11)).unwrap();
        let mut buf = Vec::new();
        st.write_to(&mut buf).unwrap();
        let back = LayerStates::<f64>::read_states(buf.as_slice()).unwrap();
        for (a, b) in st.states.iter().zip(&back) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
        assert!(LayerStates::<f64>::read_states(&buf[..buf.len() - 2]).is_err());
    }

    #[test]
    fn parameter_counts_sum_over_groups() {
        let m = randomized(&tiny_config(vec![1, 2]), 6);
        let c = m.parameter_counts();
        let total: usize = m.tensors().iter().map(|(_, _, t)| t.len()).sum();
        assert_eq!(c.total(), total);
        assert!(c.table > 0 && c.readout > 0 && c.codec > 0);
        assert_eq!(m.without_lngram().parameter_counts().total(), c.backbone);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Array2::<f64>::zeros((3, 256));
        let (loss, _) = cross_entropy(&logits, &[0, 7, 255], 256).unwrap();
        assert!((loss - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        for insert in [vec![], vec![1, 2]] {
            let mut m = randomized(&tiny_config(insert.clone()), 7);
            // flat tables silence the routing term so finite differences see
            // the whole gradient
            let mut rng = ChaCha8Rng::seed_from_u64(70);
            for l in m.layers.iter_mut().filter_map(|l| l.lngram.as_mut()) {
                for t in l.bank.groups.iter_mut().flatten() {
                    let row: Vec<f64> = (0..t.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                    for mut r in t.entries.rows_mut() {
                        r.assign(&ndarray::ArrayView1::from(&row));
                    }
                }
            }
            let inputs = tokens(8, 12, 11);
            let targets = tokens(9, 12, 11);
            let mut grads = m.zeros_like();
            m.loss_and_grad(&inputs, &targets, 6, &mut grads).unwrap();
            let names: Vec<String> = m.tensors().into_iter().map(|(n, _, _)| n).collect();
            for name in names {
                let base = m.tensors().into_iter().find(|(n, _, _)| *n == name).unwrap().2.clone();
                let analytic = grads.tensors().into_iter().find(|(n, _, _)| *n == name).unwrap().2.clone();
                let flat: Vec<f64> = base.iter().copied().collect();
                let fd = finite_difference_grad(
                    |z| {
                        let mut q = m.clone();
                        let t = q.tensors_mut().into_iter().find(|(n, _, _)| *n == name).unwrap().2;
                        t.as_slice_mut().unwrap().copy_from_slice(z);
                        q.loss(&inputs, &targets, 6).unwrap()
                    },
                    &flat,
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(&fd, analytic.as_slice().unwrap(), 1e-7);
                assert!(err < 1e-5, "{name}: {err}");
            }
        }
    }

    #[test]
    fn decode_session_matches_full_forward() {
        let m = randomized(&tiny_config(vec![1, 2]), 10);
        let toks = tokens(10, 14, 11);
        let full = m.forward_logits(&toks).unwrap();
        for residency in [TableResidency::InCore, TableResidency::HostGather] {
            let mut sess = DecodeSession::new(&m, 16, residency);
            for (t, &tok) in toks.iter().enumerate() {
                let logits = sess.step(tok).unwrap();
                for (a, b) in logits.iter().zip(full.row(t)) {
                    assert!((a - b).abs() < 1e-10, "t={t}");
                }
            }
        }
        let mut sess = DecodeSession::new(&m, 1, TableResidency::InCore);
        sess.step(0).unwrap();
        assert!(matches!(sess.step(0), Err(LngramError::Capacity(_))));
    }
}
