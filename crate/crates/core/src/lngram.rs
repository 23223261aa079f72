//! The full memory branch: discretize, retrieve, gate or fuse, refine, and
//! add back to the layer input.
//!
//! Activations are batched as `(B * T) x d` row stacks; retrieval windows and
//! the causal convolution never cross a sequence boundary.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{check_route_layout, discretize_full, pack_routes, CodecParams, SymbolGrid};
use crate::error::{dim_err, LngramError, Result};
use crate::memory::{address_unchecked, retrieve_batch, validate_orders, BranchRetrieval, MultiTableBank, TableResidency};
use crate::numerics::{
    depthwise_causal_conv, depthwise_causal_conv_backward, dot, inv_rms, rmsnorm_backward_row, rmsnorm_rows, sigmoid, silu,
    silu_grad, softmax_into, Real,
};
use crate::params::ParamGroup;
use crate::readout::{GateMode, GateRow, GateTrace, ReadoutParams, ReadoutShape};
use crate::surrogate::{backprop_routing, RoutingForward, SurrogateConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LngramConfig {
    /// Bits per route `M`; routes `R = d / M`, symbols per route `K = 2^M`.
    pub bits: usize,
    pub orders: Vec<usize>,
    pub subtables: usize,
    /// Table entry width `d_m`.
    pub memory_dim: usize,
    pub gate: GateMode,
    pub fusion_temperature: f64,
    pub conv_width: usize,
    /// Defaults to the largest order.
    pub dilation: Option<usize>,
    pub eps: f64,
    /// Keep branches whose window is incomplete (zero retrieval, so the key
    /// and value reduce to the biases) instead of skipping them.
    pub literal_invalid_branches: bool,
    /// Route chunk for streamed retrieval and routing backward; 0 = all.
    pub route_block: usize,
    pub surrogate: SurrogateConfig,
}

impl Default for LngramConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            orders: vec![2, 3],
            subtables: 1,
            memory_dim: 16,
            gate: GateMode::Sigmoid,
            fusion_temperature: 1.0,
            conv_width: 4,
            dilation: None,
            eps: crate::numerics::DEFAULT_EPS,
            literal_invalid_branches: false,
            route_block: 0,
            surrogate: SurrogateConfig::default(),
        }
    }
}

impl LngramConfig {
    pub fn validate(&self, model_dim: usize) -> Result<()> {
        check_route_layout(model_dim, self.bits)?;
        validate_orders(&self.orders)?;
        if self.subtables == 0 {
            return Err(LngramError::Config("subtables must be at least 1".into()));
        }
        if self.gate == GateMode::Sigmoid && self.subtables != 1 {
            return Err(LngramError::Config("sigmoid gating is the single-table mode; use softmax fusion for several subtables".into()));
        }
        if self.memory_dim == 0 || self.conv_width == 0 || self.dilation == Some(0) {
            return Err(LngramError::Config("memory_dim, conv_width and dilation must be positive".into()));
        }
        if !(self.fusion_temperature > 0.0) || !(self.eps >= 0.0) {
            return Err(LngramError::Config("fusion temperature must be positive and eps non-negative".into()));
        }
        self.surrogate.validate()
    }

    pub fn effective_dilation(&self) -> usize {
        self.dilation.unwrap_or_else(|| self.orders.iter().copied().max().unwrap_or(1))
    }

    pub fn max_order(&self) -> usize {
        self.orders.iter().copied().max().unwrap_or(1)
    }

    fn block(&self, routes: usize) -> usize {
        if self.route_block == 0 {
            routes
        } else {
            self.route_block
        }
    }
}

/// Parameters of one memory branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LngramParams<F: Real> {
    pub config: LngramConfig,
    pub codec: CodecParams<F>,
    pub bank: MultiTableBank<F>,
    pub readout: ReadoutParams<F>,
}

impl<F: Real> LngramParams<F> {
    pub fn init<R: Rng>(model_dim: usize, config: &LngramConfig, rng: &mut R) -> Result<Self> {
        config.validate(model_dim)?;
        let codec = CodecParams::init(model_dim, config.bits, config.subtables, config.eps, rng)?;
        let routes = model_dim / config.bits;
        let bank = MultiTableBank::init(&config.orders, config.subtables, routes, 1 << config.bits, config.memory_dim, rng)?;
        let shape = ReadoutShape {
            model_dim,
            retrieval_dim: routes * config.memory_dim,
            orders: config.orders.len(),
            conv_width: config.conv_width,
            dilation: config.effective_dilation(),
        };
        let readout = ReadoutParams::init(shape, config.gate, config.fusion_temperature, config.eps, rng)?;
        Ok(Self { config: config.clone(), codec, bank, readout })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            codec: self.codec.zeros_like(),
            bank: self.bank.zeros_like(),
            readout: self.readout.zeros_like(),
        }
    }

    /// Zero tables, readout biases and conv kernels: the branch becomes the
    /// identity on its input.
    pub fn make_inert(&mut self) {
        for t in self.bank.groups.iter_mut().flatten() {
            t.entries.fill(F::zero());
        }
        for b in self.readout.b_k.iter_mut().chain(self.readout.b_v.iter_mut()) {
            b.fill(F::zero());
        }
        self.readout.conv.fill(F::zero());
    }

    pub fn model_dim(&self) -> usize {
        self.codec.model_dim()
    }

    pub fn routes(&self) -> usize {
        self.codec.routes()
    }

    /// Named tensors with their parameter group.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Array2<F>)> {
        let mut out = Vec::new();
        for (s, w) in self.codec.projections.iter().enumerate() {
            out.push((format!("codec.w_q.{s}"), ParamGroup::Codec, w));
        }
        for (s, group) in self.bank.groups.iter().enumerate() {
            for t in group {
                out.push((format!("table.{s}.n{}", t.order()), ParamGroup::Table, &t.entries));
            }
        }
        let r = &self.readout;
        for i in 0..r.w_k.len() {
            out.push((format!("readout.w_k.{i}"), ParamGroup::Readout, &r.w_k[i]));
            out.push((format!("readout.b_k.{i}"), ParamGroup::Readout, &r.b_k[i]));
            out.push((format!("readout.w_v.{i}"), ParamGroup::Readout, &r.w_v[i]));
            out.push((format!("readout.b_v.{i}"), ParamGroup::Readout, &r.b_v[i]));
        }
        out.push(("readout.conv".into(), ParamGroup::Readout, &r.conv));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamGroup, &mut Array2<F>)> {
        let mut out = Vec::new();
        for (s, w) in self.codec.projections.iter_mut().enumerate() {
            out.push((format!("codec.w_q.{s}"), ParamGroup::Codec, w));
        }
        for (s, group) in self.bank.groups.iter_mut().enumerate() {
            for t in group {
                let name = format!("table.{s}.n{}", t.order());
                out.push((name, ParamGroup::Table, &mut t.entries));
            }
        }
        let r = &mut self.readout;
        for (i, (((wk, bk), wv), bv)) in r.w_k.iter_mut().zip(r.b_k.iter_mut()).zip(r.w_v.iter_mut()).zip(r.b_v.iter_mut()).enumerate() {
            out.push((format!("readout.w_k.{i}"), ParamGroup::Readout, wk));
            out.push((format!("readout.b_k.{i}"), ParamGroup::Readout, bk));
            out.push((format!("readout.w_v.{i}"), ParamGroup::Readout, wv));
            out.push((format!("readout.b_v.{i}"), ParamGroup::Readout, bv));
        }
        out.push(("readout.conv".into(), ParamGroup::Readout, &mut r.conv));
        out
    }

    /// Forward over `h.nrows() / seq_len` stacked sequences. Returns `H + Y`.
    pub fn forward(&self, h: ArrayView2<'_, F>, seq_len: usize) -> Result<(Array2<F>, LngramCache<F>)> {
        let d = self.model_dim();
        if h.ncols() != d {
            return Err(dim_err!("input has {} channels, branch expects {d}", h.ncols()));
        }
        let positions = h.nrows();
        if seq_len == 0 || !positions.is_multiple_of(seq_len) {
            return Err(dim_err!("{positions} rows are not whole sequences of length {seq_len}"));
        }
        let cfg = &self.config;
        let disc = discretize_full(h, &self.codec)?;
        let symbols = pack_routes(&disc.bits, cfg.bits)?;
        let retrievals = retrieve_batch(&symbols, &self.bank, seq_len, cfg.block(self.routes()))?;

        let norm_d = F::lit(d as f64).sqrt();
        let eps = self.readout.eps;
        let n_orders = cfg.orders.len();
        let mut branches = Vec::with_capacity(retrievals.len());
        for (b, ret) in retrievals.iter().enumerate() {
            let slot = self.readout.slot(b % n_orders);
            let keys = ret.values.dot(&self.readout.w_k[slot]) + &self.readout.b_k[slot];
            let values = ret.values.dot(&self.readout.w_v[slot]) + &self.readout.b_v[slot];
            let (keys_normed, key_inv) = rmsnorm_rows(keys.view(), eps);
            let active: Vec<bool> = ret.valid.iter().map(|&v| v || cfg.literal_invalid_branches).collect();
            let mut scores = vec![F::zero(); positions];
            for p in (0..positions).filter(|&p| active[p]) {
                let hn = disc.normalized.row(p);
                let kn = keys_normed.row(p);
                scores[p] = dot(hn.as_slice().expect("contiguous"), kn.as_slice().expect("contiguous")) / norm_d;
            }
            branches.push(BranchState { keys_normed, key_inv, values, active, scores, gates: vec![F::zero(); positions] });
        }

        let mut fused = Array2::zeros((positions, d));
        let mut buf_s = Vec::with_capacity(branches.len());
        let mut buf_w = Vec::with_capacity(branches.len());
        let mut idx = Vec::with_capacity(branches.len());
        for p in 0..positions {
            match self.readout.mode {
                GateMode::Sigmoid => {
                    for br in branches.iter_mut().filter(|br| br.active[p]) {
                        br.gates[p] = sigmoid(br.scores[p]);
                    }
                }
                GateMode::Softmax => {
                    buf_s.clear();
                    idx.clear();
                    for (b, br) in branches.iter().enumerate().filter(|(_, br)| br.active[p]) {
                        buf_s.push(br.scores[p]);
                        idx.push(b);
                    }
                    if idx.is_empty() {
                        continue;
                    }
                    buf_w.resize(idx.len(), F::zero());
                    softmax_into(&buf_s, self.readout.tau_f, &mut buf_w);
                    for (&b, &w) in idx.iter().zip(&buf_w) {
                        branches[b].gates[p] = w;
                    }
                }
            }
            let mut out = fused.row_mut(p);
            for br in branches.iter().filter(|br| br.active[p]) {
                out.scaled_add(br.gates[p], &br.values.row(p));
            }
        }

        let (fused_normed, fused_inv) = rmsnorm_rows(fused.view(), eps);
        let mut conv_out = Array2::zeros((positions, d));
        for start in (0..positions).step_by(seq_len) {
            let rows = s![start..start + seq_len, ..];
            let c = depthwise_causal_conv(fused_normed.slice(rows), self.readout.conv.view(), self.readout.dilation)?;
            conv_out.slice_mut(rows).assign(&c);
        }
        let out = &h + &fused + &conv_out.mapv(silu);
        let cache = LngramCache {
            seq_len,
            normalized: disc.normalized,
            inv_rms: disc.inv_rms,
            logits: disc.logits.logits,
            symbols,
            retrievals,
            branches,
            fused_normed,
            fused_inv,
            conv_out,
        };
        Ok((out, cache))
    }

    /// Backward of [`Self::forward`]. Table rows, readout projections and conv
    /// kernels receive exact gradients; the routing logits receive the
    /// configured surrogate. Gradients are accumulated into `grads`; the
    /// gradient with respect to the input is returned.
    pub fn backward(&self, cache: &LngramCache<F>, d_out: ArrayView2<'_, F>, grads: &mut LngramParams<F>) -> Result<Array2<F>> {
        let d = self.model_dim();
        let positions = cache.normalized.nrows();
        if d_out.dim() != (positions, d) {
            return Err(dim_err!("output gradient has shape {:?}", d_out.dim()));
        }
        let cfg = &self.config;
        let norm_d = F::lit(d as f64).sqrt();

        // refinement branch
        let d_conv = ndarray::Zip::from(&d_out).and(&cache.conv_out).map_collect(|&g, &c| g * silu_grad(c));
        let mut d_fused = d_out.to_owned();
        let mut d_normed = Array2::zeros((positions, d));
        for start in (0..positions).step_by(cache.seq_len) {
            let rows = s![start..start + cache.seq_len, ..];
            let dn = depthwise_causal_conv_backward(
                cache.fused_normed.slice(rows),
                self.readout.conv.view(),
                self.readout.dilation,
                d_conv.slice(rows),
                grads.readout.conv.view_mut(),
            )?;
            d_normed.slice_mut(rows).assign(&dn);
        }
        for p in 0..positions {
            let y = cache.fused_normed.row(p);
            let dy = d_normed.row(p);
            let mut dx = d_fused.row_mut(p);
            rmsnorm_backward_row(y.as_slice().unwrap(), cache.fused_inv[p], dy.as_slice().unwrap(), dx.as_slice_mut().unwrap());
        }

        // gating / fusion
        let n_br = cache.branches.len();
        let mut d_keys: Vec<Array2<F>> = (0..n_br).map(|_| Array2::zeros((positions, d))).collect();
        let mut d_values: Vec<Array2<F>> = (0..n_br).map(|_| Array2::zeros((positions, d))).collect();
        let mut d_query = Array2::<F>::zeros((positions, d));
        let mut d_gate = vec![F::zero(); n_br];
        let mut d_score = vec![F::zero(); n_br];
        let mut d_kn = vec![F::zero(); d];
        for p in 0..positions {
            let g = d_fused.row(p);
            let g = g.as_slice().unwrap();
            for (b, br) in cache.branches.iter().enumerate() {
                if !br.active[p] {
                    d_gate[b] = F::zero();
                    continue;
                }
                d_gate[b] = dot(g, br.values.row(p).as_slice().unwrap());
                d_values[b].row_mut(p).scaled_add(br.gates[p], &d_fused.row(p));
            }
            match self.readout.mode {
                GateMode::Sigmoid => {
                    for (b, br) in cache.branches.iter().enumerate() {
                        let a = br.gates[p];
                        d_score[b] = if br.active[p] { d_gate[b] * a * (F::one() - a) } else { F::zero() };
                    }
                }
                GateMode::Softmax => {
                    let mean: F = cache.branches.iter().zip(&d_gate).filter(|(br, _)| br.active[p]).map(|(br, &dg)| br.gates[p] * dg).sum();
                    for (b, br) in cache.branches.iter().enumerate() {
                        d_score[b] = if br.active[p] { br.gates[p] * (d_gate[b] - mean) / self.readout.tau_f } else { F::zero() };
                    }
                }
            }
            let hn = cache.normalized.row(p);
            let hn = hn.as_slice().unwrap();
            for (b, br) in cache.branches.iter().enumerate() {
                if !br.active[p] || d_score[b] == F::zero() {
                    continue;
                }
                let ds = d_score[b] / norm_d;
                let kn = br.keys_normed.row(p);
                let kn = kn.as_slice().unwrap();
                let mut dq = d_query.row_mut(p);
                for (q, &k) in dq.iter_mut().zip(kn) {
                    *q += ds * k;
                }
                for (o, &h) in d_kn.iter_mut().zip(hn) {
                    *o = ds * h;
                }
                let mut dk = d_keys[b].row_mut(p);
                rmsnorm_backward_row(kn, br.key_inv[p], &d_kn, dk.as_slice_mut().unwrap());
            }
        }

        // projections and tables
        let n_orders = cfg.orders.len();
        let mut upstream = Vec::with_capacity(n_br);
        for (b, ret) in cache.retrievals.iter().enumerate() {
            let slot = self.readout.slot(b % n_orders);
            let e_t = ret.values.t();
            grads.readout.w_k[slot] += &e_t.dot(&d_keys[b]);
            grads.readout.w_v[slot] += &e_t.dot(&d_values[b]);
            grads.readout.b_k[slot] += &d_keys[b].sum_axis(Axis(0)).insert_axis(Axis(0));
            grads.readout.b_v[slot] += &d_values[b].sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut d_e = d_keys[b].dot(&self.readout.w_k[slot].t()) + d_values[b].dot(&self.readout.w_v[slot].t());
            for (p, &valid) in ret.valid.iter().enumerate() {
                if !valid {
                    d_e.row_mut(p).fill(F::zero());
                }
            }
            accumulate_table_grad(ret, &d_e, &mut grads.bank.groups[ret.subtable][b % n_orders]);
            upstream.push(d_e);
        }

        // routing logits via the surrogate, then back through the codec
        let views: Vec<_> = upstream.iter().map(|u| u.view()).collect();
        let fwd = RoutingForward { symbols: &cache.symbols, logits: &cache.logits, bank: &self.bank, seq_len: cache.seq_len };
        let d_logits = backprop_routing(&fwd, &views, &cfg.surrogate, cfg.block(self.routes()))?;
        let mut d_u = d_query;
        for (s, dz) in d_logits.iter().enumerate() {
            grads.codec.projections[s] += &cache.normalized.t().dot(dz);
            d_u += &dz.dot(&self.codec.projections[s].t());
        }
        let mut d_h = d_out.to_owned();
        for p in 0..positions {
            let y = cache.normalized.row(p);
            let dy = d_u.row(p);
            let mut dx = d_h.row_mut(p);
            rmsnorm_backward_row(y.as_slice().unwrap(), cache.inv_rms[p], dy.as_slice().unwrap(), dx.as_slice_mut().unwrap());
        }
        Ok(d_h)
    }
}

fn accumulate_table_grad<F: Real>(ret: &BranchRetrieval<F>, d_e: &Array2<F>, table: &mut crate::memory::MemoryTable<F>) {
    let dm = table.dim();
    let routes = table.routes();
    for (p, &valid) in ret.valid.iter().enumerate() {
        if !valid {
            continue;
        }
        let g = d_e.row(p);
        let g = g.as_slice().unwrap();
        for r in 0..routes {
            let row = table.row_mut(ret.addresses[p * routes + r]);
            for (o, &x) in row.iter_mut().zip(&g[r * dm..(r + 1) * dm]) {
                *o += x;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BranchState<F: Real> {
    keys_normed: Array2<F>,
    key_inv: Vec<F>,
    values: Array2<F>,
    active: Vec<bool>,
    scores: Vec<F>,
    gates: Vec<F>,
}

/// Forward activations kept for the backward pass and for gate traces.
#[derive(Debug, Clone)]
pub struct LngramCache<F: Real> {
    seq_len: usize,
    normalized: Array2<F>,
    inv_rms: Vec<F>,
    logits: Vec<Array2<F>>,
    symbols: SymbolGrid,
    retrievals: Vec<BranchRetrieval<F>>,
    branches: Vec<BranchState<F>>,
    fused_normed: Array2<F>,
    fused_inv: Vec<F>,
    conv_out: Array2<F>,
}

impl<F: Real> LngramCache<F> {
    pub fn symbols(&self) -> &SymbolGrid {
        &self.symbols
    }

    pub fn retrievals(&self) -> &[BranchRetrieval<F>] {
        &self.retrievals
    }

    /// Gate rows of sequence `seq` (0-based) with 1-based positions.
    pub fn gate_trace(&self, seq: usize) -> GateTrace {
        let mut trace = GateTrace::default();
        let start = seq * self.seq_len;
        for t in 0..self.seq_len {
            let p = start + t;
            let mut row = GateRow::default();
            for (br, ret) in self.branches.iter().zip(&self.retrievals) {
                if br.active[p] {
                    row.entries.push(crate::readout::GateEntry {
                        subtable: ret.subtable,
                        order: ret.order,
                        score: br.scores[p].as_f64(),
                        gate: br.gates[p].as_f64(),
                    });
                }
            }
            trace.push_row(t + 1, &row);
        }
        trace
    }
}

/// `H + Y` for a single sequence.
pub fn lngram_forward<F: Real>(h: ArrayView2<'_, F>, params: &LngramParams<F>) -> Result<Array2<F>> {
    Ok(params.forward(h, h.nrows())?.0)
}

/// Fixed-size state for token-by-token decoding. Holds the last `max N - 1`
/// symbol rows and the last `(w - 1) * dilation` normalized fused rows; its
/// size never depends on how many tokens have been generated.
#[derive(Debug, Clone)]
pub struct LngramStepState<F: Real> {
    position: usize,
    symbol_hist: Vec<u32>,
    conv_hist: Array2<F>,
    scratch: StepScratch<F>,
}

#[derive(Debug, Clone)]
struct StepScratch<F: Real> {
    normalized: Vec<F>,
    symbols: Vec<u32>,
    retrieval: Vec<F>,
    staging: Vec<F>,
    fused: Vec<F>,
    key: Vec<F>,
    value: Vec<F>,
    scores: Vec<F>,
    weights: Vec<F>,
    active: Vec<usize>,
    values: Vec<Vec<F>>,
    addresses: Vec<u64>,
}

impl<F: Real> LngramParams<F> {
    pub fn step_state(&self) -> LngramStepState<F> {
        let d = self.model_dim();
        let routes = self.routes();
        let cfg = &self.config;
        let hist_rows = cfg.max_order().saturating_sub(1);
        let conv_rows = (self.readout.conv.ncols() - 1) * self.readout.dilation;
        let n_br = cfg.subtables * cfg.orders.len();
        LngramStepState {
            position: 0,
            symbol_hist: vec![0; hist_rows.max(1) * cfg.subtables * routes],
            conv_hist: Array2::zeros((conv_rows.max(1), d)),
            scratch: StepScratch {
                normalized: vec![F::zero(); d],
                symbols: vec![0; cfg.subtables * routes],
                retrieval: vec![F::zero(); routes * cfg.memory_dim],
                staging: Vec::with_capacity(routes * cfg.memory_dim),
                fused: vec![F::zero(); d],
                key: vec![F::zero(); d],
                value: vec![F::zero(); d],
                scores: Vec::with_capacity(n_br),
                weights: Vec::with_capacity(n_br),
                active: Vec::with_capacity(n_br),
                values: vec![vec![F::zero(); d]; n_br],
                addresses: vec![0; routes],
            },
        }
    }

    /// Processes one new position, overwriting `h` with `h + y`.
    pub fn step(&self, h: &mut [F], state: &mut LngramStepState<F>, residency: TableResidency) {
        let d = self.model_dim();
        let cfg = &self.config;
        let routes = self.routes();
        let bits = cfg.bits;
        let k = 1u64 << bits;
        let hist_rows = cfg.max_order().saturating_sub(1).max(1);
        let sc = &mut state.scratch;
        let t = state.position;

        let inv = inv_rms(h, self.codec.eps);
        for (o, &x) in sc.normalized.iter_mut().zip(h.iter()) {
            *o = x * inv;
        }
        let u = ndarray::ArrayView1::from(&sc.normalized);
        for (s, w) in self.codec.projections.iter().enumerate() {
            let z = u.dot(w);
            for r in 0..routes {
                let mut a = 0u32;
                for j in 0..bits {
                    a |= ((z[r * bits + j] > F::zero()) as u32) << j;
                }
                sc.symbols[s * routes + r] = a;
            }
        }

        let norm_d = F::lit(d as f64).sqrt();
        let dm = cfg.memory_dim;
        sc.scores.clear();
        sc.active.clear();
        for (s, group) in self.bank.groups.iter().enumerate() {
            for (ni, table) in group.iter().enumerate() {
                let n = table.order();
                let b = s * cfg.orders.len() + ni;
                let valid = t + 1 >= n;
                if !valid && !cfg.literal_invalid_branches {
                    continue;
                }
                if valid {
                    let kn = k.pow(n as u32);
                    for r in 0..routes {
                        let window = (0..n).map(|i| {
                            let back = n - 1 - i;
                            if back == 0 {
                                sc.symbols[s * routes + r]
                            } else {
                                let slot = (t - back) % hist_rows;
                                state.symbol_hist[(slot * cfg.subtables + s) * routes + r]
                            }
                        });
                        sc.addresses[r] = address_unchecked(r, kn, k, window);
                    }
                    match residency {
                        TableResidency::InCore => {
                            for r in 0..routes {
                                sc.retrieval[r * dm..(r + 1) * dm].copy_from_slice(table.row(sc.addresses[r]));
                            }
                        }
                        TableResidency::HostGather => {
                            crate::memory::gather_rows(table, &sc.addresses, &mut sc.staging);
                            sc.retrieval.copy_from_slice(&sc.staging);
                        }
                    }
                } else {
                    sc.retrieval.fill(F::zero());
                }
                let slot = self.readout.slot(ni);
                let e = ndarray::ArrayView1::from(&sc.retrieval);
                let key = e.dot(&self.readout.w_k[slot]) + self.readout.b_k[slot].row(0);
                let value = e.dot(&self.readout.w_v[slot]) + self.readout.b_v[slot].row(0);
                sc.key.copy_from_slice(key.as_slice().unwrap());
                sc.value.copy_from_slice(value.as_slice().unwrap());
                let ik = inv_rms(&sc.key, self.readout.eps);
                let score = dot(&sc.normalized, &sc.key) * ik / norm_d;
                sc.scores.push(score);
                sc.active.push(b);
                sc.values[b].copy_from_slice(&sc.value);
            }
        }
        sc.weights.clear();
        sc.weights.resize(sc.scores.len(), F::zero());
        match self.readout.mode {
            GateMode::Sigmoid => {
                for (w, &s) in sc.weights.iter_mut().zip(&sc.scores) {
                    *w = sigmoid(s);
                }
            }
            GateMode::Softmax => {
                if !sc.scores.is_empty() {
                    softmax_into(&sc.scores, self.readout.tau_f, &mut sc.weights);
                }
            }
        }
        sc.fused.fill(F::zero());
        for (&b, &w) in sc.active.iter().zip(&sc.weights) {
            for (o, &v) in sc.fused.iter_mut().zip(&sc.values[b]) {
                *o += w * v;
            }
        }

        let inv_f = inv_rms(&sc.fused, self.readout.eps);
        let conv_rows = state.conv_hist.nrows();
        let width = self.readout.conv.ncols();
        let dil = self.readout.dilation;
        for (c, hc) in h.iter_mut().enumerate() {
            let mut acc = self.readout.conv[[c, 0]] * sc.fused[c] * inv_f;
            for i in 1..width {
                let lag = i * dil;
                if lag > t {
                    break;
                }
                acc += self.readout.conv[[c, i]] * state.conv_hist[[(t - lag) % conv_rows, c]];
            }
            *hc += sc.fused[c] + silu(acc);
        }

        if width > 1 {
            let slot = t % conv_rows;
            for c in 0..d {
                state.conv_hist[[slot, c]] = sc.fused[c] * inv_f;
            }
        }
        let slot = t % hist_rows;
        for s in 0..cfg.subtables {
            for r in 0..routes {
                state.symbol_hist[(slot * cfg.subtables + s) * routes + r] = sc.symbols[s * routes + r];
            }
        }
        state.position += 1;
    }
}
