//! Context-aware readout of retrieved vectors.
//!
//! Each retrieved branch is projected to a key and a value. The current hidden
//! state scores every key by `RMSNorm(h) . RMSNorm(k) / sqrt(d)`; the scores
//! become independent sigmoid gates (single-table mode) or a softmax over all
//! `(subtable, order)` branches (multi-table mode). The fused sequence is then
//! refined by `Y = V + SiLU(DWConv(RMSNorm(V)))`.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LngramError, Result};
use crate::memory::RetrievalResult;
use crate::numerics::{depthwise_causal_conv, dot, inv_rms, rmsnorm_rows, sigmoid, silu, softmax_into, Real};

/// Standard deviation of the value projection at initialization.
pub const VALUE_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// One table group, shared `W_K`/`W_V`, sigmoid gate per order.
    #[default]
    #[serde(alias = "single")]
    Sigmoid,
    /// `S` table groups, per-order projections, softmax over branches.
    #[serde(alias = "multi")]
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams<F: Real> {
    pub mode: GateMode,
    /// Key projections `(R d_m) x d`: one shared in sigmoid mode, one per order
    /// in softmax mode.
    pub w_k: Vec<Array2<F>>,
    pub w_v: Vec<Array2<F>>,
    /// Biases stored as `1 x d` rows.
    pub b_k: Vec<Array2<F>>,
    pub b_v: Vec<Array2<F>>,
    pub tau_f: F,
    /// Depthwise kernels `d x w`, zero at initialization.
    pub conv: Array2<F>,
    pub dilation: usize,
    pub eps: F,
}

/// Shape settings for [`ReadoutParams::init`].
#[derive(Debug, Clone, Copy)]
pub struct ReadoutShape {
    pub model_dim: usize,
    pub retrieval_dim: usize,
    pub orders: usize,
    pub conv_width: usize,
    pub dilation: usize,
}

impl<F: Real> ReadoutParams<F> {
    pub fn init<R: Rng>(shape: ReadoutShape, mode: GateMode, tau_f: f64, eps: f64, rng: &mut R) -> Result<Self> {
        if !(tau_f > 0.0) {
            return Err(LngramError::Config(format!("fusion temperature must be positive, got {tau_f}")));
        }
        if shape.conv_width == 0 || shape.dilation == 0 {
            return Err(LngramError::Config("convolution width and dilation must be at least 1".into()));
        }
        let copies = match mode {
            GateMode::Sigmoid => 1,
            GateMode::Softmax => shape.orders,
        };
        let (rd, d) = (shape.retrieval_dim, shape.model_dim);
        let key = Normal::new(0.0, 1.0 / (rd as f64).sqrt()).expect("valid normal");
        let value = Normal::new(0.0, VALUE_INIT_STD).expect("valid normal");
        let mut w_k = Vec::with_capacity(copies);
        let mut w_v = Vec::with_capacity(copies);
        for _ in 0..copies {
            w_k.push(Array2::from_shape_simple_fn((rd, d), || F::lit(key.sample(rng))));
            w_v.push(Array2::from_shape_simple_fn((rd, d), || F::lit(value.sample(rng))));
        }
        Ok(Self {
            mode,
            w_k,
            w_v,
            b_k: vec![Array2::zeros((1, d)); copies],
            b_v: vec![Array2::zeros((1, d)); copies],
            tau_f: F::lit(tau_f),
            conv: Array2::zeros((d, shape.conv_width)),
            dilation: shape.dilation,
            eps: F::lit(eps),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Array2<F>>| v.iter().map(|m| Array2::zeros(m.raw_dim())).collect();
        Self {
            mode: self.mode,
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            b_k: z(&self.b_k),
            b_v: z(&self.b_v),
            tau_f: self.tau_f,
            conv: Array2::zeros(self.conv.raw_dim()),
            dilation: self.dilation,
            eps: self.eps,
        }
    }

    /// Projection slot used by the order at index `order_idx`.
    #[inline]
    pub fn slot(&self, order_idx: usize) -> usize {
        match self.mode {
            GateMode::Sigmoid => 0,
            GateMode::Softmax => order_idx,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.conv.nrows()
    }
}

/// `k = W_K e + b_K`, `v = W_V e + b_V` for the order at `order_idx`.
pub fn project_branch<F: Real>(e: &RetrievalResult<F>, params: &ReadoutParams<F>, order_idx: usize) -> Result<(Vec<F>, Vec<F>)> {
    let slot = params.slot(order_idx);
    let w_k = params.w_k.get(slot).ok_or_else(|| dim_err!("no projection for order index {order_idx}"))?;
    if e.values.len() != w_k.nrows() {
        return Err(dim_err!("retrieval has length {}, projection expects {}", e.values.len(), w_k.nrows()));
    }
    let ev = ndarray::ArrayView1::from(&e.values);
    let k = ev.dot(w_k) + params.b_k[slot].row(0);
    let v = ev.dot(&params.w_v[slot]) + params.b_v[slot].row(0);
    Ok((k.to_vec(), v.to_vec()))
}

/// One projected branch at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<F: Real> {
    pub subtable: usize,
    pub order: usize,
    pub key: Vec<F>,
    pub value: Vec<F>,
}

/// One gated branch at one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateEntry {
    pub subtable: usize,
    pub order: usize,
    pub score: f64,
    pub gate: f64,
}

/// Gates of all active branches at one position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub entries: Vec<GateEntry>,
}

/// `RMSNorm(h) . RMSNorm(k) / sqrt(d)`.
pub fn branch_score<F: Real>(h: &[F], k: &[F], eps: F) -> F {
    let (ih, ik) = (inv_rms(h, eps), inv_rms(k, eps));
    dot(h, k) * ih * ik / F::lit(h.len() as f64).sqrt()
}

/// Sigmoid-gated sum over the valid orders. No branches gives a zero vector.
pub fn gate_single<F: Real>(h: &[F], branches: &[Branch<F>], eps: F) -> Result<(Vec<F>, GateRow)> {
    let mut out = vec![F::zero(); h.len()];
    let mut row = GateRow::default();
    for b in branches {
        check_branch(h, b)?;
        let score = branch_score(h, &b.key, eps);
        let alpha = sigmoid(score);
        for (o, &v) in out.iter_mut().zip(&b.value) {
            *o += alpha * v;
        }
        row.entries.push(GateEntry { subtable: b.subtable, order: b.order, score: score.as_f64(), gate: alpha.as_f64() });
    }
    Ok((out, row))
}

/// Softmax fusion over the valid `(subtable, order)` branches.
pub fn fuse_multi<F: Real>(h: &[F], branches: &[Branch<F>], tau_f: F, eps: F) -> Result<(Vec<F>, GateRow)> {
    if !(tau_f > F::zero()) {
        return Err(LngramError::Parameter(format!("fusion temperature must be positive, got {tau_f}")));
    }
    let mut out = vec![F::zero(); h.len()];
    if branches.is_empty() {
        return Ok((out, GateRow::default()));
    }
    let mut scores = Vec::with_capacity(branches.len());
    for b in branches {
        check_branch(h, b)?;
        scores.push(branch_score(h, &b.key, eps));
    }
    let mut pi = vec![F::zero(); scores.len()];
    softmax_into(&scores, tau_f, &mut pi);
    let mut row = GateRow::default();
    for ((b, &w), &score) in branches.iter().zip(&pi).zip(&scores) {
        for (o, &v) in out.iter_mut().zip(&b.value) {
            *o += w * v;
        }
        row.entries.push(GateEntry { subtable: b.subtable, order: b.order, score: score.as_f64(), gate: w.as_f64() });
    }
    Ok((out, row))
}

fn check_branch<F: Real>(h: &[F], b: &Branch<F>) -> Result<()> {
    if b.key.len() != h.len() || b.value.len() != h.len() {
        return Err(dim_err!("branch vectors must have the model dimension {}", h.len()));
    }
    Ok(())
}

/// `Y = V + SiLU(DWConv(RMSNorm(V)))` over one sequence.
pub fn conv_refine<F: Real>(v: ArrayView2<'_, F>, params: &ReadoutParams<F>) -> Result<Array2<F>> {
    if v.ncols() != params.model_dim() {
        return Err(dim_err!("fused sequence has {} channels, kernels have {}", v.ncols(), params.model_dim()));
    }
    let (a, _) = rmsnorm_rows(v, params.eps);
    let c = depthwise_causal_conv(a.view(), params.conv.view(), params.dilation)?;
    Ok(&v + &c.mapv(silu))
}

/// Gate records over a sequence, one per `(position, subtable, order)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub records: Vec<GateRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    /// 1-based position.
    pub t: usize,
    pub s: usize,
    pub n: usize,
    pub score: f64,
    pub gate: f64,
}

impl GateTrace {
    pub fn push_row(&mut self, t: usize, row: &GateRow) {
        self.records.extend(row.entries.iter().map(|e| GateRecord { t, s: e.subtable, n: e.order, score: e.score, gate: e.gate }));
    }

    /// Gate series of one order: per position, the summed gate over subtables.
    /// Positions where the order is inactive are omitted.
    pub fn series(&self, order: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for r in self.records.iter().filter(|r| r.n == order) {
            match out.last_mut() {
                Some((t, g)) if *t == r.t => *g += r.gate,
                _ => out.push((r.t, r.gate)),
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,s,n,score,gate")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{}", r.t, r.s, r.n, r.score, r.gate)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.records)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rmsnorm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(mode: GateMode, d: usize, rd: usize, orders: usize) -> ReadoutParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ReadoutShape { model_dim: d, retrieval_dim: rd, orders, conv_width: 4, dilation: 3 };
        ReadoutParams::init(shape, mode, 1.0, 1e-6, &mut rng).unwrap()
    }

    #[test]
    fn zero_retrieval_with_zero_bias_projects_to_zero() {
        let p = params(GateMode::Sigmoid, 4, 6, 2);
        let (k, v) = project_branch(&RetrievalResult { values: vec![0.0; 6], valid: true }, &p, 1).unwrap();
        assert!(k.iter().chain(&v).all(|&x| x == 0.0));
    }

    #[test]
    fn basis_probe_selects_one_coordinate() {
        let mut p = params(GateMode::Softmax, 3, 3, 2);
        p.w_k[1] = Array2::eye(3);
        p.w_v[1] = Array2::eye(3);
        let e = RetrievalResult { values: vec![0.0, 1.0, 0.0], valid: true };
        let (k, v) = project_branch(&e, &p, 1).unwrap();
        assert_eq!(k, vec![0.0, 1.0, 0.0]);
        assert_eq!(v, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_matches_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = params(GateMode::Softmax, 5, 7, 2);
        p.b_k[0].mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p.b_v[0].mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let e: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (k, v) = project_branch(&RetrievalResult { values: e.clone(), valid: true }, &p, 0).unwrap();
        for j in 0..5 {
            let nk: f64 = (0..7).map(|i| e[i] * p.w_k[0][[i, j]]).sum::<f64>() + p.b_k[0][[0, j]];
            let nv: f64 = (0..7).map(|i| e[i] * p.w_v[0][[i, j]]).sum::<f64>() + p.b_v[0][[0, j]];
            assert!((k[j] - nk).abs() < 1e-12 && (v[j] - nv).abs() < 1e-12);
        }
        assert!(project_branch(&RetrievalResult { values: vec![0.0; 3], valid: true }, &p, 0).is_err());
    }

    #[test]
    fn orthogonal_query_gives_half_gate() {
        let h = [1.0, 0.0, 0.0, 0.0];
        let b = Branch { subtable: 0, order: 2, key: vec![0.0, 1.0, 0.0, 0.0], value: vec![2.0; 4] };
        let (v, row) = gate_single(&h, &[b], 1e-6).unwrap();
        assert_eq!(row.entries[0].gate, 0.5);
        assert_eq!(v, vec![1.0; 4]);
        let (v, row) = gate_single::<f64>(&h, &[], 1e-6).unwrap();
        assert_eq!(v, vec![0.0; 4]);
        assert!(row.entries.is_empty());
    }

    #[test]
    fn two_branch_gate_matches_hand_computation() {
        let h = [1.0, 2.0, -1.0, 0.5];
        let k2 = [0.5, 0.5, 0.5, 0.5];
        let k3 = [1.0, -1.0, 2.0, 0.0];
        let v2 = [1.0, 0.0, -1.0, 2.0];
        let v3 = [0.0, 3.0, 1.0, -1.0];
        let branches = vec![
            Branch { subtable: 0, order: 2, key: k2.to_vec(), value: v2.to_vec() },
            Branch { subtable: 0, order: 3, key: k3.to_vec(), value: v3.to_vec() },
        ];
        let (v, _) = gate_single(&h, &branches, 0.0).unwrap();
        // mean squares: h -> 6.25/4, k2 -> 0.25, k3 -> 6/4
        let hn = 1.0 / (6.25f64 / 4.0).sqrt();
        let a2 = sigmoid((1.0 * 0.5 + 2.0 * 0.5 - 0.5 + 0.25) * hn * 2.0 / 2.0);
        let a3 = sigmoid((1.0 - 2.0 - 2.0) * hn / (1.5f64).sqrt() / 2.0);
        for j in 0..4 {
            assert!((v[j] - (a2 * v2[j] + a3 * v3[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn fusion_examples() {
        let h = [1.0, 0.0, 0.0, 0.0];
        let branches: Vec<Branch<f64>> = (0..6)
            .map(|i| Branch { subtable: i / 2, order: 2 + i % 2, key: vec![0.0, 1.0, 1.0, 0.0], value: vec![i as f64; 4] })
            .collect();
        let (_, row) = fuse_multi(&h, &branches, 1.0, 1e-6).unwrap();
        assert!(row.entries.iter().all(|e| (e.gate - 1.0 / 6.0).abs() < 1e-15));
        let (v, row) = fuse_multi(&h, &branches[3..4], 0.7, 1e-6).unwrap();
        assert_eq!(row.entries[0].gate, 1.0);
        assert_eq!(v, vec![3.0; 4]);
        assert!(fuse_multi(&h, &branches, 0.0, 1e-6).is_err());
    }

    #[test]
    fn fusion_matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let d = 6;
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let branches: Vec<Branch<f64>> = (0..5)
                .map(|i| Branch {
                    subtable: i,
                    order: 2,
                    key: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    value: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect();
            let tau = rng.random_range(0.3..3.0);
            let (v, row) = fuse_multi(&h, &branches, tau, 1e-6).unwrap();
            let hn = rmsnorm(&h, 1e-6).unwrap();
            let rho: Vec<f64> = branches.iter().map(|b| dot(&hn, &rmsnorm(&b.key, 1e-6).unwrap()) / (d as f64).sqrt()).collect();
            let z: f64 = rho.iter().map(|r| (r / tau).exp()).sum();
            let pi: Vec<f64> = rho.iter().map(|r| (r / tau).exp() / z).collect();
            let total: f64 = row.entries.iter().map(|e| e.gate).sum();
            assert!((total - 1.0).abs() < 1e-9);
            for (j, vj) in v.iter().enumerate() {
                let want: f64 = branches.iter().zip(&pi).map(|(b, p)| p * b.value[j]).sum();
                assert!((vj - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv_refine_examples() {
        let mut p = params(GateMode::Sigmoid, 3, 3, 2);
        let v = Array2::from_shape_fn((5, 3), |(t, c)| (t as f64 - 2.0) * (c as f64 + 0.5));
        assert_eq!(conv_refine(v.view(), &p).unwrap(), v);
        assert_eq!(conv_refine(Array2::zeros((5, 3)).view(), &p).unwrap(), Array2::<f64>::zeros((5, 3)));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.conv.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let y = conv_refine(v.view(), &p).unwrap();
        // composed oracle: rmsnorm -> conv -> silu -> add, by scalar loops
        for t in 0..5 {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..4 {
                    if i * 3 <= t {
                        let src = t - i * 3;
                        let row: Vec<f64> = v.row(src).to_vec();
                        let a = rmsnorm(&row, 1e-6).unwrap()[c];
                        acc += p.conv[[c, i]] * a;
                    }
                }
                assert!((y[[t, c]] - (v[[t, c]] + acc / (1.0 + (-acc).exp()))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trace_series_and_export() {
        let mut trace = GateTrace::default();
        let row = GateRow {
            entries: vec![
                GateEntry { subtable: 0, order: 3, score: 0.1, gate: 0.25 },
                GateEntry { subtable: 1, order: 3, score: 0.2, gate: 0.5 },
                GateEntry { subtable: 0, order: 2, score: 0.0, gate: 0.25 },
            ],
        };
        trace.push_row(3, &row);
        assert_eq!(trace.series(3), vec![(3, 0.75)]);
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,s,n,score,gate\n3,0,3,0.1,0.25\n"));
        let back: Vec<GateRecord> = serde_json::from_str(&trace.to_json().unwrap()).unwrap();
        assert_eq!(back, trace.records);
    }
}
