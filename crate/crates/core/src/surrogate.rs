//! Counterfactual surrogate gradients for the hard routing logits.
//!
//! The lookup path is piecewise constant in the discretization logits, so the
//! gradient of the loss with respect to `Z` is replaced by a local surrogate:
//! for one route at one slot of one n-gram window, the other slots and routes
//! are held at their forward symbols and the slot's symbol is varied.
//!
//! * `Exact` differentiates `<g, mu(z)>` where `mu(z) = sum_c P(c|z) E_c` and
//!   the bits are independent Bernoulli variables with `p_j = sigmoid(tau z_j)`.
//!   Cost is `O(K)` row reads per slot.
//! * `OneBit` only compares the two rows obtained by forcing bit `j` of the
//!   forward symbol to 0 and to 1, scaled by `lambda tau p_j (1 - p_j)`.
//!   Cost is `O(M)`.
//! * `StraightThrough` is a comparison baseline only: identity through the
//!   threshold and a forward difference along the packed symbol value.
//!
//! Holding the other symbols fixed is the single source of bias in the
//! surrogate.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::codec::SymbolGrid;
use crate::error::{dim_err, LngramError, Result};
use crate::memory::{address_unchecked, MultiTableBank};
use crate::numerics::{dot, sigmoid, ProbVector, Real};

/// Largest `M` accepted by the `O(2^M)` enumeration.
pub const MAX_ENUMERATED_BITS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateMode {
    #[default]
    Exact,
    #[serde(alias = "onebit")]
    OneBit,
    StraightThrough,
}

impl std::str::FromStr for SurrogateMode {
    type Err = LngramError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "onebit" | "one-bit" => Ok(Self::OneBit),
            "ste" | "straight-through" => Ok(Self::StraightThrough),
            other => Err(LngramError::Config(format!("unknown surrogate mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub temperature: f64,
    /// Global scale, applied in one-bit mode only.
    pub scale: f64,
    pub mode: SurrogateMode,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { temperature: 1.0, scale: 1.0, mode: SurrogateMode::Exact }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.scale > 0.0) {
            return Err(LngramError::Config("surrogate temperature and scale must be positive".into()));
        }
        Ok(())
    }
}

/// Bit logits of one route at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBitLogits<F: Real>(pub Vec<F>);

impl<F: Real> LocalBitLogits<F> {
    pub fn bit_probs(&self, tau: F) -> Vec<F> {
        self.0.iter().map(|&z| sigmoid(tau * z)).collect()
    }
}

/// Counterfactual retrievals for one local slot.
#[derive(Debug, Clone, PartialEq)]
pub enum CounterfactualSet<F: Real> {
    /// `E_c` for every symbol `c`, as a `K x d_m` matrix.
    Full(Array2<F>),
    /// `(E_j^(0), E_j^(1))` for every bit `j`.
    Pairs(Vec<(Vec<F>, Vec<F>)>),
}

/// `P(c|z) = prod_j p_j^{beta_j(c)} (1 - p_j)^{1 - beta_j(c)}` for all `c`.
pub fn local_symbol_probs<F: Real>(z: &LocalBitLogits<F>, tau: F) -> Result<ProbVector<F>> {
    if z.0.len() > MAX_ENUMERATED_BITS {
        return Err(LngramError::Capacity(format!("cannot enumerate {} bits", z.0.len())));
    }
    let p = z.bit_probs(tau);
    let mut out = vec![F::zero(); 1 << p.len()];
    symbol_probs_into(&p, &mut out);
    ProbVector::new(out)
}

/// Little-endian product expansion: bit `j` of `c` selects `p_j` or `1 - p_j`.
#[inline]
fn symbol_probs_into<F: Real>(p: &[F], out: &mut [F]) {
    out[0] = F::one();
    for (j, &pj) in p.iter().enumerate() {
        let half = 1 << j;
        for c in 0..half {
            let base = out[c];
            out[c + half] = base * pj;
            out[c] = base * (F::one() - pj);
        }
    }
}

fn check_full<F: Real>(z: &LocalBitLogits<F>, e: ArrayView2<'_, F>) -> Result<()> {
    if z.0.len() > MAX_ENUMERATED_BITS {
        return Err(LngramError::Capacity(format!("cannot enumerate {} bits", z.0.len())));
    }
    if e.nrows() != 1 << z.0.len() {
        return Err(dim_err!("need {} counterfactual rows, got {}", 1 << z.0.len(), e.nrows()));
    }
    Ok(())
}

/// `mu(z) = sum_c P(c|z) E_c`.
pub fn expected_retrieval<F: Real>(z: &LocalBitLogits<F>, tau: F, e: ArrayView2<'_, F>) -> Result<Vec<F>> {
    check_full(z, e)?;
    let probs = local_symbol_probs(z, tau)?;
    let mut mu = vec![F::zero(); e.ncols()];
    for (row, &pc) in e.rows().into_iter().zip(probs.as_slice()) {
        for (m, &x) in mu.iter_mut().zip(row) {
            *m += pc * x;
        }
    }
    Ok(mu)
}

/// Analytic gradient of `<g, mu(z)>`:
/// `tau * sum_c P(c|z) (beta_j(c) - p_j) <g, E_c>`.
pub fn exact_surrogate_grad<F: Real>(z: &LocalBitLogits<F>, tau: F, g: &[F], e: ArrayView2<'_, F>) -> Result<Vec<F>> {
    check_full(z, e)?;
    if g.len() != e.ncols() {
        return Err(dim_err!("upstream gradient has length {}, rows have {}", g.len(), e.ncols()));
    }
    let scores: Vec<F> = e.rows().into_iter().map(|row| dot(row.as_slice().expect("contiguous"), g)).collect();
    let p = z.bit_probs(tau);
    let mut probs = vec![F::zero(); scores.len()];
    let mut out = vec![F::zero(); p.len()];
    exact_from_scores(&p, tau, &scores, &mut probs, &mut out);
    Ok(out)
}

#[inline]
fn exact_from_scores<F: Real>(p: &[F], tau: F, scores: &[F], probs: &mut [F], out: &mut [F]) {
    symbol_probs_into(p, probs);
    for (j, (o, &pj)) in out.iter_mut().zip(p).enumerate() {
        let mut acc = F::zero();
        for (c, (&pc, &sc)) in probs.iter().zip(scores).enumerate() {
            let beta = if (c >> j) & 1 == 1 { F::one() } else { F::zero() };
            acc += pc * (beta - pj) * sc;
        }
        *o = tau * acc;
    }
}

/// `lambda * tau * p_j (1 - p_j) <g, E_j^(1) - E_j^(0)>`.
pub fn onebit_surrogate_grad<F: Real>(z: &LocalBitLogits<F>, tau: F, lambda: F, g: &[F], pairs: &[(Vec<F>, Vec<F>)]) -> Result<Vec<F>> {
    if pairs.len() != z.0.len() {
        return Err(dim_err!("need one counterfactual pair per bit"));
    }
    z.0.iter()
        .zip(pairs)
        .map(|(&zj, (e0, e1))| {
            if e0.len() != g.len() || e1.len() != g.len() {
                return Err(dim_err!("counterfactual rows must match the upstream gradient length"));
            }
            let pj = sigmoid(tau * zj);
            let score = dot(g, e1) - dot(g, e0);
            Ok(lambda * tau * pj * (F::one() - pj) * score)
        })
        .collect()
}

/// Gradient of the scalar surrogate for one counterfactual set.
pub fn surrogate_grad<F: Real>(z: &LocalBitLogits<F>, config: &SurrogateConfig, g: &[F], set: &CounterfactualSet<F>) -> Result<Vec<F>> {
    let tau = F::lit(config.temperature);
    match (config.mode, set) {
        (SurrogateMode::Exact, CounterfactualSet::Full(e)) => exact_surrogate_grad(z, tau, g, e.view()),
        (SurrogateMode::OneBit, CounterfactualSet::Pairs(p)) => onebit_surrogate_grad(z, tau, F::lit(config.scale), g, p),
        _ => Err(LngramError::Usage("counterfactual set does not match the surrogate mode".into())),
    }
}

/// Every `(order, window end, slot)` whose window contains 0-based position
/// `pos` inside a sequence of length `seq_len`. Slot `u` of the window ending
/// at `end` is position `end + 1 - n + u`.
pub fn window_memberships(pos: usize, orders: &[usize], seq_len: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for &n in orders {
        for u in 0..n {
            let end = pos + n - 1 - u;
            if end < seq_len && end + 1 >= n {
                out.push((n, end, u));
            }
        }
    }
    out
}

/// Forward state needed by [`backprop_routing`].
pub struct RoutingForward<'a, F: Real> {
    pub symbols: &'a SymbolGrid,
    /// Discretization logits per subtable, `positions x d`.
    pub logits: &'a [Array2<F>],
    pub bank: &'a MultiTableBank<F>,
    pub seq_len: usize,
}

/// Accumulates the surrogate gradient of the routing logits over all valid
/// windows, routes, orders and slots.
///
/// `upstream[b]` is `dL/de` for branch `b` in `(subtable, order)` order, shape
/// `positions x (R * d_m)`. Routes are processed in chunks of `block`; for a
/// given logit the contributions are always summed in (order, window end,
/// slot) sequence, so any block size gives bitwise-identical results.
pub fn backprop_routing<F: Real>(
    fwd: &RoutingForward<'_, F>,
    upstream: &[ArrayView2<'_, F>],
    config: &SurrogateConfig,
    block: usize,
) -> Result<Vec<Array2<F>>> {
    config.validate()?;
    let bank = fwd.bank;
    let symbols = fwd.symbols;
    let orders = bank.orders();
    let (subtables, routes, dm) = (bank.subtables(), bank.routes(), bank.dim());
    let bits = symbols.bits();
    let k = 1usize << bits;
    let positions = symbols.positions();
    if block == 0 {
        return Err(LngramError::Parameter("routing block size must be at least 1".into()));
    }
    if upstream.len() != subtables * orders.len() {
        return Err(LngramError::Usage(format!(
            "missing forward state: expected {} upstream gradients, got {}",
            subtables * orders.len(),
            upstream.len()
        )));
    }
    if fwd.logits.len() != subtables || symbols.subtables() != subtables || symbols.routes() != routes {
        return Err(LngramError::Usage("forward state does not match the table bank".into()));
    }
    if fwd.seq_len == 0 || !positions.is_multiple_of(fwd.seq_len) {
        return Err(dim_err!("{positions} positions are not whole sequences of length {}", fwd.seq_len));
    }
    if config.mode == SurrogateMode::Exact && bits > MAX_ENUMERATED_BITS {
        return Err(LngramError::Capacity(format!("cannot enumerate {bits}-bit routes")));
    }
    for u in upstream {
        if u.dim() != (positions, routes * dm) {
            return Err(dim_err!("upstream gradient has shape {:?}", u.dim()));
        }
    }
    for z in fwd.logits {
        if z.dim() != (positions, routes * bits) {
            return Err(dim_err!("routing logits have shape {:?}", z.dim()));
        }
    }

    let tau = F::lit(config.temperature);
    let lambda = F::lit(config.scale);
    let kk = k as u64;
    let mut grads: Vec<Array2<F>> = fwd.logits.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
    let mut p = vec![F::zero(); bits];
    let mut probs = vec![F::zero(); k];
    let mut scores = vec![F::zero(); k];
    let mut dz = vec![F::zero(); bits];

    for s in 0..subtables {
        for (ni, table) in bank.groups[s].iter().enumerate() {
            let n = table.order();
            let kn = kk.pow(n as u32);
            let up = &upstream[s * orders.len() + ni];
            let grad = &mut grads[s];
            let logits = &fwd.logits[s];
            for chunk_start in (0..routes).step_by(block) {
                for r in chunk_start..(chunk_start + block).min(routes) {
                    for end in 0..positions {
                        if end % fwd.seq_len + 1 < n {
                            continue;
                        }
                        let g_row = up.row(end);
                        let g = &g_row.as_slice().expect("contiguous")[r * dm..(r + 1) * dm];
                        let start = end + 1 - n;
                        let addr = address_unchecked(r, kn, kk, (start..=end).map(|q| symbols.get(s, q, r)));
                        let mut weight = 1u64;
                        for u in 0..n {
                            let pos = start + u;
                            let hard = symbols.get(s, pos, r) as u64;
                            let base = addr - hard * weight;
                            let z_row = logits.row(pos);
                            let z = &z_row.as_slice().expect("contiguous")[r * bits..(r + 1) * bits];
                            match config.mode {
                                SurrogateMode::Exact => {
                                    for (c, sc) in scores.iter_mut().enumerate() {
                                        *sc = dot(g, table.row(base + c as u64 * weight));
                                    }
                                    for (pj, &zj) in p.iter_mut().zip(z) {
                                        *pj = sigmoid(tau * zj);
                                    }
                                    exact_from_scores(&p, tau, &scores, &mut probs, &mut dz);
                                }
                                SurrogateMode::OneBit => {
                                    for (j, (d, &zj)) in dz.iter_mut().zip(z).enumerate() {
                                        let c0 = hard & !(1u64 << j);
                                        let c1 = hard | (1u64 << j);
                                        let s_j = dot(g, table.row(base + c1 * weight)) - dot(g, table.row(base + c0 * weight));
                                        let pj = sigmoid(tau * zj);
                                        *d = lambda * tau * pj * (F::one() - pj) * s_j;
                                    }
                                }
                                SurrogateMode::StraightThrough => {
                                    let (lo, hi) = if hard + 1 < kk { (hard, hard + 1) } else { (hard - 1, hard) };
                                    let slope = dot(g, table.row(base + hi * weight)) - dot(g, table.row(base + lo * weight));
                                    for (j, d) in dz.iter_mut().enumerate() {
                                        *d = F::lit((1u64 << j) as f64) * slope;
                                    }
                                }
                            }
                            let mut g_z = grad.row_mut(pos);
                            let g_z = &mut g_z.as_slice_mut().expect("contiguous")[r * bits..(r + 1) * bits];
                            for (o, &d) in g_z.iter_mut().zip(&dz) {
                                *o += d;
                            }
                            weight *= kk;
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::compute_address;
    use crate::numerics::{finite_difference_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probability_examples() {
        let p = local_symbol_probs(&LocalBitLogits(vec![0.0f64; 3]), 1.0).unwrap();
        assert!(p.as_slice().iter().all(|&x| (x - 0.125).abs() < 1e-15));
        let p = local_symbol_probs(&LocalBitLogits(vec![60.0f64; 4]), 1.0).unwrap();
        assert!((p.as_slice()[15] - 1.0).abs() < 1e-12);
        let z = LocalBitLogits(vec![(0.25f64 / 0.75).ln(), 3f64.ln()]);
        let p = local_symbol_probs(&z, 1.0).unwrap();
        let expected = [0.1875, 0.0625, 0.5625, 0.1875];
        for (a, b) in p.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn expected_retrieval_examples() {
        let v = [0.3, -1.0, 2.0];
        let e = Array2::from_shape_fn((4, 3), |(_, i)| v[i]);
        let mu = expected_retrieval(&LocalBitLogits(vec![0.7, -2.0]), 1.3, e.view()).unwrap();
        assert!(max_relative_error(&mu, &v, 1e-12) < 1e-14);
        let e = Array2::from_shape_fn((4, 2), |(c, i)| (c * 2 + i) as f64);
        let mu = expected_retrieval(&LocalBitLogits(vec![-50.0, 50.0]), 1.0, e.view()).unwrap();
        assert!((mu[0] - 4.0).abs() < 1e-12 && (mu[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identical_counterfactuals_give_zero_gradient() {
        let e = Array2::from_shape_fn((8, 4), |(_, i)| i as f64 - 1.5);
        let g = [1.0, -2.0, 0.5, 3.0];
        let d = exact_surrogate_grad(&LocalBitLogits(vec![0.3, -0.9, 1.7]), 1.0, &g, e.view()).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Array2::from_shape_fn((16, 5), |_| rng.random_range(-1.0..1.0));
        let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = g.iter().map(|x| 2.0 * x).collect();
        let z = LocalBitLogits(vec![0.1, -0.4, 0.9, -1.3]);
        let a = exact_surrogate_grad(&z, 1.0, &g, e.view()).unwrap();
        let b = exact_surrogate_grad(&z, 1.0, &g2, e.view()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
        let cfg = SurrogateConfig { scale: 7.0, ..Default::default() };
        let c = surrogate_grad(&z, &cfg, &g, &CounterfactualSet::Full(e.clone())).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn exact_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let e = Array2::from_shape_fn((16, 8), |_| rng.random_range(-1.0..1.0));
            let g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tau = rng.random_range(0.5..2.0);
            let analytic = exact_surrogate_grad(&LocalBitLogits(z.clone()), tau, &g, e.view()).unwrap();
            let fd = finite_difference_grad(
                |zz| dot(&g, &expected_retrieval(&LocalBitLogits(zz.to_vec()), tau, e.view()).unwrap()),
                &z,
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&analytic, &fd, 1e-6) < 1e-6);
        }
    }

    #[test]
    fn onebit_examples() {
        let same = vec![(vec![1.0, 2.0], vec![1.0, 2.0]); 2];
        let d = onebit_surrogate_grad(&LocalBitLogits(vec![0.3, -0.2]), 1.0, 1.0, &[1.0, 1.0], &same).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        let pairs = vec![(vec![0.5, -1.0], vec![2.0, 1.0]), (vec![0.0, 0.0], vec![1.0, -3.0])];
        let z = LocalBitLogits(vec![0.4, -0.8]);
        let one: Vec<f64> = onebit_surrogate_grad(&z, 1.5, 1.0, &[0.2, 0.7], &pairs).unwrap();
        let two = onebit_surrogate_grad(&z, 1.5, 2.0, &[0.2, 0.7], &pairs).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((2.0 * a - *b).abs() < 1e-15);
        }
    }

    #[test]
    fn onebit_collapses_to_exact_for_one_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let e = Array2::from_shape_fn((2, 6), |_| rng.random_range(-1.0..1.0));
            let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = LocalBitLogits(vec![rng.random_range(-3.0..3.0)]);
            let tau = rng.random_range(0.2..3.0);
            let exact = exact_surrogate_grad(&z, tau, &g, e.view()).unwrap();
            let pairs = vec![(e.row(0).to_vec(), e.row(1).to_vec())];
            let onebit = onebit_surrogate_grad(&z, tau, 1.0, &g, &pairs).unwrap();
            assert!((exact[0] - onebit[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_sets_are_rejected() {
        let z = LocalBitLogits(vec![0.0f64; 2]);
        let cfg = SurrogateConfig { mode: SurrogateMode::OneBit, ..Default::default() };
        let err = surrogate_grad(&z, &cfg, &[1.0], &CounterfactualSet::Full(Array2::zeros((4, 1))));
        assert!(matches!(err, Err(LngramError::Usage(_))));
        assert!(exact_surrogate_grad(&z, 1.0, &[1.0], Array2::zeros((3, 1)).view()).is_err());
        assert!(local_symbol_probs(&LocalBitLogits(vec![0.0f64; 13]), 1.0).is_err());
    }

    #[test]
    fn interior_positions_belong_to_five_windows() {
        let m = window_memberships(10, &[2, 3], 32);
        assert_eq!(m.len(), 5);
        assert!(window_memberships(0, &[2, 3], 1).is_empty());
        assert_eq!(window_memberships(0, &[2, 3], 32).len(), 2);
    }

    type Fixture = (SymbolGrid, Vec<Array2<f64>>, MultiTableBank<f64>, Vec<Array2<f64>>);

    fn setup(seed: u64, positions: usize, subtables: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (routes, bits, dm) = (4, 2, 3);
        let logits: Vec<Array2<f64>> = (0..subtables)
            .map(|_| Array2::from_shape_fn((positions, routes * bits), |_| rng.random_range(-2.0..2.0)))
            .collect();
        let mut symbols = Vec::new();
        for z in &logits {
            for t in 0..positions {
                for r in 0..routes {
                    let mut a = 0;
                    for j in 0..bits {
                        a |= ((z[[t, r * bits + j]] > 0.0) as u32) << j;
                    }
                    symbols.push(a);
                }
            }
        }
        let grid = SymbolGrid::new(positions, routes, subtables, bits, symbols).unwrap();
        let bank = MultiTableBank::init(&[2, 3], subtables, routes, 4, dm, &mut rng).unwrap();
        let up = (0..subtables * 2)
            .map(|_| Array2::from_shape_fn((positions, routes * dm), |_| rng.random_range(-1.0..1.0)))
            .collect();
        (grid, logits, bank, up)
    }

    #[test]
    fn streaming_blocks_are_bitwise_identical() {
        let (grid, logits, bank, up) = setup(5, 12, 2);
        let fwd = RoutingForward { symbols: &grid, logits: &logits, bank: &bank, seq_len: 6 };
        let views: Vec<_> = up.iter().map(|u| u.view()).collect();
        for mode in [SurrogateMode::Exact, SurrogateMode::OneBit, SurrogateMode::StraightThrough] {
            let cfg = SurrogateConfig { mode, ..Default::default() };
            let full = backprop_routing(&fwd, &views, &cfg, 4).unwrap();
            for block in [1, 3] {
                assert_eq!(full, backprop_routing(&fwd, &views, &cfg, block).unwrap());
            }
        }
    }

    #[test]
    fn first_position_gets_no_gradient_from_single_position_sequences() {
        let (grid, logits, bank, up) = setup(6, 4, 1);
        let fwd = RoutingForward { symbols: &grid, logits: &logits, bank: &bank, seq_len: 1 };
        let views: Vec<_> = up.iter().map(|u| u.view()).collect();
        let g = backprop_routing(&fwd, &views, &SurrogateConfig::default(), 4).unwrap();
        assert!(g[0].iter().all(|&x| x == 0.0));
        assert!(matches!(backprop_routing(&fwd, &views[..1], &SurrogateConfig::default(), 4), Err(LngramError::Usage(_))));
    }

    #[test]
    fn accumulation_matches_sum_of_local_surrogates() {
        let (grid, logits, bank, up) = setup(7, 7, 1);
        let fwd = RoutingForward { symbols: &grid, logits: &logits, bank: &bank, seq_len: 7 };
        let views: Vec<_> = up.iter().map(|u| u.view()).collect();
        let cfg = SurrogateConfig { temperature: 1.3, ..Default::default() };
        let got = backprop_routing(&fwd, &views, &cfg, 4).unwrap();
        let (routes, bits, dm) = (4, 2, 3);
        let mut want = Array2::<f64>::zeros((7, routes * bits));
        for pos in 0..7 {
            for (n, end, u) in window_memberships(pos, &[2, 3], 7) {
                let ni = if n == 2 { 0 } else { 1 };
                let table = &bank.groups[0][ni];
                for r in 0..routes {
                    let mut window: Vec<u32> = (end + 1 - n..=end).map(|q| grid.get(0, q, r)).collect();
                    let e = Array2::from_shape_fn((4, dm), |(c, i)| {
                        window[u] = c as u32;
                        table.row(compute_address(r, &window, 4).unwrap().0)[i]
                    });
                    let g = up[ni].row(end).slice(ndarray::s![r * dm..(r + 1) * dm]).to_vec();
                    let z = LocalBitLogits(logits[0].row(pos).slice(ndarray::s![r * bits..(r + 1) * bits]).to_vec());
                    let d = exact_surrogate_grad(&z, 1.3, &g, e.view()).unwrap();
                    for j in 0..bits {
                        want[[pos, r * bits + j]] += d[j];
                    }
                }
            }
        }
        for (a, b) in got[0].iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn modes_parse() {
        assert_eq!("onebit".parse::<SurrogateMode>().unwrap(), SurrogateMode::OneBit);
        assert_eq!("exact".parse::<SurrogateMode>().unwrap(), SurrogateMode::Exact);
        assert!("gumbel".parse::<SurrogateMode>().is_err());
    }
}
