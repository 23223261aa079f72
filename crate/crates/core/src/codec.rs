//! Hidden states to multi-route discrete symbol streams.
//!
//! Each subtable owns an independent `d x d` projection. Projected logits are
//! thresholded per channel and every contiguous block of `bits` channels is
//! packed little-endian into one route symbol.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, LngramError, Result};
use crate::numerics::{rmsnorm_rows, Real};

/// Largest supported bits-per-route; keeps `K = 2^M` enumerable.
pub const MAX_BITS: usize = 16;

/// Discretization parameters for `S` subtables.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams<F: Real> {
    /// One `d x d` projection (no bias) per subtable.
    pub projections: Vec<Array2<F>>,
    pub eps: F,
    pub bits: usize,
}

impl<F: Real> CodecParams<F> {
    /// Gaussian init with standard deviation `1/sqrt(d)`, which gives nearly
    /// orthogonal columns and a balanced initial bit distribution.
    pub fn init<R: Rng>(d: usize, bits: usize, subtables: usize, eps: f64, rng: &mut R) -> Result<Self> {
        let params = Self {
            projections: Vec::new(),
            eps: F::lit(eps),
            bits,
        };
        params.check_layout(d, subtables)?;
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let projections = (0..subtables)
            .map(|_| Array2::from_shape_simple_fn((d, d), || F::lit(normal.sample(rng))))
            .collect();
        Ok(Self { projections, ..params })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            projections: self.projections.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            eps: self.eps,
            bits: self.bits,
        }
    }

    fn check_layout(&self, d: usize, subtables: usize) -> Result<()> {
        check_route_layout(d, self.bits)?;
        if subtables == 0 {
            return Err(LngramError::Config("at least one subtable is required".into()));
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.projections.first().map_or(0, |p| p.nrows())
    }

    pub fn subtables(&self) -> usize {
        self.projections.len()
    }

    pub fn routes(&self) -> usize {
        self.model_dim() / self.bits
    }

    pub fn symbols_per_route(&self) -> usize {
        1 << self.bits
    }
}

pub fn check_route_layout(d: usize, bits: usize) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(LngramError::Config(format!("bits per route must be in 1..={MAX_BITS}, got {bits}")));
    }
    if d == 0 || !d.is_multiple_of(bits) {
        return Err(LngramError::Config(format!("model dim {d} is not divisible by bits per route {bits}")));
    }
    Ok(())
}

/// Channel index of bit `j` in route `r`.
#[inline]
pub fn channel_of(route: usize, bit: usize, bits: usize) -> usize {
    route * bits + bit
}

/// `(route, bit)` of channel `c`.
#[inline]
pub fn route_bit_of(channel: usize, bits: usize) -> (usize, usize) {
    (channel / bits, channel % bits)
}

/// Hard bits, indexed `(subtable, position, channel)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    positions: usize,
    channels: usize,
    subtables: usize,
    bits: Vec<u8>,
}

impl BitGrid {
    pub fn from_fn(positions: usize, channels: usize, subtables: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(positions * channels * subtables);
        for s in 0..subtables {
            for t in 0..positions {
                for c in 0..channels {
                    bits.push(f(s, t, c) as u8);
                }
            }
        }
        Self { positions, channels, subtables, bits }
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize, c: usize) -> u8 {
        self.bits[(s * self.positions + t) * self.channels + c]
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn subtables(&self) -> usize {
        self.subtables
    }
}

/// Route symbols, indexed `(subtable, position, route)`, each in `[0, 2^M)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolGrid {
    positions: usize,
    routes: usize,
    subtables: usize,
    bits: usize,
    symbols: Vec<u32>,
}

impl SymbolGrid {
    pub fn new(positions: usize, routes: usize, subtables: usize, bits: usize, symbols: Vec<u32>) -> Result<Self> {
        if symbols.len() != positions * routes * subtables {
            return Err(dim_err!("symbol buffer has {} entries, expected {}", symbols.len(), positions * routes * subtables));
        }
        let k = 1u64 << bits;
        if symbols.iter().any(|&a| a as u64 >= k) {
            return Err(LngramError::Input(format!("symbol out of range for {bits}-bit routes")));
        }
        Ok(Self { positions, routes, subtables, bits, symbols })
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize, r: usize) -> u32 {
        self.symbols[(s * self.positions + t) * self.routes + r]
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn routes(&self) -> usize {
        self.routes
    }

    pub fn subtables(&self) -> usize {
        self.subtables
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn symbols_per_route(&self) -> usize {
        1 << self.bits
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.symbols
    }

    /// Symbols of one subtable restricted to positions `start..end`.
    pub fn slice_positions(&self, start: usize, end: usize) -> SymbolGrid {
        let mut symbols = Vec::with_capacity((end - start) * self.routes * self.subtables);
        for s in 0..self.subtables {
            for t in start..end {
                for r in 0..self.routes {
                    symbols.push(self.get(s, t, r));
                }
            }
        }
        SymbolGrid { positions: end - start, routes: self.routes, subtables: self.subtables, bits: self.bits, symbols }
    }
}

/// Per-subtable logits `Z^(s) = RMSNorm(H) W_q^(s)`.
#[derive(Debug, Clone)]
pub struct DiscretizationLogits<F: Real> {
    pub logits: Vec<Array2<F>>,
}

/// Everything the forward discretization produced, kept for backward.
#[derive(Debug, Clone)]
pub struct Discretized<F: Real> {
    pub normalized: Array2<F>,
    pub inv_rms: Vec<F>,
    pub logits: DiscretizationLogits<F>,
    pub bits: BitGrid,
}

pub fn discretize<F: Real>(h: ArrayView2<'_, F>, params: &CodecParams<F>) -> Result<(DiscretizationLogits<F>, BitGrid)> {
    let out = discretize_full(h, params)?;
    Ok((out.logits, out.bits))
}

pub(crate) fn discretize_full<F: Real>(h: ArrayView2<'_, F>, params: &CodecParams<F>) -> Result<Discretized<F>> {
    let d = params.model_dim();
    if h.ncols() != d {
        return Err(dim_err!("hidden states have {} channels but the codec expects {d}", h.ncols()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(LngramError::Input("hidden states must be finite".into()));
    }
    let (normalized, inv_rms) = rmsnorm_rows(h, params.eps);
    let logits: Vec<Array2<F>> = params.projections.iter().map(|w| normalized.dot(w)).collect();
    let bits = BitGrid::from_fn(h.nrows(), d, logits.len(), |s, t, c| logits[s][[t, c]] > F::zero());
    Ok(Discretized { normalized, inv_rms, logits: DiscretizationLogits { logits }, bits })
}

/// Packs each route's `bits` channels little-endian: bit `j` carries `2^j`.
pub fn pack_routes(bits: &BitGrid, m: usize) -> Result<SymbolGrid> {
    check_route_layout(bits.channels(), m)?;
    let routes = bits.channels() / m;
    let mut symbols = Vec::with_capacity(bits.subtables() * bits.positions() * routes);
    for s in 0..bits.subtables() {
        for t in 0..bits.positions() {
            for r in 0..routes {
                let mut a = 0u32;
                for j in 0..m {
                    a |= (bits.get(s, t, channel_of(r, j, m)) as u32) << j;
                }
                symbols.push(a);
            }
        }
    }
    Ok(SymbolGrid { positions: bits.positions(), routes, subtables: bits.subtables(), bits: m, symbols })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_codec(d: usize, bits: usize) -> CodecParams<f64> {
        CodecParams { projections: vec![Array2::eye(d)], eps: 1e-6, bits }
    }

    #[test]
    fn identity_projection_follows_signs() {
        let h = Array2::from_shape_vec((1, 4), vec![1.0, -1.0, 2.0, -0.5]).unwrap();
        let (_, bits) = discretize(h.view(), &identity_codec(4, 4)).unwrap();
        let row: Vec<u8> = (0..4).map(|c| bits.get(0, 0, c)).collect();
        assert_eq!(row, vec![1, 0, 1, 0]);
    }

    #[test]
    fn zero_logit_gives_zero_bit() {
        let h = Array2::from_shape_vec((1, 4), vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let (logits, bits) = discretize(h.view(), &identity_codec(4, 2)).unwrap();
        assert_eq!(logits.logits[0][[0, 0]], 0.0);
        assert_eq!(bits.get(0, 0, 0), 0);
        assert_eq!(bits.get(0, 0, 2), 0);
    }

    #[test]
    fn random_grid_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let codec = CodecParams::<f64>::init(d, 4, 2, 1e-6, &mut rng).unwrap();
        let h = Array2::from_shape_fn((5, d), |_| rng.random_range(-2.0..2.0));
        let (_, bits) = discretize(h.view(), &codec).unwrap();
        for s in 0..2 {
            for t in 0..5 {
                let ms: f64 = (0..d).map(|c| h[[t, c]] * h[[t, c]]).sum::<f64>() / d as f64;
                let scale = 1.0 / (ms + 1e-6).sqrt();
                for c in 0..d {
                    let z: f64 = (0..d).map(|i| h[[t, i]] * scale * codec.projections[s][[i, c]]).sum();
                    assert_eq!(bits.get(s, t, c), (z > 0.0) as u8);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let h = Array2::<f64>::zeros((2, 6));
        assert!(matches!(discretize(h.view(), &identity_codec(4, 2)), Err(LngramError::Dimension(_))));
    }

    #[test]
    fn packing_examples() {
        let grid = BitGrid::from_fn(1, 4, 1, |_, _, c| [1, 0, 0, 1][c] == 1);
        assert_eq!(pack_routes(&grid, 4).unwrap().get(0, 0, 0), 9);
        let grid = BitGrid::from_fn(1, 4, 1, |_, _, _| false);
        assert_eq!(pack_routes(&grid, 4).unwrap().get(0, 0, 0), 0);
        let grid = BitGrid::from_fn(1, 4, 1, |_, _, _| true);
        assert_eq!(pack_routes(&grid, 4).unwrap().get(0, 0, 0), 15);
        let grid = BitGrid::from_fn(1, 6, 1, |_, _, _| true);
        assert!(matches!(pack_routes(&grid, 4), Err(LngramError::Config(_))));
    }

    #[test]
    fn channel_partition_round_trips() {
        for bits in 1..=6 {
            let d = bits * 7;
            for c in 0..d {
                let (r, j) = route_bit_of(c, bits);
                assert!(j < bits && r < d / bits);
                assert_eq!(channel_of(r, j, bits), c);
            }
        }
    }

    #[test]
    fn symbols_stay_in_range_exhaustively() {
        for m in 1..=4 {
            let d = m * 3;
            let patterns = 1usize << d;
            let grid = BitGrid::from_fn(patterns, d, 1, |_, t, c| (t >> c) & 1 == 1);
            let symbols = pack_routes(&grid, m).unwrap();
            assert!(symbols.as_slice().iter().all(|&a| (a as usize) < (1 << m)));
        }
    }

    #[test]
    fn subtables_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let codec = CodecParams::<f64>::init(d, 2, 3, 1e-6, &mut rng).unwrap();
        let h = Array2::from_shape_fn((6, d), |_| rng.random_range(-1.0..1.0));
        let before = pack_routes(&discretize(h.view(), &codec).unwrap().1, 2).unwrap();
        let mut changed = codec.clone();
        changed.projections[1].mapv_inplace(|v| -v + 0.3);
        let after = pack_routes(&discretize(h.view(), &changed).unwrap().1, 2).unwrap();
        for s in [0, 2] {
            for t in 0..6 {
                for r in 0..4 {
                    assert_eq!(before.get(s, t, r), after.get(s, t, r));
                }
            }
        }
        let again = pack_routes(&discretize(h.view(), &codec).unwrap().1, 2).unwrap();
        assert_eq!(before, again);
    }

    #[test]
    fn layout_is_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(CodecParams::<f64>::init(10, 4, 1, 1e-6, &mut rng).is_err());
        assert!(CodecParams::<f64>::init(8, 4, 0, 1e-6, &mut rng).is_err());
        let c = CodecParams::<f64>::init(8, 4, 1, 1e-6, &mut rng).unwrap();
        assert_eq!((c.routes(), c.symbols_per_route()), (2, 16));
    }
}
