//! Exact route-partitioned n-gram tables.
//!
//! A table of order `n` holds `R * K^n` rows. The window `a_{t-n+1..=t}` on
//! route `r` lives at `r*K^n + sum_i a_{t-n+1+i} K^i`, so the oldest symbol is
//! the least significant digit. Addressing is a bijection; nothing is hashed.
//!
//! Positions are 1-based in the public API (`t >= n` is required for a
//! complete window); internal loops use 0-based offsets and test `t + 1 >= n`.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::SymbolGrid;
use crate::error::{dim_err, LngramError, Result};
use crate::numerics::Real;

/// Standard deviation of the table initialization.
pub const TABLE_INIT_STD: f64 = 0.02;

const SHARD_MAGIC: &[u8; 4] = b"LNGS";
const SHARD_VERSION: u32 = 1;

/// Row index into a [`MemoryTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TableAddress(pub u64);

/// Where table rows live during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TableResidency {
    /// Rows are read in place.
    #[default]
    InCore,
    /// Hit rows are first copied into a staging buffer, as when the table is
    /// kept in host memory away from the compute device.
    HostGather,
}

/// `R * K^n`, or a capacity error if it does not fit in 64 bits.
pub fn table_rows(routes: usize, k: usize, order: usize) -> Result<u64> {
    let kn = (k as u64)
        .checked_pow(order as u32)
        .ok_or_else(|| LngramError::Capacity(format!("K^n = {k}^{order} overflows 64-bit addresses")))?;
    kn.checked_mul(routes as u64)
        .ok_or_else(|| LngramError::Capacity(format!("{routes} routes x {k}^{order} overflows 64-bit addresses")))
}

/// Exact address of the n-gram `window` (oldest first) on route `route`.
pub fn compute_address(route: usize, window: &[u32], k: usize) -> Result<TableAddress> {
    let n = window.len();
    if n == 0 {
        return Err(LngramError::Input("n-gram window must be non-empty".into()));
    }
    let overflow = || LngramError::Capacity(format!("address of a {n}-gram on route {route} with K={k} overflows 64 bits"));
    let kn = (k as u64).checked_pow(n as u32).ok_or_else(overflow)?;
    let mut addr = (route as u64).checked_mul(kn).ok_or_else(overflow)?;
    let mut weight = 1u64;
    for (i, &a) in window.iter().enumerate() {
        if a as usize >= k {
            return Err(LngramError::Input(format!("symbol {a} is outside [0, {k})")));
        }
        addr = addr.checked_add((a as u64).checked_mul(weight).ok_or_else(overflow)?).ok_or_else(overflow)?;
        if i + 1 < n {
            weight = weight.checked_mul(k as u64).ok_or_else(overflow)?;
        }
    }
    if kn.checked_mul(route as u64 + 1).is_none() {
        return Err(overflow());
    }
    Ok(TableAddress(addr))
}

/// Address computation for a capacity-checked table.
#[inline]
pub(crate) fn address_unchecked(route: usize, kn: u64, k: u64, window: impl Iterator<Item = u32>) -> u64 {
    let mut addr = route as u64 * kn;
    let mut weight = 1u64;
    for a in window {
        addr += a as u64 * weight;
        weight *= k;
    }
    addr
}

/// One learnable order-`n` table.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTable<F: Real> {
    order: usize,
    routes: usize,
    symbols: usize,
    rows: usize,
    /// At least `rows` rows; any extra rows are never addressed.
    pub entries: Array2<F>,
}

impl<F: Real> MemoryTable<F> {
    pub fn zeros(order: usize, routes: usize, symbols: usize, dim: usize) -> Result<Self> {
        if order == 0 {
            return Err(LngramError::Config("n-gram order must be at least 1".into()));
        }
        if dim == 0 {
            return Err(LngramError::Config("table entry dimension must be at least 1".into()));
        }
        let rows = table_rows(routes, symbols, order)?;
        let rows = usize::try_from(rows)
            .ok()
            .filter(|r| r.checked_mul(dim).is_some())
            .ok_or_else(|| LngramError::Capacity(format!("{rows} rows x {dim} does not fit in memory indices")))?;
        Ok(Self { order, routes, symbols, rows, entries: Array2::zeros((rows, dim)) })
    }

    pub fn init<R: Rng>(order: usize, routes: usize, symbols: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut table = Self::zeros(order, routes, symbols, dim)?;
        let normal = Normal::new(0.0, TABLE_INIT_STD).expect("valid normal");
        table.entries.mapv_inplace(|_| F::lit(normal.sample(rng)));
        Ok(table)
    }

    /// Wraps existing storage; `entries` must have exactly `R * K^n` rows.
    pub fn from_entries(order: usize, routes: usize, symbols: usize, entries: Array2<F>) -> Result<Self> {
        let expected = Self::zeros_shape(order, routes, symbols)?;
        if entries.nrows() != expected || entries.ncols() == 0 {
            return Err(dim_err!("table of order {order} needs {expected} rows, got {}", entries.nrows()));
        }
        Ok(Self { order, routes, symbols, rows: expected, entries })
    }

    fn zeros_shape(order: usize, routes: usize, symbols: usize) -> Result<usize> {
        let rows = table_rows(routes, symbols, order)?;
        usize::try_from(rows).map_err(|_| LngramError::Capacity(format!("{rows} rows exceed the address space")))
    }

    /// Appends never-addressed rows so that storage is `factor` times the
    /// addressable size. Used to measure lookup cost against table size.
    pub fn pad_rows(&mut self, factor: usize) {
        let target = self.rows * factor.max(1);
        if target > self.entries.nrows() {
            let mut grown = Array2::zeros((target, self.dim()));
            grown.slice_mut(s![..self.entries.nrows(), ..]).assign(&self.entries);
            self.entries = grown;
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn routes(&self) -> usize {
        self.routes
    }

    pub fn symbols_per_route(&self) -> usize {
        self.symbols
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Addressable rows, `R * K^n`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn stored_rows(&self) -> usize {
        self.entries.nrows()
    }

    #[inline]
    pub fn row(&self, addr: u64) -> &[F] {
        let a = addr as usize;
        assert!(a < self.rows, "table address {a} out of bounds for {} rows", self.rows);
        let d = self.dim();
        &self.entries.as_slice().expect("contiguous table")[a * d..(a + 1) * d]
    }

    #[inline]
    pub fn row_mut(&mut self, addr: u64) -> &mut [F] {
        let a = addr as usize;
        assert!(a < self.rows, "table address {a} out of bounds for {} rows", self.rows);
        let d = self.dim();
        &mut self.entries.as_slice_mut().expect("contiguous table")[a * d..(a + 1) * d]
    }

    pub(crate) fn kn(&self) -> u64 {
        (self.symbols as u64).pow(self.order as u32)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            order: self.order,
            routes: self.routes,
            symbols: self.symbols,
            rows: self.rows,
            entries: Array2::zeros(self.entries.raw_dim()),
        }
    }

    /// Writes the row-major shard: magic, version, `n`, `R`, `K`, `d_m` as
    /// little-endian `u32`, then every addressable row as little-endian `f32`.
    pub fn write_shard<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SHARD_MAGIC)?;
        for v in [SHARD_VERSION, self.order as u32, self.routes as u32, self.symbols as u32, self.dim() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.dim() * 4);
        for r in 0..self.rows {
            buf.clear();
            for &x in self.row(r as u64) {
                buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_shard<Rd: Read>(mut r: Rd) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(shard_io)?;
        if &magic != SHARD_MAGIC {
            return Err(LngramError::Checkpoint("not a table shard".into()));
        }
        let mut header = [0u32; 5];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(shard_io)?;
            *h = u32::from_le_bytes(b);
        }
        let [version, order, routes, symbols, dim] = header;
        if version != SHARD_VERSION {
            return Err(LngramError::Checkpoint(format!("unsupported shard version {version}")));
        }
        let mut table = Self::zeros(order as usize, routes as usize, symbols as usize, dim as usize)?;
        let mut bytes = vec![0u8; table.rows * table.dim() * 4];
        r.read_exact(&mut bytes).map_err(shard_io)?;
        for (dst, chunk) in table.entries.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = F::lit(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
        Ok(table)
    }
}

fn shard_io(e: std::io::Error) -> LngramError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        LngramError::Checkpoint("truncated table shard".into())
    } else {
        e.into()
    }
}

/// `S` subtable groups, each with one table per configured order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTableBank<F: Real> {
    orders: Vec<usize>,
    /// `groups[s][i]` is subtable `s`'s table for `orders[i]`.
    pub groups: Vec<Vec<MemoryTable<F>>>,
}

impl<F: Real> MultiTableBank<F> {
    pub fn init<R: Rng>(orders: &[usize], subtables: usize, routes: usize, symbols: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Self::build(orders, subtables, |n| MemoryTable::init(n, routes, symbols, dim, rng))
    }

    pub fn zeros(orders: &[usize], subtables: usize, routes: usize, symbols: usize, dim: usize) -> Result<Self> {
        Self::build(orders, subtables, |n| MemoryTable::zeros(n, routes, symbols, dim))
    }

    fn build(orders: &[usize], subtables: usize, mut make: impl FnMut(usize) -> Result<MemoryTable<F>>) -> Result<Self> {
        validate_orders(orders)?;
        if subtables == 0 {
            return Err(LngramError::Config("at least one subtable is required".into()));
        }
        let mut groups = Vec::with_capacity(subtables);
        for _ in 0..subtables {
            groups.push(orders.iter().map(|&n| make(n)).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { orders: orders.to_vec(), groups })
    }

    pub fn from_groups(orders: &[usize], groups: Vec<Vec<MemoryTable<F>>>) -> Result<Self> {
        validate_orders(orders)?;
        let first = groups.first().and_then(|g| g.first()).ok_or_else(|| LngramError::Config("empty table bank".into()))?;
        let (routes, symbols, dim) = (first.routes(), first.symbols_per_route(), first.dim());
        for group in &groups {
            if group.len() != orders.len() {
                return Err(LngramError::Config("every subtable needs one table per order".into()));
            }
            for (table, &n) in group.iter().zip(orders) {
                if table.order() != n || table.routes() != routes || table.symbols_per_route() != symbols || table.dim() != dim {
                    return Err(LngramError::Config("subtable groups disagree on (R, K, d_m, N)".into()));
                }
            }
        }
        Ok(Self { orders: orders.to_vec(), groups })
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn subtables(&self) -> usize {
        self.groups.len()
    }

    pub fn routes(&self) -> usize {
        self.groups[0][0].routes()
    }

    pub fn symbols_per_route(&self) -> usize {
        self.groups[0][0].symbols_per_route()
    }

    pub fn dim(&self) -> usize {
        self.groups[0][0].dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            orders: self.orders.clone(),
            groups: self.groups.iter().map(|g| g.iter().map(MemoryTable::zeros_like).collect()).collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.groups.iter().flatten().map(|t| t.rows() * t.dim()).sum()
    }
}

pub(crate) fn validate_orders(orders: &[usize]) -> Result<()> {
    if orders.is_empty() {
        return Err(LngramError::Config("at least one n-gram order is required".into()));
    }
    if orders.contains(&0) {
        return Err(LngramError::Config("n-gram orders must be at least 1".into()));
    }
    let mut sorted = orders.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != orders.len() {
        return Err(LngramError::Config("n-gram orders must be distinct".into()));
    }
    Ok(())
}

/// Retrieval of one order at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<F: Real> {
    /// Route rows concatenated in route order, length `R * d_m`.
    pub values: Vec<F>,
    /// False when the prefix is shorter than the order; values are then zero.
    pub valid: bool,
}

/// Retrieves the order-`n` vector at 1-based position `t` from subtable `s`.
pub fn retrieve_order<F: Real>(symbols: &SymbolGrid, subtable: usize, table: &MemoryTable<F>, t: usize) -> Result<RetrievalResult<F>> {
    let n = table.order();
    if t == 0 || t > symbols.positions() {
        return Err(LngramError::Input(format!("position {t} outside 1..={}", symbols.positions())));
    }
    if subtable >= symbols.subtables() || symbols.routes() != table.routes() || symbols.symbols_per_route() != table.symbols_per_route() {
        return Err(dim_err!("symbol grid does not match the table layout"));
    }
    let dm = table.dim();
    let mut values = vec![F::zero(); table.routes() * dm];
    if t < n {
        return Ok(RetrievalResult { values, valid: false });
    }
    let (kn, k) = (table.kn(), table.symbols_per_route() as u64);
    for r in 0..table.routes() {
        let addr = address_unchecked(r, kn, k, (t - n..t).map(|p| symbols.get(subtable, p, r)));
        values[r * dm..(r + 1) * dm].copy_from_slice(table.row(addr));
    }
    Ok(RetrievalResult { values, valid: true })
}

/// Batched retrieval of one `(subtable, order)` branch over all positions.
#[derive(Debug, Clone)]
pub struct BranchRetrieval<F: Real> {
    pub subtable: usize,
    pub order: usize,
    /// `positions x (R * d_m)`; invalid rows are zero.
    pub values: Array2<F>,
    pub valid: Vec<bool>,
    /// `positions x R` row addresses; zero where invalid.
    pub addresses: Vec<u64>,
}

impl<F: Real> BranchRetrieval<F> {
    pub fn result(&self, t: usize) -> RetrievalResult<F> {
        RetrievalResult { values: self.values.row(t - 1).to_vec(), valid: self.valid[t - 1] }
    }
}

/// Retrieves every `(subtable, order)` branch for a single sequence.
///
/// Routes are processed in chunks of `block`; the chunking only changes the
/// schedule, never the result.
pub fn retrieve_all<F: Real>(symbols: &SymbolGrid, bank: &MultiTableBank<F>, block: usize) -> Result<Vec<BranchRetrieval<F>>> {
    retrieve_batch(symbols, bank, symbols.positions(), block)
}

/// As [`retrieve_all`] for `positions / seq_len` stacked sequences; windows
/// never cross a sequence boundary.
pub(crate) fn retrieve_batch<F: Real>(
    symbols: &SymbolGrid,
    bank: &MultiTableBank<F>,
    seq_len: usize,
    block: usize,
) -> Result<Vec<BranchRetrieval<F>>> {
    if block == 0 {
        return Err(LngramError::Parameter("retrieval block size must be at least 1".into()));
    }
    if symbols.subtables() != bank.subtables() || symbols.routes() != bank.routes() || symbols.symbols_per_route() != bank.symbols_per_route() {
        return Err(dim_err!("symbol grid does not match the table bank layout"));
    }
    let positions = symbols.positions();
    if seq_len == 0 || !positions.is_multiple_of(seq_len) {
        return Err(dim_err!("{positions} positions are not a whole number of length-{seq_len} sequences"));
    }
    let (routes, dm) = (bank.routes(), bank.dim());
    let k = bank.symbols_per_route() as u64;
    let mut out = Vec::with_capacity(bank.subtables() * bank.orders().len());
    for (s, group) in bank.groups.iter().enumerate() {
        for table in group {
            let n = table.order();
            let kn = table.kn();
            let mut values = Array2::zeros((positions, routes * dm));
            let mut valid = vec![false; positions];
            let mut addresses = vec![0u64; positions * routes];
            for (p, v) in valid.iter_mut().enumerate() {
                *v = p % seq_len + 1 >= n;
            }
            for chunk_start in (0..routes).step_by(block) {
                let chunk_end = (chunk_start + block).min(routes);
                for p in (0..positions).filter(|&p| valid[p]) {
                    let mut row = values.row_mut(p);
                    let row = row.as_slice_mut().expect("contiguous");
                    for r in chunk_start..chunk_end {
                        let addr = address_unchecked(r, kn, k, (p + 1 - n..=p).map(|q| symbols.get(s, q, r)));
                        addresses[p * routes + r] = addr;
                        row[r * dm..(r + 1) * dm].copy_from_slice(table.row(addr));
                    }
                }
            }
            out.push(BranchRetrieval { subtable: s, order: n, values, valid, addresses });
        }
    }
    Ok(out)
}

/// Copies the rows named by `addresses` into `staging` (host-gather mode) or
/// returns nothing for in-core mode, where rows are read in place.
pub fn gather_rows<F: Real>(table: &MemoryTable<F>, addresses: &[u64], staging: &mut Vec<F>) {
    staging.clear();
    for &a in addresses {
        staging.extend_from_slice(table.row(a));
    }
}

/// Read-only view of a table's addressable rows.
pub fn table_view<F: Real>(table: &MemoryTable<F>) -> ArrayView2<'_, F> {
    table.entries.slice(s![..table.rows(), ..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SymbolGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn address_examples() {
        assert_eq!(compute_address(0, &[3, 5], 16).unwrap(), TableAddress(83));
        assert_eq!(compute_address(1, &[0, 0], 16).unwrap(), TableAddress(256));
        assert_eq!(compute_address(0, &[5], 16).unwrap(), TableAddress(5));
    }

    #[test]
    fn address_errors() {
        assert!(matches!(compute_address(0, &[16], 16), Err(LngramError::Input(_))));
        assert!(matches!(compute_address(0, &[0; 17], 16), Err(LngramError::Capacity(_))));
        assert!(matches!(compute_address(usize::MAX, &[0; 15], 16), Err(LngramError::Capacity(_))));
        assert!(matches!(table_rows(32, 1 << 16, 4), Err(LngramError::Capacity(_))));
        assert!(MemoryTable::<f32>::zeros(9, 32, 1 << 16, 4).is_err());
    }

    #[test]
    fn addressing_is_bijective_small() {
        let (routes, k, n) = (4usize, 4usize, 3usize);
        let mut seen = vec![false; routes * k.pow(n as u32)];
        for r in 0..routes {
            for key in 0..k.pow(n as u32) {
                let window: Vec<u32> = (0..n).map(|i| ((key / k.pow(i as u32)) % k) as u32).collect();
                let a = compute_address(r, &window, k).unwrap().0 as usize;
                assert!(!seen[a]);
                seen[a] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn grid(positions: usize, routes: usize, subtables: usize, bits: usize, rng: &mut ChaCha8Rng) -> SymbolGrid {
        let k = 1u32 << bits;
        let symbols = (0..positions * routes * subtables).map(|_| rng.random_range(0..k)).collect();
        SymbolGrid::new(positions, routes, subtables, bits, symbols).unwrap()
    }

    #[test]
    fn short_prefix_is_invalid_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = MemoryTable::<f64>::init(2, 3, 4, 2, &mut rng).unwrap();
        let g = grid(4, 3, 1, 2, &mut rng);
        let res = retrieve_order(&g, 0, &table, 1).unwrap();
        assert!(!res.valid);
        assert!(res.values.iter().all(|&v| v == 0.0));
        assert!(retrieve_order(&g, 0, &table, 2).unwrap().valid);
    }

    #[test]
    fn all_zero_window_reads_row_zero() {
        let mut table = MemoryTable::<f64>::zeros(2, 2, 16, 3).unwrap();
        table.row_mut(0).copy_from_slice(&[1.0, 2.0, 3.0]);
        let g = SymbolGrid::new(2, 2, 1, 4, vec![0; 4]).unwrap();
        let res = retrieve_order(&g, 0, &table, 2).unwrap();
        assert_eq!(&res.values[..3], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn retrieval_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (routes, bits, dm) = (3, 2, 4);
        let table = MemoryTable::<f64>::init(3, routes, 4, dm, &mut rng).unwrap();
        let g = grid(9, routes, 1, bits, &mut rng);
        for t in 3..=9 {
            let res = retrieve_order(&g, 0, &table, t).unwrap();
            for r in 0..routes {
                let window: Vec<u32> = (t - 3..t).map(|p| g.get(0, p, r)).collect();
                let addr = compute_address(r, &window, 4).unwrap().0 as usize;
                assert_eq!(&res.values[r * dm..(r + 1) * dm], table.entries.row(addr).as_slice().unwrap());
            }
        }
    }

    #[test]
    fn block_size_does_not_change_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (routes, bits) = (8, 2);
        let bank = MultiTableBank::<f64>::init(&[2, 3], 2, routes, 4, 3, &mut rng).unwrap();
        let g = grid(12, routes, 2, bits, &mut rng);
        let full = retrieve_all(&g, &bank, routes).unwrap();
        for block in [1, 3, 5, 100] {
            let part = retrieve_all(&g, &bank, block).unwrap();
            for (a, b) in full.iter().zip(&part) {
                assert_eq!(a.values, b.values);
                assert_eq!(a.valid, b.valid);
                assert_eq!(a.addresses, b.addresses);
            }
        }
        assert!(retrieve_all(&g, &bank, 0).is_err());
    }

    #[test]
    fn single_subtable_bank_reduces_to_retrieve_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = MultiTableBank::<f64>::init(&[1, 2, 3], 1, 4, 4, 2, &mut rng).unwrap();
        let g = grid(6, 4, 1, 2, &mut rng);
        let all = retrieve_all(&g, &bank, 2).unwrap();
        for (i, branch) in all.iter().enumerate() {
            for t in 1..=6 {
                assert_eq!(branch.result(t), retrieve_order(&g, 0, &bank.groups[0][i], t).unwrap());
            }
        }
    }

    #[test]
    fn short_sequences_are_entirely_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = MultiTableBank::<f64>::init(&[2, 3], 1, 2, 4, 2, &mut rng).unwrap();
        let g = grid(1, 2, 1, 2, &mut rng);
        for branch in retrieve_all(&g, &bank, 1).unwrap() {
            assert!(branch.valid.iter().all(|v| !v));
            assert!(branch.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn retrieval_is_local_to_the_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table = MemoryTable::<f64>::init(3, 2, 4, 2, &mut rng).unwrap();
        let g = grid(10, 2, 1, 2, &mut rng);
        for t in 3..=10 {
            let base = retrieve_order(&g, 0, &table, t).unwrap();
            for p in 0..10 {
                let mut raw = g.as_slice().to_vec();
                raw[p * 2] = (raw[p * 2] + 1) % 4;
                let g2 = SymbolGrid::new(10, 2, 1, 2, raw).unwrap();
                let res = retrieve_order(&g2, 0, &table, t).unwrap();
                let in_window = p + 3 >= t && p < t;
                assert_eq!(res == base, !in_window, "t={t} p={p}");
            }
        }
    }

    #[test]
    fn batched_windows_respect_sequence_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bank = MultiTableBank::<f64>::init(&[2], 1, 2, 4, 2, &mut rng).unwrap();
        let g = grid(8, 2, 1, 2, &mut rng);
        let batched = retrieve_batch(&g, &bank, 4, 2).unwrap();
        assert_eq!(batched[0].valid, vec![false, true, true, true, false, true, true, true]);
        let second = retrieve_all(&g.slice_positions(4, 8), &bank, 2).unwrap();
        assert_eq!(batched[0].values.slice(s![4.., ..]), second[0].values);
    }

    #[test]
    fn shard_round_trip_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = MemoryTable::<f32>::init(2, 3, 4, 5, &mut rng).unwrap();
        let mut buf = Vec::new();
        table.write_shard(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + table.rows() * 5 * 4);
        let back = MemoryTable::<f32>::read_shard(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(MemoryTable::<f32>::read_shard(cut), Err(LngramError::Checkpoint(_))));
    }

    #[test]
    fn padding_keeps_addressing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut table = MemoryTable::<f32>::init(2, 3, 4, 5, &mut rng).unwrap();
        let row7 = table.row(7).to_vec();
        table.pad_rows(8);
        assert_eq!(table.stored_rows(), 8 * table.rows());
        assert_eq!(table.row(7), row7.as_slice());
    }

    #[test]
    fn bank_validation() {
        assert!(MultiTableBank::<f32>::zeros(&[], 1, 2, 4, 2).is_err());
        assert!(MultiTableBank::<f32>::zeros(&[2, 2], 1, 2, 4, 2).is_err());
        assert!(MultiTableBank::<f32>::zeros(&[2], 0, 2, 4, 2).is_err());
        let bank = MultiTableBank::<f32>::zeros(&[2, 3], 2, 2, 4, 2).unwrap();
        assert_eq!(bank.parameter_count(), 2 * (2 * 16 + 2 * 64) * 2);
    }
}
