//! Effective-depth and significance analyses over captured activations.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LngramError, Result};
use crate::model::{Decoder, LayerStates};
use crate::numerics::{kl_unchecked, softmax_into, Real};
use crate::readout::GateTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub top_k: usize,
    pub bootstrap_trials: usize,
    /// Sequences drawn from the validation split for LogitLens and CKA.
    pub samples: usize,
    /// 1-based layer whose gates are summarized.
    pub gate_layer: usize,
    /// Order whose gates are summarized; the highest order when unset.
    pub gate_order: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { top_k: 3, bootstrap_trials: 10_000, samples: 16, gate_layer: 1, gate_order: None }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.bootstrap_trials == 0 || self.samples == 0 || self.gate_layer == 0 {
            return Err(LngramError::Config("top_k, bootstrap_trials, samples and gate_layer must be positive".into()));
        }
        Ok(())
    }
}

fn csv_err(e: std::io::Error) -> LngramError {
    LngramError::Io(e)
}

/// Mean `KL(p_final || p_l)` for every captured state `l = 0..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlProfile {
    pub kl: Vec<f64>,
    pub positions: usize,
}

impl KlProfile {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,kl").map_err(csv_err)?;
        for (l, k) in self.kl.iter().enumerate() {
            writeln!(w, "{l},{k}").map_err(csv_err)?;
        }
        Ok(())
    }
}

fn row_softmax<F: Real>(logits: &Array2<F>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    let mut scratch = vec![0.0; logits.ncols()];
    for (row, mut o) in logits.rows().into_iter().zip(out.rows_mut()) {
        let r: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        softmax_into(&r, 1.0, &mut scratch);
        o.assign(&ndarray::ArrayView1::from(&scratch));
    }
    out
}

/// Every state goes through the model's final normalization and head, the
/// same path that produces the output logits.
pub fn logitlens_profile<F: Real>(model: &Decoder<F>, samples: &[LayerStates<F>]) -> Result<KlProfile> {
    let depth = model.config.layers + 1;
    let mut sums = vec![0.0f64; depth];
    let mut positions = 0;
    for sample in samples {
        if sample.states.len() != depth {
            return Err(LngramError::Input(format!("expected {depth} states per sample, got {}", sample.states.len())));
        }
        let rows = sample.states[0].nrows();
        if sample.states.iter().any(|s| s.nrows() != rows) {
            return Err(LngramError::Input("states within a sample differ in length".into()));
        }
        let p_final = row_softmax(&model.project_to_vocab(sample.states[depth - 1].view())?);
        for (l, state) in sample.states.iter().enumerate() {
            let p_l = row_softmax(&model.project_to_vocab(state.view())?);
            for (pf, pl) in p_final.rows().into_iter().zip(p_l.rows()) {
                sums[l] += kl_unchecked(pf.as_slice().unwrap(), pl.as_slice().unwrap());
            }
        }
        positions += rows;
    }
    if positions == 0 {
        return Err(LngramError::Input("no positions to analyze".into()));
    }
    Ok(KlProfile { kl: sums.iter().map(|s| s / positions as f64).collect(), positions })
}

fn centered(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    &x - &mean
}

/// Linear CKA with the biased HSIC estimator on column-centered inputs.
pub fn linear_cka(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(LngramError::Input(format!("sample counts differ: {} vs {}", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(LngramError::Degenerate("CKA needs at least two samples".into()));
    }
    let (xc, yc) = (centered(x), centered(y));
    let fro2 = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let xx = fro2(&xc.t().dot(&xc)).sqrt();
    let yy = fro2(&yc.t().dot(&yc)).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(LngramError::Degenerate("input has zero variance".into()));
    }
    Ok(fro2(&yc.t().dot(&xc)) / (xx * yy))
}

/// `s[i][j]` = CKA between baseline layer `i + 1` and variant layer `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub s: Vec<Vec<f64>>,
}

impl CkaMatrix {
    pub fn baseline_layers(&self) -> usize {
        self.s.len()
    }

    pub fn variant_layers(&self) -> usize {
        self.s.first().map_or(0, Vec::len)
    }

    /// Dense matrix, one baseline layer per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in &self.s {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(",")).map_err(csv_err)?;
        }
        Ok(())
    }
}

/// CKA between every pair of layers; each layer is `samples x features`.
pub fn cka_matrix(baseline: &[Array2<f64>], variant: &[Array2<f64>]) -> Result<CkaMatrix> {
    let s = baseline
        .iter()
        .map(|b| variant.iter().map(|v| linear_cka(b.view(), v.view())).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaMatrix { s })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCurve {
    pub k: usize,
    /// `a_j` for variant layers `j = 1..`, in baseline layer units.
    pub a: Vec<f64>,
    /// `a_j - j`.
    pub delta: Vec<f64>,
}

impl AlignmentCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,alignment,delta").map_err(csv_err)?;
        for (j, (a, d)) in self.a.iter().zip(&self.delta).enumerate() {
            writeln!(w, "{},{a},{d}", j + 1).map_err(csv_err)?;
        }
        Ok(())
    }
}

/// Similarity-weighted mean of the top-`k` baseline layer indices for each
/// variant layer. Ties keep the shallower layer.
pub fn soft_alignment(s: &CkaMatrix, k: usize) -> Result<AlignmentCurve> {
    let lb = s.baseline_layers();
    if k == 0 || k > lb {
        return Err(LngramError::Parameter(format!("top-k must lie in 1..={lb}, got {k}")));
    }
    let mut a = Vec::with_capacity(s.variant_layers());
    for j in 0..s.variant_layers() {
        let mut idx: Vec<usize> = (0..lb).collect();
        idx.sort_by(|&p, &q| s.s[q][j].total_cmp(&s.s[p][j]).then(p.cmp(&q)));
        let top = &idx[..k];
        let den: f64 = top.iter().map(|&i| s.s[i][j]).sum();
        if den == 0.0 {
            return Err(LngramError::Degenerate(format!("variant layer {} has no similarity mass", j + 1)));
        }
        // normalizing first keeps point masses and k = 1 exact
        a.push(top.iter().map(|&i| (i + 1) as f64 * (s.s[i][j] / den)).sum::<f64>());
    }
    let delta = a.iter().enumerate().map(|(j, v)| v - (j + 1) as f64).collect();
    Ok(AlignmentCurve { k, a, delta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEntry {
    pub name: String,
    pub instances: usize,
    /// Accuracy of `b` minus accuracy of `a`, in percentage points.
    pub delta_pp: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub trials: usize,
    pub seed: u64,
    pub entries: Vec<BootstrapEntry>,
}

impl BootstrapReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "benchmark,instances,delta_pp,ci_low,ci_high,p_value,p_adjusted").map_err(csv_err)?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{},{},{},{}", e.name, e.instances, e.delta_pp, e.ci_low, e.ci_high, e.p_value, e.p_adjusted).map_err(csv_err)?;
        }
        Ok(())
    }
}

/// `sorted[ceil(q * n) - 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

/// Paired bootstrap over instance indices. The p-value is two-sided from the
/// share of resampled differences on either side of zero, with the usual
/// `+1` correction so it never reaches zero.
pub fn paired_bootstrap(name: &str, correct_a: &[bool], correct_b: &[bool], trials: usize, seed: u64) -> Result<BootstrapEntry> {
    if correct_a.len() != correct_b.len() {
        return Err(LngramError::Input(format!("paired lengths differ: {} vs {}", correct_a.len(), correct_b.len())));
    }
    let n = correct_a.len();
    if n == 0 || trials == 0 {
        return Err(LngramError::Input("bootstrap needs instances and trials".into()));
    }
    let diff: Vec<i32> = correct_a.iter().zip(correct_b).map(|(&a, &b)| b as i32 - a as i32).collect();
    let scale = 100.0 / n as f64;
    let delta_pp = diff.iter().sum::<i32>() as f64 * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(trials);
    for _ in 0..trials {
        let s: i32 = (0..n).map(|_| diff[rng.random_range(0..n)]).sum();
        draws.push(s as f64 * scale);
    }
    let below = draws.iter().filter(|&&d| d <= 0.0).count();
    let above = draws.iter().filter(|&&d| d >= 0.0).count();
    let p_value = (2.0 * (below.min(above) + 1) as f64 / (trials + 1) as f64).min(1.0);
    draws.sort_by(f64::total_cmp);
    Ok(BootstrapEntry {
        name: name.to_string(),
        instances: n,
        delta_pp,
        ci_low: percentile(&draws, 0.025),
        ci_high: percentile(&draws, 0.975),
        p_value,
        p_adjusted: p_value,
    })
}

/// Holm step-down adjustment; results are in input order.
pub fn holm_bonferroni(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// A named pair of per-instance correctness vectors.
pub type PairedBenchmark = (String, Vec<bool>, Vec<bool>);

/// Bootstraps every benchmark (seed offset by its index) and applies Holm
/// correction across the set.
pub fn bootstrap_report(benchmarks: &[PairedBenchmark], trials: usize, seed: u64) -> Result<BootstrapReport> {
    let mut entries = benchmarks
        .iter()
        .enumerate()
        .map(|(i, (name, a, b))| paired_bootstrap(name, a, b, trials, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let adj = holm_bonferroni(&entries.iter().map(|e| e.p_value).collect::<Vec<_>>());
    for (e, p) in entries.iter_mut().zip(adj) {
        e.p_adjusted = p;
    }
    Ok(BootstrapReport { trials, seed, entries })
}

/// Peak gate values used only to lay out report columns for comparison.
pub const REFERENCE_GATE_PEAKS: [f64; 2] = [0.0853, 0.0766];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub order: usize,
    pub positions: usize,
    pub entity_positions: usize,
    pub entity_final_mean: f64,
    pub corpus_median: f64,
    /// `entity_final_mean / corpus_median`.
    pub ratio: f64,
    pub peak: f64,
    pub reference_peaks: [f64; 2],
}

/// Compares the gate of `order` at the listed 1-based positions of each trace
/// with the median gate over every position of every trace.
pub fn gate_summary(traces: &[GateTrace], marked: &[Vec<usize>], order: usize) -> Result<GateSummary> {
    if traces.len() != marked.len() {
        return Err(LngramError::Input("one list of marked positions is needed per trace".into()));
    }
    let mut all = Vec::new();
    let mut hits = Vec::new();
    for (trace, marks) in traces.iter().zip(marked) {
        let series = trace.series(order);
        for &(t, g) in &series {
            all.push(g);
            if marks.contains(&t) {
                hits.push(g);
            }
        }
    }
    if all.is_empty() {
        return Err(LngramError::Input(format!("no gate values for order {order}")));
    }
    if hits.is_empty() {
        return Err(LngramError::Input("no marked position carries a gate value".into()));
    }
    let peak = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let median = if n % 2 == 1 { all[n / 2] } else { 0.5 * (all[n / 2 - 1] + all[n / 2]) };
    if median == 0.0 {
        return Err(LngramError::Degenerate("median gate is zero".into()));
    }
    let mean = hits.iter().sum::<f64>() / hits.len() as f64;
    Ok(GateSummary {
        order,
        positions: n,
        entity_positions: hits.len(),
        entity_final_mean: mean,
        corpus_median: median,
        ratio: mean / median,
        peak,
        reference_peaks: REFERENCE_GATE_PEAKS,
    })
}
