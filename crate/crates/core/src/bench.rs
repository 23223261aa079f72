//! Prefill/decode throughput, latency and memory accounting.
//!
//! Memory figures come from [`CountingAlloc`], which must be installed as the
//! global allocator of the measuring binary; without it every byte count
//! reads zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LngramError, Result};
use crate::memory::TableResidency;
use crate::model::{DecodeSession, Decoder};
use crate::numerics::{argmax, Real};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator that tracks live and peak heap bytes.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

pub fn live_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Resets the peak to the current live size and returns that size.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub prompt_len: usize,
    pub decode_steps: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub residency: TableResidency,
    /// Multiplies the stored rows of every table; the extra rows are never
    /// addressed.
    pub row_padding: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { prompt_len: 128, decode_steps: 128, repetitions: 5, warmup: 1, residency: TableResidency::InCore, row_padding: 1 }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.decode_steps == 0 || self.repetitions == 0 || self.warmup == 0 || self.row_padding == 0 {
            return Err(LngramError::Config("prompt_len, decode_steps, repetitions, warmup and row_padding must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub residency: TableResidency,
    pub prefill_tokens_per_sec: f64,
    pub prefill_latency_ms: f64,
    pub prefill_peak_memory_mb: f64,
    pub decode_tokens_per_sec: f64,
    pub decode_ms_per_token: f64,
    /// Max minus min decode ms/token over repetitions.
    pub decode_ms_per_token_spread: f64,
    pub decode_peak_memory_mb: f64,
    pub decode_peak_incremental_memory_mb: f64,
    /// Greedy outputs identical across repetitions.
    pub deterministic: bool,
}

const MB: f64 = 1024.0 * 1024.0;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn param_bytes<F: Real>(model: &Decoder<F>) -> usize {
    model.tensors().iter().map(|(_, _, t)| t.len() * std::mem::size_of::<F>()).sum()
}

pub fn bench_prompt(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Decodes `steps` greedy tokens after feeding `prompt` and returns, for each
/// generated step, the incremental memory of that step (heap bytes allocated
/// above the live size at the start of the step, plus the cache rows the
/// step writes), together with the generated tokens.
pub fn decode_incremental_profile<F: Real>(model: &Decoder<F>, prompt: &[u32], steps: usize, residency: TableResidency) -> Result<(Vec<usize>, Vec<u32>)> {
    let mut session = DecodeSession::new(model, prompt.len() + steps, residency);
    let mut next = 0;
    for &t in prompt {
        next = argmax(session.step(t)?) as u32;
    }
    let mut increments = Vec::with_capacity(steps);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let base = reset_peak();
        next = argmax(session.step(next)?) as u32;
        increments.push(peak_bytes() - base + session.state_bytes_per_step());
        out.push(next);
    }
    Ok((increments, out))
}

/// Medians over `repetitions` after `warmup` unmeasured runs.
pub fn run_bench<F: Real>(model: &Decoder<F>, config: &BenchConfig, seed: u64) -> Result<BenchReport> {
    config.validate()?;
    let padded;
    let model = if config.row_padding > 1 {
        let mut m = model.clone();
        for layer in m.layers.iter_mut().filter_map(|l| l.lngram.as_mut()) {
            for t in layer.bank.groups.iter_mut().flatten() {
                t.pad_rows(config.row_padding);
            }
        }
        padded = m;
        &padded
    } else {
        model
    };
    let params = param_bytes(model) as f64;
    let prompt = bench_prompt(config.prompt_len, model.config.vocab_size, seed);
    let prefill_len = config.prompt_len.min(model.config.max_seq_len);
    let mut prefill_ms = Vec::new();
    let mut prefill_peak = Vec::new();
    let mut decode_ms = Vec::new();
    let mut decode_peak = Vec::new();
    let mut decode_incr = Vec::new();
    let mut outputs: Vec<Vec<u32>> = Vec::new();
    for rep in 0..config.warmup + config.repetitions {
        let base = reset_peak();
        let t0 = Instant::now();
        let logits = model.forward_logits(&prompt[..prefill_len])?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let peak = peak_bytes() - base;
        drop(logits);

        let base = reset_peak();
        let t0 = Instant::now();
        let (incr, generated) = decode_incremental_profile(model, &prompt, config.decode_steps, config.residency)?;
        let dms = t0.elapsed().as_secs_f64() * 1e3 / (config.prompt_len + config.decode_steps) as f64;
        let dpeak = peak_bytes().max(base) - base;
        if rep >= config.warmup {
            prefill_ms.push(ms);
            prefill_peak.push(peak as f64);
            decode_ms.push(dms);
            decode_peak.push(dpeak as f64);
            decode_incr.push(incr.iter().copied().max().unwrap_or(0) as f64);
            outputs.push(generated);
        }
    }
    let deterministic = outputs.windows(2).all(|w| w[0] == w[1]);
    let spread = decode_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max) - decode_ms.iter().copied().fold(f64::INFINITY, f64::min);
    let prefill_latency_ms = median(prefill_ms);
    let decode_ms_per_token = median(decode_ms);
    Ok(BenchReport {
        residency: config.residency,
        prefill_tokens_per_sec: prefill_len as f64 / (prefill_latency_ms / 1e3),
        prefill_latency_ms,
        prefill_peak_memory_mb: (params + median(prefill_peak)) / MB,
        decode_tokens_per_sec: 1e3 / decode_ms_per_token,
        decode_ms_per_token,
        decode_ms_per_token_spread: spread,
        decode_peak_memory_mb: (params + median(decode_peak)) / MB,
        decode_peak_incremental_memory_mb: median(decode_incr) / MB,
        deterministic,
    })
}

/// One metric row: baseline, memory-augmented and their ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub metric: String,
    pub baseline: f64,
    pub lngram: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchComparison {
    pub residency: TableResidency,
    pub rows: Vec<BenchRow>,
    pub baseline: BenchReport,
    pub lngram: BenchReport,
}

pub fn compare_reports(baseline: BenchReport, lngram: BenchReport) -> BenchComparison {
    let pairs = [
        ("Prefill Throughput (tok/s)", baseline.prefill_tokens_per_sec, lngram.prefill_tokens_per_sec),
        ("Prefill Latency (ms)", baseline.prefill_latency_ms, lngram.prefill_latency_ms),
        ("Prefill Peak Memory (MB)", baseline.prefill_peak_memory_mb, lngram.prefill_peak_memory_mb),
        ("Decode Throughput (tok/s)", baseline.decode_tokens_per_sec, lngram.decode_tokens_per_sec),
        ("Decode Latency (ms/token)", baseline.decode_ms_per_token, lngram.decode_ms_per_token),
        ("Decode Peak Memory (MB)", baseline.decode_peak_memory_mb, lngram.decode_peak_memory_mb),
        ("Decode Peak Incremental Memory (MB)", baseline.decode_peak_incremental_memory_mb, lngram.decode_peak_incremental_memory_mb),
    ];
    let rows = pairs
        .into_iter()
        .map(|(m, b, l)| BenchRow { metric: m.to_string(), baseline: b, lngram: l, ratio: if b == 0.0 { f64::NAN } else { l / b } })
        .collect();
    BenchComparison { residency: lngram.residency, rows, baseline, lngram }
}
