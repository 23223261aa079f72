//! Toy language-model comparison: a decoder with memory branches against a
//! baseline whose FFN is widened until the dense parameter counts match.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{gate_summary, GateSummary};
use crate::corpus::{gen_corpus, Corpus, CorpusSpec};
use crate::error::{LngramError, Result};
use crate::model::{Decoder, DecoderConfig};
use crate::params::ParamCounts;
use crate::readout::GateTrace;
use crate::train::{eval_ppl, train_loop, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub seeds: Vec<u64>,
    /// Validation prefix scored for perplexity; 0 = all of it.
    pub eval_tokens: usize,
    pub eval_batch: usize,
    /// Layer (1-based) whose highest-order gate is summarized.
    pub gate_layer: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            model: DecoderConfig::default(),
            train: TrainConfig { learning_rate: 2e-3, batch_size: 8, total_tokens: 8 * 128 * 300, ..Default::default() },
            corpus: CorpusSpec::default(),
            seeds: vec![1, 2, 3],
            eval_tokens: 65_536,
            eval_batch: 16,
            gate_layer: 1,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.model.insert_layers.is_empty() {
            return Err(LngramError::Config("the comparison needs at least one memory layer".into()));
        }
        if !self.model.insert_layers.contains(&self.gate_layer) {
            return Err(LngramError::Config(format!("gate layer {} has no memory branch", self.gate_layer)));
        }
        if self.seeds.is_empty() || self.eval_batch == 0 {
            return Err(LngramError::Config("need at least one seed and a positive eval batch".into()));
        }
        if self.corpus.seq_len != self.train.seq_len {
            return Err(LngramError::Config("corpus and training sequence lengths differ".into()));
        }
        Ok(())
    }
}

/// Baseline config with the memory branches removed and the FFN width chosen
/// so its total parameter count is closest to the dense (non-table) count of
/// `with_memory`.
pub fn matched_baseline(with_memory: &DecoderConfig) -> Result<DecoderConfig> {
    let target = count_parameters(with_memory)?.dense();
    let base = with_memory.without_lngram();
    let have = count_parameters(&base)?.total();
    // each FFN unit adds an input column, a bias and an output row per layer
    let unit = base.layers * (2 * base.model_dim + 1);
    let extra = if target > have { (target - have + unit / 2) / unit } else { 0 };
    Ok(DecoderConfig { ffn_dim: base.ffn_dim + extra, ..base })
}

fn count_parameters(config: &DecoderConfig) -> Result<ParamCounts> {
    Ok(Decoder::<f32>::init(config, &mut ChaCha8Rng::seed_from_u64(0))?.parameter_counts())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub variant: String,
    pub seed: u64,
    pub params: ParamCounts,
    pub final_train_loss: f64,
    pub val_ppl: f64,
    pub seconds: f64,
    /// Memory variant only.
    pub gate: Option<GateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub baseline_ffn: usize,
    pub runs: Vec<ToyRun>,
    pub baseline_median_ppl: f64,
    pub lngram_median_ppl: f64,
    /// `1 - lngram / baseline`.
    pub relative_improvement: f64,
    pub median_gate_ratio: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gate traces over consecutive validation windows of at most `limit` bytes
/// (0 = all), each with the 1-based positions of planted entities' last bytes.
pub fn entity_gate_traces(
    model: &Decoder<f32>,
    corpus: &Corpus,
    seq_len: usize,
    batch: usize,
    layer: usize,
    limit: usize,
) -> Result<(Vec<GateTrace>, Vec<Vec<usize>>)> {
    let data = &corpus.val;
    let span = if limit == 0 { data.len() } else { limit.min(data.len()) };
    let starts: Vec<usize> = (0..span.saturating_sub(seq_len) + 1).step_by(seq_len).filter(|&s| s + seq_len <= data.len()).collect();
    let mut traces: Vec<GateTrace> = Vec::with_capacity(starts.len());
    let mut marks = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(batch.max(1)) {
        let tokens: Vec<u32> = chunk.iter().flat_map(|&s| data[s..s + seq_len].iter().map(|&b| b as u32)).collect();
        let (_, cache) = model.forward(&tokens, seq_len)?;
        for (w, &s) in chunk.iter().enumerate() {
            traces.push(model.gate_trace(&cache, layer, w)?);
            marks.push(
                corpus.val_index.iter().filter(|e| e.end > s && e.end <= s + seq_len).map(|e| e.end - s).collect::<Vec<_>>(),
            );
        }
    }
    Ok((traces, marks))
}

/// Gate of `order` at entity-final positions against the corpus median.
pub fn entity_gate_summary(
    model: &Decoder<f32>,
    corpus: &Corpus,
    seq_len: usize,
    batch: usize,
    layer: usize,
    order: usize,
    limit: usize,
) -> Result<GateSummary> {
    let (traces, marks) = entity_gate_traces(model, corpus, seq_len, batch, layer, limit)?;
    gate_summary(&traces, &marks, order)
}

/// Trains both variants for every seed and scores them on the validation
/// split. `log` receives one line per finished run.
pub fn run_toy(config: &ToyConfig, mut log: impl FnMut(&str)) -> Result<ToyReport> {
    config.validate()?;
    let corpus = gen_corpus(&config.corpus)?;
    let baseline_cfg = matched_baseline(&config.model)?;
    let eval_len = if config.eval_tokens == 0 { corpus.val.len() } else { (config.eval_tokens + 1).min(corpus.val.len()) };
    let seq_len = config.train.seq_len;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        for (variant, cfg) in [("baseline", &baseline_cfg), ("lngram", &config.model)] {
            let start = Instant::now();
            let mut model = Decoder::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let curve = train_loop(&mut model, &corpus.train, &config.train, seed, |_| {})?;
            let ppl = eval_ppl(&model, &corpus.val[..eval_len], seq_len, config.eval_batch, seq_len)?;
            let gate = if cfg.insert_layers.is_empty() {
                None
            } else {
                Some(entity_gate_summary(&model, &corpus, seq_len, config.eval_batch, config.gate_layer, cfg.lngram.max_order(), eval_len)?)
            };
            let run = ToyRun {
                variant: variant.into(),
                seed,
                params: model.parameter_counts(),
                final_train_loss: curve.last().map_or(f64::NAN, |l| l.loss),
                val_ppl: ppl.perplexity,
                seconds: start.elapsed().as_secs_f64(),
                gate,
            };
            log(&format!(
                "{variant} seed {seed}: val ppl {:.4}, train loss {:.4}, {:.1}s{}",
                run.val_ppl,
                run.final_train_loss,
                run.seconds,
                run.gate.as_ref().map_or(String::new(), |g| format!(", gate ratio {:.3}", g.ratio))
            ));
            runs.push(run);
        }
    }
    let ppl_of = |v: &str| runs.iter().filter(|r| r.variant == v).map(|r| r.val_ppl).collect::<Vec<_>>();
    let baseline_median_ppl = median(&ppl_of("baseline"));
    let lngram_median_ppl = median(&ppl_of("lngram"));
    let ratios: Vec<f64> = runs.iter().filter_map(|r| r.gate.as_ref().map(|g| g.ratio)).collect();
    Ok(ToyReport {
        baseline_ffn: baseline_cfg.ffn_dim,
        runs,
        baseline_median_ppl,
        lngram_median_ppl,
        relative_improvement: 1.0 - lngram_median_ppl / baseline_median_ppl,
        median_gate_ratio: median(&ratios),
    })
}
