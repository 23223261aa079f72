//! Optimization, evaluation and perplexity.
//!
//! Parameters are split into optimizer groups by their [`ParamGroup`] tag:
//! backbone, readout and codec tensors use decoupled weight decay on
//! matrices; table entries use a scaled learning rate and no decay.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LngramError, Result};
use crate::model::Decoder;
use crate::numerics::Real;
use crate::params::ParamGroup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub table_lr_multiplier: f64,
    pub table_weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.01,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            table_lr_multiplier: 5.0,
            table_weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 16,
            seq_len: 128,
            total_tokens: 1 << 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.table_lr_multiplier > 0.0) {
            return Err(LngramError::Config("table_lr_multiplier must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(LngramError::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) || !(self.grad_clip > 0.0) {
            return Err(LngramError::Config("learning_rate and grad_clip must be positive, min_lr_ratio in [0, 1]".into()));
        }
        if self.weight_decay < 0.0 || self.table_weight_decay < 0.0 {
            return Err(LngramError::Config("weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(LngramError::Config("betas must lie in [0, 1) and adam_eps be positive".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(LngramError::Config("batch_size and seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn steps(&self) -> usize {
        self.total_tokens / self.tokens_per_step()
    }

    pub fn schedule(&self) -> Schedule {
        let total = self.steps();
        Schedule {
            peak: self.learning_rate,
            floor: self.learning_rate * self.min_lr_ratio,
            warmup: (self.warmup_ratio * total as f64).ceil() as usize,
            total,
        }
    }

    fn group_rule(&self, group: ParamGroup) -> (f64, f64) {
        match group {
            ParamGroup::Table => (self.table_lr_multiplier, self.table_weight_decay),
            ParamGroup::Backbone | ParamGroup::Readout | ParamGroup::Codec => (1.0, self.weight_decay),
        }
    }
}

/// Linear warmup to the peak, then cosine decay to the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup + 1);
        let progress = if span == 0 { 1.0 } else { ((step - self.warmup) as f64 / span as f64).min(1.0) };
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One optimizer step's log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr_backbone: f64,
    pub lr_table: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,loss,grad_norm,lr_backbone,lr_table";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss, self.grad_norm, self.lr_backbone, self.lr_table)
    }
}

/// Adam moments for every tensor of a model, in [`Decoder::tensors`] order.
pub struct Optimizer<F: Real> {
    config: TrainConfig,
    schedule: Schedule,
    step: usize,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(model: &Decoder<F>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Array2<F>> = model.tensors().iter().map(|(_, _, t)| Array2::zeros(t.raw_dim())).collect();
        Ok(Self { config: config.clone(), schedule: config.schedule(), step: 0, m: zeros.clone(), v: zeros })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Effective learning rate of `group` at `step`.
    pub fn lr(&self, group: ParamGroup, step: usize) -> f64 {
        self.schedule.lr(step) * self.config.group_rule(group).0
    }

    /// Clips `grads` in place to the configured global norm and applies one
    /// update. Returns the pre-clip norm.
    pub fn apply(&mut self, model: &mut Decoder<F>, grads: &mut Decoder<F>) -> f64 {
        let norm = clip_global_norm(grads, self.config.grad_clip);
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let base = self.schedule.lr(self.step);
        let (b1, b2, eps) = (F::lit(c.beta1), F::lit(c.beta2), c.adam_eps);
        let grads = grads.tensors();
        for (((((_, group, p), (_, _, g)), m), v), _) in
            model.tensors_mut().into_iter().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()).zip(0..)
        {
            let (mult, wd) = c.group_rule(group);
            let lr = base * mult;
            let decay = if p.nrows() > 1 && wd > 0.0 { F::lit(1.0 - lr * wd) } else { F::one() };
            let step_size = F::lit(lr / bc1);
            let bc2_sqrt = F::lit(bc2.sqrt());
            let eps = F::lit(eps);
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *p = *p * decay - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            });
        }
        self.step += 1;
        norm
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut Decoder<F>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, _, g) in grads.tensors() {
        sq += g.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = F::lit(max_norm / norm);
        for (_, _, g) in grads.tensors_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Samples `batch` random windows of `seq_len + 1` bytes; returns inputs and
/// next-byte targets.
pub fn sample_batch<R: Rng>(data: &[u8], batch: usize, seq_len: usize, rng: &mut R) -> Result<(Vec<u32>, Vec<u32>)> {
    if data.len() < seq_len + 1 {
        return Err(LngramError::Input(format!("{} bytes cannot fill a window of {}", data.len(), seq_len + 1)));
    }
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    for _ in 0..batch {
        let start = rng.random_range(0..=data.len() - seq_len - 1);
        inputs.extend(data[start..start + seq_len].iter().map(|&b| b as u32));
        targets.extend(data[start + 1..start + seq_len + 1].iter().map(|&b| b as u32));
    }
    Ok((inputs, targets))
}

/// Trains `model` in place for `config.steps()` steps on random windows of
/// `data`, calling `on_step` after every update. A non-finite loss aborts
/// before the update is applied.
pub fn train_loop<F: Real>(
    model: &mut Decoder<F>,
    data: &[u8],
    config: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    let mut opt = Optimizer::new(model, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grads = model.zeros_like();
    let mut curve = Vec::with_capacity(config.steps());
    for step in 0..config.steps() {
        let (inputs, targets) = sample_batch(data, config.batch_size, config.seq_len, &mut rng)?;
        for (_, _, g) in grads.tensors_mut() {
            g.fill(F::zero());
        }
        let loss = model.loss_and_grad(&inputs, &targets, config.seq_len, &mut grads)?;
        if !loss.is_finite() {
            return Err(LngramError::NonFiniteLoss { step, loss });
        }
        let log = StepLog {
            step,
            loss,
            grad_norm: 0.0,
            lr_backbone: opt.lr(ParamGroup::Backbone, step),
            lr_table: opt.lr(ParamGroup::Table, step),
        };
        let grad_norm = opt.apply(model, &mut grads);
        let log = StepLog { grad_norm, ..log };
        on_step(&log);
        curve.push(log);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplBucket {
    /// Prefix positions `[start, end)` within each evaluation window.
    pub start: usize,
    pub end: usize,
    pub tokens: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    pub buckets: Vec<PplBucket>,
}

/// Perplexity over `data`, cut into consecutive windows of `seq_len`
/// predictions so every byte after the first is predicted exactly once.
/// Bucket statistics group predictions by their position in the window.
pub fn eval_ppl<F: Real>(model: &Decoder<F>, data: &[u8], seq_len: usize, batch: usize, bucket: usize) -> Result<PplReport> {
    if data.len() < 2 {
        return Err(LngramError::Input("need at least two bytes to evaluate".into()));
    }
    if seq_len == 0 || batch == 0 || bucket == 0 {
        return Err(LngramError::Input("seq_len, batch and bucket must be positive".into()));
    }
    let n_buckets = seq_len.div_ceil(bucket);
    let mut sums = vec![0.0f64; n_buckets];
    let mut counts = vec![0usize; n_buckets];
    let windows: Vec<usize> = (0..data.len() - 1).step_by(seq_len).collect();
    let full: Vec<usize> = windows.iter().copied().filter(|&s| s + seq_len < data.len()).collect();
    let mut score = |starts: &[usize], len: usize| -> Result<()> {
        let inputs: Vec<u32> = starts.iter().flat_map(|&s| data[s..s + len].iter().map(|&b| b as u32)).collect();
        let (logits, _) = model.forward(&inputs, len)?;
        for (w, &s) in starts.iter().enumerate() {
            for t in 0..len {
                let row = logits.row(w * len + t);
                let target = data[s + t + 1] as usize;
                let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x)).as_f64();
                let z: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
                sums[t / bucket] += z.ln() + max - row[target].as_f64();
                counts[t / bucket] += 1;
            }
        }
        Ok(())
    };
    for chunk in full.chunks(batch) {
        score(chunk, seq_len)?;
    }
    if let Some(&last) = windows.last().filter(|&&s| s + seq_len >= data.len()) {
        score(&[last], data.len() - 1 - last)?;
    }
    let tokens: usize = counts.iter().sum();
    let mean_nll = sums.iter().sum::<f64>() / tokens as f64;
    let buckets = (0..n_buckets)
        .filter(|&b| counts[b] > 0)
        .map(|b| PplBucket {
            start: b * bucket,
            end: ((b + 1) * bucket).min(seq_len),
            tokens: counts[b],
            perplexity: (sums[b] / counts[b] as f64).exp(),
        })
        .collect();
    Ok(PplReport { perplexity: mean_nll.exp(), mean_nll, tokens, buckets })
}
