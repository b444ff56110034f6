//! Fine-tuning of the marking-token embeddings and adapters with the base
//! model frozen, gradient verification, and perplexity evaluation.
//!
//! Training runs in `f64`; cast the result to `f32` for inference.

mod backprop;
mod perplexity;

use alloc::vec::Vec;

pub use backprop::{backward, forward_train, loss, loss_and_grad, masked_loss, Gradients, Tape};
pub use perplexity::{
    make_chunks, perplexity_continuous, perplexity_oracle, EvalChunk, EvalConfig, PerplexityReport,
};

use crate::generation::{wrap_evidence, ContextPattern};
use crate::model::{Model, ParamId, Vocabulary};
use crate::retrieval::EvidenceSource;
use crate::{Error, Result, SeededRng, TokenId};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub steps: usize,
    /// Fraction of steps spent warming up linearly from zero.
    pub warmup: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, steps: 100, warmup: 0.10, batch_size: 4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::Config(alloc::format!("warmup fraction {} outside [0, 1]", self.warmup)));
        }
        if self.batch_size == 0 || self.steps == 0 || self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::Config("steps and batch size must be positive, lr non-negative".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        num_traits::Float::ceil(self.warmup * self.steps as f64) as usize
    }

    /// Linear warm-up from 0 to `lr`, then cosine decay to 0 at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.lr * step as f64 / w as f64;
        }
        let span = self.steps.saturating_sub(w).max(1) as f64;
        let progress = ((step - w) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + num_traits::Float::cos(core::f64::consts::PI * progress))
    }
}

/// A context with the positions whose tokens are scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub mask: Vec<bool>,
    /// Offset of the target within its raw window (before evidence).
    pub target_start: usize,
}

impl TrainExample {
    pub fn validate(&self, vocab: Vocabulary) -> Result<()> {
        if self.tokens.len() != self.mask.len() {
            return Err(Error::Shape {
                op: "example",
                detail: alloc::format!("{} tokens, {} mask", self.tokens.len(), self.mask.len()),
            });
        }
        let on: Vec<usize> = (0..self.mask.len()).filter(|&i| self.mask[i]).collect();
        if on.is_empty() || on[0] == 0 {
            return Err(Error::EmptyLossMask);
        }
        if on.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config("loss mask is not one contiguous span".into()));
        }
        if on.iter().any(|&i| vocab.is_mark(self.tokens[i])) {
            return Err(Error::Config("loss mask covers a marking token".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub pattern: ContextPattern,
    pub stride: usize,
    /// Raw window length `T`; targets start in `U{T/2, T-s}`.
    pub window: usize,
    pub query_len: usize,
    pub max_evidence: usize,
    pub use_marks: bool,
    pub max_examples: Option<usize>,
}

/// Uniform draw from `{T/2, ..., T-s}`.
pub fn sample_target_start(rng: &mut SeededRng, window: usize, stride: usize) -> usize {
    rng.range_inclusive(window / 2, window - stride)
}

/// Cuts `stream` into consecutive windows of `T` tokens and turns each into
/// one example: an `s`-token target at a random offset, the tokens before
/// it as input, and evidence retrieved with the last `query_len` input
/// tokens, laid out per the pattern (`[e; x; y]` or `[x; e; y]`).
pub fn build_training_set(
    stream: &[TokenId],
    cfg: &DatasetConfig,
    mut source: Option<&mut dyn EvidenceSource>,
    vocab: Vocabulary,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    let (t, s) = (cfg.window, cfg.stride);
    if s == 0 || t < 2 * s || t / 2 > t - s {
        return Err(Error::Config(alloc::format!("window {t} too small for stride {s}")));
    }
    if stream.len() <= t {
        return Err(Error::CorpusTooShort { need: t, have: stream.len() });
    }
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    let mut w = 0;
    while w + t <= stream.len() && cfg.max_examples.is_none_or(|m| out.len() < m) {
        let win = &stream[w..w + t];
        let p = sample_target_start(&mut rng, t, s);
        let (x, y) = (&win[..p], &win[p..p + s]);
        let evidence = if cfg.pattern.retrieves() {
            let query = &x[x.len().saturating_sub(cfg.query_len)..];
            let src = source.as_deref_mut().ok_or(Error::NoEvidenceSource)?;
            let doc = src.fetch(query, 1)?.into_iter().next().unwrap_or_default();
            wrap_evidence(&doc[..doc.len().min(cfg.max_evidence)], cfg.use_marks, vocab)?
        } else {
            Vec::new()
        };
        let mut tokens = Vec::with_capacity(t + evidence.len());
        match cfg.pattern {
            ContextPattern::Prepend => {
                tokens.extend_from_slice(&evidence);
                tokens.extend_from_slice(x);
            }
            _ => {
                tokens.extend_from_slice(x);
                tokens.extend_from_slice(&evidence);
            }
        }
        let target_at = tokens.len();
        tokens.extend_from_slice(y);
        let mut mask = alloc::vec![false; tokens.len()];
        mask[target_at..].iter_mut().for_each(|m| *m = true);
        out.push(TrainExample { tokens, mask, target_start: p });
        w += t;
    }
    Ok(out)
}

/// Adaptive-moment optimizer state over the trainable units.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    pub fn apply(&mut self, model: &mut Model<f64>, grads: &Gradients, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - num_traits::Float::powi(cfg.beta1, self.t);
        let c2 = 1.0 - num_traits::Float::powi(cfg.beta2, self.t);
        for (&id, g) in grads {
            let theta = model
                .params
                .trainable_slice_mut(id)
                .ok_or_else(|| Error::Invariant(alloc::format!("gradient for missing parameter {id:?}")))?;
            let m = self.m.entry(id).or_insert_with(|| alloc::vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| alloc::vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / (num_traits::Float::sqrt(v[i] / c2) + cfg.eps);
                theta[i] -= update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    /// Token-weighted mean loss of the batch, before the update.
    pub loss: f64,
}

pub struct Trainer {
    pub model: Model<f64>,
    pub cfg: TrainConfig,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model<f64>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.check_shapes()?;
        Ok(Self { model, cfg, adam: Adam::default(), step: 0 })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Loss and token-weighted gradient of a batch.
    pub fn batch_gradient(&self, batch: &[TrainExample]) -> Result<(f64, Gradients)> {
        let vocab = self.model.vocab();
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            ex.validate(vocab)?;
            parts.push(loss_and_grad(&self.model, &ex.tokens, &ex.mask)?);
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        if total == 0 {
            return Err(Error::EmptyLossMask);
        }
        let mut loss = 0.0;
        let mut grads = Gradients::new();
        for (l, count, g) in parts {
            let w = count as f64 / total as f64;
            loss += l * w;
            for (id, values) in g {
                let acc = grads.entry(id).or_insert_with(|| alloc::vec![0.0; values.len()]);
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += v * w;
                }
            }
        }
        Ok((loss, grads))
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[TrainExample]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyLossMask);
        }
        let (loss, grads) = self.batch_gradient(batch)?;
        let lr = self.cfg.lr_at(self.step);
        self.adam.apply(&mut self.model, &grads, lr, &self.cfg)?;
        let metrics = StepMetrics { step: self.step, lr, loss };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs the configured number of steps, cycling through `data` in
    /// order, `batch_size` examples at a time.
    pub fn fit(&mut self, data: &[TrainExample], mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::EmptyLossMask);
        }
        let mut history = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let start = self.step * self.cfg.batch_size;
            let batch: Vec<TrainExample> =
                (0..self.cfg.batch_size).map(|j| data[(start + j) % data.len()].clone()).collect();
            let m = self.train_step(&batch)?;
            on_step(&m);
            history.push(m);
        }
        Ok(history)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates with relative error at most the tolerance.
    pub passed: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// Compares analytic gradients against central differences on up to
/// `samples` trainable coordinates (all of them when there are fewer).
/// The step is `1e-3 · max(|θ|, 1e-3)`; relative error uses
/// `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check(
    model: &Model<f64>,
    example: &TrainExample,
    samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, _, grads) = loss_and_grad(model, &example.tokens, &example.mask)?;
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in model.params.trainable_mask() {
        let len = model.params.trainable_slice(id).map_or(0, <[f64]>::len);
        coords.extend((0..len).map(|i| (id, i)));
    }
    if coords.len() > samples {
        let mut rng = SeededRng::new(seed);
        // Partial Fisher-Yates: the first `samples` entries become a uniform sample.
        for i in 0..samples {
            let j = rng.range_inclusive(i, coords.len() - 1);
            coords.swap(i, j);
        }
        coords.truncate(samples);
    }
    let mut probe = model.clone();
    let mut report = GradCheckReport { checked: 0, passed: 0, worst: 0.0, tolerance };
    for (id, i) in coords {
        let theta = model.params.trainable_slice(id).map(|s| s[i]).unwrap_or(0.0);
        let h = 1e-3 * num_traits::Float::abs(theta).max(1e-3);
        let set = |m: &mut Model<f64>, v: f64| {
            if let Some(s) = m.params.trainable_slice_mut(id) {
                s[i] = v;
            }
        };
        set(&mut probe, theta + h);
        let up = loss(&probe, &example.tokens, &example.mask)?;
        set(&mut probe, theta - h);
        let down = loss(&probe, &example.tokens, &example.mask)?;
        set(&mut probe, theta);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(&id).map_or(0.0, |g| g[i]);
        let denom = num_traits::Float::abs(analytic).max(num_traits::Float::abs(numeric)).max(1e-8);
        let rel = num_traits::Float::abs(analytic - numeric) / denom;
        report.checked += 1;
        if rel <= tolerance {
            report.passed += 1;
        }
        report.worst = report.worst.max(rel);
    }
    Ok(report)
}

/// Fills every adapter `B` with small random values so gradients through
/// the adapters are not trivially zero.
pub fn randomize_adapter_b(model: &mut Model<f64>, std: f64, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for layer in &mut model.params.layers {
        for pair in layer.lora.iter_mut().flatten() {
            pair.b.data_mut().iter_mut().for_each(|v| *v = rng.normal() * std);
        }
    }
}
