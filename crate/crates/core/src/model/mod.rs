//! Pre-norm decoder-only transformer with optional low-rank adapters.
//!
//! Layer structure: `x += Wo·attn(rope(LN(x)·Wq), rope(LN(x)·Wk), LN(x)·Wv)`
//! followed by `x += W2·gelu(W1·LN(x))`, then a final norm and an untied
//! output head. Projections carry no bias. Adapters add
//! `(alpha/r)·(x·A)·B` to the selected projections.

mod forward;
mod lora;
mod vocab;

pub use forward::{apply_rope, OutputRows, RopeTable};
pub use lora::lora_delta;
pub use vocab::{ByteTokenizer, Vocabulary, BOS_ID, PAD_ID};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::kvcache::KvCache;
use crate::numerics::{Real, SeededRng, Tensor2};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositionScheme {
    Rotary,
    LearnedAbsolute,
}

impl PositionScheme {
    pub fn name(self) -> &'static str {
        match self {
            PositionScheme::Rotary => "rotary",
            PositionScheme::LearnedAbsolute => "learned-absolute",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rotary" => Some(PositionScheme::Rotary),
            "learned-absolute" | "learned" => Some(PositionScheme::LearnedAbsolute),
            _ => None,
        }
    }
}

/// Which attention projections carry adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LoraTargets {
    /// Key and value projections only.
    Kv,
    /// Query, key, value and output projections.
    Qkvo,
}

impl LoraTargets {
    pub fn name(self) -> &'static str {
        match self {
            LoraTargets::Kv => "kv",
            LoraTargets::Qkvo => "qkvo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kv" => Some(LoraTargets::Kv),
            "qkvo" => Some(LoraTargets::Qkvo),
            _ => None,
        }
    }

    pub fn includes(self, p: Projection) -> bool {
        match self {
            LoraTargets::Kv => matches!(p, Projection::Key | Projection::Value),
            LoraTargets::Qkvo => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Query, Projection::Key, Projection::Value, Projection::Output];

    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Base vocabulary size, excluding the two marking tokens.
    pub vocab_base: usize,
    /// Maximum number of positions a cache may hold.
    pub max_seq: usize,
    /// Adapter rank; 0 disables adapters.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: LoraTargets,
    pub position: PositionScheme,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 256,
            heads: 4,
            mlp_dim: 1024,
            vocab_base: vocab::BYTE_VOCAB,
            max_seq: 4096,
            lora_rank: 16,
            lora_alpha: 16.0,
            lora_targets: LoraTargets::Kv,
            position: PositionScheme::Rotary,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and examples.
    pub fn tiny(layers: usize, hidden: usize, heads: usize) -> Self {
        Self { layers, hidden, heads, mlp_dim: 2 * hidden, max_seq: 512, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_base)
    }

    /// Full vocabulary size, marking tokens included.
    pub fn vocab_size(&self) -> usize {
        self.vocab_base + 2
    }

    pub fn lora_scale(&self) -> f64 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f64
        }
    }

    pub fn has_lora(&self, p: Projection) -> bool {
        self.lora_rank > 0 && self.lora_targets.includes(p)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_dim == 0 {
            return fail(format!("dimensions must be positive: {self:?}"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.position == PositionScheme::Rotary && !self.head_dim().is_multiple_of(2) {
            return fail(format!("rotary encoding needs an even head dimension, got {}", self.head_dim()));
        }
        if self.max_seq == 0 {
            return fail("max_seq must be at least 1".into());
        }
        if self.vocab_base == 0 {
            return fail("empty base vocabulary".into());
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T = f32> {
    /// `[hidden × r]`
    pub a: Tensor2<T>,
    /// `[r × hidden]`
    pub b: Tensor2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub ln1_gain: Tensor2<T>,
    pub ln1_bias: Tensor2<T>,
    pub wq: Tensor2<T>,
    pub wk: Tensor2<T>,
    pub wv: Tensor2<T>,
    pub wo: Tensor2<T>,
    pub ln2_gain: Tensor2<T>,
    pub ln2_bias: Tensor2<T>,
    pub w1: Tensor2<T>,
    pub w2: Tensor2<T>,
    /// Indexed by [`Projection`] order: q, k, v, o.
    pub lora: [Option<LoraPair<T>>; 4],
}

impl<T: Real> LayerParams<T> {
    pub fn lora(&self, p: Projection) -> Option<&LoraPair<T>> {
        self.lora[p as usize].as_ref()
    }

    pub fn lora_mut(&mut self, p: Projection) -> Option<&mut LoraPair<T>> {
        self.lora[p as usize].as_mut()
    }

    pub fn weight(&self, p: Projection) -> &Tensor2<T> {
        match p {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
            Projection::Output => &self.wo,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    /// `[(vocab_base + 2) × hidden]`; the last two rows are the marking tokens.
    pub embed: Tensor2<T>,
    /// `[max_seq × hidden]`, present only for learned absolute positions.
    pub pos_embed: Option<Tensor2<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Tensor2<T>,
    pub final_bias: Tensor2<T>,
    /// `[hidden × vocab]`
    pub head: Tensor2<T>,
}

/// Identifies one trainable unit during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    /// Embedding row of `<MARK_L>` (false) or `<MARK_R>` (true).
    MarkRow { right: bool },
    LoraA { layer: usize, proj: Projection },
    LoraB { layer: usize, proj: Projection },
}

impl<T: Real> ModelParams<T> {
    /// Deterministic initialisation. Adapter `B` matrices start at zero and
    /// the marking-token rows at the mean of the base embedding rows.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let h = cfg.hidden;
        let inv_h = 1.0 / num_traits::Float::sqrt(h as f64);
        let mut embed = Tensor2::<T>::randn(cfg.vocab_size(), h, 1.0, &mut rng);
        let mut mean = alloc::vec![0.0f64; h];
        for r in 0..cfg.vocab_base {
            for (m, v) in mean.iter_mut().zip(embed.row(r)) {
                *m += v.as_f64();
            }
        }
        for r in cfg.vocab_base..cfg.vocab_size() {
            for (c, m) in mean.iter().enumerate() {
                embed.set(r, c, T::from_f64(m / cfg.vocab_base as f64));
            }
        }
        let pos_embed = match cfg.position {
            PositionScheme::Rotary => None,
            PositionScheme::LearnedAbsolute => Some(Tensor2::randn(cfg.max_seq, h, 0.5, &mut rng)),
        };
        let ones = || Tensor2::from_fn(1, h, |_, _| T::one());
        let zeros = || Tensor2::zeros(1, h);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let wq = Tensor2::randn(h, h, inv_h, &mut rng);
            let wk = Tensor2::randn(h, h, inv_h, &mut rng);
            let wv = Tensor2::randn(h, h, inv_h, &mut rng);
            let wo = Tensor2::randn(h, h, inv_h, &mut rng);
            let w1 = Tensor2::randn(h, cfg.mlp_dim, inv_h, &mut rng);
            let w2 = Tensor2::randn(cfg.mlp_dim, h, 1.0 / num_traits::Float::sqrt(cfg.mlp_dim as f64), &mut rng);
            let mut lora: [Option<LoraPair<T>>; 4] = [None, None, None, None];
            for p in Projection::ALL {
                if cfg.has_lora(p) {
                    lora[p as usize] = Some(LoraPair {
                        a: Tensor2::randn(h, cfg.lora_rank, inv_h, &mut rng),
                        b: Tensor2::zeros(cfg.lora_rank, h),
                    });
                }
            }
            layers.push(LayerParams {
                ln1_gain: ones(),
                ln1_bias: zeros(),
                wq,
                wk,
                wv,
                wo,
                ln2_gain: ones(),
                ln2_bias: zeros(),
                w1,
                w2,
                lora,
            });
        }
        let head = Tensor2::randn(h, cfg.vocab_size(), inv_h, &mut rng);
        Ok(Self { embed, pos_embed, layers, final_gain: ones(), final_bias: zeros(), head })
    }

    /// All tensors in checkpoint order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2<T>)> {
        let mut out: Vec<(String, &Tensor2<T>)> = Vec::new();
        out.push(("embed".into(), &self.embed));
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &l.ln1_gain));
            out.push((format!("layers.{i}.ln1.bias"), &l.ln1_bias));
            out.push((format!("layers.{i}.attn.wq"), &l.wq));
            out.push((format!("layers.{i}.attn.wk"), &l.wk));
            out.push((format!("layers.{i}.attn.wv"), &l.wv));
            out.push((format!("layers.{i}.attn.wo"), &l.wo));
            out.push((format!("layers.{i}.ln2.gain"), &l.ln2_gain));
            out.push((format!("layers.{i}.ln2.bias"), &l.ln2_bias));
            out.push((format!("layers.{i}.mlp.w1"), &l.w1));
            out.push((format!("layers.{i}.mlp.w2"), &l.w2));
            for p in Projection::ALL {
                if let Some(pair) = l.lora(p) {
                    out.push((format!("layers.{i}.lora.{}.a", p.short()), &pair.a));
                    out.push((format!("layers.{i}.lora.{}.b", p.short()), &pair.b));
                }
            }
        }
        out.push(("final_norm.gain".into(), &self.final_gain));
        out.push(("final_norm.bias".into(), &self.final_bias));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable counterpart of [`ModelParams::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor2<T>)> {
        let mut out: Vec<(String, &mut Tensor2<T>)> = Vec::new();
        out.push(("embed".into(), &mut self.embed));
        if let Some(p) = &mut self.pos_embed {
            out.push(("pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &mut l.ln1_gain));
            out.push((format!("layers.{i}.ln1.bias"), &mut l.ln1_bias));
            out.push((format!("layers.{i}.attn.wq"), &mut l.wq));
            out.push((format!("layers.{i}.attn.wk"), &mut l.wk));
            out.push((format!("layers.{i}.attn.wv"), &mut l.wv));
            out.push((format!("layers.{i}.attn.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ln2.gain"), &mut l.ln2_gain));
            out.push((format!("layers.{i}.ln2.bias"), &mut l.ln2_bias));
            out.push((format!("layers.{i}.mlp.w1"), &mut l.w1));
            out.push((format!("layers.{i}.mlp.w2"), &mut l.w2));
            for (slot, p) in l.lora.iter_mut().zip(Projection::ALL) {
                if let Some(pair) = slot {
                    out.push((format!("layers.{i}.lora.{}.a", p.short()), &mut pair.a));
                    out.push((format!("layers.{i}.lora.{}.b", p.short()), &mut pair.b));
                }
            }
        }
        out.push(("final_norm.gain".into(), &mut self.final_gain));
        out.push(("final_norm.bias".into(), &mut self.final_bias));
        out.push(("head".into(), &mut self.head));
        out
    }

    /// Parameters updated during fine-tuning: both marking-token rows and
    /// every adapter matrix. Everything else is frozen.
    pub fn trainable_mask(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![ParamId::MarkRow { right: false }, ParamId::MarkRow { right: true }];
        for (layer, l) in self.layers.iter().enumerate() {
            for proj in Projection::ALL {
                if l.lora(proj).is_some() {
                    ids.push(ParamId::LoraA { layer, proj });
                    ids.push(ParamId::LoraB { layer, proj });
                }
            }
        }
        ids
    }

    /// Values of one trainable unit, flattened.
    pub fn trainable_slice(&self, id: ParamId) -> Option<&[T]> {
        match id {
            ParamId::MarkRow { right } => {
                let row = self.embed.rows() - 2 + right as usize;
                Some(self.embed.row(row))
            }
            ParamId::LoraA { layer, proj } => self.layers.get(layer)?.lora(proj).map(|p| p.a.data()),
            ParamId::LoraB { layer, proj } => self.layers.get(layer)?.lora(proj).map(|p| p.b.data()),
        }
    }

    pub fn trainable_slice_mut(&mut self, id: ParamId) -> Option<&mut [T]> {
        match id {
            ParamId::MarkRow { right } => {
                let row = self.embed.rows() - 2 + right as usize;
                Some(self.embed.row_mut(row))
            }
            ParamId::LoraA { layer, proj } => {
                self.layers.get_mut(layer)?.lora_mut(proj).map(|p| p.a.data_mut())
            }
            ParamId::LoraB { layer, proj } => {
                self.layers.get_mut(layer)?.lora_mut(proj).map(|p| p.b.data_mut())
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            embed: self.embed.cast(),
            pos_embed: self.pos_embed.as_ref().map(Tensor2::cast),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                    lora: [0, 1, 2, 3].map(|i| {
                        l.lora[i].as_ref().map(|p| LoraPair { a: p.a.cast(), b: p.b.cast() })
                    }),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            head: self.head.cast(),
        }
    }
}

/// Configuration and weights together.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// Empty cache sized for this model.
    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.cfg.layers, self.cfg.hidden, self.cfg.max_seq)
    }

    pub fn vocab(&self) -> Vocabulary {
        self.cfg.vocab()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    /// Checks that tensor shapes agree with the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.cfg;
        c.validate()?;
        let h = c.hidden;
        let p = &self.params;
        let mut bad = Vec::new();
        fn expect<T: Real>(bad: &mut Vec<String>, name: &str, t: &Tensor2<T>, shape: (usize, usize)) {
            if t.shape() != shape {
                bad.push(format!("{name}: {:?} != {:?}", t.shape(), shape));
            }
        }
        expect(&mut bad, "embed", &p.embed, (c.vocab_size(), h));
        match (&p.pos_embed, c.position) {
            (Some(t), PositionScheme::LearnedAbsolute) => expect(&mut bad, "pos_embed", t, (c.max_seq, h)),
            (None, PositionScheme::Rotary) => {}
            _ => bad.push("position embedding does not match scheme".into()),
        }
        if p.layers.len() != c.layers {
            bad.push(format!("{} layers, config says {}", p.layers.len(), c.layers));
        }
        for l in &p.layers {
            expect(&mut bad, "ln1.gain", &l.ln1_gain, (1, h));
            expect(&mut bad, "ln1.bias", &l.ln1_bias, (1, h));
            for proj in Projection::ALL {
                expect(&mut bad, "attn", l.weight(proj), (h, h));
                match l.lora(proj) {
                    Some(pair) if c.has_lora(proj) => {
                        expect(&mut bad, "lora.a", &pair.a, (h, c.lora_rank));
                        expect(&mut bad, "lora.b", &pair.b, (c.lora_rank, h));
                    }
                    None if !c.has_lora(proj) => {}
                    _ => bad.push(format!("adapter presence on {proj:?} does not match config")),
                }
            }
            expect(&mut bad, "ln2.gain", &l.ln2_gain, (1, h));
            expect(&mut bad, "ln2.bias", &l.ln2_bias, (1, h));
            expect(&mut bad, "mlp.w1", &l.w1, (h, c.mlp_dim));
            expect(&mut bad, "mlp.w2", &l.w2, (c.mlp_dim, h));
        }
        expect(&mut bad, "final_norm.gain", &p.final_gain, (1, h));
        expect(&mut bad, "final_norm.bias", &p.final_bias, (1, h));
        expect(&mut bad, "head", &p.head, (h, c.vocab_size()));
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape { op: "model", detail: bad.join("; ") })
        }
    }
}
