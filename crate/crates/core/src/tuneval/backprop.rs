//! Full-sequence forward pass that records activations, and the matching
//! reverse pass for the fine-tuned parameters.
//!
//! Only the marking-token embedding rows and adapter matrices receive
//! gradients; frozen weights are read but their gradients are never formed.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::model::{apply_rope, Model, ParamId, PositionScheme, Projection, RopeTable};
use crate::numerics::{
    gelu_grad, gelu_in_place, layer_norm_with_stats, matmul, matmul_nt, matmul_tn, softmax_prefix, FlopCategory,
    FlopsLedger, NormStats, Tensor2,
};
use crate::{Error, Result, TokenId};

/// Gradient per trainable unit, flattened like
/// [`crate::model::ModelParams::trainable_slice`].
pub type Gradients = BTreeMap<ParamId, Vec<f64>>;

struct ProjTape {
    /// `x·A`, kept when the projection carries an adapter.
    xa: Option<Tensor2<f64>>,
}

struct LayerTape {
    ln1: NormStats<f64>,
    a: Tensor2<f64>,
    proj: [ProjTape; 4],
    q: Tensor2<f64>,
    k: Tensor2<f64>,
    v: Tensor2<f64>,
    /// Attention probabilities per head, `[n × n]`, causal.
    probs: Vec<Tensor2<f64>>,
    attn: Tensor2<f64>,
    ln2: NormStats<f64>,
    /// MLP pre-activation.
    u: Tensor2<f64>,
}

/// Activations of one training forward pass.
pub struct Tape {
    tokens: Vec<TokenId>,
    layers: Vec<LayerTape>,
    lnf: NormStats<f64>,
    pub logits: Tensor2<f64>,
}

fn ledger() -> FlopsLedger {
    FlopsLedger::new()
}

fn project(
    model: &Model<f64>,
    layer: usize,
    p: Projection,
    x: &Tensor2<f64>,
) -> Result<(Tensor2<f64>, ProjTape)> {
    let lp = &model.params.layers[layer];
    let mut y = matmul(x, lp.weight(p), &mut ledger(), FlopCategory::Other)?;
    let mut tape = ProjTape { xa: None };
    if let Some(pair) = lp.lora(p) {
        let xa = matmul(x, &pair.a, &mut ledger(), FlopCategory::Lora)?;
        let mut d = matmul(&xa, &pair.b, &mut ledger(), FlopCategory::Lora)?;
        d.scale(model.cfg.lora_scale());
        y.add_assign(&d)?;
        tape.xa = Some(xa);
    }
    Ok((y, tape))
}

/// Backward through `y = x·W + scale·(x·A)·B`: returns `dx` and adds
/// adapter gradients into `grads`.
fn project_back(
    model: &Model<f64>,
    layer: usize,
    p: Projection,
    x: &Tensor2<f64>,
    tape: &ProjTape,
    dy: &Tensor2<f64>,
    grads: &mut Gradients,
) -> Result<Tensor2<f64>> {
    let lp = &model.params.layers[layer];
    let mut dx = matmul_nt(dy, lp.weight(p), &mut ledger(), FlopCategory::Other)?;
    if let (Some(pair), Some(xa)) = (lp.lora(p), &tape.xa) {
        let scale = model.cfg.lora_scale();
        let mut dxa = matmul_nt(dy, &pair.b, &mut ledger(), FlopCategory::Lora)?;
        dxa.scale(scale);
        let mut db = matmul_tn(xa, dy, &mut ledger(), FlopCategory::Lora)?;
        db.scale(scale);
        let da = matmul_tn(x, &dxa, &mut ledger(), FlopCategory::Lora)?;
        accumulate(grads, ParamId::LoraA { layer, proj: p }, da.data());
        accumulate(grads, ParamId::LoraB { layer, proj: p }, db.data());
        dx.add_assign(&matmul_nt(&dxa, &pair.a, &mut ledger(), FlopCategory::Lora)?)?;
    }
    Ok(dx)
}

fn accumulate(grads: &mut Gradients, id: ParamId, values: &[f64]) {
    let g = grads.entry(id).or_insert_with(|| alloc::vec![0.0; values.len()]);
    for (a, b) in g.iter_mut().zip(values) {
        *a += b;
    }
}

/// Backward through layer norm with gain `gain`.
fn layer_norm_back(dy: &Tensor2<f64>, stats: &NormStats<f64>, gain: &[f64]) -> Tensor2<f64> {
    let (n, h) = dy.shape();
    let mut dx = Tensor2::zeros(n, h);
    for r in 0..n {
        let xhat = stats.normalized.row(r);
        let dxhat: Vec<f64> = dy.row(r).iter().zip(gain).map(|(d, g)| d * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / h as f64;
        let inv = stats.inv_std[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = inv * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        }
    }
    dx
}

fn head_slice(x: &Tensor2<f64>, head: usize, hd: usize) -> Tensor2<f64> {
    Tensor2::from_fn(x.rows(), hd, |r, c| x.get(r, head * hd + c))
}

fn add_head_slice(x: &mut Tensor2<f64>, part: &Tensor2<f64>, head: usize, hd: usize) {
    for r in 0..part.rows() {
        for c in 0..hd {
            let v = x.get(r, head * hd + c) + part.get(r, c);
            x.set(r, head * hd + c, v);
        }
    }
}

/// Training forward over a whole sequence starting at position 0.
pub fn forward_train(model: &Model<f64>, tokens: &[TokenId]) -> Result<Tape> {
    let cfg = &model.cfg;
    let n = tokens.len();
    let h = cfg.hidden;
    if n == 0 || n > cfg.max_seq {
        return Err(Error::Capacity { requested: n, capacity: cfg.max_seq });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size()) {
        return Err(Error::TokenOutOfRange { token: bad, vocab: cfg.vocab_size() });
    }
    let p = &model.params;
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let rope = (cfg.position == PositionScheme::Rotary).then(|| RopeTable::new(hd, cfg.rope_base, 0, n));
    let mut x = Tensor2::from_fn(n, h, |r, c| {
        p.embed.get(tokens[r] as usize, c) + p.pos_embed.as_ref().map_or(0.0, |pe| pe.get(r, c))
    });
    let scale = 1.0 / num_traits::Float::sqrt(hd as f64);
    let mut layers = Vec::with_capacity(cfg.layers);
    for li in 0..cfg.layers {
        let lp = &p.layers[li];
        let (a, ln1) = layer_norm_with_stats(&x, lp.ln1_gain.data(), lp.ln1_bias.data(), cfg.norm_eps)?;
        let (mut q, tq) = project(model, li, Projection::Query, &a)?;
        let (mut k, tk) = project(model, li, Projection::Key, &a)?;
        let (v, tv) = project(model, li, Projection::Value, &a)?;
        if let Some(table) = &rope {
            apply_rope(&mut q, heads, table, 0, false);
            apply_rope(&mut k, heads, table, 0, false);
        }
        let mut attn = Tensor2::zeros(n, h);
        let mut probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let (qh, kh, vh) = (head_slice(&q, head, hd), head_slice(&k, head, hd), head_slice(&v, head, hd));
            let mut s = matmul_nt(&qh, &kh, &mut ledger(), FlopCategory::Other)?;
            for r in 0..n {
                let row = s.row_mut(r);
                row[..=r].iter_mut().for_each(|v| *v *= scale);
                softmax_prefix(row, r + 1);
            }
            let o = matmul(&s, &vh, &mut ledger(), FlopCategory::Other)?;
            add_head_slice(&mut attn, &o, head, hd);
            probs.push(s);
        }
        let (o, to) = project(model, li, Projection::Output, &attn)?;
        x.add_assign(&o)?;
        let (c, ln2) = layer_norm_with_stats(&x, lp.ln2_gain.data(), lp.ln2_bias.data(), cfg.norm_eps)?;
        let u = matmul(&c, &lp.w1, &mut ledger(), FlopCategory::Other)?;
        let mut g = u.clone();
        gelu_in_place(&mut g);
        let m = matmul(&g, &lp.w2, &mut ledger(), FlopCategory::Other)?;
        x.add_assign(&m)?;
        layers.push(LayerTape { ln1, a, proj: [tq, tk, tv, to], q, k, v, probs, attn, ln2, u });
    }
    let (xf, lnf) = layer_norm_with_stats(&x, p.final_gain.data(), p.final_bias.data(), cfg.norm_eps)?;
    let logits = matmul(&xf, &p.head, &mut ledger(), FlopCategory::Other)?;
    Ok(Tape { tokens: tokens.to_vec(), layers, lnf, logits })
}

/// Gradients of the loss whose derivative with respect to the logits is
/// `dlogits`.
pub fn backward(model: &Model<f64>, tape: &Tape, dlogits: &Tensor2<f64>) -> Result<Gradients> {
    let cfg = &model.cfg;
    let p = &model.params;
    let n = tape.tokens.len();
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / num_traits::Float::sqrt(hd as f64);
    let rope = (cfg.position == PositionScheme::Rotary).then(|| RopeTable::new(hd, cfg.rope_base, 0, n));
    let mut grads = Gradients::new();

    let dxf = matmul_nt(dlogits, &p.head, &mut ledger(), FlopCategory::Other)?;
    let mut dx = layer_norm_back(&dxf, &tape.lnf, p.final_gain.data());
    for li in (0..cfg.layers).rev() {
        let lp = &p.layers[li];
        let t = &tape.layers[li];
        // MLP block.
        let dg = matmul_nt(&dx, &lp.w2, &mut ledger(), FlopCategory::Other)?;
        let du = Tensor2::from_fn(n, cfg.mlp_dim, |r, c| dg.get(r, c) * gelu_grad(t.u.get(r, c)));
        let dc = matmul_nt(&du, &lp.w1, &mut ledger(), FlopCategory::Other)?;
        dx.add_assign(&layer_norm_back(&dc, &t.ln2, lp.ln2_gain.data()))?;
        // Attention block.
        let dattn = project_back(model, li, Projection::Output, &t.attn, &t.proj[3], &dx, &mut grads)?;
        let h = cfg.hidden;
        let mut dq = Tensor2::zeros(n, h);
        let mut dk = Tensor2::zeros(n, h);
        let mut dv = Tensor2::zeros(n, h);
        for head in 0..heads {
            let probs = &t.probs[head];
            let (qh, kh, vh) = (head_slice(&t.q, head, hd), head_slice(&t.k, head, hd), head_slice(&t.v, head, hd));
            let doh = head_slice(&dattn, head, hd);
            let dp = matmul_nt(&doh, &vh, &mut ledger(), FlopCategory::Other)?;
            let dvh = matmul_tn(probs, &doh, &mut ledger(), FlopCategory::Other)?;
            let mut ds = Tensor2::zeros(n, n);
            for r in 0..n {
                let dot: f64 = (0..=r).map(|c| dp.get(r, c) * probs.get(r, c)).sum();
                for c in 0..=r {
                    ds.set(r, c, probs.get(r, c) * (dp.get(r, c) - dot) * scale);
                }
            }
            let dqh = matmul(&ds, &kh, &mut ledger(), FlopCategory::Other)?;
            let dkh = matmul_tn(&ds, &qh, &mut ledger(), FlopCategory::Other)?;
            add_head_slice(&mut dq, &dqh, head, hd);
            add_head_slice(&mut dk, &dkh, head, hd);
            add_head_slice(&mut dv, &dvh, head, hd);
        }
        if let Some(table) = &rope {
            apply_rope(&mut dq, heads, table, 0, true);
            apply_rope(&mut dk, heads, table, 0, true);
        }
        let mut da = project_back(model, li, Projection::Query, &t.a, &t.proj[0], &dq, &mut grads)?;
        da.add_assign(&project_back(model, li, Projection::Key, &t.a, &t.proj[1], &dk, &mut grads)?)?;
        da.add_assign(&project_back(model, li, Projection::Value, &t.a, &t.proj[2], &dv, &mut grads)?)?;
        dx.add_assign(&layer_norm_back(&da, &t.ln1, lp.ln1_gain.data()))?;
    }
    let vocab = model.vocab();
    for (i, &tok) in tape.tokens.iter().enumerate() {
        if vocab.is_mark(tok) {
            accumulate(&mut grads, ParamId::MarkRow { right: tok == vocab.mark_r() }, dx.row(i));
        }
    }
    // Every trainable unit gets an entry, zero when untouched.
    for id in p.trainable_mask() {
        let len = p.trainable_slice(id).map_or(0, <[f64]>::len);
        grads.entry(id).or_insert_with(|| alloc::vec![0.0; len]);
    }
    Ok(grads)
}

/// Masked next-token cross-entropy: position `i` with `mask[i]` set is
/// predicted from the logits at `i - 1`. Returns the mean loss, the number
/// of scored positions and `d loss / d logits`.
pub fn masked_loss(logits: &Tensor2<f64>, tokens: &[TokenId], mask: &[bool]) -> Result<(f64, usize, Tensor2<f64>)> {
    if mask.len() != tokens.len() || logits.rows() != tokens.len() {
        return Err(Error::Shape {
            op: "masked_loss",
            detail: alloc::format!("{} logits rows, {} tokens, {} mask", logits.rows(), tokens.len(), mask.len()),
        });
    }
    let count = mask.iter().skip(1).filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyLossMask);
    }
    let mut dlogits = Tensor2::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for i in 1..tokens.len() {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i - 1);
        let lse = crate::numerics::log_sum_exp(row);
        total += lse - row[tokens[i] as usize];
        let d = dlogits.row_mut(i - 1);
        for (c, v) in row.iter().enumerate() {
            d[c] = num_traits::Float::exp(v - lse) / count as f64;
        }
        d[tokens[i] as usize] -= 1.0 / count as f64;
    }
    Ok((total / count as f64, count, dlogits))
}

/// Loss and gradients of one example.
pub fn loss_and_grad(model: &Model<f64>, tokens: &[TokenId], mask: &[bool]) -> Result<(f64, usize, Gradients)> {
    let tape = forward_train(model, tokens)?;
    let (loss, count, dlogits) = masked_loss(&tape.logits, tokens, mask)?;
    Ok((loss, count, backward(model, &tape, &dlogits)?))
}

/// Loss only.
pub fn loss(model: &Model<f64>, tokens: &[TokenId], mask: &[bool]) -> Result<f64> {
    let tape = forward_train(model, tokens)?;
    Ok(masked_loss(&tape.logits, tokens, mask)?.0)
}
