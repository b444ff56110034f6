use alloc::vec::Vec;

use super::{lora_delta, Model, PositionScheme, Projection};
use crate::kvcache::KvCache;
use crate::numerics::{
    gemm, gelu_in_place, layer_norm, matmul, softmax_prefix, FlopCategory, FlopsLedger, MatMut, MatRef, Real,
    RowRole, Tensor2,
};
use crate::{Error, Result, TokenId};

/// Which positions of a pass produce logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputRows {
    All,
    /// Only the final position. The last layer then skips attention output,
    /// residual and MLP work for every other row.
    Last,
}

/// Query rows processed per attention block; bounds the score buffer and
/// lets long causal passes skip most of the masked upper triangle.
const ATTN_BLOCK: usize = 64;

/// Rotation angles for a contiguous run of absolute positions.
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(head_dim: usize, base: f64, start: usize, len: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        let freqs: Vec<f64> = (0..half)
            .map(|p| num_traits::Float::powf(base, -(2.0 * p as f64) / head_dim as f64))
            .collect();
        for pos in start..start + len {
            for f in &freqs {
                let angle = pos as f64 * f;
                cos.push(T::from_f64(num_traits::Float::cos(angle)));
                sin.push(T::from_f64(num_traits::Float::sin(angle)));
            }
        }
        Self { half, cos, sin }
    }
}

/// Rotates interleaved pairs `(2p, 2p+1)` of every head in every row. Row
/// `i` uses table row `i + table_offset`. `inverse` applies the transpose,
/// which is what the backward pass needs.
pub fn apply_rope<T: Real>(x: &mut Tensor2<T>, heads: usize, table: &RopeTable<T>, table_offset: usize, inverse: bool) {
    let hd = table.half * 2;
    for r in 0..x.rows() {
        let t = (r + table_offset) * table.half;
        let cos = &table.cos[t..t + table.half];
        let sin = &table.sin[t..t + table.half];
        let row = x.row_mut(r);
        for head in 0..heads {
            let base = head * hd;
            for p in 0..table.half {
                let (c, s) = (cos[p], if inverse { -sin[p] } else { sin[p] });
                let a = row[base + 2 * p];
                let b = row[base + 2 * p + 1];
                row[base + 2 * p] = a * c - b * s;
                row[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}

/// Causal multi-head attention of `q` (rows at absolute positions
/// `first_pos..`) over `keys`/`values` rows `0..first_pos + q.rows()`.
#[allow(clippy::too_many_arguments)]
fn attend<T: Real>(
    q: &Tensor2<T>,
    keys: &[T],
    values: &[T],
    first_pos: usize,
    heads: usize,
    head_dim: usize,
    ledger: &mut FlopsLedger,
) -> Result<Tensor2<T>> {
    let n = q.rows();
    let h = q.cols();
    let scale = T::from_f64(1.0 / num_traits::Float::sqrt(head_dim as f64));
    let mut out = Tensor2::zeros(n, h);
    let mut scores: Vec<T> = Vec::new();
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + ATTN_BLOCK).min(n);
        let rows = i1 - i0;
        let ctx = first_pos + i1;
        scores.clear();
        scores.resize(rows * ctx, T::zero());
        for head in 0..heads {
            let off = head * head_dim;
            let q_view = MatRef::new(q.data(), i0 * h + off, rows, head_dim, h, 1);
            let k_t = MatRef::new(keys, off, ctx, head_dim, h, 1).t();
            gemm(q_view, k_t, T::zero(), MatMut::new(&mut scores, 0, rows, ctx, ctx, 1), ledger, FlopCategory::Other)?;
            for r in 0..rows {
                let row = &mut scores[r * ctx..(r + 1) * ctx];
                let visible = first_pos + i0 + r + 1;
                row[..visible].iter_mut().for_each(|v| *v = *v * scale);
                softmax_prefix(row, visible);
            }
            let v_view = MatRef::new(values, off, ctx, head_dim, h, 1);
            let p_view = MatRef::new(&scores, 0, rows, ctx, ctx, 1);
            let out_view = MatMut::new(out.data_mut(), i0 * h + off, rows, head_dim, h, 1);
            gemm(p_view, v_view, T::zero(), out_view, ledger, FlopCategory::Other)?;
        }
        i0 = i1;
    }
    Ok(out)
}

fn attribute_rows(
    ledger: &mut FlopsLedger,
    category: FlopCategory,
    roles: Option<&[RowRole]>,
    rows: usize,
    per_row: u64,
) {
    match roles {
        None => ledger.attribute(category, RowRole::Fresh, rows as u64 * per_row),
        Some(roles) => {
            for role in RowRole::ALL {
                let count = roles.iter().filter(|r| **r == role).count() as u64;
                if count > 0 {
                    ledger.attribute(category, role, count * per_row);
                }
            }
        }
    }
}

impl<T: Real> Model<T> {
    /// Projects `x` through one attention projection, adding its adapter
    /// when present. Key/value base FLOPs go to the key/value bucket and
    /// adapter FLOPs to the adapter bucket, both attributed to `roles`.
    fn project(
        &self,
        layer: usize,
        proj: Projection,
        x: &Tensor2<T>,
        roles: Option<&[RowRole]>,
        ledger: &mut FlopsLedger,
    ) -> Result<Tensor2<T>> {
        let lp = &self.params.layers[layer];
        let h = self.cfg.hidden as u64;
        let category = match proj {
            Projection::Key | Projection::Value => FlopCategory::KvProjection,
            _ => FlopCategory::Other,
        };
        let mut y = matmul(x, lp.weight(proj), ledger, category)?;
        attribute_rows(ledger, category, roles, x.rows(), 2 * h * h);
        if let Some(pair) = lp.lora(proj) {
            let delta = lora_delta(x, &pair.a, &pair.b, self.cfg.lora_scale(), ledger)?;
            attribute_rows(ledger, FlopCategory::Lora, roles, x.rows(), 4 * h * self.cfg.lora_rank as u64);
            y.add_assign(&delta)?;
        }
        Ok(y)
    }

    fn embed_rows(&self, tokens: &[TokenId], start: usize) -> Tensor2<T> {
        let h = self.cfg.hidden;
        let mut x = Tensor2::zeros(tokens.len(), h);
        for (i, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            row.copy_from_slice(self.params.embed.row(tok as usize));
            if let Some(pos) = &self.params.pos_embed {
                for (v, p) in row.iter_mut().zip(pos.row(start + i)) {
                    *v = *v + *p;
                }
            }
        }
        x
    }

    /// Runs `tokens` at positions `start..start + tokens.len()` against the
    /// cached rows `0..start`, appends their keys/values to `cache` and
    /// returns next-token logits for the requested rows.
    ///
    /// `roles`, when given, labels every new row for FLOP attribution.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        cache: &mut KvCache<T>,
        tokens: &[TokenId],
        start: usize,
        roles: Option<&[RowRole]>,
        rows: OutputRows,
        ledger: &mut FlopsLedger,
    ) -> Result<Tensor2<T>> {
        let cfg = &self.cfg;
        let n = tokens.len();
        let h = cfg.hidden;
        if cache.len() != start {
            return Err(Error::PositionMismatch { cached: cache.len(), start });
        }
        if cache.layers() != cfg.layers || cache.width() != h {
            return Err(Error::Shape {
                op: "forward",
                detail: alloc::format!("cache {}x{} for model {}x{}", cache.layers(), cache.width(), cfg.layers, h),
            });
        }
        if start + n > cfg.max_seq {
            return Err(Error::Capacity { requested: start + n, capacity: cfg.max_seq });
        }
        cache.ensure_room(n)?;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size()) {
            return Err(Error::TokenOutOfRange { token: bad, vocab: cfg.vocab_size() });
        }
        if let Some(r) = roles {
            if r.len() != n {
                return Err(Error::Shape { op: "forward roles", detail: alloc::format!("{} roles for {n} tokens", r.len()) });
            }
        }
        if n == 0 {
            return Ok(Tensor2::zeros(0, cfg.vocab_size()));
        }

        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let rope = match cfg.position {
            PositionScheme::Rotary => Some(RopeTable::new(hd, cfg.rope_base, start, n)),
            PositionScheme::LearnedAbsolute => None,
        };
        let mut x = self.embed_rows(tokens, start);
        let layers = cfg.layers;
        for li in 0..layers {
            let lp = &self.params.layers[li];
            let a = layer_norm(&x, lp.ln1_gain.data(), lp.ln1_bias.data(), cfg.norm_eps)?;
            let mut k = self.project(li, Projection::Key, &a, roles, ledger)?;
            let v = self.project(li, Projection::Value, &a, roles, ledger)?;
            if let Some(table) = &rope {
                apply_rope(&mut k, heads, table, 0, false);
            }
            cache.stage(li, &k, &v)?;

            // The last layer only needs the rows whose logits are returned.
            let q_from = if li + 1 == layers && rows == OutputRows::Last { n - 1 } else { 0 };
            let a_q = if q_from > 0 { a.slice_rows(q_from, n) } else { a };
            let q_roles = roles.map(|r| &r[q_from..]);
            let mut q = self.project(li, Projection::Query, &a_q, q_roles, ledger)?;
            if let Some(table) = &rope {
                apply_rope(&mut q, heads, table, q_from, false);
            }
            let ctx = start + n;
            let attn = attend(
                &q,
                cache.keys_through(li, ctx),
                cache.values_through(li, ctx),
                start + q_from,
                heads,
                hd,
                ledger,
            )?;
            let o = self.project(li, Projection::Output, &attn, q_roles, ledger)?;
            if q_from > 0 {
                x = x.slice_rows(q_from, n);
            }
            x.add_assign(&o)?;

            let c = layer_norm(&x, lp.ln2_gain.data(), lp.ln2_bias.data(), cfg.norm_eps)?;
            let mut u = matmul(&c, &lp.w1, ledger, FlopCategory::Other)?;
            gelu_in_place(&mut u);
            let m = matmul(&u, &lp.w2, ledger, FlopCategory::Other)?;
            x.add_assign(&m)?;
        }
        cache.commit(n)?;

        if rows == OutputRows::Last && x.rows() > 1 {
            x = x.slice_rows(x.rows() - 1, x.rows());
        }
        let xf = layer_norm(&x, self.params.final_gain.data(), self.params.final_bias.data(), cfg.norm_eps)?;
        matmul(&xf, &self.params.head, ledger, FlopCategory::Other)
    }

    /// Convenience wrapper: fresh cache, all positions, logits for every row.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<Tensor2<T>> {
        let mut cache = self.new_cache();
        self.forward(&mut cache, tokens, 0, None, OutputRows::All, &mut FlopsLedger::new())
    }
}
