//! Pre-norm transformer stacks, text embedding, decoder and beam search.

mod decoder;
mod search;

pub use decoder::{AttentionTrace, DecoderStack};
pub use search::{generate, StepScorer};

use rand::Rng;

use crate::error::{invalid, Result};
use crate::layers::{sinusoidal_positions, Ctx, LayerNorm, Linear};
use crate::substrate::{Graph, ParamId, ParamStore, Tensor, Var, MASK_LOGIT};

/// Additive attention bias `[t_q, t_k]`: masked keys and, if `causal`,
/// future keys get `MASK_LOGIT`.
pub fn attention_bias(t_q: usize, key_mask: &[bool], causal: bool) -> Tensor {
    let t_k = key_mask.len();
    let mut data = vec![0.0; t_q * t_k];
    for i in 0..t_q {
        for j in 0..t_k {
            if !key_mask[j] || (causal && j > i) {
                data[i * t_k + j] = MASK_LOGIT;
            }
        }
    }
    Tensor::new(vec![t_q, t_k], data).expect("consistent shape")
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return invalid(format!("d_model {d} not divisible by {n_heads} heads"));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            wk: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            wo: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            n_heads,
        })
    }

    /// Returns the attended output and each head's weights `[t_q, t_k]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &Ctx,
        query: Var,
        keys: Var,
        bias: &Tensor,
    ) -> Result<(Var, Vec<Tensor>)> {
        let d = g.shape(query)[1];
        let dh = d / self.n_heads;
        let q = self.wq.forward(g, ctx, query)?;
        let k = self.wk.forward(g, ctx, keys)?;
        let v = self.wv.forward(g, ctx, keys)?;
        let b = g.constant(bias.clone());
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
            let s = g.add(s, b)?;
            let p = g.softmax(s)?;
            weights.push(g.value(p).clone());
            let p = ctx.dropout(g, p)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        Ok((self.wo.forward(g, ctx, cat)?, weights))
    }
}

/// Position-wise `W2·relu(W1·x)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, &format!("{name}.ff1"), d, ffn, rng)?,
            w2: Linear::new(store, &format!("{name}.ff2"), ffn, d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let h = self.w1.forward(g, ctx, x)?;
        let h = g.relu(h)?;
        let h = ctx.dropout(g, h)?;
        self.w2.forward(g, ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var, bias: &Tensor) -> Result<Var> {
        let h = self.ln1.forward(g, ctx, x)?;
        let (a, _) = self.attn.forward(g, ctx, h, h, bias)?;
        let a = ctx.dropout(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, ctx, x)?;
        let f = self.ff.forward(g, ctx, h)?;
        let f = ctx.dropout(g, f)?;
        g.add(x, f)
    }
}

/// Stack of pre-norm self-attention layers, optionally followed by a final
/// layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d: usize,
        n_heads: usize,
        ffn: usize,
        final_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if n_layers == 0 {
            return invalid(format!("{name} needs at least one layer"));
        }
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                Ok(EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, n_heads, rng)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                    ff: FeedForward::new(store, &p, d, ffn, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if final_norm {
            Some(LayerNorm::new(store, &format!("{name}.final_norm"), d)?)
        } else {
            None
        };
        Ok(Self { layers, final_norm })
    }

    pub fn encode(&self, g: &mut Graph, ctx: &Ctx, x: Var, mask: &[bool]) -> Result<Var> {
        Ok(*self.encode_layers(g, ctx, x, mask)?.last().unwrap())
    }

    /// Output of every layer; the last includes the final norm.
    pub fn encode_layers(&self, g: &mut Graph, ctx: &Ctx, x: Var, mask: &[bool]) -> Result<Vec<Var>> {
        let t = g.shape(x)[0];
        if mask.len() != t {
            return invalid(format!("encoder mask of {} for {t} frames", mask.len()));
        }
        let bias = attention_bias(t, mask, false);
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, ctx, h, &bias)?;
            outs.push(h);
        }
        if let Some(norm) = &self.final_norm {
            let last = outs.last_mut().unwrap();
            *last = norm.forward(g, ctx, *last)?;
        }
        Ok(outs)
    }
}

/// Learned token embedding scaled by `sqrt(d)` plus sinusoidal positions.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub table: ParamId,
    pub d: usize,
}

impl TextEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut R) -> Result<Self> {
        let table = store.add(
            format!("{name}.table"),
            Tensor::randn(&[vocab, d], (d as f64).powf(-0.5), rng),
        )?;
        Ok(Self { table, d })
    }

    /// Embeddings of `tokens` and the mask of non-PAD positions.
    pub fn embed(&self, g: &mut Graph, ctx: &Ctx, tokens: &[usize]) -> Result<(Var, Vec<bool>)> {
        if tokens.is_empty() {
            return invalid("cannot embed an empty sequence");
        }
        let table = ctx.var(g, self.table);
        let e = g.gather_rows(table, tokens)?;
        let e = g.scale(e, (self.d as f64).sqrt())?;
        let pos = g.constant(sinusoidal_positions(tokens.len(), self.d));
        let out = g.add(e, pos)?;
        let mask = tokens.iter().map(|t| *t != crate::corpus::PAD).collect();
        Ok((out, mask))
    }
}

#[cfg(test)]
mod tests;
