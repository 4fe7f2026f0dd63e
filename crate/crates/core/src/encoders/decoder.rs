use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{attention_bias, FeedForward, MultiHeadAttention, TextEmbedding};
use crate::error::{invalid, Result};
use crate::layers::{Ctx, LayerNorm, Linear};
use crate::substrate::{Graph, ParamStore, Tensor, Var};

/// Cross-attention weights: `layers[l][h]` is `[t_tgt, t_src]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub embed: TextEmbedding,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub out: Linear,
}

impl DecoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d: usize,
        n_heads: usize,
        ffn: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_layers == 0 {
            return invalid("decoder needs at least one layer");
        }
        let embed = TextEmbedding::new(store, &format!("{name}.embed"), vocab, d, rng)?;
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                Ok(DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, n_heads, rng)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, n_heads, rng)?,
                    ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
                    ff: FeedForward::new(store, &p, d, ffn, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d)?,
            out: Linear::new(store, &format!("{name}.out"), d, vocab, rng)?,
        })
    }

    /// Teacher-forced logits `[t_tgt, vocab]` for `tgt_in` (BOS-prefixed).
    pub fn decode(
        &self,
        g: &mut Graph,
        ctx: &Ctx,
        tgt_in: &[usize],
        memory: Var,
        memory_mask: &[bool],
    ) -> Result<(Var, AttentionTrace)> {
        if g.shape(memory)[0] != memory_mask.len() {
            return invalid(format!(
                "memory of {} frames with mask of {}",
                g.shape(memory)[0],
                memory_mask.len()
            ));
        }
        let (x, tgt_mask) = self.embed.embed(g, ctx, tgt_in)?;
        let mut x = ctx.dropout(g, x)?;
        let t = tgt_in.len();
        let self_bias = attention_bias(t, &tgt_mask, true);
        let cross_bias = attention_bias(t, memory_mask, false);
        let mut trace = AttentionTrace::default();
        for layer in &self.layers {
            let h = layer.ln1.forward(g, ctx, x)?;
            let (a, _) = layer.self_attn.forward(g, ctx, h, h, &self_bias)?;
            let a = ctx.dropout(g, a)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, ctx, x)?;
            let (c, w) = layer.cross_attn.forward(g, ctx, h, memory, &cross_bias)?;
            trace.layers.push(w);
            let c = ctx.dropout(g, c)?;
            x = g.add(x, c)?;
            let h = layer.ln3.forward(g, ctx, x)?;
            let f = layer.ff.forward(g, ctx, h)?;
            let f = ctx.dropout(g, f)?;
            x = g.add(x, f)?;
        }
        let x = self.final_norm.forward(g, ctx, x)?;
        Ok((self.out.forward(g, ctx, x)?, trace))
    }
}
