//! Pre-norm transformer encoder that keeps every layer's output.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, Init, LayerNorm, MultiHeadAttention};
use crate::params::Session;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

/// Output of one encoder layer together with its attention maps.
pub struct LayerOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl EncoderLayer {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, dim: usize, heads: usize) -> Result<Self> {
        Ok(EncoderLayer {
            attn_norm: p.layer_norm("attn_norm", dim),
            attn: p.attention("attn", dim, heads)?,
            ffn_norm: p.layer_norm("ffn_norm", dim),
            ffn: p.feed_forward("ffn", dim, 4 * dim),
        })
    }

    /// `h = x + SelfAttn(LN(x))`, then `h + FFN(LN(h))`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<LayerOutput> {
        let normed = self.attn_norm.forward(s, x)?;
        let attn = self.attn.forward(s, normed, normed)?;
        let h = s.graph.add(x, attn.output)?;
        let normed = self.ffn_norm.forward(s, h)?;
        let ff = self.ffn.forward(s, normed)?;
        let output = s.graph.add(h, ff)?;
        Ok(LayerOutput {
            output,
            attention: attn.probs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

/// Per-layer encoder outputs, `trace.layers[n]` being the output of layer
/// `n` (0-based), each `(s+1) × e`.
pub struct EncoderTrace {
    pub layers: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

impl EncoderTrace {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("encoder has at least one layer")
    }
}

impl Encoder {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, depth: usize, dim: usize, heads: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let layers = (0..depth)
            .map(|i| p.scoped(&format!("encoder.{i}"), |p| EncoderLayer::init(p, dim, heads)))
            .collect::<Result<_>>()?;
        Ok(Encoder { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn encode(&self, s: &mut Session, input: Var) -> Result<EncoderTrace> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            let out = layer.forward(s, x)?;
            x = out.output;
            layers.push(x);
            attention.push(out.attention);
        }
        Ok(EncoderTrace { layers, attention })
    }
}
