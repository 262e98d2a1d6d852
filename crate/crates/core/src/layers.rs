//! Building blocks shared by the encoder and the decoders.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Parameter factory: registers freshly initialised tensors under a common
/// name prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_, R>) -> T) -> T {
        let prefix = format!("{}{name}.", self.prefix);
        let mut inner = Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        };
        f(&mut inner)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}{name}", self.prefix), value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        self.scoped(name, |p| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = p.normal("weight", &[fan_in, fan_out], std);
            let bias = bias.then(|| p.add("bias", Tensor::zeros(&[fan_out])));
            Linear { weight, bias }
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        self.scoped(name, |p| LayerNorm {
            gamma: p.add("gamma", Tensor::ones(&[dim])),
            beta: p.add("beta", Tensor::zeros(&[dim])),
        })
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, hidden: usize) -> FeedForward {
        self.scoped(name, |p| FeedForward {
            up: p.linear("up", dim, hidden, true),
            down: p.linear("down", hidden, dim, true),
        })
    }

    pub fn attention(&mut self, name: &str, dim: usize, heads: usize) -> Result<MultiHeadAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(self.scoped(name, |p| MultiHeadAttention {
            query: p.linear("query", dim, dim, true),
            key: p.linear("key", dim, dim, true),
            value: p.linear("value", dim, dim, true),
            output: p.linear("output", dim, dim, true),
            heads,
        }))
    }
}

/// `x · W + b`, with `W` stored as `fan_in × fan_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row_vector(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.graph.gelu(h);
        self.down.forward(s, h)
    }
}

/// Scaled dot-product attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One row-stochastic `queries × keys` matrix per head.
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn forward(&self, s: &mut Session, query_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        let q = self.query.forward(s, query_src)?;
        let k = self.key.forward(s, kv_src)?;
        let v = self.value.forward(s, kv_src)?;
        let dim = s.graph.value(q).cols();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut probs = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.graph.slice_cols(q, cols.start, cols.end)?,
                    s.graph.slice_cols(k, cols.start, cols.end)?,
                    s.graph.slice_cols(v, cols.start, cols.end)?,
                )
            };
            let scores = s.graph.matmul_t(qh, kh)?;
            let scores = s.graph.scale(scores, scale);
            let p = s.graph.softmax(scores, 1)?;
            outs.push(s.graph.matmul(p, vh)?);
            probs.push(p);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        let output = self.output.forward(s, merged)?;
        Ok(AttentionOutput { output, probs })
    }
}
