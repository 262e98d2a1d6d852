//! Reconstruction decoders.
//!
//! [`CfgDecoder`] is the cross-level feature guiding decoder: decoder layer
//! `i` (1-based) fuses encoder layer `N-i+1` with the class prototype, then
//! uses that fused feature to query the previous decoder state.
//! [`PlainDecoder`] is the ablation baseline: pre-norm self-attention blocks
//! over the purified sequence.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, Init, LayerNorm, MultiHeadAttention};
use crate::params::Session;

#[derive(Clone, Debug)]
pub struct CfgLayer {
    pub guide_norm: LayerNorm,
    pub prototype_norm: LayerNorm,
    /// Queries from the encoder layer, keys/values from the prototype.
    pub fuse: MultiHeadAttention,
    pub fused_norm: LayerNorm,
    pub state_norm: LayerNorm,
    /// Queries from the fused feature, keys/values from the previous state.
    pub refine: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

pub struct FuseOutput {
    pub fused: Var,
    pub attention: Vec<Var>,
}

pub struct RefineOutput {
    pub state: Var,
    /// Attention read-out before the residual connection.
    pub attended: Var,
    pub attention: Vec<Var>,
}

impl CfgLayer {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, dim: usize, heads: usize) -> Result<Self> {
        Ok(CfgLayer {
            guide_norm: p.layer_norm("guide_norm", dim),
            prototype_norm: p.layer_norm("prototype_norm", dim),
            fuse: p.attention("fuse", dim, heads)?,
            fused_norm: p.layer_norm("fused_norm", dim),
            state_norm: p.layer_norm("state_norm", dim),
            refine: p.attention("refine", dim, heads)?,
            ffn_norm: p.layer_norm("ffn_norm", dim),
            ffn: p.feed_forward("ffn", dim, 4 * dim),
        })
    }

    /// `F_inter = softmax(Q Kᵀ/√d_k) V` with `Q` from the encoder patch rows
    /// and `K, V` from the prototype.
    pub fn fuse_with_prototype(&self, s: &mut Session, encoder_rows: Var, prototype: Var) -> Result<FuseOutput> {
        let guide = self.guide_norm.forward(s, encoder_rows)?;
        let proto = self.prototype_norm.forward(s, prototype)?;
        let out = self.fuse.forward(s, guide, proto)?;
        Ok(FuseOutput {
            fused: out.output,
            attention: out.probs,
        })
    }

    /// Attends from the fused feature to the previous decoder state. The
    /// residual stream is the query side (`F_inter`), as in a standard
    /// decoder block, followed by the feed-forward block.
    pub fn refine(&self, s: &mut Session, fused: Var, prev_state: Var) -> Result<RefineOutput> {
        let q = self.fused_norm.forward(s, fused)?;
        let kv = self.state_norm.forward(s, prev_state)?;
        let out = self.refine.forward(s, q, kv)?;
        let h = s.graph.add(fused, out.output)?;
        let normed = self.ffn_norm.forward(s, h)?;
        let ff = self.ffn.forward(s, normed)?;
        let state = s.graph.add(h, ff)?;
        Ok(RefineOutput {
            state,
            attended: out.output,
            attention: out.probs,
        })
    }
}

pub struct DecodeOutput {
    /// `S_dec,0 ..= S_dec,N`.
    pub states: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

impl DecodeOutput {
    pub fn reconstruction(&self) -> Var {
        *self.states.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct CfgDecoder {
    pub layers: Vec<CfgLayer>,
}

impl CfgDecoder {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, depth: usize, dim: usize, heads: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| p.scoped(&format!("cfg.{i}"), |p| CfgLayer::init(p, dim, heads)))
            .collect::<Result<_>>()?;
        Ok(CfgDecoder { layers })
    }

    /// Encoder layer (0-based) consumed by decoder layer `i` (0-based).
    pub fn paired_encoder_layer(&self, i: usize) -> usize {
        self.layers.len() - 1 - i
    }

    /// `encoder_rows[n]` are the patch rows (cls stripped) of encoder layer
    /// `n`; there must be one per decoder layer.
    pub fn decode(&self, s: &mut Session, encoder_rows: &[Var], prototype: Var, purified: Var) -> Result<DecodeOutput> {
        if encoder_rows.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} encoder layers for {} decoder layers",
                encoder_rows.len(),
                self.layers.len()
            )));
        }
        let mut states = vec![purified];
        let mut attention = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let guide = encoder_rows[self.paired_encoder_layer(i)];
            let fused = layer.fuse_with_prototype(s, guide, prototype)?;
            let refined = layer.refine(s, fused.fused, *states.last().unwrap())?;
            attention.push(fused.attention);
            attention.push(refined.attention);
            states.push(refined.state);
        }
        Ok(DecodeOutput { states, attention })
    }
}

#[derive(Clone, Debug)]
pub struct PlainLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct PlainDecoder {
    pub layers: Vec<PlainLayer>,
}

impl PlainDecoder {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, depth: usize, dim: usize, heads: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                p.scoped(&format!("plain.{i}"), |p| {
                    Ok(PlainLayer {
                        attn_norm: p.layer_norm("attn_norm", dim),
                        attn: p.attention("attn", dim, heads)?,
                        ffn_norm: p.layer_norm("ffn_norm", dim),
                        ffn: p.feed_forward("ffn", dim, 4 * dim),
                    })
                })
            })
            .collect::<Result<_>>()?;
        Ok(PlainDecoder { layers })
    }

    pub fn decode(&self, s: &mut Session, purified: Var) -> Result<DecodeOutput> {
        let mut states = vec![purified];
        let mut attention = Vec::new();
        for layer in &self.layers {
            let x = *states.last().unwrap();
            let normed = layer.attn_norm.forward(s, x)?;
            let a = layer.attn.forward(s, normed, normed)?;
            let h = s.graph.add(x, a.output)?;
            let normed = layer.ffn_norm.forward(s, h)?;
            let ff = layer.ffn.forward(s, normed)?;
            states.push(s.graph.add(h, ff)?);
            attention.push(a.probs);
        }
        Ok(DecodeOutput { states, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{grad_check_session, ParamStore, SeedStream};
    use crate::tensor::Tensor;

    fn build(depth: usize) -> (ParamStore, CfgDecoder) {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(21).rng("init");
        let d = CfgDecoder::init(&mut Init::new(&mut store, &mut rng), depth, 8, 2).unwrap();
        (store, d)
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut SeedStream::new(seed).rng("x"))
    }

    fn repeated_row(rows: usize, seed: u64) -> Tensor {
        let r = rand(&[1, 8], seed);
        Tensor::new(vec![rows, 8], r.data().repeat(rows)).unwrap()
    }

    fn rows_equal(t: &Tensor) -> bool {
        (1..t.rows()).all(|r| (0..t.cols()).all(|c| (t.at(r, c) - t.at(0, c)).abs() < 1e-12))
    }

    #[test]
    fn fuse_with_identical_prototype_rows() {
        let (store, d) = build(1);
        let mut s = Session::inference(&store);
        let enc = s.graph.constant(rand(&[4, 8], 1));
        let proto = s.graph.constant(repeated_row(4, 2));
        let out = d.layers[0].fuse_with_prototype(&mut s, enc, proto).unwrap();
        assert_eq!(s.graph.shape(out.fused), &[4, 8]);
        assert!(rows_equal(s.graph.value(out.fused)));
        for p in &out.attention {
            for r in 0..4 {
                assert!((s.graph.value(*p).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refine_with_identical_state_rows() {
        let (store, d) = build(1);
        let mut s = Session::inference(&store);
        let fused = s.graph.constant(rand(&[4, 8], 3));
        let prev = s.graph.constant(repeated_row(4, 4));
        let out = d.layers[0].refine(&mut s, fused, prev).unwrap();
        assert!(rows_equal(s.graph.value(out.attended)));
        assert_eq!(s.graph.shape(out.state), &[4, 8]);
    }

    #[test]
    fn refine_gradient_wrt_previous_state() {
        let (store, d) = build(1);
        let inputs = [rand(&[4, 8], 5), rand(&[4, 8], 6)];
        let err = grad_check_session(&store, &inputs, 1e-6, |s, v| {
            let out = d.layers[0].refine(s, v[0], v[1])?;
            let w = s.graph.constant(rand(&[4, 8], 7));
            let p = s.graph.mul(out.state, w)?;
            Ok(s.graph.sum(p))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_layer_decode_composes_fuse_and_refine() {
        let (store, d) = build(1);
        let mut s = Session::inference(&store);
        let enc = s.graph.constant(rand(&[4, 8], 7));
        let proto = s.graph.constant(rand(&[4, 8], 8));
        let pur = s.graph.constant(rand(&[4, 8], 9));
        let out = d.decode(&mut s, &[enc], proto, pur).unwrap();
        let f = d.layers[0].fuse_with_prototype(&mut s, enc, proto).unwrap();
        let r = d.layers[0].refine(&mut s, f.fused, pur).unwrap();
        assert_eq!(s.graph.value(out.reconstruction()), s.graph.value(r.state));
    }

    #[test]
    fn layers_pair_with_reversed_encoder_layers() {
        let (store, d) = build(3);
        assert_eq!(
            (0..3).map(|i| d.paired_encoder_layer(i)).collect::<Vec<_>>(),
            vec![2, 1, 0]
        );
        let mut s = Session::inference(&store);
        let enc: Vec<_> = (0..3).map(|i| s.graph.constant(rand(&[4, 8], 10 + i))).collect();
        let proto = s.graph.constant(rand(&[4, 8], 20));
        let pur = s.graph.constant(rand(&[4, 8], 21));
        let out = d.decode(&mut s, &enc, proto, pur).unwrap();
        assert_eq!(out.states.len(), 4);
        assert_eq!(s.graph.shape(out.reconstruction()), &[4, 8]);
        for p in out.attention.iter().flatten() {
            for r in 0..4 {
                assert!((s.graph.value(*p).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // the first decoder layer must be driven by the last encoder layer
        let f0 = d.layers[0].fuse_with_prototype(&mut s, enc[2], proto).unwrap();
        let r0 = d.layers[0].refine(&mut s, f0.fused, pur).unwrap();
        assert_eq!(s.graph.value(out.states[1]), s.graph.value(r0.state));
        assert!(matches!(d.decode(&mut s, &enc[..2], proto, pur), Err(Error::Config(_))));
    }
}
