//! Feature purification: score each patch embedding against the class
//! prototype with attention similarity and zero out all but the best
//! matching tokens.
//!
//! Queries come from the prototype and keys from the encoder patches, with
//! the softmax taken over encoder tokens for every prototype query. A
//! token's score is the attention mass it receives, i.e. the column sum of
//! the similarity matrix, so scores always total `s`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::Init;
use crate::params::{ParamId, Session};
use crate::tensor::Tensor;

/// How many tokens survive purification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep every token (module disabled).
    Off,
    /// Keep the `k` highest-scoring tokens.
    TopK(usize),
    /// Keep tokens whose score relative to the mean score is at least `tau`.
    Auto { tau: f64 },
}

#[derive(Clone, Debug)]
pub struct FeaturePurifier {
    /// `e × d`, applied to the prototype.
    pub query: ParamId,
    /// `e × d`, applied to the encoder patches.
    pub key: ParamId,
    pub selection: Selection,
}

/// Everything the purification step produced for one sample.
#[derive(Clone, Debug)]
pub struct PurificationResult {
    /// `s × s` similarity, rows indexed by prototype token.
    pub similarity: Tensor,
    /// Per encoder-token score.
    pub scores: Vec<f64>,
    /// Kept token indices, ascending.
    pub indices: Vec<usize>,
    /// `s × s` diagonal 0/1 mask.
    pub mask: Tensor,
    /// `s × e` masked patch embeddings.
    pub purified: Tensor,
}

impl FeaturePurifier {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, dim: usize, proj_dim: usize, selection: Selection) -> Self {
        p.scoped("fpm", |p| {
            let std = (2.0 / (dim + proj_dim) as f64).sqrt();
            FeaturePurifier {
                query: p.normal("query", &[dim, proj_dim], std),
                key: p.normal("key", &[dim, proj_dim], std),
                selection,
            }
        })
    }

    /// `g = softmax(q kᵀ / √d)` over encoder tokens, where `q = prototype · W_q`
    /// and `k = patches · W_k`.
    pub fn similarity(&self, s: &mut Session, patches: Var, prototype: Var) -> Result<Var> {
        if s.graph.shape(patches) != s.graph.shape(prototype) {
            return Err(Error::Dimension(format!(
                "patches {:?} vs prototype {:?}",
                s.graph.shape(patches),
                s.graph.shape(prototype)
            )));
        }
        let wq = s.param(self.query);
        let wk = s.param(self.key);
        let q = s.graph.matmul(prototype, wq)?;
        let k = s.graph.matmul(patches, wk)?;
        let d = s.graph.value(q).cols() as f64;
        let logits = s.graph.matmul_t(q, k)?;
        let logits = s.graph.scale(logits, 1.0 / d.sqrt());
        s.graph.softmax(logits, 1)
    }

    /// Runs similarity, selection and masking. Selection is a hard gate;
    /// gradients reach only the retained patch rows.
    pub fn purify_sequence(
        &self,
        s: &mut Session,
        patches: Var,
        prototype: Var,
    ) -> Result<(PurificationResult, Var)> {
        let g = self.similarity(s, patches, prototype)?;
        let similarity = s.graph.value(g).clone();
        let tokens = similarity.rows();
        let scores = token_scores(&similarity);
        let indices = match self.selection {
            Selection::Off => (0..tokens).collect(),
            Selection::TopK(k) => topk_indices(&scores, k)?,
            Selection::Auto { tau } => auto_filter(&scores, tau)?,
        };
        let mask = build_mask(&indices, tokens)?;
        let m = s.graph.constant(mask.clone());
        let purified = purify(s, m, patches)?;
        let result = PurificationResult {
            similarity,
            scores,
            indices,
            mask,
            purified: s.graph.value(purified).clone(),
        };
        Ok((result, purified))
    }
}

/// Column sums of `g`: the total attention each encoder token receives.
pub fn token_scores(g: &Tensor) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; cols];
    for row in g.data().chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Indices of the `k` largest scores in ascending index order. Equal
/// scores favour the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Tokens with `score / mean(score) ≥ tau`; if none qualify, the single
/// best token.
pub fn auto_filter(scores: &[f64], tau: f64) -> Result<Vec<usize>> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("auto threshold {tau} must be non-negative")));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let kept: Vec<usize> = (0..scores.len()).filter(|&t| scores[t] / mean >= tau).collect();
    if kept.is_empty() {
        topk_indices(scores, 1)
    } else {
        Ok(kept)
    }
}

/// `diag(1_{I})` as an `s × s` matrix.
pub fn build_mask(indices: &[usize], tokens: usize) -> Result<Tensor> {
    let mut m = Tensor::zeros(&[tokens, tokens]);
    for &i in indices {
        if i >= tokens {
            return Err(Error::Index { index: i, len: tokens });
        }
        m.data_mut()[i * tokens + i] = 1.0;
    }
    Ok(m)
}

/// `M · S`.
pub fn purify(s: &mut Session, mask: Var, patches: Var) -> Result<Var> {
    s.graph.matmul(mask, patches)
}
