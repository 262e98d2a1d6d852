//! Finite-difference audits of every differentiable block at toy shape
//! (`s = 4`, `e = 8`, `T = 3`).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Var, REL_ERROR_FLOOR};
use crate::config::ExperimentConfig;
use crate::decoder::CfgLayer;
use crate::encoder::EncoderLayer;
use crate::error::{Error, Result};
use crate::fpm::{build_mask, purify, topk_indices, token_scores, FeaturePurifier, Selection};
use crate::layers::Init;
use crate::model::Model;
use crate::nprm::Classifier;
use crate::objective::{cls_loss, rec_loss, total_loss};
use crate::params::{grad_check_session, ParamStore, SeedStream, Session};
use crate::patch::{PatchEmbedder, PatchGrid};
use crate::tensor::Tensor;

/// Central-difference step.
pub const EPS: f64 = 1e-6;

const TOKENS: usize = 4;
const DIM: usize = 8;
const CLASSES: usize = 3;
const HEADS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Embedder,
    EncoderLayer,
    Classifier,
    /// Similarity and purification with the retained set held fixed.
    Fpm,
    CfgFuse,
    CfgRefine,
    ClsLoss,
    RecLoss,
    TotalLoss,
    /// Embed through loss on a toy detector.
    Pipeline,
}

impl GradModule {
    pub const ALL: [GradModule; 10] = [
        GradModule::Embedder,
        GradModule::EncoderLayer,
        GradModule::Classifier,
        GradModule::Fpm,
        GradModule::CfgFuse,
        GradModule::CfgRefine,
        GradModule::ClsLoss,
        GradModule::RecLoss,
        GradModule::TotalLoss,
        GradModule::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Embedder => "embedder",
            GradModule::EncoderLayer => "encoder",
            GradModule::Classifier => "classifier",
            GradModule::Fpm => "fpm",
            GradModule::CfgFuse => "cfg-fuse",
            GradModule::CfgRefine => "cfg-refine",
            GradModule::ClsLoss => "cls-loss",
            GradModule::RecLoss => "rec-loss",
            GradModule::TotalLoss => "total-loss",
            GradModule::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = GradModule::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown module {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub module: GradModule,
    /// Worst relative error over inputs and trainable parameters.
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_ERROR_FLOOR
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SeedStream::new(seed).rng("gradcheck"))
}

/// Scalar `Σ w ⊙ x` with fixed random weights, so every output element gets
/// a distinct upstream gradient.
fn probe(s: &mut Session, x: Var, seed: u64) -> Result<Var> {
    let w = s.graph.constant(randn(s.graph.shape(x), seed));
    let p = s.graph.mul(x, w)?;
    Ok(s.graph.sum(p))
}

fn with_store<T>(seed: u64, build: impl FnOnce(&mut Init<'_, rand_chacha::ChaCha8Rng>) -> Result<T>) -> Result<(ParamStore, T)> {
    let mut store = ParamStore::new();
    let mut rng = SeedStream::new(seed).rng("gradcheck.init");
    let block = build(&mut Init::new(&mut store, &mut rng))?;
    Ok((store, block))
}

fn toy_model() -> Result<Model> {
    let mut c = ExperimentConfig::default();
    c.data.image_size = 4;
    c.data.normal_classes = (0..CLASSES).collect();
    c.model.patch = 2;
    c.model.dim = DIM;
    c.model.heads = HEADS;
    c.model.proj_dim = 4;
    c.model.depth = 2;
    c.fpm.k = Some(2);
    c.objective.alpha = 0.3;
    let mut model = Model::new(&c)?;
    model.bank.set_frozen(&mut model.store, false);
    model.perturb(0.05, &mut SeedStream::new(2).rng("gradcheck.perturb"));
    Ok(model)
}

/// Runs the audit for one module.
pub fn check(module: GradModule) -> Result<GradReport> {
    let x = randn(&[TOKENS, DIM], 1);
    let y = randn(&[TOKENS, DIM], 2);
    let err = match module {
        GradModule::Embedder => {
            let grid = PatchGrid::new(4, 4, 1, 2)?;
            let (store, emb) = with_store(11, |p| Ok(PatchEmbedder::init(p, &grid, DIM)))?;
            grad_check_session(&store, &[randn(&[TOKENS, 4], 3)], EPS, |s, v| {
                let out = emb.embed(s, v[0])?;
                probe(s, out, 4)
            })?
        }
        GradModule::EncoderLayer => {
            let (store, layer) = with_store(12, |p| EncoderLayer::init(p, DIM, HEADS))?;
            grad_check_session(&store, &[randn(&[TOKENS + 1, DIM], 3)], EPS, |s, v| {
                let out = layer.forward(s, v[0])?.output;
                probe(s, out, 4)
            })?
        }
        GradModule::Classifier => {
            let (store, clf) = with_store(13, |p| Ok(Classifier::init(p, DIM, CLASSES)))?;
            grad_check_session(&store, &[randn(&[1, DIM], 3)], EPS, |s, v| {
                let probs = clf.classify(s, v[0])?;
                probe(s, probs, 4)
            })?
        }
        GradModule::Fpm => {
            let (store, fpm) = with_store(14, |p| Ok(FeaturePurifier::init(p, DIM, 4, Selection::TopK(2))))?;
            let fixed = {
                let mut s = Session::inference(&store);
                let (a, b) = (s.graph.constant(x.clone()), s.graph.constant(y.clone()));
                let g = fpm.similarity(&mut s, a, b)?;
                let indices = topk_indices(&token_scores(s.graph.value(g)), 2)?;
                build_mask(&indices, TOKENS)?
            };
            grad_check_session(&store, &[x, y], EPS, |s, v| {
                let g = fpm.similarity(s, v[0], v[1])?;
                let m = s.graph.constant(fixed.clone());
                let purified = purify(s, m, v[0])?;
                let a = probe(s, g, 4)?;
                let b = probe(s, purified, 5)?;
                s.graph.add(a, b)
            })?
        }
        GradModule::CfgFuse => {
            let (store, layer) = with_store(15, |p| CfgLayer::init(p, DIM, HEADS))?;
            grad_check_session(&store, &[x, y], EPS, |s, v| {
                let out = layer.fuse_with_prototype(s, v[0], v[1])?.fused;
                probe(s, out, 4)
            })?
        }
        GradModule::CfgRefine => {
            let (store, layer) = with_store(16, |p| CfgLayer::init(p, DIM, HEADS))?;
            grad_check_session(&store, &[x, y], EPS, |s, v| {
                let out = layer.refine(s, v[0], v[1])?.state;
                probe(s, out, 4)
            })?
        }
        GradModule::ClsLoss => grad_check_session(&ParamStore::new(), &[randn(&[1, CLASSES], 3)], EPS, |s, v| {
            let probs = s.graph.softmax(v[0], 1)?;
            cls_loss(&mut s.graph, probs, 1)
        })?,
        GradModule::RecLoss => grad_check_session(&ParamStore::new(), &[x, y], EPS, |s, v| {
            rec_loss(&mut s.graph, v[0], v[1])
        })?,
        GradModule::TotalLoss => grad_check_session(
            &ParamStore::new(),
            &[x, y, randn(&[1, CLASSES], 3)],
            EPS,
            |s, v| {
                let rec = rec_loss(&mut s.graph, v[0], v[1])?;
                let probs = s.graph.softmax(v[2], 1)?;
                let cls = cls_loss(&mut s.graph, probs, 2)?;
                total_loss(&mut s.graph, rec, cls, 0.3)
            },
        )?,
        GradModule::Pipeline => {
            // the reconstruction target is a stop-gradient, so the embedder
            // is left frozen
            let model = toy_model()?;
            let patches = randn(&[TOKENS, 4], 3);
            grad_check_session(&model.store, &[], EPS, |s, _| Ok(model.loss_vars(s, &patches, 1)?.0))?
        }
    };
    Ok(GradReport {
        module,
        max_rel_error: err,
    })
}

pub fn check_all() -> Result<Vec<GradReport>> {
    GradModule::ALL.into_iter().map(check).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in GradModule::ALL {
            assert_eq!(m.name().parse::<GradModule>().unwrap(), m);
        }
        assert!("decoder".parse::<GradModule>().is_err());
    }

    #[test]
    fn losses_and_classifier_pass() {
        for m in [GradModule::ClsLoss, GradModule::RecLoss, GradModule::TotalLoss, GradModule::Classifier] {
            let r = check(m).unwrap();
            assert!(r.passed(), "{m}: {}", r.max_rel_error);
        }
    }
}
