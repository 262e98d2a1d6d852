//! The assembled detector: embed, encode, classify, retrieve a prototype,
//! purify, decode, and score.

use rand::Rng;

use crate::autodiff::Var;
use crate::config::ExperimentConfig;
use crate::data::NormStats;
use crate::decoder::{CfgDecoder, PlainDecoder};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fpm::{FeaturePurifier, PurificationResult};
use crate::layers::Init;
use crate::nprm::{select_class, Classifier, PrototypeBank};
use crate::objective::{anomaly_score, cls_loss, rec_loss, total_loss, LossBreakdown, ReconstructionError};
use crate::params::{ParamStore, SeedStream, Session};
use crate::patch::{patchify_pixels, ImageSample, PatchEmbedder, PatchGrid};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Decoder {
    Cfg(CfgDecoder),
    Plain(PlainDecoder),
}

/// How the prototype is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Ground-truth class index (training).
    TeacherForced(usize),
    /// Argmax of the classifier.
    Predicted,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ExperimentConfig,
    pub grid: PatchGrid,
    pub store: ParamStore,
    pub embedder: PatchEmbedder,
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub bank: PrototypeBank,
    pub purifier: FeaturePurifier,
    pub decoder: Decoder,
    pub norm: NormStats,
}

/// Graph handles and values of one forward pass.
pub struct ForwardVars {
    /// `1 × T` class probabilities.
    pub probs: Var,
    pub prototype: usize,
    pub purification: PurificationResult,
    /// `s × e` reconstruction target: embedder patch rows.
    pub target: Var,
    /// `s × e` decoder output.
    pub reconstruction: Var,
    /// Final encoder layer, `(s+1) × e`.
    pub latent: Var,
}

/// Plain values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub probs: Vec<f64>,
    pub prototype: usize,
    pub purification: PurificationResult,
    pub target: Tensor,
    pub reconstruction: Tensor,
    pub error: ReconstructionError,
}

impl Model {
    /// Fresh model with parameters drawn from the `init` stream of
    /// `config.seed`. Pixel statistics default to identity.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let size = config.data.image_size;
        let grid = PatchGrid::new(size, size, 1, m.patch)?;
        let tokens = grid.tokens();
        let classes = config.data.normal_classes.len();
        let selection = config.fpm.selection(tokens)?;

        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(config.seed).rng("init");
        let mut p = Init::new(&mut store, &mut rng);
        let embedder = PatchEmbedder::init(&mut p, &grid, m.dim);
        let encoder = Encoder::init(&mut p, m.depth, m.dim, m.heads)?;
        let classifier = Classifier::init(&mut p, m.dim, classes);
        let bank = PrototypeBank::init(&mut p, classes, tokens, m.dim)?;
        let purifier = FeaturePurifier::init(&mut p, m.dim, m.proj_dim, selection);
        let decoder = if config.decoder.cfg {
            Decoder::Cfg(CfgDecoder::init(&mut p, m.depth, m.dim, m.heads)?)
        } else {
            Decoder::Plain(PlainDecoder::init(&mut p, m.depth, m.dim, m.heads)?)
        };
        if !m.train_embedder {
            for id in embedder.all_params() {
                store.set_frozen(id, true);
            }
        }
        Ok(Model {
            config: config.clone(),
            grid,
            store,
            embedder,
            encoder,
            classifier,
            bank,
            purifier,
            decoder,
            norm: NormStats { mean: 0.0, std: 1.0 },
        })
    }

    pub fn classes(&self) -> usize {
        self.bank.len()
    }

    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }

    /// Standardized `s × patch²` patches of a raw image.
    pub fn patches(&self, image: &ImageSample) -> Result<Tensor> {
        if image.height != self.grid.height || image.width != self.grid.width {
            return Err(Error::Dimension(format!(
                "model expects {}x{} images, got {}x{}",
                self.grid.height, self.grid.width, image.height, image.width
            )));
        }
        patchify_pixels(&self.norm.apply(&image.grayscale()), &self.grid)
    }

    /// Builds the full forward graph for one image.
    pub fn forward_vars(&self, s: &mut Session, patches: &Tensor, routing: Routing) -> Result<ForwardVars> {
        let tokens = self.tokens();
        let x = s.graph.constant(patches.clone());
        let seq = self.embedder.embed(s, x)?;
        let trace = self.encoder.encode(s, seq)?;
        let latent = trace.last();

        let cls = s.graph.slice_rows(latent, 0, 1)?;
        let probs = self.classifier.classify(s, cls)?;
        let prototype = match routing {
            Routing::TeacherForced(c) => {
                if c >= self.classes() {
                    return Err(Error::Index {
                        index: c,
                        len: self.classes(),
                    });
                }
                c
            }
            Routing::Predicted => select_class(s.graph.value(probs).data()),
        };
        let proto = self.bank.get_prototype(s, prototype)?;

        let patch_rows = s.graph.slice_rows(latent, 1, tokens + 1)?;
        let (purification, purified) = self.purifier.purify_sequence(s, patch_rows, proto)?;

        let decoded = match &self.decoder {
            Decoder::Cfg(d) => {
                let guides = trace
                    .layers
                    .iter()
                    .map(|&l| s.graph.slice_rows(l, 1, tokens + 1))
                    .collect::<Result<Vec<_>>>()?;
                d.decode(s, &guides, proto, purified)?
            }
            Decoder::Plain(d) => d.decode(s, purified)?,
        };
        let embedded_rows = s.graph.slice_rows(seq, 1, tokens + 1)?;
        let target = s.graph.detach(embedded_rows);
        Ok(ForwardVars {
            probs,
            prototype,
            purification,
            target,
            reconstruction: decoded.reconstruction(),
            latent,
        })
    }

    /// Inference pass with plain outputs.
    pub fn forward(&self, patches: &Tensor, routing: Routing) -> Result<ForwardOutput> {
        let mut s = Session::inference(&self.store);
        let v = self.forward_vars(&mut s, patches, routing)?;
        let target = s.graph.value(v.target).clone();
        let reconstruction = s.graph.value(v.reconstruction).clone();
        let error = anomaly_score(&target, &reconstruction, self.config.objective.pooling)?;
        Ok(ForwardOutput {
            probs: s.graph.value(v.probs).data().to_vec(),
            prototype: v.prototype,
            purification: v.purification,
            target,
            reconstruction,
            error,
        })
    }

    pub fn forward_image(&self, image: &ImageSample, routing: Routing) -> Result<ForwardOutput> {
        self.forward(&self.patches(image)?, routing)
    }

    /// Scalar loss graph `(total, l_rec, l_cls)` for a labelled sample.
    pub fn loss_vars(&self, s: &mut Session, patches: &Tensor, label: usize) -> Result<(Var, Var, Var)> {
        let v = self.forward_vars(s, patches, Routing::TeacherForced(label))?;
        let l_rec = rec_loss(&mut s.graph, v.target, v.reconstruction)?;
        let l_cls = cls_loss(&mut s.graph, v.probs, label)?;
        let total = total_loss(&mut s.graph, l_rec, l_cls, self.config.objective.alpha)?;
        Ok((total, l_rec, l_cls))
    }

    pub fn loss(&self, patches: &Tensor, label: usize) -> Result<LossBreakdown> {
        let mut s = Session::inference(&self.store);
        let (_, r, c) = self.loss_vars(&mut s, patches, label)?;
        LossBreakdown::new(s.graph.value(r).item(), s.graph.value(c).item(), self.config.objective.alpha)
    }

    /// Latent embedding: mean over patch rows of the final encoder layer.
    pub fn embedding(&self, image: &ImageSample) -> Result<Vec<f64>> {
        let patches = self.patches(image)?;
        let mut s = Session::inference(&self.store);
        let x = s.graph.constant(patches);
        let seq = self.embedder.embed(&mut s, x)?;
        let latent = self.encoder.encode(&mut s, seq)?.last();
        let t = s.graph.value(latent);
        let tokens = self.tokens();
        Ok((0..t.cols())
            .map(|j| (1..=tokens).map(|i| t.at(i, j)).sum::<f64>() / tokens as f64)
            .collect())
    }

    /// Re-initializes every trainable parameter from `rng` (testing aid for
    /// weight-independent properties).
    pub fn perturb<R: Rng>(&mut self, std: f64, rng: &mut R) {
        for id in self.store.ids().collect::<Vec<_>>() {
            if let Some(t) = self.store.value_mut(id) {
                let noise = Tensor::randn(t.shape(), std, rng);
                t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FpmMode;
    use crate::data::{synthetic_digits, SyntheticOptions};
    use crate::params::grad_check_session;

    fn toy_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.image_size = 4;
        c.model.patch = 2;
        c.model.dim = 8;
        c.model.heads = 2;
        c.model.proj_dim = 4;
        c.model.depth = 2;
        c.data.normal_classes = vec![0, 1, 2];
        c
    }

    fn digit(size: usize, class: usize) -> ImageSample {
        let opts = SyntheticOptions {
            kind: Default::default(),
            classes: 10,
            train_per_class: 1,
            test_per_class: 0,
            size,
        };
        synthetic_digits(&opts, &SeedStream::new(9))
            .unwrap()
            .train
            .swap_remove(class)
    }

    #[test]
    fn untrained_identity_mask_pass() {
        let mut cfg = ExperimentConfig::default();
        cfg.fpm.k = Some(16);
        let model = Model::new(&cfg).unwrap();
        let out = model.forward_image(&digit(28, 3), Routing::Predicted).unwrap();
        assert_eq!(out.purification.indices, (0..16).collect::<Vec<_>>());
        assert_eq!(out.reconstruction.shape(), &[16, 64]);
        assert!(out.error.score.is_finite());
        assert_eq!(out.error.patch_errors.len(), 16);
    }

    #[test]
    fn teacher_forcing_overrides_classifier() {
        let model = Model::new(&ExperimentConfig::default()).unwrap();
        let p = model.patches(&digit(28, 1)).unwrap();
        for c in 0..5 {
            assert_eq!(model.forward(&p, Routing::TeacherForced(c)).unwrap().prototype, c);
        }
        assert!(matches!(model.forward(&p, Routing::TeacherForced(5)), Err(Error::Index { .. })));
        let predicted = model.forward(&p, Routing::Predicted).unwrap();
        assert_eq!(predicted.prototype, select_class(&predicted.probs));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(&ExperimentConfig::default()).unwrap();
        let p = model.patches(&digit(28, 2)).unwrap();
        let a = model.forward(&p, Routing::Predicted).unwrap();
        let b = model.forward(&p, Routing::Predicted).unwrap();
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(a.error, b.error);
    }

    #[test]
    fn topk_keeps_k_rows() {
        let model = Model::new(&ExperimentConfig::default()).unwrap();
        let out = model.forward_image(&digit(28, 4), Routing::Predicted).unwrap();
        assert_eq!(out.purification.indices.len(), 8);
        for r in 0..16 {
            let zero = out.purification.purified.row(r).iter().all(|&v| v == 0.0);
            assert_eq!(zero, !out.purification.indices.contains(&r));
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        // the reconstruction target is a stop-gradient, so the embedder
        // stays frozen here
        let mut cfg = toy_config();
        cfg.objective.alpha = 0.3;
        let mut model = Model::new(&cfg).unwrap();
        model.perturb(0.05, &mut SeedStream::new(2).rng("perturb"));
        let patches = model.patches(&digit(4, 1)).unwrap();
        let err = grad_check_session(&model.store, &[], 1e-6, |s, _| {
            Ok(model.loss_vars(s, &patches, 1)?.0)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn loss_gradient_is_linear_in_terms() {
        let mut cfg = toy_config();
        cfg.objective.alpha = 0.25;
        let model = Model::new(&cfg).unwrap();
        let patches = model.patches(&digit(4, 2)).unwrap();
        let grads = |which: usize| {
            let mut s = Session::new(&model.store);
            let vars = model.loss_vars(&mut s, &patches, 2).unwrap();
            let out = [vars.0, vars.1, vars.2][which];
            let g = s.graph.backward(out).unwrap();
            s.param_grads(&g)
        };
        let (total, rec, cls) = (grads(0), grads(1), grads(2));
        for ((t, r), c) in total.iter().zip(&rec).zip(&cls) {
            let Some(t) = t else { continue };
            for (i, &tv) in t.data().iter().enumerate() {
                let rv = r.as_ref().map_or(0.0, |g| g.data()[i]);
                let cv = c.as_ref().map_or(0.0, |g| g.data()[i]);
                assert!((tv - (0.75 * rv + 0.25 * cv)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn off_mode_keeps_everything() {
        let mut cfg = toy_config();
        cfg.fpm.mode = FpmMode::Off;
        cfg.decoder.cfg = false;
        let model = Model::new(&cfg).unwrap();
        assert!(matches!(model.decoder, Decoder::Plain(_)));
        let out = model.forward_image(&digit(4, 0), Routing::Predicted).unwrap();
        assert_eq!(out.purification.indices.len(), 4);
        assert_eq!(model.embedding(&digit(4, 0)).unwrap().len(), 8);
    }
}
