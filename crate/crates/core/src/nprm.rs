//! Normality prototype retrieval: cls-token classification and the
//! class-conditioned prototype bank.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::patch::EMBED_INIT_STD;

/// Probability floor applied before taking logs in the classification loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Single fully connected layer `e → T` followed by softmax.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub linear: Linear,
    pub classes: usize,
}

impl Classifier {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, dim: usize, classes: usize) -> Self {
        Classifier {
            linear: p.linear("classifier", dim, classes, true),
            classes,
        }
    }

    pub fn logits(&self, s: &mut Session, cls: Var) -> Result<Var> {
        self.linear.forward(s, cls)
    }

    /// `1 × T` class probabilities for a `1 × e` cls embedding.
    pub fn classify(&self, s: &mut Session, cls: Var) -> Result<Var> {
        let logits = self.logits(s, cls)?;
        s.graph.softmax(logits, 1)
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn select_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// `T` learnable `s × e` prototypes, one per normal class.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub prototypes: Vec<ParamId>,
}

impl PrototypeBank {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, classes: usize, tokens: usize, dim: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("prototype bank needs at least one class".into()));
        }
        let prototypes = (0..classes)
            .map(|c| p.normal(&format!("prototype.{c}"), &[tokens, dim], EMBED_INIT_STD))
            .collect();
        Ok(PrototypeBank { prototypes })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn id(&self, class: usize) -> Result<ParamId> {
        self.prototypes.get(class).copied().ok_or(Error::Index {
            index: class,
            len: self.prototypes.len(),
        })
    }

    /// Prototype `class` bound into the session. Gradients reach it only
    /// while the bank is not frozen.
    pub fn get_prototype(&self, s: &mut Session, class: usize) -> Result<Var> {
        let id = self.id(class)?;
        Ok(s.param(id))
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        self.set_frozen(store, true);
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        for &id in &self.prototypes {
            store.set_frozen(id, frozen);
        }
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        self.prototypes.iter().all(|&id| store.is_frozen(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::SeedStream;
    use crate::tensor::Tensor;

    fn setup(classes: usize) -> (ParamStore, Classifier, PrototypeBank) {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(1).rng("init");
        let mut p = Init::new(&mut store, &mut rng);
        let clf = Classifier::init(&mut p, 4, classes);
        let bank = PrototypeBank::init(&mut p, classes, 3, 4).unwrap();
        (store, clf, bank)
    }

    #[test]
    fn zero_weights_classify_uniformly() {
        let (mut store, clf, _) = setup(3);
        store.set(clf.linear.weight, Tensor::zeros(&[4, 3])).unwrap();
        store.set(clf.linear.bias.unwrap(), Tensor::zeros(&[3])).unwrap();
        let mut s = Session::inference(&store);
        let x = s.graph.constant(Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let y = clf.classify(&mut s, x).unwrap();
        for &p in s.graph.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logits_ln2_zero() {
        let (mut store, clf, _) = setup(2);
        // weight picks the first input into logit 0 only
        let mut w = Tensor::zeros(&[4, 2]);
        w.data_mut()[0] = 1.0;
        store.set(clf.linear.weight, w).unwrap();
        store.set(clf.linear.bias.unwrap(), Tensor::zeros(&[2])).unwrap();
        let mut s = Session::inference(&store);
        let x = s.graph.constant(Tensor::new(vec![1, 4], vec![2f64.ln(), 0.0, 0.0, 0.0]).unwrap());
        let y = clf.classify(&mut s, x).unwrap();
        let v = s.graph.value(y).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_class_examples() {
        assert_eq!(select_class(&[0.2, 0.7, 0.1]), 1);
        assert_eq!(select_class(&[0.5, 0.5]), 0);
    }

    #[test]
    fn prototype_lookup() {
        let (store, _, bank) = setup(1);
        let mut s = Session::inference(&store);
        let p = bank.get_prototype(&mut s, 0).unwrap();
        assert_eq!(s.graph.shape(p), &[3, 4]);
        assert!(matches!(bank.get_prototype(&mut s, 1), Err(Error::Index { index: 1, len: 1 })));
    }

    #[test]
    fn frozen_bank_cannot_be_mutated() {
        let (mut store, _, bank) = setup(2);
        bank.freeze(&mut store);
        assert!(bank.is_frozen(&store));
        for &id in &bank.prototypes {
            assert!(store.value_mut(id).is_none());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn argmax_invariant_under_logit_scaling(
                logits in proptest::collection::vec(-5.0f64..5.0, 4),
                scale in 0.01f64..50.0,
            ) {
                let softmax = |xs: &[f64]| {
                    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
                    let t: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / t).collect::<Vec<_>>()
                };
                let scaled: Vec<f64> = logits.iter().map(|x| x * scale).collect();
                prop_assert_eq!(select_class(&softmax(&logits)), select_class(&softmax(&scaled)));
            }
        }
    }
}
