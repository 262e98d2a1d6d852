//! Named parameter storage and the per-forward binding of parameters into a
//! [`Graph`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{relative_error, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    frozen: bool,
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates. Frozen parameters
    /// cannot be borrowed mutably.
    pub fn value_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let entry = &mut self.entries[id.0];
        if entry.frozen {
            None
        } else {
            Some(Arc::make_mut(&mut entry.value))
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// A [`Graph`] plus lazy bindings of store parameters to graph leaves.
///
/// Each parameter becomes at most one leaf per session, so its gradient is
/// the total over every use in the forward pass.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'s> Session<'s> {
    /// Session whose unfrozen parameters require gradients.
    pub fn new(store: &'s ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track: true,
        }
    }

    /// Session for inference: no leaf requires gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Session {
            track: false,
            ..Session::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let requires = self.track && !self.store.is_frozen(id);
        let v = self.graph.leaf_shared(self.store.shared(id), requires);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameter gradients indexed by [`ParamId`]; unused or frozen
    /// parameters have `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

/// Largest relative error between reverse-mode and central finite-difference
/// gradients of `f`, taken over every element of `inputs` and of every
/// unfrozen parameter in `store`.
pub fn grad_check_session<F>(store: &ParamStore, inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, values: &[Tensor]| -> Result<f64> {
        let mut s = Session::inference(store);
        let vars: Vec<Var> = values.iter().map(|t| s.graph.constant(t.clone())).collect();
        let out = f(&mut s, &vars)?;
        Ok(s.graph.value(out).item())
    };

    let mut s = Session::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone(), true)).collect();
    let out = f(&mut s, &vars)?;
    let grads = s.graph.backward(out)?;
    let param_grads = s.param_grads(&grads);

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned();
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(store, &probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(store, &probe)?;
            probe[which].data_mut()[i] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * eps)));
        }
    }

    let mut perturbed = store.clone();
    for id in store.ids().filter(|&id| !store.is_frozen(id)) {
        let base = store.get(id).clone();
        let analytic = param_grads[id.index()].as_ref();
        for i in 0..base.numel() {
            let orig = base.data()[i];
            let mut t = base.clone();
            t.data_mut()[i] = orig + eps;
            perturbed.set(id, t.clone())?;
            let plus = eval(&perturbed, inputs)?;
            t.data_mut()[i] = orig - eps;
            perturbed.set(id, t)?;
            let minus = eval(&perturbed, inputs)?;
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * eps)));
        }
        perturbed.set(id, base)?;
    }
    Ok(worst)
}

/// Seeded source of independent ChaCha streams, one per named purpose.
#[derive(Clone, Debug)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `purpose`; the same (seed, purpose) pair
    /// always yields the same sequence.
    pub fn rng(&self, purpose: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(purpose));
        rng
    }

    /// Derived child stream.
    pub fn split(&self, purpose: &str) -> SeedStream {
        SeedStream::new(self.rng(purpose).random())
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_do_not_require_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(2.0));
        store.set_frozen(b, true);
        let mut s = Session::new(&store);
        let va = s.param(a);
        let vb = s.param(b);
        assert!(s.graph.requires_grad(va));
        assert!(!s.graph.requires_grad(vb));
        let p = s.graph.mul(va, vb).unwrap();
        let grads = s.graph.backward(p).unwrap();
        let pg = s.param_grads(&grads);
        assert_eq!(pg[a.index()].as_ref().unwrap().item(), 2.0);
        assert!(pg[b.index()].is_none());
        drop(s);
        assert!(store.value_mut(b).is_none());
    }

    #[test]
    fn shared_use_accumulates() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(3.0));
        let mut s = Session::new(&store);
        let x = s.param(a);
        let y = s.param(a);
        assert_eq!(x, y);
        let p = s.graph.mul(x, y).unwrap();
        let grads = s.graph.backward(p).unwrap();
        assert_eq!(s.param_grads(&grads)[0].as_ref().unwrap().item(), 6.0);
    }

    #[test]
    fn seed_streams_are_reproducible_and_distinct() {
        let s = SeedStream::new(42);
        let a: u64 = s.rng("init").random();
        let b: u64 = s.rng("init").random();
        let c: u64 = s.rng("data").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
