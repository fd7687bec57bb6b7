use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order. Names are dot-separated module paths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.frozen.push(false);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces all values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::schema(
                "params",
                "parameter names differ from the model architecture",
            ));
        }
        for (i, (mine, theirs)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::schema(
                    format!("params.{}", self.names[i]),
                    format!("shape {:?} expected, found {:?}", mine.shape(), theirs.shape()),
                ));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

/// Registers parameters with the default initialization: weight matrices
/// uniform in ±1/√fan_in, biases zero, layer-norm gain one.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        ParamBuilder { store, rng }
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::filled(rows, cols, v))
    }
}

/// Lazily binds parameters into a graph so each appears once per forward pass.
pub struct Binder<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<NodeId>>,
    track: bool,
}

impl<'a> Binder<'a> {
    /// `track = false` builds an inference graph with no gradient bookkeeping.
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Binder {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(n) = self.bound[id.0] {
            return Ok(n);
        }
        let requires = self.track && !self.store.is_frozen(id);
        let n = self.graph.leaf(self.store.get(id).clone(), requires)?;
        self.bound[id.0] = Some(n);
        Ok(n)
    }

    /// Collects parameter gradients (zero for parameters the graph never touched).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| {
                let shape = self.store.get(id).shape().to_vec();
                match self.bound[id.0].and_then(|n| grads.raw(n)) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
                    None => {
                        let len = self.store.get(id).len();
                        Tensor::new(shape, vec![0.0; len]).expect("grad shape")
                    }
                }
            })
            .collect()
    }
}
