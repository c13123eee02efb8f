use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn get_arc(&self, name: &str) -> Option<Arc<Tensor>> {
        self.params.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }
}

/// Binds parameters of a store into a graph on first use.
pub struct Session<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Session<'g> {
    /// Parameters become gradient-receiving leaves.
    pub fn train(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self {
            graph,
            store,
            trainable: true,
            bound: RefCell::default(),
        }
    }

    /// Parameters become constants.
    pub fn frozen(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self {
            graph,
            store,
            trainable: false,
            bound: RefCell::default(),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    /// The graph node for parameter `name`.
    ///
    /// Panics when the store has no such parameter; model code and its
    /// initializer must agree on names.
    pub fn param(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let t = self
            .store
            .get_arc(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// Gradients of every bound parameter, keyed by name. Parameters that
    /// did not influence the loss get zero gradients.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Adds `src` into `dst` name by name.
pub fn accumulate_grads(dst: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) {
    for (k, v) in src {
        match dst.get_mut(&k) {
            Some(acc) => acc.add_assign(&v),
            None => {
                dst.insert(k, v);
            }
        }
    }
}
