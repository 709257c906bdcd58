//! Central parameter registry.
//!
//! Every trainable tensor in a run lives in one [`ParamStore`] and is
//! referenced by [`ParamId`]. Learning-rate groups implement the two-speed
//! optimizer split (experts vs router vs task representations); per-parameter
//! freeze flags implement frozen task-representation rows.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Learning-rate groups.
pub const GROUP_BASE: usize = 0;
pub const GROUP_ROUTER: usize = 1;
pub const GROUP_REPR: usize = 2;
pub const N_GROUPS: usize = 3;

#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    frozen: Vec<bool>,
    groups: Vec<usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>, group: usize) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.frozen.push(false);
        self.groups.push(group);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<S>) {
        debug_assert_eq!(self.tensors[id.0].shape(), t.shape());
        self.tensors[id.0] = t;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> usize {
        self.groups[id.0]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Binds store parameters onto a tape, once per parameter, and maps them
/// back to their gradients after backward.
pub struct ParamBinder<'t, S: Scalar> {
    tape: &'t Tape<S>,
    bound: RefCell<HashMap<usize, usize>>, // ParamId index -> node id
}

impl<'t, S: Scalar> ParamBinder<'t, S> {
    pub fn new(tape: &'t Tape<S>) -> Self {
        ParamBinder {
            tape,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn bind(&self, store: &ParamStore<S>, id: ParamId) -> Var<'t, S> {
        let mut bound = self.bound.borrow_mut();
        if let Some(&node) = bound.get(&id.0) {
            return self.tape.var_for_node(node);
        }
        let var = self.tape.leaf(store.get(id).clone());
        bound.insert(id.0, var.id);
        var
    }

    /// Gradients for every bound parameter, in store order.
    pub fn collect_grads(
        &self,
        grads: &crate::tape::Grads<S>,
    ) -> Vec<(ParamId, Tensor<S>)> {
        let bound = self.bound.borrow();
        let mut pairs: Vec<(usize, usize)> = bound.iter().map(|(&p, &n)| (p, n)).collect();
        pairs.sort_unstable();
        pairs
            .into_iter()
            .filter_map(|(p, n)| grads.by_id(n).map(|g| (ParamId(p), g.clone())))
            .collect()
    }
}
