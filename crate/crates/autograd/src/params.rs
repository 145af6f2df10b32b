use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not trained (e.g. running statistics).
    Buffer,
}

/// Named, ordered collection of model tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(Rc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_rc(&self, id: ParamId) -> Rc<Tensor<T>> {
        Rc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor<T>)) {
        f(Rc::make_mut(&mut self.values[id.0]));
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Trainable)
            .map(|id| self.get(id).numel())
            .sum()
    }
}

/// Lazily registers store parameters as leaves of one tape, at most once each,
/// so shared weights accumulate a single gradient.
pub struct ParamBinder<'t, T> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
}

impl<'t, T: Scalar> ParamBinder<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| match self.store.kind(id) {
            ParamKind::Trainable => self.tape.leaf_rc(self.store.get_rc(id)),
            ParamKind::Buffer => self.tape.constant(self.store.get(id).clone()),
        })
    }

    /// Use `var` for parameter `id` in this pass instead of the stored value.
    pub fn bind(&self, id: ParamId, var: Var<'t, T>) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    /// Gradients of every trainable parameter touched during the forward pass.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let bound = self.bound.borrow();
        bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if self.store.kinds[i] != ParamKind::Trainable {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
