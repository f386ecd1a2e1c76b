//! Named parameter storage shared by the model, the optimizer and the
//! checkpoint format.
//!
//! Parameters live in one flat, ordered store; modules hold [`ParamRef`]
//! handles. Each training step binds the whole store onto a fresh tape
//! ([`Binding`]), so gradients come back keyed by the same handles.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::linalg::Mat;

/// Which stage a parameter belongs to; used for phase-wise freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Encoder,
    Backbone,
    Quantizer,
    Decoder,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Arc<Mat>,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: ParamGroup, name: impl Into<String>, value: Mat) -> ParamRef {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value: Arc::new(value) });
        ParamRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: ParamRef) -> &Mat {
        &self.entries[r.0].value
    }

    pub fn get_rc(&self, r: ParamRef) -> Arc<Mat> {
        Arc::clone(&self.entries[r.0].value)
    }

    /// Mutable access; clones the storage only if a binding still shares it.
    pub fn get_mut(&mut self, r: ParamRef) -> &mut Mat {
        Arc::make_mut(&mut self.entries[r.0].value)
    }

    pub fn set(&mut self, r: ParamRef, value: Mat) {
        self.entries[r.0].value = Arc::new(value);
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamRef, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamRef(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamRef> {
        self.entries.iter().position(|e| e.name == name).map(ParamRef)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-tape binding of every stored parameter as a leaf variable.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> Binding {
        let vars = store.entries.iter().map(|e| tape.leaf_rc(Arc::clone(&e.value))).collect();
        Binding { vars }
    }

    pub fn var(&self, r: ParamRef) -> Var {
        self.vars[r.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
