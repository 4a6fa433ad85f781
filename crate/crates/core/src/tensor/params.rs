//! Named trainable parameters, owned outside any single tape.
//!
//! A [`ParamStore`] holds the canonical values; each training step opens a
//! fresh [`Graph`], registers every parameter as a trainable leaf via
//! [`Binding::new`], and reads gradients back out by [`ParamId`].

use super::{Element, Graph, NodeId, Tensor};

/// Index of a parameter within its [`ParamStore`]; stable across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    params: Vec<Parameter<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Register a parameter; names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            self.by_name(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Parameter { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coordinate_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy of the store with every value converted element by element;
    /// used to re-run a 32-bit model under the 64-bit gradient oracle.
    pub fn convert<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Tensor::from_f64(
                        p.value.shape().to_vec(),
                        &p.value.data().iter().map(|v| v.to_f64()).collect::<Vec<_>>(),
                    )
                    .unwrap(),
                })
                .collect(),
        }
    }
}

/// Maps every parameter of a store onto leaf nodes of one tape.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    /// Register all parameters of `store` as trainable leaves on `graph`.
    pub fn new<E: Element>(graph: &mut Graph<E>, store: &ParamStore<E>) -> Self {
        let nodes = store
            .iter()
            .map(|(_, p)| graph.leaf(p.value.clone(), true))
            .collect();
        Self { nodes }
    }

    pub fn node(&self, id: impl Into<ParamId>) -> NodeId {
        let id: ParamId = id.into();
        self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

impl From<usize> for ParamId {
    fn from(v: usize) -> Self {
        ParamId(v)
    }
}
