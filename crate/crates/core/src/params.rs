//! Named parameter registry with group membership and trainable flags.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Block,
    Head,
    SourceHead,
    Adapter,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Block, ParamGroup::Head, ParamGroup::SourceHead, ParamGroup::Adapter];

    /// Name prefix for parameters of this group, e.g. `adapter/stage2.w1`.
    pub fn prefix(&self) -> &'static str {
        match self {
            ParamGroup::Block => "block",
            ParamGroup::Head => "head",
            ParamGroup::SourceHead => "source_head",
            ParamGroup::Adapter => "adapter",
        }
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.prefix() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Ordered parameter set. Insertion order is stable and defines gradient layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers `group/name`. Panics on a duplicate name, which is a programming error.
    pub fn insert(&mut self, group: ParamGroup, name: &str, value: Array2<f64>) {
        let full = format!("{}/{}", group.prefix(), name);
        assert!(self.index_of(&full).is_none(), "duplicate parameter {full}");
        self.params.push(Param { name: full, group, value, trainable: true });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Like [`get`](Self::get) but panics when missing; used on names the encoder itself registered.
    pub fn expect(&self, name: &str) -> &Array2<f64> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        self.params.retain(|p| p.group != group);
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.index_of(name).map(|i| self.params.remove(i))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl Grads {
    pub fn zeros_like(set: &ParamSet) -> Self {
        Grads {
            names: set.iter().map(|p| p.name.clone()).collect(),
            values: set.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn accumulate(&mut self, name: &str, g: &Array2<f64>) {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no gradient slot for {name}"));
        self.values[i] += g;
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}
