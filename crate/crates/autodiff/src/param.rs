use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Prompt,
    Gate,
    Coupling,
    Backbone,
    GateNet,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Prompt,
        ParamGroup::Gate,
        ParamGroup::Coupling,
        ParamGroup::Backbone,
        ParamGroup::GateNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Prompt => "prompt",
            ParamGroup::Gate => "gate",
            ParamGroup::Coupling => "coupling",
            ParamGroup::Backbone => "backbone",
            ParamGroup::GateNet => "gate-net",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named tensor that may be trained.
///
/// The group is fixed at construction. Frozen parameters enter a graph as
/// constants and never appear in a [`GradientMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    group: ParamGroup,
    frozen: bool,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        Self {
            name: name.into(),
            group,
            frozen: false,
            value,
        }
    }

    pub fn frozen(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        Self {
            frozen: true,
            ..Self::new(name, group, value)
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub group: ParamGroup,
    pub grad: Tensor,
}

/// Gradients keyed by parameter name, one entry per trainable parameter
/// that was registered in the graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, GradEntry>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, grad: Tensor) {
        self.entries.insert(name.into(), GradEntry { group, grad });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.grad)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|e| e.group)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<GradEntry> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterates in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &GradEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut GradEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str, &GradEntry) -> bool) {
        self.entries.retain(|k, v| keep(k, v));
    }

    /// L2 norm over every entry.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// L2 norm over the entries of one group; zero when the group is absent.
    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.entries
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for e in self.entries.values_mut() {
            e.grad.scale_in_place(factor);
        }
    }
}
