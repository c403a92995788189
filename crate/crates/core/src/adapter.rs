//! Residual bottleneck adapters `Y = X + ReLU(X·W1)·W2`, insertion policy,
//! tunability modes and parameter accounting.
//!
//! Adapters have no biases and no normalization. `W2` starts at zero so an
//! inserted adapter is an exact identity until the first update. Partial
//! insertion fills the deepest points first.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{AdapterSlot, EncoderFamily, EncoderState};
use crate::numeric::{gaussian_matrix, relu, relu_backward, rng_for};
use crate::params::ParamGroup;

#[derive(Debug, Error, PartialEq)]
pub enum AdapterError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("requested {requested} adapters but the encoder has {available} insertion points")]
    TooManyAdapters { requested: usize, available: usize },
    #[error("tunability mode {0:?} requires adapters but none are inserted")]
    ModeRequiresAdapters(TunabilityMode),
    #[error("bottleneck ratio must lie in (0, 1], got {0}")]
    BadRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TunabilityMode {
    Head,
    HeadAdapter,
    Backbone,
    BackboneAdapter,
}

impl TunabilityMode {
    pub const ALL: [TunabilityMode; 4] =
        [TunabilityMode::Head, TunabilityMode::HeadAdapter, TunabilityMode::Backbone, TunabilityMode::BackboneAdapter];

    pub fn uses_adapters(&self) -> bool {
        matches!(self, TunabilityMode::HeadAdapter | TunabilityMode::BackboneAdapter)
    }

    pub fn trainable_groups(&self) -> &'static [ParamGroup] {
        match self {
            TunabilityMode::Head => &[ParamGroup::Head],
            TunabilityMode::HeadAdapter => &[ParamGroup::Head, ParamGroup::Adapter],
            TunabilityMode::Backbone => &[ParamGroup::Head, ParamGroup::Block, ParamGroup::SourceHead],
            TunabilityMode::BackboneAdapter => &ParamGroup::ALL,
        }
    }

    /// The same mode without its adapter part.
    pub fn without_adapters(&self) -> TunabilityMode {
        match self {
            TunabilityMode::HeadAdapter => TunabilityMode::Head,
            TunabilityMode::BackboneAdapter => TunabilityMode::Backbone,
            other => *other,
        }
    }

    pub fn parse(s: &str) -> Option<TunabilityMode> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase().replace('-', "_"))).ok()
    }
}

/// A standalone adapter, e.g. for direct evaluation of the residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub point_name: String,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub bottleneck_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct AdapterTrace {
    x: Array2<f64>,
    pre: Array2<f64>,
}

pub fn bottleneck_width(width: usize, ratio: f64) -> usize {
    ((ratio * width as f64).round() as usize).max(1)
}

pub fn adapter_forward(x: &Array2<f64>, a: &AdapterState) -> Result<Array2<f64>, AdapterError> {
    if x.ncols() != a.w1.nrows() || a.w1.ncols() != a.w2.nrows() || a.w2.ncols() != x.ncols() {
        return Err(AdapterError::ShapeMismatch(format!(
            "input width {} with W1 {:?} and W2 {:?}",
            x.ncols(),
            a.w1.dim(),
            a.w2.dim()
        )));
    }
    Ok(adapter_apply(x, &a.w1, &a.w2).0)
}

pub(crate) fn adapter_apply(x: &Array2<f64>, w1: &Array2<f64>, w2: &Array2<f64>) -> (Array2<f64>, AdapterTrace) {
    let pre = x.dot(w1);
    let y = x + &relu(&pre).dot(w2);
    (y, AdapterTrace { x: x.clone(), pre })
}

/// Returns `(dX, dW1, dW2)`.
pub(crate) fn adapter_backward(
    t: &AdapterTrace,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let h = relu(&t.pre);
    let dw2 = h.t().dot(dy);
    let dpre = relu_backward(&dy.dot(&w2.t()), &t.pre);
    let dw1 = t.x.t().dot(&dpre);
    let dx = dy + &dpre.dot(&w1.t());
    (dx, dw1, dw2)
}

/// Gradients of `sum(G ⊙ adapter_forward(X))` for a given upstream `G`.
pub fn adapter_gradients(
    x: &Array2<f64>,
    a: &AdapterState,
    upstream: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>), AdapterError> {
    adapter_forward(x, a)?;
    let (_, trace) = adapter_apply(x, &a.w1, &a.w2);
    Ok(adapter_backward(&trace, &a.w1, &a.w2, upstream))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterPolicy {
    pub count: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for AdapterPolicy {
    fn default() -> Self {
        AdapterPolicy { count: 0, ratio: 0.25, seed: 0 }
    }
}

fn point_width(enc: &EncoderState, index: usize) -> usize {
    match enc.spec.family {
        EncoderFamily::Identity => enc.spec.backbone_width(),
        _ => enc.spec.widths[index],
    }
}

/// Returns a copy of `enc` with adapters on the last `policy.count`
/// insertion points. Existing adapters are replaced.
pub fn insert_adapters(enc: &EncoderState, policy: &AdapterPolicy) -> Result<EncoderState, AdapterError> {
    let points = enc.insertion_points();
    if policy.count > points.len() {
        return Err(AdapterError::TooManyAdapters { requested: policy.count, available: points.len() });
    }
    if !(policy.ratio > 0.0 && policy.ratio <= 1.0) {
        return Err(AdapterError::BadRatio(policy.ratio));
    }
    let mut out = enc.clone();
    out.params.remove_group(ParamGroup::Adapter);
    out.adapters.clear();
    let first = points.len() - policy.count;
    for (i, point) in points.iter().enumerate().skip(first) {
        let width = point_width(enc, i);
        let bottleneck = bottleneck_width(width, policy.ratio);
        let mut rng = rng_for(policy.seed, &format!("adapter/{point}"));
        let w1 = gaussian_matrix(&mut rng, width, bottleneck, (2.0 / width as f64).sqrt());
        out.params.insert(ParamGroup::Adapter, &format!("{point}.w1"), w1);
        out.params.insert(ParamGroup::Adapter, &format!("{point}.w2"), Array2::zeros((bottleneck, width)));
        out.adapters.push(AdapterSlot { point: point.clone(), width, bottleneck, ratio: policy.ratio });
    }
    Ok(out)
}

pub fn set_tunability(enc: &mut EncoderState, mode: TunabilityMode) -> Result<(), AdapterError> {
    if mode.uses_adapters() && enc.adapters.is_empty() {
        return Err(AdapterError::ModeRequiresAdapters(mode));
    }
    let groups = mode.trainable_groups();
    for p in enc.params.iter_mut() {
        p.trainable = groups.contains(&p.group);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub tunable: usize,
    pub by_group: BTreeMap<String, usize>,
}

impl ParamCount {
    pub fn group(&self, g: ParamGroup) -> usize {
        self.by_group.get(g.prefix()).copied().unwrap_or(0)
    }

    pub fn tunable_ratio(&self) -> f64 {
        self.tunable as f64 / self.total as f64
    }

    /// Adapter parameters relative to everything else.
    pub fn adapter_ratio(&self) -> f64 {
        let a = self.group(ParamGroup::Adapter);
        a as f64 / (self.total - a) as f64
    }
}

pub fn count_parameters(enc: &EncoderState) -> ParamCount {
    let mut by_group: BTreeMap<String, usize> = ParamGroup::ALL.iter().map(|g| (g.prefix().to_string(), 0)).collect();
    let mut tunable = 0;
    for p in enc.params.iter() {
        *by_group.get_mut(p.group.prefix()).expect("all groups present") += p.value.len();
        if p.trainable {
            tunable += p.value.len();
        }
    }
    ParamCount { total: by_group.values().sum(), tunable, by_group }
}
