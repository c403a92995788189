//! Toy encoders with named adapter insertion points.
//!
//! Three families share one parameter registry and one forward/backward API:
//!
//! * `Identity` flattens the input and passes it through (one insertion point).
//! * `StageConv` stacks pointwise-conv stages (`1×1` conv, ReLU, 2×2 average
//!   pool while the map is at least 2×2) and global-average-pools at the end.
//! * `LayerTransformer` embeds each pixel as a token and stacks residual
//!   single-head attention + MLP layers, mean-pooling tokens at the end.
//!
//! On top of the backbone sit the retrieval head (affine, ReLU, affine to the
//! retrieval dimension) and the source head (affine to source-class logits).
//! Neither family uses batch statistics, so samples never interact.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::adapter::{adapter_apply, adapter_backward, AdapterTrace};
use crate::archive::{Archive, ArchiveError};
use crate::numeric::{add_row, column_sums, gaussian_matrix, relu, relu_backward, rng_for, round_f32};
use crate::params::{Grads, ParamGroup, ParamSet};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("archive does not match the encoder: {0}")]
    ArchiveCorrupt(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    StageConv,
    LayerTransformer,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Copies the backbone output through; needs `retrieval_dim` equal to its width.
    Identity,
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    pub num_blocks: usize,
    pub widths: Vec<usize>,
    /// `(H, W, C)`.
    pub input_size: (usize, usize, usize),
    /// Number of source (pre-training) classes `K`.
    pub source_classes: usize,
    pub retrieval_dim: usize,
    #[serde(default)]
    pub head_init: HeadInit,
}

impl EncoderSpec {
    pub fn identity(input_size: (usize, usize, usize), retrieval_dim: usize, source_classes: usize) -> Self {
        let (h, w, c) = input_size;
        EncoderSpec {
            family: EncoderFamily::Identity,
            num_blocks: 1,
            widths: vec![h * w * c],
            input_size,
            source_classes,
            retrieval_dim,
            head_init: HeadInit::Random,
        }
    }

    pub fn stage_conv(
        input_size: (usize, usize, usize),
        widths: Vec<usize>,
        retrieval_dim: usize,
        source_classes: usize,
    ) -> Self {
        EncoderSpec {
            family: EncoderFamily::StageConv,
            num_blocks: widths.len(),
            widths,
            input_size,
            source_classes,
            retrieval_dim,
            head_init: HeadInit::Random,
        }
    }

    pub fn layer_transformer(
        input_size: (usize, usize, usize),
        num_layers: usize,
        width: usize,
        retrieval_dim: usize,
        source_classes: usize,
    ) -> Self {
        EncoderSpec {
            family: EncoderFamily::LayerTransformer,
            num_blocks: num_layers,
            widths: vec![width; num_layers],
            input_size,
            source_classes,
            retrieval_dim,
            head_init: HeadInit::Random,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::InvalidSpec(m));
        let (h, w, c) = self.input_size;
        if h == 0 || w == 0 || c == 0 {
            return bad(format!("input size {:?} has a zero dimension", self.input_size));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if self.widths.len() != self.num_blocks {
            return bad(format!("{} widths for {} blocks", self.widths.len(), self.num_blocks));
        }
        if self.widths.contains(&0) {
            return bad("block widths must be positive".into());
        }
        if self.source_classes == 0 {
            return bad("source_classes must be at least 1".into());
        }
        if self.retrieval_dim == 0 {
            return bad("retrieval_dim must be positive".into());
        }
        match self.family {
            EncoderFamily::Identity => {
                if self.num_blocks != 1 || self.widths[0] != h * w * c {
                    return bad("identity encoder has exactly one block of width H*W*C".into());
                }
            }
            EncoderFamily::LayerTransformer => {
                if self.widths.iter().any(|&x| x != self.widths[0]) {
                    return bad("transformer layers share one embedding width".into());
                }
            }
            EncoderFamily::StageConv => {}
        }
        if self.head_init == HeadInit::Identity && self.retrieval_dim != self.backbone_width() {
            return bad("identity head needs retrieval_dim equal to the backbone output width".into());
        }
        Ok(())
    }

    /// Width of the pooled backbone output fed to both heads.
    pub fn backbone_width(&self) -> usize {
        match self.family {
            EncoderFamily::Identity => {
                let (h, w, c) = self.input_size;
                h * w * c
            }
            _ => *self.widths.last().expect("validated"),
        }
    }

    pub fn insertion_points(&self) -> Vec<String> {
        match self.family {
            EncoderFamily::Identity => vec!["identity".into()],
            EncoderFamily::StageConv => (1..=self.num_blocks).map(|i| format!("stage{i}")).collect(),
            EncoderFamily::LayerTransformer => (1..=self.num_blocks).map(|i| format!("layer{i}")).collect(),
        }
    }

    /// Same spec with an identity-initialized head.
    pub fn with_identity_head(mut self) -> Self {
        self.head_init = HeadInit::Identity;
        self
    }

    fn head_is_identity(&self) -> bool {
        self.head_init == HeadInit::Identity
    }
}

/// An adapter attached at a named insertion point. Weights live in the
/// parameter set as `adapter/<point>.w1` and `adapter/<point>.w2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSlot {
    pub point: String,
    pub width: usize,
    pub bottleneck: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub spec: EncoderSpec,
    pub params: ParamSet,
    pub adapters: Vec<AdapterSlot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `N×d` retrieval features (before any alignment projector).
    pub features: Array2<f64>,
    /// `N×K` source-class logits.
    pub source_logits: Array2<f64>,
}

/// Builds a seeded encoder. Initial values are rounded to float32 so that an
/// archive round-trip is exact.
pub fn build_encoder(spec: &EncoderSpec, seed: u64) -> Result<EncoderState, BackboneError> {
    spec.validate()?;
    let mut params = ParamSet::new();
    let mut rng = rng_for(seed, "encoder/block");
    let (h, w, c) = spec.input_size;
    match spec.family {
        EncoderFamily::Identity => {}
        EncoderFamily::StageConv => {
            let mut cin = c;
            for (i, &width) in spec.widths.iter().enumerate() {
                let std = (2.0 / cin as f64).sqrt();
                params.insert(ParamGroup::Block, &format!("stage{}.weight", i + 1), gaussian_matrix(&mut rng, cin, width, std));
                params.insert(ParamGroup::Block, &format!("stage{}.bias", i + 1), Array2::zeros((1, width)));
                cin = width;
            }
        }
        EncoderFamily::LayerTransformer => {
            let width = spec.widths[0];
            let tokens = h * w;
            let inv = 1.0 / (width as f64).sqrt();
            params.insert(ParamGroup::Block, "layer1.embed.weight", gaussian_matrix(&mut rng, c, width, 1.0 / (c as f64).sqrt()));
            params.insert(ParamGroup::Block, "layer1.embed.bias", Array2::zeros((1, width)));
            params.insert(ParamGroup::Block, "layer1.pos_embed", gaussian_matrix(&mut rng, tokens, width, 0.1));
            for l in 1..=spec.num_blocks {
                for (name, std) in [("attn.wq", inv), ("attn.wk", inv), ("attn.wv", inv), ("attn.wo", 0.5 * inv)] {
                    params.insert(ParamGroup::Block, &format!("layer{l}.{name}"), gaussian_matrix(&mut rng, width, width, std));
                }
                params.insert(
                    ParamGroup::Block,
                    &format!("layer{l}.mlp1.weight"),
                    gaussian_matrix(&mut rng, width, width, (2.0 / width as f64).sqrt()),
                );
                params.insert(ParamGroup::Block, &format!("layer{l}.mlp1.bias"), Array2::zeros((1, width)));
                params.insert(ParamGroup::Block, &format!("layer{l}.mlp2.weight"), gaussian_matrix(&mut rng, width, width, 0.5 * inv));
                params.insert(ParamGroup::Block, &format!("layer{l}.mlp2.bias"), Array2::zeros((1, width)));
            }
        }
    }

    let bw = spec.backbone_width();
    let d = spec.retrieval_dim;
    let mut head_rng = rng_for(seed, "encoder/head");
    if spec.head_is_identity() {
        params.insert(ParamGroup::Head, "fc1.weight", Array2::eye(bw));
        params.insert(ParamGroup::Head, "fc1.bias", Array2::zeros((1, d)));
        params.insert(ParamGroup::Head, "fc2.weight", Array2::eye(d));
        params.insert(ParamGroup::Head, "fc2.bias", Array2::zeros((1, d)));
    } else {
        params.insert(ParamGroup::Head, "fc1.weight", gaussian_matrix(&mut head_rng, bw, d, (2.0 / bw as f64).sqrt()));
        params.insert(ParamGroup::Head, "fc1.bias", Array2::zeros((1, d)));
        params.insert(ParamGroup::Head, "fc2.weight", gaussian_matrix(&mut head_rng, d, d, (1.0 / d as f64).sqrt()));
        params.insert(ParamGroup::Head, "fc2.bias", Array2::zeros((1, d)));
    }
    let mut src_rng = rng_for(seed, "encoder/source_head");
    let k = spec.source_classes;
    params.insert(ParamGroup::SourceHead, "weight", gaussian_matrix(&mut src_rng, bw, k, 1.0 / (bw as f64).sqrt()));
    params.insert(ParamGroup::SourceHead, "bias", Array2::zeros((1, k)));

    Ok(EncoderState { spec: spec.clone(), params, adapters: Vec::new() })
}

/// Stacks `H×W×C` samples into an `N×H×W×C` batch.
pub fn stack_batch(samples: &[Array3<f64>]) -> Result<Array4<f64>, BackboneError> {
    let first = samples.first().ok_or_else(|| BackboneError::ShapeMismatch("empty batch".into()))?;
    let (h, w, c) = first.dim();
    let mut out = Array4::zeros((samples.len(), h, w, c));
    for (i, s) in samples.iter().enumerate() {
        if s.dim() != (h, w, c) {
            return Err(BackboneError::ShapeMismatch(format!("sample {i} has shape {:?}, expected {:?}", s.dim(), (h, w, c))));
        }
        out.slice_mut(s![i, .., .., ..]).assign(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forward traces

#[derive(Debug, Clone)]
pub(crate) struct HeadTrace {
    backbone_out: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
}

#[derive(Debug, Clone)]
struct StageTrace {
    input: Array2<f64>,
    in_hw: (usize, usize),
    pre: Array2<f64>,
    pooled: bool,
    adapter: Option<AdapterTrace>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    mixed: Array2<f64>,
    x_mid: Array2<f64>,
    mlp_pre: Array2<f64>,
    mlp_act: Array2<f64>,
    adapter: Option<AdapterTrace>,
}

#[derive(Debug, Clone)]
enum BackboneTrace {
    Identity { adapter: Option<AdapterTrace> },
    Stage { stages: Vec<StageTrace>, positions: usize },
    Transformer { tokens: Array2<f64>, layers: Vec<LayerTrace> },
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    n: usize,
    backbone: BackboneTrace,
    head: HeadTrace,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.n
    }
}

fn pool2(x: &Array2<f64>, n: usize, h: usize, w: usize) -> Array2<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let c = x.ncols();
    let mut out = Array2::zeros((n * h2 * w2, c));
    for b in 0..n {
        for i in 0..h2 {
            for j in 0..w2 {
                let mut row = out.row_mut(b * h2 * w2 + i * w2 + j);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    row += &x.row(b * h * w + (2 * i + di) * w + (2 * j + dj));
                }
                row *= 0.25;
            }
        }
    }
    out
}

fn pool2_backward(dy: &Array2<f64>, n: usize, h: usize, w: usize) -> Array2<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut dx = Array2::zeros((n * h * w, dy.ncols()));
    for b in 0..n {
        for i in 0..h2 {
            for j in 0..w2 {
                let g = dy.row(b * h2 * w2 + i * w2 + j).mapv(|v| 0.25 * v);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let mut r = dx.row_mut(b * h * w + (2 * i + di) * w + (2 * j + dj));
                    r += &g;
                }
            }
        }
    }
    dx
}

fn mean_positions(x: &Array2<f64>, n: usize, p: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, x.ncols()));
    for b in 0..n {
        let block = x.slice(s![b * p..(b + 1) * p, ..]);
        out.row_mut(b).assign(&(block.sum_axis(Axis(0)) / p as f64));
    }
    out
}

fn mean_positions_backward(dy: &Array2<f64>, n: usize, p: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((n * p, dy.ncols()));
    for b in 0..n {
        let g = dy.row(b).mapv(|v| v / p as f64);
        for q in 0..p {
            dx.row_mut(b * p + q).assign(&g);
        }
    }
    dx
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

impl EncoderState {
    pub fn insertion_points(&self) -> Vec<String> {
        self.spec.insertion_points()
    }

    pub fn retrieval_dim(&self) -> usize {
        self.spec.retrieval_dim
    }

    pub fn adapter_at(&self, point: &str) -> Option<&AdapterSlot> {
        self.adapters.iter().find(|a| a.point == point)
    }

    fn maybe_adapter(&self, point: &str, x: &Array2<f64>) -> (Array2<f64>, Option<AdapterTrace>) {
        match self.adapter_at(point) {
            Some(_) => {
                let w1 = self.params.expect(&format!("adapter/{point}.w1"));
                let w2 = self.params.expect(&format!("adapter/{point}.w2"));
                let (y, trace) = adapter_apply(x, w1, w2);
                (y, Some(trace))
            }
            None => (x.clone(), None),
        }
    }

    fn check_batch(&self, batch: &Array4<f64>) -> Result<usize, BackboneError> {
        let (n, h, w, c) = batch.dim();
        if (h, w, c) != self.spec.input_size {
            return Err(BackboneError::ShapeMismatch(format!(
                "batch sample shape {:?} differs from encoder input {:?}",
                (h, w, c),
                self.spec.input_size
            )));
        }
        Ok(n)
    }

    /// Features and source logits for a batch. Pure in (parameters, batch).
    pub fn forward(&self, batch: &Array4<f64>) -> Result<ForwardOutput, BackboneError> {
        self.forward_trace(batch).map(|(out, _)| out)
    }

    pub fn forward_trace(&self, batch: &Array4<f64>) -> Result<(ForwardOutput, ForwardTrace), BackboneError> {
        let n = self.check_batch(batch)?;
        let (h, w, c) = self.spec.input_size;
        let p = &self.params;

        let (pooled, backbone) = match self.spec.family {
            EncoderFamily::Identity => {
                let x = batch.to_shape((n, h * w * c)).expect("contiguous batch").to_owned();
                let (y, adapter) = self.maybe_adapter("identity", &x);
                (y, BackboneTrace::Identity { adapter })
            }
            EncoderFamily::StageConv => {
                let mut x = batch.to_shape((n * h * w, c)).expect("contiguous batch").to_owned();
                let (mut hh, mut ww) = (h, w);
                let mut stages = Vec::with_capacity(self.spec.num_blocks);
                for i in 1..=self.spec.num_blocks {
                    let mut pre = x.dot(p.expect(&format!("block/stage{i}.weight")));
                    add_row(&mut pre, p.expect(&format!("block/stage{i}.bias")));
                    let act = relu(&pre);
                    let pooled = hh >= 2 && ww >= 2;
                    let out = if pooled { pool2(&act, n, hh, ww) } else { act };
                    let in_hw = (hh, ww);
                    if pooled {
                        hh /= 2;
                        ww /= 2;
                    }
                    let (y, adapter) = self.maybe_adapter(&format!("stage{i}"), &out);
                    stages.push(StageTrace { input: x, in_hw, pre, pooled, adapter });
                    x = y;
                }
                let positions = hh * ww;
                (mean_positions(&x, n, positions), BackboneTrace::Stage { stages, positions })
            }
            EncoderFamily::LayerTransformer => {
                let t = h * w;
                let width = self.spec.widths[0];
                let tokens = batch.to_shape((n * t, c)).expect("contiguous batch").to_owned();
                let mut x = tokens.dot(p.expect("block/layer1.embed.weight"));
                add_row(&mut x, p.expect("block/layer1.embed.bias"));
                let pos = p.expect("block/layer1.pos_embed");
                for b in 0..n {
                    let mut blk = x.slice_mut(s![b * t..(b + 1) * t, ..]);
                    blk += pos;
                }
                let scale = 1.0 / (width as f64).sqrt();
                let mut layers = Vec::with_capacity(self.spec.num_blocks);
                for l in 1..=self.spec.num_blocks {
                    let q = x.dot(p.expect(&format!("block/layer{l}.attn.wq")));
                    let k = x.dot(p.expect(&format!("block/layer{l}.attn.wk")));
                    let v = x.dot(p.expect(&format!("block/layer{l}.attn.wv")));
                    let mut mixed = Array2::zeros((n * t, width));
                    let mut attn = Vec::with_capacity(n);
                    for b in 0..n {
                        let rows = s![b * t..(b + 1) * t, ..];
                        let scores = q.slice(rows).dot(&k.slice(rows).t()) * scale;
                        let a = softmax_rows(&scores);
                        mixed.slice_mut(rows).assign(&a.dot(&v.slice(rows)));
                        attn.push(a);
                    }
                    let x_mid = &x + &mixed.dot(p.expect(&format!("block/layer{l}.attn.wo")));
                    let mut mlp_pre = x_mid.dot(p.expect(&format!("block/layer{l}.mlp1.weight")));
                    add_row(&mut mlp_pre, p.expect(&format!("block/layer{l}.mlp1.bias")));
                    let mlp_act = relu(&mlp_pre);
                    let mut mlp_out = mlp_act.dot(p.expect(&format!("block/layer{l}.mlp2.weight")));
                    add_row(&mut mlp_out, p.expect(&format!("block/layer{l}.mlp2.bias")));
                    let x_out = &x_mid + &mlp_out;
                    let (y, adapter) = self.maybe_adapter(&format!("layer{l}"), &x_out);
                    layers.push(LayerTrace { x_in: x, q, k, v, attn, mixed, x_mid, mlp_pre, mlp_act, adapter });
                    x = y;
                }
                (mean_positions(&x, n, t), BackboneTrace::Transformer { tokens, layers })
            }
        };

        let mut pre1 = pooled.dot(p.expect("head/fc1.weight"));
        add_row(&mut pre1, p.expect("head/fc1.bias"));
        let act1 = relu(&pre1);
        let mut features = act1.dot(p.expect("head/fc2.weight"));
        add_row(&mut features, p.expect("head/fc2.bias"));
        let mut source_logits = pooled.dot(p.expect("source_head/weight"));
        add_row(&mut source_logits, p.expect("source_head/bias"));

        let trace = ForwardTrace { n, backbone, head: HeadTrace { backbone_out: pooled, pre1, act1 } };
        Ok((ForwardOutput { features, source_logits }, trace))
    }

    /// Accumulates parameter gradients given upstream gradients on the
    /// features and (optionally) the source logits.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_features: &Array2<f64>,
        d_source_logits: Option<&Array2<f64>>,
        grads: &mut Grads,
    ) {
        let p = &self.params;
        let n = trace.n;
        let ht = &trace.head;

        grads.accumulate("head/fc2.weight", &ht.act1.t().dot(d_features));
        grads.accumulate("head/fc2.bias", &column_sums(d_features));
        let d_act1 = d_features.dot(&p.expect("head/fc2.weight").t());
        let d_pre1 = relu_backward(&d_act1, &ht.pre1);
        grads.accumulate("head/fc1.weight", &ht.backbone_out.t().dot(&d_pre1));
        grads.accumulate("head/fc1.bias", &column_sums(&d_pre1));
        let mut d_pooled = d_pre1.dot(&p.expect("head/fc1.weight").t());
        if let Some(ds) = d_source_logits {
            grads.accumulate("source_head/weight", &ht.backbone_out.t().dot(ds));
            grads.accumulate("source_head/bias", &column_sums(ds));
            d_pooled += &ds.dot(&p.expect("source_head/weight").t());
        }

        let adapter_grad = |point: &str, trace: &Option<AdapterTrace>, dy: Array2<f64>, grads: &mut Grads| -> Array2<f64> {
            match trace {
                Some(t) => {
                    let w1 = p.expect(&format!("adapter/{point}.w1"));
                    let w2 = p.expect(&format!("adapter/{point}.w2"));
                    let (dx, dw1, dw2) = adapter_backward(t, w1, w2, &dy);
                    grads.accumulate(&format!("adapter/{point}.w1"), &dw1);
                    grads.accumulate(&format!("adapter/{point}.w2"), &dw2);
                    dx
                }
                None => dy,
            }
        };

        match &trace.backbone {
            BackboneTrace::Identity { adapter } => {
                adapter_grad("identity", adapter, d_pooled, grads);
            }
            BackboneTrace::Stage { stages, positions } => {
                let mut dx = mean_positions_backward(&d_pooled, n, *positions);
                for (idx, st) in stages.iter().enumerate().rev() {
                    let i = idx + 1;
                    let d_out = adapter_grad(&format!("stage{i}"), &st.adapter, dx, grads);
                    let d_act = if st.pooled { pool2_backward(&d_out, n, st.in_hw.0, st.in_hw.1) } else { d_out };
                    let d_pre = relu_backward(&d_act, &st.pre);
                    grads.accumulate(&format!("block/stage{i}.weight"), &st.input.t().dot(&d_pre));
                    grads.accumulate(&format!("block/stage{i}.bias"), &column_sums(&d_pre));
                    dx = d_pre.dot(&p.expect(&format!("block/stage{i}.weight")).t());
                }
            }
            BackboneTrace::Transformer { tokens, layers } => {
                let (h, w, _) = self.spec.input_size;
                let t = h * w;
                let width = self.spec.widths[0];
                let scale = 1.0 / (width as f64).sqrt();
                let mut dx = mean_positions_backward(&d_pooled, n, t);
                for (idx, lt) in layers.iter().enumerate().rev() {
                    let l = idx + 1;
                    let d_out = adapter_grad(&format!("layer{l}"), &lt.adapter, dx, grads);
                    // MLP branch.
                    let w2 = p.expect(&format!("block/layer{l}.mlp2.weight"));
                    grads.accumulate(&format!("block/layer{l}.mlp2.weight"), &lt.mlp_act.t().dot(&d_out));
                    grads.accumulate(&format!("block/layer{l}.mlp2.bias"), &column_sums(&d_out));
                    let d_mlp_pre = relu_backward(&d_out.dot(&w2.t()), &lt.mlp_pre);
                    let w1 = p.expect(&format!("block/layer{l}.mlp1.weight"));
                    grads.accumulate(&format!("block/layer{l}.mlp1.weight"), &lt.x_mid.t().dot(&d_mlp_pre));
                    grads.accumulate(&format!("block/layer{l}.mlp1.bias"), &column_sums(&d_mlp_pre));
                    let d_mid = &d_out + &d_mlp_pre.dot(&w1.t());
                    // Attention branch.
                    let wo = p.expect(&format!("block/layer{l}.attn.wo"));
                    grads.accumulate(&format!("block/layer{l}.attn.wo"), &lt.mixed.t().dot(&d_mid));
                    let d_mixed = d_mid.dot(&wo.t());
                    let mut dq = Array2::zeros((n * t, width));
                    let mut dk = Array2::zeros((n * t, width));
                    let mut dv = Array2::zeros((n * t, width));
                    for b in 0..n {
                        let rows = s![b * t..(b + 1) * t, ..];
                        let a = &lt.attn[b];
                        let dm = d_mixed.slice(rows);
                        let da = dm.dot(&lt.v.slice(rows).t());
                        dv.slice_mut(rows).assign(&a.t().dot(&dm));
                        let mut ds = Array2::zeros((t, t));
                        for r in 0..t {
                            let dot: f64 = (0..t).map(|j| da[[r, j]] * a[[r, j]]).sum();
                            for j in 0..t {
                                ds[[r, j]] = a[[r, j]] * (da[[r, j]] - dot) * scale;
                            }
                        }
                        dq.slice_mut(rows).assign(&ds.dot(&lt.k.slice(rows)));
                        dk.slice_mut(rows).assign(&ds.t().dot(&lt.q.slice(rows)));
                    }
                    let mut d_in = d_mid;
                    for (name, d) in [("attn.wq", &dq), ("attn.wk", &dk), ("attn.wv", &dv)] {
                        let wname = format!("block/layer{l}.{name}");
                        grads.accumulate(&wname, &lt.x_in.t().dot(d));
                        d_in += &d.dot(&p.expect(&wname).t());
                    }
                    dx = d_in;
                }
                grads.accumulate("block/layer1.pos_embed", &{
                    let mut g = Array2::zeros((t, width));
                    for b in 0..n {
                        g += &dx.slice(s![b * t..(b + 1) * t, ..]);
                    }
                    g
                });
                grads.accumulate("block/layer1.embed.weight", &tokens.t().dot(&dx));
                grads.accumulate("block/layer1.embed.bias", &column_sums(&dx));
            }
        }
    }

    /// Frozen copy used as the distillation teacher: no adapters, nothing trainable.
    pub fn teacher_copy(&self) -> EncoderState {
        let mut t = self.clone();
        t.params.remove_group(ParamGroup::Adapter);
        t.adapters.clear();
        for p in t.params.iter_mut() {
            p.trainable = false;
        }
        t
    }

    pub fn round_to_f32(&mut self) {
        for p in self.params.iter_mut() {
            p.value.mapv_inplace(round_f32);
        }
    }

    /// Attaches a bias-free linear projector from the retrieval dim to `text_dim`.
    pub fn attach_projector(&mut self, text_dim: usize, seed: u64) {
        self.params.remove("head/projector.weight");
        let d = self.spec.retrieval_dim;
        let mut rng = rng_for(seed, "encoder/projector");
        self.params.insert(ParamGroup::Head, "projector.weight", gaussian_matrix(&mut rng, d, text_dim, (1.0 / d as f64).sqrt()));
    }

    pub fn projector(&self) -> Option<ArrayView2<'_, f64>> {
        self.params.get("head/projector.weight").map(|a| a.view())
    }

    /// Attaches a randomly initialised benchmark classifier `W = (w, b)` for the classical objective.
    pub fn attach_classifier(&mut self, num_classes: usize, seed: u64) {
        self.params.remove("head/classifier.weight");
        self.params.remove("head/classifier.bias");
        let d = self.spec.retrieval_dim;
        let mut rng = rng_for(seed, "encoder/classifier");
        self.params.insert(ParamGroup::Head, "classifier.weight", gaussian_matrix(&mut rng, d, num_classes, (1.0 / d as f64).sqrt()));
        self.params.insert(ParamGroup::Head, "classifier.bias", Array2::zeros((1, num_classes)));
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive {
            metadata: json!({
                "kind": "encoder",
                "spec": self.spec,
                "adapters": self.adapters,
            }),
            ..Default::default()
        };
        for p in self.params.iter() {
            let shape = p.value.shape().to_vec();
            a.insert(p.name.clone(), p.group.prefix(), shape, p.value.iter().map(|v| *v as f32).collect());
        }
        a
    }

    /// Rebuilds an encoder from a self-describing archive.
    pub fn from_archive(archive: &Archive) -> Result<EncoderState, BackboneError> {
        let corrupt = |m: String| BackboneError::ArchiveCorrupt(m);
        if archive.metadata.get("kind").and_then(|k| k.as_str()) != Some("encoder") {
            return Err(corrupt("archive is not an encoder archive".into()));
        }
        let spec: EncoderSpec = serde_json::from_value(archive.metadata["spec"].clone()).map_err(|e| corrupt(e.to_string()))?;
        let adapters: Vec<AdapterSlot> =
            serde_json::from_value(archive.metadata.get("adapters").cloned().unwrap_or(json!([]))).map_err(|e| corrupt(e.to_string()))?;
        let mut enc = build_encoder(&spec, 0).map_err(|e| corrupt(e.to_string()))?;
        for slot in &adapters {
            if !spec.insertion_points().contains(&slot.point) {
                return Err(corrupt(format!("unknown insertion point {}", slot.point)));
            }
            enc.params.insert(ParamGroup::Adapter, &format!("{}.w1", slot.point), Array2::zeros((slot.width, slot.bottleneck)));
            enc.params.insert(ParamGroup::Adapter, &format!("{}.w2", slot.point), Array2::zeros((slot.bottleneck, slot.width)));
        }
        enc.adapters = adapters;
        if let Some(arr) = archive.arrays.get("head/projector.weight") {
            enc.attach_projector(*arr.shape.get(1).unwrap_or(&0), 0);
        }
        if let Some(arr) = archive.arrays.get("head/classifier.weight") {
            enc.attach_classifier(*arr.shape.get(1).unwrap_or(&0), 0);
        }
        if archive.arrays.len() != enc.params.len() {
            return Err(corrupt(format!("archive holds {} arrays, encoder expects {}", archive.arrays.len(), enc.params.len())));
        }
        enc.load_parameters(archive)?;
        Ok(enc)
    }

    /// Weight-loading hook: overwrites every parameter named in the archive.
    /// Unknown names, wrong groups or wrong shapes are rejected. Returns the
    /// number of arrays loaded.
    pub fn load_parameters(&mut self, archive: &Archive) -> Result<usize, BackboneError> {
        for (name, arr) in &archive.arrays {
            let param = self
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| BackboneError::ArchiveCorrupt(format!("unknown parameter {name}")))?;
            if param.group.prefix() != arr.group {
                return Err(BackboneError::ArchiveCorrupt(format!("{name}: group {} vs {}", arr.group, param.group.prefix())));
            }
            if param.value.shape() != arr.shape.as_slice() {
                return Err(BackboneError::ArchiveCorrupt(format!(
                    "{name}: shape {:?} vs {:?}",
                    arr.shape,
                    param.value.shape()
                )));
            }
            param.value = Array2::from_shape_vec(param.value.raw_dim(), arr.data.iter().map(|v| *v as f64).collect())
                .map_err(|e| BackboneError::ArchiveCorrupt(e.to_string()))?;
        }
        Ok(archive.arrays.len())
    }
}
