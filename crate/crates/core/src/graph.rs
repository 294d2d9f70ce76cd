//! Declarative model descriptions and their executor.
//!
//! A [`ModelSpec`] is an ordered DAG of block nodes with a countable
//! parameter total; [`Model::instantiate`] materializes it into parameter
//! and buffer stores plus runnable blocks. The executor runs the graph on
//! the autodiff tape in training or evaluation mode; evaluation frees
//! intermediate activations as soon as their last consumer has run.

use ndarray::{Array3, Array4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ax, BufId, Buffers, ParamId, Params, Tape, Var};
use crate::blocks::{
    self, conv_param_count, dws_param_count, ChannelAttention, Conv2dBlock, CrossAttention,
    DwsConv, Fwd, IcnModulate, MbrConfig, MbrConv, NormLayer, PartialConv, Sca, SpatialGate,
};
use crate::classical::{self, HistogramSpec};
use crate::colorspace;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

/// Color space the network operates in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorspaceMode {
    Rgb,
    Hvi,
    Yuv,
    Lab,
}

/// A frozen preprocessor slot producing a 3-channel view of the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocessor {
    Identity,
    /// Per-channel CLAHE.
    Clahe { spec: HistogramSpec },
    /// Per-channel histogram equalization with the CDF estimated on a
    /// box-downscaled copy (factor 1 = plain HE).
    HistEq { bins: usize, downscale: usize },
    /// Fixed gamma warp.
    Gamma { value: f32 },
}

impl Preprocessor {
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        img.expect_channels(3)?;
        match self {
            Preprocessor::Identity => Ok(img.clone()),
            Preprocessor::Clahe { spec } => {
                let mut out = img.data.clone();
                for c in 0..3 {
                    let plane = ImageTensor::unchecked(
                        img.data
                            .slice(ndarray::s![c..c + 1, .., ..])
                            .to_owned(),
                        ValueRange::UNIT,
                    );
                    let eq = classical::clahe(&plane, spec)?;
                    out.slice_mut(ndarray::s![c..c + 1, .., ..]).assign(&eq.data);
                }
                Ok(ImageTensor::unchecked(out, ValueRange::UNIT))
            }
            Preprocessor::HistEq { bins, downscale } => {
                let mut out = img.data.clone();
                for c in 0..3 {
                    let plane = img.data.index_axis(ndarray::Axis(0), c).to_owned();
                    let eq = classical::equalize_via_downscaled_cdf(&plane, *bins, *downscale);
                    out.index_axis_mut(ndarray::Axis(0), c).assign(&eq);
                }
                Ok(ImageTensor::unchecked(out, ValueRange::UNIT))
            }
            Preprocessor::Gamma { value } => {
                if !(*value > 0.0) {
                    return Err(Error::domain("preprocessor gamma must be > 0"));
                }
                Ok(ImageTensor::unchecked(
                    img.data.mapv(|v| v.powf(*value)),
                    ValueRange::UNIT,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
}

/// Reference to a node input: the graph source or an earlier node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InRef {
    Source,
    Node(usize),
}

/// Block kinds a graph node can carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        groups: usize,
        bias: bool,
    },
    DwsConv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
    },
    PartialConv {
        channels: usize,
        ratio: f32,
        k: usize,
    },
    Mbr {
        in_ch: usize,
        out_ch: usize,
        config: MbrConfig,
    },
    Norm {
        channels: usize,
    },
    Act(ActKind),
    ChannelAttention {
        channels: usize,
        reduction: usize,
    },
    Sca {
        channels: usize,
    },
    SimpleGate,
    SpatialGate {
        channels: usize,
        k: usize,
    },
    Icn {
        channels: usize,
    },
    CrossAttention {
        q_ch: usize,
        kv_ch: usize,
        dim: usize,
        heads: usize,
        window: Option<usize>,
    },
    PhaseTransfer,
    AvgPool2,
    Upsample2,
    Concat,
    Add,
    Sub,
    Mul,
    DivFloor {
        floor: f32,
    },
    SliceCh {
        start: usize,
        end: usize,
    },
    SigmoidRange {
        lo: f32,
        hi: f32,
    },
    /// Identity in training, clamp to [0,1] in evaluation.
    Clamp01,
    /// Mean BT.601 luma of the first three channels, `(N,1,1,1)` in [0,1].
    LumaScalar,
    /// HVI planes -> RGB using the spec's collapse constant.
    HviToRgb,
    /// Fixed full-range BT.601 YUV -> RGB (linear, parameter-free).
    YuvToRgb,
}

/// One node of the block graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub kind: BlockKind,
    pub inputs: Vec<InRef>,
    /// Marked for structural reparameterization (multi-branch nodes).
    #[serde(default)]
    pub reparam: bool,
    /// Zero-initialize this node's parameters (residual heads).
    #[serde(default)]
    pub zero_init: bool,
}

/// Declarative architecture: block graph, channel widths, color space and
/// persisted colorspace constants. The last node is the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub colorspace: ColorspaceMode,
    /// HVI collapse strength persisted with the model.
    pub hvi_k: f32,
    /// Preprocessor slots concatenated after the raw input (RGB mode only).
    pub preprocess: Vec<Preprocessor>,
    pub input_channels: usize,
    pub nodes: Vec<NodeSpec>,
}

impl BlockKind {
    /// Output channel count given the input channel counts; validates arity
    /// and channel consistency.
    fn out_channels(&self, name: &str, ins: &[usize]) -> Result<usize> {
        let one = || -> Result<usize> {
            if ins.len() != 1 {
                return Err(Error::config(format!(
                    "node '{name}' expects 1 input, got {}",
                    ins.len()
                )));
            }
            Ok(ins[0])
        };
        let expect = |want: usize, got: usize| -> Result<()> {
            if want != got {
                return Err(Error::config(format!(
                    "node '{name}' expects {want} input channels, got {got}"
                )));
            }
            Ok(())
        };
        match self {
            BlockKind::Conv { in_ch, out_ch, .. } => {
                expect(*in_ch, one()?)?;
                Ok(*out_ch)
            }
            BlockKind::DwsConv { in_ch, out_ch, .. } => {
                expect(*in_ch, one()?)?;
                Ok(*out_ch)
            }
            BlockKind::PartialConv { channels, .. } => {
                expect(*channels, one()?)?;
                Ok(*channels)
            }
            BlockKind::Mbr { in_ch, out_ch, .. } => {
                expect(*in_ch, one()?)?;
                Ok(*out_ch)
            }
            BlockKind::Norm { channels }
            | BlockKind::Sca { channels }
            | BlockKind::SpatialGate { channels, .. }
            | BlockKind::ChannelAttention { channels, .. } => {
                expect(*channels, one()?)?;
                Ok(*channels)
            }
            BlockKind::Act(_)
            | BlockKind::AvgPool2
            | BlockKind::Upsample2
            | BlockKind::SigmoidRange { .. }
            | BlockKind::Clamp01 => one(),
            BlockKind::SimpleGate => {
                let c = one()?;
                if c % 2 != 0 {
                    return Err(Error::config(format!(
                        "node '{name}': simple_gate needs even channels, got {c}"
                    )));
                }
                Ok(c / 2)
            }
            BlockKind::Icn { channels } => {
                if ins.len() != 2 {
                    return Err(Error::config(format!("node '{name}' expects (features, luma)")));
                }
                expect(*channels, ins[0])?;
                expect(1, ins[1])?;
                Ok(*channels)
            }
            BlockKind::CrossAttention { q_ch, kv_ch, .. } => {
                if ins.len() != 2 {
                    return Err(Error::config(format!("node '{name}' expects (query, kv)")));
                }
                expect(*q_ch, ins[0])?;
                expect(*kv_ch, ins[1])?;
                Ok(*q_ch)
            }
            BlockKind::PhaseTransfer => {
                if ins.len() != 2 || ins[0] != ins[1] {
                    return Err(Error::config(format!(
                        "node '{name}': phase transfer needs two equal-channel inputs"
                    )));
                }
                Ok(ins[0])
            }
            BlockKind::Concat => {
                if ins.is_empty() {
                    return Err(Error::config(format!("node '{name}': concat needs inputs")));
                }
                Ok(ins.iter().sum())
            }
            BlockKind::Add | BlockKind::Sub | BlockKind::Mul | BlockKind::DivFloor { .. } => {
                if ins.len() != 2 {
                    return Err(Error::config(format!("node '{name}' expects 2 inputs")));
                }
                if ins[0] != ins[1] && ins[1] != 1 {
                    return Err(Error::config(format!(
                        "node '{name}': second input must match channels or be 1, got {ins:?}"
                    )));
                }
                Ok(ins[0])
            }
            BlockKind::SliceCh { start, end } => {
                let c = one()?;
                if *start >= *end || *end > c {
                    return Err(Error::config(format!(
                        "node '{name}': slice {start}..{end} out of {c} channels"
                    )));
                }
                Ok(end - start)
            }
            BlockKind::LumaScalar => {
                let c = one()?;
                if c < 3 {
                    return Err(Error::config(format!(
                        "node '{name}': luma scalar needs >= 3 channels"
                    )));
                }
                Ok(1)
            }
            BlockKind::HviToRgb | BlockKind::YuvToRgb => {
                expect(3, one()?)?;
                Ok(3)
            }
        }
    }

    /// Learnable-scalar count, computable without instantiation.
    pub fn param_count(&self) -> usize {
        match self {
            BlockKind::Conv {
                in_ch,
                out_ch,
                kernel,
                groups,
                bias,
                ..
            } => conv_param_count(*in_ch, *out_ch, *kernel, *groups, *bias),
            BlockKind::DwsConv { in_ch, out_ch, k } => dws_param_count(*in_ch, *out_ch, *k),
            BlockKind::PartialConv { channels, ratio, k } => {
                let cc = ((*ratio as f64 * *channels as f64).ceil() as usize).max(1);
                cc * cc * k * k + cc
            }
            BlockKind::Mbr { in_ch, out_ch, config } => {
                let mut n = 0;
                for &(kh, kw) in &config.kernels {
                    n += out_ch * in_ch * kh * kw + out_ch;
                    if config.norm {
                        n += 2 * out_ch;
                    }
                }
                if config.identity && config.norm {
                    n += 2 * out_ch;
                }
                n
            }
            BlockKind::Norm { channels } => 2 * channels,
            BlockKind::ChannelAttention { channels, reduction } => {
                let mid = channels / reduction;
                channels * mid + mid + mid * channels + channels
            }
            BlockKind::Sca { channels } => channels * channels + channels,
            BlockKind::SpatialGate { channels, k } => channels * k * k + 1,
            BlockKind::Icn { channels } => 4 * channels,
            BlockKind::CrossAttention { q_ch, kv_ch, dim, .. } => {
                (q_ch * dim + dim) + 2 * (kv_ch * dim + dim) + (dim * q_ch + q_ch)
            }
            _ => 0,
        }
    }

    /// (extra receptive radius in current-scale pixels, is local, scale multiplier)
    fn locality(&self) -> (f64, bool, f64) {
        match self {
            BlockKind::Conv { kernel, stride, .. } => (
                (kernel.0.max(kernel.1) / 2) as f64,
                true,
                *stride as f64,
            ),
            BlockKind::DwsConv { k, .. } => ((k / 2) as f64, true, 1.0),
            BlockKind::PartialConv { k, .. } => ((k / 2) as f64, true, 1.0),
            BlockKind::Mbr { config, .. } => {
                let t = config.kernels.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(1);
                ((t / 2) as f64, true, 1.0)
            }
            BlockKind::SpatialGate { k, .. } => ((k / 2) as f64, true, 1.0),
            BlockKind::AvgPool2 => (0.5, true, 2.0),
            BlockKind::Upsample2 => (0.0, true, 0.5),
            BlockKind::ChannelAttention { .. }
            | BlockKind::Sca { .. }
            | BlockKind::Icn { .. }
            | BlockKind::CrossAttention { .. }
            | BlockKind::PhaseTransfer
            | BlockKind::LumaScalar => (0.0, false, 1.0),
            _ => (0.0, true, 1.0),
        }
    }
}

impl ModelSpec {
    /// Validates graph ordering, channel consistency and input channels.
    pub fn validate(&self) -> Result<()> {
        let expected = 3 * (1 + self.preprocess.len());
        if self.input_channels != expected {
            return Err(Error::config(format!(
                "input_channels {} != 3 * (1 + {} preprocessors)",
                self.input_channels,
                self.preprocess.len()
            )));
        }
        if self.colorspace != ColorspaceMode::Rgb && !self.preprocess.is_empty() {
            return Err(Error::config(
                "preprocessor slots are only supported in RGB mode",
            ));
        }
        if !(self.hvi_k > 0.0) {
            return Err(Error::config("hvi_k must be > 0"));
        }
        if self.nodes.is_empty() {
            return Err(Error::config("model graph has no nodes"));
        }
        let mut channels: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let mut ins = Vec::new();
            for r in &node.inputs {
                match r {
                    InRef::Source => ins.push(self.input_channels),
                    InRef::Node(j) => {
                        if *j >= i {
                            return Err(Error::config(format!(
                                "node '{}' references node {j} which is not earlier in the graph",
                                node.name
                            )));
                        }
                        ins.push(channels[*j]);
                    }
                }
            }
            channels.push(node.kind.out_channels(&node.name, &ins)?);
        }
        Ok(())
    }

    /// Total learnable scalars, computed from the spec alone.
    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.kind.param_count()).sum()
    }

    /// Output channels of the graph.
    pub fn output_channels(&self) -> Result<usize> {
        self.validate()?;
        let mut channels: Vec<usize> = Vec::new();
        for node in &self.nodes {
            let ins: Vec<usize> = node
                .inputs
                .iter()
                .map(|r| match r {
                    InRef::Source => self.input_channels,
                    InRef::Node(j) => channels[*j],
                })
                .collect();
            channels.push(node.kind.out_channels(&node.name, &ins)?);
        }
        Ok(*channels.last().unwrap())
    }

    /// Receptive radius in input pixels if every op is local (eval mode),
    /// else `None`.
    pub fn receptive_radius(&self) -> Option<usize> {
        let mut radius: Vec<f64> = Vec::new();
        let mut jump: Vec<f64> = Vec::new();
        for node in &self.nodes {
            let (extra, local, scale) = node.kind.locality();
            if !local {
                return None;
            }
            let (mut r, mut j) = (0.0f64, 1.0f64);
            for inr in &node.inputs {
                let (ri, ji) = match inr {
                    InRef::Source => (0.0, 1.0),
                    InRef::Node(k) => (radius[*k], jump[*k]),
                };
                if ri > r {
                    r = ri;
                }
                j = ji; // inputs of a node share a scale by construction
            }
            radius.push(r + extra * j);
            jump.push(j * scale);
        }
        radius.last().map(|r| r.ceil() as usize)
    }

    /// Spatial divisor the input must satisfy (pooling grids, windows).
    pub fn alignment(&self) -> usize {
        fn lcm(a: usize, b: usize) -> usize {
            fn gcd(a: usize, b: usize) -> usize {
                if b == 0 {
                    a
                } else {
                    gcd(b, a % b)
                }
            }
            a / gcd(a, b) * b
        }
        let mut jump: Vec<f64> = Vec::new();
        let mut align = 1usize;
        for node in &self.nodes {
            let (_, _, scale) = node.kind.locality();
            let mut j = 1.0f64;
            for inr in &node.inputs {
                j = match inr {
                    InRef::Source => 1.0,
                    InRef::Node(k) => jump[*k],
                };
            }
            match &node.kind {
                BlockKind::AvgPool2 => align = lcm(align, (j * 2.0).round() as usize),
                BlockKind::Conv { stride, .. } if *stride > 1 => {
                    align = lcm(align, (j * *stride as f64).round() as usize)
                }
                BlockKind::CrossAttention { window: Some(w), .. } => {
                    align = lcm(align, (j * *w as f64).round().max(1.0) as usize)
                }
                _ => {}
            }
            jump.push(j * scale);
        }
        align
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Instantiated block of a graph node.
#[derive(Debug, Clone)]
pub enum Block {
    Conv(Conv2dBlock),
    Dws(DwsConv),
    Partial(PartialConv),
    Mbr(MbrConv),
    Norm(NormLayer),
    Act(ActKind),
    Ca(ChannelAttention),
    Sca(Sca),
    SimpleGate,
    SpatialGate(SpatialGate),
    Icn(IcnModulate),
    Cross(CrossAttention),
    PhaseTransfer,
    AvgPool2,
    Upsample2,
    Concat,
    Add,
    Sub,
    Mul,
    DivFloor(f32),
    SliceCh(usize, usize),
    SigmoidRange(f32, f32),
    Clamp01,
    LumaScalar,
    HviToRgb(f32),
    YuvToRgb,
}

impl Block {
    fn forward(&self, f: &mut Fwd, inputs: &[Var]) -> Result<Var> {
        let x = inputs[0];
        match self {
            Block::Conv(b) => b.forward(f, x),
            Block::Dws(b) => b.forward(f, x),
            Block::Partial(b) => b.forward(f, x),
            Block::Mbr(b) => b.forward(f, x),
            Block::Norm(b) => b.forward(f, x),
            Block::Act(ActKind::Relu) => Ok(f.tape.relu(x)),
            Block::Act(ActKind::Gelu) => Ok(f.tape.gelu(x)),
            Block::Act(ActKind::Sigmoid) => Ok(f.tape.sigmoid(x)),
            Block::Act(ActKind::Tanh) => Ok(f.tape.tanh(x)),
            Block::Ca(b) => b.forward(f, x),
            Block::Sca(b) => b.forward(f, x),
            Block::SimpleGate => blocks::simple_gate(f.tape, x),
            Block::SpatialGate(b) => b.forward(f, x),
            Block::Icn(b) => b.forward(f, x, inputs[1]),
            Block::Cross(b) => b.forward(f, x, inputs[1]),
            Block::PhaseTransfer => blocks::phase_transfer(f.tape, x, inputs[1]),
            Block::AvgPool2 => Ok(f.tape.avg_pool(x, 2)),
            Block::Upsample2 => Ok(f.tape.upsample2(x)),
            Block::Concat => Ok(f.tape.concat(inputs, 1)),
            Block::Add => Ok(f.tape.add(x, inputs[1])),
            Block::Sub => Ok(f.tape.sub(x, inputs[1])),
            Block::Mul => Ok(f.tape.mul(x, inputs[1])),
            Block::DivFloor(floor) => Ok(f.tape.div_floor(x, inputs[1], *floor)),
            Block::SliceCh(s, e) => Ok(f.tape.slice_channels(x, *s, *e)),
            Block::SigmoidRange(lo, hi) => {
                let s = f.tape.sigmoid(x);
                let s = f.tape.scale(s, hi - lo);
                Ok(f.tape.add_scalar(s, *lo))
            }
            Block::Clamp01 => {
                if f.train {
                    // keep gradients alive while training; clamp at eval
                    Ok(f.tape.scale(x, 1.0))
                } else {
                    Ok(f.tape.clamp(x, 0.0, 1.0))
                }
            }
            Block::LumaScalar => {
                let rgb = f.tape.slice_channels(x, 0, 3);
                let w = f.tape.leaf(
                    Ax::from_shape_vec(IxDyn(&[1, 3, 1, 1]), vec![0.299, 0.587, 0.114]).unwrap(),
                );
                let weighted = f.tape.mul(rgb, w);
                let m = f.tape.mean_axes(weighted, &[1, 2, 3]);
                let m = f.tape.scale(m, 3.0);
                Ok(f.tape.clamp(m, 0.0, 1.0))
            }
            Block::HviToRgb(k) => Ok(f.tape.hvi_to_rgb(x, *k)),
            Block::YuvToRgb => {
                // R = Y + 1.402 V; G = Y - 0.344136 U - 0.714136 V; B = Y + 1.772 U
                let m = [
                    1.0f32, 0.0, 1.402, //
                    1.0, -0.344_136_3, -0.714_136_3, //
                    1.0, 1.772, 0.0,
                ];
                let w = f
                    .tape
                    .leaf(Ax::from_shape_vec(IxDyn(&[3, 3, 1, 1]), m.to_vec()).unwrap());
                Ok(f.tape.conv2d(x, w, None, 1, 1))
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn execute_graph(
    spec: &ModelSpec,
    blocks: &[Block],
    tape: &mut Tape,
    params: &Params,
    bufs: &mut Buffers,
    source: Var,
    train: bool,
    frugal: bool,
) -> Result<Var> {
    let n = spec.nodes.len();
    let mut remaining = vec![0usize; n];
    for node in &spec.nodes {
        for r in &node.inputs {
            if let InRef::Node(j) = r {
                remaining[*j] += 1;
            }
        }
    }
    let mut outs: Vec<Option<Var>> = vec![None; n];
    for (i, node) in spec.nodes.iter().enumerate() {
        let inputs: Vec<Var> = node
            .inputs
            .iter()
            .map(|r| match r {
                InRef::Source => source,
                InRef::Node(j) => outs[*j].expect("topological order"),
            })
            .collect();
        let mark = tape.mark();
        let mut f = Fwd {
            tape,
            params,
            bufs,
            train,
        };
        let y = blocks[i].forward(&mut f, &inputs)?;
        if frugal {
            tape.free_since(mark, &[y]);
            for r in &node.inputs {
                if let InRef::Node(j) = r {
                    remaining[*j] -= 1;
                    if remaining[*j] == 0 {
                        let v = outs[*j].unwrap();
                        if v != y {
                            tape.free_value(v);
                        }
                    }
                }
            }
        }
        outs[i] = Some(y);
    }
    Ok(outs[n - 1].expect("non-empty graph"))
}

/// An instantiated model: spec + parameters + buffers + runnable blocks.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
    pub buffers: Buffers,
    blocks: Vec<Block>,
    /// Parameter ids allocated per node, in node order.
    node_params: Vec<Vec<ParamId>>,
    /// Buffer ids allocated per node, in node order.
    node_buffers: Vec<Vec<BufId>>,
}

impl Model {
    /// Builds parameters and blocks for a validated spec, deterministically
    /// from `seed`.
    pub fn instantiate(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut params = Params::new();
        let mut bufs = Buffers::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks_v = Vec::with_capacity(spec.nodes.len());
        let mut node_params = Vec::with_capacity(spec.nodes.len());
        let mut node_buffers = Vec::with_capacity(spec.nodes.len());
        for node in &spec.nodes {
            let p0 = params.len();
            let b0 = bufs.len();
            let block = match &node.kind {
                BlockKind::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    groups,
                    bias,
                } => Block::Conv(Conv2dBlock::new(
                    &mut params,
                    &mut rng,
                    *in_ch,
                    *out_ch,
                    *kernel,
                    *stride,
                    *groups,
                    *bias,
                )?),
                BlockKind::DwsConv { in_ch, out_ch, k } => {
                    Block::Dws(DwsConv::new(&mut params, &mut rng, *in_ch, *out_ch, *k)?)
                }
                BlockKind::PartialConv { channels, ratio, k } => {
                    Block::Partial(PartialConv::new(&mut params, &mut rng, *channels, *ratio, *k)?)
                }
                BlockKind::Mbr { in_ch, out_ch, config } => Block::Mbr(MbrConv::new(
                    &mut params,
                    &mut bufs,
                    &mut rng,
                    *in_ch,
                    *out_ch,
                    config,
                )?),
                BlockKind::Norm { channels } => {
                    Block::Norm(NormLayer::new(&mut params, &mut bufs, *channels))
                }
                BlockKind::Act(a) => Block::Act(*a),
                BlockKind::ChannelAttention { channels, reduction } => Block::Ca(
                    ChannelAttention::new(&mut params, &mut rng, *channels, *reduction)?,
                ),
                BlockKind::Sca { channels } => {
                    Block::Sca(Sca::new(&mut params, &mut rng, *channels)?)
                }
                BlockKind::SimpleGate => Block::SimpleGate,
                BlockKind::SpatialGate { channels, k } => {
                    Block::SpatialGate(SpatialGate::new(&mut params, &mut rng, *channels, *k)?)
                }
                BlockKind::Icn { channels } => Block::Icn(IcnModulate::new(&mut params, *channels)),
                BlockKind::CrossAttention {
                    q_ch,
                    kv_ch,
                    dim,
                    heads,
                    window,
                } => Block::Cross(CrossAttention::new(
                    &mut params,
                    &mut rng,
                    *q_ch,
                    *kv_ch,
                    *dim,
                    *heads,
                    *window,
                )?),
                BlockKind::PhaseTransfer => Block::PhaseTransfer,
                BlockKind::AvgPool2 => Block::AvgPool2,
                BlockKind::Upsample2 => Block::Upsample2,
                BlockKind::Concat => Block::Concat,
                BlockKind::Add => Block::Add,
                BlockKind::Sub => Block::Sub,
                BlockKind::Mul => Block::Mul,
                BlockKind::DivFloor { floor } => Block::DivFloor(*floor),
                BlockKind::SliceCh { start, end } => Block::SliceCh(*start, *end),
                BlockKind::SigmoidRange { lo, hi } => Block::SigmoidRange(*lo, *hi),
                BlockKind::Clamp01 => Block::Clamp01,
                BlockKind::LumaScalar => Block::LumaScalar,
                BlockKind::HviToRgb => Block::HviToRgb(spec.hvi_k),
                BlockKind::YuvToRgb => Block::YuvToRgb,
            };
            if node.zero_init {
                for id in (p0..params.len()).map(ParamId) {
                    params.value_mut(id).fill(0.0);
                }
            }
            node_params.push((p0..params.len()).map(ParamId).collect());
            node_buffers.push((b0..bufs.len()).map(BufId).collect());
            blocks_v.push(block);
        }
        Ok(Model {
            spec: spec.clone(),
            params,
            buffers: bufs,
            blocks: blocks_v,
            node_params,
            node_buffers,
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn node_params(&self) -> &[Vec<ParamId>] {
        &self.node_params
    }

    pub fn node_buffers(&self) -> &[Vec<BufId>] {
        &self.node_buffers
    }

    /// Training-mode forward (batch statistics, no output clamp, running
    /// stats updated).
    pub fn forward_train(&mut self, tape: &mut Tape, source: Var) -> Result<Var> {
        let mut bufs = std::mem::take(&mut self.buffers);
        let result = execute_graph(
            &self.spec,
            &self.blocks,
            tape,
            &self.params,
            &mut bufs,
            source,
            true,
            false,
        );
        self.buffers = bufs;
        result
    }

    /// Evaluation-mode forward. `frugal` frees intermediate activations as
    /// soon as possible (no backward pass may follow).
    pub fn forward_eval(&self, tape: &mut Tape, source: Var, frugal: bool) -> Result<Var> {
        let mut bufs = self.buffers.clone();
        execute_graph(
            &self.spec,
            &self.blocks,
            tape,
            &self.params,
            &mut bufs,
            source,
            false,
            frugal,
        )
    }

    /// Evaluation on a raw `(N,C,H,W)` array. Dims must satisfy
    /// [`ModelSpec::alignment`].
    pub fn infer(&self, input: &Array4<f32>) -> Result<Array4<f32>> {
        let mut tape = Tape::new();
        let source = tape.leaf(input.clone().into_dyn());
        let out = self.forward_eval(&mut tape, source, true)?;
        Ok(tape
            .value(out)
            .clone()
            .into_dimensionality()
            .expect("4d output"))
    }

    /// Builds the network input planes from an RGB image: color space
    /// transform plus preprocessor-slot concatenation.
    pub fn prepare_input(&self, img: &ImageTensor) -> Result<Array3<f32>> {
        img.expect_channels(3)?;
        match self.spec.colorspace {
            ColorspaceMode::Rgb => {
                let mut planes = vec![img.clone()];
                for pre in &self.spec.preprocess {
                    planes.push(pre.apply(img)?);
                }
                let views: Vec<_> = planes.iter().map(|p| p.data.view()).collect();
                Ok(ndarray::concatenate(ndarray::Axis(0), &views)
                    .expect("preprocessor concat"))
            }
            ColorspaceMode::Hvi => {
                Ok(colorspace::rgb_to_hvi(img, self.spec.hvi_k)?.to_planes())
            }
            ColorspaceMode::Yuv => Ok(colorspace::rgb_to_yuv(img)?.data),
            ColorspaceMode::Lab => Ok(colorspace::rgb_to_lab(img)?.data),
        }
    }

    /// Converts network output planes back to an RGB image. HVI/YUV graphs
    /// already end in an on-tape conversion; LAB converts here.
    pub fn finish_output(&self, planes: Array3<f32>) -> Result<ImageTensor> {
        match self.spec.colorspace {
            ColorspaceMode::Lab => {
                let lab = ImageTensor::unchecked(planes, crate::colorspace::LAB_RANGE);
                colorspace::lab_to_rgb(&lab)
            }
            _ => {
                let clamped = planes.mapv(|v| v.clamp(0.0, 1.0));
                Ok(ImageTensor::unchecked(clamped, ValueRange::UNIT))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            colorspace: ColorspaceMode::Rgb,
            hvi_k: 1.0,
            preprocess: vec![],
            input_channels: 3,
            nodes: vec![
                NodeSpec {
                    name: "conv1".into(),
                    kind: BlockKind::Conv {
                        in_ch: 3,
                        out_ch: 8,
                        kernel: (3, 3),
                        stride: 1,
                        groups: 1,
                        bias: true,
                    },
                    inputs: vec![InRef::Source],
                    reparam: false,
                    zero_init: false,
                },
                NodeSpec {
                    name: "act".into(),
                    kind: BlockKind::Act(ActKind::Relu),
                    inputs: vec![InRef::Node(0)],
                    reparam: false,
                    zero_init: false,
                },
                NodeSpec {
                    name: "head".into(),
                    kind: BlockKind::Conv {
                        in_ch: 8,
                        out_ch: 3,
                        kernel: (3, 3),
                        stride: 1,
                        groups: 1,
                        bias: true,
                    },
                    inputs: vec![InRef::Node(1)],
                    reparam: false,
                    zero_init: false,
                },
                NodeSpec {
                    name: "residual".into(),
                    kind: BlockKind::Add,
                    inputs: vec![InRef::Node(2), InRef::Source],
                    reparam: false,
                    zero_init: false,
                },
                NodeSpec {
                    name: "clamp".into(),
                    kind: BlockKind::Clamp01,
                    inputs: vec![InRef::Node(3)],
                    reparam: false,
                    zero_init: false,
                },
            ],
        }
    }

    #[test]
    fn validate_and_counts() {
        let spec = tiny_spec();
        spec.validate().unwrap();
        assert_eq!(spec.output_channels().unwrap(), 3);
        // conv1: 3*8*9+8 = 224; head: 8*3*9+3 = 219
        assert_eq!(spec.param_count(), 224 + 219);
        let model = Model::instantiate(&spec, 7).unwrap();
        assert_eq!(model.params.total_scalars(), spec.param_count());
        assert_eq!(spec.receptive_radius(), Some(2));
        assert_eq!(spec.alignment(), 1);
    }

    #[test]
    fn rejects_bad_graphs() {
        let mut spec = tiny_spec();
        spec.nodes[2].kind = BlockKind::Conv {
            in_ch: 9,
            out_ch: 3,
            kernel: (3, 3),
            stride: 1,
            groups: 1,
            bias: true,
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));

        let mut fwd_ref = tiny_spec();
        fwd_ref.nodes[0].inputs = vec![InRef::Node(2)];
        assert!(matches!(fwd_ref.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_runs_and_eval_clamps() {
        let spec = tiny_spec();
        let mut model = Model::instantiate(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_simple_fn((2, 3, 8, 8), || rng.gen_range(0.0f32..1.0));
        let y = model.infer(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let mut tape = Tape::new();
        let src = tape.leaf(x.clone().into_dyn());
        let out = model.forward_train(&mut tape, src).unwrap();
        let loss = tape.sum(out);
        let grads = tape.backward(loss);
        tape.accumulate_param_grads(&grads, &mut model.params);
        let total: f32 = model
            .params
            .entries()
            .iter()
            .map(|e| e.grad.iter().map(|g| g.abs()).sum::<f32>())
            .sum();
        assert!(total > 0.0, "gradients must flow through the graph");
    }

    #[test]
    fn frugal_eval_matches_keeping_everything() {
        let spec = tiny_spec();
        let model = Model::instantiate(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array4::from_shape_simple_fn((1, 3, 8, 8), || rng.gen_range(0.0f32..1.0));

        let mut tape = Tape::new();
        let src = tape.leaf(x.clone().into_dyn());
        let full = model.forward_eval(&mut tape, src, false).unwrap();
        let mut tape2 = Tape::new();
        let src2 = tape2.leaf(x.into_dyn());
        let frugal = model.forward_eval(&mut tape2, src2, true).unwrap();
        assert_eq!(tape.value(full), tape2.value(frugal));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = tiny_spec();
        let json = spec.to_json().unwrap();
        let back = ModelSpec::from_json(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn non_local_blocks_disable_receptive_radius() {
        let mut spec = tiny_spec();
        spec.nodes.insert(
            1,
            NodeSpec {
                name: "ca".into(),
                kind: BlockKind::ChannelAttention {
                    channels: 8,
                    reduction: 4,
                },
                inputs: vec![InRef::Node(0)],
                reparam: false,
                zero_init: false,
            },
        );
        spec.nodes[2].inputs = vec![InRef::Node(1)];
        assert_eq!(spec.receptive_radius(), None);
    }

    #[test]
    fn preprocessors_produce_expected_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = ImageTensor::unit(Array3::from_shape_simple_fn((3, 16, 16), || {
            rng.gen_range(0.0..1.0)
        }))
        .unwrap();
        let mut spec = tiny_spec();
        spec.preprocess = vec![
            Preprocessor::Identity,
            Preprocessor::Clahe {
                spec: HistogramSpec {
                    bins: 64,
                    clip_limit: 2.0,
                    tile_grid: (2, 2),
                },
            },
        ];
        spec.input_channels = 9;
        spec.nodes[0].kind = BlockKind::Conv {
            in_ch: 9,
            out_ch: 8,
            kernel: (3, 3),
            stride: 1,
            groups: 1,
            bias: true,
        };
        spec.nodes[3].inputs = vec![InRef::Node(2), InRef::Node(2)];
        spec.validate().unwrap();
        let model = Model::instantiate(&spec, 1).unwrap();
        let planes = model.prepare_input(&img).unwrap();
        assert_eq!(planes.shape(), &[9, 16, 16]);
        // slot 0 is identity: exact copy of the raw image
        let identical = planes
            .slice(ndarray::s![3..6, .., ..])
            .iter()
            .zip(img.data.iter())
            .all(|(a, b)| a == b);
        assert!(identical);
    }
}
