//! Four reference sub-megabyte enhancement models assembled from the block
//! library, plus parameter accounting and budget auditing.
//!
//! Default widths are tuned so each model lands near its reference
//! parameter count while staying under the 1M budget:
//!
//! - `norm_unet`: preprocessor-conditioned 3-level depthwise-separable
//!   U-Net with a global residual from the first preprocessor slot.
//! - `efficient_hvi`: dual-branch HVI-space model with cross-branch
//!   attention at every scale, decoded back to RGB with the stored
//!   collapse strength.
//! - `mobileie6`: fully convolutional multi-branch backbone with dual
//!   attention and a 6-channel illumination + residual head.
//! - `retinex_lite`: illumination estimator guiding a compact
//!   encoder-decoder reflectance restorer.

use serde::{Deserialize, Serialize};

use crate::blocks::MbrConfig;
use crate::classical::HistogramSpec;
use crate::error::{Error, Result};
use crate::graph::{ActKind, BlockKind, ColorspaceMode, InRef, ModelSpec, NodeSpec, Preprocessor};

/// Illumination floor used by Retinex-style divisions.
pub const ILLUM_FLOOR: f32 = 1e-2;

/// Parameter and serialized-size budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub max_params: usize,
    /// Optional serialized-size budget in bytes at the declared precision.
    pub max_serialized_bytes: Option<u64>,
}

impl Default for ParamBudget {
    fn default() -> Self {
        ParamBudget {
            max_params: 1_000_000,
            max_serialized_bytes: Some(1 << 20),
        }
    }
}

/// Checkpoint storage precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F16,
}

impl Precision {
    pub fn bytes_per_scalar(self) -> u64 {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }
}

/// Shared builder knobs; `None` picks the model's tuned default.
#[derive(Debug, Clone)]
pub struct ZooConfig {
    pub width: Option<usize>,
    pub depth: Option<usize>,
    /// HVI collapse strength persisted with the model.
    pub hvi_k: f32,
    pub budget: ParamBudget,
    /// Preprocessor slots for `norm_unet`.
    pub slot1: Preprocessor,
    pub slot2: Preprocessor,
}

impl Default for ZooConfig {
    fn default() -> Self {
        ZooConfig {
            width: None,
            depth: None,
            hvi_k: 1.0,
            budget: ParamBudget::default(),
            slot1: Preprocessor::Identity,
            slot2: Preprocessor::Clahe {
                spec: HistogramSpec::default(),
            },
        }
    }
}

/// Graph-construction helper: appends nodes and tracks the last output.
struct GraphBuilder {
    nodes: Vec<NodeSpec>,
}

impl GraphBuilder {
    fn new() -> Self {
        GraphBuilder { nodes: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, kind: BlockKind, inputs: Vec<InRef>) -> InRef {
        self.nodes.push(NodeSpec {
            name: name.into(),
            kind,
            inputs,
            reparam: false,
            zero_init: false,
        });
        InRef::Node(self.nodes.len() - 1)
    }

    fn push_flagged(
        &mut self,
        name: impl Into<String>,
        kind: BlockKind,
        inputs: Vec<InRef>,
        reparam: bool,
        zero_init: bool,
    ) -> InRef {
        let r = self.push(name, kind, inputs);
        let idx = self.nodes.len() - 1;
        self.nodes[idx].reparam = reparam;
        self.nodes[idx].zero_init = zero_init;
        r
    }

    fn conv(
        &mut self,
        name: &str,
        x: InRef,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
    ) -> InRef {
        self.push(
            name,
            BlockKind::Conv {
                in_ch,
                out_ch,
                kernel: (k, k),
                stride,
                groups: 1,
                bias: true,
            },
            vec![x],
        )
    }

    /// dws conv + norm + gelu
    fn dws_block(&mut self, name: &str, x: InRef, in_ch: usize, out_ch: usize, k: usize) -> InRef {
        let c = self.push(
            format!("{name}.dws"),
            BlockKind::DwsConv { in_ch, out_ch, k },
            vec![x],
        );
        let n = self.push(
            format!("{name}.norm"),
            BlockKind::Norm { channels: out_ch },
            vec![c],
        );
        self.push(format!("{name}.gelu"), BlockKind::Act(ActKind::Gelu), vec![n])
    }

    /// block-aligned 2x downsample + pointwise widening (flip-equivariant,
    /// unlike a stride-2 odd-kernel conv)
    fn dws_down(&mut self, name: &str, x: InRef, in_ch: usize, out_ch: usize) -> InRef {
        let d = self.push(format!("{name}.pool"), BlockKind::AvgPool2, vec![x]);
        self.conv(&format!("{name}.pointwise"), d, in_ch, out_ch, 1, 1)
    }

    fn up(&mut self, name: &str, x: InRef, in_ch: usize, out_ch: usize) -> InRef {
        let u = self.push(format!("{name}.nearest"), BlockKind::Upsample2, vec![x]);
        self.conv(&format!("{name}.proj"), u, in_ch, out_ch, 3, 1)
    }
}

fn budget_check(spec: &ModelSpec, budget: &ParamBudget) -> Result<ModelSpec> {
    spec.validate()?;
    let total = spec.param_count();
    if total > budget.max_params {
        return Err(Error::Budget(format!(
            "model '{}' has {total} parameters, exceeding the budget of {} by {}",
            spec.name,
            budget.max_params,
            total - budget.max_params
        )));
    }
    Ok(spec.clone())
}

/// Preprocessor-conditioned 3-level depthwise-separable U-Net.
///
/// Input is `[raw, slot1(raw), slot2(raw)]` concatenated to 9 channels;
/// the output adds a global residual from the slot-1 planes.
pub fn build_norm_unet(cfg: &ZooConfig) -> Result<ModelSpec> {
    let w1 = cfg.width.unwrap_or(40);
    let (w2, w3) = (w1 * 2, w1 * 6);
    let depth = cfg.depth.unwrap_or(7);
    let mut g = GraphBuilder::new();
    let src = InRef::Source;

    let stem = g.dws_block("stem", src, 9, w1, 3);
    let mut e1 = stem;
    for i in 0..2 {
        e1 = g.dws_block(&format!("enc1.{i}"), e1, w1, w1, 3);
    }
    let d1 = g.dws_down("down1", e1, w1, w2);
    let mut e2 = d1;
    for i in 0..2 {
        e2 = g.dws_block(&format!("enc2.{i}"), e2, w2, w2, 3);
    }
    let d2 = g.dws_down("down2", e2, w2, w3);
    let mut mid = d2;
    for i in 0..depth {
        mid = g.dws_block(&format!("mid.{i}"), mid, w3, w3, 3);
    }
    let u1 = g.up("up1", mid, w3, w2);
    let s1 = g.push("skip1", BlockKind::Concat, vec![u1, e2]);
    let mut dec1 = g.dws_block("dec1.fuse", s1, 2 * w2, w2, 3);
    dec1 = g.dws_block("dec1.0", dec1, w2, w2, 3);
    let u2 = g.up("up2", dec1, w2, w1);
    let s2 = g.push("skip2", BlockKind::Concat, vec![u2, e1]);
    let mut dec2 = g.dws_block("dec2.fuse", s2, 2 * w1, w1, 3);
    dec2 = g.dws_block("dec2.0", dec2, w1, w1, 3);
    let head = g.conv("head", dec2, w1, 3, 3, 1);
    let slot1 = g.push(
        "slot1_planes",
        BlockKind::SliceCh { start: 3, end: 6 },
        vec![src],
    );
    let res = g.push("global_residual", BlockKind::Add, vec![head, slot1]);
    g.push("clamp", BlockKind::Clamp01, vec![res]);

    let spec = ModelSpec {
        name: "norm_unet".into(),
        colorspace: ColorspaceMode::Rgb,
        hvi_k: cfg.hvi_k,
        preprocess: vec![cfg.slot1.clone(), cfg.slot2.clone()],
        input_channels: 9,
        nodes: g.nodes,
    };
    budget_check(&spec, &cfg.budget)
}

/// Dual-branch HVI-space model with cross-branch attention per scale.
pub fn build_efficient_hvi(cfg: &ZooConfig) -> Result<ModelSpec> {
    let w = cfg.width.unwrap_or(48);
    let heads = 4;
    let window = Some(8);
    let mut g = GraphBuilder::new();
    let src = InRef::Source;

    let hv_in = g.push("hv_planes", BlockKind::SliceCh { start: 0, end: 2 }, vec![src]);
    let i_in = g.push("i_plane", BlockKind::SliceCh { start: 2, end: 3 }, vec![src]);

    let mut i_f = g.conv("i_stem", i_in, 1, w, 3, 1);
    let mut hv_f = g.conv("hv_stem", hv_in, 2, w, 3, 1);

    // cross-branch interaction at one scale: refine each branch with
    // queries from itself and keys/values from the other
    let mut lca = |g: &mut GraphBuilder, name: &str, i_f: InRef, hv_f: InRef, dim: usize| {
        let att_i = g.push(
            format!("{name}.i_from_hv"),
            BlockKind::CrossAttention {
                q_ch: dim,
                kv_ch: dim,
                dim,
                heads,
                window,
            },
            vec![i_f, hv_f],
        );
        let i_out = g.push(format!("{name}.i_res"), BlockKind::Add, vec![i_f, att_i]);
        let att_hv = g.push(
            format!("{name}.hv_from_i"),
            BlockKind::CrossAttention {
                q_ch: dim,
                kv_ch: dim,
                dim,
                heads,
                window,
            },
            vec![hv_f, i_f],
        );
        let hv_out = g.push(format!("{name}.hv_res"), BlockKind::Add, vec![hv_f, att_hv]);
        (i_out, hv_out)
    };

    // scale 0
    i_f = g.dws_block("enc0.i", i_f, w, w, 3);
    hv_f = g.dws_block("enc0.hv", hv_f, w, w, 3);
    let (i0, hv0) = lca(&mut g, "lca0", i_f, hv_f, w);
    // scale 1
    let mut i1 = g.dws_down("down1.i", i0, w, 2 * w);
    let mut hv1 = g.dws_down("down1.hv", hv0, w, 2 * w);
    i1 = g.dws_block("enc1.i", i1, 2 * w, 2 * w, 3);
    hv1 = g.dws_block("enc1.hv", hv1, 2 * w, 2 * w, 3);
    let (i1, hv1) = lca(&mut g, "lca1", i1, hv1, 2 * w);
    // scale 2 (bottleneck)
    let mut i2 = g.dws_down("down2.i", i1, 2 * w, 4 * w);
    let mut hv2 = g.dws_down("down2.hv", hv1, 2 * w, 4 * w);
    i2 = g.dws_block("enc2.i", i2, 4 * w, 4 * w, 3);
    hv2 = g.dws_block("enc2.hv", hv2, 4 * w, 4 * w, 3);
    let (i2, hv2) = lca(&mut g, "lca2", i2, hv2, 4 * w);
    // decode
    let iu1 = g.up("up1.i", i2, 4 * w, 2 * w);
    let hvu1 = g.up("up1.hv", hv2, 4 * w, 2 * w);
    let i1d = g.push("skip1.i", BlockKind::Add, vec![iu1, i1]);
    let hv1d = g.push("skip1.hv", BlockKind::Add, vec![hvu1, hv1]);
    let i1d = g.dws_block("dec1.i", i1d, 2 * w, 2 * w, 3);
    let hv1d = g.dws_block("dec1.hv", hv1d, 2 * w, 2 * w, 3);
    let iu0 = g.up("up0.i", i1d, 2 * w, w);
    let hvu0 = g.up("up0.hv", hv1d, 2 * w, w);
    let i0d = g.push("skip0.i", BlockKind::Add, vec![iu0, i0]);
    let hv0d = g.push("skip0.hv", BlockKind::Add, vec![hvu0, hv0]);
    let i0d = g.dws_block("dec0.i", i0d, w, w, 3);
    let hv0d = g.dws_block("dec0.hv", hv0d, w, w, 3);

    // zero-initialized residual heads: the model starts as the identity
    // round trip through HVI
    let i_res = g.push_flagged(
        "i_head",
        BlockKind::Conv {
            in_ch: w,
            out_ch: 1,
            kernel: (3, 3),
            stride: 1,
            groups: 1,
            bias: true,
        },
        vec![i0d],
        false,
        true,
    );
    let hv_res = g.push_flagged(
        "hv_head",
        BlockKind::Conv {
            in_ch: w,
            out_ch: 2,
            kernel: (3, 3),
            stride: 1,
            groups: 1,
            bias: true,
        },
        vec![hv0d],
        false,
        true,
    );
    let hv_out = g.push("hv_out", BlockKind::Add, vec![hv_in, hv_res]);
    let i_out = g.push("i_out", BlockKind::Add, vec![i_in, i_res]);
    let planes = g.push("planes", BlockKind::Concat, vec![hv_out, i_out]);
    let rgb = g.push("to_rgb", BlockKind::HviToRgb, vec![planes]);
    g.push("clamp", BlockKind::Clamp01, vec![rgb]);

    let spec = ModelSpec {
        name: "efficient_hvi".into(),
        colorspace: ColorspaceMode::Hvi,
        hvi_k: cfg.hvi_k,
        preprocess: vec![],
        input_channels: 3,
        nodes: g.nodes,
    };
    budget_check(&spec, &cfg.budget)
}

/// Fully convolutional multi-branch backbone with a 6-channel
/// illumination + noise-residual head, Retinex-combined:
/// `out = clamp(x / max(L, eps) - N)`.
pub fn build_mobileie6(cfg: &ZooConfig) -> Result<ModelSpec> {
    let w = cfg.width.unwrap_or(16);
    let depth = cfg.depth.unwrap_or(9);
    let mbr = MbrConfig::default();
    let mut g = GraphBuilder::new();
    let src = InRef::Source;

    let mut x = g.conv("stem", src, 3, w, 3, 1);
    x = g.push("stem.relu", BlockKind::Act(ActKind::Relu), vec![x]);
    for i in 0..depth {
        x = g.push_flagged(
            format!("mbr.{i}"),
            BlockKind::Mbr {
                in_ch: w,
                out_ch: w,
                config: mbr.clone(),
            },
            vec![x],
            true,
            false,
        );
        x = g.push(format!("mbr.{i}.relu"), BlockKind::Act(ActKind::Relu), vec![x]);
    }
    let ca = g.push(
        "dual_attention.channel",
        BlockKind::ChannelAttention {
            channels: w,
            reduction: 4,
        },
        vec![x],
    );
    let sg = g.push(
        "dual_attention.spatial",
        BlockKind::SpatialGate { channels: w, k: 3 },
        vec![ca],
    );
    let head = g.conv("head", sg, w, 6, 3, 1);
    let illum = g.push("illumination", BlockKind::SliceCh { start: 0, end: 3 }, vec![head]);
    let noise = g.push("noise_residual", BlockKind::SliceCh { start: 3, end: 6 }, vec![head]);
    let lit = g.push(
        "light_up",
        BlockKind::DivFloor { floor: ILLUM_FLOOR },
        vec![src, illum],
    );
    let denoised = g.push("denoise", BlockKind::Sub, vec![lit, noise]);
    g.push("clamp", BlockKind::Clamp01, vec![denoised]);

    let spec = ModelSpec {
        name: "mobileie6".into(),
        colorspace: ColorspaceMode::Rgb,
        hvi_k: cfg.hvi_k,
        preprocess: vec![],
        input_channels: 3,
        nodes: g.nodes,
    };
    budget_check(&spec, &cfg.budget)
}

/// Illumination-guided reflectance restorer:
/// `out = clamp(R * L_enhanced)` with `R = x / max(L, eps) + delta` and the
/// enhanced illumination predicted as a residual in logit space (so a
/// zero-initialized model is exactly the identity).
pub fn build_retinex_lite(cfg: &ZooConfig) -> Result<ModelSpec> {
    let w = cfg.width.unwrap_or(24);
    let (w1, w2, w3) = (2 * w, 4 * w, 8 * w);
    let depth = cfg.depth.unwrap_or(2);
    let mut g = GraphBuilder::new();
    let src = InRef::Source;

    // illumination estimator: shallow convs -> 1-channel logits -> [eps, 1]
    let mut il = g.conv("illum.0", src, 3, w, 3, 1);
    il = g.push("illum.0.gelu", BlockKind::Act(ActKind::Gelu), vec![il]);
    il = g.conv("illum.1", il, w, w, 3, 1);
    il = g.push("illum.1.gelu", BlockKind::Act(ActKind::Gelu), vec![il]);
    let z = g.conv("illum.logits", il, w, 1, 3, 1);
    let illum = g.push(
        "illum.range",
        BlockKind::SigmoidRange {
            lo: ILLUM_FLOOR,
            hi: 1.0,
        },
        vec![z],
    );

    // reflectance input: light-up + illumination as conditioning channel
    let lit = g.push(
        "light_up",
        BlockKind::DivFloor { floor: ILLUM_FLOOR },
        vec![src, illum],
    );
    let rin = g.push("restorer_in", BlockKind::Concat, vec![lit, illum]);

    // compact 4-level encoder-decoder restorer
    let e0 = g.dws_block("enc0", rin, 4, w, 3);
    let d1 = g.dws_down("down1", e0, w, w1);
    let e1 = g.dws_block("enc1", d1, w1, w1, 3);
    let d2 = g.dws_down("down2", e1, w1, w2);
    let e2 = g.dws_block("enc2", d2, w2, w2, 3);
    let d3 = g.dws_down("down3", e2, w2, w3);
    let mut mid = d3;
    for i in 0..depth {
        mid = g.conv(&format!("mid.{i}.conv"), mid, w3, w3, 3, 1);
        let n = g.push(
            format!("mid.{i}.norm"),
            BlockKind::Norm { channels: w3 },
            vec![mid],
        );
        mid = g.push(format!("mid.{i}.gelu"), BlockKind::Act(ActKind::Gelu), vec![n]);
    }
    let u2 = g.up("up2", mid, w3, w2);
    let s2 = g.push("skip2", BlockKind::Add, vec![u2, e2]);
    let dec2 = g.dws_block("dec2", s2, w2, w2, 3);
    let u1 = g.up("up1", dec2, w2, w1);
    let s1 = g.push("skip1", BlockKind::Add, vec![u1, e1]);
    let dec1 = g.dws_block("dec1", s1, w1, w1, 3);
    let u0 = g.up("up0", dec1, w1, w);
    let s0 = g.push("skip0", BlockKind::Add, vec![u0, e0]);
    let dec0 = g.dws_block("dec0", s0, w, w, 3);

    // reflectance residual (zero-init: R starts as the light-up)
    let delta = g.push_flagged(
        "reflectance_head",
        BlockKind::Conv {
            in_ch: w,
            out_ch: 3,
            kernel: (3, 3),
            stride: 1,
            groups: 1,
            bias: true,
        },
        vec![dec0],
        false,
        true,
    );
    let reflectance = g.push("reflectance", BlockKind::Add, vec![lit, delta]);

    // enhanced illumination: residual in logit space (zero-init keeps L)
    let ze = g.push_flagged(
        "illum_adjust",
        BlockKind::Conv {
            in_ch: w,
            out_ch: 1,
            kernel: (3, 3),
            stride: 1,
            groups: 1,
            bias: true,
        },
        vec![dec0],
        false,
        true,
    );
    let z_sum = g.push("illum.enhanced_logits", BlockKind::Add, vec![z, ze]);
    let illum_e = g.push(
        "illum.enhanced",
        BlockKind::SigmoidRange {
            lo: ILLUM_FLOOR,
            hi: 1.0,
        },
        vec![z_sum],
    );

    let out = g.push("compose", BlockKind::Mul, vec![reflectance, illum_e]);
    g.push("clamp", BlockKind::Clamp01, vec![out]);

    let spec = ModelSpec {
        name: "retinex_lite".into(),
        colorspace: ColorspaceMode::Rgb,
        hvi_k: cfg.hvi_k,
        preprocess: vec![],
        input_channels: 3,
        nodes: g.nodes,
    };
    budget_check(&spec, &cfg.budget)
}

/// Builds a zoo model by name with the given config.
pub fn build_by_name(name: &str, cfg: &ZooConfig) -> Result<ModelSpec> {
    match name {
        "norm_unet" => build_norm_unet(cfg),
        "efficient_hvi" => build_efficient_hvi(cfg),
        "mobileie6" => build_mobileie6(cfg),
        "retinex_lite" => build_retinex_lite(cfg),
        other => Err(Error::config(format!(
            "unknown model '{other}' (expected one of norm_unet, efficient_hvi, mobileie6, retinex_lite)"
        ))),
    }
}

/// Names of the four reference models.
pub const ZOO_MODELS: [&str; 4] = ["norm_unet", "efficient_hvi", "mobileie6", "retinex_lite"];

/// Exact learnable-scalar count of a spec, without instantiation.
pub fn count_params(spec: &ModelSpec) -> usize {
    spec.param_count()
}

/// Budget audit result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetReport {
    pub model: String,
    pub per_node: Vec<(String, usize)>,
    pub total_params: usize,
    pub max_params: usize,
    pub params_pass: bool,
    /// Parameters over budget (0 when passing).
    pub overflow: usize,
    pub storage_precision: Precision,
    /// Estimated parameter payload at the declared precision.
    pub estimated_bytes: u64,
    pub max_bytes: Option<u64>,
    pub bytes_pass: Option<bool>,
}

impl BudgetReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("model: {}\n", self.model));
        for (name, count) in &self.per_node {
            if *count > 0 {
                out.push_str(&format!("  {name:<28} {count:>10}\n"));
            }
        }
        out.push_str(&format!(
            "total parameters: {} / {} -> {}\n",
            self.total_params,
            self.max_params,
            if self.params_pass {
                "pass".to_string()
            } else {
                format!("FAIL (over by {})", self.overflow)
            }
        ));
        out.push_str(&format!(
            "estimated payload at {:?}: {} bytes",
            self.storage_precision, self.estimated_bytes
        ));
        match (self.max_bytes, self.bytes_pass) {
            (Some(limit), Some(pass)) => {
                out.push_str(&format!(
                    " / {} -> {}\n",
                    limit,
                    if pass { "pass" } else { "FAIL" }
                ));
            }
            _ => out.push('\n'),
        }
        out
    }
}

/// Audits a spec against a budget: per-node counts, total, verdict, and a
/// serialized-size estimate at the given storage precision.
pub fn audit_budget(spec: &ModelSpec, budget: &ParamBudget, precision: Precision) -> BudgetReport {
    let per_node: Vec<(String, usize)> = spec
        .nodes
        .iter()
        .map(|n| (n.name.clone(), n.kind.param_count()))
        .collect();
    let total = spec.param_count();
    let estimated = total as u64 * precision.bytes_per_scalar();
    let bytes_pass = budget.max_serialized_bytes.map(|limit| estimated <= limit);
    BudgetReport {
        model: spec.name.clone(),
        per_node,
        total_params: total,
        max_params: budget.max_params,
        params_pass: total <= budget.max_params,
        overflow: total.saturating_sub(budget.max_params),
        storage_precision: precision,
        estimated_bytes: estimated,
        max_bytes: budget.max_serialized_bytes,
        bytes_pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Model;
    use crate::image::ImageTensor;
    use ndarray::{Array3, Array4, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::unit(Array3::from_shape_simple_fn((3, h, w), || {
            rng.gen_range(0.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn all_defaults_fit_budget_and_counts_match() {
        for name in ZOO_MODELS {
            let spec = build_by_name(name, &ZooConfig::default()).unwrap();
            let report = audit_budget(&spec, &ParamBudget::default(), Precision::F32);
            assert!(
                report.params_pass,
                "{name}: {} params over 1M",
                report.total_params
            );
            let model = Model::instantiate(&spec, 1).unwrap();
            assert_eq!(
                model.params.total_scalars(),
                spec.param_count(),
                "{name}: spec count != instantiated count"
            );
            println!(
                "{name}: {} params, alignment {}, receptive {:?}",
                report.total_params,
                spec.alignment(),
                spec.receptive_radius()
            );
        }
    }

    #[test]
    fn mobileie6_default_lands_near_reference_count() {
        let spec = build_mobileie6(&ZooConfig::default()).unwrap();
        let n = spec.param_count() as f64;
        let reference = 101_922.0;
        assert!(
            (n - reference).abs() / reference <= 0.20,
            "mobileie6 at {n} params is outside +-20% of {reference}"
        );
    }

    #[test]
    fn budget_errors_name_the_overflow() {
        let cfg = ZooConfig {
            width: Some(120),
            ..ZooConfig::default()
        };
        match build_norm_unet(&cfg) {
            Err(crate::Error::Budget(msg)) => {
                assert!(msg.contains("exceeding"), "{msg}");
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn audit_thresholds() {
        let spec = build_mobileie6(&ZooConfig::default()).unwrap();
        let n = spec.param_count();
        let pass = audit_budget(
            &spec,
            &ParamBudget {
                max_params: n,
                max_serialized_bytes: None,
            },
            Precision::F16,
        );
        assert!(pass.params_pass);
        assert_eq!(pass.overflow, 0);
        let fail = audit_budget(
            &spec,
            &ParamBudget {
                max_params: n - 4,
                max_serialized_bytes: None,
            },
            Precision::F16,
        );
        assert!(!fail.params_pass);
        assert_eq!(fail.overflow, 4);
        assert_eq!(pass.estimated_bytes, n as u64 * 2);
    }

    #[test]
    fn norm_unet_zero_weights_is_slot1_passthrough() {
        let cfg = ZooConfig {
            slot1: Preprocessor::Identity,
            slot2: Preprocessor::Identity,
            ..ZooConfig::default()
        };
        let spec = build_norm_unet(&cfg).unwrap();
        let mut model = Model::instantiate(&spec, 3).unwrap();
        for e in model.params.entries_mut() {
            e.value.fill(0.0);
        }
        let img = rand_image(5, 32, 32);
        let planes = model.prepare_input(&img).unwrap();
        let out = model
            .infer(&planes.insert_axis(ndarray::Axis(0)))
            .unwrap();
        let err = out
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .zip(img.data.iter())
            .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-6, "zero-weight norm_unet must pass slot1 through: {err}");
    }

    #[test]
    fn norm_unet_shape_contract() {
        let spec = build_norm_unet(&ZooConfig::default()).unwrap();
        let model = Model::instantiate(&spec, 4).unwrap();
        let img = rand_image(6, 64, 64);
        let planes = model.prepare_input(&img).unwrap();
        assert_eq!(planes.shape(), &[9, 64, 64]);
        let out = model.infer(&planes.insert_axis(ndarray::Axis(0))).unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 64]);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn efficient_hvi_zero_heads_is_round_trip() {
        let spec = build_efficient_hvi(&ZooConfig::default()).unwrap();
        let model = Model::instantiate(&spec, 7).unwrap();
        let img = rand_image(8, 64, 64);
        let planes = model.prepare_input(&img).unwrap();
        let out = model.infer(&planes.insert_axis(ndarray::Axis(0))).unwrap();
        // zero-initialized heads leave the HVI planes untouched, so the
        // output is the HVI round trip of the input
        let err = out
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .zip(img.data.iter())
            .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-5, "round-trip deviation {err}");
    }

    #[test]
    fn efficient_hvi_gray_stays_gray() {
        let spec = build_efficient_hvi(&ZooConfig::default()).unwrap();
        let model = Model::instantiate(&spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gray_plane = ndarray::Array2::from_shape_simple_fn((32, 32), || rng.gen_range(0.1..0.9f32));
        let mut data = Array3::zeros((3, 32, 32));
        for c in 0..3 {
            data.index_axis_mut(ndarray::Axis(0), c).assign(&gray_plane);
        }
        let img = ImageTensor::unit(data).unwrap();
        let planes = model.prepare_input(&img).unwrap();
        let out = model.infer(&planes.insert_axis(ndarray::Axis(0))).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let r = out[[0, 0, y, x]];
                let g = out[[0, 1, y, x]];
                let b = out[[0, 2, y, x]];
                assert!((r - g).abs() < 1e-6 && (g - b).abs() < 1e-6, "chroma appeared");
            }
        }
    }

    #[test]
    fn mobileie6_identity_under_unit_illumination() {
        let spec = build_mobileie6(&ZooConfig::default()).unwrap();
        let mut model = Model::instantiate(&spec, 11).unwrap();
        // force head output to L = 1, N = 0
        let head_idx = spec
            .nodes
            .iter()
            .position(|n| n.name == "head")
            .unwrap();
        let ids = model.node_params()[head_idx].clone();
        model.params.value_mut(ids[0]).fill(0.0);
        let bias = model.params.value_mut(ids[1]);
        for c in 0..6 {
            bias[IxDyn(&[c])] = if c < 3 { 1.0 } else { 0.0 };
        }
        let img = rand_image(12, 32, 32);
        let planes = model.prepare_input(&img).unwrap();
        let out = model.infer(&planes.insert_axis(ndarray::Axis(0))).unwrap();
        let err = out
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .zip(img.data.iter())
            .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-6, "Retinex identity violated: {err}");
    }

    #[test]
    fn mobileie6_reparam_equivalence_and_shrink() {
        let spec = build_mobileie6(&ZooConfig::default()).unwrap();
        let model = Model::instantiate(&spec, 13).unwrap();
        let before = model.params.total_scalars();
        let slim = crate::reparam::reparameterize_model(&model).unwrap();
        let after = slim.params.total_scalars();
        assert!(after < before, "params must strictly decrease: {before} -> {after}");
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..2 {
            let x = Array4::from_shape_simple_fn((1, 3, 64, 64), || rng.gen_range(0.0f32..1.0));
            let a = model.infer(&x).unwrap();
            let b = slim.infer(&x).unwrap();
            let err = (&a - &b).iter().fold(0f32, |m, d| m.max(d.abs()));
            assert!(err < 1e-4, "reparam deviation {err}");
        }
    }

    #[test]
    fn reparam_without_marks_is_identity_transform() {
        let spec = build_retinex_lite(&ZooConfig::default()).unwrap();
        let model = Model::instantiate(&spec, 15).unwrap();
        let same = crate::reparam::reparameterize_model(&model).unwrap();
        assert_eq!(model.params.total_scalars(), same.params.total_scalars());
        let x = Array4::from_elem((1, 3, 32, 32), 0.4f32);
        let a = model.infer(&x).unwrap();
        let b = same.infer(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn retinex_lite_zero_heads_is_identity_and_illum_in_range() {
        let spec = build_retinex_lite(&ZooConfig::default()).unwrap();
        let model = Model::instantiate(&spec, 17).unwrap();
        let img = rand_image(18, 32, 32);
        let planes = model.prepare_input(&img).unwrap();
        let out = model.infer(&planes.insert_axis(ndarray::Axis(0))).unwrap();
        let err = out
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .zip(img.data.iter())
            .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-5, "zero-head retinex_lite must be identity: {err}");

        // illumination output stays within [eps, 1]: probe with a model
        // truncated at the illumination node (same seed, same params there)
        let illum_idx = spec.nodes.iter().position(|n| n.name == "illum.range").unwrap();
        let mut probe_spec = spec.clone();
        probe_spec.nodes.truncate(illum_idx + 1);
        let probe = Model::instantiate(&probe_spec, 17).unwrap();
        let planes2 = model.prepare_input(&img).unwrap();
        let l = probe.infer(&planes2.insert_axis(ndarray::Axis(0))).unwrap();
        assert!(l
            .iter()
            .all(|&v| v >= ILLUM_FLOOR - 1e-6 && v <= 1.0 + 1e-6));
    }

    #[test]
    fn zoo_equivariance_smoke_with_symmetrized_kernels() {
        // Horizontal-flip equivariance holds only for left-right symmetric
        // kernels, so symmetrize every 4-D weight first; the check then
        // exercises padding and indexing for asymmetric-border bugs.
        for name in ZOO_MODELS {
            let spec = build_by_name(name, &ZooConfig::default()).unwrap();
            let mut model = Model::instantiate(&spec, 21).unwrap();
            for e in model.params.entries_mut() {
                if e.value.ndim() == 4 {
                    let flipped = e.value.slice(ndarray::s![.., .., .., ..;-1].as_ref()).to_owned();
                    e.value.zip_mut_with(&flipped, |a, &b| *a = 0.5 * (*a + b));
                }
            }
            let img = rand_image(22, 32, 32);
            let planes = model.prepare_input(&img).unwrap();
            let x = planes.insert_axis(ndarray::Axis(0));
            let y = model.infer(&x).unwrap();
            let xf = x.slice(ndarray::s![.., .., .., ..;-1]).to_owned();
            // preprocessors are pointwise or flip-covariant on this data,
            // so flipping the prepared planes equals preparing the flip
            let yf = model.infer(&xf).unwrap();
            let yf_back = yf.slice(ndarray::s![.., .., .., ..;-1]).to_owned();
            let mut max_err = 0f32;
            for c in 0..3 {
                for yy in 4..28 {
                    for xx in 4..28 {
                        let d = (y[[0, c, yy, xx]] - yf_back[[0, c, yy, xx]]).abs();
                        max_err = max_err.max(d);
                    }
                }
            }
            assert!(max_err < 1e-4, "{name}: interior flip-equivariance error {max_err}");
        }
    }

    #[test]
    fn unknown_model_name_is_config_error() {
        assert!(matches!(
            build_by_name("resnet", &ZooConfig::default()),
            Err(crate::Error::Config(_))
        ));
    }
}
