//! Lightweight differentiable building blocks shared by the model zoo:
//! depthwise-separable and partial convolutions, running-stat normalization,
//! channel/cross attention, gates, illumination-conditioned modulation and
//! multi-branch convolutions.
//!
//! Blocks hold [`ParamId`]s into an external [`Params`] store; forward
//! passes are read-only over parameters. Normalization keeps running
//! estimates in [`Buffers`] so inference is input-independent per pixel and
//! foldable into convolutions (see [`crate::reparam`]).

use ndarray::{Array1, IxDyn};
use rand::Rng;

use crate::autodiff::{Ax, BufId, Buffers, ParamId, Params, Tape, Var};
use crate::error::{Error, Result};
use crate::reparam::{ConvBranchSpec, NormStats};

/// Everything a block forward needs.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Params,
    pub bufs: &'a mut Buffers,
    /// Training mode: norms use batch statistics and update running ones.
    pub train: bool,
}

fn kaiming(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Ax {
    let fan_in = (shape.1 * shape.2 * shape.3) as f32;
    let bound = (6.0 / fan_in).sqrt();
    Ax::from_shape_simple_fn(IxDyn(&[shape.0, shape.1, shape.2, shape.3]), || {
        rng.gen_range(-bound..bound)
    })
}

fn bias_init(rng: &mut impl Rng, n: usize, fan_in: usize) -> Ax {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Ax::from_shape_simple_fn(IxDyn(&[n]), || rng.gen_range(-bound..bound))
}

/// Largest group count <= min(8, channels) that divides the channel count.
pub fn default_norm_groups(channels: usize) -> usize {
    let cap = channels.min(8);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

// ---------------------------------------------------------------------
// plain convolution
// ---------------------------------------------------------------------

/// Same-padded convolution with learnable weights and optional bias.
#[derive(Debug, Clone)]
pub struct Conv2dBlock {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub groups: usize,
}

impl Conv2dBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
            return Err(Error::config(format!("conv kernel {kernel:?} must be odd")));
        }
        if in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::config(format!(
                "channels {in_ch}->{out_ch} not divisible by groups {groups}"
            )));
        }
        let w = params.alloc(kaiming(rng, (out_ch, in_ch / groups, kernel.0, kernel.1)));
        let b = bias.then(|| params.alloc(bias_init(rng, out_ch, in_ch / groups * kernel.0 * kernel.1)));
        Ok(Conv2dBlock {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            groups,
        })
    }

    /// Zeroes weights and bias; used for residual heads that must start as
    /// the identity contribution.
    pub fn zero_init(&self, params: &mut Params) {
        params.value_mut(self.w).fill(0.0);
        if let Some(b) = self.b {
            params.value_mut(b).fill(0.0);
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let got = f.tape.shape(x)[1];
        if got != self.in_ch {
            return Err(Error::shape(format!(
                "conv expected {} input channels, got {got}",
                self.in_ch
            )));
        }
        let w = f.tape.param(f.params, self.w);
        let b = self.b.map(|b| f.tape.param(f.params, b));
        Ok(f.tape.conv2d(x, w, b, self.stride, self.groups))
    }

    pub fn param_count(&self) -> usize {
        conv_param_count(
            self.in_ch,
            self.out_ch,
            self.kernel,
            self.groups,
            self.b.is_some(),
        )
    }
}

/// Learnable-scalar count of a convolution.
pub fn conv_param_count(
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    groups: usize,
    bias: bool,
) -> usize {
    out_ch * (in_ch / groups) * kernel.0 * kernel.1 + if bias { out_ch } else { 0 }
}

// ---------------------------------------------------------------------
// normalization with running statistics
// ---------------------------------------------------------------------

/// Normalization with grouped statistics and running estimates.
///
/// Training normalizes with batch statistics shared across channel groups
/// (group count defaults to `min(8, channels)`) and updates per-channel
/// running estimates; evaluation normalizes with the frozen estimates,
/// which keeps inference local and lets [`crate::reparam::fold_norm`]
/// absorb the layer into a preceding convolution.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufId,
    pub var: BufId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
    pub momentum: f32,
}

impl NormLayer {
    pub fn new(params: &mut Params, bufs: &mut Buffers, channels: usize) -> Self {
        let groups = default_norm_groups(channels);
        NormLayer {
            gamma: params.alloc(Ax::from_elem(IxDyn(&[channels]), 1.0)),
            beta: params.alloc(Ax::zeros(IxDyn(&[channels]))),
            mean: bufs.alloc(Ax::zeros(IxDyn(&[channels]))),
            var: bufs.alloc(Ax::from_elem(IxDyn(&[channels]), 1.0)),
            channels,
            groups,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "norm expected (N,{},H,W), got {shape:?}",
                self.channels
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = self.groups;
        let xhat = if f.train {
            let x5 = f.tape.reshape(x, &[n, g, c / g, h, w]);
            let mu = f.tape.mean_axes(x5, &[0, 2, 3, 4]);
            let xc = f.tape.sub(x5, mu);
            let sq = f.tape.mul(xc, xc);
            let var = f.tape.mean_axes(sq, &[0, 2, 3, 4]);
            self.update_running(f, mu, var);
            let veps = f.tape.add_scalar(var, self.eps);
            let std = f.tape.sqrt(veps);
            let xh5 = f.tape.div(xc, std);
            f.tape.reshape(xh5, &[n, c, h, w])
        } else {
            let mean = f.bufs.value(self.mean).clone();
            let var = f.bufs.value(self.var).clone();
            let mean = f
                .tape
                .leaf(mean.to_shape(IxDyn(&[1, c, 1, 1])).unwrap().to_owned());
            let var = f
                .tape
                .leaf(var.to_shape(IxDyn(&[1, c, 1, 1])).unwrap().to_owned());
            let xc = f.tape.sub(x, mean);
            let veps = f.tape.add_scalar(var, self.eps);
            let std = f.tape.sqrt(veps);
            f.tape.div(xc, std)
        };
        let gamma = f.tape.param(f.params, self.gamma);
        let gamma = f.tape.reshape(gamma, &[1, c, 1, 1]);
        let beta = f.tape.param(f.params, self.beta);
        let beta = f.tape.reshape(beta, &[1, c, 1, 1]);
        let scaled = f.tape.mul(xhat, gamma);
        Ok(f.tape.add(scaled, beta))
    }

    fn update_running(&self, f: &mut Fwd, mu: Var, var: Var) {
        let mu_v = f.tape.value(mu).clone();
        let var_v = f.tape.value(var).clone();
        let cg = self.channels / self.groups;
        let m = self.momentum;
        let mean_buf = f.bufs.value_mut(self.mean);
        for ch in 0..self.channels {
            let stat = mu_v[IxDyn(&[0, ch / cg, 0, 0, 0])];
            mean_buf[IxDyn(&[ch])] = (1.0 - m) * mean_buf[IxDyn(&[ch])] + m * stat;
        }
        let var_buf = f.bufs.value_mut(self.var);
        for ch in 0..self.channels {
            let stat = var_v[IxDyn(&[0, ch / cg, 0, 0, 0])];
            var_buf[IxDyn(&[ch])] = (1.0 - m) * var_buf[IxDyn(&[ch])] + m * stat;
        }
    }

    /// Per-channel frozen statistics for reparameterization.
    pub fn stats(&self, params: &Params, bufs: &Buffers) -> NormStats {
        let to1 = |a: &Ax| Array1::from_iter(a.iter().copied());
        NormStats {
            mean: to1(bufs.value(self.mean)),
            var: to1(bufs.value(self.var)),
            gamma: to1(params.value(self.gamma)),
            beta: to1(params.value(self.beta)),
            eps: self.eps,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

// ---------------------------------------------------------------------
// depthwise separable / partial convolutions
// ---------------------------------------------------------------------

/// Depthwise k x k convolution followed by a pointwise 1x1, both biased.
#[derive(Debug, Clone)]
pub struct DwsConv {
    pub depthwise: Conv2dBlock,
    pub pointwise: Conv2dBlock,
}

impl DwsConv {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(DwsConv {
            depthwise: Conv2dBlock::new(params, rng, in_ch, in_ch, (k, k), 1, in_ch, true)?,
            pointwise: Conv2dBlock::new(params, rng, in_ch, out_ch, (1, 1), 1, 1, true)?,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let d = self.depthwise.forward(f, x)?;
        self.pointwise.forward(f, d)
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

/// `in*k^2 + in + in*out + out`: the depthwise-separable parameter count.
pub fn dws_param_count(in_ch: usize, out_ch: usize, k: usize) -> usize {
    in_ch * k * k + in_ch + in_ch * out_ch + out_ch
}

/// Convolves the first `ceil(ratio * C)` channels; passes the rest through
/// untouched (bit-identical).
#[derive(Debug, Clone)]
pub struct PartialConv {
    pub conv: Conv2dBlock,
    pub channels: usize,
    pub conv_ch: usize,
    pub ratio: f32,
}

impl PartialConv {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        channels: usize,
        ratio: f32,
        k: usize,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config(format!(
                "partial conv ratio {ratio} outside (0, 1]"
            )));
        }
        let conv_ch = ((ratio as f64 * channels as f64).ceil() as usize).max(1);
        Ok(PartialConv {
            conv: Conv2dBlock::new(params, rng, conv_ch, conv_ch, (k, k), 1, 1, true)?,
            channels,
            conv_ch,
            ratio,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let got = f.tape.shape(x)[1];
        if got != self.channels {
            return Err(Error::shape(format!(
                "partial conv expected {} channels, got {got}",
                self.channels
            )));
        }
        if self.conv_ch == self.channels {
            return self.conv.forward(f, x);
        }
        let head = f.tape.slice_channels(x, 0, self.conv_ch);
        let head = self.conv.forward(f, head)?;
        let tail = f.tape.slice_channels(x, self.conv_ch, self.channels);
        Ok(f.tape.concat(&[head, tail], 1))
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

// ---------------------------------------------------------------------
// attention & gates
// ---------------------------------------------------------------------

/// Squeeze-and-excitation style channel attention with sigmoid gains.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Conv2dBlock,
    pub fc2: Conv2dBlock,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "channel attention reduction {reduction} does not divide {channels}"
            )));
        }
        Ok(ChannelAttention {
            fc1: Conv2dBlock::new(params, rng, channels, channels / reduction, (1, 1), 1, 1, true)?,
            fc2: Conv2dBlock::new(params, rng, channels / reduction, channels, (1, 1), 1, 1, true)?,
            channels,
            reduction,
        })
    }

    /// Per-channel gains in (0,1), shape `(N,C,1,1)`.
    pub fn gains(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let pooled = f.tape.global_avg_pool(x);
        let h = self.fc1.forward(f, pooled)?;
        let h = f.tape.relu(h);
        let h = self.fc2.forward(f, h)?;
        Ok(f.tape.sigmoid(h))
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let g = self.gains(f, x)?;
        Ok(apply_channel_gains(f.tape, x, g))
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Scales `x` by per-channel gains of shape `(N,C,1,1)`.
pub fn apply_channel_gains(tape: &mut Tape, x: Var, gains: Var) -> Var {
    tape.mul(x, gains)
}

/// Simplified channel attention: one linear 1x1 on the pooled vector,
/// unbounded gains.
#[derive(Debug, Clone)]
pub struct Sca {
    pub fc: Conv2dBlock,
    pub channels: usize,
}

impl Sca {
    pub fn new(params: &mut Params, rng: &mut impl Rng, channels: usize) -> Result<Self> {
        Ok(Sca {
            fc: Conv2dBlock::new(params, rng, channels, channels, (1, 1), 1, 1, true)?,
            channels,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let pooled = f.tape.global_avg_pool(x);
        let gains = self.fc.forward(f, pooled)?;
        Ok(apply_channel_gains(f.tape, x, gains))
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count()
    }
}

/// Splits channels in half and multiplies the halves elementwise.
pub fn simple_gate(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = tape.shape(x)[1];
    if c % 2 != 0 {
        return Err(Error::shape(format!("simple_gate needs even channels, got {c}")));
    }
    let a = tape.slice_channels(x, 0, c / 2);
    let b = tape.slice_channels(x, c / 2, c);
    Ok(tape.mul(a, b))
}

/// Spatial gate: a k x k convolution to one channel, sigmoid, multiply.
#[derive(Debug, Clone)]
pub struct SpatialGate {
    pub conv: Conv2dBlock,
}

impl SpatialGate {
    pub fn new(params: &mut Params, rng: &mut impl Rng, channels: usize, k: usize) -> Result<Self> {
        Ok(SpatialGate {
            conv: Conv2dBlock::new(params, rng, channels, 1, (k, k), 1, 1, true)?,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let g = self.conv.forward(f, x)?;
        let g = f.tape.sigmoid(g);
        Ok(f.tape.mul(x, g))
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

// ---------------------------------------------------------------------
// illumination-conditioned normalization (FiLM-style)
// ---------------------------------------------------------------------

/// Instance-normalizes features, then applies per-channel affine parameters
/// that are themselves affine in a global luminance scalar `L`:
/// `out = (g0 + g1 L) * norm(x) + (b0 + b1 L)`.
#[derive(Debug, Clone)]
pub struct IcnModulate {
    pub g0: ParamId,
    pub g1: ParamId,
    pub b0: ParamId,
    pub b1: ParamId,
    pub channels: usize,
    pub eps: f32,
}

impl IcnModulate {
    pub fn new(params: &mut Params, channels: usize) -> Self {
        IcnModulate {
            g0: params.alloc(Ax::from_elem(IxDyn(&[channels]), 1.0)),
            g1: params.alloc(Ax::zeros(IxDyn(&[channels]))),
            b0: params.alloc(Ax::zeros(IxDyn(&[channels]))),
            b1: params.alloc(Ax::zeros(IxDyn(&[channels]))),
            channels,
            eps: 1e-5,
        }
    }

    /// `lum` is `(N,1,1,1)` with values in [0,1].
    pub fn forward(&self, f: &mut Fwd, x: Var, lum: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "icn expected (N,{},H,W), got {shape:?}",
                self.channels
            )));
        }
        if f.tape.value(lum).iter().any(|&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::domain("luminance scalar outside [0,1]"));
        }
        let c = self.channels;
        // instance norm over spatial dims
        let mu = f.tape.mean_axes(x, &[2, 3]);
        let xc = f.tape.sub(x, mu);
        let sq = f.tape.mul(xc, xc);
        let var = f.tape.mean_axes(sq, &[2, 3]);
        let veps = f.tape.add_scalar(var, self.eps);
        let std = f.tape.sqrt(veps);
        let xhat = f.tape.div(xc, std);

        let load = |f: &mut Fwd, id: ParamId| {
            let v = f.tape.param(f.params, id);
            f.tape.reshape(v, &[1, c, 1, 1])
        };
        let g0 = load(f, self.g0);
        let g1 = load(f, self.g1);
        let b0 = load(f, self.b0);
        let b1 = load(f, self.b1);
        let g1l = f.tape.mul(g1, lum);
        let gamma = f.tape.add(g0, g1l);
        let b1l = f.tape.mul(b1, lum);
        let beta = f.tape.add(b0, b1l);
        let scaled = f.tape.mul(xhat, gamma);
        Ok(f.tape.add(scaled, beta))
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels
    }
}

// ---------------------------------------------------------------------
// cross attention
// ---------------------------------------------------------------------

/// Multi-head scaled dot-product attention over spatial positions, with
/// queries from one feature map and keys/values from another. Windowed by
/// default for memory; `window: None` attends globally.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q_proj: Conv2dBlock,
    pub k_proj: Conv2dBlock,
    pub v_proj: Conv2dBlock,
    pub o_proj: Conv2dBlock,
    pub heads: usize,
    pub dim: usize,
    pub window: Option<usize>,
}

impl CrossAttention {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        q_ch: usize,
        kv_ch: usize,
        dim: usize,
        heads: usize,
        window: Option<usize>,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention heads {heads} do not divide embedding width {dim}"
            )));
        }
        Ok(CrossAttention {
            q_proj: Conv2dBlock::new(params, rng, q_ch, dim, (1, 1), 1, 1, true)?,
            k_proj: Conv2dBlock::new(params, rng, kv_ch, dim, (1, 1), 1, 1, true)?,
            v_proj: Conv2dBlock::new(params, rng, kv_ch, dim, (1, 1), 1, 1, true)?,
            o_proj: Conv2dBlock::new(params, rng, dim, q_ch, (1, 1), 1, 1, true)?,
            heads,
            dim,
            window,
        })
    }

    /// `(N,D,H,W)` -> `(N*windows*heads, L, dh)` token batches.
    fn to_tokens(&self, f: &mut Fwd, x: Var, h: usize, w: usize) -> Var {
        let n = f.tape.shape(x)[0];
        let dh = self.dim / self.heads;
        match self.window {
            Some(win) => {
                let x6 = f
                    .tape
                    .reshape(x, &[n, self.heads, dh, h / win, win, w / win, win]);
                let xp = f.tape.permute(x6, &[0, 3, 5, 1, 4, 6, 2]);
                f.tape.reshape(
                    xp,
                    &[n * (h / win) * (w / win) * self.heads, win * win, dh],
                )
            }
            None => {
                let x4 = f.tape.reshape(x, &[n, self.heads, dh, h * w]);
                let xp = f.tape.permute(x4, &[0, 1, 3, 2]);
                f.tape.reshape(xp, &[n * self.heads, h * w, dh])
            }
        }
    }

    fn from_tokens(&self, f: &mut Fwd, tokens: Var, n: usize, h: usize, w: usize) -> Var {
        let dh = self.dim / self.heads;
        match self.window {
            Some(win) => {
                let t7 = f.tape.reshape(
                    tokens,
                    &[n, h / win, w / win, self.heads, win, win, dh],
                );
                let tp = f.tape.permute(t7, &[0, 3, 6, 1, 4, 2, 5]);
                f.tape.reshape(tp, &[n, self.dim, h, w])
            }
            None => {
                let t3 = f.tape.reshape(tokens, &[n, self.heads, h * w, dh]);
                let tp = f.tape.permute(t3, &[0, 1, 3, 2]);
                f.tape.reshape(tp, &[n, self.dim, h, w])
            }
        }
    }

    /// Forward pass that also returns the attention weights
    /// (`(batches, L, L)`, rows summing to 1).
    pub fn forward_with_weights(&self, f: &mut Fwd, q_src: Var, kv_src: Var) -> Result<(Var, Var)> {
        let qs = f.tape.shape(q_src).to_vec();
        let ks = f.tape.shape(kv_src).to_vec();
        if qs[2] != ks[2] || qs[3] != ks[3] {
            return Err(Error::shape(format!(
                "cross attention spatial dims mismatch: {qs:?} vs {ks:?}"
            )));
        }
        let (n, h, w) = (qs[0], qs[2], qs[3]);
        if let Some(win) = self.window {
            if h % win != 0 || w % win != 0 {
                return Err(Error::shape(format!(
                    "spatial dims {h}x{w} not divisible by window {win}"
                )));
            }
        }
        let q = self.q_proj.forward(f, q_src)?;
        let k = self.k_proj.forward(f, kv_src)?;
        let v = self.v_proj.forward(f, kv_src)?;
        let qt = self.to_tokens(f, q, h, w);
        let kt = self.to_tokens(f, k, h, w);
        let vt = self.to_tokens(f, v, h, w);
        let dh = self.dim / self.heads;
        let logits = f.tape.matmul(qt, kt, true);
        let logits = f.tape.scale(logits, 1.0 / (dh as f32).sqrt());
        let attn = f.tape.softmax(logits, 2);
        let out = f.tape.matmul(attn, vt, false);
        let out = self.from_tokens(f, out, n, h, w);
        let out = self.o_proj.forward(f, out)?;
        Ok((out, attn))
    }

    pub fn forward(&self, f: &mut Fwd, q_src: Var, kv_src: Var) -> Result<Var> {
        Ok(self.forward_with_weights(f, q_src, kv_src)?.0)
    }

    pub fn param_count(&self) -> usize {
        self.q_proj.param_count()
            + self.k_proj.param_count()
            + self.v_proj.param_count()
            + self.o_proj.param_count()
    }
}

/// Recombines FFT amplitude of `amp_src` with FFT phase of `phase_src`.
pub fn phase_transfer(tape: &mut Tape, amp_src: Var, phase_src: Var) -> Result<Var> {
    if tape.shape(amp_src) != tape.shape(phase_src) {
        return Err(Error::shape(format!(
            "phase_transfer shape mismatch: {:?} vs {:?}",
            tape.shape(amp_src),
            tape.shape(phase_src)
        )));
    }
    Ok(tape.phase_transfer(amp_src, phase_src))
}

// ---------------------------------------------------------------------
// multi-branch convolution (reparameterizable)
// ---------------------------------------------------------------------

/// One trainable branch of a multi-branch convolution.
#[derive(Debug, Clone)]
pub struct MbrBranch {
    pub conv: Conv2dBlock,
    pub norm: Option<NormLayer>,
}

/// Training-time multi-branch convolution: parallel convolutions of
/// different kernel shapes (optionally normed) plus an optional identity
/// shortcut, summed. Merges into a single `target x target` convolution at
/// inference (see [`crate::reparam::merge_branches`]).
#[derive(Debug, Clone)]
pub struct MbrConv {
    pub branches: Vec<MbrBranch>,
    /// `None`: no identity shortcut. `Some(None)`: plain shortcut.
    /// `Some(Some(norm))`: normalized shortcut.
    pub identity: Option<Option<NormLayer>>,
    pub target: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

/// Branch layout of an [`MbrConv`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MbrConfig {
    pub kernels: Vec<(usize, usize)>,
    pub norm: bool,
    pub identity: bool,
}

impl Default for MbrConfig {
    fn default() -> Self {
        MbrConfig {
            kernels: vec![(5, 5), (3, 3), (1, 1), (1, 3), (3, 1)],
            norm: true,
            identity: true,
        }
    }
}

impl MbrConv {
    pub fn new(
        params: &mut Params,
        bufs: &mut Buffers,
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        cfg: &MbrConfig,
    ) -> Result<Self> {
        if cfg.kernels.is_empty() {
            return Err(Error::config("multi-branch conv needs at least one kernel"));
        }
        let target = cfg
            .kernels
            .iter()
            .map(|&(kh, kw)| kh.max(kw))
            .max()
            .unwrap();
        // Scale branch init by the branch count so the summed output keeps
        // unit-like variance; unscaled sums grow ~sqrt(n) per layer and
        // amplify float noise past the reparameterization tolerance.
        let n_paths = (cfg.kernels.len() + cfg.identity as usize) as f32;
        let mut branches = Vec::new();
        for &k in &cfg.kernels {
            let conv = Conv2dBlock::new(params, rng, in_ch, out_ch, k, 1, 1, true)?;
            params.value_mut(conv.w).mapv_inplace(|v| v / n_paths);
            if let Some(b) = conv.b {
                params.value_mut(b).mapv_inplace(|v| v / n_paths);
            }
            let norm = cfg.norm.then(|| NormLayer::new(params, bufs, out_ch));
            branches.push(MbrBranch { conv, norm });
        }
        let identity = if cfg.identity {
            if in_ch != out_ch {
                return Err(Error::config(format!(
                    "identity shortcut requires in == out channels, got {in_ch} != {out_ch}"
                )));
            }
            Some(cfg.norm.then(|| NormLayer::new(params, bufs, out_ch)))
        } else {
            None
        };
        Ok(MbrConv {
            branches,
            identity,
            target,
            in_ch,
            out_ch,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for branch in &self.branches {
            let mut y = branch.conv.forward(f, x)?;
            if let Some(norm) = &branch.norm {
                y = norm.forward(f, y)?;
            }
            acc = Some(match acc {
                Some(a) => f.tape.add(a, y),
                None => y,
            });
        }
        let mut out = acc.expect("at least one branch");
        if let Some(id_norm) = &self.identity {
            let idv = match id_norm {
                Some(norm) => norm.forward(f, x)?,
                None => x,
            };
            out = f.tape.add(out, idv);
        }
        Ok(out)
    }

    /// Inference-form branch specs (frozen statistics) for merging.
    pub fn to_branch_specs(&self, params: &Params, bufs: &Buffers) -> Result<Vec<ConvBranchSpec>> {
        let mut specs = Vec::new();
        for branch in &self.branches {
            let w = params
                .value(branch.conv.w)
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("conv weights 4d")
                .to_owned();
            let b = branch
                .conv
                .b
                .map(|b| Array1::from_iter(params.value(b).iter().copied()));
            let norm = branch.norm.as_ref().map(|n| n.stats(params, bufs));
            specs.push(ConvBranchSpec::new(w, b, norm)?);
        }
        if let Some(id_norm) = &self.identity {
            let norm = id_norm.as_ref().map(|n| n.stats(params, bufs));
            specs.push(ConvBranchSpec::identity(self.in_ch, norm)?);
        }
        Ok(specs)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for b in &self.branches {
            n += b.conv.param_count();
            if let Some(norm) = &b.norm {
                n += norm.param_count();
            }
        }
        if let Some(Some(norm)) = &self.identity {
            n += norm.param_count();
        }
        n
    }
}
