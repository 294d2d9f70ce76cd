//! A small reverse-mode autodiff tape over `ndarray`.
//!
//! Every forward pass builds a fresh [`Tape`]; ops append nodes holding
//! their value and enough metadata to run the backward pass. Learnable
//! parameters live outside the tape in a [`Params`] store so optimizers can
//! update them between steps; running statistics live in [`Buffers`].
//!
//! Shape mismatches inside tape ops are programming errors and panic;
//! user-facing validation happens in the block and loss layers.

pub mod conv;
pub mod hviop;
pub mod spectral;

use ndarray::{ArrayD, Axis, IxDyn};

/// Dynamic-shape f32 tensor, the tape's currency.
pub type Ax = ArrayD<f32>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Handle to a learnable parameter in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a non-learnable buffer (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BufId(pub usize);

/// Learnable parameters plus their gradient and AdamW state.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Ax,
    pub grad: Ax,
    pub m: Ax,
    pub v: Ax,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn alloc(&mut self, value: Ax) -> ParamId {
        let zeros = Ax::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            value,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalar count.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Ax {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Ax {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }
}

/// Non-learnable state (running statistics), serialized with checkpoints.
#[derive(Debug, Clone, Default)]
pub struct Buffers {
    entries: Vec<Ax>,
}

impl Buffers {
    pub fn new() -> Self {
        Buffers::default()
    }

    pub fn alloc(&mut self, value: Ax) -> BufId {
        self.entries.push(value);
        BufId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: BufId) -> &Ax {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: BufId) -> &mut Ax {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[Ax] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Ax] {
        &mut self.entries
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// a / max(b, floor)
    DivFloor(f32),
    Neg,
    Scale(f32),
    AddScalar(f32),
    /// max(a, floor)^b with broadcastable exponent
    PowElem(f32),
    Abs,
    Sqrt,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Clamp(f32, f32),
    Sum,
    Mean,
    MeanAxes(Vec<usize>),
    Reshape,
    Permute(Vec<usize>),
    Concat(usize),
    SliceAxis {
        axis: usize,
        start: usize,
    },
    Conv2d {
        stride: usize,
        groups: usize,
        has_bias: bool,
    },
    AvgPool(usize),
    GlobalAvgPool,
    Upsample2,
    Softmax(usize),
    MatMul {
        transpose_b: bool,
    },
    AmpSpectrum,
    PhaseTransfer,
    HviToRgb(f32),
}

struct Node {
    value: Ax,
    /// High-precision value for scalar reductions (FD-friendly).
    scalar64: Option<f64>,
    parents: Vec<usize>,
    op: Op,
    param: Option<ParamId>,
}

/// The tape: a flat list of nodes in forward order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast requires equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible dims {a:?} vs {b:?}");
            x.max(y)
        })
        .collect()
}

/// Sums `g` down to `shape` over the axes that were broadcast.
fn reduce_to(g: &Ax, shape: &[usize]) -> Ax {
    let mut out = g.clone();
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn binary_broadcast(a: &Ax, b: &Ax, f: impl Fn(f32, f32) -> f32) -> Ax {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast a");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast b");
    let mut out = Ax::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn gelu_fwd(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Ax, parents: Vec<usize>, op: Op) -> Var {
        // Propagate the high-precision sidecar through scalar arithmetic so
        // composite losses keep f64 fidelity for logging and FD tests.
        let scalar64 = if value.len() == 1 && parents.iter().all(|&p| self.nodes[p].value.len() == 1)
        {
            let p64: Vec<f64> = parents
                .iter()
                .map(|&p| {
                    self.nodes[p]
                        .scalar64
                        .unwrap_or_else(|| self.nodes[p].value.iter().next().copied().unwrap() as f64)
                })
                .collect();
            match (&op, p64.as_slice()) {
                (Op::Add, [a, b]) => Some(a + b),
                (Op::Sub, [a, b]) => Some(a - b),
                (Op::Mul, [a, b]) => Some(a * b),
                (Op::Div, [a, b]) => Some(a / b),
                (Op::Neg, [a]) => Some(-a),
                (Op::Scale(c), [a]) => Some(a * *c as f64),
                (Op::AddScalar(c), [a]) => Some(a + *c as f64),
                (Op::Sqrt, [a]) => Some(a.sqrt()),
                (Op::Abs, [a]) => Some(a.abs()),
                (Op::PowElem(floor), [a, b]) => Some(a.max(*floor as f64).powf(*b)),
                _ => None,
            }
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            scalar64,
            parents,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input node.
    pub fn leaf(&mut self, value: Ax) -> Var {
        self.push(value, vec![], Op::Leaf)
    }

    /// Leaf backed by a learnable parameter; gradients accumulate into it.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        let v = self.push(params.value(id).clone(), vec![], Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Ax {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a node's value.
    pub fn scalar(&self, v: Var) -> f32 {
        *self.nodes[v.0].value.iter().next().expect("non-empty value")
    }

    /// High-precision scalar for reduction nodes, falling back to f32.
    pub fn scalar64(&self, v: Var) -> f64 {
        self.nodes[v.0]
            .scalar64
            .unwrap_or_else(|| self.scalar(v) as f64)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, vec![a.0, b.0], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, vec![a.0, b.0], Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, vec![a.0, b.0], Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, vec![a.0, b.0], Op::Div)
    }

    /// `a / max(b, floor)`, the guarded division used by Retinex heads.
    pub fn div_floor(&mut self, a: Var, b: Var, floor: f32) -> Var {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x / y.max(floor));
        self.push(v, vec![a.0, b.0], Op::DivFloor(floor))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, vec![a.0], Op::Neg)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, vec![a.0], Op::Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, vec![a.0], Op::AddScalar(c))
    }

    /// `max(a, floor)^b`; `b` may broadcast. Gradient w.r.t. `a` vanishes
    /// where the floor is active.
    pub fn pow_elem(&mut self, a: Var, b: Var, floor: f32) -> Var {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x.max(floor).powf(y));
        self.push(v, vec![a.0, b.0], Op::PowElem(floor))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::abs);
        self.push(v, vec![a.0], Op::Abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::sqrt);
        self.push(v, vec![a.0], Op::Sqrt)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, vec![a.0], Op::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_fwd);
        self.push(v, vec![a.0], Op::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, vec![a.0], Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::tanh);
        self.push(v, vec![a.0], Op::Tanh)
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, vec![a.0], Op::Clamp(lo, hi))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let acc: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let v = self.push(
            Ax::from_elem(IxDyn(&[1]), acc as f32),
            vec![a.0],
            Op::Sum,
        );
        self.nodes[v.0].scalar64 = Some(acc);
        v
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let acc: f64 = self.value(a).iter().map(|&x| x as f64).sum::<f64>() / n;
        let v = self.push(
            Ax::from_elem(IxDyn(&[1]), acc as f32),
            vec![a.0],
            Op::Mean,
        );
        self.nodes[v.0].scalar64 = Some(acc);
        v
    }

    /// Mean over `axes`, keeping reduced dims as size 1.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let x = self.value(a);
        let count: usize = axes.iter().map(|&ax| x.shape()[ax]).product();
        let mut v = x.to_owned();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        for &ax in &sorted {
            v = v.sum_axis(Axis(ax));
        }
        let mut asc = axes.to_vec();
        asc.sort_unstable();
        for &ax in &asc {
            v = v.insert_axis(Axis(ax));
        }
        v.mapv_inplace(|t| t / count as f32);
        self.push(v, vec![a.0], Op::MeanAxes(axes.to_vec()))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.push(v, vec![a.0], Op::Reshape)
    }

    /// Axis permutation (transpose), materialized in standard layout.
    pub fn permute(&mut self, a: Var, order: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(order)
            .as_standard_layout()
            .to_owned();
        self.push(v, vec![a.0], Op::Permute(order.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(v, parts.iter().map(|p| p.0).collect(), Op::Concat(axis))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.push(v, vec![a.0], Op::SliceAxis { axis, start })
    }

    /// Channel slice of an `(N,C,H,W)` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.slice_axis(a, 1, start, end)
    }

    // ---- structured ----

    /// Same-padded grouped convolution. `w` is `(cout, cin/groups, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, groups: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality().expect("conv x 4d");
        let wv = self.value(w).view().into_dimensionality().expect("conv w 4d");
        let bv = b.map(|b| {
            self.value(b)
                .view()
                .into_dimensionality()
                .expect("conv bias 1d")
        });
        let y = conv::conv2d_fwd(&xv.to_owned(), &wv.to_owned(), bv.map(|b| b.to_owned()).as_ref(), stride, groups);
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        self.push(
            y.into_dyn(),
            parents,
            Op::Conv2d {
                stride,
                groups,
                has_bias: b.is_some(),
            },
        )
    }

    /// Non-overlapping k x k average pooling; dims must divide by `k`.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert!(h % k == 0 && w % k == 0, "avg_pool dims must divide by k");
        let mut y = Ax::zeros(IxDyn(&[n, c, h / k, w / k]));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..h / k {
                    for ox in 0..w / k {
                        let mut acc = 0f32;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += x[[ni, ci, oy * k + dy, ox * k + dx]];
                            }
                        }
                        y[[ni, ci, oy, ox]] = acc / (k * k) as f32;
                    }
                }
            }
        }
        self.push(y, vec![a.0], Op::AvgPool(k))
    }

    /// Global average pool to `(N,C,1,1)`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut y = Ax::zeros(IxDyn(&[n, c, 1, 1]));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = 0f64;
                for yy in 0..h {
                    for xx in 0..w {
                        acc += x[[ni, ci, yy, xx]] as f64;
                    }
                }
                y[[ni, ci, 0, 0]] = (acc / (h * w) as f64) as f32;
            }
        }
        self.push(y, vec![a.0], Op::GlobalAvgPool)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut y = Ax::zeros(IxDyn(&[n, c, h * 2, w * 2]));
        for ni in 0..n {
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let v = x[[ni, ci, yy, xx]];
                        y[[ni, ci, 2 * yy, 2 * xx]] = v;
                        y[[ni, ci, 2 * yy, 2 * xx + 1]] = v;
                        y[[ni, ci, 2 * yy + 1, 2 * xx]] = v;
                        y[[ni, ci, 2 * yy + 1, 2 * xx + 1]] = v;
                    }
                }
            }
        }
        self.push(y, vec![a.0], Op::Upsample2)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let maxs = x.fold_axis(Axis(axis), f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut y = x.to_owned();
        let maxs_keep = maxs.insert_axis(Axis(axis));
        y.zip_mut_with(
            &maxs_keep.broadcast(x.raw_dim()).expect("softmax max broadcast"),
            |v, &m| *v = (*v - m).exp(),
        );
        let sums = y.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        y.zip_mut_with(
            &sums.broadcast(x.raw_dim()).expect("softmax sum broadcast"),
            |v, &s| *v /= s,
        );
        self.push(y, vec![a.0], Op::Softmax(axis))
    }

    /// Batched matmul over 3-D operands: `(B,M,K) . (B,K,N)`, or
    /// `(B,N,K)` for `b` when `transpose_b` is set.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = if transpose_b { bv.shape()[1] } else { bv.shape()[2] };
        let mut y = Ax::zeros(IxDyn(&[bt, m, n]));
        for i in 0..bt {
            let a2 = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let b2 = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut o2 = y
                .index_axis_mut(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            if transpose_b {
                ndarray::linalg::general_mat_mul(1.0, &a2, &b2.t(), 0.0, &mut o2);
            } else {
                ndarray::linalg::general_mat_mul(1.0, &a2, &b2, 0.0, &mut o2);
            }
        }
        let _ = k;
        self.push(y, vec![a.0, b.0], Op::MatMul { transpose_b })
    }

    /// Per-channel 2-D FFT amplitude of an `(N,C,H,W)` tensor.
    pub fn amp_spectrum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let mut y = Ax::zeros(x.raw_dim());
        for ni in 0..n {
            for ci in 0..c {
                let plane = x
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                let amp = spectral::amplitude(&plane);
                y.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .assign(&amp);
            }
        }
        self.push(y, vec![a.0], Op::AmpSpectrum)
    }

    /// Per-channel recombination of `a`'s FFT amplitude with `b`'s phase.
    pub fn phase_transfer(&mut self, a: Var, b: Var) -> Var {
        let xa = self.value(a);
        let xb = self.value(b);
        assert_eq!(xa.shape(), xb.shape(), "phase_transfer shape mismatch");
        let (n, c) = (xa.shape()[0], xa.shape()[1]);
        let mut y = Ax::zeros(xa.raw_dim());
        for ni in 0..n {
            for ci in 0..c {
                let pa = xa
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                let pb = xb
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                let out = spectral::phase_transfer_fwd(&pa, &pb);
                y.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .assign(&out);
            }
        }
        self.push(y, vec![a.0, b.0], Op::PhaseTransfer)
    }

    /// Differentiable HVI planes -> RGB conversion with fixed collapse `k`.
    pub fn hvi_to_rgb(&mut self, a: Var, k: f32) -> Var {
        let x = self
            .value(a)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("hvi planes 4d")
            .to_owned();
        let y = hviop::hvi_to_rgb_fwd(&x, k);
        self.push(y.into_dyn(), vec![a.0], Op::HviToRgb(k))
    }

    // ---- backward ----

    /// Reverse pass from `root`; returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Vec<Option<Ax>> {
        let mut grads: Vec<Option<Ax>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Ax::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        grads
    }

    /// Adds the gradients of param-backed leaves into `params`.
    pub fn accumulate_param_grads(&self, grads: &[Option<Ax>], params: &mut Params) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads[i].as_ref()) {
                params.entries[id.0].grad.zip_mut_with(g, |a, b| *a += b);
            }
        }
    }

    fn accum(grads: &mut [Option<Ax>], idx: usize, g: Ax) {
        match &mut grads[idx] {
            Some(existing) => existing.zip_mut_with(&g, |a, b| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, gy: &Ax, grads: &mut Vec<Option<Ax>>) {
        let node = &self.nodes[i];
        let p = &node.parents;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                let ash = self.nodes[p[0]].value.shape().to_vec();
                let bsh = self.nodes[p[1]].value.shape().to_vec();
                Self::accum(grads, p[0], reduce_to(gy, &ash));
                Self::accum(grads, p[1], reduce_to(gy, &bsh));
            }
            Op::Sub => {
                let ash = self.nodes[p[0]].value.shape().to_vec();
                let bsh = self.nodes[p[1]].value.shape().to_vec();
                Self::accum(grads, p[0], reduce_to(gy, &ash));
                Self::accum(grads, p[1], reduce_to(&gy.mapv(|v| -v), &bsh));
            }
            Op::Mul => {
                let a = &self.nodes[p[0]].value;
                let b = &self.nodes[p[1]].value;
                let ga = binary_broadcast(gy, b, |g, y| g * y);
                let gb = binary_broadcast(gy, a, |g, x| g * x);
                Self::accum(grads, p[0], reduce_to(&ga, a.shape()));
                Self::accum(grads, p[1], reduce_to(&gb, b.shape()));
            }
            Op::Div => {
                let a = &self.nodes[p[0]].value;
                let b = &self.nodes[p[1]].value;
                let ga = binary_broadcast(gy, b, |g, y| g / y);
                let gb_full = {
                    let t = binary_broadcast(a, b, |x, y| -x / (y * y));
                    binary_broadcast(gy, &t, |g, t| g * t)
                };
                Self::accum(grads, p[0], reduce_to(&ga, a.shape()));
                Self::accum(grads, p[1], reduce_to(&gb_full, b.shape()));
            }
            Op::DivFloor(floor) => {
                let a = &self.nodes[p[0]].value;
                let b = &self.nodes[p[1]].value;
                let fl = *floor;
                let ga = binary_broadcast(gy, b, |g, y| g / y.max(fl));
                let gb_full = {
                    let t = binary_broadcast(a, b, |x, y| {
                        if y > fl {
                            -x / (y * y)
                        } else {
                            0.0
                        }
                    });
                    binary_broadcast(gy, &t, |g, t| g * t)
                };
                Self::accum(grads, p[0], reduce_to(&ga, a.shape()));
                Self::accum(grads, p[1], reduce_to(&gb_full, b.shape()));
            }
            Op::Neg => Self::accum(grads, p[0], gy.mapv(|v| -v)),
            Op::Scale(c) => Self::accum(grads, p[0], gy.mapv(|v| v * c)),
            Op::AddScalar(_) => Self::accum(grads, p[0], gy.clone()),
            Op::PowElem(floor) => {
                let a = &self.nodes[p[0]].value;
                let b = &self.nodes[p[1]].value;
                let fl = *floor;
                let da_full = {
                    let t = binary_broadcast(a, b, |x, y| {
                        if x > fl {
                            y * x.powf(y - 1.0)
                        } else {
                            0.0
                        }
                    });
                    binary_broadcast(gy, &t, |g, t| g * t)
                };
                let db_full = {
                    let t = binary_broadcast(a, b, |x, y| {
                        let xf = x.max(fl);
                        xf.powf(y) * xf.ln()
                    });
                    binary_broadcast(gy, &t, |g, t| g * t)
                };
                Self::accum(grads, p[0], reduce_to(&da_full, a.shape()));
                Self::accum(grads, p[1], reduce_to(&db_full, b.shape()));
            }
            Op::Abs => {
                let a = &self.nodes[p[0]].value;
                let mut g = gy.clone();
                g.zip_mut_with(a, |gv, &x| *gv *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                Self::accum(grads, p[0], g);
            }
            Op::Sqrt => {
                let y = &node.value;
                let mut g = gy.clone();
                g.zip_mut_with(y, |gv, &yv| *gv *= 0.5 / yv.max(1e-12));
                Self::accum(grads, p[0], g);
            }
            Op::Relu => {
                let a = &self.nodes[p[0]].value;
                let mut g = gy.clone();
                g.zip_mut_with(a, |gv, &x| *gv *= if x > 0.0 { 1.0 } else { 0.0 });
                Self::accum(grads, p[0], g);
            }
            Op::Gelu => {
                let a = &self.nodes[p[0]].value;
                let mut g = gy.clone();
                g.zip_mut_with(a, |gv, &x| *gv *= gelu_grad(x));
                Self::accum(grads, p[0], g);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let mut g = gy.clone();
                g.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                Self::accum(grads, p[0], g);
            }
            Op::Tanh => {
                let y = &node.value;
                let mut g = gy.clone();
                g.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                Self::accum(grads, p[0], g);
            }
            Op::Clamp(lo, hi) => {
                let a = &self.nodes[p[0]].value;
                let (lo, hi) = (*lo, *hi);
                let mut g = gy.clone();
                g.zip_mut_with(a, |gv, &x| *gv *= if x > lo && x < hi { 1.0 } else { 0.0 });
                Self::accum(grads, p[0], g);
            }
            Op::Sum => {
                let a = &self.nodes[p[0]].value;
                let s = gy.iter().next().copied().unwrap();
                Self::accum(grads, p[0], Ax::from_elem(a.raw_dim(), s));
            }
            Op::Mean => {
                let a = &self.nodes[p[0]].value;
                let s = gy.iter().next().copied().unwrap() / a.len() as f32;
                Self::accum(grads, p[0], Ax::from_elem(a.raw_dim(), s));
            }
            Op::MeanAxes(axes) => {
                let a = &self.nodes[p[0]].value;
                let count: usize = axes.iter().map(|&ax| a.shape()[ax]).product();
                let g = gy
                    .broadcast(a.raw_dim())
                    .expect("mean_axes broadcast")
                    .mapv(|v| v / count as f32);
                Self::accum(grads, p[0], g);
            }
            Op::Reshape => {
                let a = &self.nodes[p[0]].value;
                let g = gy.to_shape(a.raw_dim()).expect("reshape grad").to_owned();
                Self::accum(grads, p[0], g);
            }
            Op::Permute(order) => {
                let mut inverse = vec![0usize; order.len()];
                for (i, &o) in order.iter().enumerate() {
                    inverse[o] = i;
                }
                let g = gy
                    .view()
                    .permuted_axes(inverse.as_slice())
                    .as_standard_layout()
                    .to_owned();
                Self::accum(grads, p[0], g);
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                for &parent in p {
                    let len = self.nodes[parent].value.shape()[*axis];
                    let g = gy
                        .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    Self::accum(grads, parent, g);
                    offset += len;
                }
            }
            Op::SliceAxis { axis, start } => {
                let a = &self.nodes[p[0]].value;
                let mut g = Ax::zeros(a.raw_dim());
                let len = node.value.shape()[*axis];
                g.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                    .assign(gy);
                Self::accum(grads, p[0], g);
            }
            Op::Conv2d {
                stride,
                groups,
                has_bias,
            } => {
                let x = self.nodes[p[0]]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned();
                let w = self.nodes[p[1]]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned();
                let dy4 = gy
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned();
                let (dx, dw, db) = conv::conv2d_bwd(&x, &w, &dy4, *stride, *groups, true);
                Self::accum(grads, p[0], dx.unwrap().into_dyn());
                Self::accum(grads, p[1], dw.into_dyn());
                if *has_bias {
                    Self::accum(grads, p[2], db.into_dyn());
                }
            }
            Op::AvgPool(k) => {
                let a = &self.nodes[p[0]].value;
                let k = *k;
                let mut g = Ax::zeros(a.raw_dim());
                let (n, c, ho, wo) = (
                    gy.shape()[0],
                    gy.shape()[1],
                    gy.shape()[2],
                    gy.shape()[3],
                );
                let inv = 1.0 / (k * k) as f32;
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = gy[[ni, ci, oy, ox]] * inv;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        g[[ni, ci, oy * k + dy, ox * k + dx]] = v;
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accum(grads, p[0], g);
            }
            Op::GlobalAvgPool => {
                let a = &self.nodes[p[0]].value;
                let (h, w) = (a.shape()[2], a.shape()[3]);
                let g = gy
                    .broadcast(a.raw_dim())
                    .expect("gap broadcast")
                    .mapv(|v| v / (h * w) as f32);
                Self::accum(grads, p[0], g);
            }
            Op::Upsample2 => {
                let a = &self.nodes[p[0]].value;
                let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
                let mut g = Ax::zeros(a.raw_dim());
                for ni in 0..n {
                    for ci in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                g[[ni, ci, yy, xx]] = gy[[ni, ci, 2 * yy, 2 * xx]]
                                    + gy[[ni, ci, 2 * yy, 2 * xx + 1]]
                                    + gy[[ni, ci, 2 * yy + 1, 2 * xx]]
                                    + gy[[ni, ci, 2 * yy + 1, 2 * xx + 1]];
                            }
                        }
                    }
                }
                Self::accum(grads, p[0], g);
            }
            Op::Softmax(axis) => {
                let y = &node.value;
                let prod = binary_broadcast(gy, y, |g, v| g * v);
                let dots = prod.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let dots_b = dots.broadcast(y.raw_dim()).expect("softmax bwd broadcast");
                let mut g = Ax::zeros(y.raw_dim());
                ndarray::Zip::from(&mut g)
                    .and(gy)
                    .and(y)
                    .and(&dots_b)
                    .for_each(|o, &gv, &yv, &d| *o = yv * (gv - d));
                Self::accum(grads, p[0], g);
            }
            Op::MatMul { transpose_b } => {
                let a = &self.nodes[p[0]].value;
                let b = &self.nodes[p[1]].value;
                let bt = a.shape()[0];
                let mut ga = Ax::zeros(a.raw_dim());
                let mut gb = Ax::zeros(b.raw_dim());
                for i in 0..bt {
                    let a2 = a.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let b2 = b.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let g2 = gy.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut ga2 = ga.index_axis_mut(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut gb2 = gb.index_axis_mut(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    if *transpose_b {
                        // y = a . b^T : ga = g . b ; gb = g^T . a
                        ndarray::linalg::general_mat_mul(1.0, &g2, &b2, 0.0, &mut ga2);
                        ndarray::linalg::general_mat_mul(1.0, &g2.t(), &a2, 0.0, &mut gb2);
                    } else {
                        // y = a . b : ga = g . b^T ; gb = a^T . g
                        ndarray::linalg::general_mat_mul(1.0, &g2, &b2.t(), 0.0, &mut ga2);
                        ndarray::linalg::general_mat_mul(1.0, &a2.t(), &g2, 0.0, &mut gb2);
                    }
                }
                Self::accum(grads, p[0], ga);
                Self::accum(grads, p[1], gb);
            }
            Op::AmpSpectrum => {
                let x = &self.nodes[p[0]].value;
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let mut g = Ax::zeros(x.raw_dim());
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = x
                            .index_axis(Axis(0), ni)
                            .index_axis(Axis(0), ci)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let dplane = gy
                            .index_axis(Axis(0), ni)
                            .index_axis(Axis(0), ci)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let dx = spectral::amplitude_bwd(&plane, &dplane, 1e-8);
                        g.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .assign(&dx);
                    }
                }
                Self::accum(grads, p[0], g);
            }
            Op::PhaseTransfer => {
                let xa = &self.nodes[p[0]].value;
                let xb = &self.nodes[p[1]].value;
                let (n, c) = (xa.shape()[0], xa.shape()[1]);
                let mut ga = Ax::zeros(xa.raw_dim());
                let mut gb = Ax::zeros(xb.raw_dim());
                for ni in 0..n {
                    for ci in 0..c {
                        let pa = xa
                            .index_axis(Axis(0), ni)
                            .index_axis(Axis(0), ci)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let pb = xb
                            .index_axis(Axis(0), ni)
                            .index_axis(Axis(0), ci)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let dplane = gy
                            .index_axis(Axis(0), ni)
                            .index_axis(Axis(0), ci)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let (da, db) = spectral::phase_transfer_bwd(&pa, &pb, &dplane);
                        ga.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .assign(&da);
                        gb.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .assign(&db);
                    }
                }
                Self::accum(grads, p[0], ga);
                Self::accum(grads, p[1], gb);
            }
            Op::HviToRgb(k) => {
                let x = self.nodes[p[0]]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned();
                let dy4 = gy
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned();
                let dx = hviop::hvi_to_rgb_bwd(&x, &dy4, *k);
                Self::accum(grads, p[0], dx.into_dyn());
            }
        }
    }

    // ---- memory management for inference ----

    /// Position marker for [`Tape::free_since`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops the stored values of nodes in `[from, len)` except `keep`.
    ///
    /// Only valid when no backward pass will run over the freed range
    /// (inference). Freed values are replaced by empty arrays.
    pub fn free_since(&mut self, from: usize, keep: &[Var]) {
        for i in from..self.nodes.len() {
            if keep.iter().any(|v| v.0 == i) {
                continue;
            }
            self.nodes[i].value = Ax::zeros(IxDyn(&[0]));
        }
    }

    /// Drops one node's stored value (inference-only, like [`Tape::free_since`]).
    pub fn free_value(&mut self, v: Var) {
        self.nodes[v.0].value = Ax::zeros(IxDyn(&[0]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn randn(shape: &[usize], seed: u64) -> Ax {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ax::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0f32))
    }

    /// FD check of d(weighted sum of f(x)) / dx at a few coordinates.
    fn check_grad(
        shape: &[usize],
        seed: u64,
        f: impl Fn(&mut Tape, Var) -> Var,
        positive_input: bool,
    ) {
        let mut x = randn(shape, seed);
        if positive_input {
            x.mapv_inplace(|v| v.abs() + 0.1);
        }

        // Loss = sum(f(x) * fixed random weights), so every output coordinate
        // contributes a distinct gradient signal.
        let run = |x: &Ax| -> (f64, Option<Ax>) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = f(&mut t, xv);
            let yshape = t.shape(y).to_vec();
            let wy = t.leaf(randn(&yshape, seed + 2000));
            let prod = t.mul(y, wy);
            let loss = t.sum(prod);
            let l = t.scalar64(loss);
            let grads = t.backward(loss);
            (l, grads[xv.0].clone())
        };
        let (_, gx) = run(&x);
        let gx = gx.expect("input grad");
        let h = 1e-3f32;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 7);
        for _ in 0..6 {
            let idx: Vec<usize> = shape.iter().map(|&s| rng.gen_range(0..s)).collect();
            let mut xp = x.clone();
            xp[IxDyn(&idx)] += h;
            let mut xm = x.clone();
            xm[IxDyn(&idx)] -= h;
            let (lp, _) = run(&xp);
            let (lm, _) = run(&xm);
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = gx[IxDyn(&idx)] as f64;
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / denom < 2e-2,
                "grad mismatch at {idx:?}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        check_grad(&[2, 3, 4, 4], 1, |t, x| t.relu(x), false);
        check_grad(&[2, 3, 4, 4], 2, |t, x| t.gelu(x), false);
        check_grad(&[2, 3, 4, 4], 3, |t, x| t.sigmoid(x), false);
        check_grad(&[2, 3, 4, 4], 4, |t, x| t.tanh(x), false);
        check_grad(&[2, 3, 4, 4], 5, |t, x| t.abs(x), false);
        check_grad(&[2, 3, 4, 4], 6, |t, x| t.sqrt(x), true);
        check_grad(&[2, 3, 4, 4], 7, |t, x| {
            let y = t.scale(x, 2.5);
            t.add_scalar(y, -0.3)
        }, false);
    }

    #[test]
    fn binary_grads() {
        check_grad(&[1, 3, 4, 4], 11, |t, x| {
            let b = t.leaf(randn(&[1, 3, 4, 4], 99));
            t.mul(x, b)
        }, false);
        check_grad(&[1, 3, 4, 4], 12, |t, x| {
            let b = t.leaf(randn(&[1, 3, 1, 1], 98).mapv(|v| v.abs() + 0.5));
            t.div(x, b)
        }, false);
        check_grad(&[1, 3, 4, 4], 13, |t, x| {
            let b = t.leaf(randn(&[1, 1, 4, 4], 97).mapv(|v| v.abs() + 0.5));
            t.div_floor(x, b, 0.1)
        }, false);
        check_grad(&[1, 3, 4, 4], 14, |t, x| {
            let g = t.leaf(randn(&[1, 1, 4, 4], 96).mapv(|v| v.abs() + 0.5));
            t.pow_elem(x, g, 1e-6)
        }, true);
    }

    #[test]
    fn reduction_and_shape_grads() {
        check_grad(&[2, 4, 4, 4], 21, |t, x| t.mean_axes(x, &[0, 2, 3]), false);
        check_grad(&[2, 4, 4, 4], 22, |t, x| t.reshape(x, &[2, 2, 2, 16]), false);
        check_grad(&[2, 3, 4, 5], 25, |t, x| t.permute(x, &[0, 2, 3, 1]), false);
        check_grad(&[1, 6, 4, 4], 23, |t, x| t.slice_channels(x, 1, 4), false);
        check_grad(&[1, 2, 4, 4], 24, |t, x| {
            let o = t.leaf(randn(&[1, 3, 4, 4], 95));
            t.concat(&[x, o], 1)
        }, false);
    }

    #[test]
    fn structured_grads() {
        check_grad(&[1, 3, 6, 6], 31, |t, x| {
            let w = t.leaf(randn(&[4, 3, 3, 3], 94));
            let b = t.leaf(randn(&[4], 93));
            t.conv2d(x, w, Some(b), 1, 1)
        }, false);
        check_grad(&[1, 4, 6, 6], 32, |t, x| {
            let w = t.leaf(randn(&[4, 1, 3, 3], 92));
            t.conv2d(x, w, None, 1, 4)
        }, false);
        check_grad(&[1, 3, 6, 6], 33, |t, x| {
            let w = t.leaf(randn(&[5, 3, 3, 3], 91));
            t.conv2d(x, w, None, 2, 1)
        }, false);
        check_grad(&[1, 2, 4, 4], 34, |t, x| t.avg_pool(x, 2), false);
        check_grad(&[1, 2, 4, 4], 35, |t, x| t.global_avg_pool(x), false);
        check_grad(&[1, 2, 3, 3], 36, |t, x| t.upsample2(x), false);
        check_grad(&[2, 5, 4, 1], 37, |t, x| t.softmax(x, 1), false);
    }

    #[test]
    fn matmul_grads() {
        check_grad(&[2, 3, 4], 41, |t, x| {
            let b = t.leaf(randn(&[2, 4, 5], 90));
            t.matmul(x, b, false)
        }, false);
        check_grad(&[2, 3, 4], 42, |t, x| {
            let b = t.leaf(randn(&[2, 5, 4], 89));
            t.matmul(x, b, true)
        }, false);
    }

    #[test]
    fn spectral_grads() {
        check_grad(&[1, 2, 6, 6], 51, |t, x| t.amp_spectrum(x), false);
        check_grad(&[1, 2, 6, 6], 52, |t, x| {
            let b = t.leaf(randn(&[1, 2, 6, 6], 88));
            t.phase_transfer(x, b)
        }, false);
        check_grad(&[1, 2, 6, 6], 53, |t, x| {
            let a = t.leaf(randn(&[1, 2, 6, 6], 87));
            t.phase_transfer(a, x)
        }, false);
    }

    #[test]
    fn param_grads_accumulate() {
        let mut params = Params::new();
        let w = params.alloc(randn(&[4, 3, 3, 3], 61));
        let mut t = Tape::new();
        let x = t.leaf(randn(&[1, 3, 5, 5], 62));
        let wv = t.param(&params, w);
        let y = t.conv2d(x, wv, None, 1, 1);
        let loss = t.sum(y);
        let grads = t.backward(loss);
        t.accumulate_param_grads(&grads, &mut params);
        let gnorm: f32 = params.entry(w).grad.iter().map(|v| v.abs()).sum();
        assert!(gnorm > 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = randn(&[2, 7, 5, 1], 71);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = t.softmax(xv, 1);
        let shifted = t.add_scalar(xv, 3.7);
        let y2 = t.softmax(shifted, 1);
        let yv = t.value(y).clone();
        for lane in yv.axis_iter(Axis(0)) {
            for col in 0..5 {
                let s: f32 = (0..7).map(|i| lane[[i, col, 0]]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let diff = binary_broadcast(&yv, t.value(y2), |a, b| (a - b).abs());
        let max = diff.iter().fold(0f32, |m, &v| m.max(v));
        assert!(max < 1e-6, "softmax must be shift invariant: {max}");
    }

    #[test]
    fn mean_uses_f64_accumulation() {
        let x = Ax::from_elem(IxDyn(&[1, 1, 100, 100]), 0.1f32);
        let mut t = Tape::new();
        let xv = t.leaf(x);
        let m = t.mean(xv);
        assert!((t.scalar64(m) - 0.1).abs() < 1e-7);
    }

    #[test]
    fn free_since_drops_intermediates() {
        let mut t = Tape::new();
        let x = t.leaf(randn(&[1, 2, 8, 8], 81));
        let mark = t.mark();
        let a = t.relu(x);
        let b = t.scale(a, 2.0);
        t.free_since(mark, &[b]);
        assert_eq!(t.value(a).len(), 0);
        assert_eq!(t.value(b).len(), 128);
    }
}
