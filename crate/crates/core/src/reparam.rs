//! Structural reparameterization: fold normalization statistics into
//! convolution weights and merge parallel branches into one convolution
//! with verified forward equivalence.
//!
//! Only stride-1, same-padded branches are mergeable; the linear-sum
//! identity the merge relies on does not survive stride or padding
//! mismatches.

use ndarray::{Array1, Array4};

use crate::autodiff::conv::conv2d_naive;
use crate::error::{Error, Result};

/// Frozen normalization statistics of one convolution branch.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Array1<f32>,
    pub var: Array1<f32>,
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
}

impl NormStats {
    fn validate(&self, out_ch: usize) -> Result<()> {
        for arr in [&self.mean, &self.var, &self.gamma, &self.beta] {
            if arr.len() != out_ch {
                return Err(Error::config(format!(
                    "norm stats length {} != out channels {out_ch}",
                    arr.len()
                )));
            }
        }
        if self.var.iter().any(|&v| v < 0.0) {
            return Err(Error::config("norm variance must be >= 0"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("norm eps must be > 0"));
        }
        Ok(())
    }
}

/// One convolution branch: weights, optional bias, optional norm.
#[derive(Debug, Clone)]
pub struct ConvBranchSpec {
    /// `(out, in, kh, kw)` with odd kernel dims.
    pub weights: Array4<f32>,
    pub bias: Option<Array1<f32>>,
    pub norm: Option<NormStats>,
}

/// A merged single convolution: weights plus bias.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weights: Array4<f32>,
    pub bias: Array1<f32>,
}

impl ConvBranchSpec {
    pub fn new(weights: Array4<f32>, bias: Option<Array1<f32>>, norm: Option<NormStats>) -> Result<Self> {
        let spec = ConvBranchSpec { weights, bias, norm };
        spec.validate()?;
        Ok(spec)
    }

    /// Identity shortcut as a 1x1 branch with identity-matrix weights.
    pub fn identity(channels: usize, norm: Option<NormStats>) -> Result<Self> {
        let mut w = Array4::<f32>::zeros((channels, channels, 1, 1));
        for c in 0..channels {
            w[[c, c, 0, 0]] = 1.0;
        }
        ConvBranchSpec::new(w, None, norm)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!("branch kernel {kh}x{kw} must be odd")));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels() {
                return Err(Error::config("bias length != out channels"));
            }
        }
        if let Some(n) = &self.norm {
            n.validate(self.out_channels())?;
        }
        if self.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("branch weights must be finite"));
        }
        Ok(())
    }
}

/// Folds a branch's normalization into its weights and bias:
/// `W' = (gamma / sqrt(var + eps)) * W`, `b' = beta + (gamma / sqrt(var + eps)) * (b - mean)`.
pub fn fold_norm(branch: &ConvBranchSpec) -> ConvBranchSpec {
    let Some(norm) = &branch.norm else {
        return branch.clone();
    };
    let out_ch = branch.out_channels();
    let mut weights = branch.weights.clone();
    let mut bias = Array1::<f32>::zeros(out_ch);
    for c in 0..out_ch {
        let scale = norm.gamma[c] / (norm.var[c] + norm.eps).sqrt();
        weights
            .index_axis_mut(ndarray::Axis(0), c)
            .mapv_inplace(|v| v * scale);
        let b = branch.bias.as_ref().map(|b| b[c]).unwrap_or(0.0);
        bias[c] = norm.beta[c] + scale * (b - norm.mean[c]);
    }
    ConvBranchSpec {
        weights,
        bias: Some(bias),
        norm: None,
    }
}

/// Centers a `(out, in, kh, kw)` kernel inside a `target x target` grid.
pub fn pad_kernel(weights: &Array4<f32>, target: usize) -> Result<Array4<f32>> {
    let (out, inc, kh, kw) = (
        weights.shape()[0],
        weights.shape()[1],
        weights.shape()[2],
        weights.shape()[3],
    );
    if target % 2 == 0 {
        return Err(Error::config(format!("target kernel {target} must be odd")));
    }
    if kh > target || kw > target {
        return Err(Error::config(format!(
            "kernel {kh}x{kw} larger than target {target}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::config(format!("kernel {kh}x{kw} must be odd for centering")));
    }
    let mut out_w = Array4::<f32>::zeros((out, inc, target, target));
    let (oy, ox) = ((target - kh) / 2, (target - kw) / 2);
    out_w
        .slice_mut(ndarray::s![.., .., oy..oy + kh, ox..ox + kw])
        .assign(weights);
    Ok(out_w)
}

fn check_branch_compat(branches: &[ConvBranchSpec]) -> Result<(usize, usize)> {
    let Some(first) = branches.first() else {
        return Err(Error::config("merge_branches needs at least one branch"));
    };
    let (out_ch, in_ch) = (first.out_channels(), first.in_channels());
    for b in branches {
        if b.out_channels() != out_ch || b.in_channels() != in_ch {
            return Err(Error::config(format!(
                "branch channels {}x{} do not match {}x{}",
                b.out_channels(),
                b.in_channels(),
                out_ch,
                in_ch
            )));
        }
    }
    Ok((out_ch, in_ch))
}

/// Folds norms, pads every kernel to `target` and sums weights and biases.
///
/// The resulting single convolution's forward equals the sum of the branch
/// forwards on arbitrary inputs (stride 1, same padding).
pub fn merge_branches(branches: &[ConvBranchSpec], target: usize) -> Result<ConvParams> {
    let (out_ch, in_ch) = check_branch_compat(branches)?;
    let mut weights = Array4::<f32>::zeros((out_ch, in_ch, target, target));
    let mut bias = Array1::<f32>::zeros(out_ch);
    for branch in branches {
        let folded = fold_norm(branch);
        let padded = pad_kernel(&folded.weights, target)?;
        weights += &padded;
        if let Some(b) = &folded.bias {
            bias += b;
        }
    }
    Ok(ConvParams { weights, bias })
}

/// Reference multi-branch forward: each branch runs conv (+ its stored-stat
/// norm), outputs are summed. This is the oracle [`merge_branches`] is
/// checked against.
pub fn multi_branch_forward(x: &Array4<f32>, branches: &[ConvBranchSpec]) -> Result<Array4<f32>> {
    check_branch_compat(branches)?;
    let mut acc: Option<Array4<f32>> = None;
    for branch in branches {
        let mut y = conv2d_naive(x, &branch.weights, branch.bias.as_ref(), 1, 1);
        if let Some(norm) = &branch.norm {
            for c in 0..branch.out_channels() {
                let scale = norm.gamma[c] / (norm.var[c] + norm.eps).sqrt();
                let shift = norm.beta[c] - scale * norm.mean[c];
                y.index_axis_mut(ndarray::Axis(1), c)
                    .mapv_inplace(|v| v * scale + shift);
            }
        }
        acc = Some(match acc {
            Some(mut a) => {
                a += &y;
                a
            }
            None => y,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Forward of a merged [`ConvParams`] (stride 1, same padding).
pub fn conv_params_forward(x: &Array4<f32>, params: &ConvParams) -> Array4<f32> {
    conv2d_naive(x, &params.weights, Some(&params.bias), 1, 1)
}

/// Replaces every reparam-marked multi-branch node with a merged single
/// convolution. Parameters of other nodes are copied unchanged; the result
/// produces the same outputs within floating tolerance and has strictly
/// fewer parameters whenever a marked node had more than one branch.
///
/// A node marked `reparam` whose kind cannot merge is a conversion error
/// naming the node.
pub fn reparameterize_model(model: &crate::graph::Model) -> Result<crate::graph::Model> {
    use crate::graph::{Block, BlockKind, Model};

    let mut new_spec = model.spec.clone();
    let mut merged: std::collections::BTreeMap<usize, ConvParams> = Default::default();
    for (i, node) in model.spec.nodes.iter().enumerate() {
        if !node.reparam {
            continue;
        }
        match (&node.kind, &model.blocks()[i]) {
            (BlockKind::Mbr { in_ch, out_ch, .. }, Block::Mbr(mbr)) => {
                let specs = mbr.to_branch_specs(&model.params, &model.buffers)?;
                let params = merge_branches(&specs, mbr.target)?;
                merged.insert(i, params);
                new_spec.nodes[i].kind = BlockKind::Conv {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kernel: (mbr.target, mbr.target),
                    stride: 1,
                    groups: 1,
                    bias: true,
                };
                new_spec.nodes[i].reparam = false;
                new_spec.nodes[i].zero_init = false;
            }
            _ => {
                return Err(Error::Conversion(format!(
                    "node '{}' is marked for reparameterization but is not a multi-branch convolution",
                    node.name
                )));
            }
        }
    }

    let mut out = Model::instantiate(&new_spec, 0)?;
    for i in 0..model.spec.nodes.len() {
        if let Some(cp) = merged.get(&i) {
            let ids = out.node_params()[i].clone();
            debug_assert_eq!(ids.len(), 2, "merged conv has weights + bias");
            *out.params.value_mut(ids[0]) = cp.weights.clone().into_dyn();
            *out.params.value_mut(ids[1]) = cp.bias.clone().into_dyn();
        } else {
            let old_p = model.node_params()[i].clone();
            let new_p = out.node_params()[i].clone();
            debug_assert_eq!(old_p.len(), new_p.len());
            for (o, n) in old_p.iter().zip(&new_p) {
                *out.params.value_mut(*n) = model.params.value(*o).clone();
            }
            let old_b = model.node_buffers()[i].clone();
            let new_b = out.node_buffers()[i].clone();
            for (o, n) in old_b.iter().zip(&new_b) {
                *out.buffers.value_mut(*n) = model.buffers.value(*o).clone();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn rand_norm(out_ch: usize, seed: u64) -> NormStats {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        NormStats {
            mean: Array1::from_shape_simple_fn(out_ch, || rng.gen_range(-0.5..0.5)),
            var: Array1::from_shape_simple_fn(out_ch, || rng.gen_range(0.1..2.0)),
            gamma: Array1::from_shape_simple_fn(out_ch, || rng.gen_range(0.5..1.5)),
            beta: Array1::from_shape_simple_fn(out_ch, || rng.gen_range(-0.5..0.5)),
            eps: 1e-5,
        }
    }

    fn max_rel_err(a: &Array4<f32>, b: &Array4<f32>) -> f32 {
        let scale = a.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-3);
        (a - b).iter().fold(0f32, |m, d| m.max(d.abs())) / scale
    }

    #[test]
    fn fold_identity_norm_keeps_weights() {
        let eps = 1e-5f32;
        let w = randn4((4, 3, 3, 3), 1);
        let branch = ConvBranchSpec::new(
            w.clone(),
            None,
            Some(NormStats {
                mean: Array1::zeros(4),
                var: Array1::from_elem(4, 1.0 - eps),
                gamma: Array1::from_elem(4, 1.0),
                beta: Array1::zeros(4),
                eps,
            }),
        )
        .unwrap();
        let folded = fold_norm(&branch);
        let diff = (&folded.weights - &w).iter().fold(0f32, |m, d| m.max(d.abs()));
        assert!(diff < 1e-6);
        assert!(folded.bias.unwrap().iter().all(|&b| b.abs() < 1e-6));
    }

    #[test]
    fn fold_zero_gamma_zeroes_weights() {
        let branch = ConvBranchSpec::new(
            randn4((2, 2, 3, 3), 2),
            Some(Array1::from_elem(2, 0.7)),
            Some(NormStats {
                mean: Array1::from_elem(2, 0.3),
                var: Array1::from_elem(2, 0.9),
                gamma: Array1::zeros(2),
                beta: Array1::from_elem(2, 0.25),
                eps: 1e-5,
            }),
        )
        .unwrap();
        let folded = fold_norm(&branch);
        assert!(folded.weights.iter().all(|&w| w == 0.0));
        assert!(folded.bias.unwrap().iter().all(|&b| (b - 0.25).abs() < 1e-7));
    }

    #[test]
    fn fold_norm_is_forward_equivalent() {
        let branch = ConvBranchSpec::new(
            randn4((5, 3, 3, 3), 3),
            Some(Array1::from_shape_simple_fn(5, || 0.1)),
            Some(rand_norm(5, 4)),
        )
        .unwrap();
        let folded = fold_norm(&branch);
        for seed in 0..50 {
            let x = randn4((1, 3, 7, 7), 100 + seed);
            let a = multi_branch_forward(&x, std::slice::from_ref(&branch)).unwrap();
            let b = multi_branch_forward(&x, std::slice::from_ref(&folded)).unwrap();
            let err = (&a - &b).iter().fold(0f32, |m, d| m.max(d.abs()));
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn pad_kernel_centers_taps() {
        let mut w = Array4::<f32>::zeros((1, 1, 1, 1));
        w[[0, 0, 0, 0]] = 2.5;
        let p = pad_kernel(&w, 3).unwrap();
        assert_eq!(p[[0, 0, 1, 1]], 2.5);
        assert_eq!(p.iter().filter(|&&v| v == 0.0).count(), 8);

        let w13 = randn4((1, 1, 1, 3), 5);
        let p = pad_kernel(&w13, 3).unwrap();
        for j in 0..3 {
            assert_eq!(p[[0, 0, 1, j]], w13[[0, 0, 0, j]]);
        }
        assert_eq!(p.slice(ndarray::s![.., .., 0, ..]).sum(), 0.0);
        assert_eq!(p.slice(ndarray::s![.., .., 2, ..]).sum(), 0.0);
    }

    #[test]
    fn pad_kernel_is_forward_equivalent() {
        let w = randn4((3, 2, 1, 3), 6);
        let padded = pad_kernel(&w, 5).unwrap();
        let x = randn4((1, 2, 8, 8), 7);
        let a = conv2d_naive(&x, &w, None, 1, 1);
        let b = conv2d_naive(&x, &padded, None, 1, 1);
        let err = (&a - &b).iter().fold(0f32, |m, d| m.max(d.abs()));
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn pad_kernel_rejects_oversize() {
        let w = randn4((1, 1, 5, 5), 8);
        assert!(matches!(pad_kernel(&w, 3), Err(crate::Error::Config(_))));
    }

    #[test]
    fn merge_single_branch_is_padding() {
        let branch = ConvBranchSpec::new(randn4((4, 4, 3, 3), 9), None, None).unwrap();
        let merged = merge_branches(std::slice::from_ref(&branch), 5).unwrap();
        let expect = pad_kernel(&branch.weights, 5).unwrap();
        assert_eq!(merged.weights, expect);
        assert!(merged.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn merge_cancelling_center_taps() {
        // A 1x1 branch equal to the negated 3x3 center taps cancels them.
        let w3 = randn4((3, 3, 3, 3), 10);
        let mut w1 = Array4::<f32>::zeros((3, 3, 1, 1));
        for o in 0..3 {
            for i in 0..3 {
                w1[[o, i, 0, 0]] = -w3[[o, i, 1, 1]];
            }
        }
        let merged = merge_branches(
            &[
                ConvBranchSpec::new(w3, None, None).unwrap(),
                ConvBranchSpec::new(w1, None, None).unwrap(),
            ],
            3,
        )
        .unwrap();
        for o in 0..3 {
            for i in 0..3 {
                assert!(merged.weights[[o, i, 1, 1]].abs() < 1e-7);
            }
        }
    }

    #[test]
    fn merge_channel_mismatch_is_config_error() {
        let a = ConvBranchSpec::new(randn4((4, 3, 3, 3), 11), None, None).unwrap();
        let b = ConvBranchSpec::new(randn4((4, 2, 1, 1), 12), None, None).unwrap();
        assert!(matches!(merge_branches(&[a, b], 3), Err(crate::Error::Config(_))));
    }

    #[test]
    fn four_branch_merge_matches_multi_branch_forward() {
        let branches = vec![
            ConvBranchSpec::new(randn4((6, 4, 5, 5), 20), Some(Array1::from_elem(6, 0.1)), Some(rand_norm(6, 21))).unwrap(),
            ConvBranchSpec::new(randn4((6, 4, 3, 3), 22), None, Some(rand_norm(6, 23))).unwrap(),
            ConvBranchSpec::new(randn4((6, 4, 1, 1), 24), Some(Array1::from_elem(6, -0.2)), None).unwrap(),
            ConvBranchSpec::new(randn4((6, 4, 1, 3), 25), None, None).unwrap(),
        ];
        let merged = merge_branches(&branches, 5).unwrap();
        for seed in 0..100 {
            let x = randn4((1, 4, 9, 9), 1000 + seed);
            let multi = multi_branch_forward(&x, &branches).unwrap();
            let single = conv_params_forward(&x, &merged);
            let err = max_rel_err(&multi, &single);
            assert!(err < 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn identity_branch_behaves_as_residual() {
        let c = 5;
        let branches = vec![
            ConvBranchSpec::new(randn4((c, c, 3, 3), 30), None, None).unwrap(),
            ConvBranchSpec::identity(c, None).unwrap(),
        ];
        let merged = merge_branches(&branches, 3).unwrap();
        let x = randn4((1, c, 6, 6), 31);
        let conv_only = conv2d_naive(&x, &branches[0].weights, None, 1, 1);
        let expect = &conv_only + &x;
        let got = conv_params_forward(&x, &merged);
        let err = (&expect - &got).iter().fold(0f32, |m, d| m.max(d.abs()));
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn merge_is_associative_on_weights() {
        let a = ConvBranchSpec::new(randn4((4, 4, 3, 3), 40), Some(Array1::from_elem(4, 0.3)), Some(rand_norm(4, 41))).unwrap();
        let b = ConvBranchSpec::new(randn4((4, 4, 1, 1), 42), None, Some(rand_norm(4, 43))).unwrap();
        let c = ConvBranchSpec::new(randn4((4, 4, 3, 1), 44), Some(Array1::from_elem(4, -0.1)), None).unwrap();

        let ab = merge_branches(&[a.clone(), b.clone()], 3).unwrap();
        let ab_branch = ConvBranchSpec::new(ab.weights, Some(ab.bias), None).unwrap();
        let left = merge_branches(&[ab_branch, c.clone()], 3).unwrap();
        let all = merge_branches(&[a, b, c], 3).unwrap();

        let werr = (&left.weights - &all.weights).iter().fold(0f32, |m, d| m.max(d.abs()));
        let berr = (&left.bias - &all.bias).iter().fold(0f32, |m, d| m.max(d.abs()));
        assert!(werr < 1e-6 && berr < 1e-6, "weights {werr}, bias {berr}");
    }

    /// Random mergeable configuration for the fuzzer.
    pub(crate) fn random_branch_set(seed: u64) -> (Vec<ConvBranchSpec>, usize, usize) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let in_ch = rng.gen_range(1..=16);
        let out_ch = rng.gen_range(1..=16);
        let kernels: [(usize, usize); 7] = [(1, 1), (3, 3), (5, 5), (1, 3), (3, 1), (1, 5), (5, 1)];
        let n_branches = rng.gen_range(1..=5);
        let mut branches = Vec::new();
        let mut max_k = 1;
        for bi in 0..n_branches {
            let (kh, kw) = kernels[rng.gen_range(0..kernels.len())];
            max_k = max_k.max(kh).max(kw);
            let w = {
                let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed * 1000 + bi as u64);
                Array4::from_shape_simple_fn((out_ch, in_ch, kh, kw), || r.gen_range(-1.0..1.0))
            };
            let bias = rng
                .gen_bool(0.5)
                .then(|| Array1::from_shape_simple_fn(out_ch, || rng.gen_range(-0.5..0.5)));
            let norm = rng.gen_bool(0.5).then(|| rand_norm(out_ch, seed * 77 + bi as u64));
            branches.push(ConvBranchSpec::new(w, bias, norm).unwrap());
        }
        if in_ch == out_ch && rng.gen_bool(0.3) {
            branches.push(ConvBranchSpec::identity(in_ch, rng.gen_bool(0.5).then(|| rand_norm(in_ch, seed * 91))).unwrap());
        }
        (branches, in_ch, max_k)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_merged_forward_equals_multi_branch(seed in 0u64..10_000) {
            let (branches, in_ch, max_k) = random_branch_set(seed);
            let merged = merge_branches(&branches, max_k).unwrap();
            for i in 0..3 {
                let x = randn4((1, in_ch, 6, 6), seed ^ (0xABCD + i));
                let multi = multi_branch_forward(&x, &branches).unwrap();
                let single = conv_params_forward(&x, &merged);
                prop_assert!(max_rel_err(&multi, &single) < 1e-5);
            }
        }
    }
}
