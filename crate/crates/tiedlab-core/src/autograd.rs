//! Explicit backward passes (vector-Jacobian products) for every forward
//! operation, plus a central-difference gradient checker.
//!
//! There is no tape: each layer exposes one backward function and the model
//! builder composes them in reverse. Tied layers accumulate — the shared
//! bank's gradient is the sum of the per-partition gradients that the untied
//! expansion would have produced, and the input gradient is assembled
//! block-wise. Convolution input gradients go through `col2im`, the adjoint
//! of the `im2col` lowering used by the forward pass.
//!
//! The gradient checker perturbs a seed-determined subsample of at most
//! [`GRADCHECK_MAX_COORDS`] coordinates per tensor with central differences
//! at `ε = 1e-3` in 64-bit floats, and reports the per-coordinate metric
//! `|a - f| / max(1e-8, |a| + |f|)` against tolerance `1e-4`. The relu
//! derivative at exactly zero is defined as zero; gradcheck instances that
//! feed a relu keep its input away from the ±ε window so the finite
//! difference never straddles the kink.

use crate::diff::grad_rel_err;
use crate::error::{Error, Result};
use crate::ops::{
    conv2d, fully_connected, global_avg_pool, group_conv2d, relu, sigmoid, sigmoid_scalar,
    softmax_cross_entropy, ConvSpec, ConvWeights,
};
use crate::rng::Rng;
use crate::tensor::{col2im, concat_channels, dot, im2col, split_channels, Tensor2, Tensor4};
use crate::tied::{
    tbc_forward_direct, tfc_forward_rows, tgc_forward, tied_se_forward, TfcWeights,
    TiedConvWeights, TiedSeSpec, TiedSeWeights,
};

pub const GRADCHECK_EPSILON: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_MAX_COORDS: usize = 64;

/// Gradients of one convolution layer. `weights` has the stacked-bank shape
/// of the owning spec, so the same struct serves the untied and tied cases.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weights: Tensor2,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of a fully connected / tied fully connected layer.
#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Vec<f64>,
    pub weights: Tensor2,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of a TiedSE block.
#[derive(Debug, Clone)]
pub struct TiedSeGrads {
    pub input: Tensor4,
    pub reduce_w: Tensor2,
    pub reduce_bias: Option<Vec<f64>>,
    pub expand_w: Tensor2,
    pub expand_bias: Option<Vec<f64>>,
}

/// Backward of one dense convolution over `n_filters` bank rows.
#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &Tensor4,
    w_rows: &[f64],
    n_filters: usize,
    has_bias: bool,
    k: usize,
    stride: usize,
    pad: usize,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f64>, Option<Vec<f64>>)> {
    let cols = im2col(x, k, stride, pad)?;
    let kdim = cols.rows();
    let span = cols.cols();
    debug_assert_eq!(w_rows.len(), n_filters * kdim);
    let (n, go_c, oh, ow) = grad_out.dims();
    debug_assert_eq!(go_c, n_filters);
    debug_assert_eq!(n * oh * ow, span);
    let plane = oh * ow;

    // grad_out in the (filters × span) layout the forward GEMM produced
    let mut g2 = vec![0.0; n_filters * span];
    for ni in 0..n {
        for o in 0..n_filters {
            let src =
                &grad_out.data()[(ni * n_filters + o) * plane..(ni * n_filters + o + 1) * plane];
            g2[o * span + ni * plane..o * span + ni * plane + plane].copy_from_slice(src);
        }
    }

    // dL/dW = g2 · colsᵀ
    let mut gw = vec![0.0; n_filters * kdim];
    for o in 0..n_filters {
        let grow = &g2[o * span..(o + 1) * span];
        for r in 0..kdim {
            let crow = cols.row(r);
            let mut acc = 0.0;
            for j in 0..span {
                acc += grow[j] * crow[j];
            }
            gw[o * kdim + r] = acc;
        }
    }

    // dL/dbias = row sums of g2
    let gb = has_bias.then(|| {
        (0..n_filters)
            .map(|o| g2[o * span..(o + 1) * span].iter().sum())
            .collect::<Vec<f64>>()
    });

    // dL/dcols = wᵀ · g2, then scatter back through the im2col adjoint
    let mut gcols = Tensor2::zeros(kdim, span);
    {
        let gdata = gcols.data_mut();
        for r in 0..kdim {
            for o in 0..n_filters {
                let wv = w_rows[o * kdim + r];
                if wv == 0.0 {
                    continue;
                }
                let grow = &g2[o * span..(o + 1) * span];
                let out = &mut gdata[r * span..(r + 1) * span];
                for j in 0..span {
                    out[j] += wv * grow[j];
                }
            }
        }
    }
    let gx = col2im(&gcols, x.dims(), k, stride, pad)?;
    Ok((gx, gw, gb))
}

/// Backward pass shared by every convolution variant (standard, grouped,
/// tied block, tied group), dispatched on the spec geometry exactly like the
/// forward. Partitions that share a bank accumulate into the same rows of
/// the weight gradient, in partition order.
pub fn conv_backward(
    x: &Tensor4,
    spec: &ConvSpec,
    wts_w: &Tensor2,
    grad_out: &Tensor4,
) -> Result<ConvGrads> {
    spec.validate()?;
    if x.c() != spec.c_in {
        return Err(Error::shape(format!(
            "input has {} channels, spec expects {}",
            x.c(),
            spec.c_in
        )));
    }
    let (oh, ow) = spec.out_dims(x.h(), x.w())?;
    if grad_out.dims() != (x.n(), spec.c_out, oh, ow) {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match output shape {:?}",
            grad_out.dims(),
            (x.n(), spec.c_out, oh, ow)
        )));
    }
    let parts = spec.partitions();
    if parts == 1 {
        let (gx, gw, gb) = dense_backward(
            x,
            wts_w.data(),
            spec.c_out,
            spec.has_bias,
            spec.k,
            spec.stride,
            spec.pad,
            grad_out,
        )?;
        return Ok(ConvGrads {
            input: gx,
            weights: Tensor2::new(wts_w.rows(), wts_w.cols(), gw)?,
            bias: gb,
        });
    }
    let opp = spec.out_per_partition();
    let x_parts = split_channels(x, parts)?;
    let g_parts = split_channels(grad_out, parts)?;
    let mut gw_stack = Tensor2::zeros(wts_w.rows(), wts_w.cols());
    let mut gb_stack = spec.has_bias.then(|| vec![0.0; spec.bias_len()]);
    let mut gx_parts = Vec::with_capacity(parts);
    for p in 0..parts {
        let bank = spec.bank_of(p);
        let rows = wts_w.row_range(bank * opp, (bank + 1) * opp);
        let (gx, gw, gb) = dense_backward(
            &x_parts[p],
            rows,
            opp,
            spec.has_bias,
            spec.k,
            spec.stride,
            spec.pad,
            &g_parts[p],
        )?;
        gx_parts.push(gx);
        let cols = wts_w.cols();
        let dst = &mut gw_stack.data_mut()[bank * opp * cols..(bank + 1) * opp * cols];
        for (d, s) in dst.iter_mut().zip(&gw) {
            *d += s;
        }
        if let (Some(stack), Some(gb)) = (gb_stack.as_mut(), gb) {
            for (d, s) in stack[bank * opp..(bank + 1) * opp].iter_mut().zip(&gb) {
                *d += s;
            }
        }
    }
    Ok(ConvGrads {
        input: concat_channels(&gx_parts)?,
        weights: gw_stack,
        bias: gb_stack,
    })
}

/// Backward of `y = Wx + b` for a single vector.
pub fn fc_backward(x: &[f64], w: &Tensor2, grad_out: &[f64], has_bias: bool) -> Result<FcGrads> {
    if w.cols() != x.len() || w.rows() != grad_out.len() {
        return Err(Error::shape(format!(
            "fc_backward: weight {}x{} with input {} and grad {}",
            w.rows(),
            w.cols(),
            x.len(),
            grad_out.len()
        )));
    }
    let mut gx = vec![0.0; x.len()];
    let mut gw = Tensor2::zeros(w.rows(), w.cols());
    for (o, &g) in grad_out.iter().enumerate() {
        let wrow = w.row(o);
        let grow = &mut gw.data_mut()[o * w.cols()..(o + 1) * w.cols()];
        for i in 0..x.len() {
            gx[i] += wrow[i] * g;
            grow[i] = g * x[i];
        }
    }
    let gb = has_bias.then(|| grad_out.to_vec());
    Ok(FcGrads {
        input: gx,
        weights: gw,
        bias: gb,
    })
}

/// Row-batched [`fc_backward`]; weight and bias gradients accumulate over
/// rows in row order.
pub fn fc_backward_rows(
    x: &Tensor2,
    w: &Tensor2,
    grad_out: &Tensor2,
    has_bias: bool,
) -> Result<(Tensor2, Tensor2, Option<Vec<f64>>)> {
    let mut gx = Tensor2::zeros(x.rows(), x.cols());
    let mut gw = Tensor2::zeros(w.rows(), w.cols());
    let mut gb = has_bias.then(|| vec![0.0; w.rows()]);
    for i in 0..x.rows() {
        let g = fc_backward(x.row(i), w, grad_out.row(i), has_bias)?;
        gx.data_mut()[i * x.cols()..(i + 1) * x.cols()].copy_from_slice(&g.input);
        for (d, s) in gw.data_mut().iter_mut().zip(g.weights.data()) {
            *d += s;
        }
        if let (Some(acc), Some(b)) = (gb.as_mut(), g.bias) {
            for (d, s) in acc.iter_mut().zip(&b) {
                *d += s;
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Backward of the tied fully connected layer: the thin shared matrix
/// accumulates the per-block gradients of its untied expansion.
pub fn tfc_backward(
    x: &[f64],
    blocks: usize,
    wts: &TfcWeights,
    grad_out: &[f64],
) -> Result<FcGrads> {
    let (rows, cols) = (wts.w.rows(), wts.w.cols());
    if x.len() != cols * blocks || grad_out.len() != rows * blocks {
        return Err(Error::shape(format!(
            "tfc_backward: {blocks} blocks of {cols}->{rows} with input {} and grad {}",
            x.len(),
            grad_out.len()
        )));
    }
    let has_bias = wts.bias.is_some();
    let mut gx = Vec::with_capacity(x.len());
    let mut gw = Tensor2::zeros(rows, cols);
    let mut gb = has_bias.then(|| vec![0.0; rows]);
    for b in 0..blocks {
        let xb = &x[b * cols..(b + 1) * cols];
        let gob = &grad_out[b * rows..(b + 1) * rows];
        let g = fc_backward(xb, &wts.w, gob, has_bias)?;
        gx.extend(g.input);
        for (d, s) in gw.data_mut().iter_mut().zip(g.weights.data()) {
            *d += s;
        }
        if let (Some(acc), Some(bias)) = (gb.as_mut(), g.bias) {
            for (d, s) in acc.iter_mut().zip(&bias) {
                *d += s;
            }
        }
    }
    Ok(FcGrads {
        input: gx,
        weights: gw,
        bias: gb,
    })
}

/// Row-batched [`tfc_backward`].
pub fn tfc_backward_rows(
    x: &Tensor2,
    blocks: usize,
    wts: &TfcWeights,
    grad_out: &Tensor2,
) -> Result<(Tensor2, Tensor2, Option<Vec<f64>>)> {
    let mut gx = Tensor2::zeros(x.rows(), x.cols());
    let mut gw = Tensor2::zeros(wts.w.rows(), wts.w.cols());
    let mut gb = wts.bias.as_ref().map(|b| vec![0.0; b.len()]);
    for i in 0..x.rows() {
        let g = tfc_backward(x.row(i), blocks, wts, grad_out.row(i))?;
        gx.data_mut()[i * x.cols()..(i + 1) * x.cols()].copy_from_slice(&g.input);
        for (d, s) in gw.data_mut().iter_mut().zip(g.weights.data()) {
            *d += s;
        }
        if let (Some(acc), Some(b)) = (gb.as_mut(), g.bias) {
            for (d, s) in acc.iter_mut().zip(&b) {
                *d += s;
            }
        }
    }
    Ok((gx, gw, gb))
}

/// relu backward; the derivative at exactly zero is zero.
pub fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    debug_assert_eq!(x.dims(), grad_out.dims());
    let mut out = grad_out.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

pub fn relu_backward_mat(x: &Tensor2, grad_out: &Tensor2) -> Tensor2 {
    let mut out = grad_out.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

pub fn sigmoid_backward(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    debug_assert_eq!(x.dims(), grad_out.dims());
    let mut out = grad_out.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid_scalar(v);
        *g *= s * (1.0 - s);
    }
    out
}

/// Backward of global average pooling: spread each channel gradient evenly
/// over its plane.
pub fn global_avg_pool_backward(dims: (usize, usize, usize, usize), grad_out: &Tensor2) -> Tensor4 {
    let (n, c, h, w) = dims;
    debug_assert_eq!((grad_out.rows(), grad_out.cols()), (n, c));
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor4::zeros(n, c, h, w);
    let plane = h * w;
    let data = out.data_mut();
    for ni in 0..n {
        for ch in 0..c {
            let g = grad_out.at(ni, ch) * inv;
            for v in data[(ni * c + ch) * plane..(ni * c + ch + 1) * plane].iter_mut() {
                *v = g;
            }
        }
    }
    out
}

/// Backward of the TiedSE block. Recomputes the squeeze/excite intermediates
/// from `x` and chains through scale → sigmoid → tfc → relu → tfc → pooling.
pub fn tied_se_backward(
    x: &Tensor4,
    spec: &TiedSeSpec,
    wts: &TiedSeWeights,
    grad_out: &Tensor4,
) -> Result<TiedSeGrads> {
    spec.validate()?;
    if grad_out.dims() != x.dims() {
        return Err(Error::shape(format!(
            "tied_se grad_out {:?} does not match input {:?}",
            grad_out.dims(),
            x.dims()
        )));
    }
    let (n, c, h, w) = x.dims();
    let b = spec.blocks;

    // forward intermediates
    let z = global_avg_pool(x);
    let u = tfc_forward_rows(&z, b, &wts.reduce)?;
    let hmat = crate::ops::relu_mat(&u);
    let v = tfc_forward_rows(&hmat, b, &wts.expand)?;
    let s = crate::ops::sigmoid_mat(&v);

    // dL/ds and the direct path dL/dx = g ⊙ s
    let plane = h * w;
    let mut gs = Tensor2::zeros(n, c);
    let mut gx = grad_out.clone();
    {
        let gx_data = gx.data_mut();
        for ni in 0..n {
            for ch in 0..c {
                let sv = s.at(ni, ch);
                let base = (ni * c + ch) * plane;
                let mut acc = 0.0;
                for off in 0..plane {
                    acc += grad_out.data()[base + off] * x.data()[base + off];
                    gx_data[base + off] *= sv;
                }
                gs.set(ni, ch, acc);
            }
        }
    }

    // chain through the excitation MLP
    let mut gv = gs;
    for (g, &vv) in gv.data_mut().iter_mut().zip(v.data()) {
        let sv = sigmoid_scalar(vv);
        *g *= sv * (1.0 - sv);
    }
    let (gh, expand_w, expand_bias) = tfc_backward_rows(&hmat, b, &wts.expand, &gv)?;
    let gu = relu_backward_mat(&u, &gh);
    let (gz, reduce_w, reduce_bias) = tfc_backward_rows(&z, b, &wts.reduce, &gu)?;
    let gpool = global_avg_pool_backward(x.dims(), &gz);
    let gx = gx.add(&gpool)?;

    Ok(TiedSeGrads {
        input: gx,
        reduce_w,
        reduce_bias,
        expand_w,
        expand_bias,
    })
}

/// Result of one finite-difference check of one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub param: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub epsilon: f64,
}

impl GradReport {
    fn new(op: &str, param: &str, max_rel_err: f64) -> Self {
        GradReport {
            op: op.to_string(),
            param: param.to_string(),
            max_rel_err,
            pass: max_rel_err <= GRADCHECK_TOL,
            epsilon: GRADCHECK_EPSILON,
        }
    }
}

/// The layer kinds covered by [`gradcheck`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    GroupConv2d,
    Tbc,
    Tgc,
    Fc,
    Tfc,
    TiedSe,
    Relu,
    Sigmoid,
    GlobalAvgPool,
    SoftmaxCrossEntropy,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Conv2d,
        LayerKind::GroupConv2d,
        LayerKind::Tbc,
        LayerKind::Tgc,
        LayerKind::Fc,
        LayerKind::Tfc,
        LayerKind::TiedSe,
        LayerKind::Relu,
        LayerKind::Sigmoid,
        LayerKind::GlobalAvgPool,
        LayerKind::SoftmaxCrossEntropy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::GroupConv2d => "group_conv2d",
            LayerKind::Tbc => "tbc",
            LayerKind::Tgc => "tgc",
            LayerKind::Fc => "fc",
            LayerKind::Tfc => "tfc",
            LayerKind::TiedSe => "tied_se",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

/// Seed-determined subsample of at most [`GRADCHECK_MAX_COORDS`] coordinates.
fn pick_coords(len: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= GRADCHECK_MAX_COORDS {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut all);
    all.truncate(GRADCHECK_MAX_COORDS);
    all
}

/// Central-difference check of one parameter buffer against its analytic
/// gradient. `loss` re-evaluates the scalar objective from the buffer.
fn fd_report(
    op: &str,
    param: &str,
    analytic: &[f64],
    values: &mut [f64],
    rng: &mut Rng,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> GradReport {
    assert_eq!(analytic.len(), values.len());
    let coords = pick_coords(values.len(), rng);
    let mut max_err = 0.0f64;
    for &i in &coords {
        let orig = values[i];
        values[i] = orig + GRADCHECK_EPSILON;
        let lp = loss(values);
        values[i] = orig - GRADCHECK_EPSILON;
        let lm = loss(values);
        values[i] = orig;
        let fd = (lp - lm) / (2.0 * GRADCHECK_EPSILON);
        max_err = max_err.max(grad_rel_err(analytic[i], fd));
    }
    GradReport::new(op, param, max_err)
}

/// Run the finite-difference check for one layer kind on one seeded random
/// instance. Returns one report per checked tensor (input, weights, bias as
/// applicable). Failures are reported, never thrown.
pub fn gradcheck(kind: LayerKind, seed: u64) -> Vec<GradReport> {
    let mut rng = Rng::seeded(seed.wrapping_mul(0x9E37_79B9).wrapping_add(kind as u64));
    match kind {
        LayerKind::Conv2d => {
            let spec = ConvSpec::standard(3, 4, 3, 1, 1, true);
            gradcheck_conv(kind, spec, 2, 5, 5, &mut rng)
        }
        LayerKind::GroupConv2d => {
            let spec = ConvSpec::grouped(4, 6, 3, 1, 1, 2, true);
            gradcheck_conv(kind, spec, 2, 5, 5, &mut rng)
        }
        LayerKind::Tbc => {
            let spec = ConvSpec::tied(8, 8, 3, 1, 1, 4, true);
            gradcheck_conv(kind, spec, 2, 5, 5, &mut rng)
        }
        LayerKind::Tgc => {
            let spec = ConvSpec::tied_grouped(8, 8, 3, 1, 1, 4, 2, true);
            gradcheck_conv(kind, spec, 2, 5, 5, &mut rng)
        }
        LayerKind::Fc => gradcheck_fc(&mut rng),
        LayerKind::Tfc => gradcheck_tfc(&mut rng),
        LayerKind::TiedSe => gradcheck_tied_se(&mut rng),
        LayerKind::Relu => gradcheck_relu(&mut rng),
        LayerKind::Sigmoid => gradcheck_sigmoid(&mut rng),
        LayerKind::GlobalAvgPool => gradcheck_gap(&mut rng),
        LayerKind::SoftmaxCrossEntropy => gradcheck_softmax_ce(&mut rng),
    }
}

/// Reports for every layer kind at one seed.
pub fn gradcheck_all(seed: u64) -> Vec<GradReport> {
    LayerKind::ALL
        .iter()
        .flat_map(|&k| gradcheck(k, seed))
        .collect()
}

fn conv_forward_any(x: &Tensor4, spec: &ConvSpec, w: &Tensor2, bias: Option<&[f64]>) -> Tensor4 {
    // dispatch mirrors the public wrappers so every kind exercises its op
    if spec.blocks > 1 {
        let tied = TiedConvWeights {
            w: w.clone(),
            bias: bias.map(|b| b.to_vec()),
        };
        if spec.groups > 1 {
            tgc_forward(x, spec, &tied).unwrap()
        } else {
            tbc_forward_direct(x, spec, &tied).unwrap()
        }
    } else if spec.groups > 1 {
        let wts = ConvWeights {
            w: w.clone(),
            bias: bias.map(|b| b.to_vec()),
        };
        group_conv2d(x, spec, &wts).unwrap()
    } else {
        let wts = ConvWeights {
            w: w.clone(),
            bias: bias.map(|b| b.to_vec()),
        };
        conv2d(x, spec, &wts).unwrap()
    }
}

fn gradcheck_conv(
    kind: LayerKind,
    spec: ConvSpec,
    n: usize,
    h: usize,
    w: usize,
    rng: &mut Rng,
) -> Vec<GradReport> {
    let mut x = Tensor4::random(n, spec.c_in, h, w, 1.0, rng);
    let mut wts = TiedConvWeights::init(&spec, rng).unwrap();
    for b in wts.bias.as_mut().unwrap().iter_mut() {
        *b = 0.5 * rng.next_f64();
    }
    let (oh, ow) = spec.out_dims(h, w).unwrap();
    let proj = Tensor4::random(n, spec.c_out, oh, ow, 1.0, rng);

    let grads = conv_backward(&x, &spec, &wts.w, &proj).unwrap();
    let name = kind.name();
    let mut reports = Vec::new();

    {
        let dims = x.dims();
        let gx = grads.input.data().to_vec();
        let wmat = wts.w.clone();
        let bias = wts.bias.clone();
        reports.push(fd_report(name, "input", &gx, x.data_mut(), rng, |buf| {
            let xt = Tensor4::new(dims.0, dims.1, dims.2, dims.3, buf.to_vec()).unwrap();
            dot(
                conv_forward_any(&xt, &spec, &wmat, bias.as_deref()).data(),
                proj.data(),
            )
        }));
    }
    {
        let (rows, cols) = (wts.w.rows(), wts.w.cols());
        let bias = wts.bias.clone();
        let mut wbuf = wts.w.data().to_vec();
        reports.push(fd_report(
            name,
            "weights",
            grads.weights.data(),
            &mut wbuf,
            rng,
            |buf| {
                let wt = Tensor2::new(rows, cols, buf.to_vec()).unwrap();
                dot(
                    conv_forward_any(&x, &spec, &wt, bias.as_deref()).data(),
                    proj.data(),
                )
            },
        ));
    }
    {
        let wmat = wts.w.clone();
        let mut bbuf = wts.bias.clone().unwrap();
        let gb = grads.bias.as_ref().unwrap().clone();
        reports.push(fd_report(name, "bias", &gb, &mut bbuf, rng, |buf| {
            dot(
                conv_forward_any(&x, &spec, &wmat, Some(buf)).data(),
                proj.data(),
            )
        }));
    }
    reports
}

fn gradcheck_fc(rng: &mut Rng) -> Vec<GradReport> {
    let (ci, co) = (6, 4);
    let mut x: Vec<f64> = (0..ci).map(|_| rng.next_f64()).collect();
    let w = Tensor2::random(co, ci, 0.6, rng);
    let mut bias: Vec<f64> = (0..co).map(|_| 0.5 * rng.next_f64()).collect();
    let proj: Vec<f64> = (0..co).map(|_| rng.next_f64()).collect();

    let grads = fc_backward(&x, &w, &proj, true).unwrap();
    let mut reports = Vec::new();
    reports.push(fd_report("fc", "input", &grads.input, &mut x, rng, |buf| {
        dot(&fully_connected(buf, &w, Some(&bias)).unwrap(), &proj)
    }));
    let mut wbuf = w.data().to_vec();
    reports.push(fd_report(
        "fc",
        "weights",
        grads.weights.data(),
        &mut wbuf,
        rng,
        |buf| {
            let wt = Tensor2::new(co, ci, buf.to_vec()).unwrap();
            dot(&fully_connected(&x, &wt, Some(&bias)).unwrap(), &proj)
        },
    ));
    let gb = grads.bias.unwrap();
    reports.push(fd_report("fc", "bias", &gb, &mut bias, rng, |buf| {
        dot(&fully_connected(&x, &w, Some(buf)).unwrap(), &proj)
    }));
    reports
}

fn gradcheck_tfc(rng: &mut Rng) -> Vec<GradReport> {
    let blocks = 2;
    let wts = TfcWeights::init(6, 4, blocks, true, rng).unwrap();
    let mut x: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
    let proj: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
    let grads = tfc_backward(&x, blocks, &wts, &proj).unwrap();

    let mut reports = Vec::new();
    reports.push(fd_report(
        "tfc",
        "input",
        &grads.input,
        &mut x,
        rng,
        |buf| dot(&crate::tied::tfc_forward(buf, blocks, &wts).unwrap(), &proj),
    ));
    let (rows, cols) = (wts.w.rows(), wts.w.cols());
    let mut wbuf = wts.w.data().to_vec();
    let bias = wts.bias.clone();
    reports.push(fd_report(
        "tfc",
        "weights",
        grads.weights.data(),
        &mut wbuf,
        rng,
        |buf| {
            let wt = TfcWeights {
                w: Tensor2::new(rows, cols, buf.to_vec()).unwrap(),
                bias: bias.clone(),
            };
            dot(&crate::tied::tfc_forward(&x, blocks, &wt).unwrap(), &proj)
        },
    ));
    let mut bbuf = wts.bias.clone().unwrap();
    let gb = grads.bias.unwrap();
    let wmat = wts.w.clone();
    reports.push(fd_report("tfc", "bias", &gb, &mut bbuf, rng, |buf| {
        let wt = TfcWeights {
            w: wmat.clone(),
            bias: Some(buf.to_vec()),
        };
        dot(&crate::tied::tfc_forward(&x, blocks, &wt).unwrap(), &proj)
    }));
    reports
}

fn gradcheck_tied_se(rng: &mut Rng) -> Vec<GradReport> {
    let spec = TiedSeSpec::new(8, 2, 2, true);
    let mut wts = TiedSeWeights::init(&spec, rng).unwrap();
    // keep the internal relu input clear of the ±ε finite-difference window
    for b in wts.reduce.bias.as_mut().unwrap().iter_mut() {
        *b = 0.35;
    }
    let mut x = Tensor4::random(2, 8, 4, 4, 1.0, rng);
    let proj = Tensor4::random(2, 8, 4, 4, 1.0, rng);
    let grads = tied_se_backward(&x, &spec, &wts, &proj).unwrap();

    let mut reports = Vec::new();
    let dims = x.dims();
    {
        let gx = grads.input.data().to_vec();
        let w = wts.clone();
        reports.push(fd_report(
            "tied_se",
            "input",
            &gx,
            x.data_mut(),
            rng,
            |buf| {
                let xt = Tensor4::new(dims.0, dims.1, dims.2, dims.3, buf.to_vec()).unwrap();
                dot(tied_se_forward(&xt, &spec, &w).unwrap().data(), proj.data())
            },
        ));
    }
    for which in ["reduce", "expand"] {
        let (gw, gb) = if which == "reduce" {
            (grads.reduce_w.clone(), grads.reduce_bias.clone().unwrap())
        } else {
            (grads.expand_w.clone(), grads.expand_bias.clone().unwrap())
        };
        let base = wts.clone();
        let part = if which == "reduce" {
            &base.reduce
        } else {
            &base.expand
        };
        let (rows, cols) = (part.w.rows(), part.w.cols());
        let mut wbuf = part.w.data().to_vec();
        reports.push(fd_report(
            "tied_se",
            &format!("{which}_weights"),
            gw.data(),
            &mut wbuf,
            rng,
            |buf| {
                let mut wt = base.clone();
                let m = Tensor2::new(rows, cols, buf.to_vec()).unwrap();
                if which == "reduce" {
                    wt.reduce.w = m;
                } else {
                    wt.expand.w = m;
                }
                dot(tied_se_forward(&x, &spec, &wt).unwrap().data(), proj.data())
            },
        ));
        let mut bbuf = part.bias.clone().unwrap();
        reports.push(fd_report(
            "tied_se",
            &format!("{which}_bias"),
            &gb,
            &mut bbuf,
            rng,
            |buf| {
                let mut wt = base.clone();
                if which == "reduce" {
                    wt.reduce.bias = Some(buf.to_vec());
                } else {
                    wt.expand.bias = Some(buf.to_vec());
                }
                dot(tied_se_forward(&x, &spec, &wt).unwrap().data(), proj.data())
            },
        ));
    }
    reports
}

fn gradcheck_relu(rng: &mut Rng) -> Vec<GradReport> {
    // magnitudes at least 0.05 so ±ε never crosses the kink
    let mut x = Tensor4::zeros(1, 4, 5, 5);
    for v in x.data_mut().iter_mut() {
        let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
        *v = sign * (0.05 + 0.95 * rng.unit_f64());
    }
    let proj = Tensor4::random(1, 4, 5, 5, 1.0, rng);
    let analytic = relu_backward(&x, &proj).data().to_vec();
    let dims = x.dims();
    vec![fd_report(
        "relu",
        "input",
        &analytic,
        x.data_mut(),
        rng,
        |buf| {
            let xt = Tensor4::new(dims.0, dims.1, dims.2, dims.3, buf.to_vec()).unwrap();
            dot(relu(&xt).data(), proj.data())
        },
    )]
}

fn gradcheck_sigmoid(rng: &mut Rng) -> Vec<GradReport> {
    let mut x = Tensor4::random(1, 4, 5, 5, 2.0, rng);
    let proj = Tensor4::random(1, 4, 5, 5, 1.0, rng);
    let analytic = sigmoid_backward(&x, &proj).data().to_vec();
    let dims = x.dims();
    vec![fd_report(
        "sigmoid",
        "input",
        &analytic,
        x.data_mut(),
        rng,
        |buf| {
            let xt = Tensor4::new(dims.0, dims.1, dims.2, dims.3, buf.to_vec()).unwrap();
            dot(sigmoid(&xt).data(), proj.data())
        },
    )]
}

fn gradcheck_gap(rng: &mut Rng) -> Vec<GradReport> {
    let mut x = Tensor4::random(2, 5, 4, 4, 1.0, rng);
    let proj = Tensor2::random(2, 5, 1.0, rng);
    let analytic = global_avg_pool_backward(x.dims(), &proj).data().to_vec();
    let dims = x.dims();
    vec![fd_report(
        "global_avg_pool",
        "input",
        &analytic,
        x.data_mut(),
        rng,
        |buf| {
            let xt = Tensor4::new(dims.0, dims.1, dims.2, dims.3, buf.to_vec()).unwrap();
            dot(global_avg_pool(&xt).data(), proj.data())
        },
    )]
}

fn gradcheck_softmax_ce(rng: &mut Rng) -> Vec<GradReport> {
    let (n, classes) = (3, 4);
    let mut logits = Tensor2::random(n, classes, 1.5, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let analytic = grad.data().to_vec();
    vec![fd_report(
        "softmax_cross_entropy",
        "logits",
        &analytic,
        logits.data_mut(),
        rng,
        |buf| {
            let lt = Tensor2::new(n, classes, buf.to_vec()).unwrap();
            softmax_cross_entropy(&lt, &labels).unwrap().0
        },
    )]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{bitwise_eq, rel_diff};
    use crate::tied::{expand_tied_to_untied, expanded_spec};

    #[test]
    fn one_by_one_conv_scalar_chain_rule() {
        // y = w*x, upstream grad g: dL/dx = w*g, dL/dw = sum x*g
        let x = Tensor4::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = ConvSpec::standard(1, 1, 1, 1, 0, false);
        let w = Tensor2::new(1, 1, vec![3.0]).unwrap();
        let g = Tensor4::new(1, 1, 2, 2, vec![0.5, 1.0, -1.0, 2.0]).unwrap();
        let grads = conv_backward(&x, &spec, &w, &g).unwrap();
        let expect_gx: Vec<f64> = g.data().iter().map(|v| 3.0 * v).collect();
        assert!(bitwise_eq(grads.input.data(), &expect_gx));
        let expect_gw: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((grads.weights.at(0, 0) - expect_gw).abs() <= 1e-15);
    }

    #[test]
    fn tied_bank_grad_doubles_with_identical_blocks() {
        let mut rng = Rng::seeded(50);
        let plane = Tensor4::random(1, 2, 4, 4, 1.0, &mut rng);
        let x = concat_channels(&[plane.clone(), plane.clone()]).unwrap();
        let gplane = Tensor4::random(1, 2, 4, 4, 1.0, &mut rng);
        let g = concat_channels(&[gplane.clone(), gplane.clone()]).unwrap();

        let spec = ConvSpec::tied(4, 4, 3, 1, 1, 2, false);
        let wts = TiedConvWeights::init(&spec, &mut rng).unwrap();
        let tied = conv_backward(&x, &spec, &wts.w, &g).unwrap();

        let single_spec = ConvSpec::standard(2, 2, 3, 1, 1, false);
        let single = conv_backward(&plane, &single_spec, &wts.w, &gplane).unwrap();
        let doubled: Vec<f64> = single.weights.data().iter().map(|v| 2.0 * v).collect();
        assert!(bitwise_eq(tied.weights.data(), &doubled));
    }

    /// Contract an untied weight gradient back onto the shared bank by
    /// summing the per-partition copies — the oracle for tied weight grads.
    fn contract_untied_grad(spec: &ConvSpec, untied: &Tensor2) -> Tensor2 {
        let opp = spec.out_per_partition();
        let ipp = spec.in_per_partition();
        let taps = spec.k * spec.k;
        let (rows, cols) = spec.weight_shape();
        let mut out = Tensor2::zeros(rows, cols);
        for p in 0..spec.partitions() {
            let bank = spec.bank_of(p);
            for o in 0..opp {
                for ci in 0..ipp {
                    for t in 0..taps {
                        let src_col = if spec.groups > 1 {
                            ci * taps + t
                        } else {
                            (p * ipp + ci) * taps + t
                        };
                        let v = untied.at(p * opp + o, src_col);
                        let cur = out.at(bank * opp + o, ci * taps + t);
                        out.set(bank * opp + o, ci * taps + t, cur + v);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tied_grads_match_contracted_expansion() {
        let mut rng = Rng::seeded(51);
        for spec in [
            ConvSpec::tied(8, 8, 3, 1, 1, 4, true),
            ConvSpec::tied(6, 4, 1, 1, 0, 2, true),
            ConvSpec::tied_grouped(8, 8, 3, 1, 1, 4, 2, true),
        ] {
            let wts = TiedConvWeights::init(&spec, &mut rng).unwrap();
            let x = Tensor4::random(2, spec.c_in, 5, 5, 1.0, &mut rng);
            let (oh, ow) = spec.out_dims(5, 5).unwrap();
            let g = Tensor4::random(2, spec.c_out, oh, ow, 1.0, &mut rng);

            let tied = conv_backward(&x, &spec, &wts.w, &g).unwrap();

            let expanded = expand_tied_to_untied(&spec, &wts).unwrap();
            let untied_spec = expanded_spec(&spec);
            let untied = conv_backward(&x, &untied_spec, &expanded.w, &g).unwrap();
            let contracted = contract_untied_grad(&spec, &untied.weights);

            assert!(
                rel_diff(tied.weights.data(), contracted.data()) <= 1e-12,
                "weight grads diverged for {spec:?}"
            );
            assert!(
                rel_diff(tied.input.data(), untied.input.data()) <= 1e-12,
                "input grads diverged for {spec:?}"
            );
        }
    }

    #[test]
    fn adjoint_identity_linear_layers() {
        let mut rng = Rng::seeded(52);
        for spec in [
            ConvSpec::standard(3, 4, 3, 1, 1, false),
            ConvSpec::grouped(4, 4, 3, 1, 1, 2, false),
            ConvSpec::tied(8, 8, 3, 2, 1, 4, false),
            ConvSpec::tied_grouped(8, 8, 1, 1, 0, 4, 2, false),
        ] {
            let wts = TiedConvWeights::init(&spec, &mut rng).unwrap();
            let x = Tensor4::random(2, spec.c_in, 5, 5, 1.0, &mut rng);
            let y = conv_forward_any(&x, &spec, &wts.w, None);
            let g = Tensor4::random(y.n(), y.c(), y.h(), y.w(), 1.0, &mut rng);
            let grads = conv_backward(&x, &spec, &wts.w, &g).unwrap();
            let lhs = dot(grads.input.data(), x.data());
            let rhs = dot(g.data(), y.data());
            let denom = lhs.abs().max(rhs.abs()).max(1.0);
            assert!(
                ((lhs - rhs) / denom).abs() <= 1e-12,
                "adjoint identity failed for {spec:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn linear_map_central_difference_is_machine_exact() {
        // f(x) = 3x: the central difference of a linear map has no
        // truncation term, so it matches the analytic slope to rounding.
        let f = |x: f64| 3.0 * x;
        let eps = GRADCHECK_EPSILON;
        let fd = (f(1.25 + eps) - f(1.25 - eps)) / (2.0 * eps);
        assert!((fd - 3.0).abs() <= 1e-12);
    }

    #[test]
    fn relu_gradient_zero_at_zero() {
        let x = Tensor4::new(1, 1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Tensor4::new(1, 1, 1, 3, vec![5.0, 5.0, 5.0]).unwrap();
        let gx = relu_backward(&x, &g);
        assert_eq!(gx.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn gradcheck_conv_passes() {
        for report in gradcheck(LayerKind::Conv2d, 0) {
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn gradcheck_tbc_passes() {
        for report in gradcheck(LayerKind::Tbc, 0) {
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn gradcheck_tied_se_passes() {
        for report in gradcheck(LayerKind::TiedSe, 0) {
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn gradcheck_every_kind_single_seed() {
        for report in gradcheck_all(1) {
            assert!(report.pass, "{report:?}");
        }
    }
}
