//! Untied reference layers: standard and group convolution, fully connected,
//! pooling, activations and the classification loss.
//!
//! The convolution variants in this crate all reduce to one partitioned
//! kernel: the channel axis is split into `partitions()` equal slices, each
//! slice is lowered with im2col and multiplied by its filter bank, and the
//! slice outputs are concatenated in order. Standard convolution is the
//! single-partition case and group convolution gives every partition its own
//! bank; the tied variants (same kernel, shared banks) live in
//! [`crate::tied`]. Sharing the kernel is what makes the degenerate cases
//! (`G=1`, `B=1`) agree bit for bit rather than merely numerically.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    concat_channels, conv_out_dim, im2col, matmul_into, split_channels, Tensor2, Tensor4,
};

/// Full description of a (possibly grouped, possibly tied) convolution layer.
///
/// `groups` is the number of independent channel groups; `blocks` is the
/// number of groups (or channel blocks, when `groups == 1`) that share one
/// filter bank. `groups == blocks == 1` is a standard convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub blocks: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn standard(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        has_bias: bool,
    ) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride,
            pad,
            groups: 1,
            blocks: 1,
            has_bias,
        }
    }

    pub fn grouped(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        has_bias: bool,
    ) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride,
            pad,
            groups,
            blocks: 1,
            has_bias,
        }
    }

    pub fn tied(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        blocks: usize,
        has_bias: bool,
    ) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride,
            pad,
            groups: 1,
            blocks,
            has_bias,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn tied_grouped(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        blocks: usize,
        has_bias: bool,
    ) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride,
            pad,
            groups,
            blocks,
            has_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.stride == 0 {
            return Err(Error::shape(format!(
                "conv spec has a zero dimension: {self:?}"
            )));
        }
        if self.groups == 0 || self.blocks == 0 {
            return Err(Error::shape(format!(
                "groups and blocks must be >= 1: {self:?}"
            )));
        }
        if !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(Error::shape(format!(
                "groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        if !self.c_in.is_multiple_of(self.blocks) || !self.c_out.is_multiple_of(self.blocks) {
            return Err(Error::shape(format!(
                "blocks {} must divide c_in {} and c_out {}",
                self.blocks, self.c_in, self.c_out
            )));
        }
        if self.groups > 1 && self.blocks > 1 && !self.groups.is_multiple_of(self.blocks) {
            return Err(Error::shape(format!(
                "blocks {} must divide groups {} when both exceed 1",
                self.blocks, self.groups
            )));
        }
        Ok(())
    }

    /// Number of channel slices the input is split into: `max(groups, blocks)`.
    pub fn partitions(&self) -> usize {
        self.groups.max(self.blocks)
    }

    /// Number of distinct filter banks.
    pub fn banks(&self) -> usize {
        self.partitions() / self.blocks
    }

    /// Which bank partition `p` uses: consecutive runs of `blocks` partitions
    /// share one bank.
    pub fn bank_of(&self, p: usize) -> usize {
        p / self.blocks
    }

    pub fn in_per_partition(&self) -> usize {
        self.c_in / self.partitions()
    }

    pub fn out_per_partition(&self) -> usize {
        self.c_out / self.partitions()
    }

    /// Shape of the stacked weight matrix: every bank contributes
    /// `out_per_partition` rows of width `in_per_partition * k * k`.
    pub fn weight_shape(&self) -> (usize, usize) {
        (
            self.banks() * self.out_per_partition(),
            self.in_per_partition() * self.k * self.k,
        )
    }

    /// Length of the stacked bias vector (one entry per weight row).
    pub fn bias_len(&self) -> usize {
        self.weight_shape().0
    }

    /// Weight element count, bias excluded.
    pub fn weight_params(&self) -> u64 {
        let (r, c) = self.weight_shape();
        r as u64 * c as u64
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_dim(h, self.k, self.stride, self.pad)?,
            conv_out_dim(w, self.k, self.stride, self.pad)?,
        ))
    }
}

/// Filter bank(s) plus optional bias for an untied convolution.
///
/// `w` stacks one bank per group: row `g*c_out/G + o` is filter `o` of group
/// `g`, laid out channel-major then kernel-row then kernel-column to match
/// [`im2col`] rows. `bias` has one entry per produced output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub w: Tensor2,
    pub bias: Option<Vec<f64>>,
}

impl ConvWeights {
    /// Uniform init in `[-a, a]` with `a = sqrt(1/fan_in)`, fan-in counted on
    /// one bank; bias starts at zero.
    pub fn init(spec: &ConvSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (rows, cols) = spec.weight_shape();
        let bound = (1.0 / cols as f64).sqrt();
        let w = Tensor2::new(rows, cols, rng.uniform_vec(rows * cols, bound))?;
        let bias = spec.has_bias.then(|| vec![0.0; spec.bias_len()]);
        Ok(ConvWeights { w, bias })
    }

    pub fn check(&self, spec: &ConvSpec) -> Result<()> {
        check_weight_shape(&self.w, self.bias.as_deref(), spec)
    }
}

pub(crate) fn check_weight_shape(w: &Tensor2, bias: Option<&[f64]>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    let (rows, cols) = spec.weight_shape();
    if w.rows() != rows || w.cols() != cols {
        return Err(Error::shape(format!(
            "weights {}x{} do not match the {rows}x{cols} bank stack of {spec:?}",
            w.rows(),
            w.cols()
        )));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.len() != spec.bias_len() => Err(Error::shape(format!(
            "bias length {} does not match {} produced channels per bank stack",
            b.len(),
            spec.bias_len()
        ))),
        (Some(_), false) => Err(Error::shape("bias present but spec has_bias is false")),
        (None, true) => Err(Error::shape("spec has_bias set but bias missing")),
        _ => Ok(()),
    }
}

/// One dense convolution of `x` against `n_filters` rows of `w_rows`:
/// im2col, one matrix product, bias, and the NCHW re-layout.
pub(crate) fn dense_conv(
    x: &Tensor4,
    w_rows: &[f64],
    n_filters: usize,
    bias: Option<&[f64]>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    let cols = im2col(x, k, stride, pad)?;
    debug_assert_eq!(w_rows.len(), n_filters * cols.rows());
    let span = cols.cols();
    let mut flat = vec![0.0; n_filters * span];
    matmul_into(w_rows, n_filters, cols.rows(), cols.data(), span, &mut flat);
    let n = x.n();
    let (oh, ow) = (
        conv_out_dim(x.h(), k, stride, pad)?,
        conv_out_dim(x.w(), k, stride, pad)?,
    );
    let plane = oh * ow;
    let mut out = Tensor4::zeros(n, n_filters, oh, ow);
    let out_data = out.data_mut();
    for ni in 0..n {
        for o in 0..n_filters {
            let b = bias.map(|b| b[o]).unwrap_or(0.0);
            let src = &flat[o * span + ni * plane..o * span + (ni + 1) * plane];
            let dst = &mut out_data[(ni * n_filters + o) * plane..(ni * n_filters + o + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    Ok(out)
}

/// Shared forward path for every convolution variant: split into partitions,
/// convolve each against its bank, concatenate in partition order.
pub(crate) fn conv_partitioned(
    x: &Tensor4,
    spec: &ConvSpec,
    w: &Tensor2,
    bias: Option<&[f64]>,
) -> Result<Tensor4> {
    check_weight_shape(w, bias, spec)?;
    if x.c() != spec.c_in {
        return Err(Error::shape(format!(
            "input has {} channels, spec expects {}",
            x.c(),
            spec.c_in
        )));
    }
    let parts = spec.partitions();
    if parts == 1 {
        return dense_conv(x, w.data(), spec.c_out, bias, spec.k, spec.stride, spec.pad);
    }
    let opp = spec.out_per_partition();
    let slices = split_channels(x, parts)?;
    let mut outputs = Vec::with_capacity(parts);
    for (p, slice) in slices.iter().enumerate() {
        let bank = spec.bank_of(p);
        let rows = w.row_range(bank * opp, (bank + 1) * opp);
        let b = bias.map(|b| &b[bank * opp..(bank + 1) * opp]);
        outputs.push(dense_conv(
            slice,
            rows,
            opp,
            b,
            spec.k,
            spec.stride,
            spec.pad,
        )?);
    }
    concat_channels(&outputs)
}

/// Standard dense convolution (`groups == blocks == 1`).
pub fn conv2d(x: &Tensor4, spec: &ConvSpec, wts: &ConvWeights) -> Result<Tensor4> {
    if spec.groups != 1 || spec.blocks != 1 {
        return Err(Error::shape(format!(
            "conv2d requires groups == 1 and blocks == 1, got {spec:?}"
        )));
    }
    conv_partitioned(x, spec, &wts.w, wts.bias.as_deref())
}

/// Group convolution: `groups` independent channel groups, each with its own
/// bank of `c_out/groups` filters over `c_in/groups` channels.
pub fn group_conv2d(x: &Tensor4, spec: &ConvSpec, wts: &ConvWeights) -> Result<Tensor4> {
    if spec.blocks != 1 {
        return Err(Error::shape(format!(
            "group_conv2d requires blocks == 1, got {spec:?}"
        )));
    }
    conv_partitioned(x, spec, &wts.w, wts.bias.as_deref())
}

/// y = W x + bias.
pub fn fully_connected(x: &[f64], w: &Tensor2, bias: Option<&[f64]>) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::shape(format!(
            "fully_connected: weight is {}x{} but input has length {}",
            w.rows(),
            w.cols(),
            x.len()
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.rows() {
            return Err(Error::shape(format!(
                "fully_connected: bias length {} vs {} outputs",
                b.len(),
                w.rows()
            )));
        }
    }
    let mut y = Vec::with_capacity(w.rows());
    for o in 0..w.rows() {
        let mut acc = 0.0;
        for (wv, xv) in w.row(o).iter().zip(x) {
            acc += wv * xv;
        }
        y.push(acc + bias.map(|b| b[o]).unwrap_or(0.0));
    }
    Ok(y)
}

/// Per-sample, per-channel spatial mean: N×C×H×W -> N×C.
pub fn global_avg_pool(x: &Tensor4) -> Tensor2 {
    let (n, c, h, w) = x.dims();
    let plane = (h * w) as f64;
    let mut out = Tensor2::zeros(n, c);
    for ni in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += x.at(ni, ch, y, xx);
                }
            }
            out.set(ni, ch, acc / plane);
        }
    }
    out
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn relu_mat(x: &Tensor2) -> Tensor2 {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor4) -> Tensor4 {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_mat(x: &Tensor2) -> Tensor2 {
    x.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Mean cross-entropy over rows with log-sum-exp stabilization.
///
/// Returns the loss together with its gradient w.r.t. the logits,
/// `(softmax - onehot) / n`.
pub fn softmax_cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    let (n, classes) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = Tensor2::zeros(n, classes);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        loss += lse - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

/// Row-wise argmax (ties resolve to the lower index).
pub fn argmax_rows(logits: &Tensor2) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
