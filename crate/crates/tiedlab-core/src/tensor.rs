//! Dense tensor storage and the reshaping/GEMM primitives every layer is
//! built from.
//!
//! All data is 64-bit float in a fixed row-major layout: [`Tensor4`] is
//! N×C×H×W, [`Tensor2`] is rows×cols. There is no view or stride machinery;
//! every operation returns freshly allocated output and never mutates its
//! inputs.
//!
//! Determinism contract: [`matmul`] accumulates each output element as
//! `((0 + a[i,0]·b[0,j]) + a[i,1]·b[1,j]) + …` in strictly increasing `k`,
//! with no FMA contraction. Any two code paths that reduce to the same
//! sequence of these dot products therefore agree bit for bit, which is what
//! lets the folded-batch convolution path be compared bitwise against the
//! per-block path.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense rank-4 tensor in N×C×H×W layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "tensor dimensions must all be >= 1, got {n}x{c}x{h}x{w}"
            )));
        }
        let expect = n * c * h * w;
        if data.len() != expect {
            return Err(Error::shape(format!(
                "data length {} does not match {n}x{c}x{h}x{w} = {expect}",
                data.len()
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        assert!(n > 0 && c > 0 && h > 0 && w > 0, "zero tensor dimension");
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    /// Filled with `bound * [-1, 1)` draws in index order.
    pub fn random(n: usize, c: usize, h: usize, w: usize, bound: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        for v in t.data.iter_mut() {
            *v = bound * rng.next_f64();
        }
        t
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are always >= 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    /// One sample, all channels: the contiguous slice for sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let stride = self.c * self.h * self.w;
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        })
    }

    pub fn scale(&self, a: f64) -> Tensor4 {
        self.map(|v| a * v)
    }
}

/// Dense matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "matrix dimensions must be >= 1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "data length {} does not match {rows}x{cols} = {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero matrix dimension");
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn random(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = bound * rng.next_f64();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `[lo, hi)` as a contiguous slice.
    pub fn row_range(&self, lo: usize, hi: usize) -> &[f64] {
        &self.data[lo * self.cols..hi * self.cols]
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Raw GEMM inner loop shared by [`matmul`] and the convolution kernels.
///
/// `out` must hold `m * n` zeros on entry. Each output element accumulates
/// `a[i,k] * b[k,j]` in strictly increasing `k` starting from +0.0, which is
/// bitwise-equal to the textbook k-innermost triple loop; iterating `k` in
/// the middle just makes the B accesses row-contiguous.
pub(crate) fn matmul_into(a: &[f64], m: usize, kdim: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * kdim);
    debug_assert_eq!(b.len(), kdim * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * kdim..(i + 1) * kdim];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// Matrix product with 64-bit accumulation in a fixed summation order.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: inner dimensions disagree, {}x{} x {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    matmul_into(&a.data, a.rows, a.cols, &b.data, b.cols, &mut out.data);
    Ok(out)
}

/// Output spatial extent of a convolution along one axis, or an error when
/// the stride does not divide evenly or the kernel does not fit.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("stride must be >= 1".to_string()));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "kernel {k} does not fit input {input} with pad {pad}"
        )));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "output size ({input} + 2*{pad} - {k}) / {stride} + 1 is not an integer"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Lower patches of `x` into a (c·k·k) × (n·H'·W') matrix.
///
/// Columns are ordered sample-major then row-major spatial; rows are ordered
/// channel-major, then kernel row, then kernel column. Out-of-bounds taps
/// read as zero.
pub fn im2col(x: &Tensor4, k: usize, stride: usize, pad: usize) -> Result<Tensor2> {
    let (n, c, h, w) = x.dims();
    let oh = conv_out_dim(h, k, stride, pad)?;
    let ow = conv_out_dim(w, k, stride, pad)?;
    let rows = c * k * k;
    let cols = n * oh * ow;
    let mut out = Tensor2::zeros(rows, cols);
    for ni in 0..n {
        for y in 0..oh {
            for xcol in 0..ow {
                let col = (ni * oh + y) * ow + xcol;
                let mut row = 0usize;
                for ch in 0..c {
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (y * stride + kh) as isize - pad as isize;
                            let iw = (xcol * stride + kw) as isize - pad as isize;
                            let v = if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                0.0
                            } else {
                                x.at(ni, ch, ih as usize, iw as usize)
                            };
                            out.data[row * cols + col] = v;
                            row += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatter-add patch values back onto the input grid.
///
/// Satisfies `<im2col(x), y> == <x, col2im(y)>` for every y of matching
/// shape, which is exactly what the convolution input gradient needs.
pub fn col2im(
    cols: &Tensor2,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    let (n, c, h, w) = dims;
    let oh = conv_out_dim(h, k, stride, pad)?;
    let ow = conv_out_dim(w, k, stride, pad)?;
    if cols.rows != c * k * k || cols.cols != n * oh * ow {
        return Err(Error::shape(format!(
            "col2im: expected {}x{} matrix for {n}x{c}x{h}x{w}, got {}x{}",
            c * k * k,
            n * oh * ow,
            cols.rows,
            cols.cols
        )));
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for y in 0..oh {
            for xcol in 0..ow {
                let col = (ni * oh + y) * ow + xcol;
                let mut row = 0usize;
                for ch in 0..c {
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (y * stride + kh) as isize - pad as isize;
                            let iw = (xcol * stride + kw) as isize - pad as isize;
                            if ih >= 0 && iw >= 0 && ih < h as isize && iw < w as isize {
                                let i = out.idx(ni, ch, ih as usize, iw as usize);
                                out.data[i] += cols.data[row * cols.cols + col];
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Split the channel axis into `parts` equal contiguous blocks.
pub fn split_channels(x: &Tensor4, parts: usize) -> Result<Vec<Tensor4>> {
    let (n, c, h, w) = x.dims();
    if parts == 0 || c % parts != 0 {
        return Err(Error::shape(format!(
            "cannot split {c} channels into {parts} equal blocks"
        )));
    }
    let cb = c / parts;
    let plane = h * w;
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        let mut data = Vec::with_capacity(n * cb * plane);
        for ni in 0..n {
            let base = (ni * c + p * cb) * plane;
            data.extend_from_slice(&x.data[base..base + cb * plane]);
        }
        out.push(Tensor4::new(n, cb, h, w, data)?);
    }
    Ok(out)
}

/// Concatenate along the channel axis. Inverse of [`split_channels`].
pub fn concat_channels(parts: &[Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels: empty input".to_string()))?;
    let (n, _, h, w) = first.dims();
    let mut c_total = 0;
    for p in parts {
        if p.n() != n || p.h() != h || p.w() != w {
            return Err(Error::shape(format!(
                "concat_channels: mismatched dims {:?} vs {:?}",
                p.dims(),
                first.dims()
            )));
        }
        c_total += p.c();
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c_total * plane);
    for ni in 0..n {
        for p in parts {
            let stride = p.c() * plane;
            data.extend_from_slice(&p.data[ni * stride..(ni + 1) * stride]);
        }
    }
    Tensor4::new(n, c_total, h, w, data)
}

/// Reinterpret `b` channel blocks as extra batch entries.
///
/// Output sample `i*b + j` holds channels `[j*c/b, (j+1)*c/b)` of input
/// sample `i`; [`unfold_batch_to_blocks`] restores the input bitwise. This is
/// the reshape that lets one thin filter bank produce every block's response
/// in a single convolution pass.
pub fn fold_blocks_to_batch(x: &Tensor4, b: usize) -> Result<Tensor4> {
    let (n, c, h, w) = x.dims();
    if b == 0 || c % b != 0 {
        return Err(Error::shape(format!(
            "cannot fold {c} channels into {b} blocks"
        )));
    }
    let cb = c / b;
    let plane = h * w;
    let mut data = Vec::with_capacity(x.len());
    for ni in 0..n {
        for j in 0..b {
            let base = (ni * c + j * cb) * plane;
            data.extend_from_slice(&x.data[base..base + cb * plane]);
        }
    }
    Tensor4::new(n * b, cb, h, w, data)
}

/// Inverse of [`fold_blocks_to_batch`].
pub fn unfold_batch_to_blocks(x: &Tensor4, b: usize) -> Result<Tensor4> {
    let (nb, cb, h, w) = x.dims();
    if b == 0 || nb % b != 0 {
        return Err(Error::shape(format!(
            "cannot unfold batch {nb} into blocks of {b}"
        )));
    }
    let n = nb / b;
    let plane = h * w;
    let stride = cb * plane;
    let mut data = Vec::with_capacity(x.len());
    for ni in 0..n {
        for j in 0..b {
            let base = (ni * b + j) * stride;
            data.extend_from_slice(&x.data[base..base + stride]);
        }
    }
    Tensor4::new(n, cb * b, h, w, data)
}

/// Inner product of two equal-length buffers, summed in index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::bitwise_eq;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor2 {
        Tensor2::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let i = Tensor2::identity(2);
        let left = matmul(&i, &a).unwrap();
        let right = matmul(&a, &i).unwrap();
        assert!(bitwise_eq(left.data(), a.data()));
        assert!(bitwise_eq(right.data(), a.data()));
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor2::zeros(3, 4);
        let mut rng = Rng::seeded(1);
        let b = Tensor2::random(4, 2, 1.0, &mut rng);
        let y = matmul(&z, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!((y.rows(), y.cols()), (3, 2));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(4, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn im2col_hand_enumeration() {
        let x = Tensor4::new(
            1,
            1,
            3,
            3,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let m = im2col(&x, 2, 1, 0).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 4));
        let col = |j: usize| (0..4).map(|i| m.at(i, j)).collect::<Vec<_>>();
        assert_eq!(col(0), vec![1.0, 2.0, 4.0, 5.0]);
        assert_eq!(col(1), vec![2.0, 3.0, 5.0, 6.0]);
        assert_eq!(col(2), vec![4.0, 5.0, 7.0, 8.0]);
        assert_eq!(col(3), vec![5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn im2col_1x1_kernel_is_relayout() {
        let mut rng = Rng::seeded(9);
        let x = Tensor4::random(2, 3, 2, 2, 1.0, &mut rng);
        let m = im2col(&x, 1, 1, 0).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 2 * 2 * 2));
        for ni in 0..2 {
            for ch in 0..3 {
                for y in 0..2 {
                    for xx in 0..2 {
                        let col = (ni * 2 + y) * 2 + xx;
                        assert_eq!(m.at(ch, col), x.at(ni, ch, y, xx));
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_padding_case() {
        let x = Tensor4::new(1, 1, 1, 1, vec![3.5]).unwrap();
        let m = im2col(&x, 3, 1, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (9, 1));
        for i in 0..9 {
            let expect = if i == 4 { 3.5 } else { 0.0 };
            assert_eq!(m.at(i, 0), expect);
        }
    }

    #[test]
    fn im2col_non_integer_output_rejected() {
        let x = Tensor4::zeros(1, 1, 4, 4);
        // (4 + 2 - 3) / 2 is not an integer
        assert!(matches!(im2col(&x, 3, 2, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn col2im_adjoint_identity() {
        let mut rng = Rng::seeded(11);
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (2, 2, 0), (3, 2, 1), (1, 1, 0)] {
            // pick the input extent so the output extent is exactly 3
            let h = 2 * stride + k - 2 * pad;
            let x = Tensor4::random(2, 3, h, h, 1.0, &mut rng);
            let lowered = im2col(&x, k, stride, pad).unwrap();
            let y = Tensor2::random(lowered.rows(), lowered.cols(), 1.0, &mut rng);
            let back = col2im(&y, x.dims(), k, stride, pad).unwrap();
            let lhs = dot(lowered.data(), y.data());
            let rhs = dot(x.data(), back.data());
            let denom = lhs.abs().max(rhs.abs()).max(1.0);
            assert!(
                ((lhs - rhs) / denom).abs() <= 1e-12,
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn split_channels_ranges() {
        let mut x = Tensor4::zeros(1, 4, 1, 1);
        for ch in 0..4 {
            x.set(0, ch, 0, 0, ch as f64);
        }
        let parts = split_channels(&x, 2).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].data(), &[0.0, 1.0]);
        assert_eq!(parts[1].data(), &[2.0, 3.0]);
    }

    #[test]
    fn split_one_part_is_identity() {
        let mut rng = Rng::seeded(2);
        let x = Tensor4::random(2, 3, 2, 2, 1.0, &mut rng);
        let parts = split_channels(&x, 1).unwrap();
        assert!(bitwise_eq(parts[0].data(), x.data()));
    }

    #[test]
    fn split_full_gives_single_channel_parts() {
        let mut rng = Rng::seeded(3);
        let x = Tensor4::random(1, 5, 2, 2, 1.0, &mut rng);
        let parts = split_channels(&x, 5).unwrap();
        assert_eq!(parts.len(), 5);
        assert!(parts.iter().all(|p| p.c() == 1));
        let back = concat_channels(&parts).unwrap();
        assert!(bitwise_eq(back.data(), x.data()));
    }

    #[test]
    fn split_rejects_non_divisible() {
        let x = Tensor4::zeros(1, 5, 1, 1);
        let err = split_channels(&x, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn fold_single_block_is_identity() {
        let mut rng = Rng::seeded(4);
        let x = Tensor4::random(2, 4, 3, 3, 1.0, &mut rng);
        let folded = fold_blocks_to_batch(&x, 1).unwrap();
        assert!(bitwise_eq(folded.data(), x.data()));
        assert_eq!(folded.dims(), x.dims());
    }

    #[test]
    fn fold_two_planes() {
        let mut x = Tensor4::zeros(1, 2, 2, 2);
        for i in 0..4 {
            x.data_mut()[i] = 1.0; // plane 0
            x.data_mut()[4 + i] = 2.0; // plane 1
        }
        let folded = fold_blocks_to_batch(&x, 2).unwrap();
        assert_eq!(folded.dims(), (2, 1, 2, 2));
        assert!(folded.sample(0).iter().all(|&v| v == 1.0));
        assert!(folded.sample(1).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn fold_unfold_round_trip() {
        let mut rng = Rng::seeded(5);
        let x = Tensor4::random(2, 8, 5, 5, 1.0, &mut rng);
        for &b in &[1usize, 2, 4, 8] {
            let back = unfold_batch_to_blocks(&fold_blocks_to_batch(&x, b).unwrap(), b).unwrap();
            assert!(
                bitwise_eq(back.data(), x.data()),
                "round trip failed for b={b}"
            );
        }
    }

    #[test]
    fn constructors_validate() {
        assert!(Tensor4::new(1, 1, 1, 1, vec![0.0; 2]).is_err());
        assert!(Tensor4::new(0, 1, 1, 1, vec![]).is_err());
        assert!(Tensor2::new(2, 2, vec![0.0; 3]).is_err());
    }
}
