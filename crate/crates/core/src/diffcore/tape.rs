//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Values live in an arena of [`Tensor`] buffers addressed by [`BufId`].
//! Builder methods evaluate eagerly (so shapes and finiteness are checked at
//! construction time) and record the operation; [`Tape::backward`] replays the
//! record in reverse, accumulating gradients for every buffer.
//!
//! All reductions run in a fixed sequential order, so identical inputs give
//! bitwise identical outputs and gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tensor::{log_sum_exp, ParameterSet, Tensor, COSINE_EPS};

/// Finite stand-in for log(0). Adding it to any plausible log-probability
/// keeps buffers finite while making exp() underflow to exactly 0.0, so
/// log-space recursions treat the entry as an impossible path.
pub const LOG_ZERO: f64 = -1e10;

const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Index of a buffer on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufId(usize);

impl BufId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Matmul { a: BufId, b: BufId, out: BufId },
    MatmulTransposeB { a: BufId, b: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Scale { x: BufId, c: f64, out: BufId },
    AddRowBroadcast { x: BufId, b: BufId, out: BufId },
    Gelu { x: BufId, out: BufId },
    Relu { x: BufId, out: BufId },
    Ln { x: BufId, out: BufId },
    LayerNormRows { x: BufId, gamma: BufId, beta: BufId, out: BufId },
    GroupNorm { x: BufId, gamma: BufId, beta: BufId, groups: usize, out: BufId },
    SoftmaxRows { x: BufId, out: BufId },
    LogSoftmaxRows { x: BufId, out: BufId },
    Conv1d {
        x: BufId,
        w: BufId,
        b: BufId,
        stride: usize,
        pad_left: usize,
        groups: usize,
        out: BufId,
    },
    ConvTemporal { x: BufId, w: BufId, b: BufId, out: BufId },
    Conv2d { x: BufId, w: BufId, b: BufId, pad: usize, out: BufId },
    AvgPool2d { x: BufId, window: usize, out: BufId },
    GlobalAvgPool2d { x: BufId, out: BufId },
    SliceCols { x: BufId, start: usize, end: usize, out: BufId },
    ConcatCols { xs: Vec<BufId>, out: BufId },
    ConcatRows { xs: Vec<BufId>, out: BufId },
    GatherRows { x: BufId, rows: Vec<usize>, out: BufId },
    OverwriteRows { x: BufId, m: BufId, rows: Vec<usize>, out: BufId },
    SliceRow { x: BufId, row: usize, out: BufId },
    Gather { x: BufId, indices: Vec<usize>, out: BufId },
    PadShiftRight { x: BufId, shift: usize, out: BufId },
    LogAddExp { a: BufId, b: BufId, out: BufId },
    LogSumExpVec { x: BufId, out: BufId },
    MeanRows { x: BufId, out: BufId },
    SumAll { x: BufId, out: BufId },
    SumList { xs: Vec<BufId>, out: BufId },
    CosineVecMat { u: BufId, m: BufId, out: BufId },
    CrossEntropyIndexVec { x: BufId, target: usize, out: BufId },
    SoftCrossEntropyVec { x: BufId, q: BufId, out: BufId },
}

/// Gradients for every buffer of a tape, indexed by [`BufId`].
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: BufId) -> &Tensor {
        &self.grads[id.0]
    }
}

#[derive(Default)]
pub struct Tape {
    bufs: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an input buffer (parameter, data, or constant).
    pub fn leaf(&mut self, t: Tensor) -> Result<BufId> {
        t.check_finite("leaf input")?;
        Ok(self.push(t))
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Result<BufId> {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: BufId) -> &Tensor {
        &self.bufs[id.0]
    }

    pub fn scalar_value(&self, id: BufId) -> Result<f64> {
        let t = &self.bufs[id.0];
        if t.numel() != 1 {
            return Err(Error::shape(format!(
                "expected scalar buffer, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    fn push(&mut self, t: Tensor) -> BufId {
        self.bufs.push(t);
        BufId(self.bufs.len() - 1)
    }

    fn finish(&mut self, t: Tensor, op: impl FnOnce(BufId) -> Op, what: &str) -> Result<BufId> {
        t.check_finite(what)?;
        let out = self.push(t);
        let op = op(out);
        self.ops.push(op);
        Ok(out)
    }

    fn dims2(&self, id: BufId, what: &str) -> Result<(usize, usize)> {
        let s = self.bufs[id.0].shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("{what}: expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn dims4(&self, id: BufId, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = self.bufs[id.0].shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("{what}: expected 4-D, got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn dims1(&self, id: BufId, what: &str) -> Result<usize> {
        let s = self.bufs[id.0].shape();
        if s.len() != 1 {
            return Err(Error::shape(format!("{what}: expected 1-D, got {s:?}")));
        }
        Ok(s[0])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {k} vs {k2} differ"
            )));
        }
        let av = self.bufs[a.0].data();
        let bv = self.bufs[b.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.finish(t, |out| Op::Matmul { a, b, out }, "matmul output")
    }

    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_transpose_b(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.dims2(a, "matmul_transpose_b lhs")?;
        let (n, k2) = self.dims2(b, "matmul_transpose_b rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_transpose_b inner dims {k} vs {k2} differ"
            )));
        }
        let av = self.bufs[a.0].data();
        let bv = self.bufs[b.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out[i * n + j] = s;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.finish(
            t,
            |out| Op::MatmulTransposeB { a, b, out },
            "matmul_transpose_b output",
        )
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a.0].shape() != self.bufs[b.0].shape() {
            return Err(Error::shape(format!(
                "add shapes {:?} vs {:?} differ",
                self.bufs[a.0].shape(),
                self.bufs[b.0].shape()
            )));
        }
        let data: Vec<f64> = self.bufs[a.0]
            .data()
            .iter()
            .zip(self.bufs[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.bufs[a.0].shape().to_vec(), data)?;
        self.finish(t, |out| Op::Add { a, b, out }, "add output")
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a.0].shape() != self.bufs[b.0].shape() {
            return Err(Error::shape(format!(
                "mul shapes {:?} vs {:?} differ",
                self.bufs[a.0].shape(),
                self.bufs[b.0].shape()
            )));
        }
        let data: Vec<f64> = self.bufs[a.0]
            .data()
            .iter()
            .zip(self.bufs[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.bufs[a.0].shape().to_vec(), data)?;
        self.finish(t, |out| Op::Mul { a, b, out }, "mul output")
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> Result<BufId> {
        if !c.is_finite() {
            return Err(Error::numeric("scale by non-finite constant"));
        }
        let data: Vec<f64> = self.bufs[x.0].data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.bufs[x.0].shape().to_vec(), data)?;
        self.finish(t, |out| Op::Scale { x, c, out }, "scale output")
    }

    /// `x + b` with `b` broadcast over rows: `x: [r,c]`, `b` of `c` elements.
    pub fn add_row_broadcast(&mut self, x: BufId, b: BufId) -> Result<BufId> {
        let (r, c) = self.dims2(x, "add_row_broadcast input")?;
        if self.bufs[b.0].numel() != c {
            return Err(Error::shape(format!(
                "add_row_broadcast bias has {} elements, want {c}",
                self.bufs[b.0].numel()
            )));
        }
        let xv = self.bufs[x.0].data();
        let bv = self.bufs[b.0].data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = xv[i * c + j] + bv[j];
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        self.finish(
            t,
            |out| Op::AddRowBroadcast { x, b, out },
            "add_row_broadcast output",
        )
    }

    // ---- elementwise nonlinearities ----

    pub fn gelu(&mut self, x: BufId) -> Result<BufId> {
        let data: Vec<f64> = self.bufs[x.0].data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::new(self.bufs[x.0].shape().to_vec(), data)?;
        self.finish(t, |out| Op::Gelu { x, out }, "gelu output")
    }

    pub fn relu(&mut self, x: BufId) -> Result<BufId> {
        let data: Vec<f64> = self.bufs[x.0].data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.bufs[x.0].shape().to_vec(), data)?;
        self.finish(t, |out| Op::Relu { x, out }, "relu output")
    }

    pub fn ln(&mut self, x: BufId) -> Result<BufId> {
        let data: Vec<f64> = self.bufs[x.0].data().iter().map(|&v| v.ln()).collect();
        let t = Tensor::new(self.bufs[x.0].shape().to_vec(), data)?;
        self.finish(t, |out| Op::Ln { x, out }, "ln output")
    }

    // ---- normalization ----

    /// Per-row layer normalization of `x: [r,c]` with affine `gamma`, `beta`
    /// of `c` elements each.
    pub fn layer_norm_rows(&mut self, x: BufId, gamma: BufId, beta: BufId) -> Result<BufId> {
        let (r, c) = self.dims2(x, "layer_norm_rows input")?;
        if self.bufs[gamma.0].numel() != c || self.bufs[beta.0].numel() != c {
            return Err(Error::shape(format!(
                "layer_norm_rows affine sizes {} / {} do not match width {c}",
                self.bufs[gamma.0].numel(),
                self.bufs[beta.0].numel()
            )));
        }
        let xv = self.bufs[x.0].data();
        let gv = self.bufs[gamma.0].data();
        let bv = self.bufs[beta.0].data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        self.finish(
            t,
            |out| Op::LayerNormRows { x, gamma, beta, out },
            "layer_norm_rows output",
        )
    }

    /// Group normalization of `x: [m, ch, h, w]` over (channels-in-group, h, w)
    /// per frame, with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: BufId,
        gamma: BufId,
        beta: BufId,
        groups: usize,
    ) -> Result<BufId> {
        let (m, ch, h, w) = self.dims4(x, "group_norm input")?;
        if groups == 0 || ch % groups != 0 {
            return Err(Error::shape(format!(
                "group_norm groups {groups} does not divide {ch} channels"
            )));
        }
        if self.bufs[gamma.0].numel() != ch || self.bufs[beta.0].numel() != ch {
            return Err(Error::shape(format!(
                "group_norm affine sizes {} / {} do not match {ch} channels",
                self.bufs[gamma.0].numel(),
                self.bufs[beta.0].numel()
            )));
        }
        let cg = ch / groups;
        let plane = h * w;
        let xv = self.bufs[x.0].data();
        let gv = self.bufs[gamma.0].data();
        let bv = self.bufs[beta.0].data();
        let mut data = vec![0.0; m * ch * plane];
        for fi in 0..m {
            for g in 0..groups {
                let start = fi * ch * plane + g * cg * plane;
                let slab = &xv[start..start + cg * plane];
                let (mean, var) = mean_var(slab);
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for cc in 0..cg {
                    let c = g * cg + cc;
                    for p in 0..plane {
                        let idx = start + cc * plane + p;
                        data[idx] = (xv[idx] - mean) * inv * gv[c] + bv[c];
                    }
                }
            }
        }
        let t = Tensor::new(vec![m, ch, h, w], data)?;
        self.finish(
            t,
            |out| Op::GroupNorm { x, gamma, beta, groups, out },
            "group_norm output",
        )
    }

    // ---- softmax family ----

    pub fn softmax_rows(&mut self, x: BufId) -> Result<BufId> {
        let (r, c) = self.dims2(x, "softmax_rows input")?;
        if c == 0 {
            return Err(Error::shape("softmax_rows over zero columns"));
        }
        let xv = self.bufs[x.0].data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        self.finish(t, |out| Op::SoftmaxRows { x, out }, "softmax_rows output")
    }

    pub fn log_softmax_rows(&mut self, x: BufId) -> Result<BufId> {
        let (r, c) = self.dims2(x, "log_softmax_rows input")?;
        if c == 0 {
            return Err(Error::shape("log_softmax_rows over zero columns"));
        }
        let xv = self.bufs[x.0].data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        self.finish(
            t,
            |out| Op::LogSoftmaxRows { x, out },
            "log_softmax_rows output",
        )
    }

    // ---- convolutions & pooling ----

    /// 1-D convolution over `x: [l, c_in]` (frame-major) with weights
    /// `w: [c_out, c_in/groups, k]`, bias `b: [c_out]`, zero padding, and
    /// stride; output `[(l + pads - k)/stride + 1, c_out]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: BufId,
        w: BufId,
        b: BufId,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
        groups: usize,
    ) -> Result<BufId> {
        let (l_in, c_in) = self.dims2(x, "conv1d input")?;
        let ws = self.bufs[w.0].shape().to_vec();
        if ws.len() != 3 {
            return Err(Error::shape(format!(
                "conv1d weight: expected 3-D, got {ws:?}"
            )));
        }
        let (c_out, c_in_g, k) = (ws[0], ws[1], ws[2]);
        if stride == 0 {
            return Err(Error::shape("conv1d stride must be >= 1"));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::shape(format!(
                "conv1d groups {groups} incompatible with channels {c_in} -> {c_out}"
            )));
        }
        if c_in_g != c_in / groups {
            return Err(Error::shape(format!(
                "conv1d weight expects {c_in_g} input channels per group, input has {}",
                c_in / groups
            )));
        }
        if self.bufs[b.0].numel() != c_out {
            return Err(Error::shape(format!(
                "conv1d bias has {} elements, want {c_out}",
                self.bufs[b.0].numel()
            )));
        }
        let l_pad = l_in + pad_left + pad_right;
        if l_pad < k {
            return Err(Error::shape(format!(
                "conv1d padded length {l_pad} shorter than kernel {k}"
            )));
        }
        let l_out = (l_pad - k) / stride + 1;
        let co_g = c_out / groups;
        let xv = self.bufs[x.0].data();
        let wv = self.bufs[w.0].data();
        let bv = self.bufs[b.0].data();
        let mut data = vec![0.0; l_out * c_out];
        for lo in 0..l_out {
            for co in 0..c_out {
                let g = co / co_g;
                let ci0 = g * c_in_g;
                let mut s = bv[co];
                for kk in 0..k {
                    let pos = lo * stride + kk;
                    if pos < pad_left || pos >= pad_left + l_in {
                        continue;
                    }
                    let li = pos - pad_left;
                    let xrow = &xv[li * c_in + ci0..li * c_in + ci0 + c_in_g];
                    let wrow = &wv[(co * c_in_g) * k + kk..];
                    for cig in 0..c_in_g {
                        s += wrow[cig * k] * xrow[cig];
                    }
                }
                data[lo * c_out + co] = s;
            }
        }
        let t = Tensor::new(vec![l_out, c_out], data)?;
        self.finish(
            t,
            |out| Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
                groups,
                out,
            },
            "conv1d output",
        )
    }

    /// Temporal convolution over `x: [m, c_in, h, w]` with same-length
    /// padding: weights `w: [c_out, c_in, k_t]` (k_t odd), per spatial
    /// position; output `[m, c_out, h, w]`.
    pub fn conv_temporal(&mut self, x: BufId, w: BufId, b: BufId) -> Result<BufId> {
        let (m, c_in, h, wd) = self.dims4(x, "conv_temporal input")?;
        let ws = self.bufs[w.0].shape().to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(Error::shape(format!(
                "conv_temporal weight {ws:?} does not match {c_in} input channels"
            )));
        }
        let (c_out, kt) = (ws[0], ws[2]);
        if kt % 2 == 0 {
            return Err(Error::shape(format!(
                "conv_temporal kernel {kt} must be odd for same-length padding"
            )));
        }
        if self.bufs[b.0].numel() != c_out {
            return Err(Error::shape(format!(
                "conv_temporal bias has {} elements, want {c_out}",
                self.bufs[b.0].numel()
            )));
        }
        let pad = (kt - 1) / 2;
        let plane = h * wd;
        let xv = self.bufs[x.0].data();
        let wv = self.bufs[w.0].data();
        let bv = self.bufs[b.0].data();
        let mut data = vec![0.0; m * c_out * plane];
        for fo in 0..m {
            for co in 0..c_out {
                let orow = &mut data[(fo * c_out + co) * plane..(fo * c_out + co + 1) * plane];
                for v in orow.iter_mut() {
                    *v = bv[co];
                }
                for kk in 0..kt {
                    let fi = fo + kk;
                    if fi < pad || fi >= pad + m {
                        continue;
                    }
                    let fi = fi - pad;
                    for ci in 0..c_in {
                        let wv1 = wv[(co * c_in + ci) * kt + kk];
                        let xrow = &xv[(fi * c_in + ci) * plane..(fi * c_in + ci + 1) * plane];
                        for p in 0..plane {
                            orow[p] += wv1 * xrow[p];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![m, c_out, h, wd], data)?;
        self.finish(
            t,
            |out| Op::ConvTemporal { x, w, b, out },
            "conv_temporal output",
        )
    }

    /// Per-frame 2-D convolution (stride 1) over `x: [m, c_in, h, w]` with
    /// weights `w: [c_out, c_in, kh, kw]` and symmetric zero padding `pad`.
    pub fn conv2d(&mut self, x: BufId, w: BufId, b: BufId, pad: usize) -> Result<BufId> {
        let (m, c_in, h, wd) = self.dims4(x, "conv2d input")?;
        let ws = self.bufs[w.0].shape().to_vec();
        if ws.len() != 4 || ws[1] != c_in {
            return Err(Error::shape(format!(
                "conv2d weight {ws:?} does not match {c_in} input channels"
            )));
        }
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.bufs[b.0].numel() != c_out {
            return Err(Error::shape(format!(
                "conv2d bias has {} elements, want {c_out}",
                self.bufs[b.0].numel()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let ho = h + 2 * pad - kh + 1;
        let wo = wd + 2 * pad - kw + 1;
        let xv = self.bufs[x.0].data();
        let wv = self.bufs[w.0].data();
        let bv = self.bufs[b.0].data();
        let mut data = vec![0.0; m * c_out * ho * wo];
        for fi in 0..m {
            for co in 0..c_out {
                let obase = (fi * c_out + co) * ho * wo;
                for v in &mut data[obase..obase + ho * wo] {
                    *v = bv[co];
                }
                for ci in 0..c_in {
                    let xbase = (fi * c_in + ci) * h * wd;
                    for kh_i in 0..kh {
                        for kw_i in 0..kw {
                            let wv1 = wv[((co * c_in + ci) * kh + kh_i) * kw + kw_i];
                            for oh in 0..ho {
                                let ih = oh + kh_i;
                                if ih < pad || ih >= pad + h {
                                    continue;
                                }
                                let ih = ih - pad;
                                for ow in 0..wo {
                                    let iw = ow + kw_i;
                                    if iw < pad || iw >= pad + wd {
                                        continue;
                                    }
                                    data[obase + oh * wo + ow] +=
                                        wv1 * xv[xbase + ih * wd + (iw - pad)];
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![m, c_out, ho, wo], data)?;
        self.finish(t, |out| Op::Conv2d { x, w, b, pad, out }, "conv2d output")
    }

    /// Non-overlapping average pooling with square window over `[m,c,h,w]`;
    /// `h` and `w` must be divisible by the window.
    pub fn avg_pool2d(&mut self, x: BufId, window: usize) -> Result<BufId> {
        let (m, c, h, w) = self.dims4(x, "avg_pool2d input")?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(format!(
                "avg_pool2d window {window} does not tile {h}x{w}"
            )));
        }
        let ho = h / window;
        let wo = w / window;
        let norm = 1.0 / (window * window) as f64;
        let xv = self.bufs[x.0].data();
        let mut data = vec![0.0; m * c * ho * wo];
        for fc in 0..m * c {
            let xbase = fc * h * w;
            let obase = fc * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = 0.0;
                    for dh in 0..window {
                        for dw in 0..window {
                            s += xv[xbase + (oh * window + dh) * w + ow * window + dw];
                        }
                    }
                    data[obase + oh * wo + ow] = s * norm;
                }
            }
        }
        let t = Tensor::new(vec![m, c, ho, wo], data)?;
        self.finish(t, |out| Op::AvgPool2d { x, window, out }, "avg_pool2d output")
    }

    /// Spatial mean over `[m,c,h,w]`, producing `[m,c]`.
    pub fn global_avg_pool2d(&mut self, x: BufId) -> Result<BufId> {
        let (m, c, h, w) = self.dims4(x, "global_avg_pool2d input")?;
        let plane = h * w;
        let norm = 1.0 / plane as f64;
        let xv = self.bufs[x.0].data();
        let mut data = vec![0.0; m * c];
        for fc in 0..m * c {
            let s: f64 = xv[fc * plane..(fc + 1) * plane].iter().sum();
            data[fc] = s * norm;
        }
        let t = Tensor::new(vec![m, c], data)?;
        self.finish(
            t,
            |out| Op::GlobalAvgPool2d { x, out },
            "global_avg_pool2d output",
        )
    }

    // ---- slicing / assembly ----

    pub fn slice_cols(&mut self, x: BufId, start: usize, end: usize) -> Result<BufId> {
        let (r, c) = self.dims2(x, "slice_cols input")?;
        if start >= end || end > c {
            return Err(Error::shape(format!(
                "slice_cols range {start}..{end} invalid for width {c}"
            )));
        }
        let width = end - start;
        let xv = self.bufs[x.0].data();
        let mut data = vec![0.0; r * width];
        for i in 0..r {
            data[i * width..(i + 1) * width]
                .copy_from_slice(&xv[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, width], data)?;
        self.finish(
            t,
            |out| Op::SliceCols { x, start, end, out },
            "slice_cols output",
        )
    }

    pub fn concat_cols(&mut self, xs: &[BufId]) -> Result<BufId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols of zero inputs"));
        }
        let (r, _) = self.dims2(xs[0], "concat_cols input")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ri, ci) = self.dims2(x, "concat_cols input")?;
            if ri != r {
                return Err(Error::shape(format!(
                    "concat_cols row counts {r} vs {ri} differ"
                )));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        for i in 0..r {
            let mut off = 0;
            for (&x, &ci) in xs.iter().zip(&widths) {
                let xv = self.bufs[x.0].data();
                data[i * total + off..i * total + off + ci]
                    .copy_from_slice(&xv[i * ci..(i + 1) * ci]);
                off += ci;
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        let xs = xs.to_vec();
        self.finish(t, |out| Op::ConcatCols { xs, out }, "concat_cols output")
    }

    pub fn concat_rows(&mut self, xs: &[BufId]) -> Result<BufId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_rows of zero inputs"));
        }
        let (_, c) = self.dims2(xs[0], "concat_rows input")?;
        let mut total = 0;
        for &x in xs {
            let (ri, ci) = self.dims2(x, "concat_rows input")?;
            if ci != c {
                return Err(Error::shape(format!(
                    "concat_rows widths {c} vs {ci} differ"
                )));
            }
            total += ri;
        }
        let mut data = Vec::with_capacity(total * c);
        for &x in xs {
            data.extend_from_slice(self.bufs[x.0].data());
        }
        let t = Tensor::new(vec![total, c], data)?;
        let xs = xs.to_vec();
        self.finish(t, |out| Op::ConcatRows { xs, out }, "concat_rows output")
    }

    /// Selects rows of `x: [t,c]` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: BufId, rows: &[usize]) -> Result<BufId> {
        let (t_len, c) = self.dims2(x, "gather_rows input")?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows of zero rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t_len) {
            return Err(Error::shape(format!(
                "gather_rows index {bad} out of range 0..{t_len}"
            )));
        }
        let xv = self.bufs[x.0].data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&xv[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        let rows = rows.to_vec();
        self.finish(t, |out| Op::GatherRows { x, rows, out }, "gather_rows output")
    }

    /// Copies `x: [t,c]` and overwrites the listed rows (strictly increasing)
    /// with the `c`-element vector `m`.
    pub fn overwrite_rows(&mut self, x: BufId, m: BufId, rows: &[usize]) -> Result<BufId> {
        let (t_len, c) = self.dims2(x, "overwrite_rows input")?;
        if self.bufs[m.0].numel() != c {
            return Err(Error::shape(format!(
                "overwrite_rows fill has {} elements, want {c}",
                self.bufs[m.0].numel()
            )));
        }
        if !rows.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::shape("overwrite_rows rows must be strictly increasing"));
        }
        if let Some(&bad) = rows.last().filter(|&&r| r >= t_len) {
            return Err(Error::shape(format!(
                "overwrite_rows index {bad} out of range 0..{t_len}"
            )));
        }
        let mut data = self.bufs[x.0].data().to_vec();
        let mv = self.bufs[m.0].data().to_vec();
        for &r in rows {
            data[r * c..(r + 1) * c].copy_from_slice(&mv);
        }
        let t = Tensor::new(vec![t_len, c], data)?;
        let rows = rows.to_vec();
        self.finish(
            t,
            |out| Op::OverwriteRows { x, m, rows, out },
            "overwrite_rows output",
        )
    }

    /// Row `row` of `x: [r,c]` as a 1-D vector.
    pub fn slice_row(&mut self, x: BufId, row: usize) -> Result<BufId> {
        let (r, c) = self.dims2(x, "slice_row input")?;
        if row >= r {
            return Err(Error::shape(format!(
                "slice_row index {row} out of range 0..{r}"
            )));
        }
        let data = self.bufs[x.0].row(row).to_vec();
        let t = Tensor::new(vec![c], data)?;
        self.finish(t, |out| Op::SliceRow { x, row, out }, "slice_row output")
    }

    /// Gathers elements of a 1-D vector by index (repeats allowed).
    pub fn gather(&mut self, x: BufId, indices: &[usize]) -> Result<BufId> {
        let n = self.dims1(x, "gather input")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range 0..{n}"
            )));
        }
        let xv = self.bufs[x.0].data();
        let data: Vec<f64> = indices.iter().map(|&i| xv[i]).collect();
        let t = Tensor::new(vec![indices.len()], data)?;
        let indices = indices.to_vec();
        self.finish(t, |out| Op::Gather { x, indices, out }, "gather output")
    }

    /// Shifts a 1-D vector right by `shift`, filling vacated slots with a
    /// constant and truncating the tail (same length out).
    pub fn pad_shift_right(&mut self, x: BufId, shift: usize, fill: f64) -> Result<BufId> {
        let n = self.dims1(x, "pad_shift_right input")?;
        if !fill.is_finite() {
            return Err(Error::numeric("pad_shift_right fill not finite"));
        }
        let xv = self.bufs[x.0].data();
        let mut data = vec![fill; n];
        for i in shift..n {
            data[i] = xv[i - shift];
        }
        let t = Tensor::new(vec![n], data)?;
        self.finish(
            t,
            |out| Op::PadShiftRight { x, shift, out },
            "pad_shift_right output",
        )
    }

    /// Elementwise log(exp(a) + exp(b)) in shifted form.
    pub fn log_add_exp(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a.0].shape() != self.bufs[b.0].shape() {
            return Err(Error::shape(format!(
                "log_add_exp shapes {:?} vs {:?} differ",
                self.bufs[a.0].shape(),
                self.bufs[b.0].shape()
            )));
        }
        let data: Vec<f64> = self.bufs[a.0]
            .data()
            .iter()
            .zip(self.bufs[b.0].data())
            .map(|(&x, &y)| {
                let m = x.max(y);
                m + ((x - m).exp() + (y - m).exp()).ln()
            })
            .collect();
        let t = Tensor::new(self.bufs[a.0].shape().to_vec(), data)?;
        self.finish(t, |out| Op::LogAddExp { a, b, out }, "log_add_exp output")
    }

    /// log(sum(exp(x))) of a 1-D vector, as a scalar.
    pub fn log_sum_exp_vec(&mut self, x: BufId) -> Result<BufId> {
        let n = self.dims1(x, "log_sum_exp_vec input")?;
        if n == 0 {
            return Err(Error::shape("log_sum_exp_vec of empty vector"));
        }
        let v = log_sum_exp(self.bufs[x.0].data());
        let t = Tensor::scalar(v);
        self.finish(t, |out| Op::LogSumExpVec { x, out }, "log_sum_exp_vec output")
    }

    // ---- reductions ----

    /// Mean over rows of `x: [t,c]`, producing `[1,c]`.
    pub fn mean_rows(&mut self, x: BufId) -> Result<BufId> {
        let (t_len, c) = self.dims2(x, "mean_rows input")?;
        if t_len == 0 {
            return Err(Error::shape("mean_rows of zero rows"));
        }
        let xv = self.bufs[x.0].data();
        let mut data = vec![0.0; c];
        for i in 0..t_len {
            for j in 0..c {
                data[j] += xv[i * c + j];
            }
        }
        let norm = 1.0 / t_len as f64;
        for v in &mut data {
            *v *= norm;
        }
        let t = Tensor::new(vec![1, c], data)?;
        self.finish(t, |out| Op::MeanRows { x, out }, "mean_rows output")
    }

    pub fn sum_all(&mut self, x: BufId) -> Result<BufId> {
        let s: f64 = self.bufs[x.0].data().iter().sum();
        let t = Tensor::scalar(s);
        self.finish(t, |out| Op::SumAll { x, out }, "sum_all output")
    }

    /// Sum of scalar buffers, in list order.
    pub fn sum_list(&mut self, xs: &[BufId]) -> Result<BufId> {
        if xs.is_empty() {
            return Err(Error::shape("sum_list of zero inputs"));
        }
        let mut s = 0.0;
        for &x in xs {
            if self.bufs[x.0].numel() != 1 {
                return Err(Error::shape(format!(
                    "sum_list input has shape {:?}, want scalar",
                    self.bufs[x.0].shape()
                )));
            }
            s += self.bufs[x.0].data()[0];
        }
        let t = Tensor::scalar(s);
        let xs = xs.to_vec();
        self.finish(t, |out| Op::SumList { xs, out }, "sum_list output")
    }

    // ---- similarity & losses ----

    /// Cosine similarity of a 1-D vector `u` against every row of `m: [n,d]`,
    /// with the norm floor and clamp of
    /// [`cosine_similarity`](super::tensor::cosine_similarity).
    pub fn cosine_vec_mat(&mut self, u: BufId, m: BufId) -> Result<BufId> {
        let d = self.dims1(u, "cosine_vec_mat vector")?;
        let (n, d2) = self.dims2(m, "cosine_vec_mat matrix")?;
        if d != d2 {
            return Err(Error::shape(format!(
                "cosine_vec_mat dims {d} vs {d2} differ"
            )));
        }
        let uv = self.bufs[u.0].data();
        let mv = self.bufs[m.0].data();
        let nu = norm(uv).max(COSINE_EPS);
        let mut data = vec![0.0; n];
        for i in 0..n {
            let row = &mv[i * d..(i + 1) * d];
            let nv = norm(row).max(COSINE_EPS);
            let dot: f64 = uv.iter().zip(row).map(|(a, b)| a * b).sum();
            data[i] = (dot / (nu * nv)).clamp(-1.0, 1.0);
        }
        let t = Tensor::new(vec![n], data)?;
        self.finish(t, |out| Op::CosineVecMat { u, m, out }, "cosine_vec_mat output")
    }

    /// `logsumexp(x) - x[target]`: cross-entropy of softmax(x) against a
    /// one-hot target, for a 1-D logit vector.
    pub fn cross_entropy_index_vec(&mut self, x: BufId, target: usize) -> Result<BufId> {
        let n = self.dims1(x, "cross_entropy_index_vec input")?;
        if target >= n {
            return Err(Error::shape(format!(
                "cross_entropy_index_vec target {target} out of range 0..{n}"
            )));
        }
        let xv = self.bufs[x.0].data();
        let v = log_sum_exp(xv) - xv[target];
        let t = Tensor::scalar(v);
        self.finish(
            t,
            |out| Op::CrossEntropyIndexVec { x, target, out },
            "cross_entropy_index_vec output",
        )
    }

    /// Cross-entropy of softmax(x) against a target distribution `q`:
    /// `logsumexp(x)·Σq − Σ qᵢxᵢ` (reduces to the one-hot form when q is
    /// one-hot).
    pub fn soft_cross_entropy_vec(&mut self, x: BufId, q: BufId) -> Result<BufId> {
        let n = self.dims1(x, "soft_cross_entropy_vec logits")?;
        let nq = self.dims1(q, "soft_cross_entropy_vec target")?;
        if n != nq {
            return Err(Error::shape(format!(
                "soft_cross_entropy_vec lengths {n} vs {nq} differ"
            )));
        }
        let xv = self.bufs[x.0].data();
        let qv = self.bufs[q.0].data();
        let qsum: f64 = qv.iter().sum();
        let dot: f64 = xv.iter().zip(qv).map(|(a, b)| a * b).sum();
        let v = log_sum_exp(xv) * qsum - dot;
        let t = Tensor::scalar(v);
        self.finish(
            t,
            |out| Op::SoftCrossEntropyVec { x, q, out },
            "soft_cross_entropy_vec output",
        )
    }

    // ---- backward ----

    /// Accumulates gradients of the scalar buffer `loss` with respect to
    /// every buffer on the tape.
    pub fn backward(&self, loss: BufId) -> Result<Gradients> {
        if self.bufs[loss.0].numel() != 1 {
            return Err(Error::shape(format!(
                "backward root has shape {:?}, want scalar",
                self.bufs[loss.0].shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .bufs
            .iter()
            .map(|b| Tensor::zeros(b.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient for buffer {i}"
                )));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, op: &Op, grads: &mut [Tensor]) -> Result<()> {
        match *op {
            Op::Matmul { a, b, out } => {
                let (m, k) = (self.bufs[a.0].shape()[0], self.bufs[a.0].shape()[1]);
                let n = self.bufs[b.0].shape()[1];
                let g = grads[out.0].data().to_vec();
                let av = self.bufs[a.0].data();
                let bv = self.bufs[b.0].data();
                {
                    let da = grads[a.0].data_mut();
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                let db = grads[b.0].data_mut();
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
            }
            Op::MatmulTransposeB { a, b, out } => {
                let (m, k) = (self.bufs[a.0].shape()[0], self.bufs[a.0].shape()[1]);
                let n = self.bufs[b.0].shape()[0];
                let g = grads[out.0].data().to_vec();
                let av = self.bufs[a.0].data();
                let bv = self.bufs[b.0].data();
                {
                    let da = grads[a.0].data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                }
                let db = grads[b.0].data_mut();
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            db[j * k + p] += gij * av[i * k + p];
                        }
                    }
                }
            }
            Op::Add { a, b, out } => {
                let g = grads[out.0].data().to_vec();
                accumulate(grads[a.0].data_mut(), &g);
                accumulate(grads[b.0].data_mut(), &g);
            }
            Op::Mul { a, b, out } => {
                let g = grads[out.0].data().to_vec();
                let av = self.bufs[a.0].data();
                let bv = self.bufs[b.0].data();
                {
                    let da = grads[a.0].data_mut();
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                let db = grads[b.0].data_mut();
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
            Op::Scale { x, c, out } => {
                let g = grads[out.0].data().to_vec();
                let dx = grads[x.0].data_mut();
                for i in 0..g.len() {
                    dx[i] += g[i] * c;
                }
            }
            Op::AddRowBroadcast { x, b, out } => {
                let (r, c) = (self.bufs[x.0].shape()[0], self.bufs[x.0].shape()[1]);
                let g = grads[out.0].data().to_vec();
                accumulate(grads[x.0].data_mut(), &g);
                let db = grads[b.0].data_mut();
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
            }
            Op::Gelu { x, out } => {
                let g = grads[out.0].data().to_vec();
                let xv = self.bufs[x.0].data();
                let dx = grads[x.0].data_mut();
                for i in 0..g.len() {
                    dx[i] += g[i] * gelu_bwd(xv[i]);
                }
            }
            Op::Relu { x, out } => {
                let g = grads[out.0].data().to_vec();
                let xv = self.bufs[x.0].data();
                let dx = grads[x.0].data_mut();
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Ln { x, out } => {
                let g = grads[out.0].data().to_vec();
                let xv = self.bufs[x.0].data();
                let dx = grads[x.0].data_mut();
                for i in 0..g.len() {
                    dx[i] += g[i] / xv[i];
                }
            }
            Op::LayerNormRows { x, gamma, beta, out } => {
                let (r, c) = (self.bufs[x.0].shape()[0], self.bufs[x.0].shape()[1]);
                let g = grads[out.0].data().to_vec();
                let xv = self.bufs[x.0].data();
                let gv = self.bufs[gamma.0].data();
                let cf = c as f64;
                let mut dx_all = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gv[j];
                        dx_all[i * c + j] =
                            inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                    }
                }
                accumulate(grads[x.0].data_mut(), &dx_all);
                accumulate(grads[gamma.0].data_mut(), &dgamma);
                accumulate(grads[beta.0].data_mut(), &dbeta);
            }
            Op::GroupNorm { x, gamma, beta, groups, out } => {
                let s = self.bufs[x.0].shape();
                let (m, ch, h, w) = (s[0], s[1], s[2], s[3]);
                let cg = ch / groups;
                let plane = h * w;
                let nf = (cg * plane) as f64;
                let g = grads[out.0].data().to_vec();
                let xv = self.bufs[x.0].data();
                let gv = self.bufs[gamma.0].data();
                let mut dx_all = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for fi in 0..m {
                    for gi in 0..groups {
                        let start = fi * ch * plane + gi * cg * plane;
                        let slab = &xv[start..start + cg * plane];
                        let (mean, var) = mean_var(slab);
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for cc in 0..cg {
                            let c = gi * cg + cc;
                            for p in 0..plane {
                                let idx = start + cc * plane + p;
                                let xhat = (xv[idx] - mean) * inv;
                                let dxhat = g[idx] * gv[c];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                                dgamma[c] += g[idx] * xhat;
                                dbeta[c] += g[idx];
                            }
                        }
                        for cc in 0..cg {
                            let c = gi * cg + cc;
                            for p in 0..plane {
                                let idx = start + cc * plane + p;
                                let xhat = (xv[idx] - mean) * inv;
                                let dxhat = g[idx] * gv[c];
                                dx_all[idx] =
                                    inv * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                            }
                        }
                    }
                }
                accumulate(grads[x.0].data_mut(), &dx_all);
                accumulate(grads[gamma.0].data_mut(), &dgamma);
                accumulate(grads[beta.0].data_mut(), &dbeta);
            }
            Op::SoftmaxRows { x, out } => {
                let (r, c) = (self.bufs[x.0].shape()[0], self.bufs[x.0].shape()[1]);
                let g = grads[out.0].data().to_vec();
                let pv = self.bufs[out.0].data();
                let dx = grads[x.0].data_mut();
                for i in 0..r {
                    let prow = &pv[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = prow.iter().zip(grow).map(|(p, gg)| p * gg).sum();
                    for j in 0..c {
                        dx[i * c + j] += prow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows { x, out } => {
                let (r, c) = (self.bufs[x.0].shape()[0], self.bufs[x.0].shape()[1]);
                let g = grads[out.0].data().to_vec();
                let yv = self.bufs[out.0].data();
                let dx = grads[x.0].data_mut();
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        dx[i * c + j] += grow[j] - yv[i * c + j].exp() * gsum;
                    }
                }
            }
            Op::Conv1d { x, w, b, stride, pad_left, groups, out, .. } => {
                let (l_in, c_in) = (self.bufs[x.0].shape()[0], self.bufs[x.0].shape()[1]);
                let ws = self.bufs[w.0].shape();
                let (c_out, c_in_g, k) = (ws[0], ws[1], ws[2]);
                let l_out = self.bufs[out.0].shape()[0];
                let co_g = c_out / groups;
                let g = grads[out.0].data().to_vec();
                let xv = self.bufs[x.0].data();
                let wv = self.bufs[w.0].data();
                let mut dx = vec![0.0; l_in * c_in];
                let mut dw = vec![0.0; c_out * c_in_g * k];
                let mut db = vec![0.0; c_out];
                for lo in 0..l_out {
                    for co in 0..c_out {
                        let gv1 = g[lo * c_out + co];
                        db[co] += gv1;
                        let gi = co / co_g;
                        let ci0 = gi * c_in_g;
                        for kk in 0..k {
                            let pos = lo * stride + kk;
                            if pos < pad_left || pos >= pad_left + l_in {
                                continue;
                            }
                            let li = pos - pad_left;
                            for cig in 0..c_in_g {
                                let widx = (co * c_in_g + cig) * k + kk;
                                let xidx = li * c_in + ci0 + cig;
                                dw[widx] += gv1 * xv[xidx];
                                dx[xidx] += gv1 * wv[widx];
                            }
                        }
                    }
                }
                accumulate(grads[x.0].data_mut(), &dx);
                accumulate(grads[w.0].data_mut(), &dw);
                accumulate(grads[b.0].data_mut(), &db);
            }
            Op::ConvTemporal { x, w, b, out } => {
                let s = self.bufs[x.0].shape();
                let (m, c_in, h, wd) = (s[0], s[1], s[2], s[3]);
                let ws = self.bufs[w.0].shape();
                let (c_out, kt) = (ws[0], ws[2]);
                let pad = (kt - 1) / 2;
                let plane = h * wd;
                let g = grads[out.0].data().to_vec();
                let xv = self.bufs[x.0].data();
                let wv = self.bufs[w.0].data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; c_out * c_in * kt];
                let mut db = vec![0.0; c_out];
                for fo in 0..m {
                    for co in 0..c_out {
                        let grow = &g[(fo * c_out + co) * plane..(fo * c_out + co + 1) * plane];
                        db[co] += grow.iter().sum::<f64>();
                        for kk in 0..kt {
                            let fi = fo + kk;
                            if fi < pad || fi >= pad + m {
                                continue;
                            }
                            let fi = fi - pad;
                            for ci in 0..c_in {
                                let widx = (co * c_in + ci) * kt + kk;
                                let xbase = (fi * c_in + ci) * plane;
                                let wv1 = wv[widx];
                                let mut s = 0.0;
                                for p in 0..plane {
                                    s += grow[p] * xv[xbase + p];
                                    dx[xbase + p] += grow[p] * wv1;
                                }
                                dw[widx] += s;
                            }
                        }
                    }
                }
                accumulate(grads[x.0].data_mut(), &dx);
                accumulate(grads[w.0].data_mut(), &dw);
                accumulate(grads[b.0].data_mut(), &db);
            }
            Op::Conv2d { x, w, b, pad, out } => {
                let s = self.bufs[x.0].shape();
                let (m, c_in, h, wd) = (s[0], s[1], s[2], s[3]);
                let ws = self.bufs[w.0].shape();
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = self.bufs[out.0].shape();
                let (ho, wo) = (os[2], os[3]);
                let g = grads[out.0].data().to_vec();
                let xv = self.bufs[x.0].data();
                let wv = self.bufs[w.0].data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; c_out * c_in * kh * kw];
                let mut db = vec![0.0; c_out];
                for fi in 0..m {
                    for co in 0..c_out {
                        let obase = (fi * c_out + co) * ho * wo;
                        db[co] += g[obase..obase + ho * wo].iter().sum::<f64>();
                        for ci in 0..c_in {
                            let xbase = (fi * c_in + ci) * h * wd;
                            for kh_i in 0..kh {
                                for kw_i in 0..kw {
                                    let widx = ((co * c_in + ci) * kh + kh_i) * kw + kw_i;
                                    let wv1 = wv[widx];
                                    let mut s = 0.0;
                                    for oh in 0..ho {
                                        let ih = oh + kh_i;
                                        if ih < pad || ih >= pad + h {
                                            continue;
                                        }
                                        let ih = ih - pad;
                                        for ow in 0..wo {
                                            let iw = ow + kw_i;
                                            if iw < pad || iw >= pad + wd {
                                                continue;
                                            }
                                            let gv1 = g[obase + oh * wo + ow];
                                            let xidx = xbase + ih * wd + (iw - pad);
                                            s += gv1 * xv[xidx];
                                            dx[xidx] += gv1 * wv1;
                                        }
                                    }
                                    dw[widx] += s;
                                }
                            }
                        }
                    }
                }
                accumulate(grads[x.0].data_mut(), &dx);
                accumulate(grads[w.0].data_mut(), &dw);
                accumulate(grads[b.0].data_mut(), &db);
            }
            Op::AvgPool2d { x, window, out } => {
                let s = self.bufs[x.0].shape();
                let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / window, w / window);
                let norm = 1.0 / (window * window) as f64;
                let g = grads[out.0].data().to_vec();
                let dx = grads[x.0].data_mut();
                for fc in 0..m * c {
                    let xbase = fc * h * w;
                    let obase = fc * ho * wo;
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gv1 = g[obase + oh * wo + ow] * norm;
                            for dh in 0..window {
                                for dw in 0..window {
                                    dx[xbase + (oh * window + dh) * w + ow * window + dw] += gv1;
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool2d { x, out } => {
                let s = self.bufs[x.0].shape();
                let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
                let plane = h * w;
                let norm = 1.0 / plane as f64;
                let g = grads[out.0].data().to_vec();
                let dx = grads[x.0].data_mut();
                for fc in 0..m * c {
                    let gv1 = g[fc] * norm;
                    for p in 0..plane {
                        dx[fc * plane + p] += gv1;
                    }
                }
            }
            Op::SliceCols { x, start, end, out } => {
                let c = self.bufs[x.0].shape()[1];
                let r = self.bufs[x.0].shape()[0];
                let width = end - start;
                let g = grads[out.0].data().to_vec();
                let dx = grads[x.0].data_mut();
                for i in 0..r {
                    for j in 0..width {
                        dx[i * c + start + j] += g[i * width + j];
                    }
                }
            }
            Op::ConcatCols { ref xs, out } => {
                let r = self.bufs[out.0].shape()[0];
                let total = self.bufs[out.0].shape()[1];
                let g = grads[out.0].data().to_vec();
                let mut off = 0;
                for &x in xs {
                    let ci = self.bufs[x.0].shape()[1];
                    let dx = grads[x.0].data_mut();
                    for i in 0..r {
                        for j in 0..ci {
                            dx[i * ci + j] += g[i * total + off + j];
                        }
                    }
                    off += ci;
                }
            }
            Op::ConcatRows { ref xs, out } => {
                let g = grads[out.0].data().to_vec();
                let mut off = 0;
                for &x in xs {
                    let n = self.bufs[x.0].numel();
                    accumulate(grads[x.0].data_mut(), &g[off..off + n]);
                    off += n;
                }
            }
            Op::GatherRows { x, ref rows, out } => {
                let c = self.bufs[x.0].shape()[1];
                let g = grads[out.0].data().to_vec();
                let dx = grads[x.0].data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[i * c + j];
                    }
                }
            }
            Op::OverwriteRows { x, m, ref rows, out } => {
                let (t_len, c) = (self.bufs[x.0].shape()[0], self.bufs[x.0].shape()[1]);
                let g = grads[out.0].data().to_vec();
                {
                    let dx = grads[x.0].data_mut();
                    let mut ri = 0;
                    for r in 0..t_len {
                        if ri < rows.len() && rows[ri] == r {
                            ri += 1;
                            continue;
                        }
                        for j in 0..c {
                            dx[r * c + j] += g[r * c + j];
                        }
                    }
                }
                let dm = grads[m.0].data_mut();
                for &r in rows {
                    for j in 0..c {
                        dm[j] += g[r * c + j];
                    }
                }
            }
            Op::SliceRow { x, row, out } => {
                let c = self.bufs[x.0].shape()[1];
                let g = grads[out.0].data().to_vec();
                let dx = grads[x.0].data_mut();
                for j in 0..c {
                    dx[row * c + j] += g[j];
                }
            }
            Op::Gather { x, ref indices, out } => {
                let g = grads[out.0].data().to_vec();
                let dx = grads[x.0].data_mut();
                for (j, &i) in indices.iter().enumerate() {
                    dx[i] += g[j];
                }
            }
            Op::PadShiftRight { x, shift, out, .. } => {
                let n = self.bufs[x.0].numel();
                let g = grads[out.0].data().to_vec();
                let dx = grads[x.0].data_mut();
                for i in shift..n {
                    dx[i - shift] += g[i];
                }
            }
            Op::LogAddExp { a, b, out } => {
                let g = grads[out.0].data().to_vec();
                let av = self.bufs[a.0].data();
                let bv = self.bufs[b.0].data();
                let ov = self.bufs[out.0].data();
                {
                    let da = grads[a.0].data_mut();
                    for i in 0..g.len() {
                        da[i] += g[i] * (av[i] - ov[i]).exp();
                    }
                }
                let db = grads[b.0].data_mut();
                for i in 0..g.len() {
                    db[i] += g[i] * (bv[i] - ov[i]).exp();
                }
            }
            Op::LogSumExpVec { x, out } => {
                let g = grads[out.0].data()[0];
                let xv = self.bufs[x.0].data();
                let ov = self.bufs[out.0].data()[0];
                let dx = grads[x.0].data_mut();
                for i in 0..xv.len() {
                    dx[i] += g * (xv[i] - ov).exp();
                }
            }
            Op::MeanRows { x, out } => {
                let (t_len, c) = (self.bufs[x.0].shape()[0], self.bufs[x.0].shape()[1]);
                let g = grads[out.0].data().to_vec();
                let norm = 1.0 / t_len as f64;
                let dx = grads[x.0].data_mut();
                for i in 0..t_len {
                    for j in 0..c {
                        dx[i * c + j] += g[j] * norm;
                    }
                }
            }
            Op::SumAll { x, out } => {
                let g = grads[out.0].data()[0];
                let dx = grads[x.0].data_mut();
                for v in dx.iter_mut() {
                    *v += g;
                }
            }
            Op::SumList { ref xs, out } => {
                let g = grads[out.0].data()[0];
                for &x in xs {
                    grads[x.0].data_mut()[0] += g;
                }
            }
            Op::CosineVecMat { u, m, out } => {
                let d = self.bufs[u.0].numel();
                let n = self.bufs[m.0].shape()[0];
                let g = grads[out.0].data().to_vec();
                let uv = self.bufs[u.0].data();
                let mv = self.bufs[m.0].data();
                let nu_raw = norm(uv);
                let nu = nu_raw.max(COSINE_EPS);
                let u_live = nu_raw >= COSINE_EPS;
                let mut du = vec![0.0; d];
                {
                    let dm = grads[m.0].data_mut();
                    for i in 0..n {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = &mv[i * d..(i + 1) * d];
                        let nv_raw = norm(row);
                        let nv = nv_raw.max(COSINE_EPS);
                        let v_live = nv_raw >= COSINE_EPS;
                        let dot: f64 = uv.iter().zip(row).map(|(a, b)| a * b).sum();
                        let s = dot / (nu * nv);
                        for j in 0..d {
                            let mut dui = row[j] / (nu * nv);
                            if u_live {
                                dui -= s * uv[j] / (nu * nu);
                            }
                            du[j] += gi * dui;
                            let mut dvi = uv[j] / (nu * nv);
                            if v_live {
                                dvi -= s * row[j] / (nv * nv);
                            }
                            dm[i * d + j] += gi * dvi;
                        }
                    }
                }
                accumulate(grads[u.0].data_mut(), &du);
            }
            Op::CrossEntropyIndexVec { x, target, out } => {
                let g = grads[out.0].data()[0];
                let xv = self.bufs[x.0].data();
                let lse = log_sum_exp(xv);
                let dx = grads[x.0].data_mut();
                for i in 0..xv.len() {
                    let p = (xv[i] - lse).exp();
                    dx[i] += g * (p - if i == target { 1.0 } else { 0.0 });
                }
            }
            Op::SoftCrossEntropyVec { x, q, out } => {
                let g = grads[out.0].data()[0];
                let xv = self.bufs[x.0].data();
                let qv = self.bufs[q.0].data();
                let qsum: f64 = qv.iter().sum();
                let lse = log_sum_exp(xv);
                {
                    let dx = grads[x.0].data_mut();
                    for i in 0..xv.len() {
                        dx[i] += g * ((xv[i] - lse).exp() * qsum - qv[i]);
                    }
                }
                let dq = grads[q.0].data_mut();
                for i in 0..xv.len() {
                    dq[i] += g * (lse - xv[i]);
                }
            }
        }
        Ok(())
    }
}

/// Parameter leaves staged onto a tape, addressed by parameter path.
pub type Staged = BTreeMap<String, BufId>;

impl Tape {
    /// Stages every parameter tensor as a leaf buffer.
    pub fn stage(&mut self, params: &ParameterSet) -> Result<Staged> {
        let mut map = BTreeMap::new();
        for (path, p) in params.iter() {
            map.insert(path.clone(), self.leaf(p.tensor.clone())?);
        }
        Ok(map)
    }
}

pub fn staged_param(staged: &Staged, path: &str) -> Result<BufId> {
    staged
        .get(path)
        .copied()
        .ok_or_else(|| Error::config(format!("parameter {path} is not staged on the tape")))
}

/// `x @ {path}.weight + {path}.bias` with both parameters looked up in the
/// staged set.
pub fn linear(tape: &mut Tape, staged: &Staged, path: &str, x: BufId) -> Result<BufId> {
    let w = staged_param(staged, &format!("{path}.weight"))?;
    let b = staged_param(staged, &format!("{path}.bias"))?;
    let out = tape.matmul(x, w)?;
    tape.add_row_broadcast(out, b)
}

/// Collects the gradient of every staged parameter, keyed by path.
pub fn grads_by_path(staged: &Staged, grads: &Gradients) -> BTreeMap<String, Tensor> {
    staged
        .iter()
        .map(|(path, &id)| (path.clone(), grads.get(id).clone()))
        .collect()
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean: f64 = v.iter().sum::<f64>() / n;
    let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn gelu_fwd(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}
