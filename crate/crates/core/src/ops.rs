//! Forward and backward kernels on plain tensors.
//!
//! These are the numerical workhorses behind [`crate::autodiff::Var`]; each
//! backward kernel takes the upstream gradient and returns gradients for
//! the inputs. Matrix products go through `matrixmultiply::dgemm`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to the second KL operand before taking its log.
pub const KL_EPSILON: f64 = 1e-12;

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = a·b + beta·c` for an `m × k` by `k × n` product, `c` row-major with
/// the given row/column strides.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
    c_col_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c_offset + i * c_row_stride + j * c_col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.max_index(m, k) < a.data.len());
    assert!(b.max_index(k, n) < b.data.len());
    assert!(c_offset + (m - 1) * c_row_stride + (n - 1) * c_col_stride < c.len());
    // SAFETY: the assertions above keep every strided access inside the
    // backing slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            c_col_stride as isize,
        );
    }
}

fn require_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank(a, 2, "matmul lhs")?;
    require_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        MatRef::rows(a.data(), k),
        MatRef::rows(b.data(), n),
        0.0,
        &mut out,
        0,
        n,
        1,
    );
    Tensor::new(vec![m, n], out)
}

/// Gradients of `a·b` given the upstream gradient `g`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![0.0; m * k];
    gemm(
        m,
        n,
        k,
        MatRef::rows(g.data(), n),
        MatRef::transposed(b.data(), n),
        0.0,
        &mut da,
        0,
        k,
        1,
    );
    let mut db = vec![0.0; k * n];
    gemm(
        k,
        m,
        n,
        MatRef::transposed(a.data(), k),
        MatRef::rows(g.data(), n),
        0.0,
        &mut db,
        0,
        n,
        1,
    );
    (
        Tensor::new(vec![m, k], da).expect("shape"),
        Tensor::new(vec![k, n], db).expect("shape"),
    )
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    require_rank(a, 2, "transpose")?;
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Softmax along `axis` with max subtraction. Entries equal to `-inf` get
/// weight zero; a lane with no finite entry is a contract error.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::contract("softmax lane has no finite entry"));
            }
            let mut total = 0.0;
            for i in 0..n {
                let e = (src[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..n {
                out[idx(i)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis).expect("validated in forward");
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let dot: f64 = (0..n).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
            for i in 0..n {
                out[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("shape")
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::contract("log_softmax lane has no finite entry"));
            }
            let lse = max + (0..n).map(|i| (src[idx(i)] - max).exp()).sum::<f64>().ln();
            for i in 0..n {
                out[idx(i)] = src[idx(i)] - lse;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradient of log-softmax given its output `y`.
pub fn log_softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis).expect("validated in forward");
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let total: f64 = (0..n).map(|i| gd[idx(i)]).sum();
            for i in 0..n {
                out[idx(i)] = gd[idx(i)] - yd[idx(i)].exp() * total;
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("shape")
}

/// Mean over all non-axis positions of `Σ p·ln(p/q)`, with `q` floored at
/// [`KL_EPSILON`] and `0·ln 0 = 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor, axis: usize) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::dim(format!(
            "kl operands differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let (outer, _, inner) = axis_split(p.shape(), axis)?;
    if p.data().iter().chain(q.data()).any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::domain("kl divergence of negative or NaN entries"));
    }
    let lanes = (outer * inner) as f64;
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_EPSILON).ln()))
        .sum();
    Ok(total / lanes)
}

pub fn kl_divergence_backward(p: &Tensor, q: &Tensor, axis: usize, g: f64) -> (Tensor, Tensor) {
    let (outer, _, inner) = axis_split(p.shape(), axis).expect("validated in forward");
    let scale = g / (outer * inner) as f64;
    let mut dp = vec![0.0; p.len()];
    let mut dq = vec![0.0; q.len()];
    for (i, (&pi, &qi)) in p.data().iter().zip(q.data()).enumerate() {
        let lq = qi.max(KL_EPSILON).ln();
        let lp = if pi > 0.0 { pi.ln() } else { KL_EPSILON.ln() };
        dp[i] = scale * (lp - lq + 1.0);
        if qi > KL_EPSILON {
            dq[i] = -scale * pi / qi;
        }
    }
    (
        Tensor::new(p.shape().to_vec(), dp).expect("shape"),
        Tensor::new(q.shape().to_vec(), dq).expect("shape"),
    )
}

/// Convolution hyper-parameters. Spatial padding is always
/// `dilation·(k−1)/2` per side; the optional leading time axis is unpadded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const UNIT: ConvSpec = ConvSpec {
        stride: 1,
        dilation: 1,
    };

    pub fn dilated(dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
        }
    }

    pub fn strided(stride: usize) -> Self {
        ConvSpec {
            stride,
            dilation: 1,
        }
    }
}

#[derive(Debug)]
struct ConvGeom {
    temporal: bool,
    cin: usize,
    cout: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    t_out: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::dim("conv stride and dilation must be >= 1"));
        }
        let (temporal, cin, t, h, wd) = match x.len() {
            3 => (false, x[0], 1, x[1], x[2]),
            4 => (true, x[0], x[1], x[2], x[3]),
            _ => return Err(Error::dim(format!("conv input must be rank 3 or 4, got {x:?}"))),
        };
        let (cout, wcin, kt, kh, kw) = match (temporal, w.len()) {
            (false, 4) => (w[0], w[1], 1, w[2], w[3]),
            (true, 5) => (w[0], w[1], w[2], w[3], w[4]),
            _ => {
                return Err(Error::dim(format!(
                    "conv weight {w:?} does not match input {x:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv channels: input has {cin}, weight expects {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!("conv spatial kernel {kh}x{kw} must be odd")));
        }
        if kt > t {
            return Err(Error::dim(format!("temporal kernel {kt} exceeds length {t}")));
        }
        let out_len = |len: usize, k: usize| {
            let pad = spec.dilation * (k - 1) / 2;
            (len + 2 * pad - spec.dilation * (k - 1) - 1) / spec.stride + 1
        };
        Ok(ConvGeom {
            temporal,
            cin,
            cout,
            t,
            h,
            w: wd,
            kt,
            kh,
            kw,
            t_out: t - kt + 1,
            h_out: out_len(h, kh),
            w_out: out_len(wd, kw),
        })
    }

    fn taps(&self) -> usize {
        self.kt * self.kh * self.kw
    }

    fn in_positions(&self) -> usize {
        self.t * self.h * self.w
    }

    fn out_positions(&self) -> usize {
        self.t_out * self.h_out * self.w_out
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.temporal {
            vec![self.cout, self.t_out, self.h_out, self.w_out]
        } else {
            vec![self.cout, self.h_out, self.w_out]
        }
    }

    /// For every kernel tap, the (output position, input position) pairs
    /// that land inside the unpadded input.
    fn plan(&self, spec: ConvSpec) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
        let pad_h = (spec.dilation * (self.kh - 1) / 2) as isize;
        let pad_w = (spec.dilation * (self.kw - 1) / 2) as isize;
        let mut plan = Vec::with_capacity(self.taps());
        for dt in 0..self.kt {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let tap = (dt * self.kh + dy) * self.kw + dx;
                    let mut outs = Vec::new();
                    let mut ins = Vec::new();
                    for to in 0..self.t_out {
                        let ti = to + dt;
                        for yo in 0..self.h_out {
                            let yi = (yo * spec.stride) as isize + (dy * spec.dilation) as isize - pad_h;
                            if yi < 0 || yi >= self.h as isize {
                                continue;
                            }
                            for xo in 0..self.w_out {
                                let xi = (xo * spec.stride) as isize + (dx * spec.dilation) as isize
                                    - pad_w;
                                if xi < 0 || xi >= self.w as isize {
                                    continue;
                                }
                                outs.push((to * self.h_out + yo) * self.w_out + xo);
                                ins.push((ti * self.h + yi as usize) * self.w + xi as usize);
                            }
                        }
                    }
                    if !outs.is_empty() {
                        plan.push((tap, outs, ins));
                    }
                }
            }
        }
        plan
    }
}

fn gather_columns(src: &[f64], rows: usize, row_len: usize, cols: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols.len()];
    for r in 0..rows {
        let row = &src[r * row_len..(r + 1) * row_len];
        let dst = &mut out[r * cols.len()..(r + 1) * cols.len()];
        for (d, &c) in dst.iter_mut().zip(cols) {
            *d = row[c];
        }
    }
    out
}

fn scatter_add_columns(dst: &mut [f64], rows: usize, row_len: usize, cols: &[usize], src: &[f64]) {
    for r in 0..rows {
        let row = &mut dst[r * row_len..(r + 1) * row_len];
        let s = &src[r * cols.len()..(r + 1) * cols.len()];
        for (&c, &v) in cols.iter().zip(s) {
            row[c] += v;
        }
    }
}

/// Cross-correlation of `x` (`C_in×H×W` or `C_in×T×H×W`) with `w`
/// (`C_out×C_in×kh×kw` or `C_out×C_in×kt×kh×kw`).
pub fn conv(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let (p_in, p_out, taps) = (g.in_positions(), g.out_positions(), g.taps());
    let mut out = vec![0.0; g.cout * p_out];
    let mut y = Vec::new();
    for (tap, outs, ins) in g.plan(spec) {
        let pv = outs.len();
        let xg = gather_columns(x.data(), g.cin, p_in, &ins);
        y.clear();
        y.resize(g.cout * pv, 0.0);
        let wt = MatRef {
            data: w.data(),
            offset: tap,
            row_stride: g.cin * taps,
            col_stride: taps,
        };
        gemm(g.cout, g.cin, pv, wt, MatRef::rows(&xg, pv), 0.0, &mut y, 0, pv, 1);
        scatter_add_columns(&mut out, g.cout, p_out, &outs, &y);
    }
    Tensor::new(g.out_shape(), out)
}

/// Gradients of [`conv`] with respect to input and weight.
pub fn conv_backward(x: &Tensor, w: &Tensor, gy: &Tensor, spec: ConvSpec) -> (Tensor, Tensor) {
    let g = ConvGeom::new(x.shape(), w.shape(), spec).expect("validated in forward");
    let (p_in, p_out, taps) = (g.in_positions(), g.out_positions(), g.taps());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut dxg = Vec::new();
    for (tap, outs, ins) in g.plan(spec) {
        let pv = outs.len();
        let xg = gather_columns(x.data(), g.cin, p_in, &ins);
        let gyg = gather_columns(gy.data(), g.cout, p_out, &outs);
        // dW[:, :, tap] += gy_g · x_gᵀ
        gemm(
            g.cout,
            pv,
            g.cin,
            MatRef::rows(&gyg, pv),
            MatRef::transposed(&xg, pv),
            1.0,
            &mut dw,
            tap,
            g.cin * taps,
            taps,
        );
        // dx_g = W[:, :, tap]ᵀ · gy_g
        dxg.clear();
        dxg.resize(g.cin * pv, 0.0);
        let wt_t = MatRef {
            data: w.data(),
            offset: tap,
            row_stride: taps,
            col_stride: g.cin * taps,
        };
        gemm(g.cin, g.cout, pv, wt_t, MatRef::rows(&gyg, pv), 0.0, &mut dxg, 0, pv, 1);
        scatter_add_columns(&mut dx, g.cin, p_in, &ins, &dxg);
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
    )
}

/// Spatial max pooling over the last two axes of a rank-3 or rank-4 tensor.
/// Returns the pooled tensor and, per output element, the flat input index
/// of the selected maximum (first occurrence wins).
pub fn maxpool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let rank = x.rank();
    if !(rank == 3 || rank == 4) {
        return Err(Error::dim(format!("maxpool2d needs rank 3 or 4, got {:?}", x.shape())));
    }
    if kernel == 0 || stride == 0 {
        return Err(Error::dim("maxpool2d kernel and stride must be >= 1"));
    }
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    if h < kernel || w < kernel || !(h - kernel).is_multiple_of(stride) || !(w - kernel).is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "maxpool2d kernel {kernel} stride {stride} does not tile {h}x{w}"
        )));
    }
    let planes: usize = x.shape()[..rank - 2].iter().product();
    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let src = x.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for yo in 0..ho {
            for xo in 0..wo {
                let mut best = base + yo * stride * w + xo * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (yo * stride + ky) * w + xo * stride + kx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = ho;
    shape[rank - 1] = wo;
    Ok((Tensor::new(shape, out)?, argmax))
}

pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    if a.rank() != b.rank()
        || axis >= a.rank()
        || a
            .shape()
            .iter()
            .zip(b.shape())
            .enumerate()
            .any(|(i, (x, y))| i != axis && x != y)
    {
        return Err(Error::dim(format!(
            "concat on axis {axis}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (outer, na, inner) = axis_split(a.shape(), axis)?;
    let nb = b.shape()[axis];
    let mut out = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        out.extend_from_slice(&a.data()[o * na * inner..(o + 1) * na * inner]);
        out.extend_from_slice(&b.data()[o * nb * inner..(o + 1) * nb * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = na + nb;
    Tensor::new(shape, out)
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    if len == 0 || start + len > n {
        return Err(Error::dim(format!(
            "slice [{start}, {}) out of range for axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[from..from + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Adds the gradient of a slice back into a zero tensor of the source shape.
pub fn slice_backward(src_shape: &[usize], axis: usize, start: usize, g: &Tensor) -> Tensor {
    let (outer, n, inner) = axis_split(src_shape, axis).expect("validated in forward");
    let len = g.shape()[axis];
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let to = (o * n + start) * inner;
        out[to..to + len * inner]
            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(src_shape.to_vec(), out).expect("shape")
}

/// `S(p, q) = −‖m_p − q_q‖²` for column-stacked keys `m: C×N_m`, `q: C×N_q`,
/// evaluated as `2·mᵀq − ‖m_p‖² − ‖q_q‖²` and clamped at zero from above.
pub fn neg_sq_dist(m: &Tensor, q: &Tensor) -> Result<Tensor> {
    require_rank(m, 2, "similarity memory keys")?;
    require_rank(q, 2, "similarity query keys")?;
    let (c, nm) = (m.shape()[0], m.shape()[1]);
    let (c2, nq) = (q.shape()[0], q.shape()[1]);
    if c != c2 {
        return Err(Error::dim(format!(
            "similarity channel mismatch: {c} vs {c2}"
        )));
    }
    let mut s = vec![0.0; nm * nq];
    gemm(
        nm,
        c,
        nq,
        MatRef::transposed(m.data(), nm),
        MatRef::rows(q.data(), nq),
        0.0,
        &mut s,
        0,
        nq,
        1,
    );
    let col_norms = |t: &Tensor, n: usize| -> Vec<f64> {
        let mut norms = vec![0.0; n];
        for ch in 0..c {
            for (j, v) in t.data()[ch * n..(ch + 1) * n].iter().enumerate() {
                norms[j] += v * v;
            }
        }
        norms
    };
    let mn = col_norms(m, nm);
    let qn = col_norms(q, nq);
    for p in 0..nm {
        for j in 0..nq {
            let v = 2.0 * s[p * nq + j] - mn[p] - qn[j];
            s[p * nq + j] = v.min(0.0);
        }
    }
    Tensor::new(vec![nm, nq], s)
}

pub fn neg_sq_dist_backward(m: &Tensor, q: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (c, nm) = (m.shape()[0], m.shape()[1]);
    let nq = q.shape()[1];
    let gd = g.data();
    let row_sum: Vec<f64> = (0..nm).map(|p| gd[p * nq..(p + 1) * nq].iter().sum()).collect();
    let mut col_sum = vec![0.0; nq];
    for p in 0..nm {
        for j in 0..nq {
            col_sum[j] += gd[p * nq + j];
        }
    }
    // dm = -2 (m ∘ rowsum(G) − q Gᵀ)
    let mut q_gt = vec![0.0; c * nm];
    gemm(
        c,
        nq,
        nm,
        MatRef::rows(q.data(), nq),
        MatRef::transposed(gd, nq),
        0.0,
        &mut q_gt,
        0,
        nm,
        1,
    );
    let mut dm = vec![0.0; c * nm];
    for ch in 0..c {
        for p in 0..nm {
            let i = ch * nm + p;
            dm[i] = -2.0 * (m.data()[i] * row_sum[p] - q_gt[i]);
        }
    }
    // dq = 2 (m G − q ∘ colsum(G))
    let mut m_g = vec![0.0; c * nq];
    gemm(
        c,
        nm,
        nq,
        MatRef::rows(m.data(), nm),
        MatRef::rows(gd, nq),
        0.0,
        &mut m_g,
        0,
        nq,
        1,
    );
    let mut dq = vec![0.0; c * nq];
    for ch in 0..c {
        for j in 0..nq {
            let i = ch * nq + j;
            dq[i] = 2.0 * (m_g[i] - q.data()[i] * col_sum[j]);
        }
    }
    (
        Tensor::new(vec![c, nm], dm).expect("shape"),
        Tensor::new(vec![c, nq], dq).expect("shape"),
    )
}

/// Keeps the `k` largest entries of every column of `s` (`N_m×N_q`) and
/// reports which entries survived. Ties go to the lower row index.
pub fn topk_columns(s: &Tensor, k: usize) -> Result<Vec<bool>> {
    require_rank(s, 2, "top-k")?;
    let (nm, nq) = (s.shape()[0], s.shape()[1]);
    if k == 0 || k > nm {
        return Err(Error::domain(format!("top-k k={k} outside 1..={nm}")));
    }
    let mut keep = vec![false; nm * nq];
    if k == nm {
        keep.iter_mut().for_each(|b| *b = true);
        return Ok(keep);
    }
    let data = s.data();
    let mut rows: Vec<usize> = Vec::with_capacity(nm);
    for j in 0..nq {
        rows.clear();
        rows.extend(0..nm);
        let key = |r: &usize| data[r * nq + j];
        rows.select_nth_unstable_by(k - 1, |a, b| {
            key(b).total_cmp(&key(a)).then_with(|| a.cmp(b))
        });
        for &r in &rows[..k] {
            keep[r * nq + j] = true;
        }
    }
    Ok(keep)
}

/// Nearest-neighbour upsampling of the last two axes by `factor`.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 || factor == 0 {
        return Err(Error::dim(format!(
            "upsample needs rank >= 2 and factor >= 1, got {:?} x{factor}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let planes: usize = x.shape()[..rank - 2].iter().product();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                out[(p * ho + y) * wo + xx] = x.data()[(p * h + y / factor) * w + xx / factor];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = ho;
    shape[rank - 1] = wo;
    Tensor::new(shape, out)
}

pub fn upsample_nearest_backward(src_shape: &[usize], factor: usize, g: &Tensor) -> Tensor {
    let rank = src_shape.len();
    let (h, w) = (src_shape[rank - 2], src_shape[rank - 1]);
    let planes: usize = src_shape[..rank - 2].iter().product();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                out[(p * h + y / factor) * w + xx / factor] += g.data()[(p * ho + y) * wo + xx];
            }
        }
    }
    Tensor::new(src_shape.to_vec(), out).expect("shape")
}
