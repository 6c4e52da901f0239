//! Forward kernels.
//!
//! All kernels are deterministic and allocation-explicit. The convolution and
//! attention paths are GEMM-backed; the loop oracles they are tested against
//! live in the test module below.

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis};

use super::real::Real;
use super::NumericsError;

/// Valid cross-correlation along the last axis.
///
/// `input` is `[batch, channels, length]`, `kernel` is
/// `[filters, channels, width]`, output is `[batch, filters, positions]` with
/// `positions = (length - width) / stride + 1`. No padding; `length >= width`.
pub fn conv1d<T: Real>(
    input: &Array3<T>,
    kernel: &Array3<T>,
    bias: &Array1<T>,
    stride: usize,
) -> Result<Array3<T>, NumericsError> {
    let (b, c, l) = input.dim();
    let (f, kc, k) = kernel.dim();
    if stride == 0 {
        return Err(NumericsError::InvalidArgument("stride must be positive".into()));
    }
    if kc != c {
        return Err(NumericsError::ShapeMismatch(format!(
            "conv1d kernel expects {kc} channels, input has {c}"
        )));
    }
    if bias.len() != f {
        return Err(NumericsError::ShapeMismatch(format!(
            "conv1d bias length {} != {f} filters",
            bias.len()
        )));
    }
    if l < k {
        return Err(NumericsError::InvalidArgument(format!(
            "conv1d input length {l} shorter than kernel width {k}"
        )));
    }
    let p = (l - k) / stride + 1;
    let cols = im2col(input, k, stride, p);
    let kmat = kernel
        .view()
        .into_shape_with_order((f, c * k))
        .expect("kernel is contiguous");
    // [b*p, c*k] x [c*k, f]
    let mut out_mat = cols.dot(&kmat.t());
    out_mat += &bias.view().insert_axis(Axis(0));
    let mut out = Array3::zeros((b, f, p));
    for bi in 0..b {
        for pi in 0..p {
            for fi in 0..f {
                out[[bi, fi, pi]] = out_mat[[bi * p + pi, fi]];
            }
        }
    }
    Ok(out)
}

/// Unfolds windows into rows: `cols[b*p + i, c*k + j] = input[b, c, i*stride + j]`.
pub(crate) fn im2col<T: Real>(input: &Array3<T>, k: usize, stride: usize, p: usize) -> Array2<T> {
    let (b, c, _) = input.dim();
    let mut cols = Array2::zeros((b * p, c * k));
    for bi in 0..b {
        for pi in 0..p {
            let mut row = cols.row_mut(bi * p + pi);
            for ci in 0..c {
                let start = pi * stride;
                let window = input.slice(s![bi, ci, start..start + k]);
                row.slice_mut(s![ci * k..(ci + 1) * k]).assign(&window);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column rows back onto the signal.
pub(crate) fn col2im<T: Real>(
    cols: &Array2<T>,
    b: usize,
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    p: usize,
) -> Array3<T> {
    let mut out = Array3::zeros((b, c, l));
    for bi in 0..b {
        for pi in 0..p {
            let row = cols.row(bi * p + pi);
            for ci in 0..c {
                let start = pi * stride;
                let mut window = out.slice_mut(s![bi, ci, start..start + k]);
                window += &row.slice(s![ci * k..(ci + 1) * k]);
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction. Rows sum to one; shifting a row by
/// a constant leaves it unchanged.
pub fn softmax_rows<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF via `erf`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

/// Derivative of the exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(0.3989422804014327);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-x * x * half).exp();
    cdf + x * pdf
}

pub fn gelu<T: Real>(x: &ArrayD<T>) -> ArrayD<T> {
    x.mapv(gelu_scalar)
}

pub fn relu<T: Real>(x: &ArrayD<T>) -> ArrayD<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Normalizes each row of `x` to zero mean and unit variance, then applies
/// the learned elementwise affine: `gain * xhat + shift`.
pub fn layer_norm<T: Real>(
    x: &Array2<T>,
    gain: &Array1<T>,
    shift: &Array1<T>,
    eps: T,
) -> Result<Array2<T>, NumericsError> {
    let d = x.ncols();
    if gain.len() != d || shift.len() != d {
        return Err(NumericsError::ShapeMismatch(format!(
            "layer_norm affine length {} / {} != feature dim {d}",
            gain.len(),
            shift.len()
        )));
    }
    let mut out = Array2::zeros(x.raw_dim());
    let dn = T::from_f64(d as f64);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / dn;
        let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
        let inv = (var + eps).sqrt().recip();
        let mut orow = out.row_mut(i);
        for j in 0..d {
            orow[j] = gain[j] * (row[j] - mean) * inv + shift[j];
        }
    }
    Ok(out)
}

/// Projection weights for one attention block. Head `h` owns the column block
/// `h*d_head .. (h+1)*d_head` of each projection.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub w_q: Array2<T>,
    pub b_q: Array1<T>,
    pub w_k: Array2<T>,
    pub b_k: Array1<T>,
    pub w_v: Array2<T>,
    pub b_v: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
}

/// Scaled dot-product attention over one token sequence.
///
/// `x` is `[tokens, d_model]`. Returns the attended output `[tokens, d_model]`
/// and the attention tensor `[heads, tokens, tokens]`, whose rows are softmax
/// distributions (scores scaled by `1/sqrt(d_head)`).
pub fn multi_head_attention<T: Real>(
    x: &Array2<T>,
    params: &AttentionParams<T>,
    n_heads: usize,
) -> Result<(Array2<T>, Array3<T>), NumericsError> {
    let (t, d) = x.dim();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NumericsError::InvalidArgument(format!(
            "indivisible d_model: {d} does not split into {n_heads} heads"
        )));
    }
    for (name, w, bvec) in [
        ("w_q", &params.w_q, &params.b_q),
        ("w_k", &params.w_k, &params.b_k),
        ("w_v", &params.w_v, &params.b_v),
        ("w_o", &params.w_o, &params.b_o),
    ] {
        if w.dim() != (d, d) || bvec.len() != d {
            return Err(NumericsError::ShapeMismatch(format!(
                "attention projection {name} must be [{d}, {d}] with bias [{d}]"
            )));
        }
    }
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let q = x.dot(&params.w_q) + &params.b_q.view().insert_axis(Axis(0));
    let k = x.dot(&params.w_k) + &params.b_k.view().insert_axis(Axis(0));
    let v = x.dot(&params.w_v) + &params.b_v.view().insert_axis(Axis(0));

    let mut attn = Array3::zeros((n_heads, t, t));
    let mut ctx = Array2::zeros((t, d));
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let scores = qh.dot(&kh.t()) * scale;
        let probs = softmax_rows(&scores);
        ctx.slice_mut(s![.., cols]).assign(&probs.dot(&vh));
        attn.slice_mut(s![h, .., ..]).assign(&probs);
    }
    let out = ctx.dot(&params.w_o) + &params.b_o.view().insert_axis(Axis(0));
    Ok((out, attn))
}
