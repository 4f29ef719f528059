//! Forward kernels shared by the pure API and the gradient tape.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

use super::Tensor;
use crate::error::{Error, Result};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn view(t: &Tensor) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((t.rows(), t.cols()), t.data()).expect("matrix view")
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())))
    }
}

fn gemm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Tensor {
    let (m, n) = (a.nrows(), b.ncols());
    let mut c = Array2::<f64>::zeros((m, n));
    general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    let (data, _) = c.into_raw_vec_and_offset();
    Tensor::new(vec![m, n], data).expect("gemm output")
}

/// `A · B` for `A: m×k`, `B: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(gemm(view(a), view(b)))
}

/// `A · Bᵀ` for `A: m×k`, `B: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_nt", a)?;
    require_matrix("matmul_nt", b)?;
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}^T", a.shape(), b.shape()),
        ));
    }
    Ok(gemm(view(a), view(b).t()))
}

/// `Aᵀ · B` for `A: k×m`, `B: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_tn", a)?;
    require_matrix("matmul_tn", b)?;
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}^T x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(gemm(view(a).t(), view(b)))
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    require_matrix("softmax_rows", m)?;
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Row-wise softmax where row `i` only sees columns `0..=i + offset`; masked
/// entries are exactly zero.
pub fn causal_softmax_rows(m: &Tensor, offset: usize) -> Result<Tensor> {
    require_matrix("causal_softmax_rows", m)?;
    let mut out = m.clone();
    let cols = out.cols();
    for i in 0..out.rows() {
        let visible = (i + offset + 1).min(cols);
        let row = out.row_mut(i);
        softmax_in_place(&mut row[..visible]);
        row[visible..].iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(out)
}

/// Natural-log softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - lse).collect()
}

/// Output length of a valid (unpadded) 1-D convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Gathers the receptive fields of a valid convolution into an
/// `L_out × (k·d_in)` matrix. Rows `p·s .. p·s + k` of a row-major input are
/// contiguous, so each field is a single slice copy.
pub(crate) fn im2col(x: &Tensor, kernel: usize, stride: usize) -> Tensor {
    let d_in = x.cols();
    let l_out = conv1d_out_len(x.rows(), kernel, stride);
    let width = kernel * d_in;
    let mut data = Vec::with_capacity(l_out * width);
    for p in 0..l_out {
        let start = p * stride * d_in;
        data.extend_from_slice(&x.data()[start..start + width]);
    }
    Tensor::new(vec![l_out, width], data).expect("im2col")
}

/// Valid 1-D convolution over the row axis.
///
/// `x: L×d_in`, `w: k×d_in×d_out`, `bias: d_out`; returns `L_out×d_out` with
/// `L_out = floor((L − k)/stride) + 1`.
pub fn conv1d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    require_matrix("conv1d", x)?;
    if w.rank() != 3 {
        return Err(Error::shape("conv1d", format!("kernel shape {:?}", w.shape())));
    }
    let (k, d_in, d_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if d_in != x.cols() || bias.len() != d_out || bias.rank() != 1 {
        return Err(Error::shape(
            "conv1d",
            format!(
                "input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                bias.shape()
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv1d", "stride must be positive"));
    }
    if k > x.rows() {
        return Err(Error::KernelTooLarge {
            kernel: k,
            len: x.rows(),
        });
    }
    let cols = im2col(x, k, stride);
    let w_mat = Tensor::new(vec![k * d_in, d_out], w.data().to_vec())?;
    let mut y = matmul(&cols, &w_mat)?;
    add_row_in_place(&mut y, bias.data());
    Ok(y)
}

pub(crate) fn add_row_in_place(m: &mut Tensor, bias: &[f64]) {
    for i in 0..m.rows() {
        for (x, b) in m.row_mut(i).iter_mut().zip(bias) {
            *x += b;
        }
    }
}

/// Per-row normalization statistics: `(normalized, rstd)`.
pub(crate) fn layer_norm_stats(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = x.cols() as f64;
    let mut xhat = x.clone();
    let mut rstds = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        rstds.push(rstd);
    }
    (xhat, rstds)
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    require_matrix("layer_norm", x)?;
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::shape("layer_norm", "gain/bias width"));
    }
    let (mut y, _) = layer_norm_stats(x);
    for i in 0..y.rows() {
        for ((v, g), b) in y.row_mut(i).iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
