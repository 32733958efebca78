use super::{Mask, Tensor};
use crate::error::{Error, Result};

/// Strided `c = a·b + beta·c` for row-major `c` (m×n).
///
/// `a` is addressed as `a[i*rsa + p*csa]` and `b` as `b[p*rsb + j*csb]`, so
/// transposed operands are expressed through strides alone.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above bound every strided access; all
    // callers derive the strides from the operand shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product `a·b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
    Tensor::matrix(m, n, out)
}

/// Product with the second operand transposed, `a·bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul_nt")?;
    let (n, k2) = b.require_matrix("matmul_nt")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), 0.0, &mut out);
    Tensor::matrix(m, n, out)
}

pub(crate) fn masked_softmax_into(scores: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m { (s - max).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|v| *v /= sum);
}

/// Row-wise softmax restricted to `mask == 1` positions.
///
/// Masked positions get exactly 0; a row with no support is all zeros.
pub fn masked_softmax(scores: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (r, c) = scores.require_matrix("masked_softmax")?;
    if (mask.rows(), mask.cols()) != (r, c) {
        return Err(Error::Shape {
            op: "masked_softmax",
            lhs: vec![r, c],
            rhs: vec![mask.rows(), mask.cols()],
        });
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        masked_softmax_into(scores.row(i), mask.row(i), &mut out[i * c..(i + 1) * c]);
    }
    Tensor::matrix(r, c, out)
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Mean over `loss_mask` rows of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], loss_mask: &[bool]) -> Result<f64> {
    let (n, vocab) = logits.require_matrix("cross_entropy")?;
    if targets.len() != n || loss_mask.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![n, vocab],
            rhs: vec![targets.len(), loss_mask.len()],
        });
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    let mut total = 0.0;
    for i in (0..n).filter(|&i| loss_mask[i]) {
        let t = targets[i];
        if t >= vocab {
            return Err(Error::contract(format!("target {t} out of range for vocab {vocab}")));
        }
        total -= log_softmax_row(logits.row(i))[t];
    }
    Ok(total / count as f64)
}
