//! Tape-free tensor functions.

use super::{Result, Scalar, Tensor, TensorError};

fn as_matrix<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Dimension {
            op,
            msg: format!("expected a matrix, got shape {:?}", t.shape()),
        }),
    }
}

/// Plain matrix product `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::ZERO; m * n];
    T::gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        T::ZERO,
        &mut out,
    );
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax over a flat buffer of rows of length `width`.
pub fn softmax_rows<T: Scalar>(values: &[T], width: usize) -> Result<Vec<T>> {
    if width == 0 {
        return Err(TensorError::Dimension {
            op: "softmax",
            msg: "last dimension is empty".into(),
        });
    }
    if !values.len().is_multiple_of(width) {
        return Err(TensorError::Dimension {
            op: "softmax",
            msg: format!("{} values do not form rows of {width}", values.len()),
        });
    }
    let mut out = vec![T::ZERO; values.len()];
    for (row, dst) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
        let mut total = T::ZERO;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Ok(out)
}

/// Row-wise log-softmax, stabilized by the row maximum.
pub fn log_softmax_rows<T: Scalar>(values: &[T], width: usize) -> Result<Vec<T>> {
    if width == 0 {
        return Err(TensorError::Dimension {
            op: "log_softmax",
            msg: "last dimension is empty".into(),
        });
    }
    let mut out = vec![T::ZERO; values.len()];
    for (row, dst) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
        let total: T = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + total.ln();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = x - lse;
        }
    }
    Ok(out)
}

/// Softmax over the last dimension of a tensor of any rank.
pub fn softmax_row<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let width = x.shape().last().copied().unwrap_or(1);
    Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), width)?)
}
