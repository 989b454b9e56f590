//! Dense row-major tensors and the raw kernels the tape is built on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. `shape` may be empty for a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_squares(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Root mean square of all entries (0 for an empty tensor).
    pub fn rms(&self) -> S {
        if self.data.is_empty() {
            return S::zero();
        }
        (self.sum_squares() / S::of(self.data.len() as f64)).sqrt()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::of(x.as_f64())).collect(),
        }
    }
}

/// `out[m,n] (+)= a[m,k] · b[k,n]`, optionally with either operand transposed
/// in storage (`a` stored `[k,m]`, `b` stored `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    // Transposed operands are copied into row-major form so the inner loop is
    // always a contiguous axpy.
    let a_rm;
    let a = if trans_a {
        a_rm = transpose(a, k, m);
        &a_rm[..]
    } else {
        a
    };
    let b_rm;
    let b = if trans_b {
        b_rm = transpose(b, n, k);
        &b_rm[..]
    } else {
        b
    };
    let mut i = 0;
    while i + 4 <= m {
        let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    }
}

/// Row-major `[rows, cols]` to row-major `[cols, rows]`.
fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Numerically stable row-wise softmax over rows of width `n`.
pub(crate) fn softmax_rows<S: Scalar>(x: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Negative log-likelihood of `target` under the softmax of `logits`.
pub(crate) fn row_nll<S: Scalar>(logits: &[S], target: usize) -> S {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    lse - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_enforced() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.reshaped(&[4]).is_err());
        assert_eq!(t.reshaped(&[3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3,2]
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // [3,2] = a^T
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // [2,3] = b^T
        let expected = [58.0, 64.0, 139.0, 154.0];
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut out = [0.0f64; 4];
            let lhs: &[f64] = if ta { &at } else { &a };
            let rhs: &[f64] = if tb { &bt } else { &b };
            gemm(lhs, rhs, &mut out, 2, 3, 2, ta, tb);
            assert_eq!(out, expected, "trans=({ta},{tb})");
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax_rows(&[1000.0f64, 1000.0, -1000.0], 3);
        assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
    }

    #[test]
    fn rms_of_three_four() {
        let t = Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert!((t.rms() - 12.5f64.sqrt()).abs() < 1e-15);
    }
}
