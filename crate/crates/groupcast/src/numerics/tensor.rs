//! Dense row-major arrays.
//!
//! All tensors that flow through the tape are two-dimensional matrices
//! (column vectors are `[r, 1]`, scalars `[1, 1]`). Higher-rank data such as
//! stacked trajectories keeps its logical shape here and is flattened to a
//! matrix before entering the tape.

use crate::error::{Error, Result};
use crate::numerics::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Build a matrix, casting from `f64` literals. Convenient in tests and
    /// for constants such as positional encodings.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&x| F::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count of a matrix.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// out += a @ b, with a: [m, k], b: [k, n].
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &a_it) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (o, &b_tj) in orow.iter_mut().zip(brow.iter()) {
                *o += a_it * b_tj;
            }
        }
    }
}

/// out += a @ b^T, with a: [m, k], b: [n, k].
pub(crate) fn matmul_nt_acc<F: Real>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::ZERO;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out += a^T @ b, with a: [i, j], b: [i, k], out: [j, k].
pub(crate) fn matmul_tn_acc<F: Real>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    rows: usize,
    j_dim: usize,
    k_dim: usize,
) {
    debug_assert_eq!(a.len(), rows * j_dim);
    debug_assert_eq!(b.len(), rows * k_dim);
    debug_assert_eq!(out.len(), j_dim * k_dim);
    for i in 0..rows {
        let arow = &a[i * j_dim..(i + 1) * j_dim];
        let brow = &b[i * k_dim..(i + 1) * k_dim];
        for (jj, &a_ij) in arow.iter().enumerate() {
            let orow = &mut out[jj * k_dim..(jj + 1) * k_dim];
            for (o, &b_ik) in orow.iter_mut().zip(brow.iter()) {
                *o += a_ij * b_ik;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        let r = Tensor::<f64>::new(vec![2, 3], vec![1.0; 5]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.at(2, 1), 6.0);
    }

    #[test]
    fn matmul_kernels_agree_on_small_case() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0f64; 4];
        matmul_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);

        // a @ b == a @ (b^T)^T via matmul_nt with b transposed.
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut out2 = [0.0f64; 4];
        matmul_nt_acc(&a, &bt, &mut out2, 2, 3, 2);
        assert_eq!(out, out2);

        // a @ b == (a^T)^T @ b via matmul_tn with a transposed.
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut out3 = [0.0f64; 4];
        matmul_tn_acc(&at, &b, &mut out3, 3, 2, 2);
        assert_eq!(out, out3);
    }
}
