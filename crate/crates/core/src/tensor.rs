//! Dense row-major `f32` tensors.
//!
//! [`Tensor`] is a flat `Vec<f32>` plus a shape; it is the only numeric
//! container the crate uses.  Matrix products go through `ndarray`'s
//! `general_mat_mul` (which dispatches to `matrixmultiply`); everything else
//! is plain loops.  The type is deliberately minimal — shape checking beyond
//! debug assertions happens at public API boundaries, not here.

use ndarray::{ArrayView2, ArrayViewMut2};

/// A dense row-major tensor of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// A tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// A tensor with the given data; `data.len()` must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// A scalar tensor (shape `[1]`).
    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// An empty placeholder tensor (shape `[0]`), used where a slot must hold
    /// *something* before a real value arrives.
    pub fn empty() -> Self {
        Tensor {
            shape: vec![0],
            data: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    /// View as a 2-D matrix with `rows * cols == numel()`.
    pub fn as_mat(&self, rows: usize, cols: usize) -> ArrayView2<'_, f32> {
        assert_eq!(rows * cols, self.data.len(), "bad matrix view {rows}x{cols}");
        ArrayView2::from_shape((rows, cols), &self.data).expect("contiguous view")
    }

    /// Mutable 2-D view.
    pub fn as_mat_mut(&mut self, rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
        assert_eq!(rows * cols, self.data.len(), "bad matrix view {rows}x{cols}");
        ArrayViewMut2::from_shape((rows, cols), &mut self.data).expect("contiguous view")
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += factor * other` elementwise.
    pub fn axpy(&mut self, factor: f32, other: &Tensor) {
        debug_assert_eq!(self.numel(), other.numel());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// `out = alpha * a @ b + beta * out` for 2-D views.
pub fn mat_mul_into(
    alpha: f32,
    a: &ArrayView2<'_, f32>,
    b: &ArrayView2<'_, f32>,
    beta: f32,
    out: &mut ArrayViewMut2<'_, f32>,
) {
    ndarray::linalg::general_mat_mul(alpha, a, b, beta, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_against_hand_loop() {
        // Reference: explicit triple loop on the same data.
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut out = Tensor::zeros(&[2, 2]);
        mat_mul_into(
            1.0,
            &a.as_mat(2, 3),
            &b.as_mat(3, 2),
            0.0,
            &mut out.as_mat_mut(2, 2),
        );
        let mut want = vec![0.0f32; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    want[i * 2 + j] += a.data()[i * 3 + k] * b.data()[k * 2 + j];
                }
            }
        }
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn axpy_accumulates() {
        let mut t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        let u = Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]);
        t.axpy(0.5, &u);
        assert_eq!(t.data(), &[6.0, 12.0, 18.0]);
    }

    #[test]
    #[should_panic(expected = "shape")]
    fn from_vec_checks_length() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0]);
    }
}
