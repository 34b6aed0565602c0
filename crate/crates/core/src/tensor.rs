//! Dense row-major f64 matrices and the matmul kernel shared by the tape.
//!
//! Everything that flows through the autodiff tape is a 2-D matrix; batches
//! of images or latents are stored one row per item.

use crate::error::{D2cError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Mat { rows, cols, data }
    }

    /// Single row vector.
    pub fn row_vec(data: Vec<f64>) -> Self {
        Mat {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn check_same_shape(&self, other: &Mat, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(D2cError::ShapeMismatch {
                expected: format!("{}x{} ({what})", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// c += a * b (or c = a * b when `accumulate` is false).
pub fn matmul_into(a: &Mat, b: &Mat, c: &mut Mat, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.cols as isize,
            1,
            b.data.as_ptr(),
            b.cols as isize,
            1,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut c, false);
    c
}

/// c += a * b^T. `b` is given untransposed with shape [q x p], a is [n x p].
pub fn matmul_bt_into(a: &Mat, b: &Mat, c: &mut Mat, accumulate: bool) {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.rows);
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.rows,
            1.0,
            a.data.as_ptr(),
            a.cols as isize,
            1,
            b.data.as_ptr(),
            1,
            b.cols as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// c += a^T * b. `a` is given untransposed with shape [n x p], b is [n x q].
pub fn matmul_at_into(a: &Mat, b: &Mat, c: &mut Mat, accumulate: bool) {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            a.cols,
            a.rows,
            b.cols,
            1.0,
            a.data.as_ptr(),
            1,
            a.cols as isize,
            b.data.as_ptr(),
            b.cols as isize,
            1,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}
