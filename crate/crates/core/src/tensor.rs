//! Dense row-major 2-D arrays.
//!
//! Everything in the pipeline is expressible as a matrix: a segment is an
//! `N x D` block of frames, pooled statistics are `1 x kD` rows, the
//! covariance is `D x D` and the vectorization weight is `D x 1`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "buffer of length {} cannot hold a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows given as `f64`; convenient in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Input("ragged rows".into()));
            }
            data.extend(row.iter().map(|&v| T::lit(v)));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn col_vector(values: &[T]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let rhs_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::Dimension {
                op: "t_matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (k, n, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![T::zero(); n * m];
        for p in 0..k {
            let lhs_row = &self.data[p * n..(p + 1) * n];
            let rhs_row = &rhs.data[p * m..(p + 1) * m];
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::Dimension {
                op: "matmul_t",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &rhs.data[j * k..(j + 1) * k];
                out.push(a.iter().zip(b).map(|(&x, &y)| x * y).sum());
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(rhs, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += rhs`; shapes must already agree.
    pub fn accumulate(&mut self, rhs: &Self) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, rhs: &Self) -> T {
        self.data.iter().zip(&rhs.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.frobenius_sq().sqrt()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> T {
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|v| v.abs()).fold(T::zero(), T::max)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Softmax over each column, stabilized by the column maximum.
    pub fn columnwise_softmax(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.cols {
            let max = (0..self.rows)
                .map(|r| self.get(r, c))
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for r in 0..self.rows {
                let e = (self.get(r, c) - max).exp();
                out.set(r, c, e);
                total += e;
            }
            for r in 0..self.rows {
                out.set(r, c, out.get(r, c) / total);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub(crate) fn expect_same_shape(&self, rhs: &Self, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn zero_annihilates() {
        let b = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let c = Tensor::zeros(2, 2).matmul(&b).unwrap();
        assert_eq!(c, Tensor::zeros(2, 3));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::<f64>::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[2.0, 1.0], &[0.0, -3.0]]).unwrap();
        assert_eq!(
            a.t_matmul(&b).unwrap(),
            a.transpose().matmul(&b).unwrap()
        );
        let c = Tensor::<f64>::from_rows(&[&[1.0, 1.0, 2.0]]).unwrap();
        assert_eq!(a.matmul_t(&c).unwrap(), a.matmul(&c.transpose()).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let uniform = Tensor::<f64>::zeros(3, 1).columnwise_softmax();
        for &v in uniform.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let col = Tensor::<f64>::col_vector(&[0.0, 3f64.ln()]).columnwise_softmax();
        assert!((col.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((col.get(1, 0) - 0.75).abs() < 1e-15);
        let single = Tensor::<f64>::from_rows(&[&[-4.0, 9.0]]).unwrap().columnwise_softmax();
        assert_eq!(single.data(), &[1.0, 1.0]);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f64>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
