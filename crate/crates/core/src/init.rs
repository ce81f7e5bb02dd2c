//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Glorot-uniform `rows x cols` matrix.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

/// Uniform draw from the unit sphere in `dim` dimensions, as a column.
pub fn unit_sphere<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor<T> {
    loop {
        let v: Tensor<T> = standard_normal(dim, 1, rng);
        let n = v.norm();
        if n > T::lit(1e-8) {
            return v.scale(T::one() / n);
        }
    }
}

/// Normalizes every column to unit L2 norm; zero columns are left alone.
pub fn normalize_columns<T: Scalar>(t: &mut Tensor<T>) {
    for c in 0..t.cols() {
        let n = t.column(c).iter().map(|&v| v * v).sum::<T>().sqrt();
        if n > T::zero() {
            for r in 0..t.rows() {
                let v = t.get(r, c);
                t.set(r, c, v / n);
            }
        }
    }
}
