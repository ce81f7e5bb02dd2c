//! Trainable covariance vectorization weight and its semi-orthogonal
//! constraint machinery.
//!
//! The penalty `F(w) = trace((wwᵀ − I)(wwᵀ − I)ᵀ)` has gradient `4(wwᵀ − I)w`.
//! For a single column `w` both collapse to functions of `‖w‖`:
//!
//! * `F = (‖w‖² − 1)² + D − 1`, minimized (value `D − 1`) on the unit sphere;
//! * `∇F = 4(‖w‖² − 1)w`, which vanishes at `‖w‖ = 1` and at `w = 0`.
//!
//! A gradient step with rate `1/8` is therefore `w ← w(3 − ‖w‖²)/2`: a
//! retraction onto the unit sphere that leaves the direction of `w` alone and
//! drives the norm through `r ← r(3 − r²)/2`. The error obeys
//! `e' = −(3/2)e² − e³/2`, so it converges quadratically for `0 < r < √3`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Step size of the constraint update.
pub const CONSTRAINT_RATE: f64 = 0.125;

#[derive(Debug, Clone, PartialEq)]
pub struct SemiOrthVector<T> {
    w: Tensor<T>,
    step_interval: usize,
}

/// Result of one constraint step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintStep<T> {
    pub vector: SemiOrthVector<T>,
    /// Set when the input norm was at or beyond `√3`, outside the basin of
    /// the norm recurrence. The step is still applied.
    pub diverging: bool,
}

impl<T: Scalar> SemiOrthVector<T> {
    pub fn new(w: Tensor<T>, step_interval: usize) -> Result<Self> {
        if w.cols() != 1 || w.rows() == 0 {
            return Err(Error::Input(format!(
                "vectorization weight must be a non-empty column, got {:?}",
                w.shape()
            )));
        }
        if !w.is_finite() {
            return Err(Error::Input("vectorization weight has non-finite entries".into()));
        }
        if step_interval == 0 {
            return Err(Error::Config("constraint_interval must be at least 1".into()));
        }
        Ok(Self { w, step_interval })
    }

    /// Draws `w` uniformly from the unit sphere.
    pub fn random_unit<R: Rng + ?Sized>(dim: usize, step_interval: usize, rng: &mut R) -> Result<Self> {
        Self::new(init::unit_sphere(dim, rng), step_interval)
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.w
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.w
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn step_interval(&self) -> usize {
        self.step_interval
    }

    pub fn rate(&self) -> T {
        T::lit(CONSTRAINT_RATE)
    }

    pub fn norm(&self) -> T {
        self.w.norm()
    }

    /// `Q = wwᵀ − I`.
    pub fn q_matrix(&self) -> Tensor<T> {
        let d = self.dim();
        let mut q = self.w.matmul_t(&self.w).expect("column times its transpose");
        for i in 0..d {
            let v = q.get(i, i);
            q.set(i, i, v - T::one());
        }
        q
    }

    /// Penalty evaluated as `trace(QQᵀ)`.
    pub fn penalty(&self) -> T {
        let q = self.q_matrix();
        q.matmul_t(&q).expect("square").trace()
    }

    /// Penalty evaluated as `(‖w‖² − 1)² + D − 1`.
    pub fn penalty_closed_form(&self) -> T {
        let s = self.w.frobenius_sq() - T::one();
        s * s + T::from_count(self.dim()) - T::one()
    }

    /// Gradient of the penalty as `4Qw`.
    pub fn penalty_gradient(&self) -> Tensor<T> {
        self.q_matrix()
            .matmul(&self.w)
            .expect("square times column")
            .scale(T::lit(4.0))
    }

    /// Gradient of the penalty as `4(‖w‖² − 1)w`.
    pub fn penalty_gradient_closed_form(&self) -> Tensor<T> {
        let k = T::lit(4.0) * (self.w.frobenius_sq() - T::one());
        self.w.scale(k)
    }

    /// `w ← w − 4λ(wwᵀ − I)w` with `λ = 1/8`.
    ///
    /// `(wwᵀ − I)w` is evaluated as `w(wᵀw) − w`, which is the same product
    /// without forming the `D x D` matrix.
    pub fn constraint_step(&self) -> ConstraintStep<T> {
        let sq = self.w.frobenius_sq();
        let diverging = sq >= T::lit(3.0);
        let k = T::lit(4.0) * self.rate();
        let w = self.w.map(|v| v - k * (v * sq - v));
        ConstraintStep {
            vector: Self {
                w,
                step_interval: self.step_interval,
            },
            diverging,
        }
    }

    /// Applies [`Self::constraint_step`] in place; returns the divergence flag.
    pub fn apply_constraint_step(&mut self) -> bool {
        let step = self.constraint_step();
        *self = step.vector;
        step.diverging
    }
}
