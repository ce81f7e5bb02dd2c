//! Temporal pooling of frame-level features into a fixed-length row.
//!
//! Available statistics, all computed over the `N` frames of an `N x D`
//! segment `X`:
//!
//! * mean `μ` and standard deviation `σ` (population variance);
//! * their attention-weighted versions `μ̃ = Σaₙxₙ` and
//!   `σ̃ = sqrt(Σaₙxₙ⊙xₙ − μ̃⊙μ̃)`, where `a = softmax(tanh(XW₁)W₂)`;
//! * the attentive covariance `Σ` compressed to a `D`-vector `h = Σw` by a
//!   trainable weight `w` kept near the unit sphere by [`SemiOrthVector`].
//!
//! [`pool_forward`] concatenates any non-empty subset in the fixed order
//! mean, std, cov-vec. [`socov_pool`] is the std + cov-vec combination.
//!
//! The functions here take plain tensors and return plain tensors. The
//! [`graph`] submodule exposes the same computations on a tape for training
//! and gradient checks.

pub mod graph;
mod semi_orth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use semi_orth::{ConstraintStep, SemiOrthVector, CONSTRAINT_RATE};

/// Floor applied to the weighted variance before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Allowed deviation of attention weights from summing to one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;
/// Allowed asymmetry of a covariance passed to [`covariance_vectorize`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// `N x D` frame-level features of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    frames: Tensor<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(frames: Tensor<T>) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Input(format!(
                "feature sequence needs at least one frame and one dimension, got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Input("feature sequence has non-finite entries".into()));
        }
        Ok(Self { frames })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn frames(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Contiguous run of `len` frames starting at `start`.
    pub fn chunk(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.num_frames() {
            return Err(Error::Input(format!(
                "chunk {start}..{} outside {} frames",
                start + len,
                self.num_frames()
            )));
        }
        Ok(Self {
            frames: self.frames.slice_rows(start, len),
        })
    }
}

/// How the attentive covariance centers the frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// `Σ = Σₙ aₙ(xₙ − μ̃)ᵀ(xₙ − μ̃)`; its diagonal equals `σ̃²`.
    #[default]
    WeightedCentered,
    /// `Σ = Σₙ (aₙxₙ − μ̃)ᵀ(aₙxₙ − μ̃)`: centers the weighted frames instead.
    ScaledFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovNormalization {
    #[default]
    None,
    /// Divide the covariance by the frame count.
    ByFrames,
}

/// Which statistics to pool and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub use_mean: bool,
    pub use_std: bool,
    pub use_cov_vec: bool,
    pub use_attention: bool,
    /// Apply semi-orthogonal constraint steps to the vectorization weight.
    pub constraint_enabled: bool,
    pub cov_mode: CovMode,
    pub cov_normalization: CovNormalization,
    /// Optimizer steps between constraint steps.
    pub constraint_interval: usize,
}

impl Default for PoolingConfig {
    /// Attentive std + constrained cov-vec.
    fn default() -> Self {
        Self::socov(true)
    }
}

impl PoolingConfig {
    pub fn new(use_mean: bool, use_std: bool, use_cov_vec: bool, use_attention: bool) -> Self {
        Self {
            use_mean,
            use_std,
            use_cov_vec,
            use_attention,
            constraint_enabled: use_cov_vec,
            cov_mode: CovMode::WeightedCentered,
            cov_normalization: CovNormalization::None,
            constraint_interval: 1,
        }
    }

    /// Mean + standard deviation.
    pub fn statistics(use_attention: bool) -> Self {
        Self::new(true, true, false, use_attention)
    }

    /// Standard deviation + constrained covariance vector.
    pub fn socov(use_attention: bool) -> Self {
        Self::new(false, true, true, use_attention)
    }

    pub fn with_constraint(mut self, enabled: bool) -> Self {
        self.constraint_enabled = enabled;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.use_mean || self.use_std || self.use_cov_vec) {
            return Err(Error::Config(
                "pooling: at least one of use_mean, use_std, use_cov_vec must be set".into(),
            ));
        }
        if self.constraint_interval == 0 {
            return Err(Error::Config("pooling: constraint_interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn num_stats(&self) -> usize {
        [self.use_mean, self.use_std, self.use_cov_vec]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn output_dim(&self, feature_dim: usize) -> usize {
        self.num_stats() * feature_dim
    }

    /// Short label such as `mean+std` or `SAP std+cov-vec (constraint)`.
    pub fn label(&self) -> String {
        let mut stats = Vec::new();
        if self.use_mean {
            stats.push("mean");
        }
        if self.use_std {
            stats.push("std");
        }
        if self.use_cov_vec {
            stats.push("cov-vec");
        }
        let mut label = stats.join("+");
        if self.use_cov_vec {
            label.push_str(if self.constraint_enabled {
                " (constraint)"
            } else {
                " (no constraint)"
            });
        }
        if self.use_attention {
            label = format!("SAP {label}");
        }
        label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Mean,
    Std,
    CovVec,
}

/// Column ranges of each statistic inside a pooled row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolLayout {
    parts: Vec<(StatKind, Range<usize>)>,
}

impl PoolLayout {
    pub fn new(kinds: &[StatKind], dim: usize) -> Self {
        let parts = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i * dim..(i + 1) * dim))
            .collect();
        Self { parts }
    }

    pub fn parts(&self) -> &[(StatKind, Range<usize>)] {
        &self.parts
    }

    pub fn range(&self, kind: StatKind) -> Option<Range<usize>> {
        self.parts
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, r)| r.clone())
    }

    pub fn total(&self) -> usize {
        self.parts.last().map_or(0, |(_, r)| r.end)
    }
}

/// Pooled `1 x kD` row and its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStats<T> {
    pub vector: Tensor<T>,
    pub layout: PoolLayout,
}

impl<T: Scalar> PooledStats<T> {
    pub fn part(&self, kind: StatKind) -> Option<&[T]> {
        self.layout.range(kind).map(|r| &self.vector.data()[r])
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

/// Single-head attention parameters `W₁: D x D_h`, `W₂: D_h x 1`; tanh activation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(w1: Tensor<T>, w2: Tensor<T>) -> Result<Self> {
        if w1.cols() == 0 || w1.cols() != w2.rows() {
            return Err(Error::Dimension {
                op: "attention params",
                lhs: w1.shape(),
                rhs: w2.shape(),
            });
        }
        if w2.cols() != 1 {
            return Err(Error::Config(format!(
                "attention supports a single head, got {}",
                w2.cols()
            )));
        }
        Ok(Self { w1, w2 })
    }

    pub fn random<R: rand::Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            crate::init::glorot_uniform(dim, hidden, rng),
            crate::init::glorot_uniform(hidden, 1, rng),
        )
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }
}

/// Parameters consumed by [`pool_forward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolParams<T> {
    pub attention: Option<AttentionParams<T>>,
    pub semi_orth: Option<SemiOrthVector<T>>,
}

/// Mean and standard deviation over time, concatenated (length `2D`).
pub fn statistics_pool<T: Scalar>(x: &FeatureSequence<T>) -> Result<PooledStats<T>> {
    pool_forward(x, &PoolingConfig::statistics(false), &PoolParams::default())
}

/// Attention weights `softmax(tanh(X·W₁)·W₂)`, one per frame.
pub fn attention_weights<T: Scalar>(x: &FeatureSequence<T>, p: &AttentionParams<T>) -> Result<Vec<T>> {
    let tape = Tape::new();
    let a = graph::attention_weights(
        tape.constant(x.frames().clone()),
        tape.constant(p.w1.clone()),
        tape.constant(p.w2.clone()),
    )?;
    let out = a.value().data().to_vec();
    Ok(out)
}

fn check_weights<T: Scalar>(x: &FeatureSequence<T>, a: &[T]) -> Result<Tensor<T>> {
    if a.len() != x.num_frames() {
        return Err(Error::Dimension {
            op: "attention weights",
            lhs: x.frames().shape(),
            rhs: (a.len(), 1),
        });
    }
    if let Some(bad) = a.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Input(format!("negative attention weight {bad}")));
    }
    let total: T = a.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(WEIGHT_SUM_TOLERANCE) {
        return Err(Error::Input(format!("attention weights sum to {total}, expected 1")));
    }
    Ok(Tensor::col_vector(a))
}

/// Weighted mean and floored weighted standard deviation, each `1 x D`.
pub fn attentive_statistics<T: Scalar>(
    x: &FeatureSequence<T>,
    a: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let weights = check_weights(x, a)?;
    let tape = Tape::new();
    let (mu, sigma) = graph::attentive_statistics(tape.constant(x.frames().clone()), tape.constant(weights))?;
    let out = (mu.value().clone(), sigma.value().clone());
    Ok(out)
}

/// `D x D` attentive covariance, exactly symmetric.
pub fn attentive_covariance<T: Scalar>(
    x: &FeatureSequence<T>,
    a: &[T],
    mode: CovMode,
    norm: CovNormalization,
) -> Result<Tensor<T>> {
    let weights = check_weights(x, a)?;
    let tape = Tape::new();
    let sigma = graph::attentive_covariance(
        tape.constant(x.frames().clone()),
        tape.constant(weights),
        mode,
        norm,
    )?;
    let out = sigma.value().clone();
    Ok(out)
}

/// `h = Σ·w`, a `D x 1` column.
pub fn covariance_vectorize<T: Scalar>(sigma: &Tensor<T>, s: &SemiOrthVector<T>) -> Result<Tensor<T>> {
    if sigma.rows() != sigma.cols() {
        return Err(Error::Input(format!("covariance must be square, got {:?}", sigma.shape())));
    }
    let scale = T::one().max(sigma.max_abs());
    if sigma.max_abs_diff(&sigma.transpose()) > T::lit(SYMMETRY_TOLERANCE) * scale {
        return Err(Error::Input("covariance is not symmetric".into()));
    }
    sigma.matmul(s.weight())
}

pub fn semi_orthogonal_penalty<T: Scalar>(s: &SemiOrthVector<T>) -> T {
    s.penalty()
}

pub fn penalty_gradient<T: Scalar>(s: &SemiOrthVector<T>) -> Tensor<T> {
    s.penalty_gradient()
}

pub fn constraint_step<T: Scalar>(s: &SemiOrthVector<T>) -> ConstraintStep<T> {
    s.constraint_step()
}

/// Standard deviation + covariance vector (length `2D`).
///
/// Requires `cfg.use_std` and `cfg.use_cov_vec`; `cfg.use_mean` is ignored.
/// Attention is used when `cfg.use_attention` is set, otherwise the weights
/// are uniform.
pub fn socov_pool<T: Scalar>(
    x: &FeatureSequence<T>,
    attention: Option<&AttentionParams<T>>,
    s: &SemiOrthVector<T>,
    cfg: &PoolingConfig,
) -> Result<PooledStats<T>> {
    if !(cfg.use_std && cfg.use_cov_vec) {
        return Err(Error::Config(
            "socov pooling needs both use_std and use_cov_vec".into(),
        ));
    }
    let cfg = PoolingConfig {
        use_mean: false,
        ..*cfg
    };
    let params = PoolParams {
        attention: attention.cloned(),
        semi_orth: Some(s.clone()),
    };
    pool_forward(x, &cfg, &params)
}

/// Pools `x` according to `cfg`.
pub fn pool_forward<T: Scalar>(
    x: &FeatureSequence<T>,
    cfg: &PoolingConfig,
    params: &PoolParams<T>,
) -> Result<PooledStats<T>> {
    cfg.validate()?;
    let tape = Tape::new();
    let xv = tape.constant(x.frames().clone());
    let vars = graph::PoolVars {
        attention: match (&params.attention, cfg.use_attention) {
            (Some(p), true) => {
                if p.dim() != x.dim() {
                    return Err(Error::Dimension {
                        op: "attention_weights",
                        lhs: x.frames().shape(),
                        rhs: p.w1.shape(),
                    });
                }
                Some((tape.constant(p.w1.clone()), tape.constant(p.w2.clone())))
            }
            _ => None,
        },
        w: params
            .semi_orth
            .as_ref()
            .map(|s| tape.constant(s.weight().clone())),
    };
    let pooled = graph::pool_forward(xv, cfg, &vars)?;
    let vector = pooled.vector.value().clone();
    Ok(PooledStats {
        vector,
        layout: pooled.layout,
    })
}
