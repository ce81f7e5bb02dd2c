//! Differentiable pooling: the same statistics as the parent module, recorded
//! on a [`Tape`](crate::Tape) so every input and parameter receives a gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{concat_cols, Var};
use crate::tensor::Tensor;

use super::{CovMode, CovNormalization, PoolLayout, PoolingConfig, StatKind, VARIANCE_FLOOR};

/// Pooled output row plus its layout.
#[derive(Debug, Clone)]
pub struct PooledVar<'t, T> {
    pub vector: Var<'t, T>,
    pub layout: PoolLayout,
}

/// Unweighted mean and standard deviation (population variance), each `1 x D`.
pub fn statistics_pool<'t, T: Scalar>(x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let n = x.shape().0;
    let inv_n = T::one() / T::from_count(n);
    let mu = x.sum_rows().scale(inv_n);
    let var = x.sub_row(mu)?.square().sum_rows().scale(inv_n);
    Ok((mu, var.sqrt_floor(T::zero())))
}

/// Column-wise softmax of `tanh(X·W₁)·W₂`, an `N x 1` column.
pub fn attention_weights<'t, T: Scalar>(
    x: Var<'t, T>,
    w1: Var<'t, T>,
    w2: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let heads = w2.shape().1;
    if heads != 1 {
        return Err(Error::Config(format!(
            "attention supports a single head, got {heads}"
        )));
    }
    Ok(x.matmul(w1)?.tanh().matmul(w2)?.columnwise_softmax())
}

/// Weighted mean `Σaₙxₙ` and standard deviation
/// `sqrt(max(Σaₙxₙ⊙xₙ − μ̃⊙μ̃, floor))`, each `1 x D`.
pub fn attentive_statistics<'t, T: Scalar>(
    x: Var<'t, T>,
    a: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let at = a.transpose();
    let mu = at.matmul(x)?;
    let second = at.matmul(x.square())?;
    let var = second.sub(mu.square())?;
    Ok((mu, var.sqrt_floor(T::lit(VARIANCE_FLOOR))))
}

/// `D x D` attentive covariance for frames `x`, weights `a` and weighted mean `mu`.
pub fn covariance_with_mean<'t, T: Scalar>(
    x: Var<'t, T>,
    a: Var<'t, T>,
    mu: Var<'t, T>,
    mode: CovMode,
    norm: CovNormalization,
) -> Result<Var<'t, T>> {
    let n = x.shape().0;
    let sigma = match mode {
        CovMode::WeightedCentered => x.sub_row(mu)?.weighted_gram(a)?,
        CovMode::ScaledFrames => {
            let ones = x.tape().constant(Tensor::filled(n, 1, T::one()));
            x.mul_col(a)?.sub_row(mu)?.weighted_gram(ones)?
        }
    };
    Ok(match norm {
        CovNormalization::None => sigma,
        CovNormalization::ByFrames => sigma.scale(T::one() / T::from_count(n)),
    })
}

pub fn attentive_covariance<'t, T: Scalar>(
    x: Var<'t, T>,
    a: Var<'t, T>,
    mode: CovMode,
    norm: CovNormalization,
) -> Result<Var<'t, T>> {
    let mu = a.transpose().matmul(x)?;
    covariance_with_mean(x, a, mu, mode, norm)
}

/// `h = Σ·w` returned as a `1 x D` row, ready for concatenation.
pub fn covariance_vectorize<'t, T: Scalar>(sigma: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(sigma.matmul(w)?.transpose())
}

/// Differentiable parameters used by [`pool_forward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PoolVars<'t, T> {
    /// `(W₁, W₂)` when attention is enabled.
    pub attention: Option<(Var<'t, T>, Var<'t, T>)>,
    /// Vectorization weight when the covariance vector is enabled.
    pub w: Option<Var<'t, T>>,
}

/// Concatenates the statistics enabled in `cfg` in the order mean, std, cov-vec.
///
/// With attention the mean and standard deviation are the weighted ones;
/// without it they are the plain temporal statistics and the covariance uses
/// uniform weights `1/N`.
pub fn pool_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    cfg: &PoolingConfig,
    vars: &PoolVars<'t, T>,
) -> Result<PooledVar<'t, T>> {
    cfg.validate()?;
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(Error::Input("cannot pool an empty sequence".into()));
    }
    let tape = x.tape();

    let (weights, mu, sigma) = if cfg.use_attention {
        let (w1, w2) = vars.attention.ok_or_else(|| {
            Error::Config("attention enabled but no attention parameters given".into())
        })?;
        let a = attention_weights(x, w1, w2)?;
        let (mu, sigma) = attentive_statistics(x, a)?;
        (a, mu, sigma)
    } else {
        let uniform = tape.constant(Tensor::filled(n, 1, T::one() / T::from_count(n)));
        let (mu, sigma) = statistics_pool(x)?;
        (uniform, mu, sigma)
    };

    let mut parts = Vec::with_capacity(3);
    let mut kinds = Vec::with_capacity(3);
    if cfg.use_mean {
        parts.push(mu);
        kinds.push(StatKind::Mean);
    }
    if cfg.use_std {
        parts.push(sigma);
        kinds.push(StatKind::Std);
    }
    if cfg.use_cov_vec {
        let w = vars.w.ok_or_else(|| {
            Error::Config("covariance vector enabled but no vectorization weight given".into())
        })?;
        if w.shape() != (d, 1) {
            return Err(Error::Dimension {
                op: "covariance_vectorize",
                lhs: (d, d),
                rhs: w.shape(),
            });
        }
        let cov = covariance_with_mean(x, weights, mu, cfg.cov_mode, cfg.cov_normalization)?;
        parts.push(covariance_vectorize(cov, w)?);
        kinds.push(StatKind::CovVec);
    }
    let vector = if parts.len() == 1 {
        parts[0]
    } else {
        concat_cols(&parts)?
    };
    Ok(PooledVar {
        vector,
        layout: PoolLayout::new(&kinds, d),
    })
}
