//! Self-checks behind `socov check`: finite-difference gradient suites, the
//! constraint-step trajectory and randomized pooling property suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embednet::{EmbeddingModel, ModelDims};
use crate::error::Result;
use crate::gradcheck::{check_tape_gradients, finite_difference_check};
use crate::init::{standard_normal, unit_sphere};
use crate::pooling::graph;
use crate::pooling::{
    attention_weights, attentive_covariance, attentive_statistics, statistics_pool, AttentionParams, CovMode,
    CovNormalization, FeatureSequence, PoolingConfig, SemiOrthVector, StatKind,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const GRAD_EPSILON: f64 = 1e-5;
pub const ISOLATED_TOLERANCE: f64 = 1e-6;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub instances: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let (r, c) = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = out.tape().constant(standard_normal(r, c, &mut rng));
    out.mul(weights).map(Var::sum)
}

fn worst_tape_error<F>(build: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let reports = check_tape_gradients(build, inputs, GRAD_EPSILON, tolerance)?;
    Ok(reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max))
}

/// Finite-difference checks of every differentiable op and of the full
/// training loss, `instances` random draws each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    let mut push = |name: &str, tolerance: f64, f: &mut dyn FnMut(&mut ChaCha8Rng, u64) -> Result<f64>| -> Result<()> {
        let mut worst = 0.0f64;
        for i in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i));
            worst = worst.max(f(&mut rng, i)?);
        }
        rows.push(SuiteRow {
            name: name.to_string(),
            instances,
            worst,
            tolerance,
        });
        Ok(())
    };
    let frames = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=5);
        standard_normal::<f64, _>(n, d, rng)
    };

    push("semi_orthogonal_penalty", ISOLATED_TOLERANCE, &mut |rng, _| {
        let d = rng.gen_range(1..=8);
        let w = standard_normal::<f64, _>(d, 1, rng).scale(rng.gen_range(0.2..1.5));
        let s = SemiOrthVector::new(w.clone(), 1)?;
        let r = finite_difference_check(
            |w| Ok(SemiOrthVector::new(w.clone(), 1)?.penalty()),
            &w,
            &s.penalty_gradient(),
            GRAD_EPSILON,
            ISOLATED_TOLERANCE,
        )?;
        Ok(r.max_rel_error)
    })?;
    push("statistics_pool", ISOLATED_TOLERANCE, &mut |rng, i| {
        let x = frames(rng);
        worst_tape_error(
            |_, v| {
                let (mu, sigma) = graph::statistics_pool(v[0])?;
                project(mu, i)?.add(project(sigma, i + 1)?)
            },
            &[x],
            ISOLATED_TOLERANCE,
        )
    })?;
    push("attention_weights", ISOLATED_TOLERANCE, &mut |rng, i| {
        let x = frames(rng);
        let h = rng.gen_range(1..=4);
        let w1 = standard_normal(x.cols(), h, rng);
        let w2 = standard_normal(h, 1, rng);
        worst_tape_error(
            |_, v| project(graph::attention_weights(v[0], v[1], v[2])?, i),
            &[x, w1, w2],
            ISOLATED_TOLERANCE,
        )
    })?;
    push("attentive_statistics", ISOLATED_TOLERANCE, &mut |rng, i| {
        let x = frames(rng);
        let logits = standard_normal(x.rows(), 1, rng);
        worst_tape_error(
            |_, v| {
                let (mu, sigma) = graph::attentive_statistics(v[0], v[1].columnwise_softmax())?;
                project(mu, i)?.add(project(sigma, i + 1)?)
            },
            &[x, logits],
            ISOLATED_TOLERANCE,
        )
    })?;
    for mode in [CovMode::WeightedCentered, CovMode::ScaledFrames] {
        push(&format!("attentive_covariance ({mode:?})"), ISOLATED_TOLERANCE, &mut |rng, i| {
            let x = frames(rng);
            let logits = standard_normal(x.rows(), 1, rng);
            worst_tape_error(
                |_, v| {
                    let sigma =
                        graph::attentive_covariance(v[0], v[1].columnwise_softmax(), mode, CovNormalization::None)?;
                    project(sigma, i)
                },
                &[x, logits],
                ISOLATED_TOLERANCE,
            )
        })?;
    }
    push("covariance_vectorize", ISOLATED_TOLERANCE, &mut |rng, i| {
        let d = rng.gen_range(1..=6);
        let sigma = standard_normal(d, d, rng);
        let w = unit_sphere(d, rng);
        worst_tape_error(
            |_, v| project(graph::covariance_vectorize(v[0], v[1])?, i),
            &[sigma, w],
            ISOLATED_TOLERANCE,
        )
    })?;
    push("am_softmax_loss", ISOLATED_TOLERANCE, &mut |rng, i| {
        let classes = rng.gen_range(2..=6);
        let label = rng.gen_range(0..classes);
        let cosines = Tensor::from_vec(1, classes, (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let scale = [1.0, 8.0, 64.0][i as usize % 3];
        worst_tape_error(|_, v| v[0].am_softmax(label, 0.35, scale), &[cosines], ISOLATED_TOLERANCE)
    })?;
    push("full pipeline (2-speaker toy)", PIPELINE_TOLERANCE, &mut |rng, i| {
        full_pipeline_error(rng, i)
    })?;
    Ok(rows)
}

fn toy_configs() -> Vec<PoolingConfig> {
    let mut out = Vec::new();
    for bits in 1..8u8 {
        for att in [false, true] {
            out.push(PoolingConfig::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, att));
        }
    }
    out
}

fn full_pipeline_error(rng: &mut ChaCha8Rng, i: u64) -> Result<f64> {
    let dims = ModelDims {
        input_dim: 4,
        deep_dim: 6,
        attention_hidden: 3,
        embed_dim: 8,
        contexts: vec![vec![-1, 0, 1]],
        am_scale: 4.0,
        ..ModelDims::default()
    };
    let configs = toy_configs();
    let pooling = configs[i as usize % configs.len()];
    let model = EmbeddingModel::<f64>::init(&dims, &pooling, 2, rng.gen())?;
    let label = rng.gen_range(0..2);
    let shift = Tensor::filled(8, 4, if label == 0 { 0.5 } else { -0.5 });
    // all-dead embedding units make the normalized head singular; redraw
    let x = loop {
        let x = standard_normal::<f64, _>(8, 4, rng).add(&shift)?;
        let e = model.extract_embedding(&FeatureSequence::new(x.clone())?)?;
        if e.data().iter().any(|&v| v > 1e-3) {
            break x;
        }
    };
    let loss_of = |m: &EmbeddingModel<f64>| -> Result<f64> {
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let (loss, _) = m.loss_graph(&bound, tape.constant(x.clone()), label)?;
        let v = loss.value().item();
        Ok(v)
    };
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let (loss, _) = model.loss_graph(&bound, tape.constant(x.clone()), label)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, var) in bound.vars().into_iter().enumerate() {
        let base = model.named_params()[k].1.clone();
        let r = finite_difference_check(
            |p| {
                let mut m = model.clone();
                *m.named_params_mut().swap_remove(k).1 = p.clone();
                loss_of(&m)
            },
            &base,
            &grads.wrt(var),
            GRAD_EPSILON,
            PIPELINE_TOLERANCE,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

/// One iterate of the constraint step from a vector of norm `r0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintIterate {
    pub iteration: usize,
    pub norm: f64,
    /// `r ← r(3 − r²)/2` run on the scalar alone.
    pub scalar_norm: f64,
    pub error: f64,
    /// `|r_k − 1| / |r_{k−1} − 1|²`; `None` for the first iterate or once
    /// the previous error is zero.
    pub ratio: Option<f64>,
}

/// Iterates the constraint step on a seeded random direction scaled to `r0`.
pub fn constraint_trajectory(r0: f64, dim: usize, iterations: usize, seed: u64) -> Result<Vec<ConstraintIterate>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SemiOrthVector::new(unit_sphere::<f64, _>(dim, &mut rng).scale(r0), 1)?;
    let mut scalar = r0;
    let mut out = vec![ConstraintIterate {
        iteration: 0,
        norm: s.norm(),
        scalar_norm: scalar,
        error: (s.norm() - 1.0).abs(),
        ratio: None,
    }];
    for k in 1..=iterations {
        s.apply_constraint_step();
        scalar = scalar * (3.0 - scalar * scalar) / 2.0;
        let prev = out[k - 1].error;
        let error = (s.norm() - 1.0).abs();
        out.push(ConstraintIterate {
            iteration: k,
            norm: s.norm(),
            scalar_norm: scalar,
            error,
            ratio: (prev > 0.0).then(|| error / (prev * prev)),
        });
    }
    Ok(out)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Tensor<f64>) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

/// Randomized checks of the pooling algebra over `draws` random segments.
pub fn pooling_property_suite(draws: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut uniform_vs_sp = 0.0f64;
    let mut diag_vs_var = 0.0f64;
    let mut asymmetry = 0.0f64;
    let mut negativity = 0.0f64;
    let mut softmax_sum = 0.0f64;
    let mut penalty_forms = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        let n = rng.gen_range(2..=12);
        let d = rng.gen_range(1..=6);
        let scale = rng.gen_range(0.1..3.0);
        let x = FeatureSequence::new(standard_normal::<f64, _>(n, d, &mut rng).scale(scale))?;

        let uniform = vec![1.0 / n as f64; n];
        let sp = statistics_pool(&x)?;
        let (mu, sigma) = attentive_statistics(&x, &uniform)?;
        let sp_mean = sp.part(StatKind::Mean).unwrap_or_default();
        let sp_std = sp.part(StatKind::Std).unwrap_or_default();
        for (a, b) in mu.data().iter().zip(sp_mean).chain(sigma.data().iter().zip(sp_std)) {
            uniform_vs_sp = uniform_vs_sp.max((a - b).abs());
        }

        let params = AttentionParams::random(d, rng.gen_range(1..=4), &mut rng)?;
        let a = attention_weights(&x, &params)?;
        softmax_sum = softmax_sum.max((a.iter().sum::<f64>() - 1.0).abs());
        let (_, sigma_att) = attentive_statistics(&x, &a)?;
        let cov = attentive_covariance(&x, &a, CovMode::WeightedCentered, CovNormalization::None)?;
        for i in 0..d {
            let var = sigma_att.data()[i].powi(2);
            // the std floor only binds when the variance is ~0
            if var > 1e-9 {
                diag_vs_var = diag_vs_var.max((cov.get(i, i) - var).abs());
            }
        }
        asymmetry = asymmetry.max(cov.max_abs_diff(&cov.transpose()));
        let trace = cov.trace();
        let min_eig = symmetric_eigenvalues(&cov).into_iter().fold(f64::INFINITY, f64::min);
        if trace > 0.0 {
            negativity = negativity.max(-min_eig / trace);
        }

        let w = standard_normal::<f64, _>(d, 1, &mut rng).scale(rng.gen_range(0.1..2.0));
        let s = SemiOrthVector::new(w, 1)?;
        penalty_forms = penalty_forms.max((s.penalty() - s.penalty_closed_form()).abs());
    }
    let row = |name: &str, worst: f64, tolerance: f64| SuiteRow {
        name: name.to_string(),
        instances: draws,
        worst,
        tolerance,
    };
    Ok(vec![
        row("SAP with uniform weights == SP", uniform_vs_sp, 1e-12),
        row("covariance diagonal == attentive variance", diag_vs_var, 1e-10),
        row("covariance symmetry (max |Σ − Σᵀ|)", asymmetry, 0.0),
        row("covariance PSD (−λ_min / trace)", negativity, 1e-9),
        row("attention weights sum to 1", softmax_sum, 1e-12),
        row("penalty trace form == (‖w‖²−1)² + D − 1", penalty_forms, 1e-12),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_on_known_matrix() {
        let m = Tensor::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let mut ev = symmetric_eigenvalues(&m);
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12, "{ev:?}");
    }

    #[test]
    fn suites_pass_on_small_runs() {
        for row in gradient_suite(3, 1).unwrap() {
            assert!(row.passed(), "{row:?}");
        }
        for row in pooling_property_suite(20, 1).unwrap() {
            assert!(row.passed(), "{row:?}");
        }
    }

    #[test]
    fn trajectory_from_half() {
        let t = constraint_trajectory(0.5, 4, 6, 3).unwrap();
        assert!(t[6].error < 1e-9);
        for it in &t {
            assert!((it.norm - it.scalar_norm).abs() < 1e-14);
        }
    }
}
