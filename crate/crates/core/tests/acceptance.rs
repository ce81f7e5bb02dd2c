//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socov::ablation::{corpus_trials, default_grid, embed_corpus, run_ablation, run_row};
use socov::config::ExperimentConfig;
use socov::corpus::{decode_features, encode_features, generate, generate_range};
use socov::diagnostics::{constraint_trajectory, gradient_suite, pooling_property_suite};
use socov::embednet::checkpoint::Checkpoint;
use socov::evalkit::{compute_eer, compute_min_dcf, render_scores, score_trials, DcfParams};
use socov::init::standard_normal;
use socov::pooling::{pool_forward, socov_pool, AttentionParams, FeatureSequence, PoolParams, PoolingConfig, SemiOrthVector};
use socov::trainer::{train_run, TrainConfig};
use socov::{Corpus64, Error};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

// 1. constraint convergence from ‖w₀‖ = 0.5
fn constraint_convergence() -> Outcome {
    let start = Instant::now();
    let traj = constraint_trajectory(0.5, 64, 6, 1).unwrap();
    let elapsed = start.elapsed();
    let max_dev = traj.iter().map(|it| (it.norm - it.scalar_norm).abs()).fold(0.0, f64::max);
    let max_ratio = traj.iter().filter_map(|it| it.ratio).fold(0.0, f64::max);
    let reached = traj.iter().position(|it| it.error < 1e-9);
    let passed = reached.is_some_and(|k| k <= 6) && max_dev <= 1e-14 && max_ratio <= 2.0 && elapsed < Duration::from_millis(1);
    outcome(
        passed,
        format!(
            "|r-1|<1e-9 at k={reached:?}, max |r-recurrence|={max_dev:.1e}, max ratio C={max_ratio:.4}, {:?}",
            elapsed
        ),
    )
}

// 2. gradient fidelity
fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let rows = gradient_suite(100, 7).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.1e}", r.name, r.worst))
        .collect();
    let worst_iso = rows[..rows.len() - 1].iter().map(|r| r.worst).fold(0.0, f64::max);
    let pipeline = rows.last().unwrap().worst;
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "{} suites x 100, worst isolated {worst_iso:.1e} (<1e-6), pipeline {pipeline:.1e} (<1e-4), {:?}{}",
            rows.len(),
            elapsed,
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join("; ")) }
        ),
    )
}

// 3. pooling algebra
fn pooling_algebra() -> Outcome {
    let rows = pooling_property_suite(1000, 3).unwrap();
    let detail: Vec<String> = rows.iter().map(|r| format!("{}={:.1e}", r.name, r.worst)).collect();
    outcome(rows.iter().all(|r| r.passed()), format!("1000 draws: {}", detail.join(", ")))
}

fn brute_force(scores: &[(f64, bool)], p: &DcfParams) -> (f64, f64) {
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let nt = scores.iter().filter(|s| s.1).count() as f64;
    let nn = scores.len() as f64 - nt;
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&thr| {
            let miss = scores.iter().filter(|&&(s, t)| t && s < thr).count() as f64;
            let fa = scores.iter().filter(|&&(s, t)| !t && s >= thr).count() as f64;
            (fa / nn, miss / nt)
        })
        .collect();
    let i = rates.iter().position(|&(fa, miss)| miss >= fa).unwrap();
    let eer = if i == 0 {
        (rates[0].0 + rates[0].1) / 2.0
    } else {
        let (x0, y0) = rates[i - 1];
        let (x1, y1) = rates[i];
        let t = (x0 - y0) / ((x0 - y0) - (x1 - y1));
        y0 + t * (y1 - y0)
    };
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    let dcf = rates
        .iter()
        .map(|&(fa, miss)| (p.c_miss * p.p_target * miss + p.c_fa * (1.0 - p.p_target) * fa) / norm)
        .fold(f64::INFINITY, f64::min);
    (eer, dcf)
}

// 4. metric oracle equivalence
fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut eer_dev, mut dcf_mismatch, mut transform_mismatch) = (0.0f64, 0, 0);
    for set in 0..1000 {
        let n = rng.gen_range(2..300);
        let ties = set % 3 == 0;
        let shift = rng.gen_range(0.0..3.0);
        let mut scores: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let t: bool = rng.gen();
                let s = if ties { rng.gen_range(-20..20) as f64 / 4.0 } else { rng.gen_range(-5.0..5.0) };
                (if t { s + shift } else { s }, t)
            })
            .collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let p = DcfParams {
            p_target: rng.gen_range(0.001..0.5),
            c_miss: rng.gen_range(0.5..10.0),
            c_fa: rng.gen_range(0.5..10.0),
        };
        let (eer_bf, dcf_bf) = brute_force(&scores, &p);
        let eer = compute_eer(&scores).unwrap().0;
        let dcf = compute_min_dcf(&scores, &p).unwrap().0;
        eer_dev = eer_dev.max((eer - eer_bf).abs());
        dcf_mismatch += usize::from(dcf != dcf_bf);
        let mapped: Vec<(f64, bool)> = scores.iter().map(|&(s, t)| (2.0 * (s / 5.0).exp() + 1.0, t)).collect();
        let same = compute_eer(&mapped).unwrap().0 == eer && compute_min_dcf(&mapped, &p).unwrap().0 == dcf;
        transform_mismatch += usize::from(!same);
    }
    let elapsed = start.elapsed();
    outcome(
        eer_dev <= 1e-12 && dcf_mismatch == 0 && transform_mismatch == 0 && elapsed < Duration::from_secs(10),
        format!(
            "1000 sets: max |EER-oracle|={eer_dev:.1e}, minDCF mismatches={dcf_mismatch}, transform mismatches={transform_mismatch}, {elapsed:?}"
        ),
    )
}

fn eer_of(res: &socov::ablation::AblationResult) -> f64 {
    res.report.eer
}

// 5. end-to-end directional result
fn end_to_end() -> Outcome {
    let grid = default_grid(1);
    let sp = grid[4];
    let sap_socov = grid[11];
    assert_eq!(sp, PoolingConfig { constraint_interval: 1, ..PoolingConfig::statistics(false) });
    assert_eq!(sap_socov, PoolingConfig::socov(true));

    let mut wins = 0;
    let mut reductions = Vec::new();
    let mut per_seed = Vec::new();
    let mut full_run = Duration::ZERO;
    for seed in 1..=5u64 {
        let cfg = ExperimentConfig::medium(seed);
        let train: Corpus64 = generate_range(&cfg.corpus, 0).unwrap().corpus;
        let eval: Corpus64 = generate_range(&cfg.eval_corpus_spec(), cfg.corpus.num_speakers).unwrap().corpus;
        let (sp_eer, socov_eer) = if seed == 1 {
            let start = Instant::now();
            let rows = run_ablation(&train, &eval, &cfg.train, &cfg.model, &grid, &cfg.eval).unwrap();
            full_run = start.elapsed();
            (eer_of(&rows[4]), eer_of(&rows[11]))
        } else {
            let a = run_row(&train, &eval, &cfg.train, &cfg.model, &sp, &cfg.eval).unwrap();
            let b = run_row(&train, &eval, &cfg.train, &cfg.model, &sap_socov, &cfg.eval).unwrap();
            (eer_of(&a), eer_of(&b))
        };
        wins += usize::from(socov_eer <= sp_eer);
        reductions.push(if sp_eer > 0.0 { (sp_eer - socov_eer) / sp_eer } else { 0.0 });
        per_seed.push(format!("s{seed} SP {:.3} / SoCov+SAP {:.3}", sp_eer, socov_eer));
    }
    let mean_reduction = reductions.iter().sum::<f64>() / reductions.len() as f64;

    // every grid row on the easy setting
    let easy = ExperimentConfig::easy(1);
    let train: Corpus64 = generate(&easy.corpus).unwrap().corpus;
    let mut low = Vec::new();
    for p in &grid {
        let out = train_run(&train, &easy.train, &easy.model, p).unwrap();
        let acc = out.final_accuracy().unwrap();
        if acc <= 0.95 {
            low.push(format!("{} {acc:.3}", p.label()));
        }
    }
    let passed = wins >= 4 && mean_reduction > 0.0 && full_run < Duration::from_secs(15 * 60) && low.is_empty();
    outcome(
        passed,
        format!(
            "SoCov+SAP <= SP in {wins}/5 seeds (need 4), mean relative reduction {:+.1}% (need > 0), full ablation {:?}, easy rows <= 95%: [{}]; {}",
            100.0 * mean_reduction,
            full_run,
            low.join(", "),
            per_seed.join("; ")
        ),
    )
}

// 6. determinism and IO
fn determinism_and_io() -> Outcome {
    let mut failures = Vec::new();
    let cfg = ExperimentConfig::easy(9);
    let a: Corpus64 = generate(&cfg.corpus).unwrap().corpus;
    let b: Corpus64 = generate(&cfg.corpus).unwrap().corpus;
    let bytes = |c: &Corpus64| -> Vec<Vec<u8>> {
        c.segments
            .iter()
            .map(|s| encode_features(&s.speaker_id, &s.segment_id, &s.features))
            .collect()
    };
    if bytes(&a) != bytes(&b) {
        failures.push("corpus");
    }
    let train = TrainConfig {
        epochs: 2,
        ..cfg.train.clone()
    };
    let run = || {
        let out = train_run(&a, &train, &cfg.model, &cfg.pooling).unwrap();
        let ck = out.checkpoint().to_bytes().unwrap();
        let table = embed_corpus(&out.state.model, &a).unwrap();
        let scores = render_scores(&score_trials(&corpus_trials(&a), &table, true).unwrap());
        (ck, table.render(), scores)
    };
    let (r1, r2) = (run(), run());
    if r1.0 != r2.0 {
        failures.push("checkpoint");
    }
    if r1.1 != r2.1 {
        failures.push("embeddings");
    }
    if r1.2 != r2.2 {
        failures.push("scores");
    }
    if Checkpoint::<f64>::from_bytes(&r1.0).unwrap().to_bytes().unwrap() != r1.0 {
        failures.push("checkpoint round trip");
    }
    let feat = bytes(&a).swap_remove(0);
    let back = decode_features::<f64>(&feat).unwrap();
    if encode_features(&back.speaker_id, &back.segment_id, &back.features) != feat {
        failures.push("feature round trip");
    }
    let mut bad = feat.clone();
    bad[..4].copy_from_slice(b"XXXX");
    if !matches!(decode_features::<f64>(&bad), Err(Error::Format(_))) {
        failures.push("bad magic class");
    }
    if !matches!(decode_features::<f64>(&feat[..feat.len() - 5]), Err(Error::Truncated { .. })) {
        failures.push("truncation class");
    }
    if !matches!(Checkpoint::<f64>::from_bytes(&r1.0[..r1.0.len() - 1]), Err(Error::Truncated { .. })) {
        failures.push("checkpoint truncation class");
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "corpus, checkpoint, embeddings, scores bit-identical; round trips exact; error classes correct".to_string()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// 7. shape contracts
fn shape_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for d in [1usize, 3, 24] {
        let x = FeatureSequence::new(standard_normal::<f64, _>(10, d, &mut rng)).unwrap();
        let att = AttentionParams::random(d, 4, &mut rng).unwrap();
        let w = SemiOrthVector::random_unit(d, 1, &mut rng).unwrap();
        for use_att in [false, true] {
            let out = socov_pool(&x, Some(&att), &w, &PoolingConfig::socov(use_att)).unwrap();
            if out.len() != 2 * d {
                failures.push(format!("socov D={d} len {}", out.len()));
            }
        }
        let mut configs = default_grid(1);
        configs.push(PoolingConfig::new(true, true, true, true));
        for p in &configs {
            let params = PoolParams {
                attention: Some(att.clone()),
                semi_orth: Some(w.clone()),
            };
            let out = pool_forward(&x, p, &params).unwrap();
            let expected = p.num_stats() * d;
            if out.len() != expected || p.output_dim(d) != expected {
                failures.push(format!("{} D={d}", p.label()));
            }
        }
    }
    let grid = default_grid(1);
    let dims: Vec<usize> = grid.iter().map(|p| p.output_dim(1)).collect();
    let expected_dims = [1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2];
    if grid.len() != 12 || dims != expected_dims {
        failures.push(format!("grid dims {dims:?}"));
    }
    outcome(
        failures.is_empty(),
        format!("SoCov length 2D; grid of {} rows with dims {:?}·D; {:?}", grid.len(), dims, failures),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 constraint convergence", constraint_convergence),
        ("2 gradient fidelity", gradient_fidelity),
        ("3 pooling algebra", pooling_algebra),
        ("4 metric oracle equivalence", metric_oracle),
        ("5 end-to-end directional result", end_to_end),
        ("6 determinism and IO", determinism_and_io),
        ("7 shape contracts", shape_contracts),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let (out, elapsed) = timed(f);
        let status = if out.passed { "PASS" } else { "FAIL" };
        println!("criterion {name}: {status} ({}) [{:.1}s]", out.detail, elapsed.as_secs_f64());
        failed += usize::from(!out.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criterion/criteria failed");
        std::process::exit(1);
    }
}
