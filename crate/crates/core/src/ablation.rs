//! Pooling ablation: train one system per pooling configuration with a
//! shared seed and corpus, then evaluate each on held-out speakers.

use crate::config::EvalConfig;
use crate::corpus::Corpus;
use crate::embednet::{EmbeddingModel, ModelDims};
use crate::error::{Error, Result};
use crate::evalkit::{labeled_scores, score_trials, DcfParams, EmbeddingTable, MetricReport, TrialList};
use crate::pooling::PoolingConfig;
use crate::scalar::Scalar;
use crate::trainer::{train_run, TrainConfig};

/// The default comparison grid: single statistics, pairs of statistics with
/// and without the constraint, and the attentive variants of mean+std,
/// std+cov-vec and SoCov.
pub fn default_grid(constraint_interval: usize) -> Vec<PoolingConfig> {
    let plain = |mean, std, cov| PoolingConfig {
        constraint_enabled: false,
        ..PoolingConfig::new(mean, std, cov, false)
    };
    let constrained = |mean, std, cov, att| PoolingConfig {
        constraint_enabled: true,
        ..PoolingConfig::new(mean, std, cov, att)
    };
    let mut grid = vec![
        plain(true, false, false),
        plain(false, true, false),
        plain(false, false, true),
        constrained(false, false, true, false),
        plain(true, true, false),
        plain(true, false, true),
        constrained(true, false, true, false),
        plain(false, true, true),
        constrained(false, true, true, false),
        PoolingConfig::statistics(true),
        PoolingConfig {
            constraint_enabled: false,
            ..PoolingConfig::new(false, true, true, true)
        },
        constrained(false, true, true, true),
    ];
    for cfg in &mut grid {
        cfg.constraint_interval = constraint_interval;
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub label: String,
    pub pooling: PoolingConfig,
    pub pooled_dim: usize,
    pub final_accuracy: f64,
    pub report: MetricReport,
}

/// Embeds every segment of `corpus` with `model`.
pub fn embed_corpus<T: Scalar>(model: &EmbeddingModel<T>, corpus: &Corpus<T>) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new();
    for seg in &corpus.segments {
        let e = model.extract_embedding(&seg.features)?;
        table.insert(seg.segment_id.clone(), e.data().iter().map(|v| v.as_f64()).collect())?;
    }
    Ok(table)
}

/// All same/different-speaker pairs of `corpus`.
pub fn corpus_trials<T: Scalar>(corpus: &Corpus<T>) -> TrialList {
    let ids: Vec<(String, String)> = corpus
        .segments
        .iter()
        .map(|s| (s.segment_id.clone(), s.speaker_id.clone()))
        .collect();
    TrialList::all_pairs(&ids)
}

/// Scores all pairs of `eval` and computes the metric report.
pub fn evaluate_model<T: Scalar>(
    model: &EmbeddingModel<T>,
    eval: &Corpus<T>,
    dcf: &DcfParams,
    length_normalize: bool,
) -> Result<MetricReport> {
    let table = embed_corpus(model, eval)?;
    let scores = score_trials(&corpus_trials(eval), &table, length_normalize)?;
    MetricReport::compute(&labeled_scores(&scores), dcf)
}

/// Trains and evaluates one system.
pub fn run_row<T: Scalar>(
    train: &Corpus<T>,
    eval: &Corpus<T>,
    cfg: &TrainConfig,
    dims: &ModelDims,
    pooling: &PoolingConfig,
    eval_cfg: &EvalConfig,
) -> Result<AblationResult> {
    let out = train_run(train, cfg, dims, pooling)?;
    let report = evaluate_model(&out.state.model, eval, &eval_cfg.dcf(), eval_cfg.length_normalize)?;
    Ok(AblationResult {
        label: pooling.label(),
        pooling: *pooling,
        pooled_dim: pooling.output_dim(dims.deep_dim),
        final_accuracy: out.final_accuracy().unwrap_or(f64::NAN),
        report,
    })
}

/// Trains every configuration of `grid` on the same corpus with the same seed.
pub fn run_ablation<T: Scalar>(
    train: &Corpus<T>,
    eval: &Corpus<T>,
    cfg: &TrainConfig,
    dims: &ModelDims,
    grid: &[PoolingConfig],
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationResult>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    grid.iter()
        .map(|p| run_row(train, eval, cfg, dims, p, eval_cfg))
        .collect()
}

pub const TABLE_HEADER: &str = "config\tpooled_dim\teer\tmin_dcf\ttrain_accuracy";

pub fn render_table(rows: &[AblationResult]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.4}\n",
            r.label, r.pooled_dim, r.report.eer, r.report.min_dcf, r.final_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_and_dims() {
        let grid = default_grid(1);
        assert_eq!(grid.len(), 12);
        let d = 32;
        let dims: Vec<usize> = grid.iter().map(|p| p.output_dim(d)).collect();
        assert_eq!(dims, [d, d, d, d, 2 * d, 2 * d, 2 * d, 2 * d, 2 * d, 2 * d, 2 * d, 2 * d]);
        let labels: std::collections::HashSet<String> = grid.iter().map(PoolingConfig::label).collect();
        assert_eq!(labels.len(), grid.len());
        assert!(grid.iter().all(|p| p.validate().is_ok()));
    }
}
