use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use socov::corpus::read_manifest;
use socov::evalkit::{labeled_scores, score_trials, EmbeddingTable, MetricReport, TrialList};
use socov::config::ExperimentConfig;
use tempfile::TempDir;

const EASY: &str = "seed = 3
[corpus]
num_speakers = 8
segments_per_speaker = 8
channel_noise = 0.25
[train]
epochs = 6
[eval]
speakers = 4
";

fn socov(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socov"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn socov")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn workdir(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cfg.toml"), config).unwrap();
    dir
}

/// Sorted (relative path, bytes) of every file below `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn gen_train_extract(dir: &Path) {
    assert_eq!(code(&socov(&["gen-data", "--config", "cfg.toml", "--out", "data"], dir)), 0);
    let out = socov(&["train", "--config", "cfg.toml", "--data", "data", "--out", "model.ckpt"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = socov(&["extract", "--checkpoint", "model.ckpt", "--data", "data", "--out", "emb.tsv"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn gen_data_writes_manifests_and_trials() {
    let dir = workdir(EASY);
    let out = socov(&["gen-data", "--config", "cfg.toml", "--out", "data"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_manifest(dir.path().join("data/train")).unwrap().len(), 64);
    assert_eq!(read_manifest(dir.path().join("data/eval")).unwrap().len(), 32);
    let trials = TrialList::read(dir.path().join("data/trials.tsv")).unwrap();
    assert_eq!(trials.len(), 32 * 31 / 2);
}

#[test]
fn gen_data_is_deterministic() {
    let a = workdir(EASY);
    let b = workdir(EASY);
    for d in [&a, &b] {
        assert_eq!(code(&socov(&["gen-data", "--config", "cfg.toml", "--out", "data"], d.path())), 0);
    }
    let ta = tree(&a.path().join("data"));
    assert!(!ta.is_empty());
    assert_eq!(ta, tree(&b.path().join("data")));

    let c = workdir(EASY);
    assert_eq!(
        code(&socov(&["gen-data", "--config", "cfg.toml", "--seed", "4", "--out", "data"], c.path())),
        0
    );
    assert_ne!(ta, tree(&c.path().join("data")));
}

#[test]
fn zero_speakers_is_a_config_error_before_any_write() {
    let dir = workdir("[corpus]\nnum_speakers = 0\n");
    let out = socov(&["gen-data", "--config", "cfg.toml", "--out", "data"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("num_speakers"), "{}", stderr(&out));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = workdir("[train]\nlearning_rate = 0.1\n");
    let out = socov(&["gen-data", "--config", "cfg.toml", "--out", "data"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn train_easy_socov_reaches_high_accuracy() {
    let dir = workdir(EASY);
    assert_eq!(code(&socov(&["gen-data", "--config", "cfg.toml", "--out", "data"], dir.path())), 0);
    let out = socov(&["train", "--config", "cfg.toml", "--data", "data", "--out", "model.ckpt"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let last = text.lines().last().unwrap();
    let acc: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(acc > 0.95, "{last}");
    assert!(dir.path().join("model.ckpt").is_file());
    let metrics = fs::read_to_string(dir.path().join("model.ckpt.metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 6);
}

#[test]
fn train_missing_data_dir_fails() {
    let dir = workdir(EASY);
    let out = socov(&["train", "--config", "cfg.toml", "--data", "nowhere", "--out", "model.ckpt"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn train_without_statistics_fails_validation() {
    let dir = workdir("[pooling]\nuse_mean = false\nuse_std = false\nuse_cov_vec = false\n");
    let out = socov(&["train", "--config", "cfg.toml", "--data", "nowhere", "--out", "model.ckpt"], dir.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("invalid configuration"), "{}", stderr(&out));
}

#[test]
fn extract_one_row_per_segment_and_repeatable() {
    let dir = workdir(EASY);
    gen_train_extract(dir.path());
    let table = EmbeddingTable::read(dir.path().join("emb.tsv")).unwrap();
    let manifest = read_manifest(dir.path().join("data/eval")).unwrap();
    assert_eq!(table.len(), manifest.len());
    for entry in &manifest {
        assert!(table.get(&entry.segment_id).is_ok());
    }
    let first = fs::read(dir.path().join("emb.tsv")).unwrap();
    let out = socov(&["extract", "--checkpoint", "model.ckpt", "--data", "data", "--out", "emb2.tsv"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(first, fs::read(dir.path().join("emb2.tsv")).unwrap());

    // an independent run of the whole chain produces the same bytes
    let other = workdir(EASY);
    gen_train_extract(other.path());
    assert_eq!(fs::read(dir.path().join("model.ckpt")).unwrap(), fs::read(other.path().join("model.ckpt")).unwrap());
    assert_eq!(first, fs::read(other.path().join("emb.tsv")).unwrap());
}

#[test]
fn extract_config_mismatch_prints_both() {
    let dir = workdir(EASY);
    gen_train_extract(dir.path());
    fs::write(dir.path().join("other.toml"), format!("{EASY}[pooling]\nuse_attention = false\n")).unwrap();
    let out = socov(
        &["extract", "--checkpoint", "model.ckpt", "--data", "data", "--out", "x.tsv", "--config", "other.toml"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("use_attention = false") && err.contains("use_attention = true"), "{err}");
    assert!(!dir.path().join("x.tsv").exists());

    let out = socov(
        &["extract", "--checkpoint", "model.ckpt", "--data", "data", "--out", "y.tsv", "--config", "cfg.toml"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn malformed_checkpoint_is_a_format_error() {
    let dir = workdir(EASY);
    fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = socov(&["extract", "--checkpoint", "bad.ckpt", "--data", ".", "--out", "e.tsv"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

fn write_toy_scores(dir: &Path) {
    let mut table = EmbeddingTable::new();
    table.insert("a1", vec![1.0, 0.0]).unwrap();
    table.insert("a2", vec![2.0, 0.1]).unwrap();
    table.insert("b1", vec![0.0, 1.0]).unwrap();
    table.insert("b2", vec![0.1, 3.0]).unwrap();
    table.write(dir.join("emb.tsv")).unwrap();
    let ids: Vec<(String, String)> = ["a1:a", "a2:a", "b1:b", "b2:b"]
        .iter()
        .map(|s| {
            let (seg, spk) = s.split_once(':').unwrap();
            (seg.to_string(), spk.to_string())
        })
        .collect();
    TrialList::all_pairs(&ids).write(dir.join("trials.tsv")).unwrap();
}

#[test]
fn score_eval_separated_toy_has_zero_eer() {
    let dir = workdir("");
    write_toy_scores(dir.path());
    let out = socov(&["score-eval", "--embeddings", "emb.tsv", "--trials", "trials.tsv", "--out", "res"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["scores.tsv", "metrics.tsv", "det.tsv"] {
        assert!(dir.path().join("res").join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("res/metrics.tsv")).unwrap();
    let eer: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("eer\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(eer, 0.0);
}

#[test]
fn score_eval_matches_library() {
    let dir = workdir(EASY);
    gen_train_extract(dir.path());
    let out = socov(
        &[
            "score-eval", "--embeddings", "emb.tsv", "--trials", "data/trials.tsv", "--out", "res",
            "--dcf-ptarget", "0.01", "--dcf-cfa", "2",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let table = EmbeddingTable::read(dir.path().join("emb.tsv")).unwrap();
    let trials = TrialList::read(dir.path().join("data/trials.tsv")).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.eval.p_target = 0.01;
    cfg.eval.c_fa = 2.0;
    let scores = score_trials(&trials, &table, true).unwrap();
    let report = MetricReport::compute(&labeled_scores(&scores), &cfg.eval.dcf()).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("res/metrics.tsv")).unwrap(), report.render());
    assert_eq!(
        fs::read_to_string(dir.path().join("res/scores.tsv")).unwrap(),
        socov::evalkit::render_scores(&scores)
    );
}

#[test]
fn score_eval_rejects_bad_dcf_before_writing() {
    let dir = workdir("");
    write_toy_scores(dir.path());
    let out = socov(
        &["score-eval", "--embeddings", "emb.tsv", "--trials", "trials.tsv", "--out", "res", "--dcf-ptarget", "1.5"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("res").exists());
}

#[test]
fn score_eval_unknown_segment_is_lookup_error() {
    let dir = workdir("");
    write_toy_scores(dir.path());
    fs::write(dir.path().join("t.tsv"), "a1\tzz\ttarget\n").unwrap();
    let out = socov(&["score-eval", "--embeddings", "emb.tsv", "--trials", "t.tsv", "--out", "res"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("zz"), "{}", stderr(&out));
}

#[test]
fn ablation_emits_every_grid_row() {
    let dir = workdir(
        "seed = 2
[corpus]
num_speakers = 4
segments_per_speaker = 4
channel_noise = 0.25
[train]
epochs = 1
[eval]
speakers = 2
segments_per_speaker = 3
",
    );
    assert_eq!(code(&socov(&["gen-data", "--config", "cfg.toml", "--out", "data"], dir.path())), 0);
    let out = socov(&["ablation", "--config", "cfg.toml", "--data", "data", "--out", "table.tsv"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("table.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    let dims: Vec<&str> = rows.iter().map(|r| r.split('\t').nth(1).unwrap()).collect();
    assert_eq!(dims, ["32", "32", "32", "32", "64", "64", "64", "64", "64", "64", "64", "64"]);
}

#[test]
fn check_suites_pass() {
    let dir = workdir("");
    for what in ["grad", "constraint", "pooling-props"] {
        let out = socov(&["check", what], dir.path());
        assert_eq!(code(&out), 0, "{what}: {}{}", stdout(&out), stderr(&out));
    }
    let out = socov(&["check", "constraint"], dir.path());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1 + 7);
    assert!(text.lines().nth(1).unwrap().starts_with("0\t0.5"));
}
