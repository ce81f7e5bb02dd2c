//! Seeded determinism of every artifact and bit-exact file round trips.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use socov::ablation::{corpus_trials, embed_corpus};
use socov::corpus::{
    decode_features, encode_features, generate, generate_corpus, load_corpus, read_features, read_manifest,
    write_features, SyntheticSpec,
};
use socov::embednet::checkpoint::Checkpoint;
use socov::embednet::ModelDims;
use socov::evalkit::{render_scores, score_trials};
use socov::pooling::{FeatureSequence, PoolingConfig};
use socov::trainer::{train_run, TrainConfig};
use socov::{Error, Tensor};
use tempfile::TempDir;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_speakers: 4,
        segments_per_speaker: 4,
        frames_per_segment: 40,
        ..SyntheticSpec::easy(seed)
    }
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        chunk_frames: 30,
        seed,
        ..TrainConfig::default()
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_directories_are_bit_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    generate_corpus::<f64>(&small_spec(5), a.path()).unwrap();
    generate_corpus::<f64>(&small_spec(5), b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    let c = TempDir::new().unwrap();
    generate_corpus::<f64>(&small_spec(6), c.path()).unwrap();
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn manifest_matches_spec_and_paths_are_unique() {
    let dir = TempDir::new().unwrap();
    let spec = SyntheticSpec {
        num_speakers: 3,
        segments_per_speaker: 5,
        ..small_spec(2)
    };
    generate_corpus::<f64>(&spec, dir.path()).unwrap();
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.len(), 15);
    let speakers: HashSet<&str> = manifest.iter().map(|m| m.speaker_id.as_str()).collect();
    assert_eq!(speakers.len(), 3);
    let paths: HashSet<&str> = manifest.iter().map(|m| m.relative_path.as_str()).collect();
    assert_eq!(paths.len(), 15);
    assert!(manifest.iter().all(|m| m.num_frames == spec.frames_per_segment));

    let loaded = load_corpus::<f64>(dir.path()).unwrap();
    let direct = generate::<f64>(&spec).unwrap().corpus;
    assert_eq!(loaded.segments.len(), direct.segments.len());
    for (l, d) in loaded.segments.iter().zip(&direct.segments) {
        assert_eq!(l.segment_id, d.segment_id);
        assert_eq!(l.features, d.features);
    }
}

#[test]
fn training_embeddings_and_scores_are_bit_identical() {
    let corpus = generate::<f64>(&small_spec(3)).unwrap().corpus;
    let eval = generate::<f64>(&SyntheticSpec {
        num_speakers: 3,
        ..small_spec(3)
    })
    .unwrap()
    .corpus;
    let dims = ModelDims::default();
    let run = || {
        let out = train_run(&corpus, &small_train(3), &dims, &PoolingConfig::default()).unwrap();
        let ck = out.checkpoint().to_bytes().unwrap();
        let table = embed_corpus(&out.state.model, &eval).unwrap();
        let scores = render_scores(&score_trials(&corpus_trials(&eval), &table, true).unwrap());
        (ck, table.render(), scores)
    };
    let first = run();
    assert_eq!(first, run());

    let other = train_run(&corpus, &small_train(4), &dims, &PoolingConfig::default()).unwrap();
    assert_ne!(first.0, other.checkpoint().to_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let corpus = generate::<f64>(&small_spec(8)).unwrap().corpus;
    let out = train_run(&corpus, &small_train(8), &ModelDims::default(), &PoolingConfig::default()).unwrap();
    let ck = out.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for ((na, a), (nb, b)) in ck.model.named_params().iter().zip(back.model.named_params()) {
        assert_eq!(na, &nb);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{na}");
    }
    assert_eq!(back.progress, ck.progress);

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.write(&path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);
}

#[test]
fn malformed_checkpoints_are_classified() {
    let corpus = generate::<f64>(&small_spec(8)).unwrap().corpus;
    let out = train_run(
        &corpus,
        &TrainConfig {
            epochs: 0,
            ..small_train(8)
        },
        &ModelDims::default(),
        &PoolingConfig::statistics(false),
    )
    .unwrap();
    let bytes = out.checkpoint().to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Truncated { .. })
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::<f64>::from_bytes(&long), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::<f64>::read("/nonexistent/m.ckpt"), Err(Error::Io { .. })));
}

#[test]
fn feature_file_errors_are_classified() {
    let x = FeatureSequence::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let bytes = encode_features("s", "g", &x);

    let mut wrong = bytes.clone();
    wrong[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_features::<f64>(&wrong), Err(Error::Format(_))));

    match decode_features::<f64>(&bytes[..bytes.len() - 8]) {
        Err(Error::Truncated { expected, actual, .. }) => assert_eq!((expected, actual), (32, 24)),
        other => panic!("expected truncation, got {other:?}"),
    }
    assert!(matches!(read_features::<f64>("/nonexistent/x.feat"), Err(Error::Io { .. })));
}

fn frames() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..20, 1usize..8).prop_flat_map(|(n, d)| {
        let value = prop_oneof![
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
            Just(-0.0),
            Just(f64::MIN_POSITIVE / 4.0),
            Just(f64::MAX),
        ];
        (Just(n), Just(d), prop::collection::vec(value, n * d))
    })
}

proptest! {
    #[test]
    fn feature_files_round_trip_bit_exact((n, d, data) in frames(), spk in "[a-z0-9]{1,8}", seg in "[a-z0-9-]{1,12}") {
        let x = FeatureSequence::new(Tensor::from_vec(n, d, data.clone()).unwrap()).unwrap();
        let back = decode_features::<f64>(&encode_features(&spk, &seg, &x)).unwrap();
        prop_assert_eq!(&back.speaker_id, &spk);
        prop_assert_eq!(&back.segment_id, &seg);
        let bits: Vec<u64> = back.features.frames().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let dir = TempDir::new().unwrap();
        let path = dir.path().join("x.feat");
        write_features(&path, &spk, &seg, &x).unwrap();
        prop_assert_eq!(read_features::<f64>(&path).unwrap().features, x);
    }
}
