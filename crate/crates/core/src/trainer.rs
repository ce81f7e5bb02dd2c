//! Deterministic SGD training with exponential learning-rate decay and
//! interleaved semi-orthogonal constraint steps.
//!
//! Each step takes the mean additive-margin softmax loss over a batch of
//! fixed-length chunks, applies weight decay (skipping the vectorization
//! weight, whose norm the constraint governs), updates every parameter, puts
//! the class-weight columns back on the unit sphere and finally, when due,
//! applies one constraint step to the vectorization weight. A zero learning
//! rate leaves every parameter untouched apart from that constraint step.
//!
//! Batches come from a per-epoch plan seeded by `(seed, epoch)`, so a run can
//! be resumed from any saved step and continues bit-identically.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{speaker_seed, Corpus};
use crate::embednet::checkpoint::{Checkpoint, Progress};
use crate::embednet::{EmbeddingModel, ModelDims, SEMI_ORTH_PARAM};
use crate::error::{Error, Result};
use crate::pooling::{FeatureSequence, PoolingConfig};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

const CLASS_WEIGHTS_PARAM: &str = "segment.class_weights";
const RUNNING_AUX: &str = "state.running";
const VELOCITY_PREFIX: &str = "velocity.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per training chunk; shorter segments are used whole.
    pub chunk_frames: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-2,
            lr_min: 1e-5,
            weight_decay: 3e-4,
            momentum: 0.0,
            epochs: 20,
            batch_size: 8,
            chunk_frames: 100,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_max > self.lr_min && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "train: need lr_max > lr_min > 0, got lr_max={} lr_min={}",
                self.lr_max, self.lr_min
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train: weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train: momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be at least 1".into()));
        }
        if self.chunk_frames == 0 {
            return Err(Error::Config("train: chunk_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr_max · (lr_min / lr_max)^(step / total)`.
pub fn lr_schedule(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let total = total.max(1);
    let frac = step.min(total) as f64 / total as f64;
    cfg.lr_max * (cfg.lr_min / cfg.lr_max).powf(frac)
}

/// One chunk of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkRef {
    pub segment: usize,
    pub offset: usize,
    pub len: usize,
}

pub fn steps_per_epoch(num_segments: usize, batch_size: usize) -> usize {
    num_segments.div_ceil(batch_size.max(1))
}

/// Batches of one epoch: a seeded permutation of all segments, each cut to a
/// random chunk.
pub fn epoch_plan<T: Scalar>(corpus: &Corpus<T>, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<ChunkRef>> {
    let mut rng = ChaCha8Rng::seed_from_u64(speaker_seed(cfg.seed ^ 0x7452_4149_4E00_0000, epoch));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let chunks: Vec<ChunkRef> = order
        .into_iter()
        .map(|segment| {
            let n = corpus.segments[segment].features.num_frames();
            let len = cfg.chunk_frames.min(n);
            let offset = if n > len { rng.gen_range(0..=n - len) } else { 0 };
            ChunkRef { segment, offset, len }
        })
        .collect();
    chunks.chunks(cfg.batch_size).map(<[ChunkRef]>::to_vec).collect()
}

/// Loss and accuracy of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub mean_loss: f64,
    pub correct: usize,
    pub count: usize,
    pub lr: f64,
    /// Whether a constraint step followed the optimizer step.
    pub constrained: bool,
}

/// Loss and accuracy accumulated over the current epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl RunningStats {
    fn add(&mut self, s: &StepStats) {
        self.loss_sum += s.mean_loss * s.count as f64;
        self.correct += s.correct;
        self.count += s.count;
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: EmbeddingModel<T>,
    pub step: usize,
    pub total_steps: usize,
    /// Momentum buffers in parameter order; empty when momentum is 0.
    pub velocity: Vec<Tensor<T>>,
    pub running: RunningStats,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: EmbeddingModel<T>, total_steps: usize) -> Self {
        Self {
            model,
            step: 0,
            total_steps,
            velocity: Vec::new(),
            running: RunningStats::default(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut aux = vec![(
            RUNNING_AUX.to_string(),
            Tensor::from_vec(
                1,
                3,
                vec![
                    T::lit(self.running.loss_sum),
                    T::from_count(self.running.correct),
                    T::from_count(self.running.count),
                ],
            )
            .expect("1x3"),
        )];
        if !self.velocity.is_empty() {
            for ((name, _), v) in self.model.named_params().into_iter().zip(&self.velocity) {
                aux.push((format!("{VELOCITY_PREFIX}{name}"), v.clone()));
            }
        }
        aux.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint {
            model: self.model.clone(),
            progress: Progress {
                step: self.step,
                total_steps: self.total_steps,
            },
            aux,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let find = |name: &str| ck.aux.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let running = match find(RUNNING_AUX) {
            Some(t) if t.len() == 3 => RunningStats {
                loss_sum: t.data()[0].as_f64(),
                correct: t.data()[1].as_f64() as usize,
                count: t.data()[2].as_f64() as usize,
            },
            Some(_) => return Err(Error::Format(format!("`{RUNNING_AUX}` must hold 3 values"))),
            None => RunningStats::default(),
        };
        let names: Vec<String> = ck.model.named_params().into_iter().map(|(n, _)| n).collect();
        let velocity = if ck.aux.iter().any(|(n, _)| n.starts_with(VELOCITY_PREFIX)) {
            names
                .iter()
                .map(|n| {
                    find(&format!("{VELOCITY_PREFIX}{n}"))
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks velocity for `{n}`")))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        if ck.progress.step > ck.progress.total_steps {
            return Err(Error::Format(format!(
                "checkpoint step {} exceeds total {}",
                ck.progress.step, ck.progress.total_steps
            )));
        }
        Ok(Self {
            model: ck.model,
            step: ck.progress.step,
            total_steps: ck.progress.total_steps,
            velocity,
            running,
        })
    }
}

/// One SGD step at learning rate `lr`, followed by the constraint step when
/// `step % constraint_interval == 0`. Does not advance `state.step`.
pub fn train_step_with_lr<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[(FeatureSequence<T>, usize)],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let step = state.step;
    let model = &mut state.model;
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let mut losses = Vec::with_capacity(batch.len());
    let mut correct = 0;
    for (x, label) in batch {
        let (loss, logits) = model.loss_graph(&bound, tape.constant(x.frames().clone()), *label)?;
        let row = logits.value();
        let predicted = (0..row.cols()).fold(0, |k, j| if row.data()[j] > row.data()[k] { j } else { k });
        if predicted == *label {
            correct += 1;
        }
        losses.push(loss);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = total.add(l)?;
    }
    let mean = total.scale(T::one() / T::from_count(batch.len()));
    let mean_loss = mean.value().item().as_f64();
    if !mean_loss.is_finite() {
        return Err(Error::Training {
            step,
            detail: diagnostic_dump(model, mean_loss, lr),
        });
    }
    let grads = tape.backward(mean)?;
    let vars = bound.vars();

    let decay = T::lit(cfg.weight_decay);
    let momentum = T::lit(cfg.momentum);
    let lr_t = T::lit(lr);
    let use_velocity = cfg.momentum > 0.0;
    if use_velocity && state.velocity.is_empty() {
        state.velocity = model
            .named_params()
            .iter()
            .map(|(_, p)| Tensor::zeros(p.rows(), p.cols()))
            .collect();
    }
    for (i, ((name, param), var)) in model.named_params_mut().into_iter().zip(&vars).enumerate() {
        let mut g = grads.wrt(*var);
        if cfg.weight_decay != 0.0 && name != SEMI_ORTH_PARAM {
            g.accumulate(&param.scale(decay));
        }
        if use_velocity {
            let v = &mut state.velocity[i];
            *v = v.scale(momentum);
            v.accumulate(&g);
            g = v.clone();
        }
        if lr != 0.0 {
            param.accumulate(&g.scale(-lr_t));
            if name == CLASS_WEIGHTS_PARAM {
                crate::init::normalize_columns(param);
            }
        }
    }

    let mut constrained = false;
    if model.pooling.constraint_enabled {
        if let Some(w) = model.semi_orth.as_mut() {
            if step % w.step_interval() == 0 {
                w.apply_constraint_step();
                constrained = true;
            }
        }
    }
    Ok(StepStats {
        mean_loss,
        correct,
        count: batch.len(),
        lr,
        constrained,
    })
}

/// One step at the scheduled learning rate; advances `state.step`.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[(FeatureSequence<T>, usize)],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let lr = lr_schedule(state.step, state.total_steps, cfg);
    let stats = train_step_with_lr(state, batch, cfg, lr)?;
    state.running.add(&stats);
    state.step += 1;
    Ok(stats)
}

fn diagnostic_dump<T: Scalar>(model: &EmbeddingModel<T>, loss: f64, lr: f64) -> String {
    let mut out = format!("loss={loss} lr={lr:e};");
    for (name, p) in model.named_params() {
        out.push_str(&format!(" {name}: max|.|={:e}", p.max_abs().as_f64()));
        if !p.is_finite() {
            out.push_str(" (non-finite)");
        }
        out.push(';');
    }
    out
}

/// Per-epoch log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    /// `None` when the model has no covariance vector.
    pub w_norm: Option<f64>,
    pub penalty: Option<f64>,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    /// Mean loss over the first batch of the epoch.
    pub first_batch_loss: f64,
    /// Mean loss over the last batch of the epoch.
    pub last_batch_loss: f64,
}

pub const METRICS_HEADER: &str = "epoch\tmean_loss\taccuracy\tw_norm\tpenalty_F\tlr";

impl EpochMetrics {
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.16e}"));
        format!(
            "{}\t{:.16e}\t{:.16e}\t{}\t{}\t{:.16e}",
            self.epoch,
            self.mean_loss,
            self.accuracy,
            opt(self.w_norm),
            opt(self.penalty),
            self.lr
        )
    }
}

pub fn render_metrics(log: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in log {
        out.push_str(&m.render());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub log: Vec<EpochMetrics>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        self.state.to_checkpoint()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.log.last().map(|m| m.accuracy)
    }
}

fn check_corpus<T: Scalar>(corpus: &Corpus<T>, dims: &ModelDims, cfg: &TrainConfig, min_frames: usize) -> Result<()> {
    corpus.validate_for_training()?;
    if corpus.feature_dim() != Some(dims.input_dim) {
        return Err(Error::Config(format!(
            "model input_dim is {} but the corpus has {:?}-dimensional features",
            dims.input_dim,
            corpus.feature_dim()
        )));
    }
    if cfg.chunk_frames < min_frames {
        return Err(Error::Config(format!(
            "train: chunk_frames={} is shorter than the encoder minimum of {min_frames}",
            cfg.chunk_frames
        )));
    }
    if let Some(s) = corpus.segments.iter().find(|s| s.features.num_frames() < min_frames) {
        return Err(Error::Input(format!(
            "segment `{}` has {} frames, the encoder needs {min_frames}",
            s.segment_id,
            s.features.num_frames()
        )));
    }
    Ok(())
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) on `corpus`.
pub fn train_run<T: Scalar>(
    corpus: &Corpus<T>,
    cfg: &TrainConfig,
    dims: &ModelDims,
    pooling: &PoolingConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = EmbeddingModel::init(dims, pooling, corpus.num_speakers().max(1), cfg.seed)?;
    check_corpus(corpus, dims, cfg, model.encoder.min_frames())?;
    let total = cfg.epochs * steps_per_epoch(corpus.len(), cfg.batch_size);
    run_from(TrainState::new(model, total), corpus, cfg)
}

/// Continues a run saved with [`TrainState::to_checkpoint`].
pub fn resume<T: Scalar>(ck: Checkpoint<T>, corpus: &Corpus<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let state = TrainState::from_checkpoint(ck)?;
    check_corpus(corpus, &state.model.dims, cfg, state.model.encoder.min_frames())?;
    if state.model.num_speakers() != corpus.num_speakers() {
        return Err(Error::Input(format!(
            "checkpoint has {} speakers, corpus has {}",
            state.model.num_speakers(),
            corpus.num_speakers()
        )));
    }
    run_from(state, corpus, cfg)
}

/// Runs until `state.total_steps`, or only `max_steps` more steps if given.
pub fn run_steps<T: Scalar>(
    state: &mut TrainState<T>,
    corpus: &Corpus<T>,
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<Vec<EpochMetrics>> {
    let spe = steps_per_epoch(corpus.len(), cfg.batch_size);
    let stop = max_steps.map_or(state.total_steps, |m| (state.step + m).min(state.total_steps));
    let mut log = Vec::new();
    let mut first_loss = f64::NAN;
    while state.step < stop {
        let epoch = state.step / spe;
        let plan = epoch_plan(corpus, cfg, epoch);
        let mut b = state.step % spe;
        while b < plan.len() && state.step < stop {
            let batch: Vec<(FeatureSequence<T>, usize)> = plan[b]
                .iter()
                .map(|c| {
                    let seg = &corpus.segments[c.segment];
                    Ok((seg.features.chunk(c.offset, c.len)?, seg.label))
                })
                .collect::<Result<_>>()?;
            let stats = train_step(state, &batch, cfg)?;
            if b == 0 {
                first_loss = stats.mean_loss;
            }
            b += 1;
            if b == plan.len() {
                let w = state.model.semi_orth.as_ref();
                log.push(EpochMetrics {
                    epoch: epoch + 1,
                    mean_loss: state.running.mean_loss(),
                    accuracy: state.running.accuracy(),
                    w_norm: w.map(|w| w.norm().as_f64()),
                    penalty: w.map(|w| w.penalty().as_f64()),
                    lr: stats.lr,
                    first_batch_loss: first_loss,
                    last_batch_loss: stats.mean_loss,
                });
                state.running = RunningStats::default();
            }
        }
    }
    Ok(log)
}

fn run_from<T: Scalar>(mut state: TrainState<T>, corpus: &Corpus<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let log = run_steps(&mut state, corpus, cfg, None)?;
    Ok(TrainOutcome { state, log })
}
