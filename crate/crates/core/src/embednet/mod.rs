//! Embedding network: time-delay frame encoder, pooling, segment-level affine
//! layers and a cosine classification head trained with additive-margin
//! softmax. Embeddings are read from the first segment affine layer, before
//! its activation.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::pooling::graph::{self, PoolVars};
use crate::pooling::{AttentionParams, FeatureSequence, PooledStats, PoolingConfig, SemiOrthVector};
use crate::scalar::Scalar;
use crate::tape::{concat_cols, Tape, Var};
use crate::tensor::Tensor;

/// Guards the L2 normalizations inside the cosine head against zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Network sizes. The default is the desk-scale setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub input_dim: usize,
    /// Frame-level feature dimension `D` seen by the pooling layer.
    pub deep_dim: usize,
    /// Attention hidden size `D_h`.
    pub attention_hidden: usize,
    pub embed_dim: usize,
    /// Frame offsets of each encoder layer.
    pub contexts: Vec<Vec<i64>>,
    pub am_margin: f64,
    pub am_scale: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input_dim: 24,
            deep_dim: 32,
            attention_hidden: 8,
            embed_dim: 64,
            contexts: vec![vec![-2, -1, 0, 1, 2], vec![-1, 0, 1]],
            am_margin: 0.35,
            am_scale: 64.0,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("deep_dim", self.deep_dim),
            ("attention_hidden", self.attention_hidden),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model: {name} must be at least 1")));
            }
        }
        if self.contexts.is_empty() {
            return Err(Error::Config("model: at least one encoder layer is required".into()));
        }
        for (i, ctx) in self.contexts.iter().enumerate() {
            if ctx.is_empty() {
                return Err(Error::Config(format!("model: context {i} is empty")));
            }
            if ctx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("model: context {i} must be strictly increasing")));
            }
            if ctx.iter().any(|o| !ctx.contains(&-o)) {
                return Err(Error::Config(format!("model: context {i} is not symmetric around 0")));
            }
        }
        AmSoftmaxConfig::new(self.am_margin, self.am_scale, 1)?;
        Ok(())
    }

    /// Frames consumed by the encoder's combined context.
    pub fn context_span(&self) -> usize {
        self.contexts.iter().map(|c| span_of(c)).sum()
    }
}

fn span_of(ctx: &[i64]) -> usize {
    (ctx[ctx.len() - 1] - ctx[0]) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmSoftmaxConfig {
    pub margin: f64,
    pub scale: f64,
    pub num_speakers: usize,
}

impl AmSoftmaxConfig {
    pub fn new(margin: f64, scale: f64, num_speakers: usize) -> Result<Self> {
        if !(margin >= 0.0) || !(scale > 0.0) || num_speakers == 0 {
            return Err(Error::Config(format!(
                "am-softmax needs margin >= 0, scale > 0 and at least one class \
                 (got m={margin}, s={scale}, C={num_speakers})"
            )));
        }
        Ok(Self {
            margin,
            scale,
            num_speakers,
        })
    }
}

/// One time-delay layer: `relu(concat(x[t+o] for o in context) · W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdnnLayer<T> {
    pub context: Vec<i64>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> TdnnLayer<T> {
    pub fn input_dim(&self) -> usize {
        self.weight.rows() / self.context.len()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoder<T> {
    pub layers: Vec<TdnnLayer<T>>,
}

impl<T: Scalar> FrameEncoder<T> {
    pub fn random<R: rand::Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        let mut input = dims.input_dim;
        let layers = dims
            .contexts
            .iter()
            .map(|ctx| {
                let layer = TdnnLayer {
                    context: ctx.clone(),
                    weight: init::glorot_uniform(ctx.len() * input, dims.deep_dim, rng),
                    bias: Tensor::zeros(1, dims.deep_dim),
                };
                input = dims.deep_dim;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn context_span(&self) -> usize {
        self.layers.iter().map(|l| span_of(&l.context)).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Smallest segment the encoder accepts.
    pub fn min_frames(&self) -> usize {
        self.context_span() + 1
    }
}

/// Segment-level layers: `affine1 → relu → affine2 → cosine against class weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentNet<T> {
    pub affine1_weight: Tensor<T>,
    pub affine1_bias: Tensor<T>,
    pub affine2_weight: Tensor<T>,
    pub affine2_bias: Tensor<T>,
    /// `embed_dim x num_speakers`, unit-norm columns.
    pub class_weights: Tensor<T>,
}

impl<T: Scalar> SegmentNet<T> {
    pub fn random<R: rand::Rng + ?Sized>(
        pool_dim: usize,
        embed_dim: usize,
        num_speakers: usize,
        rng: &mut R,
    ) -> Self {
        let mut class_weights = init::standard_normal(embed_dim, num_speakers, rng);
        init::normalize_columns(&mut class_weights);
        Self {
            affine1_weight: init::glorot_uniform(pool_dim, embed_dim, rng),
            affine1_bias: Tensor::zeros(1, embed_dim),
            affine2_weight: init::glorot_uniform(embed_dim, embed_dim, rng),
            affine2_bias: Tensor::zeros(1, embed_dim),
            class_weights,
        }
    }

    pub fn pool_dim(&self) -> usize {
        self.affine1_weight.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.affine1_weight.cols()
    }

    pub fn num_speakers(&self) -> usize {
        self.class_weights.cols()
    }
}

/// Frame encoder + pooling + segment network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel<T> {
    pub dims: ModelDims,
    pub pooling: PoolingConfig,
    pub encoder: FrameEncoder<T>,
    pub attention: Option<AttentionParams<T>>,
    pub semi_orth: Option<SemiOrthVector<T>>,
    pub segment: SegmentNet<T>,
}

/// Model parameters recorded on a tape, in [`EmbeddingModel::named_params`] order.
#[derive(Debug, Clone)]
pub struct BoundModel<'t, T> {
    pub encoder: Vec<(Var<'t, T>, Var<'t, T>)>,
    pub attention: Option<(Var<'t, T>, Var<'t, T>)>,
    pub w: Option<Var<'t, T>>,
    pub affine1: (Var<'t, T>, Var<'t, T>),
    pub affine2: (Var<'t, T>, Var<'t, T>),
    pub class_weights: Var<'t, T>,
}

impl<'t, T: Scalar> BoundModel<'t, T> {
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.push(w);
            out.push(b);
        }
        if let Some((w1, w2)) = self.attention {
            out.push(w1);
            out.push(w2);
        }
        if let Some(w) = self.w {
            out.push(w);
        }
        out.extend([
            self.affine1.0,
            self.affine1.1,
            self.affine2.0,
            self.affine2.1,
            self.class_weights,
        ]);
        out
    }
}

/// Name of the covariance vectorization weight among the model parameters.
pub const SEMI_ORTH_PARAM: &str = "pooling.w";

impl<T: Scalar> EmbeddingModel<T> {
    /// Seeded random initialization. The vectorization weight starts on the
    /// unit sphere.
    pub fn init(dims: &ModelDims, pooling: &PoolingConfig, num_speakers: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        pooling.validate()?;
        if num_speakers == 0 {
            return Err(Error::Config("model needs at least one speaker".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = FrameEncoder::random(dims, &mut rng);
        let attention = if pooling.use_attention {
            Some(AttentionParams::random(dims.deep_dim, dims.attention_hidden, &mut rng)?)
        } else {
            None
        };
        let semi_orth = if pooling.use_cov_vec {
            Some(SemiOrthVector::random_unit(
                dims.deep_dim,
                pooling.constraint_interval,
                &mut rng,
            )?)
        } else {
            None
        };
        let segment = SegmentNet::random(
            pooling.output_dim(dims.deep_dim),
            dims.embed_dim,
            num_speakers,
            &mut rng,
        );
        Ok(Self {
            dims: dims.clone(),
            pooling: *pooling,
            encoder,
            attention,
            semi_orth,
            segment,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.segment.num_speakers()
    }

    pub fn am_config(&self) -> AmSoftmaxConfig {
        AmSoftmaxConfig {
            margin: self.dims.am_margin,
            scale: self.dims.am_scale,
            num_speakers: self.num_speakers(),
        }
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        if let Some(a) = &self.attention {
            out.push(("attention.w1".to_string(), &a.w1));
            out.push(("attention.w2".to_string(), &a.w2));
        }
        if let Some(s) = &self.semi_orth {
            out.push((SEMI_ORTH_PARAM.to_string(), s.weight()));
        }
        let seg = &self.segment;
        out.push(("segment.affine1.weight".to_string(), &seg.affine1_weight));
        out.push(("segment.affine1.bias".to_string(), &seg.affine1_bias));
        out.push(("segment.affine2.weight".to_string(), &seg.affine2_weight));
        out.push(("segment.affine2.bias".to_string(), &seg.affine2_bias));
        out.push(("segment.class_weights".to_string(), &seg.class_weights));
        out
    }

    /// Mutable counterpart of [`Self::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut l.weight));
            out.push((format!("encoder.{i}.bias"), &mut l.bias));
        }
        if let Some(a) = &mut self.attention {
            out.push(("attention.w1".to_string(), &mut a.w1));
            out.push(("attention.w2".to_string(), &mut a.w2));
        }
        if let Some(s) = &mut self.semi_orth {
            out.push((SEMI_ORTH_PARAM.to_string(), s.weight_mut()));
        }
        let seg = &mut self.segment;
        out.push(("segment.affine1.weight".to_string(), &mut seg.affine1_weight));
        out.push(("segment.affine1.bias".to_string(), &mut seg.affine1_bias));
        out.push(("segment.affine2.weight".to_string(), &mut seg.affine2_weight));
        out.push(("segment.affine2.bias".to_string(), &mut seg.affine2_bias));
        out.push(("segment.class_weights".to_string(), &mut seg.class_weights));
        out
    }

    /// Records the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundModel<'t, T> {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundModel {
            encoder: self
                .encoder
                .layers
                .iter()
                .map(|l| (leaf(&l.weight), leaf(&l.bias)))
                .collect(),
            attention: self.attention.as_ref().map(|a| (leaf(&a.w1), leaf(&a.w2))),
            w: self.semi_orth.as_ref().map(|s| leaf(s.weight())),
            affine1: (leaf(&self.segment.affine1_weight), leaf(&self.segment.affine1_bias)),
            affine2: (leaf(&self.segment.affine2_weight), leaf(&self.segment.affine2_bias)),
            class_weights: leaf(&self.segment.class_weights),
        }
    }

    /// Embedding and cosine logits for one segment.
    pub fn forward_graph<'t>(
        &self,
        bound: &BoundModel<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let frames = self.encode_graph(bound, x)?;
        let pooled = graph::pool_forward(
            frames,
            &self.pooling,
            &PoolVars {
                attention: bound.attention,
                w: bound.w,
            },
        )?;
        segment_graph(bound, pooled.vector)
    }

    fn encode_graph<'t>(&self, bound: &BoundModel<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (n, d) = x.shape();
        if d != self.encoder.input_dim() {
            return Err(Error::Dimension {
                op: "encode_frames",
                lhs: (n, d),
                rhs: (n, self.encoder.input_dim()),
            });
        }
        if n < self.encoder.min_frames() {
            return Err(Error::Input(format!(
                "segment of {n} frames is shorter than the encoder minimum of {}",
                self.encoder.min_frames()
            )));
        }
        let mut h = x;
        for (layer, &(w, b)) in self.encoder.layers.iter().zip(&bound.encoder) {
            h = tdnn_graph(h, &layer.context, w, b)?;
        }
        Ok(h)
    }

    /// Additive-margin softmax loss of one labelled segment, with its logits.
    pub fn loss_graph<'t>(
        &self,
        bound: &BoundModel<'t, T>,
        x: Var<'t, T>,
        label: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (_, logits) = self.forward_graph(bound, x)?;
        let loss = logits.am_softmax(label, T::lit(self.dims.am_margin), T::lit(self.dims.am_scale))?;
        Ok((loss, logits))
    }

    pub fn extract_embedding(&self, features: &FeatureSequence<T>) -> Result<Tensor<T>> {
        extract_embedding(features, self)
    }
}

fn tdnn_graph<'t, T: Scalar>(
    h: Var<'t, T>,
    context: &[i64],
    w: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let n = h.shape().0;
    let span = span_of(context);
    if n <= span {
        return Err(Error::Input(format!(
            "segment of {n} frames is shorter than the layer minimum of {}",
            span + 1
        )));
    }
    let out_frames = n - span;
    let first = context[0];
    let parts = context
        .iter()
        .map(|&o| h.slice_rows((o - first) as usize, out_frames))
        .collect::<Result<Vec<_>>>()?;
    let spliced = if parts.len() == 1 {
        parts[0]
    } else {
        concat_cols(&parts)?
    };
    Ok(spliced.matmul(w)?.add_row(b)?.relu())
}

fn segment_graph<'t, T: Scalar>(
    bound: &BoundModel<'t, T>,
    pooled: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let eps = T::lit(NORM_EPS);
    let embedding = pooled.matmul(bound.affine1.0)?.add_row(bound.affine1.1)?;
    let hidden = embedding
        .relu()
        .matmul(bound.affine2.0)?
        .add_row(bound.affine2.1)?;
    let logits = hidden
        .normalize_rows(eps)
        .matmul(bound.class_weights.normalize_cols(eps))?;
    Ok((embedding, logits))
}

/// Runs the frame encoder on one segment.
pub fn encode_frames<T: Scalar>(
    features: &FeatureSequence<T>,
    enc: &FrameEncoder<T>,
) -> Result<FeatureSequence<T>> {
    if features.dim() != enc.input_dim() {
        return Err(Error::Dimension {
            op: "encode_frames",
            lhs: features.frames().shape(),
            rhs: (features.num_frames(), enc.input_dim()),
        });
    }
    if features.num_frames() < enc.min_frames() {
        return Err(Error::Input(format!(
            "segment of {} frames is shorter than the encoder minimum of {}",
            features.num_frames(),
            enc.min_frames()
        )));
    }
    let tape = Tape::new();
    let mut h = tape.constant(features.frames().clone());
    for layer in &enc.layers {
        let w = tape.constant(layer.weight.clone());
        let b = tape.constant(layer.bias.clone());
        h = tdnn_graph(h, &layer.context, w, b)?;
    }
    let out = h.value().clone();
    FeatureSequence::new(out)
}

/// `(embedding, cosine logits)` for a pooled row.
pub fn segment_forward<T: Scalar>(
    pooled: &PooledStats<T>,
    net: &SegmentNet<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if pooled.len() != net.pool_dim() {
        return Err(Error::Config(format!(
            "pooled vector has {} entries but affine1 expects {}",
            pooled.len(),
            net.pool_dim()
        )));
    }
    let tape = Tape::new();
    let c = |t: &Tensor<T>| tape.constant(t.clone());
    let bound = BoundModel {
        encoder: Vec::new(),
        attention: None,
        w: None,
        affine1: (c(&net.affine1_weight), c(&net.affine1_bias)),
        affine2: (c(&net.affine2_weight), c(&net.affine2_bias)),
        class_weights: c(&net.class_weights),
    };
    let (emb, logits) = segment_graph(&bound, tape.constant(pooled.vector.clone()))?;
    let out = (emb.value().clone(), logits.value().clone());
    Ok(out)
}

/// `−log(e^{s(cos_t − m)} / (e^{s(cos_t − m)} + Σ_{j≠t} e^{s·cos_j}))`.
pub fn am_softmax_loss<T: Scalar>(cosines: &Tensor<T>, label: usize, cfg: &AmSoftmaxConfig) -> Result<T> {
    if label >= cosines.cols() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            cosines.cols()
        )));
    }
    let tape = Tape::new();
    let loss = tape
        .constant(cosines.clone())
        .am_softmax(label, T::lit(cfg.margin), T::lit(cfg.scale))?;
    let v = loss.value().item();
    Ok(v)
}

/// Encoder → pooling → first affine layer, without the classification head.
pub fn extract_embedding<T: Scalar>(features: &FeatureSequence<T>, model: &EmbeddingModel<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let (embedding, _) = model.forward_graph(&bound, tape.constant(features.frames().clone()))?;
    let out = embedding.value().clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(context: Vec<i64>, weight: Tensor<f64>, bias: Tensor<f64>) -> FrameEncoder<f64> {
        FrameEncoder {
            layers: vec![TdnnLayer {
                context,
                weight,
                bias,
            }],
        }
    }

    #[test]
    fn identity_encoder_passes_nonnegative_input() {
        let x = FeatureSequence::from_rows(&[&[0.5, 1.0], &[2.0, 0.0], &[0.25, 3.0]]).unwrap();
        let enc = one_layer(vec![0], Tensor::identity(2), Tensor::zeros(1, 2));
        assert_eq!(encode_frames(&x, &enc).unwrap(), x);
    }

    #[test]
    fn zero_encoder_gives_zero_frames() {
        let x = FeatureSequence::from_rows(&[&[0.5, -1.0], &[2.0, 0.0], &[0.25, 3.0]]).unwrap();
        let enc = one_layer(vec![-1, 0, 1], Tensor::zeros(6, 4), Tensor::zeros(1, 4));
        let out = encode_frames(&x, &enc).unwrap();
        assert_eq!(out.frames(), &Tensor::zeros(1, 4));
    }

    #[test]
    fn context_shrinks_frame_count() {
        let x = FeatureSequence::new(Tensor::<f64>::filled(5, 2, 1.0)).unwrap();
        let enc = one_layer(vec![-1, 0, 1], Tensor::filled(6, 3, 0.1), Tensor::zeros(1, 3));
        assert_eq!(encode_frames(&x, &enc).unwrap().num_frames(), 3);
    }

    #[test]
    fn short_segment_names_minimum() {
        let x = FeatureSequence::new(Tensor::<f64>::filled(2, 2, 1.0)).unwrap();
        let enc = one_layer(vec![-1, 0, 1], Tensor::filled(6, 3, 0.1), Tensor::zeros(1, 3));
        let err = encode_frames(&x, &enc).unwrap_err();
        assert!(matches!(err, Error::Input(ref m) if m.contains("minimum of 3")), "{err}");
    }

    fn tiny_net() -> SegmentNet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        SegmentNet::random(4, 4, 3, &mut rng)
    }

    fn pooled(values: &[f64]) -> PooledStats<f64> {
        PooledStats {
            vector: Tensor::row_vector(values),
            layout: crate::pooling::PoolLayout::new(&[crate::pooling::StatKind::Mean], values.len()),
        }
    }

    #[test]
    fn zero_pooled_gives_zero_embedding() {
        let (emb, logits) = segment_forward(&pooled(&[0.0; 4]), &tiny_net()).unwrap();
        assert_eq!(emb, Tensor::zeros(1, 4));
        assert_eq!(logits.shape(), (1, 3));
    }

    #[test]
    fn identity_affine_copies_input() {
        let mut net = tiny_net();
        net.affine1_weight = Tensor::identity(4);
        let (emb, _) = segment_forward(&pooled(&[1.0, 0.0, 0.0, 0.0]), &net).unwrap();
        assert_eq!(emb.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooled_size_mismatch_is_config_error() {
        assert!(matches!(
            segment_forward(&pooled(&[0.0; 3]), &tiny_net()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn am_softmax_examples() {
        let single = AmSoftmaxConfig::new(0.0, 1.0, 1).unwrap();
        assert_eq!(am_softmax_loss(&Tensor::row_vector(&[0.3]), 0, &single).unwrap(), 0.0);
        for s in [1.0, 64.0] {
            let cfg = AmSoftmaxConfig::new(0.0, s, 2).unwrap();
            let l = am_softmax_loss(&Tensor::row_vector(&[0.4, 0.4]), 1, &cfg).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-13, "{l}");
        }
        let cfg = AmSoftmaxConfig::new(0.35, 64.0, 2).unwrap();
        let l = am_softmax_loss(&Tensor::row_vector(&[1.0, 0.0]), 0, &cfg).unwrap();
        // ln(1 + e^{-41.6})
        assert!((l - (-41.6f64).exp()).abs() < 1e-30);
        assert!(matches!(
            am_softmax_loss(&Tensor::row_vector(&[1.0, 0.0]), 2, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn dims_validation() {
        let mut dims = ModelDims::default();
        assert!(dims.validate().is_ok());
        assert_eq!(dims.context_span(), 6);
        dims.contexts = vec![vec![-1, 0, 2]];
        assert!(dims.validate().is_err());
        let mut dims = ModelDims::default();
        dims.am_scale = 0.0;
        assert!(dims.validate().is_err());
    }

    #[test]
    fn embedding_length_is_independent_of_pooling() {
        let dims = ModelDims {
            input_dim: 3,
            deep_dim: 4,
            attention_hidden: 2,
            embed_dim: 5,
            contexts: vec![vec![-1, 0, 1]],
            ..ModelDims::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = FeatureSequence::new(init::standard_normal::<f64, _>(7, 3, &mut rng)).unwrap();
        for (mean, std, cov) in [(true, false, false), (true, true, false), (true, true, true)] {
            for att in [false, true] {
                let cfg = PoolingConfig::new(mean, std, cov, att);
                let model = EmbeddingModel::<f64>::init(&dims, &cfg, 2, 1).unwrap();
                assert_eq!(model.segment.pool_dim(), cfg.output_dim(4));
                assert_eq!(model.extract_embedding(&x).unwrap().shape(), (1, 5));
            }
        }
    }

    #[test]
    fn zero_model_embeds_zero_segment_to_zero() {
        let dims = ModelDims {
            input_dim: 3,
            deep_dim: 4,
            attention_hidden: 2,
            embed_dim: 5,
            contexts: vec![vec![0]],
            ..ModelDims::default()
        };
        let model = EmbeddingModel::<f64>::init(&dims, &PoolingConfig::statistics(false), 2, 4).unwrap();
        let x = FeatureSequence::new(Tensor::zeros(6, 3)).unwrap();
        assert_eq!(model.extract_embedding(&x).unwrap(), Tensor::zeros(1, 5));
    }
}
