//! The personalized architecture: a shared encoder, sub-population heads, a
//! global preference head and a style ("k-way") head, all conditioned on a
//! per-user embedding.
//!
//! The embedding enters twice. It is placed on the diagonal of a second input
//! channel next to the image, and it is concatenated to the encoder output
//! before every head. Gradients with respect to the embedding therefore flow
//! through both paths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::nn::{
    add_into, count, cross_entropy, flat, flat_mut, InputGrad, LayerSpec, Network, ParamTensors,
    Tape, Tensor,
};
use crate::seed::{stream_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderPreset {
    /// Three strided convolutions with layer norm, 64 output features.
    MnistConv,
    /// flatten -> dense(feature_dim) -> layernorm -> relu.
    SmallMlp,
    /// Two small strided convolutions followed by a dense projection.
    SyntheticConv,
}

impl EncoderPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mnist-conv" => Ok(EncoderPreset::MnistConv),
            "small-mlp" => Ok(EncoderPreset::SmallMlp),
            "synthetic-conv" => Ok(EncoderPreset::SyntheticConv),
            other => Err(FedError::Config(format!(
                "unknown encoder preset '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderPreset::MnistConv => "mnist-conv",
            EncoderPreset::SmallMlp => "small-mlp",
            EncoderPreset::SyntheticConv => "synthetic-conv",
        }
    }

    /// Builds the (uninitialized) encoder network for 2-channel square inputs.
    pub fn build(self, opts: &EncoderOptions) -> Result<Network> {
        let s = opts.image_side;
        let f = opts.feature_dim;
        let relu = opts.relu_after_norm;
        let mut layers = Vec::new();
        let push_norm = |layers: &mut Vec<LayerSpec>, shape: &[usize]| {
            layers.push(LayerSpec::layer_norm(shape));
            if relu {
                layers.push(LayerSpec::Relu);
            }
        };
        match self {
            EncoderPreset::MnistConv => {
                if s != 28 || f != 64 {
                    return Err(FedError::Config(format!(
                        "mnist-conv needs 28x28 images and 64 features, got side {s}, features {f}"
                    )));
                }
                layers.push(LayerSpec::conv2d(2, 16, 3, 2, 1));
                push_norm(&mut layers, &[16, 14, 14]);
                layers.push(LayerSpec::conv2d(16, 32, 3, 2, 1));
                push_norm(&mut layers, &[32, 7, 7]);
                layers.push(LayerSpec::conv2d(32, 64, 7, 1, 0));
                push_norm(&mut layers, &[64, 1, 1]);
            }
            EncoderPreset::SmallMlp => {
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::dense(2 * s * s, f));
                push_norm(&mut layers, &[f]);
            }
            EncoderPreset::SyntheticConv => {
                let h1 = (s + 2 - 3) / 2 + 1;
                let h2 = (h1 + 2 - 3) / 2 + 1;
                layers.push(LayerSpec::conv2d(2, 8, 3, 2, 1));
                push_norm(&mut layers, &[8, h1, h1]);
                layers.push(LayerSpec::conv2d(8, 16, 3, 2, 1));
                push_norm(&mut layers, &[16, h2, h2]);
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::dense(16 * h2 * h2, f));
                push_norm(&mut layers, &[f]);
            }
        }
        Network::new(&[2, s, s], layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderOptions {
    pub image_side: usize,
    pub feature_dim: usize,
    pub relu_after_norm: bool,
}

impl EncoderOptions {
    pub fn new(image_side: usize, feature_dim: usize) -> Self {
        EncoderOptions {
            image_side,
            feature_dim,
            relu_after_norm: true,
        }
    }
}

/// Everything needed to build a [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub preset: EncoderPreset,
    pub encoder: EncoderOptions,
    pub embed_dim: usize,
    /// Number of sub-population heads.
    pub num_heads: usize,
    /// Number of styles predicted by the k-way head.
    pub num_styles: usize,
    pub seed: u64,
}

/// Global parameter bundle held by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Network,
    pub subpop_heads: Vec<Network>,
    pub global_head: Network,
    pub kway_head: Network,
    feature_dim: usize,
    embed_dim: usize,
}

/// A per-user embedding. Lives only on the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalEmbedding {
    pub owner: usize,
    pub vector: Vec<f64>,
}

impl PersonalEmbedding {
    /// Uniform(0, 1) per coordinate.
    pub fn init<R: Rng + ?Sized>(owner: usize, dim: usize, rng: &mut R) -> Self {
        PersonalEmbedding {
            owner,
            vector: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    pub fn zeros(owner: usize, dim: usize) -> Self {
        PersonalEmbedding {
            owner,
            vector: vec![0.0; dim],
        }
    }
}

/// Linear head consuming `concat(feature, embedding)`.
pub fn head_network(input_dim: usize, outputs: usize) -> Result<Network> {
    Network::new(&[input_dim], vec![LayerSpec::dense(input_dim, outputs)])
}

/// Builds and deterministically initializes the full model.
pub fn build_model(arch: &ArchConfig) -> Result<ModelParams> {
    if arch.num_heads < 1 || arch.num_styles < 2 {
        return Err(FedError::Config(format!(
            "need at least one head and two styles (got {} heads, {} styles)",
            arch.num_heads, arch.num_styles
        )));
    }
    if arch.embed_dim != arch.encoder.image_side {
        return Err(FedError::Config(format!(
            "embedding size {} must equal the image side {} for diagonal conditioning",
            arch.embed_dim, arch.encoder.image_side
        )));
    }
    let mut encoder = arch.preset.build(&arch.encoder)?;
    let feature_dim = encoder.output_len();
    if feature_dim != arch.encoder.feature_dim {
        return Err(FedError::Config(format!(
            "encoder emits {feature_dim} features, configured {}",
            arch.encoder.feature_dim
        )));
    }
    let head_in = feature_dim + arch.embed_dim;
    encoder.init(&mut stream_rng(arch.seed, streams::MODEL_INIT, &[0]));
    let mut subpop_heads = Vec::with_capacity(arch.num_heads);
    for k in 0..arch.num_heads {
        let mut h = head_network(head_in, 2)?;
        h.init(&mut stream_rng(
            arch.seed,
            streams::MODEL_INIT,
            &[1, k as u64],
        ));
        subpop_heads.push(h);
    }
    let mut global_head = head_network(head_in, 2)?;
    global_head.init(&mut stream_rng(arch.seed, streams::MODEL_INIT, &[2]));
    let mut kway_head = head_network(head_in, arch.num_styles)?;
    kway_head.init(&mut stream_rng(arch.seed, streams::MODEL_INIT, &[3]));
    Ok(ModelParams {
        encoder,
        subpop_heads,
        global_head,
        kway_head,
        feature_dim,
        embed_dim: arch.embed_dim,
    })
}

/// Two-channel input: the image, and `diag(embedding)`.
pub fn embed_input(image: &Tensor, embedding: &[f64]) -> Result<Tensor> {
    let shape = image.shape();
    let side = match shape {
        [h, w] if h == w => *h,
        [1, h, w] if h == w => *h,
        _ => {
            return Err(FedError::Config(format!(
                "diagonal conditioning needs a square single-channel image, got {shape:?}"
            )))
        }
    };
    if embedding.len() != side {
        return Err(FedError::Config(format!(
            "embedding size {} differs from image side {side}",
            embedding.len()
        )));
    }
    let mut data = Vec::with_capacity(2 * side * side);
    data.extend_from_slice(image.data());
    data.resize(2 * side * side, 0.0);
    for (i, e) in embedding.iter().enumerate() {
        data[side * side + i * side + i] = *e;
    }
    Tensor::new(vec![2, side, side], data)
}

/// Flat input positions that hold the embedding (channel 1 diagonal).
pub fn diagonal_positions(side: usize) -> Vec<usize> {
    (0..side).map(|i| side * side + i * side + i).collect()
}

/// Which head produces the binary preference prediction.
#[derive(Debug, Clone, Copy)]
pub enum Classifier<'a> {
    /// Sub-population head `k` of the shared model.
    Subpop(usize),
    /// The global preference head.
    Global,
    /// A head held on the client.
    Local(&'a Network),
}

#[derive(Debug, Clone)]
pub struct ForwardBundle {
    pub feature: Tensor,
    pub head_input: Tensor,
    /// Logits of the selected classifier head.
    pub subpop_logits: Vec<f64>,
    pub global_logits: Vec<f64>,
    pub kway_logits: Vec<f64>,
    encoder_tape: Tape,
    classifier_tape: Tape,
    global_tape: Tape,
    kway_tape: Tape,
    classifier_is_global: bool,
}

impl ModelParams {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn head_input_dim(&self) -> usize {
        self.feature_dim + self.embed_dim
    }

    pub fn num_heads(&self) -> usize {
        self.subpop_heads.len()
    }

    pub fn num_styles(&self) -> usize {
        self.kway_head.output_len()
    }

    pub fn image_side(&self) -> usize {
        self.encoder.input_shape()[1]
    }

    /// Total parameter count across every block.
    pub fn num_params(&self) -> usize {
        self.encoder.num_params()
            + self
                .subpop_heads
                .iter()
                .map(Network::num_params)
                .sum::<usize>()
            + self.global_head.num_params()
            + self.kway_head.num_params()
    }

    /// All blocks in canonical order: encoder, heads 0.., global, k-way.
    pub fn blocks(&self) -> Vec<&Network> {
        let mut v = vec![&self.encoder];
        v.extend(self.subpop_heads.iter());
        v.push(&self.global_head);
        v.push(&self.kway_head);
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Network> {
        let mut v = vec![&mut self.encoder];
        v.extend(self.subpop_heads.iter_mut());
        v.push(&mut self.global_head);
        v.push(&mut self.kway_head);
        v
    }

    pub fn flat_params(&self) -> impl Iterator<Item = &f64> + '_ {
        self.blocks().into_iter().flat_map(|n| n.flat_params())
    }

    pub fn flat_params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.blocks_mut()
            .into_iter()
            .flat_map(|n| n.flat_params_mut())
    }

    /// (offset, len) of each sub-population head in the flat layout.
    pub fn head_segments(&self) -> Vec<(usize, usize)> {
        let mut off = self.encoder.num_params();
        self.subpop_heads
            .iter()
            .map(|h| {
                let seg = (off, h.num_params());
                off += h.num_params();
                seg
            })
            .collect()
    }

    /// Re-initializes head `k` from a stream keyed by `ids`.
    pub fn reset_head(&mut self, seed: u64, k: usize, ids: &[u64]) {
        let mut rng = stream_rng(seed, streams::FRESH_HEAD, ids);
        self.subpop_heads[k].init(&mut rng);
    }

    fn classifier_net<'a>(&'a self, sel: Classifier<'a>) -> Result<&'a Network> {
        match sel {
            Classifier::Subpop(k) => self.subpop_heads.get(k).ok_or_else(|| {
                FedError::Usage(format!(
                    "head index {k} out of range for {} heads",
                    self.subpop_heads.len()
                ))
            }),
            Classifier::Global => Ok(&self.global_head),
            Classifier::Local(net) => {
                if net.input_shape() != [self.head_input_dim()] || net.output_len() != 2 {
                    return Err(FedError::Usage("local head has the wrong shape".into()));
                }
                Ok(net)
            }
        }
    }

    fn encode(&self, embedding: &[f64], image: &Tensor) -> Result<(Tensor, Tape, Tensor)> {
        let x = embed_input(image, embedding)?;
        let (feature, tape) = self.encoder.forward(&x)?;
        let feature = feature.reshape(&[self.feature_dim])?;
        let mut hi = feature.data().to_vec();
        hi.extend_from_slice(embedding);
        Ok((feature, tape, Tensor::vector(hi)))
    }

    /// Full forward pass through the encoder and all three heads.
    pub fn forward(
        &self,
        embedding: &[f64],
        image: &Tensor,
        sel: Classifier<'_>,
    ) -> Result<ForwardBundle> {
        let classifier = self.classifier_net(sel)?;
        let (feature, encoder_tape, head_input) = self.encode(embedding, image)?;
        let (glob, global_tape) = self.global_head.forward(&head_input)?;
        let (kway, kway_tape) = self.kway_head.forward(&head_input)?;
        let classifier_is_global = matches!(sel, Classifier::Global);
        let (cls, classifier_tape) = if classifier_is_global {
            (glob.clone(), global_tape.clone())
        } else {
            classifier.forward(&head_input)?
        };
        Ok(ForwardBundle {
            feature,
            head_input,
            subpop_logits: cls.into_data(),
            global_logits: glob.into_data(),
            kway_logits: kway.into_data(),
            encoder_tape,
            classifier_tape,
            global_tape,
            kway_tape,
            classifier_is_global,
        })
    }

    /// Classifier logits only (evaluation path).
    pub fn classify(
        &self,
        embedding: &[f64],
        image: &Tensor,
        sel: Classifier<'_>,
    ) -> Result<Vec<f64>> {
        let classifier = self.classifier_net(sel)?;
        let (_, _, head_input) = self.encode(embedding, image)?;
        Ok(classifier.forward(&head_input)?.0.into_data())
    }
}

/// Where embedding gradients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingGradSource {
    /// Only the global preference head.
    Global,
    /// Global head plus the selected classifier head.
    GlobalAndClassifier,
}

/// Which objectives a backward pass applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    /// Weight of the style objective through the k-way head (0 disables it).
    pub kway_weight: f64,
    /// Train the global head on the preference label. Its gradient never
    /// reaches the encoder unless it is also the classifier.
    pub train_global_head: bool,
    /// Embedding gradient source, or `None` when embeddings are frozen.
    pub embedding: Option<EmbeddingGradSource>,
}

/// Labels of one training sample.
#[derive(Debug, Clone, Copy)]
pub struct Targets {
    pub preference: usize,
    pub style: usize,
}

/// Gradient accumulators for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: ParamTensors,
    /// Gradient of the selected classifier head. Unused when the classifier
    /// is the global head (its gradient goes to `global`).
    pub classifier: ParamTensors,
    pub global: ParamTensors,
    pub kway: ParamTensors,
}

impl ModelGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        ModelGrads {
            encoder: params.encoder.zero_grads(),
            classifier: params.global_head.zero_grads(),
            global: params.global_head.zero_grads(),
            kway: params.kway_head.zero_grads(),
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        add_into(&mut self.encoder, &other.encoder);
        add_into(&mut self.classifier, &other.classifier);
        add_into(&mut self.global, &other.global);
        add_into(&mut self.kway, &other.kway);
    }
}

/// Per-sample results of a backward pass that are not accumulated.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// Gradient with respect to the embedding (empty when frozen).
    pub embedding_grad: Vec<f64>,
    pub classify_loss: f64,
    pub global_loss: f64,
    pub kway_loss: f64,
}

/// Backward pass for one sample, accumulating into `grads`.
///
/// Encoder gradients come from the classifier objective plus the weighted
/// style objective. The global head's own objective updates the global head
/// and (per `spec.embedding`) the embedding, but not the encoder.
pub fn model_backward(
    params: &ModelParams,
    sel: Classifier<'_>,
    bundle: &ForwardBundle,
    targets: Targets,
    spec: &LossSpec,
    grads: &mut ModelGrads,
) -> Result<SampleOutcome> {
    let classifier = params.classifier_net(sel)?;
    let is_global = bundle.classifier_is_global;
    if is_global != matches!(sel, Classifier::Global) {
        return Err(FedError::Usage(
            "bundle was built for a different classifier".into(),
        ));
    }
    let f = params.feature_dim;
    let split = |g: Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        let e = g[f..].to_vec();
        let mut feat = g;
        feat.truncate(f);
        (feat, e)
    };

    let (classify_loss, g_cls) = cross_entropy(&bundle.subpop_logits, targets.preference)?;
    let cls_grads = if is_global {
        &mut grads.global
    } else {
        &mut grads.classifier
    };
    let cls_in = classifier
        .backward_into(
            &bundle.classifier_tape,
            &g_cls,
            Some(cls_grads),
            InputGrad::Full,
        )?
        .expect("input gradient requested");
    let (cls_feat, cls_emb) = split(cls_in);
    let mut feat_for_encoder = cls_feat.clone();

    let mut kway_loss = 0.0;
    if spec.kway_weight > 0.0 {
        let (l, mut g) = cross_entropy(&bundle.kway_logits, targets.style)?;
        kway_loss = l;
        g.iter_mut().for_each(|v| *v *= spec.kway_weight);
        let kin = params
            .kway_head
            .backward_into(
                &bundle.kway_tape,
                &g,
                Some(&mut grads.kway),
                InputGrad::Full,
            )?
            .expect("input gradient requested");
        for (a, b) in feat_for_encoder.iter_mut().zip(&kin[..f]) {
            *a += b;
        }
    }

    // Global head objective (separate from the classifier unless they coincide).
    let mut global_loss = if is_global { classify_loss } else { 0.0 };
    let mut glob_split: Option<(Vec<f64>, Vec<f64>)> = None;
    let need_global_input = spec.embedding.is_some();
    if !is_global && (spec.train_global_head || need_global_input) {
        let (l, g) = cross_entropy(&bundle.global_logits, targets.preference)?;
        global_loss = l;
        let want = if need_global_input {
            InputGrad::Full
        } else {
            InputGrad::None
        };
        let target = if spec.train_global_head {
            Some(&mut grads.global)
        } else {
            None
        };
        if let Some(gin) =
            params
                .global_head
                .backward_into(&bundle.global_tape, &g, target, want)?
        {
            glob_split = Some(split(gin));
        }
    }

    params.encoder.backward_into(
        &bundle.encoder_tape,
        &feat_for_encoder,
        Some(&mut grads.encoder),
        InputGrad::None,
    )?;

    let mut embedding_grad = Vec::new();
    if let Some(source) = spec.embedding {
        // Sum the head-level gradients of each source, then push the feature
        // part through the encoder once (the map is linear in the gradient).
        let (mut feat, mut emb) = if is_global {
            (cls_feat.clone(), cls_emb.clone())
        } else {
            glob_split.expect("global head input gradient computed")
        };
        if !is_global && source == EmbeddingGradSource::GlobalAndClassifier {
            for (a, b) in feat.iter_mut().zip(&cls_feat) {
                *a += b;
            }
            for (a, b) in emb.iter_mut().zip(&cls_emb) {
                *a += b;
            }
        }
        let diag = diagonal_positions(params.image_side());
        let through_input = params
            .encoder
            .backward_into(&bundle.encoder_tape, &feat, None, InputGrad::Indices(&diag))?
            .expect("input gradient requested");
        for (a, b) in emb.iter_mut().zip(&through_input) {
            *a += b;
        }
        embedding_grad = emb;
    }

    Ok(SampleOutcome {
        embedding_grad,
        classify_loss,
        global_loss,
        kway_loss,
    })
}

/// Flat parameter count of a gradient bundle.
pub fn grads_len(g: &ParamTensors) -> usize {
    count(g)
}

/// Copies `src` parameters into `dst` (same architecture).
pub fn copy_params(dst: &mut Network, src: &Network) {
    for (a, b) in dst.flat_params_mut().zip(src.flat_params()) {
        *a = *b;
    }
}

/// Iterates a gradient bundle's values.
pub fn grad_values(g: &ParamTensors) -> impl Iterator<Item = &f64> + '_ {
    flat(g)
}

pub fn grad_values_mut(g: &mut ParamTensors) -> impl Iterator<Item = &mut f64> + '_ {
    flat_mut(g)
}

#[cfg(test)]
mod tests;
