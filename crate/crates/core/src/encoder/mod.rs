//! Frame encoder: a residual CNN whose final feature map is flattened into
//! an MLP head. Embeddings are left unnormalized.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::GrayImage;
use crate::tensor::{BatchNormMode, Graph, NodeId, Scalar, Tensor, TensorError};

pub const DUSTBIN: &str = "dustbin.alpha";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("image {index} is {found:?} (h, w), encoder expects {expected:?}")]
    ImageSize {
        index: usize,
        expected: [usize; 2],
        found: [usize; 2],
    },
    #[error("train mode needs at least 2 frames, got {0}")]
    BatchTooSmall(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlpOrder {
    LinearBnRelu,
    LinearReluBn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `[height, width]`.
    pub input_size: [usize; 2],
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub conv_stages: Vec<ConvStage>,
    pub embedding_dim: usize,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub mlp_order: MlpOrder,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let stage = |channels, stride| ConvStage {
            channels,
            blocks: 1,
            stride,
        };
        Self {
            input_size: [128, 128],
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 2,
            conv_stages: vec![stage(16, 1), stage(32, 2), stage(64, 2), stage(128, 2)],
            embedding_dim: 512,
            mlp_layers: 4,
            mlp_width: 512,
            mlp_order: MlpOrder::LinearBnRelu,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// ResNet18 stage layout (two blocks per stage, 64 to 512 channels).
    pub fn resnet18_layout(input_size: [usize; 2]) -> Self {
        let stage = |channels, stride| ConvStage {
            channels,
            blocks: 2,
            stride,
        };
        Self {
            input_size,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            conv_stages: vec![stage(64, 1), stage(128, 2), stage(256, 2), stage(512, 2)],
            ..Self::default()
        }
    }

    fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        (size + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
    }

    /// `(channels, height, width)` of the final feature map.
    pub fn feature_shape(&self) -> Result<[usize; 3], EncoderError> {
        let k = self.stem_kernel;
        let mut h = Self::conv_out(self.input_size[0], k, self.stem_stride, k / 2);
        let mut w = Self::conv_out(self.input_size[1], k, self.stem_stride, k / 2);
        let mut c = self.stem_channels;
        for st in &self.conv_stages {
            h = h.and_then(|h| Self::conv_out(h, 3, st.stride, 1));
            w = w.and_then(|w| Self::conv_out(w, 3, st.stride, 1));
            c = st.channels;
        }
        match (h, w) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok([c, h, w]),
            _ => Err(EncoderError::Config("input too small for the conv stack".into())),
        }
    }

    pub fn flat_features(&self) -> Result<usize, EncoderError> {
        Ok(self.feature_shape()?.iter().product())
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.input_size.contains(&0) {
            return bad("input_size must be positive");
        }
        if self.stem_channels == 0 || self.stem_stride == 0 || self.stem_kernel % 2 == 0 {
            return bad("stem needs positive channels/stride and an odd kernel");
        }
        if self
            .conv_stages
            .iter()
            .any(|s| s.channels == 0 || s.blocks == 0 || s.stride == 0)
        {
            return bad("conv stages need positive channels, blocks and stride");
        }
        if self.mlp_layers == 0 || self.mlp_width == 0 || self.embedding_dim == 0 {
            return bad("mlp_layers, mlp_width and embedding_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must lie in [0, 1] and bn_eps be positive");
        }
        self.feature_shape().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Conv or linear weight with its fan-in.
    Weight { fan_in: usize },
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
    Dustbin,
}

impl TensorRole {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

fn push_conv(out: &mut Vec<TensorSpec>, name: String, o: usize, c: usize, k: usize) {
    out.push(TensorSpec {
        name,
        shape: vec![o, c, k, k],
        role: TensorRole::Weight { fan_in: c * k * k },
    });
}

fn push_bn(out: &mut Vec<TensorSpec>, prefix: &str, c: usize) {
    for (suffix, role) in [
        ("gamma", TensorRole::BnScale),
        ("beta", TensorRole::BnShift),
        ("running_mean", TensorRole::RunningMean),
        ("running_var", TensorRole::RunningVar),
    ] {
        out.push(TensorSpec {
            name: format!("{prefix}.{suffix}"),
            shape: vec![c],
            role,
        });
    }
}

fn block_needs_projection(c_in: usize, c_out: usize, stride: usize) -> bool {
    c_in != c_out || stride != 1
}

/// Every tensor the config implies, in a fixed order.
pub fn parameter_layout(config: &EncoderConfig) -> Result<Vec<TensorSpec>, EncoderError> {
    config.validate()?;
    let mut out = Vec::new();
    push_conv(&mut out, "stem.conv.weight".into(), config.stem_channels, 1, config.stem_kernel);
    push_bn(&mut out, "stem.bn", config.stem_channels);
    let mut c_in = config.stem_channels;
    for (s, st) in config.conv_stages.iter().enumerate() {
        for b in 0..st.blocks {
            let p = format!("stage{s}.block{b}");
            let stride = if b == 0 { st.stride } else { 1 };
            push_conv(&mut out, format!("{p}.conv1.weight"), st.channels, c_in, 3);
            push_bn(&mut out, &format!("{p}.bn1"), st.channels);
            push_conv(&mut out, format!("{p}.conv2.weight"), st.channels, st.channels, 3);
            push_bn(&mut out, &format!("{p}.bn2"), st.channels);
            if block_needs_projection(c_in, st.channels, stride) {
                push_conv(&mut out, format!("{p}.down.weight"), st.channels, c_in, 1);
                push_bn(&mut out, &format!("{p}.down_bn"), st.channels);
            }
            c_in = st.channels;
        }
    }
    let mut width = config.flat_features()?;
    for l in 0..config.mlp_layers {
        let last = l + 1 == config.mlp_layers;
        let o = if last { config.embedding_dim } else { config.mlp_width };
        out.push(TensorSpec {
            name: format!("mlp.{l}.weight"),
            shape: vec![o, width],
            role: TensorRole::Weight { fan_in: width },
        });
        out.push(TensorSpec {
            name: format!("mlp.{l}.bias"),
            shape: vec![o],
            role: TensorRole::Bias,
        });
        if !last {
            push_bn(&mut out, &format!("mlp.{l}.bn"), o);
        }
        width = o;
    }
    out.push(TensorSpec {
        name: DUSTBIN.into(),
        shape: vec![1],
        role: TensorRole::Dustbin,
    });
    Ok(out)
}

/// Encoder weights (including the dustbin value) and batch-norm running
/// statistics, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub config: EncoderConfig,
    pub init_seed: u64,
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

/// He-normal conv/linear weights, zero biases, unit batch-norm scale, zero
/// shift, unit running variance and a zero dustbin.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<f32>, EncoderError> {
    let layout = parameter_layout(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for spec in layout {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.role {
            TensorRole::Weight { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            }
            TensorRole::BnScale | TensorRole::RunningVar => vec![1.0; n],
            TensorRole::Bias | TensorRole::BnShift | TensorRole::RunningMean | TensorRole::Dustbin => vec![0.0; n],
        };
        let t = Tensor::new(spec.shape, data)?;
        if spec.role.trainable() {
            params.insert(spec.name, t);
        } else {
            buffers.insert(spec.name, t);
        }
    }
    Ok(EncoderParams {
        config: config.clone(),
        init_seed: seed,
        params,
        buffers,
    })
}

impl<T: Scalar> EncoderParams<T> {
    pub fn alpha(&self) -> f64 {
        self.params[DUSTBIN].data()[0].as_f64()
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.params.get_mut(DUSTBIN).expect("dustbin present").data_mut()[0] = T::from_f64_lossy(alpha);
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            init_seed: self.init_seed,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks names and shapes against the layout implied by the config.
    pub fn audit(&self) -> Result<(), String> {
        let layout = parameter_layout(&self.config).map_err(|e| e.to_string())?;
        let mut expected = 0;
        for spec in &layout {
            let map = if spec.role.trainable() { &self.params } else { &self.buffers };
            match map.get(&spec.name) {
                None => return Err(format!("missing tensor {}", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(format!(
                        "{}: shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    ))
                }
                Some(_) => expected += 1,
            }
        }
        if expected != self.params.len() + self.buffers.len() {
            let known: std::collections::HashSet<_> = layout.iter().map(|s| s.name.as_str()).collect();
            let extra = self
                .params
                .keys()
                .chain(self.buffers.keys())
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(format!("unexpected tensor {extra}"));
        }
        Ok(())
    }

    /// Adds every trainable tensor to the graph as a named input.
    pub fn register(&self, g: &mut Graph<T>, requires_grad: bool) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.input(k, v.clone().with_requires_grad(requires_grad))))
            .collect()
    }
}

/// Stacks equally sized images into an `N x 1 x H x W` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&GrayImage], input_size: [usize; 2]) -> Result<Tensor<T>, EncoderError> {
    if images.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let [h, w] = input_size;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for (index, im) in images.iter().enumerate() {
        if [im.height(), im.width()] != input_size {
            return Err(EncoderError::ImageSize {
                index,
                expected: input_size,
                found: [im.height(), im.width()],
            });
        }
        data.extend(im.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}

/// A forward pass recorded on a graph.
pub struct Forward {
    pub embeddings: NodeId,
    /// Batch-norm output nodes by prefix, for running-statistic updates.
    pub bn_nodes: Vec<(String, NodeId)>,
}

struct Ctx<'a, T: Scalar> {
    params: &'a EncoderParams<T>,
    nodes: &'a BTreeMap<String, NodeId>,
    mode: BatchNormMode,
    bn_nodes: Vec<(String, NodeId)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn node(&self, name: &str) -> Result<NodeId, TensorError> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownInput(name.to_string()))
    }

    fn bn(&mut self, g: &mut Graph<T>, x: NodeId, prefix: &str) -> Result<NodeId, TensorError> {
        let gamma = self.node(&format!("{prefix}.gamma"))?;
        let beta = self.node(&format!("{prefix}.beta"))?;
        let eps = self.params.config.bn_eps;
        let out = match self.mode {
            BatchNormMode::Train => g.batch_norm(x, gamma, beta, self.mode, None, eps)?,
            BatchNormMode::Infer => {
                let get = |s: &str| {
                    let k = format!("{prefix}.{s}");
                    self.params
                        .buffers
                        .get(&k)
                        .map(|t| t.data())
                        .ok_or(TensorError::UnknownInput(k))
                };
                let (m, v) = (get("running_mean")?, get("running_var")?);
                g.batch_norm(x, gamma, beta, self.mode, Some((m, v)), eps)?
            }
        };
        self.bn_nodes.push((prefix.to_string(), out));
        Ok(out)
    }

    fn conv_bn(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        weight: &str,
        bn: &str,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        let w = self.node(weight)?;
        let k = g.shape(w)[2];
        let y = g.conv2d(x, w, None, stride, k / 2)?;
        self.bn(g, y, bn)
    }
}

/// Records the encoder on `g` for an `N x 1 x H x W` input node, using the
/// parameter nodes from [`EncoderParams::register`].
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &EncoderParams<T>,
    nodes: &BTreeMap<String, NodeId>,
    input: NodeId,
    mode: BatchNormMode,
) -> Result<Forward, EncoderError> {
    let n = g.shape(input)[0];
    if mode == BatchNormMode::Train && n < 2 {
        return Err(EncoderError::BatchTooSmall(n));
    }
    let cfg = &params.config;
    let mut ctx = Ctx {
        params,
        nodes,
        mode,
        bn_nodes: Vec::new(),
    };
    let x = ctx.conv_bn(g, input, "stem.conv.weight", "stem.bn", cfg.stem_stride)?;
    let mut x = g.relu(x)?;
    let mut c_in = cfg.stem_channels;
    for (s, st) in cfg.conv_stages.iter().enumerate() {
        for b in 0..st.blocks {
            let p = format!("stage{s}.block{b}");
            let stride = if b == 0 { st.stride } else { 1 };
            let y = ctx.conv_bn(g, x, &format!("{p}.conv1.weight"), &format!("{p}.bn1"), stride)?;
            let y = g.relu(y)?;
            let y = ctx.conv_bn(g, y, &format!("{p}.conv2.weight"), &format!("{p}.bn2"), 1)?;
            let shortcut = if block_needs_projection(c_in, st.channels, stride) {
                ctx.conv_bn(g, x, &format!("{p}.down.weight"), &format!("{p}.down_bn"), stride)?
            } else {
                x
            };
            let sum = g.add(y, shortcut)?;
            x = g.relu(sum)?;
            c_in = st.channels;
        }
    }
    let flat = cfg.flat_features()?;
    let mut h = g.reshape(x, &[n, flat])?;
    for l in 0..cfg.mlp_layers {
        let w = ctx.node(&format!("mlp.{l}.weight"))?;
        let b = ctx.node(&format!("mlp.{l}.bias"))?;
        h = g.linear(h, w, Some(b))?;
        if l + 1 < cfg.mlp_layers {
            let prefix = format!("mlp.{l}.bn");
            h = match cfg.mlp_order {
                MlpOrder::LinearBnRelu => {
                    let y = ctx.bn(g, h, &prefix)?;
                    g.relu(y)?
                }
                MlpOrder::LinearReluBn => {
                    let y = g.relu(h)?;
                    ctx.bn(g, y, &prefix)?
                }
            };
        }
    }
    Ok(Forward {
        embeddings: h,
        bn_nodes: ctx.bn_nodes,
    })
}

/// Folds the batch statistics of a train-mode pass into the running
/// estimates: `running = (1 - momentum) * running + momentum * batch`, with
/// the unbiased batch variance.
pub fn update_running_stats<T: Scalar>(params: &mut EncoderParams<T>, g: &Graph<T>, fwd: &Forward) {
    let m = params.config.bn_momentum;
    for (prefix, node) in &fwd.bn_nodes {
        let Some((mean, var)) = g.batch_statistics(*node) else {
            continue;
        };
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let key = format!("{prefix}.{suffix}");
            if let Some(t) = params.buffers.get_mut(&key) {
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b.as_f64());
                }
            }
        }
    }
}

/// Frames per graph when embedding many images in infer mode.
const INFER_CHUNK: usize = 64;

/// Infer-mode embeddings, one row per image. Each row depends only on its
/// own image.
pub fn embed(params: &EncoderParams<f32>, images: &[&GrayImage]) -> Result<Vec<Vec<f32>>, EncoderError> {
    if images.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let d = params.config.embedding_dim;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g, false);
        let x = g.constant(images_to_tensor(chunk, params.config.input_size)?);
        let fwd = forward(&mut g, params, &nodes, x, BatchNormMode::Infer)?;
        out.extend(g.value(fwd.embeddings).data().chunks(d).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Embeds a batch. Train mode uses batch statistics and updates the running
/// estimates; infer mode is [`embed`].
pub fn encode(
    params: &mut EncoderParams<f32>,
    images: &[&GrayImage],
    mode: BatchNormMode,
) -> Result<Vec<Vec<f32>>, EncoderError> {
    match mode {
        BatchNormMode::Infer => embed(params, images),
        BatchNormMode::Train => {
            let mut g = Graph::<f32>::new();
            let nodes = params.register(&mut g, false);
            let x = g.constant(images_to_tensor(images, params.config.input_size)?);
            let fwd = forward(&mut g, params, &nodes, x, BatchNormMode::Train)?;
            update_running_stats(params, &g, &fwd);
            let d = params.config.embedding_dim;
            Ok(g.value(fwd.embeddings).data().chunks(d).map(<[f32]>::to_vec).collect())
        }
    }
}
