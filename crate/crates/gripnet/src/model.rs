//! The two-head convolutional network: a residual backbone shared by a
//! sigmoid-bounded point-estimate head and a prediction-interval head
//! that consumes the backbone features together with the point estimate.
//!
//! The backbone is a compact residual network: a strided stem
//! convolution with batchnorm, relu, and max pooling, followed by one
//! basic residual block per entry of `channel_schedule` (two 3x3
//! convolutions with batchnorm, an identity or 1x1-projection shortcut,
//! stride 2 between stages), then global average pooling. The point
//! head is a single fully connected layer; the interval head is a fully
//! connected stack over `concat(features, point)` whose scalar output
//! estimates the spread `sigma` of a truncated normal on [0, 1].
//!
//! Width and depth are configuration, not code: `ModelConfig::full()`
//! is the production scale (324x324 input, about five million
//! parameters), `ModelConfig::tiny()` a desk-scale preset for tests and
//! experiments. Initialization is deterministic per (seed, parameter
//! name): He fan-in normal draws for convolutions, uniform
//! `+-1/sqrt(fan_in)` for fully connected weights and biases, unit/zero
//! batchnorm affine.

use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::{Graph, GraphMark, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Running-statistics momentum for batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance stabiliser for batch normalisation.
pub const BN_EPS: f64 = 1e-5;

const FORMAT_MAGIC: &[u8; 4] = b"SIWN";
const FORMAT_VERSION: u16 = 1;

/// Stem convolution geometry. Padding is `kernel / 2`, so odd kernels
/// preserve the centring of the receptive field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    Full,
    Tiny,
}

/// Architecture hyperparameters.
///
/// Deserialization is patch-style: a JSON document picks a
/// `scale_preset` (default `full`) and overrides any subset of the
/// remaining fields; unknown keys are rejected. This keeps config files
/// short while staying fail-fast against typos.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stem: StemConfig,
    /// Output width of each residual block; entries after the first
    /// downsample by stride 2.
    pub channel_schedule: Vec<usize>,
    /// Hidden widths of the interval head's fully connected stack.
    pub pi_hidden: Vec<usize>,
    /// Dropout probability on the features entering the interval head.
    pub dropout_p: f64,
    /// Bound the point estimate to (0, 1) with a sigmoid.
    pub point_sigmoid: bool,
    /// Bound the spread estimate to (0, 1) with a sigmoid.
    pub pi_sigmoid: bool,
    pub scale_preset: ScalePreset,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigPatch {
    scale_preset: Option<ScalePreset>,
    input_size: Option<usize>,
    input_channels: Option<usize>,
    stem: Option<StemConfig>,
    channel_schedule: Option<Vec<usize>>,
    pi_hidden: Option<Vec<usize>>,
    dropout_p: Option<f64>,
    point_sigmoid: Option<bool>,
    pi_sigmoid: Option<bool>,
}

impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let p = ModelConfigPatch::deserialize(d)?;
        let mut cfg = match p.scale_preset.unwrap_or(ScalePreset::Full) {
            ScalePreset::Full => ModelConfig::full(),
            ScalePreset::Tiny => ModelConfig::tiny(),
        };
        if let Some(v) = p.input_size {
            cfg.input_size = v;
        }
        if let Some(v) = p.input_channels {
            cfg.input_channels = v;
        }
        if let Some(v) = p.stem {
            cfg.stem = v;
        }
        if let Some(v) = p.channel_schedule {
            cfg.channel_schedule = v;
        }
        if let Some(v) = p.pi_hidden {
            cfg.pi_hidden = v;
        }
        if let Some(v) = p.dropout_p {
            cfg.dropout_p = v;
        }
        if let Some(v) = p.point_sigmoid {
            cfg.point_sigmoid = v;
        }
        if let Some(v) = p.pi_sigmoid {
            cfg.pi_sigmoid = v;
        }
        Ok(cfg)
    }
}

impl ModelConfig {
    /// Production scale: 324x324 input, widths chosen to land near five
    /// million parameters.
    pub fn full() -> Self {
        ModelConfig {
            input_size: 324,
            input_channels: 3,
            stem: StemConfig { kernel: 7, stride: 2, out_channels: 64 },
            channel_schedule: vec![64, 128, 256, 512],
            pi_hidden: vec![128, 128],
            dropout_p: 0.5,
            point_sigmoid: true,
            pi_sigmoid: true,
            scale_preset: ScalePreset::Full,
        }
    }

    /// Desk scale: 64x64 input, 6650 parameters, same structure (both
    /// heads, residual blocks with and without projection shortcuts).
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 64,
            input_channels: 3,
            stem: StemConfig { kernel: 7, stride: 2, out_channels: 8 },
            channel_schedule: vec![8, 16],
            pi_hidden: vec![16, 16],
            dropout_p: 0.5,
            point_sigmoid: true,
            pi_sigmoid: true,
            scale_preset: ScalePreset::Tiny,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be at least 1"));
        }
        if self.stem.kernel == 0 || self.stem.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "stem kernel must be odd and positive, found {}",
                self.stem.kernel
            )));
        }
        if self.stem.stride == 0 || self.stem.out_channels == 0 {
            return Err(Error::config("stem stride and out_channels must be at least 1"));
        }
        if self.channel_schedule.is_empty() {
            return Err(Error::config("channel_schedule must list at least one block width"));
        }
        if self.channel_schedule.len() > 99 || self.pi_hidden.len() > 99 {
            return Err(Error::config("at most 99 blocks and 99 interval-head layers supported"));
        }
        if let Some(w) = self.channel_schedule.iter().chain(&self.pi_hidden).find(|&&w| w == 0) {
            return Err(Error::config(format!("all widths must be at least 1, found {w}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p must lie in [0, 1), found {}",
                self.dropout_p
            )));
        }
        // Walking the spatial extents catches inputs too small for the
        // downsampling chain.
        self.spatial_trace()?;
        Ok(())
    }

    /// Feature width entering the heads (the last block's output width).
    pub fn feature_dim(&self) -> usize {
        *self.channel_schedule.last().expect("validated schedule is nonempty")
    }

    /// Spatial extent after the stem conv, after the stem pool, and
    /// after each residual block.
    fn spatial_trace(&self) -> Result<Vec<usize>> {
        let mut trace = Vec::with_capacity(self.channel_schedule.len() + 2);
        let mut s = self.input_size;
        let steps: Vec<(usize, usize, usize)> = [
            (self.stem.kernel, self.stem.stride, self.stem.kernel / 2),
            (3, 2, 1),
        ]
        .into_iter()
        .chain(blocks_of(self).iter().map(|b| (3, b.stride, 1)))
        .collect();
        for (k, stride, pad) in steps {
            s = conv_extent(s, k, stride, pad).ok_or_else(|| {
                Error::config(format!(
                    "input_size {} is too small for the configured downsampling chain",
                    self.input_size
                ))
            })?;
            trace.push(s);
        }
        Ok(trace)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

fn conv_extent(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    match (padded - k) / stride + 1 {
        0 => None,
        s => Some(s),
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    c_in: usize,
    c_out: usize,
    stride: usize,
    projection: bool,
}

fn blocks_of(cfg: &ModelConfig) -> Vec<BlockSpec> {
    let mut specs = Vec::with_capacity(cfg.channel_schedule.len());
    let mut c_in = cfg.stem.out_channels;
    for (i, &c_out) in cfg.channel_schedule.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        specs.push(BlockSpec { c_in, c_out, stride, projection: stride != 1 || c_in != c_out });
        c_in = c_out;
    }
    specs
}

/// Role of a named array in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    Backbone,
    PointHead,
    IntervalHead,
    /// Never optimized: batchnorm running statistics and the stored
    /// input-normalisation constants.
    Buffer,
}

/// Scope of a parameter, decided by its name.
pub fn scope_of(name: &str) -> ParamScope {
    if name.starts_with("norm.")
        || name.ends_with(".running_mean")
        || name.ends_with(".running_var")
    {
        ParamScope::Buffer
    } else if name.starts_with("point.") {
        ParamScope::PointHead
    } else if name.starts_with("pi.") {
        ParamScope::IntervalHead
    } else {
        ParamScope::Backbone
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    HeConv { fan_in: usize },
    FcUniform { fan_in: usize },
    Ones,
    Zeros,
}

/// The complete, ordered list of named arrays for a configuration:
/// the single source of truth shared by initialization, counting, and
/// the weight-file reader/writer.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let conv = |v: &mut Vec<(String, Vec<usize>, Init)>, name: String, c_out: usize, c_in: usize, k: usize| {
        v.push((format!("{name}.weight"), vec![c_out, c_in, k, k], Init::HeConv { fan_in: c_in * k * k }));
    };
    let bn = |v: &mut Vec<(String, Vec<usize>, Init)>, name: String, c: usize| {
        v.push((format!("{name}.gamma"), vec![c], Init::Ones));
        v.push((format!("{name}.beta"), vec![c], Init::Zeros));
        v.push((format!("{name}.running_mean"), vec![c], Init::Zeros));
        v.push((format!("{name}.running_var"), vec![c], Init::Ones));
    };
    let fc = |v: &mut Vec<(String, Vec<usize>, Init)>, name: String, fan_in: usize, fan_out: usize| {
        v.push((format!("{name}.weight"), vec![fan_in, fan_out], Init::FcUniform { fan_in }));
        v.push((format!("{name}.bias"), vec![fan_out], Init::FcUniform { fan_in }));
    };

    conv(&mut v, "stem.conv".into(), cfg.stem.out_channels, cfg.input_channels, cfg.stem.kernel);
    bn(&mut v, "stem.bn".into(), cfg.stem.out_channels);
    for (i, b) in blocks_of(cfg).iter().enumerate() {
        let p = format!("block{i:02}");
        conv(&mut v, format!("{p}.conv1"), b.c_out, b.c_in, 3);
        bn(&mut v, format!("{p}.bn1"), b.c_out);
        conv(&mut v, format!("{p}.conv2"), b.c_out, b.c_out, 3);
        bn(&mut v, format!("{p}.bn2"), b.c_out);
        if b.projection {
            conv(&mut v, format!("{p}.down.conv"), b.c_out, b.c_in, 1);
            bn(&mut v, format!("{p}.down.bn"), b.c_out);
        }
    }
    let feat = cfg.feature_dim();
    fc(&mut v, "point.fc".into(), feat, 1);
    let mut fan_in = feat + 1;
    for (i, &h) in cfg.pi_hidden.iter().enumerate() {
        fc(&mut v, format!("pi.fc{i:02}"), fan_in, h);
        fan_in = h;
    }
    fc(&mut v, "pi.out".into(), fan_in, 1);
    // Channel statistics for input standardisation travel with the
    // weights so a saved model is self-contained at inference time.
    v.push(("norm.mean".into(), vec![cfg.input_channels], Init::Zeros));
    v.push(("norm.std".into(), vec![cfg.input_channels], Init::Ones));
    v
}

fn init_values(init: Init, len: usize, seed: u64, name: &str) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; len],
        Init::Ones => vec![1.0; len],
        Init::HeConv { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = seeding::rng_for(seed, &format!("init/{name}"));
            (0..len)
                .map(|_| (seeding::standard_normal(&mut rng) * std) as f32)
                .collect()
        }
        Init::FcUniform { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = seeding::rng_for(seed, &format!("init/{name}"));
            (0..len)
                .map(|_| ((2.0 * seeding::unit_open(&mut rng) - 1.0) * bound) as f32)
                .collect()
        }
    }
}

/// What a forward pass is for; controls batchnorm statistics, dropout,
/// and whether the interval head runs at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Point-estimate training: batch statistics (running buffers
    /// update), no dropout, interval head skipped.
    Stage1,
    /// Interval-head training: running statistics (backbone behaviour
    /// frozen bit-for-bit), dropout active, both heads run.
    Stage2,
    /// Joint-training ablation: batch statistics, dropout active, both
    /// heads run.
    Joint,
    /// Inference: running statistics, no dropout, both heads run.
    Eval,
    /// Backbone embedding only: like `Eval` without the interval head;
    /// used to cache features for fast interval-head training.
    Featurize,
}

impl ForwardMode {
    fn bn_training(self) -> bool {
        matches!(self, ForwardMode::Stage1 | ForwardMode::Joint)
    }
    fn dropout_active(self) -> bool {
        matches!(self, ForwardMode::Stage2 | ForwardMode::Joint)
    }
    fn wants_interval(self) -> bool {
        !matches!(self, ForwardMode::Stage1 | ForwardMode::Featurize)
    }
}

/// Live tensors from one forward pass. Handles are valid until the next
/// forward call on the same model, which rolls the graph back.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Point estimates, shape `[n, 1]`.
    pub point: Tensor<f32>,
    /// Spread estimates, shape `[n, 1]`; absent in modes that skip the
    /// interval head.
    pub sigma: Option<Tensor<f32>>,
    /// Pooled backbone features, shape `[n, feature_dim]`.
    pub features: Tensor<f32>,
}

/// A built network: the parameter tensors plus the computation graph
/// they live in.
///
/// Forward passes record activations into the graph; each call first
/// rolls the graph back to the post-parameter mark, so tensors returned
/// by the previous call become invalid. One model must therefore be
/// driven by one batch at a time, and training-mode passes mutate
/// running statistics; share a model across threads only behind
/// external synchronisation (the graph is not `Send` anyway).
pub struct Model {
    config: ModelConfig,
    graph: Graph<f32>,
    params: BTreeMap<String, Tensor<f32>>,
    base: GraphMark,
    stage1_done: bool,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("stage1_done", &self.stage1_done)
            .field("arrays", &self.params.len())
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct FileMeta {
    config: ModelConfig,
    stage1_done: bool,
}

impl Model {
    /// Builds a network with freshly initialized weights. Each parameter
    /// draws from its own `(seed, name)` stream, so two builds with the
    /// same arguments are bit-identical and adding a layer does not
    /// disturb the draws of existing ones.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let graph = Graph::new();
        let mut params = BTreeMap::new();
        for (name, shape, init) in layout(config) {
            let len = shape.iter().product();
            let data = init_values(init, len, seed, &name);
            let trainable = scope_of(&name) != ParamScope::Buffer;
            let t = graph.tensor(&shape, data, trainable)?;
            params.insert(name, t);
        }
        let base = graph.mark();
        Ok(Model { config: config.clone(), graph, params, base, stage1_done: false })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Whether this model has completed point-estimate training; set by
    /// the trainer and persisted in the weight file.
    pub fn stage1_done(&self) -> bool {
        self.stage1_done
    }

    pub fn set_stage1_done(&mut self, done: bool) {
        self.stage1_done = done;
    }

    /// The graph parameters live in; external tensors that should enter
    /// a loss (labels, cached features) must be created here.
    pub fn graph(&self) -> &Graph<f32> {
        &self.graph
    }

    /// Handle to a named parameter, if it exists.
    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    /// All parameter names in their canonical (sorted) order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    fn p(&self, name: &str) -> &Tensor<f32> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("internal error: parameter {name} missing from layout"))
    }

    /// Marks exactly the parameters in `scopes` as trainable and freezes
    /// everything else. Buffers never train. Later forward passes skip
    /// backward work for frozen subgraphs entirely.
    pub fn set_trainable(&self, scopes: &[ParamScope]) {
        for (name, t) in &self.params {
            let scope = scope_of(name);
            t.set_requires_grad(scope != ParamScope::Buffer && scopes.contains(&scope));
        }
    }

    /// Handles to the currently trainable parameters, in canonical name
    /// order (the order `sgd_step` velocity buffers key on).
    pub fn trainable_params(&self) -> Vec<Tensor<f32>> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Clears all accumulated gradients.
    pub fn zero_grads(&self) {
        self.graph.zero_grads();
    }

    /// Drops all activations recorded since the last forward, without
    /// running one.
    pub fn rollback(&self) {
        self.graph.truncate(self.base);
    }

    /// Per-channel input standardisation statistics stored with the
    /// model (applied by the data pipeline, not inside forward).
    pub fn norm_stats(&self) -> (Vec<f32>, Vec<f32>) {
        (self.p("norm.mean").value(), self.p("norm.std").value())
    }

    pub fn set_norm_stats(&self, mean: &[f32], std: &[f32]) -> Result<()> {
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!(
                "channel std values must be finite and positive, found {std:?}"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config(format!(
                "channel mean values must be finite, found {mean:?}"
            )));
        }
        self.p("norm.mean").set_value(mean)?;
        self.p("norm.std").set_value(std)
    }

    fn apply_bn(&self, x: &Tensor<f32>, prefix: &str, training: bool) -> Result<Tensor<f32>> {
        x.batchnorm2d(
            self.p(&format!("{prefix}.gamma")),
            self.p(&format!("{prefix}.beta")),
            self.p(&format!("{prefix}.running_mean")),
            self.p(&format!("{prefix}.running_var")),
            training,
            BN_MOMENTUM,
            BN_EPS,
        )
    }

    fn interval_head(
        &self,
        features: &Tensor<f32>,
        point: &Tensor<f32>,
        dropout_on: bool,
        dropout_seed: u64,
    ) -> Result<Tensor<f32>> {
        let dropped = features.dropout(self.config.dropout_p, dropout_on, dropout_seed)?;
        let mut h = dropped.concat_cols(point)?;
        for i in 0..self.config.pi_hidden.len() {
            h = h
                .matmul(self.p(&format!("pi.fc{i:02}.weight")))?
                .add_bias(self.p(&format!("pi.fc{i:02}.bias")))?
                .relu();
        }
        let pre = h.matmul(self.p("pi.out.weight"))?.add_bias(self.p("pi.out.bias"))?;
        Ok(if self.config.pi_sigmoid { pre.sigmoid() } else { pre })
    }

    /// Runs the network on a batch of standardized images, flattened
    /// row-major as `[n, input_channels, input_size, input_size]`.
    ///
    /// Rolls the graph back first: tensors returned by the previous
    /// forward (or by [`Model::interval_from_cached`]) become invalid.
    /// `dropout_seed` only matters in modes where dropout is active.
    pub fn forward(
        &self,
        images: &[f32],
        n: usize,
        mode: ForwardMode,
        dropout_seed: u64,
    ) -> Result<ForwardOutput> {
        let (c, s) = (self.config.input_channels, self.config.input_size);
        if n == 0 {
            return Err(Error::shape("forward needs at least one image"));
        }
        if images.len() != n * c * s * s {
            return Err(Error::shape(format!(
                "forward expects {n} x {c} x {s} x {s} = {} values, found {}",
                n * c * s * s,
                images.len()
            )));
        }
        self.graph.truncate(self.base);
        let bn_train = mode.bn_training();

        let x = self.graph.tensor(&[n, c, s, s], images.to_vec(), false)?;
        let x = x.conv2d(self.p("stem.conv.weight"), self.config.stem.stride, self.config.stem.kernel / 2)?;
        let x = self.apply_bn(&x, "stem.bn", bn_train)?.relu();
        let mut x = x.maxpool2d(3, 2, 1)?;
        for (i, b) in blocks_of(&self.config).iter().enumerate() {
            let p = format!("block{i:02}");
            let y = x.conv2d(self.p(&format!("{p}.conv1.weight")), b.stride, 1)?;
            let y = self.apply_bn(&y, &format!("{p}.bn1"), bn_train)?.relu();
            let y = y.conv2d(self.p(&format!("{p}.conv2.weight")), 1, 1)?;
            let y = self.apply_bn(&y, &format!("{p}.bn2"), bn_train)?;
            let shortcut = if b.projection {
                let s = x.conv2d(self.p(&format!("{p}.down.conv.weight")), b.stride, 0)?;
                self.apply_bn(&s, &format!("{p}.down.bn"), bn_train)?
            } else {
                x.clone()
            };
            x = y.add(&shortcut)?.relu();
        }
        let features = x.global_avg_pool()?;
        let pre = features.matmul(self.p("point.fc.weight"))?.add_bias(self.p("point.fc.bias"))?;
        let point = if self.config.point_sigmoid { pre.sigmoid() } else { pre };

        let sigma = if mode.wants_interval() {
            Some(self.interval_head(&features, &point, mode.dropout_active(), dropout_seed)?)
        } else {
            None
        };
        Ok(ForwardOutput { point, sigma, features })
    }

    /// Runs only the interval head on cached backbone features and point
    /// estimates (both produced by a [`ForwardMode::Featurize`] pass).
    /// With the backbone frozen and batchnorm on running statistics,
    /// features are deterministic per sample, so interval-head training
    /// can skip the convolutional forward entirely.
    ///
    /// Rolls the graph back first, like [`Model::forward`].
    pub fn interval_from_cached(
        &self,
        features: &[f32],
        points: &[f32],
        n: usize,
        dropout_on: bool,
        dropout_seed: u64,
    ) -> Result<Tensor<f32>> {
        let feat = self.config.feature_dim();
        if n == 0 || features.len() != n * feat || points.len() != n {
            return Err(Error::shape(format!(
                "cached interval input expects {n} x {feat} features and {n} points, found {} and {}",
                features.len(),
                points.len()
            )));
        }
        self.graph.truncate(self.base);
        let f = self.graph.tensor(&[n, feat], features.to_vec(), false)?;
        let p = self.graph.tensor(&[n, 1], points.to_vec(), false)?;
        self.interval_head(&f, &p, dropout_on, dropout_seed)
    }

    /// Serialises the model to its on-disk byte layout: magic `SIWN`,
    /// format version, length-prefixed JSON metadata (config and
    /// training flags), then each array in sorted name order as
    /// `(name, dtype tag, rank, extents, little-endian f32 payload)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&FileMeta {
            config: self.config.clone(),
            stage1_done: self.stage1_done,
        })
        .expect("model metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(FORMAT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, tensor) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0); // dtype tag: f32
            let shape = tensor.shape();
            out.push(shape.len() as u8);
            for d in &shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in tensor.value() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FORMAT_MAGIC {
            return Err(Error::data("not a model file: bad magic (expected \"SIWN\")"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported model format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let meta_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let meta: FileMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::data(format!("model file metadata does not parse: {e}")))?;
        let mut model = Model::build(&meta.config, 0)?;
        model.stage1_done = meta.stage1_done;

        let mut seen: Vec<&str> = Vec::new();
        while !r.done() {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::data("model file contains a non-UTF-8 array name"))?
                .to_owned();
            let dtype = r.take(1)?[0];
            if dtype != 0 {
                return Err(Error::data(format!(
                    "array \"{name}\": unsupported dtype tag {dtype}"
                )));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize);
            }
            let tensor = model.params.get(&name).ok_or_else(|| {
                Error::data(format!(
                    "array \"{name}\" in file does not exist in the configured architecture"
                ))
            })?;
            if tensor.shape() != shape {
                return Err(Error::data(format!(
                    "array \"{name}\": file shape {shape:?} does not match configured shape {:?}",
                    tensor.shape()
                )));
            }
            let len: usize = shape.iter().product();
            let payload = r.take(len * 4)?;
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensor.set_value(&values)?;
            let key = model.params.get_key_value(&name).expect("present").0;
            seen.push(key);
        }
        if seen.len() != model.params.len() {
            let missing: Vec<&str> = model
                .params
                .keys()
                .map(String::as_str)
                .filter(|k| !seen.contains(k))
                .collect();
            return Err(Error::data(format!("model file is missing arrays: {missing:?}")));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_bytes(&std::fs::read(path)?)
    }

    /// Order-stable 64-bit digest of the serialised model, for
    /// determinism checks and logs (not a cryptographic hash).
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in self.to_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{h:016x}")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(format!(
                "model file truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Number of trainable parameters (batchnorm running statistics and the
/// stored normalisation constants excluded).
pub fn param_count(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    Ok(layout(config)
        .iter()
        .filter(|(name, ..)| scope_of(name) != ParamScope::Buffer)
        .map(|(_, shape, _)| shape.iter().product::<usize>() as u64)
        .sum())
}

/// FLOPs for one single-image eval-mode forward pass at the configured
/// input size.
///
/// Counting convention: one multiply-accumulate in a convolution or
/// fully connected layer is 2 FLOPs; batchnorm (eval form, scale and
/// shift) is 2 per element; relu, sigmoid, and residual additions are 1
/// per element; pooling is 1 per window comparison. Dropout is inactive
/// at inference and costs nothing.
pub fn flop_estimate(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    let mut flops: u64 = 0;
    let e = |s: usize| (s * s) as u64;

    let s1 = conv_extent(config.input_size, config.stem.kernel, config.stem.stride, config.stem.kernel / 2)
        .expect("validated");
    let c0 = config.stem.out_channels as u64;
    flops += 2 * (config.stem.kernel * config.stem.kernel * config.input_channels) as u64 * c0 * e(s1);
    flops += 3 * c0 * e(s1); // batchnorm + relu
    let s2 = conv_extent(s1, 3, 2, 1).expect("validated");
    flops += 9 * c0 * e(s2);

    let mut sp = s2;
    for b in blocks_of(config) {
        let out_sp = conv_extent(sp, 3, b.stride, 1).expect("validated");
        let (ci, co) = (b.c_in as u64, b.c_out as u64);
        flops += 2 * 9 * ci * co * e(out_sp) + 3 * co * e(out_sp); // conv1 + bn + relu
        flops += 2 * 9 * co * co * e(out_sp) + 2 * co * e(out_sp); // conv2 + bn
        if b.projection {
            flops += 2 * ci * co * e(out_sp) + 2 * co * e(out_sp); // 1x1 conv + bn
        }
        flops += 2 * co * e(out_sp); // residual add + relu
        sp = out_sp;
    }

    let feat = config.feature_dim() as u64;
    flops += feat * e(sp) + feat; // global average pool
    flops += 2 * feat + 1; // point head matmul + bias
    if config.point_sigmoid {
        flops += 1;
    }
    let mut fan_in = feat + 1;
    for &h in &config.pi_hidden {
        let h = h as u64;
        flops += 2 * fan_in * h + h + h; // matmul + bias + relu
        fan_in = h;
    }
    flops += 2 * fan_in + 1;
    if config.pi_sigmoid {
        flops += 1;
    }
    Ok(flops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn test_images(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<f32> {
        let len = n * cfg.input_channels * cfg.input_size * cfg.input_size;
        let mut rng = seeding::rng_for(seed, "test-images");
        (0..len)
            .map(|_| (seeding::unit_open(&mut rng) * 2.0 - 1.0) as f32)
            .collect()
    }

    /// A config small enough for fast per-test builds: 32x32 input, one
    /// projection-free block plus one downsampling block.
    fn micro() -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.input_size = 32;
        cfg
    }

    #[test]
    fn same_seed_and_config_build_bit_identical_models() {
        let a = Model::build(&ModelConfig::tiny(), 11).unwrap();
        let b = Model::build(&ModelConfig::tiny(), 11).unwrap();
        let c = Model::build(&ModelConfig::tiny(), 12).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn tiny_preset_runs_forward_and_bounds_both_outputs() {
        let cfg = ModelConfig::tiny();
        let m = Model::build(&cfg, 3).unwrap();
        for n in [1usize, 2, 32] {
            let out = m.forward(&test_images(&cfg, n, n as u64), n, ForwardMode::Eval, 0).unwrap();
            let points = out.point.value();
            let sigmas = out.sigma.expect("eval runs the interval head").value();
            assert_eq!(points.len(), n, "one point estimate per image");
            assert_eq!(sigmas.len(), n);
            assert_eq!(out.features.shape(), vec![n, cfg.feature_dim()]);
            for (&f, &s) in points.iter().zip(&sigmas) {
                assert!(f > 0.0 && f < 1.0, "sigmoid-bounded point, got {f}");
                assert!(s > 0.0 && s < 1.0, "sigmoid-bounded sigma, got {s}");
            }
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let cfg = micro();
        let m = Model::build(&cfg, 5).unwrap();
        let images = test_images(&cfg, 3, 9);
        let a = m.forward(&images, 3, ForwardMode::Eval, 1).unwrap();
        let (pa, sa) = (a.point.value(), a.sigma.unwrap().value());
        let b = m.forward(&images, 3, ForwardMode::Eval, 2).unwrap();
        assert_eq!(pa, b.point.value());
        assert_eq!(sa, b.sigma.unwrap().value());
    }

    #[test]
    fn without_interval_sigmoid_sigma_can_leave_the_unit_interval() {
        let mut cfg = micro();
        cfg.pi_sigmoid = false;
        let m = Model::build(&cfg, 5).unwrap();
        m.param("pi.out.bias").unwrap().set_value(&[5.0]).unwrap();
        let out = m.forward(&test_images(&cfg, 2, 1), 2, ForwardMode::Eval, 0).unwrap();
        for s in out.sigma.unwrap().value() {
            assert!(s > 1.0, "unbounded head should exceed 1 here, got {s}");
        }
    }

    #[test]
    fn stage1_updates_running_stats_and_frozen_modes_do_not() {
        let cfg = micro();
        let m = Model::build(&cfg, 7).unwrap();
        let images = test_images(&cfg, 4, 2);
        let before = m.param("stem.bn.running_mean").unwrap().value();
        m.forward(&images, 4, ForwardMode::Stage2, 0).unwrap();
        m.forward(&images, 4, ForwardMode::Eval, 0).unwrap();
        m.forward(&images, 4, ForwardMode::Featurize, 0).unwrap();
        assert_eq!(before, m.param("stem.bn.running_mean").unwrap().value());
        m.forward(&images, 4, ForwardMode::Stage1, 0).unwrap();
        assert_ne!(before, m.param("stem.bn.running_mean").unwrap().value());
    }

    #[test]
    fn stage1_mode_skips_the_interval_head() {
        let cfg = micro();
        let m = Model::build(&cfg, 7).unwrap();
        let out = m.forward(&test_images(&cfg, 2, 3), 2, ForwardMode::Stage1, 0).unwrap();
        assert!(out.sigma.is_none());
    }

    #[test]
    fn cached_interval_head_matches_the_full_forward() {
        let cfg = micro();
        let m = Model::build(&cfg, 19).unwrap();
        let images = test_images(&cfg, 3, 8);
        let full = m.forward(&images, 3, ForwardMode::Eval, 0).unwrap();
        let (feats, points, sigmas) = (
            full.features.value(),
            full.point.value(),
            full.sigma.unwrap().value(),
        );
        let cached = m
            .interval_from_cached(&feats, &points, 3, false, 0)
            .unwrap();
        assert_eq!(cached.value(), sigmas);
    }

    #[test]
    fn frozen_backbone_stays_bitwise_fixed_while_interval_head_trains() {
        use crate::tensor::{sgd_step, Velocity};
        let cfg = micro();
        let m = Model::build(&cfg, 23).unwrap();
        m.set_trainable(&[ParamScope::IntervalHead]);
        let images = test_images(&cfg, 4, 4);
        let labels = [0.3, 0.7, 0.5, 0.2];

        let backbone_before: Vec<Vec<f32>> = m
            .param_names()
            .iter()
            .filter(|n| !n.starts_with("pi."))
            .map(|n| m.param(n).unwrap().value())
            .collect();
        let pi_weight_before = m.param("pi.out.weight").unwrap().value();

        let mut vel = Velocity::new();
        for step in 0..3u64 {
            let out = m.forward(&images, 4, ForwardMode::Stage2, step).unwrap();
            let loss = out
                .point
                .truncnorm_nll(&out.sigma.unwrap(), &labels, 0.0, 1.0)
                .unwrap();
            m.zero_grads();
            loss.backward().unwrap();
            sgd_step(&m.trainable_params(), 1e-3, 0.9, 0.0, &mut vel).unwrap();
        }

        let backbone_after: Vec<Vec<f32>> = m
            .param_names()
            .iter()
            .filter(|n| !n.starts_with("pi."))
            .map(|n| m.param(n).unwrap().value())
            .collect();
        assert_eq!(backbone_before, backbone_after, "frozen arrays must not move");
        assert_ne!(pi_weight_before, m.param("pi.out.weight").unwrap().value());
    }

    #[test]
    fn every_interval_head_parameter_receives_gradient() {
        let cfg = micro();
        let m = Model::build(&cfg, 29).unwrap();
        m.set_trainable(&[ParamScope::IntervalHead]);
        let images = test_images(&cfg, 4, 6);
        let labels = [0.1, 0.9, 0.4, 0.6];
        let out = m.forward(&images, 4, ForwardMode::Stage2, 1).unwrap();
        let loss = out
            .point
            .truncnorm_nll(&out.sigma.unwrap(), &labels, 0.0, 1.0)
            .unwrap();
        loss.backward().unwrap();
        for name in m.param_names() {
            let grad = m.param(&name).unwrap().grad();
            if name.starts_with("pi.") {
                let g = grad.unwrap_or_else(|| panic!("{name} should have a gradient"));
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "{name} gradient is identically zero"
                );
            } else {
                assert!(grad.is_none(), "{name} is frozen and should have no gradient");
            }
        }
    }

    #[test]
    fn parameter_count_matches_built_tensors_and_published_scale() {
        for cfg in [ModelConfig::full(), ModelConfig::tiny(), micro()] {
            let m = Model::build(&cfg, 0).unwrap();
            let built: u64 = m
                .param_names()
                .iter()
                .filter(|n| scope_of(n) != ParamScope::Buffer)
                .map(|n| m.param(n).unwrap().len() as u64)
                .sum();
            assert_eq!(param_count(&cfg).unwrap(), built);
        }
        assert_eq!(param_count(&ModelConfig::tiny()).unwrap(), 6650);
        let full = param_count(&ModelConfig::full()).unwrap();
        assert_eq!(full, 4_988_738);
        assert!((4_500_000..=5_600_000).contains(&full));
    }

    #[test]
    fn doubling_widths_roughly_quadruples_parameters() {
        let base = ModelConfig::full();
        let mut wide = base.clone();
        wide.stem.out_channels *= 2;
        for w in &mut wide.channel_schedule {
            *w *= 2;
        }
        let ratio = param_count(&wide).unwrap() as f64 / param_count(&base).unwrap() as f64;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn flop_estimate_lands_near_the_published_load() {
        let flops = flop_estimate(&ModelConfig::full()).unwrap() as f64;
        let target = 4.23e9;
        assert!(
            (flops - target).abs() <= 0.25 * target,
            "estimate {flops:.3e} outside 25% of {target:.3e}"
        );
        // Pin the exact value so accounting changes are deliberate.
        assert_eq!(flop_estimate(&ModelConfig::full()).unwrap(), 3_945_306_244);
    }

    #[test]
    fn save_load_round_trip_preserves_eval_forward_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.siwn");
        let cfg = micro();
        let mut m = Model::build(&cfg, 31).unwrap();
        m.set_stage1_done(true);
        m.set_norm_stats(&[0.1, 0.2, 0.3], &[0.9, 1.0, 1.1]).unwrap();
        m.save(&path).unwrap();

        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config(), m.config());
        assert!(loaded.stage1_done());
        assert_eq!(loaded.norm_stats(), m.norm_stats());
        assert_eq!(loaded.content_hash(), m.content_hash());

        let images = test_images(&cfg, 2, 5);
        let a = m.forward(&images, 2, ForwardMode::Eval, 0).unwrap();
        let b = loaded.forward(&images, 2, ForwardMode::Eval, 0).unwrap();
        assert_eq!(a.point.value(), b.point.value());
        assert_eq!(a.sigma.unwrap().value(), b.sigma.unwrap().value());
    }

    #[test]
    fn malformed_model_files_error_instead_of_crashing() {
        let m = Model::build(&micro(), 1).unwrap();
        let bytes = m.to_bytes();

        let truncated = Model::from_bytes(&bytes[..bytes.len() - 7]);
        assert!(truncated.unwrap_err().to_string().contains("truncated"));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Model::from_bytes(&bad_magic).unwrap_err().to_string().contains("magic"));

        let mut bad_version = bytes.clone();
        bad_version[4] = 0xFF;
        assert!(Model::from_bytes(&bad_version).unwrap_err().to_string().contains("version"));

        // A trailing array whose name the architecture does not know.
        let mut extra = bytes.clone();
        let name = b"mystery.weight";
        extra.extend_from_slice(&(name.len() as u16).to_le_bytes());
        extra.extend_from_slice(name);
        extra.push(0);
        extra.push(1);
        extra.extend_from_slice(&1u32.to_le_bytes());
        extra.extend_from_slice(&1.0f32.to_le_bytes());
        let err = Model::from_bytes(&extra).unwrap_err().to_string();
        assert!(err.contains("mystery.weight"), "{err}");
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut no_blocks = ModelConfig::tiny();
        no_blocks.channel_schedule.clear();
        assert!(no_blocks.validate().is_err());

        let mut zero_width = ModelConfig::tiny();
        zero_width.pi_hidden = vec![16, 0];
        assert!(zero_width.validate().is_err());

        let mut even_kernel = ModelConfig::tiny();
        even_kernel.stem.kernel = 6;
        assert!(even_kernel.validate().is_err(), "even stem kernels break symmetric padding");

        let mut bad_dropout = ModelConfig::tiny();
        bad_dropout.dropout_p = 1.0;
        assert!(bad_dropout.validate().is_err());
    }

    #[test]
    fn wrong_spatial_size_is_rejected_at_forward() {
        let cfg = micro();
        let m = Model::build(&cfg, 1).unwrap();
        let err = m.forward(&vec![0.0; 3 * 16 * 16], 1, ForwardMode::Eval, 0).unwrap_err();
        assert!(err.to_string().contains("32"), "{err}");
    }

    #[test]
    fn config_json_round_trips_and_patches_presets() {
        let cfg = ModelConfig::tiny();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);

        let patched: ModelConfig =
            serde_json::from_str(r#"{"scale_preset": "tiny", "input_size": 32, "dropout_p": 0.0}"#)
                .unwrap();
        assert_eq!(patched.input_size, 32);
        assert_eq!(patched.dropout_p, 0.0);
        assert_eq!(patched.channel_schedule, vec![8, 16]);

        let typo: std::result::Result<ModelConfig, _> =
            serde_json::from_str(r#"{"chanel_schedule": [8]}"#);
        assert!(typo.is_err(), "unknown keys must be rejected");
    }
}
