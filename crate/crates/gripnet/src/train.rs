//! Two-stage training.
//!
//! Stage 1 fits the backbone and point head with mean squared error.
//! Stage 2 freezes them and fits the interval head with the summed
//! truncated-normal negative log-likelihood (scales floored inside the
//! loss). A joint ablation trains everything at once on the same
//! likelihood to demonstrate why the two-stage schedule exists.
//!
//! All randomness (shuffling, dropout masks, augmentation draws) comes
//! from streams derived off one master seed, so a run is reproducible
//! bit-for-bit. Losses are optimised as computed per batch (mean for
//! MSE, sum for the likelihood) and always logged per-sample-averaged
//! so logs compare across batch sizes.

use crate::data::{standardize_chw, BevCrop, ImageF32, SampleInput, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalMode, Prediction};
use crate::model::{ForwardMode, Model, ParamScope};
use crate::probdist::SIGMA_FLOOR;
use crate::seeding;
use crate::tensor::{sgd_step, Velocity};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// The learning rate drops every this many epochs...
    pub lr_step_epochs: usize,
    /// ...to this fraction of its previous value.
    pub lr_gamma: f64,
}

impl StageConfig {
    /// Stage-1 defaults: 60 epochs of MSE at lr 0.1, decayed to a tenth
    /// every 20 epochs, momentum 0.9, weight decay 1e-3, batches of 32.
    pub fn stage1() -> Self {
        StageConfig {
            epochs: 60,
            initial_lr: 0.1,
            weight_decay: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            lr_step_epochs: 20,
            lr_gamma: 0.1,
        }
    }

    /// Stage-2 defaults: identical schedule shape at lr 5e-4.
    pub fn stage2() -> Self {
        StageConfig { initial_lr: 5e-4, ..StageConfig::stage1() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("a stage needs at least one epoch"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config(format!(
                "initial_lr must be positive and finite, found {}",
                self.initial_lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be nonnegative, found {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.lr_step_epochs == 0 {
            return Err(Error::config("lr_step_epochs must be at least 1"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::config(format!(
                "lr_gamma {} outside (0, 1]",
                self.lr_gamma
            )));
        }
        Ok(())
    }

    /// The step-decay schedule, a pure function of the epoch index:
    /// `initial_lr * lr_gamma^(epoch / lr_step_epochs)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// Partial overrides for a [`StageConfig`], as read from a training
/// config file: absent fields keep the stage's defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageOverrides {
    pub epochs: Option<usize>,
    pub initial_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub lr_step_epochs: Option<usize>,
    pub lr_gamma: Option<f64>,
}

impl StageOverrides {
    pub fn apply(&self, mut base: StageConfig) -> StageConfig {
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.initial_lr {
            base.initial_lr = v;
        }
        if let Some(v) = self.weight_decay {
            base.weight_decay = v;
        }
        if let Some(v) = self.momentum {
            base.momentum = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.lr_step_epochs {
            base.lr_step_epochs = v;
        }
        if let Some(v) = self.lr_gamma {
            base.lr_gamma = v;
        }
        base
    }
}

fn default_true() -> bool {
    true
}
fn default_rotation() -> [f64; 2] {
    [-4.0, 4.0]
}
fn default_jitter() -> [f64; 2] {
    [0.9, 1.1]
}

/// Data augmentation applied to the warped training square, before
/// standardisation. Order: horizontal flip (probability one half), then
/// rotation with nearest-edge fill, then one global colour scale shared
/// by all three channels, clamped back into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_true")]
    pub horizontal_flip: bool,
    /// Rotation angle range in degrees.
    #[serde(default = "default_rotation")]
    pub rotation_degrees: [f64; 2],
    /// Global brightness scale range.
    #[serde(default = "default_jitter")]
    pub color_jitter_scale: [f64; 2],
    #[serde(default = "default_true")]
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_flip: true,
            rotation_degrees: default_rotation(),
            color_jitter_scale: default_jitter(),
            enabled: true,
        }
    }
}

impl AugmentConfig {
    /// Augmentation switched off entirely (identity transform).
    pub fn off() -> Self {
        AugmentConfig { enabled: false, ..AugmentConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ordered(self.rotation_degrees) {
            return Err(Error::config(format!(
                "rotation range {:?} is not well-ordered",
                self.rotation_degrees
            )));
        }
        if !ordered(self.color_jitter_scale) || self.color_jitter_scale[0] <= 0.0 {
            return Err(Error::config(format!(
                "colour jitter range {:?} must be well-ordered and positive",
                self.color_jitter_scale
            )));
        }
        Ok(())
    }
}

/// Mirrors the image left-right.
pub fn flip_horizontal(image: &ImageF32) -> ImageF32 {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, image.pixel(w - 1 - x, y));
        }
    }
    out
}

/// Rotates about the image centre by `degrees` (counter-clockwise),
/// bilinear sampling with nearest-edge fill for pixels that fall
/// outside the source.
pub fn rotate(image: &ImageF32, degrees: f64) -> ImageF32 {
    let (w, h) = (image.width(), image.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // Inverse rotation: where this output pixel came from.
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            out.set_pixel(x, y, image.sample_bilinear(sx, sy));
        }
    }
    out
}

/// Applies one random augmentation draw. The three decisions (flip,
/// angle, scale) are always drawn in a fixed order from the seed, so
/// toggling one option never changes the others' draws.
pub fn augment(image: &ImageF32, aug: &AugmentConfig, seed: u64) -> ImageF32 {
    if !aug.enabled {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip_draw = seeding::unit_open(&mut rng);
    let [rlo, rhi] = aug.rotation_degrees;
    let angle = rlo + (rhi - rlo) * seeding::unit_open(&mut rng);
    let [jlo, jhi] = aug.color_jitter_scale;
    let scale = jlo + (jhi - jlo) * seeding::unit_open(&mut rng);

    let mut img = if aug.horizontal_flip && flip_draw < 0.5 {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    if angle != 0.0 {
        img = rotate(&img, angle);
    }
    if scale != 1.0 {
        let data: Vec<f32> = img
            .data()
            .iter()
            .map(|&v| (v * scale as f32).clamp(0.0, 1.0))
            .collect();
        img = ImageF32::new(img.width(), img.height(), data).expect("same dimensions");
    }
    img
}

/// One master seed and the named streams derived from it. Identical
/// masters always derive identical streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeed {
    master: u64,
}

impl RunSeed {
    pub fn new(master: u64) -> Self {
        RunSeed { master }
    }

    /// The seed the model was (or should be) initialised from.
    pub fn master(&self) -> u64 {
        self.master
    }

    /// Batch-order stream for one epoch of one stage.
    pub fn shuffle(&self, stage: &str, epoch: usize) -> u64 {
        seeding::subseed(self.master, &format!("shuffle/{stage}/{epoch}"))
    }

    /// Dropout-mask stream for one batch.
    pub fn dropout(&self, stage: &str, epoch: usize, batch: usize) -> u64 {
        seeding::subseed(self.master, &format!("dropout/{stage}/{epoch}/{batch}"))
    }

    /// Augmentation stream for one sample in one epoch. Keyed by dataset
    /// index, not batch position, so the draw survives reshuffling.
    pub fn augment(&self, stage: &str, epoch: usize, sample: usize) -> u64 {
        seeding::subseed(self.master, &format!("augment/{stage}/{epoch}/{sample}"))
    }
}

/// A dataset loaded into memory as warped/resized squares (still in
/// [0, 1], not yet standardised) plus labels, ready for batching.
#[derive(Debug, Clone)]
pub struct ImageSet {
    squares: Vec<ImageF32>,
    labels: Vec<f64>,
}

impl ImageSet {
    /// Loads every record's image relative to `manifest_dir`, applying
    /// the bird's-eye warp (or a plain resize) to `input_size`.
    pub fn load(
        records: &[SampleRecord],
        manifest_dir: &Path,
        crop: Option<&BevCrop>,
        input_size: usize,
    ) -> Result<Self> {
        let mut squares = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let rel = match &r.input {
                SampleInput::ImagePath(p) => p,
                SampleInput::Features(_) => {
                    return Err(Error::data(format!(
                        "record {i}: feature-vector manifests cannot feed the image model"
                    )))
                }
            };
            let img = ImageF32::load(manifest_dir.join(rel))?;
            squares.push(crate::data::to_square(&img, crop, input_size)?);
            labels.push(r.friction_factor);
        }
        ImageSet::from_parts(squares, labels)
    }

    /// Builds a set from already-prepared squares (all the same size).
    pub fn from_parts(squares: Vec<ImageF32>, labels: Vec<f64>) -> Result<Self> {
        if squares.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                squares.len(),
                labels.len()
            )));
        }
        if let Some(first) = squares.first() {
            let (w, h) = (first.width(), first.height());
            if squares.iter().any(|s| s.width() != w || s.height() != h) {
                return Err(Error::shape("images in a set must share dimensions"));
            }
        }
        if let Some(bad) = labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::data(format!("label {bad} outside [0, 1]")));
        }
        Ok(ImageSet { squares, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn square(&self, i: usize) -> &ImageF32 {
        &self.squares[i]
    }

    /// Per-channel mean/std over every pixel of every image; constant
    /// channels get std 1 (they standardise to zero).
    pub fn channel_stats(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        if self.is_empty() {
            return Err(Error::data("channel statistics need at least one image"));
        }
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let mut count = 0.0f64;
        for img in &self.squares {
            for px in img.data().chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            count += (img.width() * img.height()) as f64;
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / count) as f32).collect();
        let std: Vec<f32> = (0..3)
            .map(|c| {
                let m = sum[c] / count;
                let s = ((sumsq[c] / count - m * m).max(0.0)).sqrt() as f32;
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok((mean, std))
    }
}

/// One line of the training log; serialised as line-delimited JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    /// Per-sample average of the stage's loss over the epoch.
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_interval_score: Option<f64>,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = (seeding::unit_open(&mut rng) * (i + 1) as f64) as usize;
        v.swap(i, j.min(i));
    }
    v
}

/// Builds one standardised planar batch. `aug` carries (config, seeds,
/// stage tag, epoch) when augmentation may apply; eval paths pass None.
fn assemble_batch(
    set: &ImageSet,
    indices: &[usize],
    mean: &[f32],
    std: &[f32],
    aug: Option<(&AugmentConfig, RunSeed, &str, usize)>,
) -> Result<(Vec<f32>, Vec<f64>)> {
    let mut flat = Vec::new();
    let mut ys = Vec::with_capacity(indices.len());
    for &i in indices {
        let owned;
        let square = match aug {
            Some((a, seed, stage, epoch)) if a.enabled => {
                owned = augment(set.square(i), a, seed.augment(stage, epoch, i));
                &owned
            }
            _ => set.square(i),
        };
        let mut chw = square.to_chw();
        standardize_chw(&mut chw, mean, std)?;
        flat.extend_from_slice(&chw);
        ys.push(set.labels[i]);
    }
    Ok((flat, ys))
}

/// Eval-mode predictions for a whole set: points clamped into [0, 1]
/// (the clamp matters when the point sigmoid is ablated), scales floored
/// at the loss floor so downstream distributions are always valid.
pub fn predict(model: &Model, set: &ImageSet, batch_size: usize) -> Result<Vec<Prediction>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let (mean, std) = model.norm_stats();
    let mut preds = Vec::with_capacity(set.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (flat, _) = assemble_batch(set, chunk, &mean, &std, None)?;
        let out = model.forward(&flat, chunk.len(), ForwardMode::Eval, 0)?;
        let points = out.point.value();
        let sigmas = out.sigma.expect("eval mode produces intervals").value();
        for k in 0..chunk.len() {
            preds.push(Prediction {
                point: (points[k] as f64).clamp(0.0, 1.0),
                sigma: Some((sigmas[k] as f64).max(SIGMA_FLOOR)),
            });
        }
    }
    model.rollback();
    Ok(preds)
}

fn validation_mae(model: &Model, val: &ImageSet, batch_size: usize) -> Result<f64> {
    let preds = predict(model, val, batch_size)?;
    let points: Vec<f64> = preds.iter().map(|p| p.point).collect();
    metrics::mae(&points, val.labels())
}

fn validation_interval_score(model: &Model, val: &ImageSet, batch_size: usize) -> Result<f64> {
    let preds = predict(model, val, batch_size)?;
    Ok(metrics::evaluate(&preds, val.labels(), EvalMode::Distributional)?.avg_interval_score)
}

/// Stage 1: backbone + point head on mean squared error. Computes the
/// training split's channel statistics and stores them in the model,
/// then optimises with SGD + momentum under the step-decay schedule.
/// The interval head is untouched. Marks the model stage-1-complete.
pub fn train_stage1(
    model: &mut Model,
    train: &ImageSet,
    val: Option<&ImageSet>,
    cfg: &StageConfig,
    aug: &AugmentConfig,
    seed: RunSeed,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    aug.validate()?;
    if train.is_empty() {
        return Err(Error::data("stage 1 needs a nonempty training set"));
    }
    let (mean, std) = train.channel_stats()?;
    model.set_norm_stats(&mean, &std)?;
    model.set_trainable(&[ParamScope::Backbone, ParamScope::PointHead]);
    let params = model.trainable_params();
    let mut velocity = Velocity::new();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled_indices(train.len(), seed.shuffle("stage1", epoch));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (flat, ys) =
                assemble_batch(train, chunk, &mean, &std, Some((aug, seed, "stage1", epoch)))?;
            let out = model.forward(&flat, chunk.len(), ForwardMode::Stage1, 0)?;
            let ys_f32: Vec<f32> = ys.iter().map(|&y| y as f32).collect();
            let target = model.graph().tensor(&[chunk.len(), 1], ys_f32, false)?;
            let loss = out.point.mse_loss(&target)?;
            model.zero_grads();
            loss.backward()?;
            sgd_step(&params, lr, cfg.momentum, cfg.weight_decay, &mut velocity)?;
            // mse_loss is a batch mean; re-weight so the epoch log is a
            // per-sample average even with a short last batch.
            total += loss.scalar_value()? * chunk.len() as f64;
        }
        let val_mae = match val {
            Some(v) => Some(validation_mae(model, v, cfg.batch_size)?),
            None => None,
        };
        logs.push(EpochLog {
            stage: "stage1".to_owned(),
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_mae,
            val_interval_score: None,
        });
    }
    model.set_stage1_done(true);
    model.rollback();
    Ok(logs)
}

/// Caches eval-mode backbone features and point estimates for every
/// sample, in dataset order.
fn featurize_all(model: &Model, set: &ImageSet, batch_size: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let (mean, std) = model.norm_stats();
    let mut features = Vec::with_capacity(set.len() * model.config().feature_dim());
    let mut points = Vec::with_capacity(set.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (flat, _) = assemble_batch(set, chunk, &mean, &std, None)?;
        let out = model.forward(&flat, chunk.len(), ForwardMode::Featurize, 0)?;
        features.extend_from_slice(&out.features.value());
        points.extend_from_slice(&out.point.value());
    }
    model.rollback();
    Ok((features, points))
}

/// Stage 2: interval head only, on the summed truncated-normal negative
/// log-likelihood, with dropout on the features feeding the head. The
/// backbone and point head stay bitwise frozen (batchnorm runs on its
/// stored statistics, so even the running buffers hold still).
///
/// A model that never finished stage 1 gets a warning and proceeds with
/// whatever backbone it has.
pub fn train_stage2(
    model: &mut Model,
    train: &ImageSet,
    val: Option<&ImageSet>,
    cfg: &StageConfig,
    aug: &AugmentConfig,
    seed: RunSeed,
) -> Result<Vec<EpochLog>> {
    // With augmentation off, the frozen backbone sees identical pixels
    // every epoch, so features are computed once and the convolutional
    // stack never runs again.
    train_stage2_impl(model, train, val, cfg, aug, seed, !aug.enabled)
}

fn train_stage2_impl(
    model: &mut Model,
    train: &ImageSet,
    val: Option<&ImageSet>,
    cfg: &StageConfig,
    aug: &AugmentConfig,
    seed: RunSeed,
    cache_features: bool,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    aug.validate()?;
    if train.is_empty() {
        return Err(Error::data("stage 2 needs a nonempty training set"));
    }
    if !model.stage1_done() {
        eprintln!(
            "warning: stage 2 on a model without a completed stage 1; \
             the interval head will fit whatever backbone is present"
        );
    }
    model.set_trainable(&[ParamScope::IntervalHead]);
    let params = model.trainable_params();
    let mut velocity = Velocity::new();
    let feature_dim = model.config().feature_dim();
    let cached = if cache_features {
        Some(featurize_all(model, train, cfg.batch_size)?)
    } else {
        None
    };
    let (mean, std) = model.norm_stats();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled_indices(train.len(), seed.shuffle("stage2", epoch));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let dropout_seed = seed.dropout("stage2", epoch, b);
            let loss = match &cached {
                Some((features, points)) => {
                    let mut feat_batch = Vec::with_capacity(chunk.len() * feature_dim);
                    let mut point_batch = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        feat_batch.extend_from_slice(&features[i * feature_dim..(i + 1) * feature_dim]);
                        point_batch.push(points[i]);
                    }
                    let sigma = model.interval_from_cached(
                        &feat_batch,
                        &point_batch,
                        chunk.len(),
                        true,
                        dropout_seed,
                    )?;
                    // Created after the cached call (which rolls the
                    // graph back), never before.
                    let mu = model.graph().tensor(&[chunk.len(), 1], point_batch, false)?;
                    let ys: Vec<f64> = chunk.iter().map(|&i| train.labels[i]).collect();
                    mu.truncnorm_nll(&sigma, &ys, 0.0, 1.0)?
                }
                None => {
                    let (flat, ys) = assemble_batch(
                        train,
                        chunk,
                        &mean,
                        &std,
                        Some((aug, seed, "stage2", epoch)),
                    )?;
                    let out = model.forward(&flat, chunk.len(), ForwardMode::Stage2, dropout_seed)?;
                    let sigma = out.sigma.expect("stage 2 produces intervals");
                    out.point.truncnorm_nll(&sigma, &ys, 0.0, 1.0)?
                }
            };
            model.zero_grads();
            loss.backward()?;
            sgd_step(&params, lr, cfg.momentum, cfg.weight_decay, &mut velocity)?;
            // The likelihood is summed per batch; the log divides by n.
            total += loss.scalar_value()?;
        }
        let val_interval_score = match val {
            Some(v) => Some(validation_interval_score(model, v, cfg.batch_size)?),
            None => None,
        };
        logs.push(EpochLog {
            stage: "stage2".to_owned(),
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_mae: None,
            val_interval_score,
        });
    }
    model.rollback();
    Ok(logs)
}

/// The non-frozen ablation: one stage over the summed likelihood with
/// every parameter trainable, dropout and batch statistics live. Exists
/// to show the two-stage schedule beating it.
pub fn train_joint_ablation(
    model: &mut Model,
    train: &ImageSet,
    val: Option<&ImageSet>,
    cfg: &StageConfig,
    aug: &AugmentConfig,
    seed: RunSeed,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    aug.validate()?;
    if train.is_empty() {
        return Err(Error::data("joint training needs a nonempty training set"));
    }
    let (mean, std) = train.channel_stats()?;
    model.set_norm_stats(&mean, &std)?;
    model.set_trainable(&[
        ParamScope::Backbone,
        ParamScope::PointHead,
        ParamScope::IntervalHead,
    ]);
    let params = model.trainable_params();
    let mut velocity = Velocity::new();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled_indices(train.len(), seed.shuffle("joint", epoch));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (flat, ys) =
                assemble_batch(train, chunk, &mean, &std, Some((aug, seed, "joint", epoch)))?;
            let dropout_seed = seed.dropout("joint", epoch, b);
            let out = model.forward(&flat, chunk.len(), ForwardMode::Joint, dropout_seed)?;
            let sigma = out.sigma.expect("joint mode produces intervals");
            let loss = out.point.truncnorm_nll(&sigma, &ys, 0.0, 1.0)?;
            model.zero_grads();
            loss.backward()?;
            sgd_step(&params, lr, cfg.momentum, cfg.weight_decay, &mut velocity)?;
            total += loss.scalar_value()?;
        }
        let val_interval_score = match val {
            Some(v) => Some(validation_interval_score(model, v, cfg.batch_size)?),
            None => None,
        };
        logs.push(EpochLog {
            stage: "joint".to_owned(),
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_mae: None,
            val_interval_score,
        });
    }
    // The backbone and point head were trained, whatever the route.
    model.set_stage1_done(true);
    model.rollback();
    Ok(logs)
}
