//! Synthetic heteroscedastic dataset generator.
//!
//! Each sample owns a latent value `u` in (0, 1). A mean function maps
//! `u` to the true label centre, a sigma function sets the true noise
//! scale, and the label is drawn from `TruncatedNormal(mu, sigma, 0, 1)`.
//! Inputs encode `u` either as a feature vector or as a small RGB image:
//!
//! * channel 0: a horizontal brightness ramp around `u`, scaled by a
//!   per-group gain,
//! * channel 1: the noise level,
//! * channel 2: a constant group signature (a memorisable shortcut that
//!   regularisation has to resist),
//!
//! with the group's exposure offset added to both intensity channels
//! (0 and 1): held-out groups genuinely read differently, which is the
//! nuisance the split and ablation tests lean on. Everything also gets
//! additive pixel noise. Group ids are assigned in contiguous blocks.
//! The true parameters are persisted in a JSON sidecar next to the
//! manifest so statistical tests can check calibration against the
//! generator instead of against the model.
//!
//! Generation is deterministic: every sample draws from its own seeded
//! stream, so a dataset regenerates bit-identically from (spec, seed).

use crate::data::{write_manifest, ImageF32, SampleInput, SampleRecord};
use crate::error::{Error, Result};
use crate::probdist::TruncatedNormal;
use crate::seeding;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Input representation for generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthMode {
    /// RGB images of `size` x `size` pixels, written as PNG files.
    Image { size: usize },
    /// Inline feature vectors of `dim` columns.
    Vector { dim: usize },
}

/// True label centre as a function of the latent input `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanFn {
    /// `mu = 0.1 + 0.8 u`.
    Linear,
    /// `mu = 0.5 + 0.35 sin(2 pi u)`.
    Sine,
    /// `mu = value` for every sample.
    Constant { value: f64 },
}

impl Default for MeanFn {
    fn default() -> Self {
        MeanFn::Linear
    }
}

impl MeanFn {
    pub fn mean(&self, u: f64) -> f64 {
        match self {
            MeanFn::Linear => 0.1 + 0.8 * u,
            MeanFn::Sine => 0.5 + 0.35 * (std::f64::consts::TAU * u).sin(),
            MeanFn::Constant { value } => *value,
        }
    }
}

/// True noise scale as a function of the label centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaFn {
    /// The same `sigma` everywhere (homoscedastic).
    Constant { value: f64 },
    /// `sigma` rises linearly from `lo` (at mu = 0.1) to `hi`
    /// (at mu = 0.9), so slippery-end samples are noisier.
    MeanScaled { lo: f64, hi: f64 },
}

impl Default for SigmaFn {
    fn default() -> Self {
        SigmaFn::Constant { value: 0.05 }
    }
}

impl SigmaFn {
    /// Noise level in [0, 1]: where between the spec's smallest and
    /// largest sigma this sample sits. Also rendered as image channel 1.
    pub fn level(&self, mu: f64) -> f64 {
        match self {
            SigmaFn::Constant { .. } => 0.5,
            SigmaFn::MeanScaled { .. } => ((mu - 0.1) / 0.8).clamp(0.0, 1.0),
        }
    }

    pub fn sigma(&self, mu: f64) -> f64 {
        match self {
            SigmaFn::Constant { value } => *value,
            SigmaFn::MeanScaled { lo, hi } => lo + (hi - lo) * self.level(mu),
        }
    }
}

fn default_groups() -> usize {
    12
}
fn default_group_gain() -> f64 {
    0.15
}
fn default_group_offset() -> f64 {
    0.08
}
fn default_pixel_noise() -> f64 {
    0.02
}

/// Everything that defines a synthetic dataset except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of samples.
    pub n: usize,
    pub mode: SynthMode,
    #[serde(default)]
    pub mean_function: MeanFn,
    #[serde(default)]
    pub sigma_function: SigmaFn,
    /// Number of contiguous group blocks.
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Half-width of the per-group multiplicative distortion on channel
    /// 0: gains are drawn from `1 ± group_gain`.
    #[serde(default = "default_group_gain")]
    pub group_gain: f64,
    /// Half-width of the per-group additive distortion on channel 0.
    #[serde(default = "default_group_offset")]
    pub group_offset: f64,
    /// Standard deviation of the additive noise on every pixel or
    /// feature.
    #[serde(default = "default_pixel_noise")]
    pub pixel_noise: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        // n = 0 is allowed: it generates an empty-but-valid dataset.
        match self.mode {
            SynthMode::Image { size } => {
                if !(4..=4096).contains(&size) {
                    return Err(Error::config(format!(
                        "synthetic image size {size} outside [4, 4096]"
                    )));
                }
            }
            SynthMode::Vector { dim } => {
                if dim == 0 {
                    return Err(Error::config("synthetic vector dim must be >= 1"));
                }
            }
        }
        if let MeanFn::Constant { value } = self.mean_function {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::config(format!(
                    "constant mean {value} outside [0, 1]"
                )));
            }
        }
        let (lo, hi) = match self.sigma_function {
            SigmaFn::Constant { value } => (value, value),
            SigmaFn::MeanScaled { lo, hi } => (lo, hi),
        };
        if !(lo > 0.0 && hi >= lo && hi <= 0.5) {
            return Err(Error::config(format!(
                "sigma range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 0.5"
            )));
        }
        if self.groups == 0 {
            return Err(Error::config("synthetic spec needs at least one group"));
        }
        if !(0.0..1.0).contains(&self.group_gain) {
            return Err(Error::config(format!(
                "group_gain {} outside [0, 1)",
                self.group_gain
            )));
        }
        if !(0.0..=0.5).contains(&self.group_offset) {
            return Err(Error::config(format!(
                "group_offset {} outside [0, 0.5]",
                self.group_offset
            )));
        }
        if !(0.0..=1.0).contains(&self.pixel_noise) {
            return Err(Error::config(format!(
                "pixel_noise {} outside [0, 1]",
                self.pixel_noise
            )));
        }
        Ok(())
    }
}

/// True generator parameters persisted next to the manifest, indexed by
/// sample (and, for the distortions, by group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    pub seed: u64,
    /// Latent input u per sample.
    pub latent: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Multiplicative channel-0 distortion per group.
    pub group_gain: Vec<f64>,
    /// Additive channel-0 distortion per group.
    pub group_offset: Vec<f64>,
}

/// Where the true-parameter sidecar lives for a given manifest path:
/// `manifest.csv` gets `manifest.truth.json` beside it.
pub fn truth_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("synthetic");
    manifest.with_file_name(format!("{stem}.truth.json"))
}

fn group_of(i: usize, n: usize, groups: usize) -> usize {
    (i * groups / n).min(groups - 1)
}

/// Draws labels and true parameters without touching the filesystem.
/// Record inputs are image paths (`images/sample00000.png`, relative to
/// the manifest) or inline feature vectors, matching the spec's mode.
pub fn plan_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<SampleRecord>, SyntheticTruth)> {
    spec.validate()?;
    let mut rng = seeding::rng_for(seed, "groups");
    let mut gains = Vec::with_capacity(spec.groups);
    let mut offsets = Vec::with_capacity(spec.groups);
    for _ in 0..spec.groups {
        gains.push(1.0 + spec.group_gain * (2.0 * seeding::unit_open(&mut rng) - 1.0));
        offsets.push(spec.group_offset * (2.0 * seeding::unit_open(&mut rng) - 1.0));
    }

    let mut latent = Vec::with_capacity(spec.n);
    let mut mus = Vec::with_capacity(spec.n);
    let mut sigmas = Vec::with_capacity(spec.n);
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut input_rng = seeding::rng_for(seed, &format!("input/{i}"));
        let u = seeding::unit_open(&mut input_rng);
        let mu = spec.mean_function.mean(u);
        let sigma = spec.sigma_function.sigma(mu);
        let label = TruncatedNormal::new(mu, sigma, 0.0, 1.0)?
            .sample(1, seeding::subseed(seed, &format!("label/{i}")))[0];
        let g = group_of(i, spec.n, spec.groups);

        let input = match spec.mode {
            SynthMode::Image { .. } => SampleInput::ImagePath(format!("images/sample{i:05}.png")),
            SynthMode::Vector { dim } => {
                let mut feat_rng = seeding::rng_for(seed, &format!("features/{i}"));
                let mut noise = |base: f64| {
                    base + spec.pixel_noise * seeding::standard_normal(&mut feat_rng)
                };
                let signature = (g as f64 + 0.5) / spec.groups as f64;
                let level = spec.sigma_function.level(mu);
                let mut feats = vec![noise(u), noise(level), noise(signature)];
                feats.truncate(dim);
                while feats.len() < dim {
                    feats.push(seeding::standard_normal(&mut feat_rng));
                }
                SampleInput::Features(feats)
            }
        };
        records.push(SampleRecord {
            input,
            friction_factor: label,
            group_id: format!("g{g:03}"),
            timestamp: None,
        });
        latent.push(u);
        mus.push(mu);
        sigmas.push(sigma);
    }

    let truth = SyntheticTruth {
        spec: spec.clone(),
        seed,
        latent,
        mu: mus,
        sigma: sigmas,
        group_gain: gains,
        group_offset: offsets,
    };
    Ok((records, truth))
}

/// Renders the image for sample `i` of a planned dataset.
pub fn render_image(truth: &SyntheticTruth, i: usize) -> Result<ImageF32> {
    let size = match truth.spec.mode {
        SynthMode::Image { size } => size,
        SynthMode::Vector { .. } => {
            return Err(Error::config("cannot render images for a vector-mode spec"))
        }
    };
    if i >= truth.spec.n {
        return Err(Error::config(format!(
            "sample index {i} out of range for n = {}",
            truth.spec.n
        )));
    }
    let u = truth.latent[i];
    let g = group_of(i, truth.spec.n, truth.spec.groups);
    let gain = truth.group_gain[g];
    let offset = truth.group_offset[g];
    let level = truth.spec.sigma_function.level(truth.mu[i]);
    let signature = (g as f64 + 0.5) / truth.spec.groups as f64;

    let mut rng = seeding::rng_for(truth.seed, &format!("pixels/{i}"));
    let mut img = ImageF32::constant(size, size, [0.0; 3])?;
    for y in 0..size {
        for x in 0..size {
            let xf = x as f64 / (size - 1).max(1) as f64;
            // Keep the ramp inside [0, 1] even at the distortion
            // extremes so clipping never erases the signal.
            let ramp = 0.3 + 0.4 * (u + 0.25 * (xf - 0.5));
            let noise = truth.spec.pixel_noise;
            let v0 = gain * ramp + offset + noise * seeding::standard_normal(&mut rng);
            let v1 = level + noise * seeding::standard_normal(&mut rng);
            let v2 = signature + noise * seeding::standard_normal(&mut rng);
            img.set_pixel(
                x,
                y,
                [
                    v0.clamp(0.0, 1.0) as f32,
                    v1.clamp(0.0, 1.0) as f32,
                    v2.clamp(0.0, 1.0) as f32,
                ],
            );
        }
    }
    Ok(img)
}

/// Generates a synthetic dataset on disk: manifest, true-parameter
/// sidecar, and (in image mode) a PNG per sample under `images/` next
/// to the manifest. Returns the manifest records.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
    manifest: impl AsRef<Path>,
) -> Result<Vec<SampleRecord>> {
    let manifest = manifest.as_ref();
    let (records, truth) = plan_synthetic(spec, seed)?;

    let dir = manifest.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("cannot create {}: {e}", dir.display())))?;
    }
    if let SynthMode::Image { .. } = spec.mode {
        let images = match dir {
            Some(d) => d.join("images"),
            None => PathBuf::from("images"),
        };
        std::fs::create_dir_all(&images)
            .map_err(|e| Error::io(format!("cannot create {}: {e}", images.display())))?;
        for (i, record) in records.iter().enumerate() {
            let rel = match &record.input {
                SampleInput::ImagePath(p) => p,
                SampleInput::Features(_) => unreachable!("image mode produces paths"),
            };
            let path = match dir {
                Some(d) => d.join(rel),
                None => PathBuf::from(rel),
            };
            render_image(&truth, i)?.save_png(path)?;
        }
    }

    write_manifest(&records, manifest)?;
    let sidecar = truth_path(manifest);
    let json = serde_json::to_string_pretty(&truth)
        .map_err(|e| Error::io(format!("cannot encode truth sidecar: {e}")))?;
    std::fs::write(&sidecar, json)
        .map_err(|e| Error::io(format!("cannot write {}: {e}", sidecar.display())))?;
    Ok(records)
}

/// Reads a true-parameter sidecar back.
pub fn read_truth(path: impl AsRef<Path>) -> Result<SyntheticTruth> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("malformed truth sidecar {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_manifest;

    fn vector_spec(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            n,
            mode: SynthMode::Vector { dim: 4 },
            mean_function: MeanFn::Linear,
            sigma_function: SigmaFn::Constant { value: 0.05 },
            groups: 6,
            group_gain: 0.1,
            group_offset: 0.05,
            pixel_noise: 0.02,
        }
    }

    #[test]
    fn near_zero_sigma_collapses_labels_onto_the_mean() {
        let spec = SyntheticSpec {
            sigma_function: SigmaFn::Constant { value: 1e-4 },
            ..vector_spec(200)
        };
        let (records, truth) = plan_synthetic(&spec, 11).unwrap();
        for (r, mu) in records.iter().zip(&truth.mu) {
            assert!(
                (r.friction_factor - mu).abs() <= 1e-3,
                "label {} strayed from mu {mu}",
                r.friction_factor
            );
        }
    }

    #[test]
    fn labels_stay_inside_the_unit_interval() {
        let spec = SyntheticSpec {
            sigma_function: SigmaFn::MeanScaled { lo: 0.2, hi: 0.5 },
            ..vector_spec(2000)
        };
        let (records, _) = plan_synthetic(&spec, 5).unwrap();
        assert!(records.iter().all(|r| (0.0..=1.0).contains(&r.friction_factor)));
        // Wide noise near the edges actually exercises the truncation.
        assert!(records.iter().any(|r| r.friction_factor < 0.1));
        assert!(records.iter().any(|r| r.friction_factor > 0.9));
    }

    /// Independent Monte Carlo oracle: at a fixed latent input the label
    /// moments must match a from-scratch numerical integration of the
    /// truncated-normal density (no library code shared with the
    /// generator's sampler beyond the RNG).
    #[test]
    fn label_moments_match_numerical_integration_at_fixed_input() {
        let n = 100_000;
        let mu = 0.5;
        let sigma = 0.05;
        let spec = SyntheticSpec {
            mean_function: MeanFn::Constant { value: mu },
            sigma_function: SigmaFn::Constant { value: sigma },
            ..vector_spec(n)
        };
        let (records, _) = plan_synthetic(&spec, 99).unwrap();
        let labels: Vec<f64> = records.iter().map(|r| r.friction_factor).collect();

        // Simpson integration of the unnormalised density on [0, 1].
        let steps = 20_000usize;
        let h = 1.0 / steps as f64;
        let density = |x: f64| (-((x - mu) / sigma).powi(2) / 2.0).exp();
        let mut z = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for k in 0..=steps {
            let x = k as f64 * h;
            let w = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let d = w * density(x);
            z += d;
            m1 += d * x;
            m2 += d * x * x;
        }
        let true_mean = m1 / z;
        let true_std = (m2 / z - true_mean * true_mean).sqrt();

        let mean = labels.iter().sum::<f64>() / n as f64;
        let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();

        let se_mean = true_std / (n as f64).sqrt();
        let se_std = true_std / (2.0 * (n as f64 - 1.0)).sqrt();
        assert!(
            (mean - true_mean).abs() <= 3.0 * se_mean,
            "mean {mean} vs {true_mean} (3 SE = {})",
            3.0 * se_mean
        );
        assert!(
            (std - true_std).abs() <= 3.0 * se_std,
            "std {std} vs {true_std} (3 SE = {})",
            3.0 * se_std
        );
    }

    #[test]
    fn groups_come_in_contiguous_blocks() {
        let (records, _) = plan_synthetic(&vector_spec(60), 1).unwrap();
        let ids: Vec<&str> = records.iter().map(|r| r.group_id.as_str()).collect();
        // 60 samples, 6 groups: exactly 10 per block, never interleaved.
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(*id, format!("g{:03}", i / 10));
        }
    }

    #[test]
    fn image_datasets_regenerate_bit_identically() {
        let spec = SyntheticSpec {
            n: 6,
            mode: SynthMode::Image { size: 16 },
            groups: 3,
            ..vector_spec(6)
        };
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a/manifest.csv");
        let b = dir.path().join("b/manifest.csv");
        let records_a = generate_synthetic(&spec, 123, &a).unwrap();
        let records_b = generate_synthetic(&spec, 123, &b).unwrap();
        assert_eq!(records_a, records_b);
        assert_eq!(
            std::fs::read(&a).unwrap(),
            std::fs::read(&b).unwrap(),
            "manifests must be byte-identical"
        );
        assert_eq!(
            std::fs::read(truth_path(&a)).unwrap(),
            std::fs::read(truth_path(&b)).unwrap(),
            "sidecars must be byte-identical"
        );
        for i in 0..spec.n {
            let name = format!("images/sample{i:05}.png");
            assert_eq!(
                std::fs::read(a.parent().unwrap().join(&name)).unwrap(),
                std::fs::read(b.parent().unwrap().join(&name)).unwrap(),
                "{name} must be byte-identical"
            );
        }
        // A different seed must actually change the data.
        let c = dir.path().join("c/manifest.csv");
        let records_c = generate_synthetic(&spec, 124, &c).unwrap();
        assert_ne!(records_a, records_c);
    }

    #[test]
    fn written_dataset_reads_back_and_truth_aligns() {
        let spec = vector_spec(40);
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.csv");
        let written = generate_synthetic(&spec, 7, &manifest).unwrap();
        let read = read_manifest(&manifest).unwrap();
        assert_eq!(written, read);
        let truth = read_truth(truth_path(&manifest)).unwrap();
        assert_eq!(truth.spec, spec);
        assert_eq!(truth.mu.len(), 40);
        assert_eq!(truth.sigma.len(), 40);
        assert_eq!(truth.group_gain.len(), spec.groups);
        // Labels scatter around their mus at the constant-sigma scale.
        let spread: f64 = written
            .iter()
            .zip(&truth.mu)
            .map(|(r, mu)| (r.friction_factor - mu).abs())
            .sum::<f64>()
            / 40.0;
        assert!(spread > 0.005 && spread < 0.15, "spread {spread}");
    }

    #[test]
    fn rendered_images_encode_the_latent_input() {
        let spec = SyntheticSpec {
            n: 8,
            mode: SynthMode::Image { size: 24 },
            groups: 2,
            group_gain: 0.0,
            group_offset: 0.0,
            pixel_noise: 0.0,
            ..vector_spec(8)
        };
        let (_, truth) = plan_synthetic(&spec, 3).unwrap();
        for i in 0..spec.n {
            let img = render_image(&truth, i).unwrap();
            // Channel-0 average recovers 0.3 + 0.4 u without distortion.
            let mut sum = 0.0;
            for y in 0..24 {
                for x in 0..24 {
                    sum += img.pixel(x, y)[0] as f64;
                }
            }
            let mean0 = sum / (24.0 * 24.0);
            let expected = 0.3 + 0.4 * truth.latent[i];
            assert!(
                (mean0 - expected).abs() < 1e-3,
                "sample {i}: channel-0 mean {mean0} vs expected {expected}"
            );
        }
        // Vector-mode truths refuse to render.
        let (_, vec_truth) = plan_synthetic(&vector_spec(4), 3).unwrap();
        assert!(render_image(&vec_truth, 0).is_err());
    }

    #[test]
    fn spec_json_round_trips_and_rejects_unknown_keys() {
        let text = r#"{
            "n": 100,
            "mode": {"image": {"size": 64}},
            "sigma_function": {"mean_scaled": {"lo": 0.03, "hi": 0.18}}
        }"#;
        let spec: SyntheticSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.mean_function, MeanFn::Linear);
        assert_eq!(spec.groups, 12);
        assert_eq!(spec.sigma_function, SigmaFn::MeanScaled { lo: 0.03, hi: 0.18 });
        let back: SyntheticSpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);

        let bad = r#"{"n": 10, "mode": {"vector": {"dim": 3}}, "sigma_fn": "x"}"#;
        assert!(serde_json::from_str::<SyntheticSpec>(bad).is_err());
        let bad_mode = r#"{"n": 10, "mode": {"image": {"size": 64, "depth": 3}}}"#;
        assert!(serde_json::from_str::<SyntheticSpec>(bad_mode).is_err());
    }

    #[test]
    fn empty_spec_generates_an_empty_dataset() {
        let (records, truth) = plan_synthetic(&vector_spec(0), 0).unwrap();
        assert!(records.is_empty());
        assert!(truth.mu.is_empty());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_sigma = SyntheticSpec {
            sigma_function: SigmaFn::Constant { value: 0.0 },
            ..vector_spec(10)
        };
        assert!(plan_synthetic(&bad_sigma, 0).is_err());
        let bad_size = SyntheticSpec {
            mode: SynthMode::Image { size: 2 },
            ..vector_spec(10)
        };
        assert!(plan_synthetic(&bad_size, 0).is_err());
        let bad_mean = SyntheticSpec {
            mean_function: MeanFn::Constant { value: 1.5 },
            ..vector_spec(10)
        };
        assert!(plan_synthetic(&bad_mean, 0).is_err());
    }
}
