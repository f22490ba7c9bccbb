//! Dataset handling: label normalisation, manifest files, group-aware
//! splitting, image preprocessing, and the synthetic benchmark
//! generator.
//!
//! A dataset is a CSV manifest whose rows either point at image files
//! (`path,friction_factor,group_id,timestamp`) or carry feature vectors
//! inline (`f0..fk,friction_factor,group_id,timestamp`). Labels are
//! stored already normalised to [0, 1]. Every record names a group
//! (location/date key), and splitting assigns whole groups to
//! partitions so nothing leaks across train/val/test.

pub mod bev;
pub mod synth;

pub use bev::{bev_warp, resize_bilinear, BevCrop, ImageF32};

use crate::error::{Error, Result};
use crate::seeding;
use std::path::Path;

/// Raw grip-factor range reported by the optical sensor.
pub const RAW_GRIP_MIN: f64 = 0.09;
pub const RAW_GRIP_MAX: f64 = 0.82;

/// Maps a raw sensor grip factor onto the [0, 1] friction-factor label:
/// linear over the sensor's native range, clamped outside it.
///
/// This is a map, not a projection: feeding an already-normalised value
/// back in shifts it again (only the clamp ends 0 and 1 are fixed
/// points).
pub fn normalize_grip(raw: f64) -> f64 {
    ((raw - RAW_GRIP_MIN) / (RAW_GRIP_MAX - RAW_GRIP_MIN)).clamp(0.0, 1.0)
}

/// What a sample's input is: an image on disk or an inline feature
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    /// Image path as written in the manifest, typically relative to the
    /// manifest's directory.
    ImagePath(String),
    Features(Vec<f64>),
}

/// One labelled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub input: SampleInput,
    /// Normalised friction factor in [0, 1].
    pub friction_factor: f64,
    /// Location/date key; splitting never separates a group.
    pub group_id: String,
    pub timestamp: Option<String>,
}

impl SampleRecord {
    fn validate(&self, row: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.friction_factor) || !self.friction_factor.is_finite() {
            return Err(Error::data(format!(
                "manifest row {row}: friction_factor {} outside [0, 1]",
                self.friction_factor
            )));
        }
        if self.group_id.is_empty() {
            return Err(Error::data(format!("manifest row {row}: empty group_id")));
        }
        if let SampleInput::Features(f) = &self.input {
            if let Some(bad) = f.iter().find(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "manifest row {row}: non-finite feature value {bad}"
                )));
            }
        }
        Ok(())
    }
}

/// Reads a manifest, accepting either the image or the feature-vector
/// column layout. Row numbers in errors count the header as row 1.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open manifest {}: {e}", path.display())))?;
    let headers: Vec<String> =
        reader.headers().map_err(|e| Error::data(format!("manifest header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();

    let feature_cols = headers.iter().take_while(|h| {
        h.starts_with('f') && h[1..].parse::<usize>().is_ok()
    }).count();
    let image_mode = headers.first().map(String::as_str) == Some("path");
    if !image_mode && feature_cols == 0 {
        return Err(Error::data(format!(
            "manifest must start with a \"path\" column or \"f0..fk\" feature columns, found {headers:?}"
        )));
    }

    let expect: Vec<&str> = if image_mode { vec!["path"] } else { vec![] };
    let mut expected: Vec<String> = expect.into_iter().map(str::to_owned).collect();
    if !image_mode {
        expected.extend((0..feature_cols).map(|i| format!("f{i}")));
    }
    expected.extend(["friction_factor".to_owned(), "group_id".to_owned(), "timestamp".to_owned()]);
    if headers != expected {
        return Err(Error::data(format!(
            "manifest columns must be {expected:?}, found {headers:?}"
        )));
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| Error::data(format!("manifest row {row_no}: {e}")))?;
        let field = |idx: usize| row.get(idx).unwrap_or("");
        let parse_f64 = |idx: usize, name: &str| -> Result<f64> {
            field(idx).trim().parse::<f64>().map_err(|_| {
                Error::data(format!(
                    "manifest row {row_no}: {name} value {:?} is not a number",
                    field(idx)
                ))
            })
        };
        let (input, base) = if image_mode {
            if field(0).is_empty() {
                return Err(Error::data(format!("manifest row {row_no}: empty path")));
            }
            (SampleInput::ImagePath(field(0).to_owned()), 1)
        } else {
            let mut feats = Vec::with_capacity(feature_cols);
            for c in 0..feature_cols {
                feats.push(parse_f64(c, &format!("f{c}"))?);
            }
            (SampleInput::Features(feats), feature_cols)
        };
        let record = SampleRecord {
            input,
            friction_factor: parse_f64(base, "friction_factor")?,
            group_id: field(base + 1).trim().to_owned(),
            timestamp: match field(base + 2) {
                "" => None,
                t => Some(t.to_owned()),
            },
        };
        record.validate(row_no)?;
        records.push(record);
    }
    Ok(records)
}

/// Writes a manifest. All records must share one input kind; an empty
/// record list writes an image-layout header.
pub fn write_manifest(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let feature_cols = match records.first() {
        Some(SampleRecord { input: SampleInput::Features(f), .. }) => Some(f.len()),
        _ => None,
    };
    for (i, r) in records.iter().enumerate() {
        r.validate(i + 2)?;
        let consistent = match (&r.input, feature_cols) {
            (SampleInput::ImagePath(_), None) => true,
            (SampleInput::Features(f), Some(k)) => f.len() == k,
            _ => false,
        };
        if !consistent {
            return Err(Error::data(format!(
                "manifest row {}: records mix image and feature inputs or feature widths",
                i + 2
            )));
        }
    }

    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::data(format!("cannot create manifest {}: {e}", path.display())))?;
    let mut header: Vec<String> = match feature_cols {
        None => vec!["path".to_owned()],
        Some(k) => (0..k).map(|i| format!("f{i}")).collect(),
    };
    header.extend(["friction_factor".to_owned(), "group_id".to_owned(), "timestamp".to_owned()]);
    writer.write_record(&header).map_err(|e| Error::data(format!("manifest write: {e}")))?;
    for r in records {
        let mut row: Vec<String> = match &r.input {
            SampleInput::ImagePath(p) => vec![p.clone()],
            SampleInput::Features(f) => f.iter().map(|v| format!("{v}")).collect(),
        };
        row.push(format!("{}", r.friction_factor));
        row.push(r.group_id.clone());
        row.push(r.timestamp.clone().unwrap_or_default());
        writer.write_record(&row).map_err(|e| Error::data(format!("manifest write: {e}")))?;
    }
    writer.flush().map_err(|e| Error::data(format!("manifest write: {e}")))?;
    Ok(())
}

/// Splits records into train/val/test without separating any group.
///
/// Groups are shuffled by seed, stably ordered largest first, and each
/// is assigned to the partition whose sample-count deficit against its
/// target fraction is largest (ties prefer train, then val). Fractions
/// must be positive and sum to 1.
pub fn split(
    records: &[SampleRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>, Vec<SampleRecord>)> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be positive and sum to 1, found ({ft}, {fv}, {fs})"
        )));
    }
    let mut groups: Vec<(String, usize)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(g, _)| *g == r.group_id) {
            Some((_, n)) => *n += 1,
            None => groups.push((r.group_id.clone(), 1)),
        }
    }
    if groups.len() < 3 {
        return Err(Error::data(format!(
            "need at least 3 groups to split leak-free, found {}",
            groups.len()
        )));
    }
    // Deterministic base order, then a seeded shuffle, then a stable
    // size sort so equal-size groups keep their shuffled order.
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = seeding::rng_for(seed, "split");
    for i in (1..groups.len()).rev() {
        let j = (seeding::unit_open(&mut rng) * (i + 1) as f64) as usize;
        groups.swap(i, j.min(i));
    }
    groups.sort_by(|a, b| b.1.cmp(&a.1));

    let total = records.len() as f64;
    let targets = [ft * total, fv * total, fs * total];
    let mut assigned = [0usize; 3];
    let mut partition_of: Vec<(String, usize)> = Vec::with_capacity(groups.len());
    for (name, size) in groups {
        let deficits: Vec<f64> = (0..3).map(|p| targets[p] - assigned[p] as f64).collect();
        let best = (0..3)
            .max_by(|&a, &b| deficits[a].partial_cmp(&deficits[b]).expect("finite"))
            .expect("three partitions");
        assigned[best] += size;
        partition_of.push((name, best));
    }

    let mut out: [Vec<SampleRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for r in records {
        let p = partition_of
            .iter()
            .find(|(g, _)| *g == r.group_id)
            .expect("every group was assigned")
            .1;
        out[p].push(r.clone());
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}

/// Warps (or resizes) an image to a square of the network input size,
/// still in [0, 1]. Augmentation, if any, happens on this intermediate.
pub fn to_square(image: &ImageF32, crop: Option<&BevCrop>, target_size: usize) -> Result<ImageF32> {
    match crop {
        Some(c) => {
            // Warp straight to the network size: one resampling instead
            // of warp-then-resize.
            let direct = BevCrop { corners: c.corners, output_size: target_size };
            bev_warp(image, &direct)
        }
        None => resize_bilinear(image, target_size, target_size),
    }
}

/// Warps (or resizes) an image to the network input size and returns it
/// as planar `[3, target, target]` values in [0, 1], without
/// standardisation.
pub fn preprocess_raw(
    image: &ImageF32,
    crop: Option<&BevCrop>,
    target_size: usize,
) -> Result<Vec<f32>> {
    Ok(to_square(image, crop, target_size)?.to_chw())
}

/// Standardises planar channel data in place: `(x - mean[c]) / std[c]`.
pub fn standardize_chw(chw: &mut [f32], mean: &[f32], std: &[f32]) -> Result<()> {
    if mean.len() != std.len() || mean.is_empty() || chw.len() % mean.len() != 0 {
        return Err(Error::shape(format!(
            "channel statistics ({} mean, {} std) do not tile data of length {}",
            mean.len(),
            std.len(),
            chw.len()
        )));
    }
    if let Some(bad) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::numeric(format!(
            "channel std must be positive and finite, found {bad}"
        )));
    }
    if mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::numeric("channel mean must be finite"));
    }
    let plane = chw.len() / mean.len();
    for (c, chunk) in chw.chunks_exact_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - mean[c]) / std[c];
        }
    }
    Ok(())
}

/// Full preprocessing: bird's-eye warp (or plain resize), then
/// per-channel standardisation.
pub fn preprocess(
    image: &ImageF32,
    crop: Option<&BevCrop>,
    target_size: usize,
    mean: &[f32],
    std: &[f32],
) -> Result<Vec<f32>> {
    let mut chw = preprocess_raw(image, crop, target_size)?;
    standardize_chw(&mut chw, mean, std)?;
    Ok(chw)
}

/// Per-channel mean and standard deviation over a set of planar images
/// (the statistics the training split defines for standardisation).
/// Constant channels get a standard deviation of 1 so they standardise
/// to zero instead of dividing by zero.
pub fn channel_stats(images: &[Vec<f32>], channels: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    if images.is_empty() || channels == 0 {
        return Err(Error::data("channel statistics need at least one image"));
    }
    let mut sum = vec![0.0f64; channels];
    let mut sumsq = vec![0.0f64; channels];
    let mut count = vec![0.0f64; channels];
    for img in images {
        if img.len() % channels != 0 {
            return Err(Error::shape(format!(
                "image length {} is not divisible into {channels} channels",
                img.len()
            )));
        }
        let plane = img.len() / channels;
        for (c, chunk) in img.chunks_exact(plane).enumerate() {
            for &v in chunk {
                sum[c] += v as f64;
                sumsq[c] += (v as f64) * (v as f64);
            }
            count[c] += plane as f64;
        }
    }
    let mean: Vec<f32> = (0..channels).map(|c| (sum[c] / count[c]) as f32).collect();
    let std: Vec<f32> = (0..channels)
        .map(|c| {
            let m = sum[c] / count[c];
            let var = (sumsq[c] / count[c] - m * m).max(0.0);
            let s = var.sqrt() as f32;
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(group: &str, label: f64) -> SampleRecord {
        SampleRecord {
            input: SampleInput::ImagePath(format!("images/{group}_{label}.png")),
            friction_factor: label,
            group_id: group.to_owned(),
            timestamp: None,
        }
    }

    #[test]
    fn grip_normalisation_maps_the_sensor_range_onto_the_unit_interval() {
        assert!((normalize_grip(0.09) - 0.0).abs() < 1e-12);
        assert!((normalize_grip(0.82) - 1.0).abs() < 1e-12);
        assert!((normalize_grip(0.455) - 0.5).abs() < 1e-12);
        // Out-of-range sensor readings clamp rather than error.
        assert_eq!(normalize_grip(0.05), 0.0);
        assert_eq!(normalize_grip(0.9), 1.0);
        // Monotone over the native range.
        let mut prev = -1.0;
        for i in 0..=100 {
            let v = normalize_grip(0.09 + 0.73 * i as f64 / 100.0);
            assert!(v >= prev);
            prev = v;
        }
        // A map, not a projection: only the clamp ends are fixed points.
        let once = normalize_grip(0.5);
        assert!((normalize_grip(once) - once).abs() > 1e-3);
        assert_eq!(normalize_grip(normalize_grip(0.09)), 0.0);
    }

    #[test]
    fn image_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let records = vec![
            SampleRecord {
                input: SampleInput::ImagePath("images/a.png".into()),
                friction_factor: 0.25,
                group_id: "g0".into(),
                timestamp: Some("2021-03-01T10:00:00".into()),
            },
            record("g1", 0.75),
        ];
        write_manifest(&records, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn vector_manifest_round_trips_with_exact_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let records = vec![
            SampleRecord {
                input: SampleInput::Features(vec![0.1, -2.5, 1.0 / 3.0]),
                friction_factor: 0.123456789,
                group_id: "g0".into(),
                timestamp: None,
            },
            SampleRecord {
                input: SampleInput::Features(vec![0.0, 1.0, 2.0]),
                friction_factor: 1.0,
                group_id: "g1".into(),
                timestamp: None,
            },
        ];
        write_manifest(&records, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        write_manifest(&[], &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), Vec::new());
    }

    #[test]
    fn malformed_manifests_fail_with_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");

        std::fs::write(
            &path,
            "path,friction_factor,group_id,timestamp\nimages/a.png,0.5,g0,\nimages/b.png,1.5,g1,\n",
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("1.5"), "{err}");

        std::fs::write(&path, "path,friction_factor,timestamp\nimages/a.png,0.5,\n").unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("group_id"), "{err}");

        std::fs::write(
            &path,
            "path,friction_factor,group_id,timestamp\nimages/a.png,0.5,g0,\nimages/b.png,not-a-number,g1,\n",
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn split_keeps_groups_whole_and_near_target_fractions() {
        let mut records = Vec::new();
        for g in 0..10 {
            for i in 0..10 {
                records.push(record(&format!("g{g}"), 0.01 * (g * 10 + i) as f64));
            }
        }
        let (train, val, test) = split(&records, (0.70, 0.15, 0.15), 42).unwrap();
        let mut sizes = [train.len(), val.len(), test.len()];
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        assert_eq!(sizes[0], 70);
        sizes[1..].sort_unstable();
        assert_eq!(&sizes[1..], &[10, 20], "equal groups force a 20/10 or 10/20 tail");

        for (a, b) in [(&train, &val), (&train, &test), (&val, &test)] {
            for ra in a.iter() {
                assert!(
                    b.iter().all(|rb| rb.group_id != ra.group_id),
                    "group {} leaked across partitions",
                    ra.group_id
                );
            }
        }
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let mut records = Vec::new();
        for g in 0..12 {
            for i in 0..(4 + g % 5) {
                records.push(record(&format!("g{g}"), 0.01 * i as f64));
            }
        }
        let a = split(&records, (0.70, 0.15, 0.15), 7).unwrap();
        let b = split(&records, (0.70, 0.15, 0.15), 7).unwrap();
        assert_eq!(a, b);
        let c = split(&records, (0.70, 0.15, 0.15), 8).unwrap();
        let same = a.0 == c.0 && a.1 == c.1 && a.2 == c.2;
        assert!(!same, "different seeds should reshuffle groups");
    }

    #[test]
    fn split_keeps_a_giant_group_in_one_partition() {
        let mut records = Vec::new();
        for i in 0..50 {
            records.push(record("giant", 0.01 * i as f64));
        }
        for g in 0..5 {
            records.push(record(&format!("small{g}"), 0.5));
        }
        let (train, val, test) = split(&records, (0.70, 0.15, 0.15), 3).unwrap();
        let homes = [&train, &val, &test]
            .iter()
            .filter(|p| p.iter().any(|r| r.group_id == "giant"))
            .count();
        assert_eq!(homes, 1, "the giant group must land wholly in one partition");
        assert_eq!(train.iter().filter(|r| r.group_id == "giant").count(), 50);
    }

    #[test]
    fn split_rejects_too_few_groups_and_bad_fractions() {
        let records = vec![record("a", 0.1), record("b", 0.2)];
        assert!(split(&records, (0.70, 0.15, 0.15), 0).is_err());
        let records3 = vec![record("a", 0.1), record("b", 0.2), record("c", 0.3)];
        assert!(split(&records3, (0.5, 0.25, 0.35), 0).is_err());
        assert!(split(&records3, (1.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn preprocessing_standardises_and_stays_deterministic() {
        let img = ImageF32::constant(8, 8, [0.5, 0.25, 1.0]).unwrap();
        // Identity statistics leave the values alone.
        let plain = preprocess(&img, None, 8, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(&plain[..3], &[0.5, 0.5, 0.5]);
        // A constant image equal to the mean becomes all zeros.
        let zeroed = preprocess(&img, None, 8, &[0.5, 0.25, 1.0], &[2.0; 3]).unwrap();
        assert!(zeroed.iter().all(|&v| v == 0.0));
        // Bit-identical across calls.
        let again = preprocess(&img, None, 8, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(plain, again);
        // Zero std is rejected.
        assert!(preprocess(&img, None, 8, &[0.0; 3], &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn channel_statistics_match_hand_computation() {
        // Two 1x2 images, channel planes of length 2.
        let images = vec![vec![0.0, 1.0, 2.0, 2.0, 4.0, 4.0], vec![1.0, 2.0, 2.0, 2.0, 4.0, 4.0]];
        let (mean, std) = channel_stats(&images, 3).unwrap();
        assert_eq!(mean, vec![1.0, 2.0, 4.0]);
        let expected = (((0.0f64 - 1.0).powi(2) + 0.0 + 0.0 + 1.0) / 4.0).sqrt() as f32;
        assert!((std[0] - expected).abs() < 1e-6);
        assert_eq!(std[2], 1.0, "constant channel gets unit std");
    }
}
