//! The synthetic benchmark generator: plan a dataset in memory, check
//! that its noise really grows with the label, write an image dataset
//! to disk with its true-parameter sidecar, and split it by group.
//!
//! ```text
//! cargo run --example synthetic_data
//! ```

use gripnet::data::synth::{
    generate_synthetic, plan_synthetic, read_truth, truth_path, MeanFn, SigmaFn, SynthMode,
    SyntheticSpec,
};
use gripnet::data::{read_manifest, split, SampleInput};
use gripnet::Result;

fn main() -> Result<()> {
    // -----------------------------------------------------------------
    // Plan a vector-mode dataset in memory. Each sample's features carry
    // a noisy copy of the latent input, the local noise level, and the
    // group signature; the label is drawn from a bounded distribution
    // whose spread depends on where the sample sits.
    // -----------------------------------------------------------------
    let spec = SyntheticSpec {
        n: 6000,
        mode: SynthMode::Vector { dim: 4 },
        mean_function: MeanFn::Linear,
        sigma_function: SigmaFn::MeanScaled { lo: 0.02, hi: 0.20 },
        groups: 12,
        group_gain: 0.15,
        group_offset: 0.08,
        pixel_noise: 0.02,
    };
    let (records, truth) = plan_synthetic(&spec, 42)?;
    println!("planned {} vector samples in {} groups", records.len(), spec.groups);
    for r in records.iter().take(3) {
        let SampleInput::Features(f) = &r.input else { unreachable!() };
        println!(
            "  label {:.4}  group {}  features [{:.3}, {:.3}, {:.3}, {:.3}]",
            r.friction_factor, r.group_id, f[0], f[1], f[2], f[3]
        );
    }

    // The sidecar records the true centre and spread behind every label,
    // so calibration can be checked against the generator itself. Bucket
    // the samples by true centre: the residual scatter should track the
    // true spread, small on the left and wide on the right.
    println!("\nheteroscedastic structure (residual scatter vs true spread):");
    for (name, lo, hi) in [("low", 0.0, 0.4), ("mid", 0.4, 0.7), ("high", 0.7, 1.0)] {
        let mut residuals = Vec::new();
        let mut sigma_sum = 0.0;
        for i in 0..spec.n {
            if truth.mu[i] >= lo && truth.mu[i] < hi {
                residuals.push(records[i].friction_factor - truth.mu[i]);
                sigma_sum += truth.sigma[i];
            }
        }
        let n = residuals.len() as f64;
        let var = residuals.iter().map(|r| r * r).sum::<f64>() / n;
        println!(
            "  {name:>4} centres: empirical std {:.4}, mean true spread {:.4} ({} samples)",
            var.sqrt(),
            sigma_sum / n,
            residuals.len()
        );
    }

    // -----------------------------------------------------------------
    // Image mode writes PNGs under images/ next to the manifest, plus a
    // sidecar with the true parameters. Datasets must therefore live in
    // separate directories: generating a second dataset next to the same
    // manifest would overwrite the first one's pixels.
    // -----------------------------------------------------------------
    let dir = tempfile::tempdir().expect("temp directory");
    let manifest = dir.path().join("dataset/manifest.json");
    let image_spec = SyntheticSpec {
        n: 48,
        mode: SynthMode::Image { size: 32 },
        ..spec.clone()
    };
    let written = generate_synthetic(&image_spec, 7, &manifest)?;
    let reread = read_manifest(&manifest)?;
    let sidecar = read_truth(truth_path(&manifest))?;
    println!(
        "\nwrote {} images next to {}; manifest rereads {} records, sidecar holds {} true centres",
        written.len(),
        manifest.display(),
        reread.len(),
        sidecar.mu.len()
    );

    // -----------------------------------------------------------------
    // The group-aware split: 70/15/15 by count, and no group ever spans
    // two partitions, so evaluation always happens on unseen groups.
    // -----------------------------------------------------------------
    let (train, val, test) = split(&records, (0.7, 0.15, 0.15), 1)?;
    let groups = |part: &[gripnet::data::SampleRecord]| -> std::collections::BTreeSet<String> {
        part.iter().map(|r| r.group_id.clone()).collect()
    };
    let (gt, gv, gs) = (groups(&train), groups(&val), groups(&test));
    println!(
        "\nsplit {} / {} / {} samples, groups {:?} / {:?} / {:?}",
        train.len(),
        val.len(),
        test.len(),
        gt.len(),
        gv.len(),
        gs.len()
    );
    assert!(gt.is_disjoint(&gv) && gt.is_disjoint(&gs) && gv.is_disjoint(&gs));
    println!("no group appears in two partitions");
    Ok(())
}
