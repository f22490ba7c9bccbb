//! Command-line front door over the library: dataset synthesis, model
//! training, evaluation, single-image prediction, and architecture
//! inspection.
//!
//! Every command is deterministic given its flags plus a seed, emits
//! machine-readable output (JSON reports on stdout, line-delimited JSON
//! training logs), and maps failures onto the documented exit codes:
//! 0 success, 1 usage or configuration error, 2 data error, 3 numeric
//! failure. The seed is taken from `--seed` where the command has one,
//! then from the run configuration, then from the `GRIPNET_SEED`
//! environment variable, and defaults to 0.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::data::synth::{generate_synthetic, truth_path, SyntheticSpec};
use crate::data::{read_manifest, to_square, BevCrop, ImageF32};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalMode};
use crate::model::{self, Model, ModelConfig};
use crate::probdist::TruncatedNormal;
use crate::train::{self, AugmentConfig, EpochLog, ImageSet, RunSeed, StageConfig, StageOverrides};

/// One JSON document collecting everything a training run needs beyond
/// its command-line flags. Every key is optional; unknown keys are
/// rejected so typos fail fast instead of silently training with
/// defaults.
///
/// `model` is a patch over a scale preset (`"scale_preset": "tiny"`
/// selects the desk-scale base), and the stage sections are patches over
/// the built-in stage schedules. The `joint` section configures the
/// single-stage ablation and patches the stage-2 schedule. Paths given
/// here act as defaults; the corresponding flags win when both are
/// present.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    pub stage1: StageOverrides,
    pub stage2: StageOverrides,
    pub joint: StageOverrides,
    pub augment: Option<AugmentConfig>,
    pub crop: Option<BevCrop>,
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(
    name = "gripnet",
    version,
    about = "Probabilistic road-grip regression: synthetic data, two-stage training, \
             interval evaluation, prediction, and architecture inspection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known-truth JSON sidecar
    Synth(SynthArgs),
    /// Train a model (stage 1 point fit, then stage 2 interval fit)
    Train(TrainArgs),
    /// Score a trained model on a labelled manifest
    Eval(EvalArgs),
    /// Run one image through a trained model and print the forecast
    Predict(PredictArgs),
    /// Print parameter and FLOP counts for a model configuration
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON file describing the dataset to generate
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    /// Master seed (falls back to GRIPNET_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest path to write; images and the truth sidecar land next to it
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run configuration (model, stage1, stage2, joint, augment,
    /// crop, seed, and default paths); built-in defaults apply when absent
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Training manifest; wins over the config file's "manifest"
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Where to write the trained model; wins over the config file's "out"
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Held-out manifest scored once per epoch into the log
    #[arg(long, value_name = "FILE")]
    val_manifest: Option<PathBuf>,
    /// Run a single stage instead of the default stage 1 then stage 2
    #[arg(long, value_enum, value_name = "1|2|joint")]
    stage: Option<StageArg>,
    /// Start from an existing model file (required for --stage 2); its
    /// stored configuration replaces the config file's "model" section
    #[arg(long, value_name = "FILE")]
    init: Option<PathBuf>,
    /// Master seed (falls back to config "seed", GRIPNET_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Line-delimited JSON log path; defaults to the model path with
    /// extension "log.jsonl"
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    /// Ablation: leave the point estimate unbounded (no sigmoid)
    #[arg(long)]
    no_point_sigmoid: bool,
    /// Ablation: leave the spread estimate unbounded (no sigmoid)
    #[arg(long)]
    no_pi_sigmoid: bool,
    /// Ablation: disable dropout in the interval head
    #[arg(long)]
    no_dropout: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Trained model file
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Manifest of labelled samples to score
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// dist scores the predicted distributions; static scores fixed
    /// point-plus-or-minus-radius intervals fitted on validation errors
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Validation manifest whose 90th-percentile absolute error becomes
    /// the static interval radius (required in static mode)
    #[arg(long, value_name = "FILE")]
    val_manifest: Option<PathBuf>,
    /// Also write the report JSON to this file
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Bird's-eye-view crop JSON; the warp lands directly on the model's
    /// input size
    #[arg(long, value_name = "FILE")]
    crop: Option<PathBuf>,
    /// Forward-pass batch size
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Trained model file
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Input image (PNG or portable pixmap)
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Bird's-eye-view crop JSON applied before resizing
    #[arg(long, value_name = "FILE")]
    crop: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Model configuration JSON; defaults to the full-scale preset
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Dist,
    Static,
}

/// Parses the command line and runs the selected command, returning the
/// process exit code. Help and version requests exit 0; any other parse
/// failure is a usage error and exits 1.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec: SyntheticSpec = read_json(&args.spec)?;
    let seed = resolve_seed(args.seed, None)?;
    let records = generate_synthetic(&spec, seed, &args.out)?;
    print_json(&serde_json::json!({
        "manifest": args.out,
        "truth": truth_path(&args.out),
        "samples": records.len(),
        "seed": seed,
    }));
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(args.seed, run.seed)?;
    let manifest = args.manifest.clone().or_else(|| run.manifest.clone()).ok_or_else(|| {
        Error::config("no training manifest: pass --manifest or set \"manifest\" in the config file")
    })?;
    let out = args.out.clone().or_else(|| run.out.clone()).ok_or_else(|| {
        Error::config("no model output path: pass --out or set \"out\" in the config file")
    })?;
    let log_path = args
        .log
        .clone()
        .or_else(|| run.log.clone())
        .unwrap_or_else(|| default_log_path(&out));

    if args.stage == Some(StageArg::Two) && args.init.is_none() {
        return Err(Error::config(
            "--stage 2 trains only the interval head and needs --init pointing at a stage-1 model",
        ));
    }

    let mut model = match &args.init {
        Some(p) => {
            if run.model.is_some() {
                eprintln!(
                    "note: --init replaces the config file's \"model\" section with the \
                     loaded model's stored configuration"
                );
            }
            with_ablations(
                Model::load(p)?,
                args.no_point_sigmoid,
                args.no_pi_sigmoid,
                args.no_dropout,
            )?
        }
        None => {
            let mut cfg = run.model.clone().unwrap_or_else(ModelConfig::full);
            apply_ablation_flags(
                &mut cfg,
                args.no_point_sigmoid,
                args.no_pi_sigmoid,
                args.no_dropout,
            );
            Model::build(&cfg, seed)?
        }
    };

    let input_size = model.config().input_size;
    let train_set = load_set(&manifest, run.crop.as_ref(), input_size)?;
    let val_set = match &args.val_manifest {
        Some(vm) => Some(load_set(vm, run.crop.as_ref(), input_size)?),
        None => None,
    };

    let augment = run.augment.unwrap_or_default();
    let run_seed = RunSeed::new(seed);
    let mut logs: Vec<EpochLog> = Vec::new();
    let stages: &[&str] = match args.stage {
        None => {
            let s1 = run.stage1.apply(StageConfig::stage1());
            let s2 = run.stage2.apply(StageConfig::stage2());
            logs.extend(train::train_stage1(&mut model, &train_set, val_set.as_ref(), &s1, &augment, run_seed)?);
            logs.extend(train::train_stage2(&mut model, &train_set, val_set.as_ref(), &s2, &augment, run_seed)?);
            &["stage1", "stage2"]
        }
        Some(StageArg::One) => {
            let s1 = run.stage1.apply(StageConfig::stage1());
            logs.extend(train::train_stage1(&mut model, &train_set, val_set.as_ref(), &s1, &augment, run_seed)?);
            &["stage1"]
        }
        Some(StageArg::Two) => {
            let s2 = run.stage2.apply(StageConfig::stage2());
            logs.extend(train::train_stage2(&mut model, &train_set, val_set.as_ref(), &s2, &augment, run_seed)?);
            &["stage2"]
        }
        Some(StageArg::Joint) => {
            let joint = run.joint.apply(StageConfig::stage2());
            logs.extend(train::train_joint_ablation(&mut model, &train_set, val_set.as_ref(), &joint, &augment, run_seed)?);
            &["joint"]
        }
    };

    ensure_parent(&out)?;
    model.save(&out)?;
    write_logs(&log_path, &logs)?;

    print_json(&serde_json::json!({
        "model": out,
        "log": log_path,
        "content_hash": model.content_hash(),
        "stages": stages,
        "epochs": logs.len(),
        "final_train_loss": logs.last().map(|l| l.train_loss),
        "seed": seed,
    }));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let crop = read_crop(args.crop.as_ref())?;
    let set = load_set(&args.manifest, crop.as_ref(), model.config().input_size)?;
    let mut preds = train::predict(&model, &set, args.batch_size)?;

    let report = match args.mode {
        ModeArg::Dist => metrics::evaluate(&preds, set.labels(), EvalMode::Distributional)?,
        ModeArg::Static => {
            let vm = args.val_manifest.as_ref().ok_or_else(|| {
                Error::config(
                    "static mode fits its interval radius on validation errors: pass --val-manifest",
                )
            })?;
            let val_set = load_set(vm, crop.as_ref(), model.config().input_size)?;
            let val_preds = train::predict(&model, &val_set, args.batch_size)?;
            let abs_errors: Vec<f64> = val_preds
                .iter()
                .zip(val_set.labels())
                .map(|(p, y)| (p.point - y).abs())
                .collect();
            let radius = metrics::e90_threshold(&abs_errors)?;
            eprintln!("static interval radius (validation 90th-percentile error): {radius:.6}");
            for p in &mut preds {
                p.sigma = None;
            }
            metrics::evaluate(&preds, set.labels(), EvalMode::Static { radius })?
        }
    };

    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    if let Some(path) = &args.report {
        ensure_parent(path)?;
        std::fs::write(path, format!("{text}\n"))
            .map_err(|e| Error::io(format!("cannot write report {}: {e}", path.display())))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let looks_tabular = args
        .input
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if looks_tabular {
        return Err(Error::config(
            "predict consumes a single image (PNG or portable pixmap); the network has no \
             feature-vector input path",
        ));
    }
    let model = Model::load(&args.model)?;
    let crop = read_crop(args.crop.as_ref())?;
    let image = ImageF32::load(&args.input)?;
    let square = to_square(&image, crop.as_ref(), model.config().input_size)?;
    let set = ImageSet::from_parts(vec![square], vec![0.0])?;
    let pred = train::predict(&model, &set, 1)?.remove(0);
    let sigma = pred.sigma.expect("evaluation forward always produces a scale");
    let dist = TruncatedNormal::new(pred.point, sigma, 0.0, 1.0)?;
    let interval = dist.interval(metrics::COVERAGE)?;
    print_json(&serde_json::json!({
        "point": pred.point,
        "sigma": sigma,
        "interval": {
            "lo": interval.lo,
            "hi": interval.hi,
            "coverage_target": interval.coverage_target,
        },
    }));
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => ModelConfig::full(),
    };
    let parameters = model::param_count(&cfg)?;
    let flops = model::flop_estimate(&cfg)?;
    print_json(&serde_json::json!({
        "parameters": parameters,
        "flops": flops,
        "gflops": flops as f64 / 1e9,
    }));
    Ok(())
}

/// Resolves the master seed: explicit flag, then the config file, then
/// the `GRIPNET_SEED` environment variable, then 0. The environment is
/// consulted only when neither explicit source is present, and a set but
/// unparsable value is a configuration error rather than a silent 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if flag.is_some() || config.is_some() {
        return resolve_seed_from(flag, config, None);
    }
    match std::env::var("GRIPNET_SEED") {
        Ok(text) => resolve_seed_from(None, None, Some(&text)),
        Err(std::env::VarError::NotPresent) => resolve_seed_from(None, None, None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::config("GRIPNET_SEED is set but is not valid UTF-8"))
        }
    }
}

fn resolve_seed_from(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = config {
        return Ok(s);
    }
    match env {
        Some(text) => text.trim().parse().map_err(|_| {
            Error::config(format!(
                "GRIPNET_SEED is set to {text:?}, which does not parse as an unsigned integer"
            ))
        }),
        None => Ok(0),
    }
}

fn default_log_path(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

fn apply_ablation_flags(cfg: &mut ModelConfig, no_point_sigmoid: bool, no_pi_sigmoid: bool, no_dropout: bool) {
    if no_point_sigmoid {
        cfg.point_sigmoid = false;
    }
    if no_pi_sigmoid {
        cfg.pi_sigmoid = false;
    }
    if no_dropout {
        cfg.dropout_p = 0.0;
    }
}

/// Rebuilds a loaded model under ablation flags. The flags change only
/// forward-pass behaviour (sigmoid bounding, dropout probability), never
/// tensor shapes, so every parameter and buffer transfers by name.
fn with_ablations(
    model: Model,
    no_point_sigmoid: bool,
    no_pi_sigmoid: bool,
    no_dropout: bool,
) -> Result<Model> {
    if !(no_point_sigmoid || no_pi_sigmoid || no_dropout) {
        return Ok(model);
    }
    let mut cfg = model.config().clone();
    apply_ablation_flags(&mut cfg, no_point_sigmoid, no_pi_sigmoid, no_dropout);
    let mut fresh = Model::build(&cfg, 0)?;
    for name in fresh.param_names() {
        let src = model.param(&name).ok_or_else(|| {
            Error::data(format!(
                "loaded model lacks parameter {name}; it cannot host these ablation flags"
            ))
        })?;
        fresh
            .param(&name)
            .expect("name listed by the fresh model")
            .set_value(&src.value())?;
    }
    fresh.set_stage1_done(model.stage1_done());
    Ok(fresh)
}

fn load_set(manifest: &Path, crop: Option<&BevCrop>, input_size: usize) -> Result<ImageSet> {
    let records = read_manifest(manifest)?;
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    ImageSet::load(&records, &dir, crop, input_size)
}

fn read_crop(path: Option<&PathBuf>) -> Result<Option<BevCrop>> {
    path.map(|p| read_json::<BevCrop>(p)).transpose()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("malformed JSON in {}: {e}", path.display())))
}

fn write_logs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    ensure_parent(path)?;
    let mut text = String::with_capacity(logs.len() * 96);
    for log in logs {
        text.push_str(&serde_json::to_string(log).expect("epoch log serialises"));
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| Error::io(format!("cannot write log {}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                Error::io(format!("cannot create directory {}: {e}", parent.display()))
            })?;
        }
    }
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serialises"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.input_size = 32;
        cfg.stem.out_channels = 4;
        cfg.channel_schedule = vec![4, 8];
        cfg.pi_hidden = vec![8];
        cfg
    }

    #[test]
    fn command_line_definition_is_internally_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn run_config_parses_a_full_document() {
        let text = r#"{
            "model": {"scale_preset": "tiny", "input_size": 32},
            "stage1": {"epochs": 3, "initial_lr": 0.05},
            "stage2": {"epochs": 4},
            "joint": {"epochs": 5},
            "augment": {"enabled": false},
            "seed": 9,
            "manifest": "data/train.csv",
            "out": "runs/model.bin"
        }"#;
        let run: RunConfig = serde_json::from_str(text).unwrap();
        let model = run.model.unwrap();
        assert_eq!(model.input_size, 32);
        assert_eq!(model.channel_schedule, vec![8, 16]);
        assert_eq!(run.stage1.epochs, Some(3));
        assert_eq!(run.stage1.initial_lr, Some(0.05));
        assert_eq!(run.stage2.epochs, Some(4));
        assert_eq!(run.joint.epochs, Some(5));
        assert!(!run.augment.unwrap().enabled);
        assert_eq!(run.seed, Some(9));
        assert_eq!(run.manifest.as_deref(), Some(Path::new("data/train.csv")));
        assert_eq!(run.out.as_deref(), Some(Path::new("runs/model.bin")));
        assert!(run.log.is_none());
        assert!(run.crop.is_none());
    }

    #[test]
    fn empty_run_config_is_all_defaults() {
        let run: RunConfig = serde_json::from_str("{}").unwrap();
        assert!(run.model.is_none());
        assert_eq!(run.stage1, StageOverrides::default());
        assert!(run.seed.is_none());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let top: std::result::Result<RunConfig, _> = serde_json::from_str(r#"{"stge1": {}}"#);
        assert!(top.is_err());
        let nested: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"stage1": {"epoch": 3}}"#);
        assert!(nested.is_err());
    }

    #[test]
    fn seed_resolution_prefers_flag_then_config_then_environment() {
        assert_eq!(resolve_seed_from(Some(5), Some(7), Some("9")).unwrap(), 5);
        assert_eq!(resolve_seed_from(None, Some(7), Some("9")).unwrap(), 7);
        assert_eq!(resolve_seed_from(None, None, Some("9")).unwrap(), 9);
        assert_eq!(resolve_seed_from(None, None, Some(" 12 ")).unwrap(), 12);
        assert_eq!(resolve_seed_from(None, None, None).unwrap(), 0);
        assert!(resolve_seed_from(None, None, Some("not-a-seed")).is_err());
    }

    #[test]
    fn default_log_path_sits_next_to_the_model() {
        assert_eq!(
            default_log_path(Path::new("runs/model.bin")),
            PathBuf::from("runs/model.log.jsonl")
        );
        assert_eq!(default_log_path(Path::new("model")), PathBuf::from("model.log.jsonl"));
    }

    #[test]
    fn stage_argument_accepts_numeric_names() {
        assert_eq!(StageArg::from_str("1", false).unwrap(), StageArg::One);
        assert_eq!(StageArg::from_str("2", false).unwrap(), StageArg::Two);
        assert_eq!(StageArg::from_str("joint", false).unwrap(), StageArg::Joint);
        assert!(StageArg::from_str("3", false).is_err());
    }

    #[test]
    fn ablation_rebuild_preserves_every_parameter() {
        let mut src = Model::build(&small_config(), 11).unwrap();
        src.set_stage1_done(true);
        let saved: Vec<(String, Vec<f32>)> = src
            .param_names()
            .iter()
            .map(|n| (n.clone(), src.param(n).unwrap().value()))
            .collect();
        assert!(!saved.is_empty());

        let rebuilt = with_ablations(src, false, true, true).unwrap();
        assert_eq!(rebuilt.config().dropout_p, 0.0);
        assert!(!rebuilt.config().pi_sigmoid);
        assert!(rebuilt.config().point_sigmoid);
        assert!(rebuilt.stage1_done());
        for (name, value) in saved {
            assert_eq!(rebuilt.param(&name).unwrap().value(), value, "{name} changed");
        }
    }

    #[test]
    fn rebuilding_without_flags_is_the_identity() {
        let src = Model::build(&small_config(), 3).unwrap();
        let hash = src.content_hash();
        let same = with_ablations(src, false, false, false).unwrap();
        assert_eq!(same.content_hash(), hash);
    }
}
