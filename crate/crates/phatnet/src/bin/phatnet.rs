//! Command-line pipeline driver.
//!
//! Subcommands cover the whole workflow: synthesize paired domains, train
//! the haze-transfer network, transfer haze patterns (with optional
//! transmission edits), build a fine-tuning set for an unseen domain,
//! train/adapt the baseline dehazer, evaluate, and inspect latents.
//!
//! Every command writes a `RunManifest` JSON — atomically, on success and
//! on handled failure — recording the resolved configuration, seeds,
//! inputs/outputs, and checkpoint hashes.
//!
//! Exit codes: 0 success; 1 usage/configuration; 2 I/O or data;
//! 3 checkpoint; 4 numeric divergence.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use phatnet::adaptation::{adapt_dehazer, build_finetune_set, load_finetune_dir, AdaptConfig};
use phatnet::checkpoint::{load_phatnet, save_phatnet, sha256_file};
use phatnet::datagen::{
    generate_domain, load_external_dataset, save_domain, DomainSpec, ResolutionPolicy,
};
use phatnet::dehazer::{
    dehaze, dehaze_history_csv, load_dehazer, save_dehazer, train_dehazer_from,
    DehazeTrainConfig, DehazerWeights,
};
use phatnet::error::{PhatError, Result};
use phatnet::image::{hstack_grid, ImageTensor};
use phatnet::manifest::RunManifest;
use phatnet::metrics::evaluate_pairs;
use phatnet::phatnet::{inspect_latents, transfer, TmEdit};
use phatnet::pngio::{load_png, save_gray_png16, save_png16, save_png8};
use phatnet::trainer::{TrainConfig, Trainer};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "phatnet",
    version = phatnet::TOOL_VERSION,
    about = "Physics-guided haze transfer and test-time dehazer adaptation"
)]
struct Cli {
    /// Upper bound on worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired hazy/clean domain.
    SynthData(SynthDataArgs),
    /// Train the haze-transfer network on a paired domain.
    TrainPhatnet(TrainPhatnetArgs),
    /// Re-render a clean image under a hazy image's haze pattern.
    Transfer(TransferArgs),
    /// Render the M×N(×edits) fine-tuning set for a target domain.
    BuildFinetuneSet(BuildFinetuneSetArgs),
    /// Train the baseline dehazer on a paired domain.
    TrainDehazer(TrainDehazerArgs),
    /// Fine-tune a dehazer on a rendered fine-tuning set.
    Adapt(AdaptArgs),
    /// Score a dehazer on a paired dataset (PSNR/SSIM).
    Evaluate(EvaluateArgs),
    /// Dump per-stage haze latents as heatmaps, bar images, and CSV.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Domain spec JSON; omit to use a preset.
    #[arg(long, conflicts_with_all = ["preset", "size", "pairs", "seed"])]
    spec: Option<PathBuf>,
    /// Built-in domain preset.
    #[arg(long, value_parser = ["source", "target"])]
    preset: Option<String>,
    /// Square image side for presets (multiple of 32).
    #[arg(long, default_value_t = 160)]
    size: usize,
    /// Number of pairs for presets.
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    /// Seed override for presets.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainPhatnetArgs {
    /// Paired dataset directory (`hazy/`, `clean/`).
    #[arg(long)]
    dataset: PathBuf,
    /// Training config JSON (missing fields take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epoch-count override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Crop-size override; 0 trains on full frames.
    #[arg(long)]
    crop_size: Option<usize>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Haze-transfer network checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Hazy image providing the haze pattern.
    #[arg(long)]
    hazy: PathBuf,
    /// Clean image providing the content.
    #[arg(long)]
    clean: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Gamma remap of the transmission latent (1 = plain transfer).
    #[arg(long, conflicts_with = "vflip")]
    gamma: Option<f64>,
    /// Vertically flip the transmission latent.
    #[arg(long)]
    vflip: bool,
    /// Also write a qualitative grid: hazy | clean | transferred [| oracle].
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Oracle image for the grid's fourth panel.
    #[arg(long, requires = "grid")]
    oracle: Option<PathBuf>,
}

#[derive(Args)]
struct BuildFinetuneSetArgs {
    /// Haze-transfer network checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target-domain hazy images: a dataset dir (uses `hazy/`) or a flat PNG dir.
    #[arg(long)]
    target_dir: PathBuf,
    /// Source-domain clean images: a dataset dir (uses `clean/`) or a flat PNG dir.
    #[arg(long)]
    source_dir: PathBuf,
    /// Output set directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated edits: `none`, `vflip`, `gamma<G>` (e.g. `gamma0.7`).
    #[arg(long, default_value = "none,gamma0.7,gamma1.5,vflip")]
    edits: String,
}

#[derive(Args)]
struct TrainDehazerArgs {
    /// Paired dataset directory (`hazy/`, `clean/`).
    #[arg(long)]
    dataset: PathBuf,
    /// Training config JSON (missing fields take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epoch-count override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Crop-size override; 0 trains on full frames.
    #[arg(long)]
    crop_size: Option<usize>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    /// Baseline dehazer checkpoint, or `zero` for the identity dehazer.
    #[arg(long)]
    dehazer: String,
    /// Fine-tuning set directory from `build-finetune-set`.
    #[arg(long)]
    finetune_dir: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dehazer checkpoint, or `zero` for the identity dehazer.
    #[arg(long)]
    dehazer: String,
    /// Paired dataset directory (`hazy/`, `clean/`).
    #[arg(long)]
    dataset: PathBuf,
    /// Report JSON path (a CSV sibling is written alongside).
    #[arg(long)]
    out: PathBuf,
    /// Resolution policy for incompatible images.
    #[arg(long, default_value = "reject", value_parser = ["reject", "crop"])]
    policy: String,
}

#[derive(Args)]
struct InspectArgs {
    /// Haze-transfer network checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Hazy image to encode.
    #[arg(long)]
    hazy: PathBuf,
    /// Output directory for heatmaps, bar images, and CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Gamma edit applied to the transmission latent.
    #[arg(long, conflicts_with = "vflip")]
    gamma: Option<f64>,
    /// Vertical-flip edit applied to the transmission latent.
    #[arg(long)]
    vflip: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; anything
            // else is a usage error (exit 1).
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    check_backend_env()?;
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(PhatError::Config("--workers must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| PhatError::Config(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::TrainPhatnet(args) => cmd_train_phatnet(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::BuildFinetuneSet(args) => cmd_build_finetune_set(args),
        Command::TrainDehazer(args) => cmd_train_dehazer(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

/// Only the deterministic CPU backend exists; the env var is honored as
/// a selector so scripts can pin it explicitly.
fn check_backend_env() -> Result<()> {
    match std::env::var("PHATNET_BACKEND") {
        Ok(v) if v == "cpu" => Ok(()),
        Ok(v) => Err(PhatError::Config(format!(
            "PHATNET_BACKEND={v:?} unsupported (only \"cpu\")"
        ))),
        Err(_) => Ok(()),
    }
}

/// Stamps the wall clock, records the outcome, and writes the manifest.
/// On failure the original error wins over a manifest-write error.
fn finish(
    mut manifest: RunManifest,
    path: &Path,
    started: Instant,
    result: Result<()>,
) -> Result<()> {
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    match result {
        Ok(()) => {
            manifest.write_atomic(path)?;
            Ok(())
        }
        Err(e) => {
            manifest.set_error(e.to_string());
            let _ = manifest.write_atomic(path);
            Err(e)
        }
    }
}

fn to_json(value: impl serde::Serialize) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Manifest path for commands whose output is a single file.
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PhatError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| PhatError::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn parse_policy(s: &str) -> ResolutionPolicy {
    match s {
        "crop" => ResolutionPolicy::Crop,
        _ => ResolutionPolicy::Reject,
    }
}

/// Builds and validates the edit up front so a bad flag fails before any
/// file is touched.
fn edit_from_flags(gamma: Option<f64>, vflip: bool) -> Result<TmEdit> {
    let edit = match (gamma, vflip) {
        (_, true) => TmEdit::Vflip,
        (Some(g), false) => TmEdit::Gamma(g),
        (None, false) => TmEdit::None,
    };
    edit.validate()?;
    Ok(edit)
}

/// Parses a comma-separated edit list: `none`, `vflip`, `gamma<G>`.
fn parse_edits(spec: &str) -> Result<Vec<TmEdit>> {
    let mut edits = Vec::new();
    for token in spec.split(',') {
        let token = token.trim();
        let edit = match token {
            "" => continue,
            "none" => TmEdit::None,
            "vflip" => TmEdit::Vflip,
            _ => match token.strip_prefix("gamma") {
                Some(g) => TmEdit::Gamma(g.parse::<f64>().map_err(|_| {
                    PhatError::Parameter(format!("bad gamma in edit {token:?}"))
                })?),
                None => {
                    return Err(PhatError::Parameter(format!(
                        "unknown edit {token:?} (expected none, vflip, or gamma<G>)"
                    )))
                }
            },
        };
        edit.validate()?;
        edits.push(edit);
    }
    if edits.is_empty() {
        return Err(PhatError::Parameter("edit list is empty".into()));
    }
    Ok(edits)
}

/// PNGs in `dir`, sorted by file stem.
fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| PhatError::io(dir, e))?;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PhatError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.push((stem.to_string(), path));
            }
        }
    }
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

/// A dataset dir's image subdirectory if present, else the dir itself.
fn image_dir(root: &Path, sub: &str) -> PathBuf {
    let nested = root.join(sub);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<ImageTensor>> {
    paths.iter().map(|p| load_png(p)).collect()
}

/// Dehazer argument: a checkpoint path or the literal `zero`.
fn load_dehazer_arg(arg: &str) -> Result<(DehazerWeights, Option<String>)> {
    if arg == "zero" {
        return Ok((DehazerWeights::zero(), None));
    }
    let path = Path::new(arg);
    let weights = load_dehazer(path)?;
    Ok((weights, Some(sha256_file(path)?)))
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("synth-data");
    let manifest_path = args.out.join("run_manifest.json");

    let result = (|| -> Result<()> {
        let spec = match (&args.spec, args.preset.as_deref()) {
            (Some(path), _) => {
                manifest.inputs.insert("spec".into(), path_str(path));
                let text =
                    std::fs::read_to_string(path).map_err(|e| PhatError::io(path, e))?;
                let spec: DomainSpec = serde_json::from_str(&text).map_err(|e| {
                    PhatError::Config(format!("bad domain spec {}: {e}", path.display()))
                })?;
                spec
            }
            (None, Some(preset)) => {
                let mut spec = match preset {
                    "source" => DomainSpec::source_default((args.size, args.size), args.pairs),
                    _ => DomainSpec::target_default((args.size, args.size), args.pairs),
                };
                if let Some(seed) = args.seed {
                    spec.seed = seed;
                }
                spec
            }
            (None, None) => {
                return Err(PhatError::Config(
                    "pass either --spec <file> or --preset source|target".into(),
                ))
            }
        };
        manifest.config = to_json(&spec);
        manifest.seeds.insert("domain".into(), spec.seed);
        manifest
            .outputs
            .insert("dataset".into(), path_str(&args.out));

        let pairs = generate_domain(&spec)?;
        save_domain(&args.out, &spec, &pairs)?;
        println!(
            "wrote {} pairs ({}x{}) to {}",
            pairs.len(),
            spec.size.0,
            spec.size.1,
            args.out.display()
        );
        Ok(())
    })();
    finish(manifest, &manifest_path, started, result)
}

fn cmd_train_phatnet(args: TrainPhatnetArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("train-phatnet");
    let manifest_path = sibling_manifest(&args.out);

    let result = (|| -> Result<()> {
        let mut cfg: TrainConfig = read_config(args.config.as_deref())?;
        if let Some(epochs) = args.epochs {
            cfg.epochs = epochs;
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(crop) = args.crop_size {
            cfg.crop_size = if crop == 0 { None } else { Some(crop) };
        }
        manifest.config = to_json(&cfg);
        manifest.seeds.insert("train".into(), cfg.seed);
        manifest
            .inputs
            .insert("dataset".into(), path_str(&args.dataset));
        if let Some(cfg_path) = &args.config {
            manifest.inputs.insert("config".into(), path_str(cfg_path));
        }

        let pairs: Vec<(ImageTensor, ImageTensor)> =
            load_external_dataset(&args.dataset, ResolutionPolicy::Reject)?
                .into_iter()
                .map(|(_, hazy, clean)| (hazy, clean))
                .collect();
        let seed = cfg.seed;
        let mut trainer = Trainer::new(&pairs, cfg)?;
        trainer.run()?;

        let history_path = sibling_with_suffix(&args.out, ".history.csv");
        std::fs::write(&history_path, trainer.history_csv())
            .map_err(|e| PhatError::io(&history_path, e))?;
        let weights = trainer.into_weights();
        save_phatnet(&args.out, &weights, seed)?;
        manifest
            .outputs
            .insert("checkpoint".into(), path_str(&args.out));
        manifest
            .outputs
            .insert("history".into(), path_str(&history_path));
        manifest
            .checkpoint_hashes
            .insert("checkpoint".into(), sha256_file(&args.out)?);
        println!(
            "trained {} params, checkpoint at {}",
            weights.param_count(),
            args.out.display()
        );
        Ok(())
    })();
    finish(manifest, &manifest_path, started, result)
}

/// `foo.ckpt` → `foo.history.csv` (suffix replaces the extension).
fn sibling_with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_os_string();
    let mut name = stem;
    name.push(suffix);
    out.with_file_name(name)
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("transfer");
    let manifest_path = sibling_manifest(&args.out);

    let result = (|| -> Result<()> {
        let edit = edit_from_flags(args.gamma, args.vflip)?;
        manifest.config = to_json(BTreeMap::from([("edit".to_string(), edit.tag())]));
        manifest
            .inputs
            .insert("checkpoint".into(), path_str(&args.checkpoint));
        manifest.inputs.insert("hazy".into(), path_str(&args.hazy));
        manifest
            .inputs
            .insert("clean".into(), path_str(&args.clean));
        manifest
            .checkpoint_hashes
            .insert("checkpoint".into(), sha256_file(&args.checkpoint)?);

        let weights = load_phatnet(&args.checkpoint)?;
        let hazy = load_png(&args.hazy)?;
        let clean = load_png(&args.clean)?;
        let transferred = transfer(&hazy, &clean, &weights, &edit)?;
        save_png16(&args.out, &transferred)?;
        manifest.outputs.insert("out".into(), path_str(&args.out));

        if let Some(grid_path) = &args.grid {
            let oracle = match &args.oracle {
                Some(p) => {
                    manifest.inputs.insert("oracle".into(), path_str(p));
                    Some(load_png(p)?)
                }
                None => None,
            };
            let mut panels = vec![&hazy, &clean, &transferred];
            if let Some(o) = &oracle {
                panels.push(o);
            }
            let grid = hstack_grid(&panels, 4)?;
            save_png8(grid_path, &grid)?;
            manifest.outputs.insert("grid".into(), path_str(grid_path));
        }
        println!("transferred haze ({}) to {}", edit.tag(), args.out.display());
        Ok(())
    })();
    finish(manifest, &manifest_path, started, result)
}

fn cmd_build_finetune_set(args: BuildFinetuneSetArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("build-finetune-set");
    let manifest_path = args.out.join("run_manifest.json");

    let result = (|| -> Result<()> {
        let edits = parse_edits(&args.edits)?;
        manifest.config = to_json(BTreeMap::from([(
            "edits".to_string(),
            edits.iter().map(TmEdit::tag).collect::<Vec<_>>(),
        )]));
        manifest
            .inputs
            .insert("checkpoint".into(), path_str(&args.checkpoint));
        manifest
            .inputs
            .insert("target_dir".into(), path_str(&args.target_dir));
        manifest
            .inputs
            .insert("source_dir".into(), path_str(&args.source_dir));
        let ckpt_hash = sha256_file(&args.checkpoint)?;
        manifest
            .checkpoint_hashes
            .insert("checkpoint".into(), ckpt_hash.clone());

        let weights = load_phatnet(&args.checkpoint)?;
        let target = load_images(&pngs_in(&image_dir(&args.target_dir, "hazy"))?)?;
        let source = load_images(&pngs_in(&image_dir(&args.source_dir, "clean"))?)?;
        let set = build_finetune_set(target, source, weights, &edits)?;
        let set_manifest = set.write_dir(&args.out, Some(ckpt_hash))?;
        manifest.outputs.insert("set".into(), path_str(&args.out));

        println!(
            "rendered {} pairs ({} skipped) into {}",
            set_manifest.entries.len(),
            set_manifest.failures.len(),
            args.out.display()
        );
        for f in &set_manifest.failures {
            eprintln!(
                "skipped target {} / source {} [{}]: {}",
                f.target_idx, f.source_idx, f.edit, f.message
            );
        }
        Ok(())
    })();
    finish(manifest, &manifest_path, started, result)
}

fn cmd_train_dehazer(args: TrainDehazerArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("train-dehazer");
    let manifest_path = sibling_manifest(&args.out);

    let result = (|| -> Result<()> {
        let mut cfg: DehazeTrainConfig = read_config(args.config.as_deref())?;
        if let Some(epochs) = args.epochs {
            cfg.epochs = epochs;
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(crop) = args.crop_size {
            cfg.crop_size = if crop == 0 { None } else { Some(crop) };
        }
        manifest.config = to_json(&cfg);
        manifest.seeds.insert("train".into(), cfg.seed);
        manifest
            .inputs
            .insert("dataset".into(), path_str(&args.dataset));
        if let Some(cfg_path) = &args.config {
            manifest.inputs.insert("config".into(), path_str(cfg_path));
        }

        let pairs: Vec<(ImageTensor, ImageTensor)> =
            load_external_dataset(&args.dataset, ResolutionPolicy::Reject)?
                .into_iter()
                .map(|(_, hazy, clean)| (hazy, clean))
                .collect();
        let mut weights = DehazerWeights::init(cfg.seed);
        let history = train_dehazer_from(&mut weights, &pairs, &cfg)?;

        let history_path = sibling_with_suffix(&args.out, ".history.csv");
        std::fs::write(&history_path, dehaze_history_csv(&history))
            .map_err(|e| PhatError::io(&history_path, e))?;
        save_dehazer(&args.out, &weights, cfg.seed, BTreeMap::new())?;
        manifest
            .outputs
            .insert("checkpoint".into(), path_str(&args.out));
        manifest
            .outputs
            .insert("history".into(), path_str(&history_path));
        manifest
            .checkpoint_hashes
            .insert("checkpoint".into(), sha256_file(&args.out)?);
        println!(
            "trained dehazer ({} params), checkpoint at {}",
            weights.param_count(),
            args.out.display()
        );
        Ok(())
    })();
    finish(manifest, &manifest_path, started, result)
}

fn cmd_adapt(args: AdaptArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("adapt");
    let manifest_path = sibling_manifest(&args.out);

    let result = (|| -> Result<()> {
        let cfg = AdaptConfig {
            epochs: args.epochs,
            batch_size: args.batch_size,
            lr: args.lr,
            seed: args.seed,
            ..AdaptConfig::default()
        };
        manifest.config = to_json(&cfg);
        manifest.seeds.insert("adapt".into(), cfg.seed);
        manifest
            .inputs
            .insert("dehazer".into(), args.dehazer.clone());
        manifest
            .inputs
            .insert("finetune_dir".into(), path_str(&args.finetune_dir));

        let (baseline, baseline_hash) = load_dehazer_arg(&args.dehazer)?;
        if let Some(hash) = &baseline_hash {
            manifest
                .checkpoint_hashes
                .insert("baseline".into(), hash.clone());
        }
        let (pairs, set_manifest) = load_finetune_dir(&args.finetune_dir)?;
        let (adapted, history) = adapt_dehazer(&baseline, &pairs, &cfg)?;

        let history_path = sibling_with_suffix(&args.out, ".history.csv");
        std::fs::write(&history_path, dehaze_history_csv(&history))
            .map_err(|e| PhatError::io(&history_path, e))?;
        let mut meta = BTreeMap::new();
        if let Some(hash) = baseline_hash {
            meta.insert("baseline_sha256".into(), hash);
        }
        if let Some(hash) = &set_manifest.phatnet_checkpoint_sha256 {
            meta.insert("phatnet_sha256".into(), hash.clone());
        }
        save_dehazer(&args.out, &adapted, cfg.seed, meta)?;
        manifest
            .outputs
            .insert("checkpoint".into(), path_str(&args.out));
        manifest
            .outputs
            .insert("history".into(), path_str(&history_path));
        manifest
            .checkpoint_hashes
            .insert("checkpoint".into(), sha256_file(&args.out)?);
        println!(
            "adapted on {} pairs for {} steps, checkpoint at {}",
            pairs.len(),
            history.len(),
            args.out.display()
        );
        Ok(())
    })();
    finish(manifest, &manifest_path, started, result)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("evaluate");
    let manifest_path = sibling_manifest(&args.out);

    let result = (|| -> Result<()> {
        manifest.config = to_json(BTreeMap::from([(
            "policy".to_string(),
            args.policy.clone(),
        )]));
        manifest
            .inputs
            .insert("dehazer".into(), args.dehazer.clone());
        manifest
            .inputs
            .insert("dataset".into(), path_str(&args.dataset));

        let (weights, hash) = load_dehazer_arg(&args.dehazer)?;
        if let Some(hash) = hash {
            manifest.checkpoint_hashes.insert("dehazer".into(), hash);
        }
        let dataset = load_external_dataset(&args.dataset, parse_policy(&args.policy))?;
        let mut scored = Vec::with_capacity(dataset.len());
        for (name, hazy, clean) in &dataset {
            scored.push((name.clone(), dehaze(hazy, &weights)?, clean.clone()));
        }
        let report = evaluate_pairs(&scored)?;

        let mut bytes = serde_json::to_vec_pretty(&report)
            .map_err(|e| PhatError::Config(format!("report serialization: {e}")))?;
        bytes.push(b'\n');
        phatnet::manifest::atomic_write(&args.out, &bytes)?;
        let csv_path = sibling_with_suffix(&args.out, ".csv");
        std::fs::write(&csv_path, report.to_csv()).map_err(|e| PhatError::io(&csv_path, e))?;
        manifest.outputs.insert("report".into(), path_str(&args.out));
        manifest.outputs.insert("csv".into(), path_str(&csv_path));

        let psnr_text = report
            .mean_psnr_db
            .map_or_else(|| "inf".to_string(), |v| format!("{v:.3}"));
        println!(
            "{} images: mean PSNR {} dB, mean SSIM {:.4}",
            report.scores.len(),
            psnr_text,
            report.mean_ssim
        );
        Ok(())
    })();
    finish(manifest, &manifest_path, started, result)
}

/// Renders a bar chart of `values` (each in [0, 1]) as a grayscale image.
fn bar_image(values: &[f64], height: usize, bar_width: usize) -> Array2<f64> {
    let mut img = Array2::<f64>::zeros((height, values.len() * bar_width));
    for (i, &v) in values.iter().enumerate() {
        let filled = (v.clamp(0.0, 1.0) * height as f64).round() as usize;
        for y in 0..filled {
            for x in 0..bar_width {
                img[[height - 1 - y, i * bar_width + x]] = 1.0;
            }
        }
    }
    img
}

fn write_csv_matrix(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| PhatError::io(path, e))
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("inspect");
    let manifest_path = args.out.join("run_manifest.json");

    let result = (|| -> Result<()> {
        let edit = edit_from_flags(args.gamma, args.vflip)?;
        manifest.config = to_json(BTreeMap::from([("edit".to_string(), edit.tag())]));
        manifest
            .inputs
            .insert("checkpoint".into(), path_str(&args.checkpoint));
        manifest.inputs.insert("hazy".into(), path_str(&args.hazy));
        manifest
            .checkpoint_hashes
            .insert("checkpoint".into(), sha256_file(&args.checkpoint)?);

        let weights = load_phatnet(&args.checkpoint)?;
        let hazy = load_png(&args.hazy)?;
        let stages = inspect_latents(&hazy, &weights, &edit)?;
        std::fs::create_dir_all(&args.out).map_err(|e| PhatError::io(&args.out, e))?;

        for (s, latents) in stages.iter().enumerate() {
            // Transmission latent: channel-mean heatmap, values in (0, 1].
            let ftm = latents.ftm.data();
            let (h, w, c) = ftm.dim();
            let mut heat = Array2::<f64>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += ftm[[y, x, ch]];
                    }
                    heat[[y, x]] = acc / c as f64;
                }
            }
            let heat_png = args.out.join(format!("ftm_stage{s}.png"));
            save_gray_png16(&heat_png, &heat)?;
            write_csv_matrix(
                &args.out.join(format!("ftm_stage{s}.csv")),
                heat.rows().into_iter().map(|r| r.to_vec()),
            )?;

            // Atmospheric-light vector: bar image plus one CSV row.
            let fal: Vec<f64> = latents.fal.data().to_vec();
            let bar_png = args.out.join(format!("fal_stage{s}.png"));
            save_gray_png16(&bar_png, &bar_image(&fal, 64, 6))?;
            write_csv_matrix(
                &args.out.join(format!("fal_stage{s}.csv")),
                std::iter::once(fal),
            )?;
        }
        manifest.outputs.insert("dir".into(), path_str(&args.out));
        println!(
            "wrote latent dumps for {} stages to {}",
            stages.len(),
            args.out.display()
        );
        Ok(())
    })();
    finish(manifest, &manifest_path, started, result)
}
