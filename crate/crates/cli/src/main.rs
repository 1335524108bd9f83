use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pivit_core::ablation::{run_ablation, AblationAxis};
use pivit_core::data::{LabeledSample, POSE_FORMAT_TAG};
use pivit_core::evalkit::{
    compare_runs, evaluate, joint_token_distance_profile, report_for, write_predictions, PredictionRecord,
};
use pivit_core::provider::{
    write_feature_cache, ReferenceProvider, SkeletonFeatureProvider, FEATURE_CACHE_FORMAT_TAG, PROVIDER_FORMAT_TAG,
};
use pivit_core::skelmap::{make_variant, token_map, write_map_cache, MapVariant, MAP_CACHE_FORMAT_TAG};
use pivit_core::synth::{Dataset, DATASET_FORMAT_TAG};
use pivit_core::trainer::{
    fit, late_fuse, prepare, ExperimentConfig, InferenceModel, PiVit, CHECKPOINT_FORMAT_TAG, TRAIN_LOG_FORMAT_TAG,
};

mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] pivit_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_config() => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "pivit", about = "Pose-induced video transformer at desk scale", disable_version_flag = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML file with experiment settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.epochs=5`; repeatable, last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data preparation.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
    /// Print version and file format tags.
    #[arg(long)]
    version: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute token-skeleton maps for every sample with a 2D pose.
    BuildMaps {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the reference skeleton feature provider.
    PretrainProvider {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write one feature cache per sample into this directory.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Train the backbone with the configured induction modules.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        provider: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; pose files are never read.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Drop every training-only module from a checkpoint.
    Strip { input: PathBuf, output: PathBuf },
    /// Late-fuse checkpoint logits with skeleton probe logits.
    Fuse {
        checkpoint: PathBuf,
        #[arg(long)]
        provider: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
    },
    /// Sweep one ablation axis and print its table.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        provider: Option<PathBuf>,
        /// Write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Joint-token distance profile, optionally compared with a second run.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.version {
        print_version();
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(2);
    };
    if cli.global.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.workers)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(&cli.global, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn print_version() {
    println!("pivit {}", env!("CARGO_PKG_VERSION"));
    for tag in [
        CHECKPOINT_FORMAT_TAG,
        TRAIN_LOG_FORMAT_TAG,
        PROVIDER_FORMAT_TAG,
        FEATURE_CACHE_FORMAT_TAG,
        MAP_CACHE_FORMAT_TAG,
        DATASET_FORMAT_TAG,
        POSE_FORMAT_TAG,
    ] {
        println!("{tag}");
    }
}

fn run(global: &GlobalArgs, command: Command) -> Result<(), CliError> {
    let cfg = || config::load(global.config.as_deref(), &global.overrides, global.seed);
    match command {
        Command::Synth { out } => {
            let cfg = cfg()?;
            let ds = Dataset::synthetic(&cfg.data.synthetic, cfg.data.heldout_per_class)?;
            ds.write(&out)?;
            println!("wrote {} train and {} held-out clips to {}", ds.train.len(), ds.heldout.len(), out.display());
        }
        Command::BuildMaps { data, out } => {
            let cfg = cfg()?;
            let ds = Dataset::read(&data, true)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let mut written = 0;
            for (split, samples) in [("train", &ds.train), ("heldout", &ds.heldout)] {
                for s in samples {
                    let Some(pose) = &s.pose2d else { continue };
                    let full = token_map(pose, &cfg.backbone)?;
                    let pose3d = match cfg.sim2d.variant {
                        MapVariant::Depth => s.pose3d.as_ref(),
                        _ => None,
                    };
                    let map = make_variant(&full, cfg.sim2d.variant, pose, pose3d)?;
                    write_map_cache(&out.join(format!("{split}_{}.map", s.clip.id)), &map)?;
                    written += 1;
                }
            }
            println!("wrote {written} maps to {}", out.display());
        }
        Command::PretrainProvider { data, out, features } => {
            let cfg = cfg()?;
            let ds = dataset(&cfg, data.as_deref(), true)?;
            let provider = pretrain(&cfg, &ds)?;
            provider.save(&out)?;
            let report = provider.report().expect("fresh provider has a report");
            println!("{}", serde_json::to_string(report).map_err(pivit_core::Error::from)?);
            if let Some(dir) = features {
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let hash = provider.weights_hash()?;
                let name = provider.descriptor().name;
                for (split, samples) in [("train", &ds.train), ("heldout", &ds.heldout)] {
                    for s in samples {
                        let Some(pose) = &s.pose3d else { continue };
                        let f = provider.produce(pose)?;
                        write_feature_cache(&dir.join(format!("{split}_{}.fea", s.clip.id)), &f, &name, &hash)?;
                    }
                }
            }
            if !report.passes_gate() {
                return Err(CliError::Runtime(format!(
                    "provider held-out accuracy {:.3} is below the quality gate",
                    report.heldout_accuracy
                )));
            }
        }
        Command::Train {
            data,
            provider,
            out,
            log,
        } => {
            let cfg = cfg()?;
            let ds = dataset(&cfg, data.as_deref(), true)?;
            let provider = load_or_pretrain(&cfg, &ds, provider.as_deref())?;
            let prepared = prepare(&ds.train, &cfg, provider.as_ref().map(|p| p as &dyn SkeletonFeatureProvider))?;
            let model = PiVit::new(&cfg, ds.meta.joints)?;
            let mut log_file = log
                .as_ref()
                .map(|p| File::create(p).map(BufWriter::new).map_err(io_err(p)))
                .transpose()?;
            let summaries = fit(&model, &prepared, log_file.as_mut().map(|w| w as &mut dyn Write))?;
            if let (Some(w), Some(p)) = (log_file.as_mut(), log.as_ref()) {
                w.flush().map_err(io_err(p))?;
            }
            for s in &summaries {
                eprintln!(
                    "epoch {:>3}  total {:.4}  cls {:.4}  2d {:.4}  3d-align {:.4}  3d-cls {:.4}  kd {:.4}  top1 {:.3}",
                    s.epoch, s.mean.total, s.mean.l_v_cls, s.mean.l_2d, s.mean.l_3d_align, s.mean.l_3d_cls, s.mean.l_kd, s.running_top1
                );
            }
            model.save(&out)?;
            println!("saved {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            predictions,
        } => {
            let model = InferenceModel::load(&checkpoint)?;
            let cfg = checkpoint_config(&model, global)?;
            let ds = dataset(&cfg, data.as_deref(), false)?;
            let samples = pick(&ds, split);
            let (report, records) = evaluate(model.backbone(), &samples, model.store().dtype())?;
            if let Some(path) = predictions {
                let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
                write_predictions(&mut w, &records)?;
                w.flush().map_err(io_err(&path))?;
            }
            print!("{}", report.to_table());
            warn_absent(&report.absent_classes);
        }
        Command::Strip { input, output } => {
            let model = PiVit::load(&input)?;
            let stripped = model.strip()?;
            stripped.save(&output, model.config(), model.joints())?;
            println!(
                "kept {} of {} parameters",
                stripped.num_parameters(),
                model.store().num_scalars(true)
            );
        }
        Command::Fuse {
            checkpoint,
            provider,
            data,
            split,
        } => {
            let model = InferenceModel::load(&checkpoint)?;
            let cfg = checkpoint_config(&model, global)?;
            let provider = ReferenceProvider::load(&provider)?;
            let ds = dataset(&cfg, data.as_deref(), true)?;
            let samples = pick(&ds, split);
            let (rgb_report, rgb) = evaluate(model.backbone(), &samples, model.store().dtype())?;
            let mut pose = Vec::with_capacity(samples.len());
            let mut fused = Vec::with_capacity(samples.len());
            for (s, r) in samples.iter().zip(&rgb) {
                let pose3d = s.pose3d.as_ref().ok_or_else(|| pivit_core::Error::Data {
                    sample: s.clip.id.clone(),
                    msg: "fusion needs a 3D pose".into(),
                })?;
                let logits = provider.probe_logits(pose3d)?;
                let probs = late_fuse(&r.logits, &logits, &cfg.fusion)?;
                fused.push(PredictionRecord {
                    id: r.id.clone(),
                    label: r.label,
                    logits: probs.iter().map(|&p| p as f32).collect(),
                });
                pose.push(PredictionRecord {
                    id: r.id.clone(),
                    label: r.label,
                    logits,
                });
            }
            let c = cfg.backbone.num_classes;
            let pose_report = report_for(&pose, c)?;
            let fused_report = report_for(&fused, c)?;
            println!("{:<8} {:>7} {:>7}", "stream", "top1", "mCA");
            for (name, r) in [("rgb", &rgb_report), ("pose", &pose_report), ("fused", &fused_report)] {
                println!("{name:<8} {:>7.2} {:>7.2}", 100.0 * r.top1, 100.0 * r.mca);
            }
        }
        Command::Ablate {
            axis,
            data,
            provider,
            out,
        } => {
            let axis: AblationAxis = axis.parse().map_err(|e: pivit_core::Error| CliError::Config(e.to_string()))?;
            let cfg = cfg()?;
            let ds = dataset(&cfg, data.as_deref(), true)?;
            let provider = load_or_pretrain_always(&cfg, &ds, provider.as_deref())?;
            let table = run_ablation(
                axis,
                &cfg,
                &ds.train,
                &ds.heldout,
                ds.meta.joints,
                Some(&provider),
                |row, col, mca| eprintln!("{row} / {col}: {:.2}", 100.0 * mca),
            )?;
            print!("{}", table.render());
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&table).map_err(pivit_core::Error::from)?;
                fs::write(&path, json).map_err(io_err(&path))?;
            }
        }
        Command::Analyze {
            checkpoint,
            data,
            against,
            split,
        } => {
            let model = InferenceModel::load(&checkpoint)?;
            let cfg = checkpoint_config(&model, global)?;
            let ds = dataset(&cfg, data.as_deref(), true)?;
            let samples = pick(&ds, split);
            let mut with_maps = Vec::new();
            let mut maps = Vec::new();
            for s in &samples {
                if let Some(p) = &s.pose2d {
                    maps.push(token_map(p, &cfg.backbone)?);
                    with_maps.push(*s);
                }
            }
            let map_refs: Vec<_> = maps.iter().collect();
            let dtype = model.store().dtype();
            let profile = joint_token_distance_profile(model.backbone(), &with_maps, &map_refs, dtype)?;
            println!("{:<6} {:>12}", "layer", "distance");
            for (l, d) in profile.iter().enumerate() {
                println!("{:<6} {d:>12.6}", l + 1);
            }
            if let Some(other) = against {
                let other = InferenceModel::load(&other)?;
                let (a, _) = evaluate(model.backbone(), &samples, dtype)?;
                let (b, _) = evaluate(other.backbone(), &samples, other.store().dtype())?;
                let cmp = compare_runs(&a, &b)?;
                println!("{}", serde_json::to_string_pretty(&cmp).map_err(pivit_core::Error::from)?);
            }
        }
    }
    Ok(())
}

/// Config stored in a checkpoint, with `--set` overrides applied on top.
fn checkpoint_config(model: &InferenceModel, global: &GlobalArgs) -> Result<ExperimentConfig, CliError> {
    let base = model
        .experiment()
        .cloned()
        .ok_or_else(|| CliError::Runtime("checkpoint carries no experiment config".into()))?;
    if global.overrides.is_empty() && global.config.is_none() && global.seed.is_none() {
        return Ok(base);
    }
    let loaded = config::load(global.config.as_deref(), &global.overrides, global.seed)?;
    Ok(ExperimentConfig {
        backbone: base.backbone,
        ..loaded
    })
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>, with_poses: bool) -> Result<Dataset, CliError> {
    Ok(match dir {
        Some(d) => Dataset::read(d, with_poses)?,
        None => Dataset::synthetic(&cfg.data.synthetic, cfg.data.heldout_per_class)?,
    })
}

fn pick(ds: &Dataset, split: SplitArg) -> Vec<&LabeledSample> {
    match split {
        SplitArg::Train => ds.train.iter().collect(),
        SplitArg::Heldout => ds.heldout.iter().collect(),
    }
}

fn pretrain(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ReferenceProvider, CliError> {
    let train: Vec<_> = ds.train.iter().collect();
    let heldout: Vec<_> = ds.heldout.iter().collect();
    Ok(ReferenceProvider::pretrain(&train, &heldout, ds.meta.num_classes, &cfg.provider)?)
}

fn load_or_pretrain(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    path: Option<&Path>,
) -> Result<Option<ReferenceProvider>, CliError> {
    if !cfg.needs_provider() {
        return Ok(None);
    }
    load_or_pretrain_always(cfg, ds, path).map(Some)
}

fn load_or_pretrain_always(cfg: &ExperimentConfig, ds: &Dataset, path: Option<&Path>) -> Result<ReferenceProvider, CliError> {
    match path {
        Some(p) => Ok(ReferenceProvider::load(p)?),
        None => {
            eprintln!("no --provider given; pretraining one with seed {}", cfg.provider.seed);
            pretrain(cfg, ds)
        }
    }
}

fn warn_absent(absent: &[usize]) {
    if !absent.is_empty() {
        eprintln!("warning: classes {absent:?} have no samples and are excluded from mCA");
    }
}
