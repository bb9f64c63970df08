//! Command-line front end: data generation, training, evaluation, inference
//! and mask inspection.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use q4dg::grid::{build_spatial_mask, build_temporal_mask, CameraSetting, GridLayout, MaskKind};
use q4dg::losses::TrackLoss;
use q4dg::numerics::container::{load_checkpoint, save_checkpoint};
use q4dg::pipeline::predict::{evaluate, predict, EvalOptions, Prediction};
use q4dg::pipeline::train::{train_single_stage, TrainLog};
use q4dg::pipeline::{train_stage1, train_stage2, Model, StagePlan, Task, TrainConfig};
use q4dg::scenes::{generate_scene, list_scenes, read_dataset, scene_seed, write_dataset, SceneConfig};

pub const THREADS_ENV: &str = "Q4DG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "q4dg", version, about = "Spatiotemporal geometry model: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes with full ground truth.
    GenData(GenData),
    /// Train a checkpoint (stage 1 per task, stage 2 joint heads).
    Train(Train),
    /// Score a checkpoint or saved predictions against scenes.
    Eval(Eval),
    /// Write per-scene predictions of a checkpoint.
    Infer(Infer),
    /// Write an attention mask as text.
    DumpMasks(DumpMasks),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    #[value(name = "mono-s")]
    MonoS,
    #[value(name = "mono-d")]
    MonoD,
    #[value(name = "multi-s")]
    MultiS,
}

impl From<SettingArg> for CameraSetting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::MonoS => CameraSetting::MonoStatic,
            SettingArg::MonoD => CameraSetting::MonoDynamic,
            SettingArg::MultiS => CameraSetting::MultiStatic,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Scene generator config (JSON); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory; scenes go to scene_000, scene_001, ...
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Base random seed (required).
    #[arg(long)]
    pub seed: u64,
    /// Number of scenes to generate.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Camera setting, overriding the config file.
    #[arg(long, value_enum)]
    pub setting: Option<SettingArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Pose,
    Depth,
    Mask,
    Point,
    Track,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackLossArg {
    Chamfer,
    PerQuery,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Scene directory, or a directory of scene directories.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Training stage: 1 = per-task, 2 = joint head fine-tuning.
    #[arg(long, value_enum, default_value = "1")]
    pub stage: StageArg,
    /// Stage-1 task to train; `all` runs every task in order.
    #[arg(long, value_enum, default_value = "all")]
    pub task: TaskArg,
    /// Steps per task in stage 1, total steps otherwise.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Checkpoint path; resumed when it exists, written after training.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Training config (JSON); flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Random seed for initialization and subgrid sampling (required).
    #[arg(long)]
    pub seed: u64,
    /// Learning rate override.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay override.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Tracking supervision: set distance or per-query distance.
    #[arg(long, value_enum)]
    pub track_loss: Option<TrackLossArg>,
    /// Training log path; rows are appended (default: train_log.csv beside the checkpoint).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Train on the full grid without subgrid sampling.
    #[arg(long)]
    pub no_avg: bool,
    /// Bypass cross-view fusion.
    #[arg(long)]
    pub no_cvgf: bool,
    /// Bypass cross-time fusion.
    #[arg(long)]
    pub no_ctlf: bool,
    /// Replace the spatial mask with an all-true mask.
    #[arg(long)]
    pub no_spatial_mask: bool,
    /// Replace the temporal window with the whole sequence.
    #[arg(long)]
    pub no_temporal_mask: bool,
    /// Train all modules jointly in one stage.
    #[arg(long)]
    pub single_stage: bool,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Checkpoint to run; its config sidecar is read as well.
    #[arg(long, value_name = "PATH", conflicts_with = "pred", required_unless_present = "pred")]
    pub ckpt: Option<PathBuf>,
    /// Saved predictions (as written by `infer`) instead of a checkpoint.
    #[arg(long, value_name = "DIR")]
    pub pred: Option<PathBuf>,
    /// Scene directory, or a directory of scene directories.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output CSV with columns scene,metric,value.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Align depth in inverse-depth space before scoring.
    #[arg(long)]
    pub align_disparity: bool,
    /// Trajectory horizons for the deviation metric, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [12usize, 24])]
    pub horizons: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct Infer {
    /// Checkpoint to run; its config sidecar is read as well.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Scene directory, or a directory of scene directories.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory, one prediction directory per scene.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Spatial,
    Temporal,
}

#[derive(Debug, Args)]
pub struct DumpMasks {
    /// Number of views V.
    #[arg(long)]
    pub views: usize,
    /// Number of time steps T.
    #[arg(long)]
    pub times: usize,
    /// Patches per frame P.
    #[arg(long)]
    pub patches: usize,
    /// Temporal window size S (odd).
    #[arg(long)]
    pub window: usize,
    /// Camera setting of the grid.
    #[arg(long, value_enum)]
    pub setting: SettingArg,
    /// Which mask to build.
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Output text file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn command() -> clap::Command {
    Cli::command()
}

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let rendered = e.render().to_string();
            let reason: Vec<&str> = rendered
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            eprintln!("q4dg: usage: {}", one_line(&reason.join(" ")).trim_start_matches("error: "));
            return 1;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("q4dg: usage: {}", one_line(&format!("{e:#}")));
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("q4dg: runtime: {}", one_line(&format!("{e:#}")));
            2
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
    // A pool may already exist when the library is driven in-process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::DumpMasks(a) => dump_masks(a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SceneConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneConfig::default(),
    };
    if let Some(s) = a.setting {
        let setting = CameraSetting::from(s);
        if setting.is_monocular() && a.config.is_none() {
            cfg = SceneConfig {
                setting,
                ..SceneConfig::for_setting(setting)
            };
        } else {
            cfg.setting = setting;
        }
    }
    cfg.validate()?;
    if a.count == 0 {
        bail!("--count must be >= 1");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    (0..a.count)
        .into_par_iter()
        .map(|k| -> Result<()> {
            let seq = generate_scene(&cfg, scene_seed(a.seed, k))?;
            write_dataset(&seq, &a.out.join(format!("scene_{k:03}")))?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    let resolved = serde_json::json!({ "seed": a.seed, "count": a.count, "scene": cfg });
    write_file(&a.out.join("resolved_config.json"), &(serde_json::to_string_pretty(&resolved)? + "\n"))
}

pub fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load_scenes(data: &Path) -> Result<Vec<(String, q4dg::scenes::SceneSequence)>> {
    list_scenes(data)?
        .par_iter()
        .map(|dir| {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let seq = read_dataset(dir).with_context(|| format!("reading scene {}", dir.display()))?;
            Ok((name, seq))
        })
        .collect()
}

fn train(a: Train) -> Result<()> {
    let ckpt_exists = a.ckpt.is_file();
    let mut cfg = match (&a.config, ckpt_exists) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, true) => TrainConfig::load(&sidecar(&a.ckpt)).context("reading checkpoint config")?,
        (None, false) => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(wd) = a.weight_decay {
        cfg.optimizer.weight_decay = wd;
    }
    if let Some(t) = a.track_loss {
        cfg.track_loss = match t {
            TrackLossArg::Chamfer => TrackLoss::Chamfer,
            TrackLossArg::PerQuery => TrackLoss::PerQuery,
        };
    }
    cfg.no_avg |= a.no_avg;
    cfg.single_stage |= a.single_stage;
    let ab = &mut cfg.model.ablation;
    ab.no_cvgf |= a.no_cvgf;
    ab.no_ctlf |= a.no_ctlf;
    ab.no_spatial_mask |= a.no_spatial_mask;
    ab.no_temporal_mask |= a.no_temporal_mask;
    cfg.validate()?;

    let scenes: Vec<_> = load_scenes(&a.data)?.into_iter().map(|(_, s)| s).collect();
    let (model, mut store) = if ckpt_exists {
        let loaded = load_checkpoint(&a.ckpt)?;
        Model::from_store(&cfg.model, &loaded)?
    } else {
        if a.stage == StageArg::Two && !cfg.single_stage {
            bail!("stage 2 needs an existing stage-1 checkpoint at {}", a.ckpt.display());
        }
        Model::init(&cfg.model, cfg.seed)?
    };

    let mut log = TrainLog::default();
    if cfg.single_stage {
        train_single_stage(&model, &mut store, &scenes, &cfg, &mut log)?;
    } else {
        match a.stage {
            StageArg::One => {
                let tasks = match a.task {
                    TaskArg::All => Task::ORDER.to_vec(),
                    TaskArg::Pose => vec![Task::Pose],
                    TaskArg::Depth => vec![Task::Depth],
                    TaskArg::Mask => vec![Task::Mask],
                    TaskArg::Point => vec![Task::Point],
                    TaskArg::Track => vec![Task::Track],
                };
                let plan = StagePlan::stage1(&tasks, cfg.steps, cfg.weights.huber_delta);
                train_stage1(&model, &mut store, &scenes, &cfg, &plan, &mut log)?;
            }
            StageArg::Two => {
                let plan = StagePlan::stage2(cfg.steps, cfg.weights);
                train_stage2(&model, &mut store, &scenes, &cfg, &plan, &mut log)?;
            }
        }
    }

    if let Some(dir) = a.ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&store, &a.ckpt)?;
    write_file(&sidecar(&a.ckpt), &cfg.to_json())?;
    let dir = parent_dir(&a.ckpt);
    write_file(&dir.join("resolved_config.json"), &cfg.to_json())?;
    let log_path = a.log.unwrap_or_else(|| dir.join("train_log.csv"));
    let csv = log.to_csv();
    if log_path.is_file() {
        let body: String = csv.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        f.write_all(body.as_bytes())?;
    } else {
        write_file(&log_path, &csv)?;
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(Model, q4dg::numerics::ParamStore, TrainConfig)> {
    let cfg = TrainConfig::load(&sidecar(ckpt)).context("reading checkpoint config")?;
    let loaded = load_checkpoint(ckpt)?;
    let (model, store) = Model::from_store(&cfg.model, &loaded)?;
    Ok((model, store, cfg))
}

fn eval(a: Eval) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    let opts = EvalOptions {
        align_disparity: a.align_disparity,
        horizons: [a.horizons[0], a.horizons[1]],
        ..EvalOptions::default()
    };
    if opts.horizons.contains(&0) {
        bail!("--horizons must be positive");
    }
    let model = a.ckpt.as_deref().map(load_model).transpose()?;
    let reports = scenes
        .par_iter()
        .map(|(name, seq)| {
            let pred = match (&model, &a.pred) {
                (Some((m, store, _)), _) => predict(m, store, seq)?,
                (None, Some(dir)) => {
                    let d = if dir.join("meta.json").is_file() { dir.clone() } else { dir.join(name) };
                    Prediction::read(&d).with_context(|| format!("reading predictions {}", d.display()))?
                }
                (None, None) => unreachable!("clap requires --ckpt or --pred"),
            };
            let r = evaluate(&pred, seq, &opts).with_context(|| format!("scoring {name}"))?;
            Ok((name.clone(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(&a.out, &q4dg::pipeline::metrics::metrics_csv(&reports))?;
    let resolved = serde_json::json!({
        "ckpt": a.ckpt,
        "pred": a.pred,
        "data": a.data,
        "eval": opts,
        "train": model.as_ref().map(|m| &m.2),
    });
    write_file(
        &parent_dir(&a.out).join("resolved_config.json"),
        &(serde_json::to_string_pretty(&resolved)? + "\n"),
    )
}

fn infer(a: Infer) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    let (model, store, cfg) = load_model(&a.ckpt)?;
    scenes
        .par_iter()
        .map(|(name, seq)| {
            let pred = predict(&model, &store, seq).with_context(|| format!("running {name}"))?;
            pred.check().with_context(|| format!("checking outputs of {name}"))?;
            pred.write(&a.out.join(name))?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    write_file(&a.out.join("resolved_config.json"), &cfg.to_json())
}

fn dump_masks(a: DumpMasks) -> Result<()> {
    let layout = GridLayout::flat(a.views, a.times, a.patches, a.setting.into())?;
    let mask = match a.kind {
        KindArg::Spatial => build_spatial_mask(layout),
        KindArg::Temporal => build_temporal_mask(layout, a.window)?,
    };
    debug_assert_eq!(mask.kind, if a.kind == KindArg::Spatial { MaskKind::Spatial } else { MaskKind::Temporal });
    write_file(&a.out, &mask.to_text(a.window))
}
