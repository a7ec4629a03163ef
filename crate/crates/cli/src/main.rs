//! `sarlc` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid input.
//! Failures print one `error_code: message` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sarlc::dataset::SplitSpec;
use sarlc::despeckle::NoiseCv;
use sarlc::evaluation::{ecoregion_cv, EcoregionAssignment};
use sarlc::features::{Season, SeasonDefinition};
use sarlc::metrics::Metrics;
use sarlc::pipeline::{self, Dataset, DatasetMode, PipelineConfig, Subset};

#[derive(Parser)]
#[command(name = "sarlc", version, about = "Seasonal SAR land-cover classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic speckled archive with labels and a scene manifest.
    Synth(SynthArgs),
    /// Multitemporal despeckling of every scene in a manifest.
    Despeckle(DespeckleArgs),
    /// Build one 28-band seasonal feature cube per tile.
    Features(FeaturesArgs),
    /// Cut cubes into labelled patches with a train/test split.
    Dataset(DatasetArgs),
    /// Train a Swin-Unet or random forest on a dataset's training split.
    Train(TrainArgs),
    /// Write class-map rasters for dataset patches or whole cubes.
    Predict(PredictArgs),
    /// Compare predicted and reference class rasters.
    Evaluate(EvaluateArgs),
    /// Train on each ecoregion and test on every other.
    EcoregionCv(EcoregionArgs),
    /// SVG charts and a merged CSV from metrics files.
    Report(ReportArgs),
    /// Run every step on a synthetic archive.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline JSON config; flags override its values [default: built-in config]
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        Ok(match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        })
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// World seed [default: synth.seed = 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tiles [default: synth.tiles = 6]
    #[arg(long)]
    tiles: Option<usize>,
    /// Tile side in pixels [default: synth.width = 128]
    #[arg(long)]
    size: Option<usize>,
    /// Equivalent number of looks [default: synth.enl = 1]
    #[arg(long)]
    enl: Option<f64>,
    /// Number of ecoregions [default: synth.ecoregions = 2]
    #[arg(long)]
    ecoregions: Option<usize>,
    /// Per-region multiplier of class means [default: synth.ecoregion_shift = 1]
    #[arg(long)]
    ecoregion_shift: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeasonArg {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl From<SeasonArg> for Season {
    fn from(s: SeasonArg) -> Self {
        match s {
            SeasonArg::Winter => Season::Winter,
            SeasonArg::Spring => Season::Spring,
            SeasonArg::Summer => Season::Summer,
            SeasonArg::Autumn => Season::Autumn,
        }
    }
}

#[derive(Args)]
struct DespeckleArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Scene manifest
    #[arg(long)]
    stack: PathBuf,
    /// Restrict to one season [default: all seasons]
    #[arg(long, value_enum)]
    season: Option<SeasonArg>,
    /// Ratio-image Lee window [default: despeckle.window = 7]
    #[arg(long)]
    window: Option<usize>,
    /// Ratio noise CV, a number or "auto" [default: despeckle.noise_cv = auto]
    #[arg(long)]
    noise_cv: Option<String>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Scene manifest
    #[arg(long)]
    scenes: PathBuf,
    /// JSON season definition [default: seasons from the config]
    #[arg(long)]
    season_defs: Option<PathBuf>,
    /// Output cube directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Feature,
    Timeseries,
}

#[derive(Args)]
struct DatasetArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Cube directory from `features` (feature mode)
    #[arg(long, required_if_eq("mode", "feature"))]
    cubes: Option<PathBuf>,
    /// Directory of MOLCA label rasters named by tile (feature mode)
    #[arg(long, required_if_eq("mode", "feature"))]
    labels: Option<PathBuf>,
    /// Scene manifest (time-series mode)
    #[arg(long, required_if_eq("mode", "timeseries"))]
    scenes: Option<PathBuf>,
    /// Tile-to-ecoregion JSON map [default: ecoregions from the cube index]
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Split seed [default: dataset.split.random_state = 42]
    #[arg(long)]
    random_state: Option<u64>,
    /// Input representation
    #[arg(long, value_enum, default_value = "feature")]
    mode: ModeArg,
    /// Scenes per season in time-series mode [default: dataset.k = 5]
    #[arg(long)]
    k: Option<usize>,
    /// Skip despeckling in time-series mode
    #[arg(long)]
    raw: bool,
    /// Map label codes without an internal class to no-data
    #[arg(long)]
    allow_empty_classes: bool,
    /// Patch side [default: dataset.patch_size = 256]
    #[arg(long)]
    patch_size: Option<usize>,
    /// Patch stride [default: dataset.stride = 128]
    #[arg(long)]
    stride: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum ModelArg {
    Swin,
    Rf,
}

impl ModelArg {
    fn name(self) -> &'static str {
        match self {
            ModelArg::Swin => "swin",
            ModelArg::Rf => "rf",
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "swin")]
    model: ModelArg,
    /// Epochs [default: train.epochs = 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: train.lr = 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Initialisation, shuffling and bootstrap seed [default: train.seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint base path (swin) or forest JSON path (rf)
    #[arg(long)]
    checkpoint_out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_enum, default_value = "swin")]
    model: ModelArg,
    /// Checkpoint from `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; supplies normalisation statistics
    #[arg(long)]
    data: PathBuf,
    /// Classify whole cubes from this directory instead of dataset patches
    #[arg(long)]
    cubes: Option<PathBuf>,
    /// Dataset patches to classify
    #[arg(long, value_enum, default_value = "test")]
    split: SubsetArg,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted class raster, or a directory of them
    #[arg(long)]
    pred: PathBuf,
    /// Reference class raster, or a directory with matching names
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for metrics.csv and confusion.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EcoregionArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Tile-to-ecoregion JSON map [default: ecoregions stored in the dataset]
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "rf")]
    model: ModelArg,
    /// Seed of the within-region split [default: dataset.split.random_state = 42]
    #[arg(long)]
    random_state: Option<u64>,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV files, one series each
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory [default: io.out_dir = out]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SARLC_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            sarlc::Error::InvalidArgument(format!("SARLC_THREADS must be a positive integer, got {v:?}"))
        })?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn read_assignments(path: &Path) -> anyhow::Result<EcoregionAssignment> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| sarlc::Error::InvalidArgument(format!("{}: {e}", path.display())).into())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = a.config.load()?;
            let s = &mut cfg.synth;
            s.seed = a.seed.unwrap_or(s.seed);
            s.tiles = a.tiles.unwrap_or(s.tiles);
            if let Some(n) = a.size {
                s.width = n;
                s.height = n;
            }
            s.enl = a.enl.unwrap_or(s.enl);
            s.ecoregions = a.ecoregions.unwrap_or(s.ecoregions);
            s.ecoregion_shift = a.ecoregion_shift.unwrap_or(s.ecoregion_shift);
            let path = pipeline::synthesize(&cfg.synth, &cfg.seasons, &a.out)?;
            println!("{}", path.display());
        }
        Command::Despeckle(a) => {
            let mut cfg = a.config.load()?;
            cfg.despeckle.window = a.window.unwrap_or(cfg.despeckle.window);
            if let Some(v) = &a.noise_cv {
                cfg.despeckle.noise_cv = v.parse::<NoiseCv>()?;
            }
            let path = pipeline::despeckle_archive(&a.stack, &cfg.seasons, a.season.map(Season::from), &cfg.despeckle, &a.out)?;
            println!("{}", path.display());
        }
        Command::Features(a) => {
            let mut cfg = a.config.load()?;
            if let Some(p) = &a.season_defs {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let defs: SeasonDefinition = serde_json::from_str(&text)
                    .map_err(|e| sarlc::Error::InvalidArgument(format!("{}: {e}", p.display())))?;
                defs.validate()?;
                cfg.seasons = defs;
            }
            let index = pipeline::build_cubes(&a.scenes, &cfg, &a.out)?;
            println!("{} cubes in {}", index.cubes.len(), a.out.display());
        }
        Command::Dataset(a) => {
            let mut cfg = a.config.load()?;
            let d = &mut cfg.dataset;
            if let Some(rs) = a.random_state {
                d.split = SplitSpec { random_state: rs, ..d.split.clone() };
            }
            d.k = a.k.unwrap_or(d.k);
            d.raw |= a.raw;
            d.allow_empty_classes |= a.allow_empty_classes;
            d.patch_size = a.patch_size.unwrap_or(d.patch_size);
            d.stride = a.stride.unwrap_or(d.stride);
            cfg.validate()?;
            let ds = match a.mode {
                ModeArg::Feature => {
                    cfg.dataset.mode = DatasetMode::Feature;
                    let assignments = a.assignments.as_deref().map(read_assignments).transpose()?;
                    let (cubes, labels) = (a.cubes.as_deref().unwrap_or(Path::new("")), a.labels.as_deref().unwrap_or(Path::new("")));
                    pipeline::build_dataset(cubes, labels, &cfg.dataset, assignments.as_ref(), &a.out)?
                }
                ModeArg::Timeseries => {
                    cfg.dataset.mode = DatasetMode::Timeseries;
                    let scenes = a.scenes.as_deref().unwrap_or(Path::new(""));
                    let (ds, report) =
                        pipeline::build_timeseries_dataset(scenes, &cfg.dataset, &cfg.seasons, &cfg.despeckle, &a.out)?;
                    for e in &report.excluded {
                        eprintln!("excluded {} ({} has {} of {} scenes)", e.tile_id, e.season, e.full_coverage_scenes, e.required);
                    }
                    ds
                }
            };
            println!(
                "{} patches ({} train, {} test), {} channels",
                ds.meta.patches.len(),
                ds.split.train.len(),
                ds.split.test.len(),
                ds.meta.channels
            );
        }
        Command::Train(a) => {
            let mut cfg = a.config.load()?;
            cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
            cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
                cfg.forest.seed = seed;
            }
            cfg.validate()?;
            let ds = Dataset::load(&a.data)?;
            let spec = cfg.model_spec(a.model.name(), ds.meta.channels)?;
            let trained = pipeline::train_on_dataset(&ds, &spec)?;
            pipeline::save_trained(&trained, &a.checkpoint_out)?;
            println!("{}", a.checkpoint_out.display());
        }
        Command::Predict(a) => {
            let trained = pipeline::load_trained(a.model.name(), &a.checkpoint)?;
            let ds = Dataset::load(&a.data)?;
            let n = match &a.cubes {
                Some(cubes) => pipeline::predict_cubes(&trained, &ds.stats, cubes, &a.out)?,
                None => {
                    let subset = match a.split {
                        SubsetArg::Train => Subset::Train,
                        SubsetArg::Test => Subset::Test,
                        SubsetArg::All => Subset::All,
                    };
                    pipeline::predict_patches(&trained, &ds, subset, &a.out)?
                }
            };
            println!("{n} class maps in {}", a.out.display());
        }
        Command::Evaluate(a) => {
            let cm = pipeline::evaluate_paths(&a.pred, &a.truth)?;
            let m = cm.summary()?;
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            m.write_csv(&a.out.join("metrics.csv"))?;
            std::fs::write(a.out.join("confusion.csv"), cm.to_csv())
                .with_context(|| format!("writing {}", a.out.display()))?;
            print_metrics(&m);
        }
        Command::EcoregionCv(a) => {
            let mut cfg = a.config.load()?;
            if let Some(rs) = a.random_state {
                cfg.dataset.split.random_state = rs;
            }
            let ds = Dataset::load(&a.data)?;
            let mut samples = ds.load_patches(&ds.names(Subset::All))?;
            if let Some(p) = &a.assignments {
                samples = read_assignments(p)?.apply(&samples)?;
            }
            let spec = cfg.model_spec(a.model.name(), ds.meta.channels)?;
            let result = ecoregion_cv(&samples, &spec, &cfg.dataset.split)?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            std::fs::write(&a.out, result.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
            print!("{}", result.to_csv());
        }
        Command::Report(a) => {
            let files = sarlc::report::report_from_files(&a.metrics, &a.out)?;
            println!("{}", files.pa_svg.display());
        }
        Command::Pipeline(a) => {
            let cfg = a.config.load()?;
            let out = a.out.unwrap_or_else(|| cfg.io.out_dir.clone());
            let summary = pipeline::run_pipeline(&cfg, &out)?;
            for (name, m) in &summary.metrics {
                print!("{name}: ");
                print_metrics(m);
            }
            if let Some(r) = &summary.ecoregion {
                println!("ecoregion OA diagonal {:.4} off-diagonal {:.4}", r.diagonal_mean(), r.off_diagonal_mean());
            }
        }
    }
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!("OA {:.4} kappa {:.4} F1 {:.4}", m.oa, m.kappa, m.f1);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, exit, msg) = match e.downcast_ref::<sarlc::Error>() {
                Some(err) if err.is_validation() => (err.code(), 3, err.to_string()),
                Some(err) => (err.code(), 1, err.to_string()),
                None => ("runtime", 1, format!("{e:#}")),
            };
            let msg = msg.replace('\n', " ");
            eprintln!("{code}: {msg}");
            ExitCode::from(exit)
        }
    }
}
