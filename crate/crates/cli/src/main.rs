//! Command-line driver for the heterogeneity-aware localization library.
//!
//! Subcommands cover the full pipeline: generate a synthetic world and
//! scan logs, train and adapt models, fit calibration maps, evaluate a
//! model on a scan log, and run the standard experiment matrix.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hetloc::adapt::{self, TransferPlan};
use hetloc::features::{FeatureMode, LinearMap};
use hetloc::harness::{self, ExperimentSpec, Technique};
use hetloc::ingest;
use hetloc::netcore::{DecodeStrategy, MlpConfig, MlpModel, DEFAULT_HEAD};
use hetloc::worldgen::{self, DeviceProfile, World, WorldConfig};

#[derive(Parser)]
#[command(
    name = "hetloc",
    version,
    about = "RSS fingerprinting localization across heterogeneous devices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world (tower layout + grid) and save it as JSON.
    Genworld(GenworldArgs),
    /// Sample a scan log for one device profile in a saved world.
    Gendata(GendataArgs),
    /// Train a model on a scan log.
    Train(TrainArgs),
    /// Fit a per-tower linear calibration map from two co-timed scan logs.
    Calibrate(CalibrateArgs),
    /// Fine-tune a trained model's output head on a slave-device scan log.
    Adapt(AdaptArgs),
    /// Evaluate a model on a scan log and report error percentiles.
    Evaluate(EvaluateArgs),
    /// Run the standard experiment matrix and write report files.
    Matrix(MatrixArgs),
}

#[derive(Args)]
struct GenworldArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 500.0)]
    width: f64,
    #[arg(long, default_value_t = 400.0)]
    height: f64,
    #[arg(long, default_value_t = 100.0)]
    cell_size: f64,
    #[arg(long, default_value_t = 25)]
    towers: usize,
    #[arg(long, default_value_t = -40.0)]
    tx_power_dbm: f64,
    #[arg(long, default_value_t = 3.0)]
    path_loss_exponent: f64,
    #[arg(long, default_value_t = 4.0)]
    shadowing_sigma_db: f64,
    #[arg(long, default_value_t = -110.0)]
    hearability_floor_dbm: f64,
    /// Output path for the world JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    device_id: String,
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
    #[arg(long, default_value_t = 0.0)]
    offset_db: f64,
    #[arg(long, default_value_t = 0.0)]
    per_tower_jitter_db: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma_db: f64,
}

impl ProfileArgs {
    fn profile(&self) -> DeviceProfile {
        DeviceProfile {
            gain: self.gain,
            offset_db: self.offset_db,
            per_tower_jitter_db: self.per_tower_jitter_db,
            noise_sigma_db: self.noise_sigma_db,
            ..DeviceProfile::ideal(&self.device_id)
        }
    }
}

#[derive(Args)]
struct GendataArgs {
    /// Path to a world JSON file produced by `genworld`.
    #[arg(long)]
    world: PathBuf,
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long, default_value_t = 40)]
    samples_per_cell: usize,
    /// Stream seed; the same seed yields co-located, co-timed streams
    /// across device profiles.
    #[arg(long, default_value_t = 1)]
    stream_seed: u64,
    /// Output path for the scan log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    world: PathBuf,
    /// Scan log to train on.
    #[arg(long)]
    scans: PathBuf,
    /// Feature mode: raw, ratio or difference.
    #[arg(long, default_value = "raw")]
    mode: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    learning_rate: f64,
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.10)]
    dropout_rate: f64,
    /// Output path for the model JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    world: PathBuf,
    /// Master-device scan log.
    #[arg(long)]
    master: PathBuf,
    /// Slave-device scan log, co-timed with the master log.
    #[arg(long)]
    slave: PathBuf,
    /// Nearest-timestamp pairing window in seconds.
    #[arg(long, default_value_t = 2)]
    window_s: i64,
    /// Output path for the calibration map JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    world: PathBuf,
    /// Base model to adapt.
    #[arg(long)]
    model: PathBuf,
    /// Slave-device scan log to fine-tune on.
    #[arg(long)]
    scans: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Fine-tune learning rate; defaults to the base model's rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Start from the base model's head instead of a fresh one.
    #[arg(long)]
    warm_start: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Scan log to evaluate on.
    #[arg(long)]
    scans: PathBuf,
    /// Optional calibration map applied before the model's feature mode.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Decode strategy: argmax or center_of_mass.
    #[arg(long, default_value = "argmax")]
    strategy: String,
    /// Model head to evaluate through.
    #[arg(long, default_value = DEFAULT_HEAD)]
    head: String,
    /// Optional output path for a per-sample error CSV.
    #[arg(long)]
    errors_out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Matrix seed; required so every run is reproducible.
    #[arg(long)]
    seed: u64,
    /// Directory for results.csv, summary.csv and per-experiment CDFs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 40)]
    train_samples_per_cell: usize,
    #[arg(long, default_value_t = 50)]
    calibration_samples_per_cell: usize,
    #[arg(long, default_value_t = 25)]
    test_samples_per_cell: usize,
    /// Restrict the matrix to one technique (repeatable).
    #[arg(long)]
    technique: Vec<String>,
}

fn load_world(path: &Path) -> Result<World> {
    let file =
        File::open(path).with_context(|| format!("opening world file {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing world file {}", path.display()))
}

fn load_scans(path: &Path) -> Result<Vec<hetloc::RssScan>> {
    let file = File::open(path).with_context(|| format!("opening scan log {}", path.display()))?;
    let (scans, diagnostics) = ingest::parse_scan_log(BufReader::new(file))?;
    for d in &diagnostics {
        eprintln!(
            "{}:{}: {:?}: {}",
            path.display(),
            d.line,
            d.severity,
            d.reason
        );
    }
    if scans.is_empty() {
        bail!("{}: no usable scans", path.display());
    }
    Ok(scans)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn genworld(args: &GenworldArgs) -> Result<()> {
    let world = worldgen::generate_world(WorldConfig {
        width: args.width,
        height: args.height,
        cell_size: args.cell_size,
        tower_count: args.towers,
        tx_power_dbm: args.tx_power_dbm,
        path_loss_exponent: args.path_loss_exponent,
        shadowing_sigma_db: args.shadowing_sigma_db,
        hearability_floor_dbm: args.hearability_floor_dbm,
        seed: args.seed,
    })?;
    write_json(&args.out, &world)?;
    println!(
        "world: {} towers, {} cells ({}x{} m), written to {}",
        world.inventory.tower_count(),
        world.grid.cell_count(),
        world.config.width,
        world.config.height,
        args.out.display()
    );
    Ok(())
}

fn gendata(args: &GendataArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let scans = worldgen::generate_scans(
        &world,
        &args.profile.profile(),
        args.samples_per_cell,
        args.stream_seed,
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = BufWriter::new(File::create(&args.out)?);
    ingest::write_scan_log(&mut out, &scans)?;
    println!("{} scans written to {}", scans.len(), args.out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let scans = load_scans(&args.scans)?;
    let mode: FeatureMode = args.mode.parse().map_err(anyhow::Error::msg)?;
    let data = ingest::build_dataset(&scans, &world.inventory, &world.grid, mode, None)?;
    let mut config = MlpConfig::reference(
        mode.vector_len(world.inventory.tower_count()),
        world.grid.cell_count(),
        args.seed,
    );
    config.epochs = args.epochs;
    config.learning_rate = args.learning_rate;
    config.batch_size = args.batch_size;
    config.dropout_rate = args.dropout_rate;
    let mut model = MlpModel::init(config)?;
    let log = model.train(&data, DEFAULT_HEAD)?;
    model.save(&args.out)?;
    println!(
        "trained on {} samples: loss {:.4} -> {:.4}, model written to {}",
        data.len(),
        log.first().copied().unwrap_or(f64::NAN),
        log.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let master = load_scans(&args.master)?;
    let slave = load_scans(&args.slave)?;
    let map = ingest::fit_calibration(&master, &slave, &world.inventory, args.window_s)?;
    let fitted = map
        .coefficients
        .iter()
        .zip(&map.identity_fallback)
        .filter(|(_, fallback)| !**fallback)
        .count();
    write_json(&args.out, &map)?;
    println!(
        "calibration map: {} of {} towers fitted, written to {}",
        fitted,
        map.coefficients.len(),
        args.out.display()
    );
    Ok(())
}

fn adapt(args: &AdaptArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let base = MlpModel::load(&args.model)?;
    let scans = load_scans(&args.scans)?;
    let mode = base.feature_mode().unwrap_or(FeatureMode::Raw);
    let data = ingest::build_dataset(&scans, &world.inventory, &world.grid, mode, None)?;
    let mut plan = TransferPlan::new(&base, &data);
    plan.fine_tune_epochs = args.epochs;
    if let Some(rate) = args.learning_rate {
        plan.fine_tune_rate = rate;
    }
    plan.copy_base_head = args.warm_start;
    let model = adapt::transfer_fine_tune(&plan)?;
    model.save(&args.out)?;
    println!(
        "fine-tuned head on {} samples, model written to {}",
        data.len(),
        args.out.display()
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let model = MlpModel::load(&args.model)?;
    let scans = load_scans(&args.scans)?;
    let strategy: DecodeStrategy = args.strategy.parse().map_err(anyhow::Error::msg)?;
    let map: Option<LinearMap> = match &args.calibration {
        Some(path) => {
            let file = File::open(path)
                .with_context(|| format!("opening calibration map {}", path.display()))?;
            Some(serde_json::from_reader(BufReader::new(file))?)
        }
        None => None,
    };
    let mode = model.feature_mode().unwrap_or(FeatureMode::Raw);
    let data = ingest::build_dataset(&scans, &world.inventory, &world.grid, mode, map.as_ref())?;
    let mut errors: Vec<f64> = data
        .samples
        .iter()
        .map(|s| {
            let p =
                model.predict_location(&s.features.values, &args.head, &world.grid, strategy)?;
            Ok(((p.0 - s.position.0).powi(2) + (p.1 - s.position.1).powi(2)).sqrt())
        })
        .collect::<hetloc::Result<_>>()?;
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p25 = harness::percentile(&errors, 25.0);
    let p50 = harness::percentile(&errors, 50.0);
    let p75 = harness::percentile(&errors, 75.0);
    println!(
        "{} samples  p25 {p25:.1} m  p50 {p50:.1} m  p75 {p75:.1} m",
        errors.len()
    );
    if let Some(path) = &args.errors_out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut csv = String::from("error_m\n");
        for e in &errors {
            csv.push_str(&format!("{e}\n"));
        }
        fs::write(path, csv)?;
    }
    Ok(())
}

fn matrix(args: &MatrixArgs) -> Result<bool> {
    let world = worldgen::generate_world(WorldConfig {
        seed: args.seed,
        ..WorldConfig::default()
    })?;
    let profiles = harness::standard_profiles();
    let techniques: Vec<Technique> = args
        .technique
        .iter()
        .map(|t| t.parse::<Technique>().map_err(anyhow::Error::msg))
        .collect::<Result<_>>()?;
    let specs: Vec<ExperimentSpec> = harness::standard_matrix(args.seed)
        .into_iter()
        .filter(|s| techniques.is_empty() || techniques.contains(&s.technique))
        .map(|mut s| {
            s.epochs = args.epochs;
            s.train_samples_per_cell = args.train_samples_per_cell;
            s.calibration_samples_per_cell = args.calibration_samples_per_cell;
            s.test_samples_per_cell = args.test_samples_per_cell;
            s
        })
        .collect();
    let rows = harness::run_matrix(&world, &profiles, &specs, Some(&args.out))?;
    let mut all_ok = true;
    for (spec, report) in &rows {
        match report {
            Ok(r) => println!(
                "{} {}: p25 {:.1} m  p50 {:.1} m  p75 {:.1} m",
                spec.name, spec.technique, r.p25, r.p50, r.p75
            ),
            Err(e) => {
                all_ok = false;
                eprintln!("{} {}: FAILED: {e}", spec.name, spec.technique);
            }
        }
    }
    println!("reports written under {}", args.out.display());
    Ok(all_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Genworld(a) => genworld(a).map(|()| true),
        Command::Gendata(a) => gendata(a).map(|()| true),
        Command::Train(a) => train(a).map(|()| true),
        Command::Calibrate(a) => calibrate(a).map(|()| true),
        Command::Adapt(a) => adapt(a).map(|()| true),
        Command::Evaluate(a) => evaluate(a).map(|()| true),
        Command::Matrix(a) => matrix(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
