//! Experiment driver: runs the (train device x test device x technique)
//! matrix on a synthetic world, computes error percentiles and CDFs and
//! writes report files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{self, MultitaskPlan, TransferPlan};
use crate::domain::{Dataset, Position};
use crate::features::FeatureMode;
use crate::ingest;
use crate::netcore::{DecodeStrategy, MlpConfig, MlpModel, DEFAULT_HEAD};
use crate::worldgen::{self, DeviceProfile, World};
use crate::{Error, Result};

/// Heterogeneity handling technique under test. `None` is the disabled
/// baseline: train on the master, test on the slave, no handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    None,
    Linear,
    Ratio,
    Difference,
    Transfer,
    Multitask,
}

impl Technique {
    pub const ALL: [Technique; 6] = [
        Technique::None,
        Technique::Linear,
        Technique::Ratio,
        Technique::Difference,
        Technique::Transfer,
        Technique::Multitask,
    ];

    pub fn needs_calibration(self) -> bool {
        matches!(self, Technique::Linear | Technique::Transfer)
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Technique::None => "none",
            Technique::Linear => "linear",
            Technique::Ratio => "ratio",
            Technique::Difference => "difference",
            Technique::Transfer => "transfer",
            Technique::Multitask => "multitask",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Technique {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Technique::None),
            "linear" => Ok(Technique::Linear),
            "ratio" => Ok(Technique::Ratio),
            "difference" => Ok(Technique::Difference),
            "transfer" => Ok(Technique::Transfer),
            "multitask" => Ok(Technique::Multitask),
            other => Err(Error::InvalidArgument(format!(
                "unknown technique '{other}' (expected none|linear|ratio|difference|transfer|multitask)"
            ))),
        }
    }
}

/// One configuration of the experiment matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub master_device: String,
    pub slave_device: String,
    pub technique: Technique,
    pub strategy: DecodeStrategy,
    pub seed: u64,
    /// Training samples per grid cell (master; also slave for multitask).
    pub train_samples_per_cell: usize,
    /// Calibration/fine-tune samples per cell (the small slave-side set).
    pub calibration_samples_per_cell: usize,
    pub test_samples_per_cell: usize,
    pub epochs: usize,
    /// Nearest-timestamp pairing window for calibration, seconds.
    pub pairing_window_s: i64,
}

impl ExperimentSpec {
    pub fn new(
        name: impl Into<String>,
        master_device: impl Into<String>,
        slave_device: impl Into<String>,
        technique: Technique,
        seed: u64,
    ) -> Self {
        Self {
            name: name.into(),
            master_device: master_device.into(),
            slave_device: slave_device.into(),
            technique,
            strategy: DecodeStrategy::Argmax,
            seed,
            train_samples_per_cell: 40,
            calibration_samples_per_cell: 50,
            test_samples_per_cell: 25,
            epochs: 100,
            pairing_window_s: 2,
        }
    }
}

/// Error distribution of one experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    /// Euclidean error in meters, one per test sample.
    pub errors_m: Vec<f64>,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

impl ExperimentReport {
    fn from_errors(spec: ExperimentSpec, errors_m: Vec<f64>) -> Self {
        let mut sorted = errors_m.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let report = Self {
            spec,
            p25: percentile(&sorted, 25.0),
            p50: percentile(&sorted, 50.0),
            p75: percentile(&sorted, 75.0),
            errors_m,
        };
        debug_assert!(report.p25 <= report.p50 && report.p50 <= report.p75);
        report
    }

    /// (error_m, cumulative_fraction) samples of the error CDF.
    pub fn cdf(&self) -> Vec<(f64, f64)> {
        let mut sorted = self.errors_m.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len() as f64;
        sorted
            .into_iter()
            .enumerate()
            .map(|(i, e)| (e, (i + 1) as f64 / n))
            .collect()
    }
}

/// Percentile by linear interpolation between closest order statistics.
/// `sorted` must be ascending and nonempty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Relative improvement of the enabled technique over the disabled
/// baseline, in percent: (disabled - enabled) / enabled * 100.
pub fn relative_change_percent(enabled: f64, disabled: f64) -> f64 {
    (disabled - enabled) / enabled * 100.0
}

/// Runs one experiment configuration against a synthetic world.
pub fn run_experiment(
    world: &World,
    profiles: &BTreeMap<String, DeviceProfile>,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    let master = profiles.get(&spec.master_device).ok_or_else(|| {
        Error::InvalidConfig(format!("unknown master device '{}'", spec.master_device))
    })?;
    let slave = profiles.get(&spec.slave_device).ok_or_else(|| {
        Error::InvalidConfig(format!("unknown slave device '{}'", spec.slave_device))
    })?;

    // stream seeds: train, calibration and test draw disjoint position
    // streams; calibration streams are co-timed across the two devices
    let train_stream = spec.seed.wrapping_mul(3).wrapping_add(1);
    let calib_stream = spec.seed.wrapping_mul(3).wrapping_add(2);
    let test_stream = spec.seed.wrapping_mul(3).wrapping_add(3);

    let master_train =
        worldgen::generate_dataset(world, master, spec.train_samples_per_cell, train_stream)?;
    let slave_test_scans =
        worldgen::generate_scans(world, slave, spec.test_samples_per_cell, test_stream)?;
    let k = world.grid.cell_count();
    let m = world.inventory.tower_count();

    let config = |input: usize| {
        let mut c = MlpConfig::reference(input, k, spec.seed);
        c.epochs = spec.epochs;
        c
    };

    let measure = |model: &MlpModel, head: &str, test: &Dataset| -> Result<Vec<f64>> {
        test.samples
            .iter()
            .map(|s| {
                let predicted =
                    model.predict_location(&s.features.values, head, &world.grid, spec.strategy)?;
                Ok(euclidean(predicted, s.position))
            })
            .collect()
    };

    let errors = match spec.technique {
        Technique::None => {
            let mut model = MlpModel::init(config(m))?;
            model.train(&master_train, DEFAULT_HEAD)?;
            let test = ingest::build_dataset(
                &slave_test_scans,
                &world.inventory,
                &world.grid,
                FeatureMode::Raw,
                None,
            )?;
            measure(&model, DEFAULT_HEAD, &test)?
        }
        Technique::Linear => {
            let master_calib = worldgen::generate_scans(
                world,
                master,
                spec.calibration_samples_per_cell,
                calib_stream,
            )?;
            let slave_calib = worldgen::generate_scans(
                world,
                slave,
                spec.calibration_samples_per_cell,
                calib_stream,
            )?;
            let map = ingest::fit_calibration(
                &master_calib,
                &slave_calib,
                &world.inventory,
                spec.pairing_window_s,
            )?;
            let mut model = MlpModel::init(config(m))?;
            model.train(&master_train, DEFAULT_HEAD)?;
            let test = ingest::build_dataset(
                &slave_test_scans,
                &world.inventory,
                &world.grid,
                FeatureMode::Raw,
                Some(&map),
            )?;
            measure(&model, DEFAULT_HEAD, &test)?
        }
        Technique::Ratio | Technique::Difference => {
            let mode = if spec.technique == Technique::Ratio {
                FeatureMode::Ratio
            } else {
                FeatureMode::Difference
            };
            let train = transform_dataset(&master_train, mode);
            let mut model = MlpModel::init(config(mode.vector_len(m)))?;
            model.train(&train, DEFAULT_HEAD)?;
            let test = ingest::build_dataset(
                &slave_test_scans,
                &world.inventory,
                &world.grid,
                mode,
                None,
            )?;
            measure(&model, DEFAULT_HEAD, &test)?
        }
        Technique::Transfer => {
            let slave_calib = worldgen::generate_dataset(
                world,
                slave,
                spec.calibration_samples_per_cell,
                calib_stream,
            )?;
            let mut base = MlpModel::init(config(m))?;
            base.train(&master_train, DEFAULT_HEAD)?;
            let mut plan = TransferPlan::new(&base, &slave_calib);
            // warm-start the head from the source model: the small
            // adaptation budget refines it rather than relearning the
            // class layout from scratch
            plan.copy_base_head = true;
            plan.fine_tune_epochs = spec.epochs;
            let model = adapt::transfer_fine_tune(&plan)?;
            let test = ingest::build_dataset(
                &slave_test_scans,
                &world.inventory,
                &world.grid,
                FeatureMode::Raw,
                None,
            )?;
            measure(&model, DEFAULT_HEAD, &test)?
        }
        Technique::Multitask => {
            let slave_train = worldgen::generate_dataset(
                world,
                slave,
                spec.train_samples_per_cell,
                train_stream.wrapping_add(7919),
            )?;
            let mut devices = BTreeMap::new();
            devices.insert(spec.master_device.clone(), &master_train);
            devices.insert(spec.slave_device.clone(), &slave_train);
            let (model, _) = adapt::multitask_train(&MultitaskPlan::new(devices), &config(m))?;
            let test = ingest::build_dataset(
                &slave_test_scans,
                &world.inventory,
                &world.grid,
                FeatureMode::Raw,
                None,
            )?;
            measure(&model, &spec.slave_device, &test)?
        }
    };

    Ok(ExperimentReport::from_errors(spec.clone(), errors))
}

fn transform_dataset(data: &Dataset, mode: FeatureMode) -> Dataset {
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let features = match mode {
                FeatureMode::Ratio => crate::features::power_ratio(&s.features),
                FeatureMode::Difference => crate::features::power_difference(&s.features),
                _ => s.features.clone(),
            };
            crate::domain::Sample {
                features,
                ..s.clone()
            }
        })
        .collect();
    Dataset::new(data.inventory.clone(), data.grid, samples).expect("uniform transform")
}

fn euclidean(a: Position, b: Position) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Outcome of one matrix row: the report, or the failure that row hit.
pub type MatrixRow = (ExperimentSpec, Result<ExperimentReport>);

/// Runs every spec and optionally writes per-spec CDF files, the long
/// results CSV and the per-experiment summary under `out_dir`. Rows that
/// fail are reported per row; completed rows still emit.
pub fn run_matrix(
    world: &World,
    profiles: &BTreeMap<String, DeviceProfile>,
    specs: &[ExperimentSpec],
    out_dir: Option<&Path>,
) -> Result<Vec<MatrixRow>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("empty spec list".into()));
    }
    let rows: Vec<MatrixRow> = specs
        .iter()
        .map(|spec| (spec.clone(), run_experiment(world, profiles, spec)))
        .collect();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_results_csv(&rows, &dir.join("results.csv"))?;
        write_summary_csv(&rows, &dir.join("summary.csv"))?;
        for (spec, report) in &rows {
            if let Ok(report) = report {
                let path = dir.join(format!("cdf_{}_{}.csv", spec.name, spec.technique));
                let mut out = String::from("error_m,cumulative_fraction\n");
                for (e, f) in report.cdf() {
                    out.push_str(&format!("{e},{f}\n"));
                }
                fs::write(path, out)?;
            }
        }
    }
    Ok(rows)
}

fn write_results_csv(rows: &[MatrixRow], path: &Path) -> Result<()> {
    let mut out = String::from("experiment,technique,percentile,error_m\n");
    for (spec, report) in rows {
        if let Ok(r) = report {
            for (p, v) in [(25, r.p25), (50, r.p50), (75, r.p75)] {
                out.push_str(&format!("{},{},{p},{v}\n", spec.name, spec.technique));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-experiment summary: the best enabled technique's
/// percentiles and the disabled baseline's, with the relative change of
/// disabled vs best enabled per percentile.
fn write_summary_csv(rows: &[MatrixRow], path: &Path) -> Result<()> {
    let mut out =
        String::from("experiment,handling,technique,p25_m,p50_m,p75_m,p25_change_pct,p50_change_pct,p75_change_pct\n");
    let mut by_experiment: BTreeMap<&str, Vec<&ExperimentReport>> = BTreeMap::new();
    for (spec, report) in rows {
        if let Ok(r) = report {
            by_experiment.entry(spec.name.as_str()).or_default().push(r);
        }
    }
    for (name, reports) in by_experiment {
        let disabled = reports.iter().find(|r| r.spec.technique == Technique::None);
        let enabled = reports
            .iter()
            .filter(|r| r.spec.technique != Technique::None)
            .min_by(|a, b| a.p50.partial_cmp(&b.p50).unwrap());
        if let (Some(d), Some(e)) = (disabled, enabled) {
            out.push_str(&format!(
                "{name},enabled,{},{:.1},{:.1},{:.1},,,\n",
                e.spec.technique, e.p25, e.p50, e.p75
            ));
            out.push_str(&format!(
                "{name},disabled,none,{:.1},{:.1},{:.1},{:.1},{:.1},{:.1}\n",
                d.p25,
                d.p50,
                d.p75,
                relative_change_percent(e.p25, d.p25),
                relative_change_percent(e.p50, d.p50),
                relative_change_percent(e.p75, d.p75),
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// The profiles of the four-experiment synthetic analog: devices a/b
/// differ by a mild affine distortion (urban analog, experiments I/II),
/// devices c/d by a strong affine plus per-tower jitter (rural analog,
/// III/IV).
pub fn standard_profiles() -> BTreeMap<String, DeviceProfile> {
    let mut p = BTreeMap::new();
    p.insert("device_a".into(), DeviceProfile::ideal("device_a"));
    p.insert(
        "device_b".into(),
        DeviceProfile {
            gain: 1.05,
            offset_db: 10.0,
            ..DeviceProfile::ideal("device_b")
        },
    );
    p.insert("device_c".into(), DeviceProfile::ideal("device_c"));
    p.insert(
        "device_d".into(),
        DeviceProfile {
            gain: 1.2,
            offset_db: -15.0,
            per_tower_jitter_db: 3.0,
            ..DeviceProfile::ideal("device_d")
        },
    );
    p
}

/// The four-experiment matrix (I: a->b, II: b->a, III: c->d, IV: d->c)
/// over every technique, with per-spec seeds derived from `seed`.
pub fn standard_matrix(seed: u64) -> Vec<ExperimentSpec> {
    let pairs = [
        ("I", "device_a", "device_b"),
        ("II", "device_b", "device_a"),
        ("III", "device_c", "device_d"),
        ("IV", "device_d", "device_c"),
    ];
    let mut specs = Vec::new();
    for (i, (name, master, slave)) in pairs.iter().enumerate() {
        for technique in Technique::ALL {
            specs.push(ExperimentSpec::new(
                *name,
                *master,
                *slave,
                technique,
                seed.wrapping_add(i as u64),
            ));
        }
    }
    specs
}
