//! Synthetic scenario generator: random tower placement, log-distance
//! path loss with log-normal shadowing, per-device affine distortion and
//! coverage-limited scan sampling.
//!
//! The channel (path loss + shadowing) is a function of (position,
//! tower, timestamp) only, so two devices sampled at the same place and
//! time see the same channel and differ purely by their distortion
//! profiles. That makes co-timed scan streams usable for calibration
//! pairing.

use serde::{Deserialize, Serialize};

use crate::domain::{
    Dataset, Grid, Position, RssScan, Sample, TowerInventory, MAX_READINGS_PER_SCAN,
};
use crate::features::{vectorize, FeatureVector};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Area size in meters.
    pub width: f64,
    pub height: f64,
    pub cell_size: f64,
    pub tower_count: usize,
    /// Transmit power observed at the 1 m reference distance, in dBm.
    pub tx_power_dbm: f64,
    pub path_loss_exponent: f64,
    pub shadowing_sigma_db: f64,
    pub hearability_floor_dbm: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 500.0,
            height: 400.0,
            cell_size: 100.0,
            tower_count: 25,
            tx_power_dbm: -40.0,
            path_loss_exponent: 3.0,
            shadowing_sigma_db: 4.0,
            hearability_floor_dbm: -110.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tower_count < 2 {
            return Err(Error::InvalidConfig("world needs at least 2 towers".into()));
        }
        if self.width <= 0.0 || self.height <= 0.0 || self.cell_size <= 0.0 {
            return Err(Error::InvalidConfig(
                "area and cell size must be positive".into(),
            ));
        }
        if self.shadowing_sigma_db < 0.0 {
            return Err(Error::InvalidConfig("shadowing sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Distortion model of one phone: affine-in-dBm with optional fixed
/// per-tower offsets and per-reading noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    /// Multiplicative slope on the dBm value.
    pub gain: f64,
    /// Additive dB offset.
    pub offset_db: f64,
    /// Std-dev of the fixed per-tower offsets, drawn once per device.
    pub per_tower_jitter_db: f64,
    /// Std-dev of the per-reading noise.
    pub noise_sigma_db: f64,
}

impl DeviceProfile {
    pub fn ideal(device_id: impl Into<String>) -> Self {
        Self {
            device_id: device_id.into(),
            gain: 1.0,
            offset_db: 0.0,
            per_tower_jitter_db: 0.0,
            noise_sigma_db: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain <= 0.0 {
            return Err(Error::InvalidConfig("device gain must be positive".into()));
        }
        Ok(())
    }
}

/// A generated world: tower positions, the inventory over them and the
/// evaluation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub towers: Vec<Position>,
    pub inventory: TowerInventory,
    pub grid: Grid,
}

/// Places `tower_count` towers uniformly at random in the area.
/// Deterministic per seed.
pub fn generate_world(config: WorldConfig) -> Result<World> {
    config.validate()?;
    use rand::Rng;
    let mut r = rng::seeded(rng::mix(config.seed, &[rng::hash_str("world")]));
    let towers: Vec<Position> = (0..config.tower_count)
        .map(|_| {
            (
                r.random_range(0.0..config.width),
                r.random_range(0.0..config.height),
            )
        })
        .collect();
    // zero-padded ids keep lexicographic order aligned with tower index
    let ids: Vec<String> = (0..config.tower_count)
        .map(|i| format!("T{i:04}"))
        .collect();
    let inventory = TowerInventory::new(ids)?;
    let cols = (config.width / config.cell_size).round().max(1.0) as usize;
    let rows = (config.height / config.cell_size).round().max(1.0) as usize;
    let grid = Grid::new((0.0, 0.0), config.cell_size, cols, rows)?;
    Ok(World {
        config,
        towers,
        inventory,
        grid,
    })
}

impl World {
    /// Channel RSS (before device distortion) from tower `t` at
    /// `position` and `timestamp`: log-distance path loss plus a
    /// shadowing draw shared by all devices at that (tower, timestamp).
    pub fn channel_rss(&self, t: usize, position: Position, timestamp: i64) -> f64 {
        let (tx, ty) = self.towers[t];
        let d = ((position.0 - tx).powi(2) + (position.1 - ty).powi(2))
            .sqrt()
            .max(1.0);
        let ideal = self.config.tx_power_dbm - 10.0 * self.config.path_loss_exponent * d.log10();
        let shadow_seed = rng::mix(
            self.config.seed,
            &[rng::hash_str("shadow"), t as u64, timestamp as u64],
        );
        ideal
            + rng::normal(
                &mut rng::seeded(shadow_seed),
                0.0,
                self.config.shadowing_sigma_db,
            )
    }

    fn contains(&self, p: Position) -> bool {
        (0.0..=self.config.width).contains(&p.0) && (0.0..=self.config.height).contains(&p.1)
    }
}

/// Fixed per-tower offset of a device, drawn once per (device, tower).
fn tower_jitter(world: &World, profile: &DeviceProfile, t: usize) -> f64 {
    if profile.per_tower_jitter_db == 0.0 {
        return 0.0;
    }
    let seed = rng::mix(
        world.config.seed,
        &[
            rng::hash_str("jitter"),
            rng::hash_str(&profile.device_id),
            t as u64,
        ],
    );
    rng::normal(&mut rng::seeded(seed), 0.0, profile.per_tower_jitter_db)
}

/// Samples one scan: per-tower channel RSS distorted by the device
/// profile, towers below the hearability floor dropped, and at most the
/// 7 strongest kept. The strongest tower always survives.
pub fn sample_scan(
    world: &World,
    profile: &DeviceProfile,
    position: Position,
    timestamp: i64,
) -> Result<RssScan> {
    if !world.contains(position) {
        return Err(Error::InvalidArgument(format!(
            "position {position:?} lies outside the {} x {} area",
            world.config.width, world.config.height
        )));
    }
    let mut readings: Vec<(usize, f64)> = (0..world.config.tower_count)
        .map(|t| {
            let channel = world.channel_rss(t, position, timestamp);
            let noise_seed = rng::mix(
                world.config.seed,
                &[
                    rng::hash_str("noise"),
                    rng::hash_str(&profile.device_id),
                    t as u64,
                    timestamp as u64,
                ],
            );
            let noise = rng::normal(&mut rng::seeded(noise_seed), 0.0, profile.noise_sigma_db);
            let rss = profile.gain * channel
                + profile.offset_db
                + tower_jitter(world, profile, t)
                + noise;
            (t, rss)
        })
        .collect();
    readings.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let floor = world.config.hearability_floor_dbm;
    let heard: Vec<(usize, f64)> = readings
        .iter()
        .enumerate()
        .filter(|&(rank, &(_, rss))| rank == 0 || rss >= floor)
        .take(MAX_READINGS_PER_SCAN)
        .map(|(_, &r)| r)
        .collect();
    let readings = heard
        .into_iter()
        .map(|(t, rss)| (world.inventory.ids()[t].clone(), rss))
        .collect();
    RssScan::new(&profile.device_id, timestamp, position, readings)
}

/// Draws `samples_per_cell` uniform positions in every grid cell and
/// samples a scan at each. Positions and timestamps depend only on
/// (world seed, stream_seed), so calling this with the same stream seed
/// and different profiles yields co-located, co-timed scan streams.
pub fn generate_scans(
    world: &World,
    profile: &DeviceProfile,
    samples_per_cell: usize,
    stream_seed: u64,
) -> Result<Vec<RssScan>> {
    if samples_per_cell == 0 {
        return Err(Error::InvalidArgument(
            "samples_per_cell must be >= 1".into(),
        ));
    }
    profile.validate()?;
    use rand::Rng;
    let mut r = rng::seeded(rng::mix(
        world.config.seed,
        &[rng::hash_str("stream"), stream_seed],
    ));
    let mut scans = Vec::with_capacity(world.grid.cell_count() * samples_per_cell);
    let mut timestamp = 1_700_000_000 + (stream_seed as i64) * 1_000_000;
    for cell in 0..world.grid.cell_count() {
        let center = world.grid.cell_center(cell)?;
        for _ in 0..samples_per_cell {
            let half = world.config.cell_size / 2.0;
            let p = (
                (center.0 + r.random_range(-half..half)).clamp(0.0, world.config.width),
                (center.1 + r.random_range(-half..half)).clamp(0.0, world.config.height),
            );
            scans.push(sample_scan(world, profile, p, timestamp)?);
            timestamp += 1;
        }
    }
    Ok(scans)
}

/// `generate_scans` followed by vectorization and labeling; samples are
/// shuffled deterministically.
pub fn generate_dataset(
    world: &World,
    profile: &DeviceProfile,
    samples_per_cell: usize,
    stream_seed: u64,
) -> Result<Dataset> {
    let scans = generate_scans(world, profile, samples_per_cell, stream_seed)?;
    let mut samples: Vec<Sample> = scans
        .iter()
        .map(|scan| {
            let (features, _) = vectorize(scan, &world.inventory);
            Sample {
                features,
                label: world.grid.cell_of(scan.position),
                device_id: scan.device_id.clone(),
                position: scan.position,
            }
        })
        .collect();
    let mut r = rng::seeded(rng::mix(
        world.config.seed,
        &[rng::hash_str("dataset-shuffle"), stream_seed],
    ));
    rng::shuffle(&mut r, &mut samples);
    Dataset::new(world.inventory.clone(), world.grid, samples)
}

/// Raw feature vector of every scan, in scan order.
pub fn vectorize_all(world: &World, scans: &[RssScan]) -> Vec<FeatureVector> {
    scans
        .iter()
        .map(|s| vectorize(s, &world.inventory).0)
        .collect()
}
