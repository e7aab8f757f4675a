//! Core domain types: tower inventory, scans, grid geometry, datasets.
//!
//! All types here are immutable after construction and safe to share
//! across threads.

use serde::{Deserialize, Serialize};

use crate::features::FeatureVector;
use crate::{Error, Result};

/// Planar position in the local meter frame.
pub type Position = (f64, f64);

/// Ordered set of the cell-tower identifiers detectable in the area.
///
/// Ids are kept unique and sorted so that feature index assignment is a
/// pure function of the input set, regardless of ingestion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerInventory {
    ids: Vec<String>,
}

impl TowerInventory {
    /// Builds an inventory from any iterable of ids; duplicates are
    /// collapsed and the result is sorted.
    pub fn new<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        ids.sort();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "tower inventory needs at least 2 towers, got {}",
                ids.len()
            )));
        }
        Ok(Self { ids })
    }

    /// Number of towers (the feature-vector width in raw mode).
    pub fn tower_count(&self) -> usize {
        self.ids.len()
    }

    /// Feature index of a tower id, if present.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .ok()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// One timestamped RSS observation from one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssScan {
    pub device_id: String,
    pub timestamp: i64,
    /// Ground-truth position in meters.
    pub position: Position,
    /// (tower id, RSS dBm) pairs, at most 7 per the cellular standard.
    pub readings: Vec<(String, f64)>,
}

pub const MAX_READINGS_PER_SCAN: usize = 7;

impl RssScan {
    pub fn new(
        device_id: impl Into<String>,
        timestamp: i64,
        position: Position,
        readings: Vec<(String, f64)>,
    ) -> Result<Self> {
        if readings.is_empty() || readings.len() > MAX_READINGS_PER_SCAN {
            return Err(Error::InvalidArgument(format!(
                "scan must carry 1..={MAX_READINGS_PER_SCAN} readings, got {}",
                readings.len()
            )));
        }
        for (i, (id, _)) in readings.iter().enumerate() {
            if readings[..i].iter().any(|(other, _)| other == id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate tower id '{id}' within one scan"
                )));
            }
        }
        Ok(Self {
            device_id: device_id.into(),
            timestamp,
            position,
            readings,
        })
    }
}

/// Partition of the area into equally-sized square cells. Cell centers are
/// the reference locations the classifier predicts over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub origin: Position,
    pub cell_size: f64,
    pub cols: usize,
    pub rows: usize,
}

impl Grid {
    pub fn new(origin: Position, cell_size: f64, cols: usize, rows: usize) -> Result<Self> {
        if cell_size <= 0.0 || cols == 0 || rows == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs cell_size > 0 and positive dimensions, got {cell_size} x {cols} x {rows}"
            )));
        }
        Ok(Self {
            origin,
            cell_size,
            cols,
            rows,
        })
    }

    /// Number of reference locations.
    pub fn cell_count(&self) -> usize {
        self.cols * self.rows
    }

    /// Row-major index of the cell containing `position`. Border positions
    /// resolve by floor semantics; positions outside the bounding box are
    /// clamped to the nearest border cell. Total and deterministic.
    pub fn cell_of(&self, position: Position) -> usize {
        let col = ((position.0 - self.origin.0) / self.cell_size).floor();
        let row = ((position.1 - self.origin.1) / self.cell_size).floor();
        let col = (col.max(0.0) as usize).min(self.cols - 1);
        let row = (row.max(0.0) as usize).min(self.rows - 1);
        row * self.cols + col
    }

    /// Geometric center of cell `cell`.
    pub fn cell_center(&self, cell: usize) -> Result<Position> {
        if cell >= self.cell_count() {
            return Err(Error::InvalidArgument(format!(
                "cell index {cell} out of range (K = {})",
                self.cell_count()
            )));
        }
        let col = cell % self.cols;
        let row = cell / self.cols;
        Ok((
            self.origin.0 + (col as f64 + 0.5) * self.cell_size,
            self.origin.1 + (row as f64 + 0.5) * self.cell_size,
        ))
    }

    pub fn width(&self) -> f64 {
        self.cols as f64 * self.cell_size
    }

    pub fn height(&self) -> f64 {
        self.rows as f64 * self.cell_size
    }
}

/// One labeled training/test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector,
    /// Cell index in `[0, K)`.
    pub label: usize,
    pub device_id: String,
    pub position: Position,
}

/// A labeled collection of feature vectors over one inventory and grid.
/// Feature mode is uniform within a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub inventory: TowerInventory,
    pub grid: Grid,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(inventory: TowerInventory, grid: Grid, samples: Vec<Sample>) -> Result<Self> {
        let k = grid.cell_count();
        if let Some(first) = samples.first() {
            let mode = first.features.mode;
            let len = first.features.values.len();
            for s in &samples {
                if s.label >= k {
                    return Err(Error::InvalidArgument(format!(
                        "label {} out of range (K = {k})",
                        s.label
                    )));
                }
                if s.features.mode != mode || s.features.values.len() != len {
                    return Err(Error::InvalidArgument(
                        "feature mode and length must be uniform within a dataset".into(),
                    ));
                }
            }
            let m = inventory.tower_count();
            let expected = mode.vector_len(m);
            if len != expected {
                return Err(Error::InvalidArgument(format!(
                    "feature length {len} does not match mode {mode:?} over {m} towers (expected {expected})"
                )));
            }
        }
        Ok(Self {
            inventory,
            grid,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature width of the dataset (input width of a model trained on it).
    pub fn feature_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.values.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2x2() -> Grid {
        Grid::new((0.0, 0.0), 100.0, 2, 2).unwrap()
    }

    #[test]
    fn cell_of_interior() {
        let g = grid2x2();
        assert_eq!(g.cell_of((50.0, 50.0)), 0);
        assert_eq!(g.cell_of((150.0, 150.0)), 3);
    }

    #[test]
    fn cell_of_boundary_floor_semantics() {
        let g = grid2x2();
        // boundary x=100 lands in column 1; cross-check against the
        // nearest-center oracle with the tie resolved toward higher index
        assert_eq!(g.cell_of((100.0, 0.0)), 1);
        let oracle = (0..g.cell_count())
            .min_by(|&a, &b| {
                let da = dist((100.0, 0.0), g.cell_center(a).unwrap());
                let db = dist((100.0, 0.0), g.cell_center(b).unwrap());
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(g.cell_of((100.0, 0.0)), oracle);
    }

    #[test]
    fn cell_of_clamps_outside_box() {
        let g = grid2x2();
        assert_eq!(g.cell_of((-10.0, -10.0)), 0);
        assert_eq!(g.cell_of((1000.0, 1000.0)), 3);
        assert_eq!(g.cell_of((50.0, 1000.0)), 2);
    }

    #[test]
    fn cell_center_roundtrip() {
        let g = Grid::new((-30.0, 70.0), 55.0, 4, 3).unwrap();
        for c in 0..g.cell_count() {
            assert_eq!(g.cell_of(g.cell_center(c).unwrap()), c);
        }
        assert!(g.cell_center(g.cell_count()).is_err());
    }

    #[test]
    fn cell_center_values() {
        let g = grid2x2();
        assert_eq!(g.cell_center(0).unwrap(), (50.0, 50.0));
        assert_eq!(g.cell_center(3).unwrap(), (150.0, 150.0));
    }

    #[test]
    fn center_within_half_diagonal() {
        let g = Grid::new((0.0, 0.0), 100.0, 5, 4).unwrap();
        let bound = g.cell_size * std::f64::consts::SQRT_2 / 2.0 + 1e-9;
        let mut rng = crate::rng::seeded(7);
        use rand::Rng;
        for _ in 0..1000 {
            let p = (
                rng.random_range(0.0..g.width()),
                rng.random_range(0.0..g.height()),
            );
            let c = g.cell_center(g.cell_of(p)).unwrap();
            assert!(dist(p, c) <= bound);
        }
    }

    #[test]
    fn inventory_sorted_unique() {
        let inv = TowerInventory::new(["b", "a", "c", "a"]).unwrap();
        assert_eq!(inv.ids(), &["a", "b", "c"]);
        assert_eq!(inv.tower_count(), 3);
        assert_eq!(inv.index_of("b"), Some(1));
        assert_eq!(inv.index_of("z"), None);
        assert!(TowerInventory::new(["only"]).is_err());
    }

    #[test]
    fn scan_rejects_duplicates_and_overflow() {
        assert!(RssScan::new(
            "d",
            0,
            (0.0, 0.0),
            vec![("a".into(), -70.0), ("a".into(), -71.0)]
        )
        .is_err());
        let eight = (0..8).map(|i| (format!("t{i}"), -70.0)).collect();
        assert!(RssScan::new("d", 0, (0.0, 0.0), eight).is_err());
        assert!(RssScan::new("d", 0, (0.0, 0.0), vec![]).is_err());
    }

    fn dist(a: Position, b: Position) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }
}
