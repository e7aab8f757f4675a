//! Feature vector construction and the traditional heterogeneity
//! techniques: per-tower linear calibration, power ratio and power
//! difference.
//!
//! All transforms operate on the stored dBm values directly. Unheard
//! towers carry the zero sentinel, and every transform preserves it: any
//! output position derived from an unheard tower is exactly 0.

use serde::{Deserialize, Serialize};

use crate::domain::{RssScan, TowerInventory};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Raw,
    Calibrated,
    Ratio,
    Difference,
}

impl FeatureMode {
    /// Feature-vector length for this mode over `m` towers.
    pub fn vector_len(self, m: usize) -> usize {
        match self {
            FeatureMode::Raw | FeatureMode::Calibrated => m,
            FeatureMode::Ratio | FeatureMode::Difference => m * (m - 1) / 2,
        }
    }

    /// True for the pairwise (ratio/difference) expansions.
    pub fn is_pairwise(self) -> bool {
        matches!(self, FeatureMode::Ratio | FeatureMode::Difference)
    }

    /// Whether vectors of this mode can feed a model trained on `other`.
    /// Raw and calibrated vectors live in the same per-tower RSS space;
    /// the pairwise expansions are each their own space.
    pub fn compatible(self, other: FeatureMode) -> bool {
        self == other || (!self.is_pairwise() && !other.is_pairwise())
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(FeatureMode::Raw),
            "calibrated" => Ok(FeatureMode::Calibrated),
            "ratio" => Ok(FeatureMode::Ratio),
            "difference" => Ok(FeatureMode::Difference),
            other => Err(Error::InvalidArgument(format!(
                "unknown feature mode '{other}' (expected raw|calibrated|ratio|difference)"
            ))),
        }
    }
}

/// Fixed-length real feature vector with its construction mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub mode: FeatureMode,
}

/// Flattened index of pair (i, j), i < j, in lexicographic pair order
/// (r_{1,2}, r_{1,3}, ..., r_{M-1,M}).
pub fn pair_index(m: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < m);
    i * m - i * (i + 1) / 2 + (j - i - 1)
}

/// Builds the raw feature vector for a scan: `values[k]` is the RSS of
/// inventory tower `k` if heard, else 0. Readings from towers outside the
/// inventory are dropped; the count of dropped readings is returned.
pub fn vectorize(scan: &RssScan, inventory: &TowerInventory) -> (FeatureVector, usize) {
    let mut values = vec![0.0; inventory.tower_count()];
    let mut dropped = 0;
    for (id, rss) in &scan.readings {
        match inventory.index_of(id) {
            Some(k) => values[k] = *rss,
            None => dropped += 1,
        }
    }
    (
        FeatureVector {
            values,
            mode: FeatureMode::Raw,
        },
        dropped,
    )
}

/// Per-tower affine map from slave RSS to master RSS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    /// One (slope, intercept) per tower, in inventory order.
    pub coefficients: Vec<(f64, f64)>,
    /// Co-heard pair count used for each tower's fit.
    pub sample_counts: Vec<usize>,
    /// Towers that fell back to the identity map (fewer than 2 usable
    /// pairs, or degenerate slave variance).
    pub identity_fallback: Vec<bool>,
}

impl LinearMap {
    pub fn identity(m: usize) -> Self {
        Self {
            coefficients: vec![(1.0, 0.0); m],
            sample_counts: vec![0; m],
            identity_fallback: vec![true; m],
        }
    }
}

/// Fits a per-tower ordinary-least-squares line mapping slave RSS to
/// master RSS from co-located, co-timed raw vector pairs. Only entries
/// heard by both devices (both nonzero) feed a tower's fit; towers with
/// fewer than 2 usable pairs keep the identity map.
pub fn fit_linear_map(paired: &[(FeatureVector, FeatureVector)]) -> Result<LinearMap> {
    if paired.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit a linear map from an empty pair list".into(),
        ));
    }
    let m = paired[0].0.values.len();
    for (master, slave) in paired {
        if master.values.len() != m || slave.values.len() != m {
            return Err(Error::InvalidArgument(
                "all paired vectors must share one length".into(),
            ));
        }
    }
    let mut map = LinearMap::identity(m);
    for t in 0..m {
        let points: Vec<(f64, f64)> = paired
            .iter()
            .filter(|(master, slave)| master.values[t] != 0.0 && slave.values[t] != 0.0)
            .map(|(master, slave)| (slave.values[t], master.values[t]))
            .collect();
        map.sample_counts[t] = points.len();
        if points.len() < 2 {
            continue;
        }
        let n = points.len() as f64;
        let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
        let var_x = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum::<f64>();
        if var_x == 0.0 {
            continue; // all slave readings equal; keep identity, stay flagged
        }
        let cov = points
            .iter()
            .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
            .sum::<f64>();
        let slope = cov / var_x;
        map.coefficients[t] = (slope, mean_y - slope * mean_x);
        map.identity_fallback[t] = false;
    }
    Ok(map)
}

/// Maps a slave raw vector into master RSS space. Heard entries become
/// `slope * value + intercept`; zero entries stay exactly 0.
pub fn apply_linear_map(map: &LinearMap, slave: &FeatureVector) -> FeatureVector {
    let values = slave
        .values
        .iter()
        .zip(&map.coefficients)
        .map(|(&v, &(slope, intercept))| if v == 0.0 { 0.0 } else { slope * v + intercept })
        .collect();
    FeatureVector {
        values,
        mode: FeatureMode::Calibrated,
    }
}

/// Pairwise power ratio r_{i,j} = f_i / f_j over all tower pairs in
/// lexicographic order; 0 if either operand is unheard.
pub fn power_ratio(x: &FeatureVector) -> FeatureVector {
    pairwise(x, FeatureMode::Ratio, |a, b| a / b)
}

/// Pairwise power difference d_{i,j} = f_i - f_j; 0 if either operand is
/// unheard.
pub fn power_difference(x: &FeatureVector) -> FeatureVector {
    pairwise(x, FeatureMode::Difference, |a, b| a - b)
}

fn pairwise(x: &FeatureVector, mode: FeatureMode, op: impl Fn(f64, f64) -> f64) -> FeatureVector {
    let m = x.values.len();
    let mut values = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let (a, b) = (x.values[i], x.values[j]);
            values.push(if a == 0.0 || b == 0.0 { 0.0 } else { op(a, b) });
        }
    }
    FeatureVector { values, mode }
}
