//! Scan-log parsing/writing and dataset assembly.
//!
//! Log format, one scan per line:
//!
//! ```text
//! timestamp,device_id,x,y,CID:RSS[,CID:RSS...]
//! ```
//!
//! with 1..=7 `CID:RSS` tower fields. Bad lines never abort ingestion;
//! they are reported as line-numbered diagnostics.

use std::io::{BufRead, Write};

use crate::domain::{Dataset, Grid, RssScan, Sample, TowerInventory, MAX_READINGS_PER_SCAN};
use crate::features::{
    apply_linear_map, power_difference, power_ratio, vectorize, FeatureMode, LinearMap,
};
use crate::{Error, Result};

/// Generated RSS values live in this range; ingested values outside it
/// draw a warning diagnostic but are kept.
pub const RSS_RANGE_DBM: (f64, f64) = (-120.0, -30.0);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Severity {
    /// The line was rejected.
    Reject,
    /// The line was ingested but looks suspicious.
    Warning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub line: usize,
    pub severity: Severity,
    pub reason: String,
}

/// Parses a scan log, returning every well-formed scan plus diagnostics
/// for rejected or suspicious lines.
pub fn parse_scan_log(reader: impl BufRead) -> Result<(Vec<RssScan>, Vec<Diagnostic>)> {
    let mut scans = Vec::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_line(trimmed) {
            Ok(scan) => {
                for (id, rss) in &scan.readings {
                    if *rss < RSS_RANGE_DBM.0 || *rss > RSS_RANGE_DBM.1 {
                        diagnostics.push(Diagnostic {
                            line: lineno,
                            severity: Severity::Warning,
                            reason: format!(
                                "RSS {rss} dBm for tower {id} outside [{}, {}]",
                                RSS_RANGE_DBM.0, RSS_RANGE_DBM.1
                            ),
                        });
                    }
                }
                scans.push(scan);
            }
            Err(reason) => diagnostics.push(Diagnostic {
                line: lineno,
                severity: Severity::Reject,
                reason,
            }),
        }
    }
    Ok((scans, diagnostics))
}

fn parse_line(line: &str) -> std::result::Result<RssScan, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 5 {
        return Err(format!("expected at least 5 fields, got {}", fields.len()));
    }
    let tower_fields = &fields[4..];
    if tower_fields.len() > MAX_READINGS_PER_SCAN {
        return Err(format!(
            "exceeds 7 towers ({} tower fields)",
            tower_fields.len()
        ));
    }
    let timestamp: i64 = fields[0]
        .trim()
        .parse()
        .map_err(|_| format!("bad timestamp '{}'", fields[0]))?;
    let device_id = fields[1].trim();
    if device_id.is_empty() {
        return Err("empty device id".into());
    }
    let x: f64 = fields[2]
        .trim()
        .parse()
        .map_err(|_| format!("bad x coordinate '{}'", fields[2]))?;
    let y: f64 = fields[3]
        .trim()
        .parse()
        .map_err(|_| format!("bad y coordinate '{}'", fields[3]))?;
    let mut readings = Vec::with_capacity(tower_fields.len());
    for f in tower_fields {
        let (id, rss) = f
            .split_once(':')
            .ok_or_else(|| format!("tower field '{f}' is not CID:RSS"))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(format!("empty tower id in field '{f}'"));
        }
        let rss: f64 = rss
            .trim()
            .parse()
            .map_err(|_| format!("bad RSS '{rss}' for tower {id}"))?;
        readings.push((id.to_string(), rss));
    }
    RssScan::new(device_id, timestamp, (x, y), readings).map_err(|e| e.to_string())
}

/// Writes scans in the log format, RSS with one decimal place.
pub fn write_scan_log(writer: &mut impl Write, scans: &[RssScan]) -> Result<()> {
    for scan in scans {
        write!(
            writer,
            "{},{},{},{}",
            scan.timestamp, scan.device_id, scan.position.0, scan.position.1
        )?;
        for (id, rss) in &scan.readings {
            write!(writer, ",{id}:{rss:.1}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

/// Derives the sorted tower inventory from a batch of scans.
pub fn inventory_from_scans(scans: &[RssScan]) -> Result<TowerInventory> {
    TowerInventory::new(
        scans
            .iter()
            .flat_map(|s| s.readings.iter().map(|(id, _)| id.clone())),
    )
}

/// Vectorizes scans into a labeled dataset: optional calibration first,
/// then the pairwise transform if `mode` demands one.
pub fn build_dataset(
    scans: &[RssScan],
    inventory: &TowerInventory,
    grid: &Grid,
    mode: FeatureMode,
    calibration: Option<&LinearMap>,
) -> Result<Dataset> {
    if scans.is_empty() {
        return Err(Error::InvalidArgument(
            "no scans to build a dataset from".into(),
        ));
    }
    if let Some(map) = calibration {
        if map.coefficients.len() != inventory.tower_count() {
            return Err(Error::InvalidConfig(format!(
                "calibration map covers {} towers, inventory has {}",
                map.coefficients.len(),
                inventory.tower_count()
            )));
        }
    }
    let samples = scans
        .iter()
        .map(|scan| {
            let (mut features, _) = vectorize(scan, inventory);
            if let Some(map) = calibration {
                features = apply_linear_map(map, &features);
            }
            features = match mode {
                FeatureMode::Raw | FeatureMode::Calibrated => features,
                FeatureMode::Ratio => power_ratio(&features),
                FeatureMode::Difference => power_difference(&features),
            };
            Sample {
                features,
                label: grid.cell_of(scan.position),
                device_id: scan.device_id.clone(),
                position: scan.position,
            }
        })
        .collect();
    Dataset::new(inventory.clone(), *grid, samples)
}

/// Pairs master and slave scans by nearest timestamp within `window_s`
/// seconds, for calibration fitting. Each slave scan pairs with at most
/// one master scan.
pub fn pair_scans<'a>(
    master: &'a [RssScan],
    slave: &'a [RssScan],
    window_s: i64,
) -> Vec<(&'a RssScan, &'a RssScan)> {
    let mut by_time: Vec<&RssScan> = master.iter().collect();
    by_time.sort_by_key(|s| s.timestamp);
    let times: Vec<i64> = by_time.iter().map(|s| s.timestamp).collect();
    let mut pairs = Vec::new();
    for s in slave {
        let i = times.partition_point(|&t| t < s.timestamp);
        let candidates = [i.checked_sub(1), Some(i)];
        let best = candidates
            .into_iter()
            .flatten()
            .filter(|&j| j < by_time.len())
            .min_by_key(|&j| (times[j] - s.timestamp).abs());
        if let Some(j) = best {
            if (times[j] - s.timestamp).abs() <= window_s {
                pairs.push((by_time[j], s));
            }
        }
    }
    pairs
}

/// Fits a linear calibration map from co-timed master/slave scan streams.
pub fn fit_calibration(
    master: &[RssScan],
    slave: &[RssScan],
    inventory: &TowerInventory,
    window_s: i64,
) -> Result<LinearMap> {
    let paired: Vec<_> = pair_scans(master, slave, window_s)
        .into_iter()
        .map(|(m, s)| (vectorize(m, inventory).0, vectorize(s, inventory).0))
        .collect();
    crate::features::fit_linear_map(&paired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn parses_well_formed_lines() {
        let log = "1700000000,htc_x9,100.0,250.0,A:-71,B:-84\n";
        let (scans, diags) = parse_scan_log(Cursor::new(log)).unwrap();
        assert_eq!(scans.len(), 1);
        assert!(diags.is_empty());
        let s = &scans[0];
        assert_eq!(s.device_id, "htc_x9");
        assert_eq!(s.timestamp, 1_700_000_000);
        assert_eq!(s.position, (100.0, 250.0));
        assert_eq!(s.readings, vec![("A".into(), -71.0), ("B".into(), -84.0)]);
    }

    #[test]
    fn rejects_eight_towers_with_diagnostic() {
        let towers: Vec<String> = (0..8).map(|i| format!("T{i}:-70")).collect();
        let log = format!("1,dev,0,0,{}\n", towers.join(","));
        let (scans, diags) = parse_scan_log(Cursor::new(log)).unwrap();
        assert!(scans.is_empty());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].line, 1);
        assert_eq!(diags[0].severity, Severity::Reject);
        assert!(diags[0].reason.contains("exceeds 7 towers"));
    }

    #[test]
    fn empty_file_parses_clean() {
        let (scans, diags) = parse_scan_log(Cursor::new("")).unwrap();
        assert!(scans.is_empty() && diags.is_empty());
    }

    #[test]
    fn bad_lines_never_abort() {
        let log = "garbage\n1,dev,0,0,A:-70\n2,dev,0,0,A:notanumber\n3,dev,0,0,A:-71\n";
        let (scans, diags) = parse_scan_log(Cursor::new(log)).unwrap();
        assert_eq!(scans.len(), 2);
        assert_eq!(diags.len(), 2);
        assert_eq!(diags[0].line, 1);
        assert_eq!(diags[1].line, 3);
    }

    #[test]
    fn out_of_range_rss_warns_but_ingests() {
        let log = "1,dev,0,0,A:-10.0\n";
        let (scans, diags) = parse_scan_log(Cursor::new(log)).unwrap();
        assert_eq!(scans.len(), 1);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].severity, Severity::Warning);
    }

    #[test]
    fn roundtrip_is_stable() {
        let scans = vec![
            RssScan::new(
                "m",
                10,
                (12.5, 7.25),
                vec![("A".into(), -70.1), ("B".into(), -88.0)],
            )
            .unwrap(),
            RssScan::new("s", 11, (0.0, 400.0), vec![("C".into(), -99.9)]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_scan_log(&mut buf, &scans).unwrap();
        let (parsed, diags) = parse_scan_log(Cursor::new(&buf)).unwrap();
        assert!(diags.is_empty());
        assert_eq!(parsed, scans);
        // write-parse-write is a fixed point
        let mut buf2 = Vec::new();
        write_scan_log(&mut buf2, &parsed).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn inventory_is_order_independent() {
        let log = "1,d,0,0,B:-70,A:-80\n2,d,0,0,C:-90\n";
        let rev = "2,d,0,0,C:-90\n1,d,0,0,B:-70,A:-80\n";
        let (a, _) = parse_scan_log(Cursor::new(log)).unwrap();
        let (b, _) = parse_scan_log(Cursor::new(rev)).unwrap();
        assert_eq!(
            inventory_from_scans(&a).unwrap(),
            inventory_from_scans(&b).unwrap()
        );
    }

    #[test]
    fn build_dataset_modes_and_composition() {
        let inventory = TowerInventory::new(["A", "B", "C"]).unwrap();
        let grid = Grid::new((0.0, 0.0), 100.0, 2, 2).unwrap();
        let scans = vec![
            RssScan::new(
                "d",
                1,
                (50.0, 50.0),
                vec![("A".into(), -70.0), ("B".into(), -80.0)],
            )
            .unwrap(),
            RssScan::new("d", 2, (150.0, 150.0), vec![("C".into(), -90.0)]).unwrap(),
        ];
        let raw = build_dataset(&scans, &inventory, &grid, FeatureMode::Raw, None).unwrap();
        assert_eq!(raw.feature_len(), 3);
        assert_eq!(raw.samples[0].label, 0);
        assert_eq!(raw.samples[1].label, 3);

        let diff = build_dataset(&scans, &inventory, &grid, FeatureMode::Difference, None).unwrap();
        assert_eq!(diff.feature_len(), 3); // C(3,2)

        // calibration then difference equals the manual two-step pipeline
        let map = LinearMap {
            coefficients: vec![(1.1, -3.0); 3],
            sample_counts: vec![9; 3],
            identity_fallback: vec![false; 3],
        };
        let combined = build_dataset(
            &scans,
            &inventory,
            &grid,
            FeatureMode::Difference,
            Some(&map),
        )
        .unwrap();
        for (s, scan) in combined.samples.iter().zip(&scans) {
            let (v, _) = vectorize(scan, &inventory);
            let manual = power_difference(&apply_linear_map(&map, &v));
            assert_eq!(s.features.values, manual.values);
        }
        assert!(build_dataset(&[], &inventory, &grid, FeatureMode::Raw, None).is_err());
    }

    #[test]
    fn pairing_matches_nearest_timestamp() {
        let mk =
            |id: &str, t: i64| RssScan::new(id, t, (0.0, 0.0), vec![("A".into(), -70.0)]).unwrap();
        let master = vec![mk("m", 10), mk("m", 20), mk("m", 30)];
        let slave = vec![mk("s", 11), mk("s", 19), mk("s", 55)];
        let pairs = pair_scans(&master, &slave, 2);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0.timestamp, 10);
        assert_eq!(pairs[1].0.timestamp, 20);
    }
}
