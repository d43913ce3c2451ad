//! Detection of load-shared records: a fixed speed baseline, GPS-derived
//! ground truth and per-(region, window) threshold calibration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{haversine_km, LatLon};
use crate::ingest::SpeedPrior;
use crate::model::{CdrRecord, GpsFix, Network, TowerRegistry, UserStream};
use crate::region::RegionGrid;
use crate::timewin::{window_of, WINDOW_COUNT};

pub const BASELINE_THRESHOLD_KMPH: f64 = 120.0;
pub const DEFAULT_GRID_STEP: f64 = 5.0;
pub const DEFAULT_GRID_MAX: f64 = 200.0;
/// Maximum distance between a record and the GPS fix used to label it.
pub const GPS_MATCH_TOLERANCE_S: i64 = 300;
/// Displacement at or below which a cell change counts as load sharing.
pub const STATIONARY_KM: f64 = 0.1;

/// Per-record detector output; the first record of a stream is never set.
pub type LoadShareFlags = Vec<bool>;

/// Thresholds `0, step, 2*step, ..., max`.
pub fn theta_grid(step: f64, max: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite() && max >= 0.0 && max.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "invalid threshold grid step {step} / max {max}"
        )));
    }
    let n = (max / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

pub fn default_theta_grid() -> Vec<f64> {
    theta_grid(DEFAULT_GRID_STEP, DEFAULT_GRID_MAX).expect("default grid is valid")
}

/// Speed implied by two consecutive records, in km/h.
///
/// Simultaneous records on different cells yield `f64::INFINITY`.
pub fn pairwise_speed(prev: &CdrRecord, curr: &CdrRecord, towers: &TowerRegistry) -> Result<f64> {
    let a = towers.position(prev.cell)?;
    let b = towers.position(curr.cell)?;
    if prev.cell == curr.cell {
        return Ok(0.0);
    }
    let dt = (curr.timestamp - prev.timestamp).abs();
    if dt == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(haversine_km(a, b) / (dt as f64 / 3600.0))
}

pub fn detect_fixed(
    stream: &UserStream,
    towers: &TowerRegistry,
    threshold: f64,
) -> Result<LoadShareFlags> {
    let mut flags = vec![false; stream.records.len()];
    for (k, w) in stream.records.windows(2).enumerate() {
        flags[k + 1] = pairwise_speed(&w[0], &w[1], towers)? > threshold;
    }
    Ok(flags)
}

/// Threshold per (region, window) with a fallback for unmapped keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTable {
    pub thresholds: BTreeMap<(String, u8), f64>,
    pub default_threshold: f64,
}

impl Default for SpeedTable {
    fn default() -> Self {
        SpeedTable::new(BASELINE_THRESHOLD_KMPH)
    }
}

impl SpeedTable {
    pub fn new(default_threshold: f64) -> Self {
        SpeedTable {
            thresholds: BTreeMap::new(),
            default_threshold,
        }
    }

    pub fn get(&self, region_id: &str, window: u8) -> f64 {
        self.thresholds
            .get(&(region_id.to_string(), window))
            .copied()
            .unwrap_or(self.default_threshold)
    }

    pub fn insert(&mut self, region_id: impl Into<String>, window: u8, theta: f64) {
        self.thresholds.insert((region_id.into(), window), theta);
    }

    /// Dense `[region index][window]` lookup for a grid.
    pub fn dense(&self, grid: &RegionGrid) -> Vec<[f64; WINDOW_COUNT]> {
        grid.regions()
            .iter()
            .map(|r| std::array::from_fn(|w| self.get(&r.id, w as u8)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("region_id,window_id,theta_kmph\n");
        for ((region, window), theta) in &self.thresholds {
            let _ = writeln!(out, "{region},{window},{theta}");
        }
        out
    }

    pub fn from_csv<R: Read>(input: R, default_threshold: f64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let expected = ["region_id", "window_id", "theta_kmph"];
        let headers = reader.headers()?.clone();
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::MalformedHeader {
                kind: "speed_table",
                expected: expected.join(","),
                found: headers.iter().collect::<Vec<_>>().join(","),
            });
        }
        let mut table = SpeedTable::new(default_threshold);
        for row in reader.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let window: u8 = row[1]
                .parse()
                .ok()
                .filter(|&w| (w as usize) < WINDOW_COUNT)
                .ok_or_else(|| Error::row(line, format!("invalid window `{}`", &row[1])))?;
            let theta: f64 = row[2]
                .parse()
                .ok()
                .filter(|t: &f64| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| Error::row(line, format!("invalid threshold `{}`", &row[2])))?;
            table.insert(&row[0], window, theta);
        }
        Ok(table)
    }
}

/// Threshold looked up by the earlier record's region and time window.
pub fn detect_adaptive(
    stream: &UserStream,
    network: &Network,
    table: &SpeedTable,
    tz_offset_min: i32,
) -> Result<LoadShareFlags> {
    let dense = table.dense(&network.grid);
    detect_with_lookup(
        stream,
        network,
        &dense,
        table.default_threshold,
        tz_offset_min,
    )
}

/// [`detect_adaptive`] with a precomputed [`SpeedTable::dense`] lookup.
pub fn detect_with_lookup(
    stream: &UserStream,
    network: &Network,
    dense: &[[f64; WINDOW_COUNT]],
    default_threshold: f64,
    tz_offset_min: i32,
) -> Result<LoadShareFlags> {
    let mut flags = vec![false; stream.records.len()];
    for (k, w) in stream.records.windows(2).enumerate() {
        let speed = pairwise_speed(&w[0], &w[1], &network.registry)?;
        let theta = match network.region_of_cell(w[0].cell) {
            Some(r) => dense[r][window_of(w[0].timestamp, tz_offset_min) as usize],
            None => default_threshold,
        };
        flags[k + 1] = speed > theta;
    }
    Ok(flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TruthLabel {
    LoadShared,
    Normal,
    Unknown,
}

impl TruthLabel {
    pub fn known(self) -> Option<bool> {
        match self {
            TruthLabel::LoadShared => Some(true),
            TruthLabel::Normal => Some(false),
            TruthLabel::Unknown => None,
        }
    }
}

/// Position of the fix closest in time to `ts`, if within tolerance.
fn nearest_fix(fixes: &[GpsFix], ts: i64) -> Option<LatLon> {
    let i = fixes.partition_point(|f| f.timestamp < ts);
    let before = i.checked_sub(1).map(|j| &fixes[j]);
    let after = fixes.get(i);
    let best = match (before, after) {
        (Some(b), Some(a)) => {
            if ts - b.timestamp <= a.timestamp - ts {
                b
            } else {
                a
            }
        }
        (Some(b), None) => b,
        (None, Some(a)) => a,
        (None, None) => return None,
    };
    ((best.timestamp - ts).abs() <= GPS_MATCH_TOLERANCE_S).then_some(best.position)
}

/// Labels record `k` load-shared when its cell differs from record `k-1`
/// while the user's GPS position moved at most 100 m. Records without a
/// fix near both timestamps, and the first record, are `Unknown`.
pub fn label_ground_truth(stream: &UserStream) -> Result<Vec<TruthLabel>> {
    let fixes = match &stream.gps {
        Some(f) if !f.is_empty() => f.as_slice(),
        _ => return Err(Error::NoGps(stream.user_id.clone())),
    };
    let mut labels = vec![TruthLabel::Unknown; stream.records.len()];
    let mut prev_pos = stream
        .records
        .first()
        .and_then(|r| nearest_fix(fixes, r.timestamp));
    for k in 1..stream.records.len() {
        let (prev, curr) = (&stream.records[k - 1], &stream.records[k]);
        let pos = nearest_fix(fixes, curr.timestamp);
        labels[k] = match (prev_pos, pos) {
            (Some(a), Some(b)) => {
                if prev.cell != curr.cell && haversine_km(a, b) <= STATIONARY_KM {
                    TruthLabel::LoadShared
                } else {
                    TruthLabel::Normal
                }
            }
            _ => TruthLabel::Unknown,
        };
        prev_pos = pos;
    }
    Ok(labels)
}

/// Confusion counts on the load-shared class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl DetectionCounts {
    pub fn tally(flags: &[bool], truth: &[TruthLabel]) -> Result<Self> {
        if flags.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                found: flags.len(),
            });
        }
        let mut c = DetectionCounts::default();
        for (&f, t) in flags.iter().zip(truth) {
            match (f, t.known()) {
                (true, Some(true)) => c.tp += 1,
                (true, Some(false)) => c.fp += 1,
                (false, Some(true)) => c.fn_ += 1,
                (false, Some(false)) => c.tn += 1,
                (_, None) => {}
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: Self) -> Self {
        DetectionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    pub fn metrics(&self) -> DetectionMetrics {
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let no_positives = self.tp + self.fn_ == 0;
        if no_positives {
            log::warn!("no load-shared records in the evaluation set; recall reported as 0");
        }
        DetectionMetrics {
            precision,
            recall,
            f1: crate::profiling::f1_score(precision, recall),
            counts: *self,
            no_positives,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: DetectionCounts,
    /// Set when the truth has no positives, so recall is undefined.
    pub no_positives: bool,
}

pub fn detection_metrics(flags: &[bool], truth: &[TruthLabel]) -> Result<DetectionMetrics> {
    Ok(DetectionCounts::tally(flags, truth)?.metrics())
}

/// Detection report in the layout `method,precision,recall,f1`.
pub fn metrics_csv(rows: &[(&str, &DetectionMetrics)]) -> String {
    let mut out = String::from("method,precision,recall,f1,tp,fp,fn,tn\n");
    for (name, m) in rows {
        let c = m.counts;
        let _ = writeln!(
            out,
            "{name},{:.3},{:.3},{:.3},{},{},{},{}",
            m.precision, m.recall, m.f1, c.tp, c.fp, c.fn_, c.tn
        );
    }
    out
}

/// Per-threshold positive/negative counts of labeled pairs.
///
/// `pos[j]` counts positive pairs whose speed falls in bin `j`, where bin
/// `j` holds speeds above `grid[j-1]` and at most `grid[j]` (bin 0: at most
/// `grid[0]`; last bin: above the largest threshold).
#[derive(Debug, Clone, PartialEq, Eq)]
struct BinCounts {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl BinCounts {
    fn new(bins: usize) -> Self {
        BinCounts {
            pos: vec![0; bins],
            neg: vec![0; bins],
        }
    }

    fn merge(mut self, o: &BinCounts) -> Self {
        for (a, b) in self.pos.iter_mut().zip(&o.pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(&o.neg) {
            *a += b;
        }
        self
    }

    fn total_pos(&self) -> u64 {
        self.pos.iter().sum()
    }

    fn total(&self) -> u64 {
        self.total_pos() + self.neg.iter().sum::<u64>()
    }

    /// Confusion counts when flagging speeds strictly above `grid[j]`.
    fn counts_at(&self, j: usize) -> DetectionCounts {
        let tp: u64 = self.pos[j + 1..].iter().sum();
        let fp: u64 = self.neg[j + 1..].iter().sum();
        DetectionCounts {
            tp,
            fp,
            fn_: self.total_pos() - tp,
            tn: self.neg.iter().sum::<u64>() - fp,
        }
    }

    fn f1_at(&self, j: usize) -> f64 {
        let c = self.counts_at(j);
        let d = 2 * c.tp + c.fp + c.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * c.tp as f64 / d as f64
        }
    }

    /// Index of the F1-maximizing threshold; ties go to the smallest.
    /// Keys where no threshold reaches a positive F1 take the largest.
    fn best(&self, grid_len: usize) -> (usize, f64) {
        let mut best = (grid_len - 1, 0.0);
        for j in 0..grid_len {
            let f = self.f1_at(j);
            if f > best.1 {
                best = (j, f);
            }
        }
        best
    }
}

fn bin_of(grid: &[f64], speed: f64) -> usize {
    grid.partition_point(|&t| t < speed)
}

/// A stream with its tri-state ground truth.
#[derive(Debug, Clone, Copy)]
pub struct LabeledStream<'a> {
    pub stream: &'a UserStream,
    pub labels: &'a [TruthLabel],
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyCalibration {
    pub region_id: String,
    pub window_id: u8,
    pub theta: f64,
    pub f1: f64,
    pub labeled_pairs: u64,
    pub positives: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub table: SpeedTable,
    pub per_key: Vec<KeyCalibration>,
    /// Best single threshold over all labeled pairs, for comparison.
    pub global_theta: f64,
    pub global_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub grid: Vec<f64>,
    pub default_threshold: f64,
    pub tz_offset_min: i32,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            grid: default_theta_grid(),
            default_threshold: BASELINE_THRESHOLD_KMPH,
            tz_offset_min: 0,
        }
    }
}

/// Smallest grid threshold at or above a prior average speed.
pub fn prior_threshold(grid: &[f64], avg_speed_kmph: f64) -> f64 {
    let j = grid.partition_point(|&t| t < avg_speed_kmph);
    grid[j.min(grid.len() - 1)]
}

/// Chooses, per (region, window) of the earlier record, the grid threshold
/// maximizing F1 against the labels. Keys without labeled pairs keep the
/// default, or a supplied prior when one exists for the key.
pub fn calibrate_speed_table(
    labeled: &[LabeledStream<'_>],
    network: &Network,
    cfg: &CalibrationConfig,
    priors: &[SpeedPrior],
) -> Result<Calibration> {
    let grid = &cfg.grid;
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "threshold grid must be non-empty and increasing".into(),
        ));
    }
    let keys = network.grid.len() * WINDOW_COUNT;
    let bins = grid.len() + 1;
    let empty = || (vec![BinCounts::new(bins); keys], BinCounts::new(bins));

    let (per_key, global) = labeled
        .par_iter()
        .map(|ls| -> Result<_> {
            let (mut per_key, mut global) = empty();
            if ls.labels.len() != ls.stream.records.len() {
                return Err(Error::DimensionMismatch {
                    expected: ls.stream.records.len(),
                    found: ls.labels.len(),
                });
            }
            for (k, w) in ls.stream.records.windows(2).enumerate() {
                let Some(truth) = ls.labels[k + 1].known() else {
                    continue;
                };
                let speed = pairwise_speed(&w[0], &w[1], &network.registry)?;
                let b = bin_of(grid, speed);
                let bump = |c: &mut BinCounts| {
                    if truth {
                        c.pos[b] += 1;
                    } else {
                        c.neg[b] += 1;
                    }
                };
                bump(&mut global);
                if let Some(r) = network.region_of_cell(w[0].cell) {
                    let win = window_of(w[0].timestamp, cfg.tz_offset_min) as usize;
                    bump(&mut per_key[r * WINDOW_COUNT + win]);
                }
            }
            Ok((per_key, global))
        })
        .try_reduce(empty, |(a, ga), (b, gb)| {
            let merged = a.into_iter().zip(&b).map(|(x, y)| x.merge(y)).collect();
            Ok((merged, ga.merge(&gb)))
        })?;

    if global.total() == 0 {
        return Err(Error::NoLabeledData);
    }

    let mut table = SpeedTable::new(cfg.default_threshold);
    for p in priors {
        if network.grid.index_of(&p.region_id).is_some() && (p.window_id as usize) < WINDOW_COUNT {
            table.insert(
                &p.region_id,
                p.window_id,
                prior_threshold(grid, p.avg_speed_kmph),
            );
        }
    }
    let mut report = Vec::new();
    for (i, counts) in per_key.iter().enumerate() {
        if counts.total() == 0 {
            continue;
        }
        let region_id = network.grid.region(i / WINDOW_COUNT).id.clone();
        let window_id = (i % WINDOW_COUNT) as u8;
        let (j, f1) = counts.best(grid.len());
        table.insert(&region_id, window_id, grid[j]);
        report.push(KeyCalibration {
            region_id,
            window_id,
            theta: grid[j],
            f1,
            labeled_pairs: counts.total(),
            positives: counts.total_pos(),
        });
    }
    report.sort_by(|a, b| (&a.region_id, a.window_id).cmp(&(&b.region_id, b.window_id)));
    let (gj, global_f1) = global.best(grid.len());
    Ok(Calibration {
        table,
        per_key: report,
        global_theta: grid[gj],
        global_f1,
    })
}

pub fn calibration_report_csv(cal: &Calibration) -> String {
    let mut out = String::from("region_id,window_id,theta_kmph,f1,labeled_pairs,positives\n");
    for k in &cal.per_key {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{},{}",
            k.region_id, k.window_id, k.theta, k.f1, k.labeled_pairs, k.positives
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LatLon;
    use crate::model::{CellIdx, CellTower, TowerRegistry};
    use crate::region::{Rect, Region};
    use proptest::prelude::*;

    const BASE: i64 = 1_700_000_000;

    fn tower(id: &str, lat: f64, lon: f64) -> CellTower {
        CellTower {
            cell_id: id.into(),
            position: LatLon::new(lat, lon),
            transmit_power_mw: 1000.0,
            region_id: "R1".into(),
        }
    }

    /// Towers A..E spaced 0.01 degrees of longitude apart at 6.9271 N.
    fn registry() -> TowerRegistry {
        TowerRegistry::new(
            (0..5)
                .map(|i| {
                    tower(
                        &format!("{}", (b'A' + i) as char),
                        6.9271,
                        79.8612 + 0.01 * f64::from(i),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn network() -> Network {
        let grid = RegionGrid::new(vec![Region {
            id: "R1".into(),
            rect: Rect::new(6.0, 8.0, 79.0, 81.0),
            in_study_area: true,
        }])
        .unwrap();
        Network::new(registry(), grid)
    }

    fn rec(t: i64, cell: u32) -> CdrRecord {
        CdrRecord {
            timestamp: BASE + t,
            cell: CellIdx(cell),
            duration: 30,
        }
    }

    fn law_of_cosines_km(a: LatLon, b: LatLon) -> f64 {
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * (b.lon - a.lon).to_radians().cos();
        crate::geo::EARTH_RADIUS_KM * c.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn pairwise_speed_examples() {
        let reg = registry();
        assert_eq!(pairwise_speed(&rec(0, 0), &rec(900, 0), &reg).unwrap(), 0.0);
        let v = pairwise_speed(&rec(0, 0), &rec(60, 1), &reg).unwrap();
        let oracle =
            law_of_cosines_km(LatLon::new(6.9271, 79.8612), LatLon::new(6.9271, 79.8712)) * 60.0;
        assert!((v - oracle).abs() < 1e-4);
        assert!((v - 66.3).abs() < 0.1);
        assert_eq!(
            pairwise_speed(&rec(5, 0), &rec(5, 1), &reg).unwrap(),
            f64::INFINITY
        );
        assert_eq!(pairwise_speed(&rec(5, 2), &rec(5, 2), &reg).unwrap(), 0.0);
        assert!(matches!(
            pairwise_speed(&rec(0, 0), &rec(60, 99), &reg),
            Err(Error::UnknownCell(_))
        ));
    }

    #[test]
    fn fixed_detection_examples() {
        let reg = registry();
        let still = UserStream::new("u", (0..5).map(|i| rec(i * 600, 2)).collect());
        assert_eq!(detect_fixed(&still, &reg, 120.0).unwrap(), vec![false; 5]);

        // 1.10383 km in 26.49 s is 150 km/h.
        let d = haversine_km(LatLon::new(6.9271, 79.8612), LatLon::new(6.9271, 79.8712));
        let dt = (d / 150.0 * 3600.0).round() as i64;
        let s = UserStream::new(
            "u",
            vec![rec(0, 0), rec(600, 0), rec(600 + dt, 1), rec(5000, 1)],
        );
        assert_eq!(
            detect_fixed(&s, &reg, 120.0).unwrap(),
            vec![false, false, true, false]
        );

        // Exactly at the threshold is not flagged.
        let exact = pairwise_speed(&rec(0, 0), &rec(60, 1), &reg).unwrap();
        let s = UserStream::new("u", vec![rec(0, 0), rec(60, 1)]);
        assert_eq!(detect_fixed(&s, &reg, exact).unwrap(), vec![false, false]);
    }

    #[test]
    fn adaptive_detection_examples() {
        let net = network();
        // About 50 km/h: 1.10383 km in 80 s.
        let s = UserStream::new("u", vec![rec(0, 0), rec(80, 1)]);
        let w = window_of(BASE, 0);
        let mut table = SpeedTable::new(120.0);
        table.insert("R1", w, 40.0);
        assert_eq!(
            detect_adaptive(&s, &net, &table, 0).unwrap(),
            vec![false, true]
        );
        table.insert("R1", w, 80.0);
        assert_eq!(
            detect_adaptive(&s, &net, &table, 0).unwrap(),
            vec![false, false]
        );

        // Tower outside every region falls back to the default.
        let far = Network::new(
            TowerRegistry::new(vec![tower("A", 0.0, 0.0), tower("B", 0.0, 0.01)]).unwrap(),
            net.grid.clone(),
        );
        let s = UserStream::new("u", vec![rec(0, 0), rec(80, 1)]);
        let mut table = SpeedTable::new(10.0);
        table.insert("R1", w, 200.0);
        assert_eq!(
            detect_adaptive(&s, &far, &table, 0).unwrap(),
            vec![false, true]
        );
    }

    fn with_gps(records: Vec<CdrRecord>, fixes: Vec<(i64, f64, f64)>) -> UserStream {
        let mut s = UserStream::new("u", records);
        s.gps = Some(
            fixes
                .into_iter()
                .map(|(t, lat, lon)| GpsFix {
                    timestamp: BASE + t,
                    position: LatLon::new(lat, lon),
                })
                .collect(),
        );
        s
    }

    #[test]
    fn ground_truth_examples() {
        // Cell change without movement.
        let s = with_gps(
            vec![rec(0, 0), rec(600, 1)],
            vec![(0, 6.9, 79.9), (600, 6.9, 79.9)],
        );
        assert_eq!(
            label_ground_truth(&s).unwrap(),
            vec![TruthLabel::Unknown, TruthLabel::LoadShared]
        );
        // Cell change with a 5 km move.
        let s = with_gps(
            vec![rec(0, 0), rec(600, 1)],
            vec![(0, 6.9, 79.9), (600, 6.945, 79.9)],
        );
        assert_eq!(label_ground_truth(&s).unwrap()[1], TruthLabel::Normal);
        // No fix within 5 minutes of the second record.
        let s = with_gps(
            vec![rec(0, 0), rec(1200, 1)],
            vec![(0, 6.9, 79.9), (1501, 6.9, 79.9)],
        );
        assert_eq!(label_ground_truth(&s).unwrap()[1], TruthLabel::Unknown);
        // Same cell, stationary: not load-shared.
        let s = with_gps(
            vec![rec(0, 0), rec(600, 0)],
            vec![(0, 6.9, 79.9), (600, 6.9, 79.9)],
        );
        assert_eq!(label_ground_truth(&s).unwrap()[1], TruthLabel::Normal);
        // Missing GPS.
        let s = UserStream::new("u", vec![rec(0, 0)]);
        assert!(matches!(label_ground_truth(&s), Err(Error::NoGps(_))));
    }

    #[test]
    fn nearest_fix_picks_closest_within_tolerance() {
        let fixes: Vec<GpsFix> = [(0, 1.0), (600, 2.0)]
            .iter()
            .map(|&(t, lat)| GpsFix {
                timestamp: t,
                position: LatLon::new(lat, 0.0),
            })
            .collect();
        assert_eq!(nearest_fix(&fixes, 200).unwrap().lat, 1.0);
        assert_eq!(nearest_fix(&fixes, 300).unwrap().lat, 1.0);
        assert_eq!(nearest_fix(&fixes, 301).unwrap().lat, 2.0);
        assert_eq!(nearest_fix(&fixes, 900).unwrap().lat, 2.0);
        assert!(nearest_fix(&fixes, 901).is_none());
        assert!(nearest_fix(&fixes, -301).is_none());
    }

    #[test]
    fn metrics_examples() {
        let truth = [
            TruthLabel::Unknown,
            TruthLabel::LoadShared,
            TruthLabel::Normal,
            TruthLabel::LoadShared,
        ];
        let m = detection_metrics(&[false, true, false, true], &truth).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        // Unknown rows are ignored whatever the flag.
        let m = detection_metrics(&[true, true, false, false], &truth).unwrap();
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        let m = detection_metrics(&[false, false, true, false], &[TruthLabel::Normal; 4]).unwrap();
        assert!(m.no_positives);
        assert_eq!(m.recall, 0.0);
        assert!(detection_metrics(&[true], &truth).is_err());

        assert!((crate::profiling::f1_score(0.914, 0.166) - 0.281).abs() < 5e-4);
        assert!((crate::profiling::f1_score(0.864, 0.728) - 0.790).abs() < 5e-4);
    }

    /// Stream alternating between two adjacent cells with the given pair
    /// speeds and labels, all inside one time window.
    fn synthetic_pairs(speeds: &[(f64, bool)]) -> (UserStream, Vec<TruthLabel>) {
        let d = haversine_km(LatLon::new(6.9271, 79.8612), LatLon::new(6.9271, 79.8712));
        let mut t = 0i64;
        let mut records = vec![rec(0, 0)];
        let mut labels = vec![TruthLabel::Unknown];
        for (i, &(v, pos)) in speeds.iter().enumerate() {
            t += ((d / v) * 3600.0).round().max(1.0) as i64;
            records.push(rec(t, ((i + 1) % 2) as u32));
            labels.push(if pos {
                TruthLabel::LoadShared
            } else {
                TruthLabel::Normal
            });
        }
        (UserStream::new("u", records), labels)
    }

    /// Calibrates one key and checks it against an exhaustive scan for the
    /// first grid value whose flags reproduce the labels exactly.
    fn calibrate_single_key(speeds: &[f64], cut: f64) -> f64 {
        let net = network();
        let pairs: Vec<(f64, bool)> = speeds.iter().map(|&v| (v, v > cut)).collect();
        let (s, labels) = synthetic_pairs(&pairs);
        let realized: Vec<f64> = s
            .records
            .windows(2)
            .map(|w| pairwise_speed(&w[0], &w[1], &net.registry).unwrap())
            .collect();
        let oracle = default_theta_grid()
            .into_iter()
            .find(|&t| {
                realized
                    .iter()
                    .zip(&pairs)
                    .all(|(&v, &(_, p))| (v > t) == p)
            })
            .unwrap();
        let windows: std::collections::BTreeSet<u8> = s.records[..s.records.len() - 1]
            .iter()
            .map(|r| window_of(r.timestamp, 0))
            .collect();
        assert_eq!(windows.len(), 1);
        let w = *windows.first().unwrap();
        let ls = [LabeledStream {
            stream: &s,
            labels: &labels,
        }];
        let cal = calibrate_speed_table(&ls, &net, &CalibrationConfig::default(), &[]).unwrap();
        assert_eq!(cal.per_key.len(), 1);
        assert_eq!(cal.per_key[0].f1, 1.0);
        assert_eq!(cal.table.get("R1", w), oracle);
        let other = (w + 1) % WINDOW_COUNT as u8;
        assert_eq!(cal.table.get("R1", other), 120.0);
        oracle
    }

    #[test]
    fn calibration_finds_smallest_perfect_threshold() {
        // Positives above 40, negatives below 35: 35 already separates them.
        assert_eq!(
            calibrate_single_key(&[30.0, 34.0, 45.0, 60.0, 90.0, 20.0, 41.0], 40.0),
            35.0
        );
        // A negative at 38 pushes the threshold to 40.
        assert_eq!(
            calibrate_single_key(&[30.0, 38.0, 45.0, 60.0, 90.0, 20.0, 41.0], 40.0),
            40.0
        );
    }

    #[test]
    fn all_negative_key_never_flags() {
        let net = network();
        let (s, labels) = synthetic_pairs(&[(30.0, false), (80.0, false), (150.0, false)]);
        let cal = calibrate_speed_table(
            &[LabeledStream {
                stream: &s,
                labels: &labels,
            }],
            &net,
            &CalibrationConfig::default(),
            &[],
        )
        .unwrap();
        assert_eq!(cal.per_key[0].theta, 200.0);
    }

    #[test]
    fn calibration_needs_labels() {
        let net = network();
        let s = UserStream::new("u", vec![rec(0, 0), rec(60, 1)]);
        let labels = vec![TruthLabel::Unknown; 2];
        let err = calibrate_speed_table(
            &[LabeledStream {
                stream: &s,
                labels: &labels,
            }],
            &net,
            &CalibrationConfig::default(),
            &[],
        );
        assert!(matches!(err, Err(Error::NoLabeledData)));
    }

    #[test]
    fn priors_seed_unlabeled_keys() {
        let net = network();
        let (s, labels) = synthetic_pairs(&[(50.0, true)]);
        let prior = SpeedPrior {
            region_id: "R1".into(),
            window_id: 3,
            avg_speed_kmph: 37.2,
        };
        let cal = calibrate_speed_table(
            &[LabeledStream {
                stream: &s,
                labels: &labels,
            }],
            &net,
            &CalibrationConfig::default(),
            &[prior],
        )
        .unwrap();
        let w = window_of(s.records[0].timestamp, 0);
        if w != 3 {
            assert_eq!(cal.table.get("R1", 3), 40.0);
        }
    }

    #[test]
    fn speed_table_round_trip() {
        let mut t = SpeedTable::new(120.0);
        t.insert("R2", 6, 35.0);
        t.insert("R1", 0, 5.0);
        let csv = t.to_csv();
        assert_eq!(csv, "region_id,window_id,theta_kmph\nR1,0,5\nR2,6,35\n");
        assert_eq!(SpeedTable::from_csv(csv.as_bytes(), 120.0).unwrap(), t);
        assert!(SpeedTable::from_csv("a,b,c\n".as_bytes(), 120.0).is_err());
    }

    #[test]
    fn grid_shape() {
        let g = default_theta_grid();
        assert_eq!(g.len(), 41);
        assert_eq!((g[0], g[1], g[40]), (0.0, 5.0, 200.0));
        assert!(theta_grid(0.0, 10.0).is_err());
    }

    fn arb_stream() -> impl Strategy<Value = UserStream> {
        prop::collection::vec((0i64..4000, 0u32..5), 1..40).prop_map(|mut v| {
            v.sort();
            let mut t = 0;
            let recs = v
                .into_iter()
                .map(|(dt, c)| {
                    t += dt;
                    rec(t, c)
                })
                .collect();
            UserStream::new("u", recs)
        })
    }

    proptest! {
        #[test]
        fn flag_sets_shrink_with_threshold(s in arb_stream(), lo in 0usize..41, hi in 0usize..41) {
            let reg = registry();
            let g = default_theta_grid();
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            let a = detect_fixed(&s, &reg, g[lo]).unwrap();
            let b = detect_fixed(&s, &reg, g[hi]).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(&x, &y)| !y || x));
            prop_assert!(!a[0] && !b[0]);
            prop_assert_eq!(a.len(), s.records.len());
        }

        #[test]
        fn calibrated_thresholds_lie_on_grid(s in arb_stream(), seed in 0u64..1000) {
            let net = network();
            let labels: Vec<TruthLabel> = (0..s.records.len())
                .map(|i| match (seed.wrapping_mul(31).wrapping_add(i as u64 * 17)) % 3 {
                    0 => TruthLabel::LoadShared,
                    1 => TruthLabel::Normal,
                    _ => TruthLabel::Unknown,
                })
                .collect();
            let ls = [LabeledStream { stream: &s, labels: &labels }];
            if let Ok(cal) = calibrate_speed_table(&ls, &net, &CalibrationConfig::default(), &[]) {
                let g = default_theta_grid();
                prop_assert!(cal.table.thresholds.values().all(|t| g.contains(t)));
                prop_assert!(g.contains(&cal.global_theta));
            }
        }
    }
}
