//! Loading and canonicalizing the CSV inputs.
//!
//! Every loader checks the header row exactly, parses each data row
//! independently and reports bad rows with their line number instead of
//! failing the whole file. Only a malformed header (or an I/O failure) is
//! fatal.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use chrono::{DateTime, SecondsFormat};
use csv::{ReaderBuilder, StringRecord, Trim};

use crate::error::{Error, Result};
use crate::geo::LatLon;
use crate::model::{
    CdrRecord, CellIdx, CellTower, GpsFix, Network, TowerRegistry, UserSegment, UserStream,
};
use crate::region::{Rect, Region, RegionGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cdr,
    Towers,
    Gps,
    Labels,
    Regions,
    Speeds,
    TruthFlags,
    TruthAnchors,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cdr => "cdr",
            DatasetKind::Towers => "towers",
            DatasetKind::Gps => "gps",
            DatasetKind::Labels => "labels",
            DatasetKind::Regions => "regions",
            DatasetKind::Speeds => "speeds",
            DatasetKind::TruthFlags => "truth_flags",
            DatasetKind::TruthAnchors => "truth_anchors",
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            DatasetKind::Cdr => &["user_id", "timestamp_iso8601", "cell_id", "duration_s"],
            DatasetKind::Towers => &["cell_id", "lat", "lon", "transmit_power_mw", "region_id"],
            DatasetKind::Gps => &["user_id", "timestamp_iso8601", "lat", "lon"],
            DatasetKind::Labels => &["user_id", "segment"],
            DatasetKind::Regions => &[
                "region_id",
                "lat_min",
                "lat_max",
                "lon_min",
                "lon_max",
                "is_study_area",
            ],
            DatasetKind::Speeds => &["region_id", "window_id", "avg_speed_kmph"],
            DatasetKind::TruthFlags => &["user_id", "timestamp_iso8601", "cell_id", "flag"],
            DatasetKind::TruthAnchors => &["user_id", "kind", "lat", "lon"],
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            DatasetKind::Cdr => "cdr.csv",
            DatasetKind::Towers => "towers.csv",
            DatasetKind::Gps => "gps.csv",
            DatasetKind::Labels => "labels.csv",
            DatasetKind::Regions => "regions.csv",
            DatasetKind::Speeds => "speeds.csv",
            DatasetKind::TruthFlags => "truth_flags.csv",
            DatasetKind::TruthAnchors => "truth_anchors.csv",
        }
    }
}

#[derive(Debug)]
pub struct Rejection {
    pub line: u64,
    pub error: Error,
}

/// A loaded collection and the rows that were rejected on the way.
#[derive(Debug)]
pub struct Loaded<T> {
    pub value: T,
    pub rejections: Vec<Rejection>,
}

/// Half-open `[start, end)` UTC range of accepted timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyPeriod {
    pub start: i64,
    pub end: i64,
}

/// Raw CDR rows with interned user ids, in file order.
#[derive(Debug, Default, Clone)]
pub struct CdrTable {
    pub users: Vec<String>,
    pub rows: Vec<(u32, CdrRecord)>,
}

impl CdrTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Flattens streams back into a table, e.g. to re-canonicalize.
    pub fn from_streams<'a, I: IntoIterator<Item = &'a UserStream>>(streams: I) -> Self {
        let mut table = CdrTable::default();
        for s in streams {
            let uid = table.users.len() as u32;
            table.users.push(s.user_id.clone());
            table.rows.extend(s.records.iter().map(|r| (uid, *r)));
        }
        table
    }
}

/// Per-user GPS fixes, each list sorted by timestamp.
pub type GpsTable = BTreeMap<String, Vec<GpsFix>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedPrior {
    pub region_id: String,
    pub window_id: u8,
    pub avg_speed_kmph: f64,
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(s.trim())
        .ok()
        .map(|t| t.timestamp())
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_default()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

struct Rows<R: Read> {
    reader: csv::Reader<R>,
    record: StringRecord,
    width: usize,
}

impl<R: Read> Rows<R> {
    fn new(input: R, kind: DatasetKind) -> Result<Self> {
        let mut reader = ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(Trim::All)
            .from_reader(input);
        let expected = kind.header();
        let found = reader.headers()?.clone();
        if found.len() != expected.len() || found.iter().zip(expected).any(|(f, e)| f != *e) {
            return Err(Error::MalformedHeader {
                kind: kind.name(),
                expected: expected.join(","),
                found: found.iter().collect::<Vec<_>>().join(","),
            });
        }
        Ok(Rows {
            reader,
            record: StringRecord::new(),
            width: expected.len(),
        })
    }

    /// Advances to the next row; yields its line number or a width error.
    fn next_row(&mut self) -> Result<Option<std::result::Result<u64, Rejection>>> {
        if !self.reader.read_record(&mut self.record)? {
            return Ok(None);
        }
        let line = self.record.position().map_or(0, |p| p.line());
        if self.record.len() != self.width {
            return Ok(Some(Err(Rejection {
                line,
                error: Error::row(
                    line,
                    format!(
                        "expected {} fields, found {}",
                        self.width,
                        self.record.len()
                    ),
                ),
            })));
        }
        Ok(Some(Ok(line)))
    }

    fn field(&self, i: usize) -> &str {
        &self.record[i]
    }
}

fn parse_f64(s: &str, line: u64, what: &str) -> std::result::Result<f64, Error> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::row(line, format!("invalid {what} `{s}`")))
}

fn parse_position(lat: &str, lon: &str, line: u64) -> std::result::Result<LatLon, Error> {
    let p = LatLon::new(parse_f64(lat, line, "lat")?, parse_f64(lon, line, "lon")?);
    if !p.is_valid() {
        return Err(Error::row(line, "coordinates out of range"));
    }
    Ok(p)
}

fn parse_ts(s: &str, line: u64) -> std::result::Result<i64, Error> {
    parse_timestamp(s).ok_or_else(|| Error::row(line, format!("invalid timestamp `{s}`")))
}

fn reject<T>(
    rejections: &mut Vec<Rejection>,
    line: u64,
    r: std::result::Result<T, Error>,
) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(error) => {
            rejections.push(Rejection { line, error });
            None
        }
    }
}

macro_rules! next_or_continue {
    ($rows:expr, $rejections:expr) => {
        match $rows.next_row()? {
            None => break,
            Some(Err(rej)) => {
                $rejections.push(rej);
                continue;
            }
            Some(Ok(line)) => line,
        }
    };
}

/// Reads `towers.csv`. When a grid is given, each tower must lie inside the
/// region it declares.
pub fn read_towers<R: Read>(input: R, grid: Option<&RegionGrid>) -> Result<Loaded<TowerRegistry>> {
    let mut rows = Rows::new(input, DatasetKind::Towers)?;
    let mut rejections = Vec::new();
    let mut towers = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    loop {
        let line = next_or_continue!(rows, rejections);
        let parsed = (|| {
            let cell_id = rows.field(0).to_string();
            if cell_id.is_empty() {
                return Err(Error::row(line, "empty cell_id"));
            }
            let position = parse_position(rows.field(1), rows.field(2), line)?;
            let power = parse_f64(rows.field(3), line, "transmit power")?;
            if power <= 0.0 {
                return Err(Error::NonPositivePower { line });
            }
            let region_id = rows.field(4).to_string();
            if let Some(grid) = grid {
                match grid.locate(position) {
                    Some(i) if grid.region(i).id == region_id => {}
                    Some(i) => {
                        return Err(Error::row(
                            line,
                            format!(
                                "tower lies in region `{}`, declares `{region_id}`",
                                grid.region(i).id
                            ),
                        ))
                    }
                    None => return Err(Error::row(line, "tower lies outside all regions")),
                }
            }
            if seen.contains_key(&cell_id) {
                return Err(Error::DuplicateKey { line, key: cell_id });
            }
            Ok(CellTower {
                cell_id,
                position,
                transmit_power_mw: power,
                region_id,
            })
        })();
        if let Some(t) = reject(&mut rejections, line, parsed) {
            seen.insert(t.cell_id.clone(), line);
            towers.push(t);
        }
    }
    let registry = TowerRegistry::new(towers)?;
    Ok(Loaded {
        value: registry,
        rejections,
    })
}

pub fn load_towers(path: &Path, grid: Option<&RegionGrid>) -> Result<Loaded<TowerRegistry>> {
    read_towers(open(path)?, grid)
}

pub fn read_regions<R: Read>(input: R) -> Result<Loaded<RegionGrid>> {
    let mut rows = Rows::new(input, DatasetKind::Regions)?;
    let mut rejections = Vec::new();
    let mut regions: Vec<Region> = Vec::new();
    loop {
        let line = next_or_continue!(rows, rejections);
        let parsed = (|| {
            let id = rows.field(0).to_string();
            if regions.iter().any(|r| r.id == id) {
                return Err(Error::DuplicateKey { line, key: id });
            }
            let rect = Rect::new(
                parse_f64(rows.field(1), line, "lat_min")?,
                parse_f64(rows.field(2), line, "lat_max")?,
                parse_f64(rows.field(3), line, "lon_min")?,
                parse_f64(rows.field(4), line, "lon_max")?,
            );
            let in_study_area = match rows.field(5) {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::row(
                        line,
                        format!("is_study_area must be 0 or 1, got `{other}`"),
                    ))
                }
            };
            Ok(Region {
                id,
                rect,
                in_study_area,
            })
        })();
        if let Some(r) = reject(&mut rejections, line, parsed) {
            regions.push(r);
        }
    }
    Ok(Loaded {
        value: RegionGrid::new(regions)?,
        rejections,
    })
}

pub fn load_regions(path: &Path) -> Result<Loaded<RegionGrid>> {
    read_regions(open(path)?)
}

/// Reads `cdr.csv`, resolving cells against the registry. Rows with unknown
/// cells or timestamps outside the study period are rejected.
pub fn read_cdr<R: Read>(
    input: R,
    registry: &TowerRegistry,
    period: Option<StudyPeriod>,
) -> Result<Loaded<CdrTable>> {
    let mut rows = Rows::new(input, DatasetKind::Cdr)?;
    let mut rejections = Vec::new();
    let mut table = CdrTable::default();
    let mut user_index: HashMap<String, u32> = HashMap::new();
    loop {
        let line = next_or_continue!(rows, rejections);
        let parsed = (|| {
            let timestamp = parse_ts(rows.field(1), line)?;
            if let Some(p) = period {
                if timestamp < p.start || timestamp >= p.end {
                    return Err(Error::row(line, "timestamp outside study period"));
                }
            }
            let cell = registry
                .resolve(rows.field(2))
                .ok_or_else(|| Error::row(line, format!("unknown cell `{}`", rows.field(2))))?;
            let duration = rows
                .field(3)
                .parse::<i64>()
                .map_err(|_| Error::row(line, format!("invalid duration `{}`", rows.field(3))))?;
            let duration = u32::try_from(duration)
                .map_err(|_| Error::row(line, format!("duration out of range `{duration}`")))?;
            if rows.field(0).is_empty() {
                return Err(Error::row(line, "empty user_id"));
            }
            Ok(CdrRecord {
                timestamp,
                cell,
                duration,
            })
        })();
        if let Some(rec) = reject(&mut rejections, line, parsed) {
            let name = rows.field(0);
            let uid = match user_index.get(name) {
                Some(&u) => u,
                None => {
                    let u = table.users.len() as u32;
                    table.users.push(name.to_string());
                    user_index.insert(name.to_string(), u);
                    u
                }
            };
            table.rows.push((uid, rec));
        }
    }
    Ok(Loaded {
        value: table,
        rejections,
    })
}

pub fn load_cdr(
    path: &Path,
    registry: &TowerRegistry,
    period: Option<StudyPeriod>,
) -> Result<Loaded<CdrTable>> {
    read_cdr(
        io::BufReader::with_capacity(1 << 20, open(path)?),
        registry,
        period,
    )
}

pub fn read_gps<R: Read>(input: R) -> Result<Loaded<GpsTable>> {
    let mut rows = Rows::new(input, DatasetKind::Gps)?;
    let mut rejections = Vec::new();
    let mut table = GpsTable::new();
    loop {
        let line = next_or_continue!(rows, rejections);
        let parsed = (|| {
            Ok(GpsFix {
                timestamp: parse_ts(rows.field(1), line)?,
                position: parse_position(rows.field(2), rows.field(3), line)?,
            })
        })();
        if let Some(fix) = reject(&mut rejections, line, parsed) {
            table
                .entry(rows.field(0).to_string())
                .or_default()
                .push(fix);
        }
    }
    for fixes in table.values_mut() {
        fixes.sort_by_key(|f| f.timestamp);
    }
    Ok(Loaded {
        value: table,
        rejections,
    })
}

pub fn load_gps(path: &Path) -> Result<Loaded<GpsTable>> {
    read_gps(io::BufReader::new(open(path)?))
}

pub fn read_labels<R: Read>(input: R) -> Result<Loaded<BTreeMap<String, UserSegment>>> {
    let mut rows = Rows::new(input, DatasetKind::Labels)?;
    let mut rejections = Vec::new();
    let mut labels = BTreeMap::new();
    loop {
        let line = next_or_continue!(rows, rejections);
        let user = rows.field(0).to_string();
        let parsed = rows
            .field(1)
            .parse::<UserSegment>()
            .map_err(|e| Error::row(line, e))
            .and_then(|seg| {
                if labels.contains_key(&user) {
                    Err(Error::DuplicateKey {
                        line,
                        key: user.clone(),
                    })
                } else {
                    Ok(seg)
                }
            });
        if let Some(seg) = reject(&mut rejections, line, parsed) {
            labels.insert(user, seg);
        }
    }
    Ok(Loaded {
        value: labels,
        rejections,
    })
}

pub fn load_labels(path: &Path) -> Result<Loaded<BTreeMap<String, UserSegment>>> {
    read_labels(open(path)?)
}

pub fn read_speeds<R: Read>(input: R) -> Result<Loaded<Vec<SpeedPrior>>> {
    let mut rows = Rows::new(input, DatasetKind::Speeds)?;
    let mut rejections = Vec::new();
    let mut speeds = Vec::new();
    loop {
        let line = next_or_continue!(rows, rejections);
        let parsed = (|| {
            let window_id = rows
                .field(1)
                .parse::<u8>()
                .ok()
                .filter(|w| *w < 7)
                .ok_or_else(|| {
                    Error::row(line, format!("invalid window_id `{}`", rows.field(1)))
                })?;
            let avg_speed_kmph = parse_f64(rows.field(2), line, "speed")?;
            if avg_speed_kmph <= 0.0 {
                return Err(Error::row(line, "speed must be positive"));
            }
            Ok(SpeedPrior {
                region_id: rows.field(0).to_string(),
                window_id,
                avg_speed_kmph,
            })
        })();
        if let Some(s) = reject(&mut rejections, line, parsed) {
            speeds.push(s);
        }
    }
    Ok(Loaded {
        value: speeds,
        rejections,
    })
}

pub fn load_speeds(path: &Path) -> Result<Loaded<Vec<SpeedPrior>>> {
    read_speeds(open(path)?)
}

/// Reference load-share flags per user as `(timestamp, cell, flag)`,
/// sorted by timestamp then cell.
pub type TruthFlags = BTreeMap<String, Vec<(i64, CellIdx, bool)>>;

pub fn read_truth_flags<R: Read>(input: R, registry: &TowerRegistry) -> Result<Loaded<TruthFlags>> {
    let mut rows = Rows::new(input, DatasetKind::TruthFlags)?;
    let mut rejections = Vec::new();
    let mut table = TruthFlags::new();
    loop {
        let line = next_or_continue!(rows, rejections);
        let parsed = (|| {
            let ts = parse_ts(rows.field(1), line)?;
            let cell = registry
                .resolve(rows.field(2))
                .ok_or_else(|| Error::row(line, format!("unknown cell `{}`", rows.field(2))))?;
            let flag = match rows.field(3) {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(Error::row(line, format!("invalid flag `{other}`"))),
            };
            Ok((ts, cell, flag))
        })();
        if let Some(row) = reject(&mut rejections, line, parsed) {
            table
                .entry(rows.field(0).to_string())
                .or_default()
                .push(row);
        }
    }
    for v in table.values_mut() {
        v.sort_unstable();
    }
    Ok(Loaded {
        value: table,
        rejections,
    })
}

pub fn load_truth_flags(path: &Path, registry: &TowerRegistry) -> Result<Loaded<TruthFlags>> {
    read_truth_flags(io::BufReader::with_capacity(1 << 20, open(path)?), registry)
}

/// Reference home and work positions of one user.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TruthAnchor {
    pub home: Option<LatLon>,
    pub work: Option<LatLon>,
}

pub fn read_truth_anchors<R: Read>(input: R) -> Result<Loaded<BTreeMap<String, TruthAnchor>>> {
    let mut rows = Rows::new(input, DatasetKind::TruthAnchors)?;
    let mut rejections = Vec::new();
    let mut table: BTreeMap<String, TruthAnchor> = BTreeMap::new();
    loop {
        let line = next_or_continue!(rows, rejections);
        let user = rows.field(0).to_string();
        let parsed = (|| {
            let p = parse_position(rows.field(2), rows.field(3), line)?;
            let entry = table.get(&user).copied().unwrap_or_default();
            let slot = match rows.field(1) {
                "home" => entry.home,
                "work" => entry.work,
                other => return Err(Error::row(line, format!("invalid anchor kind `{other}`"))),
            };
            if slot.is_some() {
                return Err(Error::DuplicateKey {
                    line,
                    key: format!("{user}/{}", rows.field(1)),
                });
            }
            Ok((rows.field(1) == "home", p))
        })();
        if let Some((home, p)) = reject(&mut rejections, line, parsed) {
            let e = table.entry(user).or_default();
            if home {
                e.home = Some(p);
            } else {
                e.work = Some(p);
            }
        }
    }
    Ok(Loaded {
        value: table,
        rejections,
    })
}

pub fn load_truth_anchors(path: &Path) -> Result<Loaded<BTreeMap<String, TruthAnchor>>> {
    read_truth_anchors(open(path)?)
}

/// Result of [`canonicalize_streams`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Canonical {
    pub streams: BTreeMap<String, UserStream>,
    pub duplicates_removed: usize,
}

/// Groups records per user, sorts each stream by `(timestamp, cell)` and
/// drops records repeating an already-seen `(timestamp, cell)` pair.
pub fn canonicalize_streams(table: CdrTable) -> Canonical {
    let CdrTable { users, mut rows } = table;
    rows.sort_unstable();
    let mut out = Canonical::default();
    let mut current: Option<(u32, Vec<CdrRecord>)> = None;
    let flush = |cur: Option<(u32, Vec<CdrRecord>)>, out: &mut Canonical| {
        if let Some((uid, records)) = cur {
            let name = &users[uid as usize];
            match out.streams.get_mut(name) {
                // Same user name interned twice: merge and restore order.
                Some(existing) => {
                    existing.records.extend(records);
                    existing.records.sort_unstable();
                    let before = existing.records.len();
                    existing.records.dedup_by_key(|r| (r.timestamp, r.cell));
                    out.duplicates_removed += before - existing.records.len();
                }
                None => {
                    out.streams
                        .insert(name.clone(), UserStream::new(name.clone(), records));
                }
            }
        }
    };
    for (uid, rec) in rows {
        match &mut current {
            Some((cur, records)) if *cur == uid => {
                let last = records.last().expect("non-empty");
                if last.timestamp == rec.timestamp && last.cell == rec.cell {
                    out.duplicates_removed += 1;
                } else {
                    records.push(rec);
                }
            }
            _ => {
                let prev = current.replace((uid, vec![rec]));
                flush(prev, &mut out);
            }
        }
    }
    flush(current, &mut out);
    out
}

/// Attaches GPS traces to matching streams; returns how many were attached.
pub fn attach_gps(streams: &mut BTreeMap<String, UserStream>, gps: GpsTable) -> usize {
    let mut attached = 0;
    for (user, fixes) in gps {
        if let Some(s) = streams.get_mut(&user) {
            s.gps = Some(fixes);
            attached += 1;
        }
    }
    attached
}

pub fn attach_labels(
    streams: &mut BTreeMap<String, UserStream>,
    labels: &BTreeMap<String, UserSegment>,
) -> usize {
    let mut attached = 0;
    for (user, seg) in labels {
        if let Some(s) = streams.get_mut(user) {
            s.segment = Some(*seg);
            attached += 1;
        }
    }
    attached
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyAreaOutcome {
    pub retained: BTreeMap<String, UserStream>,
    pub dropped_users: Vec<String>,
    /// Outside-area records removed from retained users.
    pub trimmed_records: usize,
}

/// Keeps users whose share of records served inside the study area is at
/// least `min_fraction`, and strips their outside records.
pub fn study_area_filter(
    streams: BTreeMap<String, UserStream>,
    net: &Network,
    min_fraction: f64,
) -> StudyAreaOutcome {
    let mut out = StudyAreaOutcome::default();
    for (user, mut stream) in streams {
        let total = stream.records.len();
        let inside = stream
            .records
            .iter()
            .filter(|r| net.cell_in_study_area(r.cell))
            .count();
        let fraction = if total == 0 {
            0.0
        } else {
            inside as f64 / total as f64
        };
        if total == 0 || fraction < min_fraction {
            out.dropped_users.push(user);
            continue;
        }
        if inside < total {
            stream.records.retain(|r| net.cell_in_study_area(r.cell));
            out.trimmed_records += total - inside;
        }
        out.retained.insert(user, stream);
    }
    out
}
