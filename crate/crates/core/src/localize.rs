//! Home and work anchors from stay clusters and weighted centroids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{DistanceMode, LatLon};
use crate::model::{sub_seed, CdrRecord, CellIdx, GpsFix, TowerRegistry, UserSegment, UserStream};
use crate::stats::median;
use crate::timewin::Calendar;

pub const DEFAULT_EPS_M: f64 = 1000.0;
pub const DEFAULT_MIN_PTS: u64 = 3;
pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL_DEG: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnchorKind {
    Home,
    Work,
}

impl AnchorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorKind::Home => "home",
            AnchorKind::Work => "work",
        }
    }

    /// Home: [20:00, 05:00) on any day. Work: [10:00, 12:00) and
    /// [13:00, 16:00) on working days.
    pub fn includes(self, calendar: &Calendar, timestamp: i64) -> bool {
        let m = calendar.minute(timestamp);
        match self {
            AnchorKind::Home => !(300..1200).contains(&m),
            AnchorKind::Work => {
                ((600..720).contains(&m) || (780..960).contains(&m))
                    && calendar.is_workday(calendar.day(timestamp))
            }
        }
    }
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnchorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "home" => Ok(AnchorKind::Home),
            "work" => Ok(AnchorKind::Work),
            other => Err(format!("unknown anchor kind `{other}`")),
        }
    }
}

/// A distinct tower with the number of records it carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StayPoint {
    pub position: LatLon,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Clustering {
    /// Member indices per cluster, in discovery order.
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// DBSCAN where a point's density is the total record count within `eps_m`
/// (itself included), so a tower with `min_pts` records is core on its own.
pub fn dbscan_stay_clusters(
    points: &[StayPoint],
    eps_m: f64,
    min_pts: u64,
    metric: DistanceMode,
) -> Clustering {
    let n = points.len();
    let eps_km = eps_m / 1000.0;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| metric.distance_km(points[i].position, points[j].position) <= eps_km)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors
        .iter()
        .map(|nb| nb.iter().map(|&j| points[j].count).sum::<u64>() >= min_pts)
        .collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if label[i].is_some() || !core[i] {
            continue;
        }
        let c = clusters.len();
        let mut members = Vec::new();
        let mut queue = vec![i];
        label[i] = Some(c);
        while let Some(p) = queue.pop() {
            members.push(p);
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(c);
                    queue.push(q);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    let noise = (0..n).filter(|&i| label[i].is_none()).collect();
    Clustering { clusters, noise }
}

/// Maps values onto [0, 1]; a constant vector maps to all ones.
pub fn minmax_scale(values: &[f64]) -> Vec<f64> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if max <= min {
        return vec![1.0; values.len()];
    }
    values.iter().map(|&v| (v - min) / (max - min)).collect()
}

/// Per-cell inputs to the weighting: load-shared records, inverse transmit
/// power and distinct active days.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub cell: CellIdx,
    pub position: LatLon,
    pub records: u64,
    pub load_shared: u64,
    pub inv_power: f64,
    pub days: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
        }
    }
}

impl SegmentParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        SegmentParams { alpha, beta, gamma }
    }

    pub fn in_box(&self) -> bool {
        [self.alpha, self.beta, self.gamma]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }
}

/// Min-max scaled factors of one cluster, cached for repeated weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledFactors {
    pub load_shared: Vec<f64>,
    pub inv_power: Vec<f64>,
    pub days: Vec<f64>,
}

impl ScaledFactors {
    pub fn new(stats: &[CellStats]) -> Self {
        let col = |f: fn(&CellStats) -> f64| minmax_scale(&stats.iter().map(f).collect::<Vec<_>>());
        ScaledFactors {
            load_shared: col(|s| s.load_shared as f64),
            inv_power: col(|s| s.inv_power),
            days: col(|s| s.days as f64),
        }
    }

    pub fn weights(&self, p: SegmentParams) -> Vec<f64> {
        (0..self.days.len())
            .map(|i| {
                p.alpha * self.load_shared[i] + p.beta * self.inv_power[i] + p.gamma * self.days[i]
            })
            .collect()
    }
}

/// W = α·L̂ + β·(1/P)̂ + γ·Ĉ with each factor scaled within the cluster.
pub fn cell_weights(stats: &[CellStats], params: SegmentParams) -> Vec<f64> {
    ScaledFactors::new(stats).weights(params)
}

/// Weighted mean of (lat, lon) measured from the first point, so a lone
/// point (or identical points) comes back bit-exact.
pub fn weighted_mean(points: &[LatLon], weights: &[f64]) -> Result<LatLon> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || points.is_empty() {
        return Err(Error::ZeroTotalWeight);
    }
    let origin = points[0];
    let (mut lat, mut lon) = (0.0, 0.0);
    for (p, &w) in points.iter().zip(weights) {
        lat += w * (p.lat - origin.lat);
        lon += w * (p.lon - origin.lon);
    }
    Ok(LatLon::new(
        origin.lat + lat / total,
        origin.lon + lon / total,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<LatLon>,
    pub assignment: Vec<usize>,
    /// Weighted within-cluster cost after each assignment step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    /// Centroid carrying the largest total weight (first on ties).
    pub fn heaviest(&self, weights: &[f64]) -> LatLon {
        let mut mass = vec![0.0; self.centroids.len()];
        for (&c, &w) in self.assignment.iter().zip(weights) {
            mass[c] += w;
        }
        let best = (0..mass.len()).fold(0, |b, i| if mass[i] > mass[b] { i } else { b });
        self.centroids[best]
    }
}

/// Squared distance in degrees with longitude scaled by `lon_scale`.
fn sq_dist(a: LatLon, b: LatLon, lon_scale: f64) -> f64 {
    let dy = a.lat - b.lat;
    let dx = (a.lon - b.lon) * lon_scale;
    dx * dx + dy * dy
}

fn draw(rng: &mut ChaCha8Rng, mass: &[f64]) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            last = Some(i);
            if u < m {
                return Some(i);
            }
            u -= m;
        }
    }
    last
}

/// k-means++ seeding (first centre drawn ∝ w, later ones ∝ w·d²) followed
/// by weighted Lloyd iterations in a local equirectangular frame.
pub fn weighted_kmeanspp(
    points: &[LatLon],
    weights: &[f64],
    k: usize,
    seed: u64,
) -> Result<KMeansResult> {
    if points.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            found: weights.len(),
        });
    }
    if k == 0 || !(weights.iter().sum::<f64>() > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::ZeroTotalWeight);
    }
    let mean_lat = points.iter().map(|p| p.lat).sum::<f64>() / points.len() as f64;
    let lon_scale = mean_lat.to_radians().cos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let first = draw(&mut rng, weights).ok_or(Error::ZeroTotalWeight)?;
    let mut centroids = vec![points[first]];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|&p| sq_dist(p, points[first], lon_scale))
        .collect();
    while centroids.len() < k {
        let mass: Vec<f64> = weights.iter().zip(&d2).map(|(w, d)| w * d).collect();
        let next = match draw(&mut rng, &mass) {
            Some(i) => i,
            // Every weighted point already coincides with a centre.
            None => match (0..points.len()).find(|&i| d2[i] > 0.0) {
                Some(i) => i,
                None => break,
            },
        };
        centroids.push(points[next]);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next], lon_scale));
        }
    }

    let mut assignment = vec![0; points.len()];
    let mut cost_history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut cost = 0.0;
        for (i, &p) in points.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, &m)| (c, sq_dist(p, m, lon_scale)))
                .fold(
                    (0, f64::INFINITY),
                    |acc, x| if x.1 < acc.1 { x } else { acc },
                );
            assignment[i] = best;
            cost += weights[i] * d;
        }
        cost_history.push(cost);
        let mut shift: f64 = 0.0;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let (pts, ws): (Vec<LatLon>, Vec<f64>) = points
                .iter()
                .zip(weights)
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|((&p, &w), _)| (p, w))
                .unzip();
            if let Ok(m) = weighted_mean(&pts, &ws) {
                shift = shift
                    .max((m.lat - centroid.lat).abs())
                    .max((m.lon - centroid.lon).abs());
                *centroid = m;
            }
        }
        if shift < KMEANS_TOL_DEG {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        cost_history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeConfig {
    pub eps_m: f64,
    pub min_pts: u64,
    pub k: usize,
    pub seed: u64,
    pub metric: DistanceMode,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            eps_m: DEFAULT_EPS_M,
            min_pts: DEFAULT_MIN_PTS,
            k: 1,
            seed: 0,
            metric: DistanceMode::Haversine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub position: LatLon,
    /// Distinct active days of the cluster (or tower) the anchor came from.
    pub cluster_days: u64,
}

/// Records of one kind's hours, with their detector flags.
fn restricted<'a>(
    stream: &'a UserStream,
    flags: Option<&'a [bool]>,
    kind: AnchorKind,
    calendar: &'a Calendar,
) -> impl Iterator<Item = (&'a CdrRecord, bool)> + 'a {
    stream
        .records
        .iter()
        .enumerate()
        .filter(move |(_, r)| kind.includes(calendar, r.timestamp))
        .map(move |(i, r)| (r, flags.is_some_and(|f| f.get(i).copied().unwrap_or(false))))
}

/// Per-cell statistics of a user's records within a kind's hours, ordered
/// by cell. Day counts use each record's own local date.
pub fn cell_stats(
    stream: &UserStream,
    flags: Option<&[bool]>,
    kind: AnchorKind,
    calendar: &Calendar,
    towers: &TowerRegistry,
) -> Result<(Vec<CellStats>, Vec<BTreeSet<i64>>)> {
    let mut acc: BTreeMap<CellIdx, (u64, u64, BTreeSet<i64>)> = BTreeMap::new();
    for (r, flagged) in restricted(stream, flags, kind, calendar) {
        let e = acc.entry(r.cell).or_default();
        e.0 += 1;
        e.1 += u64::from(flagged);
        e.2.insert(calendar.day(r.timestamp));
    }
    let mut stats = Vec::with_capacity(acc.len());
    let mut days = Vec::with_capacity(acc.len());
    for (cell, (records, load_shared, d)) in acc {
        let t = towers.tower(cell)?;
        stats.push(CellStats {
            cell,
            position: t.position,
            records,
            load_shared,
            inv_power: 1.0 / t.transmit_power_mw,
            days: d.len() as u64,
        });
        days.push(d);
    }
    Ok((stats, days))
}

/// The stay cluster an anchor is computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct StayCluster {
    pub members: Vec<CellStats>,
    pub active_days: u64,
    pub records: u64,
}

/// Clusters a kind's cells and selects the one with the most distinct
/// active days (then more records, then the southern-then-western-most
/// centroid). When every cell is noise each becomes its own cluster.
pub fn select_stay_cluster(
    stats: Vec<CellStats>,
    days: &[BTreeSet<i64>],
    cfg: &LocalizeConfig,
) -> Option<StayCluster> {
    if stats.is_empty() {
        return None;
    }
    let points: Vec<StayPoint> = stats
        .iter()
        .map(|s| StayPoint {
            position: s.position,
            count: s.records,
        })
        .collect();
    let mut clustering = dbscan_stay_clusters(&points, cfg.eps_m, cfg.min_pts, cfg.metric);
    if clustering.clusters.is_empty() {
        clustering.clusters = clustering.noise.iter().map(|&i| vec![i]).collect();
    }
    let summary = |members: &[usize]| {
        let active: BTreeSet<i64> = members
            .iter()
            .flat_map(|&i| days[i].iter().copied())
            .collect();
        let records: u64 = members.iter().map(|&i| stats[i].records).sum();
        let n = members.len() as f64;
        let lat = members.iter().map(|&i| stats[i].position.lat).sum::<f64>() / n;
        let lon = members.iter().map(|&i| stats[i].position.lon).sum::<f64>() / n;
        (active.len() as u64, records, lat, lon)
    };
    let best = clustering
        .clusters
        .iter()
        .map(|m| (m, summary(m)))
        .reduce(|a, b| {
            let (da, ra, lat_a, lon_a) = a.1;
            let (db, rb, lat_b, lon_b) = b.1;
            let b_wins = db > da
                || (db == da && rb > ra)
                || (db == da && rb == ra && (lat_b, lon_b) < (lat_a, lon_a));
            if b_wins {
                b
            } else {
                a
            }
        })?;
    let (members, (active_days, records, _, _)) = best;
    Some(StayCluster {
        members: members.iter().map(|&i| stats[i].clone()).collect(),
        active_days,
        records,
    })
}

/// Weighted centroid of a cluster; all-zero weights fall back to uniform.
pub fn cluster_centroid(
    cluster: &StayCluster,
    weights: &[f64],
    k: usize,
    seed: u64,
) -> Result<LatLon> {
    let points: Vec<LatLon> = cluster.members.iter().map(|m| m.position).collect();
    let uniform;
    let w = if weights.iter().sum::<f64>() > 0.0 {
        weights
    } else {
        uniform = vec![1.0; points.len()];
        &uniform
    };
    let k = k.clamp(1, points.len());
    let km = weighted_kmeanspp(&points, w, k, seed)?;
    Ok(km.heaviest(w))
}

pub fn infer_anchor(
    stream: &UserStream,
    flags: Option<&[bool]>,
    kind: AnchorKind,
    params: SegmentParams,
    calendar: &Calendar,
    towers: &TowerRegistry,
    cfg: &LocalizeConfig,
) -> Result<Option<Anchor>> {
    let (stats, days) = cell_stats(stream, flags, kind, calendar, towers)?;
    let Some(cluster) = select_stay_cluster(stats, &days, cfg) else {
        return Ok(None);
    };
    let weights = cell_weights(&cluster.members, params);
    let position = cluster_centroid(
        &cluster,
        &weights,
        cfg.k,
        sub_seed(cfg.seed, &stream.user_id),
    )?;
    Ok(Some(Anchor {
        position,
        cluster_days: cluster.active_days,
    }))
}

/// Tower with the most distinct active days in the kind's hours; ties go to
/// more records, then to cell order.
pub fn calldays_anchor(
    stream: &UserStream,
    kind: AnchorKind,
    calendar: &Calendar,
    towers: &TowerRegistry,
) -> Result<Option<Anchor>> {
    let (stats, _) = cell_stats(stream, None, kind, calendar, towers)?;
    let best = stats.iter().reduce(|a, b| {
        if (b.days, b.records) > (a.days, a.records) {
            b
        } else {
            a
        }
    });
    Ok(best.map(|s| Anchor {
        position: s.position,
        cluster_days: s.days,
    }))
}

/// Coordinate-wise median of the GPS fixes inside a kind's hours.
pub fn gps_anchor(fixes: &[GpsFix], kind: AnchorKind, calendar: &Calendar) -> Option<LatLon> {
    let (lats, lons): (Vec<f64>, Vec<f64>) = fixes
        .iter()
        .filter(|f| kind.includes(calendar, f.timestamp))
        .map(|f| (f.position.lat, f.position.lon))
        .unzip();
    Some(LatLon::new(median(&lats)?, median(&lons)?))
}

/// A training user: the selected home cluster and the true home.
#[derive(Debug, Clone, PartialEq)]
pub struct FitUser {
    pub cluster: StayCluster,
    pub truth: LatLon,
}

impl FitUser {
    pub fn from_stream(
        stream: &UserStream,
        flags: Option<&[bool]>,
        truth: LatLon,
        calendar: &Calendar,
        towers: &TowerRegistry,
        cfg: &LocalizeConfig,
    ) -> Result<Option<Self>> {
        let (stats, days) = cell_stats(stream, flags, AnchorKind::Home, calendar, towers)?;
        Ok(select_stay_cluster(stats, &days, cfg).map(|cluster| FitUser { cluster, truth }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub params: SegmentParams,
    pub median_error_m: f64,
    pub users: usize,
}

/// Grid indices (a, b, c) over {0..=10}³ without the origin, in tie order:
/// ascending sum, then lexicographic.
fn grid_in_tie_order() -> Vec<[u8; 3]> {
    let mut v: Vec<[u8; 3]> = (0..=10u8)
        .flat_map(|a| (0..=10u8).flat_map(move |b| (0..=10u8).map(move |c| [a, b, c])))
        .filter(|t| t != &[0, 0, 0])
        .collect();
    v.sort_by_key(|t| (t[0] + t[1] + t[2], *t));
    v
}

/// Errors closer than this are treated as equal when fitting.
const FIT_TIE_M: f64 = 1e-6;

/// Exhaustive search of α, β, γ ∈ {0, 0.1, ..., 1} minimizing the median
/// home error; ties go to the smallest α+β+γ, then lexicographic order.
pub fn fit_segment_params(users: &[FitUser], cfg: &LocalizeConfig) -> Result<FitResult> {
    if users.is_empty() {
        return Err(Error::NoLabeledUsers);
    }
    let factors: Vec<ScaledFactors> = users
        .iter()
        .map(|u| ScaledFactors::new(&u.cluster.members))
        .collect();
    let candidates = grid_in_tie_order();
    let errors: Vec<f64> = candidates
        .par_iter()
        .map(|t| {
            let p = SegmentParams::new(
                f64::from(t[0]) / 10.0,
                f64::from(t[1]) / 10.0,
                f64::from(t[2]) / 10.0,
            );
            let errs: Vec<f64> = users
                .iter()
                .zip(&factors)
                .map(|(u, f)| {
                    let w = f.weights(p);
                    let c = cluster_centroid(&u.cluster, &w, cfg.k, cfg.seed)?;
                    Ok(cfg.metric.distance_km(c, u.truth) * 1000.0)
                })
                .collect::<Result<_>>()?;
            Ok(median(&errs).unwrap_or(f64::INFINITY))
        })
        .collect::<Result<_>>()?;
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let i = errors
        .iter()
        .position(|&e| e <= min + FIT_TIE_M)
        .expect("grid is non-empty");
    let t = candidates[i];
    Ok(FitResult {
        params: SegmentParams::new(
            f64::from(t[0]) / 10.0,
            f64::from(t[1]) / 10.0,
            f64::from(t[2]) / 10.0,
        ),
        median_error_m: errors[i],
        users: users.len(),
    })
}

/// Fitted parameters per segment; segments without training users use the
/// fit over all training users.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentParamTable {
    pub per_segment: BTreeMap<UserSegment, FitResult>,
    pub global: FitResult,
}

impl SegmentParamTable {
    pub fn get(&self, segment: Option<UserSegment>) -> SegmentParams {
        segment
            .and_then(|s| self.per_segment.get(&s))
            .unwrap_or(&self.global)
            .params
    }

    pub fn fit(users: &[(UserSegment, FitUser)], cfg: &LocalizeConfig) -> Result<Self> {
        let all: Vec<FitUser> = users.iter().map(|(_, u)| u.clone()).collect();
        let global = fit_segment_params(&all, cfg)?;
        let mut per_segment = BTreeMap::new();
        for seg in UserSegment::ALL {
            let group: Vec<FitUser> = users
                .iter()
                .filter(|(s, _)| *s == seg)
                .map(|(_, u)| u.clone())
                .collect();
            if !group.is_empty() {
                per_segment.insert(seg, fit_segment_params(&group, cfg)?);
            }
        }
        Ok(SegmentParamTable {
            per_segment,
            global,
        })
    }

    /// `segment,alpha,beta,gamma,median_error_m`; the global fit is `all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,alpha,beta,gamma,median_error_m\n");
        let rows = self
            .per_segment
            .iter()
            .map(|(s, f)| (s.as_str(), f))
            .chain(std::iter::once(("all", &self.global)));
        for (name, f) in rows {
            let p = f.params;
            let _ = writeln!(
                out,
                "{name},{:.1},{:.1},{:.1},{:.3}",
                p.alpha, p.beta, p.gamma, f.median_error_m
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMethod {
    Weighted,
    CallDays,
}

impl AnchorMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorMethod::Weighted => "weighted",
            AnchorMethod::CallDays => "calldays",
        }
    }
}

/// One row of `anchors.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRow {
    pub user_id: String,
    pub kind: AnchorKind,
    pub method: AnchorMethod,
    pub anchor: Anchor,
}

pub fn anchors_csv(rows: &[AnchorRow]) -> String {
    let mut out = String::from("user_id,kind,lat,lon,method,cluster_days\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.7},{:.7},{},{}",
            r.user_id,
            r.kind,
            r.anchor.position.lat,
            r.anchor.position.lon,
            r.method.as_str(),
            r.anchor.cluster_days
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CdrRecord, CellTower};
    use proptest::prelude::*;

    fn sp(lat: f64, lon: f64, count: u64) -> StayPoint {
        StayPoint {
            position: LatLon::new(lat, lon),
            count,
        }
    }

    #[test]
    fn dbscan_examples() {
        // Three towers within 200 m.
        let pts = [sp(6.9, 79.9, 1), sp(6.9009, 79.9, 1), sp(6.9, 79.9009, 1)];
        let c = dbscan_stay_clusters(&pts, 1000.0, 3, DistanceMode::Haversine);
        assert_eq!(c.clusters, vec![vec![0, 1, 2]]);
        // 50 km apart.
        let pts = [sp(6.9, 79.9, 5), sp(7.35, 79.9, 5)];
        let c = dbscan_stay_clusters(&pts, 1000.0, 3, DistanceMode::Haversine);
        assert_eq!(c.clusters, vec![vec![0], vec![1]]);
        // Lone tower, 1 record: noise; 3 records: core on its own.
        let c = dbscan_stay_clusters(&[sp(6.9, 79.9, 1)], 1000.0, 3, DistanceMode::Haversine);
        assert_eq!((c.clusters.len(), c.noise.clone()), (0, vec![0]));
        let c = dbscan_stay_clusters(&[sp(6.9, 79.9, 3)], 1000.0, 3, DistanceMode::Haversine);
        assert_eq!(c.clusters, vec![vec![0]]);
    }

    #[test]
    fn dbscan_border_points_join_but_do_not_expand() {
        // Points 0.8 km apart on a meridian; only index 1 reaches density 4.
        let pts = [
            sp(-0.0072, 0.0, 2),
            sp(0.0, 0.0, 1),
            sp(0.0072, 0.0, 1),
            sp(0.0144, 0.0, 1),
        ];
        let c = dbscan_stay_clusters(&pts, 1000.0, 4, DistanceMode::Haversine);
        assert_eq!(c.clusters, vec![vec![0, 1, 2]]);
        assert_eq!(c.noise, vec![3]);
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_scale(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_scale(&[7.0, 7.0, 7.0]), vec![1.0; 3]);
        assert_eq!(minmax_scale(&[4.2]), vec![1.0]);
    }

    fn stats(ls: u64, inv_power: f64, days: u64) -> CellStats {
        CellStats {
            cell: CellIdx(0),
            position: LatLon::new(0.0, 0.0),
            records: days,
            load_shared: ls,
            inv_power,
            days,
        }
    }

    #[test]
    fn weight_examples() {
        let f = ScaledFactors {
            load_shared: vec![0.5],
            inv_power: vec![0.2],
            days: vec![0.3],
        };
        assert!((f.weights(SegmentParams::new(1.0, 1.0, 1.0))[0] - 1.0).abs() < 1e-15);
        let s = [stats(0, 1.0, 2), stats(3, 0.5, 9)];
        assert_eq!(
            cell_weights(&s, SegmentParams::new(0.0, 0.0, 0.0)),
            vec![0.0, 0.0]
        );
        let w = cell_weights(&[stats(2, 0.01, 4)], SegmentParams::new(0.3, 0.2, 0.4));
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn kmeans_examples() {
        let a = LatLon::new(6.9, 79.85);
        let b = LatLon::new(6.95, 79.9);
        let r = weighted_kmeanspp(&[a, b], &[1.0, 1.0], 1, 7).unwrap();
        assert!((r.centroids[0].lat - 6.925).abs() < 1e-12);
        assert!((r.centroids[0].lon - 79.875).abs() < 1e-12);
        let r = weighted_kmeanspp(&[a, b], &[3.0, 1.0], 1, 7).unwrap();
        assert!((r.centroids[0].lat - (a.lat + 0.25 * (b.lat - a.lat))).abs() < 1e-12);
        assert!((r.centroids[0].lon - (a.lon + 0.25 * (b.lon - a.lon))).abs() < 1e-12);
        let r = weighted_kmeanspp(&[a, b], &[1.0, 1.0], 2, 7).unwrap();
        let mut c = r.centroids.clone();
        c.sort_by(|x, y| x.lat.total_cmp(&y.lat));
        assert_eq!(c, vec![a, b]);
        assert_eq!(*r.cost_history.last().unwrap(), 0.0);
        assert!(matches!(
            weighted_kmeanspp(&[a, b], &[0.0, 0.0], 1, 7),
            Err(Error::ZeroTotalWeight)
        ));
    }

    fn registry() -> TowerRegistry {
        let t = |id: &str, lat: f64, lon: f64, p: f64| CellTower {
            cell_id: id.into(),
            position: LatLon::new(lat, lon),
            transmit_power_mw: p,
            region_id: "R".into(),
        };
        TowerRegistry::new(vec![
            t("A", 6.90, 79.85, 1000.0),
            t("B", 7.10, 79.85, 1000.0),
            t("C", 6.9005, 79.8505, 500.0),
        ])
        .unwrap()
    }

    // 2024-01-01 (a Monday) 00:00 UTC.
    const MONDAY: i64 = 1_704_067_200;
    const DAY: i64 = 86_400;

    fn at(day: i64, hour: i64, cell: u32) -> CdrRecord {
        CdrRecord {
            timestamp: MONDAY + day * DAY + hour * 3600,
            cell: CellIdx(cell),
            duration: 60,
        }
    }

    fn stream(mut recs: Vec<CdrRecord>) -> UserStream {
        recs.sort();
        UserStream::new("u", recs)
    }

    #[test]
    fn anchor_examples() {
        let reg = registry();
        let cal = Calendar::new(0);
        let cfg = LocalizeConfig::default();
        let p = SegmentParams::default();

        let s = stream((0..5).map(|d| at(d, 22, 0)).collect());
        let a = infer_anchor(&s, None, AnchorKind::Home, p, &cal, &reg, &cfg)
            .unwrap()
            .unwrap();
        assert_eq!(a.position, reg.towers()[0].position);

        // 10 nights at A, 2 at B (22 km away).
        let mut recs: Vec<CdrRecord> = (0..10).map(|d| at(d, 23, 0)).collect();
        recs.extend((0..2).flat_map(|d| [at(d, 21, 1), at(d, 20, 1)]));
        let s = stream(recs);
        let a = infer_anchor(&s, None, AnchorKind::Home, p, &cal, &reg, &cfg)
            .unwrap()
            .unwrap();
        assert_eq!(a.position, reg.towers()[0].position);
        assert_eq!(a.cluster_days, 10);

        // Only weekend daytime records: no work anchor.
        let s = stream(vec![at(5, 11, 0), at(6, 14, 0)]);
        assert!(
            infer_anchor(&s, None, AnchorKind::Work, p, &cal, &reg, &cfg)
                .unwrap()
                .is_none()
        );
        // Holidays are excluded like weekends.
        let holiday =
            Calendar::new(0).with_holidays([chrono::NaiveDate::from_ymd_opt(2024, 1, 2).unwrap()]);
        let s = stream(vec![at(1, 11, 0)]);
        assert!(
            infer_anchor(&s, None, AnchorKind::Work, p, &holiday, &reg, &cfg)
                .unwrap()
                .is_none()
        );
        assert!(
            infer_anchor(&s, None, AnchorKind::Work, p, &cal, &reg, &cfg)
                .unwrap()
                .is_some()
        );
    }

    #[test]
    fn hour_windows() {
        let cal = Calendar::new(0);
        let home = |h: i64, m: i64| AnchorKind::Home.includes(&cal, MONDAY + h * 3600 + m * 60);
        assert!(home(20, 0) && home(2, 0) && home(4, 59));
        assert!(!home(5, 0) && !home(19, 59));
        let work = |d: i64, h: i64| AnchorKind::Work.includes(&cal, MONDAY + d * DAY + h * 3600);
        assert!(work(0, 10) && work(0, 11) && work(0, 13) && work(0, 15));
        assert!(!work(0, 12) && !work(0, 16) && !work(0, 9));
        assert!(!work(5, 11) && !work(6, 11));
    }

    #[test]
    fn weighting_shifts_centroid_toward_low_power_busy_cell() {
        let reg = registry();
        let cal = Calendar::new(0);
        let cfg = LocalizeConfig::default();
        let mut recs: Vec<CdrRecord> = (0..6).map(|d| at(d, 22, 2)).collect();
        recs.extend((0..2).map(|d| at(d, 23, 0)));
        let s = stream(recs);
        let a = infer_anchor(
            &s,
            None,
            AnchorKind::Home,
            SegmentParams::new(0.0, 0.0, 1.0),
            &cal,
            &reg,
            &cfg,
        )
        .unwrap()
        .unwrap();
        // Days scale to (0, 1): the centroid is the six-day tower C.
        let c = reg.towers()[2].position;
        assert!((a.position.lat - c.lat).abs() < 1e-12 && (a.position.lon - c.lon).abs() < 1e-12);
    }

    #[test]
    fn calldays_examples() {
        let reg = registry();
        let cal = Calendar::new(0);
        let s = stream(vec![at(0, 22, 1)]);
        let a = calldays_anchor(&s, AnchorKind::Home, &cal, &reg)
            .unwrap()
            .unwrap();
        assert_eq!(a.position, reg.towers()[1].position);

        let mut recs: Vec<CdrRecord> = (0..7).map(|d| at(d, 22, 0)).collect();
        recs.extend((0..3).map(|d| at(d, 21, 1)));
        let a = calldays_anchor(&stream(recs), AnchorKind::Home, &cal, &reg)
            .unwrap()
            .unwrap();
        assert_eq!((a.position, a.cluster_days), (reg.towers()[0].position, 7));

        // 5 days each; B has 20 records against A's 10.
        let mut recs: Vec<CdrRecord> = (0..5).flat_map(|d| [at(d, 22, 0), at(d, 23, 0)]).collect();
        recs.extend((0..5).flat_map(|d| (0..4).map(move |h| at(d, 20 + h, 1))));
        let a = calldays_anchor(&stream(recs), AnchorKind::Home, &cal, &reg)
            .unwrap()
            .unwrap();
        assert_eq!(a.position, reg.towers()[1].position);

        assert!(
            calldays_anchor(&stream(vec![at(0, 12, 0)]), AnchorKind::Home, &cal, &reg)
                .unwrap()
                .is_none()
        );
    }

    #[test]
    fn fit_tie_rule_on_single_cell() {
        let cluster = StayCluster {
            members: vec![stats(0, 0.001, 3)],
            active_days: 3,
            records: 3,
        };
        let user = FitUser {
            cluster,
            truth: LatLon::new(0.001, 0.0),
        };
        let r = fit_segment_params(&[user], &LocalizeConfig::default()).unwrap();
        assert_eq!(r.params, SegmentParams::new(0.0, 0.0, 0.1));
        assert!(matches!(
            fit_segment_params(&[], &LocalizeConfig::default()),
            Err(Error::NoLabeledUsers)
        ));
    }

    #[test]
    fn fit_uses_days_when_only_days_inform() {
        // Truth sits at the cell with most days; L = 0, power constant.
        let mk = |lat: f64, days: u64| CellStats {
            cell: CellIdx(0),
            position: LatLon::new(lat, 80.0),
            records: days,
            load_shared: 0,
            inv_power: 0.001,
            days,
        };
        let users: Vec<FitUser> = (0..5)
            .map(|i| {
                let base = 7.0 + f64::from(i) * 0.1;
                FitUser {
                    cluster: StayCluster {
                        members: vec![mk(base, 9), mk(base + 0.004, 2), mk(base + 0.008, 1)],
                        active_days: 9,
                        records: 12,
                    },
                    truth: LatLon::new(base, 80.0),
                }
            })
            .collect();
        let cfg = LocalizeConfig::default();
        let r = fit_segment_params(&users, &cfg).unwrap();
        assert!(r.params.gamma > 0.0);
        // Oracle: the γ-only weighting evaluated directly.
        let pure: Vec<f64> = users
            .iter()
            .map(|u| {
                let w: Vec<f64> = u.cluster.members.iter().map(|m| m.days as f64).collect();
                let w = minmax_scale(&w);
                let (mut lat, mut tot) = (0.0, 0.0);
                for (m, wi) in u.cluster.members.iter().zip(&w) {
                    lat += wi * m.position.lat;
                    tot += wi;
                }
                crate::geo::haversine_km(LatLon::new(lat / tot, 80.0), u.truth) * 1000.0
            })
            .collect();
        let pure_median = median(&pure).unwrap();
        assert!((r.median_error_m - pure_median).abs() < 1e-6);
        assert_eq!(fit_segment_params(&users, &cfg).unwrap(), r);
        assert!(r.params.in_box());
    }

    #[test]
    fn tie_order_of_grid() {
        let g = grid_in_tie_order();
        assert_eq!(g.len(), 1330);
        assert_eq!(&g[..3], &[[0, 0, 1], [0, 1, 0], [1, 0, 0]]);
        assert_eq!(g[1329], [10, 10, 10]);
    }

    fn weighted_points() -> impl Strategy<Value = (Vec<LatLon>, Vec<f64>)> {
        prop::collection::vec((6.0f64..8.0, 79.5f64..81.0, 0.0f64..10.0), 1..30).prop_filter_map(
            "positive total weight",
            |v| {
                let (pts, ws): (Vec<LatLon>, Vec<f64>) = v
                    .into_iter()
                    .map(|(a, b, w)| (LatLon::new(a, b), w))
                    .unzip();
                (ws.iter().sum::<f64>() > 1e-3).then_some((pts, ws))
            },
        )
    }

    proptest! {
        #[test]
        fn k1_is_weighted_mean((pts, ws) in weighted_points(), seed in any::<u64>()) {
            let r = weighted_kmeanspp(&pts, &ws, 1, seed).unwrap();
            let tot: f64 = ws.iter().sum();
            let lat = pts.iter().zip(&ws).map(|(p, w)| p.lat * w).sum::<f64>() / tot;
            let lon = pts.iter().zip(&ws).map(|(p, w)| p.lon * w).sum::<f64>() / tot;
            prop_assert!((r.centroids[0].lat - lat).abs() < 1e-12);
            prop_assert!((r.centroids[0].lon - lon).abs() < 1e-12);
            let (lo_lat, hi_lat) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.lat), a.1.max(p.lat)));
            prop_assert!(r.centroids[0].lat >= lo_lat - 1e-12 && r.centroids[0].lat <= hi_lat + 1e-12);
        }

        #[test]
        fn lloyd_cost_never_increases((pts, ws) in weighted_points(), k in 1usize..5, seed in any::<u64>()) {
            let r = weighted_kmeanspp(&pts, &ws, k, seed).unwrap();
            for w in r.cost_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-18);
            }
        }

        #[test]
        fn uniform_weights_give_plain_mean((pts, _) in weighted_points(), c in 0.1f64..5.0) {
            let r = weighted_kmeanspp(&pts, &vec![c; pts.len()], 1, 1).unwrap();
            let n = pts.len() as f64;
            prop_assert!((r.centroids[0].lat - pts.iter().map(|p| p.lat).sum::<f64>() / n).abs() < 1e-12);
        }

        #[test]
        fn weights_ignore_factor_rescaling(
            raw in prop::collection::vec((0u64..50, 1e-4f64..1e-2, 1u64..15), 1..10),
            scale in 0.5f64..20.0,
            a in 0u8..=10, b in 0u8..=10, g in 0u8..=10,
        ) {
            let s: Vec<CellStats> = raw.iter().map(|&(l, p, d)| stats(l, p, d)).collect();
            let scaled: Vec<CellStats> = s.iter().map(|c| CellStats { inv_power: c.inv_power * scale, ..c.clone() }).collect();
            let p = SegmentParams::new(f64::from(a) / 10.0, f64::from(b) / 10.0, f64::from(g) / 10.0);
            let w1 = cell_weights(&s, p);
            let w2 = cell_weights(&scaled, p);
            for (x, y) in w1.iter().zip(&w2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
