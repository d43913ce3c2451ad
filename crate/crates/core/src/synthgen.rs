//! Synthetic world and trace generator.
//!
//! Towers carry a transmit power and serve a point when the received power
//! `P / d²` clears a cutoff. Users follow per-segment daily schedules
//! between home, work and errands, moving in straight lines at the speed of
//! the region they leave from. Calls are Poisson per hour; each call is
//! served by the strongest covering cell, or with probability `p_ls` by a
//! uniformly chosen other covering cell (a load-shared record).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{haversine_km, LatLon};
use crate::ingest::format_timestamp;
use crate::model::{sub_seed, CdrRecord, CellIdx, CellTower, GpsFix, UserSegment};
use crate::region::{Rect, Region};
use crate::timewin::{day_number, window_for_minute, WINDOW_COUNT};

const DAY_S: i64 = 86_400;
pub const GPS_INTERVAL_S: i64 = 600;
const KM_PER_DEG: f64 = 111.195;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub area: Rect,
    /// Dense-tower urban core, inside `area`.
    pub urban: Rect,
    pub suburban_towers: usize,
    pub urban_towers: usize,
    /// Tower jitter as a fraction of grid spacing.
    pub jitter: f64,
    pub urban_powers_mw: Vec<f64>,
    pub suburban_powers_mw: Vec<f64>,
    /// Received power (mW / km²) below which a tower does not serve.
    pub coverage_cutoff: f64,
    /// Speed-calibration regions as a `rows x cols` grid over the area.
    pub region_rows: usize,
    pub region_cols: usize,
    /// District names for the O-D grid, as latitude bands north to south.
    pub districts: Vec<String>,
    pub users: usize,
    /// Relative frequency of each segment, in [`UserSegment::ALL`] order.
    pub segment_mix: [f64; UserSegment::COUNT],
    /// Probability that a workplace lies in the urban core.
    pub work_in_urban: f64,
    /// Radius within which people move around home and work while awake.
    pub home_radius_km: f64,
    pub work_radius_km: f64,
    pub call_rate_scale: f64,
    /// Probability that a call is followed by a quick second call.
    pub burst_prob: f64,
    pub p_ls: f64,
    /// Share of users whose GPS trace is emitted.
    pub gps_fraction: f64,
    /// Travel speed per region (row-major) and time window; derived from
    /// the region layout when `None`.
    pub speeds: Option<Vec<[f64; WINDOW_COUNT]>>,
    pub tz_offset_min: i32,
    pub start_date: NaiveDate,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            area: Rect::new(6.70, 7.00, 79.85, 80.15),
            urban: Rect::new(6.84, 6.92, 79.85, 79.93),
            suburban_towers: 2250,
            urban_towers: 720,
            jitter: 0.3,
            urban_powers_mw: vec![100.0, 200.0, 400.0],
            suburban_powers_mw: vec![250.0, 1000.0, 4000.0],
            coverage_cutoff: 900.0,
            region_rows: 3,
            region_cols: 3,
            districts: vec!["north".into(), "central".into(), "south".into()],
            users: 500,
            segment_mix: [0.30, 0.12, 0.18, 0.15, 0.10, 0.15],
            work_in_urban: 0.8,
            home_radius_km: 0.0,
            work_radius_km: 0.0,
            call_rate_scale: 2.0,
            burst_prob: 0.3,
            p_ls: 0.3,
            gps_fraction: 1.0,
            speeds: None,
            tz_offset_min: 0,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.p_ls) {
            return bad("p_ls must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gps_fraction) || !(0.0..=1.0).contains(&self.work_in_urban) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.burst_prob) || !(0.0..0.5).contains(&self.jitter) {
            return bad("burst probability must lie in [0, 1] and jitter in [0, 0.5)");
        }
        if self.suburban_towers == 0 || self.urban_towers == 0 {
            return bad("tower counts must be at least 1");
        }
        if self.users == 0 {
            return bad("at least one user is required");
        }
        let area_ok =
            self.area.lat_min < self.area.lat_max && self.area.lon_min < self.area.lon_max;
        let inside = self
            .area
            .contains(LatLon::new(self.urban.lat_min, self.urban.lon_min))
            && self
                .area
                .contains(LatLon::new(self.urban.lat_max, self.urban.lon_max))
            && self.urban.lat_min < self.urban.lat_max
            && self.urban.lon_min < self.urban.lon_max;
        if !area_ok || !inside {
            return bad("urban rectangle must be a non-empty part of the area");
        }
        let powers = self.urban_powers_mw.iter().chain(&self.suburban_powers_mw);
        if self.urban_powers_mw.is_empty()
            || self.suburban_powers_mw.is_empty()
            || powers.clone().any(|p| !(*p > 0.0))
        {
            return bad("transmit powers must be positive");
        }
        if !(self.home_radius_km >= 0.0 && self.work_radius_km >= 0.0) {
            return bad("wander radii must be non-negative");
        }
        if !(self.coverage_cutoff > 0.0) || !(self.call_rate_scale >= 0.0) {
            return bad("coverage cutoff must be positive and call rate non-negative");
        }
        if self.region_rows == 0 || self.region_cols == 0 || self.districts.is_empty() {
            return bad("region grid and district list must be non-empty");
        }
        if !(self.segment_mix.iter().all(|w| *w >= 0.0)
            && self.segment_mix.iter().sum::<f64>() > 0.0)
        {
            return bad("segment mix must be non-negative with a positive sum");
        }
        if let Some(s) = &self.speeds {
            if s.len() != self.region_rows * self.region_cols {
                return bad("one speed row per region is required");
            }
            if s.iter().flatten().any(|v| !(*v > 0.0)) {
                return bad("speeds must be positive");
            }
        }
        Ok(())
    }

    /// UTC timestamp of local midnight on the first simulated day.
    pub fn start_timestamp(&self) -> i64 {
        day_number(self.start_date) * DAY_S - i64::from(self.tz_offset_min) * 60
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimUser {
    pub user_id: String,
    pub segment: UserSegment,
    pub home: LatLon,
    /// Workplace or school; `None` for segments without one.
    pub work: Option<LatLon>,
    pub has_gps: bool,
}

impl SimUser {
    /// Where the user spends working hours: the workplace, else home.
    pub fn daytime_anchor(&self) -> LatLon {
        self.work.unwrap_or(self.home)
    }
}

/// Bucketed tower lookup for coverage queries.
#[derive(Debug, Clone, PartialEq)]
struct CoverageIndex {
    lat0: f64,
    lon0: f64,
    step_lat: f64,
    step_lon: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

impl CoverageIndex {
    fn new(area: Rect, towers: &[CellTower], max_radius_km: f64) -> Self {
        let step_lat = max_radius_km / KM_PER_DEG;
        let max_abs_lat = area.lat_min.abs().max(area.lat_max.abs()).min(89.0);
        let step_lon = max_radius_km / (KM_PER_DEG * max_abs_lat.to_radians().cos());
        let ny = (((area.lat_max - area.lat_min) / step_lat).ceil() as usize).max(1);
        let nx = (((area.lon_max - area.lon_min) / step_lon).ceil() as usize).max(1);
        let mut index = CoverageIndex {
            lat0: area.lat_min,
            lon0: area.lon_min,
            step_lat,
            step_lon,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        };
        for (i, t) in towers.iter().enumerate() {
            let (x, y) = index.bucket(t.position);
            index.buckets[y * nx + x].push(i as u32);
        }
        index
    }

    fn bucket(&self, p: LatLon) -> (usize, usize) {
        let x = ((p.lon - self.lon0) / self.step_lon)
            .floor()
            .clamp(0.0, (self.nx - 1) as f64) as usize;
        let y = ((p.lat - self.lat0) / self.step_lat)
            .floor()
            .clamp(0.0, (self.ny - 1) as f64) as usize;
        (x, y)
    }

    /// Towers in the buckets within `reach` of the point's bucket.
    fn near(&self, p: LatLon, reach: usize, out: &mut Vec<u32>) {
        out.clear();
        let (x, y) = self.bucket(p);
        for yy in y.saturating_sub(reach)..=(y + reach).min(self.ny - 1) {
            for xx in x.saturating_sub(reach)..=(x + reach).min(self.nx - 1) {
                out.extend_from_slice(&self.buckets[yy * self.nx + xx]);
            }
        }
        out.sort_unstable();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// Sorted by cell id, so a tower's index is its [`CellIdx`].
    pub towers: Vec<CellTower>,
    pub regions: Vec<Region>,
    pub districts: Vec<Region>,
    /// Travel speed per region index and window.
    pub speeds: Vec<[f64; WINDOW_COUNT]>,
    pub users: Vec<SimUser>,
    index: CoverageIndex,
}

/// Window multipliers on the regional base speed (peaks are slow).
const WINDOW_SPEED_FACTOR: [f64; WINDOW_COUNT] = [0.45, 0.9, 0.8, 0.9, 0.5, 1.0, 1.4];

fn default_speeds(regions: &[Region], urban: &Rect) -> Vec<[f64; WINDOW_COUNT]> {
    regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let overlaps = r.rect.lat_min < urban.lat_max
                && urban.lat_min < r.rect.lat_max
                && r.rect.lon_min < urban.lon_max
                && urban.lon_min < r.rect.lon_max;
            let base = if overlaps {
                22.0
            } else {
                40.0 + 8.0 * (i % 3) as f64
            };
            std::array::from_fn(|w| base * WINDOW_SPEED_FACTOR[w])
        })
        .collect()
}

fn split(lo: f64, hi: f64, n: usize, i: usize) -> (f64, f64) {
    let step = (hi - lo) / n as f64;
    let a = lo + step * i as f64;
    let b = if i + 1 == n {
        hi
    } else {
        lo + step * (i + 1) as f64
    };
    (a, b)
}

/// Jittered grid points over `rect` aiming at roughly `count` points,
/// skipping grid cells whose centre falls in `skip`.
fn jittered_grid(
    rng: &mut ChaCha8Rng,
    rect: &Rect,
    count: usize,
    jitter: f64,
    skip: Option<&Rect>,
) -> Vec<LatLon> {
    let h_km = (rect.lat_max - rect.lat_min) * KM_PER_DEG;
    let mid = ((rect.lat_min + rect.lat_max) / 2.0).to_radians().cos();
    let w_km = (rect.lon_max - rect.lon_min) * KM_PER_DEG * mid;
    let skip_area = skip.map_or(0.0, |s| {
        (s.lat_max - s.lat_min) * KM_PER_DEG * (s.lon_max - s.lon_min) * KM_PER_DEG * mid
    });
    let spacing = ((h_km * w_km - skip_area) / count as f64).sqrt();
    let ny = ((h_km / spacing).round() as usize).max(1);
    let nx = ((w_km / spacing).round() as usize).max(1);
    let (dlat, dlon) = (
        (rect.lat_max - rect.lat_min) / ny as f64,
        (rect.lon_max - rect.lon_min) / nx as f64,
    );
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let centre = LatLon::new(
                rect.lat_min + (iy as f64 + 0.5) * dlat,
                rect.lon_min + (ix as f64 + 0.5) * dlon,
            );
            if skip.is_some_and(|s| s.contains(centre)) {
                continue;
            }
            let jy = rng.random_range(-jitter..=jitter) * dlat;
            let jx = rng.random_range(-jitter..=jitter) * dlon;
            out.push(LatLon::new(
                (centre.lat + jy).clamp(rect.lat_min, rect.lat_max),
                (centre.lon + jx).clamp(rect.lon_min, rect.lon_max),
            ));
        }
    }
    out
}

fn uniform_in(rng: &mut ChaCha8Rng, r: &Rect) -> LatLon {
    LatLon::new(
        rng.random_range(r.lat_min..=r.lat_max),
        rng.random_range(r.lon_min..=r.lon_max),
    )
}

/// Uniform point in a disk of `radius_km`, clamped into `area`.
fn near_point(rng: &mut ChaCha8Rng, p: LatLon, radius_km: f64, area: &Rect) -> LatLon {
    let r = radius_km * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let dlat = r * a.sin() / KM_PER_DEG;
    let dlon = r * a.cos() / (KM_PER_DEG * p.lat.to_radians().cos());
    LatLon::new(
        (p.lat + dlat).clamp(area.lat_min, area.lat_max),
        (p.lon + dlon).clamp(area.lon_min, area.lon_max),
    )
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let area = config.area;

    let mut regions = Vec::with_capacity(config.region_rows * config.region_cols);
    for r in 0..config.region_rows {
        for c in 0..config.region_cols {
            let (lat_min, lat_max) = split(area.lat_min, area.lat_max, config.region_rows, r);
            let (lon_min, lon_max) = split(area.lon_min, area.lon_max, config.region_cols, c);
            regions.push(Region {
                id: format!("R{}{}", r + 1, c + 1),
                rect: Rect::new(lat_min, lat_max, lon_min, lon_max),
                in_study_area: true,
            });
        }
    }
    let bands = config.districts.len();
    let districts = config
        .districts
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (lat_min, lat_max) = split(area.lat_min, area.lat_max, bands, bands - 1 - i);
            Region {
                id: name.clone(),
                rect: Rect::new(lat_min, lat_max, area.lon_min, area.lon_max),
                in_study_area: true,
            }
        })
        .collect();

    let suburban = jittered_grid(
        &mut rng,
        &area,
        config.suburban_towers,
        config.jitter,
        Some(&config.urban),
    );
    let urban = jittered_grid(
        &mut rng,
        &config.urban,
        config.urban_towers,
        config.jitter,
        None,
    );
    let locate = |p: LatLon| {
        regions
            .iter()
            .find(|r| r.rect.contains(p))
            .map(|r| r.id.clone())
            .expect("towers lie inside the area")
    };
    let mut towers = Vec::with_capacity(suburban.len() + urban.len());
    for (p, powers) in urban
        .iter()
        .map(|p| (p, &config.urban_powers_mw))
        .chain(suburban.iter().map(|p| (p, &config.suburban_powers_mw)))
    {
        let power = powers[rng.random_range(0..powers.len())];
        towers.push(CellTower {
            cell_id: format!("C{:05}", towers.len() + 1),
            position: *p,
            transmit_power_mw: power,
            region_id: locate(*p),
        });
    }
    let max_power = config
        .urban_powers_mw
        .iter()
        .chain(&config.suburban_powers_mw)
        .fold(0.0f64, |a, &b| a.max(b));
    let index = CoverageIndex::new(area, &towers, (max_power / config.coverage_cutoff).sqrt());

    let speeds = match &config.speeds {
        Some(s) => s.clone(),
        None => default_speeds(&regions, &config.urban),
    };

    let width = config.users.to_string().len().max(5);
    let users = (0..config.users)
        .map(|i| {
            let segment = UserSegment::ALL[pick_weighted(&mut rng, &config.segment_mix)];
            let home = uniform_in(&mut rng, &area);
            let work = match segment {
                UserSegment::Housewife | UserSegment::Retired => None,
                UserSegment::Student => Some(near_point(&mut rng, home, 5.0, &area)),
                _ if rng.random::<f64>() < config.work_in_urban => {
                    Some(uniform_in(&mut rng, &config.urban))
                }
                _ => Some(uniform_in(&mut rng, &area)),
            };
            SimUser {
                user_id: format!("U{:0width$}", i + 1),
                segment,
                home,
                work,
                has_gps: rng.random::<f64>() < config.gps_fraction,
            }
        })
        .collect();

    Ok(World {
        config: config.clone(),
        towers,
        regions,
        districts,
        speeds,
        users,
        index,
    })
}

impl World {
    fn region_index(&self, p: LatLon) -> Option<usize> {
        self.regions.iter().position(|r| r.rect.contains(p))
    }

    /// Travel speed leaving `p` at local minute `minute`.
    pub fn speed_at(&self, p: LatLon, minute: u32) -> f64 {
        let w = window_for_minute(minute % 1440) as usize;
        match self.region_index(p) {
            Some(r) => self.speeds[r][w],
            None => self.speeds.iter().map(|s| s[w]).sum::<f64>() / self.speeds.len() as f64,
        }
    }

    /// Covering cells at `p` ordered by index, with the strongest first
    /// when nothing covers the point.
    fn covering(&self, p: LatLon, scratch: &mut Vec<u32>) -> (Vec<u32>, u32) {
        let mut best: Option<(u32, f64)> = None;
        let mut covering = Vec::new();
        for reach in [1usize, 3, usize::MAX] {
            if reach == usize::MAX {
                scratch.clear();
                scratch.extend(0..self.towers.len() as u32);
            } else {
                self.index.near(p, reach, scratch);
            }
            for &i in scratch.iter() {
                let t = &self.towers[i as usize];
                let d = haversine_km(p, t.position).max(1e-3);
                let received = t.transmit_power_mw / (d * d);
                if received >= self.config.coverage_cutoff {
                    covering.push(i);
                }
                if best.is_none_or(|(_, b)| received > b) {
                    best = Some((i, received));
                }
            }
            if !covering.is_empty() || best.is_some() && reach >= 3 {
                break;
            }
        }
        (covering, best.expect("at least one tower").0)
    }

    /// Serving cell for a call at `p` and whether it was load-shared.
    fn serve(&self, p: LatLon, rng: &mut ChaCha8Rng, scratch: &mut Vec<u32>) -> (u32, bool) {
        let (covering, strongest) = self.covering(p, scratch);
        if covering.len() >= 2 && rng.random::<f64>() < self.config.p_ls {
            let others: Vec<u32> = covering.into_iter().filter(|&c| c != strongest).collect();
            (others[rng.random_range(0..others.len())], true)
        } else {
            (strongest, false)
        }
    }

    /// Cell indices covering `p` (received power above the cutoff).
    pub fn covering_cells(&self, p: LatLon) -> Vec<CellIdx> {
        let mut scratch = Vec::new();
        self.covering(p, &mut scratch)
            .0
            .into_iter()
            .map(CellIdx)
            .collect()
    }

    pub fn strongest_cell(&self, p: LatLon) -> CellIdx {
        let mut scratch = Vec::new();
        CellIdx(self.covering(p, &mut scratch).1)
    }

    pub fn urban_density_ratio(&self) -> f64 {
        let u = &self.config.urban;
        let a = &self.config.area;
        let n_u = self
            .towers
            .iter()
            .filter(|t| u.contains(t.position))
            .count() as f64;
        let n_s = self.towers.len() as f64 - n_u;
        let area_u = u.area_deg2();
        n_u / area_u / (n_s / (a.area_deg2() - area_u))
    }
}

/// Piece of a day plan: at `from` at `start`, at `to` at `end` (seconds
/// since local midnight), moving linearly in between.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Leg {
    start: i64,
    end: i64,
    from: LatLon,
    to: LatLon,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct DayPlan {
    legs: Vec<Leg>,
}

impl DayPlan {
    fn position(&self, s: i64) -> LatLon {
        let i = self
            .legs
            .partition_point(|l| l.end <= s)
            .min(self.legs.len() - 1);
        let l = &self.legs[i];
        if l.end <= l.start || s <= l.start {
            return l.from;
        }
        if s >= l.end {
            return l.to;
        }
        let f = (s - l.start) as f64 / (l.end - l.start) as f64;
        LatLon::new(
            l.from.lat + f * (l.to.lat - l.from.lat),
            l.from.lon + f * (l.to.lon - l.from.lon),
        )
    }
}

/// Local minutes during which people move around within a place.
const WANDER_START_MIN: i64 = 6 * 60;
const WANDER_END_MIN: i64 = 22 * 60;
const WALK_KMPH: f64 = 4.0;

struct PlanBuilder<'w> {
    world: &'w World,
    legs: Vec<Leg>,
    t: i64,
    at: LatLon,
    /// Centre and wander radius of the current place.
    place: LatLon,
    radius_km: f64,
}

impl<'w> PlanBuilder<'w> {
    fn new(world: &'w World, home: LatLon) -> Self {
        PlanBuilder {
            world,
            legs: Vec::new(),
            t: 0,
            at: home,
            place: home,
            radius_km: world.config.home_radius_km,
        }
    }

    fn leg(&mut self, to: LatLon, dur: i64) {
        self.legs.push(Leg {
            start: self.t,
            end: self.t + dur,
            from: self.at,
            to,
        });
        self.t += dur;
        self.at = to;
    }

    fn walk(&mut self, to: LatLon) {
        let dur = (haversine_km(self.at, to) / WALK_KMPH * 3600.0).ceil() as i64;
        self.leg(to, dur.max(1));
    }

    /// Stays at the current place until `until_min`, moving between
    /// points within its radius during waking hours.
    fn stay_until(&mut self, rng: &mut ChaCha8Rng, until_min: f64) {
        let until = ((until_min * 60.0) as i64).min(DAY_S);
        while self.t < until {
            let minute = self.t / 60;
            let awake = (WANDER_START_MIN..WANDER_END_MIN).contains(&minute);
            let wander = awake && self.radius_km > 0.0;
            let target = if wander {
                near_point(rng, self.place, self.radius_km, &self.world.config.area)
            } else {
                self.place
            };
            if target != self.at {
                self.walk(target);
                continue;
            }
            let end = if wander {
                (self.t + rng.random_range(1200..4200)).min(WANDER_END_MIN * 60)
            } else if minute < WANDER_START_MIN && self.radius_km > 0.0 {
                WANDER_START_MIN * 60
            } else {
                DAY_S
            };
            let end = end.min(until);
            if end > self.t {
                self.leg(self.at, end - self.t);
            }
        }
    }

    /// Moves to `dest` at the regional speed and makes it the current place.
    fn travel(&mut self, dest: LatLon, radius_km: f64) {
        self.place = dest;
        self.radius_km = radius_km;
        let km = haversine_km(self.at, dest);
        if km <= 0.0 || self.t >= DAY_S {
            self.at = dest;
            return;
        }
        let speed = self.world.speed_at(self.at, (self.t / 60) as u32).max(5.0);
        self.leg(dest, ((km / speed) * 3600.0).ceil() as i64);
    }

    fn go_home(&mut self, home: LatLon) {
        self.travel(home, self.world.config.home_radius_km);
    }

    /// Leave at `depart_min`, stay at `dest` until `until_min`.
    fn go(
        &mut self,
        rng: &mut ChaCha8Rng,
        depart_min: f64,
        dest: LatLon,
        radius_km: f64,
        until_min: f64,
    ) {
        self.stay_until(rng, depart_min);
        self.travel(dest, radius_km);
        self.stay_until(rng, until_min);
    }

    /// Leave at `depart_min`, spend `stay_min` at `dest`.
    fn visit(&mut self, rng: &mut ChaCha8Rng, depart_min: f64, dest: LatLon, stay_min: f64) {
        self.stay_until(rng, depart_min);
        self.travel(dest, 0.0);
        let arrive = self.t as f64 / 60.0;
        self.stay_until(rng, arrive + stay_min);
    }

    fn finish(mut self, rng: &mut ChaCha8Rng, home: LatLon) -> DayPlan {
        if self.place != home {
            self.go_home(home);
        }
        self.stay_until(rng, 24.0 * 60.0);
        if self.legs.is_empty() || self.t < DAY_S {
            self.leg(self.at, (DAY_S - self.t).max(0));
        }
        DayPlan { legs: self.legs }
    }
}

fn day_plan(world: &World, user: &SimUser, weekday: u32, rng: &mut ChaCha8Rng) -> DayPlan {
    let area = &world.config.area;
    let work_r = world.config.work_radius_km;
    let home = user.home;
    let weekend = weekday >= 5;
    let mut b = PlanBuilder::new(world, home);
    let u = |rng: &mut ChaCha8Rng, span: f64| rng.random::<f64>() * span;
    let outing =
        |b: &mut PlanBuilder, rng: &mut ChaCha8Rng, p: f64, start: f64, radius: f64, stay: f64| {
            if rng.random::<f64>() < p {
                let dest = near_point(rng, home, radius, area);
                b.visit(rng, start, dest, stay);
                b.go_home(home);
            }
        };
    match (user.segment, user.work) {
        (UserSegment::FullTime, Some(work)) if !weekend => {
            let leave = 450.0 + u(rng, 60.0);
            let until = 990.0 + u(rng, 45.0);
            b.go(rng, leave, work, work_r, until);
            b.go_home(home);
            let errand = 1080.0 + u(rng, 20.0);
            outing(&mut b, rng, 0.25, errand, 3.0, 30.0);
        }
        (UserSegment::PartTime, Some(work)) if !weekend && rng.random::<f64>() < 0.8 => {
            let leave = 540.0 + u(rng, 60.0);
            let until = leave + 300.0 + u(rng, 60.0);
            b.go(rng, leave, work, work_r, until);
            b.go_home(home);
        }
        (UserSegment::Student, Some(school)) if !weekend => {
            let leave = 405.0 + u(rng, 30.0);
            let until = 810.0 + u(rng, 30.0);
            b.go(rng, leave, school, work_r, until);
            b.go_home(home);
            outing(&mut b, rng, 0.3, 900.0, 3.0, 120.0);
        }
        (UserSegment::Other, Some(work)) if weekday < 6 => {
            let leave = 540.0 + u(rng, 45.0);
            let until = 1050.0 + u(rng, 30.0);
            b.go(rng, leave, work, work_r, until);
            b.go_home(home);
        }
        (UserSegment::Housewife, _) => {
            let (start, stay) = (570.0 + u(rng, 60.0), 60.0 + u(rng, 60.0));
            outing(&mut b, rng, 0.6, start, 2.0, stay);
            outing(&mut b, rng, 0.2, 1020.0, 3.0, 60.0);
        }
        (UserSegment::Retired, _) => {
            let start = 420.0 + u(rng, 30.0);
            outing(&mut b, rng, 0.4, start, 1.0, 60.0);
            outing(&mut b, rng, 0.2, 900.0, 5.0, 90.0);
        }
        _ => {
            let start = 600.0 + u(rng, 120.0);
            let stay = 120.0 + u(rng, 120.0);
            outing(&mut b, rng, 0.45, start, 8.0, stay);
        }
    }
    b.finish(rng, home)
}

/// Mean calls per hour of local time before segment adjustment.
const HOURLY_CALL_RATE: [f64; 24] = [
    0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 0.15, 0.4, 0.4, 0.6, 0.6, 0.6, 0.7, 0.7, 0.6, 0.6, 0.6,
    0.8, 0.8, 0.8, 0.9, 0.9, 0.5, 0.15,
];

fn call_rate(segment: UserSegment, hour: usize, weekend: bool) -> f64 {
    let base = HOURLY_CALL_RATE[hour];
    let m = match segment {
        UserSegment::FullTime if !weekend && (9..16).contains(&hour) => 0.7,
        UserSegment::FullTime if (17..20).contains(&hour) => 1.4,
        UserSegment::PartTime if (12..18).contains(&hour) => 1.3,
        UserSegment::Student if !weekend && (7..13).contains(&hour) => 0.3,
        UserSegment::Student if hour >= 20 || hour < 1 => 1.8,
        UserSegment::Housewife if (9..17).contains(&hour) => 1.5,
        UserSegment::Housewife if hour >= 21 => 0.6,
        UserSegment::Retired if (6..11).contains(&hour) => 1.2,
        UserSegment::Retired if hour >= 21 || hour < 6 => 0.4,
        UserSegment::Retired => 0.6,
        UserSegment::Other if hour >= 22 || hour < 2 => 2.0,
        UserSegment::Other if weekend => 1.3,
        _ => 1.0,
    };
    base * m
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserTrace {
    pub user_id: String,
    pub segment: UserSegment,
    pub home: LatLon,
    /// Daytime anchor: the workplace, or home for users without one.
    pub work: LatLon,
    pub records: Vec<CdrRecord>,
    /// Whether each record was served by a non-strongest cell.
    pub load_shared: Vec<bool>,
    /// Load-shared, or labeled so by the stationary-cell-change rule.
    pub truth: Vec<bool>,
    pub gps: Option<Vec<GpsFix>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Traces {
    pub start: i64,
    pub days: u32,
    pub users: Vec<UserTrace>,
}

impl Traces {
    pub fn record_count(&self) -> usize {
        self.users.iter().map(|u| u.records.len()).sum()
    }
}

/// GPS mark nearest to `offset` seconds into the period (earlier on ties).
fn nearest_mark(offset: i64, last: i64) -> i64 {
    let k = offset.div_euclid(GPS_INTERVAL_S);
    let rem = offset.rem_euclid(GPS_INTERVAL_S);
    (if rem * 2 <= GPS_INTERVAL_S { k } else { k + 1 }).clamp(0, last)
}

fn simulate_user(world: &World, user: &SimUser, days: u32, start: i64, seed: u64) -> UserTrace {
    let cfg = &world.config;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &user.user_id));
    let first_day = day_number(cfg.start_date);
    let plans: Vec<DayPlan> = (0..days)
        .map(|d| {
            let weekday = crate::timewin::weekday(first_day + i64::from(d));
            day_plan(world, user, weekday, &mut rng)
        })
        .collect();
    let position = |offset: i64| {
        let d = (offset.div_euclid(DAY_S) as usize).min(plans.len() - 1);
        plans[d].position(offset - d as i64 * DAY_S)
    };

    let mut times: Vec<i64> = Vec::new();
    for d in 0..days {
        let weekend = crate::timewin::is_weekend(first_day + i64::from(d));
        for hour in 0..24 {
            let lambda = call_rate(user.segment, hour, weekend) * cfg.call_rate_scale;
            if lambda <= 0.0 {
                continue;
            }
            let n = Poisson::new(lambda).map_or(0.0, |p| p.sample(&mut rng)) as usize;
            for _ in 0..n {
                let t = i64::from(d) * DAY_S + hour as i64 * 3600 + rng.random_range(0..3600);
                times.push(t);
                if rng.random::<f64>() < cfg.burst_prob {
                    times.push(t + rng.random_range(20..240));
                }
            }
        }
    }
    times.sort_unstable();
    let end = i64::from(days) * DAY_S;
    let mut last = -1;
    times.retain_mut(|t| {
        *t = (*t).max(last + 1);
        last = *t;
        *t < end
    });

    let mut scratch = Vec::new();
    let mut records = Vec::with_capacity(times.len());
    let mut load_shared = Vec::with_capacity(times.len());
    for &t in &times {
        let (cell, ls) = world.serve(position(t), &mut rng, &mut scratch);
        records.push(CdrRecord {
            timestamp: start + t,
            cell: CellIdx(cell),
            duration: rng.random_range(10..600),
        });
        load_shared.push(ls);
    }

    // Stationary cell changes as the GPS matching rule would see them.
    let last_mark = end / GPS_INTERVAL_S;
    let mark_pos = |t: i64| position(nearest_mark(t, last_mark) * GPS_INTERVAL_S);
    let mut truth = load_shared.clone();
    for k in 1..times.len() {
        if records[k].cell != records[k - 1].cell
            && haversine_km(mark_pos(times[k - 1]), mark_pos(times[k]))
                <= crate::loadshare::STATIONARY_KM
        {
            truth[k] = true;
        }
    }

    let gps = user.has_gps.then(|| {
        (0..=last_mark)
            .map(|k| {
                let p = position(k * GPS_INTERVAL_S);
                GpsFix {
                    timestamp: start + k * GPS_INTERVAL_S,
                    position: LatLon::new(round7(p.lat), round7(p.lon)),
                }
            })
            .collect()
    });

    UserTrace {
        user_id: user.user_id.clone(),
        segment: user.segment,
        home: user.home,
        work: user.daytime_anchor(),
        records,
        load_shared,
        truth,
        gps,
    }
}

fn round7(v: f64) -> f64 {
    (v * 1e7).round() / 1e7
}

/// Simulates every user for `days` days; users are independent and seeded
/// from `(seed, user_id)`.
pub fn simulate_traces(world: &World, days: u32, seed: u64) -> Result<Traces> {
    if days == 0 {
        return Err(Error::InvalidConfig(
            "at least one day must be simulated".into(),
        ));
    }
    let start = world.config.start_timestamp();
    let users = world
        .users
        .par_iter()
        .map(|u| simulate_user(world, u, days, start, seed))
        .collect();
    Ok(Traces { start, days, users })
}

/// File names written by [`emit`].
pub const DISTRICTS_FILE: &str = "districts.csv";
pub const TRUTH_FLAGS_FILE: &str = "truth_flags.csv";
pub const TRUTH_ANCHORS_FILE: &str = "truth_anchors.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct EmitSummary {
    pub files: Vec<PathBuf>,
    pub cdr_rows: usize,
    pub gps_rows: usize,
}

struct Out {
    path: PathBuf,
    w: BufWriter<File>,
}

impl Out {
    fn create(dir: &Path, name: &str, header: &str) -> Result<Self> {
        let path = dir.join(name);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Out {
            path,
            w: BufWriter::with_capacity(1 << 20, f),
        };
        out.line(format_args!("{header}"))?;
        Ok(out)
    }

    fn line(&mut self, args: std::fmt::Arguments<'_>) -> Result<()> {
        self.w
            .write_fmt(args)
            .and_then(|_| self.w.write_all(b"\n"))
            .map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

fn write_regions(dir: &Path, name: &str, regions: &[Region]) -> Result<PathBuf> {
    let mut out = Out::create(
        dir,
        name,
        "region_id,lat_min,lat_max,lon_min,lon_max,is_study_area",
    )?;
    for r in regions {
        out.line(format_args!(
            "{},{},{},{},{},{}",
            r.id,
            r.rect.lat_min,
            r.rect.lat_max,
            r.rect.lon_min,
            r.rect.lon_max,
            u8::from(r.in_study_area)
        ))?;
    }
    out.finish()
}

/// Writes the ingest files plus districts and truth files into `dir`.
pub fn emit(world: &World, traces: &Traces, dir: &Path) -> Result<EmitSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();

    let mut out = Out::create(
        dir,
        "towers.csv",
        "cell_id,lat,lon,transmit_power_mw,region_id",
    )?;
    for t in &world.towers {
        out.line(format_args!(
            "{},{:.7},{:.7},{},{}",
            t.cell_id, t.position.lat, t.position.lon, t.transmit_power_mw, t.region_id
        ))?;
    }
    files.push(out.finish()?);
    files.push(write_regions(dir, "regions.csv", &world.regions)?);
    files.push(write_regions(dir, DISTRICTS_FILE, &world.districts)?);

    let mut out = Out::create(dir, "speeds.csv", "region_id,window_id,avg_speed_kmph")?;
    for (r, row) in world.regions.iter().zip(&world.speeds) {
        for (w, v) in row.iter().enumerate() {
            out.line(format_args!("{},{},{:.2}", r.id, w, v))?;
        }
    }
    files.push(out.finish()?);

    let mut out = Out::create(dir, "labels.csv", "user_id,segment")?;
    for u in traces.users.iter().filter(|u| u.gps.is_some()) {
        out.line(format_args!("{},{}", u.user_id, u.segment))?;
    }
    files.push(out.finish()?);

    let mut cdr = Out::create(
        dir,
        "cdr.csv",
        "user_id,timestamp_iso8601,cell_id,duration_s",
    )?;
    let mut flags = Out::create(
        dir,
        TRUTH_FLAGS_FILE,
        "user_id,timestamp_iso8601,cell_id,flag",
    )?;
    let mut cdr_rows = 0;
    for u in &traces.users {
        for (r, &f) in u.records.iter().zip(&u.truth) {
            let ts = format_timestamp(r.timestamp);
            let cell = &world.towers[r.cell.get()].cell_id;
            cdr.line(format_args!("{},{},{},{}", u.user_id, ts, cell, r.duration))?;
            flags.line(format_args!(
                "{},{},{},{}",
                u.user_id,
                ts,
                cell,
                u8::from(f)
            ))?;
        }
        cdr_rows += u.records.len();
    }
    files.push(cdr.finish()?);
    files.push(flags.finish()?);

    let mut out = Out::create(dir, "gps.csv", "user_id,timestamp_iso8601,lat,lon")?;
    let mut gps_rows = 0;
    for u in &traces.users {
        for f in u.gps.iter().flatten() {
            out.line(format_args!(
                "{},{},{:.7},{:.7}",
                u.user_id,
                format_timestamp(f.timestamp),
                f.position.lat,
                f.position.lon
            ))?;
            gps_rows += 1;
        }
    }
    files.push(out.finish()?);

    let mut out = Out::create(dir, TRUTH_ANCHORS_FILE, "user_id,kind,lat,lon")?;
    for u in &traces.users {
        out.line(format_args!(
            "{},home,{:.7},{:.7}",
            u.user_id, u.home.lat, u.home.lon
        ))?;
        out.line(format_args!(
            "{},work,{:.7},{:.7}",
            u.user_id, u.work.lat, u.work.lon
        ))?;
    }
    files.push(out.finish()?);

    Ok(EmitSummary {
        files,
        cdr_rows,
        gps_rows,
    })
}
