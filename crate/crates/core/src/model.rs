//! Shared domain types.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geo::LatLon;
use crate::region::RegionGrid;

/// Index of a tower in a [`TowerRegistry`]. Registries are sorted by
/// `cell_id`, so index order equals cell-id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellIdx(pub u32);

impl CellIdx {
    #[inline]
    pub fn get(self) -> usize {
        self.0 as usize
    }
}

/// One call event. The owning user is carried by the enclosing
/// [`UserStream`] (or by the loader's row tuple before canonicalization).
///
/// Field order gives the canonical `(timestamp, cell_id)` sort key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CdrRecord {
    /// UTC epoch seconds.
    pub timestamp: i64,
    pub cell: CellIdx,
    /// Call duration in seconds.
    pub duration: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellTower {
    pub cell_id: String,
    pub position: LatLon,
    /// Milliwatts, strictly positive.
    pub transmit_power_mw: f64,
    pub region_id: String,
}

/// Towers sorted by `cell_id`, with unique ids.
#[derive(Debug, Clone, Default)]
pub struct TowerRegistry {
    towers: Vec<CellTower>,
    by_id: HashMap<String, CellIdx>,
}

impl TowerRegistry {
    pub fn new(mut towers: Vec<CellTower>) -> Result<Self> {
        towers.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
        let mut by_id = HashMap::with_capacity(towers.len());
        for (i, t) in towers.iter().enumerate() {
            if !(t.transmit_power_mw > 0.0 && t.transmit_power_mw.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "tower `{}` has non-positive transmit power",
                    t.cell_id
                )));
            }
            if by_id.insert(t.cell_id.clone(), CellIdx(i as u32)).is_some() {
                return Err(Error::DuplicateKey {
                    line: 0,
                    key: t.cell_id.clone(),
                });
            }
        }
        Ok(TowerRegistry { towers, by_id })
    }

    pub fn len(&self) -> usize {
        self.towers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.towers.is_empty()
    }

    pub fn towers(&self) -> &[CellTower] {
        &self.towers
    }

    pub fn resolve(&self, cell_id: &str) -> Option<CellIdx> {
        self.by_id.get(cell_id).copied()
    }

    pub fn get(&self, idx: CellIdx) -> Option<&CellTower> {
        self.towers.get(idx.get())
    }

    pub fn tower(&self, idx: CellIdx) -> Result<&CellTower> {
        self.get(idx)
            .ok_or_else(|| Error::UnknownCell(format!("#{}", idx.0)))
    }

    pub fn position(&self, idx: CellIdx) -> Result<LatLon> {
        self.tower(idx).map(|t| t.position)
    }
}

/// Tower registry together with the region grid and per-tower lookups.
#[derive(Debug, Clone)]
pub struct Network {
    pub registry: TowerRegistry,
    pub grid: RegionGrid,
    tower_region: Vec<Option<usize>>,
    tower_in_study: Vec<bool>,
}

impl Network {
    pub fn new(registry: TowerRegistry, grid: RegionGrid) -> Self {
        let tower_region = registry
            .towers()
            .iter()
            .map(|t| grid.region_of(t.position))
            .collect();
        let tower_in_study = registry
            .towers()
            .iter()
            .map(|t| grid.in_study_area(t.position))
            .collect();
        Network {
            registry,
            grid,
            tower_region,
            tower_in_study,
        }
    }

    /// Study-area region of a tower, if any.
    pub fn region_of_cell(&self, cell: CellIdx) -> Option<usize> {
        self.tower_region.get(cell.get()).copied().flatten()
    }

    pub fn region_id_of_cell(&self, cell: CellIdx) -> Option<&str> {
        self.region_of_cell(cell)
            .map(|i| self.grid.region(i).id.as_str())
    }

    pub fn cell_in_study_area(&self, cell: CellIdx) -> bool {
        self.tower_in_study
            .get(cell.get())
            .copied()
            .unwrap_or(false)
    }
}

/// Seed for one keyed sub-stream (e.g. a user) derived from a run seed.
pub fn sub_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Socio-economic user segments, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UserSegment {
    FullTime,
    PartTime,
    Student,
    Housewife,
    Retired,
    Other,
}

impl UserSegment {
    pub const ALL: [UserSegment; 6] = [
        UserSegment::FullTime,
        UserSegment::PartTime,
        UserSegment::Student,
        UserSegment::Housewife,
        UserSegment::Retired,
        UserSegment::Other,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UserSegment::FullTime => "full_time",
            UserSegment::PartTime => "part_time",
            UserSegment::Student => "student",
            UserSegment::Housewife => "housewife",
            UserSegment::Retired => "retired",
            UserSegment::Other => "other",
        }
    }
}

impl fmt::Display for UserSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UserSegment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|seg| seg.as_str() == s.trim())
            .ok_or_else(|| format!("unknown segment `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsFix {
    pub timestamp: i64,
    pub position: LatLon,
}

/// All records of one user, sorted by `(timestamp, cell)` without duplicate pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserStream {
    pub user_id: String,
    pub records: Vec<CdrRecord>,
    /// Sorted by timestamp.
    pub gps: Option<Vec<GpsFix>>,
    pub segment: Option<UserSegment>,
}

impl UserStream {
    pub fn new(user_id: impl Into<String>, records: Vec<CdrRecord>) -> Self {
        UserStream {
            user_id: user_id.into(),
            records,
            gps: None,
            segment: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
