//! Axis-aligned rectangular regions standing in for administrative divisions.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geo::LatLon;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Rect {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Self {
        Rect {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        }
    }

    /// Closed containment: edges belong to the rectangle.
    #[inline]
    pub fn contains(&self, p: LatLon) -> bool {
        p.lat >= self.lat_min
            && p.lat <= self.lat_max
            && p.lon >= self.lon_min
            && p.lon <= self.lon_max
    }

    fn overlaps_interior(&self, other: &Rect) -> bool {
        self.lat_min < other.lat_max
            && other.lat_min < self.lat_max
            && self.lon_min < other.lon_max
            && other.lon_min < self.lon_max
    }

    fn union(&self, other: &Rect) -> Rect {
        Rect {
            lat_min: self.lat_min.min(other.lat_min),
            lat_max: self.lat_max.max(other.lat_max),
            lon_min: self.lon_min.min(other.lon_min),
            lon_max: self.lon_max.max(other.lon_max),
        }
    }

    pub fn area_deg2(&self) -> f64 {
        (self.lat_max - self.lat_min) * (self.lon_max - self.lon_min)
    }

    pub fn center(&self) -> LatLon {
        LatLon::new(
            (self.lat_min + self.lat_max) / 2.0,
            (self.lon_min + self.lon_max) / 2.0,
        )
    }

    fn is_well_formed(&self) -> bool {
        [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite())
            && self.lat_min < self.lat_max
            && self.lon_min < self.lon_max
            && self.lat_min >= -90.0
            && self.lat_max <= 90.0
            && self.lon_min >= -180.0
            && self.lon_max <= 180.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: String,
    pub rect: Rect,
    pub in_study_area: bool,
}

/// Ordered, non-overlapping regions plus the study-area bounding rectangle.
///
/// The study area is the bounding box of the regions flagged as inside it.
/// Points on a shared edge resolve to the region with the lower list index.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    regions: Vec<Region>,
    study_area: Rect,
}

impl RegionGrid {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        let study_area = regions
            .iter()
            .filter(|r| r.in_study_area)
            .map(|r| r.rect)
            .reduce(|a, b| a.union(&b))
            .ok_or_else(|| Error::InvalidGrid("no region is flagged as study area".into()))?;
        Self::with_study_area(regions, study_area)
    }

    pub fn with_study_area(regions: Vec<Region>, study_area: Rect) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::InvalidGrid("grid has no regions".into()));
        }
        if !study_area.is_well_formed() {
            return Err(Error::InvalidGrid(
                "study area rectangle is degenerate".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (i, r) in regions.iter().enumerate() {
            if !r.rect.is_well_formed() {
                return Err(Error::InvalidGrid(format!(
                    "region `{}` is degenerate",
                    r.id
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidGrid(format!(
                    "duplicate region id `{}`",
                    r.id
                )));
            }
            if let Some(other) = regions[..i]
                .iter()
                .find(|o| o.rect.overlaps_interior(&r.rect))
            {
                return Err(Error::InvalidGrid(format!(
                    "regions `{}` and `{}` overlap",
                    other.id, r.id
                )));
            }
        }
        Ok(RegionGrid {
            regions,
            study_area,
        })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn study_area(&self) -> Rect {
        self.study_area
    }

    pub fn region(&self, index: usize) -> &Region {
        &self.regions[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.id == id)
    }

    /// First region containing the point, regardless of the study area.
    pub fn locate(&self, p: LatLon) -> Option<usize> {
        self.regions.iter().position(|r| r.rect.contains(p))
    }

    /// The containing region inside the study area, or `None`.
    pub fn region_of(&self, p: LatLon) -> Option<usize> {
        if !self.study_area.contains(p) {
            return None;
        }
        self.locate(p)
    }

    pub fn region_id_of(&self, p: LatLon) -> Option<&str> {
        self.region_of(p).map(|i| self.regions[i].id.as_str())
    }

    pub fn in_study_area(&self, p: LatLon) -> bool {
        self.study_area.contains(p)
    }
}
