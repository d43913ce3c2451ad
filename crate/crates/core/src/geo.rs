//! Distances on the sphere and a planar approximation.

use std::str::FromStr;

use crate::error::Error;

/// Mean Earth radius (IUGG).
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance in kilometers.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Euclidean distance after an equirectangular projection centred on the pair.
pub fn planar_km(a: LatLon, b: LatLon) -> f64 {
    let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    let mean_lat = ((a.lat + b.lat) / 2.0).to_radians();
    let dx = (b.lon - a.lon) * mean_lat.cos() * k;
    let dy = (b.lat - a.lat) * k;
    dx.hypot(dy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    #[default]
    Haversine,
    Planar,
}

impl DistanceMode {
    #[inline]
    pub fn distance_km(self, a: LatLon, b: LatLon) -> f64 {
        match self {
            DistanceMode::Haversine => haversine_km(a, b),
            DistanceMode::Planar => planar_km(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMode::Haversine => "haversine",
            DistanceMode::Planar => "planar",
        }
    }
}

impl FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "haversine" => Ok(DistanceMode::Haversine),
            "planar" | "euclidean" => Ok(DistanceMode::Planar),
            other => Err(Error::InvalidConfig(format!(
                "unknown distance mode `{other}`"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Spherical law of cosines, kept separate from the haversine path.
    fn law_of_cosines_km(a: LatLon, b: LatLon) -> f64 {
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dl = (b.lon - a.lon).to_radians();
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        EARTH_RADIUS_KM * c.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn identical_points_are_zero() {
        let p = LatLon::new(6.9271, 79.8612);
        assert_eq!(haversine_km(p, p), 0.0);
    }

    #[test]
    fn colombo_short_hop() {
        let a = LatLon::new(6.9271, 79.8612);
        let b = LatLon::new(6.9271, 79.8712);
        // 0.01 degrees of longitude at this latitude: 1.10383 km.
        let oracle = law_of_cosines_km(a, b);
        assert!((oracle - 1.103_834).abs() < 1e-6, "oracle {oracle}");
        assert!((haversine_km(a, b) - oracle).abs() < 1e-6);
    }

    #[test]
    fn one_degree_on_equator() {
        let d = haversine_km(LatLon::new(0.0, 0.0), LatLon::new(0.0, 1.0));
        let closed = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        assert!((closed - 111.195).abs() < 0.01);
        assert!((d - closed).abs() < 1e-9);
    }

    #[test]
    fn planar_agrees_at_short_range() {
        let a = LatLon::new(6.9271, 79.8612);
        let b = LatLon::new(6.9371, 79.8712);
        assert!((planar_km(a, b) - haversine_km(a, b)).abs() < 1e-4);
    }

    fn point() -> impl Strategy<Value = LatLon> {
        (-89.0f64..89.0, -179.0f64..179.0).prop_map(|(lat, lon)| LatLon::new(lat, lon))
    }

    proptest! {
        #[test]
        fn symmetric_and_nonnegative(a in point(), b in point()) {
            let ab = haversine_km(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, haversine_km(b, a));
        }

        #[test]
        fn triangle_inequality(a in point(), b in point(), c in point()) {
            prop_assert!(haversine_km(a, c) <= haversine_km(a, b) + haversine_km(b, c) + 1e-9);
        }
    }
}
