//! Spherical geodesy helpers shared by the network, matching and estimation stages.

use serde::{Deserialize, Serialize};

/// Sphere radius used for every distance in the crate, in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6378.137;

/// Kilometres per degree of arc on the reference sphere.
pub const KM_PER_DEGREE: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

/// A WGS-style latitude/longitude pair in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance in kilometres (haversine form).
pub fn haversine(a: LatLon, b: LatLon) -> f64 {
    let phi_a = a.lat.to_radians();
    let phi_b = b.lat.to_radians();
    let half_dphi = (phi_b - phi_a) / 2.0;
    let half_dlambda = (b.lon - a.lon).to_radians() / 2.0;
    let h = half_dphi.sin().powi(2) + phi_a.cos() * phi_b.cos() * half_dlambda.sin().powi(2);
    // rounding can push h a hair above 1 for antipodal points
    2.0 * EARTH_RADIUS_KM * h.min(1.0).sqrt().asin()
}

/// Sum of haversine distances over consecutive vertices.
pub fn polyline_length(vertices: &[LatLon]) -> f64 {
    vertices.windows(2).map(|w| haversine(w[0], w[1])).sum()
}

/// Axis-aligned rectangle in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn empty() -> Self {
        Self {
            min_lat: f64::INFINITY,
            min_lon: f64::INFINITY,
            max_lat: f64::NEG_INFINITY,
            max_lon: f64::NEG_INFINITY,
        }
    }

    pub fn extend(&mut self, p: LatLon) {
        self.min_lat = self.min_lat.min(p.lat);
        self.min_lon = self.min_lon.min(p.lon);
        self.max_lat = self.max_lat.max(p.lat);
        self.max_lon = self.max_lon.max(p.lon);
    }

    pub fn contains(&self, p: LatLon) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat)
            && (self.min_lon..=self.max_lon).contains(&p.lon)
    }

    pub fn is_empty(&self) -> bool {
        self.min_lat > self.max_lat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_zero() {
        let p = LatLon::new(30.65, 104.06);
        assert_eq!(haversine(p, p), 0.0);
    }

    #[test]
    fn quarter_great_circle() {
        let d = haversine(LatLon::new(90.0, 0.0), LatLon::new(0.0, 0.0));
        let expected = std::f64::consts::PI * EARTH_RADIUS_KM / 2.0;
        assert!((expected - 10018.754).abs() < 0.001);
        assert!((d - 10018.754).abs() < 0.001, "{d}");
    }

    #[test]
    fn small_meridian_arc() {
        let d = haversine(LatLon::new(30.65, 104.06), LatLon::new(30.66, 104.06));
        let expected = 0.01 * KM_PER_DEGREE;
        assert!((expected - 1.1132).abs() < 0.0005);
        assert!((d - 1.1132).abs() < 0.0005, "{d}");
    }

    #[test]
    fn symmetric() {
        let a = LatLon::new(30.1, 104.2);
        let b = LatLon::new(-12.5, 33.0);
        assert_eq!(haversine(a, b), haversine(b, a));
    }

    #[test]
    fn antipodes_do_not_nan() {
        let d = haversine(LatLon::new(0.0, 0.0), LatLon::new(0.0, 180.0));
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_KM).abs() < 1e-6);
    }

    #[test]
    fn validity_bounds() {
        assert!(LatLon::new(90.0, -180.0).is_valid());
        assert!(!LatLon::new(90.0001, 0.0).is_valid());
        assert!(!LatLon::new(0.0, f64::NAN).is_valid());
    }
}
