//! Coordinate types and great-circle geometry shared by every pipeline stage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} out of range [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside normalized range (-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("coordinate component is not finite")]
    NonFinite,
    #[error("earth radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("empty point set")]
    EmptyPointSet,
    #[error("degenerate centroid")]
    DegenerateCentroid,
}

/// Validated latitude/longitude pair in degrees.
///
/// Latitude is confined to `[-90, +90]`; longitude is normalized into
/// `(-180, +180]` on construction (`-180` maps to `+180`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatLon")]
pub struct GpsCoordinate {
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct RawLatLon {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawLatLon> for GpsCoordinate {
    type Error = GeoError;

    fn try_from(raw: RawLatLon) -> Result<Self, GeoError> {
        GpsCoordinate::new(raw.lat, raw.lon)
    }
}

impl GpsCoordinate {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat_rad(&self) -> f64 {
        self.lat.to_radians()
    }

    pub fn lon_rad(&self) -> f64 {
        self.lon.to_radians()
    }

    /// Unit vector on the sphere: x toward (0°, 0°), z toward the north pole.
    pub(crate) fn unit_vector(&self) -> [f64; 3] {
        let (lat, lon) = (self.lat_rad(), self.lon_rad());
        [
            lat.cos() * lon.cos(),
            lat.cos() * lon.sin(),
            lat.sin(),
        ]
    }

    pub(crate) fn from_unit_vector(v: [f64; 3]) -> Result<Self, GeoError> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(GeoError::DegenerateCentroid);
        }
        let lat = (v[2] / norm).clamp(-1.0, 1.0).asin().to_degrees();
        let lon = v[1].atan2(v[0]).to_degrees();
        Self::new(lat, lon)
    }

    /// Great-circle destination: travel `distance_km` from `self` along the
    /// initial bearing `bearing_rad` (0 = north, clockwise).
    pub fn destination(&self, bearing_rad: f64, distance_km: f64, earth: EarthModel) -> GpsCoordinate {
        let delta = distance_km / earth.radius_km();
        let lat1 = self.lat_rad();
        let lon1 = self.lon_rad();
        let lat2 = (lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * bearing_rad.cos())
            .clamp(-1.0, 1.0)
            .asin();
        let lon2 = lon1
            + (bearing_rad.sin() * delta.sin() * lat1.cos())
                .atan2(delta.cos() - lat1.sin() * lat2.sin());
        GpsCoordinate::new(lat2.to_degrees(), lon2.to_degrees())
            .expect("destination point is always a valid coordinate")
    }
}

impl std::fmt::Display for GpsCoordinate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l <= -180.0 {
        180.0
    } else {
        l
    }
}

/// Spherical earth of configurable radius; the pipeline default is 6371 km.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarthModel {
    radius_km: f64,
}

impl EarthModel {
    pub const DEFAULT_RADIUS_KM: f64 = 6371.0;

    pub fn new(radius_km: f64) -> Result<Self, GeoError> {
        if !radius_km.is_finite() || radius_km <= 0.0 {
            return Err(GeoError::InvalidRadius(radius_km));
        }
        Ok(Self { radius_km })
    }

    pub fn radius_km(&self) -> f64 {
        self.radius_km
    }
}

impl Default for EarthModel {
    fn default() -> Self {
        Self {
            radius_km: Self::DEFAULT_RADIUS_KM,
        }
    }
}

/// Great-circle distance in kilometers between two coordinates.
///
/// Symmetric by construction and bounded by `pi * radius_km`.
pub fn haversine_km(a: GpsCoordinate, b: GpsCoordinate, earth: EarthModel) -> f64 {
    let lat1 = a.lat_rad();
    let lat2 = b.lat_rad();
    let half_dlat = (lat2 - lat1) / 2.0;
    let half_dlon = (b.lon_rad() - a.lon_rad()) / 2.0;
    let h = half_dlat.sin() * half_dlat.sin()
        + lat1.cos() * lat2.cos() * half_dlon.sin() * half_dlon.sin();
    // Rounding can push h a hair outside [0, 1].
    let h = h.clamp(0.0, 1.0);
    let central_angle = 2.0 * h.sqrt().atan2((1.0 - h).sqrt());
    earth.radius_km() * central_angle
}

/// Spatial average of a point set on the sphere: the 3D mean of unit vectors,
/// renormalized and converted back to lat/lon.
///
/// Summation runs in a canonical order so the result is exactly invariant
/// under input permutation.
pub fn spherical_centroid(points: &[GpsCoordinate]) -> Result<GpsCoordinate, GeoError> {
    if points.is_empty() {
        return Err(GeoError::EmptyPointSet);
    }
    if points.len() == 1 {
        return Ok(points[0]);
    }
    let mut vectors: Vec<[f64; 3]> = points.iter().map(|p| p.unit_vector()).collect();
    vectors.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    let mut sum = [0.0f64; 3];
    for v in &vectors {
        sum[0] += v[0];
        sum[1] += v[1];
        sum[2] += v[2];
    }
    let n = points.len() as f64;
    let mean = [sum[0] / n, sum[1] / n, sum[2] / n];
    let norm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
    if norm < 1e-9 {
        return Err(GeoError::DegenerateCentroid);
    }
    GpsCoordinate::from_unit_vector(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn coord(lat: f64, lon: f64) -> GpsCoordinate {
        GpsCoordinate::new(lat, lon).unwrap()
    }

    #[test]
    fn longitude_normalization() {
        assert_eq!(coord(0.0, 181.0).lon(), -179.0);
        assert_eq!(coord(0.0, -180.0).lon(), 180.0);
        assert_eq!(coord(0.0, 180.0).lon(), 180.0);
        assert_eq!(coord(0.0, 540.0).lon(), 180.0);
        assert_eq!(coord(0.0, 359.0).lon(), -1.0);
        assert_eq!(coord(0.0, -359.0).lon(), 1.0);
    }

    #[test]
    fn latitude_range_enforced() {
        assert_eq!(
            GpsCoordinate::new(90.5, 0.0),
            Err(GeoError::LatitudeOutOfRange(90.5))
        );
        assert_eq!(GpsCoordinate::new(f64::NAN, 0.0), Err(GeoError::NonFinite));
        assert_eq!(GpsCoordinate::new(0.0, f64::INFINITY), Err(GeoError::NonFinite));
    }

    #[test]
    fn radian_round_trip() {
        for &(lat, lon) in &[(48.8584, 2.2945), (-33.8688, 151.2093), (89.9, -179.9)] {
            let c = coord(lat, lon);
            assert!((c.lat_rad().to_degrees() - lat).abs() < 1e-12);
            assert!((c.lon_rad().to_degrees() - lon).abs() < 1e-12);
        }
    }

    #[test]
    fn earth_model_rejects_bad_radius() {
        assert!(EarthModel::new(0.0).is_err());
        assert!(EarthModel::new(-1.0).is_err());
        assert!(EarthModel::new(f64::NAN).is_err());
        assert_eq!(EarthModel::default().radius_km(), 6371.0);
    }

    #[test]
    fn haversine_identity_is_zero() {
        let p = coord(10.0, 20.0);
        assert_eq!(haversine_km(p, p, EarthModel::default()), 0.0);
    }

    #[test]
    fn haversine_antipodal_is_half_circumference() {
        let d = haversine_km(coord(0.0, 0.0), coord(0.0, 180.0), EarthModel::default());
        assert!((d - std::f64::consts::PI * 6371.0).abs() < 1e-9);
    }

    #[test]
    fn haversine_one_degree_on_equator() {
        // Oracle: central angle on the equator equals the longitude difference,
        // so the distance is R * (pi / 180).
        let expected = 6371.0 * std::f64::consts::PI / 180.0;
        let d = haversine_km(coord(0.0, 0.0), coord(0.0, 1.0), EarthModel::default());
        assert!((d - expected).abs() < 1e-9, "got {d}, expected {expected}");
    }

    #[test]
    fn centroid_singleton_is_identity() {
        let p = coord(10.0, 20.0);
        let c = spherical_centroid(&[p]).unwrap();
        assert_eq!(c, p);
    }

    #[test]
    fn centroid_straddles_antimeridian() {
        let c = spherical_centroid(&[coord(0.0, 179.5), coord(0.0, -179.5)]).unwrap();
        assert!(c.lat().abs() < 1e-9);
        assert!((c.lon() - 180.0).abs() < 1e-9, "lon = {}", c.lon());
    }

    #[test]
    fn centroid_quarter_arc() {
        // Oracle: mean of unit vectors (1,0,0) and (0,1,0) normalizes to
        // (1/sqrt(2), 1/sqrt(2), 0), i.e. lat 0, lon 45.
        let c = spherical_centroid(&[coord(0.0, 0.0), coord(0.0, 90.0)]).unwrap();
        assert!(c.lat().abs() < 1e-9);
        assert!((c.lon() - 45.0).abs() < 1e-9);
    }

    #[test]
    fn centroid_empty_and_degenerate() {
        assert_eq!(spherical_centroid(&[]), Err(GeoError::EmptyPointSet));
        let antipodal = [coord(0.0, 0.0), coord(0.0, 180.0)];
        assert_eq!(
            spherical_centroid(&antipodal),
            Err(GeoError::DegenerateCentroid)
        );
    }

    #[test]
    fn destination_round_trip_distance() {
        let earth = EarthModel::default();
        let start = coord(48.0, 2.0);
        for &(bearing, dist) in &[(0.0, 5.0), (1.3, 120.0), (4.0, 2000.0)] {
            let end = start.destination(bearing, dist, earth);
            let back = haversine_km(start, end, earth);
            assert!((back - dist).abs() < 1e-6, "bearing {bearing}: {back} vs {dist}");
        }
    }

    fn arb_coord() -> impl Strategy<Value = GpsCoordinate> {
        (-90.0f64..=90.0, -540.0f64..540.0).prop_map(|(lat, lon)| coord(lat, lon))
    }

    proptest! {
        #[test]
        fn haversine_symmetric_exactly(a in arb_coord(), b in arb_coord()) {
            let earth = EarthModel::default();
            prop_assert_eq!(
                haversine_km(a, b, earth).to_bits(),
                haversine_km(b, a, earth).to_bits()
            );
        }

        #[test]
        fn haversine_bounded(a in arb_coord(), b in arb_coord()) {
            let d = haversine_km(a, b, EarthModel::default());
            prop_assert!(d >= 0.0);
            prop_assert!(d <= std::f64::consts::PI * 6371.0 + 1e-9);
        }

        #[test]
        fn haversine_triangle_inequality(
            a in arb_coord(),
            b in arb_coord(),
            c in arb_coord()
        ) {
            let earth = EarthModel::default();
            let ac = haversine_km(a, c, earth);
            let ab = haversine_km(a, b, earth);
            let bc = haversine_km(b, c, earth);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn centroid_of_copies_is_the_point(p in arb_coord(), k in 1usize..8) {
            let points = vec![p; k];
            let c = spherical_centroid(&points).unwrap();
            prop_assert!((c.lat() - p.lat()).abs() < 1e-9);
            // Longitude is meaningless at the poles.
            if p.lat().abs() < 89.999 {
                let dlon = (c.lon() - p.lon()).abs();
                prop_assert!(dlon < 1e-9 || (360.0 - dlon).abs() < 1e-9);
            }
        }

        #[test]
        fn centroid_permutation_invariant(
            mut points in proptest::collection::vec(arb_coord(), 2..10),
            seed in 0u64..1000
        ) {
            if let Ok(before) = spherical_centroid(&points) {
                // Cheap deterministic shuffle.
                let n = points.len();
                for i in 0..n {
                    let j = (seed as usize + i * 7) % n;
                    points.swap(i, j);
                }
                let after = spherical_centroid(&points).unwrap();
                prop_assert_eq!(before.lat().to_bits(), after.lat().to_bits());
                prop_assert_eq!(before.lon().to_bits(), after.lon().to_bits());
            }
        }
    }
}
