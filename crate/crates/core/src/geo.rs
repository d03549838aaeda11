//! Geodesy on the WGS84 sphere approximation: distances, bearings, footprint
//! centroids and panorama selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Rings whose projected area falls below this are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat)) {
            return Err(Error::Validation(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(Error::Validation(format!(
                "longitude {} outside [-180, 180]",
                self.lon
            )));
        }
        Ok(())
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `from` to `to`, degrees clockwise from
/// north in `[0, 360)`.
pub fn initial_bearing(from: GeoPoint, to: GeoPoint) -> Result<f64> {
    if from == to {
        return Err(Error::Validation(format!(
            "bearing undefined for coincident points ({}, {})",
            from.lat, from.lon
        )));
    }
    let (phi1, phi2) = (from.lat.to_radians(), to.lat.to_radians());
    let dlambda = (to.lon - from.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    Ok(normalize_degrees(y.atan2(x).to_degrees()))
}

fn normalize_degrees(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360.0 for tiny negative inputs
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootprintPolygon {
    pub building_id: String,
    /// Closed exterior ring (first vertex repeated at the end).
    pub exterior: Vec<GeoPoint>,
    /// Interior rings. Carried through from the source but not used for the
    /// centroid.
    pub holes: Vec<Vec<GeoPoint>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub point: GeoPoint,
    /// Set when the ring had (near) zero area and the vertex mean was used.
    pub degenerate: bool,
}

/// Signed area and area-weighted centroid of a closed planar ring via the
/// shoelace formula. Returns `(cx, cy, signed_area)`.
pub fn shoelace(ring: &[(f64, f64)]) -> (f64, f64, f64) {
    let mut twice_area = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for w in ring.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        let cross = x0 * y1 - x1 * y0;
        twice_area += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    let area = twice_area / 2.0;
    if area == 0.0 {
        return (f64::NAN, f64::NAN, 0.0);
    }
    (cx / (6.0 * area), cy / (6.0 * area), area)
}

/// Centroid of a closed ring given in planar coordinates, falling back to the
/// vertex mean when the ring is degenerate.
pub fn planar_centroid(ring: &[(f64, f64)]) -> Result<((f64, f64), bool)> {
    check_ring(ring.len(), ring.first() == ring.last())?;
    let distinct = &ring[..ring.len() - 1];
    let mut uniq: Vec<(f64, f64)> = distinct.to_vec();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    uniq.dedup();
    if uniq.len() < 3 {
        return Err(Error::Validation(format!(
            "ring has {} distinct vertices, need at least 3",
            uniq.len()
        )));
    }
    // shift to the vertex mean to keep the cross products well conditioned
    let n = distinct.len() as f64;
    let mx = distinct.iter().map(|p| p.0).sum::<f64>() / n;
    let my = distinct.iter().map(|p| p.1).sum::<f64>() / n;
    let shifted: Vec<(f64, f64)> = ring.iter().map(|&(x, y)| (x - mx, y - my)).collect();
    let (cx, cy, area) = shoelace(&shifted);
    if area.abs() < DEGENERATE_AREA {
        Ok(((mx, my), true))
    } else {
        Ok(((cx + mx, cy + my), false))
    }
}

fn check_ring(len: usize, closed: bool) -> Result<()> {
    if len < 4 {
        return Err(Error::Validation(format!(
            "ring has {len} vertices; a closed ring needs at least 4 (3 distinct + closing)"
        )));
    }
    if !closed {
        return Err(Error::Validation("ring is not closed".into()));
    }
    Ok(())
}

/// Local equirectangular projection about a reference point. `x` is scaled
/// degrees of longitude, `y` degrees of latitude, so areas stay comparable
/// across latitudes.
#[derive(Debug, Clone, Copy)]
pub struct LocalProjection {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalProjection {
    pub fn about(origin: GeoPoint) -> Self {
        Self {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    pub fn forward(&self, p: GeoPoint) -> (f64, f64) {
        ((p.lon - self.origin.lon) * self.cos_lat, p.lat - self.origin.lat)
    }

    pub fn inverse(&self, (x, y): (f64, f64)) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + y,
            lon: self.origin.lon + x / self.cos_lat,
        }
    }
}

fn vertex_mean(ring: &[GeoPoint]) -> GeoPoint {
    let distinct = &ring[..ring.len() - 1];
    let n = distinct.len() as f64;
    GeoPoint {
        lat: distinct.iter().map(|p| p.lat).sum::<f64>() / n,
        lon: distinct.iter().map(|p| p.lon).sum::<f64>() / n,
    }
}

/// Area-weighted centroid of a footprint's exterior ring, computed on a local
/// projection centered at the ring's vertex mean.
pub fn polygon_centroid(polygon: &FootprintPolygon) -> Result<Centroid> {
    let ring = &polygon.exterior;
    check_ring(ring.len(), ring.first() == ring.last())
        .map_err(|e| Error::Validation(format!("building {}: {e}", polygon.building_id)))?;
    let proj = LocalProjection::about(vertex_mean(ring));
    let planar: Vec<(f64, f64)> = ring.iter().map(|&p| proj.forward(p)).collect();
    let (xy, degenerate) = planar_centroid(&planar)
        .map_err(|e| Error::Validation(format!("building {}: {e}", polygon.building_id)))?;
    Ok(Centroid {
        point: proj.inverse(xy),
        degenerate,
    })
}

/// Absolute area of a closed ring on a local projection (square degrees).
pub fn ring_area(ring: &[GeoPoint]) -> f64 {
    if ring.len() < 4 {
        return 0.0;
    }
    let proj = LocalProjection::about(vertex_mean(ring));
    let planar: Vec<(f64, f64)> = ring.iter().map(|&p| proj.forward(p)).collect();
    shoelace(&planar).2.abs()
}

/// Capture month of a panorama, serialized as `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn first_day(&self) -> chrono::NaiveDate {
        chrono::NaiveDate::from_ymd_opt(self.year, self.month, 1)
            .expect("validated year-month")
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::parse("capture_date", format!("expected YYYY-MM, got `{s}`"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        // tolerate a trailing day component
        let m = m.split('-').next().ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Self { year, month })
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoMetadata {
    pub panoid: String,
    pub location: GeoPoint,
    pub capture_date: YearMonth,
}

/// The candidate closest to `target`; equal distances resolve to the
/// smallest panoid.
pub fn nearest_panorama(target: GeoPoint, candidates: &[PanoMetadata]) -> Result<&PanoMetadata> {
    candidates
        .iter()
        .map(|c| (haversine_distance(target, c.location), c))
        .min_by(|(da, a), (db, b)| {
            da.partial_cmp(db)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.panoid.cmp(&b.panoid))
        })
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Validation("no panorama candidates".into()))
}
