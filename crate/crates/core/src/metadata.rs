//! Panorama metadata clients and per-building series assembly.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{ClientError, Error, Result};
use crate::geo::{
    haversine_distance, initial_bearing, nearest_panorama, polygon_centroid, ring_area,
    FootprintPolygon, GeoPoint, PanoMetadata, YearMonth,
};
use crate::geojson::{property_string, read_polygon_features, PolygonFeature};
use crate::series::{StreetImage, StreetViewSeries};

pub const DEFAULT_SEARCH_RADIUS_M: f64 = 50.0;
pub const API_KEY_ENV: &str = "SVCHANGE_METADATA_API_KEY";
pub const BASE_URL_ENV: &str = "SVCHANGE_METADATA_BASE_URL";

/// Source of historical panorama metadata around a point.
///
/// Results must be repeatable within a session. Rate limiting and backoff
/// are the implementation's concern.
pub trait MetadataClient: Sync {
    fn query(&self, point: GeoPoint, radius_m: f64) -> Result<Vec<PanoMetadata>, ClientError>;
}

#[derive(Debug, Clone, Deserialize)]
struct RawPano {
    panoid: String,
    lat: f64,
    lon: f64,
    date: YearMonth,
}

impl RawPano {
    fn into_meta(self) -> std::result::Result<PanoMetadata, String> {
        let location = GeoPoint::new(self.lat, self.lon).map_err(|e| e.to_string())?;
        Ok(PanoMetadata {
            panoid: self.panoid,
            location,
            capture_date: self.date,
        })
    }
}

#[derive(Debug, Deserialize)]
struct FixtureLine {
    query_lat: f64,
    query_lon: f64,
    results: Vec<RawPano>,
}

/// Replays recorded responses from a JSON-lines file.
///
/// A query is answered by the recorded entry whose query point lies closest,
/// provided it is within `match_tolerance_m`; results are then limited to the
/// requested radius. Unknown points yield no panoramas.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    entries: Vec<(GeoPoint, Vec<PanoMetadata>)>,
    pub match_tolerance_m: f64,
}

impl FixtureClient {
    pub fn from_reader(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let loc = format!("{source}:{}", i + 1);
            let line = line.map_err(|e| Error::parse(&loc, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: FixtureLine = serde_json::from_str(&line).map_err(|e| Error::parse(&loc, e))?;
            let point = GeoPoint::new(raw.query_lat, raw.query_lon).map_err(|e| Error::parse(&loc, e))?;
            let results = raw
                .results
                .into_iter()
                .map(|r| r.into_meta().map_err(|e| Error::parse(&loc, e)))
                .collect::<Result<Vec<_>>>()?;
            entries.push((point, results));
        }
        Ok(Self {
            entries,
            match_tolerance_m: 1.0,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = crate::io::open(path)?;
        Self::from_reader(std::io::BufReader::new(file), &path.display().to_string())
    }
}

impl MetadataClient for FixtureClient {
    fn query(&self, point: GeoPoint, radius_m: f64) -> Result<Vec<PanoMetadata>, ClientError> {
        let hit = self
            .entries
            .iter()
            .map(|(q, r)| (haversine_distance(*q, point), r))
            .filter(|(d, _)| *d <= self.match_tolerance_m)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        Ok(hit
            .map(|(_, results)| {
                results
                    .iter()
                    .filter(|p| haversine_distance(point, p.location) <= radius_m)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default())
    }
}

#[derive(Debug, Deserialize)]
struct HttpResponse {
    results: Vec<RawPano>,
}

/// HTTP adapter: `GET {base_url}?lat=..&lon=..&radius=..&key=..` returning
/// `{"results": [{panoid, lat, lon, date}]}`.
pub struct HttpMetadataClient {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpMetadataClient {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into(),
            api_key,
            agent,
        }
    }

    /// Reads the base URL and API key from the environment.
    pub fn from_env() -> Result<Self> {
        let base = std::env::var(BASE_URL_ENV)
            .map_err(|_| Error::Config(format!("{BASE_URL_ENV} is not set")))?;
        Ok(Self::new(base, std::env::var(API_KEY_ENV).ok()))
    }
}

impl MetadataClient for HttpMetadataClient {
    fn query(&self, point: GeoPoint, radius_m: f64) -> Result<Vec<PanoMetadata>, ClientError> {
        let mut req = self
            .agent
            .get(&self.base_url)
            .query("lat", point.lat.to_string())
            .query("lon", point.lon.to_string())
            .query("radius", radius_m.to_string());
        if let Some(key) = &self.api_key {
            req = req.query("key", key);
        }
        let mut resp = req
            .call()
            .map_err(|e| ClientError::retryable(format!("request failed: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(ClientError::retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(ClientError::fatal(format!("HTTP {status}")));
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::retryable(format!("reading body: {e}")))?;
        let parsed: HttpResponse = serde_json::from_str(&body)
            .map_err(|e| ClientError::fatal(format!("malformed response: {e}")))?;
        parsed
            .results
            .into_iter()
            .map(|r| r.into_meta().map_err(ClientError::fatal))
            .collect()
    }
}

/// Reads building footprints. MultiPolygons contribute their largest part;
/// building ids come from `building_id`/`id` properties, the feature id, or
/// the feature position.
pub fn read_footprints(path: &Path) -> Result<Vec<FootprintPolygon>> {
    Ok(read_polygon_features(path)?
        .into_iter()
        .enumerate()
        .filter_map(|(i, f)| footprint_from_feature(i, f))
        .collect())
}

pub fn footprint_from_feature(index: usize, feature: PolygonFeature) -> Option<FootprintPolygon> {
    let building_id = property_string(&feature.properties, &["building_id", "id"])
        .or(feature.id)
        .unwrap_or_else(|| format!("feature-{index}"));
    let mut rings = feature
        .polygons
        .into_iter()
        .filter(|p| !p.is_empty())
        .max_by(|a, b| ring_area(&a[0]).total_cmp(&ring_area(&b[0])))?;
    let exterior = rings.remove(0);
    Some(FootprintPolygon {
        building_id,
        exterior,
        holes: rings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneOutcome {
    Series(StreetViewSeries),
    /// No panorama was found within the search radius.
    Empty { building_id: String, target: GeoPoint },
}

/// Assembles the unlabeled series for one building: the centroid is the scene
/// point, each capture month contributes its nearest panorama, and headings
/// face the scene point.
pub fn build_scene_series(
    building: &FootprintPolygon,
    client: &dyn MetadataClient,
    radius_m: f64,
) -> Result<SceneOutcome> {
    let centroid = polygon_centroid(building)?;
    if centroid.degenerate {
        log::warn!("building {}: degenerate footprint, using vertex mean", building.building_id);
    }
    let target = centroid.point;
    let candidates = client.query(target, radius_m)?;
    let mut by_month: BTreeMap<YearMonth, Vec<PanoMetadata>> = BTreeMap::new();
    for c in candidates {
        by_month.entry(c.capture_date).or_default().push(c);
    }
    let mut used = HashSet::new();
    let mut images = Vec::with_capacity(by_month.len());
    for (month, group) in &by_month {
        let best = nearest_panorama(target, group)?;
        if !used.insert(best.panoid.clone()) {
            log::debug!(
                "building {}: panoid {} already used, skipping {month}",
                building.building_id,
                best.panoid
            );
            continue;
        }
        // a panorama exactly at the scene point has no defined bearing
        let heading = initial_bearing(best.location, target).unwrap_or(0.0);
        images.push(StreetImage {
            image_id: best.panoid.clone(),
            timestamp: month.first_day(),
            panoid: best.panoid.clone(),
            heading,
            capture_point: best.location,
        });
    }
    if images.is_empty() {
        return Ok(SceneOutcome::Empty {
            building_id: building.building_id.clone(),
            target,
        });
    }
    Ok(SceneOutcome::Series(StreetViewSeries::new(
        building.building_id.clone(),
        target,
        images,
        Vec::new(),
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"query_lat": 10.0, "query_lon": 20.0, "results": [{"panoid": "p1", "lat": 10.0001, "lon": 20.0, "date": "2010-05"}, {"panoid": "p2", "lat": 10.0, "lon": 20.1, "date": "2010-05"}]}
{"query_lat": -5.0, "query_lon": 1.0, "results": []}
"#;

    #[test]
    fn fixture_matching_and_radius() {
        let client = FixtureClient::from_reader(FIXTURE.as_bytes(), "fx").unwrap();
        let res = client.query(GeoPoint { lat: 10.0, lon: 20.0 }, 50.0).unwrap();
        assert_eq!(res.len(), 1);
        assert_eq!(res[0].panoid, "p1");
        assert!(client.query(GeoPoint { lat: 11.0, lon: 20.0 }, 50.0).unwrap().is_empty());
        assert!(client.query(GeoPoint { lat: -5.0, lon: 1.0 }, 50.0).unwrap().is_empty());
    }

    #[test]
    fn fixture_parse_errors_name_the_line() {
        let err = FixtureClient::from_reader("\n{bad\n".as_bytes(), "fx").unwrap_err();
        assert!(err.to_string().starts_with("fx:2"), "{err}");
    }

    #[test]
    fn largest_part_of_multipolygon() {
        let text = r#"{"features":[{"properties":{"building_id":"b9"},"geometry":{"type":"MultiPolygon","coordinates":[
            [[[0,0],[0.0001,0],[0.0001,0.0001],[0,0]]],
            [[[1,1],[1.001,1],[1.001,1.001],[1,1.001],[1,1]]]]}}]}"#;
        let f = crate::geojson::parse_polygon_features(text, "t").unwrap().remove(0);
        let fp = footprint_from_feature(0, f).unwrap();
        assert_eq!(fp.building_id, "b9");
        assert_eq!(fp.exterior.len(), 5);
    }
}
