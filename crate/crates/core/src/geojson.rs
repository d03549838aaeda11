//! Minimal GeoJSON polygon reading and writing. Coordinates are `[lon, lat]`.

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// Rings of one polygon; the first ring is the exterior.
pub type PolygonRings = Vec<Vec<GeoPoint>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonFeature {
    pub id: Option<String>,
    pub properties: Map<String, Value>,
    /// One entry for a Polygon, several for a MultiPolygon.
    pub polygons: Vec<PolygonRings>,
}

fn ring_from(value: &Value, loc: &str) -> Result<Vec<GeoPoint>> {
    let coords = value
        .as_array()
        .ok_or_else(|| Error::parse(loc, "ring is not an array"))?;
    coords
        .iter()
        .map(|c| {
            let pair = c.as_array().filter(|a| a.len() >= 2);
            let (lon, lat) = pair
                .and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?)))
                .ok_or_else(|| Error::parse(loc, "coordinate is not [lon, lat]"))?;
            GeoPoint::new(lat, lon).map_err(|e| Error::parse(loc, e))
        })
        .collect()
}

fn polygon_from(value: &Value, loc: &str) -> Result<PolygonRings> {
    value
        .as_array()
        .ok_or_else(|| Error::parse(loc, "polygon is not an array of rings"))?
        .iter()
        .map(|r| ring_from(r, loc))
        .collect()
}

/// Parses a FeatureCollection, keeping Polygon and MultiPolygon features.
/// Other geometry types are skipped with a warning.
pub fn parse_polygon_features(text: &str, source: &str) -> Result<Vec<PolygonFeature>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::parse(source, e))?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(source, "expected a FeatureCollection with `features`"))?;
    let mut out = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let loc = format!("{source}: feature {i}");
        let geometry = f.get("geometry").filter(|g| !g.is_null());
        let Some(geometry) = geometry else {
            log::warn!("{loc}: no geometry, skipped");
            continue;
        };
        let kind = geometry.get("type").and_then(Value::as_str).unwrap_or("");
        let coords = geometry
            .get("coordinates")
            .ok_or_else(|| Error::parse(&loc, "geometry without coordinates"))?;
        let polygons = match kind {
            "Polygon" => vec![polygon_from(coords, &loc)?],
            "MultiPolygon" => coords
                .as_array()
                .ok_or_else(|| Error::parse(&loc, "MultiPolygon is not an array"))?
                .iter()
                .map(|p| polygon_from(p, &loc))
                .collect::<Result<_>>()?,
            other => {
                log::warn!("{loc}: geometry type `{other}` skipped");
                continue;
            }
        };
        let id = match f.get("id") {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => None,
        };
        let properties = f
            .get("properties")
            .and_then(Value::as_object)
            .cloned()
            .unwrap_or_default();
        out.push(PolygonFeature {
            id,
            properties,
            polygons,
        });
    }
    Ok(out)
}

pub fn read_polygon_features(path: &Path) -> Result<Vec<PolygonFeature>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_polygon_features(&text, &path.display().to_string())
}

/// String-valued property, accepting numbers as well.
pub fn property_string(props: &Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| match props.get(*k) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        _ => None,
    })
}

pub fn geometry_value(polygons: &[PolygonRings]) -> Value {
    let poly = |rings: &PolygonRings| -> Value {
        Value::Array(
            rings
                .iter()
                .map(|r| Value::Array(r.iter().map(|p| json!([p.lon, p.lat])).collect()))
                .collect(),
        )
    };
    if polygons.len() == 1 {
        json!({"type": "Polygon", "coordinates": poly(&polygons[0])})
    } else {
        json!({"type": "MultiPolygon", "coordinates": polygons.iter().map(poly).collect::<Vec<_>>()})
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygons_and_multipolygons() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","id":7,"properties":{"geoid":"001"},
             "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}},
            {"type":"Feature","properties":{"geoid":2},
             "geometry":{"type":"MultiPolygon","coordinates":[[[[0,0],[1,0],[1,1],[0,0]]],[[[5,5],[6,5],[6,6],[5,5]]]]}},
            {"type":"Feature","properties":{},"geometry":{"type":"Point","coordinates":[0,0]}}
        ]}"#;
        let feats = parse_polygon_features(text, "t").unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].id.as_deref(), Some("7"));
        assert_eq!(feats[0].polygons[0][0][1], GeoPoint { lat: 0.0, lon: 1.0 });
        assert_eq!(feats[1].polygons.len(), 2);
        assert_eq!(property_string(&feats[1].properties, &["geoid"]).as_deref(), Some("2"));

        let g = geometry_value(&feats[0].polygons);
        assert_eq!(g["type"], "Polygon");
        assert_eq!(g["coordinates"][0][1], json!([1.0, 0.0]));
    }

    #[test]
    fn bad_documents() {
        assert!(parse_polygon_features("{}", "t").is_err());
        assert!(parse_polygon_features("nope", "t").is_err());
        let bad = r#"{"features":[{"geometry":{"type":"Polygon","coordinates":[[[0,100],[1,0],[1,1],[0,100]]]}}]}"#;
        assert!(parse_polygon_features(bad, "t").is_err());
    }
}
