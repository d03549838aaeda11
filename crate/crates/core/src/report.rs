//! Report files for tract-level results: choropleth GeoJSON, tract table,
//! correlation JSON and long-format scatter data for external plotting.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::analytics::{
    paired_samples, write_tract_stats, CorrelationEntry, TractPolygon, TractStats,
};
use crate::error::{Error, Result};
use crate::geojson::geometry_value;
use crate::io::{write_atomic, write_json_pretty};

pub const CHOROPLETH_FILE: &str = "choropleth.geojson";
pub const TRACT_STATS_FILE: &str = "tract_stats.csv";
pub const CORRELATIONS_FILE: &str = "correlations.json";
pub const SCATTER_FILE: &str = "scatter.csv";

pub fn choropleth(stats: &[TractStats], tracts: &[TractPolygon]) -> Value {
    let geometry: HashMap<&str, &TractPolygon> =
        tracts.iter().map(|t| (t.geoid.as_str(), t)).collect();
    let features: Vec<Value> = stats
        .iter()
        .map(|s| {
            let geom = geometry
                .get(s.geoid.as_str())
                .map(|t| geometry_value(&t.polygons))
                .unwrap_or(Value::Null);
            json!({
                "type": "Feature",
                "properties": {
                    "geoid": s.geoid,
                    "change_share": s.change_share,
                    "series_total": s.series_total,
                    "series_changed": s.series_changed,
                    "permits_all": s.permits_all,
                    "permits_highvalue": s.permits_highvalue,
                    "income_pct_change": s.income_pct_change,
                    "population_pct_change": s.population_pct_change,
                },
                "geometry": geom,
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

/// Writes the four report files into `out_dir` and returns their paths.
pub fn emit_report(
    stats: &[TractStats],
    correlations: &[CorrelationEntry],
    tracts: &[TractPolygon],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if stats.is_empty() {
        return Err(Error::Validation("no tract statistics to report".into()));
    }
    let choropleth_path = out_dir.join(CHOROPLETH_FILE);
    write_json_pretty(&choropleth_path, &choropleth(stats, tracts))?;

    let stats_path = out_dir.join(TRACT_STATS_FILE);
    write_tract_stats(&stats_path, stats)?;

    let corr_path = out_dir.join(CORRELATIONS_FILE);
    write_json_pretty(&corr_path, correlations)?;

    let scatter_path = out_dir.join(SCATTER_FILE);
    write_atomic(&scatter_path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for c in correlations {
            for p in paired_samples(stats, &c.proxy, &c.variable) {
                csv.serialize(&p)
                    .map_err(|e| Error::parse(scatter_path.display().to_string(), e))?;
            }
        }
        csv.flush().map_err(|e| Error::io(&scatter_path, e))
    })?;
    Ok(vec![choropleth_path, stats_path, corr_path, scatter_path])
}
