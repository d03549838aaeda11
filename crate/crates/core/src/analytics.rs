//! Census-tract aggregation of detected change, construction permit
//! filtering, ACS deltas and tract-level correlation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::decoder::Detection;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::geojson::{property_string, read_polygon_features, PolygonRings};
use crate::io::{open, write_atomic};
use crate::stats::pearson;

pub const DEFAULT_PERMIT_CATEGORIES: [&str; 3] = ["new", "alteration", "addition"];
pub const DEFAULT_HIGHVALUE_THRESHOLD_USD: f64 = 100_000.0;
/// Permits are grouped on coordinates rounded to this many degrees (~1 m).
pub const PERMIT_LOCATION_GRID_DEG: f64 = 1e-5;

pub const VAR_INCOME: &str = "median_household_income";
pub const VAR_POPULATION: &str = "population";
pub const PROXY_CHANGE_SHARE: &str = "change_share";
pub const PROXY_PERMITS_ALL: &str = "permits_all";
pub const PROXY_PERMITS_HIGHVALUE: &str = "permits_highvalue";

#[derive(Debug, Clone, PartialEq)]
pub struct TractPolygon {
    pub geoid: String,
    pub polygons: Vec<PolygonRings>,
}

pub fn read_tracts(path: &Path) -> Result<Vec<TractPolygon>> {
    let mut out = Vec::new();
    for (i, f) in read_polygon_features(path)?.into_iter().enumerate() {
        let geoid = property_string(&f.properties, &["geoid", "GEOID", "GEOID10", "GEOID20"])
            .ok_or_else(|| Error::parse(path.display().to_string(), format!("feature {i} has no geoid property")))?;
        out.push(TractPolygon {
            geoid,
            polygons: f.polygons,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Location {
    Outside,
    Inside,
    Boundary,
}

const BOUNDARY_TOL: f64 = 1e-12;

fn on_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> bool {
    let (px, py) = (p.lon, p.lat);
    let (ax, ay) = (a.lon, a.lat);
    let (bx, by) = (b.lon, b.lat);
    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
    if cross.abs() > BOUNDARY_TOL * len.max(1.0) {
        return false;
    }
    px >= ax.min(bx) - BOUNDARY_TOL
        && px <= ax.max(bx) + BOUNDARY_TOL
        && py >= ay.min(by) - BOUNDARY_TOL
        && py <= ay.max(by) + BOUNDARY_TOL
}

/// Even-odd ray casting over all rings of one polygon (holes included).
fn locate(p: GeoPoint, rings: &PolygonRings) -> Location {
    let mut inside = false;
    for ring in rings {
        for w in ring.windows(2) {
            let (a, b) = (w[0], w[1]);
            if on_segment(p, a, b) {
                return Location::Boundary;
            }
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
                if p.lon < x {
                    inside = !inside;
                }
            }
        }
    }
    if inside {
        Location::Inside
    } else {
        Location::Outside
    }
}

#[derive(Debug, Clone, Copy)]
struct BBox {
    min_lat: f64,
    max_lat: f64,
    min_lon: f64,
    max_lon: f64,
}

impl BBox {
    fn of(polygons: &[PolygonRings]) -> Self {
        let mut b = BBox {
            min_lat: f64::INFINITY,
            max_lat: f64::NEG_INFINITY,
            min_lon: f64::INFINITY,
            max_lon: f64::NEG_INFINITY,
        };
        for p in polygons.iter().flatten().flatten() {
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lat = b.max_lat.max(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lon = b.max_lon.max(p.lon);
        }
        b
    }

    fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat - BOUNDARY_TOL
            && p.lat <= self.max_lat + BOUNDARY_TOL
            && p.lon >= self.min_lon - BOUNDARY_TOL
            && p.lon <= self.max_lon + BOUNDARY_TOL
    }
}

/// Tracts sorted by geoid with bounding boxes for quick rejection.
#[derive(Debug, Clone)]
pub struct TractIndex {
    tracts: Vec<TractPolygon>,
    boxes: Vec<BBox>,
}

impl TractIndex {
    pub fn new(mut tracts: Vec<TractPolygon>) -> Result<Self> {
        tracts.sort_by(|a, b| a.geoid.cmp(&b.geoid));
        if let Some(w) = tracts.windows(2).find(|w| w[0].geoid == w[1].geoid) {
            return Err(Error::Validation(format!("duplicate tract geoid {}", w[0].geoid)));
        }
        for t in &tracts {
            for ring in t.polygons.iter().flatten() {
                if ring.len() < 4 || ring.first() != ring.last() {
                    return Err(Error::Validation(format!("tract {}: ring is not closed", t.geoid)));
                }
            }
        }
        let boxes = tracts.iter().map(|t| BBox::of(&t.polygons)).collect();
        Ok(Self { tracts, boxes })
    }

    pub fn tracts(&self) -> &[TractPolygon] {
        &self.tracts
    }

    /// First tract (in geoid order) whose interior or boundary contains the
    /// point.
    pub fn assign(&self, point: GeoPoint) -> Option<&str> {
        self.tracts
            .iter()
            .zip(&self.boxes)
            .filter(|(_, b)| b.contains(point))
            .find(|(t, _)| {
                t.polygons
                    .iter()
                    .any(|rings| locate(point, rings) != Location::Outside)
            })
            .map(|(t, _)| t.geoid.as_str())
    }
}

pub fn assign_tract(point: GeoPoint, tracts: &TractIndex) -> Option<&str> {
    tracts.assign(point)
}

/// Per-tract record joining change share, permit counts and ACS deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractStats {
    pub geoid: String,
    pub series_total: usize,
    pub series_changed: usize,
    pub change_share: Option<f64>,
    pub permits_all: usize,
    pub permits_highvalue: usize,
    pub income_pct_change: Option<f64>,
    pub population_pct_change: Option<f64>,
}

impl TractStats {
    fn empty(geoid: &str) -> Self {
        Self {
            geoid: geoid.to_owned(),
            series_total: 0,
            series_changed: 0,
            change_share: None,
            permits_all: 0,
            permits_highvalue: 0,
            income_pct_change: None,
            population_pct_change: None,
        }
    }

    pub fn proxy(&self, name: &str) -> Option<f64> {
        match name {
            PROXY_CHANGE_SHARE => self.change_share,
            PROXY_PERMITS_ALL => Some(self.permits_all as f64),
            PROXY_PERMITS_HIGHVALUE => Some(self.permits_highvalue as f64),
            _ => None,
        }
    }

    pub fn variable(&self, name: &str) -> Option<f64> {
        match name {
            VAR_INCOME => self.income_pct_change,
            VAR_POPULATION => self.population_pct_change,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeAggregation {
    /// One entry per tract, in geoid order.
    pub stats: Vec<TractStats>,
    pub unassigned: usize,
    pub total: usize,
}

/// Counts series and changed series (non-empty change set) per tract.
pub fn aggregate_change(
    detections: &[Detection],
    scene_points: &HashMap<String, GeoPoint>,
    tracts: &TractIndex,
) -> Result<ChangeAggregation> {
    let mut by_geoid: BTreeMap<&str, TractStats> = tracts
        .tracts()
        .iter()
        .map(|t| (t.geoid.as_str(), TractStats::empty(&t.geoid)))
        .collect();
    let mut unassigned = 0;
    for d in detections {
        let point = scene_points.get(&d.scene_id).ok_or_else(|| {
            Error::Validation(format!("detection for scene {} has no scene point", d.scene_id))
        })?;
        match tracts.assign(*point) {
            Some(geoid) => {
                let s = by_geoid.get_mut(geoid).expect("assigned tract exists");
                s.series_total += 1;
                s.series_changed += usize::from(!d.change_points.is_empty());
            }
            None => unassigned += 1,
        }
    }
    let stats = by_geoid
        .into_values()
        .map(|mut s| {
            s.change_share = (s.series_total > 0)
                .then(|| s.series_changed as f64 / s.series_total as f64);
            s
        })
        .collect();
    Ok(ChangeAggregation {
        stats,
        unassigned,
        total: detections.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermitRecord {
    pub permit_id: String,
    pub issue_date: NaiveDate,
    pub category: String,
    pub estimated_cost: f64,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, Default)]
pub struct PermitLoad {
    pub records: Vec<PermitRecord>,
    /// Rows that failed to parse; each is logged with its line number.
    pub skipped: usize,
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s.get(..10).unwrap_or(s), "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%m/%d/%Y"))
        .ok()
}

/// Empty cost cells count as 0; currency symbols and thousands separators
/// are tolerated.
fn parse_cost(s: &str) -> Option<f64> {
    let cleaned: String = s.trim().chars().filter(|c| !matches!(c, '$' | ',')).collect();
    if cleaned.is_empty() {
        return Some(0.0);
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite() && *v >= 0.0)
}

fn parse_permit_row(row: &csv::StringRecord, cols: &HashMap<String, usize>) -> std::result::Result<PermitRecord, String> {
    let get = |name: &str| -> std::result::Result<&str, String> {
        cols.get(name)
            .and_then(|&i| row.get(i))
            .ok_or_else(|| format!("missing column {name}"))
    };
    let permit_id = get("permit_id")?.trim().to_owned();
    let issue_date = parse_date(get("issue_date")?).ok_or("unparseable issue_date")?;
    let category = get("category")?.trim().to_owned();
    let estimated_cost = parse_cost(get("estimated_cost")?).ok_or("unparseable estimated_cost")?;
    let lat: f64 = get("lat")?.trim().parse().map_err(|_| "unparseable lat")?;
    let lon: f64 = get("lon")?.trim().parse().map_err(|_| "unparseable lon")?;
    let location = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
    Ok(PermitRecord {
        permit_id,
        issue_date,
        category,
        estimated_cost,
        location,
    })
}

/// Reads `permit_id,issue_date,category,estimated_cost,lat,lon`. Bad rows are
/// skipped and counted.
pub fn read_permits(path: &Path) -> Result<PermitLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(open(path)?);
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), e))?
        .clone();
    let cols: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
        .collect();
    for required in ["permit_id", "issue_date", "category", "estimated_cost", "lat", "lon"] {
        if !cols.contains_key(required) {
            return Err(Error::parse(
                path.display().to_string(),
                format!("missing required column `{required}`"),
            ));
        }
    }
    let mut load = PermitLoad::default();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        match row.map_err(|e| e.to_string()).and_then(|r| parse_permit_row(&r, &cols)) {
            Ok(rec) => load.records.push(rec),
            Err(reason) => {
                log::warn!("{}:{line}: skipped permit row: {reason}", path.display());
                load.skipped += 1;
            }
        }
    }
    Ok(load)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PermitFilter {
    pub all_kept: Vec<PermitRecord>,
    pub highvalue: Vec<PermitRecord>,
}

fn grid_key(p: &PermitRecord) -> (i64, i64, i32) {
    (
        (p.location.lat / PERMIT_LOCATION_GRID_DEG).round() as i64,
        (p.location.lon / PERMIT_LOCATION_GRID_DEG).round() as i64,
        p.issue_date.year(),
    )
}

/// Keeps permits in `categories` (case-insensitive), then marks as high-value
/// every kept permit whose (location, calendar year) group sums to strictly
/// more than `highvalue_threshold`.
pub fn filter_permits(records: &[PermitRecord], categories: &[String], highvalue_threshold: f64) -> PermitFilter {
    let wanted: HashSet<String> = categories.iter().map(|c| c.trim().to_lowercase()).collect();
    let all_kept: Vec<PermitRecord> = records
        .iter()
        .filter(|r| wanted.contains(&r.category.trim().to_lowercase()))
        .cloned()
        .collect();
    let mut totals: HashMap<(i64, i64, i32), f64> = HashMap::new();
    for r in &all_kept {
        *totals.entry(grid_key(r)).or_default() += r.estimated_cost;
    }
    let highvalue = all_kept
        .iter()
        .filter(|r| totals[&grid_key(r)] > highvalue_threshold)
        .cloned()
        .collect();
    PermitFilter {
        all_kept,
        highvalue,
    }
}

/// Permit counts per tract geoid; permits outside every tract are dropped.
pub fn count_by_tract(permits: &[PermitRecord], tracts: &TractIndex) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for p in permits {
        if let Some(g) = tracts.assign(p.location) {
            *counts.entry(g.to_owned()).or_insert(0) += 1;
        }
    }
    counts
}

/// Relative change in percent; `None` when the base is zero or either value
/// is non-finite.
pub fn pct_change(v_start: f64, v_end: f64) -> Option<f64> {
    if v_start == 0.0 || !v_start.is_finite() || !v_end.is_finite() {
        return None;
    }
    Some(100.0 * (v_end - v_start) / v_start)
}

#[derive(Debug, Clone, Default)]
pub struct AcsTable {
    values: HashMap<(String, String, i32), f64>,
}

#[derive(Debug, Deserialize)]
struct AcsRow {
    geoid: String,
    variable: String,
    year: i32,
    value: Option<f64>,
}

impl AcsTable {
    pub fn insert(&mut self, geoid: &str, variable: &str, year: i32, value: f64) {
        self.values
            .insert((geoid.to_owned(), variable.to_owned(), year), value);
    }

    pub fn get(&self, geoid: &str, variable: &str, year: i32) -> Option<f64> {
        self.values
            .get(&(geoid.to_owned(), variable.to_owned(), year))
            .copied()
    }

    /// Percent change between two vintages, logging why a tract is dropped.
    pub fn pct_change(&self, geoid: &str, variable: &str, start: i32, end: i32) -> Option<f64> {
        let (Some(a), Some(b)) = (self.get(geoid, variable, start), self.get(geoid, variable, end)) else {
            log::info!("tract {geoid}: {variable} missing for {start} or {end}, dropped");
            return None;
        };
        let out = pct_change(a, b);
        if out.is_none() {
            log::info!("tract {geoid}: {variable} base value {a} in {start}, dropped");
        }
        out
    }
}

/// Reads `geoid,variable,year,value`; empty values are treated as missing.
pub fn read_acs(path: &Path) -> Result<AcsTable> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut table = AcsTable::default();
    for (i, row) in reader.deserialize::<AcsRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 2), e))?;
        if let Some(v) = row.value.filter(|v| v.is_finite()) {
            table.insert(row.geoid.trim(), row.variable.trim(), row.year, v);
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcsYears {
    pub start: i32,
    pub end: i32,
}

impl Default for AcsYears {
    fn default() -> Self {
        Self {
            start: 2009,
            end: 2021,
        }
    }
}

/// Adds permit counts and ACS deltas to the change aggregation.
pub fn join_tract_stats(
    mut aggregation: Vec<TractStats>,
    permits: &PermitFilter,
    tracts: &TractIndex,
    acs: &AcsTable,
    years: AcsYears,
) -> Vec<TractStats> {
    let all = count_by_tract(&permits.all_kept, tracts);
    let high = count_by_tract(&permits.highvalue, tracts);
    for s in &mut aggregation {
        s.permits_all = all.get(&s.geoid).copied().unwrap_or(0);
        s.permits_highvalue = high.get(&s.geoid).copied().unwrap_or(0);
        s.income_pct_change = acs.pct_change(&s.geoid, VAR_INCOME, years.start, years.end);
        s.population_pct_change = acs.pct_change(&s.geoid, VAR_POPULATION, years.start, years.end);
    }
    aggregation
}

pub fn write_tract_stats(path: &Path, stats: &[TractStats]) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for s in stats {
            csv.serialize(s)
                .map_err(|e| Error::parse(path.display().to_string(), e))?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}

pub fn read_tract_stats(path: &Path) -> Result<Vec<TractStats>> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 2), e)))
        .collect()
}

/// One `(proxy, variable)` correlation over tracts with both values present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub proxy: String,
    pub variable: String,
    pub r: f64,
    pub r2: f64,
    pub p: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub proxy: String,
    pub variable: String,
    pub geoid: String,
    pub x: f64,
    pub y: f64,
}

/// Tracts where both the proxy and the variable are defined.
pub fn paired_samples(stats: &[TractStats], proxy: &str, variable: &str) -> Vec<ScatterPoint> {
    stats
        .iter()
        .filter_map(|s| {
            Some(ScatterPoint {
                proxy: proxy.to_owned(),
                variable: variable.to_owned(),
                geoid: s.geoid.clone(),
                x: s.proxy(proxy)?,
                y: s.variable(variable)?,
            })
        })
        .collect()
}

pub const PROXIES: [&str; 3] = [PROXY_CHANGE_SHARE, PROXY_PERMITS_ALL, PROXY_PERMITS_HIGHVALUE];
pub const VARIABLES: [&str; 2] = [VAR_INCOME, VAR_POPULATION];

/// Pearson correlation for every proxy × variable combination. Combinations
/// that are undefined (too few tracts, zero variance) are logged and left
/// out.
pub fn correlate_tracts(stats: &[TractStats]) -> Vec<CorrelationEntry> {
    let mut out = Vec::new();
    for proxy in PROXIES {
        for variable in VARIABLES {
            let pts = paired_samples(stats, proxy, variable);
            let x: Vec<f64> = pts.iter().map(|p| p.x).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.y).collect();
            match pearson(&x, &y) {
                Ok(c) => out.push(CorrelationEntry {
                    proxy: proxy.to_owned(),
                    variable: variable.to_owned(),
                    r: c.r,
                    r2: c.r_squared,
                    p: c.p_value,
                    n: c.n,
                }),
                Err(e) => log::warn!("{proxy} vs {variable}: {e}"),
            }
        }
    }
    out
}
