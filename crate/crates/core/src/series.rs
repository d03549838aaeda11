//! Street view time series: the per-scene data model, segment assignment,
//! chronological pair generation and scene-level dataset splits.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::io::{open, stable_hash, write_atomic};

#[derive(Debug, Clone, PartialEq)]
pub struct StreetImage {
    pub image_id: String,
    pub timestamp: NaiveDate,
    pub panoid: String,
    /// Camera heading in degrees clockwise from north, `[0, 360)`.
    pub heading: f64,
    pub capture_point: GeoPoint,
}

impl StreetImage {
    fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::Validation("empty image_id".into()));
        }
        if !(self.heading.is_finite() && (0.0..360.0).contains(&self.heading)) {
            return Err(Error::Validation(format!(
                "image {}: heading {} outside [0, 360)",
                self.image_id, self.heading
            )));
        }
        self.capture_point
            .validate()
            .map_err(|e| Error::Validation(format!("image {}: {e}", self.image_id)))
    }
}

/// Chronologically ordered images of one scene plus its (possibly empty)
/// change-point labels.
///
/// Change points are 1-based indices into the sorted image list and are
/// always `>= 2`: an image can only deviate from images before it.
#[derive(Debug, Clone, PartialEq)]
pub struct StreetViewSeries {
    scene_id: String,
    target_point: GeoPoint,
    images: Vec<StreetImage>,
    change_points: Vec<usize>,
}

impl StreetViewSeries {
    /// Builds a series, sorting images by `(timestamp, image_id)`.
    /// `change_points` index into that sorted order.
    pub fn new(
        scene_id: impl Into<String>,
        target_point: GeoPoint,
        mut images: Vec<StreetImage>,
        change_points: Vec<usize>,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        if scene_id.is_empty() {
            return Err(Error::Validation("empty scene_id".into()));
        }
        let ctx = |e: Error| Error::Validation(format!("scene {scene_id}: {e}"));
        target_point.validate().map_err(ctx)?;
        if images.is_empty() {
            return Err(Error::Validation(format!("scene {scene_id}: no images")));
        }
        let mut seen = HashSet::with_capacity(images.len());
        for img in &images {
            img.validate().map_err(ctx)?;
            if !seen.insert(img.image_id.as_str()) {
                return Err(Error::Validation(format!(
                    "scene {scene_id}: duplicate image_id {}",
                    img.image_id
                )));
            }
        }
        images.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.image_id.cmp(&b.image_id))
        });
        let n = images.len();
        for (k, &c) in change_points.iter().enumerate() {
            if c < 2 || c > n {
                return Err(Error::Validation(format!(
                    "scene {scene_id}: change point {c} outside [2, {n}]"
                )));
            }
            if k > 0 && change_points[k - 1] >= c {
                return Err(Error::Validation(format!(
                    "scene {scene_id}: change points not strictly increasing"
                )));
            }
        }
        Ok(Self {
            scene_id,
            target_point,
            images,
            change_points,
        })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn target_point(&self) -> GeoPoint {
        self.target_point
    }

    pub fn images(&self) -> &[StreetImage] {
        &self.images
    }

    pub fn change_points(&self) -> &[usize] {
        &self.change_points
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Same images with a different label set.
    pub fn with_change_points(&self, change_points: Vec<usize>) -> Result<Self> {
        Self::new(
            self.scene_id.clone(),
            self.target_point,
            self.images.clone(),
            change_points,
        )
    }

    /// 1-based segment index of every image: `1 + #{c : c <= j}`.
    pub fn assign_segments(&self) -> Vec<usize> {
        segments_for(self.images.len(), &self.change_points)
    }

    /// Label of the chronological pair `(a, b)` (0-based, `a < b`).
    pub fn pair_label(&self, a: usize, b: usize) -> u8 {
        crosses_change(&self.change_points, a + 1, b + 1) as u8
    }

    fn pair(&self, a: usize, b: usize, label: u8) -> PairSample {
        PairSample {
            scene_id: self.scene_id.clone(),
            earlier_id: self.images[a].image_id.clone(),
            later_id: self.images[b].image_id.clone(),
            label,
        }
    }

    /// All `C(n, 2)` chronological pairs, labeled 1 iff the two images fall
    /// in different segments.
    pub fn generate_pairs(&self) -> Vec<PairSample> {
        let n = self.images.len();
        if n < 2 {
            log::warn!(
                "scene {}: {} image(s), no pairs generated",
                self.scene_id,
                n
            );
            return Vec::new();
        }
        let seg = self.assign_segments();
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                pairs.push(self.pair(a, b, u8::from(seg[a] != seg[b])));
            }
        }
        pairs
    }

    /// One uniformly random unordered pair, emitted chronologically.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<PairSample> {
        let n = self.images.len();
        if n < 2 {
            return None;
        }
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (a, b) = (a.min(b), a.max(b));
        Some(self.pair(a, b, self.pair_label(a, b)))
    }
}

/// Segment vector for a series of `n` images with the given change points.
pub fn segments_for(n: usize, change_points: &[usize]) -> Vec<usize> {
    let mut seg = Vec::with_capacity(n);
    let mut current = 1;
    let mut next = change_points.iter().peekable();
    for j in 1..=n {
        while next.next_if(|&&c| c <= j).is_some() {
            current += 1;
        }
        seg.push(current);
    }
    seg
}

/// Whether some change point `c` satisfies `a < c <= b` (1-based indices).
pub fn crosses_change(change_points: &[usize], a: usize, b: usize) -> bool {
    let first_after_a = change_points.partition_point(|&c| c <= a);
    change_points.get(first_after_a).is_some_and(|&c| c <= b)
}

/// Pairwise-mode sampling: one random pair per series, keyed by `seed` and
/// the scene id so that results do not depend on scene order.
pub fn sample_pairwise_mode(series: &StreetViewSeries, seed: u64) -> Option<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(series.scene_id.as_bytes()));
    series.sample_pair(&mut rng)
}

/// How pairs are drawn from each series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Every chronological pair of every series.
    #[default]
    All,
    /// One random pair per series.
    Pairwise,
}

/// Pairs for a set of scenes, in scene order.
pub fn build_pairs(scenes: &[StreetViewSeries], mode: PairMode, seed: u64) -> Vec<PairSample> {
    match mode {
        PairMode::All => scenes.iter().flat_map(|s| s.generate_pairs()).collect(),
        PairMode::Pairwise => scenes
            .iter()
            .filter_map(|s| sample_pairwise_mode(s, seed))
            .collect(),
    }
}

/// A chronologically ordered image pair with its change label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairSample {
    pub scene_id: String,
    pub earlier_id: String,
    pub later_id: String,
    pub label: u8,
}

pub fn write_pairs(path: &Path, pairs: &[PairSample]) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for p in pairs {
            csv.serialize(p)
                .map_err(|e| Error::parse(path.display().to_string(), e))?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairSample>> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut pairs = Vec::new();
    for (i, row) in reader.deserialize::<PairSample>().enumerate() {
        let pair = row.map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 2), e))?;
        if pair.label > 1 {
            return Err(Error::parse(
                format!("{}:{}", path.display(), i + 2),
                format!("label {} not in {{0, 1}}", pair.label),
            ));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Scene-level partition; all pairs of a scene follow the scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train_scene_ids: BTreeSet<String>,
    pub val_scene_ids: BTreeSet<String>,
    pub test_scene_ids: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn role_of(&self, scene_id: &str) -> Option<SplitRole> {
        if self.train_scene_ids.contains(scene_id) {
            Some(SplitRole::Train)
        } else if self.val_scene_ids.contains(scene_id) {
            Some(SplitRole::Val)
        } else if self.test_scene_ids.contains(scene_id) {
            Some(SplitRole::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, role: SplitRole) -> &BTreeSet<String> {
        match role {
            SplitRole::Train => &self.train_scene_ids,
            SplitRole::Val => &self.val_scene_ids,
            SplitRole::Test => &self.test_scene_ids,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_frac: f64,
    pub val_frac_of_rest: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_frac: 0.5,
            val_frac_of_rest: 0.1,
            seed: 0,
        }
    }
}

/// Shuffles scenes (sorted by id first, so input order is irrelevant) and
/// takes `floor(N * test_frac)` for test, then `floor(rest * val_frac)` for
/// validation; everything left is training data.
pub fn split_dataset(scenes: &[StreetViewSeries], config: &SplitConfig) -> Result<DatasetSplit> {
    for (name, f) in [
        ("test_frac", config.test_frac),
        ("val_frac_of_rest", config.val_frac_of_rest),
    ] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("{name} = {f} must lie in (0, 1)")));
        }
    }
    let mut ids: Vec<&str> = scenes.iter().map(|s| s.scene_id()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("duplicate scene ids in split input".into()));
    }
    if ids.len() < 3 {
        return Err(Error::Validation(format!(
            "need at least 3 scenes to split, got {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_test = (n as f64 * config.test_frac).floor() as usize;
    let n_val = ((n - n_test) as f64 * config.val_frac_of_rest).floor() as usize;
    let collect = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
    Ok(DatasetSplit {
        seed: config.seed,
        test_scene_ids: collect(&ids[..n_test]),
        val_scene_ids: collect(&ids[n_test..n_test + n_val]),
        train_scene_ids: collect(&ids[n_test + n_val..]),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestImage {
    image_id: String,
    timestamp: NaiveDate,
    panoid: String,
    heading: f64,
    cap_lat: f64,
    cap_lon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    scene_id: String,
    lat: f64,
    lon: f64,
    images: Vec<ManifestImage>,
    #[serde(default)]
    change_points: Vec<usize>,
}

impl StreetViewSeries {
    pub fn from_manifest_line(line: &str) -> Result<Self> {
        let raw: ManifestLine =
            serde_json::from_str(line).map_err(|e| Error::parse("manifest line", e))?;
        let images = raw
            .images
            .into_iter()
            .map(|im| StreetImage {
                image_id: im.image_id,
                timestamp: im.timestamp,
                panoid: im.panoid,
                heading: im.heading,
                capture_point: GeoPoint {
                    lat: im.cap_lat,
                    lon: im.cap_lon,
                },
            })
            .collect();
        Self::new(
            raw.scene_id,
            GeoPoint {
                lat: raw.lat,
                lon: raw.lon,
            },
            images,
            raw.change_points,
        )
    }

    pub fn to_manifest_line(&self) -> String {
        let raw = ManifestLine {
            scene_id: self.scene_id.clone(),
            lat: self.target_point.lat,
            lon: self.target_point.lon,
            images: self
                .images
                .iter()
                .map(|im| ManifestImage {
                    image_id: im.image_id.clone(),
                    timestamp: im.timestamp,
                    panoid: im.panoid.clone(),
                    heading: im.heading,
                    cap_lat: im.capture_point.lat,
                    cap_lon: im.capture_point.lon,
                })
                .collect(),
            change_points: self.change_points.clone(),
        };
        serde_json::to_string(&raw).expect("manifest line serializes")
    }
}

/// Reads a JSON-lines manifest. Blank lines are ignored; scene ids must be
/// unique.
pub fn read_manifest(path: &Path) -> Result<Vec<StreetViewSeries>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{}:{}", path.display(), i + 1);
        let series = StreetViewSeries::from_manifest_line(&line).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(loc(), message),
            other => Error::parse(loc(), other),
        })?;
        if !seen.insert(series.scene_id.clone()) {
            return Err(Error::parse(
                loc(),
                format!("duplicate scene_id {}", series.scene_id),
            ));
        }
        out.push(series);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, scenes: &[StreetViewSeries]) -> Result<()> {
    write_atomic(path, |w| {
        for s in scenes {
            writeln!(w, "{}", s.to_manifest_line()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}
