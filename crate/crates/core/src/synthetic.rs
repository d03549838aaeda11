//! Deterministic synthetic embeddings and scene corpora.
//!
//! Image embeddings are `center(scene, segment) + noise(scene, image)`:
//!
//! * `center(scene, k) = distance * (anchor(scene) + (k - 1) * axis)`, where
//!   `anchor` is a pseudo-random unit direction keyed by the scene and `axis`
//!   is a unit "built-environment change" direction shared by all scenes.
//!   Adjacent segments are therefore exactly `distance` apart, and a change
//!   always moves the embedding the same way, which makes pair labels linearly
//!   separable from the difference block of the pair feature.
//! * `noise` is i.i.d. `N(0, sigma^2)` per component, keyed by
//!   `(scene, image_index)`.

use std::borrow::Cow;
use std::collections::HashMap;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingProvider, EmbeddingRecord, EmbeddingStore};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::io::stable_hash;
use crate::series::{StreetImage, StreetViewSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneParams {
    pub dim: usize,
    pub inter_segment_distance: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneParams {
    fn default() -> Self {
        Self {
            dim: 64,
            inter_segment_distance: 8.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("synthetic dim {} < 2", self.dim)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if !(self.inter_segment_distance >= 0.0 && self.inter_segment_distance.is_finite()) {
            return Err(Error::Config(format!(
                "inter_segment_distance {} must be >= 0",
                self.inter_segment_distance
            )));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn keyed_rng(seed: u64, tag: &str, scene_id: &str, index: u64) -> ChaCha8Rng {
    let key = stable_hash(format!("{tag}\u{0}{scene_id}\u{0}{index}").as_bytes());
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(key)))
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Segment center for `(scene_id, segment_index)`; segment indices are 1-based.
pub fn segment_center(scene_id: &str, segment_index: usize, params: &SyntheticSceneParams) -> Vec<f64> {
    let anchor = unit_direction(&mut keyed_rng(params.seed, "anchor", scene_id, 0), params.dim);
    let axis = unit_direction(&mut keyed_rng(params.seed, "axis", "", 0), params.dim);
    let steps = segment_index.saturating_sub(1) as f64;
    anchor
        .iter()
        .zip(&axis)
        .map(|(a, x)| params.inter_segment_distance * (a + steps * x))
        .collect()
}

pub fn synthetic_embed(
    scene_id: &str,
    segment_index: usize,
    image_index: usize,
    params: &SyntheticSceneParams,
) -> Vec<f32> {
    let center = segment_center(scene_id, segment_index, params);
    let mut rng = keyed_rng(params.seed, "noise", scene_id, image_index as u64);
    center
        .into_iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (c + params.noise_sigma * z) as f32
        })
        .collect()
}

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub scenes: usize,
    pub min_images: usize,
    pub max_images: usize,
    /// Relative weights for 0, 1, 2, ... change points per scene.
    pub change_count_weights: [f64; 3],
    pub params: SyntheticSceneParams,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            min_images: 4,
            max_images: 15,
            change_count_weights: [0.4, 0.4, 0.2],
            params: SyntheticSceneParams::default(),
        }
    }
}

/// Embeds images on demand from their recorded `(scene, segment, index)` keys.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    params: SyntheticSceneParams,
    keys: HashMap<String, (String, usize, usize)>,
}

impl SyntheticProvider {
    /// Registers every image of the given (labeled) series.
    pub fn for_series<'a>(
        params: SyntheticSceneParams,
        scenes: impl IntoIterator<Item = &'a StreetViewSeries>,
    ) -> Result<Self> {
        params.validate()?;
        let mut keys = HashMap::new();
        for s in scenes {
            for (k, (img, seg)) in s.images().iter().zip(s.assign_segments()).enumerate() {
                keys.insert(img.image_id.clone(), (s.scene_id().to_owned(), seg, k));
            }
        }
        Ok(Self { params, keys })
    }

    /// Materializes every registered image, ordered by image id.
    pub fn to_store(&self) -> Result<EmbeddingStore> {
        let mut ids: Vec<&String> = self.keys.keys().collect();
        ids.sort();
        let records = ids
            .into_iter()
            .map(|id| {
                let (scene, seg, k) = &self.keys[id];
                EmbeddingRecord {
                    image_id: id.clone(),
                    vector: synthetic_embed(scene, *seg, *k, &self.params),
                }
            })
            .collect();
        Ok(EmbeddingStore::new(self.params.dim, records)?)
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn get(&self, image_id: &str) -> Result<Cow<'_, [f32]>> {
        let (scene, seg, k) = self
            .keys
            .get(image_id)
            .ok_or_else(|| Error::MissingEmbedding(image_id.to_owned()))?;
        Ok(Cow::Owned(synthetic_embed(scene, *seg, *k, &self.params)))
    }
}

/// Generates labeled series with random lengths and change points. Image ids
/// are globally unique (`<scene>-<k>`); capture dates advance roughly yearly.
pub fn generate_corpus(config: &SyntheticCorpusConfig) -> Result<Vec<StreetViewSeries>> {
    config.params.validate()?;
    if config.min_images < 1 || config.max_images < config.min_images {
        return Err(Error::Config(format!(
            "image count range [{}, {}] is empty",
            config.min_images, config.max_images
        )));
    }
    let total: f64 = config.change_count_weights.iter().sum();
    if !(total > 0.0) || config.change_count_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config("change_count_weights must be non-negative with a positive sum".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.params.seed ^ 0x5eed));
    let base = NaiveDate::from_ymd_opt(2007, 1, 1).expect("valid date");
    let mut out = Vec::with_capacity(config.scenes);
    for s in 0..config.scenes {
        let scene_id = format!("syn{s:05}");
        let n = rng.random_range(config.min_images..=config.max_images);
        let target = GeoPoint {
            lat: 47.5 + rng.random::<f64>() * 0.2,
            lon: -122.4 + rng.random::<f64>() * 0.15,
        };
        let mut day = 0i64;
        let images = (0..n)
            .map(|k| {
                day += rng.random_range(200..=500);
                StreetImage {
                    image_id: format!("{scene_id}-{k:02}"),
                    timestamp: base + chrono::Duration::days(day),
                    panoid: format!("pano-{scene_id}-{k:02}"),
                    heading: rng.random_range(0.0..360.0),
                    capture_point: target,
                }
            })
            .collect();
        let mut pick = rng.random::<f64>() * total;
        let mut q = 0;
        for (i, w) in config.change_count_weights.iter().enumerate() {
            if pick < *w {
                q = i;
                break;
            }
            pick -= w;
            q = i;
        }
        let q = q.min(n - 1);
        let mut candidates: Vec<usize> = (2..=n).collect();
        let mut change_points = Vec::with_capacity(q);
        for _ in 0..q {
            let i = rng.random_range(0..candidates.len());
            change_points.push(candidates.swap_remove(i));
        }
        change_points.sort_unstable();
        out.push(StreetViewSeries::new(scene_id, target, images, change_points)?);
    }
    Ok(out)
}
