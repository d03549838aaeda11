//! Per-series change-point decoding from pairwise change probabilities.
//!
//! For a candidate change set `C`, every chronological pair `(a, b)` is
//! either crossing (`∃c ∈ C: a < c <= b`) or not, and the segmentation scores
//!
//! ```text
//! score(C) = Σ_{a<b} [crosses·ln p(a,b) + (1 - crosses)·ln(1 - p(a,b))] - λ·|C|
//! ```
//!
//! Crossing depends only on block membership, so with
//! `w(i, j) = Σ_{i<=a<b<=j} [ln(1 - p) - ln p]` the score equals
//! `Σ ln p + Σ_blocks w - λ·(#blocks - 1)` and is maximized exactly by a
//! dynamic program over block boundaries.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::PairScorer;
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::series::{crosses_change, StreetViewSeries};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Upper-triangular matrix of clamped pair probabilities. Image indices in
/// this API are 0-based; change points stay 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct PairProbMatrix {
    n: usize,
    epsilon: f64,
    probs: Vec<f64>,
}

impl PairProbMatrix {
    /// Builds the matrix from `p(a, b)` for `0 <= a < b < n`, clamping into
    /// `[epsilon, 1 - epsilon]`.
    pub fn from_fn<F>(n: usize, epsilon: f64, mut p: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<f64>,
    {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon {epsilon} outside (0, 0.5)")));
        }
        let mut probs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                let v = p(a, b)?;
                if v.is_nan() {
                    return Err(Error::Validation(format!("NaN probability for pair ({a}, {b})")));
                }
                probs.push(v.clamp(epsilon, 1.0 - epsilon));
            }
        }
        Ok(Self { n, epsilon, probs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn offset(&self, a: usize) -> usize {
        // rows 0..a hold (n-1) + (n-2) + ... + (n-a) entries
        a * (2 * self.n - a - 1) / 2
    }

    /// Probability for the 0-based pair `a < b`.
    pub fn get(&self, a: usize, b: usize) -> f64 {
        debug_assert!(a < b && b < self.n);
        self.probs[self.offset(a) + (b - a - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub change_points: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Dp,
    Consecutive,
}

impl DecodeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Dp => "dp",
            DecodeMode::Consecutive => "consecutive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Subtracted from the score once per change point.
    pub change_penalty: f64,
    pub epsilon: f64,
    pub mode: DecodeMode,
    pub consecutive_threshold: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            change_penalty: 0.0,
            epsilon: DEFAULT_EPSILON,
            mode: DecodeMode::Dp,
            consecutive_threshold: 0.5,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.change_penalty >= 0.0 && self.change_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "change_penalty {} must be a finite value >= 0",
                self.change_penalty
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.consecutive_threshold) {
            return Err(Error::Config(format!(
                "consecutive_threshold {} outside [0, 1)",
                self.consecutive_threshold
            )));
        }
        Ok(())
    }
}

pub fn score_segmentation(p: &PairProbMatrix, change_points: &[usize], penalty: f64) -> Result<f64> {
    let n = p.n();
    for (k, &c) in change_points.iter().enumerate() {
        if c < 2 || c > n {
            return Err(Error::Validation(format!("change point {c} outside [2, {n}]")));
        }
        if k > 0 && change_points[k - 1] >= c {
            return Err(Error::Validation("change points not strictly increasing".into()));
        }
    }
    let mut score = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let prob = p.get(a, b);
            score += if crosses_change(change_points, a + 1, b + 1) {
                prob.ln()
            } else {
                (1.0 - prob).ln()
            };
        }
    }
    Ok(score - penalty * change_points.len() as f64)
}

/// Block weights `w(i, j)` for 1-based `1 <= i <= j <= n`, stored row-major
/// in an `(n + 1) × (n + 1)` table.
pub fn block_weights(p: &PairProbMatrix) -> Vec<Vec<f64>> {
    let n = p.n();
    let mut w = vec![vec![0.0; n + 1]; n + 1];
    for j in 2..=n {
        // column sum over a in [i, j-1] of the log-odds against crossing
        let mut col = 0.0;
        for i in (1..j).rev() {
            let prob = p.get(i - 1, j - 1);
            col += (1.0 - prob).ln() - prob.ln();
            w[i][j] = w[i][j - 1] + col;
        }
    }
    w
}

/// Sum of `ln p` over all pairs: the score of the all-crossing segmentation
/// before penalties.
pub fn all_crossing_constant(p: &PairProbMatrix) -> f64 {
    p.probs.iter().map(|v| v.ln()).sum()
}

#[derive(Clone)]
struct Best {
    score: f64,
    change_points: Vec<usize>,
}

/// Scores closer than this (relative) are ties: the DP and a direct sum
/// accumulate the same terms in different orders.
const TIE_TOLERANCE: f64 = 1e-10;

/// Higher score wins; ties go to fewer change points, then to the
/// lexicographically smaller change set.
fn better(cand: &Best, incumbent: &Best) -> bool {
    let scale = cand.score.abs().max(incumbent.score.abs()).max(1.0);
    if (cand.score - incumbent.score).abs() > TIE_TOLERANCE * scale {
        return cand.score > incumbent.score;
    }
    match cand.change_points.len().cmp(&incumbent.change_points.len()) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => cand.change_points < incumbent.change_points,
    }
}

/// Exact maximum-likelihood segmentation in O(n²).
pub fn decode_dp(p: &PairProbMatrix, config: &DecoderConfig) -> Segmentation {
    let n = p.n();
    if n < 2 {
        return Segmentation {
            change_points: Vec::new(),
            score: 0.0,
        };
    }
    let w = block_weights(p);
    let lambda = config.change_penalty;
    let mut best: Vec<Best> = Vec::with_capacity(n + 1);
    best.push(Best {
        score: 0.0,
        change_points: Vec::new(),
    });
    for j in 1..=n {
        let mut incumbent: Option<Best> = None;
        for i in 1..=j {
            let prev = &best[i - 1];
            let mut cps = prev.change_points.clone();
            let mut score = prev.score + w[i][j];
            if i > 1 {
                cps.push(i);
                score -= lambda;
            }
            let cand = Best {
                score,
                change_points: cps,
            };
            if incumbent.as_ref().is_none_or(|inc| better(&cand, inc)) {
                incumbent = Some(cand);
            }
        }
        best.push(incumbent.expect("at least one block start"));
    }
    let change_points = best.pop().expect("n >= 1").change_points;
    let score = score_segmentation(p, &change_points, lambda).expect("decoded set is valid");
    Segmentation {
        change_points,
        score,
    }
}

/// Baseline: a change at `j` whenever `p(j-1, j) >= threshold`.
pub fn decode_consecutive(p: &PairProbMatrix, threshold: f64, penalty: f64) -> Segmentation {
    let change_points: Vec<usize> = (2..=p.n())
        .filter(|&j| p.get(j - 2, j - 1) >= threshold)
        .collect();
    let score = score_segmentation(p, &change_points, penalty).expect("indices in range");
    Segmentation {
        change_points,
        score,
    }
}

pub fn decode(p: &PairProbMatrix, config: &DecoderConfig) -> Segmentation {
    match config.mode {
        DecodeMode::Dp => decode_dp(p, config),
        DecodeMode::Consecutive => {
            decode_consecutive(p, config.consecutive_threshold, config.change_penalty)
        }
    }
}

/// One line of the detections output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: String,
    pub n: usize,
    pub change_points: Vec<usize>,
    pub change_timestamps: Vec<chrono::NaiveDate>,
    pub score: f64,
    pub mode: DecodeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

pub const FLAG_INSUFFICIENT_HISTORY: &str = "insufficient history";

/// Scores every chronological pair of the series and decodes change points.
pub fn detect_series(
    scorer: &dyn PairScorer,
    provider: &dyn EmbeddingProvider,
    series: &StreetViewSeries,
    config: &DecoderConfig,
) -> Result<Detection> {
    let n = series.len();
    let mut detection = Detection {
        scene_id: series.scene_id().to_owned(),
        n,
        change_points: Vec::new(),
        change_timestamps: Vec::new(),
        score: 0.0,
        mode: config.mode,
        flag: None,
    };
    if n < 2 {
        detection.flag = Some(FLAG_INSUFFICIENT_HISTORY.to_owned());
        return Ok(detection);
    }
    let embeddings = series
        .images()
        .iter()
        .map(|img| provider.get(&img.image_id))
        .collect::<Result<Vec<_>>>()?;
    let p = PairProbMatrix::from_fn(n, config.epsilon, |a, b| {
        scorer.score_pair(&embeddings[b], &embeddings[a])
    })?;
    let seg = decode(&p, config);
    detection.change_timestamps = seg
        .change_points
        .iter()
        .map(|&c| series.images()[c - 1].timestamp)
        .collect();
    detection.change_points = seg.change_points;
    detection.score = seg.score;
    Ok(detection)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    write_atomic(path, |w| {
        for d in detections {
            let line = serde_json::to_string(d).map_err(|e| Error::parse(d.scene_id.clone(), e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(crate::io::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(n: usize, f: impl Fn(usize, usize) -> f64) -> PairProbMatrix {
        PairProbMatrix::from_fn(n, DEFAULT_EPSILON, |a, b| Ok(f(a, b))).unwrap()
    }

    #[test]
    fn packed_indexing() {
        let p = matrix(5, |a, b| (10 * a + b) as f64 / 100.0);
        for a in 0..5 {
            for b in a + 1..5 {
                assert_eq!(p.get(a, b), (10 * a + b) as f64 / 100.0);
            }
        }
    }

    #[test]
    fn score_examples() {
        let p = matrix(4, |a, b| 0.1 + 0.05 * (a + b) as f64);
        let expected: f64 = (0..4)
            .flat_map(|a| (a + 1..4).map(move |b| (a, b)))
            .map(|(a, b)| (1.0 - p.get(a, b)).ln())
            .sum();
        assert!((score_segmentation(&p, &[], 0.0).unwrap() - expected).abs() < 1e-12);

        let two = matrix(2, |_, _| 0.9);
        assert!((score_segmentation(&two, &[2], 0.0).unwrap() - 0.9f64.ln()).abs() < 1e-15);
        assert!((score_segmentation(&two, &[2], 0.5).unwrap() - (0.9f64.ln() - 0.5)).abs() < 1e-15);

        assert!(score_segmentation(&two, &[1], 0.0).is_err());
        assert!(score_segmentation(&two, &[3], 0.0).is_err());
    }

    #[test]
    fn dp_three_image_example() {
        let p = matrix(3, |a, b| match (a, b) {
            (0, 1) | (0, 2) => 0.9,
            _ => 0.1,
        });
        assert_eq!(decode_dp(&p, &DecoderConfig::default()).change_points, vec![2]);
    }

    #[test]
    fn dp_extremes() {
        let low = matrix(6, |_, _| 0.01);
        assert!(decode_dp(&low, &DecoderConfig::default()).change_points.is_empty());
        let high = matrix(4, |_, _| 0.99);
        assert_eq!(decode_dp(&high, &DecoderConfig::default()).change_points, vec![2, 3, 4]);
    }

    #[test]
    fn dp_ties_prefer_fewer_changes() {
        // p = 0.5 everywhere: every segmentation scores the same
        let p = matrix(5, |_, _| 0.5);
        assert!(decode_dp(&p, &DecoderConfig::default()).change_points.is_empty());
    }

    #[test]
    fn consecutive_baseline() {
        let p = matrix(3, |a, b| match (a, b) {
            (0, 1) => 0.7,
            (1, 2) => 0.2,
            _ => 0.5,
        });
        assert_eq!(decode_consecutive(&p, 0.5, 0.0).change_points, vec![2]);
        let low = matrix(5, |_, _| 0.3);
        assert!(decode_consecutive(&low, 0.5, 0.0).change_points.is_empty());
        assert_eq!(decode_consecutive(&low, 0.0, 0.0).change_points, vec![2, 3, 4, 5]);
    }

    #[test]
    fn clamping_applies_on_construction() {
        let p = matrix(3, |_, _| 1.0);
        assert_eq!(p.get(0, 1), 1.0 - DEFAULT_EPSILON);
        assert!(score_segmentation(&p, &[], 0.0).unwrap().is_finite());
        assert!(PairProbMatrix::from_fn(2, 1e-6, |_, _| Ok(f64::NAN)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        let bad = DecoderConfig { change_penalty: -1.0, ..DecoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DecoderConfig { consecutive_threshold: 1.0, ..DecoderConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn detections_round_trip() {
        let d = Detection {
            scene_id: "s1".into(),
            n: 3,
            change_points: vec![2],
            change_timestamps: vec![chrono::NaiveDate::from_ymd_opt(2012, 5, 1).unwrap()],
            score: -0.25,
            mode: DecodeMode::Dp,
            flag: None,
        };
        let line = serde_json::to_string(&d).unwrap();
        assert_eq!(
            line,
            r#"{"scene_id":"s1","n":3,"change_points":[2],"change_timestamps":["2012-05-01"],"score":-0.25,"mode":"dp"}"#
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_detections(&path, std::slice::from_ref(&d)).unwrap();
        assert_eq!(read_detections(&path).unwrap(), vec![d]);
    }
}
