//! Linear pair classifier over frozen image embeddings.
//!
//! A pair `(earlier, later)` is represented by `[h_later; h_earlier;
//! h_later - h_earlier]` and scored by `sigmoid(w·x + b)`. Training minimizes
//! mean binary cross-entropy with Adam, global-norm gradient clipping and
//! uniform averaging of the last epoch-end snapshots.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::io::sha256_bytes;
use crate::series::PairSample;

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` inside the loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Block order of the pair feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrder {
    /// `[later; earlier; later - earlier]`
    #[default]
    LaterEarlier,
    /// `[earlier; later; earlier - later]`
    EarlierLater,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFeature(Vec<f64>);

impl PairFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `[h_later; h_earlier; h_later - h_earlier]`.
pub fn build_feature(h_later: &[f32], h_earlier: &[f32]) -> Result<PairFeature> {
    if h_later.len() != h_earlier.len() {
        return Err(Error::DimensionMismatch {
            expected: h_later.len(),
            actual: h_earlier.len(),
        });
    }
    let d = h_later.len();
    let mut x = Vec::with_capacity(3 * d);
    x.extend(h_later.iter().map(|&v| f64::from(v)));
    x.extend(h_earlier.iter().map(|&v| f64::from(v)));
    x.extend(
        h_later
            .iter()
            .zip(h_earlier)
            .map(|(&l, &e)| f64::from(l) - f64::from(e)),
    );
    Ok(PairFeature(x))
}

impl FeatureOrder {
    pub fn build(self, h_later: &[f32], h_earlier: &[f32]) -> Result<PairFeature> {
        match self {
            FeatureOrder::LaterEarlier => build_feature(h_later, h_earlier),
            FeatureOrder::EarlierLater => build_feature(h_earlier, h_later),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    pub fn zeros(feature_len: usize) -> Self {
        Self {
            weights: vec![0.0; feature_len],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                actual: x.len(),
            });
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    pub fn predict(&self, feature: &PairFeature) -> Result<f64> {
        self.logit(feature.as_slice()).map(sigmoid)
    }

    fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        (self.weights.iter().map(|g| g * g).sum::<f64>() + self.bias * self.bias).sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_to_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            self.weights.iter_mut().for_each(|g| *g *= scale);
            self.bias *= scale;
        }
        norm
    }
}

/// Mean binary cross-entropy over the batch and its gradient.
///
/// Panics on an empty batch or mismatched feature lengths; callers validate
/// dimensions when features are built.
/// ln σ(z) without overflow.
fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn loss_and_grad(head: &LinearHead, batch: &[(&[f64], u8)]) -> (f64, Gradient) {
    assert!(!batch.is_empty(), "loss over an empty batch");
    let mut grad = Gradient {
        weights: vec![0.0; head.weights.len()],
        bias: 0.0,
    };
    let mut loss = 0.0;
    for &(x, y) in batch {
        let z = head.logit(x).expect("feature length matches head");
        let p = sigmoid(z);
        let y = f64::from(y);
        let floor = LOG_CLAMP.ln();
        loss -= y * log_sigmoid(z).max(floor) + (1.0 - y) * log_sigmoid(-z).max(floor);
        let r = p - y;
        for (g, v) in grad.weights.iter_mut().zip(x) {
            *g += r * v;
        }
        grad.bias += r;
    }
    let m = batch.len() as f64;
    grad.weights.iter_mut().for_each(|g| *g /= m);
    grad.bias /= m;
    (loss / m, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    /// Fraction of final epochs whose end-of-epoch weights are averaged.
    pub weight_average_tail: f64,
    pub seed: u64,
    pub class_threshold: f64,
    pub feature_order: FeatureOrder,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 50,
            grad_clip_norm: 0.5,
            weight_average_tail: 0.25,
            seed: 0,
            class_threshold: 0.5,
            feature_order: FeatureOrder::LaterEarlier,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning hyperparameters (learning rate 1e-5); the linear probe
    /// converges much more slowly with these.
    pub fn fine_tune_parity() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm {} must be > 0", self.grad_clip_norm));
        }
        if !(0.0..=1.0).contains(&self.weight_average_tail) {
            return bad(format!(
                "weight_average_tail {} outside [0, 1]",
                self.weight_average_tail
            ));
        }
        if !(self.class_threshold > 0.0 && self.class_threshold < 1.0) {
            return bad(format!("class_threshold {} outside (0, 1)", self.class_threshold));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be > 0".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Number of final epochs averaged into the returned head.
    pub fn averaged_epochs(&self) -> usize {
        if self.epochs == 0 || self.weight_average_tail == 0.0 {
            return 0;
        }
        ((self.weight_average_tail * self.epochs as f64).ceil() as usize).clamp(1, self.epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: LinearHead,
    pub log: Vec<TrainLogEntry>,
}

/// A labeled pair feature matrix.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub features: Vec<PairFeature>,
    pub labels: Vec<u8>,
}

impl FeatureSet {
    /// Builds features for every pair. Each image is looked up once.
    pub fn from_pairs(
        pairs: &[PairSample],
        provider: &dyn EmbeddingProvider,
        order: FeatureOrder,
    ) -> Result<Self> {
        let mut cache: HashMap<&str, Vec<f32>> = HashMap::new();
        let mut features = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for p in pairs {
            for id in [p.earlier_id.as_str(), p.later_id.as_str()] {
                if !cache.contains_key(id) {
                    let v = provider.get(id)?.into_owned();
                    cache.insert(id, v);
                }
            }
            features.push(order.build(&cache[p.later_id.as_str()], &cache[p.earlier_id.as_str()])?);
            labels.push(p.label);
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Parameters are the weights followed by the bias.
    fn update(&mut self, head: &mut LinearHead, grad: &Gradient, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let n = head.weights.len();
        for i in 0..=n {
            let g = if i < n { grad.weights[i] } else { grad.bias };
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let delta = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
            if i < n {
                head.weights[i] -= delta;
            } else {
                head.bias -= delta;
            }
        }
    }
}

/// Trains from pair samples, resolving embeddings through `provider`.
pub fn train(
    pairs: &[PairSample],
    provider: &dyn EmbeddingProvider,
    config: &TrainConfig,
    validation: Option<&[PairSample]>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let train = FeatureSet::from_pairs(pairs, provider, config.feature_order)?;
    let val = validation
        .filter(|v| !v.is_empty())
        .map(|v| FeatureSet::from_pairs(v, provider, config.feature_order))
        .transpose()?;
    train_on_features(&train, config, val.as_ref())
}

pub fn train_on_features(
    data: &FeatureSet,
    config: &TrainConfig,
    validation: Option<&FeatureSet>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let positives = data.labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == data.len() {
        log::warn!(
            "training data contains a single class ({} positive of {})",
            positives,
            data.len()
        );
    }
    let feature_len = data.features[0].len();
    if let Some(bad) = data.features.iter().find(|f| f.len() != feature_len) {
        return Err(Error::DimensionMismatch {
            expected: feature_len,
            actual: bad.len(),
        });
    }

    let mut head = LinearHead::zeros(feature_len);
    let mut adam = Adam::new(feature_len + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let averaged = config.averaged_epochs();
    let mut sum = LinearHead::zeros(feature_len);
    let mut log = Vec::with_capacity(config.epochs);
    let mut batch: Vec<(&[f64], u8)> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| (data.features[i].as_slice(), data.labels[i])));
            let (loss, mut grad) = loss_and_grad(&head, &batch);
            epoch_loss += loss * chunk.len() as f64;
            grad.clip_to_norm(config.grad_clip_norm);
            adam.update(&mut head, &grad, config);
        }
        if !head.is_finite() {
            return Err(Error::Validation(format!(
                "training diverged at epoch {}",
                epoch + 1
            )));
        }
        if epoch + averaged >= config.epochs {
            sum.weights.iter_mut().zip(&head.weights).for_each(|(s, w)| *s += w);
            sum.bias += head.bias;
        }
        let val_accuracy = validation
            .map(|v| accuracy_on(&head, v, config.class_threshold))
            .transpose()?;
        log.push(TrainLogEntry {
            epoch: epoch + 1,
            loss: epoch_loss / data.len() as f64,
            val_accuracy,
        });
    }

    if averaged > 0 {
        let k = averaged as f64;
        sum.weights.iter_mut().for_each(|w| *w /= k);
        sum.bias /= k;
        head = sum;
    }
    Ok(TrainOutcome { head, log })
}

fn accuracy_on(head: &LinearHead, data: &FeatureSet, threshold: f64) -> Result<f64> {
    let mut correct = 0usize;
    for (f, &y) in data.features.iter().zip(&data.labels) {
        let pred = head.predict(f)? >= threshold;
        correct += usize::from(pred == (y == 1));
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Confusion counts and derived scores; the positive class is "change".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Set when precision, recall or F1 had a zero denominator and was
    /// reported as 0.
    pub degenerate: bool,
}

impl EvalMetrics {
    pub fn from_predictions(predicted: &[bool], labels: &[u8]) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::EmptyDataset("no pairs to evaluate".into()));
        }
        if predicted.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let mut degenerate = false;
        let mut ratio = |num: usize, den: usize| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate = true;
            0.0
        };
        Ok(Self {
            accuracy: (tp + tn) as f64 / predicted.len() as f64,
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            degenerate,
        })
    }
}

/// Classifies every pair at `threshold` and scores the result.
pub fn evaluate(
    classifier: &PairClassifier,
    pairs: &[PairSample],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no pairs to evaluate".into()));
    }
    let data = FeatureSet::from_pairs(pairs, provider, classifier.feature_order)?;
    let predicted = data
        .features
        .iter()
        .map(|f| classifier.head.predict(f).map(|p| p >= threshold))
        .collect::<Result<Vec<_>>>()?;
    EvalMetrics::from_predictions(&predicted, &data.labels)
}

/// Anything that turns a chronological embedding pair into a change
/// probability.
pub trait PairScorer: Sync {
    fn score_pair(&self, h_later: &[f32], h_earlier: &[f32]) -> Result<f64>;
}

/// A trained head together with how its features are laid out.
#[derive(Debug, Clone, PartialEq)]
pub struct PairClassifier {
    pub head: LinearHead,
    pub feature_order: FeatureOrder,
    pub threshold: f64,
}

impl PairScorer for PairClassifier {
    fn score_pair(&self, h_later: &[f32], h_earlier: &[f32]) -> Result<f64> {
        self.head
            .predict(&self.feature_order.build(h_later, h_earlier)?)
    }
}

/// On-disk JSON form of a trained classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    /// Embedding dimension `d`; `weights` has length `3 * d`.
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub trained_at: Option<String>,
    pub config_digest: String,
    #[serde(default)]
    pub feature_order: FeatureOrder,
}

impl HeadFile {
    pub fn new(classifier: &PairClassifier, config_digest: String, trained_at: Option<String>) -> Self {
        Self {
            dim: classifier.head.weights.len() / 3,
            weights: classifier.head.weights.clone(),
            bias: classifier.head.bias,
            threshold: classifier.threshold,
            trained_at,
            config_digest,
            feature_order: classifier.feature_order,
        }
    }

    pub fn into_classifier(self) -> Result<PairClassifier> {
        if self.weights.len() != 3 * self.dim {
            return Err(Error::Validation(format!(
                "head has {} weights, expected 3 * {}",
                self.weights.len(),
                self.dim
            )));
        }
        let head = LinearHead {
            weights: self.weights,
            bias: self.bias,
        };
        if !head.is_finite() {
            return Err(Error::Validation("head contains non-finite values".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Validation(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(PairClassifier {
            head,
            feature_order: self.feature_order,
            threshold: self.threshold,
        })
    }
}

pub fn write_train_log(path: &std::path::Path, log: &[TrainLogEntry]) -> Result<()> {
    crate::io::write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["epoch", "loss", "val_accuracy"])
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        for e in log {
            csv.write_record([
                e.epoch.to_string(),
                format!("{:.10}", e.loss),
                e.val_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
            ])
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn feature_blocks() {
        let f = build_feature(&[1.0, 2.0], &[0.0, 2.0]).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 2.0, 0.0, 2.0, 1.0, 0.0]);

        let same = build_feature(&[0.3, -1.5, 2.0], &[0.3, -1.5, 2.0]).unwrap();
        assert!(same.as_slice()[6..].iter().all(|&v| v == 0.0));

        let a = [1.5f32, -0.25];
        let b = [0.5f32, 3.0];
        let ab = build_feature(&a, &b).unwrap();
        let ba = build_feature(&b, &a).unwrap();
        assert_eq!(&ab.as_slice()[..2], &ba.as_slice()[2..4]);
        assert_eq!(&ab.as_slice()[2..4], &ba.as_slice()[..2]);
        for k in 0..2 {
            assert_eq!(ab.as_slice()[4 + k], -ba.as_slice()[4 + k]);
        }
        assert!(build_feature(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(
            FeatureOrder::EarlierLater.build(&a, &b).unwrap(),
            build_feature(&b, &a).unwrap()
        );
    }

    #[test]
    fn prediction_link() {
        let f = build_feature(&[1.0, -3.0], &[2.0, 0.5]).unwrap();
        assert_eq!(LinearHead::zeros(6).predict(&f).unwrap(), 0.5);

        let mut head = LinearHead::zeros(6);
        let mut last = 0.0;
        for b in [-5.0, -1.0, 0.0, 1.0, 5.0, 20.0] {
            head.bias = b;
            let p = head.predict(&f).unwrap();
            assert!(p > last);
            last = p;
        }
        assert!(last > 1.0 - 1e-8);

        head.bias = 3.0f64.ln();
        assert!((head.predict(&f).unwrap() - 0.75).abs() < 1e-15);
        assert!(LinearHead::zeros(4).predict(&f).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(sigmoid(-40.0) > 0.0);
    }

    #[test]
    fn loss_closed_forms() {
        let x = [0.0, 0.0];
        let head = LinearHead::zeros(2);
        let (loss, grad) = loss_and_grad(&head, &[(&x, 1)]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.bias, -0.5);

        let confident = LinearHead { weights: vec![0.0; 2], bias: 50.0 };
        let (loss, grad) = loss_and_grad(&confident, &[(&x, 1)]);
        assert!(loss < 1e-12);
        assert!(grad.bias.abs() < 1e-12);

        // a confidently wrong prediction hits the clamp, not infinity
        let (loss, _) = loss_and_grad(&confident, &[(&x, 0)]);
        assert!((loss + LOG_CLAMP.ln()).abs() < 1e-6);
    }

    fn finite_difference_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(3..12);
        let head = LinearHead {
            weights: (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
            bias: rng.random_range(-0.5..0.5),
        };
        let xs: Vec<Vec<f64>> = (0..rng.random_range(1..9))
            .map(|_| (0..len).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let ys: Vec<u8> = xs.iter().map(|_| rng.random_range(0..=1)).collect();
        let batch: Vec<(&[f64], u8)> = xs.iter().map(|x| x.as_slice()).zip(ys).collect();
        let (_, grad) = loss_and_grad(&head, &batch);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..=len {
            let mut plus = head.clone();
            let mut minus = head.clone();
            if i < len {
                plus.weights[i] += h;
                minus.weights[i] -= h;
            } else {
                plus.bias += h;
                minus.bias -= h;
            }
            let fd = (loss_and_grad(&plus, &batch).0 - loss_and_grad(&minus, &batch).0) / (2.0 * h);
            let analytic = if i < len { grad.weights[i] } else { grad.bias };
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..100 {
            let rel = finite_difference_check(seed);
            assert!(rel <= 1e-4, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction() {
        let mut g = Gradient { weights: vec![3.0, 4.0], bias: 12.0 };
        let before = g.clip_to_norm(0.5);
        assert_eq!(before, 13.0);
        assert!(g.norm() <= 0.5 + 1e-9);
        assert!((g.weights[0] / g.bias - 0.25).abs() < 1e-12);
        let mut small = Gradient { weights: vec![0.1], bias: 0.0 };
        small.clip_to_norm(0.5);
        assert_eq!(small.weights, vec![0.1]);
    }

    #[test]
    fn metric_examples() {
        let m = EvalMetrics::from_predictions(&[true, true, false, false], &[1, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(!m.degenerate);

        let perfect = EvalMetrics::from_predictions(&[true, false, true], &[1, 0, 1]).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));

        let none = EvalMetrics::from_predictions(&[false, false], &[1, 0]).unwrap();
        assert_eq!((none.precision, none.recall), (0.0, 0.0));
        assert!(none.degenerate);

        assert!(EvalMetrics::from_predictions(&[], &[]).is_err());
    }

    fn separable(n: usize, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = FeatureSet::default();
        for _ in 0..n {
            let y: u8 = rng.random_range(0..=1);
            let later: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut earlier = later.clone();
            earlier[0] -= if y == 1 { 3.0 } else { 0.0 };
            set.features.push(build_feature(&later, &earlier).unwrap());
            set.labels.push(y);
        }
        set
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train_on_features(&separable(20, 1), &cfg, None).unwrap();
        assert_eq!(out.head, LinearHead::zeros(12));
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = separable(400, 2);
        let cfg = TrainConfig { epochs: 20, seed: 9, ..TrainConfig::default() };
        let a = train_on_features(&data, &cfg, Some(&data)).unwrap();
        let b = train_on_features(&data, &cfg, Some(&data)).unwrap();
        assert_eq!(
            a.head.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
            b.head.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.head.bias.to_bits(), b.head.bias.to_bits());
        assert!(accuracy_on(&a.head, &data, 0.5).unwrap() >= 0.99);
        assert_eq!(a.log.len(), 20);
        assert!(a.log.last().unwrap().loss < a.log[0].loss);
    }

    #[test]
    fn averaging_counts() {
        let cfg = |epochs, tail| TrainConfig { epochs, weight_average_tail: tail, ..TrainConfig::default() };
        assert_eq!(cfg(50, 0.25).averaged_epochs(), 13);
        assert_eq!(cfg(4, 0.25).averaged_epochs(), 1);
        assert_eq!(cfg(10, 0.0).averaged_epochs(), 0);
        assert_eq!(cfg(10, 1.0).averaged_epochs(), 10);
        assert_eq!(cfg(0, 0.5).averaged_epochs(), 0);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { weight_average_tail: 1.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { class_threshold: 1.0, ..ok.clone() }.validate().is_err());
        assert_eq!(TrainConfig::fine_tune_parity().learning_rate, 1e-5);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let empty = FeatureSet::default();
        assert!(matches!(
            train_on_features(&empty, &TrainConfig::default(), None),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn head_file_round_trip() {
        let classifier = PairClassifier {
            head: LinearHead { weights: vec![0.5; 6], bias: -1.0 },
            feature_order: FeatureOrder::EarlierLater,
            threshold: 0.4,
        };
        let file = HeadFile::new(&classifier, "abc".into(), None);
        assert_eq!(file.dim, 2);
        let json = serde_json::to_string(&file).unwrap();
        let back: HeadFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_classifier().unwrap(), classifier);

        let mut broken = file.clone();
        broken.weights.pop();
        assert!(broken.into_classifier().is_err());
    }

    proptest! {
        #[test]
        fn raising_threshold_never_increases_recall(
            probs in proptest::collection::vec(0.0f64..1.0, 1..60),
            labels_seed in any::<u64>(),
            t1 in 0.01f64..0.99,
            dt in 0.0f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(labels_seed);
            let labels: Vec<u8> = probs.iter().map(|_| rng.random_range(0..=1)).collect();
            let t2 = (t1 + dt).min(0.999);
            let at = |t: f64| {
                let preds: Vec<bool> = probs.iter().map(|&p| p >= t).collect();
                EvalMetrics::from_predictions(&preds, &labels).unwrap().recall
            };
            prop_assert!(at(t2) <= at(t1));
        }

        #[test]
        fn inverse_scaling_preserves_predictions(
            x in proptest::collection::vec(-5.0f64..5.0, 6),
            w in proptest::collection::vec(-2.0f64..2.0, 6),
            bias in -2.0f64..2.0,
            scale in 0.01f64..100.0,
        ) {
            let head = LinearHead { weights: w.clone(), bias };
            let scaled_head = LinearHead { weights: w.iter().map(|v| v / scale).collect(), bias };
            let scaled_x: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let p = sigmoid(head.logit(&x).unwrap());
            let q = sigmoid(scaled_head.logit(&scaled_x).unwrap());
            prop_assert!((p - q).abs() < 1e-12);
        }

        #[test]
        fn loss_is_non_negative(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            w in proptest::collection::vec(-3.0f64..3.0, 4),
            y in 0u8..=1,
        ) {
            let head = LinearHead { weights: w, bias: 0.0 };
            let (loss, _) = loss_and_grad(&head, &[(&x, y)]);
            prop_assert!(loss >= 0.0);
        }
    }
}
