//! Urban change point detection over street view time series.
//!
//! The crate covers the whole offline pipeline:
//!
//! * [`series`]: scene time series, segment assignment, labeled chronological
//!   pairs and scene-level dataset splits.
//! * [`embedding`] and [`synthetic`]: id-keyed image embeddings, the `SVEM`
//!   binary store and a deterministic synthetic embedder.
//! * [`classifier`]: the linear pair classifier and its training loop.
//! * [`decoder`]: exact per-series change-point decoding from pair
//!   probabilities.
//! * [`geo`] and [`metadata`]: footprint centroids, bearings and panorama
//!   selection for building scene series.
//! * [`analytics`], [`stats`] and [`report`]: census-tract aggregation,
//!   permit filtering, correlation analysis and report files.

pub mod analytics;
pub mod classifier;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod geo;
pub mod geojson;
pub mod io;
pub mod metadata;
pub mod report;
pub mod series;
pub mod stats;
pub mod synthetic;

pub use classifier::{
    build_feature, evaluate, loss_and_grad, train, EvalMetrics, FeatureOrder, LinearHead,
    PairClassifier, PairScorer, TrainConfig,
};
pub use decoder::{
    decode_consecutive, decode_dp, detect_series, score_segmentation, DecodeMode, DecoderConfig,
    Detection, PairProbMatrix, Segmentation,
};
pub use embedding::{read_store, write_store, EmbeddingProvider, EmbeddingRecord, EmbeddingStore};
pub use error::{Error, ErrorKind, Result, StoreError};
pub use geo::GeoPoint;
pub use series::{
    build_pairs, split_dataset, DatasetSplit, PairMode, PairSample, SplitConfig, StreetImage,
    StreetViewSeries,
};
pub use stats::{pearson, CorrelationResult};
