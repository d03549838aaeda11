//! Pipeline configuration: a TOML file, command-line overrides on top, and
//! path resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svchange::analytics::{AcsYears, DEFAULT_HIGHVALUE_THRESHOLD_USD, DEFAULT_PERMIT_CATEGORIES};
use svchange::io::sha256_bytes;
use svchange::metadata::DEFAULT_SEARCH_RADIUS_M;
use svchange::synthetic::SyntheticCorpusConfig;
use svchange::{DecoderConfig, Error, PairMode, Result, SplitConfig, TrainConfig};

/// Input and output locations. Unset intermediate paths default to files
/// inside the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub footprints: Option<PathBuf>,
    pub metadata_fixture: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    pub permits: Option<PathBuf>,
    pub acs: Option<PathBuf>,
    pub tract_stats: Option<PathBuf>,
    pub correlations: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsConfig {
    pub mode: PairMode,
    pub seed: u64,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self {
            mode: PairMode::All,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// L2-normalize vectors after loading.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetadataConfig {
    pub radius_m: f64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for MetadataConfig {
    fn default() -> Self {
        Self {
            radius_m: DEFAULT_SEARCH_RADIUS_M,
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermitConfig {
    pub categories: Vec<String>,
    pub highvalue_threshold: f64,
}

impl Default for PermitConfig {
    fn default() -> Self {
        Self {
            categories: DEFAULT_PERMIT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            highvalue_threshold: DEFAULT_HIGHVALUE_THRESHOLD_USD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub synthetic: SyntheticCorpusConfig,
    pub pairs: PairsConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub decoder: DecoderConfig,
    pub embeddings: EmbeddingConfig,
    pub metadata: MetadataConfig,
    pub permits: PermitConfig,
    pub acs: AcsYears,
}

/// A dotted-key override such as `train.learning_rate=0.01`.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: impl Into<String>, value: impl Into<toml::Value>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
        }
    }

    /// Parses `key=value`. The value is read as a TOML literal when possible
    /// and as a bare string otherwise.
    pub fn parse(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("override `{s}` has an empty key")));
        }
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        Ok(Self::new(key, value))
    }
}

fn apply_override(table: &mut toml::Table, ov: &Override) -> Result<()> {
    let mut parts: Vec<&str> = ov.key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{}`: `{part}` is not a table", ov.key)))?;
    }
    cur.insert(leaf.to_owned(), ov.value.clone());
    Ok(())
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads the config file (if any), applies overrides in order and resolves
/// relative paths: file paths against the file's directory, override paths
/// against the working directory.
pub fn load_config(path: Option<&Path>, overrides: &[Override]) -> Result<PipelineConfig> {
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    let (mut table, file_base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::parse(p.display().to_string(), e.message()))?;
            let dir = absolutize(&cwd, p)
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| cwd.clone());
            (table, dir)
        }
        None => (toml::Table::new(), cwd.clone()),
    };

    resolve_path_table(&mut table, &file_base);
    let mut resolved = Vec::with_capacity(overrides.len());
    for ov in overrides {
        let mut ov = ov.clone();
        if let (Some(_), toml::Value::String(s)) = (ov.key.strip_prefix("paths."), &ov.value) {
            ov.value = toml::Value::String(absolutize(&cwd, Path::new(s)).display().to_string());
        }
        resolved.push(ov);
    }
    for ov in &resolved {
        apply_override(&mut table, ov)?;
    }

    let source = path.map_or("<overrides>".to_owned(), |p| p.display().to_string());
    let config: PipelineConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            Error::Config(format!("{source}: key `{key}`: {}", e.into_inner()))
        })?;
    config.validate()?;
    Ok(config)
}

fn resolve_path_table(table: &mut toml::Table, base: &Path) {
    if let Some(toml::Value::Table(paths)) = table.get_mut("paths") {
        for (_, v) in paths.iter_mut() {
            if let Some(s) = v.as_str() {
                *v = toml::Value::String(absolutize(base, Path::new(s)).display().to_string());
            }
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decoder.validate()?;
        self.synthetic.params.validate()?;
        if !(self.metadata.radius_m > 0.0 && self.metadata.radius_m.is_finite()) {
            return Err(Error::Config(format!(
                "metadata.radius_m {} must be positive",
                self.metadata.radius_m
            )));
        }
        if self.metadata.max_attempts == 0 {
            return Err(Error::Config("metadata.max_attempts must be at least 1".into()));
        }
        if !(self.permits.highvalue_threshold >= 0.0) {
            return Err(Error::Config("permits.highvalue_threshold must be >= 0".into()));
        }
        if self.acs.start >= self.acs.end {
            return Err(Error::Config(format!(
                "acs.start {} must precede acs.end {}",
                self.acs.start, self.acs.end
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn digest(&self) -> String {
        sha256_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn or_out(&self, p: &Option<PathBuf>, file: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out_dir().join(file))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.or_out(&self.paths.manifest, "manifest.jsonl")
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.or_out(&self.paths.embeddings, "embeddings.svem")
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.or_out(&self.paths.pairs, "pairs.csv")
    }

    pub fn split_path(&self) -> PathBuf {
        self.or_out(&self.paths.split, "split.json")
    }

    pub fn head_path(&self) -> PathBuf {
        self.or_out(&self.paths.head, "head.json")
    }

    pub fn detections_path(&self) -> PathBuf {
        self.or_out(&self.paths.detections, "detections.jsonl")
    }

    pub fn tract_stats_path(&self) -> PathBuf {
        self.or_out(&self.paths.tract_stats, "tract_stats.csv")
    }

    pub fn correlations_path(&self) -> PathBuf {
        self.or_out(&self.paths.correlations, "correlations.json")
    }

    /// A path that has no default and must be configured.
    pub fn require_path<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("missing required path `paths.{key}`")))
    }
}
