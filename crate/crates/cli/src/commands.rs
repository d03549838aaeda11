//! One function per pipeline stage. Each reads its inputs from files,
//! writes its outputs atomically and records what it did.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rayon::prelude::*;
use svchange::analytics::{
    aggregate_change, correlate_tracts, filter_permits, join_tract_stats, read_acs, read_permits,
    read_tract_stats, read_tracts, write_tract_stats, AcsTable, PermitFilter, TractIndex,
};
use svchange::classifier::{write_train_log, HeadFile};
use svchange::decoder::{read_detections, write_detections};
use svchange::embedding::read_store_verified;
use svchange::error::ClientError;
use svchange::geo::polygon_centroid;
use svchange::io::{read_json, write_json_pretty};
use svchange::metadata::{
    build_scene_series, read_footprints, FixtureClient, HttpMetadataClient, MetadataClient,
    SceneOutcome,
};
use svchange::report::emit_report;
use svchange::series::{read_manifest, read_pairs, write_manifest, write_pairs, SplitRole};
use svchange::synthetic::{generate_corpus, SyntheticProvider};
use svchange::{
    build_pairs, detect_series, evaluate, split_dataset, train, write_store, DatasetSplit,
    EmbeddingStore, Error, GeoPoint, PairClassifier, PairSample, Result, StreetViewSeries,
};

use crate::config::PipelineConfig;
use crate::run_report::Recorder;

/// Shared state handed to every command.
pub struct Context<'a> {
    pub config: &'a PipelineConfig,
    pub jobs: usize,
    pub rec: Recorder,
}

impl Context<'_> {
    fn out(&self, file: &str) -> std::path::PathBuf {
        self.config.out_dir().join(file)
    }

    fn manifest(&mut self) -> Result<Vec<StreetViewSeries>> {
        let path = self.config.manifest_path();
        self.rec.input(&path)?;
        read_manifest(&path)
    }

    fn embeddings(&mut self) -> Result<EmbeddingStore> {
        let path = self.config.embeddings_path();
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "embedding store not found"),
            ));
        }
        self.rec.input(&path)?;
        let store = read_store_verified(&path)?;
        if self.config.embeddings.normalize {
            store.normalized()
        } else {
            Ok(store)
        }
    }

    fn split(&mut self) -> Result<DatasetSplit> {
        let path = self.config.split_path();
        self.rec.input(&path)?;
        read_json(&path)
    }

    fn pairs(&mut self) -> Result<Vec<PairSample>> {
        let path = self.config.pairs_path();
        self.rec.input(&path)?;
        read_pairs(&path)
    }

    fn classifier(&mut self) -> Result<PairClassifier> {
        let path = self.config.head_path();
        self.rec.input(&path)?;
        read_json::<HeadFile>(&path)?.into_classifier()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }
}

fn pairs_in(pairs: &[PairSample], split: &DatasetSplit, role: SplitRole) -> Vec<PairSample> {
    let ids = split.ids(role);
    pairs.iter().filter(|p| ids.contains(&p.scene_id)).cloned().collect()
}

pub fn synth(ctx: &mut Context) -> Result<()> {
    let cfg = &ctx.config.synthetic;
    let scenes = generate_corpus(cfg)?;
    let store = SyntheticProvider::for_series(cfg.params, &scenes)?.to_store()?;
    let manifest = ctx.config.manifest_path();
    let embeddings = ctx.config.embeddings_path();
    write_manifest(&manifest, &scenes)?;
    write_store(&store, &embeddings)?;
    ctx.rec.output(&manifest);
    ctx.rec.output(&embeddings);
    ctx.rec.rows("scenes", scenes.len());
    ctx.rec.rows("images", store.len());
    Ok(())
}

/// Footprint centroids as scene points.
pub fn sample(ctx: &mut Context) -> Result<()> {
    let footprints = ctx.config.require_path("footprints", &ctx.config.paths.footprints)?.to_path_buf();
    ctx.rec.input(&footprints)?;
    let buildings = read_footprints(&footprints)?;
    let out = ctx.out("scenes.csv");
    let mut rows = Vec::with_capacity(buildings.len());
    for b in &buildings {
        let c = polygon_centroid(b)?;
        if c.degenerate {
            ctx.rec.warn(format!("building {}: degenerate footprint, vertex mean used", b.building_id));
        }
        rows.push((b.building_id.clone(), c.point, c.degenerate));
    }
    svchange::io::write_atomic(&out, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["building_id", "lat", "lon", "degenerate"])
            .map_err(|e| Error::parse(out.display().to_string(), e))?;
        for (id, p, degenerate) in &rows {
            csv.write_record([id.clone(), p.lat.to_string(), p.lon.to_string(), degenerate.to_string()])
                .map_err(|e| Error::parse(out.display().to_string(), e))?;
        }
        csv.flush().map_err(|e| Error::io(&out, e))
    })?;
    ctx.rec.output(&out);
    ctx.rec.rows("scenes", rows.len());
    Ok(())
}

fn query_with_retry(
    client: &dyn MetadataClient,
    building: &svchange::geo::FootprintPolygon,
    radius_m: f64,
    attempts: u32,
    backoff: Duration,
) -> Result<SceneOutcome> {
    let mut attempt = 1;
    loop {
        match build_scene_series(building, client, radius_m) {
            Err(Error::Client(e)) if e.retryable && attempt < attempts => {
                log::info!(
                    "building {}: {} (attempt {attempt}/{attempts}), retrying",
                    building.building_id,
                    e.message
                );
                std::thread::sleep(backoff * 2u32.pow(attempt - 1));
                attempt += 1;
            }
            Err(Error::Client(e)) => {
                return Err(Error::Client(ClientError {
                    message: format!("building {}: {}", building.building_id, e.message),
                    retryable: e.retryable,
                }))
            }
            other => return other,
        }
    }
}

/// Builds unlabeled scene series from footprints and panorama metadata.
pub fn fetch_metadata(ctx: &mut Context) -> Result<()> {
    let footprints = ctx.config.require_path("footprints", &ctx.config.paths.footprints)?.to_path_buf();
    ctx.rec.input(&footprints)?;
    let buildings = read_footprints(&footprints)?;
    let client: Box<dyn MetadataClient> = match &ctx.config.paths.metadata_fixture {
        Some(p) => {
            ctx.rec.input(p)?;
            Box::new(FixtureClient::from_path(p)?)
        }
        None => Box::new(HttpMetadataClient::from_env()?),
    };
    let m = &ctx.config.metadata;
    let backoff = Duration::from_millis(m.backoff_ms);
    let outcomes: Vec<Result<SceneOutcome>> = ctx.pool()?.install(|| {
        buildings
            .par_iter()
            .map(|b| query_with_retry(client.as_ref(), b, m.radius_m, m.max_attempts, backoff))
            .collect()
    });
    let mut scenes = Vec::new();
    let mut empty = 0;
    for outcome in outcomes {
        match outcome? {
            SceneOutcome::Series(s) => scenes.push(s),
            SceneOutcome::Empty { building_id, .. } => {
                empty += 1;
                ctx.rec.warn(format!("building {building_id}: no panoramas within {} m", m.radius_m));
            }
        }
    }
    scenes.sort_by(|a, b| a.scene_id().cmp(b.scene_id()));
    let out = ctx.config.manifest_path();
    write_manifest(&out, &scenes)?;
    ctx.rec.output(&out);
    ctx.rec.rows("buildings", buildings.len());
    ctx.rec.rows("scenes", scenes.len());
    ctx.rec.rows("empty", empty);
    ctx.rec.rows("images", scenes.iter().map(|s| s.len()).sum());
    Ok(())
}

pub fn pairs(ctx: &mut Context) -> Result<()> {
    let scenes = ctx.manifest()?;
    for s in scenes.iter().filter(|s| s.len() < 2) {
        ctx.rec.warn(format!("scene {}: fewer than 2 images, no pairs", s.scene_id()));
    }
    let cfg = ctx.config.pairs;
    let pairs = build_pairs(&scenes, cfg.mode, cfg.seed);
    let out = ctx.config.pairs_path();
    write_pairs(&out, &pairs)?;
    ctx.rec.output(&out);
    ctx.rec.rows("pairs", pairs.len());
    ctx.rec.rows("positive", pairs.iter().filter(|p| p.label == 1).count());
    Ok(())
}

pub fn split(ctx: &mut Context) -> Result<()> {
    let scenes = ctx.manifest()?;
    let split = split_dataset(&scenes, &ctx.config.split)?;
    let out = ctx.config.split_path();
    write_json_pretty(&out, &split)?;
    ctx.rec.output(&out);
    ctx.rec.rows("train", split.train_scene_ids.len());
    ctx.rec.rows("val", split.val_scene_ids.len());
    ctx.rec.rows("test", split.test_scene_ids.len());
    Ok(())
}

/// Training timestamp from `SOURCE_DATE_EPOCH`, so repeated runs can stay
/// byte-identical.
fn trained_at() -> Option<String> {
    let secs: i64 = std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()?;
    chrono::DateTime::from_timestamp(secs, 0).map(|t| t.to_rfc3339())
}

pub fn train_cmd(ctx: &mut Context) -> Result<()> {
    let pairs = ctx.pairs()?;
    let split = ctx.split()?;
    let store = ctx.embeddings()?;
    let train_pairs = pairs_in(&pairs, &split, SplitRole::Train);
    let val_pairs = pairs_in(&pairs, &split, SplitRole::Val);
    if val_pairs.is_empty() {
        ctx.rec.warn("validation split has no pairs; validation accuracy not logged");
    }
    let cfg = &ctx.config.train;
    let outcome = train(
        &train_pairs,
        &store,
        cfg,
        (!val_pairs.is_empty()).then_some(val_pairs.as_slice()),
    )?;
    let classifier = PairClassifier {
        head: outcome.head,
        feature_order: cfg.feature_order,
        threshold: cfg.class_threshold,
    };
    let head_path = ctx.config.head_path();
    write_json_pretty(&head_path, &HeadFile::new(&classifier, cfg.digest(), trained_at()))?;
    let log_path = ctx.out("train_log.csv");
    write_train_log(&log_path, &outcome.log)?;
    ctx.rec.output(&head_path);
    ctx.rec.output(&log_path);
    ctx.rec.rows("train_pairs", train_pairs.len());
    ctx.rec.rows("val_pairs", val_pairs.len());
    ctx.rec.rows("epochs", outcome.log.len());
    Ok(())
}

pub fn evaluate_cmd(ctx: &mut Context, role: SplitRole) -> Result<()> {
    let pairs = ctx.pairs()?;
    let split = ctx.split()?;
    let store = ctx.embeddings()?;
    let clf = ctx.classifier()?;
    let selected = pairs_in(&pairs, &split, role);
    let metrics = evaluate(&clf, &selected, &store, clf.threshold)?;
    if metrics.degenerate {
        ctx.rec.warn("precision, recall or F1 undefined; reported as 0");
    }
    let out = ctx.out("metrics.json");
    let body = serde_json::json!({
        "split": role_name(role),
        "threshold": clf.threshold,
        "pairs": selected.len(),
        "metrics": metrics,
    });
    write_json_pretty(&out, &body)?;
    ctx.rec.output(&out);
    ctx.rec.rows("pairs", selected.len());
    Ok(())
}

pub fn role_name(role: SplitRole) -> &'static str {
    match role {
        SplitRole::Train => "train",
        SplitRole::Val => "val",
        SplitRole::Test => "test",
    }
}

/// Decodes change points for every series (or one split) in parallel.
pub fn detect(ctx: &mut Context, role: Option<SplitRole>) -> Result<()> {
    let mut scenes = ctx.manifest()?;
    if let Some(role) = role {
        let split = ctx.split()?;
        let ids = split.ids(role);
        scenes.retain(|s| ids.contains(s.scene_id()));
    }
    let store = ctx.embeddings()?;
    let clf = ctx.classifier()?;
    let cfg = ctx.config.decoder;
    let done = AtomicUsize::new(0);
    let total = scenes.len();
    let results: Vec<(String, Result<_>)> = ctx.pool()?.install(|| {
        scenes
            .par_iter()
            .map(|s| {
                let r = detect_series(&clf, &store, s, &cfg);
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                if k.is_multiple_of(1000) {
                    log::info!("detect: {k}/{total} series");
                }
                (s.scene_id().to_owned(), r)
            })
            .collect()
    });
    let mut detections = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for (scene_id, r) in results {
        match r {
            Ok(d) => detections.push(d),
            Err(Error::MissingEmbedding(id)) => {
                skipped += 1;
                ctx.rec.warn(format!("scene {scene_id}: missing embedding for image {id}, skipped"));
            }
            Err(e) => return Err(e),
        }
    }
    detections.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let out = ctx.config.detections_path();
    write_detections(&out, &detections)?;
    ctx.rec.output(&out);
    ctx.rec.rows("series", detections.len());
    ctx.rec.rows("skipped", skipped);
    ctx.rec.rows("with_change", detections.iter().filter(|d| !d.change_points.is_empty()).count());
    ctx.rec.rows("change_points", detections.iter().map(|d| d.change_points.len()).sum());
    ctx.rec.rows("insufficient_history", detections.iter().filter(|d| d.flag.is_some()).count());
    Ok(())
}

pub fn aggregate(ctx: &mut Context) -> Result<()> {
    let scenes = ctx.manifest()?;
    let det_path = ctx.config.detections_path();
    ctx.rec.input(&det_path)?;
    let detections = read_detections(&det_path)?;
    let tracts_path = ctx.config.require_path("tracts", &ctx.config.paths.tracts)?.to_path_buf();
    ctx.rec.input(&tracts_path)?;
    let index = TractIndex::new(read_tracts(&tracts_path)?)?;
    let points: HashMap<String, GeoPoint> = scenes
        .iter()
        .map(|s| (s.scene_id().to_owned(), s.target_point()))
        .collect();
    let agg = aggregate_change(&detections, &points, &index)?;
    if agg.unassigned > 0 {
        ctx.rec.warn(format!("{} series fall outside every tract", agg.unassigned));
    }

    let permits = match ctx.config.paths.permits.clone() {
        Some(p) => {
            ctx.rec.input(&p)?;
            let load = read_permits(&p)?;
            if load.skipped > 0 {
                ctx.rec.warn(format!("{} permit rows could not be parsed", load.skipped));
            }
            ctx.rec.rows("permits_read", load.records.len());
            ctx.rec.rows("permits_skipped", load.skipped);
            let p = &ctx.config.permits;
            filter_permits(&load.records, &p.categories, p.highvalue_threshold)
        }
        None => {
            ctx.rec.warn("no permits file configured; permit counts are 0");
            PermitFilter::default()
        }
    };
    let acs = match ctx.config.paths.acs.clone() {
        Some(p) => {
            ctx.rec.input(&p)?;
            read_acs(&p)?
        }
        None => {
            ctx.rec.warn("no ACS file configured; demographic changes are empty");
            AcsTable::default()
        }
    };
    let stats = join_tract_stats(agg.stats, &permits, &index, &acs, ctx.config.acs);
    let out = ctx.config.tract_stats_path();
    write_tract_stats(&out, &stats)?;
    ctx.rec.output(&out);
    ctx.rec.rows("tracts", stats.len());
    ctx.rec.rows("series", agg.total);
    ctx.rec.rows("unassigned", agg.unassigned);
    ctx.rec.rows("permits_kept", permits.all_kept.len());
    ctx.rec.rows("permits_highvalue", permits.highvalue.len());
    Ok(())
}

pub fn correlate(ctx: &mut Context) -> Result<()> {
    let path = ctx.config.tract_stats_path();
    ctx.rec.input(&path)?;
    let stats = read_tract_stats(&path)?;
    let correlations = correlate_tracts(&stats);
    let out = ctx.config.correlations_path();
    write_json_pretty(&out, &correlations)?;
    ctx.rec.output(&out);
    ctx.rec.rows("tracts", stats.len());
    ctx.rec.rows("correlations", correlations.len());
    Ok(())
}

pub fn report(ctx: &mut Context) -> Result<()> {
    let stats_path = ctx.config.tract_stats_path();
    ctx.rec.input(&stats_path)?;
    let stats = read_tract_stats(&stats_path)?;
    let corr_path = ctx.config.correlations_path();
    ctx.rec.input(&corr_path)?;
    let correlations: Vec<svchange::analytics::CorrelationEntry> = read_json(&corr_path)?;
    let tracts = match ctx.config.paths.tracts.clone() {
        Some(p) => {
            ctx.rec.input(&p)?;
            read_tracts(&p)?
        }
        None => {
            ctx.rec.warn("no tracts file configured; choropleth geometries are null");
            Vec::new()
        }
    };
    let dir = ctx.out("report");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let files = emit_report(&stats, &correlations, &tracts, &dir)?;
    let mut per_pair: BTreeMap<String, usize> = BTreeMap::new();
    for c in &correlations {
        per_pair.insert(format!("scatter_{}_{}", c.proxy, c.variable), c.n);
    }
    for (k, n) in per_pair {
        ctx.rec.rows(&k, n);
    }
    for f in &files {
        ctx.rec.output(f);
    }
    ctx.rec.rows("tracts", stats.len());
    Ok(())
}
