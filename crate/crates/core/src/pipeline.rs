//! End-to-end orchestration behind the `run`, `stats` and `eval` commands.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{IngestError, ReportError, StatsError};
use crate::evaluation::{evaluate, Evaluation};
use crate::ingestion::{load_manifest, read_label_map, LabelMap, TileManifest, TileRecord};
use crate::morphometrics::measure;
use crate::postprocess::{
    apply_exclusions, run_postprocess, ExclusionList, InstanceMask, InstanceSet, PostprocessConfig,
    ProvenanceLog,
};
use crate::reporting::{
    measurements_csv, partition_by_ids, read_measurements_csv, render_overlay,
    write_evaluation_json, MeasurementRow, StatsDocument,
};
use crate::stats::{
    compare_all_pairs, compare_available_pairs, summarize, GroupSample, Property, Summary,
    TestOptions,
};

pub const MEASUREMENTS_CSV: &str = "measurements.csv";
pub const CURATED_CSV: &str = "measurements_curated.csv";
pub const PROVENANCE_JSON: &str = "provenance.json";
pub const EXCLUSIONS_JSON: &str = "exclusions.json";
pub const RUN_JSON: &str = "run.json";
pub const STATS_JSON: &str = "stats.json";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const OVERLAY_DIR: &str = "overlays";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("prediction and ground-truth manifests cover different tiles: {0}")]
    TileMismatch(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub background_fraction: f64,
    pub border_margin: u32,
    pub min_area: u64,
    pub alpha: f64,
    pub welch: bool,
    pub bonferroni: bool,
    /// Worker threads for per-tile processing; `None` uses all cores.
    pub jobs: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub port: u16,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            background_fraction: 0.5,
            border_margin: 1,
            min_area: 0,
            alpha: 0.05,
            welch: false,
            bonferroni: false,
            jobs: None,
            output_dir: None,
            port: 8765,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(self.background_fraction > 0.0 && self.background_fraction <= 1.0) {
            return bad(format!(
                "background_fraction {} not in (0, 1]",
                self.background_fraction
            ));
        }
        if self.border_margin < 1 {
            return bad("border_margin must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} not in (0, 1)", self.alpha));
        }
        if self.jobs == Some(0) {
            return bad("jobs must be >= 1".into());
        }
        Ok(())
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            background_fraction: self.background_fraction,
            border_margin: self.border_margin,
            min_area: self.min_area,
        }
    }

    pub fn test_options(&self) -> TestOptions {
        TestOptions {
            alpha: self.alpha,
            welch: self.welch,
            bonferroni: self.bonferroni,
            ..TestOptions::default()
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            b = b.num_threads(j);
        }
        b.build()
            .map_err(|e| PipelineError::InvalidConfig(format!("thread pool: {e}")))
    }
}

/// What `run` leaves behind so later commands can find the inputs again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest: PathBuf,
    pub postprocess: PostprocessConfig,
}

impl RunRecord {
    pub fn load(out_dir: &Path) -> Result<Self, PipelineError> {
        let path = out_dir.join(RUN_JSON);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Report(ReportError::Json(e)))
    }
}

/// Post-processed instances of one tile.
pub struct TileResult {
    pub tile: TileRecord,
    pub map: LabelMap,
    pub instances: Vec<InstanceMask>,
    pub log: ProvenanceLog,
}

pub fn process_tile(
    manifest: &TileManifest,
    tile: &TileRecord,
    config: &PostprocessConfig,
) -> Result<TileResult, PipelineError> {
    let map = read_label_map(
        &manifest.label_map_location(tile),
        manifest.tile_width,
        manifest.tile_height,
    )?;
    let mut log = ProvenanceLog::default();
    let instances = run_postprocess(&map, tile, config, &mut log);
    Ok(TileResult {
        tile: tile.clone(),
        map,
        instances,
        log,
    })
}

/// Process every tile on `pool`, returning results in manifest order.
fn process_all(
    manifest: &TileManifest,
    config: &PostprocessConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<TileResult>, PipelineError> {
    pool.install(|| {
        manifest
            .tiles
            .par_iter()
            .map(|t| process_tile(manifest, t, config))
            .collect()
    })
}

pub fn overlay_file_name(tile_id: &str) -> String {
    let safe: String = tile_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.ppm")
}

#[derive(Debug)]
pub struct RunSummary {
    pub tiles: usize,
    pub instances: usize,
    pub excluded: usize,
    pub unknown_exclusions: Vec<String>,
    pub rows: Vec<MeasurementRow>,
    pub provenance: ProvenanceLog,
}

/// Measurement rows for the instances of one processed slide.
fn measure_slide(
    manifest: &TileManifest,
    results: &[TileResult],
    exclusions: &ExclusionList,
    pool: &rayon::ThreadPool,
) -> Vec<MeasurementRow> {
    pool.install(|| {
        results
            .par_iter()
            .flat_map_iter(|r| {
                r.instances.iter().map(move |inst| {
                    let rec = measure(inst, &r.tile);
                    MeasurementRow::from_record(
                        &rec,
                        manifest,
                        &r.tile,
                        exclusions.is_excluded(&inst.global_id),
                    )
                })
            })
            .collect()
    })
}

/// Post-process and measure every tile of `manifest_path`, writing
/// measurements, provenance, overlays and the run record into `out_dir`.
/// Outputs are staged and moved into place only after every tile succeeded.
pub fn run(
    manifest_path: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let manifest = load_manifest(manifest_path)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let exclusions = ExclusionList::load_or_default(&out_dir.join(EXCLUSIONS_JSON))?;
    let pool = config.pool()?;
    let pp = config.postprocess();

    let results = process_all(&manifest, &pp, &pool)?;
    let rows = measure_slide(&manifest, &results, &exclusions, &pool);

    let mut provenance = ProvenanceLog::default();
    let mut instances = Vec::new();
    for r in &results {
        provenance.extend(r.log.clone());
        instances.extend(r.instances.iter().cloned());
    }
    let set = InstanceSet {
        manifest: manifest.clone(),
        instances,
        provenance_log: provenance,
    };
    let unknown: Vec<String> = crate::postprocess::unknown_exclusions(&set, &exclusions)
        .into_iter()
        .map(str::to_owned)
        .collect();
    let total = set.instances.len();
    let curated = apply_exclusions(set, &exclusions);
    let excluded = total - curated.instances.len();

    let staging = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(out_dir)
        .map_err(io_err(out_dir))?;
    let stage = staging.path();
    let write = |name: &str, bytes: &[u8]| -> Result<(), PipelineError> {
        let p = stage.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    };
    write(MEASUREMENTS_CSV, &measurements_csv(&rows))?;
    write(
        PROVENANCE_JSON,
        (serde_json::to_string_pretty(&curated.provenance_log).expect("log serializes") + "\n")
            .as_bytes(),
    )?;
    let record = RunRecord {
        manifest: fs::canonicalize(manifest_path).map_err(io_err(manifest_path))?,
        postprocess: pp,
    };
    write(
        RUN_JSON,
        (serde_json::to_string_pretty(&record).expect("record serializes") + "\n").as_bytes(),
    )?;
    let overlay_stage = stage.join(OVERLAY_DIR);
    fs::create_dir(&overlay_stage).map_err(io_err(&overlay_stage))?;
    let excluded_ids: HashSet<&str> = exclusions
        .entries()
        .iter()
        .filter(|e| e.excluded)
        .map(|e| e.global_id.as_str())
        .collect();
    pool.install(|| {
        results.par_iter().try_for_each(|r| {
            let (keep, drop) = partition_by_ids(&r.instances, &excluded_ids);
            let img = render_overlay(&r.map, &r.tile.tile_id, &keep, &drop);
            let p = overlay_stage.join(overlay_file_name(&r.tile.tile_id));
            fs::write(&p, img.to_bytes()).map_err(io_err(&p))
        })
    })?;

    let final_overlays = out_dir.join(OVERLAY_DIR);
    if final_overlays.exists() {
        fs::remove_dir_all(&final_overlays).map_err(io_err(&final_overlays))?;
    }
    for name in [MEASUREMENTS_CSV, PROVENANCE_JSON, RUN_JSON, OVERLAY_DIR] {
        let dest = out_dir.join(name);
        fs::rename(stage.join(name), &dest).map_err(io_err(&dest))?;
    }

    Ok(RunSummary {
        tiles: manifest.tiles.len(),
        instances: total,
        excluded,
        unknown_exclusions: unknown,
        rows,
        provenance: curated.provenance_log,
    })
}

/// Curated measurements: `rows` with `excluded` taken from `exclusions`.
pub fn apply_exclusion_flags(
    rows: &[MeasurementRow],
    exclusions: &ExclusionList,
) -> Vec<MeasurementRow> {
    rows.iter()
        .map(|r| MeasurementRow {
            excluded: exclusions.is_excluded(&r.global_id),
            ..r.clone()
        })
        .collect()
}

/// Group the non-excluded rows into one sample per (group, property).
/// Unavailable non-smoothness values are left out of their sample.
pub fn group_samples(rows: &[MeasurementRow]) -> Vec<GroupSample> {
    let mut by_group: BTreeMap<&str, Vec<&MeasurementRow>> = BTreeMap::new();
    for r in rows {
        let entry = by_group.entry(r.group_label.as_str()).or_default();
        if !r.excluded {
            entry.push(r);
        }
    }
    let mut out = Vec::new();
    for (group, members) in by_group {
        for p in Property::ALL {
            let values = members.iter().filter_map(|r| r.property(p)).collect();
            out.push(GroupSample::new(group, p, values));
        }
    }
    out
}

/// Summaries and pairwise tests over `rows`.
///
/// Strict mode fails on any empty or too-small sample. Lenient mode reports
/// empty groups with `n = 0` and skips tests that cannot be computed.
pub fn compute_stats(
    rows: &[MeasurementRow],
    options: &TestOptions,
    strict: bool,
) -> Result<StatsDocument, StatsError> {
    let samples = group_samples(rows);
    if strict && samples.iter().all(|s| s.values.is_empty()) {
        return Err(StatsError::EmptySample {
            group: "<all>".into(),
            property: "<all>".into(),
        });
    }
    let mut summaries: Vec<Summary> = Vec::with_capacity(samples.len());
    for s in &samples {
        match summarize(s) {
            Ok(sum) => summaries.push(sum),
            Err(e) if strict => return Err(e),
            Err(_) => summaries.push(Summary::empty(&s.group_label, s.property)),
        }
    }
    let tests = if strict {
        compare_all_pairs(&samples, options)?
    } else {
        compare_available_pairs(&samples, options)
    };
    Ok(StatsDocument::new(options.alpha, &summaries, &tests))
}

/// Read measurement CSVs and compute the stats document.
pub fn stats_from_csvs(
    paths: &[PathBuf],
    config: &PipelineConfig,
) -> Result<StatsDocument, PipelineError> {
    config.validate()?;
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_measurements_csv(p)?);
    }
    Ok(compute_stats(&rows, &config.test_options(), true)?)
}

/// Score the post-processed instances of `pred` against those of `gt`.
pub fn evaluate_manifests(
    pred_path: &Path,
    gt_path: &Path,
    config: &PipelineConfig,
) -> Result<Evaluation, PipelineError> {
    config.validate()?;
    let pred = load_manifest(pred_path)?;
    let gt = load_manifest(gt_path)?;
    let ids = |m: &TileManifest| {
        m.tiles
            .iter()
            .map(|t| t.tile_id.clone())
            .collect::<BTreeSet<_>>()
    };
    let (pi, gi) = (ids(&pred), ids(&gt));
    if pi != gi {
        let only: Vec<_> = pi.symmetric_difference(&gi).cloned().collect();
        return Err(PipelineError::TileMismatch(only.join(", ")));
    }
    if (pred.tile_width, pred.tile_height) != (gt.tile_width, gt.tile_height) {
        return Err(PipelineError::TileMismatch("tile dimensions differ".into()));
    }
    let pool = config.pool()?;
    let pp = config.postprocess();
    let collect = |m: &TileManifest| -> Result<Vec<InstanceMask>, PipelineError> {
        Ok(process_all(m, &pp, &pool)?
            .into_iter()
            .flat_map(|r| r.instances)
            .collect())
    };
    Ok(evaluate(&collect(&pred)?, &collect(&gt)?))
}

pub fn write_evaluation(eval: &Evaluation, out_dir: &Path) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join(EVALUATION_JSON);
    write_evaluation_json(eval, &path)?;
    Ok(path)
}
