use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use organoid_core::ingestion::{load_manifest, TileManifest};
use organoid_core::pipeline::{
    apply_exclusion_flags, compute_stats, process_tile, PipelineError, RunRecord, TileResult,
    CURATED_CSV, EXCLUSIONS_JSON, MEASUREMENTS_CSV, RUN_JSON,
};
use organoid_core::postprocess::{BBox, ExclusionEntry, ExclusionList};
use organoid_core::reporting::{
    label_color, measurements_csv, read_measurements_csv, MeasurementRow, Ppm, StatsDocument,
    HATCH_LIGHT,
};
use organoid_core::stats::TestOptions;

pub const MAX_PAGE_SIZE: usize = 500;
const DEFAULT_PAGE_SIZE: usize = 50;
const CROP_CONTEXT: u32 = 16;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("bad paging parameters: {0}")]
    BadPageParams(String),
    #[error("failed to persist curation state: {0}")]
    PersistFailure(String),
    #[error("{dir} does not contain a completed run (missing {missing})")]
    MissingRunOutputs { dir: PathBuf, missing: String },
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// One consistent view of the curation state; replaced wholesale on write.
#[derive(Debug, Clone)]
struct Snapshot {
    exclusions: ExclusionList,
    /// Rows with `excluded` reflecting `exclusions`.
    measurements: Vec<MeasurementRow>,
    dirty: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct PageQuery {
    pub group: Option<String>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Properties {
    pub perimeter: f64,
    pub area: u64,
    pub radius: f64,
    pub non_smoothness: Option<f64>,
    pub non_circularity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceView {
    pub global_id: String,
    pub group_label: String,
    pub tile_id: String,
    pub properties: Properties,
    pub excluded: bool,
    pub reason: Option<String>,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub instances: Vec<InstanceView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportPaths {
    pub csv: PathBuf,
    pub exclusions: PathBuf,
}

pub struct CropImage {
    pub ppm: Ppm,
}

/// Percent-encode everything outside the unreserved set (plus `:`).
fn encode_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~:".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn now_utc_seconds() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

pub struct ReviewService {
    out_dir: PathBuf,
    run: RunRecord,
    manifest: TileManifest,
    options: TestOptions,
    ui_dir: Option<PathBuf>,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
    tiles: Mutex<HashMap<String, Arc<TileResult>>>,
}

impl ReviewService {
    /// Load the outputs of a completed run from `out_dir`.
    pub fn open(
        out_dir: &Path,
        options: TestOptions,
        ui_dir: Option<PathBuf>,
    ) -> Result<Self, ServiceError> {
        for name in [MEASUREMENTS_CSV, RUN_JSON] {
            if !out_dir.join(name).is_file() {
                return Err(ServiceError::MissingRunOutputs {
                    dir: out_dir.to_path_buf(),
                    missing: name.into(),
                });
            }
        }
        let run = RunRecord::load(out_dir)?;
        let manifest = load_manifest(&run.manifest).map_err(PipelineError::from)?;
        let rows =
            read_measurements_csv(&out_dir.join(MEASUREMENTS_CSV)).map_err(PipelineError::from)?;
        let exclusions = ExclusionList::load_or_default(&out_dir.join(EXCLUSIONS_JSON))
            .map_err(PipelineError::from)?;
        let mut measurements = apply_exclusion_flags(&rows, &exclusions);
        measurements.sort_by(|a, b| a.global_id.cmp(&b.global_id));
        Ok(ReviewService {
            out_dir: out_dir.to_path_buf(),
            run,
            manifest,
            options,
            ui_dir,
            snapshot: RwLock::new(Arc::new(Snapshot {
                exclusions,
                measurements,
                dirty: false,
            })),
            writer: Mutex::new(()),
            tiles: Mutex::new(HashMap::new()),
        })
    }

    fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn ui_dir(&self) -> Option<&Path> {
        self.ui_dir.as_deref()
    }

    pub fn is_dirty(&self) -> bool {
        self.current().dirty
    }

    pub fn exclusions(&self) -> ExclusionList {
        self.current().exclusions.clone()
    }

    pub fn measurements(&self) -> Vec<MeasurementRow> {
        self.current().measurements.clone()
    }

    pub fn list_instances(&self, q: &PageQuery) -> Result<InstancePage, ServiceError> {
        let page = q.page.unwrap_or(0);
        let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ServiceError::BadPageParams(format!(
                "page_size must be in 1..={MAX_PAGE_SIZE}, got {page_size}"
            )));
        }
        let snap = self.current();
        let matching: Vec<&MeasurementRow> = snap
            .measurements
            .iter()
            .filter(|r| {
                q.group
                    .as_deref()
                    .is_none_or(|g| g.is_empty() || r.group_label == g)
            })
            .collect();
        let instances = matching
            .iter()
            .skip(page.saturating_mul(page_size))
            .take(page_size)
            .map(|r| InstanceView {
                global_id: r.global_id.clone(),
                group_label: r.group_label.clone(),
                tile_id: r.tile_id.clone(),
                properties: Properties {
                    perimeter: r.perimeter_px,
                    area: r.area_px,
                    radius: r.radius_px,
                    non_smoothness: r.non_smoothness,
                    non_circularity: r.non_circularity,
                },
                excluded: r.excluded,
                reason: snap.exclusions.get(&r.global_id).map(|e| e.reason.clone()),
                thumbnail_url: format!("/api/instances/{}/crop", encode_segment(&r.global_id)),
            })
            .collect();
        Ok(InstancePage {
            page,
            page_size,
            total: matching.len(),
            instances,
        })
    }

    fn tile(&self, tile_id: &str) -> Result<Arc<TileResult>, ServiceError> {
        if let Some(t) = self.tiles.lock().expect("tile cache").get(tile_id) {
            return Ok(t.clone());
        }
        let record = self
            .manifest
            .tile(tile_id)
            .ok_or_else(|| ServiceError::UnknownInstance(tile_id.into()))?;
        let result = Arc::new(process_tile(&self.manifest, record, &self.run.postprocess)?);
        self.tiles
            .lock()
            .expect("tile cache")
            .insert(tile_id.to_owned(), result.clone());
        Ok(result)
    }

    /// The instance's tile region (bbox plus 16 px of context, clamped to the
    /// tile) with the instance in its label color and its neighbours in gray.
    pub fn get_crop(&self, global_id: &str) -> Result<CropImage, ServiceError> {
        let snap = self.current();
        let row = snap
            .measurements
            .iter()
            .find(|r| r.global_id == global_id)
            .ok_or_else(|| ServiceError::UnknownInstance(global_id.into()))?;
        let tile = self.tile(&row.tile_id)?;
        let inst = tile
            .instances
            .iter()
            .find(|i| i.global_id == global_id)
            .ok_or_else(|| ServiceError::UnknownInstance(global_id.into()))?;
        let (w, h) = (tile.map.width(), tile.map.height());
        let x0 = inst.bbox.min_x.saturating_sub(CROP_CONTEXT);
        let y0 = inst.bbox.min_y.saturating_sub(CROP_CONTEXT);
        let x1 = (inst.bbox.max_x + CROP_CONTEXT).min(w - 1);
        let y1 = (inst.bbox.max_y + CROP_CONTEXT).min(h - 1);
        let window = BBox {
            min_x: x0,
            min_y: y0,
            max_x: x1,
            max_y: y1,
        };
        let mut ppm = Ppm::blank(x1 - x0 + 1, y1 - y0 + 1, global_id);
        for other in &tile.instances {
            if other.global_id == global_id || !other.bbox.intersects(&window) {
                continue;
            }
            for &(x, y) in &other.pixels {
                if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                    ppm.set(x - x0, y - y0, HATCH_LIGHT);
                }
            }
        }
        let color = label_color(inst.local_label);
        for &(x, y) in &inst.pixels {
            ppm.set(x - x0, y - y0, color);
        }
        Ok(CropImage { ppm })
    }

    /// Record a keep/exclude decision, persisting it before returning.
    pub fn set_exclusion(
        &self,
        global_id: &str,
        excluded: bool,
        reason: &str,
    ) -> Result<ExclusionEntry, ServiceError> {
        let _guard = self.writer.lock().expect("writer lock");
        let snap = self.current();
        if !snap.measurements.iter().any(|r| r.global_id == global_id) {
            return Err(ServiceError::UnknownInstance(global_id.into()));
        }
        if let Some(e) = snap.exclusions.get(global_id) {
            if e.excluded == excluded && e.reason == reason {
                return Ok(e.clone());
            }
        }
        let entry = ExclusionEntry {
            global_id: global_id.to_owned(),
            excluded,
            reason: reason.to_owned(),
            timestamp: now_utc_seconds(),
        };
        let mut exclusions = snap.exclusions.clone();
        exclusions.upsert(entry.clone());
        exclusions
            .save(&self.out_dir.join(EXCLUSIONS_JSON))
            .map_err(|e| ServiceError::PersistFailure(e.to_string()))?;
        let measurements = apply_exclusion_flags(&snap.measurements, &exclusions);
        *self.snapshot.write().expect("snapshot lock") = Arc::new(Snapshot {
            exclusions,
            measurements,
            dirty: true,
        });
        Ok(entry)
    }

    /// Group statistics over the non-excluded instances.
    pub fn get_stats(&self) -> StatsDocument {
        let snap = self.current();
        compute_stats(&snap.measurements, &self.options, false).expect("lenient stats never fail")
    }

    /// Persist the exclusion list if anything changed since the last export.
    pub fn flush(&self) -> Result<(), ServiceError> {
        let _guard = self.writer.lock().expect("writer lock");
        let snap = self.current();
        if snap.dirty || !snap.exclusions.entries().is_empty() {
            snap.exclusions
                .save(&self.out_dir.join(EXCLUSIONS_JSON))
                .map_err(|e| ServiceError::PersistFailure(e.to_string()))?;
        }
        Ok(())
    }

    /// Write the exclusion list and the curated measurements CSV.
    pub fn export(&self) -> Result<ExportPaths, ServiceError> {
        let _guard = self.writer.lock().expect("writer lock");
        let snap = self.current();
        let exclusions = self.out_dir.join(EXCLUSIONS_JSON);
        let csv = self.out_dir.join(CURATED_CSV);
        snap.exclusions
            .save(&exclusions)
            .map_err(|e| ServiceError::PersistFailure(e.to_string()))?;
        organoid_core::fsutil::write_atomic(&csv, &measurements_csv(&snap.measurements))
            .map_err(|e| ServiceError::PersistFailure(e.to_string()))?;
        *self.snapshot.write().expect("snapshot lock") = Arc::new(Snapshot {
            dirty: false,
            ..(*snap).clone()
        });
        Ok(ExportPaths { csv, exclusions })
    }
}
