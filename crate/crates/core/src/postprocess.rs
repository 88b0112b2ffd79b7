//! Clean-up of raw segmenter label maps into one mask per organoid.
//!
//! Stages run in a fixed order: component extraction, background rejection,
//! tile-border exclusion, hole filling, containment merge, optional minimum
//! area and finally the human curation decisions. Every instance that leaves
//! the set is accounted for in a [`ProvenanceLog`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::IngestError;
use crate::fsutil::write_atomic;
use crate::ingestion::{LabelMap, TileManifest, TileRecord, BACKGROUND};

/// Inclusive tile-local bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.max_x - self.min_x + 1
    }

    pub fn height(&self) -> u32 {
        self.max_y - self.min_y + 1
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.min_x <= other.min_x
            && self.min_y <= other.min_y
            && self.max_x >= other.max_x
            && self.max_y >= other.max_y
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }
}

/// One detected object on one tile.
///
/// `pixels` holds tile-local `(x, y)` coordinates sorted in raster order
/// (by `y`, then `x`) without duplicates; `bbox` is tight around them.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub global_id: String,
    pub tile_id: String,
    pub local_label: u16,
    pub bbox: BBox,
    pub pixels: Vec<(u32, u32)>,
}

impl InstanceMask {
    /// Build an instance from an arbitrary non-empty pixel list.
    pub fn from_pixels(
        global_id: impl Into<String>,
        tile_id: impl Into<String>,
        local_label: u16,
        mut pixels: Vec<(u32, u32)>,
    ) -> Self {
        assert!(!pixels.is_empty(), "instance needs at least one pixel");
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        pixels.dedup();
        let bbox = bbox_of(&pixels);
        InstanceMask {
            global_id: global_id.into(),
            tile_id: tile_id.into(),
            local_label,
            bbox,
            pixels,
        }
    }

    pub fn area(&self) -> u64 {
        self.pixels.len() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.pixels
            .binary_search_by_key(&(y, x), |&(px, py)| (py, px))
            .is_ok()
    }

    /// Membership bitmap over the bbox grown by `pad` pixels on each side.
    pub fn raster(&self, pad: u32) -> BoxRaster {
        BoxRaster::new(self, pad)
    }
}

fn bbox_of(pixels: &[(u32, u32)]) -> BBox {
    let mut b = BBox {
        min_x: u32::MAX,
        min_y: u32::MAX,
        max_x: 0,
        max_y: 0,
    };
    for &(x, y) in pixels {
        b.min_x = b.min_x.min(x);
        b.min_y = b.min_y.min(y);
        b.max_x = b.max_x.max(x);
        b.max_y = b.max_y.max(y);
    }
    b
}

/// Dense membership grid for one instance, addressed in signed coordinates
/// so callers can probe one pixel past the bbox.
#[derive(Debug, Clone)]
pub struct BoxRaster {
    pub origin_x: i64,
    pub origin_y: i64,
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl BoxRaster {
    fn new(inst: &InstanceMask, pad: u32) -> Self {
        let origin_x = inst.bbox.min_x as i64 - pad as i64;
        let origin_y = inst.bbox.min_y as i64 - pad as i64;
        let width = (inst.bbox.width() + 2 * pad) as usize;
        let height = (inst.bbox.height() + 2 * pad) as usize;
        let mut bits = vec![false; width * height];
        for &(x, y) in &inst.pixels {
            let cx = (x as i64 - origin_x) as usize;
            let cy = (y as i64 - origin_y) as usize;
            bits[cy * width + cx] = true;
        }
        BoxRaster {
            origin_x,
            origin_y,
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> bool {
        let cx = x - self.origin_x;
        let cy = y - self.origin_y;
        if cx < 0 || cy < 0 || cx >= self.width as i64 || cy >= self.height as i64 {
            return false;
        }
        self.bits[cy as usize * self.width + cx as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub global_id: String,
    pub action: String,
}

/// Record of every instance dropped or merged away.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProvenanceLog(pub Vec<ProvenanceEntry>);

impl ProvenanceLog {
    pub fn record(&mut self, global_id: &str, action: impl Into<String>) {
        self.0.push(ProvenanceEntry {
            global_id: global_id.to_owned(),
            action: action.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[ProvenanceEntry] {
        &self.0
    }

    pub fn extend(&mut self, other: ProvenanceLog) {
        self.0.extend(other.0);
    }
}

/// The post-processed instances of a whole slide.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    pub manifest: TileManifest,
    pub instances: Vec<InstanceMask>,
    pub provenance_log: ProvenanceLog,
}

const NEIGHBORS_8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];
const NEIGHBORS_4: [(i64, i64); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

/// Split a label map into 8-connected instances.
///
/// An id whose pixels form several components yields one instance per
/// component, suffixed `.1`, `.2`, ... in raster order of first pixel.
pub fn extract_instances(map: &LabelMap, tile: &TileRecord) -> Vec<InstanceMask> {
    let w = map.width() as usize;
    let h = map.height() as usize;
    let labels = map.labels();
    let mut visited = vec![false; w * h];
    let mut components: BTreeMap<u16, Vec<Vec<(u32, u32)>>> = BTreeMap::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        let label = labels[start];
        if label == BACKGROUND || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (x, y) = ((idx % w) as i64, (idx / w) as i64);
            pixels.push((x as u32, y as u32));
            for (dx, dy) in NEIGHBORS_8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if !visited[n] && labels[n] == label {
                    visited[n] = true;
                    queue.push_back(n);
                }
            }
        }
        components.entry(label).or_default().push(pixels);
    }

    let mut out = Vec::new();
    for (label, comps) in components {
        let split = comps.len() > 1;
        for (k, pixels) in comps.into_iter().enumerate() {
            let global_id = if split {
                format!("{}:{}.{}", tile.tile_id, label, k + 1)
            } else {
                format!("{}:{}", tile.tile_id, label)
            };
            out.push(InstanceMask::from_pixels(
                global_id,
                tile.tile_id.clone(),
                label,
                pixels,
            ));
        }
    }
    out
}

/// Drop instances whose area reaches `background_fraction` of the tile.
pub fn remove_background(
    instances: Vec<InstanceMask>,
    tile_width: u32,
    tile_height: u32,
    background_fraction: f64,
    log: &mut ProvenanceLog,
) -> Vec<InstanceMask> {
    let threshold = background_fraction * tile_width as f64 * tile_height as f64;
    instances
        .into_iter()
        .filter(|inst| {
            let keep = (inst.area() as f64) < threshold;
            if !keep {
                log.record(&inst.global_id, "background");
            }
            keep
        })
        .collect()
}

/// Drop instances with any pixel inside the `margin`-wide tile border.
pub fn exclude_border(
    instances: Vec<InstanceMask>,
    tile_width: u32,
    tile_height: u32,
    margin: u32,
    log: &mut ProvenanceLog,
) -> Vec<InstanceMask> {
    instances
        .into_iter()
        .filter(|inst| {
            let b = &inst.bbox;
            let touches = b.min_x < margin
                || b.min_y < margin
                || b.max_x as u64 + margin as u64 >= tile_width as u64
                || b.max_y as u64 + margin as u64 >= tile_height as u64;
            if touches {
                log.record(&inst.global_id, "border");
            }
            !touches
        })
        .collect()
}

/// Fill every background pixel that is not 4-connected to the outside of
/// the instance's bounding box.
pub fn fill_holes(instance: &InstanceMask, tile_width: u32, tile_height: u32) -> InstanceMask {
    let raster = instance.raster(1);
    let (w, h) = (raster.width, raster.height);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    // The padded frame is background by construction.
    outside[0] = true;
    queue.push_back((0usize, 0usize));
    while let Some((cx, cy)) = queue.pop_front() {
        for (dx, dy) in NEIGHBORS_4 {
            let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            let n = ny * w + nx;
            if outside[n] {
                continue;
            }
            if raster.get(nx as i64 + raster.origin_x, ny as i64 + raster.origin_y) {
                continue;
            }
            outside[n] = true;
            queue.push_back((nx, ny));
        }
    }

    let mut pixels = Vec::with_capacity(instance.pixels.len());
    for cy in 1..h - 1 {
        for cx in 1..w - 1 {
            if !outside[cy * w + cx] {
                let x = (cx as i64 + raster.origin_x) as u32;
                let y = (cy as i64 + raster.origin_y) as u32;
                debug_assert!(x < tile_width && y < tile_height);
                pixels.push((x, y));
            }
        }
    }
    if pixels.len() == instance.pixels.len() {
        return instance.clone();
    }
    InstanceMask {
        bbox: instance.bbox,
        pixels,
        ..instance.clone()
    }
}

fn is_subset(inner: &InstanceMask, outer: &InstanceMask, outer_raster: &BoxRaster) -> bool {
    outer.bbox.contains_box(&inner.bbox)
        && inner.area() <= outer.area()
        && inner
            .pixels
            .iter()
            .all(|&(x, y)| outer_raster.get(x as i64, y as i64))
}

/// Merge every instance wholly contained in another (filled) instance into
/// its outermost container. Identical masks keep the lower `global_id`.
pub fn merge_contained(instances: Vec<InstanceMask>, log: &mut ProvenanceLog) -> Vec<InstanceMask> {
    let n = instances.len();
    let rasters: Vec<BoxRaster> = instances.iter().map(|i| i.raster(0)).collect();
    // Containers outrank their contents; equal areas mean identical sets.
    let outranks = |a: usize, b: usize| {
        let (ia, ib) = (&instances[a], &instances[b]);
        ia.area() > ib.area() || (ia.area() == ib.area() && ia.global_id < ib.global_id)
    };

    let mut absorbed_into: Vec<Option<usize>> = vec![None; n];
    for b in 0..n {
        let mut best: Option<usize> = None;
        for a in 0..n {
            if a == b || !outranks(a, b) || !is_subset(&instances[b], &instances[a], &rasters[a]) {
                continue;
            }
            if best.is_none_or(|cur| outranks(a, cur)) {
                best = Some(a);
            }
        }
        absorbed_into[b] = best;
    }

    let mut merged_pixels: HashMap<usize, Vec<(u32, u32)>> = HashMap::new();
    for (b, target) in absorbed_into.iter().enumerate() {
        if let Some(a) = *target {
            debug_assert!(absorbed_into[a].is_none());
            log.record(
                &instances[b].global_id,
                format!("merged-into:{}", instances[a].global_id),
            );
            merged_pixels
                .entry(a)
                .or_default()
                .extend_from_slice(&instances[b].pixels);
        }
    }

    instances
        .into_iter()
        .enumerate()
        .filter(|(i, _)| absorbed_into[*i].is_none())
        .map(|(i, inst)| match merged_pixels.remove(&i) {
            None => inst,
            Some(extra) => {
                let mut pixels = inst.pixels;
                pixels.extend(extra);
                InstanceMask::from_pixels(inst.global_id, inst.tile_id, inst.local_label, pixels)
            }
        })
        .collect()
}

/// Drop instances smaller than `min_area`; 0 disables the filter.
pub fn filter_min_area(
    instances: Vec<InstanceMask>,
    min_area: u64,
    log: &mut ProvenanceLog,
) -> Vec<InstanceMask> {
    instances
        .into_iter()
        .filter(|inst| {
            let keep = inst.area() >= min_area;
            if !keep {
                log.record(&inst.global_id, "min-area");
            }
            keep
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionEntry {
    pub global_id: String,
    pub excluded: bool,
    pub reason: String,
    pub timestamp: i64,
}

/// Human keep/exclude decisions, at most one per instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExclusionList {
    entries: Vec<ExclusionEntry>,
}

impl ExclusionList {
    /// Build from raw entries; later entries for the same id win.
    pub fn from_entries(raw: Vec<ExclusionEntry>) -> Self {
        let mut list = ExclusionList::default();
        for e in raw {
            list.upsert(e);
        }
        list
    }

    pub fn entries(&self) -> &[ExclusionEntry] {
        &self.entries
    }

    pub fn get(&self, global_id: &str) -> Option<&ExclusionEntry> {
        self.entries.iter().find(|e| e.global_id == global_id)
    }

    pub fn is_excluded(&self, global_id: &str) -> bool {
        self.get(global_id).is_some_and(|e| e.excluded)
    }

    /// Insert or replace the entry for `entry.global_id`, keeping the
    /// position of an existing entry.
    pub fn upsert(&mut self, entry: ExclusionEntry) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.global_id == entry.global_id)
        {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("exclusions serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::from_entries(serde_json::from_str(text)?))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        Self::from_json(&text).map_err(|e| IngestError::json(path, e))
    }

    /// Load `path`, treating a missing file as an empty list.
    pub fn load_or_default(path: &Path) -> Result<Self, IngestError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|e| IngestError::io(path, e))
    }
}

/// Ids in `exclusions` that name no instance of `set`.
pub fn unknown_exclusions<'a>(set: &InstanceSet, exclusions: &'a ExclusionList) -> Vec<&'a str> {
    exclusions
        .entries()
        .iter()
        .filter(|e| !set.instances.iter().any(|i| i.global_id == e.global_id))
        .map(|e| e.global_id.as_str())
        .collect()
}

/// Remove curated-out instances from the set.
pub fn apply_exclusions(mut set: InstanceSet, exclusions: &ExclusionList) -> InstanceSet {
    for id in unknown_exclusions(&set, exclusions) {
        log::warn!("exclusion list names unknown instance `{id}`; ignored");
    }
    let mut kept = Vec::with_capacity(set.instances.len());
    for inst in set.instances {
        match exclusions.get(&inst.global_id) {
            Some(e) if e.excluded => set
                .provenance_log
                .record(&inst.global_id, format!("curated:{}", e.reason)),
            _ => kept.push(inst),
        }
    }
    set.instances = kept;
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub background_fraction: f64,
    pub border_margin: u32,
    pub min_area: u64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            background_fraction: 0.5,
            border_margin: 1,
            min_area: 0,
        }
    }
}

/// Run every automatic stage on one tile.
pub fn run_postprocess(
    map: &LabelMap,
    tile: &TileRecord,
    config: &PostprocessConfig,
    log: &mut ProvenanceLog,
) -> Vec<InstanceMask> {
    let (w, h) = (map.width(), map.height());
    let instances = extract_instances(map, tile);
    let instances = remove_background(instances, w, h, config.background_fraction, log);
    let instances = exclude_border(instances, w, h, config.border_margin, log);
    let instances = instances.iter().map(|i| fill_holes(i, w, h)).collect();
    let instances = merge_contained(instances, log);
    filter_min_area(instances, config.min_area, log)
}
