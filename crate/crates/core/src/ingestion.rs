//! Slide manifests, raw label maps and run-length masks.
//!
//! A label map is stored as two files: `<name>.lmh`, a JSON header carrying
//! `width` and `height`, and `<name>.lmp`, the row-major payload of
//! little-endian `u16` instance ids with no header or padding.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::IngestError;
use crate::fsutil::write_atomic;

pub const BACKGROUND: u16 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub tile_id: String,
    pub origin_x: u64,
    pub origin_y: u64,
    pub label_map_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub slide_id: String,
    pub group_label: String,
    pub tile_width: u32,
    pub tile_height: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub microns_per_pixel: Option<f64>,
    pub tiles: Vec<TileRecord>,
    /// Directory that relative `label_map_path` entries resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl TileManifest {
    pub fn label_map_location(&self, tile: &TileRecord) -> PathBuf {
        self.base_dir.join(&tile.label_map_path)
    }

    pub fn tile(&self, tile_id: &str) -> Option<&TileRecord> {
        self.tiles.iter().find(|t| t.tile_id == tile_id)
    }

    pub fn to_global(&self, tile: &TileRecord, x: u32, y: u32) -> Result<(u64, u64), IngestError> {
        to_global_coords(tile, self.tile_width, self.tile_height, x, y)
    }

    /// Serialize to the manifest JSON format.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn field<'a>(
    obj: &'a Map<String, Value>,
    name: &str,
    prefix: &str,
) -> Result<&'a Value, IngestError> {
    obj.get(name)
        .filter(|v| !v.is_null())
        .ok_or_else(|| IngestError::MissingField(format!("{prefix}{name}")))
}

fn string_field(obj: &Map<String, Value>, name: &str, prefix: &str) -> Result<String, IngestError> {
    field(obj, name, prefix)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| IngestError::InvalidField {
            field: format!("{prefix}{name}"),
            reason: "expected a string".into(),
        })
}

fn int_field(obj: &Map<String, Value>, name: &str, prefix: &str) -> Result<i64, IngestError> {
    field(obj, name, prefix)?
        .as_i64()
        .ok_or_else(|| IngestError::InvalidField {
            field: format!("{prefix}{name}"),
            reason: "expected an integer".into(),
        })
}

fn dimension(obj: &Map<String, Value>, name: &str) -> Result<u32, IngestError> {
    let v = int_field(obj, name, "")?;
    if v <= 0 {
        return Err(IngestError::NonPositiveDimension(name.to_owned()));
    }
    u32::try_from(v).map_err(|_| IngestError::InvalidField {
        field: name.to_owned(),
        reason: "does not fit in 32 bits".into(),
    })
}

/// Parse and validate manifest JSON text. Relative label-map paths resolve
/// against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<TileManifest, IngestError> {
    let root: Value = serde_json::from_str(text).map_err(|e| IngestError::json("manifest", e))?;
    let obj = root.as_object().ok_or_else(|| IngestError::InvalidField {
        field: "<root>".into(),
        reason: "expected a JSON object".into(),
    })?;

    let slide_id = string_field(obj, "slide_id", "")?;
    let group_label = string_field(obj, "group_label", "")?;
    let tile_width = dimension(obj, "tile_width")?;
    let tile_height = dimension(obj, "tile_height")?;
    let microns_per_pixel = match obj.get("microns_per_pixel") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let mpp = v.as_f64().ok_or_else(|| IngestError::InvalidField {
                field: "microns_per_pixel".into(),
                reason: "expected a number".into(),
            })?;
            if !(mpp.is_finite() && mpp > 0.0) {
                return Err(IngestError::InvalidField {
                    field: "microns_per_pixel".into(),
                    reason: format!("{mpp} is not a finite positive number"),
                });
            }
            Some(mpp)
        }
    };

    let raw_tiles =
        field(obj, "tiles", "")?
            .as_array()
            .ok_or_else(|| IngestError::InvalidField {
                field: "tiles".into(),
                reason: "expected an array".into(),
            })?;
    let mut seen = HashSet::new();
    let mut tiles = Vec::with_capacity(raw_tiles.len());
    for (i, raw) in raw_tiles.iter().enumerate() {
        let prefix = format!("tiles[{i}].");
        let t = raw.as_object().ok_or_else(|| IngestError::InvalidField {
            field: format!("tiles[{i}]"),
            reason: "expected an object".into(),
        })?;
        let tile_id = string_field(t, "tile_id", &prefix)?;
        let origin = |name: &str| -> Result<u64, IngestError> {
            let v = int_field(t, name, &prefix)?;
            u64::try_from(v).map_err(|_| IngestError::InvalidField {
                field: format!("{prefix}{name}"),
                reason: "must be >= 0".into(),
            })
        };
        let origin_x = origin("origin_x")?;
        let origin_y = origin("origin_y")?;
        let label_map_path = string_field(t, "label_map_path", &prefix)?;
        if !seen.insert(tile_id.clone()) {
            return Err(IngestError::DuplicateTileId(tile_id));
        }
        tiles.push(TileRecord {
            tile_id,
            origin_x,
            origin_y,
            label_map_path,
        });
    }

    Ok(TileManifest {
        slide_id,
        group_label,
        tile_width,
        tile_height,
        microns_per_pixel,
        tiles,
        base_dir: base_dir.to_path_buf(),
    })
}

pub fn load_manifest(path: &Path) -> Result<TileManifest, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base).map_err(|e| match e {
        IngestError::Json { source, .. } => IngestError::json(path, source),
        other => other,
    })
}

/// Row-major grid of instance ids for one tile; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, labels: Vec<u16>) -> Option<Self> {
        (labels.len() == width as usize * height as usize).then_some(LabelMap {
            width,
            height,
            labels,
        })
    }

    pub fn background(width: u32, height: u32) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![BACKGROUND; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, label: u16) {
        let w = self.width as usize;
        self.labels[y as usize * w + x as usize] = label;
    }

    pub fn to_payload(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|l| l.to_le_bytes()).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelMapHeader {
    width: u32,
    height: u32,
}

/// Decode a raw little-endian `u16` payload.
pub fn decode_payload(bytes: &[u8], width: u32, height: u32) -> Result<LabelMap, IngestError> {
    let expected = width as usize * height as usize * 2;
    if bytes.len() < expected {
        return Err(IngestError::TruncatedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(IngestError::OversizedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(LabelMap {
        width,
        height,
        labels,
    })
}

/// Header and payload paths for a label-map base path. A trailing `.lmh` or
/// `.lmp` extension on `path` is ignored.
pub fn label_map_files(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("lmh") | Some("lmp") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".lmh");
    let mut payload = stem.into_os_string();
    payload.push(".lmp");
    (header.into(), payload.into())
}

pub fn read_label_map(
    path: &Path,
    expected_width: u32,
    expected_height: u32,
) -> Result<LabelMap, IngestError> {
    let (header_path, payload_path) = label_map_files(path);
    let text = fs::read_to_string(&header_path).map_err(|e| IngestError::io(&header_path, e))?;
    let header: LabelMapHeader =
        serde_json::from_str(&text).map_err(|e| IngestError::json(&header_path, e))?;
    if header.width != expected_width || header.height != expected_height {
        return Err(IngestError::DimensionMismatch {
            expected_width,
            expected_height,
            actual_width: header.width,
            actual_height: header.height,
        });
    }
    let bytes = fs::read(&payload_path).map_err(|e| IngestError::io(&payload_path, e))?;
    decode_payload(&bytes, header.width, header.height)
}

pub fn write_label_map(map: &LabelMap, path: &Path) -> Result<(), IngestError> {
    let (header_path, payload_path) = label_map_files(path);
    let header = serde_json::to_string(&LabelMapHeader {
        width: map.width,
        height: map.height,
    })
    .expect("header serializes");
    write_atomic(&header_path, header.as_bytes()).map_err(|e| IngestError::io(&header_path, e))?;
    write_atomic(&payload_path, &map.to_payload()).map_err(|e| IngestError::io(&payload_path, e))
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    pub height: u32,
    pub width: u32,
    pub data: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(height: u32, width: u32) -> Self {
        BinaryGrid {
            height,
            width,
            data: vec![false; height as usize * width as usize],
        }
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> bool {
        self.data[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let w = self.width as usize;
        self.data[row as usize * w + col as usize] = value;
    }
}

/// Uncompressed column-major run-length mask; the first run is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct RleDocument {
    size: [u32; 2],
    counts: Vec<u64>,
}

impl RleMask {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&RleDocument {
            size: [self.height, self.width],
            counts: self.counts.clone(),
        })
        .expect("rle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let doc: RleDocument =
            serde_json::from_str(text).map_err(|e| IngestError::json("rle document", e))?;
        Ok(RleMask {
            height: doc.size[0],
            width: doc.size[1],
            counts: doc.counts,
        })
    }
}

pub fn rle_encode(mask: &BinaryGrid) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for col in 0..mask.width {
        for row in 0..mask.height {
            let v = mask.get(row, col);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask {
        height: mask.height,
        width: mask.width,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryGrid, IngestError> {
    let expected = rle.height as u64 * rle.width as u64;
    let actual: u64 = rle.counts.iter().sum();
    if actual != expected {
        return Err(IngestError::CountSumMismatch { expected, actual });
    }
    let mut grid = BinaryGrid::new(rle.height, rle.width);
    let h = rle.height as u64;
    let mut pos = 0u64;
    for (i, &count) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + count {
                grid.set((p % h) as u32, (p / h) as u32, true);
            }
        }
        pos += count;
    }
    Ok(grid)
}

pub fn to_global_coords(
    tile: &TileRecord,
    tile_width: u32,
    tile_height: u32,
    x_local: u32,
    y_local: u32,
) -> Result<(u64, u64), IngestError> {
    if x_local >= tile_width || y_local >= tile_height {
        return Err(IngestError::OutOfTileBounds {
            x: x_local,
            y: y_local,
            width: tile_width,
            height: tile_height,
        });
    }
    Ok((
        tile.origin_x + x_local as u64,
        tile.origin_y + y_local as u64,
    ))
}
