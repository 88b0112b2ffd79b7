//! CSV/JSON serialization of results and PPM overlays for visual QC.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::ReportError;
use crate::evaluation::Evaluation;
use crate::fsutil::write_atomic;
use crate::ingestion::{LabelMap, TileManifest, TileRecord};
use crate::morphometrics::MorphometricRecord;
use crate::postprocess::InstanceMask;
use crate::stats::{Property, Summary, TTestResult};

pub const CSV_HEADER: [&str; 14] = [
    "slide_id",
    "group_label",
    "global_id",
    "tile_id",
    "centroid_x_global",
    "centroid_y_global",
    "area_px",
    "perimeter_px",
    "radius_px",
    "non_smoothness",
    "non_circularity",
    "area_um2",
    "radius_um",
    "excluded",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub slide_id: String,
    pub group_label: String,
    pub global_id: String,
    pub tile_id: String,
    pub centroid_x_global: f64,
    pub centroid_y_global: f64,
    pub area_px: u64,
    pub perimeter_px: f64,
    pub radius_px: f64,
    pub non_smoothness: Option<f64>,
    pub non_circularity: f64,
    pub area_um2: Option<f64>,
    pub radius_um: Option<f64>,
    pub excluded: bool,
}

impl MeasurementRow {
    pub fn from_record(
        record: &MorphometricRecord,
        manifest: &TileManifest,
        tile: &TileRecord,
        excluded: bool,
    ) -> Self {
        let mpp = manifest.microns_per_pixel;
        MeasurementRow {
            slide_id: manifest.slide_id.clone(),
            group_label: manifest.group_label.clone(),
            global_id: record.global_id.clone(),
            tile_id: tile.tile_id.clone(),
            centroid_x_global: record.centroid_global.0,
            centroid_y_global: record.centroid_global.1,
            area_px: record.area,
            perimeter_px: record.perimeter,
            radius_px: record.radius,
            non_smoothness: record.non_smoothness,
            non_circularity: record.non_circularity,
            area_um2: mpp.map(|m| record.area as f64 * m * m),
            radius_um: mpp.map(|m| record.radius * m),
            excluded,
        }
    }

    /// Value of a morphometric property; `None` only for an unavailable
    /// non-smoothness.
    pub fn property(&self, p: Property) -> Option<f64> {
        match p {
            Property::Perimeter => Some(self.perimeter_px),
            Property::Area => Some(self.area_px as f64),
            Property::Radius => Some(self.radius_px),
            Property::NonSmoothness => self.non_smoothness,
            Property::NonCircularity => Some(self.non_circularity),
        }
    }

    fn to_fields(&self) -> [String; 14] {
        let f = |v: f64| format!("{v:.4}");
        let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
        [
            self.slide_id.clone(),
            self.group_label.clone(),
            self.global_id.clone(),
            self.tile_id.clone(),
            f(self.centroid_x_global),
            f(self.centroid_y_global),
            self.area_px.to_string(),
            f(self.perimeter_px),
            f(self.radius_px),
            opt(self.non_smoothness),
            f(self.non_circularity),
            opt(self.area_um2),
            opt(self.radius_um),
            self.excluded.to_string(),
        ]
    }
}

/// CSV bytes for `rows`, sorted by `global_id`.
pub fn measurements_csv(rows: &[MeasurementRow]) -> Vec<u8> {
    let mut sorted: Vec<&MeasurementRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.global_id.cmp(&b.global_id));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for row in sorted {
        w.write_record(row.to_fields()).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_measurements_csv(rows: &[MeasurementRow], path: &Path) -> Result<(), ReportError> {
    write_atomic(path, &measurements_csv(rows)).map_err(|e| ReportError::io(path, e))
}

pub fn read_measurements_csv(path: &Path) -> Result<Vec<MeasurementRow>, ReportError> {
    let bytes = fs::read(path).map_err(|e| ReportError::io(path, e))?;
    parse_measurements_csv(&bytes, path)
}

pub fn parse_measurements_csv(
    bytes: &[u8],
    path: &Path,
) -> Result<Vec<MeasurementRow>, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != CSV_HEADER {
        return Err(ReportError::MalformedRow {
            path: path.to_path_buf(),
            row: 0,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = i + 1;
        let bad = |col: &str, v: &str| ReportError::MalformedRow {
            path: path.to_path_buf(),
            row,
            reason: format!("column {col}: cannot parse `{v}`"),
        };
        let num = |idx: usize| -> Result<f64, ReportError> {
            let v = &rec[idx];
            v.parse::<f64>().map_err(|_| bad(CSV_HEADER[idx], v))
        };
        let opt = |idx: usize| -> Result<Option<f64>, ReportError> {
            if rec[idx].is_empty() {
                Ok(None)
            } else {
                num(idx).map(Some)
            }
        };
        rows.push(MeasurementRow {
            slide_id: rec[0].to_owned(),
            group_label: rec[1].to_owned(),
            global_id: rec[2].to_owned(),
            tile_id: rec[3].to_owned(),
            centroid_x_global: num(4)?,
            centroid_y_global: num(5)?,
            area_px: rec[6].parse().map_err(|_| bad("area_px", &rec[6]))?,
            perimeter_px: num(7)?,
            radius_px: num(8)?,
            non_smoothness: opt(9)?,
            non_circularity: num(10)?,
            area_um2: opt(11)?,
            radius_um: opt(12)?,
            excluded: match &rec[13] {
                "true" => true,
                "false" => false,
                other => return Err(bad("excluded", other)),
            },
        });
    }
    Ok(rows)
}

fn serialize_df<S: Serializer>(df: &f64, s: S) -> Result<S::Ok, S::Error> {
    if df.fract() == 0.0 && df.abs() < 9.0e15 {
        s.serialize_i64(*df as i64)
    } else {
        s.serialize_f64(*df)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub group: String,
    pub property: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

impl From<&Summary> for SummaryJson {
    fn from(s: &Summary) -> Self {
        SummaryJson {
            group: s.group.clone(),
            property: s.property.name().into(),
            n: s.n,
            mean: s.mean,
            sd: s.sd,
            median: s.median,
            q1: s.q1,
            q3: s.q3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestJson {
    pub a: String,
    pub b: String,
    pub property: String,
    pub t: f64,
    #[serde(serialize_with = "serialize_df")]
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

impl From<&TTestResult> for TTestJson {
    fn from(r: &TTestResult) -> Self {
        TTestJson {
            a: r.group_a.clone(),
            b: r.group_b.clone(),
            property: r.property.name().into(),
            t: r.t_statistic,
            df: r.degrees_of_freedom,
            p: r.p_value,
            significant: r.significant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsDocument {
    pub alpha: f64,
    pub summaries: Vec<SummaryJson>,
    pub ttests: Vec<TTestJson>,
}

impl StatsDocument {
    pub fn new(alpha: f64, summaries: &[Summary], ttests: &[TTestResult]) -> Self {
        StatsDocument {
            alpha,
            summaries: summaries.iter().map(SummaryJson::from).collect(),
            ttests: ttests.iter().map(TTestJson::from).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("stats serialize");
        s.push('\n');
        s
    }
}

pub fn write_stats_json(
    alpha: f64,
    summaries: &[Summary],
    ttests: &[TTestResult],
    path: &Path,
) -> Result<(), ReportError> {
    let doc = StatsDocument::new(alpha, summaries, ttests);
    write_atomic(path, doc.to_json().as_bytes()).map_err(|e| ReportError::io(path, e))
}

pub fn evaluation_json(eval: &Evaluation) -> String {
    let mut s = serde_json::to_string(eval).expect("evaluation serialize");
    s.push('\n');
    s
}

pub fn write_evaluation_json(eval: &Evaluation, path: &Path) -> Result<(), ReportError> {
    write_atomic(path, evaluation_json(eval).as_bytes()).map_err(|e| ReportError::io(path, e))
}

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const HATCH_DARK: Rgb = [96, 96, 96];
pub const HATCH_LIGHT: Rgb = [192, 192, 192];

/// Fully saturated hue `frac(label × 0.61803)` blended 50% over white.
pub fn label_color(local_label: u16) -> Rgb {
    let hue = (local_label as f64 * 0.61803).fract();
    let h6 = hue * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    let blend = |c: f64| ((c * 255.0 + 255.0) / 2.0).round() as u8;
    [blend(r), blend(g), blend(b)]
}

/// Gray diagonal hatching for curated-out instances.
pub fn hatch_color(x: u32, y: u32) -> Rgb {
    if (x + y).is_multiple_of(4) {
        HATCH_DARK
    } else {
        HATCH_LIGHT
    }
}

/// A binary PPM (P6) image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: u32,
    pub height: u32,
    pub comment: String,
    pub pixels: Vec<Rgb>,
}

impl Ppm {
    pub fn blank(width: u32, height: u32, comment: impl Into<String>) -> Self {
        Ppm {
            width,
            height,
            comment: comment.into(),
            pixels: vec![WHITE; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, c: Rgb) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = c;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let comment: String = self
            .comment
            .chars()
            .map(|c| if c == '\n' { ' ' } else { c })
            .collect();
        let mut header = String::new();
        let _ = write!(
            header,
            "P6\n# {comment}\n{} {}\n255\n",
            self.width, self.height
        );
        let mut out = header.into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Option<Ppm> {
        let mut lines = Vec::new();
        let mut pos = 0;
        while lines.len() < 4 {
            let end = pos + bytes[pos..].iter().position(|&b| b == b'\n')?;
            lines.push(std::str::from_utf8(&bytes[pos..end]).ok()?.to_owned());
            pos = end + 1;
        }
        if lines[0] != "P6" || lines[3] != "255" {
            return None;
        }
        let comment = lines[1].strip_prefix("# ")?.to_owned();
        let mut dims = lines[2].split(' ');
        let width: u32 = dims.next()?.parse().ok()?;
        let height: u32 = dims.next()?.parse().ok()?;
        let body = &bytes[pos..];
        if body.len() != width as usize * height as usize * 3 {
            return None;
        }
        let pixels = body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Some(Ppm {
            width,
            height,
            comment,
            pixels,
        })
    }
}

/// Overlay of one tile: retained instances in their label color, excluded
/// instances hatched, everything else white. Instance pixel sets are drawn
/// (post-processing may have filled or merged the raw labels).
pub fn render_overlay(
    map: &LabelMap,
    tile_id: &str,
    retained: &[&InstanceMask],
    excluded: &[&InstanceMask],
) -> Ppm {
    let mut img = Ppm::blank(map.width(), map.height(), tile_id);
    for inst in retained {
        let c = label_color(inst.local_label);
        for &(x, y) in &inst.pixels {
            img.set(x, y, c);
        }
    }
    for inst in excluded {
        for &(x, y) in &inst.pixels {
            img.set(x, y, hatch_color(x, y));
        }
    }
    img
}

pub fn write_overlay(img: &Ppm, path: &Path) -> Result<(), ReportError> {
    write_atomic(path, &img.to_bytes()).map_err(|e| ReportError::io(path, e))
}

/// Split instances into (retained, excluded) by id membership.
pub fn partition_by_ids<'a>(
    instances: &'a [InstanceMask],
    excluded_ids: &HashSet<&str>,
) -> (Vec<&'a InstanceMask>, Vec<&'a InstanceMask>) {
    instances
        .iter()
        .partition(|i| !excluded_ids.contains(i.global_id.as_str()))
}
