//! Rasterized shapes and synthetic slides for fixtures and demos.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::IngestError;
use crate::ingestion::{write_label_map, LabelMap, TileManifest, TileRecord};
use crate::postprocess::InstanceMask;

/// Pixels with `(x − cx)² + (y − cy)² ≤ r²`.
pub fn disk(cx: i64, cy: i64, r: i64) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            let (dx, dy) = (x - cx, y - cy);
            if dx * dx + dy * dy <= r * r && x >= 0 && y >= 0 {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

/// Pixels with `inner² < d² ≤ outer²`.
pub fn annulus(cx: i64, cy: i64, outer: i64, inner: i64) -> Vec<(u32, u32)> {
    disk(cx, cy, outer)
        .into_iter()
        .filter(|&(x, y)| {
            let (dx, dy) = (x as i64 - cx, y as i64 - cy);
            dx * dx + dy * dy > inner * inner
        })
        .collect()
}

/// Pixel centers inside the ellipse with semi-axes `a` (rotated by `theta`) and `b`.
pub fn ellipse(cx: i64, cy: i64, a: f64, b: f64, theta: f64) -> Vec<(u32, u32)> {
    let reach = a.max(b).ceil() as i64 + 1;
    let (s, c) = theta.sin_cos();
    let mut out = Vec::new();
    for y in cy - reach..=cy + reach {
        for x in cx - reach..=cx + reach {
            let (dx, dy) = ((x - cx) as f64, (y - cy) as f64);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 && x >= 0 && y >= 0 {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

/// Star polygon with `points` tips at radius `outer` and notches at `inner`.
pub fn star(cx: i64, cy: i64, points: usize, outer: f64, inner: f64) -> Vec<(u32, u32)> {
    let verts: Vec<(f64, f64)> = (0..2 * points)
        .map(|k| {
            let r = if k % 2 == 0 { outer } else { inner };
            let t = PI * k as f64 / points as f64;
            (r * t.cos(), r * t.sin())
        })
        .collect();
    let reach = outer.ceil() as i64 + 1;
    let mut out = Vec::new();
    for y in cy - reach..=cy + reach {
        for x in cx - reach..=cx + reach {
            let (px, py) = ((x - cx) as f64, (y - cy) as f64);
            let mut inside = false;
            for i in 0..verts.len() {
                let (x0, y0) = verts[i];
                let (x1, y1) = verts[(i + 1) % verts.len()];
                if (y0 > py) != (y1 > py) && px < x0 + (py - y0) * (x1 - x0) / (y1 - y0) {
                    inside = !inside;
                }
            }
            if inside && x >= 0 && y >= 0 {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

pub fn instance(id: &str, pixels: Vec<(u32, u32)>) -> InstanceMask {
    InstanceMask::from_pixels(id, "t", 1, pixels)
}

pub fn paint(map: &mut LabelMap, label: u16, pixels: &[(u32, u32)]) {
    for &(x, y) in pixels {
        if x < map.width() && y < map.height() {
            map.set(x, y, label);
        }
    }
}

/// Parameters of a synthetic slide: a grid of tiles each holding a few
/// non-overlapping disks whose radii scatter around `mean_radius`.
#[derive(Debug, Clone)]
pub struct SlideSpec {
    pub slide_id: String,
    pub group_label: String,
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub tile_size: u32,
    pub mean_radius: f64,
    pub radius_jitter: f64,
    pub seed: u64,
}

/// Write a synthetic slide (manifest plus label maps) into `dir`.
///
/// Each tile carries interior disks, one disk cut by the tile edge, and on
/// every other tile a lumen ring with a separate core label.
pub fn write_slide(spec: &SlideSpec, dir: &Path) -> Result<TileManifest, IngestError> {
    std::fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.tile_size as i64;
    let mut tiles = Vec::new();
    for ty in 0..spec.tiles_y {
        for tx in 0..spec.tiles_x {
            let tile_id = format!("r{ty}c{tx}");
            let mut map = LabelMap::background(spec.tile_size, spec.tile_size);
            let mut label = 1u16;
            // 3×3 grid of cells keeps disks apart.
            let cell = size / 3;
            for cy in 0..3 {
                for cx in 0..3 {
                    let r = (spec.mean_radius + rng.gen_range(-1.0..=1.0) * spec.radius_jitter)
                        .round()
                        .max(2.0) as i64;
                    let r = r.min(cell / 2 - 2);
                    let slack = cell / 2 - 2 - r;
                    let jx = if slack > 0 {
                        rng.gen_range(-slack..=slack)
                    } else {
                        0
                    };
                    let jy = if slack > 0 {
                        rng.gen_range(-slack..=slack)
                    } else {
                        0
                    };
                    let (x0, y0) = (cx * cell + cell / 2 + jx, cy * cell + cell / 2 + jy);
                    if (tx + ty) % 2 == 1 && cx == 1 && cy == 1 && r >= 6 {
                        paint(&mut map, label, &annulus(x0, y0, r, r / 2));
                        label += 1;
                        paint(&mut map, label, &disk(x0, y0, r / 2 - 1));
                    } else {
                        paint(&mut map, label, &disk(x0, y0, r));
                    }
                    label += 1;
                }
            }
            // a clipped organoid on the right edge
            let r = (spec.mean_radius as i64).max(3);
            paint(&mut map, label, &disk(size - 1, size / 2, r));

            let name = format!("{}_{}", spec.slide_id, tile_id);
            write_label_map(&map, &dir.join(&name))?;
            tiles.push(TileRecord {
                tile_id,
                origin_x: tx as u64 * spec.tile_size as u64,
                origin_y: ty as u64 * spec.tile_size as u64,
                label_map_path: name,
            });
        }
    }
    let manifest = TileManifest {
        slide_id: spec.slide_id.clone(),
        group_label: spec.group_label.clone(),
        tile_width: spec.tile_size,
        tile_height: spec.tile_size,
        microns_per_pixel: Some(0.65),
        tiles,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| IngestError::io(&path, e))?;
    Ok(manifest)
}
