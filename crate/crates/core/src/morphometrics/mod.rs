//! The five per-organoid shape properties: perimeter, radius, area,
//! non-smoothness and non-circularity.

mod contour;
mod ellipse;

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

pub use contour::{trace_contour, Contour};
pub use ellipse::{
    ellipse_perimeter, fit_conic, fit_ellipse, ramanujan_perimeter, Conic, EllipseParams,
};

use crate::ingestion::TileRecord;
use crate::postprocess::InstanceMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphometricRecord {
    pub global_id: String,
    pub perimeter: f64,
    pub area: u64,
    pub radius: f64,
    /// `None` when no ellipse could be fitted to the contour.
    pub non_smoothness: Option<f64>,
    pub non_circularity: f64,
    pub centroid_global: (f64, f64),
    pub ellipse: Option<EllipseParams>,
}

/// Polygonal length of the closed contour through pixel centers.
pub fn perimeter(contour: &Contour) -> f64 {
    let pts = &contour.points;
    if pts.len() < 2 {
        return 0.0;
    }
    pts.iter()
        .zip(pts.iter().cycle().skip(1))
        .map(
            |(&(x0, y0), &(x1, y1))| {
                if x0 != x1 && y0 != y1 {
                    SQRT_2
                } else {
                    1.0
                }
            },
        )
        .sum()
}

pub fn area(instance: &InstanceMask) -> u64 {
    instance.area()
}

pub fn centroid(instance: &InstanceMask) -> (f64, f64) {
    let n = instance.pixels.len() as f64;
    let (sx, sy) = instance
        .pixels
        .iter()
        .fold((0u64, 0u64), |(sx, sy), &(x, y)| {
            (sx + x as u64, sy + y as u64)
        });
    (sx as f64 / n, sy as f64 / n)
}

/// Mean distance from the area centroid to the contour points.
pub fn mean_radius(instance: &InstanceMask, contour: &Contour) -> f64 {
    let (cx, cy) = centroid(instance);
    let total: f64 = contour
        .points
        .iter()
        .map(|&(x, y)| (x as f64 - cx).hypot(y as f64 - cy))
        .sum();
    total / contour.len() as f64
}

/// Contour perimeter over fitted-ellipse perimeter; grows with roughness.
pub fn non_smoothness(contour_perimeter: f64, e: &EllipseParams) -> f64 {
    contour_perimeter / ellipse_perimeter(e)
}

/// `|P² / (4πA) − 1|`; the area is real so analytic shapes can be scored.
pub fn non_circularity(perimeter: f64, area: f64) -> f64 {
    (perimeter * perimeter / (4.0 * PI * area) - 1.0).abs()
}

pub fn measure(instance: &InstanceMask, tile: &TileRecord) -> MorphometricRecord {
    let contour = trace_contour(instance);
    let p = perimeter(&contour);
    let a = area(instance);
    let (cx, cy) = centroid(instance);
    let ellipse = fit_ellipse(&contour.as_f64()).ok();
    let non_smoothness = match (&ellipse, p > 0.0) {
        (Some(e), true) => Some(non_smoothness(p, e)),
        _ => None,
    };
    MorphometricRecord {
        global_id: instance.global_id.clone(),
        perimeter: p,
        area: a,
        radius: mean_radius(instance, &contour),
        non_smoothness,
        non_circularity: non_circularity(p, a as f64),
        centroid_global: (tile.origin_x as f64 + cx, tile.origin_y as f64 + cy),
        ellipse,
    }
}
