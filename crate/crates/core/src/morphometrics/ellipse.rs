//! Direct least-squares ellipse fitting and ellipse perimeter.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};

use crate::error::MorphError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EllipseParams {
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle of the major axis from +x, in `[0, π)`.
    pub orientation: f64,
}

impl EllipseParams {
    pub fn point_at(&self, t: f64) -> [f64; 2] {
        let (s, c) = self.orientation.sin_cos();
        let (x, y) = (self.semi_major * t.cos(), self.semi_minor * t.sin());
        [self.center.0 + x * c - y * s, self.center.1 + x * s + y * c]
    }
}

/// Conic `A x² + B xy + C y² + D x + E y + F = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conic(pub [f64; 6]);

impl Conic {
    pub fn discriminant(&self) -> f64 {
        let [a, b, c, ..] = self.0;
        4.0 * a * c - b * b
    }

    pub fn to_params(&self) -> Option<EllipseParams> {
        let [a, b, c, d, e, f] = self.0;
        if self.discriminant() <= 0.0 {
            return None;
        }
        let m = Matrix2::new(2.0 * a, b, b, 2.0 * c);
        let center = m.try_inverse()? * nalgebra::Vector2::new(-d, -e);
        let (cx, cy) = (center[0], center[1]);
        let f0 = f + 0.5 * (d * cx + e * cy);

        let quad = Matrix2::new(a, 0.5 * b, 0.5 * b, c);
        let eig = SymmetricEigen::new(quad);
        let (l0, l1) = (eig.eigenvalues[0], eig.eigenvalues[1]);
        let s0 = -f0 / l0;
        let s1 = -f0 / l1;
        if !(s0 > 0.0 && s1 > 0.0) {
            return None;
        }
        let (r0, r1) = (s0.sqrt(), s1.sqrt());
        // The major axis belongs to the eigenvalue with the larger radius.
        let (semi_major, semi_minor, axis) = if r0 >= r1 {
            (r0, r1, eig.eigenvectors.column(0).into_owned())
        } else {
            (r1, r0, eig.eigenvectors.column(1).into_owned())
        };
        let mut theta = axis[1].atan2(axis[0]).rem_euclid(PI);
        if theta >= PI {
            theta = 0.0;
        }
        if !(semi_minor.is_finite() && semi_major.is_finite()) {
            return None;
        }
        Some(EllipseParams {
            center: (cx, cy),
            semi_major,
            semi_minor,
            orientation: theta,
        })
    }
}

fn distinct_count(points: &[[f64; 2]]) -> usize {
    let mut v: Vec<(u64, u64)> = points
        .iter()
        .map(|p| (p[0].to_bits(), p[1].to_bits()))
        .collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Least-squares conic under the constraint `4AC − B² = 1`, solved as the
/// reduced 3×3 generalized eigenproblem on centred, scaled coordinates.
pub fn fit_conic(points: &[[f64; 2]]) -> Result<Conic, MorphError> {
    if distinct_count(points) < 6 {
        return Err(MorphError::DegenerateContour(
            "fewer than 6 distinct points",
        ));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let spread = points
        .iter()
        .map(|p| ((p[0] - mx).powi(2) + (p[1] - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if spread <= f64::EPSILON {
        return Err(MorphError::DegenerateContour("points coincide"));
    }
    let scale = std::f64::consts::SQRT_2 / spread;

    // Scatter blocks of the design matrix [x², xy, y² | x, y, 1].
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in points {
        let x = (p[0] - mx) * scale;
        let y = (p[1] - my) * scale;
        let quad = Vector3::new(x * x, x * y, y * y);
        let lin = Vector3::new(x, y, 1.0);
        s1 += quad * quad.transpose();
        s2 += quad * lin.transpose();
        s3 += lin * lin.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or(MorphError::DegenerateContour("points are collinear"))?;
    let t = -s3_inv * s2.transpose();
    let reduced = s1 + s2 * t;
    // Inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]] applied on the left.
    let system = Matrix3::new(
        reduced[(2, 0)] / 2.0,
        reduced[(2, 1)] / 2.0,
        reduced[(2, 2)] / 2.0,
        -reduced[(1, 0)],
        -reduced[(1, 1)],
        -reduced[(1, 2)],
        reduced[(0, 0)] / 2.0,
        reduced[(0, 1)] / 2.0,
        reduced[(0, 2)] / 2.0,
    );

    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in system.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-9 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let Some(v) = null_vector(&(system - Matrix3::identity() * lambda.re)) else {
            continue;
        };
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond <= 0.0 {
            continue;
        }
        // Exactly one eigenvector satisfies the constraint in exact
        // arithmetic; prefer the smallest non-negative eigenvalue otherwise.
        if best.as_ref().is_none_or(|(l, _)| lambda.re.abs() < l.abs()) {
            best = Some((lambda.re, v / cond.sqrt()));
        }
    }
    let (_, a1) = best.ok_or(MorphError::DegenerateContour(
        "no elliptical eigen-solution",
    ))?;
    let a2 = t * a1;

    // Undo x' = s (x − mx), y' = s (y − my).
    let (a, b, c, d, e, f) = (a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]);
    let s = scale;
    let s2 = s * s;
    let conic = Conic([
        a * s2,
        b * s2,
        c * s2,
        -2.0 * a * s2 * mx - b * s2 * my + d * s,
        -b * s2 * mx - 2.0 * c * s2 * my + e * s,
        a * s2 * mx * mx + b * s2 * mx * my + c * s2 * my * my - d * s * mx - e * s * my + f,
    ]);
    let norm = conic.discriminant();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(MorphError::DegenerateContour(
            "no elliptical eigen-solution",
        ));
    }
    let k = 1.0 / norm.sqrt();
    Ok(Conic(conic.0.map(|v| v * k)))
}

/// Unit vector spanning the (numerical) null space of a 3×3 matrix.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    Some(v_t.row(idx).transpose())
}

pub fn fit_ellipse(points: &[[f64; 2]]) -> Result<EllipseParams, MorphError> {
    let conic = fit_conic(points)?;
    conic
        .to_params()
        .filter(|e| e.semi_minor > 0.0)
        .ok_or(MorphError::DegenerateContour("conic is not a real ellipse"))
}

/// Ramanujan's second approximation.
pub fn ellipse_perimeter(e: &EllipseParams) -> f64 {
    ramanujan_perimeter(e.semi_major, e.semi_minor)
}

pub fn ramanujan_perimeter(a: f64, b: f64) -> f64 {
    let h = ((a - b) / (a + b)).powi(2);
    PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
}
