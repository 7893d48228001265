//! Spatial transforms between volume frames.
//!
//! All transforms are 4x4 homogeneous matrices acting on column vectors in
//! millimetres. `compose(a, b)` applies `b` first, then `a`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matrices whose 1-norm condition estimate exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    /// Validates the bottom row and invertibility.
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let bottom = matrix.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::Geometry(format!(
                "affine bottom row must be (0,0,0,1), got ({}, {}, {}, {})",
                bottom[0], bottom[1], bottom[2], bottom[3]
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("affine contains non-finite entries".into()));
        }
        let t = Self { matrix };
        t.checked_inverse()?;
        Ok(t)
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        let mut m = Matrix4::zeros();
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        Self::new(m)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        Self { matrix: m }
    }

    pub fn scaling(s: [f64; 3]) -> Self {
        Self {
            matrix: Matrix4::from_diagonal(&Vector4::new(s[0], s[1], s[2], 1.0)),
        }
    }

    pub(crate) fn from_linear_and_offset(linear: Matrix3<f64>, offset: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
        Self { matrix: m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn offset(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }

    /// 1-norm condition number estimate `||A||_1 * ||A^-1||_1`.
    pub fn condition(&self) -> f64 {
        match self.matrix.try_inverse() {
            Some(inv) => norm1(&self.matrix) * norm1(&inv),
            None => f64::INFINITY,
        }
    }

    fn checked_inverse(&self) -> Result<Matrix4<f64>> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::Geometry("matrix is singular".into()))?;
        let cond = norm1(&self.matrix) * norm1(&inv);
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Err(Error::Geometry(format!(
                "matrix is near-singular (condition estimate {cond:.3e})"
            )));
        }
        Ok(inv)
    }

    pub fn invert(&self) -> Result<Self> {
        let mut inv = self.checked_inverse()?;
        // keep the homogeneous row exact
        inv[(3, 0)] = 0.0;
        inv[(3, 1)] = 0.0;
        inv[(3, 2)] = 0.0;
        inv[(3, 3)] = 1.0;
        Ok(Self { matrix: inv })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> Self {
        let mut m = self.matrix * other.matrix;
        m[(3, 0)] = 0.0;
        m[(3, 1)] = 0.0;
        m[(3, 2)] = 0.0;
        m[(3, 3)] = 1.0;
        Self { matrix: m }
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Matrix4::identity()
    }

    /// Plain-text form: four lines of four whitespace-separated numbers, row-major.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..4 {
            let line: Vec<String> = (0..4).map(|c| format!("{}", self.matrix[(r, c)])).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = Vec::with_capacity(16);
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Parameter(format!("transform file: cannot parse `{tok}`")))?;
                values.push(v);
            }
        }
        if values.len() != 16 {
            return Err(Error::Parameter(format!(
                "transform file must hold 16 numbers, found {}",
                values.len()
            )));
        }
        Self::new(Matrix4::from_row_slice(&values))
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        crate::util::write_new(path, self.to_text().as_bytes())
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for AffineTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        AffineTransform::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

fn norm1(m: &Matrix4<f64>) -> f64 {
    (0..4)
        .map(|c| (0..4).map(|r| m[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Rotation matrix `Rz · Ry · Rx` (x rotation applied first).
pub fn rotation_matrix(rot: [f64; 3]) -> Matrix3<f64> {
    let (sx, cx) = rot[0].sin_cos();
    let (sy, cy) = rot[1].sin_cos();
    let (sz, cz) = rot[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Inverse of [`rotation_matrix`] for a proper rotation.
pub fn euler_angles(r: &Matrix3<f64>) -> [f64; 3] {
    let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let ry = sy.asin();
    if sy.abs() < 1.0 - 1e-12 {
        [r[(2, 1)].atan2(r[(2, 2)]), ry, r[(1, 0)].atan2(r[(0, 0)])]
    } else {
        // gimbal lock: fold everything into the x angle
        [(-r[(1, 2)]).atan2(r[(1, 1)]), ry, 0.0]
    }
}

/// Six-parameter rigid motion: `x' = Rz·Ry·Rx·x + t`, angles in radians,
/// translation in mm, rotation about the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotations: [f64; 3],
    pub translations: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotations: [f64; 3], translations: [f64; 3]) -> Self {
        Self {
            rotations,
            translations,
        }
    }

    pub fn to_affine(&self) -> AffineTransform {
        AffineTransform::from_linear_and_offset(
            rotation_matrix(self.rotations),
            Vector3::from(self.translations),
        )
    }

    /// Extracts the rigid part of an affine whose linear block is a rotation.
    pub fn from_affine(a: &AffineTransform) -> Result<Self> {
        let lin = a.linear();
        let orth = (lin.transpose() * lin - Matrix3::identity()).abs().max();
        if orth > 1e-6 || lin.determinant() <= 0.0 {
            return Err(Error::Geometry("affine is not a proper rigid motion".into()));
        }
        let off = a.offset();
        Ok(Self {
            rotations: euler_angles(&lin),
            translations: [off[0], off[1], off[2]],
        })
    }

    pub fn as_params(&self) -> [f64; 6] {
        let [a, b, c] = self.rotations;
        let [x, y, z] = self.translations;
        [x, y, z, a, b, c]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            translations: [p[0], p[1], p[2]],
            rotations: [p[3], p[4], p[5]],
        }
    }
}

/// Twelve-parameter affine: `T · R · Z · S` with `Z` the per-axis scales and
/// `S` the upper-triangular unit shear `[[1, s0, s1], [0, 1, s2], [0, 0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub translations: [f64; 3],
    pub rotations: [f64; 3],
    pub scales: [f64; 3],
    pub shears: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self {
            translations: [0.0; 3],
            rotations: [0.0; 3],
            scales: [1.0; 3],
            shears: [0.0; 3],
        }
    }
}

impl AffineParams {
    pub fn to_affine(&self) -> AffineTransform {
        let r = rotation_matrix(self.rotations);
        let z = Matrix3::from_diagonal(&Vector3::from(self.scales));
        let s = Matrix3::new(
            1.0,
            self.shears[0],
            self.shears[1],
            0.0,
            1.0,
            self.shears[2],
            0.0,
            0.0,
            1.0,
        );
        AffineTransform::from_linear_and_offset(r * z * s, Vector3::from(self.translations))
    }

    /// QR-based decomposition; exact inverse of [`AffineParams::to_affine`]
    /// for positive scales.
    pub fn from_affine(a: &AffineTransform) -> Self {
        let qr = a.linear().qr();
        let mut q = qr.q();
        let mut u = qr.r();
        for i in 0..3 {
            if u[(i, i)] < 0.0 {
                for c in 0..3 {
                    u[(i, c)] = -u[(i, c)];
                }
                for r in 0..3 {
                    q[(r, i)] = -q[(r, i)];
                }
            }
        }
        if q.determinant() < 0.0 {
            for c in 0..3 {
                u[(2, c)] = -u[(2, c)];
            }
            for r in 0..3 {
                q[(r, 2)] = -q[(r, 2)];
            }
        }
        let off = a.offset();
        Self {
            translations: [off[0], off[1], off[2]],
            rotations: euler_angles(&q),
            scales: [u[(0, 0)], u[(1, 1)], u[(2, 2)]],
            shears: [
                u[(0, 1)] / u[(0, 0)],
                u[(0, 2)] / u[(0, 0)],
                u[(1, 2)] / u[(1, 1)],
            ],
        }
    }

    pub fn as_params(&self) -> [f64; 12] {
        let mut p = [0.0; 12];
        p[0..3].copy_from_slice(&self.translations);
        p[3..6].copy_from_slice(&self.rotations);
        p[6..9].copy_from_slice(&self.scales);
        p[9..12].copy_from_slice(&self.shears);
        p
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            translations: [p[0], p[1], p[2]],
            rotations: [p[3], p[4], p[5]],
            scales: [p[6], p[7], p[8]],
            shears: [p[9], p[10], p[11]],
        }
    }
}
