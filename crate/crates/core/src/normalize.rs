//! Affine spatial normalization to a template.
//!
//! The estimated transform maps template world coordinates to subject world
//! coordinates, so normalized volumes are pulled back from subject space onto
//! a template-aligned grid.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::coregister::{pyramid, register_rigid, similarity, MovingImage, RegistrationConfig, SampleSet};
use crate::error::{Error, Result};
use crate::geometry::{AffineParams, AffineTransform};
use crate::optimize::{powell, PowellOptions};
use crate::resample::{resample, Interpolation};
use crate::volume::{GridSpec, Volume3D};

/// Stopping tolerance for scale and shear parameters.
const SCALE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizeConfig {
    pub output_spacing_mm: [f64; 3],
    pub registration: RegistrationConfig,
    /// Precomputed template-to-subject transform; skips estimation.
    pub external_affine: Option<AffineTransform>,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            output_spacing_mm: [2.0; 3],
            registration: RegistrationConfig::default(),
            external_affine: None,
        }
    }
}

impl NormalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_spacing_mm.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!(
                "output spacing must be positive, got {:?}",
                self.output_spacing_mm
            )));
        }
        self.registration.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineRegistration {
    /// Template world to subject world.
    pub transform: AffineTransform,
    /// Final NMI (or NCC); `None` when an external affine was used.
    pub metric: Option<f64>,
}

/// `x -> L (x - c) + c + t` with `L` from rotation, scale and shear.
fn centered_affine(p: &[f64], c: &Vector3<f64>) -> AffineTransform {
    let mut ap = AffineParams::from_params(p);
    ap.translations = [0.0; 3];
    let l = ap.to_affine().linear();
    let t = c - l * c + Vector3::new(p[0], p[1], p[2]);
    AffineTransform::from_linear_and_offset(l, t)
}

fn centered_params(a: &AffineTransform, c: &Vector3<f64>) -> [f64; 12] {
    let mut p = AffineParams::from_affine(a).as_params();
    let t = a.linear() * c + a.offset() - c;
    p[0] = t[0];
    p[1] = t[1];
    p[2] = t[2];
    p
}

/// Estimates the 12-parameter affine aligning `structural` with `template`
/// by maximizing NMI over a pyramid, seeded by rigid registration.
pub fn register_affine(structural: &Volume3D, template: &Volume3D, cfg: &NormalizeConfig) -> Result<AffineRegistration> {
    cfg.validate()?;
    if let Some(a) = &cfg.external_affine {
        a.invert()?;
        return Ok(AffineRegistration { transform: *a, metric: None });
    }
    let rigid = register_rigid(structural, template, &cfg.registration)?;
    let reg = &cfg.registration;
    let tg = template.grid();
    let d = tg.dims();
    let c = Vector3::from(tg.voxel_to_world([
        (d[0] as f64 - 1.0) / 2.0,
        (d[1] as f64 - 1.0) / 2.0,
        (d[2] as f64 - 1.0) / 2.0,
    ]));
    let sp = tg.spacing();
    let radius = ((0..3).map(|a| (d[a] as f64 * sp[a]).powi(2)).sum::<f64>().sqrt() / 2.0).max(1.0);

    let fixed_pyr = pyramid(template, reg.pyramid_levels)?;
    let moving_pyr = pyramid(structural, reg.pyramid_levels)?;
    let levels = fixed_pyr.len().min(moving_pyr.len());
    let mut params = centered_params(&rigid.transform.to_affine(), &c);
    let mut best = rigid.metric;

    for level in (0..levels).rev() {
        let samples = SampleSet::new(&fixed_pyr[level], None);
        let mov = MovingImage::new(&moving_pyr[level])?;
        let step = fixed_pyr[level].spacing().iter().cloned().fold(0.0, f64::max);
        let loosen = (1u32 << level) as f64;
        let rel = step / radius;
        let opts = PowellOptions {
            scales: vec![step, step, step, rel, rel, rel, rel, rel, rel, rel, rel, rel],
            xtol: [
                [reg.translation_tolerance_mm * loosen; 3],
                [reg.rotation_tolerance_deg.to_radians() * loosen; 3],
                [SCALE_TOL * loosen; 3],
                [SCALE_TOL * loosen; 3],
            ]
            .concat(),
            max_iter: reg.max_iter_per_level,
            max_step: 2.0,
        };
        let cost = |p: &[f64]| -> f64 {
            if p[6..9].iter().any(|s| !(*s > 0.05)) {
                return f64::INFINITY;
            }
            match similarity(&samples, &mov, &centered_affine(p, &c), reg.metric, reg.histogram_bins) {
                Some(v) => -v,
                None => f64::INFINITY,
            }
        };
        let start_cost = cost(&params);
        let result = powell(cost, &params, &opts);
        if result.value < start_cost {
            params.copy_from_slice(&result.x);
            best = -result.value;
        } else if level == 0 {
            best = -start_cost;
        }
    }
    if !best.is_finite() {
        return Err(Error::Registration {
            reason: "affine metric undefined at the final level".into(),
            best: rigid.transform,
        });
    }
    Ok(AffineRegistration { transform: centered_affine(&params, &c), metric: Some(best) })
}

/// Grid covering the template's field of view, with the template's axis
/// directions and the requested spacing, centred on the template.
pub fn template_output_grid(template: &GridSpec, spacing: [f64; 3]) -> Result<GridSpec> {
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Parameter(format!("output spacing must be positive, got {spacing:?}")));
    }
    let d = template.dims();
    let sp = template.spacing();
    let lin = template.affine().linear();
    let mut dirs = Matrix3::zeros();
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dirs.set_column(a, &(lin.column(a) / sp[a]));
        dims[a] = ((d[a] as f64 * sp[a] / spacing[a]).round() as usize).max(1);
    }
    let centre = Vector3::from(template.voxel_to_world([
        (d[0] as f64 - 1.0) / 2.0,
        (d[1] as f64 - 1.0) / 2.0,
        (d[2] as f64 - 1.0) / 2.0,
    ]));
    let new_lin = dirs * Matrix3::from_diagonal(&Vector3::from(spacing));
    let half = Vector3::new(
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    );
    let offset = centre - new_lin * half;
    GridSpec::new(dims, AffineTransform::from_linear_and_offset(new_lin, offset))
}

/// Resamples a subject-space volume into template space at the configured
/// output spacing. Use trilinear for CBF and anatomy, nearest for masks.
pub fn normalize_volume(
    vol: &Volume3D,
    affine: &AffineTransform,
    template: &GridSpec,
    cfg: &NormalizeConfig,
    interp: Interpolation,
) -> Result<Volume3D> {
    cfg.validate()?;
    let out = template_output_grid(template, cfg.output_spacing_mm)?;
    resample(vol, &out, affine, interp)
}
