//! Rigid intensity-based registration (NMI or NCC, Powell, Gaussian pyramid).
//!
//! Transforms returned here map fixed-image world coordinates to
//! moving-image world coordinates, so `resample(moving, fixed.grid(), T)`
//! brings the moving image into alignment with the fixed one.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_matrix, AffineTransform, RigidTransform};
use crate::optimize::{powell, PowellOptions};
use crate::resample::{resample, trilinear_at, Interpolation};
use crate::smooth::smooth_gaussian;
use crate::volume::{ensure_same_grid, world_centroid_abs, BinaryMask, GridSpec, Volume3D};

const CHUNK: usize = 8192;
/// Fraction of sampled fixed voxels that must land inside the moving image.
pub const MIN_OVERLAP: f64 = 0.25;
const RESTARTS: usize = 3;
const MIN_COARSE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    NormalizedMutualInformation,
    NormalizedCrossCorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub metric: Metric,
    pub pyramid_levels: usize,
    pub histogram_bins: usize,
    pub max_iter_per_level: usize,
    pub rotation_tolerance_deg: f64,
    pub translation_tolerance_mm: f64,
    /// Starting transform; centre-of-mass alignment when absent.
    pub initial: Option<RigidTransform>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            metric: Metric::NormalizedMutualInformation,
            pyramid_levels: 3,
            histogram_bins: 64,
            max_iter_per_level: 100,
            rotation_tolerance_deg: 0.01,
            translation_tolerance_mm: 0.01,
            initial: None,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.histogram_bins < 8 {
            return Err(Error::Parameter(format!("histogram_bins must be >= 8, got {}", self.histogram_bins)));
        }
        if self.pyramid_levels < 1 {
            return Err(Error::Parameter("pyramid_levels must be >= 1".into()));
        }
        if self.max_iter_per_level < 1 {
            return Err(Error::Parameter("max_iter_per_level must be >= 1".into()));
        }
        if !(self.rotation_tolerance_deg > 0.0 && self.translation_tolerance_mm > 0.0) {
            return Err(Error::Parameter("registration tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    /// Final similarity (NMI in [1, 2] or NCC in [-1, 1]); higher is better.
    pub metric: f64,
}

/// Fixed-image samples at one pyramid level.
pub(crate) struct SampleSet {
    /// Voxel coordinates in the fixed grid.
    coords: Vec<[f64; 3]>,
    values: Vec<f64>,
    fixed_affine: AffineTransform,
    range: (f64, f64),
}

impl SampleSet {
    pub(crate) fn new(fixed: &Volume3D, mask: Option<&BinaryMask>) -> Self {
        let grid = fixed.grid();
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for (idx, &v) in fixed.data().iter().enumerate() {
            if mask.is_some_and(|m| !m.values()[idx]) || !v.is_finite() {
                continue;
            }
            let [i, j, k] = grid.coords(idx);
            coords.push([i as f64, j as f64, k as f64]);
            values.push(v);
        }
        let range = min_max(&values);
        Self { coords, values, fixed_affine: *grid.affine(), range }
    }

    pub(crate) fn len(&self) -> usize {
        self.values.len()
    }

    fn variance(&self) -> f64 {
        variance(&self.values)
    }
}

/// Moving image prepared for repeated sampling.
pub(crate) struct MovingImage<'a> {
    data: &'a [f64],
    dims: [usize; 3],
    world_to_voxel: AffineTransform,
    range: (f64, f64),
}

impl<'a> MovingImage<'a> {
    pub(crate) fn new(vol: &'a Volume3D) -> Result<Self> {
        Ok(Self {
            data: vol.data(),
            dims: vol.dims(),
            world_to_voxel: vol.affine().invert()?,
            range: min_max(vol.data()),
        })
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Parzen (linear) binning position in `[0, bins - 1]`.
#[inline]
fn bin_pos(v: f64, lo: f64, scale: f64, bins: usize) -> (usize, f64) {
    let x = ((v - lo) * scale).clamp(0.0, (bins - 1) as f64);
    let b = (x.floor() as usize).min(bins - 2);
    (b, x - b as f64)
}

/// Similarity of the fixed samples and the moving image under `world_map`
/// (fixed world to moving world). `None` when overlap is below the guard or
/// the metric is undefined.
pub(crate) fn similarity(
    samples: &SampleSet,
    moving: &MovingImage,
    world_map: &AffineTransform,
    metric: Metric,
    bins: usize,
) -> Option<f64> {
    let m = moving.world_to_voxel.compose(&world_map.compose(&samples.fixed_affine));
    let lin = m.linear();
    let off = m.offset();
    let map = |p: &[f64; 3]| -> [f64; 3] {
        let v = lin * Vector3::new(p[0], p[1], p[2]) + off;
        [v[0], v[1], v[2]]
    };
    match metric {
        Metric::NormalizedMutualInformation => {
            let (flo, fhi) = samples.range;
            let (mlo, mhi) = moving.range;
            if !(fhi > flo && mhi > mlo) {
                return None;
            }
            let fs = (bins - 1) as f64 / (fhi - flo);
            let ms = (bins - 1) as f64 / (mhi - mlo);
            let parts: Vec<(Vec<f64>, usize)> = samples
                .coords
                .par_chunks(CHUNK)
                .zip(samples.values.par_chunks(CHUNK))
                .map(|(cs, vs)| {
                    let mut h = vec![0.0; bins * bins];
                    let mut n = 0usize;
                    for (c, &fv) in cs.iter().zip(vs) {
                        let Some(mv) = trilinear_at(moving.data, moving.dims, map(c)) else {
                            continue;
                        };
                        n += 1;
                        let (fb, fw) = bin_pos(fv, flo, fs, bins);
                        let (mb, mw) = bin_pos(mv, mlo, ms, bins);
                        let row0 = fb * bins;
                        let row1 = row0 + bins;
                        h[row0 + mb] += (1.0 - fw) * (1.0 - mw);
                        h[row0 + mb + 1] += (1.0 - fw) * mw;
                        h[row1 + mb] += fw * (1.0 - mw);
                        h[row1 + mb + 1] += fw * mw;
                    }
                    (h, n)
                })
                .collect();
            let mut joint = vec![0.0; bins * bins];
            let mut n = 0usize;
            for (h, c) in parts {
                n += c;
                for (a, b) in joint.iter_mut().zip(h) {
                    *a += b;
                }
            }
            if (n as f64) < MIN_OVERLAP * samples.len() as f64 || n == 0 {
                return None;
            }
            nmi_from_joint(&joint, bins)
        }
        Metric::NormalizedCrossCorrelation => {
            let parts: Vec<[f64; 6]> = samples
                .coords
                .par_chunks(CHUNK)
                .zip(samples.values.par_chunks(CHUNK))
                .map(|(cs, vs)| {
                    let mut s = [0.0; 6];
                    for (c, &a) in cs.iter().zip(vs) {
                        let Some(b) = trilinear_at(moving.data, moving.dims, map(c)) else {
                            continue;
                        };
                        s[0] += 1.0;
                        s[1] += a;
                        s[2] += b;
                        s[3] += a * a;
                        s[4] += b * b;
                        s[5] += a * b;
                    }
                    s
                })
                .collect();
            let mut s = [0.0; 6];
            for p in parts {
                for (a, b) in s.iter_mut().zip(p) {
                    *a += b;
                }
            }
            let n = s[0];
            if n < MIN_OVERLAP * samples.len() as f64 || n < 2.0 {
                return None;
            }
            let va = s[3] / n - (s[1] / n).powi(2);
            let vb = s[4] / n - (s[2] / n).powi(2);
            let cov = s[5] / n - s[1] * s[2] / (n * n);
            (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
        }
    }
}

fn nmi_from_joint(joint: &[f64], bins: usize) -> Option<f64> {
    let total: f64 = joint.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    let mut hab = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let p = joint[a * bins + b] / total;
            pa[a] += p;
            pb[b] += p;
            if p > 0.0 {
                hab -= p * p.ln();
            }
        }
    }
    let ent = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
    (hab > 0.0).then(|| (ent(&pa) + ent(&pb)) / hab)
}

/// Normalized mutual information `(H(A) + H(B)) / H(A, B)` of two volumes on
/// the same grid, with Parzen linear binning.
pub fn normalized_mutual_information(a: &Volume3D, b: &Volume3D, bins: usize) -> Result<f64> {
    ensure_same_grid(a.grid(), b.grid(), "NMI")?;
    if bins < 8 {
        return Err(Error::Parameter(format!("histogram_bins must be >= 8, got {bins}")));
    }
    let samples = SampleSet::new(a, None);
    let moving = MovingImage::new(b)?;
    similarity(&samples, &moving, &AffineTransform::identity(), Metric::NormalizedMutualInformation, bins)
        .ok_or_else(|| Error::Degenerate("NMI undefined for constant input".into()))
}

/// Grid with half the resolution along every axis that has at least
/// `MIN_COARSE_DIM` voxels; voxel `i` of the new grid sits at old voxel
/// `2i + 0.5`.
pub(crate) fn coarser_grid(grid: &GridSpec) -> Result<GridSpec> {
    let dims = grid.dims();
    let mut s = Matrix3::identity();
    let mut o = Vector3::zeros();
    let mut nd = dims;
    for a in 0..3 {
        if dims[a] >= MIN_COARSE_DIM {
            s[(a, a)] = 2.0;
            o[a] = 0.5;
            nd[a] = dims[a].div_ceil(2);
        }
    }
    let step = AffineTransform::from_linear_and_offset(s, o);
    GridSpec::new(nd, grid.affine().compose(&step))
}

/// Smoothed, down-sampled copy of `vol`.
pub(crate) fn downsample(vol: &Volume3D) -> Result<Volume3D> {
    let target = coarser_grid(vol.grid())?;
    let sp = vol.spacing();
    let mut fwhm = [0.0; 3];
    for a in 0..3 {
        if target.dims()[a] != vol.dims()[a] {
            fwhm[a] = 2.0 * sp[a];
        }
    }
    let smoothed = smooth_gaussian(vol, fwhm)?;
    resample(&smoothed, &target, &AffineTransform::identity(), Interpolation::Trilinear)
}

pub(crate) fn downsample_mask(mask: &BinaryMask) -> Result<BinaryMask> {
    let target = coarser_grid(mask.grid())?;
    let v = resample(&mask.to_volume(), &target, &AffineTransform::identity(), Interpolation::Trilinear)?;
    BinaryMask::new(target, v.data().iter().map(|&x| x >= 0.5).collect())
}

/// Image pyramid, finest first.
pub(crate) fn pyramid(vol: &Volume3D, levels: usize) -> Result<Vec<Volume3D>> {
    let mut out = vec![vol.clone()];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        if last.dims().iter().all(|&d| d < MIN_COARSE_DIM) {
            break;
        }
        out.push(downsample(last)?);
    }
    Ok(out)
}

pub(crate) fn mask_pyramid(mask: &BinaryMask, levels: usize) -> Result<Vec<BinaryMask>> {
    let mut out = vec![mask.clone()];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        if last.grid().dims().iter().all(|&d| d < MIN_COARSE_DIM) {
            break;
        }
        out.push(downsample_mask(last)?);
    }
    Ok(out)
}

/// Rigid parameters expressed about a centre `c`: `x -> R (x - c) + c + t`.
#[derive(Debug, Clone, Copy)]
struct Centered {
    c: Vector3<f64>,
}

impl Centered {
    fn to_transform(self, p: &[f64]) -> RigidTransform {
        let r = rotation_matrix([p[3], p[4], p[5]]);
        let t = self.c - r * self.c + Vector3::new(p[0], p[1], p[2]);
        RigidTransform::new([p[3], p[4], p[5]], [t[0], t[1], t[2]])
    }

    fn params_of(self, t: &RigidTransform) -> [f64; 6] {
        let r = rotation_matrix(t.rotations);
        let tr = Vector3::from(t.translations);
        let tc = r * self.c + tr - self.c;
        [tc[0], tc[1], tc[2], t.rotations[0], t.rotations[1], t.rotations[2]]
    }
}

fn grid_center(grid: &GridSpec) -> Vector3<f64> {
    let d = grid.dims();
    let c = grid.voxel_to_world([
        (d[0] as f64 - 1.0) / 2.0,
        (d[1] as f64 - 1.0) / 2.0,
        (d[2] as f64 - 1.0) / 2.0,
    ]);
    Vector3::from(c)
}

fn grid_radius(grid: &GridSpec) -> f64 {
    let d = grid.dims();
    let s = grid.spacing();
    let ext: Vec<f64> = (0..3).map(|a| d[a] as f64 * s[a]).collect();
    (ext.iter().map(|e| e * e).sum::<f64>().sqrt() / 2.0).max(1.0)
}

/// Registers `moving` to `fixed`; see [`register_rigid_masked`].
pub fn register_rigid(moving: &Volume3D, fixed: &Volume3D, cfg: &RegistrationConfig) -> Result<Registration> {
    register_rigid_masked(moving, fixed, None, cfg)
}

/// Rigid registration maximizing NMI (or NCC), sampled on the fixed grid
/// inside `fixed_mask` when given. Coarse-to-fine over a factor-2 pyramid
/// with Powell's method at each level.
pub fn register_rigid_masked(
    moving: &Volume3D,
    fixed: &Volume3D,
    fixed_mask: Option<&BinaryMask>,
    cfg: &RegistrationConfig,
) -> Result<Registration> {
    cfg.validate()?;
    if let Some(m) = fixed_mask {
        ensure_same_grid(m.grid(), fixed.grid(), "registration mask")?;
    }
    let start = match &cfg.initial {
        Some(t) => *t,
        None => centroid_alignment(moving, fixed),
    };
    let fail = |reason: String, best: &RigidTransform| Error::Registration { reason, best: *best };

    if !(variance(moving.data()) > 0.0) {
        return Err(fail("moving image has zero intensity variance".into(), &start));
    }
    let fixed_samples = SampleSet::new(fixed, fixed_mask);
    if !(fixed_samples.variance() > 0.0) {
        return Err(fail("fixed image has zero intensity variance in the sampled region".into(), &start));
    }

    let fixed_pyr = pyramid(fixed, cfg.pyramid_levels)?;
    let moving_pyr = pyramid(moving, cfg.pyramid_levels)?;
    let mask_pyr = match fixed_mask {
        Some(m) => Some(mask_pyramid(m, cfg.pyramid_levels)?),
        None => None,
    };
    let levels = fixed_pyr.len().min(moving_pyr.len());
    let centered = Centered { c: grid_center(fixed.grid()) };
    let radius = grid_radius(fixed.grid());
    let mut params = centered.params_of(&start);
    let mut best_metric = f64::NEG_INFINITY;

    for level in (0..levels).rev() {
        let f = &fixed_pyr[level];
        let m = &moving_pyr[level];
        let samples = SampleSet::new(f, mask_pyr.as_ref().map(|p| &p[level.min(p.len() - 1)]));
        let mov = MovingImage::new(m)?;
        let spacing = f.spacing().iter().cloned().fold(0.0, f64::max);
        let loosen = (1u32 << level) as f64;
        let opts = PowellOptions {
            scales: vec![spacing, spacing, spacing, spacing / radius, spacing / radius, spacing / radius],
            xtol: [
                [cfg.translation_tolerance_mm * loosen; 3],
                [cfg.rotation_tolerance_deg.to_radians() * loosen; 3],
            ]
            .concat(),
            max_iter: cfg.max_iter_per_level,
            max_step: 2.0,
        };
        let cost = |p: &[f64]| -> f64 {
            let t = centered.to_transform(p).to_affine();
            match similarity(&samples, &mov, &t, cfg.metric, cfg.histogram_bins) {
                Some(v) => -v,
                None => f64::INFINITY,
            }
        };

        let coarsest = level == levels - 1;
        let initial_cost = cost(&params);
        let mut result = powell(cost, &params, &opts);
        if coarsest {
            // restart from the optimum with fresh directions until no gain
            let mut restarts = 0;
            while restarts < RESTARTS {
                let again = powell(cost, &result.x, &opts);
                restarts += 1;
                if !(again.value < result.value) {
                    break;
                }
                result = again;
            }
            if !result.value.is_finite() {
                return Err(fail(
                    format!(
                        "no valid metric value at the coarsest level after {restarts} restarts \
                         (overlap below {:.0}% of samples)",
                        MIN_OVERLAP * 100.0
                    ),
                    &centered.to_transform(&result.x),
                ));
            }
        }
        if result.value > initial_cost {
            result.x = params.to_vec();
            result.value = initial_cost;
        }
        if level == 0 && !result.converged {
            return Err(fail(
                format!("no convergence within {} iterations", cfg.max_iter_per_level),
                &centered.to_transform(&result.x),
            ));
        }
        params.copy_from_slice(&result.x);
        best_metric = -result.value;
    }
    if !best_metric.is_finite() {
        return Err(fail("metric undefined at the final level".into(), &centered.to_transform(&params)));
    }
    Ok(Registration { transform: centered.to_transform(&params), metric: best_metric })
}

/// Translation aligning the fixed intensity centroid with the moving one.
pub(crate) fn centroid_alignment(moving: &Volume3D, fixed: &Volume3D) -> RigidTransform {
    match (world_centroid_abs(moving), world_centroid_abs(fixed)) {
        (Some(m), Some(f)) => RigidTransform::new([0.0; 3], [m[0] - f[0], m[1] - f[1], m[2] - f[2]]),
        _ => RigidTransform::identity(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionMode {
    #[default]
    AslSpace,
    StructuralSpace,
}

/// Result of aligning ASL data with a structural scan. `transform` maps
/// structural world coordinates to ASL world coordinates.
#[derive(Debug, Clone)]
pub struct Coregistration {
    pub transform: RigidTransform,
    pub metric: f64,
    pub mode: ResolutionMode,
}

impl Coregistration {
    /// Brings a structural-space volume (anatomy, tissue map) onto the ASL
    /// grid with trilinear interpolation.
    pub fn structural_to_asl(&self, vol: &Volume3D, asl_grid: &GridSpec) -> Result<Volume3D> {
        let inv = self.transform.to_affine().invert()?;
        resample(vol, asl_grid, &inv, Interpolation::Trilinear)
    }

    /// Brings an ASL-space volume (CBF, PD) onto the structural grid with
    /// nearest-neighbour interpolation, so no new values are created.
    pub fn asl_to_structural(&self, vol: &Volume3D, structural_grid: &GridSpec) -> Result<Volume3D> {
        resample(vol, structural_grid, &self.transform.to_affine(), Interpolation::Nearest)
    }

    /// Moves `vol` into the working space chosen by `mode`. `from_asl` says
    /// which space the volume currently lives in.
    pub fn to_working_space(&self, vol: &Volume3D, from_asl: bool, asl_grid: &GridSpec, structural_grid: &GridSpec) -> Result<Volume3D> {
        match (self.mode, from_asl) {
            (ResolutionMode::AslSpace, true) | (ResolutionMode::StructuralSpace, false) => Ok(vol.clone()),
            (ResolutionMode::AslSpace, false) => self.structural_to_asl(vol, asl_grid),
            (ResolutionMode::StructuralSpace, true) => self.asl_to_structural(vol, structural_grid),
        }
    }
}

/// Outputs of [`coregister_to_structural`], all in the working space.
#[derive(Debug, Clone)]
pub struct CoregisterOutput {
    pub registration: Coregistration,
    pub asl: Volume3D,
    pub pd: Option<Volume3D>,
    pub structural: Volume3D,
}

/// Registers the PD image (or the ASL map when no PD is given) to the
/// structural scan and resamples everything into the working space.
pub fn coregister_to_structural(
    asl: &Volume3D,
    pd: Option<&Volume3D>,
    structural: &Volume3D,
    structural_mask: Option<&BinaryMask>,
    mode: ResolutionMode,
    cfg: &RegistrationConfig,
) -> Result<CoregisterOutput> {
    if let Some(pd) = pd {
        ensure_same_grid(asl.grid(), pd.grid(), "PD and ASL")?;
    }
    let driver = pd.unwrap_or(asl);
    let reg = register_rigid_masked(driver, structural, structural_mask, cfg)?;
    let registration = Coregistration { transform: reg.transform, metric: reg.metric, mode };
    let ag = asl.grid();
    let sg = structural.grid();
    Ok(CoregisterOutput {
        asl: registration.to_working_space(asl, true, ag, sg)?,
        pd: pd.map(|p| registration.to_working_space(p, true, ag, sg)).transpose()?,
        structural: registration.to_working_space(structural, false, ag, sg)?,
        registration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phantom(n: usize, spacing: f64) -> Volume3D {
        crate::phantom::smooth_blob(&GridSpec::centered([n, n, n], [spacing; 3]).unwrap())
    }

    fn moved(v: &Volume3D, t: &RigidTransform) -> Volume3D {
        // moving(x) = fixed(T^-1 x)  so that  moving(T y) = fixed(y)
        resample(v, v.grid(), &t.to_affine().invert().unwrap(), Interpolation::Trilinear).unwrap()
    }

    fn err(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
        let r = a.rotations.iter().zip(&b.rotations).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let t = a.translations.iter().zip(&b.translations).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        (r.to_degrees(), t)
    }

    #[test]
    fn self_registration_is_identity() {
        let v = phantom(32, 2.0);
        let r = register_rigid(&v, &v, &RegistrationConfig::default()).unwrap();
        let (dr, dt) = err(&r.transform, &RigidTransform::identity());
        assert!(dr < 0.05 && dt < 0.05, "{dr} {dt}");
        let other = v.map(|x| x.sqrt().max(0.0) + 0.01 * x);
        let shifted = moved(&v, &RigidTransform::new([0.0, 0.0, 0.1], [2.0, 0.0, 0.0]));
        let self_nmi = normalized_mutual_information(&v, &v, 64).unwrap();
        assert!(self_nmi >= normalized_mutual_information(&v, &shifted, 64).unwrap());
        assert!(self_nmi >= normalized_mutual_information(&v, &other, 64).unwrap() - 1e-12);
    }

    #[test]
    fn recovers_known_rotation_and_shift() {
        let v = phantom(40, 2.0);
        let truth = RigidTransform::new([0.0, 0.0, 5f64.to_radians()], [3.0, 0.0, 0.0]);
        let m = moved(&v, &truth);
        let r = register_rigid(&m, &v, &RegistrationConfig::default()).unwrap();
        let (dr, dt) = err(&r.transform, &truth);
        assert!(dr < 0.5 && dt < 0.5, "rot err {dr} deg, trans err {dt} mm: {:?}", r.transform);
    }

    #[test]
    fn ncc_recovers_shift() {
        let v = phantom(32, 2.0);
        let truth = RigidTransform::new([0.03, 0.0, 0.0], [0.0, -2.5, 1.0]);
        let m = moved(&v, &truth);
        let cfg = RegistrationConfig { metric: Metric::NormalizedCrossCorrelation, ..Default::default() };
        let r = register_rigid(&m, &v, &cfg).unwrap();
        let (dr, dt) = err(&r.transform, &truth);
        assert!(dr < 0.5 && dt < 0.5, "{dr} {dt}");
        assert!(r.metric > 0.99);
    }

    #[test]
    fn constant_moving_fails() {
        let v = phantom(16, 2.0);
        let c = v.map(|_| 5.0);
        match register_rigid(&c, &v, &RegistrationConfig::default()) {
            Err(Error::Registration { reason, .. }) => assert!(reason.contains("variance")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic() {
        let v = phantom(24, 2.0);
        let m = moved(&v, &RigidTransform::new([0.02, -0.03, 0.05], [1.0, 2.0, -1.5]));
        let cfg = RegistrationConfig::default();
        let a = register_rigid(&m, &v, &cfg).unwrap();
        let b = register_rigid(&m, &v, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = RegistrationConfig { histogram_bins: 4, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn pd_driven_carry_matches_direct_transform() {
        let structural = phantom(32, 2.0);
        let truth = RigidTransform::new([0.0, 0.02, 0.04], [2.0, -1.0, 0.5]);
        let pd = moved(&structural, &truth);
        let asl = pd.map(|x| 0.5 * x + 3.0);
        let out = coregister_to_structural(
            &asl,
            Some(&pd),
            &structural,
            None,
            ResolutionMode::StructuralSpace,
            &RegistrationConfig::default(),
        )
        .unwrap();
        let direct = resample(&asl, structural.grid(), &out.registration.transform.to_affine(), Interpolation::Nearest).unwrap();
        assert_eq!(out.asl, direct);
        assert_eq!(out.structural, structural);
        let values: std::collections::HashSet<u64> = asl.data().iter().map(|v| v.to_bits()).collect();
        assert!(out.asl.data().iter().all(|v| *v == 0.0 || values.contains(&v.to_bits())));
    }
}
