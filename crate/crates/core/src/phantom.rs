//! Synthetic volumes with known ground truth, for tests, demos and QA.
//!
//! The head phantom is defined analytically in world coordinates, so it can
//! be sampled on any grid and in any pose. Tissue fractions vary smoothly
//! across WM/GM and GM/CSF borders, which keeps local regressions well posed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::RigidTransform;
use crate::nifti::write_nifti;
use crate::quantify::AcquisitionParams;
use crate::smooth::smooth_gaussian;
use crate::volume::{BinaryMask, GridSpec, Volume3D};

/// Smooth, asymmetric intensity blob (no tissue structure), compactly
/// supported within about 26 mm of the origin.
pub fn smooth_blob(grid: &GridSpec) -> Volume3D {
    let g = grid.clone();
    Volume3D::from_fn(grid.clone(), move |i, j, k| {
        let p = g.voxel_to_world([i as f64, j as f64, k as f64]);
        smooth_blob_at(p)
    })
}

pub fn smooth_blob_at(p: [f64; 3]) -> f64 {
    let blob = |c: [f64; 3], r: [f64; 3], a: f64| {
        let d = ((p[0] - c[0]) / r[0]).powi(2) + ((p[1] - c[1]) / r[1]).powi(2) + ((p[2] - c[2]) / r[2]).powi(2);
        a * (-d * d).exp()
    };
    blob([0.0, 0.0, 0.0], [20.0, 24.0, 17.0], 100.0)
        + blob([8.0, -6.0, 4.0], [6.0, 9.0, 5.0], 60.0)
        - blob([-7.0, 5.0, -3.0], [5.0, 4.0, 7.0], 40.0)
        + blob([-10.0, -12.0, 8.0], [4.0, 4.0, 4.0], 50.0)
}

/// Shape of the head phantom in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGeometry {
    /// Semi-axes of the brain ellipsoid.
    pub radii: [f64; 3],
    /// Pose: phantom coordinates are `pose^-1(world)`.
    pub pose: RigidTransform,
}

impl Default for HeadGeometry {
    fn default() -> Self {
        Self { radii: [36.0, 44.0, 32.0], pose: RigidTransform::identity() }
    }
}

/// Ground-truth perfusion per tissue, ml/100g/min.
pub const GM_CBF: f64 = 60.0;
pub const WM_CBF: f64 = 20.0;
/// T1-weighted intensities of pure CSF, GM and WM.
pub const T1_INTENSITY: [f64; 3] = [30.0, 80.0, 130.0];
/// Proton density of pure CSF, GM and WM.
pub const PD_INTENSITY: [f64; 3] = [1000.0, 800.0, 700.0];

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl HeadGeometry {
    /// (csf, gm, wm) fractions at a world point; all zero outside the brain.
    pub fn fractions_at(&self, world: [f64; 3]) -> [f64; 3] {
        let inv = self.pose.to_affine().invert().expect("rigid transforms invert");
        self.fractions_local(inv.apply(world))
    }

    /// Fractions at a point in phantom coordinates.
    fn fractions_local(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.radii;
        let rho = ((p[0] / r[0]).powi(2) + (p[1] / r[1]).powi(2) + (p[2] / r[2]).powi(2)).sqrt();
        if rho >= 1.0 {
            return [0.0; 3];
        }
        // a slight left/right and front/back asymmetry so poses are identifiable
        let bump = 0.06 * (p[0] / r[0]) + 0.04 * (p[1] / r[1]);
        let wm = 1.0 - smoothstep(0.42 + bump, 0.62 + bump, rho);
        let csf = smoothstep(0.80, 0.95, rho);
        let gm = (1.0 - wm - csf).max(0.0);
        // lateral ventricles: two CSF blobs
        let vent = |c: [f64; 3], s: [f64; 3]| {
            let d = ((p[0] - c[0] * r[0]) / (s[0] * r[0])).powi(2)
                + ((p[1] - c[1] * r[1]) / (s[1] * r[1])).powi(2)
                + ((p[2] - c[2] * r[2]) / (s[2] * r[2])).powi(2);
            1.0 - smoothstep(0.6, 1.0, d)
        };
        let v = vent([-0.14, 0.05, 0.05], [0.1, 0.28, 0.12]).max(vent([0.14, 0.0, 0.05], [0.09, 0.22, 0.12]));
        [csf + v * (1.0 - csf), gm * (1.0 - v), wm * (1.0 - v)]
    }
}

/// All ground-truth maps of the head phantom on one grid.
#[derive(Debug, Clone)]
pub struct HeadPhantom {
    pub p_csf: Volume3D,
    pub p_gm: Volume3D,
    pub p_wm: Volume3D,
    pub brain: BinaryMask,
    /// T1-weighted structural image.
    pub t1: Volume3D,
    /// True CBF, `GM_CBF * p_gm + WM_CBF * p_wm`.
    pub cbf: Volume3D,
    pub pd: Volume3D,
}

impl HeadPhantom {
    pub fn new(grid: &GridSpec, geom: &HeadGeometry) -> Self {
        Self::supersampled(grid, geom, 1)
    }

    /// Like [`HeadPhantom::new`], but each voxel averages `n`^3 evenly spaced
    /// samples, mimicking the partial-volume blur of a real acquisition.
    #[allow(clippy::needless_range_loop)]
    pub fn supersampled(grid: &GridSpec, geom: &HeadGeometry, n_sub: usize) -> Self {
        let n_sub = n_sub.max(1);
        let n = grid.len();
        let inv = geom.pose.to_affine().invert().expect("rigid transforms invert");
        let offsets: Vec<f64> = (0..n_sub).map(|s| (s as f64 + 0.5) / n_sub as f64 - 0.5).collect();
        let weight = 1.0 / (n_sub * n_sub * n_sub) as f64;
        let mut f = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for idx in 0..n {
            let [i, j, k] = grid.coords(idx);
            for &dx in &offsets {
                for &dy in &offsets {
                    for &dz in &offsets {
                        let w = grid.voxel_to_world([i as f64 + dx, j as f64 + dy, k as f64 + dz]);
                        let fr = geom.fractions_local(inv.apply(w));
                        for t in 0..3 {
                            f[t][idx] += weight * fr[t];
                        }
                    }
                }
            }
        }
        let mix = |w: [f64; 3]| -> Vec<f64> { (0..n).map(|i| w[0] * f[0][i] + w[1] * f[1][i] + w[2] * f[2][i]).collect() };
        let vol = |d: Vec<f64>, u: &str| Volume3D::new(grid.clone(), d, u).expect("grid sized");
        let brain = BinaryMask::new(grid.clone(), (0..n).map(|i| f[0][i] + f[1][i] + f[2][i] > 0.0).collect())
            .expect("grid sized");
        Self {
            t1: vol(mix(T1_INTENSITY), "a.u."),
            cbf: vol(mix([0.0, GM_CBF, WM_CBF]), crate::quantify::CBF_UNITS),
            pd: vol(mix(PD_INTENSITY), "a.u."),
            p_csf: vol(f[0].clone(), "probability"),
            p_gm: vol(f[1].clone(), "probability"),
            p_wm: vol(f[2].clone(), "probability"),
            brain,
        }
    }

    /// Difference image that quantifies back to `cbf` under `params`.
    pub fn delta_m(&self, params: &AcquisitionParams) -> Result<Volume3D> {
        let scale = params.scale_factor()?;
        let d = self
            .cbf
            .data()
            .iter()
            .zip(self.pd.data())
            .map(|(c, p)| c * p / scale)
            .collect();
        self.cbf.with_data(d).map(|v| v.with_units("a.u."))
    }
}

/// Adds seeded Gaussian-like noise (sum of 12 uniforms) with the given SD.
pub fn add_noise(vol: &Volume3D, sd: f64, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = vol
        .data()
        .iter()
        .map(|v| {
            let z: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
            v + sd * z
        })
        .collect();
    vol.with_data(d).expect("same grid")
}

/// pCASL timing used for synthetic subjects.
pub fn fixture_acquisition() -> AcquisitionParams {
    AcquisitionParams::pcasl(1.8, 1.8)
}

/// Template for synthetic subjects: the default phantom's T1 image on a
/// 2 mm grid, smoothed with a 4 mm kernel.
pub fn template_volume() -> Result<Volume3D> {
    let g = GridSpec::centered([40, 48, 36], [2.0; 3])?;
    smooth_gaussian(&HeadPhantom::new(&g, &HeadGeometry::default()).t1, [4.0; 3])
}

/// Input files of one synthetic subject.
#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub asl_difference: PathBuf,
    pub pd: PathBuf,
    pub structural: PathBuf,
    /// Head geometry in the structural session.
    pub geometry: HeadGeometry,
    /// Head pose in the ASL session.
    pub asl_pose: RigidTransform,
}

/// Writes a difference image, PD image and T1-weighted scan for a synthetic
/// subject. Head size and pose vary with `variant`; the head moves slightly
/// between the structural and ASL sessions.
pub fn write_synthetic_subject(dir: &Path, id: &str, variant: u64) -> Result<SyntheticSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(variant);
    let base = HeadGeometry::default();
    let mut jitter = |a: f64| rng.random_range(-a..=a);
    let radii = [0, 1, 2].map(|a| base.radii[a] * (1.0 + jitter(0.05)));
    let deg = |d: f64| d.to_radians();
    let pose = RigidTransform::new(
        [deg(jitter(3.0)), deg(jitter(3.0)), deg(jitter(3.0))],
        [jitter(3.0), jitter(3.0), jitter(3.0)],
    );
    let motion = RigidTransform::new(
        [deg(jitter(2.0)), deg(jitter(2.0)), deg(jitter(2.0))],
        [jitter(2.0), jitter(2.0), jitter(2.0)],
    );
    let asl_pose = RigidTransform::from_affine(&motion.to_affine().compose(&pose.to_affine()))?;

    let geometry = HeadGeometry { radii, pose };
    let sg = GridSpec::centered([60, 68, 56], [1.5; 3])?;
    let clean = HeadPhantom::supersampled(&sg, &geometry, 2).t1;
    let noisy = add_noise(&clean, 2.0, variant ^ 0x5151);
    // noise inside the head only, as in a skull-stripped scan
    let t1 = clean.with_data(
        noisy.data().iter().zip(clean.data()).map(|(n, c)| if *c > 0.0 { n.max(0.0) } else { 0.0 }).collect(),
    )?;

    let ag = GridSpec::centered([28, 32, 24], [3.5, 3.5, 4.0])?;
    let asl_head = HeadPhantom::supersampled(&ag, &HeadGeometry { radii, pose: asl_pose }, 3);
    let dm = add_noise(&asl_head.delta_m(&fixture_acquisition())?, 0.1, variant ^ 0xA51);

    let out = SyntheticSubject {
        asl_difference: dir.join(format!("{id}_asl_diff.nii.gz")),
        pd: dir.join(format!("{id}_pd.nii.gz")),
        structural: dir.join(format!("{id}_t1.nii.gz")),
        geometry,
        asl_pose,
    };
    write_nifti(&dm, &out.asl_difference)?;
    write_nifti(&asl_head.pd, &out.pd)?;
    write_nifti(&t1, &out.structural)?;
    Ok(out)
}
