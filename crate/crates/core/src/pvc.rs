//! Partial-volume correction of CBF maps.
//!
//! Two methods: a global WM/GM ratio correction (`I / (P_GM + r P_WM)`) and
//! a local linear regression that models each voxel as
//! `P_GM CBF_GM + P_WM CBF_WM` over a small kernel, with CSF contributing
//! nothing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::TissueProbMaps;
use crate::volume::{ensure_same_grid, BinaryMask, Volume3D};

/// Below this `P_GM + r P_WM` the global correction emits 0.
pub const PET_MIN_DENOMINATOR: f64 = 0.1;
/// Share of kernel tissue probability a single tissue needs for the
/// one-column fallback.
pub const DOMINANT_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvcConfig {
    pub kernel_dims: [usize; 3],
    pub wm_gm_ratio: f64,
    pub condition_limit: f64,
    pub min_valid_fraction: f64,
    pub clamp_negative: bool,
}

impl Default for PvcConfig {
    fn default() -> Self {
        Self {
            kernel_dims: [5, 5, 1],
            wm_gm_ratio: 0.4,
            condition_limit: 1e6,
            min_valid_fraction: 0.5,
            clamp_negative: true,
        }
    }
}

impl PvcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_dims.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Parameter(format!("PVC kernel dims must be odd and positive, got {:?}", self.kernel_dims)));
        }
        if !(self.wm_gm_ratio > 0.0 && self.wm_gm_ratio.is_finite()) {
            return Err(Error::Parameter(format!("wm_gm_ratio must be > 0, got {}", self.wm_gm_ratio)));
        }
        if !(self.condition_limit >= 1.0) {
            return Err(Error::Parameter(format!("condition_limit must be >= 1, got {}", self.condition_limit)));
        }
        if !(self.min_valid_fraction > 0.0 && self.min_valid_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "min_valid_fraction must lie in (0, 1], got {}",
                self.min_valid_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvcDiagnostics {
    pub in_mask: usize,
    /// Voxels given a regression (or ratio) estimate.
    pub solved: usize,
    /// Voxels where no estimate was possible (output 0).
    pub rank_deficient: usize,
    /// Voxels with too little in-mask support (local) or a denominator
    /// below [`PET_MIN_DENOMINATOR`] (global).
    pub low_support: usize,
    /// Voxels solved with the single-tissue fallback.
    pub single_tissue: usize,
    pub negative_clamped: usize,
}

impl PvcDiagnostics {
    fn merge(mut self, o: Self) -> Self {
        self.in_mask += o.in_mask;
        self.solved += o.solved;
        self.rank_deficient += o.rank_deficient;
        self.low_support += o.low_support;
        self.single_tissue += o.single_tissue;
        self.negative_clamped += o.negative_clamped;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvcResult {
    pub cbf_gm: Volume3D,
    pub cbf_wm: Option<Volume3D>,
    pub diagnostics: PvcDiagnostics,
}

fn check_inputs(cbf: &Volume3D, tissue: &TissueProbMaps, mask: &BinaryMask) -> Result<()> {
    ensure_same_grid(cbf.grid(), tissue.p_gm.grid(), "PVC: CBF and GM map")?;
    ensure_same_grid(cbf.grid(), tissue.p_wm.grid(), "PVC: CBF and WM map")?;
    ensure_same_grid(cbf.grid(), mask.grid(), "PVC: CBF and mask")
}

/// Global-ratio correction `I / (P_GM + ratio P_WM)`; GM map only.
pub fn pvc_pet(cbf: &Volume3D, tissue: &TissueProbMaps, mask: &BinaryMask, cfg: &PvcConfig) -> Result<PvcResult> {
    cfg.validate()?;
    check_inputs(cbf, tissue, mask)?;
    let mut diag = PvcDiagnostics::default();
    let out: Vec<f64> = cbf
        .data()
        .iter()
        .zip(tissue.p_gm.data())
        .zip(tissue.p_wm.data())
        .zip(mask.values())
        .map(|(((&i, &g), &w), &m)| {
            if !m {
                return 0.0;
            }
            diag.in_mask += 1;
            let den = g + cfg.wm_gm_ratio * w;
            if !(den >= PET_MIN_DENOMINATOR) || !i.is_finite() {
                diag.low_support += 1;
                diag.rank_deficient += 1;
                return 0.0;
            }
            diag.solved += 1;
            let v = i / den;
            if cfg.clamp_negative && v < 0.0 {
                diag.negative_clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok(PvcResult { cbf_gm: cbf.with_data(out)?, cbf_wm: None, diagnostics: diag })
}

/// Local least-squares estimate of GM and WM CBF over a `kernel_dims`
/// neighbourhood restricted to the mask.
pub fn pvc_asllani(cbf: &Volume3D, tissue: &TissueProbMaps, mask: &BinaryMask, cfg: &PvcConfig) -> Result<PvcResult> {
    cfg.validate()?;
    check_inputs(cbf, tissue, mask)?;
    let dims = cbf.dims();
    let [nx, ny, _] = dims;
    let slab = nx * ny;
    let y = cbf.data();
    let g = tissue.p_gm.data();
    let w = tissue.p_wm.data();
    let m = mask.values();
    let half = cfg.kernel_dims.map(|k| (k / 2) as isize);
    let kernel_size = cfg.kernel_dims.iter().product::<usize>() as f64;

    let planes: Vec<(Vec<f64>, Vec<f64>, PvcDiagnostics)> = (0..dims[2])
        .into_par_iter()
        .map(|k| {
            let mut gm_out = vec![0.0; slab];
            let mut wm_out = vec![0.0; slab];
            let mut diag = PvcDiagnostics::default();
            for j in 0..ny {
                for i in 0..nx {
                    let idx = i + nx * (j + ny * k);
                    if !m[idx] {
                        continue;
                    }
                    diag.in_mask += 1;
                    let mut s = LocalSums::default();
                    for dz in -half[2]..=half[2] {
                        let z = k as isize + dz;
                        if z < 0 || z >= dims[2] as isize {
                            continue;
                        }
                        for dy in -half[1]..=half[1] {
                            let yy = j as isize + dy;
                            if yy < 0 || yy >= ny as isize {
                                continue;
                            }
                            for dx in -half[0]..=half[0] {
                                let x = i as isize + dx;
                                if x < 0 || x >= nx as isize {
                                    continue;
                                }
                                let n = x as usize + nx * (yy as usize + ny * z as usize);
                                if m[n] && y[n].is_finite() {
                                    s.add(g[n], w[n], y[n]);
                                }
                            }
                        }
                    }
                    let low = (s.count as f64) < cfg.min_valid_fraction * kernel_size;
                    if low {
                        diag.low_support += 1;
                    }
                    let solution = if low { None } else { s.solve_two(cfg.condition_limit) };
                    let (mut a, mut b) = match solution {
                        Some(v) => v,
                        None => match s.solve_dominant() {
                            Some(v) => {
                                diag.single_tissue += 1;
                                v
                            }
                            None => {
                                diag.rank_deficient += 1;
                                continue;
                            }
                        },
                    };
                    diag.solved += 1;
                    if cfg.clamp_negative && (a < 0.0 || b < 0.0) {
                        diag.negative_clamped += 1;
                        a = a.max(0.0);
                        b = b.max(0.0);
                    }
                    gm_out[i + nx * j] = a;
                    wm_out[i + nx * j] = b;
                }
            }
            (gm_out, wm_out, diag)
        })
        .collect();

    let mut gm = Vec::with_capacity(y.len());
    let mut wm = Vec::with_capacity(y.len());
    let mut diag = PvcDiagnostics::default();
    for (a, b, d) in planes {
        gm.extend(a);
        wm.extend(b);
        diag = diag.merge(d);
    }
    Ok(PvcResult {
        cbf_gm: cbf.with_data(gm)?,
        cbf_wm: Some(cbf.with_data(wm)?),
        diagnostics: diag,
    })
}

#[derive(Default)]
struct LocalSums {
    count: usize,
    gg: f64,
    gw: f64,
    ww: f64,
    gy: f64,
    wy: f64,
    g: f64,
    w: f64,
}

impl LocalSums {
    #[inline]
    fn add(&mut self, g: f64, w: f64, y: f64) {
        self.count += 1;
        self.gg += g * g;
        self.gw += g * w;
        self.ww += w * w;
        self.gy += g * y;
        self.wy += w * y;
        self.g += g;
        self.w += w;
    }

    /// Two-column normal equations, `None` when the 2x2 system is
    /// ill-conditioned.
    fn solve_two(&self, limit: f64) -> Option<(f64, f64)> {
        let (a, b, d) = (self.gg, self.gw, self.ww);
        let tr = a + d;
        let det = a * d - b * b;
        let disc = ((a - d) * (a - d) / 4.0 + b * b).sqrt();
        let lmax = tr / 2.0 + disc;
        let lmin = tr / 2.0 - disc;
        if !(lmin > 0.0) || lmax / lmin > limit || det <= 0.0 {
            return None;
        }
        Some(((d * self.gy - b * self.wy) / det, (a * self.wy - b * self.gy) / det))
    }

    /// One-column fit for a tissue holding at least
    /// [`DOMINANT_FRACTION`] of the kernel's GM+WM probability.
    fn solve_dominant(&self) -> Option<(f64, f64)> {
        let total = self.g + self.w;
        if !(total > 0.0) {
            return None;
        }
        if self.g >= DOMINANT_FRACTION * total && self.gg > 0.0 {
            Some((self.gy / self.gg, 0.0))
        } else if self.w >= DOMINANT_FRACTION * total && self.ww > 0.0 {
            Some((0.0, self.wy / self.ww))
        } else {
            None
        }
    }
}
