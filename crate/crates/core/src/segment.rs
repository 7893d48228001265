//! Three-class tissue probability estimation.
//!
//! A one-dimensional Gaussian mixture is fitted by EM to the standardized
//! intensities inside a brain mask. Components are mapped to CSF/GM/WM by
//! their mean intensity, ascending for T1-weighted and descending for
//! T2-weighted input. No spatial prior is used.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AffineTransform;
use crate::nifti::read_nifti;
use crate::resample::{resample, Interpolation};
use crate::volume::{ensure_same_grid, BinaryMask, GridSpec, Volume3D};

const CHUNK: usize = 4096;
const KMEANS_ITERS: usize = 25;
const VAR_FLOOR: f64 = 1e-6;
/// Maximum allowed GM+WM+CSF after clamping external maps.
pub const EXTERNAL_SUM_LIMIT: f64 = 1.0 + 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Contrast {
    #[default]
    T1w,
    T2w,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub max_iter: usize,
    /// Stop when the log-likelihood gain per voxel drops below this.
    pub tolerance_per_voxel: f64,
    pub seed: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tolerance_per_voxel: 1e-6,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TissueProbMaps {
    pub p_gm: Volume3D,
    pub p_wm: Volume3D,
    pub p_csf: Volume3D,
}

impl TissueProbMaps {
    pub fn grid(&self) -> &GridSpec {
        self.p_gm.grid()
    }

    /// Checks the shared grid, the [0,1] range and `sum <= 1 + 1e-6`.
    pub fn validate(&self) -> Result<()> {
        ensure_same_grid(self.p_gm.grid(), self.p_wm.grid(), "tissue maps")?;
        ensure_same_grid(self.p_gm.grid(), self.p_csf.grid(), "tissue maps")?;
        for (idx, ((g, w), c)) in self
            .p_gm
            .data()
            .iter()
            .zip(self.p_wm.data())
            .zip(self.p_csf.data())
            .enumerate()
        {
            for p in [g, w, c] {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Validation(format!(
                        "tissue probability {p} outside [0,1] at voxel {idx}"
                    )));
                }
            }
            if g + w + c > 1.0 + 1e-6 {
                return Err(Error::Validation(format!(
                    "tissue probabilities sum to {} at voxel {idx}",
                    g + w + c
                )));
            }
        }
        Ok(())
    }

    pub fn resample_to(&self, target: &GridSpec, world_map: &AffineTransform) -> Result<Self> {
        let r = |v: &Volume3D| resample(v, target, world_map, Interpolation::Trilinear);
        let maps = Self {
            p_gm: r(&self.p_gm)?,
            p_wm: r(&self.p_wm)?,
            p_csf: r(&self.p_csf)?,
        };
        // trilinear weights are convex, so the sum constraint survives up to rounding
        Ok(maps.renormalized())
    }

    fn renormalized(mut self) -> Self {
        let n = self.p_gm.data().len();
        let mut g = self.p_gm.data().to_vec();
        let mut w = self.p_wm.data().to_vec();
        let mut c = self.p_csf.data().to_vec();
        for i in 0..n {
            g[i] = g[i].clamp(0.0, 1.0);
            w[i] = w[i].clamp(0.0, 1.0);
            c[i] = c[i].clamp(0.0, 1.0);
            let s = g[i] + w[i] + c[i];
            if s > 1.0 {
                g[i] /= s;
                w[i] /= s;
                c[i] /= s;
            }
        }
        self.p_gm = self.p_gm.with_data(g).expect("same grid");
        self.p_wm = self.p_wm.with_data(w).expect("same grid");
        self.p_csf = self.p_csf.with_data(c).expect("same grid");
        self
    }
}

/// Fitted mixture in original intensity units, ordered by ascending mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFit {
    pub means: [f64; 3],
    pub variances: [f64; 3],
    pub weights: [f64; 3],
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Gmm {
    mean: [f64; 3],
    var: [f64; 3],
    weight: [f64; 3],
}

impl Gmm {
    /// Log of `weight_c * N(x | mean_c, var_c)` per component.
    #[inline]
    #[allow(clippy::needless_range_loop)]
    fn log_terms(&self, x: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let d = x - self.mean[c];
            out[c] = self.weight[c].ln()
                - 0.5 * (2.0 * std::f64::consts::PI * self.var[c]).ln()
                - 0.5 * d * d / self.var[c];
        }
        out
    }

    /// Responsibilities and log p(x).
    #[inline]
    fn posterior(&self, x: f64) -> ([f64; 3], f64) {
        let t = self.log_terms(x);
        let m = t[0].max(t[1]).max(t[2]);
        let e = [(t[0] - m).exp(), (t[1] - m).exp(), (t[2] - m).exp()];
        let s = e[0] + e[1] + e[2];
        ([e[0] / s, e[1] / s, e[2] / s], m + s.ln())
    }
}

fn kmeans_pp(x: &[f64], seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![x[rng.random_range(0..x.len())]];
    while centers.len() < 3 {
        let d2: Vec<f64> = x
            .iter()
            .map(|&v| centers.iter().map(|&c| (v - c) * (v - c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centers.push(centers[centers.len() - 1]);
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = x.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.push(x[pick]);
    }
    let mut c = [centers[0], centers[1], centers[2]];
    for _ in 0..KMEANS_ITERS {
        let mut sum = [0.0; 3];
        let mut cnt = [0usize; 3];
        for &v in x {
            let k = nearest(&c, v);
            sum[k] += v;
            cnt[k] += 1;
        }
        let mut next = c;
        for k in 0..3 {
            if cnt[k] > 0 {
                next[k] = sum[k] / cnt[k] as f64;
            }
        }
        if next == c {
            break;
        }
        c = next;
    }
    c
}

fn nearest(c: &[f64; 3], v: f64) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if (v - c[k]).abs() < (v - c[best]).abs() {
            best = k;
        }
    }
    best
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: [f64; 3],
    sx: [f64; 3],
    sxx: [f64; 3],
    ll: f64,
}

#[allow(clippy::needless_range_loop)]
fn e_step(gmm: &Gmm, x: &[f64]) -> Moments {
    let parts: Vec<Moments> = x
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut m = Moments::default();
            for &v in chunk {
                let (r, lp) = gmm.posterior(v);
                for c in 0..3 {
                    m.n[c] += r[c];
                    m.sx[c] += r[c] * v;
                    m.sxx[c] += r[c] * v * v;
                }
                m.ll += lp;
            }
            m
        })
        .collect();
    parts.into_iter().fold(Moments::default(), |mut acc, m| {
        for c in 0..3 {
            acc.n[c] += m.n[c];
            acc.sx[c] += m.sx[c];
            acc.sxx[c] += m.sxx[c];
        }
        acc.ll += m.ll;
        acc
    })
}

fn m_step(m: &Moments, total: f64) -> Gmm {
    let mut g = Gmm {
        mean: [0.0; 3],
        var: [1.0; 3],
        weight: [1.0 / 3.0; 3],
    };
    for c in 0..3 {
        let n = m.n[c].max(1e-12);
        g.mean[c] = m.sx[c] / n;
        g.var[c] = (m.sxx[c] / n - g.mean[c] * g.mean[c]).max(VAR_FLOOR);
        g.weight[c] = (m.n[c] / total).max(1e-12);
    }
    g
}

/// Fits the 3-component mixture to `samples`. Deterministic for a fixed seed.
pub fn fit_mixture(samples: &[f64], cfg: &SegmentConfig) -> Result<MixtureFit> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("need at least 3 samples, got {n}")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Degenerate("masked intensities have zero variance".into()));
    }
    let sd = var.sqrt();
    let x: Vec<f64> = samples.iter().map(|v| (v - mean) / sd).collect();
    let (gmm, trace) = em(&x, cfg)?;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| gmm.mean[a].total_cmp(&gmm.mean[b]));
    Ok(MixtureFit {
        means: order.map(|c| gmm.mean[c] * sd + mean),
        variances: order.map(|c| gmm.var[c] * var),
        weights: order.map(|c| gmm.weight[c]),
        log_likelihood_trace: trace,
    })
}

fn em(x: &[f64], cfg: &SegmentConfig) -> Result<(Gmm, Vec<f64>)> {
    let n = x.len() as f64;
    let centers = kmeans_pp(x, cfg.seed);
    let mut init = Moments::default();
    for &v in x {
        let k = nearest(&centers, v);
        init.n[k] += 1.0;
        init.sx[k] += v;
        init.sxx[k] += v * v;
    }
    let mut gmm = m_step(&init, n);
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter {
        let m = e_step(&gmm, x);
        trace.push(m.ll);
        if !m.ll.is_finite() {
            return Err(Error::Convergence { trace });
        }
        if (m.ll - prev) / n < cfg.tolerance_per_voxel {
            return Ok((gmm, trace));
        }
        prev = m.ll;
        gmm = m_step(&m, n);
    }
    Err(Error::Convergence { trace })
}

/// Three-class posterior maps inside `mask`, zero outside.
pub fn segment_tissues(
    structural: &Volume3D,
    mask: &BinaryMask,
    contrast: Contrast,
    cfg: &SegmentConfig,
) -> Result<TissueProbMaps> {
    ensure_same_grid(structural.grid(), mask.grid(), "segmentation")?;
    let idx: Vec<usize> = mask.indices().collect();
    if idx.is_empty() {
        return Err(Error::Degenerate("segmentation mask is empty".into()));
    }
    let samples: Vec<f64> = idx.iter().map(|&i| structural.data()[i]).collect();
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("structural volume has non-finite voxels in the mask".into()));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return Err(Error::Degenerate("masked intensities have zero variance".into()));
    }
    let sd = var.sqrt();
    let x: Vec<f64> = samples.iter().map(|v| (v - mean) / sd).collect();
    let (gmm, _) = em(&x, cfg)?;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| gmm.mean[a].total_cmp(&gmm.mean[b]));
    // [csf, gm, wm] component indices
    let roles = match contrast {
        Contrast::T1w => [order[0], order[1], order[2]],
        Contrast::T2w => [order[2], order[1], order[0]],
    };

    let len = structural.data().len();
    let mut csf = vec![0.0; len];
    let mut gm = vec![0.0; len];
    let mut wm = vec![0.0; len];
    for (&vi, &v) in idx.iter().zip(&x) {
        let (r, _) = gmm.posterior(v);
        let (c, g, w) = (r[roles[0]], r[roles[1]], r[roles[2]]);
        let s = c + g + w;
        csf[vi] = c / s;
        gm[vi] = g / s;
        wm[vi] = w / s;
    }
    let mk = |d: Vec<f64>| structural.with_data(d).map(|v| v.with_units("probability"));
    Ok(TissueProbMaps {
        p_gm: mk(gm)?,
        p_wm: mk(wm)?,
        p_csf: mk(csf)?,
    })
}

/// Brings externally produced GM/WM/CSF maps onto `target`: trilinear
/// resampling (world frames assumed shared), clamping to [0,1] and sum
/// validation. Sums above [`EXTERNAL_SUM_LIMIT`] are rejected; smaller
/// excesses are rescaled to 1.
pub fn tissue_maps_from_volumes(
    gm: &Volume3D,
    wm: &Volume3D,
    csf: &Volume3D,
    target: &GridSpec,
) -> Result<TissueProbMaps> {
    let id = AffineTransform::identity();
    let prep = |v: &Volume3D| -> Result<Vec<f64>> {
        let r = if v.grid().matches(target, 1e-9) {
            v.clone()
        } else {
            resample(v, target, &id, Interpolation::Trilinear)?
        };
        Ok(r.data().iter().map(|p| p.clamp(0.0, 1.0)).collect())
    };
    let (mut g, mut w, mut c) = (prep(gm)?, prep(wm)?, prep(csf)?);
    for i in 0..g.len() {
        let s = g[i] + w[i] + c[i];
        if s > EXTERNAL_SUM_LIMIT {
            return Err(Error::Validation(format!(
                "external tissue maps sum to {s:.4} at voxel {i} (limit {EXTERNAL_SUM_LIMIT})"
            )));
        }
        if s > 1.0 {
            g[i] /= s;
            w[i] /= s;
            c[i] /= s;
        }
    }
    let mk = |d: Vec<f64>| Volume3D::new(target.clone(), d, "probability");
    let maps = TissueProbMaps {
        p_gm: mk(g)?,
        p_wm: mk(w)?,
        p_csf: mk(c)?,
    };
    maps.validate()?;
    Ok(maps)
}

/// Loads GM, WM and CSF maps (in that order) and prepares them as in
/// [`tissue_maps_from_volumes`].
pub fn accept_external_tissue_maps(paths: [&Path; 3], target: &GridSpec) -> Result<TissueProbMaps> {
    let gm = read_nifti(paths[0])?;
    let wm = read_nifti(paths[1])?;
    let csf = read_nifti(paths[2])?;
    tissue_maps_from_volumes(&gm, &wm, &csf, target)
}
