//! Pull-back resampling of a volume onto another grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::AffineTransform;
use crate::volume::{GridSpec, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

const SNAP: f64 = 1e-9;

#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// Trilinear sample at continuous voxel coordinates; `None` outside the grid.
#[inline]
pub(crate) fn trilinear_at(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> Option<f64> {
    let [nx, ny, nz] = dims;
    let (x, y, z) = (p[0], p[1], p[2]);
    if !(x >= 0.0 && y >= 0.0 && z >= 0.0)
        || x > (nx - 1) as f64
        || y > (ny - 1) as f64
        || z > (nz - 1) as f64
    {
        return None;
    }
    let x0 = (x.floor() as usize).min(nx - 1);
    let y0 = (y.floor() as usize).min(ny - 1);
    let z0 = (z.floor() as usize).min(nz - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let fz = z - z0 as f64;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let at = |i: usize, j: usize, k: usize| data[i + nx * (j + ny * k)];
    if fx == 0.0 && fy == 0.0 && fz == 0.0 {
        return Some(at(x0, y0, z0));
    }
    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    Some(c0 * (1.0 - fz) + c1 * fz)
}

#[inline]
pub(crate) fn nearest_at(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> Option<f64> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = (p[a] + 0.5).floor();
        if !(r >= 0.0) || r >= dims[a] as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(data[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])])
}

/// Target-voxel → source-voxel map for a pull-back `world_map`.
pub(crate) fn voxel_map(
    src: &GridSpec,
    target: &GridSpec,
    world_map: &AffineTransform,
) -> Result<AffineTransform> {
    let src_inv = src.affine().invert()?;
    Ok(src_inv.compose(&world_map.compose(target.affine())))
}

/// Samples `src` on `target`. `world_map` takes target-world coordinates to
/// source-world coordinates. Samples falling outside `src` are 0.
pub fn resample(
    src: &Volume3D,
    target: &GridSpec,
    world_map: &AffineTransform,
    interp: Interpolation,
) -> Result<Volume3D> {
    // surfaces singular maps as geometry errors
    world_map.invert()?;
    let m = voxel_map(src.grid(), target, world_map)?;
    let [tx, ty, _] = target.dims();
    let sdims = src.dims();
    let sdata = src.data();
    let mut out = vec![0.0; target.len()];
    out.par_chunks_mut(tx * ty).enumerate().for_each(|(k, slice)| {
        for j in 0..ty {
            for i in 0..tx {
                let p = m.apply([i as f64, j as f64, k as f64]);
                let p = [snap(p[0]), snap(p[1]), snap(p[2])];
                let v = match interp {
                    Interpolation::Nearest => nearest_at(sdata, sdims, p),
                    Interpolation::Trilinear => trilinear_at(sdata, sdims, p),
                };
                slice[i + tx * j] = v.unwrap_or(0.0);
            }
        }
    });
    Volume3D::new(target.clone(), out, src.units())
}
