//! Separable Gaussian smoothing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// FWHM / sigma for a Gaussian, `2 sqrt(2 ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Unit-sum kernel for `sigma` voxels, truncated at `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let half = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Smooths with a Gaussian of the given per-axis FWHM in millimetres.
/// Voxels beyond the grid are treated as zero. A zero FWHM leaves that axis
/// untouched.
pub fn smooth_gaussian(vol: &Volume3D, fwhm_mm: [f64; 3]) -> Result<Volume3D> {
    smooth_gaussian_ordered(vol, fwhm_mm, [0, 1, 2])
}

/// As [`smooth_gaussian`] with an explicit axis order; the result does not
/// depend on it beyond rounding.
pub fn smooth_gaussian_ordered(vol: &Volume3D, fwhm_mm: [f64; 3], order: [usize; 3]) -> Result<Volume3D> {
    if fwhm_mm.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(Error::Parameter(format!("smoothing FWHM must be finite and >= 0, got {fwhm_mm:?}")));
    }
    let mut sorted = order;
    sorted.sort_unstable();
    if sorted != [0, 1, 2] {
        return Err(Error::Parameter(format!("axis order {order:?} is not a permutation of 0..3")));
    }
    if fwhm_mm == [0.0; 3] {
        return Ok(vol.clone());
    }
    let spacing = vol.spacing();
    let dims = vol.dims();
    let mut data = vol.data().to_vec();
    for axis in order {
        let kernel = gaussian_kernel(fwhm_mm[axis] / FWHM_PER_SIGMA / spacing[axis]);
        if kernel.len() > 1 {
            data = convolve_axis(&data, dims, axis, &kernel);
        }
    }
    vol.with_data(data)
}

fn convolve_axis(src: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis] as i64;
    let half = (kernel.len() / 2) as i64;
    let slab = dims[0] * dims[1];
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(k, plane)| {
        for (local, o) in plane.iter_mut().enumerate() {
            let idx = k * slab + local;
            let pos = ((idx / stride) % dims[axis]) as i64;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let q = pos + t as i64 - half;
                if q >= 0 && q < n {
                    let nidx = (idx as i64 + (q - pos) * stride as i64) as usize;
                    acc += w * src[nidx];
                }
            }
            *o = acc;
        }
    });
    out
}
