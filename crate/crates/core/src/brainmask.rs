//! Intensity/morphology brain masks for ASL and structural volumes.

use crate::error::{Error, Result};
use crate::morphology::{close, fill_holes, largest_component, Connectivity};
use crate::util::robust_max;
use crate::volume::{BinaryMask, Volume3D};

const OTSU_BINS: usize = 256;

/// Conservative mask for noisy ASL maps: `|v| >= frac * robust_max`, then the
/// largest 6-connected component, then a 3x3x3 closing.
pub fn rough_strip(asl: &Volume3D, frac: f64) -> Result<BinaryMask> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Parameter(format!("rough_strip fraction must lie in (0, 1), got {frac}")));
    }
    if asl.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("ASL volume contains non-finite values".into()));
    }
    let reference = robust_max(asl.data())
        .filter(|r| *r > 0.0)
        .ok_or_else(|| Error::Degenerate("ASL volume has no nonzero voxels".into()))?;
    let threshold = frac * reference;
    let above: Vec<bool> = asl.data().iter().map(|v| v.abs() >= threshold).collect();
    let dims = asl.dims();
    let kept = close(&largest_component(&above, dims, Connectivity::Six), dims);
    if !kept.iter().any(|&v| v) {
        return Err(Error::Degenerate("rough strip produced an empty mask".into()));
    }
    BinaryMask::new(asl.grid().clone(), kept)
}

/// Otsu threshold over the given samples: the returned value separates the
/// classes as `v >= threshold`. `None` when all samples are equal.
pub fn otsu_threshold(samples: &[f64]) -> Option<f64> {
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if samples.is_empty() || !(hi > lo) {
        return None;
    }
    let range = hi - lo;
    let bin_of = |v: f64| (((v - lo) / range * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1);
    let mut hist = [0u64; OTSU_BINS];
    for &v in samples {
        hist[bin_of(v)] += 1;
    }
    let total = samples.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    // smallest sample that falls above the chosen bin
    samples
        .iter()
        .copied()
        .filter(|&v| bin_of(v) > best_t)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
}

/// Brain mask from a structural scan: Otsu threshold over nonzero voxels,
/// largest 6-connected component, 3x3x3 closing and interior hole filling.
///
/// When every nonzero voxel shares one intensity (an already-masked uniform
/// image) the nonzero support itself is the foreground.
pub fn brain_mask_structural(structural: &Volume3D) -> Result<BinaryMask> {
    let data = structural.data();
    if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Degenerate(
            "structural volume must be finite and non-negative".into(),
        ));
    }
    let nonzero: Vec<f64> = data.iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Degenerate("structural volume is all zero".into()));
    }
    let threshold = match otsu_threshold(&nonzero) {
        Some(t) => t,
        None if nonzero.len() < data.len() => nonzero[0],
        None => {
            return Err(Error::Degenerate(
                "structural volume has a single intensity; Otsu threshold undefined".into(),
            ))
        }
    };
    let fg: Vec<bool> = data.iter().map(|&v| v != 0.0 && v >= threshold).collect();
    let dims = structural.dims();
    let mask = fill_holes(&close(&largest_component(&fg, dims, Connectivity::Six), dims), dims);
    BinaryMask::new(structural.grid().clone(), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;

    fn sphere(n: usize, r: f64, value: f64) -> Volume3D {
        let g = GridSpec::centered([n, n, n], [2.0; 3]).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        Volume3D::from_fn(g, |i, j, k| {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
            if d2 <= r * r { value } else { 0.0 }
        })
    }

    #[test]
    fn uniform_volume_is_full_mask() {
        let g = GridSpec::centered([6, 5, 4], [2.0; 3]).unwrap();
        let v = Volume3D::from_fn(g, |_, _, _| 7.0);
        assert_eq!(rough_strip(&v, 0.5).unwrap().count(), 120);
    }

    #[test]
    fn sphere_recovered_exactly() {
        for r in [3.0, 5.5, 7.2] {
            let v = sphere(20, r, 100.0);
            let m = rough_strip(&v, 0.3).unwrap();
            let expected: Vec<bool> = v.data().iter().map(|&x| x > 0.0).collect();
            assert_eq!(m.values(), &expected[..], "radius {r}");
        }
    }

    #[test]
    fn all_zero_is_degenerate() {
        let g = GridSpec::centered([4, 4, 4], [2.0; 3]).unwrap();
        assert!(matches!(rough_strip(&Volume3D::zeros(g), 0.2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rough_strip_drops_small_islands() {
        let mut v = sphere(16, 4.0, 100.0).into_data();
        v[0] = 90.0;
        let g = GridSpec::centered([16, 16, 16], [2.0; 3]).unwrap();
        let m = rough_strip(&Volume3D::new(g, v, "a").unwrap(), 0.3).unwrap();
        assert!(!m.values()[0]);
    }

    #[test]
    fn otsu_separates_two_levels() {
        let s: Vec<f64> = (0..100).map(|i| if i < 60 { 30.0 } else { 100.0 }).collect();
        assert_eq!(otsu_threshold(&s), Some(100.0));
        assert_eq!(otsu_threshold(&[5.0, 5.0]), None);
    }

    #[test]
    fn constant_structural_is_degenerate() {
        let g = GridSpec::centered([5, 5, 5], [1.0; 3]).unwrap();
        let v = Volume3D::from_fn(g, |_, _, _| 3.0);
        assert!(matches!(brain_mask_structural(&v), Err(Error::Degenerate(_))));
    }
}
