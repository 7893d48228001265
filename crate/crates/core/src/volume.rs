//! Image grids, scalar volumes and binary masks.
//!
//! Data are stored x-fastest: linear index `i + nx * (j + ny * k)`.

use crate::error::{Error, Result};
use crate::geometry::AffineTransform;

/// Voxel grid geometry: dimensions plus the voxel-index → world-mm affine.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dims: [usize; 3],
    affine: AffineTransform,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], affine: AffineTransform) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("grid dimensions must be positive, got {dims:?}")));
        }
        if affine.linear().determinant().abs() == 0.0 {
            return Err(Error::Geometry("grid affine is singular".into()));
        }
        Ok(Self { dims, affine })
    }

    /// Axis-aligned grid whose voxel (0,0,0) sits at `origin` (world mm).
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!("spacing must be positive, got {spacing:?}")));
        }
        let affine = AffineTransform::translation(origin).compose(&AffineTransform::scaling(spacing));
        Self::new(dims, affine)
    }

    /// Axis-aligned grid with the world origin at the grid centre.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [
            -(dims[0] as f64 - 1.0) / 2.0 * spacing[0],
            -(dims[1] as f64 - 1.0) / 2.0 * spacing[1],
            -(dims[2] as f64 - 1.0) / 2.0 * spacing[2],
        ];
        Self::axis_aligned(dims, spacing, origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn affine(&self) -> &AffineTransform {
        &self.affine
    }

    /// Column norms of the affine's linear block.
    pub fn spacing(&self) -> [f64; 3] {
        let lin = self.affine.linear();
        [lin.column(0).norm(), lin.column(1).norm(), lin.column(2).norm()]
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        self.affine.apply(v)
    }

    /// Same dims and affine entries within `tol`.
    pub fn matches(&self, other: &GridSpec, tol: f64) -> bool {
        self.dims == other.dims
            && (self.affine.matrix() - other.affine.matrix()).abs().max() <= tol
    }

    pub(crate) fn with_affine(&self, affine: AffineTransform) -> Result<Self> {
        Self::new(self.dims, affine)
    }
}

pub(crate) const GRID_TOL: f64 = 1e-4;

pub(crate) fn ensure_same_grid(a: &GridSpec, b: &GridSpec, what: &str) -> Result<()> {
    if a.matches(b, GRID_TOL) {
        Ok(())
    } else {
        Err(Error::Geometry(format!(
            "{what}: grids differ (dims {:?} vs {:?})",
            a.dims(),
            b.dims()
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: GridSpec,
    data: Vec<f64>,
    units: String,
}

impl Volume3D {
    pub fn new(grid: GridSpec, data: Vec<f64>, units: impl Into<String>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                grid.dims()
            )));
        }
        Ok(Self {
            grid,
            data,
            units: units.into(),
        })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![0.0; n],
            units: "arbitrary".into(),
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = grid.dims();
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self {
            grid,
            data,
            units: "arbitrary".into(),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing()
    }

    pub fn affine(&self) -> &AffineTransform {
        self.grid.affine()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = units.into();
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Same data and units on a new grid of identical dimensions.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.grid.clone(), data, self.units.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            units: self.units.clone(),
        }
    }

    /// Replaces the affine, keeping dims and data.
    pub fn with_affine(&self, affine: AffineTransform) -> Result<Self> {
        Ok(Self {
            grid: self.grid.with_affine(affine)?,
            data: self.data.clone(),
            units: self.units.clone(),
        })
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> Result<Self> {
        ensure_same_grid(&self.grid, mask.grid(), "apply_mask")?;
        let data = self
            .data
            .iter()
            .zip(mask.values())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        self.with_data(data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: GridSpec,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid: GridSpec, values: Vec<bool>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Geometry(format!(
                "mask length {} does not match grid {:?}",
                values.len(),
                grid.dims()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn full(grid: GridSpec) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![true; n],
        }
    }

    /// Any nonzero voxel is in the mask.
    pub fn from_volume(vol: &Volume3D) -> Self {
        Self {
            grid: vol.grid().clone(),
            values: vol.data().iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            grid: self.grid.clone(),
            data: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
            units: "mask".into(),
        }
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<Self> {
        ensure_same_grid(&self.grid, other.grid(), "mask intersection")?;
        Ok(Self {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }
}

/// Moves the world origin to the intensity-weighted centroid. Data are
/// untouched; only the affine translation changes.
pub fn set_origin_center_of_mass(vol: &Volume3D) -> Result<Volume3D> {
    let centroid = center_of_mass_voxel(vol)?;
    let world = vol.grid().voxel_to_world(centroid);
    let shift = AffineTransform::translation([-world[0], -world[1], -world[2]]);
    vol.with_affine(shift.compose(vol.affine()))
}

/// Intensity-weighted centroid in voxel coordinates.
pub(crate) fn center_of_mass_voxel(vol: &Volume3D) -> Result<[f64; 3]> {
    let grid = vol.grid();
    let mut sum = [0.0f64; 3];
    let mut total = 0.0f64;
    for (idx, &v) in vol.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Degenerate("volume contains non-finite intensities".into()));
        }
        if v < 0.0 {
            return Err(Error::Degenerate(
                "center of mass requires non-negative intensities".into(),
            ));
        }
        if v == 0.0 {
            continue;
        }
        let [i, j, k] = grid.coords(idx);
        sum[0] += v * i as f64;
        sum[1] += v * j as f64;
        sum[2] += v * k as f64;
        total += v;
    }
    if total <= 0.0 {
        return Err(Error::Degenerate("all-zero volume has no center of mass".into()));
    }
    Ok([sum[0] / total, sum[1] / total, sum[2] / total])
}

/// World-space centroid of `|intensity|`; used to seed registration.
pub(crate) fn world_centroid_abs(vol: &Volume3D) -> Option<[f64; 3]> {
    let grid = vol.grid();
    let mut sum = [0.0f64; 3];
    let mut total = 0.0;
    for (idx, &v) in vol.data().iter().enumerate() {
        if !v.is_finite() || v == 0.0 {
            continue;
        }
        let w = v.abs();
        let [i, j, k] = grid.coords(idx);
        sum[0] += w * i as f64;
        sum[1] += w * j as f64;
        sum[2] += w * k as f64;
        total += w;
    }
    (total > 0.0).then(|| grid.voxel_to_world([sum[0] / total, sum[1] / total, sum[2] / total]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;

    #[test]
    fn data_length_checked() {
        let g = GridSpec::centered([2, 2, 2], [1.0; 3]).unwrap();
        assert!(Volume3D::new(g.clone(), vec![0.0; 7], "a").is_err());
        assert!(Volume3D::new(g, vec![0.0; 8], "a").is_ok());
    }

    #[test]
    fn spacing_is_column_norms() {
        let rot = RigidTransform::new([0.3, 0.2, -0.4], [1.0, 2.0, 3.0]).to_affine();
        let aff = rot.compose(&AffineTransform::scaling([1.5, 2.0, 4.0]));
        let g = GridSpec::new([3, 3, 3], aff).unwrap();
        let s = g.spacing();
        for (a, b) in s.iter().zip([1.5, 2.0, 4.0]) {
            assert!((a - b).abs() / b < 1e-6);
        }
    }

    #[test]
    fn com_of_symmetric_volume_is_grid_center() {
        let g = GridSpec::axis_aligned([5, 7, 9], [2.0, 1.0, 3.0], [10.0, -4.0, 7.0]).unwrap();
        let v = Volume3D::from_fn(g, |i, j, k| {
            let d = (i as f64 - 2.0).powi(2) + (j as f64 - 3.0).powi(2) + (k as f64 - 4.0).powi(2);
            (-d / 4.0).exp()
        });
        let out = set_origin_center_of_mass(&v).unwrap();
        let c = out.grid().voxel_to_world([2.0, 3.0, 4.0]);
        assert!(c.iter().all(|x| x.abs() < 1e-9), "{c:?}");
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn com_single_voxel_and_point_pair() {
        let g = GridSpec::axis_aligned([6, 6, 6], [2.0, 2.0, 2.0], [0.0; 3]).unwrap();
        let one = Volume3D::from_fn(g.clone(), |i, j, k| if (i, j, k) == (1, 4, 2) { 5.0 } else { 0.0 });
        let out = set_origin_center_of_mass(&one).unwrap();
        assert_eq!(out.grid().voxel_to_world([1.0, 4.0, 2.0]), [0.0, 0.0, 0.0]);

        // masses at voxels (0,0,0) and (4,2,0): world (0,0,0) and (8,4,0),
        // midpoint (4,2,0) must become the new origin
        let two = Volume3D::from_fn(g, |i, j, k| {
            if (i, j, k) == (0, 0, 0) || (i, j, k) == (4, 2, 0) { 3.0 } else { 0.0 }
        });
        let out = set_origin_center_of_mass(&two).unwrap();
        let a = out.grid().voxel_to_world([0.0, 0.0, 0.0]);
        let b = out.grid().voxel_to_world([4.0, 2.0, 0.0]);
        assert_eq!(a, [-4.0, -2.0, 0.0]);
        assert_eq!(b, [4.0, 2.0, 0.0]);
    }

    #[test]
    fn com_all_zero_is_degenerate() {
        let g = GridSpec::centered([3, 3, 3], [1.0; 3]).unwrap();
        assert!(matches!(set_origin_center_of_mass(&Volume3D::zeros(g)), Err(Error::Degenerate(_))));
    }
}
