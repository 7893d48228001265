//! Region-of-interest summaries of CBF maps.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nifti::read_nifti;
use crate::util::{median, read_path_list, volume_id};
use crate::volume::{BinaryMask, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoiTableRow {
    pub map_id: String,
    pub roi_id: String,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub voxel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoiTable {
    pub rows: Vec<RoiTableRow>,
    /// One entry per skipped (map, ROI) pair.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct NamedMap {
    pub id: String,
    pub volume: Volume3D,
}

#[derive(Debug, Clone)]
pub struct NamedRoi {
    pub id: String,
    pub mask: BinaryMask,
}

/// Mean, median and max of `values`; `None` when empty.
pub fn summarize(values: &[f64]) -> Option<(f64, f64, f64)> {
    let med = median(values)?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, med, max))
}

/// One row per (map, ROI) pair in map-major order. Empty ROIs are skipped
/// with a warning.
pub fn roi_stats(maps: &[NamedMap], rois: &[NamedRoi]) -> Result<RoiTable> {
    for m in maps {
        for r in rois {
            if !m.volume.grid().matches(r.mask.grid(), crate::volume::GRID_TOL) {
                return Err(Error::Geometry(format!(
                    "map `{}` and ROI `{}` are on different grids ({:?} vs {:?})",
                    m.id,
                    r.id,
                    m.volume.dims(),
                    r.mask.grid().dims()
                )));
            }
        }
    }
    let pairs: Vec<(usize, usize)> = (0..maps.len()).flat_map(|m| (0..rois.len()).map(move |r| (m, r))).collect();
    let results: Vec<std::result::Result<RoiTableRow, String>> = pairs
        .par_iter()
        .map(|&(mi, ri)| {
            let (m, r) = (&maps[mi], &rois[ri]);
            let values: Vec<f64> = r.mask.indices().map(|i| m.volume.data()[i]).collect();
            match summarize(&values) {
                Some((mean, median, max)) => Ok(RoiTableRow {
                    map_id: m.id.clone(),
                    roi_id: r.id.clone(),
                    mean,
                    median,
                    max,
                    voxel_count: values.len(),
                }),
                None => Err(format!("ROI `{}` is empty; no row for map `{}`", r.id, m.id)),
            }
        })
        .collect();
    let mut table = RoiTable::default();
    for r in results {
        match r {
            Ok(row) => table.rows.push(row),
            Err(w) => table.warnings.push(w),
        }
    }
    Ok(table)
}

/// Loads every map and ROI named in two list files. All unreadable entries
/// are reported together.
pub fn load_batch_lists(map_list: &Path, roi_list: &Path) -> Result<(Vec<NamedMap>, Vec<NamedRoi>)> {
    let mut failures = Vec::new();
    let map_paths = read_path_list(map_list)?;
    let roi_paths = read_path_list(roi_list)?;
    let mut maps = Vec::new();
    for p in &map_paths {
        match read_nifti(p) {
            Ok(volume) => maps.push(NamedMap { id: volume_id(p), volume }),
            Err(e) => failures.push(format!("{}: {e}", p.display())),
        }
    }
    let mut rois = Vec::new();
    for p in &roi_paths {
        match read_nifti(p) {
            Ok(v) => rois.push(NamedRoi { id: volume_id(p), mask: BinaryMask::from_volume(&v) }),
            Err(e) => failures.push(format!("{}: {e}", p.display())),
        }
    }
    if failures.is_empty() {
        Ok((maps, rois))
    } else {
        Err(Error::Batch(failures))
    }
}

/// Tab-separated table with a header row.
pub fn write_roi_table(rows: &[RoiTableRow], out: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(out)
        .map_err(|e| Error::io(out, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(out, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}
