//! Binary morphology and connected-component labelling on 3-D grids.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    Eighteen,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => n == 1,
                        Connectivity::Eighteen => n == 1 || n == 2,
                        Connectivity::TwentySix => n >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component labels (0 = background, 1.. = components numbered in order of
/// their first voxel in linear scan order) and the size of each component
/// (`sizes[l - 1]` for label `l`).
pub fn label_components(values: &[bool], dims: [usize; 3], conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let offsets = conn.offsets();
    let mut labels = vec![0u32; values.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..values.len() {
        if !values[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let i = (idx % nx) as isize;
            let j = ((idx / nx) % ny) as isize;
            let k = (idx / (nx * ny)) as isize;
            for o in &offsets {
                let (a, b, c) = (i + o[0], j + o[1], k + o[2]);
                if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                    continue;
                }
                let n = a as usize + nx * (b as usize + ny * c as usize);
                if values[n] && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest component (lowest label on ties).
pub fn largest_component(values: &[bool], dims: [usize; 3], conn: Connectivity) -> Vec<bool> {
    let (labels, sizes) = label_components(values, dims, conn);
    let Some((best, _)) = sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
    else {
        return vec![false; values.len()];
    };
    let keep = best as u32 + 1;
    labels.iter().map(|&l| l == keep).collect()
}

/// One-voxel max (dilation) or min (erosion) along `axis`. Out-of-grid
/// neighbours are ignored.
fn pass(values: &[bool], dims: [usize; 3], axis: usize, dilate: bool) -> Vec<bool> {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis];
    let mut out = values.to_vec();
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = (idx / stride) % n;
        let mut acc = values[idx];
        if pos > 0 {
            let v = values[idx - stride];
            acc = if dilate { acc || v } else { acc && v };
        }
        if pos + 1 < n {
            let v = values[idx + stride];
            acc = if dilate { acc || v } else { acc && v };
        }
        *o = acc;
    }
    out
}

/// Dilation with a 3x3x3 cube.
pub fn dilate(values: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let a = pass(values, dims, 0, true);
    let b = pass(&a, dims, 1, true);
    pass(&b, dims, 2, true)
}

/// Erosion with a 3x3x3 cube; the grid border does not erode.
pub fn erode(values: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let a = pass(values, dims, 0, false);
    let b = pass(&a, dims, 1, false);
    pass(&b, dims, 2, false)
}

/// Morphological closing with a 3x3x3 cube. The grid is padded by one
/// background voxel so the result contains the input and a full grid stays
/// full.
pub fn close(values: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let pd = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
    let mut padded = vec![false; pd[0] * pd[1] * pd[2]];
    let at = |i: usize, j: usize, k: usize| i + pd[0] * (j + pd[1] * k);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                padded[at(i + 1, j + 1, k + 1)] = values[i + dims[0] * (j + dims[1] * k)];
            }
        }
    }
    let closed = erode(&dilate(&padded, pd), pd);
    let mut out = vec![false; values.len()];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out[i + dims[0] * (j + dims[1] * k)] = closed[at(i + 1, j + 1, k + 1)];
            }
        }
    }
    out
}

/// Sets every background region that does not touch the grid border.
pub fn fill_holes(values: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let background: Vec<bool> = values.iter().map(|&v| !v).collect();
    let (labels, sizes) = label_components(&background, dims, Connectivity::Six);
    let mut touches = vec![false; sizes.len() + 1];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz {
                    touches[labels[i + nx * (j + ny * k)] as usize] = true;
                }
            }
        }
    }
    values
        .iter()
        .zip(&labels)
        .map(|(&v, &l)| v || (l != 0 && !touches[l as usize]))
        .collect()
}
