//! Voxelwise two-group GLM with covariates, cluster-extent thresholding and
//! permutation max-T familywise correction.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::morphology::{label_components, Connectivity};
use crate::volume::{ensure_same_grid, BinaryMask, Volume3D};

/// Smallest accepted permutation count.
pub const MIN_PERMUTATIONS: usize = 100;
/// Relative singular-value cutoff for the rank check.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub subjects: Vec<String>,
    /// The two group labels, in order of first appearance.
    pub group_labels: [String; 2],
    /// Group index (0 or 1) per subject.
    pub groups: Vec<usize>,
    pub covariate_names: Vec<String>,
    /// Covariate values, one row per subject.
    pub covariates: Vec<Vec<f64>>,
    /// Weights for [group 1, group 2, covariates...].
    pub contrast: Vec<f64>,
}

impl DesignMatrix {
    /// Two-group design with contrast group 1 minus group 2.
    pub fn two_group(subjects: Vec<String>, groups: Vec<usize>, group_labels: [String; 2]) -> Result<Self> {
        let n = subjects.len();
        let d = Self {
            subjects,
            group_labels,
            groups,
            covariate_names: Vec::new(),
            covariates: vec![Vec::new(); n],
            contrast: vec![1.0, -1.0],
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_columns(&self) -> usize {
        2 + self.covariate_names.len()
    }

    /// Appends a covariate column (the contrast gets a zero weight).
    pub fn with_covariate(mut self, name: impl Into<String>, values: &[f64]) -> Result<Self> {
        if values.len() != self.n_subjects() {
            return Err(Error::Design(format!(
                "covariate has {} values for {} subjects",
                values.len(),
                self.n_subjects()
            )));
        }
        self.covariate_names.push(name.into());
        for (row, v) in self.covariates.iter_mut().zip(values) {
            row.push(*v);
        }
        self.contrast.push(0.0);
        self.validate()?;
        Ok(self)
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        self.matrix_with_groups(&self.groups)
    }

    fn matrix_with_groups(&self, groups: &[usize]) -> DMatrix<f64> {
        let n = self.n_subjects();
        let p = self.n_columns();
        DMatrix::from_fn(n, p, |r, c| match c {
            0 => (groups[r] == 0) as u8 as f64,
            1 => (groups[r] == 1) as u8 as f64,
            _ => self.covariates[r][c - 2],
        })
    }

    pub fn rank(&self) -> usize {
        let sv = self.matrix().singular_values();
        let max = sv.iter().cloned().fold(0.0, f64::max);
        sv.iter().filter(|&&s| s > RANK_TOL * max).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_subjects();
        if self.groups.len() != n || self.covariates.len() != n {
            return Err(Error::Design("row counts disagree".into()));
        }
        if self.groups.iter().any(|&g| g > 1) {
            return Err(Error::Design("group index must be 0 or 1".into()));
        }
        if self.contrast.len() != self.n_columns() {
            return Err(Error::Design(format!(
                "contrast has {} weights for {} columns",
                self.contrast.len(),
                self.n_columns()
            )));
        }
        for (r, row) in self.covariates.iter().enumerate() {
            if row.len() != self.covariate_names.len() || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Design(format!("covariates of subject `{}` are incomplete or non-finite", self.subjects[r])));
            }
        }
        let p = self.n_columns();
        if n <= p {
            return Err(Error::Design(format!("{n} subjects leave no residual degrees of freedom for {p} columns")));
        }
        let rank = self.rank();
        if rank < p {
            return Err(Error::Design(format!("design matrix is rank deficient (rank {rank} < {p} columns)")));
        }
        Ok(())
    }

    /// Parses `subject_id,group,covariate...` CSV with a header row. Group
    /// labels are taken in order of first appearance; exactly two required.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Design(format!("design header: {e}")))?.clone();
        if headers.len() < 2 || &headers[0] != "subject_id" || &headers[1] != "group" {
            return Err(Error::Design("design header must start with `subject_id,group`".into()));
        }
        let covariate_names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let mut subjects = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        let mut groups = Vec::new();
        let mut covariates = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Design(format!("design row {}: {e}", line + 2)))?;
            let label = rec[1].to_string();
            let g = match labels.iter().position(|l| *l == label) {
                Some(g) => g,
                None => {
                    labels.push(label.clone());
                    labels.len() - 1
                }
            };
            if g > 1 {
                return Err(Error::Design(format!("design row {}: a third group `{label}` appears", line + 2)));
            }
            let mut row = Vec::new();
            for (c, name) in covariate_names.iter().enumerate() {
                let raw = &rec[c + 2];
                let v: f64 = raw
                    .parse()
                    .map_err(|_| Error::Design(format!("design row {}: `{name}` value `{raw}` is not a number", line + 2)))?;
                row.push(v);
            }
            subjects.push(rec[0].to_string());
            groups.push(g);
            covariates.push(row);
        }
        if labels.len() != 2 {
            return Err(Error::Design(format!("expected exactly two groups, found {}", labels.len())));
        }
        let mut contrast = vec![1.0, -1.0];
        contrast.extend(std::iter::repeat_n(0.0, covariate_names.len()));
        let d = Self {
            subjects,
            group_labels: [labels[0].clone(), labels[1].clone()],
            groups,
            covariate_names,
            covariates,
            contrast,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f)
    }
}

/// Per-subject mean of each map over the analysis mask.
pub fn mean_in_mask(maps: &[Volume3D], mask: &BinaryMask) -> Result<Vec<f64>> {
    let idx: Vec<usize> = mask.indices().collect();
    if idx.is_empty() {
        return Err(Error::Design("analysis mask is empty".into()));
    }
    maps.iter()
        .map(|m| {
            ensure_same_grid(m.grid(), mask.grid(), "map and analysis mask")?;
            Ok(idx.iter().map(|&i| m.data()[i]).sum::<f64>() / idx.len() as f64)
        })
        .collect()
}

/// One-sided t threshold matching an uncorrected p-value at `dof`.
pub fn t_threshold(p: f64, dof: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || dof == 0 {
        return Err(Error::Parameter(format!("need 0 < p < 1 and dof >= 1, got p = {p}, dof = {dof}")));
    }
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(dist.inverse_cdf(1.0 - p))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRow {
    pub label: u32,
    pub size: usize,
    pub peak_t: f64,
    pub peak_voxel: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatMap {
    pub t_values: Volume3D,
    pub dof: usize,
    /// Surviving cluster labels (0 = none), once thresholded.
    pub cluster_labels: Option<Volume3D>,
    pub clusters: Vec<ClusterRow>,
    pub permutation_p: Option<Volume3D>,
}

/// Precomputed pieces of the OLS fit for one design.
struct Fit {
    pinv: DMatrix<f64>,
    x: DMatrix<f64>,
    contrast: DVector<f64>,
    /// `c' (X'X)^-1 c`
    cvc: f64,
    dof: usize,
}

impl Fit {
    fn new(x: DMatrix<f64>, contrast: &[f64]) -> Result<Self> {
        let xtx = x.transpose() * &x;
        let inv = xtx
            .try_inverse()
            .ok_or_else(|| Error::Design("X'X is singular".into()))?;
        let c = DVector::from_column_slice(contrast);
        let cvc = (c.transpose() * &inv * &c)[(0, 0)];
        let pinv = &inv * x.transpose();
        let dof = x.nrows() - x.ncols();
        Ok(Self { pinv, x, contrast: c, cvc, dof })
    }

    fn t(&self, y: &DVector<f64>) -> f64 {
        let beta = &self.pinv * y;
        let resid = y - &self.x * &beta;
        let rss = resid.norm_squared();
        let mean = y.mean();
        let tss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        if !(tss > 0.0) || !(rss > 1e-24 * tss) {
            return 0.0;
        }
        let sigma2 = rss / self.dof as f64;
        let t = self.contrast.dot(&beta) / (sigma2 * self.cvc).sqrt();
        if t.is_finite() { t } else { 0.0 }
    }
}

fn check_maps(maps: &[Volume3D], design: &DesignMatrix, mask: &BinaryMask) -> Result<()> {
    design.validate()?;
    if maps.len() != design.n_subjects() {
        return Err(Error::Design(format!(
            "{} maps for {} design rows",
            maps.len(),
            design.n_subjects()
        )));
    }
    for m in maps {
        ensure_same_grid(m.grid(), mask.grid(), "GLM map and analysis mask")?;
    }
    Ok(())
}

/// Subject-by-voxel data matrix for the in-mask voxels.
fn gather(maps: &[Volume3D], idx: &[usize]) -> Vec<DVector<f64>> {
    idx.par_iter()
        .map(|&v| DVector::from_iterator(maps.len(), maps.iter().map(|m| m.data()[v])))
        .collect()
}

fn t_map(fit: &Fit, ys: &[DVector<f64>]) -> Vec<f64> {
    ys.par_iter().map(|y| fit.t(y)).collect()
}

/// Ordinary least squares per in-mask voxel; `t = c'b / sqrt(s2 c'(X'X)^-1 c)`.
pub fn fit_glm(maps: &[Volume3D], design: &DesignMatrix, mask: &BinaryMask) -> Result<StatMap> {
    check_maps(maps, design, mask)?;
    let fit = Fit::new(design.matrix(), &design.contrast)?;
    let idx: Vec<usize> = mask.indices().collect();
    let ts = t_map(&fit, &gather(maps, &idx));
    let mut out = vec![0.0; mask.grid().len()];
    for (&i, t) in idx.iter().zip(ts) {
        out[i] = t;
    }
    Ok(StatMap {
        t_values: Volume3D::new(mask.grid().clone(), out, "t")?,
        dof: fit.dof,
        cluster_labels: None,
        clusters: Vec::new(),
        permutation_p: None,
    })
}

/// Keeps 18-connected clusters of voxels with `t > t_threshold` that have at
/// least `min_cluster_voxels` voxels. Labels ascend with each cluster's
/// first voxel in linear order.
pub fn threshold_clusters(stat: &StatMap, t_threshold: f64, min_cluster_voxels: usize) -> Result<StatMap> {
    if !t_threshold.is_finite() {
        return Err(Error::Parameter("cluster-forming threshold must be finite".into()));
    }
    if min_cluster_voxels < 1 {
        return Err(Error::Parameter("minimum cluster size must be >= 1".into()));
    }
    let t = stat.t_values.data();
    let supra: Vec<bool> = t.iter().map(|&v| v > t_threshold).collect();
    let dims = stat.t_values.dims();
    let (labels, sizes) = label_components(&supra, dims, Connectivity::Eighteen);
    let mut remap = vec![0u32; sizes.len() + 1];
    let mut next = 0u32;
    for (l, &s) in sizes.iter().enumerate() {
        if s >= min_cluster_voxels {
            next += 1;
            remap[l + 1] = next;
        }
    }
    let mut clusters: Vec<ClusterRow> = (1..=next)
        .map(|label| ClusterRow { label, size: 0, peak_t: f64::NEG_INFINITY, peak_voxel: [0; 3] })
        .collect();
    let mut out = vec![0.0; t.len()];
    for (i, &l) in labels.iter().enumerate() {
        let nl = remap[l as usize];
        if nl == 0 {
            continue;
        }
        out[i] = nl as f64;
        let row = &mut clusters[nl as usize - 1];
        row.size += 1;
        if t[i] > row.peak_t {
            row.peak_t = t[i];
            row.peak_voxel = stat.t_values.grid().coords(i);
        }
    }
    let mut res = stat.clone();
    res.cluster_labels = Some(stat.t_values.with_data(out)?.with_units("label"));
    res.clusters = clusters;
    Ok(res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    /// FWE-corrected p-value per voxel (1 outside the mask).
    pub p_values: Volume3D,
    /// Maximum t of each permutation, in generation order.
    pub max_t: Vec<f64>,
    pub n_permutations: usize,
    pub exhaustive: bool,
    pub warnings: Vec<String>,
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// All assignments of `n1` subjects to group 0, except `skip`.
fn all_assignments(n: usize, n1: usize, skip: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut chosen: Vec<usize> = (0..n1).collect();
    loop {
        let mut g = vec![1usize; n];
        for &c in &chosen {
            g[c] = 0;
        }
        if g != skip {
            out.push(g);
        }
        // next combination in lexicographic order
        let mut i = n1;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if chosen[i] < n - n1 + i {
                chosen[i] += 1;
                for j in i + 1..n1 {
                    chosen[j] = chosen[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Max-T permutation test of the design contrast. Group labels are
/// permuted across subjects; covariates stay with their subjects.
/// `p = (1 + #{perm: maxT >= t}) / (1 + n_perm)`.
pub fn permutation_max_t(
    maps: &[Volume3D],
    design: &DesignMatrix,
    mask: &BinaryMask,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::Parameter(format!("need at least {MIN_PERMUTATIONS} permutations, got {n_perm}")));
    }
    check_maps(maps, design, mask)?;
    let idx: Vec<usize> = mask.indices().collect();
    let ys = gather(maps, &idx);
    let observed = t_map(&Fit::new(design.matrix(), &design.contrast)?, &ys);

    let n = design.n_subjects();
    let n1 = design.groups.iter().filter(|&&g| g == 0).count();
    let distinct = binomial(n, n1);
    let mut warnings = Vec::new();
    let (assignments, exhaustive) = if (n_perm as u128) >= distinct {
        let achievable = (distinct - 1) as usize;
        warnings.push(format!(
            "{n_perm} permutations requested but only {achievable} distinct relabellings exist for groups of \
             {n1} and {}; enumerating all of them",
            n - n1
        ));
        (all_assignments(n, n1, &design.groups), true)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = design.groups.clone();
        let perms: Vec<Vec<usize>> = (0..n_perm)
            .map(|_| {
                g.shuffle(&mut rng);
                g.clone()
            })
            .collect();
        (perms, false)
    };

    let max_t: Vec<f64> = assignments
        .par_iter()
        .map(|groups| -> Result<f64> {
            let x = design.matrix_with_groups(groups);
            let fit = Fit::new(x, &design.contrast)?;
            Ok(ys.iter().map(|y| fit.t(y)).fold(f64::NEG_INFINITY, f64::max))
        })
        .collect::<Result<_>>()?;

    let mut sorted = max_t.clone();
    sorted.sort_by(f64::total_cmp);
    let used = max_t.len();
    let mut p = vec![1.0; mask.grid().len()];
    for (&i, &t) in idx.iter().zip(&observed) {
        let below = sorted.partition_point(|&m| m < t);
        p[i] = (1 + used - below) as f64 / (1 + used) as f64;
    }
    Ok(PermutationResult {
        p_values: Volume3D::new(mask.grid().clone(), p, "p")?,
        max_t,
        n_permutations: used,
        exhaustive,
        warnings,
    })
}

/// Writes the cluster table as TSV: label, size, peak t and peak voxel.
pub fn write_cluster_table(rows: &[ClusterRow], out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Flat {
        label: u32,
        size: usize,
        peak_t: f64,
        peak_i: usize,
        peak_j: usize,
        peak_k: usize,
    }
    let err = |e: csv::Error| Error::io(out, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(out).map_err(err)?;
    if rows.is_empty() {
        w.write_record(["label", "size", "peak_t", "peak_i", "peak_j", "peak_k"]).map_err(err)?;
    }
    for r in rows {
        let [peak_i, peak_j, peak_k] = r.peak_voxel;
        w.serialize(Flat { label: r.label, size: r.size, peak_t: r.peak_t, peak_i, peak_j, peak_k }).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}
