use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use perfmap::glm::{
    fit_glm, mean_in_mask, permutation_max_t, t_threshold, threshold_clusters, write_cluster_table, DesignMatrix,
};
use perfmap::nifti::{read_nifti, write_nifti, write_nifti_new};
use perfmap::phantom::{fixture_acquisition, template_volume, write_synthetic_subject};
use perfmap::pipeline::{emit_qc_report, run_pipeline, validate_config, PipelineConfig, RunReport, StepFlags, SubjectRecord};
use perfmap::roistats::{load_batch_lists, roi_stats, write_roi_table};
use perfmap::util::{read_path_list, volume_id};
use perfmap::{BinaryMask, Error};

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "perfmap", version, about = "Arterial spin labeling perfusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a TOML configuration.
    Run { config: PathBuf },
    /// Check a configuration and every file it names.
    Validate { config: PathBuf },
    /// Mean, median and max of each map within each ROI.
    Roistats {
        /// List file with one CBF map path per line.
        #[arg(long)]
        maps: PathBuf,
        /// List file with one ROI mask path per line.
        #[arg(long)]
        rois: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelwise two-group GLM with cluster thresholding and optional
    /// permutation FWE correction.
    Glm {
        /// CSV with columns subject_id, group, covariates...
        #[arg(long)]
        design: PathBuf,
        /// List file of CBF maps, one per design row.
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of permutations (at least 100); omitted = no FWE map.
        #[arg(long)]
        perms: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Uncorrected one-sided p forming clusters.
        #[arg(long, default_value_t = 0.001)]
        cluster_p: f64,
        #[arg(long, default_value_t = 300)]
        min_cluster: usize,
        /// Add each subject's mean CBF within the mask as a covariate.
        #[arg(long)]
        mean_cbf_covariate: bool,
    },
    /// Rebuild the QC report of a finished run.
    Report { run_dir: PathBuf },
    /// Write a synthetic data set and a matching configuration.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        subjects: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Validate { config } => cmd_validate(&config),
        Command::Roistats { maps, rois, out } => cmd_roistats(&maps, &rois, &out),
        Command::Glm { design, maps, mask, out_dir, perms, seed, cluster_p, min_cluster, mean_cbf_covariate } => {
            cmd_glm(&design, &maps, &mask, &out_dir, perms, seed, cluster_p, min_cluster, mean_cbf_covariate)
        }
        Command::Report { run_dir } => cmd_report(&run_dir),
        Command::Synth { dir, subjects } => cmd_synth(&dir, subjects),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn cmd_run(config: &Path) -> anyhow::Result<ExitCode> {
    let cfg = PipelineConfig::from_file(config)?;
    let report = run_pipeline(&cfg)?;
    for s in &report.subjects {
        match &s.failed_step {
            None => println!("{}: ok ({:.1} s)", s.subject_id, s.seconds),
            Some(step) => println!("{}: FAILED at {step}: {}", s.subject_id, s.error.as_deref().unwrap_or("")),
        }
    }
    println!("run directory: {}", report.run_dir.display());
    Ok(if report.all_ok() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_PARTIAL) })
}

fn cmd_validate(config: &Path) -> anyhow::Result<ExitCode> {
    let cfg = validate_config(config)?;
    println!("configuration OK: {} subject(s)", cfg.subjects.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_roistats(maps: &Path, rois: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let (maps, rois) = load_batch_lists(maps, rois)?;
    let table = roi_stats(&maps, &rois)?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    write_roi_table(&table.rows, out)?;
    println!("{} row(s) written to {}", table.rows.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Loads maps in design order: by file id when every subject has a map of
/// that name, otherwise by list position.
fn load_maps_for_design(list: &Path, design: &DesignMatrix) -> anyhow::Result<Vec<perfmap::Volume3D>> {
    let paths = read_path_list(list)?;
    if paths.len() != design.n_subjects() {
        bail!("{} maps listed for {} design rows", paths.len(), design.n_subjects());
    }
    let ids: Vec<String> = paths.iter().map(|p| volume_id(p)).collect();
    let ordered: Vec<&PathBuf> = if design.subjects.iter().all(|s| ids.contains(s)) {
        design.subjects.iter().map(|s| &paths[ids.iter().position(|i| i == s).unwrap()]).collect()
    } else {
        paths.iter().collect()
    };
    let mut failures = Vec::new();
    let mut maps = Vec::new();
    for p in ordered {
        match read_nifti(p) {
            Ok(v) => maps.push(v),
            Err(e) => failures.push(format!("{}: {e}", p.display())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Batch(failures).into());
    }
    Ok(maps)
}

#[allow(clippy::too_many_arguments)]
fn cmd_glm(
    design: &Path,
    maps: &Path,
    mask: &Path,
    out_dir: &Path,
    perms: Option<usize>,
    seed: u64,
    cluster_p: f64,
    min_cluster: usize,
    mean_cbf_covariate: bool,
) -> anyhow::Result<ExitCode> {
    let mut design = DesignMatrix::from_csv(design)?;
    let maps = load_maps_for_design(maps, &design)?;
    let mask = BinaryMask::from_volume(&read_nifti(mask)?);
    if mean_cbf_covariate {
        let means = mean_in_mask(&maps, &mask)?;
        design = design.with_covariate("mean_cbf", &means)?;
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let stat = fit_glm(&maps, &design, &mask)?;
    let t = t_threshold(cluster_p, stat.dof)?;
    let stat = threshold_clusters(&stat, t, min_cluster)?;
    write_nifti_new(&stat.t_values, &out_dir.join("t_map.nii.gz"))?;
    if let Some(labels) = &stat.cluster_labels {
        write_nifti_new(labels, &out_dir.join("cluster_labels.nii.gz"))?;
    }
    let table = out_dir.join("clusters.tsv");
    if table.exists() {
        bail!("{} already exists", table.display());
    }
    write_cluster_table(&stat.clusters, &table)?;
    println!(
        "dof {}, cluster-forming t {:.3} (p < {cluster_p}), {} cluster(s) of at least {min_cluster} voxels",
        stat.dof,
        t,
        stat.clusters.len()
    );
    if let Some(n) = perms {
        let perm = permutation_max_t(&maps, &design, &mask, n, seed)?;
        for w in &perm.warnings {
            eprintln!("warning: {w}");
        }
        write_nifti_new(&perm.p_values, &out_dir.join("fwe_p.nii.gz"))?;
        let sig = mask.indices().filter(|&i| perm.p_values.data()[i] < 0.05).count();
        println!("{} permutation(s); {sig} voxel(s) with FWE p < 0.05", perm.n_permutations);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(run_dir: &Path) -> anyhow::Result<ExitCode> {
    let report = RunReport::read(run_dir)?;
    let path = emit_qc_report(&report, run_dir)?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(dir: &Path, n: usize) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let template = dir.join("template.nii.gz");
    write_nifti(&template_volume()?, &template)?;
    let mut subjects = Vec::new();
    for i in 0..n {
        let id = format!("sub{:02}", i + 1);
        let f = write_synthetic_subject(dir, &id, i as u64 + 1)?;
        let rel = |p: &Path| PathBuf::from(p.file_name().expect("file path"));
        subjects.push(SubjectRecord {
            subject_id: id,
            asl_input: rel(&f.asl_difference),
            asl_kind: Default::default(),
            pd_image: Some(rel(&f.pd)),
            structural: rel(&f.structural),
            structural_contrast: Default::default(),
            external_tissue_maps: None,
            external_affine: None,
            asl_origin_mm: None,
            structural_origin_mm: None,
        });
    }
    let mut cfg = PipelineConfig::from_toml_str("output_root = \"runs\"", Path::new(""))?;
    cfg.output_root = PathBuf::from("runs");
    cfg.steps = StepFlags::all();
    cfg.acquisition = Some(fixture_acquisition());
    cfg.normalize.template = Some(PathBuf::from("template.nii.gz"));
    cfg.subjects = subjects;
    let cfg_path = dir.join("pipeline.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).with_context(|| format!("writing {}", cfg_path.display()))?;
    println!("{}", cfg_path.display());
    Ok(ExitCode::SUCCESS)
}
