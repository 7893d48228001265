//! Batch execution of the fixed nine-step chain over all subjects.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{PipelineConfig, PvcMethod, SubjectRecord};
use crate::brainmask::{brain_mask_structural, rough_strip};
use crate::coregister::{coregister_to_structural, Coregistration, ResolutionMode};
use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, RigidTransform};
use crate::nifti::{read_nifti, write_nifti_new};
use crate::normalize::{normalize_volume, register_affine, NormalizeConfig};
use crate::pvc::{pvc_asllani, pvc_pet, PvcDiagnostics};
use crate::quantify::{quantify, CBF_UNITS};
use crate::resample::Interpolation;
use crate::segment::{segment_tissues, tissue_maps_from_volumes, SegmentConfig, TissueProbMaps};
use crate::smooth::smooth_gaussian;
use crate::util::write_new;
use crate::volume::{center_of_mass_voxel, ensure_same_grid, BinaryMask, Volume3D};

pub const REPORT_FILE: &str = "run_report.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u8,
    pub name: String,
    /// Output files, relative to the run directory.
    pub outputs: Vec<String>,
    pub seconds: f64,
    pub parameters: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject_id: String,
    pub status: SubjectStatus,
    pub failed_step: Option<String>,
    pub error: Option<String>,
    pub steps: Vec<StepRecord>,
    pub coregistration_metric: Option<f64>,
    pub normalization_metric: Option<f64>,
    pub pvc_diagnostics: Option<PvcDiagnostics>,
    /// Map shown in the QC mosaic and the mask used for its window.
    pub qc_map: Option<String>,
    pub qc_mask: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: PipelineConfig,
    pub subjects: Vec<SubjectReport>,
}

impl RunReport {
    pub fn all_ok(&self) -> bool {
        self.subjects.iter().all(|s| s.status == SubjectStatus::Ok)
    }

    pub fn failed(&self) -> impl Iterator<Item = &SubjectReport> {
        self.subjects.iter().filter(|s| s.status == SubjectStatus::Failed)
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(REPORT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut r: RunReport =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        r.run_dir = run_dir.to_path_buf();
        Ok(r)
    }
}

/// Runs every subject and writes the run report and QC report. Global
/// configuration problems and an existing run directory are returned as
/// errors before anything is written; subject failures are recorded in the
/// report.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    let issues = config.global_issues();
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let started = chrono::Local::now();
    let run_id = config
        .run_id
        .clone()
        .unwrap_or_else(|| started.format("%Y%m%dT%H%M%S").to_string());
    let template = match (config.steps.normalize, &config.normalize.template) {
        (true, Some(p)) => Some(read_nifti(p).map_err(|e| Error::Config(vec![format!("normalize.template: {e}")]))?),
        _ => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start {} worker threads: {e}", config.threads)))?;

    std::fs::create_dir_all(&config.output_root).map_err(|e| Error::io(&config.output_root, e))?;
    let run_dir = config.output_root.join(&run_id);
    match std::fs::create_dir(&run_dir) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::RunExists(run_dir)),
        Err(e) => return Err(Error::io(&run_dir, e)),
    }
    write_new(&run_dir.join(CONFIG_COPY), config.to_toml().as_bytes())?;

    let subjects: Vec<SubjectReport> = pool.install(|| {
        config
            .subjects
            .par_iter()
            .map(|s| process_subject(config, s, &run_dir, template.as_ref()))
            .collect()
    });

    let report = RunReport {
        run_id,
        run_dir: run_dir.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: started.to_rfc3339(),
        finished_at: chrono::Local::now().to_rfc3339(),
        config: config.clone(),
        subjects,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_new(&run_dir.join(REPORT_FILE), json.as_bytes())?;
    super::report::emit_qc_report(&report, &run_dir)?;
    Ok(report)
}

struct SubjectRun<'a> {
    id: &'a str,
    dir: PathBuf,
    steps: Vec<StepRecord>,
    coregistration_metric: Option<f64>,
    normalization_metric: Option<f64>,
    pvc_diagnostics: Option<PvcDiagnostics>,
    qc_map: Option<String>,
    qc_mask: Option<String>,
}

/// A step in progress; `Err` carries the step name.
struct Step {
    record: StepRecord,
    start: Instant,
}

type StepResult<T> = std::result::Result<T, (String, Error)>;

impl<'a> SubjectRun<'a> {
    fn begin(&self, step: u8, name: &str, parameters: Value) -> Step {
        Step {
            record: StepRecord { step, name: name.into(), outputs: Vec::new(), seconds: 0.0, parameters },
            start: Instant::now(),
        }
    }

    fn rel(&self, file: &str) -> String {
        format!("{}/{file}", self.id)
    }

    fn save(&self, step: &mut Step, name: &str, vol: &Volume3D) -> Result<String> {
        let file = format!("step_{:02}_{name}.nii.gz", step.record.step);
        write_nifti_new(vol, &self.dir.join(&file))?;
        let rel = self.rel(&file);
        step.record.outputs.push(rel.clone());
        Ok(rel)
    }

    fn save_affine(&self, step: &mut Step, name: &str, a: &AffineTransform) -> Result<()> {
        let file = format!("step_{:02}_{name}.txt", step.record.step);
        a.write_text(&self.dir.join(&file))?;
        step.record.outputs.push(self.rel(&file));
        Ok(())
    }

    fn finish(&mut self, mut step: Step) {
        step.record.seconds = step.start.elapsed().as_secs_f64();
        self.steps.push(step.record);
    }
}

fn at<T>(step: &str, r: Result<T>) -> StepResult<T> {
    r.map_err(|e| (step.to_string(), e))
}

fn process_subject(cfg: &PipelineConfig, s: &SubjectRecord, run_dir: &Path, template: Option<&Volume3D>) -> SubjectReport {
    let t0 = Instant::now();
    let mut run = SubjectRun {
        id: &s.subject_id,
        dir: run_dir.join(&s.subject_id),
        steps: Vec::new(),
        coregistration_metric: None,
        normalization_metric: None,
        pvc_diagnostics: None,
        qc_map: None,
        qc_mask: None,
    };
    let outcome = match catch_unwind(AssertUnwindSafe(|| run_subject(cfg, s, template, &mut run))) {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|m| m.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            Err(("internal".into(), Error::Validation(format!("internal error: {msg}"))))
        }
    };
    let (status, failed_step, error) = match outcome {
        Ok(()) => (SubjectStatus::Ok, None, None),
        Err((step, e)) => (SubjectStatus::Failed, Some(step), Some(e.to_string())),
    };
    SubjectReport {
        subject_id: s.subject_id.clone(),
        status,
        failed_step,
        error,
        steps: run.steps,
        coregistration_metric: run.coregistration_metric,
        normalization_metric: run.normalization_metric,
        pvc_diagnostics: run.pvc_diagnostics,
        qc_map: run.qc_map,
        qc_mask: run.qc_mask,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Translation moving `world` to the origin.
fn origin_shift(world: [f64; 3]) -> AffineTransform {
    AffineTransform::translation([-world[0], -world[1], -world[2]])
}

fn centroid_world(vol: &Volume3D) -> Result<[f64; 3]> {
    let c = center_of_mass_voxel(&vol.map(|v| v.max(0.0)))?;
    Ok(vol.grid().voxel_to_world(c))
}

fn shifted(vol: &Volume3D, shift: &AffineTransform) -> Result<Volume3D> {
    vol.with_affine(shift.compose(vol.affine()))
}

fn threshold_half(vol: &Volume3D) -> Result<BinaryMask> {
    BinaryMask::new(vol.grid().clone(), vol.data().iter().map(|&v| v >= 0.5).collect())
}

fn rigid_json(t: &RigidTransform) -> Value {
    json!({
        "rotations_deg": t.rotations.map(f64::to_degrees),
        "translations_mm": t.translations,
    })
}

fn run_subject(cfg: &PipelineConfig, s: &SubjectRecord, template: Option<&Volume3D>, run: &mut SubjectRun) -> StepResult<()> {
    const LOAD: &str = "load_inputs";
    let flags = cfg.steps;
    let missing = s.missing_files();
    if !missing.is_empty() {
        return Err((LOAD.into(), Error::Config(missing)));
    }
    at(LOAD, std::fs::create_dir(&run.dir).map_err(|e| Error::io(&run.dir, e)))?;
    let asl = at(LOAD, read_nifti(&s.asl_input))?;
    let mut pd = at(LOAD, s.pd_image.as_deref().map(read_nifti).transpose())?;
    if let Some(p) = &pd {
        at(LOAD, ensure_same_grid(asl.grid(), p.grid(), "ASL input and PD image"))?;
    }
    let mut structural = at(LOAD, read_nifti(&s.structural))?;

    // 1. quantification
    let mut cbf = if flags.quantify {
        let acq = cfg.acquisition.as_ref().expect("validated");
        let scale = at("quantify", acq.scale_factor())?;
        let mut step = run.begin(1, "quantify", json!({ "acquisition": acq, "scale_factor": scale }));
        let pd_vol = pd.as_ref().expect("validated");
        let cbf = at("quantify", quantify(&asl, pd_vol, acq))?;
        at("quantify", run.save(&mut step, "cbf", &cbf))?;
        run.finish(step);
        cbf
    } else {
        asl.with_units(CBF_UNITS)
    };

    // 2. origin reset (ASL and PD share one shift; the structural scan its own)
    let mut structural_shift = AffineTransform::identity();
    if flags.reorient {
        const NAME: &str = "reorient";
        let asl_origin = match s.asl_origin_mm {
            Some(o) => o,
            None => at(NAME, centroid_world(pd.as_ref().unwrap_or(&cbf)))?,
        };
        let struct_origin = match s.structural_origin_mm {
            Some(o) => o,
            None => at(NAME, centroid_world(&structural))?,
        };
        let mut step = run.begin(
            2,
            NAME,
            json!({
                "asl_origin_mm": asl_origin,
                "asl_origin_source": if s.asl_origin_mm.is_some() { "config" } else if pd.is_some() { "pd_centroid" } else { "asl_centroid" },
                "structural_origin_mm": struct_origin,
                "structural_origin_source": if s.structural_origin_mm.is_some() { "config" } else { "centroid" },
            }),
        );
        let asl_shift = origin_shift(asl_origin);
        structural_shift = origin_shift(struct_origin);
        cbf = at(NAME, shifted(&cbf, &asl_shift))?;
        pd = at(NAME, pd.as_ref().map(|p| shifted(p, &asl_shift)).transpose())?;
        structural = at(NAME, shifted(&structural, &structural_shift))?;
        at(NAME, run.save(&mut step, "cbf_reoriented", &cbf))?;
        if let Some(p) = &pd {
            at(NAME, run.save(&mut step, "pd_reoriented", p))?;
        }
        at(NAME, run.save(&mut step, "structural_reoriented", &structural))?;
        run.finish(step);
    }

    // 3. rough ASL mask
    let mut rough = None;
    if flags.rough_strip {
        const NAME: &str = "rough_strip";
        let mut step = run.begin(3, NAME, json!({ "fraction": cfg.rough_strip_fraction }));
        let m = at(NAME, rough_strip(&cbf, cfg.rough_strip_fraction))?;
        at(NAME, run.save(&mut step, "asl_rough_mask", &m.to_volume()))?;
        run.finish(step);
        rough = Some(m);
    }

    // 4. structural brain mask and tissue maps
    let mut brain = None;
    let mut tissue: Option<TissueProbMaps> = None;
    if flags.mask_segment {
        const NAME: &str = "mask_segment";
        let seg = SegmentConfig {
            max_iter: cfg.segmentation.max_iter,
            tolerance_per_voxel: cfg.segmentation.tolerance_per_voxel,
            seed: cfg.seed,
        };
        let mut step = run.begin(
            4,
            NAME,
            json!({
                "tissue_source": if s.external_tissue_maps.is_some() { "external" } else { "mixture_model" },
                "contrast": s.structural_contrast,
                "segmentation": seg,
            }),
        );
        let m = at(NAME, brain_mask_structural(&structural))?;
        let maps = match &s.external_tissue_maps {
            Some(paths) => {
                let load = |p: &PathBuf| read_nifti(p).and_then(|v| shifted(&v, &structural_shift));
                let (g, w, c) = (at(NAME, load(&paths[0]))?, at(NAME, load(&paths[1]))?, at(NAME, load(&paths[2]))?);
                at(NAME, tissue_maps_from_volumes(&g, &w, &c, structural.grid()))?
            }
            None => at(NAME, segment_tissues(&structural, &m, s.structural_contrast, &seg))?,
        };
        at(NAME, run.save(&mut step, "brain_mask", &m.to_volume()))?;
        at(NAME, run.save(&mut step, "p_gm", &maps.p_gm))?;
        at(NAME, run.save(&mut step, "p_wm", &maps.p_wm))?;
        at(NAME, run.save(&mut step, "p_csf", &maps.p_csf))?;
        run.finish(step);
        brain = Some(m);
        tissue = Some(maps);
    }

    // 5. rigid co-registration into the working space
    let mut coreg: Option<Coregistration> = None;
    let asl_grid = cbf.grid().clone();
    if flags.coregister {
        const NAME: &str = "coregister";
        let mut step = run.begin(
            5,
            NAME,
            json!({ "registration": cfg.registration, "resolution_mode": cfg.resolution_mode, "driver": if pd.is_some() { "pd" } else { "asl" } }),
        );
        let out = at(
            NAME,
            coregister_to_structural(&cbf, pd.as_ref(), &structural, brain.as_ref(), cfg.resolution_mode, &cfg.registration),
        )?;
        step.record.parameters["transform"] = rigid_json(&out.registration.transform);
        step.record.parameters["metric"] = json!(out.registration.metric);
        at(NAME, run.save_affine(&mut step, "structural_to_asl", &out.registration.transform.to_affine()))?;
        at(NAME, run.save(&mut step, "cbf_coreg", &out.asl))?;
        if let Some(p) = &out.pd {
            at(NAME, run.save(&mut step, "pd_coreg", p))?;
        }
        at(NAME, run.save(&mut step, "structural_coreg", &out.structural))?;
        run.finish(step);
        run.coregistration_metric = Some(out.registration.metric);
        cbf = out.asl;
        coreg = Some(out.registration);
    }

    // structural brain mask and ASL rough mask on the working grid
    let brain_ws = match (&brain, &coreg) {
        (Some(b), Some(c)) => Some(at(
            "coregister",
            c.to_working_space(&b.to_volume(), false, &asl_grid, structural.grid())
                .and_then(|v| threshold_half(&v)),
        )?),
        _ => None,
    };

    // 6. partial-volume correction (ASL space only)
    if flags.pvc {
        const NAME: &str = "pvc";
        let c = coreg.as_ref().expect("validated");
        let t = tissue.as_ref().expect("validated");
        let mask = brain_ws.as_ref().expect("validated");
        let mut step = run.begin(6, NAME, json!({ "method": cfg.pvc_method, "pvc": cfg.pvc }));
        let to_asl = |v: &Volume3D| c.structural_to_asl(v, &asl_grid);
        let (g, w, csf) = (at(NAME, to_asl(&t.p_gm))?, at(NAME, to_asl(&t.p_wm))?, at(NAME, to_asl(&t.p_csf))?);
        let t_asl = at(NAME, tissue_maps_from_volumes(&g, &w, &csf, &asl_grid))?;
        let res = match cfg.pvc_method {
            PvcMethod::Pet => at(NAME, pvc_pet(&cbf, &t_asl, mask, &cfg.pvc))?,
            PvcMethod::Asllani => at(NAME, pvc_asllani(&cbf, &t_asl, mask, &cfg.pvc))?,
            PvcMethod::None => unreachable!("validated"),
        };
        at(NAME, run.save(&mut step, "p_gm_asl", &t_asl.p_gm))?;
        at(NAME, run.save(&mut step, "p_wm_asl", &t_asl.p_wm))?;
        at(NAME, run.save(&mut step, "cbf_gm_pvc", &res.cbf_gm))?;
        if let Some(wm) = &res.cbf_wm {
            at(NAME, run.save(&mut step, "cbf_wm_pvc", wm))?;
        }
        step.record.parameters["diagnostics"] = json!(res.diagnostics);
        run.finish(step);
        run.pvc_diagnostics = Some(res.diagnostics);
        cbf = res.cbf_gm;
    }

    // 7. restrict CBF to structural brain mask AND rough ASL mask
    let mut working_mask = brain_ws.clone();
    if flags.skull_strip_asl {
        const NAME: &str = "skull_strip_asl";
        let c = coreg.as_ref().expect("validated");
        let r = rough.as_ref().expect("validated");
        let b = brain_ws.as_ref().expect("validated");
        let mut step = run.begin(7, NAME, json!({ "mask": "structural_brain_mask AND asl_rough_mask" }));
        let rough_ws = at(
            NAME,
            match c.mode {
                ResolutionMode::AslSpace => Ok(r.clone()),
                ResolutionMode::StructuralSpace => {
                    c.asl_to_structural(&r.to_volume(), structural.grid()).and_then(|v| threshold_half(&v))
                }
            },
        )?;
        let m = at(NAME, b.intersect(&rough_ws))?;
        cbf = at(NAME, cbf.apply_mask(&m))?;
        at(NAME, run.save(&mut step, "mask", &m.to_volume()))?;
        let rel = at(NAME, run.save(&mut step, "cbf_masked", &cbf))?;
        run.qc_map = Some(rel);
        run.finish(step);
        working_mask = Some(m);
    }

    // 8. affine normalization to the template
    if flags.normalize {
        const NAME: &str = "normalize";
        let tpl = template.expect("validated");
        let external = at(NAME, s.external_affine.as_deref().map(AffineTransform::read_text).transpose())?;
        let ncfg = NormalizeConfig {
            output_spacing_mm: cfg.normalize.output_spacing_mm,
            registration: cfg.normalize.registration.clone(),
            external_affine: external,
        };
        let mut step = run.begin(8, NAME, json!({ "normalize": cfg.normalize, "external_affine": s.external_affine }));
        let reg = at(NAME, register_affine(&structural, tpl, &ncfg))?;
        // template world -> structural world [-> ASL world]
        let cbf_map = match &coreg {
            Some(c) if c.mode == ResolutionMode::AslSpace => c.transform.to_affine().compose(&reg.transform),
            _ => reg.transform,
        };
        step.record.parameters["affine_template_to_structural"] = json!(reg.transform);
        step.record.parameters["metric"] = json!(reg.metric);
        at(NAME, run.save_affine(&mut step, "affine", &reg.transform))?;
        let cbf_n = at(NAME, normalize_volume(&cbf, &cbf_map, tpl.grid(), &ncfg, Interpolation::Trilinear))?;
        let rel = at(NAME, run.save(&mut step, "cbf_normalized", &cbf_n))?;
        run.qc_map = Some(rel);
        let s_n = at(NAME, normalize_volume(&structural, &reg.transform, tpl.grid(), &ncfg, Interpolation::Trilinear))?;
        at(NAME, run.save(&mut step, "structural_normalized", &s_n))?;
        if let Some(m) = &working_mask {
            let m_n = at(NAME, normalize_volume(&m.to_volume(), &cbf_map, tpl.grid(), &ncfg, Interpolation::Nearest))?;
            run.qc_mask = Some(at(NAME, run.save(&mut step, "mask_normalized", &m_n))?);
        }
        run.finish(step);
        run.normalization_metric = reg.metric;
        cbf = cbf_n;
    }

    // 9. smoothing
    if flags.smooth {
        const NAME: &str = "smooth";
        let mut step = run.begin(9, NAME, json!({ "fwhm_mm": cfg.smoothing_fwhm_mm }));
        let sm = at(NAME, smooth_gaussian(&cbf, cfg.smoothing_fwhm_mm))?;
        at(NAME, run.save(&mut step, "cbf_smoothed", &sm))?;
        run.finish(step);
    }
    if run.qc_map.is_none() {
        run.qc_map = run.steps.iter().rev().flat_map(|s| s.outputs.iter()).find(|o| o.contains("cbf")).cloned();
    }
    Ok(())
}
