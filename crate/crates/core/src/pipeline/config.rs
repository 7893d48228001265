//! Pipeline configuration: a TOML file describing subjects, enabled steps
//! and per-step parameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coregister::{RegistrationConfig, ResolutionMode};
use crate::error::{Error, Result};
use crate::pvc::PvcConfig;
use crate::quantify::AcquisitionParams;
use crate::segment::Contrast;

/// Step flags. Order is fixed; flags only switch steps on or off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepFlags {
    pub quantify: bool,
    pub reorient: bool,
    pub rough_strip: bool,
    pub mask_segment: bool,
    pub coregister: bool,
    pub pvc: bool,
    pub skull_strip_asl: bool,
    pub normalize: bool,
    pub smooth: bool,
}

impl StepFlags {
    pub fn all() -> Self {
        Self {
            quantify: true,
            reorient: true,
            rough_strip: true,
            mask_segment: true,
            coregister: true,
            pvc: true,
            skull_strip_asl: true,
            normalize: true,
            smooth: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PvcMethod {
    None,
    Pet,
    #[default]
    Asllani,
}

/// Whether `asl_input` holds a raw difference image or a CBF map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AslKind {
    #[default]
    Difference,
    Cbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub asl_input: PathBuf,
    #[serde(default)]
    pub asl_kind: AslKind,
    #[serde(default)]
    pub pd_image: Option<PathBuf>,
    pub structural: PathBuf,
    #[serde(default)]
    pub structural_contrast: Contrast,
    /// GM, WM and CSF probability maps; segmentation is skipped when given.
    #[serde(default)]
    pub external_tissue_maps: Option<[PathBuf; 3]>,
    /// Plain-text 4x4 template-to-subject affine; skips affine estimation.
    #[serde(default)]
    pub external_affine: Option<PathBuf>,
    /// World point (mm) to use as the ASL/PD origin instead of the centroid.
    #[serde(default)]
    pub asl_origin_mm: Option<[f64; 3]>,
    #[serde(default)]
    pub structural_origin_mm: Option<[f64; 3]>,
}

impl SubjectRecord {
    pub fn input_files(&self) -> Vec<(&'static str, &Path)> {
        let mut v: Vec<(&'static str, &Path)> = vec![("asl_input", &self.asl_input), ("structural", &self.structural)];
        if let Some(p) = &self.pd_image {
            v.push(("pd_image", p));
        }
        if let Some(m) = &self.external_tissue_maps {
            v.push(("external_tissue_maps[gm]", &m[0]));
            v.push(("external_tissue_maps[wm]", &m[1]));
            v.push(("external_tissue_maps[csf]", &m[2]));
        }
        if let Some(p) = &self.external_affine {
            v.push(("external_affine", p));
        }
        v
    }

    /// Problems with this subject's input files.
    pub fn missing_files(&self) -> Vec<String> {
        self.input_files()
            .into_iter()
            .filter_map(|(field, p)| match std::fs::metadata(p) {
                Ok(m) if m.is_file() => None,
                Ok(_) => Some(format!("subject `{}`: {field} `{}` is not a file", self.subject_id, p.display())),
                Err(e) => Some(format!("subject `{}`: {field} `{}`: {e}", self.subject_id, p.display())),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizeSettings {
    pub template: Option<PathBuf>,
    pub output_spacing_mm: [f64; 3],
    pub registration: RegistrationConfig,
}

impl Default for NormalizeSettings {
    fn default() -> Self {
        Self { template: None, output_spacing_mm: [2.0; 3], registration: RegistrationConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSettings {
    pub max_iter: usize,
    pub tolerance_per_voxel: f64,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        let d = crate::segment::SegmentConfig::default();
        Self { max_iter: d.max_iter, tolerance_per_voxel: d.tolerance_per_voxel }
    }
}

fn default_threads() -> usize {
    1
}
fn default_seed() -> u64 {
    42
}
fn default_fwhm() -> [f64; 3] {
    [8.0; 3]
}
fn default_rough_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_root: PathBuf,
    /// Run directory name under `output_root`; a timestamp when absent.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub steps: StepFlags,
    #[serde(default)]
    pub resolution_mode: ResolutionMode,
    #[serde(default)]
    pub pvc_method: PvcMethod,
    #[serde(default = "default_fwhm")]
    pub smoothing_fwhm_mm: [f64; 3],
    #[serde(default = "default_rough_fraction")]
    pub rough_strip_fraction: f64,
    #[serde(default)]
    pub acquisition: Option<AcquisitionParams>,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub pvc: PvcConfig,
    #[serde(default)]
    pub normalize: NormalizeSettings,
    #[serde(default)]
    pub segmentation: SegmentSettings,
    #[serde(default)]
    pub subjects: Vec<SubjectRecord>,
}

fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl PipelineConfig {
    /// Parses TOML text. Relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_string()]))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(issues) => Error::Config(issues.into_iter().map(|i| format!("{}: {i}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_root);
        if let Some(t) = &mut self.normalize.template {
            fix(t);
        }
        for s in &mut self.subjects {
            fix(&mut s.asl_input);
            fix(&mut s.structural);
            if let Some(p) = &mut s.pd_image {
                fix(p);
            }
            if let Some(m) = &mut s.external_tissue_maps {
                m.iter_mut().for_each(fix);
            }
            if let Some(p) = &mut s.external_affine {
                fix(p);
            }
        }
    }

    /// Invariants that concern the whole run (parameters, step
    /// dependencies, shared files). Subject input files are not checked.
    pub fn global_issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let mut check = |r: Result<()>, what: &str| {
            if let Err(e) = r {
                issues.push(format!("{what}: {e}"));
            }
        };
        let s = &self.steps;
        if s.quantify {
            match &self.acquisition {
                Some(a) => check(a.validate(), "acquisition"),
                None => check(Err(Error::Parameter("quantify is enabled but no [acquisition] block is given".into())), "acquisition"),
            }
        }
        if s.pvc {
            check(self.pvc.validate(), "pvc");
        }
        if s.coregister {
            check(self.registration.validate(), "registration");
        }
        if s.normalize {
            check(self.normalize.registration.validate(), "normalize.registration");
        }
        if self.threads < 1 {
            issues.push("threads must be at least 1".into());
        }
        if let Some(id) = &self.run_id {
            if !is_safe_id(id) {
                issues.push(format!("run_id `{id}` must be non-empty and use only letters, digits, `-`, `_` or `.`"));
            }
        }
        if s.pvc && !(s.mask_segment && s.coregister) {
            issues.push("step pvc requires mask_segment and coregister".into());
        }
        if s.pvc && self.resolution_mode != ResolutionMode::AslSpace {
            issues.push("step pvc is only available in asl_space resolution mode".into());
        }
        if s.pvc && self.pvc_method == PvcMethod::None {
            issues.push("step pvc is enabled but pvc_method is `none`".into());
        }
        if s.skull_strip_asl && !(s.rough_strip && s.mask_segment && s.coregister) {
            issues.push("step skull_strip_asl requires rough_strip, mask_segment and coregister".into());
        }
        if s.smooth && !s.normalize {
            issues.push("step smooth requires normalize".into());
        }
        if self.smoothing_fwhm_mm.iter().any(|f| !f.is_finite() || *f < 0.0) {
            issues.push(format!("smoothing_fwhm_mm must be finite and non-negative, got {:?}", self.smoothing_fwhm_mm));
        }
        if !(self.rough_strip_fraction > 0.0 && self.rough_strip_fraction < 1.0) {
            issues.push(format!("rough_strip_fraction must lie in (0, 1), got {}", self.rough_strip_fraction));
        }
        if self.normalize.output_spacing_mm.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            issues.push(format!("normalize.output_spacing_mm must be positive, got {:?}", self.normalize.output_spacing_mm));
        }
        if !(self.segmentation.tolerance_per_voxel > 0.0) || self.segmentation.max_iter == 0 {
            issues.push("segmentation needs max_iter >= 1 and a positive tolerance_per_voxel".into());
        }
        if s.normalize {
            match &self.normalize.template {
                None => issues.push("step normalize requires normalize.template".into()),
                Some(t) if !t.is_file() => issues.push(format!("normalize.template `{}` does not exist", t.display())),
                _ => {}
            }
        }
        if self.subjects.is_empty() {
            issues.push("no subjects configured".into());
        }
        let mut seen = std::collections::HashSet::new();
        for (i, subj) in self.subjects.iter().enumerate() {
            let id = &subj.subject_id;
            if !is_safe_id(id) {
                issues.push(format!("subjects[{i}]: subject_id `{id}` must use only letters, digits, `-`, `_` or `.`"));
            }
            if !seen.insert(id.clone()) {
                issues.push(format!("subjects[{i}]: duplicate subject_id `{id}`"));
            }
            match (s.quantify, subj.asl_kind) {
                (true, AslKind::Cbf) => issues.push(format!("subject `{id}`: asl_input is already CBF but quantify is enabled")),
                (false, AslKind::Difference) => {
                    issues.push(format!("subject `{id}`: asl_input is a difference image but quantify is disabled"))
                }
                _ => {}
            }
            if s.quantify && subj.pd_image.is_none() {
                issues.push(format!("subject `{id}`: quantify requires pd_image"));
            }
        }
        issues
    }

    /// All problems, including every missing subject input.
    pub fn all_issues(&self) -> Vec<String> {
        let mut issues = self.global_issues();
        for s in &self.subjects {
            issues.extend(s.missing_files());
        }
        issues
    }
}

/// Parses and checks a configuration file, returning every problem at once.
pub fn validate_config(path: &Path) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::from_file(path)?;
    let issues = cfg.all_issues();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(issues))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"x").unwrap();
    }

    const MINIMAL: &str = r#"
output_root = "out"

[steps]
quantify = true
normalize = true

[acquisition]
modality = "pcasl"
post_label_delay_s = 1.525
label_duration_s = 1.5

[normalize]
template = "template.nii.gz"

[[subjects]]
subject_id = "s01"
asl_input = "s01_asl.nii.gz"
pd_image = "s01_pd.nii.gz"
structural = "s01_t1.nii.gz"
"#;

    #[test]
    fn minimal_config_parses() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["template.nii.gz", "s01_asl.nii.gz", "s01_pd.nii.gz", "s01_t1.nii.gz"] {
            touch(dir.path(), f);
        }
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = validate_config(&path).unwrap();
        assert_eq!(cfg.subjects.len(), 1);
        assert!(cfg.steps.quantify && cfg.steps.normalize && !cfg.steps.pvc);
        assert_eq!(cfg.output_root, dir.path().join("out"));
        assert_eq!(cfg.threads, 1);
    }

    #[test]
    fn two_faults_reported_together() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["template.nii.gz", "s01_asl.nii.gz", "s01_pd.nii.gz"] {
            touch(dir.path(), f);
        }
        let path = dir.path().join("run.toml");
        let text = MINIMAL.replace("output_root = \"out\"", "output_root = \"out\"\nsmoothing_fwhm_mm = [-1.0, 8.0, 8.0]");
        std::fs::write(&path, text).unwrap();
        match validate_config(&path) {
            Err(Error::Config(issues)) => {
                assert_eq!(issues.len(), 2, "{issues:?}");
                assert!(issues.iter().any(|i| i.contains("smoothing_fwhm_mm")));
                assert!(issues.iter().any(|i| i.contains("structural") && i.contains("s01_t1.nii.gz")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let text = MINIMAL.replace("[normalize]\n", "[normalize]\nbogus_knob = 3\n");
        match PipelineConfig::from_toml_str(&text, Path::new(".")) {
            Err(Error::Config(issues)) => {
                let msg = &issues[0];
                assert!(msg.contains("bogus_knob"), "{msg}");
                assert!(msg.contains("line 14"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pvc_in_structural_space_rejected() {
        let mut cfg = PipelineConfig::from_toml_str(MINIMAL, Path::new("/nonexistent")).unwrap();
        cfg.steps = StepFlags::all();
        cfg.resolution_mode = ResolutionMode::StructuralSpace;
        let issues = cfg.global_issues();
        assert!(issues.iter().any(|i| i.contains("asl_space")), "{issues:?}");
    }

    #[test]
    fn step_dependencies_checked() {
        let mut cfg = PipelineConfig::from_toml_str(MINIMAL, Path::new("/nonexistent")).unwrap();
        cfg.steps = StepFlags { quantify: true, pvc: true, smooth: true, ..Default::default() };
        let issues = cfg.global_issues();
        assert!(issues.iter().any(|i| i.contains("pvc requires")));
        assert!(issues.iter().any(|i| i.contains("smooth requires normalize")));
    }

    #[test]
    fn ids_must_be_unique_and_safe() {
        let mut cfg = PipelineConfig::from_toml_str(MINIMAL, Path::new("/nonexistent")).unwrap();
        let mut dup = cfg.subjects[0].clone();
        dup.subject_id = "../evil".into();
        cfg.subjects.push(cfg.subjects[0].clone());
        cfg.subjects.push(dup);
        let issues = cfg.global_issues();
        assert!(issues.iter().any(|i| i.contains("duplicate")));
        assert!(issues.iter().any(|i| i.contains("../evil")));
    }

    #[test]
    fn serializes_back_to_toml() {
        let cfg = PipelineConfig::from_toml_str(MINIMAL, Path::new("/base")).unwrap();
        let again = PipelineConfig::from_toml_str(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
    }
}
