use std::path::{Path, PathBuf};

use perfmap::nifti::{read_nifti, write_nifti};
use perfmap::phantom::{fixture_acquisition, template_volume, write_synthetic_subject};
use perfmap::pipeline::{run_pipeline, PipelineConfig, StepFlags, SubjectRecord, SubjectStatus};
use perfmap::Error;

fn setup(dir: &Path, n: usize) -> PipelineConfig {
    let template = dir.join("template.nii.gz");
    write_nifti(&template_volume().unwrap(), &template).unwrap();
    let subjects = (0..n)
        .map(|i| {
            let id = format!("sub{:02}", i + 1);
            let f = write_synthetic_subject(dir, &id, i as u64 + 7).unwrap();
            SubjectRecord {
                subject_id: id,
                asl_input: f.asl_difference,
                asl_kind: Default::default(),
                pd_image: Some(f.pd),
                structural: f.structural,
                structural_contrast: Default::default(),
                external_tissue_maps: None,
                external_affine: None,
                asl_origin_mm: None,
                structural_origin_mm: None,
            }
        })
        .collect();
    let text = format!(
        "output_root = {:?}\nrun_id = \"r1\"\nthreads = 2\n[normalize]\ntemplate = {:?}\n",
        dir.join("out"),
        template
    );
    let mut cfg = PipelineConfig::from_toml_str(&text, dir).unwrap();
    cfg.steps = StepFlags::all();
    cfg.acquisition = Some(fixture_acquisition());
    cfg.smoothing_fwhm_mm = [6.0; 3];
    cfg.subjects = subjects;
    cfg
}

fn files_under(p: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

#[test]
fn two_subjects_full_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2);
    let report = run_pipeline(&cfg).unwrap();
    for s in &report.subjects {
        assert_eq!(s.status, SubjectStatus::Ok, "{:?}: {:?}", s.failed_step, s.error);
        eprintln!("{} took {:.1} s", s.subject_id, s.seconds);
    }
    let run_dir = dir.path().join("out/r1");
    for id in ["sub01", "sub02"] {
        for f in [
            "step_01_cbf.nii.gz",
            "step_05_cbf_coreg.nii.gz",
            "step_05_structural_to_asl.txt",
            "step_06_cbf_gm_pvc.nii.gz",
            "step_08_cbf_normalized.nii.gz",
            "step_08_affine.txt",
            "step_09_cbf_smoothed.nii.gz",
        ] {
            assert!(run_dir.join(id).join(f).is_file(), "{id}/{f}");
        }
        assert!(run_dir.join("qc").join(format!("{id}_mosaic.png")).is_file());
    }
    // every output volume is reachable from the report
    let listed: Vec<PathBuf> = report
        .subjects
        .iter()
        .flat_map(|s| s.steps.iter().flat_map(|st| st.outputs.iter().map(|o| run_dir.join(o))))
        .collect();
    for f in files_under(&run_dir) {
        let in_subject = f.parent().unwrap() != run_dir && !f.starts_with(run_dir.join("qc"));
        if in_subject {
            assert!(listed.contains(&f), "{} not in report", f.display());
        }
    }
    let norm = read_nifti(&run_dir.join("sub01/step_08_cbf_normalized.nii.gz")).unwrap();
    assert_eq!(norm.spacing(), [2.0, 2.0, 2.0]);
    let html = std::fs::read_to_string(run_dir.join("qc/index.html")).unwrap();
    assert!(!html.contains("http://") && !html.contains("https://"));
    assert_eq!(html.matches("badge ok").count(), 2);

    // rerun into the same directory fails before touching anything
    let before: Vec<(PathBuf, std::time::SystemTime)> = files_under(&run_dir)
        .into_iter()
        .map(|f| {
            let m = std::fs::metadata(&f).unwrap().modified().unwrap();
            (f, m)
        })
        .collect();
    assert!(matches!(run_pipeline(&cfg), Err(Error::RunExists(_))));
    let after: Vec<(PathBuf, std::time::SystemTime)> = files_under(&run_dir)
        .into_iter()
        .map(|f| {
            let m = std::fs::metadata(&f).unwrap().modified().unwrap();
            (f, m)
        })
        .collect();
    assert_eq!(before, after);
}

#[test]
fn missing_input_fails_only_that_subject_and_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 2);
    cfg.steps.normalize = false;
    cfg.steps.smooth = false;
    cfg.threads = 1;
    cfg.run_id = Some("one_thread".into());
    let a = run_pipeline(&cfg).unwrap();
    assert!(a.all_ok());

    std::fs::remove_file(&cfg.subjects[1].structural).unwrap();
    cfg.threads = 3;
    cfg.run_id = Some("three_threads".into());
    let b = run_pipeline(&cfg).unwrap();
    assert_eq!(b.subjects[0].status, SubjectStatus::Ok);
    assert_eq!(b.subjects[1].status, SubjectStatus::Failed);
    assert_eq!(b.subjects[1].failed_step.as_deref(), Some("load_inputs"));
    let html = std::fs::read_to_string(dir.path().join("out/three_threads/qc/index.html")).unwrap();
    assert!(html.contains("FAILED: load_inputs"));

    // the surviving subject is bit-identical across runs and thread counts
    let root = dir.path().join("out");
    for st in &a.subjects[0].steps {
        for o in &st.outputs {
            let x = std::fs::read(root.join("one_thread").join(o)).unwrap();
            let y = std::fs::read(root.join("three_threads").join(o)).unwrap();
            assert!(x == y, "{o} differs");
        }
    }
}

#[test]
fn coregistration_recovers_simulated_head_motion() {
    use perfmap::RigidTransform;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 1);
    cfg.steps = StepFlags { quantify: true, mask_segment: true, coregister: true, ..Default::default() };
    let report = run_pipeline(&cfg).unwrap();
    let s = &report.subjects[0];
    assert_eq!(s.status, SubjectStatus::Ok, "{:?}", s.error);
    let f = write_synthetic_subject(&dir.path().join("out"), "check", 7).unwrap();
    // structural world -> ASL world is the motion between sessions
    let truth = RigidTransform::from_affine(&f.asl_pose.to_affine().compose(&f.geometry.pose.to_affine().invert().unwrap())).unwrap();
    let est = &s.steps.iter().find(|st| st.name == "coregister").unwrap().parameters["transform"];
    for a in 0..3 {
        let r = est["rotations_deg"][a].as_f64().unwrap();
        let t = est["translations_mm"][a].as_f64().unwrap();
        eprintln!("axis {a}: rot {r:.3} vs {:.3}, trans {t:.3} vs {:.3}", truth.rotations[a].to_degrees(), truth.translations[a]);
        assert!((r - truth.rotations[a].to_degrees()).abs() < 1.0);
        assert!((t - truth.translations[a]).abs() < 1.0);
    }
}
