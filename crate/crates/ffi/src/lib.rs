//! C ABI for perfmap.
//!
//! Volumes cross the boundary as opaque `PmVolume` handles owned by the
//! caller and released with `pm_volume_free`. Every fallible function
//! returns a `PmStatus`; on failure `pm_last_error` describes the problem
//! for the calling thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use perfmap::coregister::{register_rigid, RegistrationConfig};
use perfmap::nifti::{read_nifti, write_nifti};
use perfmap::pipeline::{run_pipeline, PipelineConfig};
use perfmap::pvc::{pvc_asllani, pvc_pet, PvcConfig};
use perfmap::quantify::{quantify, AcquisitionParams, Modality};
use perfmap::segment::TissueProbMaps;
use perfmap::smooth::smooth_gaussian;
use perfmap::{AffineTransform, BinaryMask, Error, GridSpec, Volume3D};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    UnsupportedDatatype = 5,
    Geometry = 6,
    Parameter = 7,
    Degenerate = 8,
    Registration = 9,
    Convergence = 10,
    Design = 11,
    Validation = 12,
    Config = 13,
    /// The pipeline ran but at least one subject failed.
    PartialFailure = 14,
    Panic = 15,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmModality {
    Pcasl = 0,
    Pasl = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmPvcMethod {
    Pet = 0,
    Asllani = 1,
}

/// Acquisition constants. Timing fields not used by the modality are
/// ignored; `alpha <= 0` selects the modality default.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PmAcquisition {
    pub modality: PmModality,
    pub post_label_delay_s: f64,
    pub label_duration_s: f64,
    pub inversion_time_s: f64,
    pub bolus_duration_s: f64,
    pub lambda_ml_per_g: f64,
    pub alpha: f64,
    pub t1_blood_s: f64,
    pub pd_threshold_fraction: f64,
}

/// Opaque volume handle.
pub struct PmVolume {
    inner: Volume3D,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> PmStatus {
    match e {
        Error::Io { .. } | Error::RunExists(_) => PmStatus::Io,
        Error::Format { .. } => PmStatus::Format,
        Error::UnsupportedDatatype(_) => PmStatus::UnsupportedDatatype,
        Error::Geometry(_) => PmStatus::Geometry,
        Error::Parameter(_) => PmStatus::Parameter,
        Error::Degenerate(_) => PmStatus::Degenerate,
        Error::Registration { .. } => PmStatus::Registration,
        Error::Convergence { .. } => PmStatus::Convergence,
        Error::Design(_) => PmStatus::Design,
        Error::Validation(_) => PmStatus::Validation,
        Error::Config(_) | Error::Batch(_) => PmStatus::Config,
    }
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<PmStatus, (PmStatus, String)>) -> PmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside perfmap");
            PmStatus::Panic
        }
    }
}

fn lib<T>(r: perfmap::Result<T>) -> Result<T, (PmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (PmStatus, String) {
    (PmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn vol<'a>(p: *const PmVolume, what: &str) -> Result<&'a Volume3D, (PmStatus, String)> {
    p.as_ref().map(|v| &v.inner).ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (PmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (PmStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn put(out: *mut *mut PmVolume, v: Volume3D) -> Result<PmStatus, (PmStatus, String)> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(PmVolume { inner: v }));
    Ok(PmStatus::Ok)
}

/// Message for the last failure on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn pm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a NIfTI-1 file (`.nii`, `.nii.gz` or `.hdr`/`.img`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_read(path: *const c_char, out: *mut *mut PmVolume) -> PmStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, lib(read_nifti(&p))?)
    })
}

/// Writes a volume as float32 NIfTI-1 (gzip when the name ends in `.gz`).
///
/// # Safety
/// `v` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_write(v: *const PmVolume, path: *const c_char) -> PmStatus {
    guard(|| {
        let v = vol(v, "volume")?;
        let p = path_arg(path, "path")?;
        lib(write_nifti(v, &p))?;
        Ok(PmStatus::Ok)
    })
}

/// Creates a volume from x-fastest data and a row-major 4x4 voxel-to-world
/// affine. `affine` may be null for an identity-spaced grid.
///
/// # Safety
/// `dims` points to 3 values, `data` to `dims[0]*dims[1]*dims[2]` values,
/// `affine` (if not null) to 16 values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_new(
    dims: *const usize,
    affine: *const f64,
    data: *const f64,
    out: *mut *mut PmVolume,
) -> PmStatus {
    guard(|| {
        if dims.is_null() || data.is_null() {
            return Err(null("dims or data"));
        }
        let d = [*dims, *dims.add(1), *dims.add(2)];
        let n = d[0].checked_mul(d[1]).and_then(|x| x.checked_mul(d[2])).ok_or_else(|| {
            (PmStatus::InvalidArgument, "dimensions overflow".to_string())
        })?;
        let a = if affine.is_null() {
            AffineTransform::identity()
        } else {
            let s = std::slice::from_raw_parts(affine, 16);
            let rows = [0, 1, 2, 3].map(|r| [s[4 * r], s[4 * r + 1], s[4 * r + 2], s[4 * r + 3]]);
            lib(AffineTransform::from_rows(rows))?
        };
        let grid = lib(GridSpec::new(d, a))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        put(out, lib(Volume3D::new(grid, values, "arbitrary"))?)
    })
}

/// Writes the three dimensions to `out`.
///
/// # Safety
/// `v` must be a live handle; `out` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_dims(v: *const PmVolume, out: *mut usize) -> PmStatus {
    guard(|| {
        let v = vol(v, "volume")?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(v.dims().as_ptr(), out, 3);
        Ok(PmStatus::Ok)
    })
}

/// Writes the voxel spacing (mm) to `out`.
///
/// # Safety
/// `v` must be a live handle; `out` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_spacing(v: *const PmVolume, out: *mut f64) -> PmStatus {
    guard(|| {
        let v = vol(v, "volume")?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(v.spacing().as_ptr(), out, 3);
        Ok(PmStatus::Ok)
    })
}

/// Writes the row-major 4x4 voxel-to-world affine to `out`.
///
/// # Safety
/// `v` must be a live handle; `out` must hold 16 values.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_affine(v: *const PmVolume, out: *mut f64) -> PmStatus {
    guard(|| {
        let v = vol(v, "volume")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rows = v.affine().rows();
        for (r, row) in rows.iter().enumerate() {
            ptr::copy_nonoverlapping(row.as_ptr(), out.add(4 * r), 4);
        }
        Ok(PmStatus::Ok)
    })
}

/// Number of voxels, or 0 for a null handle.
///
/// # Safety
/// `v` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_len(v: *const PmVolume) -> usize {
    v.as_ref().map_or(0, |v| v.inner.data().len())
}

/// Borrowed pointer to the x-fastest voxel values, valid while the handle
/// lives. Null for a null handle.
///
/// # Safety
/// `v` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_data(v: *const PmVolume) -> *const f64 {
    v.as_ref().map_or(ptr::null(), |v| v.inner.data().as_ptr())
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `v` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pm_volume_free(v: *mut PmVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Default pCASL acquisition with the given timing.
#[no_mangle]
pub extern "C" fn pm_acquisition_pcasl(post_label_delay_s: f64, label_duration_s: f64) -> PmAcquisition {
    from_params(&AcquisitionParams::pcasl(post_label_delay_s, label_duration_s))
}

/// Default PASL acquisition with the given timing.
#[no_mangle]
pub extern "C" fn pm_acquisition_pasl(inversion_time_s: f64, bolus_duration_s: f64) -> PmAcquisition {
    from_params(&AcquisitionParams::pasl(inversion_time_s, bolus_duration_s))
}

fn from_params(p: &AcquisitionParams) -> PmAcquisition {
    PmAcquisition {
        modality: match p.modality {
            Modality::Pcasl => PmModality::Pcasl,
            Modality::Pasl => PmModality::Pasl,
        },
        post_label_delay_s: p.post_label_delay_s.unwrap_or(0.0),
        label_duration_s: p.label_duration_s.unwrap_or(0.0),
        inversion_time_s: p.inversion_time_s.unwrap_or(0.0),
        bolus_duration_s: p.bolus_duration_s.unwrap_or(0.0),
        lambda_ml_per_g: p.lambda_ml_per_g,
        alpha: p.alpha.unwrap_or(0.0),
        t1_blood_s: p.t1_blood_s,
        pd_threshold_fraction: p.pd_threshold_fraction,
    }
}

fn to_params(a: &PmAcquisition) -> AcquisitionParams {
    let mut p = match a.modality {
        PmModality::Pcasl => AcquisitionParams::pcasl(a.post_label_delay_s, a.label_duration_s),
        PmModality::Pasl => AcquisitionParams::pasl(a.inversion_time_s, a.bolus_duration_s),
    };
    p.lambda_ml_per_g = a.lambda_ml_per_g;
    p.alpha = (a.alpha > 0.0).then_some(a.alpha);
    p.t1_blood_s = a.t1_blood_s;
    p.pd_threshold_fraction = a.pd_threshold_fraction;
    p
}

/// CBF map (ml/100g/min) from a difference image and a PD image.
///
/// # Safety
/// Handles must be live; `params` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pm_quantify(
    diff: *const PmVolume,
    pd: *const PmVolume,
    params: *const PmAcquisition,
    out: *mut *mut PmVolume,
) -> PmStatus {
    guard(|| {
        let d = vol(diff, "diff")?;
        let p = vol(pd, "pd")?;
        let a = params.as_ref().ok_or_else(|| null("params"))?;
        put(out, lib(quantify(d, p, &to_params(a)))?)
    })
}

/// Partial-volume correction. `mask` voxels are inside when nonzero.
/// `out_wm` may be null; it receives the WM map for the regression method
/// and stays untouched for the ratio method.
///
/// # Safety
/// Handles must be live; `kernel_dims` must hold 3 values or be null
/// (default 5x5x1); `out_gm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_pvc(
    cbf: *const PmVolume,
    p_gm: *const PmVolume,
    p_wm: *const PmVolume,
    p_csf: *const PmVolume,
    mask: *const PmVolume,
    method: PmPvcMethod,
    kernel_dims: *const usize,
    wm_gm_ratio: f64,
    out_gm: *mut *mut PmVolume,
    out_wm: *mut *mut PmVolume,
) -> PmStatus {
    guard(|| {
        let cbf = vol(cbf, "cbf")?;
        let tissue = TissueProbMaps {
            p_gm: vol(p_gm, "p_gm")?.clone(),
            p_wm: vol(p_wm, "p_wm")?.clone(),
            p_csf: vol(p_csf, "p_csf")?.clone(),
        };
        let mask = BinaryMask::from_volume(vol(mask, "mask")?);
        let mut cfg = PvcConfig { wm_gm_ratio, ..Default::default() };
        if !kernel_dims.is_null() {
            cfg.kernel_dims = [*kernel_dims, *kernel_dims.add(1), *kernel_dims.add(2)];
        }
        let res = lib(match method {
            PmPvcMethod::Pet => pvc_pet(cbf, &tissue, &mask, &cfg),
            PmPvcMethod::Asllani => pvc_asllani(cbf, &tissue, &mask, &cfg),
        })?;
        if out_gm.is_null() {
            return Err(null("out_gm"));
        }
        if let (Some(wm), false) = (res.cbf_wm, out_wm.is_null()) {
            put(out_wm, wm)?;
        }
        put(out_gm, res.cbf_gm)
    })
}

/// Separable Gaussian smoothing with per-axis FWHM in millimetres.
///
/// # Safety
/// `v` must be live, `fwhm_mm` must hold 3 values, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pm_smooth(v: *const PmVolume, fwhm_mm: *const f64, out: *mut *mut PmVolume) -> PmStatus {
    guard(|| {
        let v = vol(v, "volume")?;
        if fwhm_mm.is_null() {
            return Err(null("fwhm_mm"));
        }
        let f = [*fwhm_mm, *fwhm_mm.add(1), *fwhm_mm.add(2)];
        put(out, lib(smooth_gaussian(v, f))?)
    })
}

/// Rigid registration with default settings. Writes
/// `[rx, ry, rz, tx, ty, tz]` (radians, mm) of the transform mapping fixed
/// world coordinates to moving world coordinates, and the final metric.
///
/// # Safety
/// Handles must be live; `out_params` must hold 6 values; `out_metric` may
/// be null.
#[no_mangle]
pub unsafe extern "C" fn pm_register_rigid(
    moving: *const PmVolume,
    fixed: *const PmVolume,
    out_params: *mut f64,
    out_metric: *mut f64,
) -> PmStatus {
    guard(|| {
        let m = vol(moving, "moving")?;
        let f = vol(fixed, "fixed")?;
        if out_params.is_null() {
            return Err(null("out_params"));
        }
        let r = lib(register_rigid(m, f, &RegistrationConfig::default()))?;
        let t = r.transform;
        let p = [t.rotations[0], t.rotations[1], t.rotations[2], t.translations[0], t.translations[1], t.translations[2]];
        ptr::copy_nonoverlapping(p.as_ptr(), out_params, 6);
        if !out_metric.is_null() {
            *out_metric = r.metric;
        }
        Ok(PmStatus::Ok)
    })
}

/// Runs the pipeline described by a TOML file. Returns `PartialFailure`
/// when some subjects failed; `out_failed` (may be null) receives their
/// count.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pm_run_pipeline(config_path: *const c_char, out_failed: *mut usize) -> PmStatus {
    guard(|| {
        let p = path_arg(config_path, "config_path")?;
        let cfg = lib(PipelineConfig::from_file(&p))?;
        let report = lib(run_pipeline(&cfg))?;
        let failed = report.failed().count();
        if !out_failed.is_null() {
            *out_failed = failed;
        }
        if failed == 0 {
            Ok(PmStatus::Ok)
        } else {
            let names: Vec<&str> = report.failed().map(|s| s.subject_id.as_str()).collect();
            set_error(format!("{failed} subject(s) failed: {}", names.join(", ")));
            Ok(PmStatus::PartialFailure)
        }
    })
}
