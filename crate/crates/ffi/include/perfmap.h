#ifndef PERFMAP_H
#define PERFMAP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum PmStatus {
  PM_STATUS_OK = 0,
  PM_STATUS_NULL_POINTER = 1,
  PM_STATUS_INVALID_ARGUMENT = 2,
  PM_STATUS_IO = 3,
  PM_STATUS_FORMAT = 4,
  PM_STATUS_UNSUPPORTED_DATATYPE = 5,
  PM_STATUS_GEOMETRY = 6,
  PM_STATUS_PARAMETER = 7,
  PM_STATUS_DEGENERATE = 8,
  PM_STATUS_REGISTRATION = 9,
  PM_STATUS_CONVERGENCE = 10,
  PM_STATUS_DESIGN = 11,
  PM_STATUS_VALIDATION = 12,
  PM_STATUS_CONFIG = 13,
  /*
   The pipeline ran but at least one subject failed.
   */
  PM_STATUS_PARTIAL_FAILURE = 14,
  PM_STATUS_PANIC = 15,
} PmStatus;

typedef enum PmModality {
  PM_MODALITY_PCASL = 0,
  PM_MODALITY_PASL = 1,
} PmModality;

typedef enum PmPvcMethod {
  PM_PVC_METHOD_PET = 0,
  PM_PVC_METHOD_ASLLANI = 1,
} PmPvcMethod;

/*
 Opaque volume handle.
 */
typedef struct PmVolume PmVolume;

/*
 Acquisition constants. Timing fields not used by the modality are
 ignored; `alpha <= 0` selects the modality default.
 */
typedef struct PmAcquisition {
  enum PmModality modality;
  double post_label_delay_s;
  double label_duration_s;
  double inversion_time_s;
  double bolus_duration_s;
  double lambda_ml_per_g;
  double alpha;
  double t1_blood_s;
  double pd_threshold_fraction;
} PmAcquisition;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failure on this thread, or null. Valid until the
 next call into the library from the same thread.
 */
const char *pm_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *pm_version(void);

/*
 Reads a NIfTI-1 file (`.nii`, `.nii.gz` or `.hdr`/`.img`).

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PmStatus pm_volume_read(const char *path, struct PmVolume **out);

/*
 Writes a volume as float32 NIfTI-1 (gzip when the name ends in `.gz`).

 # Safety
 `v` must be a live handle and `path` a NUL-terminated string.
 */
enum PmStatus pm_volume_write(const struct PmVolume *v, const char *path);

/*
 Creates a volume from x-fastest data and a row-major 4x4 voxel-to-world
 affine. `affine` may be null for an identity-spaced grid.

 # Safety
 `dims` points to 3 values, `data` to `dims[0]*dims[1]*dims[2]` values,
 `affine` (if not null) to 16 values; `out` must be writable.
 */
enum PmStatus pm_volume_new(const uintptr_t *dims,
                            const double *affine,
                            const double *data,
                            struct PmVolume **out);

/*
 Writes the three dimensions to `out`.

 # Safety
 `v` must be a live handle; `out` must hold 3 values.
 */
enum PmStatus pm_volume_dims(const struct PmVolume *v, uintptr_t *out);

/*
 Writes the voxel spacing (mm) to `out`.

 # Safety
 `v` must be a live handle; `out` must hold 3 values.
 */
enum PmStatus pm_volume_spacing(const struct PmVolume *v, double *out);

/*
 Writes the row-major 4x4 voxel-to-world affine to `out`.

 # Safety
 `v` must be a live handle; `out` must hold 16 values.
 */
enum PmStatus pm_volume_affine(const struct PmVolume *v, double *out);

/*
 Number of voxels, or 0 for a null handle.

 # Safety
 `v` must be null or a live handle.
 */
uintptr_t pm_volume_len(const struct PmVolume *v);

/*
 Borrowed pointer to the x-fastest voxel values, valid while the handle
 lives. Null for a null handle.

 # Safety
 `v` must be null or a live handle.
 */
const double *pm_volume_data(const struct PmVolume *v);

/*
 Releases a handle. Null is ignored.

 # Safety
 `v` must be null or a handle not yet freed.
 */
void pm_volume_free(struct PmVolume *v);

/*
 Default pCASL acquisition with the given timing.
 */
struct PmAcquisition pm_acquisition_pcasl(double post_label_delay_s, double label_duration_s);

/*
 Default PASL acquisition with the given timing.
 */
struct PmAcquisition pm_acquisition_pasl(double inversion_time_s, double bolus_duration_s);

/*
 CBF map (ml/100g/min) from a difference image and a PD image.

 # Safety
 Handles must be live; `params` and `out` must be valid pointers.
 */
enum PmStatus pm_quantify(const struct PmVolume *diff,
                          const struct PmVolume *pd,
                          const struct PmAcquisition *params,
                          struct PmVolume **out);

/*
 Partial-volume correction. `mask` voxels are inside when nonzero.
 `out_wm` may be null; it receives the WM map for the regression method
 and stays untouched for the ratio method.

 # Safety
 Handles must be live; `kernel_dims` must hold 3 values or be null
 (default 5x5x1); `out_gm` must be writable.
 */
enum PmStatus pm_pvc(const struct PmVolume *cbf,
                     const struct PmVolume *p_gm,
                     const struct PmVolume *p_wm,
                     const struct PmVolume *p_csf,
                     const struct PmVolume *mask,
                     enum PmPvcMethod method,
                     const uintptr_t *kernel_dims,
                     double wm_gm_ratio,
                     struct PmVolume **out_gm,
                     struct PmVolume **out_wm);

/*
 Separable Gaussian smoothing with per-axis FWHM in millimetres.

 # Safety
 `v` must be live, `fwhm_mm` must hold 3 values, `out` must be writable.
 */
enum PmStatus pm_smooth(const struct PmVolume *v, const double *fwhm_mm, struct PmVolume **out);

/*
 Rigid registration with default settings. Writes
 `[rx, ry, rz, tx, ty, tz]` (radians, mm) of the transform mapping fixed
 world coordinates to moving world coordinates, and the final metric.

 # Safety
 Handles must be live; `out_params` must hold 6 values; `out_metric` may
 be null.
 */
enum PmStatus pm_register_rigid(const struct PmVolume *moving,
                                const struct PmVolume *fixed,
                                double *out_params,
                                double *out_metric);

/*
 Runs the pipeline described by a TOML file. Returns `PartialFailure`
 when some subjects failed; `out_failed` (may be null) receives their
 count.

 # Safety
 `config_path` must be a NUL-terminated string.
 */
enum PmStatus pm_run_pipeline(const char *config_path, uintptr_t *out_failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERFMAP_H */
