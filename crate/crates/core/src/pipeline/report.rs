//! Static HTML quality-control report with per-subject slice mosaics.

use std::fmt::Write as _;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::run::{RunReport, SubjectReport, SubjectStatus};
use crate::error::{Error, Result};
use crate::geometry::AffineTransform;
use crate::nifti::read_nifti;
use crate::resample::{resample, Interpolation};
use crate::util::percentile;
use crate::volume::{BinaryMask, Volume3D};

pub const QC_DIR: &str = "qc";
pub const SLICE_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];
const GAP: usize = 2;
const OVERLAY_ALPHA: f64 = 0.7;

/// Slice indices at fixed fractions of an axis with `n` voxels.
pub fn slice_positions(n: usize) -> [usize; 3] {
    SLICE_FRACTIONS.map(|f| (f * (n.max(1) - 1) as f64).round() as usize)
}

/// Display window for a CBF map: 0 to the 98th percentile of in-mask values.
pub fn overlay_window(map: &Volume3D, mask: &BinaryMask) -> (f64, f64) {
    let vals: Vec<f64> = mask.indices().map(|i| map.data()[i]).filter(|v| v.is_finite()).collect();
    (0.0, percentile(&vals, 98.0).unwrap_or(0.0))
}

fn hot(t: f64) -> [f64; 3] {
    [(3.0 * t).clamp(0.0, 1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// RGB 3x3 mosaic: rows axial, coronal, sagittal; columns at 25/50/75% of
/// the through-plane axis. Returns (width, height, pixels).
pub fn mosaic_rgb(map: &Volume3D, underlay: Option<&Volume3D>, window: (f64, f64)) -> (usize, usize, Vec<u8>) {
    let [nx, ny, nz] = map.dims();
    let cw = nx.max(ny);
    let ch = ny.max(nz);
    let width = 3 * cw + 4 * GAP;
    let height = 3 * ch + 4 * GAP;
    let mut px = vec![0u8; width * height * 3];
    let (ulo, uhi) = underlay
        .map(|u| {
            let nz: Vec<f64> = u.data().iter().copied().filter(|v| *v > 0.0).collect();
            (0.0, percentile(&nz, 99.0).unwrap_or(1.0))
        })
        .unwrap_or((0.0, 1.0));
    let (lo, hi) = window;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let uspan = if uhi > ulo { uhi - ulo } else { 1.0 };

    for (row, axis) in [2usize, 1, 0].into_iter().enumerate() {
        // in-plane axes (horizontal, vertical)
        let (ha, va) = match axis {
            2 => (0, 1),
            1 => (0, 2),
            _ => (1, 2),
        };
        let dims = [nx, ny, nz];
        let (w, h) = (dims[ha], dims[va]);
        for (col, &pos) in slice_positions(dims[axis]).iter().enumerate() {
            let x0 = GAP + col * (cw + GAP) + (cw - w) / 2;
            let y0 = GAP + row * (ch + GAP) + (ch - h) / 2;
            for v in 0..h {
                for u in 0..w {
                    let mut ijk = [0usize; 3];
                    ijk[axis] = pos;
                    ijk[ha] = u;
                    ijk[va] = h - 1 - v;
                    let idx = map.grid().index(ijk[0], ijk[1], ijk[2]);
                    let gray = underlay.map_or(0.0, |un| ((un.data()[idx] - ulo) / uspan).clamp(0.0, 1.0));
                    let mut rgb = [gray; 3];
                    let val = map.data()[idx];
                    if val.is_finite() && val > lo {
                        let c = hot(((val - lo) / span).clamp(0.0, 1.0));
                        for k in 0..3 {
                            rgb[k] = OVERLAY_ALPHA * c[k] + (1.0 - OVERLAY_ALPHA) * rgb[k];
                        }
                    }
                    let o = ((y0 + v) * width + x0 + u) * 3;
                    for k in 0..3 {
                        px[o + k] = (rgb[k] * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    (width, height, px)
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(io_err)?;
    w.write_image_data(rgb).map_err(io_err)?;
    w.finish().map_err(io_err)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Mosaic {
    file: String,
    window: (f64, f64),
    overlay: bool,
}

fn subject_mosaic(report: &RunReport, s: &SubjectReport, run_dir: &Path, qc_dir: &Path) -> Result<Option<Mosaic>> {
    let Some(rel) = &s.qc_map else { return Ok(None) };
    let map = read_nifti(&run_dir.join(rel))?;
    let mask = match &s.qc_mask {
        Some(m) => BinaryMask::from_volume(&read_nifti(&run_dir.join(m))?),
        None => BinaryMask::new(map.grid().clone(), map.data().iter().map(|v| *v != 0.0).collect())?,
    };
    let template = match (&report.config.normalize.template, report.config.steps.normalize) {
        (Some(t), true) => {
            let tv = read_nifti(t)?;
            Some(resample(&tv, map.grid(), &AffineTransform::identity(), Interpolation::Trilinear)?)
        }
        _ => None,
    };
    let window = overlay_window(&map, &mask);
    let (w, h, px) = mosaic_rgb(&map, template.as_ref(), window);
    let file = format!("{}_mosaic.png", s.subject_id);
    write_png(&qc_dir.join(&file), w, h, &px)?;
    Ok(Some(Mosaic { file, window, overlay: template.is_some() }))
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;background:#fafafa;color:#222}\
section{background:#fff;border:1px solid #ddd;border-radius:6px;padding:1em;margin-bottom:1.5em}\
table{border-collapse:collapse;margin:.5em 0}td,th{border:1px solid #ccc;padding:.2em .6em;text-align:left}\
.badge{display:inline-block;padding:.15em .6em;border-radius:4px;color:#fff;font-weight:bold}\
.ok{background:#2e7d32}.fail{background:#c62828}img{image-rendering:pixelated;width:540px;max-width:100%}\
pre{white-space:pre-wrap;background:#fff3f3;padding:.5em}";

/// Writes `qc/index.html` and one mosaic per completed subject under
/// `run_dir`. Existing QC files are replaced. Returns the HTML path.
pub fn emit_qc_report(report: &RunReport, run_dir: &Path) -> Result<PathBuf> {
    let qc_dir = run_dir.join(QC_DIR);
    std::fs::create_dir_all(&qc_dir).map_err(|e| Error::io(&qc_dir, e))?;
    let ok = report.subjects.iter().filter(|s| s.status == SubjectStatus::Ok).count();
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Quick check: {id}</title><style>{STYLE}</style></head><body>\n\
         <h1>Quick check: run {id}</h1>\n<p>perfmap {ver}; started {start}; finished {end}; {ok} of {n} subjects completed.</p>\n",
        id = esc(&report.run_id),
        ver = esc(&report.tool_version),
        start = esc(&report.started_at),
        end = esc(&report.finished_at),
        n = report.subjects.len(),
    );
    for s in &report.subjects {
        let _ = write!(h, "<section id=\"{0}\"><h2>{0} ", esc(&s.subject_id));
        match s.status {
            SubjectStatus::Ok => h.push_str("<span class=\"badge ok\">OK</span></h2>\n"),
            SubjectStatus::Failed => {
                let _ = write!(
                    h,
                    "<span class=\"badge fail\">FAILED: {}</span></h2>\n<pre>{}</pre>\n",
                    esc(s.failed_step.as_deref().unwrap_or("unknown step")),
                    esc(s.error.as_deref().unwrap_or(""))
                );
            }
        }
        if s.status == SubjectStatus::Ok {
            match subject_mosaic(report, s, run_dir, &qc_dir) {
                Ok(Some(m)) => {
                    let _ = writeln!(
                        h,
                        "<figure><img src=\"{}\" alt=\"{} mosaic\"><figcaption>Rows: axial, coronal, sagittal. \
                         Columns: 25/50/75% of the grid extent. CBF window {:.2} to {:.2} ml/100g/min{}.</figcaption></figure>",
                        esc(&m.file),
                        esc(&s.subject_id),
                        m.window.0,
                        m.window.1,
                        if m.overlay { ", over the template" } else { "" }
                    );
                }
                Ok(None) => h.push_str("<p>No CBF map to display.</p>\n"),
                Err(e) => {
                    let _ = writeln!(h, "<p>Mosaic unavailable: {}</p>", esc(&e.to_string()));
                }
            }
        }
        h.push_str("<table><tr><th>metric</th><th>value</th></tr>\n");
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let _ = write!(
            h,
            "<tr><td>co-registration metric</td><td>{}</td></tr>\n<tr><td>normalization metric</td><td>{}</td></tr>\n",
            fmt(s.coregistration_metric),
            fmt(s.normalization_metric)
        );
        if let Some(d) = &s.pvc_diagnostics {
            let pct = |c: usize| if d.in_mask > 0 { 100.0 * c as f64 / d.in_mask as f64 } else { 0.0 };
            for (name, c) in [
                ("PVC in-mask voxels", d.in_mask),
                ("PVC solved", d.solved),
                ("PVC rank deficient", d.rank_deficient),
                ("PVC low support", d.low_support),
                ("PVC single tissue", d.single_tissue),
                ("PVC negative clamped", d.negative_clamped),
            ] {
                let _ = writeln!(h, "<tr><td>{name}</td><td>{c} ({:.1}%)</td></tr>", pct(c));
            }
        }
        h.push_str("</table>\n<table><tr><th>step</th><th>name</th><th>seconds</th><th>outputs</th></tr>\n");
        for st in &s.steps {
            let _ = writeln!(
                h,
                "<tr><td>{}</td><td>{}</td><td>{:.2}</td><td>{}</td></tr>",
                st.step,
                esc(&st.name),
                st.seconds,
                st.outputs.len()
            );
        }
        let _ = writeln!(h, "</table><p>Subject time {:.1} s.</p></section>", s.seconds);
    }
    h.push_str("</body></html>\n");
    let path = qc_dir.join("index.html");
    std::fs::write(&path, h).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;

    #[test]
    fn slice_positions_are_fixed_fractions() {
        assert_eq!(slice_positions(91), [23, 45, 68]);
        assert_eq!(slice_positions(5), [1, 2, 3]);
        assert_eq!(slice_positions(1), [0, 0, 0]);
    }

    #[test]
    fn window_is_98th_percentile_in_mask() {
        let g = GridSpec::centered([10, 10, 1], [2.0; 3]).unwrap();
        // in-mask values 1..=50, outside 1000
        let map = Volume3D::from_fn(g.clone(), |i, j, _| if j < 5 { (j * 10 + i + 1) as f64 } else { 1000.0 });
        let mask = BinaryMask::new(g, (0..100).map(|i| i < 50).collect()).unwrap();
        let (lo, hi) = overlay_window(&map, &mask);
        assert_eq!(lo, 0.0);
        // rank 0.98 * 49 = 48.02 between 49 and 50
        assert!((hi - 49.02).abs() < 1e-12, "{hi}");
    }

    #[test]
    fn mosaic_dimensions_and_png() {
        let g = GridSpec::centered([12, 10, 8], [2.0; 3]).unwrap();
        let map = Volume3D::from_fn(g, |i, _, _| i as f64);
        let (w, h, px) = mosaic_rgb(&map, None, (0.0, 11.0));
        assert_eq!((w, h), (3 * 12 + 4 * GAP, 3 * 10 + 4 * GAP));
        assert_eq!(px.len(), w * h * 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_png(&p, w, h, &px).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..8], b"\x89PNG\r\n\x1a\n");
    }
}
