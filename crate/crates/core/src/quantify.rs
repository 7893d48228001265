//! Single-delay CBF quantification for pCASL and PASL.
//!
//! Both modalities use the single-compartment general kinetic model:
//!
//! ```text
//! pCASL: CBF = 6000·λ·ΔM·exp(PLD/T1b) / (2·α·T1b·M_PD·(1 − exp(−τ/T1b)))
//! PASL:  CBF = 6000·λ·ΔM·exp(TI/T1b)  / (2·α·TI1·M_PD)
//! ```
//!
//! in ml/100g/min. Voxels whose PD falls below a fraction of the robust PD
//! maximum are set to 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::robust_max;
use crate::volume::{ensure_same_grid, Volume3D};

pub const CBF_UNITS: &str = "ml/100g/min";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Pcasl,
    Pasl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionParams {
    pub modality: Modality,
    /// PLD (s); pCASL.
    #[serde(default)]
    pub post_label_delay_s: Option<f64>,
    /// τ (s); pCASL.
    #[serde(default)]
    pub label_duration_s: Option<f64>,
    /// TI (s); PASL.
    #[serde(default)]
    pub inversion_time_s: Option<f64>,
    /// TI1 (s); PASL.
    #[serde(default)]
    pub bolus_duration_s: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda_ml_per_g: f64,
    /// Labeling efficiency; defaults to 0.85 (pCASL) or 0.98 (PASL).
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_t1_blood")]
    pub t1_blood_s: f64,
    #[serde(default = "default_pd_threshold")]
    pub pd_threshold_fraction: f64,
    /// Multiplies α to account for background-suppression losses.
    #[serde(default = "one")]
    pub background_suppression_efficiency: f64,
    /// Number of averages in the difference image.
    #[serde(default = "one_u32")]
    pub nex: u32,
    /// Divide ΔM by `nex` (off: the vendor image is already averaged).
    #[serde(default)]
    pub divide_by_nex: bool,
}

fn default_lambda() -> f64 {
    0.9
}
fn default_t1_blood() -> f64 {
    1.65
}
fn default_pd_threshold() -> f64 {
    0.05
}
fn one() -> f64 {
    1.0
}
fn one_u32() -> u32 {
    1
}

impl AcquisitionParams {
    /// pCASL defaults with the given timing.
    pub fn pcasl(post_label_delay_s: f64, label_duration_s: f64) -> Self {
        Self {
            modality: Modality::Pcasl,
            post_label_delay_s: Some(post_label_delay_s),
            label_duration_s: Some(label_duration_s),
            inversion_time_s: None,
            bolus_duration_s: None,
            lambda_ml_per_g: default_lambda(),
            alpha: None,
            t1_blood_s: default_t1_blood(),
            pd_threshold_fraction: default_pd_threshold(),
            background_suppression_efficiency: 1.0,
            nex: 1,
            divide_by_nex: false,
        }
    }

    pub fn pasl(inversion_time_s: f64, bolus_duration_s: f64) -> Self {
        Self {
            modality: Modality::Pasl,
            post_label_delay_s: None,
            label_duration_s: None,
            inversion_time_s: Some(inversion_time_s),
            bolus_duration_s: Some(bolus_duration_s),
            ..Self::pcasl(0.0, 0.0)
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        let base = self.alpha.unwrap_or(match self.modality {
            Modality::Pcasl => 0.85,
            Modality::Pasl => 0.98,
        });
        base * self.background_suppression_efficiency
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be positive, got {v}")))
            }
        };
        let required = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| Error::Parameter(format!("{name} is required for {:?}", self.modality)))
        };
        positive("lambda_ml_per_g", self.lambda_ml_per_g)?;
        positive("t1_blood_s", self.t1_blood_s)?;
        let alpha = self.effective_alpha();
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if !(self.pd_threshold_fraction >= 0.0 && self.pd_threshold_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "pd_threshold_fraction must lie in [0, 1), got {}",
                self.pd_threshold_fraction
            )));
        }
        if self.nex == 0 {
            return Err(Error::Parameter("nex must be at least 1".into()));
        }
        match self.modality {
            Modality::Pcasl => {
                positive("post_label_delay_s", required("post_label_delay_s", self.post_label_delay_s)?)?;
                positive("label_duration_s", required("label_duration_s", self.label_duration_s)?)?;
            }
            Modality::Pasl => {
                let ti = required("inversion_time_s", self.inversion_time_s)?;
                let ti1 = required("bolus_duration_s", self.bolus_duration_s)?;
                positive("inversion_time_s", ti)?;
                positive("bolus_duration_s", ti1)?;
                if ti1 > ti {
                    return Err(Error::Parameter(format!(
                        "bolus duration TI1 = {ti1} s exceeds inversion time TI = {ti} s"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Voxel-independent factor `k` so that `CBF = k · ΔM / M_PD`.
    pub fn scale_factor(&self) -> Result<f64> {
        self.validate()?;
        let lambda = self.lambda_ml_per_g;
        let t1 = self.t1_blood_s;
        let alpha = self.effective_alpha();
        let nex = if self.divide_by_nex { self.nex as f64 } else { 1.0 };
        let k = match self.modality {
            Modality::Pcasl => {
                let pld = self.post_label_delay_s.unwrap_or_default();
                let tau = self.label_duration_s.unwrap_or_default();
                6000.0 * lambda * (pld / t1).exp() / (2.0 * alpha * t1 * (1.0 - (-tau / t1).exp()))
            }
            Modality::Pasl => {
                let ti = self.inversion_time_s.unwrap_or_default();
                let ti1 = self.bolus_duration_s.unwrap_or_default();
                6000.0 * lambda * (ti / t1).exp() / (2.0 * alpha * ti1)
            }
        };
        Ok(k / nex)
    }
}

/// Quantifies with the formula matching `params.modality`.
pub fn quantify(diff: &Volume3D, pd: &Volume3D, params: &AcquisitionParams) -> Result<Volume3D> {
    ensure_same_grid(diff.grid(), pd.grid(), "quantification inputs")?;
    let k = params.scale_factor()?;
    let threshold = params.pd_threshold_fraction * robust_max(pd.data()).unwrap_or(0.0);
    let out: Vec<f64> = diff
        .data()
        .par_iter()
        .zip(pd.data().par_iter())
        .map(|(&dm, &m0)| {
            if !(m0.is_finite() && m0 > 0.0 && m0 >= threshold) || !dm.is_finite() {
                return 0.0;
            }
            let cbf = k * dm / m0;
            if cbf.is_finite() {
                cbf
            } else {
                0.0
            }
        })
        .collect();
    Ok(diff.with_data(out)?.with_units(CBF_UNITS))
}

pub fn quantify_pcasl(diff: &Volume3D, pd: &Volume3D, params: &AcquisitionParams) -> Result<Volume3D> {
    if params.modality != Modality::Pcasl {
        return Err(Error::Parameter("quantify_pcasl called with PASL parameters".into()));
    }
    quantify(diff, pd, params)
}

pub fn quantify_pasl(diff: &Volume3D, pd: &Volume3D, params: &AcquisitionParams) -> Result<Volume3D> {
    if params.modality != Modality::Pasl {
        return Err(Error::Parameter("quantify_pasl called with pCASL parameters".into()));
    }
    quantify(diff, pd, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;

    fn pair(ratio: f64) -> (Volume3D, Volume3D) {
        let g = GridSpec::centered([4, 4, 2], [3.0, 3.0, 5.0]).unwrap();
        let pd = Volume3D::from_fn(g.clone(), |_, _, _| 1000.0);
        let dm = pd.map(|v| v * ratio);
        (dm, pd)
    }

    #[test]
    fn pcasl_reference_value() {
        // 6000·0.9·0.01·e^(2.025/1.65) / (2·0.85·1.65·(1 − e^(−1.5/1.65)))
        let (dm, pd) = pair(0.01);
        let cbf = quantify_pcasl(&dm, &pd, &AcquisitionParams::pcasl(2.025, 1.5)).unwrap();
        for v in cbf.data() {
            assert!((v - 110.003_006_946_271_95).abs() < 1e-9, "{v}");
        }
        assert_eq!(cbf.units(), CBF_UNITS);
    }

    #[test]
    fn pasl_reference_value() {
        let (dm, pd) = pair(0.01);
        let cbf = quantify_pasl(&dm, &pd, &AcquisitionParams::pasl(1.8, 0.8)).unwrap();
        for v in cbf.data() {
            assert!((v - 102.523_517_936_689_06).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn zero_difference_gives_zero() {
        let (dm, pd) = pair(0.0);
        for p in [AcquisitionParams::pcasl(2.025, 1.5), AcquisitionParams::pasl(1.8, 0.8)] {
            assert!(quantify(&dm, &pd, &p).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn doubling_bolus_halves_pasl() {
        let (dm, pd) = pair(0.013);
        let a = quantify(&dm, &pd, &AcquisitionParams::pasl(1.8, 0.6)).unwrap();
        let b = quantify(&dm, &pd, &AcquisitionParams::pasl(1.8, 1.2)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - 2.0 * y).abs() <= 1e-12 * x.abs());
        }
    }

    #[test]
    fn pcasl_increases_with_pld() {
        let (dm, pd) = pair(0.01);
        let mut last = f64::NEG_INFINITY;
        for step in 0..30 {
            let pld = 0.5 + 0.1 * step as f64;
            let v = quantify(&dm, &pd, &AcquisitionParams::pcasl(pld, 1.5)).unwrap().data()[0];
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn parameter_errors() {
        let (dm, pd) = pair(0.01);
        let mut p = AcquisitionParams::pcasl(2.0, 1.5);
        p.label_duration_s = None;
        assert!(matches!(quantify(&dm, &pd, &p), Err(Error::Parameter(_))));
        let p = AcquisitionParams::pasl(0.7, 0.8);
        assert!(matches!(quantify(&dm, &pd, &p), Err(Error::Parameter(_))));
        let mut p = AcquisitionParams::pcasl(2.0, 1.5);
        p.alpha = Some(1.2);
        assert!(quantify(&dm, &pd, &p).is_err());
    }

    #[test]
    fn grid_mismatch_rejected() {
        let (dm, _) = pair(0.01);
        let other = Volume3D::zeros(GridSpec::centered([4, 4, 3], [3.0, 3.0, 5.0]).unwrap());
        assert!(matches!(
            quantify(&dm, &other, &AcquisitionParams::pcasl(2.0, 1.5)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn low_pd_masked_and_finite() {
        let g = GridSpec::centered([10, 10, 1], [3.0, 3.0, 5.0]).unwrap();
        let pd = Volume3D::from_fn(g.clone(), |i, j, _| if i < 2 { 0.0 } else if j == 0 { 1.0 } else { 900.0 + i as f64 });
        let dm = Volume3D::from_fn(g, |i, j, _| (i as f64 - 4.0) * 3.0 + j as f64);
        let p = AcquisitionParams::pcasl(2.0, 1.5);
        let cbf = quantify(&dm, &pd, &p).unwrap();
        let thr = 0.05 * robust_max(pd.data()).unwrap();
        for (c, m) in cbf.data().iter().zip(pd.data()) {
            assert!(c.is_finite());
            if *m < thr {
                assert_eq!(*c, 0.0);
            }
        }
        // negative ΔM survives as negative CBF
        assert!(cbf.data().iter().any(|&v| v < 0.0));
    }
}
