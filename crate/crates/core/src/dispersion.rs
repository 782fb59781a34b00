//! Propagation constants, quasi-phase-matching and the phase-matching amplitude.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{self, SpectralError, SPEED_OF_LIGHT};

/// Below this |x| the sinc is evaluated from its Taylor series.
const SINC_SERIES_LIMIT: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispersionError {
    #[error("output frequency {omega_out:.6e} must exceed input frequency {omega_in:.6e}")]
    Ordering { omega_in: f64, omega_out: f64 },
    #[error("invalid dispersion model: {0}")]
    InvalidModel(String),
    #[error("calibration target unreachable: {0}")]
    Calibration(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

pub type Result<T, E = DispersionError> = std::result::Result<T, E>;

/// Second-order Taylor model of one band's propagation constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandDispersion {
    /// rad/s
    pub reference_frequency: f64,
    /// 1/m
    pub beta0: f64,
    /// s/m
    pub inverse_group_velocity: f64,
    /// s^2/m
    pub gvd: f64,
}

impl BandDispersion {
    pub fn beta(&self, omega: f64) -> f64 {
        let d = omega - self.reference_frequency;
        self.beta0 + self.inverse_group_velocity * d + 0.5 * self.gvd * d * d
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.reference_frequency > 0.0) {
            return Err(DispersionError::InvalidModel(format!(
                "{name}: reference frequency must be positive"
            )));
        }
        if !(self.inverse_group_velocity > 0.0) {
            return Err(DispersionError::InvalidModel(format!(
                "{name}: inverse group velocity must be positive"
            )));
        }
        if !(self.beta0.is_finite() && self.gvd.is_finite()) {
            return Err(DispersionError::InvalidModel(format!(
                "{name}: non-finite coefficients"
            )));
        }
        Ok(())
    }
}

/// Waveguide dispersion for the input, pump and output bands plus the poling grating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionModel {
    pub input_band: BandDispersion,
    pub pump_band: BandDispersion,
    pub output_band: BandDispersion,
    /// m
    pub poling_period: f64,
    /// m
    pub waveguide_length: f64,
}

/// Walk-off times accumulated over the full waveguide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WalkoffReport {
    pub matched: bool,
    /// |1/v_in - 1/v_p| L, s
    pub input_pump: f64,
    /// |1/v_in - 1/v_out| L, s
    pub input_output: f64,
    /// |1/v_p - 1/v_out| L, s
    pub pump_output: f64,
}

impl DispersionModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.poling_period > 0.0 && self.poling_period.is_finite()) {
            return Err(DispersionError::InvalidModel(format!(
                "poling_period must be positive, got {}",
                self.poling_period
            )));
        }
        if !(self.waveguide_length > 0.0 && self.waveguide_length.is_finite()) {
            return Err(DispersionError::InvalidModel(format!(
                "waveguide_length must be positive, got {}",
                self.waveguide_length
            )));
        }
        self.input_band.validate("input band")?;
        self.pump_band.validate("pump band")?;
        self.output_band.validate("output band")
    }

    /// `2 pi / Lambda`.
    pub fn grating_momentum(&self) -> f64 {
        2.0 * PI / self.poling_period
    }

    /// Phase mismatch with the pump frequency fixed by energy conservation.
    pub fn qpm_mismatch(&self, omega_in: f64, omega_out: f64) -> Result<f64> {
        if !(omega_out > omega_in) {
            return Err(DispersionError::Ordering {
                omega_in,
                omega_out,
            });
        }
        Ok(self.mismatch_unchecked(omega_in, omega_out))
    }

    #[inline]
    pub(crate) fn mismatch_unchecked(&self, omega_in: f64, omega_out: f64) -> f64 {
        self.output_band.beta(omega_out)
            - self.input_band.beta(omega_in)
            - self.pump_band.beta(omega_out - omega_in)
            - self.grating_momentum()
    }

    /// `sinc(dk L / 2) exp(i dk L / 2)`.
    pub fn phasematching_amplitude(&self, omega_in: f64, omega_out: f64) -> Result<Complex64> {
        let dk = self.qpm_mismatch(omega_in, omega_out)?;
        Ok(phasematching_from_mismatch(dk, self.waveguide_length))
    }

    pub fn is_gv_matched(&self, pulse_duration: f64) -> WalkoffReport {
        let l = self.waveguide_length;
        let (vi, vp, vo) = (
            self.input_band.inverse_group_velocity,
            self.pump_band.inverse_group_velocity,
            self.output_band.inverse_group_velocity,
        );
        let input_pump = (vi - vp).abs() * l;
        WalkoffReport {
            matched: pulse_duration > 0.0 && input_pump < 0.1 * pulse_duration,
            input_pump,
            input_output: (vi - vo).abs() * l,
            pump_output: (vp - vo).abs() * l,
        }
    }

    /// Output walk-off `1/v_out - 1/v_in`, s/m.
    pub fn output_walkoff(&self) -> f64 {
        self.output_band.inverse_group_velocity - self.input_band.inverse_group_velocity
    }

    /// Frequency at which the output band is phase matched for an input at
    /// `omega_in`, found by bisection over `[lo, hi]`.
    pub fn phasematched_output(&self, omega_in: f64, lo: f64, hi: f64) -> Option<f64> {
        let f = |w: f64| self.mismatch_unchecked(omega_in, w);
        let (mut a, mut b) = (lo, hi);
        let (mut fa, fb) = (f(a), f(b));
        if fa.signum() == fb.signum() {
            return None;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let fm = f(m);
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        Some(0.5 * (a + b))
    }
}

/// `sin(x)/x`, continuous through zero.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < SINC_SERIES_LIMIT {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

pub fn phasematching_from_mismatch(mismatch: f64, length: f64) -> Complex64 {
    let half = 0.5 * mismatch * length;
    Complex64::from_polar(sinc(half), half)
}

/// Positive root of `sinc(x)^2 = 1/2`.
pub fn sinc_squared_half_point() -> f64 {
    let (mut a, mut b) = (1.0f64, 2.0f64);
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if sinc(m).powi(2) > 0.5 {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Targets for the default, group-velocity-matched model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    /// m
    pub input_wavelength: f64,
    /// m
    pub pump_wavelength: f64,
    /// Converted intensity FWHM in wavelength at the output wavelength, m
    pub output_fwhm: f64,
    /// `1/v_out - 1/v_in`, s/m
    pub output_walkoff: f64,
    /// m
    pub poling_period: f64,
    /// Shared group index of input and pump.
    pub group_index: f64,
    /// GVD applied to every band, s^2/m
    pub gvd: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            input_wavelength: 1535e-9,
            pump_wavelength: 865.6e-9,
            output_fwhm: 0.14e-9,
            output_walkoff: 0.4e-12 / 1e-3,
            poling_period: 4.4e-6,
            group_index: 2.2,
            gvd: 0.0,
        }
    }
}

// phase indices only enter through beta0 offsets, which are re-zeroed by calibration
const INPUT_PHASE_INDEX: f64 = 2.138;
const PUMP_PHASE_INDEX: f64 = 2.172;

/// Builds the group-velocity-matched model whose sinc phase-matching width
/// equals the requested output bandwidth and which is phase matched at the
/// design wavelengths.
pub fn calibrate_default_model(targets: &CalibrationTargets) -> Result<DispersionModel> {
    let t = targets;
    if !(t.output_walkoff > 0.0) {
        return Err(DispersionError::Calibration(format!(
            "output walk-off must be positive, got {} s/m",
            t.output_walkoff
        )));
    }
    if !(t.group_index > 0.0) {
        return Err(DispersionError::Calibration("group index must be positive".into()));
    }
    if !(t.poling_period > 0.0) {
        return Err(DispersionError::Calibration("poling period must be positive".into()));
    }
    let omega_in = spectral::wavelength_to_angular_frequency(t.input_wavelength)?;
    let omega_p = spectral::wavelength_to_angular_frequency(t.pump_wavelength)?;
    let omega_out = omega_in + omega_p;
    let lambda_out = spectral::angular_frequency_to_wavelength(omega_out)?;
    let target_omega = spectral::wavelength_fwhm_to_angular(lambda_out, t.output_fwhm)
        .map_err(|e| DispersionError::Calibration(e.to_string()))?;

    // |Phi|^2 = 1/2 at |dk| L / 2 = x_half, and dk = walkoff * (omega - omega_out)
    let length = 4.0 * sinc_squared_half_point() / (target_omega * t.output_walkoff);

    let inv_vg = t.group_index / SPEED_OF_LIGHT;
    let grating = 2.0 * PI / t.poling_period;
    let beta_in = INPUT_PHASE_INDEX * omega_in / SPEED_OF_LIGHT;
    let beta_p = PUMP_PHASE_INDEX * omega_p / SPEED_OF_LIGHT;
    let model = DispersionModel {
        input_band: BandDispersion {
            reference_frequency: omega_in,
            beta0: beta_in,
            inverse_group_velocity: inv_vg,
            gvd: t.gvd,
        },
        pump_band: BandDispersion {
            reference_frequency: omega_p,
            beta0: beta_p,
            inverse_group_velocity: inv_vg,
            gvd: t.gvd,
        },
        output_band: BandDispersion {
            reference_frequency: omega_out,
            beta0: beta_in + beta_p + grating,
            inverse_group_velocity: inv_vg + t.output_walkoff,
            gvd: t.gvd,
        },
        poling_period: t.poling_period,
        waveguide_length: length,
    };
    model.validate()?;
    Ok(model)
}

/// Model calibrated to the default targets.
pub fn default_model() -> DispersionModel {
    calibrate_default_model(&CalibrationTargets::default())
        .expect("default calibration targets are valid")
}
