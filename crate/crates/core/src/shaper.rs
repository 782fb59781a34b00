//! Programmable pump shaper with finite spectral resolution.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::spectral::{
    self, make_hermite_gaussian, FrequencyGrid, PulseSpec, SpectralAmplitude, SpectralError,
    MAX_HG_ORDER,
};

/// Kernel support in kernel standard deviations.
const KERNEL_REACH: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShaperSettings {
    /// FWHM of the intensity response of one shaper pixel, m; 0 is ideal.
    pub resolution_fwhm: f64,
    /// Amplitudes below this fraction of the peak are zeroed; 0 disables.
    #[serde(default)]
    pub amplitude_floor: f64,
}

impl Default for ShaperSettings {
    fn default() -> Self {
        Self::ideal()
    }
}

impl ShaperSettings {
    pub fn ideal() -> Self {
        Self {
            resolution_fwhm: 0.0,
            amplitude_floor: 0.0,
        }
    }

    pub fn with_resolution(resolution_fwhm: f64) -> Self {
        Self {
            resolution_fwhm,
            amplitude_floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SpectralError> {
        if !(self.resolution_fwhm >= 0.0 && self.resolution_fwhm.is_finite()) {
            return Err(SpectralError::Domain {
                quantity: "shaper resolution_fwhm",
                value: self.resolution_fwhm,
            });
        }
        if !(0.0..=1.0).contains(&self.amplitude_floor) {
            return Err(SpectralError::Domain {
                quantity: "shaper amplitude_floor",
                value: self.amplitude_floor,
            });
        }
        Ok(())
    }
}

/// Ideal HG amplitude smeared by the shaper's Gaussian response, renormalized.
pub fn shape_pump(
    target: &PulseSpec,
    settings: &ShaperSettings,
    grid: &FrequencyGrid,
) -> Result<SpectralAmplitude, SpectralError> {
    settings.validate()?;
    let ideal = make_hermite_gaussian(target, grid)?;
    if settings.resolution_fwhm == 0.0 && settings.amplitude_floor == 0.0 {
        return Ok(ideal);
    }
    let mut values = ideal.values().to_vec();
    if settings.resolution_fwhm > 0.0 {
        let res = spectral::wavelength_fwhm_to_angular(
            target.central_wavelength,
            settings.resolution_fwhm,
        )?;
        values = blur(&values, grid.spacing(), res);
    }
    if settings.amplitude_floor > 0.0 {
        let peak = values.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let cut = settings.amplitude_floor * peak;
        for v in values.iter_mut() {
            if v.norm() < cut {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }
    SpectralAmplitude::from_values(*grid, values)
}

/// Coherent convolution with a Gaussian whose squared modulus has FWHM `res`
/// (rad/s).
fn blur(values: &[Complex64], spacing: f64, res: f64) -> Vec<Complex64> {
    let sigma = res / (2.0 * std::f64::consts::LN_2.sqrt());
    let reach = ((KERNEL_REACH * sigma / spacing).ceil() as usize).max(1);
    let kernel: Vec<f64> = (0..=reach)
        .map(|k| {
            let d = k as f64 * spacing / sigma;
            (-0.5 * d * d).exp()
        })
        .collect();
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(reach);
            let hi = (i + reach).min(n - 1);
            (lo..=hi)
                .map(|j| values[j] * kernel[i.abs_diff(j)])
                .sum::<Complex64>()
        })
        .collect()
}

/// `|<HG_n | achieved>|^2` for `n = 0..=target_order + 3`, with the HG family
/// built from `reference` (its order is ignored).
pub fn realizable_overlap(
    target_order: usize,
    achieved: &SpectralAmplitude,
    reference: &PulseSpec,
) -> Result<Vec<f64>, SpectralError> {
    let top = (target_order + 3).min(MAX_HG_ORDER);
    (0..=top)
        .map(|n| {
            let hg = make_hermite_gaussian(&reference.clone().with_order(n), achieved.grid())?;
            Ok(spectral::overlap(achieved, &hg)?.norm_sqr())
        })
        .collect()
}
