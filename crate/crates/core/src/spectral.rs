//! Frequency grids, pulse spectra and unit conversions.
//!
//! All spectra live on uniform angular-frequency grids and are L2-normalized
//! in angular frequency, so that `sum(|a|^2) * d_omega == 1`. Bandwidths are
//! quoted as intensity FWHM in wavelength units and converted once, at
//! construction.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum (m/s), exact.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Time-bandwidth product of a transform-limited Gaussian pulse.
pub const GAUSSIAN_TIME_BANDWIDTH: f64 = 0.441;

/// Highest Hermite-Gaussian order the engine supports.
pub const MAX_HG_ORDER: usize = 10;

/// Largest tolerated relative error of the discretized Hermite-Gaussian norm.
const COVERAGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("{quantity} must be positive, got {value}")]
    Domain { quantity: &'static str, value: f64 },
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("grid does not cover the pulse: discretized norm off by {relative_error:.3e}")]
    Coverage { relative_error: f64 },
    #[error("grid mismatch between spectral amplitudes")]
    GridMismatch,
    #[error("invalid pulse specification: {0}")]
    InvalidPulse(String),
    #[error("cannot normalize an all-zero amplitude")]
    ZeroNorm,
    #[error("FWHM measurement failed: {0}")]
    Measurement(String),
}

pub type Result<T, E = SpectralError> = std::result::Result<T, E>;

fn require_positive(quantity: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SpectralError::Domain { quantity, value })
    }
}

/// `2 pi c / lambda`.
pub fn wavelength_to_angular_frequency(wavelength: f64) -> Result<f64> {
    require_positive("wavelength", wavelength)?;
    Ok(2.0 * PI * SPEED_OF_LIGHT / wavelength)
}

pub fn angular_frequency_to_wavelength(omega: f64) -> Result<f64> {
    require_positive("angular frequency", omega)?;
    Ok(2.0 * PI * SPEED_OF_LIGHT / omega)
}

/// Wavelength generated at the sum frequency of two input wavelengths.
pub fn sum_frequency_wavelength(lambda_in: f64, lambda_pump: f64) -> Result<f64> {
    require_positive("input wavelength", lambda_in)?;
    require_positive("pump wavelength", lambda_pump)?;
    Ok(1.0 / (1.0 / lambda_in + 1.0 / lambda_pump))
}

/// Wavelength FWHM to ordinary-frequency FWHM (Hz), `c * d_lambda / lambda^2`.
pub fn wavelength_fwhm_to_frequency(central_wavelength: f64, fwhm: f64) -> Result<f64> {
    require_positive("central wavelength", central_wavelength)?;
    require_positive("bandwidth", fwhm)?;
    Ok(SPEED_OF_LIGHT * fwhm / (central_wavelength * central_wavelength))
}

/// Wavelength FWHM to angular-frequency FWHM (rad/s).
pub fn wavelength_fwhm_to_angular(central_wavelength: f64, fwhm: f64) -> Result<f64> {
    Ok(2.0 * PI * wavelength_fwhm_to_frequency(central_wavelength, fwhm)?)
}

/// Angular-frequency FWHM back to a wavelength FWHM at `central_wavelength`.
pub fn angular_fwhm_to_wavelength(central_wavelength: f64, fwhm_omega: f64) -> Result<f64> {
    require_positive("central wavelength", central_wavelength)?;
    require_positive("bandwidth", fwhm_omega)?;
    Ok(fwhm_omega * central_wavelength * central_wavelength / (2.0 * PI * SPEED_OF_LIGHT))
}

/// Transform-limited Gaussian pulse duration for a wavelength FWHM.
pub fn bandwidth_to_duration(central_wavelength: f64, fwhm_bandwidth: f64) -> Result<f64> {
    let dnu = wavelength_fwhm_to_frequency(central_wavelength, fwhm_bandwidth)?;
    Ok(GAUSSIAN_TIME_BANDWIDTH / dnu)
}

/// Inverse of [`bandwidth_to_duration`].
pub fn duration_to_bandwidth(central_wavelength: f64, duration: f64) -> Result<f64> {
    require_positive("central wavelength", central_wavelength)?;
    require_positive("duration", duration)?;
    let dnu = GAUSSIAN_TIME_BANDWIDTH / duration;
    Ok(dnu * central_wavelength * central_wavelength / SPEED_OF_LIGHT)
}

/// Uniform angular-frequency grid `center - span/2 ..= center + span/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    center: f64,
    span: f64,
    n_points: usize,
}

impl FrequencyGrid {
    pub fn new(center: f64, span: f64, n_points: usize) -> Result<Self> {
        if !(center.is_finite() && span.is_finite()) || span <= 0.0 {
            return Err(SpectralError::InvalidGrid(format!(
                "span must be positive and finite, got {span}"
            )));
        }
        if n_points < 2 {
            return Err(SpectralError::InvalidGrid(format!(
                "need at least 2 points, got {n_points}"
            )));
        }
        Ok(Self {
            center,
            span,
            n_points,
        })
    }

    /// Grid spanning every difference `a - b` with `a` on `minuend` and `b` on
    /// `subtrahend`, with two spacings of slack on each side.
    pub fn covering_differences(
        minuend: &FrequencyGrid,
        subtrahend: &FrequencyGrid,
        n_points: usize,
    ) -> Result<Self> {
        let lo = minuend.first() - subtrahend.last();
        let hi = minuend.last() - subtrahend.first();
        let raw = hi - lo;
        let span = raw * (n_points as f64 - 1.0) / (n_points as f64 - 5.0);
        Self::new(0.5 * (lo + hi), span, n_points)
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.span / (self.n_points as f64 - 1.0)
    }

    pub fn first(&self) -> f64 {
        self.center - 0.5 * self.span
    }

    pub fn last(&self) -> f64 {
        self.center + 0.5 * self.span
    }

    #[inline]
    pub fn omega(&self, index: usize) -> f64 {
        self.first() + index as f64 * self.spacing()
    }

    pub fn samples(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.omega(i)).collect()
    }

    pub fn contains(&self, omega: f64) -> bool {
        let tol = 1e-9 * self.spacing();
        omega >= self.first() - tol && omega <= self.last() + tol
    }

    /// Two grids are compatible when they sample the same points.
    pub fn matches(&self, other: &FrequencyGrid) -> bool {
        self.n_points == other.n_points
            && (self.center - other.center).abs() <= 1e-12 * self.center.abs().max(1.0)
            && (self.span - other.span).abs() <= 1e-12 * self.span
    }
}

/// A complex amplitude sampled on a grid, without any normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub grid: FrequencyGrid,
    pub values: Vec<Complex64>,
}

impl SampledField {
    pub fn new(grid: FrequencyGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SpectralError::GridMismatch);
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: FrequencyGrid) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
            grid,
        }
    }

    /// `sum(|a|^2) * d_omega`.
    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.spacing()
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm_sqr()).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Linear interpolation of the complex amplitude; `None` outside the grid.
    pub fn interpolate(&self, omega: f64) -> Option<Complex64> {
        if !self.grid.contains(omega) {
            return None;
        }
        let pos = (omega - self.grid.first()) / self.grid.spacing();
        let last = self.grid.len() - 1;
        let lo = (pos.floor().max(0.0) as usize).min(last - 1);
        let frac = (pos - lo as f64).clamp(0.0, 1.0);
        Some(self.values[lo] * (1.0 - frac) + self.values[lo + 1] * frac)
    }

    pub fn normalized(self) -> Result<SpectralAmplitude> {
        SpectralAmplitude::from_values(self.grid, self.values)
    }
}

/// L2-normalized spectral amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralAmplitude {
    field: SampledField,
}

impl SpectralAmplitude {
    /// Normalizes `values` so that `sum(|a|^2) * d_omega == 1`.
    pub fn from_values(grid: FrequencyGrid, values: Vec<Complex64>) -> Result<Self> {
        let mut field = SampledField::new(grid, values)?;
        let norm = field.norm_sqr().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(SpectralError::ZeroNorm);
        }
        for v in field.values.iter_mut() {
            *v /= norm;
        }
        Ok(Self { field })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.field.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.field.values
    }

    pub fn as_field(&self) -> &SampledField {
        &self.field
    }

    pub fn into_field(self) -> SampledField {
        self.field
    }
}

impl From<SpectralAmplitude> for SampledField {
    fn from(a: SpectralAmplitude) -> Self {
        a.field
    }
}

/// Pulse description in the units an experimentalist quotes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    /// m
    pub central_wavelength: f64,
    /// intensity FWHM of the underlying Gaussian, m
    pub fwhm_bandwidth: f64,
    pub hg_order: usize,
    /// Polynomial spectral phase in `omega - omega0`: rad, rad s, rad s^2, ...
    #[serde(default)]
    pub spectral_phase: Vec<f64>,
}

impl PulseSpec {
    pub fn gaussian(central_wavelength: f64, fwhm_bandwidth: f64) -> Self {
        Self {
            central_wavelength,
            fwhm_bandwidth,
            hg_order: 0,
            spectral_phase: Vec::new(),
        }
    }

    pub fn with_order(mut self, hg_order: usize) -> Self {
        self.hg_order = hg_order;
        self
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("central wavelength", self.central_wavelength)?;
        require_positive("bandwidth", self.fwhm_bandwidth)?;
        if self.hg_order > MAX_HG_ORDER {
            return Err(SpectralError::InvalidPulse(format!(
                "Hermite-Gaussian order {} exceeds the supported maximum {MAX_HG_ORDER}",
                self.hg_order
            )));
        }
        if self.spectral_phase.iter().any(|c| !c.is_finite()) {
            return Err(SpectralError::InvalidPulse(
                "spectral phase coefficients must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn center_omega(&self) -> Result<f64> {
        wavelength_to_angular_frequency(self.central_wavelength)
    }

    /// Angular-frequency FWHM of `|HG_0|^2`.
    pub fn fwhm_omega(&self) -> Result<f64> {
        wavelength_fwhm_to_angular(self.central_wavelength, self.fwhm_bandwidth)
    }

    /// Width `sigma` of `exp(-x^2 / 2 sigma^2)` whose square has the requested FWHM.
    pub fn sigma_omega(&self) -> Result<f64> {
        Ok(self.fwhm_omega()? / (2.0 * LN_2.sqrt()))
    }

    pub fn duration(&self) -> Result<f64> {
        bandwidth_to_duration(self.central_wavelength, self.fwhm_bandwidth)
    }

    fn phase_at(&self, detuning: f64) -> f64 {
        // Horner, highest order first
        self.spectral_phase
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * detuning + c)
    }
}

/// Orthonormal Hermite-Gaussian function `H_n(x) exp(-x^2/2) / sqrt(2^n n! sqrt(pi))`.
pub fn hermite_function(order: usize, x: f64) -> f64 {
    // normalized three-term recurrence, stable for the orders used here
    let gauss = (-0.5 * x * x).exp() / PI.sqrt().sqrt();
    if order == 0 {
        return gauss;
    }
    let mut prev = gauss;
    let mut cur = 2f64.sqrt() * x * gauss;
    for n in 1..order {
        let n = n as f64;
        let next = (2.0 / (n + 1.0)).sqrt() * x * cur - (n / (n + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Physicists' Hermite polynomial `H_n(x)`.
pub fn hermite_polynomial(order: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if order == 0 {
        return prev;
    }
    let mut cur = 2.0 * x;
    for n in 1..order {
        let next = 2.0 * x * cur - 2.0 * n as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Hermite-Gaussian pulse amplitude sampled on `grid`.
pub fn make_hermite_gaussian(spec: &PulseSpec, grid: &FrequencyGrid) -> Result<SpectralAmplitude> {
    spec.validate()?;
    let omega0 = spec.center_omega()?;
    let sigma = spec.sigma_omega()?;
    let values: Vec<Complex64> = (0..grid.len())
        .map(|i| {
            let detuning = grid.omega(i) - omega0;
            let amp = hermite_function(spec.hg_order, detuning / sigma) / sigma.sqrt();
            Complex64::from_polar(amp, spec.phase_at(detuning))
        })
        .collect();
    let norm = values.iter().map(|v| v.norm_sqr()).sum::<f64>() * grid.spacing();
    let relative_error = (norm - 1.0).abs();
    if !(relative_error <= COVERAGE_TOLERANCE) {
        return Err(SpectralError::Coverage { relative_error });
    }
    SpectralAmplitude::from_values(*grid, values)
}

/// `sum(a * conj(b)) * d_omega`.
pub fn overlap(a: &SpectralAmplitude, b: &SpectralAmplitude) -> Result<Complex64> {
    field_overlap(a.as_field(), b.as_field())
}

/// [`overlap`] for unnormalized fields.
pub fn field_overlap(a: &SampledField, b: &SampledField) -> Result<Complex64> {
    if !a.grid.matches(&b.grid) {
        return Err(SpectralError::GridMismatch);
    }
    let sum: Complex64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y.conj())
        .sum();
    Ok(sum * a.grid.spacing())
}

/// Result of a FWHM measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwhmMeasurement {
    pub width: f64,
    pub left: f64,
    pub right: f64,
    /// More than two half-maximum crossings were found; the outermost were used.
    pub ambiguous: bool,
}

/// FWHM of `|a|^2` on its grid.
pub fn fwhm(a: &SampledField) -> Result<FwhmMeasurement> {
    let axis = a.grid.samples();
    fwhm_of_samples(&axis, &a.intensity())
}

/// FWHM of a sampled, non-negative profile, interpolating linearly between
/// the samples that bracket each half-maximum crossing.
pub fn fwhm_of_samples(axis: &[f64], profile: &[f64]) -> Result<FwhmMeasurement> {
    if axis.len() != profile.len() || axis.len() < 3 {
        return Err(SpectralError::Measurement(
            "need at least three samples with matching axis".into(),
        ));
    }
    let (peak_idx, peak) = profile
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(SpectralError::Measurement("profile has no positive maximum".into()));
    }
    let half = 0.5 * peak;
    let crossing = |i: usize| {
        let (x0, x1) = (axis[i], axis[i + 1]);
        let (y0, y1) = (profile[i], profile[i + 1]);
        x0 + (half - y0) * (x1 - x0) / (y1 - y0)
    };
    let mut crossings = Vec::new();
    for i in 0..profile.len() - 1 {
        let (y0, y1) = (profile[i] - half, profile[i + 1] - half);
        if (y0 < 0.0 && y1 >= 0.0) || (y0 >= 0.0 && y1 < 0.0) {
            crossings.push(crossing(i));
        }
    }
    let peak_at = axis[peak_idx];
    let left = crossings.iter().copied().filter(|&x| x < peak_at).reduce(f64::min);
    let right = crossings.iter().copied().filter(|&x| x > peak_at).reduce(f64::max);
    match (left, right) {
        (Some(left), Some(right)) => {
            let ambiguous = crossings.len() > 2;
            if ambiguous {
                log::warn!(
                    "FWHM ambiguous: {} half-maximum crossings, using the outermost pair",
                    crossings.len()
                );
            }
            Ok(FwhmMeasurement {
                width: right - left,
                left,
                right,
                ambiguous,
            })
        }
        _ => Err(SpectralError::Measurement(
            "profile does not fall below half maximum on both sides".into(),
        )),
    }
}
