//! Virtual versions of the characterization experiments: pump-wavelength and
//! pump-bandwidth scans, the mode-selectivity benchmark, the conversion
//! efficiency curve with photon-counting noise, and the bandwidth compression.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversion::{self, ConversionError, Coupling, Engine, SliceScheme, TransferConfig, PICOJOULE};
use crate::dispersion::{self, DispersionModel};
use crate::modes::{self, ModeError};
use crate::shaper::{self, ShaperSettings};
use crate::spectral::{
    self, FrequencyGrid, PulseSpec, SampledField, SpectralAmplitude, SpectralError, SPEED_OF_LIGHT,
};

pub const NM: f64 = 1e-9;
pub const FS: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Conversion(#[from] ConversionError),
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error("invalid experiment settings: {0}")]
    Settings(String),
    #[error("fit did not converge after {iterations} iterations (a = {a}, c = {c}, residual {residual:.3e})")]
    Fit {
        iterations: usize,
        a: f64,
        c: f64,
        residual: f64,
    },
}

impl From<dispersion::DispersionError> for LabError {
    fn from(e: dispersion::DispersionError) -> Self {
        LabError::Conversion(e.into())
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub pulse: PulseSpec,
    pub mean_photon_number: f64,
    /// 1/s
    pub repetition_rate: f64,
    /// s; needed by the counting experiments, no default.
    pub integration_time: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pulse: PulseSpec::gaussian(1535.0 * NM, 12.0 * NM),
            mean_photon_number: 0.15,
            repetition_rate: 80e6,
            integration_time: None,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        self.pulse.validate()?;
        if !(self.mean_photon_number >= 0.0 && self.mean_photon_number.is_finite()) {
            return Err(LabError::Settings(format!(
                "mean_photon_number must be >= 0, got {}",
                self.mean_photon_number
            )));
        }
        if !(self.repetition_rate > 0.0) {
            return Err(LabError::Settings("repetition_rate must be positive".into()));
        }
        if let Some(t) = self.integration_time {
            if !(t > 0.0 && t.is_finite()) {
                return Err(LabError::Settings(format!(
                    "integration_time must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn require_integration_time(&self) -> Result<f64> {
        self.integration_time.ok_or_else(|| {
            LabError::Settings("probe.integration_time is required for counting experiments".into())
        })
    }

    /// Pulses per integration window.
    pub fn pulses(&self) -> Result<f64> {
        Ok(self.repetition_rate * self.require_integration_time()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// 1/s
    pub dark_count_rate: f64,
    /// counts per spectrometer bin
    pub spectrometer_background: f64,
    pub rng_seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dark_count_rate >= 0.0 && self.spectrometer_background >= 0.0) {
            return Err(LabError::Settings(
                "dark_count_rate and spectrometer_background must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Numerical settings shared by every experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub in_points: usize,
    pub out_points: usize,
    pub pump_points: usize,
    pub n_slices: usize,
    /// Input grid span in units of the widest pulse's spectral extent.
    pub in_span_factor: f64,
    /// Output grid span in units of the phase-matching FWHM.
    pub out_span_factor: f64,
    pub scheme: SliceScheme,
    /// rad/sqrt(J)
    pub c_theta: f64,
    /// First-mode angle used by the low-gain scans, rad.
    pub low_gain_theta: f64,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            in_points: 512,
            out_points: 512,
            pump_points: 4096,
            n_slices: conversion::DEFAULT_SLICES,
            in_span_factor: 10.0,
            out_span_factor: 64.0,
            scheme: SliceScheme::Exact,
            c_theta: DEFAULT_C_THETA_PER_SQRT_PJ / PICOJOULE.sqrt(),
            low_gain_theta: 0.1,
        }
    }
}

/// `asin(sqrt(0.877)) / sqrt(16)`, rad/sqrt(pJ).
pub const DEFAULT_C_THETA_PER_SQRT_PJ: f64 = 0.303_121_5;

impl EngineSettings {
    pub fn validate(&self) -> Result<()> {
        if self.in_points < 16 || self.out_points < 16 || self.pump_points < 16 {
            return Err(LabError::Settings("grids need at least 16 points".into()));
        }
        if self.n_slices < conversion::MIN_SLICES {
            return Err(LabError::Settings(format!(
                "n_slices must be at least {}",
                conversion::MIN_SLICES
            )));
        }
        if !(self.in_span_factor > 0.0 && self.out_span_factor > 0.0) {
            return Err(LabError::Settings("span factors must be positive".into()));
        }
        if !(self.c_theta >= 0.0 && self.low_gain_theta > 0.0) {
            return Err(LabError::Settings("c_theta and low_gain_theta must be positive".into()));
        }
        Ok(())
    }
}

/// Which power of the overlap a scan reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Modulus,
    #[default]
    ModulusSquared,
}

impl Readout {
    fn apply(self, intensity: f64) -> f64 {
        match self {
            Readout::ModulusSquared => intensity,
            Readout::Modulus => intensity.max(0.0).sqrt(),
        }
    }
}

/// Complete description of the virtual setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lab {
    pub model: DispersionModel,
    pub probe: ProbeConfig,
    /// Operating-point pump; scans override its center or bandwidth.
    pub pump: PulseSpec,
    pub shaper: ShaperSettings,
    pub engine: EngineSettings,
    pub noise: NoiseConfig,
}

impl Default for Lab {
    fn default() -> Self {
        Self {
            model: dispersion::default_model(),
            probe: ProbeConfig::default(),
            pump: PulseSpec::gaussian(865.6 * NM, 4.0 * NM),
            shaper: ShaperSettings::ideal(),
            engine: EngineSettings::default(),
            noise: NoiseConfig::default(),
        }
    }
}

/// Grids and signal window for a family of pumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Setup {
    pub in_grid: FrequencyGrid,
    pub out_grid: FrequencyGrid,
    pub pump_grid: FrequencyGrid,
    /// Phase-matched output frequency for the probe center, rad/s.
    pub output_center: f64,
    /// Intensity FWHM of the phase-matching profile along the output grid, rad/s.
    pub phasematching_fwhm: f64,
    /// Signal integration window, rad/s.
    pub window: (f64, f64),
}

/// Half-width of the integration window in converted FWHMs.
pub const WINDOW_HALF_WIDTHS: f64 = 3.0;

impl Lab {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.probe.validate()?;
        self.pump.validate()?;
        self.shaper.validate()?;
        self.engine.validate()?;
        self.noise.validate()
    }

    fn probe_amplitude(&self, setup: &Setup) -> Result<SpectralAmplitude> {
        Ok(spectral::make_hermite_gaussian(&self.probe.pulse, &setup.in_grid)?)
    }

    /// Grids wide enough for the probe and every pump in `pumps`.
    pub fn setup(&self, pumps: &[PulseSpec]) -> Result<Setup> {
        let extent = |p: &PulseSpec| -> Result<f64> {
            Ok(p.fwhm_omega()? * ((2 * p.hg_order + 1) as f64).sqrt())
        };
        let mut widest = extent(&self.probe.pulse)?;
        for p in pumps {
            widest = widest.max(extent(p)?);
        }
        let in_center = self.probe.pulse.center_omega()?;
        let in_span = self.engine.in_span_factor * widest;
        let in_grid = FrequencyGrid::new(in_center, in_span, self.engine.in_points)?;

        let pump_center = pumps
            .first()
            .map(|p| p.center_omega())
            .transpose()?
            .unwrap_or(self.model.pump_band.reference_frequency);
        let sum = in_center + pump_center;
        let output_center = self
            .model
            .phasematched_output(in_center, sum - 0.5 * in_span, sum + 0.5 * in_span)
            .unwrap_or(sum);

        let l = self.model.waveguide_length;
        let walkoff = (self.model.output_band.inverse_group_velocity
            - self.model.pump_band.inverse_group_velocity)
            .abs();
        let pm_fwhm = if walkoff > 0.0 {
            4.0 * dispersion::sinc_squared_half_point() / (walkoff * l)
        } else {
            in_span / self.engine.out_span_factor
        };
        let out_span = self.engine.out_span_factor * pm_fwhm;
        let out_grid = FrequencyGrid::new(output_center, out_span, self.engine.out_points)?;
        let pump_grid =
            FrequencyGrid::covering_differences(&out_grid, &in_grid, self.engine.pump_points)?;

        // measure the phase-matching width on the actual grid
        let profile: Vec<f64> = out_grid
            .samples()
            .iter()
            .map(|&w| {
                dispersion::phasematching_from_mismatch(
                    self.model.mismatch_unchecked(in_center, w),
                    l,
                )
                .norm_sqr()
            })
            .collect();
        let m = spectral::fwhm_of_samples(&out_grid.samples(), &profile)?;
        let center = 0.5 * (m.left + m.right);
        let half = WINDOW_HALF_WIDTHS * m.width;
        Ok(Setup {
            in_grid,
            out_grid,
            pump_grid,
            output_center: center,
            phasematching_fwhm: m.width,
            window: (center - half, center + half),
        })
    }

    /// Realizable pump amplitude on the setup's pump grid.
    pub fn shaped_pump(&self, pump: &PulseSpec, setup: &Setup) -> Result<SpectralAmplitude> {
        Ok(shaper::shape_pump(pump, &self.shaper, &setup.pump_grid)?)
    }

    pub fn transfer_config(
        &self,
        pump: &SpectralAmplitude,
        coupling: Coupling,
        setup: &Setup,
    ) -> TransferConfig {
        let mut cfg = TransferConfig::new(
            pump.clone(),
            self.model,
            coupling,
            setup.in_grid,
            setup.out_grid,
        )
        .with_slices(self.engine.n_slices);
        cfg.scheme = self.engine.scheme;
        cfg
    }

    /// Converted and transmitted probe amplitudes for one pump.
    pub fn convert_probe(
        &self,
        pump: &PulseSpec,
        theta: f64,
        setup: &Setup,
    ) -> Result<(SampledField, SampledField)> {
        let shaped = self.shaped_pump(pump, setup)?;
        let cfg = self.transfer_config(&shaped, Coupling::ThetaScale(theta), setup);
        cfg.validate()?;
        let engine = Engine::new(&cfg)?;
        let prepared = engine.prepare(cfg.n_slices)?;
        let probe = self.probe_amplitude(setup)?;
        Ok(engine.propagate_with(&prepared, theta, &probe)?)
    }

    /// Mean converted photons per pulse inside the signal window.
    fn window_photons(&self, converted: &SampledField, setup: &Setup) -> f64 {
        window_sum(converted, setup) * self.probe.mean_photon_number
    }
}

fn window_sum(field: &SampledField, setup: &Setup) -> f64 {
    let (lo, hi) = setup.window;
    let dw = field.grid.spacing();
    field
        .values
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let w = field.grid.omega(*k);
            w >= lo && w <= hi
        })
        .map(|(_, v)| v.norm_sqr() * dw)
        .sum()
}

fn window_bins(setup: &Setup) -> usize {
    let (lo, hi) = setup.window;
    setup
        .out_grid
        .samples()
        .iter()
        .filter(|&&w| w >= lo && w <= hi)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub abscissa: Vec<f64>,
    pub abscissa_unit: String,
    pub intensities: Vec<f64>,
    pub readout: Readout,
    /// Output wavelengths of the spectrum bins, m.
    pub spectrum_axis: Vec<f64>,
    /// `|c|^2` per output bin for every scan point, photons per pulse per rad/s.
    pub spectra: Option<Vec<Vec<f64>>>,
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavelengthScan {
    /// m
    pub start: f64,
    /// m
    pub stop: f64,
    /// m
    pub step: f64,
    pub hg_order: usize,
    /// Pump duration (s) kept fixed while the center moves.
    pub pump_duration: f64,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default = "default_true")]
    pub keep_spectra: bool,
}

fn default_true() -> bool {
    true
}

impl Default for WavelengthScan {
    fn default() -> Self {
        Self {
            start: 855.0 * NM,
            stop: 872.0 * NM,
            step: 1.0 * NM,
            hg_order: 0,
            pump_duration: 150.0 * FS,
            readout: Readout::ModulusSquared,
            keep_spectra: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthScan {
    /// m
    pub start: f64,
    /// m
    pub stop: f64,
    /// m
    pub step: f64,
    pub hg_order: usize,
    /// Fixed pump center, m.
    pub center: f64,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default = "default_true")]
    pub keep_spectra: bool,
}

impl Default for BandwidthScan {
    fn default() -> Self {
        Self {
            start: 1.0 * NM,
            stop: 8.0 * NM,
            step: 0.25 * NM,
            hg_order: 0,
            center: 865.6 * NM,
            readout: Readout::ModulusSquared,
            keep_spectra: true,
        }
    }
}

/// Inclusive arithmetic range; the stop is kept when it lies within 1e-6
/// steps of a grid point.
pub fn scan_points(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(LabError::Settings(format!(
            "scan range needs start <= stop and a positive step, got {start}..{stop} by {step}"
        )));
    }
    let n = ((stop - start) / step + 1e-6).floor() as usize + 1;
    Ok((0..n).map(|k| start + k as f64 * step).collect())
}

fn wavelengths_of(grid: &FrequencyGrid) -> Vec<f64> {
    grid.samples().iter().map(|w| 2.0 * PI * SPEED_OF_LIGHT / w).collect()
}

/// Runs `point` for every pump and assembles a scan in abscissa order.
fn run_scan(
    lab: &Lab,
    abscissa: Vec<f64>,
    unit: &str,
    pumps: Vec<PulseSpec>,
    readout: Readout,
    keep_spectra: bool,
    metadata: serde_json::Value,
) -> Result<ScanResult> {
    lab.validate()?;
    let setup = lab.setup(&pumps)?;
    let theta = lab.engine.low_gain_theta;
    let points: Vec<(f64, Vec<f64>)> = pumps
        .par_iter()
        .map(|p| {
            let (converted, _) = lab.convert_probe(p, theta, &setup)?;
            Ok((lab.window_photons(&converted, &setup), converted.intensity()))
        })
        .collect::<Result<_>>()?;
    let intensities = points.iter().map(|(i, _)| readout.apply(*i)).collect();
    let spectra = keep_spectra.then(|| points.into_iter().map(|(_, s)| s).collect());
    Ok(ScanResult {
        abscissa,
        abscissa_unit: unit.to_string(),
        intensities,
        readout,
        spectrum_axis: wavelengths_of(&setup.out_grid),
        spectra,
        metadata,
    })
}

fn snapshot(lab: &Lab, experiment: &str, params: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "experiment": experiment,
        "parameters": params,
        "lab": lab,
    })
}

/// Converted intensity versus pump center wavelength at fixed pump duration.
pub fn scan_pump_wavelength(lab: &Lab, scan: &WavelengthScan) -> Result<ScanResult> {
    if !(scan.pump_duration > 0.0) {
        return Err(LabError::Settings("pump_duration must be positive".into()));
    }
    let centers = scan_points(scan.start, scan.stop, scan.step)?;
    let pumps = centers
        .iter()
        .map(|&c| {
            let bw = spectral::duration_to_bandwidth(c, scan.pump_duration)?;
            Ok(PulseSpec::gaussian(c, bw).with_order(scan.hg_order))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = snapshot(
        lab,
        "scan-wavelength",
        serde_json::json!({
            "scan": scan,
            "low_gain_theta": lab.engine.low_gain_theta,
            "probe_frame_offset": "minus the pump detuning from the scan reference",
            "reference_wavelength": lab.pump.central_wavelength,
        }),
    );
    run_scan(lab, centers, "m", pumps, scan.readout, scan.keep_spectra, meta)
}

/// Converted intensity versus pump bandwidth at fixed center. Each point uses
/// the same first-mode angle, which fixes the pump energy after shaping.
pub fn scan_pump_bandwidth(lab: &Lab, scan: &BandwidthScan) -> Result<ScanResult> {
    let widths = scan_points(scan.start, scan.stop, scan.step)?;
    if widths[0] <= 0.0 {
        return Err(LabError::Settings("bandwidths must be positive".into()));
    }
    let pumps: Vec<PulseSpec> = widths
        .iter()
        .map(|&w| PulseSpec::gaussian(scan.center, w).with_order(scan.hg_order))
        .collect();
    let meta = snapshot(
        lab,
        "scan-bandwidth",
        serde_json::json!({
            "scan": scan,
            "low_gain_theta": lab.engine.low_gain_theta,
            "normalization": "each trace point uses the same shaped pump energy",
        }),
    );
    run_scan(lab, widths, "m", pumps, scan.readout, scan.keep_spectra, meta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub spectrum_axis: Vec<f64>,
    /// Expected counts per output bin, background included.
    pub matched_spectrum: Vec<f64>,
    pub orthogonal_spectrum: Vec<f64>,
    /// Window-integrated counts.
    pub matched: f64,
    pub orthogonal: f64,
    pub background: f64,
    pub selectivity: f64,
}

/// HG0 versus HG1 pump at full conversion of the first mode.
pub fn selectivity_benchmark(lab: &Lab, shaper: &ShaperSettings) -> Result<BenchmarkResult> {
    let mut lab = lab.clone();
    lab.shaper = *shaper;
    lab.validate()?;
    let pulses = lab.probe.pulses()?;
    let matched_pump = lab.pump.clone().with_order(0);
    let orthogonal_pump = lab.pump.clone().with_order(1);
    let setup = lab.setup(&[matched_pump.clone(), orthogonal_pump.clone()])?;
    let bins = |pump: &PulseSpec| -> Result<Vec<f64>> {
        let (converted, _) = lab.convert_probe(pump, PI / 2.0, &setup)?;
        let dw = setup.out_grid.spacing();
        Ok(converted
            .values
            .iter()
            .map(|v| {
                v.norm_sqr() * dw * lab.probe.mean_photon_number * pulses
                    + lab.noise.spectrometer_background
            })
            .collect())
    };
    let matched_spectrum = bins(&matched_pump)?;
    let orthogonal_spectrum = bins(&orthogonal_pump)?;
    let (lo, hi) = setup.window;
    let in_window = |s: &[f64]| -> f64 {
        s.iter()
            .enumerate()
            .filter(|(k, _)| {
                let w = setup.out_grid.omega(*k);
                w >= lo && w <= hi
            })
            .map(|(_, v)| v)
            .sum()
    };
    let matched = in_window(&matched_spectrum);
    let orthogonal = in_window(&orthogonal_spectrum);
    let background = lab.noise.spectrometer_background * window_bins(&setup) as f64;
    let selectivity = modes::depletion_selectivity(matched, orthogonal, background)?;
    Ok(BenchmarkResult {
        spectrum_axis: wavelengths_of(&setup.out_grid),
        matched_spectrum,
        orthogonal_spectrum,
        matched,
        orthogonal,
        background,
        selectivity,
    })
}

/// Source of the efficiency-versus-energy curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfficiencyModel {
    /// `sin^2(c_theta sqrt(E))`, the matched single-mode limit.
    #[default]
    SingleMode,
    /// Propagate the configured probe through the engine at each energy.
    Engine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingNoise {
    #[default]
    Poisson,
    /// Expected counts, no sampling.
    Noiseless,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinSquaredFit {
    pub a: f64,
    /// rad/sqrt(pJ)
    pub c: f64,
    pub iterations: usize,
    pub residual: f64,
    /// Fitted efficiency at the largest energy of the sweep.
    pub peak_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyResult {
    /// J
    pub energies: Vec<f64>,
    pub model_efficiency: Vec<f64>,
    pub raw_counts: Vec<f64>,
    pub background_counts: Vec<f64>,
    pub corrected_counts: Vec<f64>,
    /// corrected / (mean photon number * pulses)
    pub measured_efficiency: Vec<f64>,
    pub fit: SinSquaredFit,
    /// Corrected over background counts at the energy of maximum conversion.
    pub snr: f64,
}

/// Default sweep: 0 to 16 pJ in 1 pJ steps, in J.
pub fn default_energies() -> Vec<f64> {
    (0..=16).map(|k| k as f64 * PICOJOULE).collect()
}

pub fn efficiency_experiment(
    lab: &Lab,
    energies: &[f64],
    model: EfficiencyModel,
    noise: CountingNoise,
) -> Result<EfficiencyResult> {
    lab.validate()?;
    if energies.is_empty() || energies.iter().any(|e| !(*e >= 0.0)) {
        return Err(LabError::Settings("energies must be non-empty and >= 0".into()));
    }
    let pulses = lab.probe.pulses()?;
    let t = lab.probe.require_integration_time()?;
    let n = lab.probe.mean_photon_number;
    let c_theta = lab.engine.c_theta;

    let model_efficiency: Vec<f64> = match model {
        EfficiencyModel::SingleMode => energies
            .iter()
            .map(|e| (c_theta * e.sqrt()).sin().powi(2))
            .collect(),
        EfficiencyModel::Engine => {
            let setup = lab.setup(std::slice::from_ref(&lab.pump))?;
            let pump = lab.shaped_pump(&lab.pump, &setup)?;
            let cfg = lab.transfer_config(
                &pump,
                Coupling::PumpEnergy {
                    energy: 0.0,
                    c_theta,
                },
                &setup,
            );
            let probe = lab.probe_amplitude(&setup)?;
            let mut order: Vec<usize> = (0..energies.len()).collect();
            order.sort_by(|a, b| energies[*a].total_cmp(&energies[*b]));
            order.dedup_by(|a, b| energies[*a] == energies[*b]);
            let sorted: Vec<f64> = order.iter().map(|&k| energies[k]).collect();
            let curve = conversion::conversion_efficiency_curve(&cfg, &probe, &sorted)?;
            energies
                .iter()
                .map(|e| {
                    curve
                        .iter()
                        .find(|(x, _)| x == e)
                        .map(|(_, eff)| *eff)
                        .unwrap_or(0.0)
                })
                .collect()
        }
    };

    let dark = lab.noise.dark_count_rate * t;
    let draws: Vec<(f64, f64)> = model_efficiency
        .iter()
        .enumerate()
        .map(|(k, &eta)| {
            let signal = eta * n * pulses + dark;
            match noise {
                CountingNoise::Noiseless => Ok((signal, dark)),
                CountingNoise::Poisson => Ok((
                    poisson(signal, lab.noise.rng_seed, 2 * k as u64)?,
                    poisson(dark, lab.noise.rng_seed, 2 * k as u64 + 1)?,
                )),
            }
        })
        .collect::<Result<_>>()?;
    let raw_counts: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let background_counts: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let corrected_counts: Vec<f64> =
        raw_counts.iter().zip(&background_counts).map(|(r, b)| r - b).collect();
    let scale = n * pulses;
    let measured_efficiency: Vec<f64> = corrected_counts
        .iter()
        .map(|c| if scale > 0.0 { c / scale } else { 0.0 })
        .collect();

    let energies_pj: Vec<f64> = energies.iter().map(|e| e / PICOJOULE).collect();
    let fit = fit_sin_squared(&energies_pj, &measured_efficiency)?;

    let best = (0..corrected_counts.len())
        .fold(0, |b, k| if corrected_counts[k] > corrected_counts[b] { k } else { b });
    let snr = if background_counts[best] > 0.0 {
        corrected_counts[best] / background_counts[best]
    } else {
        f64::INFINITY
    };
    Ok(EfficiencyResult {
        energies: energies.to_vec(),
        model_efficiency,
        raw_counts,
        background_counts,
        corrected_counts,
        measured_efficiency,
        fit,
        snr,
    })
}

/// Poisson draw from the stream `(seed, stream)`.
fn poisson(mean: f64, seed: u64, stream: u64) -> Result<f64> {
    if mean <= 0.0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let dist = Poisson::new(mean)
        .map_err(|e| LabError::Settings(format!("bad Poisson mean {mean}: {e}")))?;
    Ok(dist.sample(&mut rng))
}

const FIT_MAX_ITERATIONS: usize = 200;
const FIT_A_BOUNDS: (f64, f64) = (0.0, 1.2);

/// Bounded Levenberg-Marquardt fit of `a sin^2(c sqrt(E))`, E in pJ.
pub fn fit_sin_squared(energies_pj: &[f64], efficiency: &[f64]) -> Result<SinSquaredFit> {
    if energies_pj.len() != efficiency.len() || energies_pj.len() < 2 {
        return Err(LabError::Settings("fit needs at least two points".into()));
    }
    let e_max = energies_pj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let a0 = efficiency
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .clamp(FIT_A_BOUNDS.0, FIT_A_BOUNDS.1);
    if a0 == 0.0 {
        return Ok(SinSquaredFit {
            a: 0.0,
            c: 0.0,
            iterations: 0,
            residual: efficiency.iter().map(|y| y * y).sum(),
            peak_efficiency: 0.0,
        });
    }
    let crossing = energies_pj
        .iter()
        .zip(efficiency)
        .find(|(_, &y)| y >= 0.5)
        .or_else(|| energies_pj.iter().zip(efficiency).find(|(_, &y)| y >= 0.5 * a0))
        .map(|(e, _)| *e)
        .filter(|e| *e > 0.0)
        .unwrap_or(e_max);
    let c0 = PI / (4.0 * crossing.sqrt());

    let residual = |a: f64, c: f64| -> f64 {
        energies_pj
            .iter()
            .zip(efficiency)
            .map(|(e, y)| (a * (c * e.sqrt()).sin().powi(2) - y).powi(2))
            .sum()
    };
    let (mut a, mut c) = (a0, c0);
    let mut cost = residual(a, c);
    let mut lambda = 1e-3;
    for it in 1..=FIT_MAX_ITERATIONS {
        // normal equations J^T J + lambda diag(J^T J)
        let (mut jaa, mut jac, mut jcc, mut ga, mut gc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (e, y) in energies_pj.iter().zip(efficiency) {
            let x = c * e.sqrt();
            let s2 = x.sin().powi(2);
            let da = s2;
            let dc = a * (2.0 * x).sin() * e.sqrt();
            let r = a * s2 - y;
            jaa += da * da;
            jac += da * dc;
            jcc += dc * dc;
            ga += da * r;
            gc += dc * r;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let (maa, mcc) = (jaa * (1.0 + lambda), jcc * (1.0 + lambda));
            let det = maa * mcc - jac * jac;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let step_a = -(mcc * ga - jac * gc) / det;
            let step_c = -(maa * gc - jac * ga) / det;
            let na = (a + step_a).clamp(FIT_A_BOUNDS.0, FIT_A_BOUNDS.1);
            let nc = (c + step_c).max(0.0);
            let new_cost = residual(na, nc);
            if new_cost <= cost {
                let small = (na - a).abs() <= 1e-12 * a.abs().max(1e-12)
                    && (nc - c).abs() <= 1e-12 * c.abs().max(1e-12);
                let flat = cost - new_cost <= 1e-15 * cost.max(1e-300);
                a = na;
                c = nc;
                cost = new_cost;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if small || flat {
                    return Ok(finish_fit(a, c, it, cost, e_max));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step at any damping: stationary point
            return Ok(finish_fit(a, c, it, cost, e_max));
        }
    }
    Err(LabError::Fit {
        iterations: FIT_MAX_ITERATIONS,
        a,
        c,
        residual: cost,
    })
}

fn finish_fit(a: f64, c: f64, iterations: usize, residual: f64, e_max: f64) -> SinSquaredFit {
    SinSquaredFit {
        a,
        c,
        iterations,
        residual,
        peak_efficiency: a * (c * e_max.sqrt()).sin().powi(2),
    }
}

/// Selected-mode magnitude reconstructed from a wavelength scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeProfile {
    /// Probe-frame frequency offset of each scan point, rad/s (minus the pump detuning).
    pub probe_offsets: Vec<f64>,
    pub magnitude: Vec<f64>,
}

/// Reads a wavelength scan as samples of `|overlap|` versus pump detuning
/// from `reference_wavelength`.
pub fn reconstruct_selected_mode(scan: &ScanResult, reference_wavelength: f64) -> Result<ModeProfile> {
    let w_ref = spectral::wavelength_to_angular_frequency(reference_wavelength)?;
    let probe_offsets = scan
        .abscissa
        .iter()
        .map(|&l| Ok(w_ref - spectral::wavelength_to_angular_frequency(l)?))
        .collect::<Result<Vec<_>>>()?;
    let magnitude = scan
        .intensities
        .iter()
        .map(|&i| match scan.readout {
            Readout::ModulusSquared => i.max(0.0).sqrt(),
            Readout::Modulus => i,
        })
        .collect();
    Ok(ModeProfile {
        probe_offsets,
        magnitude,
    })
}

impl ModeProfile {
    /// Profile as a field on a uniform grid, when the offsets are uniform.
    pub fn fwhm(&self) -> Result<f64> {
        let mut pairs: Vec<(f64, f64)> = self
            .probe_offsets
            .iter()
            .cloned()
            .zip(self.magnitude.iter().map(|m| m * m))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let axis: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let profile: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Ok(spectral::fwhm_of_samples(&axis, &profile)?.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Hz
    pub probe_fwhm: f64,
    /// Hz
    pub converted_fwhm: f64,
    pub factor: f64,
    /// m
    pub converted_center_wavelength: f64,
    /// m
    pub converted_fwhm_wavelength: f64,
}

/// Probe over converted spectral width, both measured on simulated spectra.
pub fn bandwidth_compression_report(lab: &Lab) -> Result<CompressionReport> {
    lab.validate()?;
    let setup = lab.setup(std::slice::from_ref(&lab.pump))?;
    let (converted, _) = lab.convert_probe(&lab.pump, lab.engine.low_gain_theta, &setup)?;
    let probe = lab.probe_amplitude(&setup)?;
    let probe_fwhm = spectral::fwhm(probe.as_field())?.width / (2.0 * PI);
    let m = spectral::fwhm(&converted)?;
    let converted_fwhm = m.width / (2.0 * PI);
    let center = 0.5 * (m.left + m.right);
    let center_wavelength = spectral::angular_frequency_to_wavelength(center)?;
    Ok(CompressionReport {
        probe_fwhm,
        converted_fwhm,
        factor: probe_fwhm / converted_fwhm,
        converted_center_wavelength: center_wavelength,
        converted_fwhm_wavelength: spectral::angular_fwhm_to_wavelength(center_wavelength, m.width)?,
    })
}

/// Schmidt analysis of the full Green pair at first-mode angle `theta`.
pub fn decompose(lab: &Lab, theta: f64) -> Result<(conversion::GreenPair, modes::SchmidtDecomposition)> {
    lab.validate()?;
    let setup = lab.setup(std::slice::from_ref(&lab.pump))?;
    let pump = lab.shaped_pump(&lab.pump, &setup)?;
    let cfg = lab.transfer_config(&pump, Coupling::ThetaScale(theta), &setup);
    let green = conversion::propagate(&cfg)?;
    let dec = modes::schmidt_decompose(&green)?;
    Ok((green, dec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_lab() -> Lab {
        let mut lab = Lab::default();
        lab.engine.in_points = 96;
        lab.engine.out_points = 128;
        lab.engine.pump_points = 512;
        lab.probe.integration_time = Some(1e-3);
        lab
    }

    #[test]
    fn default_wavelength_range_has_18_points() {
        let s = WavelengthScan::default();
        let p = scan_points(s.start, s.stop, s.step).unwrap();
        assert_eq!(p.len(), 18);
        assert!((p[17] - 872.0 * NM).abs() < 1e-18);
        assert_eq!(scan_points(1.0, 8.0, 0.25).unwrap().len(), 29);
        assert!(scan_points(2.0, 1.0, 0.1).is_err());
        assert!(scan_points(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn noiseless_fit_recovers_the_curve() {
        let c = 0.3037;
        let e: Vec<f64> = (0..=16).map(f64::from).collect();
        let y: Vec<f64> = e.iter().map(|e| (c * e.sqrt()).sin().powi(2)).collect();
        let fit = fit_sin_squared(&e, &y).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.c - c).abs() < 1e-6);
        assert!((fit.peak_efficiency - (c * 4.0f64).sin().powi(2)).abs() < 1e-6);
        let flat = fit_sin_squared(&e, &vec![0.0; e.len()]).unwrap();
        assert_eq!(flat.a, 0.0);
    }

    #[test]
    fn counting_is_seeded_and_zero_energy_is_empty() {
        let mut lab = small_lab();
        lab.noise.dark_count_rate = 1e4;
        let e = default_energies();
        let run = |seed| {
            let mut l = lab.clone();
            l.noise.rng_seed = seed;
            efficiency_experiment(&l, &e, EfficiencyModel::SingleMode, CountingNoise::Poisson).unwrap()
        };
        let (a, b, c) = (run(3), run(3), run(4));
        assert_eq!(a.raw_counts, b.raw_counts);
        assert_eq!(a.background_counts, b.background_counts);
        assert_ne!(a.raw_counts, c.raw_counts);

        let zero = vec![0.0; 5];
        let r = efficiency_experiment(&lab, &zero, EfficiencyModel::SingleMode, CountingNoise::Poisson)
            .unwrap();
        let sigma = (lab.noise.dark_count_rate * 1e-3).sqrt();
        assert!(r.corrected_counts.iter().all(|c| c.abs() <= 3.0 * 2f64.sqrt() * sigma + 1.0));
    }

    #[test]
    fn noiseless_efficiency_matches_the_model() {
        let lab = small_lab();
        let r = efficiency_experiment(&lab, &default_energies(), EfficiencyModel::SingleMode, CountingNoise::Noiseless)
            .unwrap();
        for (m, x) in r.measured_efficiency.iter().zip(&r.model_efficiency) {
            assert!((m - x).abs() < 1e-12);
        }
        assert!((r.fit.peak_efficiency - 0.877).abs() < 0.002);
        assert!(r.snr.is_infinite());
        let mut missing = lab.clone();
        missing.probe.integration_time = None;
        assert!(efficiency_experiment(&missing, &[0.0], EfficiencyModel::SingleMode, CountingNoise::Noiseless)
            .is_err());
    }

    #[test]
    fn readouts_share_zeros_and_peak() {
        let lab = small_lab();
        let scan = WavelengthScan {
            hg_order: 1,
            step: 2.0 * NM,
            keep_spectra: false,
            ..Default::default()
        };
        let sq = scan_pump_wavelength(&lab, &scan).unwrap();
        let m = scan_pump_wavelength(&lab, &WavelengthScan { readout: Readout::Modulus, ..scan }).unwrap();
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        assert_eq!(argmax(&sq.intensities), argmax(&m.intensities));
        for (a, b) in sq.intensities.iter().zip(&m.intensities) {
            assert!((a.sqrt() - b).abs() <= 1e-12 * b.max(1e-300));
        }
        assert!(sq.spectra.is_none());
        assert_eq!(sq.abscissa.len(), 9);
    }

    #[test]
    fn zero_probe_reconstructs_to_zero() {
        let mut lab = small_lab();
        lab.probe.mean_photon_number = 0.0;
        let scan = WavelengthScan {
            step: 4.0 * NM,
            ..Default::default()
        };
        let r = scan_pump_wavelength(&lab, &scan).unwrap();
        let profile = reconstruct_selected_mode(&r, 865.6 * NM).unwrap();
        assert!(profile.magnitude.iter().all(|m| *m == 0.0));
        assert_eq!(profile.probe_offsets.len(), r.abscissa.len());
        // 855 nm is blue of the reference: positive pump detuning, negative probe offset
        assert!(profile.probe_offsets[0] < 0.0);
    }

    #[test]
    fn signal_at_background_level_is_reported() {
        let mut lab = small_lab();
        lab.probe.mean_photon_number = 0.0;
        lab.noise.spectrometer_background = 5.0;
        let e = selectivity_benchmark(&lab, &ShaperSettings::ideal()).unwrap_err();
        assert!(matches!(e, LabError::Mode(ModeError::SignalTooWeak { .. })), "{e}");
        let mut no_time = small_lab();
        no_time.probe.integration_time = None;
        assert!(matches!(
            selectivity_benchmark(&no_time, &ShaperSettings::ideal()),
            Err(LabError::Settings(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn corrected_counts_stay_within_the_photon_budget(seed in any::<u64>(), dark in 0.0f64..1e6) {
            let mut lab = small_lab();
            lab.noise.rng_seed = seed;
            lab.noise.dark_count_rate = dark;
            let r = efficiency_experiment(&lab, &default_energies(), EfficiencyModel::SingleMode, CountingNoise::Poisson)
                .unwrap();
            let budget = lab.probe.mean_photon_number * lab.probe.pulses().unwrap();
            for (c, raw) in r.corrected_counts.iter().zip(&r.raw_counts) {
                let sigma = raw.max(1.0).sqrt() * 2f64.sqrt();
                prop_assert!(c / budget <= 1.0 + 3.0 * sigma / budget);
            }
        }
    }
}
