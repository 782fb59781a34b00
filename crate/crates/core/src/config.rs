//! Scenario files: TOML with explicit units, resolved into SI experiment settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversion::SliceScheme;
use crate::dispersion::{self, BandDispersion, CalibrationTargets, DispersionModel};
use crate::lab::{
    self, BandwidthScan, CountingNoise, EfficiencyModel, EngineSettings, Lab, NoiseConfig,
    ProbeConfig, Readout, WavelengthScan,
};
use crate::shaper::ShaperSettings;
use crate::spectral::{self, PulseSpec};
use crate::units::{Dimension, Quantity, UnitError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn field_error(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

type Result<T, E = ConfigError> = std::result::Result<T, E>;

fn q(s: &str) -> Quantity {
    Quantity::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispersionKind {
    #[default]
    DefaultCalibrated,
    Explicit,
}

/// `default-calibrated` accepts optional target overrides; `explicit` needs
/// the length and all three bands.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispersionSection {
    pub model: DispersionKind,
    pub poling_period: Option<Quantity>,
    pub input_wavelength: Option<Quantity>,
    pub pump_wavelength: Option<Quantity>,
    pub output_fwhm: Option<Quantity>,
    pub output_walkoff: Option<Quantity>,
    pub group_index: Option<f64>,
    pub gvd: Option<Quantity>,
    pub waveguide_length: Option<Quantity>,
    pub input_band: Option<BandSection>,
    pub pump_band: Option<BandSection>,
    pub output_band: Option<BandSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSection {
    pub reference_wavelength: Quantity,
    pub beta0: Quantity,
    pub inverse_group_velocity: Quantity,
    pub gvd: Quantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseSection {
    pub central_wavelength: Quantity,
    pub fwhm_bandwidth: Quantity,
    pub hg_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub central_wavelength: Quantity,
    pub fwhm_bandwidth: Quantity,
    pub hg_order: usize,
    pub mean_photon_number: f64,
    pub repetition_rate: Quantity,
    pub integration_time: Option<Quantity>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            central_wavelength: q("1535 nm"),
            fwhm_bandwidth: q("12 nm"),
            hg_order: 0,
            mean_photon_number: 0.15,
            repetition_rate: q("80 MHz"),
            integration_time: None,
        }
    }
}

impl Default for PulseSection {
    fn default() -> Self {
        Self {
            central_wavelength: q("865.6 nm"),
            fwhm_bandwidth: q("4 nm"),
            hg_order: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShaperSection {
    /// Intensity FWHM of one pixel's response; `0 nm` is ideal.
    pub resolution: Quantity,
    pub amplitude_floor: f64,
}

impl Default for ShaperSection {
    fn default() -> Self {
        Self {
            resolution: q("0 nm"),
            amplitude_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub in_points: usize,
    pub out_points: usize,
    pub pump_points: usize,
    pub n_slices: usize,
    pub in_span_factor: f64,
    pub out_span_factor: f64,
    pub scheme: SliceScheme,
    pub c_theta: Quantity,
    pub low_gain_theta: Quantity,
}

impl Default for EngineSection {
    fn default() -> Self {
        let d = EngineSettings::default();
        Self {
            in_points: d.in_points,
            out_points: d.out_points,
            pump_points: d.pump_points,
            n_slices: d.n_slices,
            in_span_factor: d.in_span_factor,
            out_span_factor: d.out_span_factor,
            scheme: d.scheme,
            c_theta: Quantity::new(lab::DEFAULT_C_THETA_PER_SQRT_PJ, "rad/sqrt(pJ)"),
            low_gain_theta: Quantity::new(d.low_gain_theta, "rad"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub dark_count_rate: Quantity,
    /// counts per spectrometer bin
    pub spectrometer_background: f64,
    pub rng_seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            dark_count_rate: q("0 Hz"),
            spectrometer_background: 0.0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WavelengthScanSection {
    pub start: Quantity,
    pub stop: Quantity,
    pub step: Quantity,
    pub hg_order: usize,
    pub pump_duration: Quantity,
    pub readout: Readout,
    pub keep_spectra: bool,
}

impl Default for WavelengthScanSection {
    fn default() -> Self {
        Self {
            start: q("855 nm"),
            stop: q("872 nm"),
            step: q("1 nm"),
            hg_order: 0,
            pump_duration: q("150 fs"),
            readout: Readout::default(),
            keep_spectra: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthScanSection {
    pub start: Quantity,
    pub stop: Quantity,
    pub step: Quantity,
    pub hg_order: usize,
    pub center: Quantity,
    pub readout: Readout,
    pub keep_spectra: bool,
}

impl Default for BandwidthScanSection {
    fn default() -> Self {
        Self {
            start: q("1 nm"),
            stop: q("8 nm"),
            step: q("0.25 nm"),
            hg_order: 0,
            center: q("865.6 nm"),
            readout: Readout::default(),
            keep_spectra: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    /// Shaper resolution for the benchmark only; falls back to `[shaper]`.
    pub shaper_resolution: Option<Quantity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfficiencySection {
    pub energy_start: Quantity,
    pub energy_stop: Quantity,
    pub energy_step: Quantity,
    pub model: EfficiencyModel,
    pub noise: CountingNoise,
}

impl Default for EfficiencySection {
    fn default() -> Self {
        Self {
            energy_start: q("0 pJ"),
            energy_stop: q("16 pJ"),
            energy_step: q("1 pJ"),
            model: EfficiencyModel::default(),
            noise: CountingNoise::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreenExport {
    #[default]
    None,
    Csv,
    Bin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeSection {
    /// First-mode conversion angle.
    pub theta: Quantity,
    pub export_green: GreenExport,
    /// Number of leading modes written as spectra files.
    pub mode_spectra: usize,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        Self {
            theta: Quantity::new(std::f64::consts::FRAC_PI_2, "rad"),
            export_green: GreenExport::None,
            mode_spectra: 4,
        }
    }
}

/// Contents of a scenario file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub dispersion: DispersionSection,
    pub probe: ProbeSection,
    pub pump: PulseSection,
    pub shaper: ShaperSection,
    pub engine: EngineSection,
    pub noise: NoiseSection,
    pub scan_wavelength: WavelengthScanSection,
    pub scan_bandwidth: BandwidthScanSection,
    pub benchmark: BenchmarkSection,
    pub efficiency: EfficiencySection,
    pub decompose: DecomposeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyPlan {
    /// J
    pub energies: Vec<f64>,
    pub model: EfficiencyModel,
    pub noise: CountingNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecomposePlan {
    pub theta: f64,
    pub export_green: GreenExport,
    pub mode_spectra: usize,
}

/// A scenario in SI units, ready to run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub lab: Lab,
    pub wavelength_scan: WavelengthScan,
    pub bandwidth_scan: BandwidthScan,
    pub benchmark_shaper: ShaperSettings,
    pub efficiency: EfficiencyPlan,
    pub decompose: DecomposePlan,
}

impl Scenario {
    /// SHA-256 of the scenario's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
}

fn si(value: &Quantity, dim: Dimension, field: &str) -> Result<f64> {
    Ok(value.si(dim, field)?)
}

fn positive(value: &Quantity, dim: Dimension, field: &str) -> Result<f64> {
    let v = si(value, dim, field)?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(field_error(field, format!("must be positive, got {value}")));
    }
    Ok(v)
}

fn non_negative(value: &Quantity, dim: Dimension, field: &str) -> Result<f64> {
    let v = si(value, dim, field)?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(field_error(field, format!("must be >= 0, got {value}")));
    }
    Ok(v)
}

fn pulse(
    prefix: &str,
    central_wavelength: &Quantity,
    fwhm_bandwidth: &Quantity,
    hg_order: usize,
) -> Result<PulseSpec> {
    let c = positive(central_wavelength, Dimension::Length, &format!("{prefix}.central_wavelength"))?;
    let w = positive(fwhm_bandwidth, Dimension::Length, &format!("{prefix}.fwhm_bandwidth"))?;
    if hg_order > spectral::MAX_HG_ORDER {
        return Err(field_error(
            &format!("{prefix}.hg_order"),
            format!("at most {}", spectral::MAX_HG_ORDER),
        ));
    }
    Ok(PulseSpec::gaussian(c, w).with_order(hg_order))
}

impl DispersionSection {
    fn resolve(&self) -> Result<DispersionModel> {
        match self.model {
            DispersionKind::DefaultCalibrated => {
                for (name, set) in [
                    ("dispersion.waveguide_length", self.waveguide_length.is_some()),
                    ("dispersion.input_band", self.input_band.is_some()),
                    ("dispersion.pump_band", self.pump_band.is_some()),
                    ("dispersion.output_band", self.output_band.is_some()),
                ] {
                    if set {
                        return Err(field_error(name, "only allowed with model = \"explicit\""));
                    }
                }
                let d = CalibrationTargets::default();
                let opt = |v: &Option<Quantity>, dim, field: &str, default: f64| match v {
                    Some(v) => positive(v, dim, field),
                    None => Ok(default),
                };
                let targets = CalibrationTargets {
                    input_wavelength: opt(&self.input_wavelength, Dimension::Length, "dispersion.input_wavelength", d.input_wavelength)?,
                    pump_wavelength: opt(&self.pump_wavelength, Dimension::Length, "dispersion.pump_wavelength", d.pump_wavelength)?,
                    output_fwhm: opt(&self.output_fwhm, Dimension::Length, "dispersion.output_fwhm", d.output_fwhm)?,
                    output_walkoff: opt(&self.output_walkoff, Dimension::InverseVelocity, "dispersion.output_walkoff", d.output_walkoff)?,
                    poling_period: opt(&self.poling_period, Dimension::Length, "dispersion.poling_period", d.poling_period)?,
                    group_index: match self.group_index {
                        Some(n) if n > 0.0 => n,
                        Some(n) => {
                            return Err(field_error("dispersion.group_index", format!("must be positive, got {n}")))
                        }
                        None => d.group_index,
                    },
                    gvd: match &self.gvd {
                        Some(v) => si(v, Dimension::GroupVelocityDispersion, "dispersion.gvd")?,
                        None => d.gvd,
                    },
                };
                dispersion::calibrate_default_model(&targets)
                    .map_err(|e| ConfigError::Invalid(format!("dispersion: {e}")))
            }
            DispersionKind::Explicit => {
                for (name, set) in [
                    ("dispersion.input_wavelength", self.input_wavelength.is_some()),
                    ("dispersion.pump_wavelength", self.pump_wavelength.is_some()),
                    ("dispersion.output_fwhm", self.output_fwhm.is_some()),
                    ("dispersion.output_walkoff", self.output_walkoff.is_some()),
                    ("dispersion.group_index", self.group_index.is_some()),
                    ("dispersion.gvd", self.gvd.is_some()),
                ] {
                    if set {
                        return Err(field_error(
                            name,
                            "only allowed with model = \"default-calibrated\"",
                        ));
                    }
                }
                let need = |v: &Option<Quantity>, field: &str| -> Result<f64> {
                    let v = v.as_ref().ok_or_else(|| field_error(field, "required"))?;
                    positive(v, Dimension::Length, field)
                };
                let band = |b: &Option<BandSection>, name: &str| -> Result<BandDispersion> {
                    let b = b
                        .as_ref()
                        .ok_or_else(|| field_error(&format!("dispersion.{name}"), "required"))?;
                    let f = |k: &str| format!("dispersion.{name}.{k}");
                    let lambda = positive(&b.reference_wavelength, Dimension::Length, &f("reference_wavelength"))?;
                    Ok(BandDispersion {
                        reference_frequency: spectral::wavelength_to_angular_frequency(lambda)
                            .map_err(|e| field_error(&f("reference_wavelength"), e.to_string()))?,
                        beta0: si(&b.beta0, Dimension::Wavenumber, &f("beta0"))?,
                        inverse_group_velocity: positive(
                            &b.inverse_group_velocity,
                            Dimension::InverseVelocity,
                            &f("inverse_group_velocity"),
                        )?,
                        gvd: si(&b.gvd, Dimension::GroupVelocityDispersion, &f("gvd"))?,
                    })
                };
                let model = DispersionModel {
                    input_band: band(&self.input_band, "input_band")?,
                    pump_band: band(&self.pump_band, "pump_band")?,
                    output_band: band(&self.output_band, "output_band")?,
                    poling_period: need(&self.poling_period, "dispersion.poling_period")?,
                    waveguide_length: need(&self.waveguide_length, "dispersion.waveguide_length")?,
                };
                model
                    .validate()
                    .map_err(|e| ConfigError::Invalid(format!("dispersion: {e}")))?;
                Ok(model)
            }
        }
    }
}

impl ScenarioConfig {
    /// Converts to SI, checks every field and the derived experiment settings.
    pub fn resolve(&self) -> Result<Scenario> {
        let model = self.dispersion.resolve()?;

        let p = &self.probe;
        if !(p.mean_photon_number >= 0.0 && p.mean_photon_number.is_finite()) {
            return Err(field_error(
                "probe.mean_photon_number",
                format!("must be >= 0, got {}", p.mean_photon_number),
            ));
        }
        let probe = ProbeConfig {
            pulse: pulse("probe", &p.central_wavelength, &p.fwhm_bandwidth, p.hg_order)?,
            mean_photon_number: p.mean_photon_number,
            repetition_rate: positive(&p.repetition_rate, Dimension::Frequency, "probe.repetition_rate")?,
            integration_time: p
                .integration_time
                .as_ref()
                .map(|t| positive(t, Dimension::Time, "probe.integration_time"))
                .transpose()?,
        };
        let pump = pulse(
            "pump",
            &self.pump.central_wavelength,
            &self.pump.fwhm_bandwidth,
            self.pump.hg_order,
        )?;

        let shaper_floor = self.shaper.amplitude_floor;
        if !(0.0..=1.0).contains(&shaper_floor) {
            return Err(field_error("shaper.amplitude_floor", "must lie in [0, 1]"));
        }
        let shaper = ShaperSettings {
            resolution_fwhm: non_negative(&self.shaper.resolution, Dimension::Length, "shaper.resolution")?,
            amplitude_floor: shaper_floor,
        };

        let e = &self.engine;
        let engine = EngineSettings {
            in_points: e.in_points,
            out_points: e.out_points,
            pump_points: e.pump_points,
            n_slices: e.n_slices,
            in_span_factor: e.in_span_factor,
            out_span_factor: e.out_span_factor,
            scheme: e.scheme,
            c_theta: non_negative(&e.c_theta, Dimension::AnglePerRootEnergy, "engine.c_theta")?,
            low_gain_theta: positive(&e.low_gain_theta, Dimension::Angle, "engine.low_gain_theta")?,
        };

        let noise = NoiseConfig {
            dark_count_rate: non_negative(&self.noise.dark_count_rate, Dimension::Frequency, "noise.dark_count_rate")?,
            spectrometer_background: self.noise.spectrometer_background,
            rng_seed: self.noise.rng_seed,
        };
        if !(noise.spectrometer_background >= 0.0) {
            return Err(field_error("noise.spectrometer_background", "must be >= 0"));
        }

        let lab = Lab {
            model,
            probe,
            pump,
            shaper,
            engine,
            noise,
        };
        lab.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let w = &self.scan_wavelength;
        let wavelength_scan = WavelengthScan {
            start: positive(&w.start, Dimension::Length, "scan_wavelength.start")?,
            stop: positive(&w.stop, Dimension::Length, "scan_wavelength.stop")?,
            step: positive(&w.step, Dimension::Length, "scan_wavelength.step")?,
            hg_order: w.hg_order,
            pump_duration: positive(&w.pump_duration, Dimension::Time, "scan_wavelength.pump_duration")?,
            readout: w.readout,
            keep_spectra: w.keep_spectra,
        };
        lab::scan_points(wavelength_scan.start, wavelength_scan.stop, wavelength_scan.step)
            .map_err(|e| field_error("scan_wavelength", e.to_string()))?;

        let b = &self.scan_bandwidth;
        let bandwidth_scan = BandwidthScan {
            start: positive(&b.start, Dimension::Length, "scan_bandwidth.start")?,
            stop: positive(&b.stop, Dimension::Length, "scan_bandwidth.stop")?,
            step: positive(&b.step, Dimension::Length, "scan_bandwidth.step")?,
            hg_order: b.hg_order,
            center: positive(&b.center, Dimension::Length, "scan_bandwidth.center")?,
            readout: b.readout,
            keep_spectra: b.keep_spectra,
        };
        lab::scan_points(bandwidth_scan.start, bandwidth_scan.stop, bandwidth_scan.step)
            .map_err(|e| field_error("scan_bandwidth", e.to_string()))?;
        for (field, order) in [("scan_wavelength.hg_order", w.hg_order), ("scan_bandwidth.hg_order", b.hg_order)] {
            if order > spectral::MAX_HG_ORDER {
                return Err(field_error(field, format!("at most {}", spectral::MAX_HG_ORDER)));
            }
        }

        let benchmark_shaper = match &self.benchmark.shaper_resolution {
            Some(r) => ShaperSettings {
                resolution_fwhm: non_negative(r, Dimension::Length, "benchmark.shaper_resolution")?,
                ..shaper
            },
            None => shaper,
        };

        let f = &self.efficiency;
        let energies = lab::scan_points(
            non_negative(&f.energy_start, Dimension::Energy, "efficiency.energy_start")?,
            non_negative(&f.energy_stop, Dimension::Energy, "efficiency.energy_stop")?,
            positive(&f.energy_step, Dimension::Energy, "efficiency.energy_step")?,
        )
        .map_err(|e| field_error("efficiency", e.to_string()))?;

        let decompose = DecomposePlan {
            theta: non_negative(&self.decompose.theta, Dimension::Angle, "decompose.theta")?,
            export_green: self.decompose.export_green,
            mode_spectra: self.decompose.mode_spectra,
        };

        Ok(Scenario {
            lab,
            wavelength_scan,
            bandwidth_scan,
            benchmark_shaper,
            efficiency: EfficiencyPlan {
                energies,
                model: f.model,
                noise: f.noise,
            },
            decompose,
        })
    }
}
