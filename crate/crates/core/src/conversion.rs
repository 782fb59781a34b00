//! Green's-function propagation of the coupled input/output spectral amplitudes.
//!
//! Fields are carried on two grids. Internally the state is measure-weighted
//! (`x = sqrt(dw_in) a`, `y = sqrt(dw_out) c`) so the slice operators are
//! plain unitaries; the reported matrices map amplitude samples to amplitude
//! samples.

use faer::{Mat, Side};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispersion::{self, DispersionError, DispersionModel};
use crate::linalg::{self, CMat, I, ZERO};
use crate::spectral::{FrequencyGrid, SampledField, SpectralAmplitude, SpectralError};

pub const MIN_SLICES: usize = 32;
/// Relative accuracy per Lanczos substep for single fields.
const KRYLOV_TOL: f64 = 1e-10;
/// Spectral width times step length per Lanczos substep, rad.
const KRYLOV_PHASE_PER_STEP: f64 = 40.0;
const KRYLOV_MAX_DIM: usize = 256;

pub const DEFAULT_SLICES: usize = 64;
/// Allowed change of the converted block when the slice count doubles.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-4;
/// Joules per picojoule.
pub const PICOJOULE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ConversionError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Dispersion(#[from] DispersionError),
    #[error("invalid transfer config: {0}")]
    InvalidConfig(String),
    #[error("pump grid does not cover pump frequency {omega:.6e} rad/s")]
    PumpCoverage { omega: f64 },
    #[error("slice propagation not converged: doubling {n_slices} slices changed g_c by {drift:.3e}")]
    Convergence { n_slices: usize, drift: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
}

pub type Result<T, E = ConversionError> = std::result::Result<T, E>;

/// Conversion strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Low-gain first-mode angle, rad.
    ThetaScale(f64),
    /// Pump pulse energy (J) with `theta = c_theta sqrt(E)`, `c_theta` in rad/sqrt(J).
    PumpEnergy { energy: f64, c_theta: f64 },
}

impl Coupling {
    pub fn theta_scale(&self) -> f64 {
        match *self {
            Coupling::ThetaScale(t) => t,
            Coupling::PumpEnergy { energy, c_theta } => c_theta * energy.max(0.0).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Coupling::ThetaScale(t) if !(t.is_finite() && t >= 0.0) => Err(
                ConversionError::InvalidConfig(format!("theta scale must be >= 0, got {t}")),
            ),
            Coupling::PumpEnergy { energy, c_theta }
                if !(energy >= 0.0 && energy.is_finite() && c_theta.is_finite() && c_theta >= 0.0) =>
            {
                Err(ConversionError::InvalidConfig(format!(
                    "pump energy and c_theta must be >= 0, got {energy} J, {c_theta} rad/sqrt(J)"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// How one slice operator is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceScheme {
    /// `exp(i dz H(z_mid))` of the full block generator, from a Hermitian
    /// eigendecomposition. Without pump GVD the generator does not depend on
    /// z and the slice product is exact.
    #[default]
    Exact,
    /// Half phase, coupling exponential from the SVD of the coupling block
    /// at the slice midpoint, half phase.
    Strang,
    /// As `Strang`, but each coupling element carries `sinc(dk dz / 2)` so the
    /// phase rotation across the slice is integrated exactly at first order.
    PhaseIntegrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    /// Pump amplitude on its own grid; its overall scale is irrelevant.
    pub pump: SampledField,
    pub model: DispersionModel,
    pub coupling: Coupling,
    pub n_slices: usize,
    pub in_grid: FrequencyGrid,
    pub out_grid: FrequencyGrid,
    pub scheme: SliceScheme,
    /// Re-run with twice the slices and fail if g_c moves by more than
    /// [`CONVERGENCE_TOLERANCE`].
    pub verify_convergence: bool,
}

impl TransferConfig {
    pub fn new(
        pump: impl Into<SampledField>,
        model: DispersionModel,
        coupling: Coupling,
        in_grid: FrequencyGrid,
        out_grid: FrequencyGrid,
    ) -> Self {
        Self {
            pump: pump.into(),
            model,
            coupling,
            n_slices: DEFAULT_SLICES,
            in_grid,
            out_grid,
            scheme: SliceScheme::default(),
            verify_convergence: false,
        }
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn with_slices(mut self, n_slices: usize) -> Self {
        self.n_slices = n_slices;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.coupling.validate()?;
        if self.n_slices < MIN_SLICES {
            return Err(ConversionError::InvalidConfig(format!(
                "n_slices must be at least {MIN_SLICES}, got {}",
                self.n_slices
            )));
        }
        let centroid = pump_centroid(&self.pump);
        if let Some(c) = centroid {
            let sum = self.in_grid.center() + c;
            if !self.out_grid.contains(sum) {
                return Err(ConversionError::InvalidConfig(format!(
                    "output grid [{:.6e}, {:.6e}] rad/s misses the sum frequency {sum:.6e} rad/s",
                    self.out_grid.first(),
                    self.out_grid.last()
                )));
            }
        }
        Ok(())
    }
}

/// Intensity-weighted mean pump frequency, `None` for an all-zero pump.
pub fn pump_centroid(pump: &SampledField) -> Option<f64> {
    let grid = pump.grid;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, v) in pump.values.iter().enumerate() {
        let p = v.norm_sqr();
        num += p * grid.omega(k);
        den += p;
    }
    (den > 0.0).then(|| num / den)
}

/// Converted (`g_c`, out x in) and transmitted (`g_t`, in x in) blocks of the
/// two-channel map, acting on amplitude samples.
#[derive(Debug, Clone)]
pub struct GreenPair {
    pub in_grid: FrequencyGrid,
    pub out_grid: FrequencyGrid,
    pub g_c: CMat,
    pub g_t: CMat,
}

impl GreenPair {
    /// `g_c` expressed between measure-weighted samples; its singular values
    /// are the conversion amplitudes `sin(theta_n)`.
    pub fn weighted_converted(&self) -> CMat {
        let f = (self.out_grid.spacing() / self.in_grid.spacing()).sqrt();
        Mat::from_fn(self.g_c.nrows(), self.g_c.ncols(), |i, j| self.g_c[(i, j)] * f)
    }

    /// Spectral norm of `g_t^H g_t + (dw_out/dw_in) g_c^H g_c - I`.
    pub fn unitarity_residual(&self) -> f64 {
        let wc = self.weighted_converted();
        let mut m = self.g_t.adjoint() * &self.g_t + wc.adjoint() * &wc;
        for k in 0..m.nrows() {
            m[(k, k)] -= Complex64::new(1.0, 0.0);
        }
        linalg::hermitian_spectral_norm(m.as_ref())
    }

    /// `(g_c a, g_t a)`.
    pub fn apply(&self, input: &SpectralAmplitude) -> Result<(SampledField, SampledField)> {
        if !input.grid().matches(&self.in_grid) {
            return Err(ConversionError::Shape(format!(
                "input has {} samples on a different grid than the {}-point input grid",
                input.grid().len(),
                self.in_grid.len()
            )));
        }
        let converted = linalg::mat_vec(self.g_c.as_ref(), input.values());
        let transmitted = linalg::mat_vec(self.g_t.as_ref(), input.values());
        Ok((
            SampledField::new(self.out_grid, converted)?,
            SampledField::new(self.in_grid, transmitted)?,
        ))
    }
}

/// `f(w_out, w_in) = alpha(w_out - w_in) Phi(w_in, w_out)`, rows on the output
/// grid, unnormalized.
pub fn joint_spectral_amplitude(config: &TransferConfig) -> Result<CMat> {
    config.model.validate()?;
    let pump = sample_pump(config)?;
    let model = &config.model;
    let l = model.waveguide_length;
    let (ni, no) = (config.in_grid.len(), config.out_grid.len());
    Ok(Mat::from_fn(no, ni, |o, i| {
        let dk = model.mismatch_unchecked(config.in_grid.omega(i), config.out_grid.omega(o));
        pump[(o, i)] * dispersion::phasematching_from_mismatch(dk, l)
    }))
}

/// `alpha(w_out - w_in)` on the grid pair.
fn sample_pump(config: &TransferConfig) -> Result<CMat> {
    let (ni, no) = (config.in_grid.len(), config.out_grid.len());
    let field = &config.pump;
    let mut out = Mat::<Complex64>::zeros(no, ni);
    for i in 0..ni {
        for o in 0..no {
            let w = config.out_grid.omega(o) - config.in_grid.omega(i);
            out[(o, i)] = field
                .interpolate(w)
                .ok_or(ConversionError::PumpCoverage { omega: w })?;
        }
    }
    Ok(out)
}

/// Builds the Green pair for `config`.
pub fn propagate(config: &TransferConfig) -> Result<GreenPair> {
    config.validate()?;
    let engine = Engine::new(config)?;
    let theta = config.coupling.theta_scale();
    let green = engine.green(theta, config.n_slices)?;
    if config.verify_convergence {
        let fine = engine.green(theta, 2 * config.n_slices)?;
        let drift = converted_drift(&green, &fine);
        if !(drift <= CONVERGENCE_TOLERANCE) {
            return Err(ConversionError::Convergence {
                n_slices: config.n_slices,
                drift,
            });
        }
    }
    Ok(green)
}

/// Spectral norm of the change in the weighted converted block.
pub fn converted_drift(a: &GreenPair, b: &GreenPair) -> f64 {
    let d = a.weighted_converted() - b.weighted_converted();
    linalg::spectral_norm(d.as_ref())
}

/// Efficiency `||g_c probe||^2` for each pump energy (J). The coupling of
/// `config` must be [`Coupling::PumpEnergy`]; its energy is replaced.
pub fn conversion_efficiency_curve(
    config: &TransferConfig,
    probe: &SpectralAmplitude,
    energies: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let c_theta = match config.coupling {
        Coupling::PumpEnergy { c_theta, .. } => c_theta,
        Coupling::ThetaScale(_) => {
            return Err(ConversionError::InvalidConfig(
                "efficiency curve needs a pump-energy coupling".into(),
            ))
        }
    };
    if energies.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ConversionError::InvalidConfig(
            "pump energies must be strictly increasing".into(),
        ));
    }
    if let Some(&e) = energies.iter().find(|e| !(**e >= 0.0)) {
        return Err(ConversionError::InvalidConfig(format!("negative pump energy {e} J")));
    }
    config.validate()?;
    let engine = Engine::new(config)?;
    let prepared = engine.prepare(config.n_slices)?;
    energies
        .iter()
        .map(|&e| {
            let theta = Coupling::PumpEnergy { energy: e, c_theta }.theta_scale();
            let (converted, _) = engine.propagate_with(&prepared, theta, probe)?;
            Ok((e, converted.norm_sqr()))
        })
        .collect()
}

/// `c_theta` such that `sin^2(c_theta sqrt(E)) = efficiency` on the first branch.
pub fn calibrate_c_theta(energy: f64, efficiency: f64) -> Result<f64> {
    if !(energy > 0.0) || !(0.0..=1.0).contains(&efficiency) {
        return Err(ConversionError::InvalidConfig(format!(
            "cannot calibrate from energy {energy} and efficiency {efficiency}"
        )));
    }
    Ok(efficiency.sqrt().asin() / energy.sqrt())
}

/// SVD of one slice's unit-strength coupling block, `K = U diag(s) V^H`.
struct SliceCoupling {
    u: CMat,
    s: Vec<f64>,
    v: CMat,
    u_h: CMat,
    v_h: CMat,
}

/// Strength-independent slice data for one slice count.
pub struct Prepared {
    n_slices: usize,
    /// Unit-strength coupling factors of the split schemes; empty for `Exact`.
    slices: Vec<SliceCoupling>,
}

impl Prepared {
    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    fn get(&self, k: usize) -> &SliceCoupling {
        if self.slices.len() == 1 {
            &self.slices[0]
        } else {
            &self.slices[k]
        }
    }
}

/// Everything about a transfer configuration that does not depend on the
/// coupling strength.
pub struct Engine {
    in_grid: FrequencyGrid,
    out_grid: FrequencyGrid,
    length: f64,
    scheme: SliceScheme,
    d_in: Vec<f64>,
    d_out: Vec<f64>,
    /// `alpha(w_out - w_in) sqrt(dw_in dw_out)`
    pump_block: CMat,
    /// residual pump curvature `gvd_p/2`, and its reference frequency
    pump_curvature: f64,
    pump_reference: f64,
    jsa: CMat,
    /// Largest singular value of the weighted JSA.
    jsa_norm: f64,
}

impl Engine {
    pub fn new(config: &TransferConfig) -> Result<Self> {
        let model = &config.model;
        let (in_grid, out_grid) = (config.in_grid, config.out_grid);
        let pump = sample_pump(config)?;
        let weight = (in_grid.spacing() * out_grid.spacing()).sqrt();
        let pump_block = Mat::from_fn(pump.nrows(), pump.ncols(), |o, i| pump[(o, i)] * weight);

        // Pump-frame diagonal terms: d_out - d_in - r = dk, with r carrying
        // only the pump's quadratic dispersion.
        let kp = model.pump_band.inverse_group_velocity;
        let wp = model.pump_band.reference_frequency;
        let wi = model.input_band.reference_frequency;
        let wo = model.output_band.reference_frequency;
        let offset = model.input_band.beta(in_grid.center()) - kp * (in_grid.center() - wi);
        let d_in: Vec<f64> = in_grid
            .samples()
            .iter()
            .map(|&w| model.input_band.beta(w) - kp * (w - wi) - offset)
            .collect();
        let d_out: Vec<f64> = out_grid
            .samples()
            .iter()
            .map(|&w| {
                model.output_band.beta(w)
                    - model.grating_momentum()
                    - model.pump_band.beta0
                    - kp * (w - wo)
                    - kp * (wo - wi - wp)
                    - offset
            })
            .collect();

        let jsa = joint_spectral_amplitude(config)?;
        let weighted = Mat::from_fn(jsa.nrows(), jsa.ncols(), |o, i| jsa[(o, i)] * weight);
        let jsa_norm = linalg::spectral_norm(weighted.as_ref());

        Ok(Self {
            in_grid,
            out_grid,
            length: model.waveguide_length,
            scheme: config.scheme,
            d_in,
            d_out,
            pump_block,
            pump_curvature: 0.5 * model.pump_band.gvd,
            pump_reference: wp,
            jsa,
            jsa_norm,
        })
    }

    pub fn in_grid(&self) -> &FrequencyGrid {
        &self.in_grid
    }

    pub fn out_grid(&self) -> &FrequencyGrid {
        &self.out_grid
    }

    /// Unnormalized JSA on the grid pair.
    pub fn jsa(&self) -> &CMat {
        &self.jsa
    }

    /// Largest singular value of the measure-weighted JSA.
    pub fn jsa_norm(&self) -> f64 {
        self.jsa_norm
    }

    /// Measure-weighted JSA scaled to unit spectral norm (zero matrix if the
    /// JSA vanishes).
    pub fn normalized_weighted_jsa(&self) -> CMat {
        let w = (self.in_grid.spacing() * self.out_grid.spacing()).sqrt();
        let s = if self.jsa_norm > 0.0 { w / self.jsa_norm } else { 0.0 };
        Mat::from_fn(self.jsa.nrows(), self.jsa.ncols(), |o, i| self.jsa[(o, i)] * s)
    }

    /// Coupling constant `kappa` (1/(m rad/s)) realizing a first-mode angle of
    /// `theta_scale` at low gain.
    pub fn kappa(&self, theta_scale: f64) -> f64 {
        if self.jsa_norm > 0.0 {
            theta_scale / (self.length * self.jsa_norm)
        } else {
            0.0
        }
    }

    fn z_invariant(&self) -> bool {
        self.pump_curvature == 0.0
    }

    /// `r(o, i)`: pump phase left over after the linear pump-frame terms.
    fn residual(&self, o: usize, i: usize) -> f64 {
        let d = self.out_grid.omega(o) - self.in_grid.omega(i) - self.pump_reference;
        self.pump_curvature * d * d
    }

    /// Slice data for `n_slices` slices.
    pub fn prepare(&self, n_slices: usize) -> Result<Prepared> {
        if n_slices == 0 {
            return Err(ConversionError::InvalidConfig("n_slices must be positive".into()));
        }
        if self.scheme == SliceScheme::Exact {
            return Ok(Prepared {
                n_slices,
                slices: Vec::new(),
            });
        }
        let dz = self.length / n_slices as f64;
        let count = if self.z_invariant() { 1 } else { n_slices };
        let slices = (0..count)
            .map(|k| self.slice_coupling((k as f64 + 0.5) * dz, dz))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { n_slices, slices })
    }

    /// `alpha sqrt(dw_in dw_out)` with the residual pump phase at `z`.
    fn coupling_at(&self, o: usize, i: usize, z: f64) -> Complex64 {
        let r = self.residual(o, i);
        let k = self.pump_block[(o, i)];
        if r != 0.0 {
            k * Complex64::from_polar(1.0, -r * z)
        } else {
            k
        }
    }

    /// Generator `H` of `d/dz [x; y] = i H [x; y]` at `z`.
    fn generator(&self, kappa: f64, z: f64) -> CMat {
        let ni = self.in_grid.len();
        let n = ni + self.out_grid.len();
        Mat::from_fn(n, n, |r, c| match (r < ni, c < ni) {
            (true, true) if r == c => Complex64::new(-self.d_in[r], 0.0),
            (false, false) if r == c => Complex64::new(-self.d_out[r - ni], 0.0),
            (false, true) => self.coupling_at(r - ni, c, z) * kappa,
            (true, false) => (self.coupling_at(c - ni, r, z) * kappa).conj(),
            _ => ZERO,
        })
    }

    /// `exp(i h H) state` for the z-independent generator by Lanczos in
    /// substeps short enough for a small Krylov space; `None` if a substep
    /// does not converge.
    fn krylov_action(&self, kappa: f64, state: &[Complex64], h: f64) -> Option<Vec<Complex64>> {
        let ni = self.in_grid.len();
        let k = Mat::from_fn(self.pump_block.nrows(), ni, |o, i| self.pump_block[(o, i)] * kappa);
        let k_h = k.adjoint().to_owned();
        let apply = |v: &[Complex64]| -> Vec<Complex64> {
            let (x, y) = v.split_at(ni);
            let mut top = linalg::mat_vec(k_h.as_ref(), y);
            top.iter_mut().zip(x).zip(&self.d_in).for_each(|((t, a), d)| *t -= a * d);
            let mut bottom = linalg::mat_vec(k.as_ref(), x);
            bottom.iter_mut().zip(y).zip(&self.d_out).for_each(|((t, a), d)| *t -= a * d);
            top.extend(bottom);
            top
        };
        // bound on the width of the spectrum of H
        let (lo, hi) = self
            .d_in
            .iter()
            .chain(&self.d_out)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        let width = (hi - lo) + 2.0 * linalg::frobenius(k.as_ref());
        let substeps = (h * width / KRYLOV_PHASE_PER_STEP).ceil().max(1.0) as usize;
        let dh = h / substeps as f64;
        let mut state = state.to_vec();
        for _ in 0..substeps {
            state = linalg::hermitian_exp_action(&apply, &state, dh, KRYLOV_TOL, KRYLOV_MAX_DIM)?;
        }
        Some(state)
    }

    /// Eigenvectors of `H(z)` and the phases `exp(i h lambda)`.
    fn exact_factors(&self, kappa: f64, z: f64, h: f64) -> Result<(CMat, Vec<Complex64>)> {
        let gen = self.generator(kappa, z);
        let eig = gen
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| ConversionError::Decomposition(format!("{e:?}")))?;
        let s = eig.S().column_vector();
        let phases = (0..s.nrows())
            .map(|k| Complex64::from_polar(1.0, s[k].re * h))
            .collect();
        Ok((eig.U().to_owned(), phases))
    }

    fn slice_coupling(&self, z_mid: f64, dz: f64) -> Result<SliceCoupling> {
        let (no, ni) = (self.out_grid.len(), self.in_grid.len());
        let block = Mat::from_fn(no, ni, |o, i| {
            let r = self.residual(o, i);
            let mut k = self.pump_block[(o, i)];
            if r != 0.0 {
                k *= Complex64::from_polar(1.0, -r * z_mid);
            }
            if self.scheme == SliceScheme::PhaseIntegrated {
                let dk = self.d_out[o] - self.d_in[i] - r;
                k *= dispersion::sinc(0.5 * dk * dz);
            }
            k
        });
        let svd = block
            .thin_svd()
            .map_err(|e| ConversionError::Decomposition(format!("{e:?}")))?;
        let s = svd.S().column_vector();
        Ok(SliceCoupling {
            u_h: svd.U().adjoint().to_owned(),
            v_h: svd.V().adjoint().to_owned(),
            u: svd.U().to_owned(),
            s: (0..s.nrows()).map(|k| s[k].re).collect(),
            v: svd.V().to_owned(),
        })
    }

    /// Full Green pair at first-mode angle `theta_scale`.
    pub fn green(&self, theta_scale: f64, n_slices: usize) -> Result<GreenPair> {
        let prepared = self.prepare(n_slices)?;
        self.green_with(&prepared, theta_scale)
    }

    pub fn green_with(&self, prepared: &Prepared, theta_scale: f64) -> Result<GreenPair> {
        let (ni, no) = (self.in_grid.len(), self.out_grid.len());
        let n = prepared.n_slices;
        let dz = self.length / n as f64;
        let kappa = self.kappa(theta_scale);
        let first_columns = |m: &CMat| m.subcols(0, ni).to_owned();

        // first n_in columns of the accumulated slice product
        let total: CMat = match (self.scheme, self.z_invariant()) {
            (SliceScheme::Exact, true) => {
                let (q, ph) = self.exact_factors(kappa, 0.0, n as f64 * dz)?;
                let right = Mat::from_fn(ni + no, ni, |k, c| ph[k] * q[(c, k)].conj());
                &q * &right
            }
            (SliceScheme::Exact, false) => {
                let mut acc = first_columns(&linalg::identity(ni + no));
                for k in 0..n {
                    let (q, ph) = self.exact_factors(kappa, (k as f64 + 0.5) * dz, dz)?;
                    let mut t = q.adjoint() * &acc;
                    scale_rows(&mut t, &ph);
                    acc = &q * &t;
                }
                acc
            }
            (_, true) => {
                let slice = self.slice_matrix(prepared.get(0), kappa, dz);
                first_columns(&matrix_power(slice, n))
            }
            (_, false) => {
                let mut acc = first_columns(&linalg::identity(ni + no));
                for k in 0..n {
                    acc = self.slice_matrix(prepared.get(k), kappa, dz) * &acc;
                }
                acc
            }
        };

        // back to the interaction frame: undo the accumulated diagonal phase
        let l = self.length;
        let g_t = Mat::from_fn(ni, ni, |r, c| {
            total[(r, c)] * Complex64::from_polar(1.0, self.d_in[r] * l)
        });
        let scale = (self.in_grid.spacing() / self.out_grid.spacing()).sqrt();
        let g_c = Mat::from_fn(no, ni, |r, c| {
            total[(ni + r, c)] * Complex64::from_polar(scale, self.d_out[r] * l)
        });
        Ok(GreenPair {
            in_grid: self.in_grid,
            out_grid: self.out_grid,
            g_c,
            g_t,
        })
    }

    /// Dense `(n_in + n_out)^2` operator of one slice.
    fn slice_matrix(&self, sc: &SliceCoupling, kappa: f64, dz: f64) -> CMat {
        let (ni, no) = (self.in_grid.len(), self.out_grid.len());
        let rank = sc.s.len();
        let phi: Vec<f64> = sc.s.iter().map(|s| kappa * s * dz).collect();
        let cm1: Vec<f64> = phi.iter().map(|p| p.cos() - 1.0).collect();
        let isin: Vec<Complex64> = phi.iter().map(|p| I * p.sin()).collect();

        let v_c = Mat::from_fn(ni, rank, |r, k| sc.v[(r, k)] * cm1[k]);
        let v_s = Mat::from_fn(ni, rank, |r, k| sc.v[(r, k)] * isin[k]);
        let u_c = Mat::from_fn(no, rank, |r, k| sc.u[(r, k)] * cm1[k]);
        let u_s = Mat::from_fn(no, rank, |r, k| sc.u[(r, k)] * isin[k]);
        let tt = &v_c * sc.v.adjoint();
        let tc = &v_s * sc.u.adjoint();
        let ct = &u_s * sc.v.adjoint();
        let cc = &u_c * sc.u.adjoint();

        let half: Vec<Complex64> = self
            .d_in
            .iter()
            .chain(self.d_out.iter())
            .map(|d| Complex64::from_polar(1.0, -0.5 * d * dz))
            .collect();
        let n = ni + no;
        Mat::from_fn(n, n, |r, c| {
            let core = match (r < ni, c < ni) {
                (true, true) => tt[(r, c)] + if r == c { 1.0 } else { 0.0 },
                (true, false) => tc[(r, c - ni)],
                (false, true) => ct[(r - ni, c)],
                (false, false) => cc[(r - ni, c - ni)] + if r == c { 1.0 } else { 0.0 },
            };
            half[r] * core * half[c]
        })
    }

    /// Propagates one input amplitude without forming the Green matrices.
    /// Returns `(converted, transmitted)` amplitude samples.
    pub fn propagate_with(
        &self,
        prepared: &Prepared,
        theta_scale: f64,
        input: &SpectralAmplitude,
    ) -> Result<(SampledField, SampledField)> {
        self.propagate_field_with(prepared, theta_scale, input.as_field())
    }

    pub fn propagate_field_with(
        &self,
        prepared: &Prepared,
        theta_scale: f64,
        input: &SampledField,
    ) -> Result<(SampledField, SampledField)> {
        if !input.grid.matches(&self.in_grid) {
            return Err(ConversionError::Shape(
                "input amplitude is not on the engine's input grid".into(),
            ));
        }
        let ni = self.in_grid.len();
        let n = prepared.n_slices;
        let dz = self.length / n as f64;
        let kappa = self.kappa(theta_scale);
        let wi = self.in_grid.spacing().sqrt();
        let wo = self.out_grid.spacing().sqrt();

        let mut x: Vec<Complex64> = input.values.iter().map(|a| a * wi).collect();
        let mut y = vec![ZERO; self.out_grid.len()];
        if self.scheme == SliceScheme::Exact {
            let mut state: Vec<Complex64> = x.iter().chain(y.iter()).copied().collect();
            let steps: Vec<(f64, f64)> = if self.z_invariant() {
                vec![(0.0, n as f64 * dz)]
            } else {
                (0..n).map(|k| ((k as f64 + 0.5) * dz, dz)).collect()
            };
            let krylov = if self.z_invariant() {
                self.krylov_action(kappa, &state, self.length)
            } else {
                None
            };
            for (z, h) in if krylov.is_some() { vec![] } else { steps } {
                let (q, ph) = self.exact_factors(kappa, z, h)?;
                let mut t = linalg::mat_vec(q.adjoint().to_owned().as_ref(), &state);
                mul_assign(&mut t, &ph);
                state = linalg::mat_vec(q.as_ref(), &t);
            }
            if let Some(result) = krylov {
                state = result;
            }
            x = state[..ni].to_vec();
            y = state[ni..].to_vec();
        } else {
            let half_in: Vec<Complex64> =
                self.d_in.iter().map(|d| Complex64::from_polar(1.0, -0.5 * d * dz)).collect();
            let half_out: Vec<Complex64> =
                self.d_out.iter().map(|d| Complex64::from_polar(1.0, -0.5 * d * dz)).collect();
            for k in 0..n {
                let sc = prepared.get(k);
                mul_assign(&mut x, &half_in);
                mul_assign(&mut y, &half_out);
                let tx = linalg::mat_vec(sc.v_h.as_ref(), &x);
                let ty = linalg::mat_vec(sc.u_h.as_ref(), &y);
                let mut cx = Vec::with_capacity(tx.len());
                let mut cy = Vec::with_capacity(tx.len());
                for j in 0..tx.len() {
                    let p = kappa * sc.s[j] * dz;
                    let (c, s) = (p.cos() - 1.0, I * p.sin());
                    cx.push(tx[j] * c + ty[j] * s);
                    cy.push(ty[j] * c + tx[j] * s);
                }
                add_assign(&mut x, &linalg::mat_vec(sc.v.as_ref(), &cx));
                add_assign(&mut y, &linalg::mat_vec(sc.u.as_ref(), &cy));
                mul_assign(&mut x, &half_in);
                mul_assign(&mut y, &half_out);
            }
        }
        let l = self.length;
        let transmitted = x
            .iter()
            .zip(&self.d_in)
            .map(|(v, d)| v * Complex64::from_polar(1.0 / wi, d * l))
            .collect();
        let converted = y
            .iter()
            .zip(&self.d_out)
            .map(|(v, d)| v * Complex64::from_polar(1.0 / wo, d * l))
            .collect();
        Ok((
            SampledField::new(self.out_grid, converted)?,
            SampledField::new(self.in_grid, transmitted)?,
        ))
    }
}

fn scale_rows(m: &mut CMat, factors: &[Complex64]) {
    for j in 0..m.ncols() {
        for (i, f) in factors.iter().enumerate() {
            m[(i, j)] *= f;
        }
    }
}

fn mul_assign(a: &mut [Complex64], b: &[Complex64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x *= y);
}

fn add_assign(a: &mut [Complex64], b: &[Complex64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// `m^n` by repeated squaring.
fn matrix_power(m: CMat, mut n: usize) -> CMat {
    let mut base = m;
    let mut acc: Option<CMat> = None;
    while n > 0 {
        if n & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(a) => &base * &a,
            });
        }
        n >>= 1;
        if n > 0 {
            base = &base * &base;
        }
    }
    acc.unwrap_or_else(|| linalg::identity(base.nrows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispersion::{default_model, BandDispersion};
    use crate::spectral::{make_hermite_gaussian, PulseSpec};
    use std::f64::consts::PI;

    /// Small, strongly dispersive test device so dense exponentials stay cheap.
    fn small_config(theta: f64, pump_gvd: f64, n: usize) -> TransferConfig {
        let model = default_model();
        let mut model = model;
        model.pump_band.gvd = pump_gvd;
        let wi = model.input_band.reference_frequency;
        let wp = model.pump_band.reference_frequency;
        let in_grid = FrequencyGrid::new(wi, 6e13, 24).unwrap();
        let out_grid = FrequencyGrid::new(wi + wp, 8e12, 20).unwrap();
        let pump_grid = FrequencyGrid::covering_differences(&out_grid, &in_grid, 1024).unwrap();
        let pump_spec = PulseSpec::gaussian(865.6e-9, 4.0e-9);
        let pump = make_hermite_gaussian(&pump_spec, &pump_grid).unwrap();
        TransferConfig::new(pump, model, Coupling::ThetaScale(theta), in_grid, out_grid)
            .with_slices(n)
    }

    /// Time-ordered exponential of the interaction-frame generator by
    /// midpoint products of dense Hermitian exponentials on a fine z mesh.
    fn dense_oracle(config: &TransferConfig, steps: usize) -> CMat {
        let engine = Engine::new(config).unwrap();
        let (ni, no) = (config.in_grid.len(), config.out_grid.len());
        let n = ni + no;
        let kappa = engine.kappa(config.coupling.theta_scale());
        let l = config.model.waveguide_length;
        let dz = l / steps as f64;
        let mut acc = linalg::identity(n);
        for k in 0..steps {
            let z = (k as f64 + 0.5) * dz;
            // H(z): off-diagonal coupling with the full interaction phase
            let h = Mat::<Complex64>::from_fn(n, n, |r, c| {
                let (o, i, conj) = match (r >= ni, c >= ni) {
                    (true, false) => (r - ni, c, false),
                    (false, true) => (c - ni, r, true),
                    _ => return ZERO,
                };
                let dk = config
                    .model
                    .mismatch_unchecked(config.in_grid.omega(i), config.out_grid.omega(o));
                let v = engine.pump_block[(o, i)] * kappa * Complex64::from_polar(1.0, dk * z);
                if conj {
                    v.conj()
                } else {
                    v
                }
            });
            let eig = h.self_adjoint_eigen(Side::Lower).unwrap();
            let vecs = eig.U();
            let vals = eig.S().column_vector();
            let phase = Mat::from_fn(n, n, |r, c| vecs[(r, c)] * Complex64::from_polar(1.0, vals[c].re * dz));
            let step = &phase * vecs.adjoint();
            acc = &step * &acc;
        }
        acc
    }

    fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
        let mut m = 0.0f64;
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                m = m.max((a[(i, j)] - b[(i, j)]).norm());
            }
        }
        m
    }

    #[test]
    fn zero_coupling_is_identity() {
        let cfg = small_config(0.0, 0.0, 32);
        let g = propagate(&cfg).unwrap();
        assert!(linalg::frobenius(g.g_c.as_ref()) < 1e-14);
        assert!(max_abs_diff(&g.g_t, &linalg::identity(24)) < 1e-12);
    }

    #[test]
    fn zero_pump_gives_zero_jsa() {
        let mut cfg = small_config(1.0, 0.0, 32);
        cfg.pump = SampledField::zeros(cfg.pump.grid);
        let f = joint_spectral_amplitude(&cfg).unwrap();
        assert_eq!(linalg::frobenius(f.as_ref()), 0.0);
        let g = propagate(&cfg).unwrap();
        assert_eq!(linalg::frobenius(g.g_c.as_ref()), 0.0);
    }

    #[test]
    fn short_device_jsa_depends_on_difference_only() {
        let mut cfg = small_config(1.0, 0.0, 32);
        cfg.model.waveguide_length = 1e-12;
        let f = joint_spectral_amplitude(&cfg).unwrap();
        let pump = &cfg.pump;
        for o in 0..cfg.out_grid.len() {
            for i in 0..cfg.in_grid.len() {
                let w = cfg.out_grid.omega(o) - cfg.in_grid.omega(i);
                let a = pump.interpolate(w).unwrap();
                assert!((f[(o, i)] - a).norm() < 1e-9 * a.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn pump_coverage_is_checked() {
        let mut cfg = small_config(1.0, 0.0, 32);
        let narrow = FrequencyGrid::new(cfg.pump.grid.center(), 3e12, 256).unwrap();
        cfg.pump = make_hermite_gaussian(&PulseSpec::gaussian(865.6e-9, 0.1e-9), &narrow)
            .unwrap()
            .into();
        assert!(matches!(
            joint_spectral_amplitude(&cfg),
            Err(ConversionError::PumpCoverage { .. })
        ));
    }

    #[test]
    fn matches_dense_time_ordered_exponential() {
        let cases = [
            (SliceScheme::Exact, 64, 1e-6, 0.3, 0.0),
            (SliceScheme::Exact, 64, 1e-6, PI / 2.0, 0.0),
            (SliceScheme::Exact, 256, 2e-4, 1.2, 2e-25),
            (SliceScheme::PhaseIntegrated, 256, 2e-4, 0.3, 0.0),
            (SliceScheme::PhaseIntegrated, 256, 2e-4, PI / 2.0, 0.0),
            (SliceScheme::Strang, 256, 2e-4, 1.2, 2e-25),
        ];
        for (scheme, n, tol, theta, gvd) in cases {
            let mut cfg = small_config(theta, gvd, n);
            cfg.scheme = scheme;
            let g = propagate(&cfg).unwrap();
            let total = dense_oracle(&cfg, 4000);
            let ni = cfg.in_grid.len();
            // interaction-frame oracle already excludes the diagonal phases
            let wc = g.weighted_converted();
            let oracle_c = Mat::from_fn(cfg.out_grid.len(), ni, |r, c| total[(ni + r, c)]);
            let oracle_t = Mat::from_fn(ni, ni, |r, c| total[(r, c)]);
            let dc = max_abs_diff(&wc, &oracle_c);
            let dt = max_abs_diff(&g.g_t, &oracle_t);
            assert!(dc < tol && dt < tol, "{scheme:?} theta {theta}: {dc} {dt}");
        }
    }

    #[test]
    fn unitarity_and_vector_path_agree() {
        for &theta in &[0.5, PI / 2.0, PI] {
            let cfg = small_config(theta, 0.0, 64);
            let g = propagate(&cfg).unwrap();
            assert!(g.unitarity_residual() < 1e-10);
            let probe = make_hermite_gaussian(
                &PulseSpec::gaussian(1535e-9, 12e-9),
                &cfg.in_grid,
            )
            .unwrap();
            let (c1, t1) = g.apply(&probe).unwrap();
            let engine = Engine::new(&cfg).unwrap();
            let prepared = engine.prepare(64).unwrap();
            let (c2, t2) = engine.propagate_with(&prepared, theta, &probe).unwrap();
            for (a, b) in c1.values.iter().zip(&c2.values) {
                assert!((a - b).norm() < 1e-9);
            }
            for (a, b) in t1.values.iter().zip(&t2.values) {
                assert!((a - b).norm() < 1e-9);
            }
            assert!((c1.norm_sqr() + t1.norm_sqr() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn krylov_substeps_match_eigen_propagation() {
        let mut cfg = small_config(PI, 0.0, 64);
        cfg.in_grid = FrequencyGrid::new(cfg.in_grid.center(), 6e13, 160).unwrap();
        cfg.out_grid = FrequencyGrid::new(cfg.out_grid.center(), 4e13, 160).unwrap();
        cfg.pump = make_hermite_gaussian(
            &PulseSpec::gaussian(865.6e-9, 4.0e-9),
            &FrequencyGrid::covering_differences(&cfg.out_grid, &cfg.in_grid, 2048).unwrap(),
        )
        .unwrap()
        .into_field();
        let engine = Engine::new(&cfg).unwrap();
        let kappa = engine.kappa(PI);
        let n = 320;
        let state: Vec<Complex64> = (0..n)
            .map(|k| Complex64::new((-((k as f64 - 80.0) / 20.0).powi(2)).exp(), 0.0))
            .collect();
        let h = engine.length;
        let got = engine.krylov_action(kappa, &state, h).unwrap();
        let (q, ph) = engine.exact_factors(kappa, 0.0, h).unwrap();
        let mut t = linalg::mat_vec(q.adjoint().to_owned().as_ref(), &state);
        mul_assign(&mut t, &ph);
        let expected = linalg::mat_vec(q.as_ref(), &t);
        let scale: f64 = state.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let err: f64 = got.iter().zip(&expected).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        assert!(err < 1e-8 * scale, "{err}");
    }

    #[test]
    fn pump_gvd_path_is_unitary() {
        let cfg = small_config(2.0, 5e-26, 40);
        let g = propagate(&cfg).unwrap();
        assert!(g.unitarity_residual() < 1e-10);
    }

    #[test]
    fn config_validation() {
        let cfg = small_config(1.0, 0.0, 16);
        assert!(matches!(cfg.validate(), Err(ConversionError::InvalidConfig(_))));
        let cfg = small_config(-1.0, 0.0, 64);
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(1.0, 0.0, 64);
        cfg.out_grid = FrequencyGrid::new(cfg.out_grid.center() + 1e14, 1e12, 20).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn convergence_check_reports_drift() {
        let mut cfg = small_config(PI / 2.0, 0.0, 32);
        cfg.scheme = SliceScheme::Strang;
        cfg.verify_convergence = true;
        // a strongly dispersive short grid under plain Strang drifts visibly
        cfg.model.output_band.inverse_group_velocity *= 1.5;
        match propagate(&cfg) {
            Err(ConversionError::Convergence { drift, .. }) => assert!(drift > 1e-4),
            Ok(_) => panic!("expected a convergence error"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn efficiency_curve_basics() {
        let c_theta = calibrate_c_theta(16.0 * PICOJOULE, 0.877).unwrap();
        assert!(((c_theta * (16.0 * PICOJOULE).sqrt()).sin().powi(2) - 0.877).abs() < 1e-12);
        let cfg = small_config(0.0, 0.0, 64).with_coupling(Coupling::PumpEnergy {
            energy: 0.0,
            c_theta,
        });
        let probe =
            make_hermite_gaussian(&PulseSpec::gaussian(1535e-9, 12e-9), &cfg.in_grid).unwrap();
        let curve = conversion_efficiency_curve(&cfg, &probe, &[0.0, 4e-12]).unwrap();
        assert_eq!(curve[0].1, 0.0);
        assert!(curve[1].1 > 0.0);
        assert!(conversion_efficiency_curve(&cfg, &probe, &[4e-12, 1e-12]).is_err());
    }

    #[test]
    fn band_dispersion_is_used() {
        // output band without walk-off: dk is independent of frequency
        let mut cfg = small_config(0.01, 0.0, 32);
        cfg.model.output_band = BandDispersion {
            inverse_group_velocity: cfg.model.input_band.inverse_group_velocity,
            ..cfg.model.output_band
        };
        let f = joint_spectral_amplitude(&cfg).unwrap();
        let pump = &cfg.pump;
        let w = cfg.out_grid.omega(3) - cfg.in_grid.omega(5);
        assert!((f[(3, 5)] - pump.interpolate(w).unwrap()).norm() < 1e-9);
    }
}
