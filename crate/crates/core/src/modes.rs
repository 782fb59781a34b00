//! Schmidt decomposition of the converted block and the figures of merit
//! built on it.

use faer::Mat;
use num_complex::Complex64;
use thiserror::Error;

use crate::conversion::GreenPair;
use crate::linalg::CMat;
use crate::spectral::{FrequencyGrid, SpectralAmplitude, SpectralError};

/// Singular values above `1 + UNITARITY_SLACK` are rejected.
pub const UNITARITY_SLACK: f64 = 1e-6;
/// Overshoot above 1 that is silently clipped.
pub const CLIP_TOLERANCE: f64 = 1e-9;
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModeError {
    #[error("singular value {value} exceeds 1: the two-channel map is not unitary")]
    UnitarityViolation { value: f64 },
    #[error("selectivity undefined: all conversion efficiencies vanish")]
    Undefined,
    #[error("matched signal {matched} does not exceed background {background}")]
    SignalTooWeak { matched: f64, background: f64 },
    #[error("singular value decomposition failed: {0}")]
    Svd(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

pub type Result<T, E = ModeError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct SchmidtDecomposition {
    pub input_modes: Vec<SpectralAmplitude>,
    pub output_modes: Vec<SpectralAmplitude>,
    /// rad, descending
    pub angles: Vec<f64>,
    /// `sin^2(angle)`
    pub efficiencies: Vec<f64>,
    pub schmidt_number: f64,
}

impl SchmidtDecomposition {
    pub fn in_grid(&self) -> Option<&FrequencyGrid> {
        self.input_modes.first().map(|m| m.grid())
    }

    pub fn out_grid(&self) -> Option<&FrequencyGrid> {
        self.output_modes.first().map(|m| m.grid())
    }

    /// Rebuilds the sample-map `g_c = sum sin(theta_n) u_n v_n^H dw_in`.
    pub fn reconstruct(&self) -> CMat {
        let (Some(gi), Some(go)) = (self.in_grid(), self.out_grid()) else {
            return Mat::zeros(0, 0);
        };
        let dw = gi.spacing();
        Mat::from_fn(go.len(), gi.len(), |o, i| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, theta) in self.angles.iter().enumerate() {
                let s = theta.sin();
                if s != 0.0 {
                    acc += self.output_modes[k].values()[o]
                        * self.input_modes[k].values()[i].conj()
                        * s;
                }
            }
            acc * dw
        })
    }
}

pub fn schmidt_decompose(green: &GreenPair) -> Result<SchmidtDecomposition> {
    let w = green.weighted_converted();
    for j in 0..w.ncols() {
        for i in 0..w.nrows() {
            if !(w[(i, j)].re.is_finite() && w[(i, j)].im.is_finite()) {
                return Err(ModeError::Svd("converted block has non-finite entries".into()));
            }
        }
    }
    let svd = w.thin_svd().map_err(|e| ModeError::Svd(format!("{e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let s = svd.S().column_vector();
    let rank = s.nrows();
    let (ni, no) = (w.ncols(), w.nrows());

    // order by singular value, ties by position of the input mode's peak
    let peak = |k: usize| -> usize {
        let mut best = 0;
        for i in 1..ni {
            if v[(i, k)].norm() > v[(best, k)].norm() {
                best = i;
            }
        }
        best
    };
    let mut order: Vec<(usize, f64, usize)> = (0..rank).map(|k| (k, s[k].re, peak(k))).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    // runs of numerically equal values keep their sorted values but take
    // their modes in peak order
    let values: Vec<f64> = order.iter().map(|o| o.1).collect();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[start] - values[end] <= TIE_TOLERANCE {
            end += 1;
        }
        order[start..end].sort_by_key(|o| o.2);
        for (slot, o) in order[start..end].iter_mut().enumerate() {
            o.1 = values[start + slot];
        }
        start = end;
    }

    let sqrt_in = green.in_grid.spacing().sqrt();
    let sqrt_out = green.out_grid.spacing().sqrt();
    let mut input_modes = Vec::with_capacity(rank);
    let mut output_modes = Vec::with_capacity(rank);
    let mut angles = Vec::with_capacity(rank);
    for &(k, sv, p) in &order {
        if sv > 1.0 + UNITARITY_SLACK {
            return Err(ModeError::UnitarityViolation { value: sv });
        }
        if sv > 1.0 + CLIP_TOLERANCE {
            log::warn!("singular value {sv} clipped to 1");
        }
        let sv = sv.clamp(0.0, 1.0);
        // gauge: largest input component real and positive
        let gauge = {
            let c = v[(p, k)];
            if c.norm() > 0.0 {
                c.conj() / c.norm()
            } else {
                Complex64::new(1.0, 0.0)
            }
        };
        let vin = (0..ni).map(|i| v[(i, k)] * gauge / sqrt_in).collect();
        let vout = (0..no).map(|o| u[(o, k)] * gauge / sqrt_out).collect();
        input_modes.push(SpectralAmplitude::from_values(green.in_grid, vin)?);
        output_modes.push(SpectralAmplitude::from_values(green.out_grid, vout)?);
        angles.push(sv.asin());
    }
    let efficiencies: Vec<f64> = angles.iter().map(|a| a.sin().powi(2)).collect();
    let schmidt_number = schmidt_number_of(&efficiencies).unwrap_or(f64::NAN);
    Ok(SchmidtDecomposition {
        input_modes,
        output_modes,
        angles,
        efficiencies,
        schmidt_number,
    })
}

fn schmidt_number_of(eta: &[f64]) -> Option<f64> {
    let sum: f64 = eta.iter().sum();
    let sq: f64 = eta.iter().map(|e| e * e).sum();
    (sq > 0.0).then(|| sum * sum / sq)
}

/// `eta_1 * (eta_1 / sum eta_n)`.
pub fn selectivity(dec: &SchmidtDecomposition) -> Result<f64> {
    let sum: f64 = dec.efficiencies.iter().sum();
    match dec.efficiencies.first() {
        Some(&e1) if sum > 0.0 => Ok(e1 * e1 / sum),
        _ => Err(ModeError::Undefined),
    }
}

/// `(sum eta)^2 / sum eta^2`.
pub fn schmidt_number(dec: &SchmidtDecomposition) -> Result<f64> {
    schmidt_number_of(&dec.efficiencies).ok_or(ModeError::Undefined)
}

/// Background-corrected suppression of the orthogonal-pump signal, clamped to [0, 1].
pub fn depletion_selectivity(i_matched: f64, i_orthogonal: f64, background: f64) -> Result<f64> {
    if !(i_matched > background) {
        return Err(ModeError::SignalTooWeak {
            matched: i_matched,
            background,
        });
    }
    Ok((1.0 - (i_orthogonal - background) / (i_matched - background)).clamp(0.0, 1.0))
}
