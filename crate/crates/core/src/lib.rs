//! Simulation of a group-velocity-matched sum-frequency converter that acts
//! as a temporal-mode selective pulse gate: spectral grids, waveguide
//! dispersion, Green's-function propagation, Schmidt-mode analysis, pump
//! shaping and virtual versions of the characterization experiments.

pub mod config;
pub mod conversion;
pub mod dispersion;
pub mod io;
pub mod lab;
pub mod linalg;
pub mod modes;
pub mod shaper;
pub mod spectral;
pub mod units;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Lab(#[from] lab::LabError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

/// What kind of failure an error is, for exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input: unparsable, out of range or inconsistent settings.
    Config,
    /// A computation failed: convergence, decomposition, fit.
    Numerical,
    /// Reading or writing result files.
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use conversion::ConversionError as C;
        use lab::LabError as L;
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io(_) => ErrorKind::Io,
            Error::Lab(e) => match e {
                L::Settings(_) | L::Spectral(_) => ErrorKind::Config,
                L::Conversion(C::InvalidConfig(_) | C::PumpCoverage { .. } | C::Dispersion(_) | C::Spectral(_)) => {
                    ErrorKind::Config
                }
                L::Conversion(_) | L::Mode(_) | L::Fit { .. } => ErrorKind::Numerical,
            },
        }
    }
}
