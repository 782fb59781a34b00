//! Physical quantities written as `"<number> <unit>"` strings.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitError {
    #[error("{field}: cannot parse {text:?} as \"<number> <unit>\"")]
    Syntax { field: String, text: String },
    #[error("{field}: unit {unit:?} is not a {expected} unit (accepted: {accepted})")]
    WrongUnit {
        field: String,
        unit: String,
        expected: &'static str,
        accepted: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Time,
    Energy,
    Frequency,
    Angle,
    /// s/m
    InverseVelocity,
    /// s^2/m
    GroupVelocityDispersion,
    /// 1/m
    Wavenumber,
    /// rad/sqrt(J)
    AnglePerRootEnergy,
}

impl Dimension {
    fn name(self) -> &'static str {
        match self {
            Dimension::Length => "length",
            Dimension::Time => "time",
            Dimension::Energy => "energy",
            Dimension::Frequency => "frequency",
            Dimension::Angle => "angle",
            Dimension::InverseVelocity => "inverse velocity",
            Dimension::GroupVelocityDispersion => "GVD",
            Dimension::Wavenumber => "wavenumber",
            Dimension::AnglePerRootEnergy => "rad/sqrt(energy)",
        }
    }

    /// Accepted suffixes with their SI factors.
    fn units(self) -> &'static [(&'static str, f64)] {
        match self {
            Dimension::Length => &[
                ("m", 1.0),
                ("mm", 1e-3),
                ("um", 1e-6),
                ("µm", 1e-6),
                ("nm", 1e-9),
                ("pm", 1e-12),
            ],
            Dimension::Time => &[
                ("s", 1.0),
                ("ms", 1e-3),
                ("us", 1e-6),
                ("µs", 1e-6),
                ("ns", 1e-9),
                ("ps", 1e-12),
                ("fs", 1e-15),
            ],
            Dimension::Energy => &[
                ("J", 1.0),
                ("mJ", 1e-3),
                ("uJ", 1e-6),
                ("nJ", 1e-9),
                ("pJ", 1e-12),
                ("fJ", 1e-15),
            ],
            Dimension::Frequency => &[
                ("Hz", 1.0),
                ("1/s", 1.0),
                ("kHz", 1e3),
                ("MHz", 1e6),
                ("GHz", 1e9),
                ("THz", 1e12),
            ],
            Dimension::Angle => &[("rad", 1.0), ("mrad", 1e-3), ("deg", std::f64::consts::PI / 180.0)],
            Dimension::InverseVelocity => &[
                ("s/m", 1.0),
                ("ps/mm", 1e-9),
                ("fs/mm", 1e-12),
                ("ps/m", 1e-12),
                ("fs/um", 1e-9),
            ],
            Dimension::GroupVelocityDispersion => &[
                ("s^2/m", 1.0),
                ("ps^2/m", 1e-24),
                ("ps^2/km", 1e-27),
                ("fs^2/mm", 1e-27),
            ],
            Dimension::Wavenumber => &[("1/m", 1.0), ("1/mm", 1e3), ("1/um", 1e6), ("rad/m", 1.0)],
            Dimension::AnglePerRootEnergy => &[
                ("rad/sqrt(J)", 1.0),
                ("rad/sqrt(pJ)", 1e6),
                ("rad/sqrt(nJ)", 1e4 * 3.162_277_660_168_379_5),
            ],
        }
    }
}

/// A number with a unit suffix, kept as written so configs round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Quantity(pub String);

impl Quantity {
    pub fn new(value: f64, unit: &str) -> Self {
        Quantity(format!("{value} {unit}"))
    }

    /// Value in SI units; `field` names the config key in errors.
    pub fn si(&self, dim: Dimension, field: &str) -> Result<f64, UnitError> {
        let text = self.0.trim();
        let syntax = || UnitError::Syntax {
            field: field.to_string(),
            text: self.0.clone(),
        };
        let split = text.find(char::is_whitespace).ok_or_else(syntax)?;
        let (number, unit) = text.split_at(split);
        let value: f64 = number.parse().map_err(|_| syntax())?;
        let unit = unit.trim();
        dim.units()
            .iter()
            .find(|(u, _)| *u == unit)
            .map(|(_, f)| value * f)
            .ok_or_else(|| UnitError::WrongUnit {
                field: field.to_string(),
                unit: unit.to_string(),
                expected: dim.name(),
                accepted: dim
                    .units()
                    .iter()
                    .map(|(u, _)| *u)
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Quantity {
    fn from(s: &str) -> Self {
        Quantity(s.to_string())
    }
}
