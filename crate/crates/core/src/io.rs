//! Result files: CSV tables tagged with the config hash, JSON summaries and
//! Green-matrix exports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::conversion::GreenPair;
use crate::lab::ScanResult;
use crate::linalg::CMat;
use crate::modes::SchmidtDecomposition;
use crate::spectral::FrequencyGrid;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

type Result<T, E = IoError> = std::result::Result<T, E>;

const HASH_PREFIX: &str = "# config_hash=";

/// Nine significant digits.
pub fn format_number(x: f64) -> String {
    format!("{x:.8e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `# config_hash=<hash>`, the header row, then the rows.
pub fn write_table(path: &Path, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(file, "{HASH_PREFIX}{hash}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub config_hash: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let format = |message: &str| IoError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let (first, body) = text.split_once('\n').ok_or_else(|| format("missing header"))?;
    let config_hash = first
        .strip_prefix(HASH_PREFIX)
        .ok_or_else(|| format("first line must carry the config hash"))?
        .to_string();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(csv_err(path))?;
        let row = record
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| format(&format!("not a number: {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table {
        config_hash,
        header,
        rows,
    })
}

/// One row per scan point: abscissa and intensity.
pub fn write_scan_csv(result: &ScanResult, path: &Path, hash: &str) -> Result<()> {
    let abscissa = format!("abscissa[{}]", result.abscissa_unit);
    let intensity = match result.readout {
        crate::lab::Readout::ModulusSquared => "intensity[photons/pulse]",
        crate::lab::Readout::Modulus => "intensity[sqrt(photons/pulse)]",
    };
    let rows: Vec<Vec<String>> = result
        .abscissa
        .iter()
        .zip(&result.intensities)
        .map(|(a, i)| vec![format_number(*a), format_number(*i)])
        .collect();
    write_table(path, hash, &[&abscissa, intensity], &rows)
}

/// Companion file with every recorded spectrum in long form. Writes nothing
/// when the scan kept no spectra; returns whether a file was written.
pub fn write_scan_spectra_csv(result: &ScanResult, path: &Path, hash: &str) -> Result<bool> {
    let Some(spectra) = &result.spectra else {
        return Ok(false);
    };
    let abscissa = format!("abscissa[{}]", result.abscissa_unit);
    let mut rows = Vec::with_capacity(spectra.len() * result.spectrum_axis.len());
    for (a, spectrum) in result.abscissa.iter().zip(spectra) {
        for (l, s) in result.spectrum_axis.iter().zip(spectrum) {
            rows.push(vec![format_number(*a), format_number(*l), format_number(*s)]);
        }
    }
    write_table(
        path,
        hash,
        &[&abscissa, "output_wavelength[m]", "spectral_density[photons/pulse/(rad/s)]"],
        &rows,
    )?;
    Ok(true)
}

/// Mode index, conversion angle and efficiency, strongest first.
pub fn write_decomposition_csv(dec: &SchmidtDecomposition, path: &Path, hash: &str) -> Result<()> {
    let rows: Vec<Vec<String>> = dec
        .angles
        .iter()
        .zip(&dec.efficiencies)
        .enumerate()
        .map(|(n, (t, e))| vec![n.to_string(), format_number(*t), format_number(*e)])
        .collect();
    write_table(path, hash, &["n", "theta[rad]", "efficiency"], &rows)
}

/// Input and output mode amplitudes of mode `n`.
pub fn write_mode_csv(dec: &SchmidtDecomposition, n: usize, path: &Path, hash: &str) -> Result<()> {
    let mut rows = Vec::new();
    let mut push = |side: &str, grid: &FrequencyGrid, values: &[Complex64]| {
        for (k, v) in values.iter().enumerate() {
            rows.push(vec![
                side.to_string(),
                format_number(grid.omega(k)),
                format_number(v.re),
                format_number(v.im),
            ]);
        }
    };
    let (a, b) = (&dec.input_modes[n], &dec.output_modes[n]);
    push("input", a.grid(), a.values());
    push("output", b.grid(), b.values());
    write_table(
        path,
        hash,
        &["side", "omega[rad/s]", "re[(rad/s)^-1/2]", "im[(rad/s)^-1/2]"],
        &rows,
    )
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn grid_comment(name: &str, g: &FrequencyGrid) -> String {
    format!(
        "# {name}_grid center={} span={} points={}",
        format_number(g.center()),
        format_number(g.span()),
        g.len()
    )
}

/// Row-major CSV of one Green block: `row,col,re,im`.
fn write_green_block_csv(path: &Path, hash: &str, green: &GreenPair, m: &CMat, rows_grid: &str) -> Result<()> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut lines = vec![
        format!("{HASH_PREFIX}{hash}"),
        grid_comment("in", &green.in_grid),
        grid_comment("out", &green.out_grid),
        format!("# rows on the {rows_grid} grid, columns on the in grid"),
        "row,col,re,im".to_string(),
    ];
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let v = m[(r, c)];
            lines.push(format!("{r},{c},{},{}", format_number(v.re), format_number(v.im)));
        }
    }
    for line in lines {
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}

/// `green_converted.csv` and `green_transmitted.csv` in `dir`.
pub fn export_green_csv(green: &GreenPair, dir: &Path, hash: &str) -> Result<Vec<PathBuf>> {
    let c = dir.join("green_converted.csv");
    let t = dir.join("green_transmitted.csv");
    write_green_block_csv(&c, hash, green, &green.g_c, "out")?;
    write_green_block_csv(&t, hash, green, &green.g_t, "in")?;
    Ok(vec![c, t])
}

pub const GREEN_MAGIC: &[u8; 8] = b"QPGGREEN";

/// Little-endian binary: magic, hash (64 bytes), in grid, out grid
/// (center f64, span f64, points u64), then g_c and g_t row-major as
/// (re, im) f64 pairs.
pub fn export_green_bin(green: &GreenPair, path: &Path, hash: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(GREEN_MAGIC);
    let mut h = [b' '; 64];
    for (d, s) in h.iter_mut().zip(hash.bytes()) {
        *d = s;
    }
    bytes.extend_from_slice(&h);
    for g in [&green.in_grid, &green.out_grid] {
        bytes.extend_from_slice(&g.center().to_le_bytes());
        bytes.extend_from_slice(&g.span().to_le_bytes());
        bytes.extend_from_slice(&(g.len() as u64).to_le_bytes());
    }
    for m in [&green.g_c, &green.g_t] {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                bytes.extend_from_slice(&m[(r, c)].re.to_le_bytes());
                bytes.extend_from_slice(&m[(r, c)].im.to_le_bytes());
            }
        }
    }
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
