//! `qpg`: runs the pulse-gate experiments from a scenario file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use qpg_core::config::{self, GreenExport, Scenario};
use qpg_core::conversion::PICOJOULE;
use qpg_core::io::{self, format_number};
use qpg_core::lab::{self, ScanResult};
use qpg_core::modes;
use qpg_core::{Error, ErrorKind};

/// sysexits EX_USAGE
const EXIT_USAGE: u8 = 64;
/// sysexits EX_IOERR
const EXIT_IO: u8 = 74;

#[derive(Parser, Debug)]
#[command(name = "qpg", version, about = "Quantum pulse gate virtual lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario file (TOML with unit-suffixed quantities).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, env = "QPG_OUT_DIR", default_value = "results")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Schmidt modes, angles and efficiencies of the operating point.
    Decompose,
    /// Converted intensity versus pump center wavelength.
    ScanWavelength,
    /// Converted intensity versus pump bandwidth.
    ScanBandwidth,
    /// HG0 versus HG1 depletion selectivity.
    Benchmark,
    /// Counts versus pump energy with a sin^2 fit.
    Efficiency,
    /// Probe over converted bandwidth.
    Compression,
    /// Parse and check the scenario, print its hash.
    ValidateConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let Some(config_path) = cli.config.clone() else {
        eprintln!("error: --config PATH is required\n\nUsage: qpg <COMMAND> --config PATH [--out DIR]");
        return ExitCode::from(EXIT_USAGE);
    };
    match run(cli.command, &config_path, &cli.out) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Numerical => 2,
                ErrorKind::Io => EXIT_IO,
            })
        }
    }
}

fn run(command: Command, config_path: &Path, out: &Path) -> Result<String, Error> {
    let scenario = config::load_config(config_path)?.resolve()?;
    let hash = scenario.hash();
    if command == Command::ValidateConfig {
        return Ok(format!("config ok: {} (hash {hash})", config_path.display()));
    }
    std::fs::create_dir_all(out).map_err(|source| io::IoError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let started = Instant::now();
    let line = match command {
        Command::Decompose => decompose(&scenario, out, &hash)?,
        Command::ScanWavelength => {
            let r = lab::scan_pump_wavelength(&scenario.lab, &scenario.wavelength_scan)?;
            write_scan(&scenario, &r, "scan_wavelength", out, &hash)?
        }
        Command::ScanBandwidth => {
            let r = lab::scan_pump_bandwidth(&scenario.lab, &scenario.bandwidth_scan)?;
            write_scan(&scenario, &r, "scan_bandwidth", out, &hash)?
        }
        Command::Benchmark => benchmark(&scenario, out, &hash)?,
        Command::Efficiency => efficiency(&scenario, out, &hash)?,
        Command::Compression => compression(&scenario, out, &hash)?,
        Command::ValidateConfig => unreachable!(),
    };
    info!("{command:?} finished in {:.2?}", started.elapsed());
    Ok(line)
}

fn write_summary(out: &Path, hash: &str, scenario: &Scenario, experiment: &str, results: serde_json::Value) -> Result<(), Error> {
    let summary = json!({
        "experiment": experiment,
        "config_hash": hash,
        "results": results,
        "config": scenario,
    });
    Ok(io::write_json(&summary, &out.join("summary.json"))?)
}

fn write_scan(scenario: &Scenario, r: &ScanResult, name: &str, out: &Path, hash: &str) -> Result<String, Error> {
    io::write_scan_csv(r, &out.join(format!("{name}.csv")), hash)?;
    io::write_scan_spectra_csv(r, &out.join(format!("{name}_spectra.csv")), hash)?;
    let argmax = (0..r.intensities.len()).fold(0, |b, k| if r.intensities[k] > r.intensities[b] { k } else { b });
    let argmin = (0..r.intensities.len()).fold(0, |b, k| if r.intensities[k] < r.intensities[b] { k } else { b });
    write_summary(
        out,
        hash,
        scenario,
        name,
        json!({
            "points": r.abscissa.len(),
            "abscissa_unit": r.abscissa_unit,
            "readout": r.readout,
            "argmax_abscissa": r.abscissa.get(argmax),
            "argmin_abscissa": r.abscissa.get(argmin),
            "max_intensity": r.intensities.get(argmax),
        }),
    )?;
    Ok(format!(
        "{name}: {} points, peak at {:.2} nm, minimum at {:.2} nm",
        r.abscissa.len(),
        r.abscissa.get(argmax).copied().unwrap_or(f64::NAN) * 1e9,
        r.abscissa.get(argmin).copied().unwrap_or(f64::NAN) * 1e9
    ))
}

fn decompose(scenario: &Scenario, out: &Path, hash: &str) -> Result<String, Error> {
    let plan = &scenario.decompose;
    let (green, dec) = lab::decompose(&scenario.lab, plan.theta)?;
    io::write_decomposition_csv(&dec, &out.join("decomposition.csv"), hash)?;
    for n in 0..plan.mode_spectra.min(dec.angles.len()) {
        io::write_mode_csv(&dec, n, &out.join(format!("mode_{n}.csv")), hash)?;
    }
    match plan.export_green {
        GreenExport::None => {}
        GreenExport::Csv => {
            io::export_green_csv(&green, out, hash)?;
        }
        GreenExport::Bin => io::export_green_bin(&green, &out.join("green.bin"), hash)?,
    }
    let selectivity = modes::selectivity(&dec).map_err(lab::LabError::from)?;
    let top: Vec<f64> = dec.efficiencies.iter().take(5).copied().collect();
    write_summary(
        out,
        hash,
        scenario,
        "decompose",
        json!({
            "theta": plan.theta,
            "schmidt_number": dec.schmidt_number,
            "selectivity": selectivity,
            "leading_efficiencies": top,
            "unitarity_residual": green.unitarity_residual(),
        }),
    )?;
    Ok(format!(
        "decompose: eta_1 = {:.4}, selectivity = {:.4}, K = {:.3}",
        dec.efficiencies.first().copied().unwrap_or(0.0),
        selectivity,
        dec.schmidt_number
    ))
}

fn benchmark(scenario: &Scenario, out: &Path, hash: &str) -> Result<String, Error> {
    let r = lab::selectivity_benchmark(&scenario.lab, &scenario.benchmark_shaper)?;
    let rows: Vec<Vec<String>> = (0..r.spectrum_axis.len())
        .map(|k| {
            vec![
                format_number(r.spectrum_axis[k]),
                format_number(r.matched_spectrum[k]),
                format_number(r.orthogonal_spectrum[k]),
            ]
        })
        .collect();
    io::write_table(
        &out.join("benchmark_spectra.csv"),
        hash,
        &["output_wavelength[m]", "matched[counts/bin]", "orthogonal[counts/bin]"],
        &rows,
    )?;
    write_summary(
        out,
        hash,
        scenario,
        "benchmark",
        json!({
            "selectivity": r.selectivity,
            "matched_counts": r.matched,
            "orthogonal_counts": r.orthogonal,
            "background_counts": r.background,
            "shaper": scenario.benchmark_shaper,
        }),
    )?;
    Ok(format!(
        "benchmark: depletion selectivity = {:.4} at {:.2} nm shaper resolution",
        r.selectivity,
        scenario.benchmark_shaper.resolution_fwhm * 1e9
    ))
}

fn efficiency(scenario: &Scenario, out: &Path, hash: &str) -> Result<String, Error> {
    let plan = &scenario.efficiency;
    let r = lab::efficiency_experiment(&scenario.lab, &plan.energies, plan.model, plan.noise)?;
    let rows: Vec<Vec<String>> = (0..r.energies.len())
        .map(|k| {
            vec![
                format_number(r.energies[k] / PICOJOULE),
                format_number(r.model_efficiency[k]),
                format_number(r.raw_counts[k]),
                format_number(r.background_counts[k]),
                format_number(r.corrected_counts[k]),
                format_number(r.measured_efficiency[k]),
            ]
        })
        .collect();
    io::write_table(
        &out.join("efficiency.csv"),
        hash,
        &[
            "pump_energy[pJ]",
            "model_efficiency",
            "raw[counts]",
            "background[counts]",
            "corrected[counts]",
            "measured_efficiency",
        ],
        &rows,
    )?;
    write_summary(
        out,
        hash,
        scenario,
        "efficiency",
        json!({
            "fit": r.fit,
            "snr": if r.snr.is_finite() { json!(r.snr) } else { json!(null) },
        }),
    )?;
    Ok(format!(
        "efficiency: a = {:.4}, c = {:.4} rad/sqrt(pJ), peak = {:.4}, SNR = {:.2}",
        r.fit.a, r.fit.c, r.fit.peak_efficiency, r.snr
    ))
}

fn compression(scenario: &Scenario, out: &Path, hash: &str) -> Result<String, Error> {
    let r = lab::bandwidth_compression_report(&scenario.lab)?;
    write_summary(out, hash, scenario, "compression", json!(r))?;
    Ok(format!(
        "compression: factor {:.2}, converted FWHM {:.4} nm at {:.2} nm",
        r.factor,
        r.converted_fwhm_wavelength * 1e9,
        r.converted_center_wavelength * 1e9
    ))
}
