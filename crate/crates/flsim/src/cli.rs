//! Command implementations behind the binary: single runs, parameter
//! sweeps, and config validation. Exit codes: 0 success, 2 config error,
//! 3 runtime failure.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::output::{write_run_outputs, write_sweep, SweepRow};
use crate::sim::{derive_seed, run_experiment};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumMalicious,
    Degree,
    Lambda,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::NumMalicious => "num_malicious",
            SweepAxis::Degree => "degree",
            SweepAxis::Lambda => "lambda",
        }
    }
}

fn load(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, String> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::from_toml("").map_err(|e| e.to_string())?,
    };
    if let Some(out) = out {
        cfg.run.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

/// Executes one experiment and writes trace.csv, summary.json, and the
/// score series under the output directory.
pub fn cmd_run(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> i32 {
    let cfg = match load(config, out, seed) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return EXIT_CONFIG;
        }
    };
    let result = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("run failed: {e}");
            return EXIT_RUNTIME;
        }
    };
    let dir = PathBuf::from(&cfg.run.out_dir);
    if let Err(e) = write_run_outputs(&dir, &cfg, cfg.run.seed, &result) {
        eprintln!("writing outputs failed: {e}");
        return EXIT_RUNTIME;
    }
    let m = result.metrics;
    println!(
        "run complete: dacc={:.3} fpr={:.3} fnr={:.3} tacc={:.3} asr={:.3} restarts={} -> {}",
        m.dacc,
        m.fpr,
        m.fnr,
        m.tacc,
        m.asr,
        result.restarts,
        dir.display()
    );
    EXIT_OK
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: SweepAxis, value: f64) -> Result<(), String> {
    match axis {
        SweepAxis::NumMalicious => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(format!("num_malicious value {value} is not a non-negative integer"));
            }
            cfg.fl.malicious = value as usize;
            // keep the robustness parameter tracking the malicious count
            // unless the base config pinned it explicitly away from it
            cfg.fl.byz_param = Some(value as usize);
        }
        SweepAxis::Degree => cfg.data.degree = value,
        SweepAxis::Lambda => {
            if cfg.attack.kind != AttackKind::Adaptive {
                return Err("lambda sweep requires attack.kind = \"adaptive\"".into());
            }
            cfg.attack.adaptive_lambda = value;
        }
    }
    cfg.validate().map_err(|e| e.to_string())
}

/// Per-cell seed: the master seed mixed with the axis name and value bits,
/// so cells are independent but reproducible.
pub fn cell_seed(master: u64, axis: &str, value: f64) -> u64 {
    let mut tag: u64 = 0xA5A5_5A5A_DEAD_BEEF;
    for b in axis.as_bytes() {
        tag = tag.rotate_left(8) ^ u64::from(*b);
    }
    derive_seed(master, tag ^ value.to_bits())
}

/// Runs one experiment per axis value (in parallel), each into its own
/// subdirectory, and writes an aggregate sweep.csv.
pub fn cmd_sweep(
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    axis: SweepAxis,
    values: &[String],
) -> i32 {
    let base = match load(config, out, seed) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return EXIT_CONFIG;
        }
    };
    if values.is_empty() {
        eprintln!("config error: sweep needs at least one --values entry");
        return EXIT_CONFIG;
    }
    let mut cells = Vec::new();
    for raw in values {
        let value: f64 = match raw.parse() {
            Ok(v) => v,
            Err(_) => {
                eprintln!("config error: axis value '{raw}' is not a number");
                return EXIT_CONFIG;
            }
        };
        let mut cfg = base.clone();
        if let Err(msg) = apply_axis(&mut cfg, axis, value) {
            eprintln!("config error: {msg}");
            return EXIT_CONFIG;
        }
        cfg.run.seed = cell_seed(base.run.seed, axis.name(), value);
        let sub = format!("{}_{}", axis.name(), raw);
        cfg.run.out_dir = Path::new(&base.run.out_dir).join(&sub).to_string_lossy().into_owned();
        cells.push((raw.clone(), cfg));
    }

    let results: Vec<Result<SweepRow, Error>> = cells
        .par_iter()
        .map(|(raw, cfg)| {
            let result = run_experiment(cfg)?;
            write_run_outputs(Path::new(&cfg.run.out_dir), cfg, cfg.run.seed, &result)?;
            Ok(SweepRow {
                axis: axis.name().to_string(),
                value: raw.clone(),
                metrics: result.metrics,
            })
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                eprintln!("sweep cell failed: {e}");
                return EXIT_RUNTIME;
            }
        }
    }
    let sweep_path = Path::new(&base.run.out_dir).join("sweep.csv");
    if let Err(e) = std::fs::create_dir_all(&base.run.out_dir).and_then(|()| {
        write_sweep(&sweep_path, &rows).map_err(|e| match e {
            Error::Io(io) => io,
            other => std::io::Error::other(other.to_string()),
        })
    }) {
        eprintln!("writing sweep.csv failed: {e}");
        return EXIT_RUNTIME;
    }
    println!("sweep complete: {} cells -> {}", rows.len(), sweep_path.display());
    EXIT_OK
}

/// Parses and validates the config, echoing the effective TOML.
pub fn cmd_validate(config: Option<&Path>) -> i32 {
    match load(config, None, None) {
        Ok(cfg) => {
            print!("{}", cfg.to_toml());
            EXIT_OK
        }
        Err(msg) => {
            eprintln!("config error: {msg}");
            EXIT_CONFIG
        }
    }
}
