//! Result emission: the per-round trace CSV, the run summary JSON, and
//! plot-ready two-column score series. Column schemas are fixed and floats
//! are printed with six significant digits so reruns are byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::{Metrics, RoundRecord};
use crate::sim::ExperimentResult;

/// Six significant digits, scientific: stable width, stable bytes.
pub fn fmt6(x: f64) -> String {
    format!("{x:.5e}")
}

pub const TRACE_HEADER: &str = "iteration,restart_segment,mean_score_benign,mean_score_malicious,selected_k,flagged_count,fallback_used,global_loss";

pub fn write_trace(path: &Path, trace: &[RoundRecord]) -> Result<()> {
    let mut out = String::with_capacity(trace.len() * 64 + 128);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.restart_segment,
            fmt6(r.mean_score_benign),
            fmt6(r.mean_score_malicious),
            r.selected_k,
            r.flagged_count,
            u8::from(r.fallback_used),
            fmt6(r.global_loss),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct DetectionEvent {
    segment: usize,
    iteration: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    metrics: Metrics,
    detection_iteration: Option<DetectionEvent>,
    flagged: Vec<usize>,
    truth_malicious: Vec<usize>,
    restarts: usize,
    config: &'a ExperimentConfig,
}

pub fn write_summary(
    path: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    result: &ExperimentResult,
) -> Result<()> {
    let doc = Summary {
        seed,
        metrics: result.metrics,
        detection_iteration: result
            .detection_iteration
            .map(|(segment, iteration)| DetectionEvent { segment, iteration }),
        flagged: result.flagged.iter().copied().collect(),
        truth_malicious: result.truth_malicious.iter().copied().collect(),
        restarts: result.restarts,
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&doc).expect("summary serializes");
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Two-column (global round, value) series for the benign and malicious
/// mean suspicious scores; the round counter runs across restart segments.
pub fn write_score_series(dir: &Path, trace: &[RoundRecord]) -> Result<()> {
    let mut benign = String::new();
    let mut malicious = String::new();
    for (i, r) in trace.iter().enumerate() {
        benign.push_str(&format!("{} {}\n", i + 1, fmt6(r.mean_score_benign)));
        malicious.push_str(&format!("{} {}\n", i + 1, fmt6(r.mean_score_malicious)));
    }
    fs::write(dir.join("scores_benign.dat"), benign)?;
    fs::write(dir.join("scores_malicious.dat"), malicious)?;
    Ok(())
}

/// Writes trace.csv, summary.json, and the score series into `dir`.
pub fn write_run_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    result: &ExperimentResult,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_trace(&dir.join("trace.csv"), &result.trace)?;
    write_summary(&dir.join("summary.json"), cfg, seed, result)?;
    write_score_series(dir, &result.trace)?;
    Ok(())
}

pub const SWEEP_HEADER: &str = "axis,value,dacc,fpr,fnr,tacc,asr";

pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub metrics: Metrics,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            fmt6(r.metrics.dacc),
            fmt6(r.metrics.fpr),
            fmt6(r.metrics.fnr),
            fmt6(r.metrics.tacc),
            fmt6(r.metrics.asr),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt6_is_stable() {
        assert_eq!(fmt6(0.0), "0.00000e0");
        assert_eq!(fmt6(1.0 / 3.0), "3.33333e-1");
        assert_eq!(fmt6(-123456.789), "-1.23457e5");
    }

    #[test]
    fn trace_schema_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rec = RoundRecord {
            iteration: 3,
            restart_segment: 1,
            mean_score_benign: 0.25,
            mean_score_malicious: 0.5,
            selected_k: 2,
            flagged_count: 4,
            fallback_used: true,
            global_loss: 1.5,
            tacc_snapshot: None,
        };
        write_trace(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        assert_eq!(lines.next().unwrap(), "3,1,2.50000e-1,5.00000e-1,2,4,1,1.50000e0");
    }
}
