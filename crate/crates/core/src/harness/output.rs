//! CSV and metadata emission. Nodes are written 1-based; undefined values
//! are written as `none`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::calibrate::CalibrationTarget;
use super::config::ExperimentConfig;
use super::sweep::{CalibrationRun, CurvePoint, SweepResult};
use super::{Detector, StatTrace, TrialTraces};
use crate::error::Result;

pub const CURVE_HEADER: [&str; 6] = ["target", "achieved", "mean_delay", "threshold", "detector", "node"];

pub const DELAY_PFA_FILE: &str = "delay_vs_pfa.csv";
pub const THRESHOLD_PFA_FILE: &str = "threshold_vs_pfa.csv";
pub const DELAY_FAR_MSPRT_FILE: &str = "delay_vs_far_msprt.csv";
pub const DELAY_FAR_GLR_FILE: &str = "delay_vs_far_glr.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const METADATA_FILE: &str = "metadata.json";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_curve_csv<W: Write>(out: W, points: &[&CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for p in points {
        w.write_record([
            p.target.to_string(),
            p.achieved.to_string(),
            opt(p.mean_delay),
            p.threshold.to_string(),
            p.detector.name().to_string(),
            (p.node + 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(out: W, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "family",
        "detector",
        "node",
        "target",
        "threshold",
        "achieved",
        "achieved_in_stream_tail",
        "mean_delay",
        "detection_rate",
        "misidentification",
        "censored_fraction",
    ])?;
    for (family, points) in [("pfa", &result.pfa), ("far", &result.far)] {
        for p in points {
            w.write_record([
                family.to_string(),
                p.detector.name().to_string(),
                (p.node + 1).to_string(),
                p.target.to_string(),
                p.threshold.to_string(),
                p.achieved.to_string(),
                p.achieved_tail.to_string(),
                opt(p.mean_delay),
                p.detection_rate.to_string(),
                opt(p.misidentification),
                opt(p.censored),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Threshold path of every calibration run.
pub fn write_calibration_csv<W: Write>(out: W, runs: &[CalibrationRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["detector", "target_kind", "target", "node", "trial", "threshold", "observation"])?;
    for r in runs {
        let kind = match r.target {
            CalibrationTarget::Pfa(_) => "pfa",
            CalibrationTarget::RunLength(_) => "arl",
        };
        for (j, b) in r.trace.thresholds.iter().enumerate() {
            let obs = if j == 0 { None } else { Some(r.trace.observations[j - 1]) };
            w.write_record([
                r.detector.name().to_string(),
                kind.to_string(),
                r.target.value().to_string(),
                (r.node + 1).to_string(),
                j.to_string(),
                b.to_string(),
                opt(obs),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn pick<'a>(family: &'a [CurvePoint], dets: &[Detector]) -> Vec<&'a CurvePoint> {
    family.iter().filter(|p| dets.contains(&p.detector)).collect()
}

/// Writes the four curve files and the summary into `dir`.
pub fn emit_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_curve_csv(create(&dir.join(DELAY_PFA_FILE))?, &pick(&result.pfa, &[Detector::Bayes, Detector::Chi2]))?;
    write_curve_csv(create(&dir.join(THRESHOLD_PFA_FILE))?, &pick(&result.pfa, &[Detector::Bayes]))?;
    write_curve_csv(create(&dir.join(DELAY_FAR_MSPRT_FILE))?, &pick(&result.far, &[Detector::Msprt, Detector::Chi2]))?;
    write_curve_csv(create(&dir.join(DELAY_FAR_GLR_FILE))?, &pick(&result.far, &[Detector::Glr, Detector::Chi2]))?;
    write_summary_csv(create(&dir.join(SUMMARY_FILE))?, result)?;
    Ok(())
}

/// Per-round detector statistics: `t, node, detector, statistic, identified`.
pub fn write_traces_csv<W: Write>(out: W, traces: &TrialTraces, thresholds: &[(Detector, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "node", "detector", "statistic", "stopped", "identified"])?;
    for &(d, b) in thresholds {
        for (i, tr) in traces.get(d).iter().enumerate() {
            write_trace_rows(&mut w, tr, i, d, b)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_trace_rows<W: Write>(w: &mut csv::Writer<W>, tr: &StatTrace, i: usize, d: Detector, b: f64) -> Result<()> {
    let stop = tr.first_crossing(b).map(|h| h.0);
    for (k, (&s, &id)) in tr.stat.iter().zip(&tr.ident).enumerate() {
        let t = k + 1;
        let ident = if id == super::NO_IDENT { "none".to_string() } else { (id + 1).to_string() };
        w.write_record([
            t.to_string(),
            (i + 1).to_string(),
            d.name().to_string(),
            s.to_string(),
            u8::from(stop.is_some_and(|st| t >= st)).to_string(),
            ident,
        ])?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RunMetadata {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub trials: usize,
    pub horizon: usize,
    pub gain_mode: String,
    pub moment_mode: String,
    pub nonbayes_window: usize,
    pub package: String,
    pub version: String,
    pub config: ExperimentConfig,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(config.to_toml().as_bytes()))
}

impl RunMetadata {
    pub fn new(command: &str, config: &ExperimentConfig, trials: usize) -> Self {
        Self {
            command: command.to_string(),
            config_sha256: config_hash(config),
            seed: config.seed,
            trials,
            horizon: config.horizon,
            gain_mode: format!("{:?}", config.filter.gain),
            moment_mode: format!("{:?}", config.filter.moments),
            nonbayes_window: config.nonbayes.effective_window(),
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut f = create(&dir.join(METADATA_FILE))?;
        serde_json::to_writer_pretty(&mut f, self).map_err(std::io::Error::other)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }
}
