use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fdi_qcd::harness::calibrate::CalibrationTarget;
use fdi_qcd::harness::output::{emit_sweep, write_calibration_csv, write_traces_csv, RunMetadata};
use fdi_qcd::harness::sweep::{run_calibration, run_sweep};
use fdi_qcd::harness::{Detector, DetectorSelection, Experiment, ExperimentConfig, Stream};
use fdi_qcd::kcif::{run_filters, write_estimates_csv};
use fdi_qcd::moments::{AttackContext, MomentHistory};
use fdi_qcd::model::Onset;
use fdi_qcd::validate;
use fdi_qcd::Result;

#[derive(Parser)]
#[command(name = "fdi-qcd", version, about = "Quickest detection of false-data injection on KCIF sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial and dump trajectory, estimates, detector traces and moments.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trial index within the stream.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long, value_enum, default_value_t = StreamArg::Bayes)]
        stream: StreamArg,
    },
    /// Calibrate thresholds online and write the threshold paths.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate, evaluate and write the delay/false-alarm curves.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Run the oracle suites and report pass/fail.
    Validate {
        /// Monte Carlo trials for the moment oracle.
        #[arg(long, default_value_t = 100_000)]
        mc_trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "configs/five_sensor.toml")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated subset of bayes,msprt,glr,chi2.
    #[arg(long)]
    detectors: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StreamArg {
    Bayes,
    NoAttack,
    Fixed,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(d) = &self.detectors {
            cfg.detectors = DetectorSelection::parse(d)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn simulate(common: &Common, trial: usize, stream: StreamArg) -> Result<()> {
    let cfg = common.load()?;
    let exp = Experiment::new(cfg.clone())?;
    let stream = match stream {
        StreamArg::Bayes => Stream::BayesEvaluation,
        StreamArg::NoAttack => Stream::NoAttackEvaluation,
        StreamArg::Fixed => Stream::FixedOnset,
    };
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let traj = exp.trajectory(stream, trial)?;
    traj.write_csv(create(&out.join("trajectory.csv"))?)?;
    let est = run_filters(&exp.model, &exp.schedule, &traj.observations)?;
    write_estimates_csv(create(&out.join("estimates.csv"))?, &exp.schedule, &est)?;
    let traces = exp.traces_for(&traj, trial, &cfg.detectors)?;
    let thresholds: Vec<(Detector, f64)> = Detector::ALL
        .into_iter()
        .filter(|d| d.enabled(&cfg.detectors))
        .map(|d| {
            let b = match d {
                Detector::Bayes => fdi_qcd::bayes::logit(cfg.bayes.initial_threshold),
                Detector::Chi2 => cfg.chi2.initial_threshold,
                _ => cfg.nonbayes.initial_threshold,
            };
            (d, b)
        })
        .collect();
    write_traces_csv(create(&out.join("traces.csv"))?, &traces, &thresholds)?;
    let ctx = match (traj.attacked, traj.onset) {
        (Some(l), Onset::At(m)) => AttackContext::new(l, m, exp.sigma.clone())?,
        _ => AttackContext::none(exp.model.obs_dim()),
    };
    let hist = MomentHistory::new(&exp.model, &exp.schedule, &ctx, traj.horizon(), cfg.filter.moments)?;
    hist.write_csv(create(&out.join("moments.csv"))?)?;
    RunMetadata::new("simulate", &cfg, 1).write(out)?;
    println!("onset {:?}, wrote {}", traj.onset.time(), out.display());
    Ok(())
}

fn calibrate(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let exp = Experiment::new(cfg.clone())?;
    let runs = run_calibration(&exp, cfg.trials, &cfg.detectors)?;
    std::fs::create_dir_all(&common.out)?;
    write_calibration_csv(create(&common.out.join("calibration.csv"))?, &runs)?;
    RunMetadata::new("calibrate", &cfg, cfg.trials).write(&common.out)?;
    for r in &runs {
        let (kind, rate) = match r.target {
            CalibrationTarget::Pfa(_) => ("pfa", r.trace.tail_mean(0.2)),
            CalibrationTarget::RunLength(_) => ("arl", r.trace.tail_mean(0.2)),
        };
        println!(
            "{:<6} node {} {kind} {:<6} threshold {:.6} tail {:.4}",
            r.detector.name(),
            r.node + 1,
            r.target.value(),
            r.trace.final_threshold(),
            rate
        );
    }
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let exp = Experiment::new(cfg.clone())?;
    let result = run_sweep(&exp, cfg.trials, &cfg.detectors)?;
    emit_sweep(&common.out, &result)?;
    RunMetadata::new("sweep", &cfg, cfg.trials).write(&common.out)?;
    let node = cfg.report_node - 1;
    for p in result.pfa.iter().chain(&result.far).filter(|p| p.node == node) {
        println!(
            "{:<6} node {} target {:<8.5} achieved {:<8.5} delay {:>8} threshold {:.5}",
            p.detector.name(),
            p.node + 1,
            p.target,
            p.achieved,
            p.mean_delay.map_or("none".into(), |d| format!("{d:.3}")),
            p.threshold
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Simulate { common, trial, stream } => simulate(common, *trial, *stream),
        Command::Calibrate { common } => calibrate(common),
        Command::Sweep { common } => sweep(common),
        Command::Validate { mc_trials, seed } => {
            let reports = validate::run_all(*mc_trials, *seed);
            let mut ok = true;
            for r in &reports {
                println!("{r}");
                ok &= r.passed;
            }
            return if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
