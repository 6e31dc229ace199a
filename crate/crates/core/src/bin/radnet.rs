use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use radnet::error::{Error, Result};
use radnet::experiment::{
    emit_plot_data, fuse_from_disk, run_calibration_stage, run_dir, run_experiment, run_monte_carlo, write_calibration,
    write_run, write_simulation, Benchmark, ExperimentConfig, ExperimentReport, ModeSelection, RunOptions,
};
use radnet::scene::{simulate, BuiltinScenario, TrajectoryKind};

#[derive(Parser)]
#[command(
    name = "radnet",
    version,
    about = "Radar network self-calibration and one-shot fusion experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the evaluation trajectory and write truth and measurements.
    Simulate(Common),
    /// Run the calibration stage and write pose estimates.
    Calibrate(Common),
    /// Track, fuse and score using the simulation and calibration on disk.
    Fuse(Common),
    /// Full pipeline: simulate, calibrate, fuse, report.
    Run(Common),
    /// Monte Carlo over consecutive seeds.
    Mc(McArgs),
    /// Write plot-ready CSVs for a finished run.
    EmitPlots(PlotArgs),
}

#[derive(Args, Clone)]
struct Source {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "builtin")]
    config: Option<PathBuf>,
    /// Built-in geometry instead of a config file.
    #[arg(long, value_parser = parse_builtin)]
    builtin: Option<BuiltinScenario>,
    /// Evaluation trajectory of a built-in geometry.
    #[arg(long, value_parser = parse_kind, default_value = "random", requires = "builtin")]
    trajectory: TrajectoryKind,
}

#[derive(Args, Clone)]
struct Common {
    #[command(flatten)]
    source: Source,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// One-shot fusion modes to run: bayes, ml or both.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ModeSelection>,
    /// Reference for scoring: truth or track_fusion.
    #[arg(long, value_parser = parse_benchmark)]
    benchmark: Option<Benchmark>,
    /// Overrides the frame count of both stages.
    #[arg(long)]
    frames: Option<usize>,
    /// Output root; runs land in <out>/<scenario>/<seed>.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory; derived from the config, seed and --out when omitted.
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    source: Option<Source>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Destination; <run>/plots when omitted.
    #[arg(long)]
    plots: Option<PathBuf>,
}

fn parse_builtin(s: &str) -> std::result::Result<BuiltinScenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<TrajectoryKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<ModeSelection, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_benchmark(s: &str) -> std::result::Result<Benchmark, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, self.builtin) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(name)) => Ok(ExperimentConfig::builtin(name, self.trajectory)),
            (None, None) => Err(Error::Config("pass --config PATH or --builtin A|B|C".into())),
        }
    }
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            mode: self.mode,
            benchmark: self.benchmark,
            num_frames: self.frames,
        }
    }

    fn resolve(&self) -> Result<(ExperimentConfig, RunOptions, PathBuf)> {
        let cfg = self.source.load()?;
        let opts = self.options();
        let dir = run_dir(&self.out, &cfg.scenario.name, opts.seed_for(&cfg));
        Ok((cfg, opts, dir))
    }
}

fn summarize(report: &ExperimentReport, dir: &Path) {
    println!("report: {}", dir.join("report/report.json").display());
    for c in &report.calibration {
        println!(
            "node {} pose ({:.4}, {:.4}, {:.3} deg), rmse {:.4}, position error {:.4}, orientation error {:.3} deg",
            c.node,
            c.record.px,
            c.record.py,
            c.record.phi_deg,
            c.record.rmse,
            c.position_error,
            c.orientation_error_deg
        );
    }
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "vs {}: bayes pos {} vel {} | ml pos {} vel {} | frames {}",
        report.benchmark,
        show(report.position_rmse_bayes),
        show(report.velocity_rmse_bayes),
        show(report.position_rmse_ml),
        show(report.velocity_rmse_ml),
        report.evaluated_frames.len()
    );
}

/// Exit status for a finished run.
fn report_status(cfg: &ExperimentConfig, report: &ExperimentReport) -> ExitCode {
    if report.nonconvergence_exceeded(cfg.evaluation.max_nonconverged_fraction) {
        eprintln!(
            "solver failed to converge on more than {}% of frames (bayes {}, ml {} of {})",
            100.0 * cfg.evaluation.max_nonconverged_fraction,
            report.fusion.nonconverged_bayes + report.fusion.failed_bayes,
            report.fusion.nonconverged_ml + report.fusion.failed_ml,
            report.fusion.fused_frames
        );
        ExitCode::from(4)
    } else {
        ExitCode::SUCCESS
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(c) => {
            let (cfg, opts, dir) = c.resolve()?;
            cfg.validate()?;
            let sim = simulate(&radnet::experiment::evaluation_scenario(&cfg, &opts))?;
            write_simulation(&dir, &sim)?;
            println!("{}", dir.join("tracks").display());
        }
        Command::Calibrate(c) => {
            let (cfg, opts, dir) = c.resolve()?;
            cfg.validate()?;
            let stage = run_calibration_stage(&cfg, &opts)?;
            write_calibration(&dir, &stage)?;
            for (k, r) in stage.results.iter().enumerate() {
                let rec = r.to_record();
                println!(
                    "node {} pose ({:.4}, {:.4}, {:.3} deg), rmse {:.4}",
                    k + 2,
                    rec.px,
                    rec.py,
                    rec.phi_deg,
                    rec.rmse
                );
            }
        }
        Command::Fuse(c) => {
            let (cfg, opts, dir) = c.resolve()?;
            let (_, report) = fuse_from_disk(&cfg, &opts, &dir)?;
            summarize(&report, &dir);
            return Ok(report_status(&cfg, &report));
        }
        Command::Run(c) => {
            let (cfg, opts, dir) = c.resolve()?;
            let run = run_experiment(&cfg, &opts)?;
            write_run(&dir, &run)?;
            summarize(&run.report, &dir);
            return Ok(report_status(&cfg, &run.report));
        }
        Command::Mc(m) => {
            let (cfg, opts, _) = m.common.resolve()?;
            let report = run_monte_carlo(&cfg, m.trials, m.jobs, &opts)?;
            let path = m
                .common
                .out
                .join(&cfg.scenario.name)
                .join(format!("mc-{}-{}.json", report.base_seed, m.trials));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                    path: parent.to_path_buf(),
                    source: e,
                })?;
            }
            let json = report.to_json()?;
            std::fs::write(&path, &json).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            print!("{json}");
            eprintln!(
                "{} of {} trials succeeded; written to {}",
                report.succeeded,
                report.trials,
                path.display()
            );
        }
        Command::EmitPlots(p) => {
            let dir = match (&p.run, &p.source) {
                (Some(dir), _) => dir.clone(),
                (None, Some(source)) => {
                    let cfg = source.load()?;
                    run_dir(&p.out, &cfg.scenario.name, p.seed.unwrap_or(cfg.scenario.rng_seed))
                }
                (None, None) => return Err(Error::Config("pass --run DIR or a config source".into())),
            };
            let plots = p.plots.unwrap_or_else(|| dir.join("plots"));
            for path in emit_plot_data(&dir, &plots)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::MissingKeys(_) => 2,
                Error::Degenerate(_) => 3,
                _ => 1,
            })
        }
    }
}
