//! End-to-end experiments: simulate, track per node, self-calibrate, fuse,
//! and score against ground truth and the track-fusion benchmark.
//!
//! Calibration and evaluation use different trajectory kinds (straight for
//! one, random for the other) unless the config explicitly allows otherwise.
//! A run writes
//!
//! ```text
//! <out>/<scenario>/<seed>/
//!     tracks/       truth.csv measurements.csv node<k>.csv node<k>_in_1.csv track_fusion.csv
//!     calibration/  node<k>.toml paired_node<k>.csv
//!     fusion/       oneshot.csv
//!     report/       report.json
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Complex, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{apply_calibration, calibrate_tracks, CalibrationRecord, CalibrationResult, PairedTracks};
use crate::error::{Error, Result};
use crate::fusion::{
    posterior_covariance_grid, solve, FusionEstimate, FusionMode, FusionObservation, GridOptions, PriorConfig,
};
use crate::geometry::{angle_distance, Pose2D, TargetState};
use crate::io::{
    frames_from_rows, measurement_rows, read_csv, truth_rows, write_csv, write_track, FusionRow, MeasurementRow,
    PairedRow, TrackRow, TruthRow,
};
use crate::scene::{
    builtin_scenario, builtin_trajectory, simulate, BuiltinScenario, MeasurementFrame, ScenarioConfig, Simulation,
    TrajectoryKind, TrajectorySpec,
};
use crate::tracking::{run_tracker, track_level_fusion, EkfConfig, Track};

/// Reference the one-shot RMSE fields are computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Benchmark {
    #[serde(rename = "truth")]
    Truth,
    #[serde(rename = "trackfusion")]
    TrackFusion,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Truth => "truth",
            Benchmark::TrackFusion => "trackfusion",
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "truth" => Ok(Benchmark::Truth),
            "trackfusion" | "track_fusion" => Ok(Benchmark::TrackFusion),
            other => Err(Error::Config(format!("unknown benchmark `{other}`"))),
        }
    }
}

/// Which one-shot estimators to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    Ml,
    Bayes,
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<FusionMode> {
        match self {
            ModeSelection::Ml => vec![FusionMode::Ml],
            ModeSelection::Bayes => vec![FusionMode::Bayes],
            ModeSelection::Both => vec![FusionMode::Bayes, FusionMode::Ml],
        }
    }
}

impl FromStr for ModeSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(ModeSelection::Ml),
            "bayes" => Ok(ModeSelection::Bayes),
            "both" => Ok(ModeSelection::Both),
            other => Err(Error::Config(format!("unknown mode `{other}` (ml, bayes or both)"))),
        }
    }
}

/// How the per-frame covariance in the fusion output is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMethod {
    /// `(J^T J)^-1` at the estimate.
    Laplace,
    /// Grid posterior for Bayes estimates, Laplace for ML.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct CalibrationSettings {
    /// Trajectory driven during the calibration stage; derived from the
    /// evaluation trajectory when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectorySpec>,
    /// Permits calibrating on the same trajectory kind as the evaluation.
    pub allow_same_trajectory: bool,
    /// Frame count of the calibration stage; the scenario's when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_frames: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    pub mode: ModeSelection,
    pub covariance: CovarianceMethod,
    pub grid: GridOptions,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            mode: ModeSelection::Both,
            covariance: CovarianceMethod::Laplace,
            grid: GridOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub benchmark: Benchmark,
    /// Leading frames excluded from scoring while the filters settle.
    pub burn_in_frames: usize,
    /// Fraction of non-converged solves above which a run is flagged.
    pub max_nonconverged_fraction: f64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            benchmark: Benchmark::Truth,
            burn_in_frames: 20,
            max_nonconverged_fraction: 0.05,
        }
    }
}

/// Everything needed to run one experiment.
///
/// In TOML the scenario keys sit at the top level, next to optional
/// `[calibration]`, `[ekf]`, `[prior]`, `[fusion]` and `[evaluation]` tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub calibration: CalibrationSettings,
    pub ekf: EkfConfig,
    pub prior: PriorConfig,
    pub fusion: FusionSettings,
    pub evaluation: EvaluationSettings,
}

const SECTIONS: [&str; 5] = ["calibration", "ekf", "prior", "fusion", "evaluation"];

fn missing_keys(table: &toml::Table) -> Vec<String> {
    let mut missing = Vec::new();
    let mut need = |t: &toml::Table, prefix: &str, keys: &[&str]| {
        for k in keys {
            if !t.contains_key(*k) {
                missing.push(format!("{prefix}{k}"));
            }
        }
    };
    need(table, "", &["nodes", "trajectory", "noise"]);
    if let Some(toml::Value::Array(nodes)) = table.get("nodes") {
        for (i, node) in nodes.iter().enumerate() {
            if let toml::Value::Table(t) = node {
                need(t, &format!("nodes[{i}]."), &["x", "y"]);
            }
        }
    }
    if let Some(toml::Value::Table(t)) = table.get("trajectory") {
        need(t, "trajectory.", &["kind", "start"]);
        match t.get("kind").and_then(toml::Value::as_str) {
            Some("straight") => need(t, "trajectory.", &["speed", "heading_deg"]),
            Some("random") => need(t, "trajectory.", &["speed_cap"]),
            _ => {}
        }
    }
    if let Some(toml::Value::Table(t)) = table.get("noise") {
        need(t, "noise.", &["sigma_r", "sigma_omega", "sigma_v"]);
    }
    missing
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: &mut toml::Table, name: &str) -> Result<T> {
    match table.remove(name) {
        None => Ok(T::default()),
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[{name}]: {}", e.message()))),
    }
}

impl ExperimentConfig {
    /// Built-in geometry evaluated on `trajectory`, calibrated on the other kind.
    pub fn builtin(name: BuiltinScenario, trajectory: TrajectoryKind) -> Self {
        let mut scenario = builtin_scenario(name, trajectory);
        scenario.name = format!("{}-{}", name.name(), trajectory.name());
        Self {
            scenario,
            calibration: CalibrationSettings {
                trajectory: Some(builtin_trajectory(trajectory.other())),
                ..CalibrationSettings::default()
            },
            ekf: EkfConfig::default(),
            prior: PriorConfig::default(),
            fusion: FusionSettings::default(),
            evaluation: EvaluationSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let missing = missing_keys(&table);
        if !missing.is_empty() {
            return Err(Error::MissingKeys(missing));
        }
        let calibration = section(&mut table, "calibration")?;
        let ekf = section(&mut table, "ekf")?;
        let prior = section(&mut table, "prior")?;
        let fusion = section(&mut table, "fusion")?;
        let evaluation = section(&mut table, "evaluation")?;
        let scenario: ScenarioConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let cfg = Self {
            scenario,
            calibration,
            ekf,
            prior,
            fusion,
            evaluation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let to_value = |v: &dyn erased::Ser| v.to_value();
        let mut table = match to_value(&self.scenario)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("structs serialize to tables"),
        };
        let sections: [(&str, &dyn erased::Ser); 5] = [
            (SECTIONS[0], &self.calibration),
            (SECTIONS[1], &self.ekf),
            (SECTIONS[2], &self.prior),
            (SECTIONS[3], &self.fusion),
            (SECTIONS[4], &self.evaluation),
        ];
        for (name, value) in sections {
            table.insert(name.to_string(), to_value(value)?);
        }
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.ekf.validate()?;
        self.prior.validate()?;
        self.fusion.grid.validate()?;
        if let Some(t) = &self.calibration.trajectory {
            t.validate()?;
        }
        if self.calibration.num_frames.is_some_and(|k| k < 2) {
            return Err(Error::Config("calibration num_frames must be >= 2".into()));
        }
        let f = self.evaluation.max_nonconverged_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!(
                "max_nonconverged_fraction must lie in [0, 1], got {f}"
            )));
        }
        let calib = self.calibration_trajectory();
        if calib.kind() == self.scenario.trajectory.kind() && !self.calibration.allow_same_trajectory {
            return Err(Error::Config(format!(
                "calibration and evaluation both use a {} trajectory; set calibration.allow_same_trajectory to override",
                calib.kind().name()
            )));
        }
        Ok(())
    }

    /// Explicit calibration trajectory, or one derived from the evaluation trajectory.
    pub fn calibration_trajectory(&self) -> TrajectorySpec {
        self.calibration
            .trajectory
            .clone()
            .unwrap_or_else(|| companion_trajectory(&self.scenario.trajectory))
    }
}

/// Serialization of heterogeneous sections into TOML values.
mod erased {
    use crate::error::{Error, Result};

    pub trait Ser {
        fn to_value(&self) -> Result<toml::Value>;
    }

    impl<T: serde::Serialize> Ser for T {
        fn to_value(&self) -> Result<toml::Value> {
            toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))
        }
    }
}

/// A trajectory of the other kind covering the same area.
///
/// A random walk in the box `start +- region` pairs with a straight walk
/// along the box's longer axis; a straight walk pairs with a random walk in
/// the box around its segment.
pub fn companion_trajectory(spec: &TrajectorySpec) -> TrajectorySpec {
    match *spec {
        TrajectorySpec::Random {
            start,
            speed_cap,
            region,
            ..
        } => {
            let [w, h] = region.unwrap_or([0.75, 2.0]);
            let speed = (0.5 * speed_cap).clamp(0.1, 3.5);
            if h >= w {
                TrajectorySpec::Straight {
                    start: [start[0], start[1] - h],
                    speed,
                    heading: std::f64::consts::FRAC_PI_2,
                    path_length: Some(2.0 * h),
                }
            } else {
                TrajectorySpec::Straight {
                    start: [start[0] - w, start[1]],
                    speed,
                    heading: 0.0,
                    path_length: Some(2.0 * w),
                }
            }
        }
        TrajectorySpec::Straight {
            start,
            speed,
            heading,
            path_length,
        } => {
            let half = 0.5 * path_length.unwrap_or(4.0);
            let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
            let (s, c) = heading.sin_cos();
            let (s, c) = (snap(s), snap(c));
            TrajectorySpec::Random {
                start: [start[0] + half * c, start[1] + half * s],
                speed_cap: (2.0 * speed).clamp(0.1, 3.5),
                smoothness: 2.0,
                region: Some([(half * c).abs().max(0.75), (half * s).abs().max(0.75)]),
            }
        }
    }
}

/// Per-invocation overrides of the config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub mode: Option<ModeSelection>,
    pub benchmark: Option<Benchmark>,
    /// Overrides the frame count of both stages.
    pub num_frames: Option<usize>,
}

impl RunOptions {
    pub fn seed_for(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.scenario.rng_seed)
    }
}

/// Seed of the calibration-stage simulation, distinct from the evaluation seed.
pub fn calibration_seed(seed: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn evaluation_scenario(cfg: &ExperimentConfig, opts: &RunOptions) -> ScenarioConfig {
    let mut s = cfg.scenario.clone();
    s.rng_seed = opts.seed_for(cfg);
    if let Some(k) = opts.num_frames {
        s.num_frames = k;
    }
    s
}

pub fn calibration_scenario(cfg: &ExperimentConfig, opts: &RunOptions) -> ScenarioConfig {
    let mut s = cfg.scenario.clone();
    s.trajectory = cfg.calibration_trajectory();
    s.rng_seed = calibration_seed(opts.seed_for(cfg));
    if let Some(k) = opts.num_frames.or(cfg.calibration.num_frames) {
        s.num_frames = k;
    }
    s
}

/// Runs the EKF of every node in its own frame.
pub fn track_nodes(
    cfg: &ExperimentConfig,
    scenario: &ScenarioConfig,
    frames: &[MeasurementFrame],
) -> Result<Vec<Track>> {
    scenario
        .nodes
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            run_tracker(frames, i, pose, scenario.frame_duration, &cfg.ekf, &scenario.noise).map(|(t, _)| t)
        })
        .collect()
}

/// Output of the self-calibration stage.
#[derive(Debug, Clone)]
pub struct CalibrationStage {
    pub simulation: Simulation,
    pub tracks: Vec<Track>,
    /// Pose of node `k + 1` relative to node 1, for `k` in `1..N`.
    pub results: Vec<CalibrationResult>,
    pub paired: Vec<PairedTracks>,
}

impl CalibrationStage {
    /// Estimated poses of every node; node 1 is the origin.
    pub fn poses(&self) -> Vec<Pose2D> {
        poses_from_results(&self.results)
    }
}

pub fn poses_from_results(results: &[CalibrationResult]) -> Vec<Pose2D> {
    std::iter::once(Pose2D::origin())
        .chain(results.iter().map(CalibrationResult::pose))
        .collect()
}

/// Simulates the calibration trajectory and calibrates every node against node 1.
pub fn run_calibration_stage(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CalibrationStage> {
    let scenario = calibration_scenario(cfg, opts);
    let simulation = simulate(&scenario)?;
    let tracks = track_nodes(cfg, &scenario, &simulation.frames)?;
    let mut results = Vec::new();
    let mut paired = Vec::new();
    for track in &tracks[1..] {
        let (result, pairs) = calibrate_tracks(&tracks[0], track)?;
        results.push(result);
        paired.push(pairs);
    }
    Ok(CalibrationStage {
        simulation,
        tracks,
        results,
        paired,
    })
}

/// One-shot estimate of one frame in one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct OneShot {
    pub frame: usize,
    pub estimate: FusionEstimate,
    /// Covariance reported in the output, per [`CovarianceMethod`].
    pub covariance: Option<Matrix4<f64>>,
}

/// Output of the evaluation stage.
#[derive(Debug, Clone)]
pub struct EvaluationStage {
    pub truth: Vec<TargetState>,
    pub frames: Vec<MeasurementFrame>,
    pub local_tracks: Vec<Track>,
    /// Tracks mapped into node 1's frame with the estimated poses.
    pub global_tracks: Vec<Track>,
    pub track_fusion: Track,
    pub oneshot: Vec<OneShot>,
    /// Frames whose solve raised an error, per mode.
    pub failed: Vec<(usize, FusionMode)>,
}

/// Tracks, fuses and solves one-shot estimates for a simulated evaluation run.
pub fn run_evaluation_stage(
    cfg: &ExperimentConfig,
    scenario: &ScenarioConfig,
    simulation: Simulation,
    poses: &[Pose2D],
    modes: &[FusionMode],
) -> Result<EvaluationStage> {
    if poses.len() != scenario.nodes.len() {
        return Err(Error::LengthMismatch {
            left: poses.len(),
            right: scenario.nodes.len(),
        });
    }
    let local_tracks = track_nodes(cfg, scenario, &simulation.frames)?;
    let global_tracks: Vec<Track> = local_tracks.iter().zip(poses).map(|(t, p)| t.transformed(p)).collect();
    let track_fusion = track_level_fusion(&global_tracks.iter().collect::<Vec<_>>())?;

    let jobs: Vec<(usize, FusionMode)> = simulation
        .frames
        .iter()
        .filter(|f| f.detections().next().is_some())
        .flat_map(|f| modes.iter().map(move |&m| (f.frame_index, m)))
        .collect();
    let frame_by_index: BTreeMap<usize, &MeasurementFrame> =
        simulation.frames.iter().map(|f| (f.frame_index, f)).collect();
    let solved: Vec<(usize, FusionMode, Result<OneShot>)> = jobs
        .par_iter()
        .map(|&(frame, mode)| {
            let result = FusionObservation::from_frame(frame_by_index[&frame], poses).and_then(|obs| {
                let estimate = solve(&obs, &scenario.noise, mode, Some(&cfg.prior))?;
                let covariance = match (cfg.fusion.covariance, mode) {
                    (CovarianceMethod::Grid, FusionMode::Bayes) => Some(posterior_covariance_grid(
                        &obs,
                        &scenario.noise,
                        &cfg.prior,
                        &estimate,
                        &cfg.fusion.grid,
                    )?),
                    _ => estimate.covariance,
                };
                Ok(OneShot {
                    frame,
                    estimate,
                    covariance,
                })
            });
            (frame, mode, result)
        })
        .collect();

    let mut oneshot = Vec::new();
    let mut failed = Vec::new();
    for (frame, mode, r) in solved {
        match r {
            Ok(o) => oneshot.push(o),
            Err(Error::Domain(_)) | Err(Error::Numeric(_)) => failed.push((frame, mode)),
            Err(e) => return Err(e),
        }
    }
    Ok(EvaluationStage {
        truth: simulation.truth,
        frames: simulation.frames,
        local_tracks,
        global_tracks,
        track_fusion,
        oneshot,
        failed,
    })
}

/// Position and velocity RMSE over a frame set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub position: f64,
    pub velocity: f64,
}

/// RMSE of paired (estimate, reference) states.
pub fn rmse<'a>(pairs: impl IntoIterator<Item = (&'a TargetState, &'a TargetState)>) -> Option<Rmse> {
    let (mut sp, mut sv, mut n) = (0.0, 0.0, 0usize);
    for (est, reference) in pairs {
        sp += (est.position() - reference.position()).norm_squared();
        sv += (est.velocity() - reference.velocity()).norm_squared();
        n += 1;
    }
    (n > 0).then(|| Rmse {
        position: (sp / n as f64).sqrt(),
        velocity: (sv / n as f64).sqrt(),
    })
}

/// Calibration estimate of one node with its error against the true pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    /// 1-based node id.
    pub node: usize,
    #[serde(flatten)]
    pub record: CalibrationRecord,
    pub position_error: f64,
    pub orientation_error_deg: f64,
}

/// Errors of every estimator over the evaluated frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodErrors {
    pub bayes: Option<Rmse>,
    pub ml: Option<Rmse>,
    pub track_fusion: Option<Rmse>,
    /// Per node, after mapping into node 1's frame.
    pub ekf: Vec<Option<Rmse>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionStats {
    /// Frames with at least one detection.
    pub fused_frames: usize,
    pub nonconverged_bayes: usize,
    pub nonconverged_ml: usize,
    pub failed_bayes: usize,
    pub failed_ml: usize,
}

/// Summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub seed: u64,
    pub num_frames: usize,
    pub calibration_trajectory: TrajectoryKind,
    pub evaluation_trajectory: TrajectoryKind,
    pub benchmark: Benchmark,
    pub modes: Vec<FusionMode>,
    pub calibration: Vec<CalibrationSummary>,
    pub position_rmse_bayes: Option<f64>,
    pub velocity_rmse_bayes: Option<f64>,
    pub position_rmse_ml: Option<f64>,
    pub velocity_rmse_ml: Option<f64>,
    pub vs_truth: MethodErrors,
    pub vs_track_fusion: MethodErrors,
    pub fusion: FusionStats,
    /// Frames every RMSE above is computed over.
    pub evaluated_frames: Vec<usize>,
    /// One-shot output, relative to the run directory.
    pub per_frame_output_path: String,
}

impl ExperimentReport {
    /// True when some mode failed to converge on more than `fraction` of the fused frames.
    pub fn nonconvergence_exceeded(&self, fraction: f64) -> bool {
        let n = self.fusion.fused_frames.max(1) as f64;
        self.modes.iter().any(|m| {
            let bad = match m {
                FusionMode::Bayes => self.fusion.nonconverged_bayes + self.fusion.failed_bayes,
                FusionMode::Ml => self.fusion.nonconverged_ml + self.fusion.failed_ml,
            };
            bad as f64 / n > fraction
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub const ONESHOT_CSV: &str = "fusion/oneshot.csv";

fn summarize_calibration(results: &[CalibrationResult], truth_poses: &[Pose2D]) -> Vec<CalibrationSummary> {
    results
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let truth = truth_poses[0].relative(&truth_poses[k + 1]);
            CalibrationSummary {
                node: k + 2,
                record: r.to_record(),
                position_error: (r.pose().position() - truth.position()).norm(),
                orientation_error_deg: angle_distance(r.phi21, truth.phi()).to_degrees(),
            }
        })
        .collect()
}

/// Scores an evaluation stage.
pub fn build_report(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    calibration: &[CalibrationResult],
    eval: &EvaluationStage,
) -> ExperimentReport {
    let modes = opts.mode.unwrap_or(cfg.fusion.mode).modes();
    let benchmark = opts.benchmark.unwrap_or(cfg.evaluation.benchmark);
    let scenario = evaluation_scenario(cfg, opts);

    let estimates: BTreeMap<(usize, FusionMode), &OneShot> =
        eval.oneshot.iter().map(|o| ((o.frame, o.estimate.mode), o)).collect();
    let evaluated_frames: Vec<usize> = eval
        .frames
        .iter()
        .filter(|f| {
            f.frame_index >= cfg.evaluation.burn_in_frames
                && f.all_present()
                && eval.track_fusion.get(f.frame_index).is_some()
                && modes.iter().all(|&m| estimates.contains_key(&(f.frame_index, m)))
        })
        .map(|f| f.frame_index)
        .collect();

    let oneshot_state = |mode: FusionMode, frame: usize| estimates.get(&(frame, mode)).map(|o| &o.estimate.state);
    let tf_state = |frame: usize| eval.track_fusion.get(frame).map(|p| &p.state);
    let errors = |reference: &dyn Fn(usize) -> Option<TargetState>| -> MethodErrors {
        let score = |est: &dyn Fn(usize) -> Option<TargetState>| {
            let pairs: Vec<(TargetState, TargetState)> = evaluated_frames
                .iter()
                .filter_map(|&k| Some((est(k)?, reference(k)?)))
                .collect();
            rmse(pairs.iter().map(|(a, b)| (a, b)))
        };
        let mode_score = |mode: FusionMode| {
            modes
                .contains(&mode)
                .then(|| score(&|k| oneshot_state(mode, k).copied()))
                .flatten()
        };
        MethodErrors {
            bayes: mode_score(FusionMode::Bayes),
            ml: mode_score(FusionMode::Ml),
            track_fusion: score(&|k| tf_state(k).copied()),
            ekf: eval
                .global_tracks
                .iter()
                .map(|t| score(&|k| t.get(k).map(|p| p.state)))
                .collect(),
        }
    };
    let vs_truth = errors(&|k| eval.truth.get(k).copied());
    let mut vs_track_fusion = errors(&|k| tf_state(k).copied());
    vs_track_fusion.track_fusion = None;

    let chosen = match benchmark {
        Benchmark::Truth => &vs_truth,
        Benchmark::TrackFusion => &vs_track_fusion,
    };
    let count = |mode: FusionMode, pred: &dyn Fn(&OneShot) -> bool| {
        eval.oneshot
            .iter()
            .filter(|o| o.estimate.mode == mode && pred(o))
            .count()
    };
    let failed = |mode: FusionMode| eval.failed.iter().filter(|(_, m)| *m == mode).count();

    ExperimentReport {
        scenario: scenario.name.clone(),
        seed: scenario.rng_seed,
        num_frames: scenario.num_frames,
        calibration_trajectory: cfg.calibration_trajectory().kind(),
        evaluation_trajectory: scenario.trajectory.kind(),
        benchmark,
        modes: modes.clone(),
        calibration: summarize_calibration(calibration, &scenario.nodes),
        position_rmse_bayes: chosen.bayes.map(|r| r.position),
        velocity_rmse_bayes: chosen.bayes.map(|r| r.velocity),
        position_rmse_ml: chosen.ml.map(|r| r.position),
        velocity_rmse_ml: chosen.ml.map(|r| r.velocity),
        vs_truth: vs_truth.clone(),
        vs_track_fusion,
        fusion: FusionStats {
            fused_frames: eval.frames.iter().filter(|f| f.detections().next().is_some()).count(),
            nonconverged_bayes: count(FusionMode::Bayes, &|o| !o.estimate.converged),
            nonconverged_ml: count(FusionMode::Ml, &|o| !o.estimate.converged),
            failed_bayes: failed(FusionMode::Bayes),
            failed_ml: failed(FusionMode::Ml),
        },
        evaluated_frames,
        per_frame_output_path: ONESHOT_CSV.to_string(),
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub seed: u64,
    pub calibration: CalibrationStage,
    pub evaluation: EvaluationStage,
    pub report: ExperimentReport,
}

/// Runs the full pipeline in memory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentRun> {
    cfg.validate()?;
    let calibration = run_calibration_stage(cfg, opts)?;
    let scenario = evaluation_scenario(cfg, opts);
    let simulation = simulate(&scenario)?;
    let modes = opts.mode.unwrap_or(cfg.fusion.mode).modes();
    // consume the calibration through its on-disk record so a staged run
    // (calibrate, then fuse) reproduces this one bit for bit
    let results: Vec<CalibrationResult> = calibration.results.iter().map(|r| r.to_record().to_result()).collect();
    let evaluation = run_evaluation_stage(cfg, &scenario, simulation, &poses_from_results(&results), &modes)?;
    let report = build_report(cfg, opts, &results, &evaluation);
    Ok(ExperimentRun {
        seed: scenario.rng_seed,
        calibration,
        evaluation,
        report,
    })
}

/// `<out>/<scenario>/<seed>`.
pub fn run_dir(out: &Path, scenario: &str, seed: u64) -> PathBuf {
    out.join(scenario).join(seed.to_string())
}

fn node_file(dir: &str, stem: &str, node_index: usize, ext: &str) -> PathBuf {
    PathBuf::from(dir).join(format!("{stem}{}.{ext}", node_index + 1))
}

/// Writes the simulated truth and measurements under `tracks/`.
pub fn write_simulation(dir: &Path, sim: &Simulation) -> Result<()> {
    write_csv(&dir.join("tracks/truth.csv"), None, &truth_rows(&sim.truth))?;
    write_csv(
        &dir.join("tracks/measurements.csv"),
        None,
        &measurement_rows(&sim.frames),
    )
}

/// Writes calibration records and paired tracks under `calibration/`.
pub fn write_calibration(dir: &Path, stage: &CalibrationStage) -> Result<()> {
    for (k, (result, pairs)) in stage.results.iter().zip(&stage.paired).enumerate() {
        let node = k + 1;
        let record = dir.join(node_file("calibration", "node", node, "toml"));
        if let Some(parent) = record.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&record, result.to_record().to_toml_string()).map_err(|e| Error::io(&record, e))?;
        let rows: Vec<PairedRow> = pairs
            .frames
            .iter()
            .zip(pairs.track1.iter().zip(&pairs.track2))
            .map(|(&frame, (a, b))| PairedRow {
                frame,
                x1: a.re,
                y1: a.im,
                x2: b.re,
                y2: b.im,
            })
            .collect();
        write_csv(
            &dir.join(node_file("calibration", "paired_node", node, "csv")),
            None,
            &rows,
        )?;
    }
    Ok(())
}

/// Reads the calibration records of nodes `2..=num_nodes`.
pub fn read_calibration(dir: &Path, num_nodes: usize) -> Result<Vec<CalibrationResult>> {
    (1..num_nodes)
        .map(|node| {
            let path = dir.join(node_file("calibration", "node", node, "toml"));
            if !path.exists() {
                return Err(Error::MissingStage {
                    stage: "calibrate".into(),
                    path,
                });
            }
            Ok(CalibrationRecord::load(&path)?.to_result())
        })
        .collect()
}

/// Reads the simulation written by [`write_simulation`].
pub fn read_simulation(dir: &Path, num_nodes: usize) -> Result<Simulation> {
    let truth_path = dir.join("tracks/truth.csv");
    let meas_path = dir.join("tracks/measurements.csv");
    for path in [&truth_path, &meas_path] {
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: "simulate".into(),
                path: path.clone(),
            });
        }
    }
    let truth: Vec<TruthRow> = read_csv(&truth_path)?;
    let rows: Vec<MeasurementRow> = read_csv(&meas_path)?;
    Ok(Simulation {
        truth: truth.iter().map(TruthRow::state).collect(),
        frames: frames_from_rows(&rows, num_nodes)?,
    })
}

/// Writes tracks, one-shot estimates and the report.
pub fn write_evaluation(dir: &Path, eval: &EvaluationStage, report: &ExperimentReport) -> Result<()> {
    for (i, (local, global)) in eval.local_tracks.iter().zip(&eval.global_tracks).enumerate() {
        write_track(&dir.join(node_file("tracks", "node", i, "csv")), local)?;
        if i > 0 {
            write_track(&dir.join(format!("tracks/node{}_in_1.csv", i + 1)), global)?;
        }
    }
    write_track(&dir.join("tracks/track_fusion.csv"), &eval.track_fusion)?;
    let rows: Vec<FusionRow> = eval
        .oneshot
        .iter()
        .map(|o| FusionRow::new(o.frame, &o.estimate, o.covariance.as_ref()))
        .collect();
    write_csv(&dir.join(ONESHOT_CSV), None, &rows)?;
    let report_path = dir.join("report/report.json");
    if let Some(parent) = report_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))
}

/// Writes every artifact of a run under `dir`.
pub fn write_run(dir: &Path, run: &ExperimentRun) -> Result<()> {
    write_simulation(
        dir,
        &Simulation {
            truth: run.evaluation.truth.clone(),
            frames: run.evaluation.frames.clone(),
        },
    )?;
    write_calibration(dir, &run.calibration)?;
    write_evaluation(dir, &run.evaluation, &run.report)
}

/// Runs the evaluation stage from a simulation and calibration already on disk.
pub fn fuse_from_disk(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    dir: &Path,
) -> Result<(EvaluationStage, ExperimentReport)> {
    cfg.validate()?;
    let n = cfg.scenario.nodes.len();
    let results = read_calibration(dir, n)?;
    let simulation = read_simulation(dir, n)?;
    let scenario = evaluation_scenario(cfg, opts);
    let modes = opts.mode.unwrap_or(cfg.fusion.mode).modes();
    let eval = run_evaluation_stage(cfg, &scenario, simulation, &poses_from_results(&results), &modes)?;
    let report = build_report(cfg, opts, &results, &eval);
    write_evaluation(dir, &eval, &report)?;
    Ok((eval, report))
}

/// Mean and sample standard deviation of one report field across trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub seed: u64,
    pub error: String,
}

/// Aggregate of a Monte Carlo study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub scenario: String,
    pub base_seed: u64,
    pub trials: usize,
    pub succeeded: usize,
    pub failures: Vec<TrialFailure>,
    pub fields: BTreeMap<String, FieldStats>,
}

impl MonteCarloReport {
    pub fn mean(&self, field: &str) -> Option<f64> {
        self.fields.get(field).map(|s| s.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Flattens the numeric fields of a report into `name -> value`.
pub fn report_metrics(report: &ExperimentReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    let mut put = |k: String, v: Option<f64>| {
        if let Some(v) = v {
            m.insert(k, v);
        }
    };
    put("position_rmse_bayes".into(), report.position_rmse_bayes);
    put("velocity_rmse_bayes".into(), report.velocity_rmse_bayes);
    put("position_rmse_ml".into(), report.position_rmse_ml);
    put("velocity_rmse_ml".into(), report.velocity_rmse_ml);
    for c in &report.calibration {
        let p = format!("calibration.node{}", c.node);
        put(format!("{p}.position_error"), Some(c.position_error));
        put(format!("{p}.orientation_error_deg"), Some(c.orientation_error_deg));
        put(format!("{p}.rmse"), Some(c.record.rmse));
        put(format!("{p}.j_min"), Some(c.record.j_min));
    }
    for (name, errors) in [
        ("vs_truth", &report.vs_truth),
        ("vs_track_fusion", &report.vs_track_fusion),
    ] {
        for (method, r) in [
            ("bayes", errors.bayes),
            ("ml", errors.ml),
            ("track_fusion", errors.track_fusion),
        ] {
            put(format!("{name}.{method}.position"), r.map(|r| r.position));
            put(format!("{name}.{method}.velocity"), r.map(|r| r.velocity));
        }
        for (i, r) in errors.ekf.iter().enumerate() {
            put(format!("{name}.ekf{}.position", i + 1), r.map(|r| r.position));
            put(format!("{name}.ekf{}.velocity", i + 1), r.map(|r| r.velocity));
        }
    }
    m
}

/// Repeats [`run_experiment`] with seeds `base, base + 1, ...` on up to `jobs` threads.
pub fn run_monte_carlo(
    cfg: &ExperimentConfig,
    trials: usize,
    jobs: Option<usize>,
    opts: &RunOptions,
) -> Result<MonteCarloReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    cfg.validate()?;
    let base = opts.seed_for(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let outcomes: Vec<(u64, Result<ExperimentReport>)> = pool.install(|| {
        (0..trials as u64)
            .into_par_iter()
            .map(|t| {
                let seed = base.wrapping_add(t);
                let trial_opts = RunOptions {
                    seed: Some(seed),
                    ..opts.clone()
                };
                (seed, run_experiment(cfg, &trial_opts).map(|r| r.report))
            })
            .collect()
    });

    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut succeeded = 0;
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(report) => {
                succeeded += 1;
                for (k, v) in report_metrics(&report) {
                    samples.entry(k).or_default().push(v);
                }
            }
            Err(e) => failures.push(TrialFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    let fields = samples
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (
                k,
                FieldStats {
                    mean,
                    std: var.sqrt(),
                    count: v.len(),
                },
            )
        })
        .collect();
    Ok(MonteCarloReport {
        scenario: cfg.scenario.name.clone(),
        base_seed: base,
        trials,
        succeeded,
        failures,
        fields,
    })
}

/// Column layout of the per-quantity plot files.
pub const PLOT_COLUMNS: [&str; 7] = [
    "frame",
    "truth",
    "ekf1",
    "ekf2_in_1",
    "track_fusion",
    "oneshot_bayes",
    "oneshot_ml",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub frame: usize,
    pub truth: Option<f64>,
    pub ekf1: Option<f64>,
    pub ekf2_in_1: Option<f64>,
    pub track_fusion: Option<f64>,
    pub oneshot_bayes: Option<f64>,
    pub oneshot_ml: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayRow {
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2_in_1: f64,
    pub y2_in_1: f64,
}

fn require(dir: &Path, rel: &str, stage: &str) -> Result<PathBuf> {
    let path = dir.join(rel);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingStage {
            stage: stage.into(),
            path,
        })
    }
}

/// Writes `x.csv`, `y.csv`, `vx.csv`, `vy.csv` and `overlay.csv` from a run directory.
pub fn emit_plot_data(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let truth: Vec<TruthRow> = read_csv(&require(run_dir, "tracks/truth.csv", "simulate")?)?;
    let ekf1: Vec<TrackRow> = read_csv(&require(run_dir, "tracks/node1.csv", "fuse")?)?;
    let ekf2: Vec<TrackRow> = read_csv(&require(run_dir, "tracks/node2_in_1.csv", "fuse")?)?;
    let tf: Vec<TrackRow> = read_csv(&require(run_dir, "tracks/track_fusion.csv", "fuse")?)?;
    let oneshot: Vec<FusionRow> = read_csv(&require(run_dir, ONESHOT_CSV, "fuse")?)?;
    let record = CalibrationRecord::load(&require(run_dir, "calibration/node2.toml", "calibrate")?)?.to_result();
    let paired: Vec<PairedRow> = read_csv(&require(run_dir, "calibration/paired_node2.csv", "calibrate")?)?;

    let by_frame =
        |rows: &[TrackRow]| -> BTreeMap<usize, TargetState> { rows.iter().map(|r| (r.frame, r.state())).collect() };
    let (ekf1, ekf2, tf) = (by_frame(&ekf1), by_frame(&ekf2), by_frame(&tf));
    let mode_rows = |mode: FusionMode| -> BTreeMap<usize, TargetState> {
        oneshot
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.frame, r.state()))
            .collect()
    };
    let (bayes, ml) = (mode_rows(FusionMode::Bayes), mode_rows(FusionMode::Ml));

    type Component = fn(&TargetState) -> f64;
    let quantities: [(&str, Component); 4] = [
        ("x.csv", |s| s.x),
        ("y.csv", |s| s.y),
        ("vx.csv", |s| s.vx),
        ("vy.csv", |s| s.vy),
    ];
    let mut written = Vec::new();
    for (file, get) in quantities {
        let rows: Vec<PlotRow> = truth
            .iter()
            .map(|t| {
                let k = t.frame;
                PlotRow {
                    frame: k,
                    truth: Some(get(&t.state())),
                    ekf1: ekf1.get(&k).map(get),
                    ekf2_in_1: ekf2.get(&k).map(get),
                    track_fusion: tf.get(&k).map(get),
                    oneshot_bayes: bayes.get(&k).map(get),
                    oneshot_ml: ml.get(&k).map(get),
                }
            })
            .collect();
        let path = out_dir.join(file);
        write_csv(&path, None, &rows)?;
        written.push(path);
    }

    let moved = apply_calibration(
        &record,
        &paired.iter().map(|r| Complex::new(r.x2, r.y2)).collect::<Vec<_>>(),
    );
    let overlay: Vec<OverlayRow> = paired
        .iter()
        .zip(moved)
        .map(|(r, z)| OverlayRow {
            frame: r.frame,
            x1: r.x1,
            y1: r.y1,
            x2_in_1: z.re,
            y2_in_1: z.im,
        })
        .collect();
    let path = out_dir.join("overlay.csv");
    write_csv(&path, None, &overlay)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: BuiltinScenario, kind: TrajectoryKind) -> (ExperimentConfig, RunOptions) {
        let cfg = ExperimentConfig::builtin(name, kind);
        let opts = RunOptions {
            seed: Some(5),
            num_frames: Some(120),
            ..RunOptions::default()
        };
        (cfg, opts)
    }

    #[test]
    fn builtin_companion_matches_builtin_trajectories() {
        for kind in [TrajectoryKind::Straight, TrajectoryKind::Random] {
            assert_eq!(
                companion_trajectory(&builtin_trajectory(kind)),
                builtin_trajectory(kind.other())
            );
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::builtin(BuiltinScenario::A, TrajectoryKind::Random);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_keys_are_all_listed() {
        let text = r#"
            name = "x"
            [trajectory]
            kind = "straight"
            start = [0.0, 2.0]
            [noise]
            sigma_r = 0.1
        "#;
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::MissingKeys(keys)) => assert_eq!(
                keys,
                [
                    "nodes",
                    "trajectory.speed",
                    "trajectory.heading_deg",
                    "noise.sigma_omega",
                    "noise.sigma_v"
                ]
            ),
            other => panic!("expected missing keys, got {other:?}"),
        }
    }

    #[test]
    fn unknown_section_key_is_rejected() {
        let mut text = ExperimentConfig::builtin(BuiltinScenario::B, TrajectoryKind::Random)
            .to_toml_string()
            .unwrap();
        text.push_str("\n[extra]\nfoo = 1\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn same_trajectory_kind_needs_override() {
        let mut cfg = ExperimentConfig::builtin(BuiltinScenario::B, TrajectoryKind::Random);
        cfg.calibration.trajectory = Some(builtin_trajectory(TrajectoryKind::Random));
        assert!(cfg.validate().is_err());
        cfg.calibration.allow_same_trajectory = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn calibration_uses_a_different_seed() {
        assert_ne!(calibration_seed(0), 0);
        assert_ne!(calibration_seed(1), calibration_seed(2));
    }

    #[test]
    fn run_is_deterministic_and_consistent() {
        let (cfg, opts) = small(BuiltinScenario::B, TrajectoryKind::Random);
        let a = run_experiment(&cfg, &opts).unwrap();
        let b = run_experiment(&cfg, &opts).unwrap();
        assert_eq!(a.report, b.report);
        let r = &a.report;
        assert_eq!(r.modes, vec![FusionMode::Bayes, FusionMode::Ml]);
        assert_eq!(r.calibration_trajectory, TrajectoryKind::Straight);
        assert!(!r.evaluated_frames.is_empty());
        assert!(r.evaluated_frames.iter().all(|&k| k >= 20));
        assert_eq!(r.position_rmse_bayes, r.vs_truth.bayes.map(|x| x.position));
        assert!(r.calibration[0].position_error < 2.0, "{:?}", r.calibration);
    }

    #[test]
    fn trackfusion_benchmark_switches_fields() {
        let (cfg, mut opts) = small(BuiltinScenario::B, TrajectoryKind::Random);
        opts.benchmark = Some(Benchmark::TrackFusion);
        opts.mode = Some(ModeSelection::Bayes);
        let r = run_experiment(&cfg, &opts).unwrap().report;
        assert_eq!(r.position_rmse_bayes, r.vs_track_fusion.bayes.map(|x| x.position));
        assert!(r.position_rmse_ml.is_none());
    }

    #[test]
    fn single_trial_monte_carlo_equals_run() {
        let (cfg, opts) = small(BuiltinScenario::C, TrajectoryKind::Straight);
        let run = run_experiment(&cfg, &opts).unwrap().report;
        let mc = run_monte_carlo(&cfg, 1, Some(1), &opts).unwrap();
        assert_eq!(mc.succeeded, 1);
        for (k, v) in report_metrics(&run) {
            let s = mc.fields[&k];
            assert_eq!(s.mean, v, "{k}");
            assert_eq!(s.std, 0.0);
        }
    }

    #[test]
    fn disk_stages_reproduce_the_in_memory_run() {
        let (cfg, opts) = small(BuiltinScenario::A, TrajectoryKind::Random);
        let run = run_experiment(&cfg, &opts).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = run_dir(tmp.path(), &cfg.scenario.name, run.seed);
        write_simulation(&dir, &simulate(&evaluation_scenario(&cfg, &opts)).unwrap()).unwrap();
        assert!(matches!(
            fuse_from_disk(&cfg, &opts, &dir),
            Err(Error::MissingStage { .. })
        ));
        write_calibration(&dir, &run_calibration_stage(&cfg, &opts).unwrap()).unwrap();
        let (_, report) = fuse_from_disk(&cfg, &opts, &dir).unwrap();
        assert_eq!(report, run.report);
    }

    #[test]
    fn plot_data_needs_every_stage() {
        let (cfg, opts) = small(BuiltinScenario::B, TrajectoryKind::Straight);
        let run = run_experiment(&cfg, &opts).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        write_simulation(&dir, &run.calibration.simulation).unwrap();
        match emit_plot_data(&dir, &tmp.path().join("plots")) {
            Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "fuse"),
            other => panic!("expected a missing stage, got {other:?}"),
        }
        write_run(&dir, &run).unwrap();
        let files = emit_plot_data(&dir, &tmp.path().join("plots")).unwrap();
        assert_eq!(files.len(), 5);
        let header = std::fs::read_to_string(&files[0]).unwrap();
        assert!(header.starts_with(&(PLOT_COLUMNS.join(",") + "\n")));
    }
}
