//! C ABI over the radnet toolkit.
//!
//! Every function returns a [`RadnetStatus`]; on failure a message is kept
//! per thread and can be read with [`radnet_last_error_message`]. Handles
//! are opaque and must be released with their matching `_free` function.
//! Panics never cross the boundary; they surface as `RADNET_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::Complex;
use radnet::calibration::{apply_calibration, calibrate_pair, CalibrationResult};
use radnet::experiment::{run_experiment, write_run, ExperimentConfig, ExperimentRun, RunOptions};
use radnet::fusion::{solve, FusionMode, FusionObservation, ObservationEntry, PriorCenter, PriorConfig};
use radnet::geometry::{measure, Detection, Pose2D, TargetState};
use radnet::scene::{BuiltinScenario, NoiseConfig, TrajectoryKind};
use radnet::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Degenerate = 4,
    Numeric = 5,
    Domain = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

pub const RADNET_MODE_BAYES: u32 = 0;
pub const RADNET_MODE_ML: u32 = 1;

pub const RADNET_SCENARIO_A: u32 = 0;
pub const RADNET_SCENARIO_B: u32 = 1;
pub const RADNET_SCENARIO_C: u32 = 2;

pub const RADNET_TRAJECTORY_RANDOM: u32 = 0;
pub const RADNET_TRAJECTORY_STRAIGHT: u32 = 1;

/// Node pose in the global frame; `phi` in radians.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadnetPose {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadnetState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

/// Range (m), spatial frequency (rad) and radial velocity (m/s).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadnetDetection {
    pub range: f64,
    pub spatial_freq: f64,
    pub radial_vel: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadnetNoise {
    pub sigma_r: f64,
    pub sigma_omega: f64,
    pub sigma_v: f64,
}

/// Gaussian prior; the position mean is the closed-form initial estimate.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadnetPrior {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_vx: f64,
    pub sigma_vy: f64,
}

/// Pose of node 2 in node 1's frame plus the matching cost.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadnetCalibration {
    pub px: f64,
    pub py: f64,
    pub phi: f64,
    pub j_min: f64,
    pub rmse: f64,
    pub k: usize,
}

/// One-shot fusion output. `covariance` is row-major and all NaN when
/// the solver could not produce one.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadnetEstimate {
    pub state: RadnetState,
    pub covariance: [f64; 16],
    pub converged: bool,
    pub iterations: usize,
    pub conditioning: f64,
}

/// Headline numbers of an experiment run; NaN where a mode was not run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadnetSummary {
    pub seed: u64,
    pub calibration_rmse: f64,
    pub position_rmse_bayes: f64,
    pub velocity_rmse_bayes: f64,
    pub position_rmse_ml: f64,
    pub velocity_rmse_ml: f64,
    pub evaluated_frames: usize,
}

/// Accumulates one frame's detections for a fusion solve.
pub struct RadnetFusion {
    noise: NoiseConfig,
    prior: PriorConfig,
    entries: Vec<ObservationEntry>,
}

/// A validated experiment configuration.
pub struct RadnetConfig {
    config: ExperimentConfig,
}

/// Output of one experiment run.
pub struct RadnetRun {
    run: ExperimentRun,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(RadnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::MissingKeys(_) => RadnetStatus::Config,
            Error::Degenerate(_) => RadnetStatus::Degenerate,
            Error::Numeric(_) => RadnetStatus::Numeric,
            Error::Domain(_) => RadnetStatus::Domain,
            Error::LengthMismatch { .. } | Error::EmptyTrack(_) => RadnetStatus::InvalidArgument,
            _ => RadnetStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RadnetStatus::InvalidArgument, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RadnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            RadnetStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            RadnetStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(RadnetStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(RadnetStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    deref(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies `s` with a terminating NUL into `buf`. `needed` (optional)
/// receives the full size including the NUL.
unsafe fn copy_out(s: &CStr, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Failure> {
    let bytes = s.to_bytes_with_nul();
    if let Some(n) = needed.as_mut() {
        *n = bytes.len();
    }
    if len < bytes.len() {
        return Err(Failure(
            RadnetStatus::BufferTooSmall,
            format!("buffer holds {len} bytes, {} needed", bytes.len()),
        ));
    }
    deref_mut(buf, "buf")?;
    std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
    Ok(())
}

fn pose(p: &RadnetPose) -> Pose2D {
    Pose2D::new(p.x, p.y, p.phi)
}

fn state(s: &RadnetState) -> TargetState {
    TargetState::new(s.x, s.y, s.vx, s.vy)
}

fn c_state(s: &TargetState) -> RadnetState {
    RadnetState {
        x: s.x,
        y: s.y,
        vx: s.vx,
        vy: s.vy,
    }
}

fn result_from(c: &RadnetCalibration) -> CalibrationResult {
    CalibrationResult {
        p21: Complex::new(c.px, c.py),
        phi21: c.phi,
        j_min: c.j_min,
        rmse: c.rmse,
        k: c.k,
    }
}

fn points(xy: &[f64]) -> Vec<Complex<f64>> {
    xy.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn radnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf`; empty after
/// a successful call.
///
/// # Safety
/// `buf` must be writable for `len` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn radnet_last_error_message(buf: *mut c_char, len: usize, needed: *mut usize) -> RadnetStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match catch_unwind(AssertUnwindSafe(|| copy_out(&msg, buf, len, needed))) {
        Ok(Ok(())) => RadnetStatus::Ok,
        Ok(Err(Failure(status, _))) => status,
        Err(_) => RadnetStatus::Panic,
    }
}

/// Ideal detection of `target` by a node at `node`.
///
/// # Safety
/// All pointers must be valid for their types.
#[no_mangle]
pub unsafe extern "C" fn radnet_measure(
    node: *const RadnetPose,
    target: *const RadnetState,
    out: *mut RadnetDetection,
) -> RadnetStatus {
    guard(|| {
        let d = measure(&pose(deref(node, "node")?), &state(deref(target, "target")?))?;
        *deref_mut(out, "out")? = RadnetDetection {
            range: d.range,
            spatial_freq: d.spatial_freq,
            radial_vel: d.radial_vel,
        };
        Ok(())
    })
}

/// Closed-form relative pose of node 2 from two time-aligned tracks of
/// `k` points each, given as interleaved `x, y` pairs in each node's frame.
///
/// # Safety
/// `track1` and `track2` must each hold `2 * k` doubles.
#[no_mangle]
pub unsafe extern "C" fn radnet_calibrate_pair(
    track1: *const f64,
    track2: *const f64,
    k: usize,
    out: *mut RadnetCalibration,
) -> RadnetStatus {
    guard(|| {
        let n = k.checked_mul(2).ok_or_else(|| invalid("k overflows"))?;
        let t1 = points(slice(track1, n, "track1")?);
        let t2 = points(slice(track2, n, "track2")?);
        let r = calibrate_pair(&t1, &t2)?;
        *deref_mut(out, "out")? = RadnetCalibration {
            px: r.p21.re,
            py: r.p21.im,
            phi: r.phi21,
            j_min: r.j_min,
            rmse: r.rmse,
            k: r.k,
        };
        Ok(())
    })
}

/// Maps `k` node-2 points (interleaved `x, y`) into node 1's frame.
/// `out` may alias `track2`.
///
/// # Safety
/// `track2` and `out` must each hold `2 * k` doubles.
#[no_mangle]
pub unsafe extern "C" fn radnet_apply_calibration(
    calibration: *const RadnetCalibration,
    track2: *const f64,
    k: usize,
    out: *mut f64,
) -> RadnetStatus {
    guard(|| {
        let n = k.checked_mul(2).ok_or_else(|| invalid("k overflows"))?;
        let cal = result_from(deref(calibration, "calibration")?);
        let mapped = apply_calibration(&cal, &points(slice(track2, n, "track2")?));
        if n > 0 {
            deref_mut(out, "out")?;
            let out = std::slice::from_raw_parts_mut(out, n);
            for (dst, z) in out.chunks_exact_mut(2).zip(&mapped) {
                dst[0] = z.re;
                dst[1] = z.im;
            }
        }
        Ok(())
    })
}

/// New fusion accumulator. `prior` may be null for the default prior.
///
/// # Safety
/// `noise` must be valid; `prior` null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn radnet_fusion_new(
    noise: *const RadnetNoise,
    prior: *const RadnetPrior,
    out: *mut *mut RadnetFusion,
) -> RadnetStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let n = deref(noise, "noise")?;
        let noise = NoiseConfig {
            sigma_r: n.sigma_r,
            sigma_omega: n.sigma_omega,
            sigma_v: n.sigma_v,
        };
        noise.validate()?;
        let prior = match prior.as_ref() {
            None => PriorConfig::default(),
            Some(p) => PriorConfig {
                sigma_x: p.sigma_x,
                sigma_y: p.sigma_y,
                sigma_vx: p.sigma_vx,
                sigma_vy: p.sigma_vy,
                position_prior_center: PriorCenter::InitialEstimate,
            },
        };
        prior.validate()?;
        *out = Box::into_raw(Box::new(RadnetFusion {
            noise,
            prior,
            entries: Vec::new(),
        }));
        Ok(())
    })
}

/// Adds one node's detection to the current frame.
///
/// # Safety
/// All pointers must be valid; `fusion` must come from `radnet_fusion_new`.
#[no_mangle]
pub unsafe extern "C" fn radnet_fusion_add(
    fusion: *mut RadnetFusion,
    node: *const RadnetPose,
    detection: *const RadnetDetection,
) -> RadnetStatus {
    guard(|| {
        let f = deref_mut(fusion, "fusion")?;
        let d = deref(detection, "detection")?;
        f.entries.push(ObservationEntry {
            node_pose: pose(deref(node, "node")?),
            detection: Detection::new(d.range, d.spatial_freq, d.radial_vel),
        });
        Ok(())
    })
}

/// Drops the accumulated detections.
///
/// # Safety
/// `fusion` must come from `radnet_fusion_new`.
#[no_mangle]
pub unsafe extern "C" fn radnet_fusion_clear(fusion: *mut RadnetFusion) -> RadnetStatus {
    guard(|| {
        deref_mut(fusion, "fusion")?.entries.clear();
        Ok(())
    })
}

/// Solves the accumulated frame in `mode` (`RADNET_MODE_*`). The
/// detections are kept; call `radnet_fusion_clear` before the next frame.
///
/// # Safety
/// `fusion` must come from `radnet_fusion_new`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn radnet_fusion_solve(
    fusion: *const RadnetFusion,
    mode: u32,
    out: *mut RadnetEstimate,
) -> RadnetStatus {
    guard(|| {
        let f = deref(fusion, "fusion")?;
        let mode = match mode {
            RADNET_MODE_BAYES => FusionMode::Bayes,
            RADNET_MODE_ML => FusionMode::Ml,
            other => return Err(invalid(format!("unknown fusion mode {other}"))),
        };
        let obs = FusionObservation::new(f.entries.clone())?;
        let est = solve(&obs, &f.noise, mode, Some(&f.prior))?;
        let mut covariance = [f64::NAN; 16];
        if let Some(c) = est.covariance {
            for (i, v) in covariance.iter_mut().enumerate() {
                *v = c[(i / 4, i % 4)];
            }
        }
        *deref_mut(out, "out")? = RadnetEstimate {
            state: c_state(&est.state),
            covariance,
            converged: est.converged,
            iterations: est.iterations,
            conditioning: est.conditioning,
        };
        Ok(())
    })
}

/// # Safety
/// `fusion` must be null or come from `radnet_fusion_new`, and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn radnet_fusion_free(fusion: *mut RadnetFusion) {
    if !fusion.is_null() {
        drop(Box::from_raw(fusion));
    }
}

/// Built-in geometry (`RADNET_SCENARIO_*`) evaluated on `trajectory`
/// (`RADNET_TRAJECTORY_*`).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn radnet_config_builtin(
    scenario: u32,
    trajectory: u32,
    out: *mut *mut RadnetConfig,
) -> RadnetStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let scenario = match scenario {
            RADNET_SCENARIO_A => BuiltinScenario::A,
            RADNET_SCENARIO_B => BuiltinScenario::B,
            RADNET_SCENARIO_C => BuiltinScenario::C,
            other => return Err(invalid(format!("unknown scenario {other}"))),
        };
        let trajectory = match trajectory {
            RADNET_TRAJECTORY_RANDOM => TrajectoryKind::Random,
            RADNET_TRAJECTORY_STRAIGHT => TrajectoryKind::Straight,
            other => return Err(invalid(format!("unknown trajectory {other}"))),
        };
        *out = Box::into_raw(Box::new(RadnetConfig {
            config: ExperimentConfig::builtin(scenario, trajectory),
        }));
        Ok(())
    })
}

/// Parses and validates a TOML experiment configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn radnet_config_from_toml(toml: *const c_char, out: *mut *mut RadnetConfig) -> RadnetStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        deref(toml, "toml")?;
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|_| invalid("config text is not UTF-8"))?;
        let config = ExperimentConfig::from_toml_str(text)?;
        config.validate()?;
        *out = Box::into_raw(Box::new(RadnetConfig { config }));
        Ok(())
    })
}

/// # Safety
/// `config` must be null or come from a `radnet_config_*` constructor, and
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn radnet_config_free(config: *mut RadnetConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the full pipeline. `use_seed == false` keeps the configured seed;
/// `num_frames == 0` keeps the configured frame count.
///
/// # Safety
/// `config` must come from a `radnet_config_*` constructor; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn radnet_run(
    config: *const RadnetConfig,
    use_seed: bool,
    seed: u64,
    num_frames: usize,
    out: *mut *mut RadnetRun,
) -> RadnetStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let cfg = &deref(config, "config")?.config;
        let opts = RunOptions {
            seed: use_seed.then_some(seed),
            num_frames: (num_frames > 0).then_some(num_frames),
            ..RunOptions::default()
        };
        let run = run_experiment(cfg, &opts)?;
        let json = CString::new(run.report.to_json()?).map_err(|_| invalid("report contains NUL"))?;
        *out = Box::into_raw(Box::new(RadnetRun { run, json }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from `radnet_run`; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn radnet_run_summary(run: *const RadnetRun, out: *mut RadnetSummary) -> RadnetStatus {
    guard(|| {
        let r = &deref(run, "run")?.run.report;
        *deref_mut(out, "out")? = RadnetSummary {
            seed: r.seed,
            calibration_rmse: r.calibration.first().map_or(f64::NAN, |c| c.record.rmse),
            position_rmse_bayes: r.position_rmse_bayes.unwrap_or(f64::NAN),
            velocity_rmse_bayes: r.velocity_rmse_bayes.unwrap_or(f64::NAN),
            position_rmse_ml: r.position_rmse_ml.unwrap_or(f64::NAN),
            velocity_rmse_ml: r.velocity_rmse_ml.unwrap_or(f64::NAN),
            evaluated_frames: r.evaluated_frames.len(),
        };
        Ok(())
    })
}

/// Copies the JSON report into `buf`. Pass `len == 0` to query the size
/// through `needed`.
///
/// # Safety
/// `run` must come from `radnet_run`; `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn radnet_run_report_json(
    run: *const RadnetRun,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> RadnetStatus {
    guard(|| copy_out(&deref(run, "run")?.json, buf, len, needed))
}

/// Writes every CSV, record and the report under directory `dir`.
///
/// # Safety
/// `run` must come from `radnet_run`; `dir` a NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn radnet_run_write(run: *const RadnetRun, dir: *const c_char) -> RadnetStatus {
    guard(|| {
        let run = &deref(run, "run")?.run;
        deref(dir, "dir")?;
        let dir = CStr::from_ptr(dir).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        write_run(Path::new(dir), run)?;
        Ok(())
    })
}

/// # Safety
/// `run` must be null or come from `radnet_run`, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn radnet_run_free(run: *mut RadnetRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
