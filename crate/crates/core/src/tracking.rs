//! Per-node extended Kalman filter and covariance-weighted track fusion.
//!
//! Each node runs a constant-velocity EKF over `(x, y, vx, vy)` in its own
//! local frame, using range, spatial frequency and radial velocity as the
//! measurement vector. The resulting local tracks feed self-calibration.

use nalgebra::{Complex, Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    detection_to_local_cartesian, measure, measure_with_jacobian, rotation, Detection, Pose2D, TargetState,
};
use crate::scene::{MeasurementFrame, NoiseConfig, MAX_TARGET_SPEED};

/// Detections closer than this are outside the linearization's validity.
pub const MIN_UPDATE_RANGE: f64 = 0.5;

const PSD_TOLERANCE: f64 = -1e-10;

/// Filter tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfConfig {
    /// Standard deviation of the white acceleration driving the motion model, m/s^2.
    pub process_noise_accel: f64,
    /// Initial position variance, m^2.
    pub init_pos_var: f64,
    /// Initial velocity variance, (m/s)^2.
    pub init_vel_var: f64,
    /// Optional Mahalanobis gate on the innovation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_threshold: Option<f64>,
    /// Relinearizations per update; 1 is the plain EKF.
    pub iterations: usize,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            process_noise_accel: 1.0,
            init_pos_var: 4.0,
            init_vel_var: MAX_TARGET_SPEED * MAX_TARGET_SPEED,
            gate_threshold: None,
            iterations: 5,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.process_noise_accel) || !(self.init_pos_var > 0.0) || !(self.init_vel_var > 0.0) {
            return Err(Error::Config(format!("invalid EKF configuration {self:?}")));
        }
        if let Some(g) = self.gate_threshold {
            if !(g > 0.0) {
                return Err(Error::Config(format!("gate_threshold must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// One filtered estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub frame_index: usize,
    pub state: TargetState,
    pub covariance: Matrix4<f64>,
    /// Whether a detection was incorporated at this frame.
    pub updated: bool,
}

impl TrackPoint {
    /// Position as a complex number `x + j y`.
    pub fn position(&self) -> Complex<f64> {
        Complex::new(self.state.x, self.state.y)
    }
}

/// A time-indexed sequence of filtered states from one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    /// Node that produced the track, zero-based.
    pub node: usize,
    /// Pose of the frame the states are expressed in.
    ///
    /// Tracks leave the filter in their node's local frame; `frame_pose` is
    /// the node's pose as far as the producer knew it, or the identity once
    /// the track has been mapped into the reference frame.
    pub frame_pose: Pose2D,
    pub local: bool,
    pub points: Vec<TrackPoint>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, frame_index: usize) -> Option<&TrackPoint> {
        self.points
            .binary_search_by_key(&frame_index, |p| p.frame_index)
            .ok()
            .map(|i| &self.points[i])
    }

    pub fn positions(&self) -> Vec<Complex<f64>> {
        self.points.iter().map(TrackPoint::position).collect()
    }

    /// Applies the rigid transform `pose` (rotation then translation) to every state.
    pub fn transformed(&self, pose: &Pose2D) -> Track {
        let rot = rotation(pose.phi());
        let mut block = Matrix4::zeros();
        block.fixed_view_mut::<2, 2>(0, 0).copy_from(&rot);
        block.fixed_view_mut::<2, 2>(2, 2).copy_from(&rot);
        Track {
            node: self.node,
            frame_pose: Pose2D::origin(),
            local: false,
            points: self
                .points
                .iter()
                .map(|p| TrackPoint {
                    frame_index: p.frame_index,
                    state: p.state.to_global(pose),
                    covariance: symmetrize(&(block * p.covariance * block.transpose())),
                    updated: p.updated,
                })
                .collect(),
        }
    }
}

fn symmetrize<const D: usize>(m: &nalgebra::SMatrix<f64, D, D>) -> nalgebra::SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &Matrix4<f64>) -> f64 {
    m.symmetric_eigen().eigenvalues.min()
}

fn check_psd(cov: &Matrix4<f64>, what: &str) -> Result<()> {
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("{what} covariance is not finite")));
    }
    let scale = cov.abs().max().max(1.0);
    if (cov - cov.transpose()).abs().max() > 1e-9 * scale || min_eigenvalue(cov) < PSD_TOLERANCE * scale {
        return Err(Error::Numeric(format!("{what} covariance is not symmetric PSD")));
    }
    Ok(())
}

/// Constant-velocity transition matrix.
pub fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

/// Continuous white-acceleration process noise integrated over `dt`, with
/// spectral density `accel^2`. Full rank per axis, unlike the piecewise
/// constant model, so position and velocity innovations never become
/// perfectly correlated.
pub fn process_noise(dt: f64, accel: f64) -> Matrix4<f64> {
    let q = accel * accel;
    let (a, b, c) = (dt.powi(3) / 3.0 * q, dt * dt / 2.0 * q, dt * q);
    #[rustfmt::skip]
    let m = Matrix4::new(
        a,   0.0, b,   0.0,
        0.0, a,   0.0, b,
        b,   0.0, c,   0.0,
        0.0, b,   0.0, c,
    );
    m
}

/// Propagates a state and covariance `dt` seconds under constant velocity.
pub fn ekf_predict(
    state: &TargetState,
    cov: &Matrix4<f64>,
    dt: f64,
    cfg: &EkfConfig,
) -> Result<(TargetState, Matrix4<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::Numeric(format!("prediction step must be positive, got {dt}")));
    }
    check_psd(cov, "prior")?;
    let f = transition(dt);
    let x = f * state.to_vector();
    let p = f * cov * f.transpose() + process_noise(dt, cfg.process_noise_accel);
    Ok((TargetState::from_vector(&x), symmetrize(&p)))
}

/// Outcome of a measurement update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub state: TargetState,
    pub covariance: Matrix4<f64>,
    /// Measurement minus prediction, `(range, spatial_freq, radial_vel)`.
    pub innovation: Vector3<f64>,
    /// Normalized innovation squared.
    pub nis: f64,
    /// False when the measurement was gated out or out of range; state and covariance are then the prior.
    pub accepted: bool,
}

pub fn measurement_covariance(noise: &NoiseConfig) -> Matrix3<f64> {
    let var = |s: f64| s.max(MIN_FILTER_SIGMA).powi(2);
    Matrix3::from_diagonal(&Vector3::new(
        var(noise.sigma_r),
        var(noise.sigma_omega),
        var(noise.sigma_v),
    ))
}

/// Smallest measurement standard deviation the filter will assume. Below
/// this the innovation covariance is too ill-conditioned for f64 gains.
pub const MIN_FILTER_SIGMA: f64 = 1e-12;

/// EKF measurement update with `h = (range, spatial_freq, radial_vel)`.
///
/// Single linearization at the predicted state.
pub fn ekf_update(
    state: &TargetState,
    cov: &Matrix4<f64>,
    detection: &Detection,
    radar: &Pose2D,
    noise: &NoiseConfig,
    gate: Option<f64>,
) -> Result<UpdateOutcome> {
    iterated_ekf_update(state, cov, detection, radar, noise, gate, 1)
}

/// Iterated EKF update: Gauss-Newton relinearization of the measurement
/// function around the running posterior mean, at most `iterations` times.
///
/// With `iterations == 1` this is the standard EKF update. Gating and the
/// reported innovation always use the linearization at the prior.
pub fn iterated_ekf_update(
    state: &TargetState,
    cov: &Matrix4<f64>,
    detection: &Detection,
    radar: &Pose2D,
    noise: &NoiseConfig,
    gate: Option<f64>,
    iterations: usize,
) -> Result<UpdateOutcome> {
    if !detection.is_finite() {
        return Err(Error::Domain("detection has non-finite fields".into()));
    }
    let z = Vector3::new(detection.range, detection.spatial_freq, detection.radial_vel);
    let predicted = measure(radar, state)?;
    let innovation = z - Vector3::new(predicted.range, predicted.spatial_freq, predicted.radial_vel);
    let rejected = UpdateOutcome {
        state: *state,
        covariance: *cov,
        innovation,
        nis: f64::NAN,
        accepted: false,
    };
    if predicted.range < MIN_UPDATE_RANGE || detection.range < MIN_UPDATE_RANGE {
        return Ok(rejected);
    }

    let r = measurement_covariance(noise).diagonal();
    let (x, p, nis) = map_update(state, cov, &z, radar, &r, iterations.max(1))?;
    if let Some(g) = gate {
        if nis.sqrt() > g {
            return Ok(UpdateOutcome { nis, ..rejected });
        }
    }

    Ok(UpdateOutcome {
        state: TargetState::from_vector(&x),
        covariance: project_psd(&p),
        innovation,
        nis,
        accepted: true,
    })
}

/// Iterated MAP update. The first Gauss-Newton step from the prior is the
/// EKF update; relinearized steps are halved until the MAP objective
/// drops, which keeps the iteration from running off along directions a
/// single detection does not observe. Returns mean, covariance and the
/// NIS at the prior linearization.
fn map_update(
    state: &TargetState,
    cov: &Matrix4<f64>,
    z: &Vector3<f64>,
    radar: &Pose2D,
    r: &Vector3<f64>,
    iterations: usize,
) -> Result<(Vector4<f64>, Matrix4<f64>, f64)> {
    let prior = state.to_vector();
    let r_mat = Matrix3::from_diagonal(r);
    let gain_for = |h: &Matrix3x4<f64>| -> Result<(Matrix4x3<f64>, Matrix3<f64>)> {
        let s = symmetrize(&(h * cov * h.transpose() + r_mat));
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular innovation covariance".into()))?;
        Ok((cov * h.transpose() * s_inv, s_inv))
    };
    let eval = |x: &Vector4<f64>| -> Option<(Vector3<f64>, Matrix3x4<f64>)> {
        let (m, h) = measure_with_jacobian(radar, &TargetState::from_vector(x)).ok()?;
        Some((z - Vector3::new(m.range, m.spatial_freq, m.radial_vel), h))
    };

    let (e0, h0) = eval(&prior).ok_or_else(|| Error::Numeric("prior outside the measurement domain".into()))?;
    let (mut gain, s_inv) = gain_for(&h0)?;
    let nis = e0.dot(&(s_inv * e0));
    let mut h = h0;
    let mut x = prior + gain * e0;
    if iterations > 1 {
        let p_inv = floored_inverse(cov).unwrap_or_else(Matrix4::zeros);
        let cost = |x: &Vector4<f64>| {
            eval(x).map_or(f64::INFINITY, |(e, _)| {
                let d = x - prior;
                e.component_div(r).dot(&e) + d.dot(&(p_inv * d))
            })
        };
        let mut best = cost(&x);
        for _ in 1..iterations {
            let Some((e, hi)) = eval(&x) else { break };
            let (gi, _) = gain_for(&hi)?;
            let step = prior + gi * (e + hi * (x - prior)) - x;
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= 1.0 / 64.0 {
                let trial = x + step * alpha;
                let c = cost(&trial);
                if c < best {
                    accepted = Some((trial, c));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((next, c)) = accepted else { break };
            let moved = (next - x).norm();
            (x, best, gain, h) = (next, c, gi, hi);
            if moved <= 1e-12 * (1.0 + x.norm()) {
                break;
            }
        }
    }
    // Joseph form keeps the covariance PSD
    let ikh = Matrix4::identity() - gain * h;
    let p = ikh * cov * ikh.transpose() + gain * r_mat * gain.transpose();
    Ok((x, p, nis))
}

/// Per-run filter diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackerStats {
    pub updates: usize,
    pub rejected: usize,
    pub nis: Vec<f64>,
}

impl TrackerStats {
    pub fn mean_nis(&self) -> f64 {
        if self.nis.is_empty() {
            f64::NAN
        } else {
            self.nis.iter().sum::<f64>() / self.nis.len() as f64
        }
    }
}

/// Reflects a local state behind the array into the front half-plane.
///
/// Range, spatial frequency and radial velocity are unchanged under
/// `(y, vy) -> (-y, -vy)`, so a filter that drifts behind the array is
/// tracking the mirror image of the target.
pub fn fold_to_front(state: &TargetState, cov: &Matrix4<f64>) -> (TargetState, Matrix4<f64>) {
    if state.y >= 0.0 {
        return (*state, *cov);
    }
    let d = Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, 1.0, -1.0));
    (TargetState::new(state.x, -state.y, state.vx, -state.vy), d * cov * d)
}

/// Runs the EKF for one node over a measurement stream.
///
/// The filter starts at the node's first detection and emits one point per
/// frame from there on, predict-only where the detection is missing. States
/// are expressed in the node's local frame.
pub fn run_tracker(
    frames: &[MeasurementFrame],
    node_index: usize,
    node_pose: &Pose2D,
    dt: f64,
    cfg: &EkfConfig,
    noise: &NoiseConfig,
) -> Result<(Track, TrackerStats)> {
    cfg.validate()?;
    let local = Pose2D::origin();
    let detection_at = |f: &MeasurementFrame| f.per_node.get(node_index).copied().flatten();

    let start = frames
        .iter()
        .position(|f| detection_at(f).is_some())
        .ok_or(Error::EmptyTrack(node_index))?;
    let first = detection_at(&frames[start]).expect("checked above");
    let p0 = detection_to_local_cartesian(&first)?;
    let mut state = TargetState::new(p0.x, p0.y, 0.0, 0.0);
    let mut cov = Matrix4::from_diagonal(&Vector4::new(
        cfg.init_pos_var,
        cfg.init_pos_var,
        cfg.init_vel_var,
        cfg.init_vel_var,
    ));

    let mut stats = TrackerStats::default();
    let mut points = Vec::with_capacity(frames.len() - start);
    points.push(TrackPoint {
        frame_index: frames[start].frame_index,
        state,
        covariance: cov,
        updated: true,
    });
    let mut last_index = frames[start].frame_index;
    for frame in &frames[start + 1..] {
        if frame.frame_index <= last_index {
            return Err(Error::Config("measurement frames must have increasing indices".into()));
        }
        let steps = (frame.frame_index - last_index) as f64;
        (state, cov) = ekf_predict(&state, &cov, dt * steps, cfg)?;
        last_index = frame.frame_index;
        let mut updated = false;
        if let Some(det) = detection_at(frame) {
            let out = iterated_ekf_update(&state, &cov, &det, &local, noise, cfg.gate_threshold, cfg.iterations)?;
            if out.accepted {
                (state, cov) = fold_to_front(&out.state, &out.covariance);
                stats.updates += 1;
                stats.nis.push(out.nis);
                updated = true;
            } else {
                stats.rejected += 1;
            }
        }
        points.push(TrackPoint {
            frame_index: frame.frame_index,
            state,
            covariance: cov,
            updated,
        });
    }
    Ok((
        Track {
            node: node_index,
            frame_pose: *node_pose,
            local: true,
            points,
        },
        stats,
    ))
}

/// Nearest symmetric matrix with eigenvalues at least `1e-15` of the largest.
///
/// With very precise measurements the posterior spans more orders of
/// magnitude than f64 resolves and round-off leaves small negative
/// eigenvalues that would otherwise grow over later updates.
fn project_psd(m: &Matrix4<f64>) -> Matrix4<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0 && top.is_finite()) {
        return symmetrize(m);
    }
    let floor = top * 1e-15;
    if eig.eigenvalues.min() >= floor {
        return symmetrize(m);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    symmetrize(&(eig.eigenvectors * Matrix4::from_diagonal(&clamped) * eig.eigenvectors.transpose()))
}

/// Inverse of a symmetric PSD matrix with eigenvalues floored at
/// `1e-14` of the largest, so round-off negatives in near-singular
/// covariances stay invertible. `None` when the matrix is zero or non-finite.
fn floored_inverse(m: &Matrix4<f64>) -> Option<Matrix4<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0 && top.is_finite()) {
        return None;
    }
    let floor = top * 1e-14;
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    Some(symmetrize(
        &(eig.eigenvectors * Matrix4::from_diagonal(&inv) * eig.eigenvectors.transpose()),
    ))
}

/// Per-frame covariance-weighted combination of tracks already in a common frame.
///
/// Cross-correlation between the tracks is ignored. Only frames present in
/// every input are kept.
pub fn track_level_fusion(tracks: &[&Track]) -> Result<Track> {
    let (first, rest) = tracks
        .split_first()
        .ok_or_else(|| Error::Config("track fusion needs at least one track".into()))?;
    let mut points = Vec::new();
    for p in &first.points {
        let others: Option<Vec<&TrackPoint>> = rest.iter().map(|t| t.get(p.frame_index)).collect();
        let Some(others) = others else { continue };
        let mut info = Matrix4::zeros();
        let mut info_state = Vector4::zeros();
        for q in std::iter::once(p).chain(others) {
            let inv = floored_inverse(&q.covariance)
                .ok_or_else(|| Error::Numeric(format!("singular covariance at frame {}", q.frame_index)))?;
            info += inv;
            info_state += inv * q.state.to_vector();
        }
        let cov = floored_inverse(&info)
            .ok_or_else(|| Error::Numeric(format!("singular fused information at frame {}", p.frame_index)))?;
        points.push(TrackPoint {
            frame_index: p.frame_index,
            state: TargetState::from_vector(&(cov * info_state)),
            covariance: symmetrize(&cov),
            updated: true,
        });
    }
    if points.is_empty() {
        return Err(Error::Config("tracks share no common frames".into()));
    }
    Ok(Track {
        node: first.node,
        frame_pose: first.frame_pose,
        local: first.local,
        points,
    })
}
