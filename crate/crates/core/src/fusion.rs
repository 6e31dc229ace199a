//! One-shot fusion of a single frame's detections from several nodes.
//!
//! The state `(x, y, vx, vy)` is estimated by nonlinear least squares over
//! the sigma-normalized range, spatial-frequency and radial-velocity
//! residuals of every node (ML), optionally regularized by a Gaussian prior
//! (Bayes). Residuals are ordered `(R_1..R_N, W_1..W_N, V_1..V_N)` followed by
//! the four prior terms, and are defined as `(model - observed) / sigma` so
//! that the Jacobian is the scaled model Jacobian.
//!
//! The solver is Levenberg-Marquardt. Its damped system includes the
//! residual-curvature term `sum_i r_i Hess(r_i)` on top of `J^T J`: with
//! spatial-frequency noise as large as `pi/4` the problems have large
//! residuals, plain Gauss-Newton converges only linearly, and the last
//! objective decreases fall below round-off long before the gradient reaches
//! its tolerance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Matrix4, MatrixXx4, Vector2, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    detection_to_local_cartesian, line_of_sight_direction, local_to_global, measure_with_jacobian,
    measurement_hessians, Detection, Pose2D, TargetState,
};
use crate::scene::{MeasurementFrame, NoiseConfig};

/// Estimation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Ml,
    Bayes,
}

impl FusionMode {
    pub const ALL: [FusionMode; 2] = [FusionMode::Bayes, FusionMode::Ml];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Ml => "ml",
            FusionMode::Bayes => "bayes",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(FusionMode::Ml),
            "bayes" => Ok(FusionMode::Bayes),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// One node's contribution to a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationEntry {
    pub node_pose: Pose2D,
    pub detection: Detection,
}

/// Detections of one frame, each paired with the (calibrated) pose of its node.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionObservation {
    pub entries: Vec<ObservationEntry>,
}

impl FusionObservation {
    pub fn new(entries: Vec<ObservationEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("fusion observation has no entries".into()));
        }
        Ok(Self { entries })
    }

    /// Collects the detections present in `frame`; nodes without one are omitted.
    pub fn from_frame(frame: &MeasurementFrame, poses: &[Pose2D]) -> Result<Self> {
        if frame.per_node.len() != poses.len() {
            return Err(Error::LengthMismatch {
                left: frame.per_node.len(),
                right: poses.len(),
            });
        }
        Self::new(
            frame
                .detections()
                .map(|(i, d)| ObservationEntry {
                    node_pose: poses[i],
                    detection: *d,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A single radial velocity cannot determine a velocity vector.
    pub fn is_velocity_observable(&self) -> bool {
        self.entries.len() >= 2
    }
}

/// Where the position prior is centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorCenter {
    Origin,
    InitialEstimate,
}

/// Independent Gaussian prior on the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_vx: f64,
    pub sigma_vy: f64,
    pub position_prior_center: PriorCenter,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma_x: 3.0,
            sigma_y: 3.0,
            sigma_vx: 3.5,
            sigma_vy: 3.5,
            position_prior_center: PriorCenter::InitialEstimate,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("sigma_vx", self.sigma_vx),
            ("sigma_vy", self.sigma_vy),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn sigmas(&self) -> Vector4<f64> {
        Vector4::new(self.sigma_x, self.sigma_y, self.sigma_vx, self.sigma_vy)
    }

    /// Prior mean for `obs`: position per [`PriorCenter`], zero velocity.
    pub fn center(&self, obs: &FusionObservation) -> Result<TargetState> {
        let p = match self.position_prior_center {
            PriorCenter::Origin => Vector2::zeros(),
            PriorCenter::InitialEstimate => initial_position_estimate(obs)?,
        };
        Ok(TargetState::new(p.x, p.y, 0.0, 0.0))
    }
}

/// Result of a fusion solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionEstimate {
    pub mode: FusionMode,
    pub state: TargetState,
    /// Laplace covariance `(J^T J)^-1`; `None` when the Hessian is singular.
    pub covariance: Option<Matrix4<f64>>,
    pub objective_value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Smallest over largest eigenvalue of the final `J^T J`.
    pub conditioning: f64,
}

/// Position initializer: mean of every detection mapped to the global frame.
pub fn initial_position_estimate(obs: &FusionObservation) -> Result<Vector2<f64>> {
    if obs.is_empty() {
        return Err(Error::Config("fusion observation has no entries".into()));
    }
    let mut sum = Vector2::zeros();
    for e in &obs.entries {
        sum += local_to_global(&e.node_pose, detection_to_local_cartesian(&e.detection)?);
    }
    Ok(sum / obs.len() as f64)
}

/// Velocity initializer: mean of each radial velocity placed along its line of sight.
pub fn initial_velocity_estimate(obs: &FusionObservation) -> Result<Vector2<f64>> {
    if obs.is_empty() {
        return Err(Error::Config("fusion observation has no entries".into()));
    }
    let mut sum = Vector2::zeros();
    for e in &obs.entries {
        sum += line_of_sight_direction(&e.node_pose, e.detection.spatial_freq)? * e.detection.radial_vel;
    }
    Ok(sum / obs.len() as f64)
}

/// Objective value with its residuals and Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Sum of squared residuals.
    pub value: f64,
    pub residuals: DVector<f64>,
    pub jacobian: MatrixXx4<f64>,
    /// `sum_i r_i Hess(r_i)`, the part of the Hessian of `value / 2` that `J^T J` omits.
    pub curvature: Matrix4<f64>,
    /// Bound on the floating-point error of `value`.
    pub roundoff: f64,
    /// Bound on the floating-point error of the gradient's infinity norm.
    pub gradient_roundoff: f64,
}

impl Evaluation {
    /// `J^T J`.
    pub fn hessian(&self) -> Matrix4<f64> {
        self.jacobian.transpose() * &self.jacobian
    }

    /// Gradient of [`Evaluation::value`], `2 J^T r`.
    pub fn gradient(&self) -> Vector4<f64> {
        self.jacobian.transpose() * &self.residuals * 2.0
    }

    /// Gradient below `tol`, or below what the residuals can resolve.
    pub fn is_stationary(&self, tol: f64) -> bool {
        let g = self.gradient().amax();
        g < tol || g <= self.gradient_roundoff
    }
}

fn fill_ml(
    theta: &TargetState,
    obs: &FusionObservation,
    noise: &NoiseConfig,
    residuals: &mut DVector<f64>,
    jacobian: &mut MatrixXx4<f64>,
) -> Result<(Matrix4<f64>, f64, Vector4<f64>)> {
    let n = obs.len();
    let sig = noise.sigmas();
    let mut curvature = Matrix4::zeros();
    let mut roundoff = 0.0;
    let mut gradient_err = Vector4::zeros();
    for (i, e) in obs.entries.iter().enumerate() {
        let (h, jac) = measure_with_jacobian(&e.node_pose, theta)?;
        let hess = measurement_hessians(&e.node_pose, theta)?;
        let model = [h.range, h.spatial_freq, h.radial_vel];
        let seen = [e.detection.range, e.detection.spatial_freq, e.detection.radial_vel];
        for m in 0..3 {
            let row = m * n + i;
            residuals[row] = (model[m] - seen[m]) / sig[m];
            for c in 0..4 {
                jacobian[(row, c)] = jac[(m, c)] / sig[m];
            }
            curvature += hess[m] * (residuals[row] / sig[m]);
            // a residual is off by a few ulps of the larger operand, scaled by 1/sigma
            let err = 4.0 * f64::EPSILON * model[m].abs().max(seen[m].abs()) / sig[m];
            roundoff += err * (2.0 * residuals[row].abs() + err);
            for c in 0..4 {
                gradient_err[c] += 2.0 * jacobian[(row, c)].abs() * err;
            }
        }
    }
    Ok((curvature, roundoff, gradient_err))
}

/// ML objective at `theta`.
pub fn ml_objective(theta: &TargetState, obs: &FusionObservation, noise: &NoiseConfig) -> Result<Evaluation> {
    let rows = 3 * obs.len();
    let mut residuals = DVector::zeros(rows);
    let mut jacobian = MatrixXx4::zeros(rows);
    let (curvature, roundoff, gradient_err) = fill_ml(theta, obs, noise, &mut residuals, &mut jacobian)?;
    let value = residuals.norm_squared();
    Ok(Evaluation {
        value,
        residuals,
        jacobian,
        curvature,
        roundoff: roundoff + f64::EPSILON * rows as f64 * value,
        gradient_roundoff: gradient_err.amax(),
    })
}

/// Bayes objective: the ML terms plus prior quadratics about `prior_center`.
pub fn bayes_objective(
    theta: &TargetState,
    obs: &FusionObservation,
    noise: &NoiseConfig,
    prior: &PriorConfig,
    prior_center: &TargetState,
) -> Result<Evaluation> {
    let data_rows = 3 * obs.len();
    let mut residuals = DVector::zeros(data_rows + 4);
    let mut jacobian = MatrixXx4::zeros(data_rows + 4);
    let (curvature, roundoff, gradient_err) = fill_ml(theta, obs, noise, &mut residuals, &mut jacobian)?;
    let sig = prior.sigmas();
    let delta = theta.to_vector() - prior_center.to_vector();
    for d in 0..4 {
        residuals[data_rows + d] = delta[d] / sig[d];
        jacobian[(data_rows + d, d)] = 1.0 / sig[d];
    }
    let value = residuals.norm_squared();
    Ok(Evaluation {
        value,
        residuals,
        jacobian,
        curvature,
        roundoff: roundoff + f64::EPSILON * (data_rows + 4) as f64 * value,
        gradient_roundoff: gradient_err.amax(),
    })
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub initial_damping: f64,
    pub damping_factor: f64,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub max_iterations: usize,
    /// Adds [`Evaluation::curvature`] to `J^T J` in the damped system.
    pub second_order: bool,
    /// Damping above which the solver gives up on finding a descent step.
    pub max_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_factor: 10.0,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            max_iterations: 100,
            second_order: true,
            max_damping: 1e16,
        }
    }
}

/// Outcome of [`levenberg_marquardt`].
#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub x: Vector4<f64>,
    pub evaluation: Evaluation,
    pub iterations: usize,
    /// Final gradient infinity norm below `gradient_tol`, or below its own
    /// round-off bound when the noise scale puts `gradient_tol` out of reach.
    pub converged: bool,
    pub gradient_norm: f64,
    /// Objective value after each accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// A step is taken when it lowers the objective, or when the change is lost
/// in round-off but the gradient shrinks; near the optimum the decrease of a
/// good step is smaller than the evaluation error of the objective.
fn acceptable(next: &Evaluation, current: &Evaluation, gradient_norm: f64) -> bool {
    next.value <= current.value
        || (next.value <= current.value + current.roundoff.max(next.roundoff) && next.gradient().amax() < gradient_norm)
}

/// Minimizes a sum of squares with damped steps `(J^T J + S + lambda I) dx = -J^T r`,
/// where `S` is the residual curvature, or zero with `second_order` off.
///
/// Steps whose evaluation fails or raises the objective beyond round-off are
/// rejected and the damping grows; so does a damped matrix that is not positive definite. Iteration stops on a small gradient, a small accepted step,
/// exhausted damping or the iteration cap.
pub fn levenberg_marquardt<F>(f: F, x0: Vector4<f64>, opts: &LmOptions) -> Result<LmOutcome>
where
    F: Fn(&Vector4<f64>) -> Result<Evaluation>,
{
    let mut x = x0;
    let mut eval = f(&x)?;
    let mut history = vec![eval.value];
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut gradient_norm = eval.gradient().amax();

    while !eval.is_stationary(opts.gradient_tol) && iterations < opts.max_iterations {
        iterations += 1;
        let jtj = if opts.second_order {
            eval.hessian() + eval.curvature
        } else {
            eval.hessian()
        };
        let rhs = -(eval.jacobian.transpose() * &eval.residuals);
        let mut accepted_step = None;
        while lambda <= opts.max_damping {
            let damped = jtj + Matrix4::identity() * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= opts.damping_factor;
                continue;
            };
            let step = chol.solve(&rhs);
            let candidate = x + step;
            match f(&candidate) {
                Ok(next) if acceptable(&next, &eval, gradient_norm) => {
                    x = candidate;
                    eval = next;
                    lambda = (lambda / opts.damping_factor).max(f64::MIN_POSITIVE);
                    accepted_step = Some(step.norm());
                    break;
                }
                _ => lambda *= opts.damping_factor,
            }
        }
        let Some(step_norm) = accepted_step else {
            break;
        };
        history.push(eval.value);
        gradient_norm = eval.gradient().amax();
        if step_norm < opts.step_tol {
            break;
        }
    }

    Ok(LmOutcome {
        x,
        converged: eval.is_stationary(opts.gradient_tol),
        gradient_norm,
        evaluation: eval,
        iterations,
        history,
    })
}

fn conditioning(h: &Matrix4<f64>) -> f64 {
    let eig = h.symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min().max(0.0), eig.max());
    if hi > 0.0 {
        lo / hi
    } else {
        0.0
    }
}

fn laplace_covariance(h: &Matrix4<f64>) -> Option<Matrix4<f64>> {
    let inv = h.cholesky()?.inverse();
    inv.iter().all(|v| v.is_finite()).then(|| (inv + inv.transpose()) * 0.5)
}

/// Solves with default LM settings.
pub fn solve(
    obs: &FusionObservation,
    noise: &NoiseConfig,
    mode: FusionMode,
    prior: Option<&PriorConfig>,
) -> Result<FusionEstimate> {
    solve_with(obs, noise, mode, prior, &LmOptions::default())
}

/// Solves the ML or Bayes problem for one frame.
///
/// LM starts from the initializers; in Bayes mode the prior center is also
/// tried and the cheaper of the two starting points is used.
pub fn solve_with(
    obs: &FusionObservation,
    noise: &NoiseConfig,
    mode: FusionMode,
    prior: Option<&PriorConfig>,
    lm: &LmOptions,
) -> Result<FusionEstimate> {
    noise.validate()?;
    let p0 = initial_position_estimate(obs)?;
    let v0 = initial_velocity_estimate(obs)?;
    let start = Vector4::new(p0.x, p0.y, v0.x, v0.y);

    let outcome = match mode {
        FusionMode::Ml => {
            let f = |x: &Vector4<f64>| ml_objective(&TargetState::from_vector(x), obs, noise);
            levenberg_marquardt(f, start, lm)?
        }
        FusionMode::Bayes => {
            let prior = prior.ok_or_else(|| Error::Config("Bayes fusion needs a prior".into()))?;
            prior.validate()?;
            let center = prior.center(obs)?;
            let f = |x: &Vector4<f64>| bayes_objective(&TargetState::from_vector(x), obs, noise, prior, &center);
            let x0 = [start, center.to_vector()]
                .into_iter()
                .filter_map(|x| f(&x).ok().map(|e| (x, e.value)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(x, _)| x)
                .ok_or_else(|| Error::Domain("no feasible starting point: target coincides with a node".into()))?;
            levenberg_marquardt(f, x0, lm)?
        }
    };

    let h = outcome.evaluation.hessian();
    Ok(FusionEstimate {
        mode,
        state: TargetState::from_vector(&outcome.x),
        covariance: laplace_covariance(&h),
        objective_value: outcome.evaluation.value,
        gradient_norm: outcome.gradient_norm,
        iterations: outcome.iterations,
        converged: outcome.converged,
        conditioning: conditioning(&h),
    })
}

/// Fuses one measurement frame; `None` when no node detected the target.
pub fn fuse_frame(
    frame: &MeasurementFrame,
    poses: &[Pose2D],
    noise: &NoiseConfig,
    mode: FusionMode,
    prior: Option<&PriorConfig>,
) -> Option<Result<FusionEstimate>> {
    frame.detections().next()?;
    Some(FusionObservation::from_frame(frame, poses).and_then(|obs| solve(&obs, noise, mode, prior)))
}

/// Grid layout for [`posterior_covariance_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOptions {
    /// Half-width of the grid in Laplace standard deviations.
    pub half_width_sigmas: f64,
    /// Points along each of the four axes; odd and at least 5.
    pub points_per_dim: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            half_width_sigmas: 3.0,
            points_per_dim: 15,
        }
    }
}

impl GridOptions {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_dim < 5 || self.points_per_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "points_per_dim must be odd and >= 5, got {}",
                self.points_per_dim
            )));
        }
        if !(self.half_width_sigmas > 0.0 && self.half_width_sigmas.is_finite()) {
            return Err(Error::Config(format!(
                "half_width_sigmas must be positive, got {}",
                self.half_width_sigmas
            )));
        }
        Ok(())
    }
}

/// Second-moment matrix of the density `exp(-L/2)` sampled on a regular grid.
///
/// The grid is axis-aligned in state coordinates and spans
/// `half_width_sigmas` marginal standard deviations of `laplace` (a
/// covariance guess) around `center`.
/// `objective` returns `None` where `L` is undefined; such points get zero
/// weight. Summation runs in fixed index order, so the result is
/// deterministic regardless of thread count.
pub fn grid_posterior_covariance<F>(
    objective: F,
    center: &Vector4<f64>,
    laplace: &Matrix4<f64>,
    grid: &GridOptions,
) -> Result<Matrix4<f64>>
where
    F: Fn(&Vector4<f64>) -> Option<f64> + Sync,
{
    grid.validate()?;
    let variances = laplace.diagonal();
    if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Numeric(
            "grid scale covariance has a non-positive variance".into(),
        ));
    }
    let scale = Matrix4::from_diagonal(&variances.map(f64::sqrt));

    let n = grid.points_per_dim;
    let half = (n / 2) as f64;
    let spacing = grid.half_width_sigmas / half;
    let coord = |i: usize| (i as f64 - half) * spacing;
    let unpack = |idx: usize| {
        Vector4::new(
            coord(idx / (n * n * n)),
            coord(idx / (n * n) % n),
            coord(idx / n % n),
            coord(idx % n),
        )
    };

    let total = n.pow(4);
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let theta = center + scale * unpack(idx);
            objective(&theta).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY)
        })
        .collect();
    let l_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !l_min.is_finite() {
        return Err(Error::Numeric(
            "posterior density underflows everywhere on the grid; widen the prior sigmas or the grid".into(),
        ));
    }

    let mut w_sum = 0.0;
    let mut first = Vector4::zeros();
    let mut second = Matrix4::zeros();
    for (idx, &l) in values.iter().enumerate() {
        let w = (-0.5 * (l - l_min)).exp();
        if w == 0.0 {
            continue;
        }
        let u = unpack(idx);
        w_sum += w;
        first += u * w;
        second += u * u.transpose() * w;
    }
    let mean = first / w_sum;
    let cov_u = second / w_sum - mean * mean.transpose();
    let cov = scale * cov_u * scale.transpose();
    Ok((cov + cov.transpose()) * 0.5)
}

/// Grid posterior covariance of the Bayes objective around `estimate`.
///
/// The grid follows the Laplace covariance of the Bayes objective at the
/// estimate, which always exists because the prior makes `J^T J` positive
/// definite.
pub fn posterior_covariance_grid(
    obs: &FusionObservation,
    noise: &NoiseConfig,
    prior: &PriorConfig,
    estimate: &FusionEstimate,
    grid: &GridOptions,
) -> Result<Matrix4<f64>> {
    prior.validate()?;
    let prior_center = prior.center(obs)?;
    let at = bayes_objective(&estimate.state, obs, noise, prior, &prior_center)?;
    let laplace = laplace_covariance(&at.hessian())
        .ok_or_else(|| Error::Numeric("Bayes Hessian is singular at the estimate".into()))?;
    grid_posterior_covariance(
        |x| {
            bayes_objective(&TargetState::from_vector(x), obs, noise, prior, &prior_center)
                .ok()
                .map(|e| e.value)
        },
        &estimate.state.to_vector(),
        &laplace,
        grid,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::measure;
    use crate::scene::{builtin_scenario, BuiltinScenario, TrajectoryKind};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn config_b() -> Vec<Pose2D> {
        builtin_scenario(BuiltinScenario::B, TrajectoryKind::Random).nodes
    }

    fn config_c() -> Vec<Pose2D> {
        builtin_scenario(BuiltinScenario::C, TrajectoryKind::Random).nodes
    }

    fn noiseless(poses: &[Pose2D], target: &TargetState) -> FusionObservation {
        FusionObservation::new(
            poses
                .iter()
                .map(|p| ObservationEntry {
                    node_pose: *p,
                    detection: measure(p, target).unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_state(rng: &mut impl Rng) -> TargetState {
        TargetState::new(
            rng.gen_range(-1.5..1.5),
            rng.gen_range(2.0..5.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        )
    }

    #[test]
    fn single_node_position_initializer() {
        let obs = noiseless(&[Pose2D::origin()], &TargetState::new(0.0, 5.0, 0.0, 0.0));
        let p = initial_position_estimate(&obs).unwrap();
        assert_relative_eq!(p, Vector2::new(0.0, 5.0), epsilon = 1e-12);
    }

    #[test]
    fn config_c_transform() {
        let obs = FusionObservation::new(vec![ObservationEntry {
            node_pose: Pose2D::new(0.0, 7.0, PI),
            detection: Detection::new(7.0, 0.0, 0.0),
        }])
        .unwrap();
        let p = initial_position_estimate(&obs).unwrap();
        assert!(p.norm() < 1e-12);
    }

    #[test]
    fn two_noiseless_nodes_give_exact_position() {
        let target = TargetState::new(0.7, 3.1, 0.4, -0.2);
        let p = initial_position_estimate(&noiseless(&config_b(), &target)).unwrap();
        assert_relative_eq!(p, target.position(), epsilon = 1e-12);
    }

    #[test]
    fn velocity_initializer_cases() {
        let still = noiseless(&config_b(), &TargetState::new(0.5, 3.0, 0.0, 0.0));
        assert_eq!(initial_velocity_estimate(&still).unwrap(), Vector2::zeros());

        let receding = noiseless(&[Pose2D::origin()], &TargetState::new(0.0, 4.0, 0.0, 1.0));
        assert_relative_eq!(
            initial_velocity_estimate(&receding).unwrap(),
            Vector2::new(0.0, 1.0),
            epsilon = 1e-12
        );

        // orthogonal lines of sight: each component recovered, halved by the average
        let nodes = [Pose2D::new(0.0, 0.0, 0.0), Pose2D::new(4.0, 4.0, PI / 2.0)];
        let target = TargetState::new(0.0, 4.0, 0.8, 0.6);
        let v = initial_velocity_estimate(&noiseless(&nodes, &target)).unwrap();
        assert_relative_eq!(v, Vector2::new(0.4, 0.3), epsilon = 1e-12);
        let est = solve(
            &noiseless(&nodes, &target),
            &NoiseConfig::default(),
            FusionMode::Ml,
            None,
        )
        .unwrap();
        assert_relative_eq!(est.state.to_vector(), target.to_vector(), epsilon = 1e-9);
    }

    #[test]
    fn initializer_rejects_bad_omega() {
        let obs = FusionObservation::new(vec![ObservationEntry {
            node_pose: Pose2D::origin(),
            detection: Detection::new(3.0, 3.5, 0.0),
        }])
        .unwrap();
        assert!(matches!(initial_velocity_estimate(&obs), Err(Error::Domain(_))));
        assert!(FusionObservation::new(vec![]).is_err());
    }

    #[test]
    fn objective_at_truth_is_zero() {
        let target = TargetState::new(0.3, 4.0, 1.0, 0.5);
        let obs = noiseless(&config_b(), &target);
        let noise = NoiseConfig::default();
        let e = ml_objective(&target, &obs, &noise).unwrap();
        assert!(e.value < 1e-24);
        assert_eq!(e.jacobian.nrows(), 6);
        let prior = PriorConfig::default();
        let b = bayes_objective(&target, &obs, &noise, &prior, &target).unwrap();
        assert!(b.value < 1e-24);
        assert_eq!(b.jacobian.nrows(), 10);
    }

    #[test]
    fn range_perturbation_costs_one() {
        let target = TargetState::new(0.3, 4.0, 1.0, 0.5);
        let mut obs = noiseless(&config_b(), &target);
        let noise = NoiseConfig::default();
        obs.entries[1].detection.range += noise.sigma_r;
        assert_relative_eq!(ml_objective(&target, &obs, &noise).unwrap().value, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn bayes_minus_ml_is_prior_terms() {
        let mut rng = crate::scene::seeded_rng(10, 0);
        let obs = noiseless(&config_b(), &random_state(&mut rng));
        let noise = NoiseConfig::default();
        let prior = PriorConfig::default();
        let center = TargetState::new(0.1, 3.0, 0.0, 0.0);
        for _ in 0..20 {
            let theta = random_state(&mut rng);
            let ml = ml_objective(&theta, &obs, &noise).unwrap().value;
            let bayes = bayes_objective(&theta, &obs, &noise, &prior, &center).unwrap().value;
            let d = theta.to_vector() - center.to_vector();
            let prior_terms: f64 = (0..4).map(|i| (d[i] / prior.sigmas()[i]).powi(2)).sum();
            assert_relative_eq!(bayes - ml, prior_terms, epsilon = 1e-9, max_relative = 1e-12);
        }
    }

    #[test]
    fn coincident_target_is_domain_error() {
        let obs = noiseless(&config_b(), &TargetState::new(0.3, 4.0, 0.0, 0.0));
        let at_node = TargetState::new(0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            ml_objective(&at_node, &obs, &NoiseConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    fn fd_check(f: impl Fn(&Vector4<f64>) -> Evaluation, x: Vector4<f64>) -> f64 {
        let analytic = f(&x).jacobian;
        let mut worst: f64 = 0.0;
        for c in 0..4 {
            let h = 1e-6 * x[c].abs().max(1.0);
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let fd = (f(&xp).residuals - f(&xm).residuals) / (2.0 * h);
            for r in 0..fd.len() {
                let (a, n) = (analytic[(r, c)], fd[r]);
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-4));
            }
        }
        worst
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = crate::scene::seeded_rng(11, 0);
        let noise = NoiseConfig::default();
        let prior = PriorConfig::default();
        let nodes = config_b();
        for _ in 0..200 {
            let obs = noiseless(&nodes, &random_state(&mut rng));
            let center = random_state(&mut rng);
            let x = random_state(&mut rng).to_vector();
            let ml = fd_check(|x| ml_objective(&TargetState::from_vector(x), &obs, &noise).unwrap(), x);
            let bayes = fd_check(
                |x| bayes_objective(&TargetState::from_vector(x), &obs, &noise, &prior, &center).unwrap(),
                x,
            );
            assert!(ml < 1e-5 && bayes < 1e-5, "ml {ml} bayes {bayes}");
        }
    }

    #[test]
    fn curvature_completes_the_hessian() {
        let mut rng = crate::scene::seeded_rng(14, 0);
        let noise = NoiseConfig::default();
        let obs = noiseless(&config_b(), &random_state(&mut rng));
        let prior = PriorConfig::default();
        let center = random_state(&mut rng);
        let f =
            |x: &Vector4<f64>| bayes_objective(&TargetState::from_vector(x), &obs, &noise, &prior, &center).unwrap();
        for _ in 0..20 {
            let x = random_state(&mut rng).to_vector();
            let e = f(&x);
            let full = (e.hessian() + e.curvature) * 2.0;
            for c in 0..4 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += 1e-6;
                xm[c] -= 1e-6;
                let fd = (f(&xp).gradient() - f(&xm).gradient()) / 2e-6;
                for r in 0..4 {
                    assert!((full[(r, c)] - fd[r]).abs() <= 1e-5 * full[(r, c)].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn gauss_newton_variant_also_solves_noiseless() {
        let target = TargetState::new(0.4, 3.2, -0.6, 0.9);
        let opts = LmOptions {
            second_order: false,
            ..LmOptions::default()
        };
        let est = solve_with(
            &noiseless(&config_b(), &target),
            &NoiseConfig::default(),
            FusionMode::Ml,
            None,
            &opts,
        )
        .unwrap();
        assert!((est.state.to_vector() - target.to_vector()).amax() < 1e-6);
    }

    #[test]
    fn noiseless_ml_recovers_truth() {
        let mut rng = crate::scene::seeded_rng(12, 0);
        let nodes = config_b();
        for _ in 0..50 {
            let target = random_state(&mut rng);
            let est = solve(
                &noiseless(&nodes, &target),
                &NoiseConfig::default(),
                FusionMode::Ml,
                None,
            )
            .unwrap();
            assert!(est.converged);
            assert!((est.state.position() - target.position()).amax() < 1e-6);
            assert!((est.state.velocity() - target.velocity()).amax() < 1e-6);
            assert!(est.covariance.is_some());
        }
    }

    #[test]
    fn wide_prior_approaches_ml() {
        let mut rng = crate::scene::seeded_rng(13, 0);
        let nodes = config_b();
        let noise = NoiseConfig::uniform(0.01);
        let prior = PriorConfig {
            sigma_x: 1e7,
            sigma_y: 1e7,
            sigma_vx: 1e7,
            sigma_vy: 1e7,
            ..PriorConfig::default()
        };
        for _ in 0..20 {
            let target = random_state(&mut rng);
            let mut obs = noiseless(&nodes, &target);
            for e in &mut obs.entries {
                e.detection.range += rng.gen_range(-0.01..0.01);
                e.detection.radial_vel += rng.gen_range(-0.01..0.01);
            }
            let ml = solve(&obs, &noise, FusionMode::Ml, None).unwrap();
            let bayes = solve(&obs, &noise, FusionMode::Bayes, Some(&prior)).unwrap();
            assert!((ml.state.to_vector() - bayes.state.to_vector()).amax() < 1e-6);
        }
    }

    #[test]
    fn bayes_requires_prior() {
        let obs = noiseless(&config_b(), &TargetState::new(0.3, 4.0, 0.0, 0.0));
        assert!(matches!(
            solve(&obs, &NoiseConfig::default(), FusionMode::Bayes, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn collinear_target_is_ill_conditioned() {
        let nodes = config_c();
        let target = TargetState::new(0.0, 3.0, 0.0, 1.0);
        let obs = noiseless(&nodes, &target);
        let e = ml_objective(&target, &obs, &NoiseConfig::default()).unwrap();
        let h = e.hessian();
        let vel_block = h.fixed_view::<2, 2>(2, 2).into_owned();
        assert!(vel_block.symmetric_eigen().eigenvalues.min().abs() < 1e-9 * vel_block.norm());
        assert!(conditioning(&h) < 1e-6);

        let est = solve(&obs, &NoiseConfig::default(), FusionMode::Ml, None).unwrap();
        assert!(est.conditioning < 1e-6);
        let bayes = solve(
            &obs,
            &NoiseConfig::default(),
            FusionMode::Bayes,
            Some(&PriorConfig::default()),
        )
        .unwrap();
        assert!(bayes.converged);
        assert!(bayes.conditioning > 1e-6);
    }

    #[test]
    fn grid_matches_gaussian_on_quadratic() {
        let a = Matrix4::new(
            2.0, 0.3, 0.0, 0.1, //
            0.3, 1.0, 0.2, 0.0, //
            0.0, 0.2, 0.5, 0.05, //
            0.1, 0.0, 0.05, 0.8,
        );
        let jac = a.cholesky().unwrap().l().transpose();
        let c = Vector4::new(1.0, 2.0, -0.5, 0.3);
        let cov = a.try_inverse().unwrap();
        let grid = grid_posterior_covariance(
            |x| Some((jac * (x - c)).norm_squared()),
            &c,
            &cov,
            &GridOptions::default(),
        )
        .unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let tol = 0.05 * (cov[(i, i)] * cov[(j, j)]).sqrt();
                assert!(
                    (grid[(i, j)] - cov[(i, j)]).abs() < tol,
                    "({i},{j}) {} vs {}",
                    grid[(i, j)],
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn grid_rejects_even_sizes() {
        let g = GridOptions {
            points_per_dim: 14,
            ..GridOptions::default()
        };
        assert!(grid_posterior_covariance(|_| Some(0.0), &Vector4::zeros(), &Matrix4::identity(), &g).is_err());
    }

    #[test]
    fn grid_underflow_is_numeric_error() {
        let r = grid_posterior_covariance(
            |_| None,
            &Vector4::zeros(),
            &Matrix4::identity(),
            &GridOptions::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn lm_history_non_increasing(seed in any::<u64>()) {
            let mut rng = crate::scene::seeded_rng(seed, 3);
            let target = random_state(&mut rng);
            let mut obs = noiseless(&config_b(), &target);
            for e in &mut obs.entries {
                e.detection.range += rng.gen_range(-0.05..0.05);
                e.detection.spatial_freq = (e.detection.spatial_freq + rng.gen_range(-0.5..0.5)).clamp(-PI, PI);
                e.detection.radial_vel += rng.gen_range(-0.3..0.3);
            }
            let noise = NoiseConfig::default();
            let start = Vector4::new(0.0, 3.0, 0.0, 0.0);
            let out = levenberg_marquardt(
                |x| ml_objective(&TargetState::from_vector(x), &obs, &noise),
                start,
                &LmOptions::default(),
            ).unwrap();
            // non-increasing up to evaluation round-off (well under 1e-12 here)
            prop_assert!(out.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            if out.converged {
                prop_assert!(out.evaluation.gradient().amax() < 1e-8);
            }
        }

        #[test]
        fn bayes_optimum_never_costs_more_than_center(seed in any::<u64>()) {
            let mut rng = crate::scene::seeded_rng(seed, 4);
            let target = random_state(&mut rng);
            let mut obs = noiseless(&config_c(), &target);
            for e in &mut obs.entries {
                e.detection.range += rng.gen_range(-0.1..0.1);
                e.detection.radial_vel += rng.gen_range(-0.5..0.5);
            }
            let noise = NoiseConfig::default();
            let prior = PriorConfig::default();
            let center = prior.center(&obs).unwrap();
            let est = solve(&obs, &noise, FusionMode::Bayes, Some(&prior)).unwrap();
            let d = est.state.to_vector() - center.to_vector();
            let dist: f64 = (0..4).map(|i| (d[i] / prior.sigmas()[i]).powi(2)).sum();
            let at_center = bayes_objective(&center, &obs, &noise, &prior, &center).unwrap().value;
            prop_assert!(dist <= at_center + 1e-9);
            prop_assert!(est.objective_value <= at_center + 1e-9);
        }
    }
}
