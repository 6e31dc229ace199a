//! Frame conventions and the noise-free radar measurement model.
//!
//! Every node carries a local frame whose +x axis runs along the (virtual)
//! antenna array and whose +y axis is boresight. A node's global pose is the
//! position of that frame's origin plus the orientation `phi` of the array
//! axis, so the array unit vector is `(cos phi, sin phi)` and boresight is
//! `(-sin phi, cos phi)`.
//!
//! For a half-wavelength array the spatial frequency of a target is
//! `pi * sin(theta)`, where `theta` is the angle off boresight, positive
//! toward the local +x axis.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix3x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `[0, 2pi)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if wrapped >= TAU {
        0.0
    } else {
        wrapped
    }
}

/// Smallest absolute difference between two angles, in `[0, pi]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = normalize_angle(a - b);
    d.min(TAU - d)
}

/// Counter-clockwise rotation by `angle`.
pub fn rotation(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Position and array orientation of a radar node in the global frame.
///
/// Serialized as `{ x, y, phi_deg }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRecord", into = "PoseRecord")]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    phi: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self {
            x,
            y,
            phi: normalize_angle(phi),
        }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Array orientation in `[0, 2pi)`.
    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Unit vector along the array.
    pub fn array_axis(&self) -> Vector2<f64> {
        Vector2::new(self.phi.cos(), self.phi.sin())
    }

    /// Unit vector along boresight (array axis rotated by +pi/2).
    pub fn boresight(&self) -> Vector2<f64> {
        Vector2::new(-self.phi.sin(), self.phi.cos())
    }

    /// Pose of `other` expressed in this pose's frame.
    pub fn relative(&self, other: &Pose2D) -> Pose2D {
        let p = rotation(-self.phi) * (other.position() - self.position());
        Pose2D::new(p.x, p.y, other.phi - self.phi)
    }

    /// Composition: `other` is given relative to `self`; returns it in `self`'s parent frame.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let p = local_to_global(self, other.position());
        Pose2D::new(p.x, p.y, self.phi + other.phi)
    }

    /// Wrapped-angle aware comparison.
    pub fn approx_eq(&self, other: &Pose2D, pos_tol: f64, ang_tol: f64) -> bool {
        (self.x - other.x).abs() <= pos_tol
            && (self.y - other.y).abs() <= pos_tol
            && angle_distance(self.phi, other.phi) <= ang_tol
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    x: f64,
    y: f64,
    #[serde(default)]
    phi_deg: f64,
}

impl From<PoseRecord> for Pose2D {
    fn from(r: PoseRecord) -> Self {
        Pose2D::new(r.x, r.y, r.phi_deg.to_radians())
    }
}

impl From<Pose2D> for PoseRecord {
    fn from(p: Pose2D) -> Self {
        PoseRecord {
            x: p.x,
            y: p.y,
            phi_deg: p.phi.to_degrees(),
        }
    }
}

/// Planar position and velocity of the point target.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl TargetState {
    pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, vx, vy }
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.vx, self.vy)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.vx, self.vy)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.vx.is_finite() && self.vy.is_finite()
    }

    /// Expresses a global state in the local frame of `node`.
    pub fn to_local(&self, node: &Pose2D) -> TargetState {
        let p = global_to_local(node, self.position());
        let v = rotation(-node.phi()) * self.velocity();
        TargetState::new(p.x, p.y, v.x, v.y)
    }

    /// Maps a state given in `node`'s local frame to the global frame.
    pub fn to_global(&self, node: &Pose2D) -> TargetState {
        let p = local_to_global(node, self.position());
        let v = rotation(node.phi()) * self.velocity();
        TargetState::new(p.x, p.y, v.x, v.y)
    }
}

/// A (range, spatial frequency, radial velocity) triple.
///
/// Used both for the ideal measurement of a target and for noisy detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// meters
    pub range: f64,
    /// radians, `pi * sin(theta)`
    pub spatial_freq: f64,
    /// meters/second, positive when receding
    pub radial_vel: f64,
}

pub type IdealMeasurement = Detection;

impl Detection {
    pub fn new(range: f64, spatial_freq: f64, radial_vel: f64) -> Self {
        Self {
            range,
            spatial_freq,
            radial_vel,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.range.is_finite() && self.spatial_freq.is_finite() && self.radial_vel.is_finite()
    }
}

fn line_of_sight(radar: &Pose2D, target: &TargetState) -> Result<(Vector2<f64>, f64)> {
    let d = target.position() - radar.position();
    let r = d.norm();
    if !(r > 0.0) {
        return Err(Error::Domain(format!(
            "target at ({}, {}) coincides with the radar position",
            target.x, target.y
        )));
    }
    Ok((d, r))
}

/// Euclidean distance from the radar to the target.
pub fn measure_range(radar: &Pose2D, target: &TargetState) -> Result<f64> {
    line_of_sight(radar, target).map(|(_, r)| r)
}

/// Projection of the target velocity onto the radar-to-target unit vector.
pub fn measure_radial_velocity(radar: &Pose2D, target: &TargetState) -> Result<f64> {
    let (d, r) = line_of_sight(radar, target)?;
    Ok(target.velocity().dot(&d) / r)
}

/// `pi * <p - p_i, mu_i> / r_i`.
pub fn measure_spatial_frequency(radar: &Pose2D, target: &TargetState) -> Result<f64> {
    let (d, r) = line_of_sight(radar, target)?;
    Ok(PI * d.dot(&radar.array_axis()) / r)
}

/// All three ideal measurements at once.
pub fn measure(radar: &Pose2D, target: &TargetState) -> Result<IdealMeasurement> {
    let (d, r) = line_of_sight(radar, target)?;
    Ok(Detection::new(
        r,
        PI * d.dot(&radar.array_axis()) / r,
        target.velocity().dot(&d) / r,
    ))
}

/// Ideal measurement together with its Jacobian with respect to `(x, y, vx, vy)`.
pub fn measure_with_jacobian(radar: &Pose2D, target: &TargetState) -> Result<(IdealMeasurement, Matrix3x4<f64>)> {
    let (d, r) = line_of_sight(radar, target)?;
    let u = d / r;
    let mu = radar.array_axis();
    let vel = target.velocity();
    let radial = vel.dot(&u);
    let u_dot_mu = u.dot(&mu);

    let d_omega = (mu - u * u_dot_mu) * (PI / r);
    let d_radial = (vel - u * radial) / r;

    #[rustfmt::skip]
    let jac = Matrix3x4::new(
        u.x,        u.y,        0.0, 0.0,
        d_omega.x,  d_omega.y,  0.0, 0.0,
        d_radial.x, d_radial.y, u.x, u.y,
    );
    Ok((Detection::new(r, PI * u_dot_mu, radial), jac))
}

/// Second derivatives of range, spatial frequency and radial velocity with
/// respect to `(x, y, vx, vy)`.
pub fn measurement_hessians(radar: &Pose2D, target: &TargetState) -> Result<[Matrix4<f64>; 3]> {
    let (d, r) = line_of_sight(radar, target)?;
    let u = d / r;
    let proj = (Matrix2::identity() - u * u.transpose()) / r;
    // Hessian over position of <w, u> for a fixed vector w
    let directional = |w: Vector2<f64>| {
        let a = w.dot(&u);
        let t = w - u * a;
        -(t * u.transpose() + u * t.transpose() + (Matrix2::identity() - u * u.transpose()) * a) / (r * r)
    };

    let mut range = Matrix4::zeros();
    range.fixed_view_mut::<2, 2>(0, 0).copy_from(&proj);

    let mut omega = Matrix4::zeros();
    omega
        .fixed_view_mut::<2, 2>(0, 0)
        .copy_from(&(directional(radar.array_axis()) * PI));

    let mut radial = Matrix4::zeros();
    radial
        .fixed_view_mut::<2, 2>(0, 0)
        .copy_from(&directional(target.velocity()));
    radial.fixed_view_mut::<2, 2>(0, 2).copy_from(&proj);
    radial.fixed_view_mut::<2, 2>(2, 0).copy_from(&proj);

    Ok([range, omega, radial])
}

/// Angle off boresight from a spatial frequency, in `[-pi/2, pi/2]`.
pub fn aoa_from_spatial_frequency(omega: f64) -> Result<f64> {
    if !(omega.abs() <= PI) {
        return Err(Error::Domain(format!("spatial frequency {omega} outside [-pi, pi]")));
    }
    Ok((omega / PI).clamp(-1.0, 1.0).asin())
}

/// Angle off boresight of a global position as seen from `radar`, in `(-pi, pi]`.
///
/// Unlike [`aoa_from_spatial_frequency`] this distinguishes targets behind the array.
pub fn angle_off_boresight(radar: &Pose2D, position: Vector2<f64>) -> f64 {
    let local = global_to_local(radar, position);
    local.x.atan2(local.y)
}

/// `R(phi) * local + (x, y)`.
pub fn local_to_global(node: &Pose2D, local_point: Vector2<f64>) -> Vector2<f64> {
    rotation(node.phi()) * local_point + node.position()
}

/// Inverse of [`local_to_global`].
pub fn global_to_local(node: &Pose2D, global_point: Vector2<f64>) -> Vector2<f64> {
    rotation(-node.phi()) * (global_point - node.position())
}

/// Converts a range / spatial-frequency pair to a point in the node's local frame.
pub fn detection_to_local_cartesian(m: &Detection) -> Result<Vector2<f64>> {
    if !(m.range > 0.0) || !m.range.is_finite() {
        return Err(Error::Domain(format!("range {} must be positive", m.range)));
    }
    let theta = aoa_from_spatial_frequency(m.spatial_freq)?;
    let (s, c) = theta.sin_cos();
    Ok(Vector2::new(m.range * s, m.range * c))
}

/// Unit line-of-sight vector in the global frame implied by a detection's angle.
pub(crate) fn line_of_sight_direction(node: &Pose2D, omega: f64) -> Result<Vector2<f64>> {
    let theta = aoa_from_spatial_frequency(omega)?;
    // boresight is phi + pi/2, and positive theta turns toward the array axis
    let bearing = node.phi() + PI / 2.0 - theta;
    Ok(Vector2::new(bearing.cos(), bearing.sin()))
}
