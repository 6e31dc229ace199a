//! Pairwise self-calibration by least-squares track matching.
//!
//! Positions are complex numbers `z = x + j y`. Given the tracks `z1[k]` and
//! `z2[k]` of one target seen by nodes 1 and 2 in their own frames, the pose
//! of node 2 in node 1's frame minimizes
//!
//! ```text
//! J(p, phi) = sum_k | z1[k] - p - e^{j phi} z2[k] |^2
//! ```
//!
//! whose global minimizer is available in closed form from the centered
//! tracks.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Pose2D};
use crate::tracking::Track;

type C64 = Complex<f64>;

/// Estimated pose of node 2 relative to node 1 with fit diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    /// Position of node 2 in node 1's frame.
    pub p21: C64,
    /// Orientation of node 2 relative to node 1, in `[0, 2pi)`.
    pub phi21: f64,
    /// Residual matching cost at the optimum, m^2.
    pub j_min: f64,
    /// `sqrt(j_min / k)`.
    pub rmse: f64,
    /// Number of paired frames.
    pub k: usize,
}

impl CalibrationResult {
    pub fn identity(k: usize) -> Self {
        Self {
            p21: C64::new(0.0, 0.0),
            phi21: 0.0,
            j_min: 0.0,
            rmse: 0.0,
            k,
        }
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.p21.re, self.p21.im, self.phi21)
    }

    pub fn to_record(&self) -> CalibrationRecord {
        CalibrationRecord {
            px: self.p21.re,
            py: self.p21.im,
            phi_deg: self.phi21.to_degrees(),
            j_min: self.j_min,
            rmse: self.rmse,
            k: self.k,
        }
    }
}

/// Flat text form of a [`CalibrationResult`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub px: f64,
    pub py: f64,
    pub phi_deg: f64,
    pub j_min: f64,
    pub rmse: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

impl CalibrationRecord {
    pub fn to_result(&self) -> CalibrationResult {
        CalibrationResult {
            p21: C64::new(self.px, self.py),
            phi21: normalize_angle(self.phi_deg.to_radians()),
            j_min: self.j_min,
            rmse: self.rmse,
            k: self.k,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat record always serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

fn check_lengths(a: &[C64], b: &[C64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < min {
        return Err(Error::Config(format!(
            "calibration needs at least {min} paired frames, got {}",
            a.len()
        )));
    }
    Ok(())
}

fn centroid(z: &[C64]) -> C64 {
    z.iter().sum::<C64>() / z.len() as f64
}

/// Track matching cost for a candidate pose.
pub fn calibration_cost(track1: &[C64], track2: &[C64], p: C64, phi: f64) -> Result<f64> {
    check_lengths(track1, track2, 1)?;
    let rot = C64::from_polar(1.0, phi);
    Ok(track1
        .iter()
        .zip(track2)
        .map(|(z1, z2)| (z1 - p - rot * z2).norm_sqr())
        .sum())
}

/// Closed-form minimum cost `||z1c||^2 + ||z2c||^2 - 2 |z1c^H z2c|` over centered tracks.
///
/// Suffers cancellation when the fit is near exact; [`calibrate_pair`]
/// evaluates the residual directly instead.
pub fn closed_form_min_cost(track1: &[C64], track2: &[C64]) -> Result<f64> {
    check_lengths(track1, track2, 1)?;
    let (c1, c2) = (centroid(track1), centroid(track2));
    let mut e1 = 0.0;
    let mut e2 = 0.0;
    let mut cross = C64::new(0.0, 0.0);
    for (a, b) in track1.iter().zip(track2) {
        let (a, b) = (a - c1, b - c2);
        e1 += a.norm_sqr();
        e2 += b.norm_sqr();
        cross += a.conj() * b;
    }
    Ok(e1 + e2 - 2.0 * cross.norm())
}

/// Globally optimal relative pose of node 2 from paired positions.
pub fn calibrate_pair(track1: &[C64], track2: &[C64]) -> Result<CalibrationResult> {
    check_lengths(track1, track2, 2)?;
    let (c1, c2) = (centroid(track1), centroid(track2));
    let mut e1 = 0.0;
    let mut e2 = 0.0;
    let mut cross = C64::new(0.0, 0.0);
    for (a, b) in track1.iter().zip(track2) {
        let (a, b) = (a - c1, b - c2);
        e1 += a.norm_sqr();
        e2 += b.norm_sqr();
        cross += a.conj() * b;
    }
    let scale = (e1 * e2).sqrt();
    if !(scale > 0.0) || cross.norm() <= 1e-14 * scale {
        return Err(Error::Degenerate(
            "centered tracks are orthogonal or empty; the relative orientation is undefined \
             (is the target stationary?)"
                .into(),
        ));
    }

    let phi21 = normalize_angle(-cross.arg());
    let rot = C64::from_polar(1.0, phi21);
    let p21 = c1 - rot * c2;
    // equal to the closed-form minimum, evaluated without cancellation
    let j_min: f64 = track1
        .iter()
        .zip(track2)
        .map(|(a, b)| ((a - c1) - rot * (b - c2)).norm_sqr())
        .sum();
    let k = track1.len();
    Ok(CalibrationResult {
        p21,
        phi21,
        j_min,
        rmse: (j_min / k as f64).sqrt(),
        k,
    })
}

/// Maps node-2 positions into node 1's frame.
pub fn apply_calibration(result: &CalibrationResult, track2: &[C64]) -> Vec<C64> {
    let rot = C64::from_polar(1.0, result.phi21);
    track2.iter().map(|z| result.p21 + rot * z).collect()
}

/// Positions of two tracks on their common frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTracks {
    pub frames: Vec<usize>,
    pub track1: Vec<C64>,
    pub track2: Vec<C64>,
}

/// Pairs two tracks on frame index, dropping frames missing from either.
pub fn pair_tracks(track1: &Track, track2: &Track) -> PairedTracks {
    let mut out = PairedTracks {
        frames: Vec::new(),
        track1: Vec::new(),
        track2: Vec::new(),
    };
    for p in &track1.points {
        if let Some(q) = track2.get(p.frame_index) {
            out.frames.push(p.frame_index);
            out.track1.push(p.position());
            out.track2.push(q.position());
        }
    }
    out
}

/// Calibrates node 2 against node 1 from their local tracks.
pub fn calibrate_tracks(track1: &Track, track2: &Track) -> Result<(CalibrationResult, PairedTracks)> {
    let paired = pair_tracks(track1, track2);
    let result = calibrate_pair(&paired.track1, &paired.track2)?;
    Ok((result, paired))
}

/// Search settings for [`brute_force_calibration`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSearch {
    /// Orientation grid spacing, radians; at most 1e-3.
    pub phi_step: f64,
    /// Golden-section bracket width at which refinement stops.
    pub refine_tol: f64,
}

impl Default for GridSearch {
    fn default() -> Self {
        Self {
            phi_step: 1e-3,
            refine_tol: 1e-12,
        }
    }
}

/// Outcome of the exhaustive orientation search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForceResult {
    pub p: C64,
    pub phi: f64,
    pub cost: f64,
}

/// Exhaustive search over orientation with the translation profiled out, then
/// golden-section refinement around the best grid cell.
///
/// Independent of the closed form: each candidate is scored with
/// [`calibration_cost`].
pub fn brute_force_calibration(track1: &[C64], track2: &[C64], grid: &GridSearch) -> Result<BruteForceResult> {
    check_lengths(track1, track2, 2)?;
    if !(grid.phi_step > 0.0 && grid.phi_step <= 1e-3) {
        return Err(Error::Config(format!(
            "phi_step must lie in (0, 1e-3], got {}",
            grid.phi_step
        )));
    }
    let (c1, c2) = (centroid(track1), centroid(track2));
    let profile = |phi: f64| -> (C64, f64) {
        let p = c1 - C64::from_polar(1.0, phi) * c2;
        let cost = calibration_cost(track1, track2, p, phi).expect("lengths checked");
        (p, cost)
    };

    let steps = (TAU / grid.phi_step).ceil() as usize;
    let step = TAU / steps as f64;
    let (mut best_phi, mut best_cost) = (0.0, f64::INFINITY);
    for i in 0..steps {
        let phi = i as f64 * step;
        let (_, cost) = profile(phi);
        if cost < best_cost {
            best_cost = cost;
            best_phi = phi;
        }
    }

    // golden-section search on [best - step, best + step]
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (best_phi - step, best_phi + step);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (profile(x1).1, profile(x2).1);
    while b - a > grid.refine_tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = profile(x1).1;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = profile(x2).1;
        }
    }
    let mid = 0.5 * (a + b);
    let (p_mid, f_mid) = profile(mid);
    let (phi, p, cost) = if f_mid <= best_cost {
        (mid, p_mid, f_mid)
    } else {
        (best_phi, profile(best_phi).0, best_cost)
    };
    Ok(BruteForceResult {
        p,
        phi: normalize_angle(phi),
        cost,
    })
}
