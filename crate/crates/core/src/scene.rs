//! Ground-truth trajectories and noisy per-node detections.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, angle_off_boresight, Detection, Pose2D, TargetState};

/// Table I frame duration.
pub const DEFAULT_FRAME_DURATION: f64 = 0.150;
/// Frames per calibration sequence.
pub const DEFAULT_NUM_FRAMES: usize = 600;
/// Maximum unambiguous range of the chirp configuration, meters.
pub const MAX_UNAMBIGUOUS_RANGE: f64 = 18.07;
/// Half-width of the azimuth field of view, degrees.
pub const DEFAULT_FOV_DEG: f64 = 60.0;
/// Upper bound on target speed (human walking and running).
pub const MAX_TARGET_SPEED: f64 = 3.5;

/// Builds a deterministic generator for one independent purpose of a seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TRAJECTORY_STREAM: u64 = 1;
const MEASUREMENT_STREAM: u64 = 2;

/// Standard deviations of the three measurement channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// meters
    pub sigma_r: f64,
    /// radians
    pub sigma_omega: f64,
    /// meters/second
    pub sigma_v: f64,
}

impl Default for NoiseConfig {
    /// Range, spatial-frequency and Doppler bin sizes of the reference radar.
    fn default() -> Self {
        Self {
            sigma_r: 0.035,
            sigma_omega: PI / 4.0,
            sigma_v: 0.1807,
        }
    }
}

impl NoiseConfig {
    /// All three sigmas set to the same value.
    pub fn uniform(sigma: f64) -> Self {
        Self {
            sigma_r: sigma,
            sigma_omega: sigma,
            sigma_v: sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_r", self.sigma_r),
            ("sigma_omega", self.sigma_omega),
            ("sigma_v", self.sigma_v),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("noise.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn sigmas(&self) -> [f64; 3] {
        [self.sigma_r, self.sigma_omega, self.sigma_v]
    }
}

fn default_smoothness() -> f64 {
    2.0
}

/// Shape of the ground-truth target motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Constant-velocity walk along a line.
    ///
    /// With `path_length` set the target paces back and forth between
    /// `start` and `start + path_length * (cos heading, sin heading)`.
    Straight {
        start: [f64; 2],
        speed: f64,
        #[serde(with = "degrees", rename = "heading_deg")]
        heading: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path_length: Option<f64>,
    },
    /// Mean-reverting random velocity walk with a speed cap.
    ///
    /// `smoothness` is the velocity correlation time in seconds. With
    /// `region` set the target is reflected at the walls of the box
    /// `start +- region`.
    Random {
        start: [f64; 2],
        speed_cap: f64,
        #[serde(default = "default_smoothness")]
        smoothness: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region: Option<[f64; 2]>,
    },
}

mod degrees {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rad: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(rad.to_degrees())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d).map(f64::to_radians)
    }
}

/// Which family of trajectory to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Straight,
    Random,
}

impl TrajectoryKind {
    pub fn other(self) -> Self {
        match self {
            TrajectoryKind::Straight => TrajectoryKind::Random,
            TrajectoryKind::Random => TrajectoryKind::Straight,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Straight => "straight",
            TrajectoryKind::Random => "random",
        }
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "straight" => Ok(TrajectoryKind::Straight),
            "random" => Ok(TrajectoryKind::Random),
            other => Err(Error::Config(format!("unknown trajectory kind `{other}`"))),
        }
    }
}

impl TrajectorySpec {
    pub fn kind(&self) -> TrajectoryKind {
        match self {
            TrajectorySpec::Straight { .. } => TrajectoryKind::Straight,
            TrajectorySpec::Random { .. } => TrajectoryKind::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_speed = |name: &str, v: f64| {
            if v > 0.0 && v <= MAX_TARGET_SPEED {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "trajectory.{name} must lie in (0, {MAX_TARGET_SPEED}] m/s, got {v}"
                )))
            }
        };
        match *self {
            TrajectorySpec::Straight {
                speed,
                path_length,
                start,
                heading,
            } => {
                check_speed("speed", speed)?;
                if !(start[0].is_finite() && start[1].is_finite() && heading.is_finite()) {
                    return Err(Error::Config("trajectory start/heading must be finite".into()));
                }
                if let Some(len) = path_length {
                    if !(len > 0.0 && len.is_finite()) {
                        return Err(Error::Config(format!(
                            "trajectory.path_length must be positive, got {len}"
                        )));
                    }
                }
            }
            TrajectorySpec::Random {
                speed_cap,
                smoothness,
                region,
                start,
            } => {
                check_speed("speed_cap", speed_cap)?;
                if !(start[0].is_finite() && start[1].is_finite()) {
                    return Err(Error::Config("trajectory start must be finite".into()));
                }
                if !(smoothness > 0.0 && smoothness.is_finite()) {
                    return Err(Error::Config(format!(
                        "trajectory.smoothness must be positive, got {smoothness}"
                    )));
                }
                if let Some([hx, hy]) = region {
                    if !(hx > 0.0 && hy > 0.0 && hx.is_finite() && hy.is_finite()) {
                        return Err(Error::Config("trajectory.region half-widths must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reflects a coordinate into `[lo, hi]`, returning whether the velocity flips.
fn reflect(value: &mut f64, lo: f64, hi: f64) -> bool {
    let mut flipped = false;
    // a single step never crosses the whole interval for sane speeds, but loop anyway
    while *value < lo || *value > hi {
        if *value < lo {
            *value = 2.0 * lo - *value;
        } else {
            *value = 2.0 * hi - *value;
        }
        flipped = !flipped;
    }
    flipped
}

/// Generates `num_frames` ground-truth states spaced `dt` apart.
pub fn generate_trajectory(spec: &TrajectorySpec, num_frames: usize, dt: f64, seed: u64) -> Result<Vec<TargetState>> {
    spec.validate()?;
    if num_frames < 2 {
        return Err(Error::Config(format!("num_frames must be >= 2, got {num_frames}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("frame_duration must be positive, got {dt}")));
    }

    let mut out = Vec::with_capacity(num_frames);
    match *spec {
        TrajectorySpec::Straight {
            start,
            speed,
            heading,
            path_length,
        } => {
            let dir = Vector2::new(heading.cos(), heading.sin());
            let origin = Vector2::new(start[0], start[1]);
            let mut s = 0.0;
            let mut sign = 1.0;
            for _ in 0..num_frames {
                let p = origin + dir * s;
                let v = dir * (sign * speed);
                out.push(TargetState::new(p.x, p.y, v.x, v.y));
                s += sign * speed * dt;
                if let Some(len) = path_length {
                    if reflect(&mut s, 0.0, len) {
                        sign = -sign;
                    }
                }
            }
        }
        TrajectorySpec::Random {
            start,
            speed_cap,
            smoothness,
            region,
        } => {
            let mut rng = seeded_rng(seed, TRAJECTORY_STREAM);
            // stationary per-axis velocity spread, as a fraction of the cap
            let spread = 0.4 * speed_cap;
            let decay = (-dt / smoothness).exp();
            let drive = spread * (1.0 - decay * decay).sqrt();
            let clamp = |v: Vector2<f64>| {
                let n = v.norm();
                if n > speed_cap {
                    v * (speed_cap / n)
                } else {
                    v
                }
            };

            let mut p = Vector2::new(start[0], start[1]);
            let v0: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let mut v = clamp(Vector2::new(v0[0], v0[1]) * spread);
            for _ in 0..num_frames {
                out.push(TargetState::new(p.x, p.y, v.x, v.y));
                p += v * dt;
                if let Some([hx, hy]) = region {
                    if reflect(&mut p.x, start[0] - hx, start[0] + hx) {
                        v.x = -v.x;
                    }
                    if reflect(&mut p.y, start[1] - hy, start[1] + hy) {
                        v.y = -v.y;
                    }
                }
                let ex: f64 = StandardNormal.sample(&mut rng);
                let ey: f64 = StandardNormal.sample(&mut rng);
                v = clamp(v * decay + Vector2::new(ex, ey) * drive);
            }
        }
    }
    Ok(out)
}

/// Static description of a simulated network and its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Global node poses; the first node defines the reference frame.
    pub nodes: Vec<Pose2D>,
    pub trajectory: TrajectorySpec,
    #[serde(default = "default_frame_duration")]
    pub frame_duration: f64,
    #[serde(default = "default_num_frames")]
    pub num_frames: usize,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
}

fn default_name() -> String {
    "custom".to_string()
}
fn default_frame_duration() -> f64 {
    DEFAULT_FRAME_DURATION
}
fn default_num_frames() -> usize {
    DEFAULT_NUM_FRAMES
}
fn default_fov() -> f64 {
    DEFAULT_FOV_DEG
}
fn default_max_range() -> f64 {
    MAX_UNAMBIGUOUS_RANGE
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes.len() < 2 {
            return Err(Error::Config(format!(
                "at least 2 nodes are required, got {}",
                self.nodes.len()
            )));
        }
        if !self.nodes[0].approx_eq(&Pose2D::origin(), 0.0, 0.0) {
            return Err(Error::Config(
                "node 1 is the reference and must sit at the origin with phi = 0".into(),
            ));
        }
        if self.num_frames < 2 {
            return Err(Error::Config(format!(
                "num_frames must be >= 2, got {}",
                self.num_frames
            )));
        }
        if !(self.frame_duration > 0.0 && self.frame_duration.is_finite()) {
            return Err(Error::Config(format!(
                "frame_duration must be positive, got {}",
                self.frame_duration
            )));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 90.0) {
            return Err(Error::Config(format!(
                "fov_deg must lie in (0, 90], got {}",
                self.fov_deg
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config(format!(
                "max_range must be positive, got {}",
                self.max_range
            )));
        }
        self.noise.validate()?;
        self.trajectory.validate()
    }

    /// True when `target` lies inside `node`'s angular field of view and range limit.
    pub fn is_visible(&self, node: &Pose2D, target: &TargetState) -> bool {
        let r = (target.position() - node.position()).norm();
        if !(r > 0.0) || r > self.max_range {
            return false;
        }
        angle_off_boresight(node, target.position()).abs() <= self.fov_deg.to_radians()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// One frame's detections, indexed by node; `None` when the node saw nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub frame_index: usize,
    pub per_node: Vec<Option<Detection>>,
}

impl MeasurementFrame {
    pub fn detections(&self) -> impl Iterator<Item = (usize, &Detection)> {
        self.per_node
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.as_ref().map(|d| (i, d)))
    }

    pub fn all_present(&self) -> bool {
        self.per_node.iter().all(Option::is_some)
    }
}

/// Adds independent Gaussian noise to the ideal measurements of every visible node.
pub fn synthesize_measurements(truth: &[TargetState], config: &ScenarioConfig) -> Result<Vec<MeasurementFrame>> {
    if truth.len() != config.num_frames {
        return Err(Error::Config(format!(
            "truth has {} states but num_frames is {}",
            truth.len(),
            config.num_frames
        )));
    }
    config.noise.validate()?;
    let mut rng = seeded_rng(config.rng_seed, MEASUREMENT_STREAM);
    let normal = |sigma: f64| Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()));
    let (nr, nw, nv) = (
        normal(config.noise.sigma_r)?,
        normal(config.noise.sigma_omega)?,
        normal(config.noise.sigma_v)?,
    );

    truth
        .iter()
        .enumerate()
        .map(|(k, target)| {
            let per_node = config
                .nodes
                .iter()
                .map(|node| {
                    // draw noise unconditionally so visibility changes never shift the stream
                    let (er, ew, ev) = (nr.sample(&mut rng), nw.sample(&mut rng), nv.sample(&mut rng));
                    if !config.is_visible(node, target) {
                        return Ok(None);
                    }
                    let ideal = geometry::measure(node, target)?;
                    Ok(Some(Detection::new(
                        ideal.range + er,
                        (ideal.spatial_freq + ew).clamp(-PI, PI),
                        ideal.radial_vel + ev,
                    )))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MeasurementFrame {
                frame_index: k,
                per_node,
            })
        })
        .collect()
}

/// Ground truth plus the detections generated from it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub truth: Vec<TargetState>,
    pub frames: Vec<MeasurementFrame>,
}

/// Runs trajectory generation and measurement synthesis for a scenario.
pub fn simulate(config: &ScenarioConfig) -> Result<Simulation> {
    config.validate()?;
    let truth = generate_trajectory(
        &config.trajectory,
        config.num_frames,
        config.frame_duration,
        config.rng_seed,
    )?;
    let frames = synthesize_measurements(&truth, config)?;
    Ok(Simulation { truth, frames })
}

/// Built-in two-node geometries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BuiltinScenario {
    A,
    B,
    C,
}

impl BuiltinScenario {
    pub const ALL: [BuiltinScenario; 3] = [BuiltinScenario::A, BuiltinScenario::B, BuiltinScenario::C];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinScenario::A => "A",
            BuiltinScenario::B => "B",
            BuiltinScenario::C => "C",
        }
    }

    /// Global pose of node 2. Node 1 sits at the origin looking along +y.
    pub fn node2_pose(self) -> Pose2D {
        let (tx, ty) = (TARGET_CENTER[0], TARGET_CENTER[1]);
        match self {
            // line of sight to the target center at 135 degrees from node 1's
            BuiltinScenario::A => {
                let dir = Vector2::new(-1.0, 1.0).normalize();
                // distance along dir from the target center putting node 2 at BASELINE
                let b = ty * dir.y;
                let d = -b + (b * b - ty * ty + BASELINE * BASELINE).sqrt();
                let p = Vector2::new(tx, ty) + dir * d;
                Pose2D::new(p.x, p.y, 5.0 * PI / 4.0)
            }
            // arrays at 90 degrees, node 2 looking along -x at the target center
            BuiltinScenario::B => {
                let dx = (BASELINE * BASELINE - ty * ty).sqrt();
                Pose2D::new(tx + dx, ty, FRAC_PI_2)
            }
            BuiltinScenario::C => Pose2D::new(0.0, BASELINE, PI),
        }
    }
}

impl std::str::FromStr for BuiltinScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(BuiltinScenario::A),
            "B" => Ok(BuiltinScenario::B),
            "C" => Ok(BuiltinScenario::C),
            other => Err(Error::Config(format!("unknown builtin scenario `{other}`"))),
        }
    }
}

/// Node separation of the built-in geometries, meters.
pub const BASELINE: f64 = 7.0;
/// Center of the region the built-in trajectories move in.
pub const TARGET_CENTER: [f64; 2] = [0.0, 3.5];

/// Trajectory used by every built-in geometry.
pub fn builtin_trajectory(kind: TrajectoryKind) -> TrajectorySpec {
    match kind {
        TrajectoryKind::Straight => TrajectorySpec::Straight {
            start: [TARGET_CENTER[0], TARGET_CENTER[1] - 2.0],
            speed: 0.5,
            heading: FRAC_PI_2,
            path_length: Some(4.0),
        },
        TrajectoryKind::Random => TrajectorySpec::Random {
            start: TARGET_CENTER,
            speed_cap: 1.0,
            smoothness: default_smoothness(),
            region: Some([0.75, 2.0]),
        },
    }
}

/// Two-node configuration for one of the built-in geometries.
pub fn builtin_scenario(name: BuiltinScenario, trajectory: TrajectoryKind) -> ScenarioConfig {
    ScenarioConfig {
        name: name.name().to_string(),
        nodes: vec![Pose2D::origin(), name.node2_pose()],
        trajectory: builtin_trajectory(trajectory),
        frame_duration: DEFAULT_FRAME_DURATION,
        num_frames: DEFAULT_NUM_FRAMES,
        noise: NoiseConfig::default(),
        rng_seed: 0,
        fov_deg: DEFAULT_FOV_DEG,
        max_range: MAX_UNAMBIGUOUS_RANGE,
    }
}

/// Looks up a built-in scenario by name.
pub fn builtin_scenario_by_name(name: &str, trajectory: TrajectoryKind) -> Result<ScenarioConfig> {
    Ok(builtin_scenario(name.parse()?, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn straight_euler_integration() {
        let spec = TrajectorySpec::Straight {
            start: [0.0, 0.0],
            speed: 1.0,
            heading: 0.0,
            path_length: None,
        };
        let t = generate_trajectory(&spec, 3, 0.15, 0).unwrap();
        let xs: Vec<_> = t.iter().map(|s| (s.x, s.y)).collect();
        assert_eq!(xs[0], (0.0, 0.0));
        assert_relative_eq!(xs[1].0, 0.15);
        assert_relative_eq!(xs[2].0, 0.30);
        assert!(t.iter().all(|s| s.vx == 1.0 && s.vy == 0.0));
    }

    #[test]
    fn straight_pacing_stays_on_segment() {
        let spec = builtin_trajectory(TrajectoryKind::Straight);
        let t = generate_trajectory(&spec, 600, 0.15, 0).unwrap();
        for s in &t {
            assert!(s.x.abs() < 1e-12);
            assert!(s.y >= 1.5 - 1e-12 && s.y <= 5.5 + 1e-12);
            assert_relative_eq!(s.speed(), 0.5);
        }
        assert!(t.iter().any(|s| s.vy < 0.0));
    }

    #[test]
    fn random_respects_speed_cap() {
        let spec = TrajectorySpec::Random {
            start: [0.0, 0.0],
            speed_cap: 2.0,
            smoothness: 2.0,
            region: None,
        };
        let t = generate_trajectory(&spec, 10_000, 0.15, 11).unwrap();
        let max = t.iter().map(TargetState::speed).fold(0.0, f64::max);
        assert!(max <= 2.0 + 1e-12, "max speed {max}");
        assert!(max > 1.0);
    }

    #[test]
    fn random_region_confines_target() {
        let spec = builtin_trajectory(TrajectoryKind::Random);
        let t = generate_trajectory(&spec, 5000, 0.15, 3).unwrap();
        for s in &t {
            assert!((s.x - TARGET_CENTER[0]).abs() <= 0.75 + 1e-12);
            assert!((s.y - TARGET_CENTER[1]).abs() <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn trajectories_are_deterministic() {
        let spec = builtin_trajectory(TrajectoryKind::Random);
        let a = generate_trajectory(&spec, 500, 0.15, 42).unwrap();
        let b = generate_trajectory(&spec, 500, 0.15, 42).unwrap();
        let c = generate_trajectory(&spec, 500, 0.15, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn trajectory_rejects_bad_config() {
        let spec = builtin_trajectory(TrajectoryKind::Straight);
        assert!(matches!(generate_trajectory(&spec, 1, 0.15, 0), Err(Error::Config(_))));
        let fast = TrajectorySpec::Straight {
            start: [0.0, 0.0],
            speed: 4.0,
            heading: 0.0,
            path_length: None,
        };
        assert!(generate_trajectory(&fast, 10, 0.15, 0).is_err());
    }

    #[test]
    fn near_zero_noise_reproduces_ideal_measurements() {
        let mut cfg = builtin_scenario(BuiltinScenario::B, TrajectoryKind::Random);
        cfg.noise = NoiseConfig::uniform(1e-15);
        let sim = simulate(&cfg).unwrap();
        for (frame, target) in sim.frames.iter().zip(&sim.truth) {
            for (i, det) in frame.detections() {
                let ideal = geometry::measure(&cfg.nodes[i], target).unwrap();
                assert!((det.range - ideal.range).abs() < 1e-13);
                assert!((det.spatial_freq - ideal.spatial_freq).abs() < 1e-13);
                assert!((det.radial_vel - ideal.radial_vel).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn target_beyond_max_range_is_absent() {
        let mut cfg = builtin_scenario(BuiltinScenario::C, TrajectoryKind::Straight);
        cfg.num_frames = 2;
        let truth = vec![TargetState::new(0.0, 20.0, 0.0, 0.0); 2];
        let frames = synthesize_measurements(&truth, &cfg).unwrap();
        // 20 m from node 1; node 2 at (0, 7) looks away from it
        assert!(frames
            .iter()
            .all(|f| f.per_node[0].is_none() && f.per_node[1].is_none()));
    }

    #[test]
    fn synthesize_checks_length() {
        let cfg = builtin_scenario(BuiltinScenario::A, TrajectoryKind::Straight);
        let truth = vec![TargetState::new(0.0, 3.0, 0.0, 0.0); 5];
        assert!(matches!(synthesize_measurements(&truth, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn visibility_matches_fov_and_range() {
        let cfg = builtin_scenario(BuiltinScenario::A, TrajectoryKind::Straight);
        let o = Pose2D::origin();
        let at = |deg: f64, r: f64| {
            let a = deg.to_radians();
            TargetState::new(r * a.sin(), r * a.cos(), 0.0, 0.0)
        };
        assert!(cfg.is_visible(&o, &at(0.0, 5.0)));
        assert!(cfg.is_visible(&o, &at(59.9, 5.0)));
        assert!(!cfg.is_visible(&o, &at(60.1, 5.0)));
        assert!(!cfg.is_visible(&o, &at(-61.0, 5.0)));
        assert!(!cfg.is_visible(&o, &at(180.0, 5.0)));
        assert!(cfg.is_visible(&o, &at(10.0, 18.0)));
        assert!(!cfg.is_visible(&o, &at(10.0, 18.1)));
    }

    #[test]
    fn builtin_poses() {
        let c = builtin_scenario(BuiltinScenario::C, TrajectoryKind::Straight);
        assert!(c.nodes[1].approx_eq(&Pose2D::new(0.0, 7.0, PI), 1e-15, 1e-15));
        for b in BuiltinScenario::ALL {
            let n2 = b.node2_pose();
            assert_relative_eq!(n2.position().norm(), BASELINE, epsilon = 1e-12);
            // node 2 looks at the target center
            let center = Vector2::new(TARGET_CENTER[0], TARGET_CENTER[1]);
            assert!(angle_off_boresight(&n2, center).abs() < 1e-9, "{b:?}");
        }
        let b = builtin_scenario(BuiltinScenario::B, TrajectoryKind::Straight);
        let a = builtin_scenario(BuiltinScenario::A, TrajectoryKind::Straight);
        assert_relative_eq!(b.nodes[1].phi(), FRAC_PI_2);
        assert_eq!(a.noise, b.noise);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.num_frames, b.num_frames);
        assert_ne!(a.nodes[1], b.nodes[1]);
        assert!("D".parse::<BuiltinScenario>().is_err());
    }

    #[test]
    fn builtins_see_the_straight_trajectory() {
        for b in BuiltinScenario::ALL {
            let cfg = builtin_scenario(b, TrajectoryKind::Straight);
            let sim = simulate(&cfg).unwrap();
            for node in 0..2 {
                let seen = sim.frames.iter().filter(|f| f.per_node[node].is_some()).count();
                assert!(seen as f64 >= 0.95 * cfg.num_frames as f64, "{b:?} node {node}: {seen}");
            }
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = builtin_scenario(BuiltinScenario::A, TrajectoryKind::Random);
        let text = cfg.to_toml_string().unwrap();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.trajectory, cfg.trajectory);
        assert!(back.nodes[1].approx_eq(&cfg.nodes[1], 1e-12, 1e-12));
    }

    #[test]
    fn config_rejects_non_origin_reference() {
        let mut cfg = builtin_scenario(BuiltinScenario::A, TrajectoryKind::Random);
        cfg.nodes[0] = Pose2D::new(1.0, 0.0, 0.0);
        assert!(cfg.validate().is_err());
        cfg.nodes.truncate(1);
        assert!(cfg.validate().is_err());
    }
}
