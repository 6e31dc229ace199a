//! CSV import and export.
//!
//! Every file has a header row, uses `.` as the decimal separator and LF line
//! endings. Node ids in files are 1-based. Floats are written in shortest
//! round-trip form, so reading a file back reproduces the values exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Matrix4;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionEstimate, FusionMode};
use crate::geometry::{Detection, Pose2D, TargetState};
use crate::scene::MeasurementFrame;
use crate::tracking::{Track, TrackPoint};

/// Writes `rows` to `path` with an optional `# ...` comment line before the header.
pub fn write_csv<T: Serialize>(path: &Path, comment: Option<&str>, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads every row of a CSV file, skipping `#` comment lines.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(BufReader::new(file));
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// First line of a file when it is a `# ...` comment.
pub fn read_comment(path: &Path) -> Result<Option<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(file)
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    Ok(line.strip_prefix("# ").map(|s| s.trim_end().to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

pub fn truth_rows(truth: &[TargetState]) -> Vec<TruthRow> {
    truth
        .iter()
        .enumerate()
        .map(|(frame, s)| TruthRow {
            frame,
            x: s.x,
            y: s.y,
            vx: s.vx,
            vy: s.vy,
        })
        .collect()
}

impl TruthRow {
    pub fn state(&self) -> TargetState {
        TargetState::new(self.x, self.y, self.vx, self.vy)
    }
}

/// One (frame, node) entry; the three values are empty when the node saw nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub frame: usize,
    pub node: usize,
    pub range: Option<f64>,
    pub omega: Option<f64>,
    pub vr: Option<f64>,
}

pub fn measurement_rows(frames: &[MeasurementFrame]) -> Vec<MeasurementRow> {
    frames
        .iter()
        .flat_map(|f| {
            f.per_node.iter().enumerate().map(move |(i, d)| MeasurementRow {
                frame: f.frame_index,
                node: i + 1,
                range: d.map(|d| d.range),
                omega: d.map(|d| d.spatial_freq),
                vr: d.map(|d| d.radial_vel),
            })
        })
        .collect()
}

/// Regroups measurement rows into frames of `num_nodes` entries.
pub fn frames_from_rows(rows: &[MeasurementRow], num_nodes: usize) -> Result<Vec<MeasurementFrame>> {
    let mut frames: Vec<MeasurementFrame> = Vec::new();
    for row in rows {
        if row.node == 0 || row.node > num_nodes {
            return Err(Error::Config(format!(
                "measurement row for frame {} names node {} of {num_nodes}",
                row.frame, row.node
            )));
        }
        if frames.last().is_none_or(|f| f.frame_index != row.frame) {
            if frames.last().is_some_and(|f| f.frame_index > row.frame) {
                return Err(Error::Config("measurement rows must be sorted by frame".into()));
            }
            frames.push(MeasurementFrame {
                frame_index: row.frame,
                per_node: vec![None; num_nodes],
            });
        }
        let detection = match (row.range, row.omega, row.vr) {
            (Some(r), Some(w), Some(v)) => Some(Detection::new(r, w, v)),
            (None, None, None) => None,
            _ => {
                return Err(Error::Config(format!(
                    "frame {} node {} has a partial detection",
                    row.frame, row.node
                )))
            }
        };
        frames.last_mut().expect("pushed above").per_node[row.node - 1] = detection;
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub p11: f64,
    pub p22: f64,
    pub p33: f64,
    pub p44: f64,
}

impl TrackRow {
    pub fn state(&self) -> TargetState {
        TargetState::new(self.x, self.y, self.vx, self.vy)
    }
}

pub fn track_rows(track: &Track) -> Vec<TrackRow> {
    track
        .points
        .iter()
        .map(|p: &TrackPoint| TrackRow {
            frame: p.frame_index,
            x: p.state.x,
            y: p.state.y,
            vx: p.state.vx,
            vy: p.state.vy,
            p11: p.covariance[(0, 0)],
            p22: p.covariance[(1, 1)],
            p33: p.covariance[(2, 2)],
            p44: p.covariance[(3, 3)],
        })
        .collect()
}

/// Header comment naming the frame a track is expressed in.
pub fn track_comment(track: &Track) -> String {
    let coords = if track.local { "local" } else { "global" };
    format!("coords={coords} node={}", track.node + 1)
}

pub fn write_track(path: &Path, track: &Track) -> Result<()> {
    write_csv(path, Some(&track_comment(track)), &track_rows(track))
}

/// Per-frame one-shot estimate with the upper triangle of its covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub frame: usize,
    pub mode: FusionMode,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub converged: bool,
    pub cond: f64,
    pub c11: Option<f64>,
    pub c12: Option<f64>,
    pub c13: Option<f64>,
    pub c14: Option<f64>,
    pub c22: Option<f64>,
    pub c23: Option<f64>,
    pub c24: Option<f64>,
    pub c33: Option<f64>,
    pub c34: Option<f64>,
    pub c44: Option<f64>,
}

impl FusionRow {
    pub fn new(frame: usize, est: &FusionEstimate, covariance: Option<&Matrix4<f64>>) -> Self {
        let c = |i: usize, j: usize| covariance.map(|m| m[(i, j)]);
        Self {
            frame,
            mode: est.mode,
            x: est.state.x,
            y: est.state.y,
            vx: est.state.vx,
            vy: est.state.vy,
            converged: est.converged,
            cond: est.conditioning,
            c11: c(0, 0),
            c12: c(0, 1),
            c13: c(0, 2),
            c14: c(0, 3),
            c22: c(1, 1),
            c23: c(1, 2),
            c24: c(1, 3),
            c33: c(2, 2),
            c34: c(2, 3),
            c44: c(3, 3),
        }
    }

    pub fn state(&self) -> TargetState {
        TargetState::new(self.x, self.y, self.vx, self.vy)
    }

    pub fn covariance(&self) -> Option<Matrix4<f64>> {
        let u = [
            self.c11?, self.c12?, self.c13?, self.c14?, self.c22?, self.c23?, self.c24?, self.c33?, self.c34?,
            self.c44?,
        ];
        #[rustfmt::skip]
        let m = Matrix4::new(
            u[0], u[1], u[2], u[3],
            u[1], u[4], u[5], u[6],
            u[2], u[5], u[7], u[8],
            u[3], u[6], u[8], u[9],
        );
        Some(m)
    }
}

/// Positions of two tracks on their common frames, each in its own node's frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Node pose as written next to a calibration record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub node: usize,
    pub x: f64,
    pub y: f64,
    pub phi_deg: f64,
}

impl PoseRow {
    pub fn new(node_index: usize, pose: &Pose2D) -> Self {
        Self {
            node: node_index + 1,
            x: pose.x,
            y: pose.y,
            phi_deg: pose.phi().to_degrees(),
        }
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.x, self.y, self.phi_deg.to_radians())
    }
}
