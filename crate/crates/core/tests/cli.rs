use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radnet::fusion::FusionMode;
use radnet::io::{read_csv, FusionRow, TruthRow};
use serde_json::Value;

fn radnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radnet"))
        .args(args)
        .output()
        .expect("radnet binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn short_run(out: &Path) -> PathBuf {
    let o = radnet(&[
        "run",
        "--builtin",
        "B",
        "--frames",
        "120",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("B-random").join("3")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report/report.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = short_run(tmp.path());
    for rel in [
        "tracks/truth.csv",
        "tracks/measurements.csv",
        "tracks/node1.csv",
        "tracks/node2.csv",
        "tracks/node2_in_1.csv",
        "tracks/track_fusion.csv",
        "calibration/node2.toml",
        "calibration/paired_node2.csv",
        "fusion/oneshot.csv",
        "report/report.json",
    ] {
        assert!(dir.join(rel).is_file(), "missing {rel}");
    }
}

#[test]
fn report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let r = report(&short_run(tmp.path()));
    assert_eq!(r["scenario"], "B-random");
    assert_eq!(r["seed"], 3);
    assert_eq!(r["num_frames"], 120);
    assert_eq!(r["calibration_trajectory"], "straight");
    assert_eq!(r["evaluation_trajectory"], "random");
    let cal = &r["calibration"][0];
    for key in ["node", "px", "py", "phi_deg", "j_min", "rmse", "K"] {
        assert!(!cal[key].is_null(), "calibration.{key}");
    }
    for key in [
        "position_rmse_bayes",
        "velocity_rmse_bayes",
        "position_rmse_ml",
        "velocity_rmse_ml",
    ] {
        assert!(r[key].as_f64().unwrap() > 0.0, "{key}");
    }
    assert!(r["vs_truth"]["track_fusion"]["position"].is_f64());
    assert_eq!(r["vs_truth"]["ekf"].as_array().unwrap().len(), 2);
    let frames = r["evaluated_frames"].as_array().unwrap();
    assert_eq!(frames.first().unwrap(), 20);
}

#[test]
fn report_rmse_recomputes_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = short_run(tmp.path());
    let r = report(&dir);
    let truth: Vec<TruthRow> = read_csv(&dir.join("tracks/truth.csv")).unwrap();
    let rows: Vec<FusionRow> = read_csv(&dir.join("fusion/oneshot.csv")).unwrap();
    let frames: Vec<usize> = r["evaluated_frames"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f.as_u64().unwrap() as usize)
        .collect();
    for (mode, name) in [(FusionMode::Bayes, "bayes"), (FusionMode::Ml, "ml")] {
        let (mut sp, mut sv) = (0.0, 0.0);
        for &f in &frames {
            let row = rows.iter().find(|r| r.frame == f && r.mode == mode).unwrap();
            let (est, t) = (row.state(), truth[f].state());
            sp += (est.position() - t.position()).norm_squared();
            sv += (est.velocity() - t.velocity()).norm_squared();
        }
        let n = frames.len() as f64;
        let pos = r[format!("position_rmse_{name}")].as_f64().unwrap();
        let vel = r[format!("velocity_rmse_{name}")].as_f64().unwrap();
        assert!(((sp / n).sqrt() - pos).abs() < 1e-9, "{name} position");
        assert!(((sv / n).sqrt() - vel).abs() < 1e-9, "{name} velocity");
    }
}

#[test]
fn staged_pipeline_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let whole = short_run(&tmp.path().join("whole"));
    let staged_root = tmp.path().join("staged");
    let out = staged_root.to_str().unwrap();
    for stage in ["simulate", "calibrate", "fuse"] {
        let o = radnet(&[stage, "--builtin", "B", "--frames", "120", "--seed", "3", "--out", out]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let staged = staged_root.join("B-random").join("3");
    for rel in [
        "report/report.json",
        "fusion/oneshot.csv",
        "tracks/track_fusion.csv",
        "calibration/node2.toml",
    ] {
        assert_eq!(
            std::fs::read(whole.join(rel)).unwrap(),
            std::fs::read(staged.join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn fuse_without_calibration_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(
        code(&radnet(&["simulate", "--builtin", "A", "--frames", "50", "--out", out])),
        0
    );
    let o = radnet(&["fuse", "--builtin", "A", "--frames", "50", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("calibration"));
}

#[test]
fn plot_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = short_run(tmp.path());
    let o = radnet(&["emit-plots", "--run", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for comp in ["x", "y", "vx", "vy"] {
        let text = std::fs::read_to_string(dir.join(format!("plots/{comp}.csv"))).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "frame,truth,ekf1,ekf2_in_1,track_fusion,oneshot_bayes,oneshot_ml"
        );
        for line in text.lines().skip(1) {
            let frame: usize = line.split(',').next().unwrap().parse().unwrap();
            assert!(frame < 120);
        }
    }
}

#[test]
fn noiseless_plots_match_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let cfg = config("b-noiseless.toml");
    assert_eq!(code(&radnet(&["run", "--config", &cfg, "--out", out])), 0);
    assert_eq!(code(&radnet(&["emit-plots", "--config", &cfg, "--out", out])), 0);
    let plots = tmp.path().join("B-noiseless/0/plots");
    for comp in ["x", "y", "vx", "vy"] {
        let mut rdr = csv::Reader::from_path(plots.join(format!("{comp}.csv"))).unwrap();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            let frame: usize = rec[0].parse().unwrap();
            if frame < 20 {
                continue;
            }
            let truth: f64 = rec[1].parse().unwrap();
            for col in 2..rec.len() {
                let v: f64 = rec[col].parse().unwrap();
                assert!(
                    (v - truth).abs() < 1e-6,
                    "{comp} frame {frame} column {col}: {v} vs {truth}"
                );
            }
        }
    }
}

#[test]
fn same_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = short_run(&tmp.path().join("a"));
    let b = short_run(&tmp.path().join("b"));
    for rel in ["report/report.json", "fusion/oneshot.csv", "tracks/node2_in_1.csv"] {
        assert_eq!(
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn different_seeds_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let a = short_run(tmp.path());
    let o = radnet(&[
        "run",
        "--builtin",
        "B",
        "--frames",
        "120",
        "--seed",
        "4",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let b = tmp.path().join("B-random/4");
    assert_ne!(
        std::fs::read(a.join("tracks/measurements.csv")).unwrap(),
        std::fs::read(b.join("tracks/measurements.csv")).unwrap()
    );
}

#[test]
fn missing_config_file_is_config_error() {
    let o = radnet(&["run", "--config", "/definitely/not/here.toml"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn incomplete_config_names_missing_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("b-random.toml")).unwrap();
    let cut = &text[..text.find("[noise]").unwrap()];
    let path = tmp.path().join("partial.toml");
    std::fs::write(&path, cut).unwrap();
    let o = radnet(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("noise"));
}

#[test]
fn out_of_range_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("b-random.toml")).unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, text.replace("fov_deg = 60.0", "fov_deg = -5.0")).unwrap();
    let o = radnet(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_builtin_is_config_error() {
    assert_eq!(code(&radnet(&["run", "--builtin", "Q"])), 2);
}

#[test]
fn nonconvergence_beyond_threshold_exits_4() {
    // ML on the inter-node line fails on a handful of frames; a zero
    // tolerance turns that into a failing exit status
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("c-straight.toml")).unwrap();
    let path = tmp.path().join("strict.toml");
    std::fs::write(
        &path,
        text.replace("max_nonconverged_fraction = 0.05", "max_nonconverged_fraction = 0.0"),
    )
    .unwrap();
    let o = radnet(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("C-straight/0/report/report.json").is_file());
}

#[test]
fn monte_carlo_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = radnet(&[
        "mc",
        "--builtin",
        "C",
        "--frames",
        "80",
        "--trials",
        "3",
        "--seed",
        "10",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    let written: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("C-random/mc-10-3.json")).unwrap()).unwrap();
    assert_eq!(summary, written);
}
