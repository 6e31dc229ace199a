//! Compiles a small C program against the generated header and the static
//! library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "radnet.h"

int main(void) {
    RadnetPose node = {0.0, 0.0, 0.0};
    RadnetState target = {0.0, 3.0, 0.0, 1.0};
    RadnetDetection d;
    if (radnet_measure(&node, &target, &d) != RADNET_STATUS_OK) return 1;
    if (fabs(d.range - 3.0) > 1e-12 || fabs(d.radial_vel - 1.0) > 1e-12) return 2;

    if (radnet_measure(&node, NULL, &d) != RADNET_STATUS_NULL_POINTER) return 3;
    char msg[128];
    size_t needed = 0;
    if (radnet_last_error_message(msg, sizeof msg, &needed) != RADNET_STATUS_OK) return 4;
    if (needed < 2) return 5;

    RadnetNoise noise = {0.035, 0.785398, 0.1807};
    RadnetFusion *fusion = NULL;
    if (radnet_fusion_new(&noise, NULL, &fusion) != RADNET_STATUS_OK) return 6;
    RadnetPose nodes[2] = {{0.0, 0.0, 0.0}, {0.0, 7.0, 3.141592653589793}};
    RadnetState truth = {0.8, 3.0, 0.2, -0.5};
    for (int i = 0; i < 2; i++) {
        if (radnet_measure(&nodes[i], &truth, &d) != RADNET_STATUS_OK) return 7;
        if (radnet_fusion_add(fusion, &nodes[i], &d) != RADNET_STATUS_OK) return 8;
    }
    RadnetEstimate est;
    if (radnet_fusion_solve(fusion, RADNET_MODE_BAYES, &est) != RADNET_STATUS_OK) return 9;
    if (fabs(est.state.x - truth.x) > 0.1 || fabs(est.state.y - truth.y) > 0.1) return 10;
    radnet_fusion_free(fusion);
    printf("%s ok\n", radnet_version());
    return 0;
}
"#;

fn find_compiler() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| {
            Command::new(c)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .map(String::from)
}

#[test]
fn header_compiles_and_links() {
    let Some(cc) = find_compiler() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    // target/<profile>/deps/c_header-* -> target/<profile>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libradnet_ffi.a");
    if !lib.is_file() {
        eprintln!("static library not built at {}; skipping", lib.display());
        return;
    }
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).ends_with("ok\n"));
}
