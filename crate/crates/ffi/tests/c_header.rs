//! Compiles and runs a C program against the generated header and the static
//! library. Skipped when no C compiler is on PATH.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "dysseg.h"

int main(void) {
    size_t n = 0, xs[9], ys[9];
    if (dys_tessellate(1024, 1024, 512, 184, xs, ys, 9, &n) != DYS_STATUS_OK || n != 9) return 1;
    double m[3];
    if (dys_case_metrics(50, 50, 0, m) != DYS_STATUS_OK || m[2] != 0.5) return 2;
    DysModel *model = NULL;
    if (dys_model_new_toy(0, &model) != DYS_STATUS_OK) return 3;
    if (dys_model_input_size(model) != 64) return 4;
    dys_model_free(model);
    DysSlide *slide = NULL;
    if (dys_slide_open("/nonexistent", &slide) != DYS_STATUS_MISSING_PATH) return 5;
    if (strstr(dys_last_error(), "/nonexistent") == NULL) return 6;
    printf("%s\n", dys_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps/
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
}

#[test]
fn c_program_links_against_the_header() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let lib = target_dir().join("libdysseg_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let o = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
