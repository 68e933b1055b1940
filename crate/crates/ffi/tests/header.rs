//! Compiles and runs a C program against the generated header and the static library.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let target_dir = exe.parent().and_then(|p| p.parent()).unwrap();
    let lib = target_dir.join("libiceg_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "iceg.h"

int main(void) {
    float rgb[6] = {0.8f, 0.2f, 0.1f, 0.3f, 0.6f, 0.9f};
    unsigned char mask[2] = {1, 0};
    if (iceg_apply_color(rgb, mask, 2, 1, 240.0, 0.5) != ICEG_STATUS_OK) return 1;
    if (rgb[3] != 0.3f) return 2;
    double s = 0.0;
    if (iceg_ssim(rgb, rgb, 2, 1, &s) != ICEG_STATUS_OK) return 3;
    IcegDataset *ds = NULL;
    if (iceg_dataset_load(NULL, &ds) != ICEG_STATUS_NULL_ARGUMENT) return 4;
    if (strstr(iceg_last_error(), "path") == NULL) return 5;
    printf("ok\n");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
