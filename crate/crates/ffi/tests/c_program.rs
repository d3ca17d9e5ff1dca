//! Compiles a C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

use rgbt_count::RunConfig;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "rgbt_count.h"

static char config[8192];

int main(int argc, char **argv) {
    FILE *f = fopen(argv[1], "r");
    if (!f) return 10;
    size_t len = fread(config, 1, sizeof config - 1, f);
    fclose(f);
    config[len] = 0;

    RgbtModel *model = NULL;
    if (rgbt_model_new(config, 3, &model) != RGBT_STATUS_OK) {
        fprintf(stderr, "%s\n", rgbt_last_error_message());
        return 11;
    }
    size_t s = 0, n = 0;
    rgbt_model_image_size(model, &s);
    rgbt_model_grid_side(model, &n);
    static double rgb[64 * 64 * 3], thermal[64 * 64];
    for (size_t i = 0; i < s * s * 3; i++) rgb[i] = (double)(i % 7) / 6.0;
    for (size_t i = 0; i < s * s; i++) thermal[i] = (double)(i % 3) / 2.0;
    double density[4], count = -1.0;
    if (rgbt_model_predict(model, rgb, thermal, 1, density, n * n, &count) != RGBT_STATUS_OK) return 12;

    if (rgbt_model_save(model, argv[2]) != RGBT_STATUS_OK) return 13;
    RgbtModel *again = NULL;
    if (rgbt_model_load(argv[2], &again) != RGBT_STATUS_OK) return 14;
    double density2[4], count2 = -2.0;
    if (rgbt_model_predict(again, rgb, thermal, 1, density2, n * n, &count2) != RGBT_STATUS_OK) return 15;
    if (memcmp(density, density2, sizeof density) != 0 || count != count2) return 16;

    RgbtStatus st = rgbt_model_predict(model, rgb, thermal, 1, density, 3, &count);
    if (st != RGBT_STATUS_INVALID_ARGUMENT) return 17;
    printf("side=%zu grid=%zu count=%.17g status=%s\n", s, n, count, rgbt_status_string(st));

    rgbt_model_free(again);
    rgbt_model_free(model);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("librgbt_count_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, RunConfig::tiny().to_text()).unwrap();
    let exe = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));

    let run = Command::new(&exe).arg(&cfg).arg(dir.path().join("ck.bin")).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.starts_with("side=64 grid=2 count="), "{stdout}");
    assert!(stdout.trim_end().ends_with("status=invalid argument"), "{stdout}");
}
