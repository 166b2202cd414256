//! Compiles a small C program against the generated header and the shared
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let libdir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    if !libdir.join("libstreamsense_ffi.so").exists() {
        eprintln!("shared library not found in {}; skipping", libdir.display());
        return;
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let out = tempfile_path();
    let status = Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&libdir)
        .arg(format!("-Wl,-rpath,{}", libdir.display()))
        .arg("-lstreamsense_ffi")
        .arg("-o")
        .arg(&out)
        .status()
        .expect("compiler runs");
    assert!(status.success(), "C smoke program failed to compile");
    let run = Command::new(&out).output().expect("smoke program runs");
    let _ = std::fs::remove_file(&out);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("212"));
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}

fn tempfile_path() -> PathBuf {
    std::env::temp_dir().join(format!("streamsense_smoke_{}", std::process::id()))
}
