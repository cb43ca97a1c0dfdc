//! Compiles csrc/demo.c against the generated header, links the static
//! library, and runs the result: end-to-end proof that the ABI is callable
//! from C, not just from Rust.

use std::path::PathBuf;
use std::process::Command;

/// Directory holding build products, derived from the test binary location
/// (`target/<profile>/deps/<test>` lives two levels below it).
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_demo_compiles_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler on PATH");
        return;
    }
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let staticlib = artifact_dir().join("libfedmt_capi.a");
    assert!(
        staticlib.exists(),
        "static library missing at {}; the staticlib crate-type should build alongside tests",
        staticlib.display()
    );

    let work = tempfile::tempdir().unwrap();
    let demo = work.path().join("demo");
    let compile = Command::new("cc")
        .arg(crate_dir.join("csrc/demo.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg("-o")
        .arg(&demo)
        .arg(&staticlib)
        .args(["-lm", "-lpthread", "-ldl"])
        .output()
        .unwrap();
    assert!(
        compile.status.success(),
        "cc failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&demo).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(
        run.status.success(),
        "demo exited with {:?}:\n{}\n{}",
        run.status.code(),
        stdout,
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(stdout.contains("ok"), "demo did not report success:\n{stdout}");
}
