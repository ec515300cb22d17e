//! Exit-code and usage contract of the `varnet` binary: 0 for success and
//! help/version, 1 for usage or runtime errors (2 is reserved for numerical
//! divergence, raised from the solvers themselves).

use std::path::Path;
use std::process::{Command, Output};

fn varnet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn varnet")
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"][..], &["train", "--help"][..]] {
        let out = varnet(dir.path(), args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
    }
    let help = varnet(dir.path(), &["--help"]);
    let text = String::from_utf8(help.stdout).unwrap();
    for subcommand in ["gen-data", "train", "evaluate", "compare"] {
        assert!(text.contains(subcommand), "help must list {subcommand}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["frobnicate"],                      // unknown subcommand
        &["train", "--bogus-flag"],           // unknown flag
        &["--set", "not-an-assignment", "train"], // malformed override
        &["--set", "train.epochs=abc", "train"],  // unparsable value
    ];
    for args in cases {
        let out = varnet(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn missing_inputs_exit_one_with_message() {
    let dir = tempfile::tempdir().unwrap();
    // no fixture has been generated, so training has nothing to ingest
    let out = varnet(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("error:"), "stderr was: {stderr}");

    let out = varnet(dir.path(), &["--config", "nonexistent.ini", "train"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_requires_existing_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = varnet(dir.path(), &["compare", "missing.csv"]);
    assert_eq!(out.status.code(), Some(1));
}
