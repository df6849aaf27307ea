//! The twelve acceptance criteria, one PASS/FAIL line each. Lines go
//! straight to stdout so they show even when the harness captures output.

use std::io::Write;

use fasten_cli::verify;

#[test]
fn acceptance() {
    let scratch = tempfile::tempdir().unwrap();
    let results = verify::run_all(scratch.path(), |r| {
        let mut out = std::io::stdout().lock();
        writeln!(out, "{}", r.line()).unwrap();
        out.flush().unwrap();
    });
    assert_eq!(results.len(), 12);
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
