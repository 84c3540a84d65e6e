//! Acceptance checks. Prints one PASS/FAIL line per criterion (with indented
//! detail lines) and exits non-zero if any criterion fails.
//!
//! Datasets are read from `$KGAC_DATA_DIR/{cora,citeseer}`, defaulting to the
//! workspace `data/` directory. Missing datasets fail the criteria that need
//! them.

mod properties;
mod reproduction;

use std::path::PathBuf;
use std::process::ExitCode;

use kgac::datasets::{find_dataset, load_dataset, Dataset};

fn data_root() -> PathBuf {
    std::env::var_os("KGAC_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn load(name: &str) -> Option<Dataset> {
    let dir = find_dataset(data_root(), name)?;
    match load_dataset(&dir) {
        Ok(ds) => Some(ds),
        Err(e) => {
            eprintln!("cannot load {}: {e}", dir.display());
            None
        }
    }
}

fn main() -> ExitCode {
    let cora = load("cora");
    let citeseer = load("citeseer");
    let datasets = [("cora", cora.as_ref()), ("citeseer", citeseer.as_ref())];

    let mut outcomes = vec![properties::run(), student::run(cora.as_ref())];
    let (teachers, logits) = reproduction::teachers(&datasets);
    outcomes.push(teachers);
    outcomes.push(reproduction::amalgamation(&datasets, &logits));

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    println!("\n{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
