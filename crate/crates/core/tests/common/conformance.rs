//! Parser conformance against the bundled UEA files and malformed fixtures.

use std::path::{Path, PathBuf};

use smate::data::{parse_ts, parse_ts_file, serialize_ts};
use smate::error::SmateError;

pub fn uea_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/uea")
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/malformed")
}

/// Parses every bundled UEA split and checks the serialize round trip;
/// returns the number of files checked.
pub fn check_uea_files() -> Result<usize, String> {
    let mut seen = 0;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(uea_dir())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap().to_str().unwrap().to_string();
        for split in ["TRAIN", "TEST"] {
            let path = dir.join(format!("{name}_{split}.ts"));
            let ds = parse_ts_file(&path).map_err(|e| e.to_string())?;
            let back = parse_ts(&serialize_ts(&ds)).map_err(|e| format!("{}: {e}", path.display()))?;
            if back.samples() != ds.samples()
                || back.true_labels() != ds.true_labels()
                || back.label_set() != ds.label_set()
            {
                return Err(format!("{}: round trip differs", path.display()));
            }
            seen += 1;
        }
    }
    Ok(seen)
}

/// Each fixture's first line reads `# expect: <parse|unsupported> <line>`.
pub fn check_fixture(path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let expect: Vec<&str> = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# expect: "))
        .ok_or("fixture lacks an expectation line")?
        .split_whitespace()
        .collect();
    let want_line: usize = expect[1].parse().map_err(|_| "bad expectation")?;
    let (kind, line) = match parse_ts_file(path) {
        Err(SmateError::Parse { line, .. }) => ("parse", line),
        Err(SmateError::Unsupported { line, .. }) => ("unsupported", line),
        Err(other) => return Err(format!("unexpected error {other}")),
        Ok(_) => return Err("parsed without error".into()),
    };
    if kind == expect[0] && line == want_line {
        Ok(())
    } else {
        Err(format!("got {kind} at line {line}, expected {} at {want_line}", expect[0]))
    }
}

/// Checks every malformed fixture; returns how many there were.
pub fn check_fixtures() -> Result<usize, String> {
    let mut n = 0;
    for entry in std::fs::read_dir(fixture_dir()).map_err(|e| e.to_string())? {
        let path = entry.unwrap().path();
        check_fixture(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        n += 1;
    }
    Ok(n)
}
