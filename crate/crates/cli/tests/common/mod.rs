//! Shared fixtures for the binary-level test suites.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use optimerge_core::tensor::{write_container, DType, TensorData, TensorMap};
use optimerge_core::vectors::{extract, DistributionVector, ExclusionRule};

/// Path of the compiled `optimerge` binary under test.
pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_optimerge")
}

/// Run the binary with `args` from inside `dir` and capture everything.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn optimerge")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Exit code, treating signal death as a test failure.
pub fn code_of(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

/// Assert success, echoing stderr on failure so the cause is visible.
pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed (code {:?}): {}",
        out.status.code(),
        stderr_of(out)
    );
}

/// Build an F32 tensor map from `(name, shape, values)` triples.
pub fn map_f32(entries: &[(&str, &[usize], &[f32])]) -> TensorMap {
    let mut map = TensorMap::new();
    for (name, shape, values) in entries {
        map.insert(*name, TensorData::from_f32(shape.to_vec(), values).unwrap())
            .unwrap();
    }
    map
}

/// Write an F32 container file from `(name, shape, values)` triples.
pub fn write_map(path: &Path, entries: &[(&str, &[usize], &[f32])]) {
    write_container(path, &map_f32(entries)).unwrap();
}

/// A distribution vector whose delta holds exactly `entries`, labeled
/// `source_id`, built against an all-zeros base so values pass through.
pub fn vector_of(source_id: &str, entries: &[(&str, &[usize], &[f32])]) -> DistributionVector {
    let tuned = map_f32(entries);
    let zeros: Vec<(&str, &[usize], Vec<f32>)> = entries
        .iter()
        .map(|(name, shape, values)| (*name, *shape, vec![0.0; values.len()]))
        .collect();
    let mut base = TensorMap::new();
    for (name, shape, values) in &zeros {
        base.insert(*name, TensorData::from_f32(shape.to_vec(), values).unwrap())
            .unwrap();
    }
    extract(&tuned, &base, &ExclusionRule::none(), "zero-base", source_id).unwrap()
}

/// Write a distribution-vector container file with the given label.
pub fn write_vector(path: &Path, source_id: &str, entries: &[(&str, &[usize], &[f32])]) {
    vector_of(source_id, entries).save(path).unwrap();
}

/// Random-content tensor helper used by fixture generators.
pub fn tensor_from_bytes(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> TensorData {
    TensorData::new(dtype, shape, data).unwrap()
}
