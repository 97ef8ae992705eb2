//! Output directories, CSV tables, manifests and the train/test split file.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Renders a header plus rows as CSV.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::runtime(format!("csv encoding: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| CliError::runtime(format!("csv encoding: {e}")))
}

/// A directory being filled by one subcommand. Every written file is hashed
/// into the manifest.
pub struct OutDir {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<(), CliError> {
        let bytes = csv_bytes(header, rows)?;
        self.write(name, &bytes)
    }

    /// Writes `<command>-manifest.json` with the config echo, its hash and
    /// the hashes of all inputs and outputs.
    pub fn finish(
        self,
        command: &str,
        config: &impl Serialize,
        inputs: &[(&str, &Path)],
        extra: Value,
    ) -> Result<(), CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::runtime(e.to_string()))?;
        let config_hash = sha256_hex(config.to_string().as_bytes());
        let mut input_list = Vec::new();
        for (role, path) in inputs {
            input_list.push(json!({
                "role": role,
                "path": path.display().to_string(),
                "sha256": sha256_hex(&read_file(path)?),
            }));
        }
        let outputs: Vec<Value> = self
            .written
            .iter()
            .map(|(name, hash)| json!({ "file": name, "sha256": hash }))
            .collect();
        let manifest = json!({
            "tool": "tgpst",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
            "config_sha256": config_hash,
            "inputs": input_list,
            "outputs": outputs,
            "summary": extra,
        });
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        text.push('\n');
        let name = format!("{command}-manifest.json");
        let path = self.path(&name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// Shuffles `0..n` with the seed and puts the first `round(fraction·n)` in
/// the training set. Both halves come back sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let cut = ((fraction * n as f64).round() as usize).min(n);
    let mut test = idx.split_off(cut);
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

pub fn split_rows(n: usize, train: &[usize]) -> Vec<Vec<String>> {
    let mut is_train = vec![false; n];
    for &i in train {
        is_train[i] = true;
    }
    (0..n)
        .map(|i| {
            vec![
                i.to_string(),
                if is_train[i] { "train" } else { "test" }.to_string(),
            ]
        })
        .collect()
}

/// Reads `index,set` rows; every index in `0..n` must appear exactly once.
pub fn read_split(path: &Path, n: usize) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    let bytes = read_file(path)?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let bad = |line: u64, msg: String| {
        CliError::runtime(format!("{}: line {line}: {msg}", path.display()))
    };
    let mut seen = vec![false; n];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(bad(line, format!("expected 2 fields, got {}", rec.len())));
        }
        let i: usize = rec[0]
            .trim()
            .parse()
            .map_err(|e| bad(line, format!("index {:?}: {e}", &rec[0])))?;
        if i >= n {
            return Err(bad(line, format!("index {i} out of range for {n} samples")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(bad(line, format!("index {i} listed twice")));
        }
        match rec[1].trim() {
            "train" => train.push(i),
            "test" => test.push(i),
            other => {
                return Err(bad(
                    line,
                    format!("set must be train or test, got {other:?}"),
                ))
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(CliError::runtime(format!(
            "{}: index {missing} missing from split",
            path.display()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
