//! Named parameter storage, seeded initialization and weight files.
//!
//! Each parameter draws its initial values from an RNG seeded by the run
//! seed and the parameter's own name, so adding or removing one parameter
//! never shifts another's initialization.
//!
//! Weight files are JSON lines, one parameter per line:
//! `{"name": "...", "value": [[...], ...]}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with std `sqrt(2 / (fan_in + fan_out))`.
    Xavier,
    Normal(f64),
    Identity,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

#[derive(Serialize, Deserialize)]
struct WeightLine {
    name: String,
    value: Vec<Vec<f64>>,
}

/// FNV-1a, used only to mix parameter names into the init seed.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn init_matrix(seed: u64, name: &str, rows: usize, cols: usize, init: Init) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    let mut draw = |std: f64| {
        let normal = Normal::new(0.0, std).expect("positive std");
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
    };
    match init {
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::Ones => Matrix::filled(rows, cols, 1.0),
        Init::Xavier => draw((2.0 / (rows + cols) as f64).sqrt()),
        Init::Normal(std) => draw(std),
        Init::Identity => {
            let mut m = Matrix::zeros(rows, cols);
            for i in 0..rows.min(cols) {
                m.set(i, i, 1.0);
            }
            m
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn init(&mut self, seed: u64, name: &str, rows: usize, cols: usize, init: Init) {
        let value = init_matrix(seed, name, rows, cols, init);
        self.insert(name, value, true);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name).map(|p| &p.value)
    }

    /// Replaces a parameter's value, keeping its trainable flag.
    pub fn set_value(&mut self, name: &str, value: Matrix) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch { context: format!("parameter `{name}`"), expected: p.value.shape(), found: value.shape() });
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names and the exact bit patterns of every value whose
    /// name starts with `prefix` (empty prefix covers the whole store).
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in p.value.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for (name, p) in &self.params {
            let line = WeightLine { name: name.clone(), value: p.value.to_rows() };
            serde_json::to_writer(&mut buf, &line)?;
            buf.push(b'\n');
        }
        crate::io::write_atomic(path, &buf)
    }

    /// Overwrites matching parameters from a weight file. Every name in the
    /// file must exist in the store with the same shape.
    pub fn load_jsonl(&mut self, path: &Path) -> Result<usize> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut count = 0;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let w: WeightLine = serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno + 1, message: e.to_string() })?;
            let cols = w.value.first().map(Vec::len).unwrap_or(0);
            if w.value.iter().any(|r| r.len() != cols) {
                return Err(Error::Parse { line: lineno + 1, message: format!("ragged matrix for `{}`", w.name) });
            }
            self.set_value(&w.name, Matrix::from_rows(&w.value))?;
            count += 1;
        }
        Ok(count)
    }
}
