use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng;
use super::Matrix;
use crate::models::ArchitectureSpec;
use crate::{Error, Result};

/// Weights and bias of one named layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Ordered, named collection of layer parameters.
///
/// Gradients use the same shape, see [`ParamGrads`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Params {
    pub entries: IndexMap<String, LayerParams>,
}

/// Gradients mirror the parameter layout exactly.
pub type ParamGrads = Params;

impl Params {
    pub fn get(&self, name: &str) -> Result<&LayerParams> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown layer `{name}`")))
    }

    pub fn zeros_like(&self) -> Params {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    LayerParams {
                        w: Matrix::zeros(v.w.rows(), v.w.cols()),
                        b: vec![0.0; v.b.len()],
                    },
                )
            })
            .collect();
        Params { entries }
    }

    /// self += scale * other (matching layouts assumed).
    pub fn axpy(&mut self, other: &Params, scale: f64) {
        for (name, layer) in self.entries.iter_mut() {
            let o = &other.entries[name];
            for (a, b) in layer.w.data_mut().iter_mut().zip(o.w.data()) {
                *a += scale * b;
            }
            for (a, b) in layer.b.iter_mut().zip(&o.b) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for layer in self.entries.values_mut() {
            for v in layer.w.data_mut() {
                *v *= s;
            }
            for v in layer.b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .values()
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.entries
            .values()
            .map(|l| l.w.data().len() + l.b.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic fan-based uniform initialization.
///
/// Weights are uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`;
/// biases start at zero. Each layer draws from its own RNG stream keyed by
/// `(seed, layer name)`, so adding or reordering layers never perturbs the
/// draws of existing ones.
pub fn init_params(arch: &ArchitectureSpec, seed: u64) -> Result<Params> {
    let mut entries = IndexMap::new();
    for (name, out_dim, in_dim) in arch.layers() {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::InvalidArchitecture(format!(
                "layer `{name}` has zero-sized dimension {out_dim}x{in_dim}"
            )));
        }
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut stream = rng::derive(seed, &format!("init/{name}"));
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| stream.gen_range(-bound..bound))
            .collect();
        entries.insert(
            name.clone(),
            LayerParams {
                w: Matrix::from_vec(out_dim, in_dim, data)?,
                b: vec![0.0; out_dim],
            },
        );
    }
    Ok(Params { entries })
}

/// Zero-filled gradient buffers matching the architecture's layout.
pub fn init_zero_grads(arch: &ArchitectureSpec) -> Result<ParamGrads> {
    let mut entries = IndexMap::new();
    for (name, out_dim, in_dim) in arch.layers() {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::InvalidArchitecture(format!(
                "layer `{name}` has zero-sized dimension {out_dim}x{in_dim}"
            )));
        }
        entries.insert(
            name,
            LayerParams { w: Matrix::zeros(out_dim, in_dim), b: vec![0.0; out_dim] },
        );
    }
    Ok(Params { entries })
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    name: String,
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Write a JSONL checkpoint, one record per layer.
pub fn save_params(params: &Params, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (name, layer) in &params.entries {
        let rec = CheckpointRecord {
            name: name.clone(),
            rows: layer.w.rows(),
            cols: layer.w.cols(),
            w: layer.w.data().to_vec(),
            b: layer.b.clone(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Parse { line: 0, detail: e.to_string() })?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Read a JSONL checkpoint written by [`save_params`].
pub fn load_params(path: &Path) -> Result<Params> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut entries = IndexMap::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CheckpointRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if rec.b.len() != rec.rows {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("bias length {} vs {} rows", rec.b.len(), rec.rows),
            });
        }
        entries.insert(
            rec.name,
            LayerParams { w: Matrix::from_vec(rec.rows, rec.cols, rec.w)?, b: rec.b },
        );
    }
    Ok(Params { entries })
}
