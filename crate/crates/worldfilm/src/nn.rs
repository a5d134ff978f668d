//! Named parameter groups, initialization, and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::util::{mat_from_bytes, mat_to_bytes, sha256_hex};

/// An ordered collection of named `f64` matrices. Iteration order is the
/// insertion order, which makes serialization and digests reproducible.
pub struct ParamStore {
    pub name: String,
    entries: Vec<(String, Mat)>,
    index: BTreeMap<String, usize>,
    adam: Option<AdamState>,
}

struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl ParamStore {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), entries: Vec::new(), index: BTreeMap::new(), adam: None }
    }

    pub fn insert(&mut self, key: &str, value: Mat) {
        assert!(!self.index.contains_key(key), "duplicate parameter {key}");
        self.index.insert(key.to_string(), self.entries.len());
        self.entries.push((key.to_string(), value));
        self.adam = None;
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|(k, _)| !k.starts_with(prefix));
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (k, _))| (k.clone(), i))
            .collect();
        self.adam = None;
    }

    pub fn get(&self, key: &str) -> &Mat {
        let i = self.index.get(key).unwrap_or_else(|| panic!("missing parameter {key}"));
        &self.entries[*i].1
    }

    pub fn try_get(&self, key: &str) -> Option<&Mat> {
        self.index.get(key).map(|i| &self.entries[*i].1)
    }

    pub fn get_mut(&mut self, key: &str) -> &mut Mat {
        let i = *self.index.get(key).unwrap_or_else(|| panic!("missing parameter {key}"));
        &mut self.entries[i].1
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Put a parameter on a tape as a gradient-receiving leaf.
    pub fn var(&self, tape: &mut Tape, key: &str) -> Var {
        tape.param(&self.name, key, self.get(key).clone())
    }

    /// Concatenated raw bytes of all entries, in insertion order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, m) in &self.entries {
            out.extend_from_slice(&mat_to_bytes(m));
        }
        out
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Schema describing shapes, used by the checkpoint manifest.
    pub fn schema(&self) -> Vec<ParamSpec> {
        self.entries
            .iter()
            .map(|(k, m)| ParamSpec { name: k.clone(), rows: m.nrows(), cols: m.ncols() })
            .collect()
    }

    pub fn from_bytes(name: &str, schema: &[ParamSpec], bytes: &[u8]) -> Result<Self> {
        let mut store = ParamStore::new(name);
        let mut at = 0;
        for spec in schema {
            let n = spec.rows * spec.cols * 8;
            if at + n > bytes.len() {
                return Err(Error::Corruption(format!(
                    "parameter group {name} truncated at {}",
                    spec.name
                )));
            }
            let m = mat_from_bytes(spec.rows, spec.cols, &bytes[at..at + n])
                .ok_or_else(|| Error::Corruption(format!("bad shape for {}", spec.name)))?;
            store.insert(&spec.name, m);
            at += n;
        }
        if at != bytes.len() {
            return Err(Error::Corruption(format!("trailing bytes in group {name}")));
        }
        Ok(store)
    }

    /// One Adam step over the parameters selected by `filter`.
    /// Gradients are looked up in `grads` under this store's name.
    pub fn adam_step(
        &mut self,
        grads: &Grads,
        lr: f64,
        filter: &dyn Fn(&str) -> bool,
    ) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        if self.adam.is_none() {
            self.adam = Some(AdamState {
                m: self.entries.iter().map(|(_, p)| Mat::zeros(p.dim())).collect(),
                v: self.entries.iter().map(|(_, p)| Mat::zeros(p.dim())).collect(),
                t: 0,
            });
        }
        let adam = self.adam.as_mut().unwrap();
        adam.t += 1;
        let t = adam.t as f64;
        let bc1 = 1.0 - B1.powf(t);
        let bc2 = 1.0 - B2.powf(t);
        for (i, (key, p)) in self.entries.iter_mut().enumerate() {
            if !filter(key) {
                continue;
            }
            let Some(g) = grads.by_param.get(&(self.name.clone(), key.clone())) else {
                continue;
            };
            let m = &mut adam.m[i];
            let v = &mut adam.v[i];
            *m *= B1;
            *m += &(g * (1.0 - B1));
            *v *= B2;
            *v += &(g.mapv(|x| x * x) * (1.0 - B2));
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + EPS);
            });
        }
    }

    /// Reset optimizer state (used at stage boundaries).
    pub fn reset_optimizer(&mut self) {
        self.adam = None;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Gaussian init with the given standard deviation.
pub fn randn_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn zeros_mat(rows: usize, cols: usize) -> Mat {
    Mat::zeros((rows, cols))
}

pub fn ones_row(cols: usize) -> Mat {
    Mat::ones((1, cols))
}

/// Insert weight + bias for a linear map `in_dim -> out_dim`.
pub fn insert_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) {
    let std = 1.0 / (in_dim as f64).sqrt();
    store.insert(&format!("{prefix}.w"), randn_mat(rng, in_dim, out_dim, std));
    store.insert(&format!("{prefix}.b"), zeros_mat(1, out_dim));
}

/// Insert layer-norm gain and bias.
pub fn insert_layernorm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.g"), ones_row(dim));
    store.insert(&format!("{prefix}.b"), zeros_mat(1, dim));
}

/// Apply a stored linear map on the tape: `x @ w + b`.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = store.var(tape, &format!("{prefix}.w"));
    let b = store.var(tape, &format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Apply a stored layer norm on the tape.
pub fn layernorm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let g = store.var(tape, &format!("{prefix}.g"));
    let b = store.var(tape, &format!("{prefix}.b"));
    tape.layernorm(x, g, b)
}
