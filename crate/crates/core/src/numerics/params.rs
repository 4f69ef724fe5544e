//! Named parameter collections and their JSON checkpoint format.
//!
//! A checkpoint is a JSON object mapping each parameter name to
//! `{"shape": [...], "data": [...]}`. Keys are written in sorted order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.tensors.len() - 1
    }

    pub fn randn<R: Rng>(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut R) -> usize {
        self.insert(name, Tensor::randn(shape, std, rng))
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> usize {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> usize {
        self.insert(name, Tensor::filled(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    /// Places every tensor on `g` as a leaf, trainable or frozen, in index order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.frozen(t) })
            .collect()
    }

    /// Moves the gradients of leaves produced by [`ParamSet::bind`] out of `grads`.
    pub fn extract_grads(vars: &[Var], grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// Adds extracted gradients into each tensor's accumulator.
    pub fn accumulate_grads(&mut self, grads: Vec<Option<Vec<f64>>>) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.tensors.len()
            ));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Largest absolute elementwise difference; `None` if layouts differ.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Option<f64> {
        if self.names != other.names {
            return None;
        }
        let mut m: f64 = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return None;
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                m = m.max((x - y).abs());
            }
        }
        Some(m)
    }

    /// Euclidean distance between two identically laid out sets.
    pub fn distance(&self, other: &ParamSet) -> Option<f64> {
        if self.names != other.names {
            return None;
        }
        let mut s = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return None;
            }
            s += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        Some(s.sqrt())
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, TensorRecord> = self
            .iter()
            .map(|(n, t)| {
                (
                    n,
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_string(&map).expect("parameter map serializes")
    }

    /// Overwrites values from a checkpoint. Names and shapes must match exactly.
    pub fn load_json(&mut self, json: &str) -> Result<()> {
        let map: BTreeMap<String, TensorRecord> =
            serde_json::from_str(json).map_err(|e| Error::Validation(format!("checkpoint: {e}")))?;
        if map.len() != self.names.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameters, model expects {}",
                map.len(),
                self.names.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let rec = map
                .get(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))?;
            if rec.shape != t.shape() || rec.data.len() != t.len() {
                return Err(Error::Validation(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        self.load_json(&s)
    }

    /// Shapes stored in a checkpoint file, without a model to load into.
    pub fn read_shapes(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let map: BTreeMap<String, TensorRecord> = serde_json::from_str(&s).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(map.into_iter().map(|(k, v)| (k, v.shape)).collect())
    }
}

/// Adam over every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            states: params.tensors().iter().map(|t| AdamState::new(t.len(), lr)).collect(),
        }
    }

    /// Applies accumulated gradients; tensors without a gradient are skipped.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.states.len() != params.len() {
            return contract("optimizer was built for a different parameter set");
        }
        for (state, t) in self.states.iter_mut().zip(params.tensors.iter_mut()) {
            if let Some(g) = t.grad.take() {
                state.step(t.data_mut(), &g)?;
            }
        }
        Ok(())
    }
}
