use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::Mat;
use crate::error::{GapError, Result};

/// Named parameter tensors in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn get_index(&self, idx: usize) -> &Mat {
        &self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn init_scaled<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
        self.insert(name, Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng)));
    }

    pub fn init_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("valid std");
        self.insert(name, Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng)));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn to_record(&self) -> Vec<TensorRecord> {
        self.tensors
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect()
    }

    pub fn from_record(records: Vec<TensorRecord>) -> Result<Self> {
        let mut store = ParamStore::new();
        for r in records {
            let [rows, cols] = r.shape;
            let t = Array2::from_shape_vec((rows, cols), r.data).map_err(|_| {
                GapError::Format(format!("tensor `{}` data does not match shape {rows}x{cols}", r.name))
            })?;
            store.insert(r.name, t);
        }
        Ok(store)
    }
}

/// Shape-tagged tensor as stored in checkpoint files (row-major data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Gradient buffers aligned with a [`ParamStore`]'s indices.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Mat>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            grads: vec![None; store.len()],
        }
    }

    pub fn add_at(&mut self, idx: usize, g: &Mat) {
        match &mut self.grads[idx] {
            Some(existing) => *existing += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (idx, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add_at(idx, g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= k;
        }
    }

    pub fn get(&self, idx: usize) -> Option<&Mat> {
        self.grads[idx].as_ref()
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.tensors.values().map(|t| Array2::zeros(t.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Update every parameter for which `trainable(name)` holds and a
    /// gradient exists. Other parameters are left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(max) => {
                let n = grads.norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, (name, param)) in store.tensors.iter_mut().enumerate() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(idx) else { continue };
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(param)
                .and(&mut self.m[idx])
                .and(&mut self.v[idx])
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use ndarray::array;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let x = g.param("x");
                let sq = g.mul(x, x);
                let loss = g.sum_all(sq);
                let gr = g.backward(loss);
                g.param_grads(&gr)
            };
            opt.step(&mut store, &grads, |_| true);
        }
        assert!(store.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_stay_bit_identical() {
        let mut store = ParamStore::new();
        store.insert("a", array![[1.0]]);
        store.insert("b", array![[2.0]]);
        let before = store.get("b").unwrap().clone();
        let mut opt = Adam::new(&store, 0.1);
        let grads = {
            let mut g = Graph::with_params(&store);
            let a = g.param("a");
            let b = g.param("b");
            let ab = g.mul(a, b);
            let loss = g.sum_all(ab);
            let gr = g.backward(loss);
            g.param_grads(&gr)
        };
        opt.step(&mut store, &grads, |n| n != "b");
        assert_eq!(store.get("b").unwrap(), &before);
        assert_ne!(store.get("a").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn record_round_trip() {
        let mut store = ParamStore::new();
        store.insert("w", array![[0.1, 0.2, 0.3], [1e-300, -4.5, 6.0]]);
        let json = serde_json::to_string(&store.to_record()).unwrap();
        let back = ParamStore::from_record(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, store);
    }
}
