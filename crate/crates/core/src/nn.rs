//! Named parameter storage and the forward-pass context shared by the
//! backbones and the refinement head.

use std::collections::BTreeMap;

use cris_autograd::{BatchStats, Gradients, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable parameters and non-trainable buffers keyed by canonical layer
/// paths such as `backbone.enc1.conv0.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }
}

/// Deterministic per-parameter RNG: independent of registration order.
fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn he_uniform<T: Real>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let mut rng = init_rng(seed, name);
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data)
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn add_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, seed: u64) {
        let wname = format!("{name}.weight");
        let w = he_uniform(seed, &wname, &[cout, cin, k, k], cin * k * k);
        self.params.insert(wname, w);
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
    }

    pub fn add_conv_transpose(&mut self, name: &str, cin: usize, cout: usize, seed: u64) {
        let wname = format!("{name}.weight");
        let w = he_uniform(seed, &wname, &[cin, cout, 2, 2], cin);
        self.params.insert(wname, w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    pub fn add_batch_norm(&mut self, name: &str, channels: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (name, s) in stats {
            if let Some(rm) = self.buffers.get_mut(&format!("{name}.running_mean")) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = keep * *r + m * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{name}.running_var")) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&s.var_unbiased) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: owns the tape, binds parameters as leaves on first use,
/// records batch-norm statistics and draws dropout masks.
pub struct Forward<'r, T: Real> {
    pub graph: Graph<T>,
    mode: Mode,
    rng: Option<&'r mut ChaCha8Rng>,
    bound: BTreeMap<String, Var>,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'r, T: Real> Forward<'r, T> {
    /// Training-mode pass. Dropout draws from `rng`; without one, dropout is
    /// skipped.
    pub fn train(rng: Option<&'r mut ChaCha8Rng>) -> Self {
        Self::with_mode(Mode::Train, rng)
    }

    pub fn eval() -> Self {
        Self::with_mode(Mode::Eval, None)
    }

    fn with_mode(mode: Mode, rng: Option<&'r mut ChaCha8Rng>) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            rng,
            bound: BTreeMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.graph.leaf(t, requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = store
            .param(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
            .clone();
        let v = self.graph.leaf(t, true);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn conv(&mut self, store: &ParamStore<T>, name: &str, x: Var) -> Var {
        let w = self.param(store, &format!("{name}.weight"));
        let bname = format!("{name}.bias");
        let b = store.param(&bname).is_some().then(|| self.param(store, &bname));
        self.graph.conv2d(x, w, b)
    }

    pub fn conv_transpose(&mut self, store: &ParamStore<T>, name: &str, x: Var) -> Var {
        let w = self.param(store, &format!("{name}.weight"));
        let b = self.param(store, &format!("{name}.bias"));
        self.graph.conv_transpose2x2(x, w, Some(b))
    }

    pub fn batch_norm(&mut self, store: &ParamStore<T>, name: &str, x: Var) -> Var {
        let gamma = self.param(store, &format!("{name}.gamma"));
        let beta = self.param(store, &format!("{name}.beta"));
        let eps = T::lit(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm_train(x, gamma, beta, eps);
                self.bn_stats.push((name.to_string(), stats));
                y
            }
            Mode::Eval => {
                let mean = store.buffer(&format!("{name}.running_mean")).expect("running mean");
                let var = store.buffer(&format!("{name}.running_var")).expect("running var");
                self.graph.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), eps)
            }
        }
    }

    /// Conv, batch norm, ReLU.
    pub fn conv_bn_relu(&mut self, store: &ParamStore<T>, name: &str, x: Var) -> Var {
        let c = self.conv(store, &format!("{name}.conv"), x);
        let n = self.batch_norm(store, &format!("{name}.bn"), c);
        self.graph.relu(n)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        let keep: Vec<bool> = (0..self.graph.value(x).len()).map(|_| rng.gen::<f64>() >= p).collect();
        self.graph.dropout(x, &keep, T::lit(p))
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }
}
