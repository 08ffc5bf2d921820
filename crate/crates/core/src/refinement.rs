//! Fully convolutional refinement head. It consumes only the backbone's
//! one-channel probability map: a 1x1 convolution expands it to
//! `expand_channels`, a stack of same-padded convolutions with strictly
//! decreasing odd kernel sizes follows, and a 1x1 projection plus sigmoid
//! returns a refined map. Each conv+ReLU block is followed by dropout.

use cris_autograd::{Real, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{image_batch, prob_maps, Backbone};
use crate::nn::{Forward, ParamStore};
use crate::types::{ImageTensor, ProbMap};
use crate::{Error, Result};

fn default_expand() -> usize {
    32
}

fn default_kernels() -> Vec<usize> {
    vec![7, 5, 3]
}

fn default_dropout() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    #[serde(default = "default_expand")]
    pub expand_channels: usize,
    #[serde(default = "default_kernels")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            expand_channels: default_expand(),
            kernel_sizes: default_kernels(),
            dropout_p: default_dropout(),
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expand_channels == 0 {
            return Err(Error::InvalidConfig("expand_channels must be positive".into()));
        }
        if self.kernel_sizes.is_empty() {
            return Err(Error::InvalidConfig("kernel_sizes must not be empty".into()));
        }
        for &k in &self.kernel_sizes {
            if k < 3 || k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("kernel size {k} must be odd and >= 3")));
            }
        }
        if self.kernel_sizes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig(format!(
                "kernel sizes {:?} must be strictly decreasing",
                self.kernel_sizes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn largest_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(1)
    }
}

/// One step of the head, in execution order.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
    },
    Relu,
    Dropout(f64),
    Sigmoid,
}

const NS: &str = "refinement";

fn layers(cfg: &RefinementConfig) -> Vec<Layer> {
    let e = cfg.expand_channels;
    let mut out = vec![
        Layer::Conv {
            name: format!("{NS}.expand"),
            cin: 1,
            cout: e,
            kernel: 1,
        },
        Layer::Relu,
        Layer::Dropout(cfg.dropout_p),
    ];
    for (i, &k) in cfg.kernel_sizes.iter().enumerate() {
        out.push(Layer::Conv {
            name: format!("{NS}.stack{i}"),
            cin: e,
            cout: e,
            kernel: k,
        });
        out.push(Layer::Relu);
        out.push(Layer::Dropout(cfg.dropout_p));
    }
    out.push(Layer::Conv {
        name: format!("{NS}.project"),
        cin: e,
        cout: 1,
        kernel: 1,
    });
    out.push(Layer::Sigmoid);
    out
}

/// Anything that maps a `[n, 1, h, w]` probability node to a refined one.
pub trait Refiner<T: Real> {
    fn refine_var(&self, fw: &mut Forward<'_, T>, p: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementModule<T: Real = f32> {
    config: RefinementConfig,
    layers: Vec<Layer>,
    store: ParamStore<T>,
}

impl<T: Real> RefinementModule<T> {
    pub fn build(cfg: &RefinementConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = layers(cfg);
        let mut store = ParamStore::new();
        for l in &layers {
            if let Layer::Conv { name, cin, cout, kernel } = l {
                store.add_conv(name, *cin, *cout, *kernel, true, cfg.seed);
            }
        }
        Ok(Self {
            config: cfg.clone(),
            layers,
            store,
        })
    }

    pub fn from_store(cfg: &RefinementConfig, store: ParamStore<T>) -> Result<Self> {
        let fresh = Self::build(cfg)?;
        let shapes = |s: &ParamStore<T>| -> Vec<(String, Vec<usize>)> {
            s.params().iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
        };
        if shapes(&fresh.store) != shapes(&store) || !store.buffers().is_empty() {
            return Err(Error::ConfigMismatch("refinement parameter layout".into()));
        }
        Ok(Self { store, ..fresh })
    }

    pub fn config(&self) -> &RefinementConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Real>(&self) -> RefinementModule<U> {
        RefinementModule {
            config: self.config.clone(),
            layers: self.layers.clone(),
            store: self.store.cast(),
        }
    }
}

impl<T: Real> Refiner<T> for RefinementModule<T> {
    fn refine_var(&self, fw: &mut Forward<'_, T>, p: Var) -> Result<Var> {
        let shape = fw.graph.value(p).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::ShapeMismatch {
                expected: "[n, 1, h, w] probability batch".into(),
                found: format!("{shape:?}"),
            });
        }
        let k = self.config.largest_kernel();
        if shape[2] < k || shape[3] < k {
            return Err(Error::IncompatibleInput {
                height: shape[2],
                width: shape[3],
                reason: format!("smaller than the largest refinement kernel {k}"),
            });
        }
        let mut h = p;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { name, .. } => fw.conv(&self.store, name, h),
                Layer::Relu => fw.graph.relu(h),
                Layer::Dropout(rate) => fw.dropout(h, *rate),
                Layer::Sigmoid => fw.graph.sigmoid(h),
            };
        }
        Ok(h)
    }
}

/// Eval-mode refinement of a single map.
pub fn refine<T: Real, R: Refiner<T>>(m: &R, p: &ProbMap) -> Result<ProbMap> {
    let mut fw = Forward::<T>::eval();
    let data = p.data().iter().map(|&v| T::lit(f64::from(v))).collect();
    let x = fw.input(cris_autograd::Tensor::from_vec(&[1, 1, p.height(), p.width()], data), false);
    let y = m.refine_var(&mut fw, x)?;
    Ok(prob_maps(fw.graph.value(y)).remove(0))
}

/// Backbone plus refinement head: `M_B(I) = refine(B(I))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullModel<T: Real = f32, R = RefinementModule<T>> {
    pub backbone: Backbone<T>,
    pub head: R,
}

pub fn compose<T: Real, R: Refiner<T>>(b: Backbone<T>, m: R) -> FullModel<T, R> {
    FullModel { backbone: b, head: m }
}

impl<T: Real, R: Refiner<T>> FullModel<T, R> {
    /// Both the intermediate and the refined node from one pass.
    pub fn forward_pair_var(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<(Var, Var)> {
        let mid = self.backbone.forward_var(fw, x)?;
        let fin = self.head.refine_var(fw, mid)?;
        Ok((mid, fin))
    }

    /// Eval-mode `(B(I), M_B(I))` for a single image.
    pub fn forward(&self, img: &ImageTensor) -> Result<(ProbMap, ProbMap)> {
        let mut fw = Forward::eval();
        let x = fw.input(image_batch::<T>(&[img])?, false);
        let (mid, fin) = self.forward_pair_var(&mut fw, x)?;
        Ok((
            prob_maps(fw.graph.value(mid)).remove(0),
            prob_maps(fw.graph.value(fin)).remove(0),
        ))
    }
}
