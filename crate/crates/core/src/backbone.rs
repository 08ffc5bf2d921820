//! Encoder-decoder backbones producing the intermediate probability map:
//! width/depth-scaled UNet, UNet++ (nested dense skips, single output head)
//! and SegNet (max-pool indices reused for unpooling). Every convolution
//! inside a block is followed by batch norm and ReLU; the head is a 1x1
//! convolution and a sigmoid.

use std::fmt;
use std::str::FromStr;

use cris_autograd::{Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::nn::{Forward, ParamStore};
use crate::types::{ImageTensor, ProbMap};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Unet,
    Unetpp,
    Segnet,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::Unet, BackboneKind::Unetpp, BackboneKind::Segnet];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Unet => "unet",
            BackboneKind::Unetpp => "unetpp",
            BackboneKind::Segnet => "segnet",
        }
    }

    /// Column label used in emitted tables.
    pub fn display_name(self) -> &'static str {
        match self {
            BackboneKind::Unet => "UNet",
            BackboneKind::Unetpp => "UNet++",
            BackboneKind::Segnet => "SegNet",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(BackboneKind::Unet),
            "unetpp" | "unet++" | "unetplusplus" => Ok(BackboneKind::Unetpp),
            "segnet" => Ok(BackboneKind::Segnet),
            _ => Err(Error::UnsupportedBackbone(s.to_string())),
        }
    }
}

fn default_base_channels() -> usize {
    16
}

fn default_depth() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind) -> Self {
        Self {
            kind,
            base_channels: default_base_channels(),
            depth: default_depth(),
            seed: 0,
        }
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    pub fn with_depth(mut self, d: usize) -> Self {
        self.depth = d;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!("backbone depth {} < 2", self.depth)));
        }
        if self.depth > 8 {
            return Err(Error::InvalidConfig(format!("backbone depth {} > 8", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::InvalidConfig(format!(
                "backbone base_channels {} < 4",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Input sides must be divisible by `2^depth`.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::IncompatibleInput {
                height,
                width,
                reason: format!("sides must be divisible by 2^{} = {f}", self.depth),
            });
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// A backbone network `B`: image batch in, probability map batch out.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Real = f32> {
    config: BackboneConfig,
    store: ParamStore<T>,
}

const NS: &str = "backbone";

fn add_block<T: Real>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) {
    s.add_conv(&format!("{name}.conv"), cin, cout, 3, false, seed);
    s.add_batch_norm(&format!("{name}.bn"), cout);
}

fn add_double<T: Real>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) {
    add_block(s, &format!("{name}.b0"), cin, cout, seed);
    add_block(s, &format!("{name}.b1"), cout, cout, seed);
}

fn double<T: Real>(fw: &mut Forward<'_, T>, s: &ParamStore<T>, name: &str, x: Var) -> Var {
    let y = fw.conv_bn_relu(s, &format!("{name}.b0"), x);
    fw.conv_bn_relu(s, &format!("{name}.b1"), y)
}

/// Parameter layout for a configuration, with freshly initialised values.
fn init_store<T: Real>(cfg: &BackboneConfig) -> ParamStore<T> {
    let mut s = ParamStore::new();
    let seed = cfg.seed;
    let d = cfg.depth;
    let ch = |l| cfg.channels(l);
    match cfg.kind {
        BackboneKind::Unet => {
            for i in 0..d {
                let cin = if i == 0 { 3 } else { ch(i - 1) };
                add_double(&mut s, &format!("{NS}.enc{i}"), cin, ch(i), seed);
            }
            add_double(&mut s, &format!("{NS}.mid"), ch(d - 1), ch(d), seed);
            for i in 0..d {
                s.add_conv_transpose(&format!("{NS}.dec{i}.up"), ch(i + 1), ch(i), seed);
                add_double(&mut s, &format!("{NS}.dec{i}"), 2 * ch(i), ch(i), seed);
            }
        }
        BackboneKind::Unetpp => {
            for i in 0..=d {
                for j in 0..=(d - i) {
                    let name = format!("{NS}.x{i}_{j}");
                    if j == 0 {
                        let cin = if i == 0 { 3 } else { ch(i - 1) };
                        add_double(&mut s, &name, cin, ch(i), seed);
                    } else {
                        s.add_conv_transpose(&format!("{name}.up"), ch(i + 1), ch(i), seed);
                        add_double(&mut s, &name, (j + 1) * ch(i), ch(i), seed);
                    }
                }
            }
        }
        BackboneKind::Segnet => {
            for i in 0..d {
                let cin = if i == 0 { 3 } else { ch(i - 1) };
                add_double(&mut s, &format!("{NS}.enc{i}"), cin, ch(i), seed);
                let cout = if i == 0 { ch(0) } else { ch(i - 1) };
                add_block(&mut s, &format!("{NS}.dec{i}.b0"), ch(i), ch(i), seed);
                add_block(&mut s, &format!("{NS}.dec{i}.b1"), ch(i), cout, seed);
            }
        }
    }
    s.add_conv(&format!("{NS}.head"), ch(0), 1, 1, true, seed);
    s
}

fn layout_matches<T: Real>(a: &ParamStore<T>, b: &ParamStore<T>) -> Result<()> {
    let shapes = |s: &ParamStore<T>| -> Vec<(String, Vec<usize>)> {
        s.params()
            .iter()
            .chain(s.buffers())
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    };
    let (sa, sb) = (shapes(a), shapes(b));
    if sa != sb {
        let diff = sa
            .iter()
            .zip(&sb)
            .find(|(x, y)| x != y)
            .map(|(x, y)| format!("{} {:?} vs {} {:?}", x.0, x.1, y.0, y.1))
            .unwrap_or_else(|| format!("{} vs {} tensors", sa.len(), sb.len()));
        return Err(Error::ConfigMismatch(diff));
    }
    Ok(())
}

impl<T: Real> Backbone<T> {
    pub fn build(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            store: init_store(cfg),
        })
    }

    /// Reassembles a backbone from stored tensors, which must match the
    /// layout implied by `cfg` exactly.
    pub fn from_store(cfg: &BackboneConfig, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        layout_matches(&init_store::<T>(cfg), &store)?;
        Ok(Self {
            config: cfg.clone(),
            store,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }

    /// Records the forward pass of an `[n, 3, h, w]` batch on `fw`'s tape and
    /// returns the `[n, 1, h, w]` probability node.
    pub fn forward_var(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = fw.graph.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch {
                expected: "[n, 3, h, w] batch".into(),
                found: format!("{shape:?}"),
            });
        }
        self.config.check_input(shape[2], shape[3])?;
        let s = &self.store;
        let d = self.config.depth;
        let top = match self.config.kind {
            BackboneKind::Unet => {
                let mut skips = Vec::with_capacity(d);
                let mut h = x;
                for i in 0..d {
                    let e = double(fw, s, &format!("{NS}.enc{i}"), h);
                    skips.push(e);
                    h = fw.graph.max_pool2x2(e).0;
                }
                h = double(fw, s, &format!("{NS}.mid"), h);
                for i in (0..d).rev() {
                    let up = fw.conv_transpose(s, &format!("{NS}.dec{i}.up"), h);
                    let cat = fw.graph.concat_channels(&[skips[i], up]);
                    h = double(fw, s, &format!("{NS}.dec{i}"), cat);
                }
                h
            }
            BackboneKind::Unetpp => {
                // nodes[i][j] is X^{i,j}
                let mut nodes: Vec<Vec<Var>> = vec![Vec::new(); d + 1];
                for i in 0..=d {
                    let input = if i == 0 {
                        x
                    } else {
                        fw.graph.max_pool2x2(nodes[i - 1][0]).0
                    };
                    nodes[i].push(double(fw, s, &format!("{NS}.x{i}_0"), input));
                }
                for j in 1..=d {
                    for i in 0..=(d - j) {
                        let name = format!("{NS}.x{i}_{j}");
                        let up = fw.conv_transpose(s, &format!("{name}.up"), nodes[i + 1][j - 1]);
                        let mut parts = nodes[i][..j].to_vec();
                        parts.push(up);
                        let cat = fw.graph.concat_channels(&parts);
                        let out = double(fw, s, &name, cat);
                        nodes[i].push(out);
                    }
                }
                nodes[0][d]
            }
            BackboneKind::Segnet => {
                let mut indices = Vec::with_capacity(d);
                let mut h = x;
                for i in 0..d {
                    let e = double(fw, s, &format!("{NS}.enc{i}"), h);
                    let (p, idx) = fw.graph.max_pool2x2(e);
                    indices.push(idx);
                    h = p;
                }
                for i in (0..d).rev() {
                    let up = fw.graph.max_unpool2x2(h, &indices[i]);
                    h = double(fw, s, &format!("{NS}.dec{i}"), up);
                }
                h
            }
        };
        let logits = fw.conv(s, &format!("{NS}.head"), top);
        Ok(fw.graph.sigmoid(logits))
    }
}

/// Stacks images into an `[n, 3, h, w]` tensor.
pub fn image_batch<T: Real>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::EmptyInput("image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        crate::types::same_shape((h, w), (img.height(), img.width()))?;
        data.extend(img.data().iter().map(|&v| T::lit(f64::from(v))));
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
}

/// Splits an `[n, 1, h, w]` tensor into probability maps.
pub fn prob_maps<T: Real>(t: &Tensor<T>) -> Vec<ProbMap> {
    let (n, c, h, w) = t.dims4();
    assert_eq!(c, 1);
    t.data()
        .chunks(h * w)
        .take(n)
        .map(|chunk| {
            let data = chunk.iter().map(|&v| v.as_f64() as f32).collect();
            ProbMap::new(h, w, data).expect("chunk size matches")
        })
        .collect()
}

/// Eval-mode forward pass of a single image.
pub fn backbone_forward<T: Real>(b: &Backbone<T>, img: &ImageTensor) -> Result<ProbMap> {
    let mut fw = Forward::eval();
    let x = fw.input(image_batch::<T>(&[img])?, false);
    let y = b.forward_var(&mut fw, x)?;
    Ok(prob_maps(fw.graph.value(y)).remove(0))
}
