use std::rc::Rc;

use crate::conv;
use crate::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat input offsets selected by a 2x2 max pool, one per pooled element.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    argmax: Rc<Vec<usize>>,
    input_shape: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn offsets(&self) -> &[usize] {
        &self.argmax
    }
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate, the value folded into running statistics.
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    ConvT2x2 { x: Var, w: Var, b: Option<Var> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    MaxPool2x2 { x: Var, argmax: Rc<Vec<usize>> },
    MaxUnpool2x2 { x: Var, argmax: Rc<Vec<usize>> },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Mse { p: Var, target: Tensor<T> },
    Bce { p: Var, target: Tensor<T>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only computation tape. Nodes are created in topological order, so
/// the reverse pass is a single backwards sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b }, &inputs)
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = conv::conv_t2x2_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::ConvT2x2 { x, w, b }, &inputs)
    }

    /// Batch norm over `(n, h, w)` using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, BatchStats<T>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let m = n * hw;
        let mf = T::from_usize(m).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for img in 0..n {
                s += xv.data()[(img * c + ch) * hw..(img * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut ss = T::zero();
            for img in 0..n {
                for &v in &xv.data()[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        for img in 0..n {
            for ch in 0..c {
                let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                for ((xh, o), &v) in xhat.data_mut()[r.clone()]
                    .iter_mut()
                    .zip(&mut out.data_mut()[r.clone()])
                    .zip(&xv.data()[r.clone()])
                {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = *xh * g[ch] + bt[ch];
                }
            }
        }
        let var_unbiased = if m > 1 {
            let corr = mf / T::from_usize(m - 1).unwrap();
            var.iter().map(|&v| v * corr).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean: mean.clone(),
            var_unbiased,
        };
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape());
        for img in 0..n {
            for ch in 0..c {
                let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                for (o, &v) in out.data_mut()[r.clone()].iter_mut().zip(&xv.data()[r]) {
                    *o = (v - mean[ch]) * inv_std[ch] * g[ch] + bt[ch];
                }
            }
        }
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` keeps).
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: T) -> Var {
        let xv = self.value(x);
        assert_eq!(keep.len(), xv.len(), "dropout mask length");
        let scale = T::one() / (T::one() - p);
        let mask: Vec<T> = keep.iter().map(|&k| if k { scale } else { T::zero() }).collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(xv.shape(), data);
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// 2x2 stride-2 max pool; ties resolve to the first element in row-major
    /// window order.
    pub fn max_pool2x2(&mut self, x: Var) -> (Var, PoolIndices) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2x2 needs even spatial size, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for off in [1, w, w + 1] {
                        let cand = base + 2 * i * w + 2 * j + off;
                        if d[cand] > d[best] {
                            best = cand;
                        }
                    }
                    out.data_mut()[(plane * oh + i) * ow + j] = d[best];
                    argmax.push(best);
                }
            }
        }
        let argmax = Rc::new(argmax);
        let idx = PoolIndices {
            argmax: Rc::clone(&argmax),
            input_shape: xv.shape().to_vec(),
        };
        (self.push(out, Op::MaxPool2x2 { x, argmax }, &[x]), idx)
    }

    /// Places each element of `x` back at the position recorded by the pool
    /// that produced `idx`; every other position is zero.
    pub fn max_unpool2x2(&mut self, x: Var, idx: &PoolIndices) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), idx.argmax.len(), "unpool input does not match pool indices");
        let mut out = Tensor::zeros(&idx.input_shape);
        for (&v, &pos) in xv.data().iter().zip(idx.argmax.iter()) {
            out.data_mut()[pos] = v;
        }
        self.push(
            out,
            Op::MaxUnpool2x2 {
                x,
                argmax: Rc::clone(&idx.argmax),
            },
            &[x],
        )
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat spatial/batch mismatch");
                pc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for img in 0..n {
            let mut off = 0;
            for (&p, &pc) in parts.iter().zip(&chans) {
                let src = &self.value(p).data()[img * pc * hw..(img + 1) * pc * hw];
                out.data_mut()[(img * total + off) * hw..(img * total + off + pc) * hw].copy_from_slice(src);
                off += pc;
            }
        }
        self.push(out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean squared error against a constant target, averaged over every
    /// element.
    pub fn mse(&mut self, p: Var, target: &Tensor<T>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), target.shape(), "mse shape mismatch");
        let n = T::from_usize(pv.len()).unwrap();
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
        self.push(
            Tensor::scalar(s / n),
            Op::Mse {
                p,
                target: target.clone(),
            },
            &[p],
        )
    }

    /// Binary cross entropy against a constant target, averaged over every
    /// element. Probabilities are clamped to `[eps, 1 - eps]` before the logs.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>, eps: T) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), target.shape(), "bce shape mismatch");
        let n = T::from_usize(pv.len()).unwrap();
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pr, &g)| {
                let pc = pr.max(eps).min(T::one() - eps);
                -(g * pc.ln() + (T::one() - g) * (T::one() - pc).ln())
            })
            .sum::<T>();
        self.push(
            Tensor::scalar(s / n),
            Op::Bce {
                p,
                target: target.clone(),
                eps,
            },
            &[p],
        )
    }

    /// Which branch every piecewise op took: ReLU input signs, max-pool
    /// winners and BCE clamp regions. Two evaluations with equal patterns
    /// lie on the same smooth piece, so finite differences between them are
    /// meaningful.
    pub fn kink_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    let v = &self.nodes[x.0].value;
                    out.extend(v.data().chunks(64).map(|c| {
                        c.iter().enumerate().fold(0u64, |acc, (i, &e)| acc | (u64::from(e > T::zero()) << i))
                    }));
                }
                Op::MaxPool2x2 { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u64)),
                Op::Bce { p, eps, .. } => {
                    let hi = T::one() - *eps;
                    out.extend(self.nodes[p.0].value.data().iter().map(|&v| u64::from(v < *eps) | u64::from(v > hi) << 1));
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse-mode sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d { x, w, b } | Op::ConvT2x2 { x, w, b } => {
                    let need_dx = self.requires_grad(*x);
                    let cg = if matches!(node.op, Op::Conv2d { .. }) {
                        conv::conv2d_backward(self.value(*x), self.value(*w), &g, need_dx)
                    } else {
                        conv::conv_t2x2_backward(self.value(*x), self.value(*w), &g, need_dx)
                    };
                    if let Some(dx) = cg.dx {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    self.accumulate(&mut grads, *w, cg.dw);
                    if let Some(b) = b {
                        self.accumulate(&mut grads, *b, cg.db);
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let mf = T::from_usize(n * hw).unwrap();
                    let gv = self.value(*gamma).data();
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    for img in 0..n {
                        for ch in 0..c {
                            let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                            for (&dy, &xh) in g.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                                dbeta.data_mut()[ch] += dy;
                                dgamma.data_mut()[ch] += dy * xh;
                            }
                        }
                    }
                    if self.requires_grad(*x) {
                        let mut dx = Tensor::zeros(g.shape());
                        for img in 0..n {
                            for ch in 0..c {
                                let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                                let k = gv[ch] * inv_std[ch] / mf;
                                let sb = dbeta.data()[ch];
                                let sg = dgamma.data()[ch];
                                for ((d, &dy), &xh) in dx.data_mut()[r.clone()]
                                    .iter_mut()
                                    .zip(&g.data()[r.clone()])
                                    .zip(&xhat.data()[r])
                                {
                                    *d = k * (mf * dy - sb - xh * sg);
                                }
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                    self.accumulate(&mut grads, *gamma, dgamma);
                    self.accumulate(&mut grads, *beta, dbeta);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let xv = self.value(*x);
                    let gv = self.value(*gamma).data();
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    let mut dx = Tensor::zeros(g.shape());
                    for img in 0..n {
                        for ch in 0..c {
                            let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                            for ((d, &dy), &v) in dx.data_mut()[r.clone()]
                                .iter_mut()
                                .zip(&g.data()[r.clone()])
                                .zip(&xv.data()[r])
                            {
                                dbeta.data_mut()[ch] += dy;
                                dgamma.data_mut()[ch] += dy * (v - mean[ch]) * inv_std[ch];
                                *d = dy * gv[ch] * inv_std[ch];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dgamma);
                    self.accumulate(&mut grads, *beta, dbeta);
                }
                Op::Relu { x } => {
                    let y = &node.value;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = &node.value;
                    let mut dx = g;
                    for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= s * (T::one() - s);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2x2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&d, &pos) in g.data().iter().zip(argmax.iter()) {
                        dx.data_mut()[pos] += d;
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::MaxUnpool2x2 { x, argmax } => {
                    let data = argmax.iter().map(|&pos| g.data()[pos]).collect();
                    let dx = Tensor::from_vec(self.value(*x).shape(), data);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let (n, total, h, w) = g.dims4();
                    let hw = h * w;
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).dims4().1;
                        if self.requires_grad(p) {
                            let mut dp = Tensor::zeros(self.value(p).shape());
                            for img in 0..n {
                                dp.data_mut()[img * pc * hw..(img + 1) * pc * hw].copy_from_slice(
                                    &g.data()[(img * total + off) * hw..(img * total + off + pc) * hw],
                                );
                            }
                            self.accumulate(&mut grads, p, dp);
                        }
                        off += pc;
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    self.accumulate(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Sum { x } => {
                    let s = g.item();
                    self.accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), s));
                }
                Op::Mse { p, target } => {
                    let pv = self.value(*p);
                    let k = g.item() * T::lit(2.0) / T::from_usize(pv.len()).unwrap();
                    let data = pv.data().iter().zip(target.data()).map(|(&a, &b)| k * (a - b)).collect();
                    self.accumulate(&mut grads, *p, Tensor::from_vec(pv.shape(), data));
                }
                Op::Bce { p, target, eps } => {
                    let pv = self.value(*p);
                    let k = g.item() / T::from_usize(pv.len()).unwrap();
                    let e = *eps;
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&pr, &t)| {
                            let pc = pr.max(e).min(T::one() - e);
                            k * (pc - t) / (pc * (T::one() - pc))
                        })
                        .collect();
                    self.accumulate(&mut grads, *p, Tensor::from_vec(pv.shape(), data));
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
