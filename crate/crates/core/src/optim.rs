use std::collections::BTreeMap;

use cris_autograd::{Real, Tensor};

use crate::nn::ParamStore;

/// First and second moment estimates of one parameter. `step` counts only
/// the updates this parameter actually received.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Adam with per-parameter state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            lr,
            betas,
            eps,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    pub fn insert_state(&mut self, name: impl Into<String>, moments: Moments<T>) {
        self.state.insert(name.into(), moments);
    }

    /// Updates the parameters of `store` that appear in `grads`; all other
    /// parameters and their moments are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        let (b1, b2) = self.betas;
        for (name, g) in grads {
            let Some(p) = store.param_mut(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                step: 0,
            });
            st.step += 1;
            let t = st.step as i32;
            let corr1 = 1.0 - b1.powi(t);
            let corr2 = 1.0 - b2.powi(t);
            let step_size = T::lit(self.lr / corr1);
            let corr2_sqrt = T::lit(corr2.sqrt());
            let (tb1, tb2) = (T::lit(b1), T::lit(b2));
            let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
            let eps = T::lit(self.eps);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
            {
                *mv = tb1 * *mv + ob1 * gv;
                *vv = tb2 * *vv + ob2 * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / corr2_sqrt + eps);
            }
        }
    }
}
