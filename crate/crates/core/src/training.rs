//! Losses, the per-epoch interleaving schedule and the training loop for the
//! three strategies: backbone only, backbone + refinement head trained
//! jointly on the refined output, and the interleaved schedule where even
//! epochs minimise MSE on the backbone output and odd epochs minimise BCE on
//! the refined output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use cris_autograd::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{image_batch, prob_maps, Backbone, BackboneConfig};
use crate::data::permutation;
use crate::metrics::{mean_dice, mean_mse};
use crate::nn::{Forward, ParamStore};
use crate::optim::Adam;
use crate::refinement::{compose, FullModel, RefinementConfig, RefinementModule};
use crate::types::{same_shape, Dataset, MaskTensor, ProbMap, Sample};
use crate::{persistence, Error, Result};

/// Probability clamp applied before the logarithms of the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BackboneOnly,
    BackboneFcnJoint,
    Cris,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::BackboneOnly, Strategy::BackboneFcnJoint, Strategy::Cris];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BackboneOnly => "backbone_only",
            Strategy::BackboneFcnJoint => "backbone_fcn_joint",
            Strategy::Cris => "cris",
        }
    }

    /// Row label used in emitted tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::BackboneOnly => "Backbone",
            Strategy::BackboneFcnJoint => "Backbone+FCN",
            Strategy::Cris => "Proposed",
        }
    }

    pub fn uses_refinement(self) -> bool {
        !matches!(self, Strategy::BackboneOnly)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone_only" | "backbone" => Ok(Strategy::BackboneOnly),
            "backbone_fcn_joint" | "backbone_fcn" => Ok(Strategy::BackboneFcnJoint),
            "cris" | "proposed" => Ok(Strategy::Cris),
            _ => Err(Error::InvalidConfig(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Which objective an epoch optimises: `L1` is MSE on the backbone output,
/// `L2` is BCE on the final output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossId {
    L1,
    L2,
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossId::L1 => "L1",
            LossId::L2 => "L2",
        })
    }
}

/// Parity-complementary loss weights `(w1, w2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochLossWeights {
    pub w1: u8,
    pub w2: u8,
}

impl EpochLossWeights {
    pub const L1_ONLY: Self = Self { w1: 1, w2: 0 };
    pub const L2_ONLY: Self = Self { w1: 0, w2: 1 };

    pub fn active(self) -> LossId {
        if self.w1 == 1 {
            LossId::L1
        } else {
            LossId::L2
        }
    }

    fn of(loss: LossId) -> Self {
        match loss {
            LossId::L1 => Self::L1_ONLY,
            LossId::L2 => Self::L2_ONLY,
        }
    }
}

/// `(1 - e mod 2, e mod 2)`: epoch 0 trains the backbone on L1.
pub fn epoch_weights(e: usize) -> EpochLossWeights {
    let odd = (e % 2) as u8;
    EpochLossWeights { w1: 1 - odd, w2: odd }
}

fn mask_tensor<T: Real>(masks: &[&MaskTensor]) -> Result<Tensor<T>> {
    let first = masks.first().ok_or(Error::EmptyInput("mask batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        same_shape((h, w), (m.height(), m.width()))?;
        data.extend(m.data().iter().map(|&v| T::lit(f64::from(v))));
    }
    Ok(Tensor::from_vec(&[masks.len(), 1, h, w], data))
}

fn scalar_loss(p: &ProbMap, g: &MaskTensor, f: impl Fn(&mut Graph<f64>, Var, &Tensor<f64>) -> Var) -> Result<f64> {
    same_shape((g.height(), g.width()), (p.height(), p.width()))?;
    let mut graph = Graph::<f64>::new();
    let data = p.data().iter().map(|&v| f64::from(v)).collect();
    let pv = graph.leaf(Tensor::from_vec(&[1, 1, p.height(), p.width()], data), false);
    let target = mask_tensor::<f64>(&[g])?;
    let out = f(&mut graph, pv, &target);
    Ok(graph.value(out).item())
}

/// Mean squared error over the pixels of one map.
pub fn loss_mse(p: &ProbMap, g: &MaskTensor) -> Result<f64> {
    scalar_loss(p, g, |graph, v, t| graph.mse(v, t))
}

/// Binary cross entropy over the pixels of one map, with `p` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn loss_bce(p: &ProbMap, g: &MaskTensor) -> Result<f64> {
    scalar_loss(p, g, |graph, v, t| graph.bce(v, t, BCE_EPS))
}

fn default_batch_size() -> usize {
    4
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_baseline_loss() -> LossId {
    LossId::L2
}
fn default_eval_threshold() -> f64 {
    0.5
}
fn default_eval_batch() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    /// Objective of the backbone-only baseline (BCE unless overridden).
    #[serde(default = "default_baseline_loss")]
    pub baseline_loss: LossId,
    /// Threshold for the per-epoch validation DICE.
    #[serde(default = "default_eval_threshold")]
    pub eval_threshold: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl TrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            learning_rate: default_lr(),
            adam_betas: default_betas(),
            adam_eps: default_adam_eps(),
            strategy,
            seed: 0,
            baseline_loss: default_baseline_loss(),
            eval_threshold: default_eval_threshold(),
            eval_batch_size: default_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidConfig(format!("adam betas {:?}", self.adam_betas)));
        }
        Ok(())
    }

    /// Loss weights used at epoch `e` under this strategy.
    pub fn weights_for(&self, e: usize) -> EpochLossWeights {
        match self.strategy {
            Strategy::BackboneOnly => EpochLossWeights::of(self.baseline_loss),
            Strategy::BackboneFcnJoint => EpochLossWeights::L2_ONLY,
            Strategy::Cris => epoch_weights(e),
        }
    }
}

/// Architecture description sufficient to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ModelConfig {
    Plain { backbone: BackboneConfig },
    Refined { backbone: BackboneConfig, refinement: RefinementConfig },
}

impl ModelConfig {
    /// The model shape a strategy trains.
    pub fn for_strategy(strategy: Strategy, backbone: BackboneConfig, refinement: RefinementConfig) -> Self {
        if strategy.uses_refinement() {
            ModelConfig::Refined { backbone, refinement }
        } else {
            ModelConfig::Plain { backbone }
        }
    }

    pub fn backbone(&self) -> &BackboneConfig {
        match self {
            ModelConfig::Plain { backbone } | ModelConfig::Refined { backbone, .. } => backbone,
        }
    }
}

/// A trainable model: a bare backbone or a backbone with refinement head.
#[derive(Clone, Debug, PartialEq)]
pub enum SegModel<T: Real = f32> {
    Plain(Backbone<T>),
    Refined(FullModel<T>),
}

impl<T: Real> SegModel<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg {
            ModelConfig::Plain { backbone } => SegModel::Plain(Backbone::build(backbone)?),
            ModelConfig::Refined { backbone, refinement } => {
                SegModel::Refined(compose(Backbone::build(backbone)?, RefinementModule::build(refinement)?))
            }
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            SegModel::Plain(b) => ModelConfig::Plain {
                backbone: b.config().clone(),
            },
            SegModel::Refined(m) => ModelConfig::Refined {
                backbone: m.backbone.config().clone(),
                refinement: m.head.config().clone(),
            },
        }
    }

    pub fn backbone(&self) -> &Backbone<T> {
        match self {
            SegModel::Plain(b) => b,
            SegModel::Refined(m) => &m.backbone,
        }
    }

    pub fn stores(&self) -> Vec<&ParamStore<T>> {
        match self {
            SegModel::Plain(b) => vec![b.store()],
            SegModel::Refined(m) => vec![m.backbone.store(), m.head.store()],
        }
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        match self {
            SegModel::Plain(b) => vec![b.store_mut()],
            SegModel::Refined(m) => vec![m.backbone.store_mut(), m.head.store_mut()],
        }
    }

    /// Copy of every trainable parameter keyed by canonical name.
    pub fn param_snapshot(&self) -> BTreeMap<String, Tensor<T>> {
        self.stores()
            .into_iter()
            .flat_map(|s| s.params().iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }

    /// Eval-mode `(intermediate, final)` maps; for a bare backbone both are
    /// the backbone output.
    pub fn predict_pairs(&self, samples: &[&Sample], batch_size: usize) -> Result<Vec<(ProbMap, ProbMap)>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            let mut fw = Forward::eval();
            let x = fw.input(image_batch::<T>(&images)?, false);
            match self {
                SegModel::Plain(b) => {
                    let y = b.forward_var(&mut fw, x)?;
                    out.extend(prob_maps(fw.graph.value(y)).into_iter().map(|p| (p.clone(), p)));
                }
                SegModel::Refined(m) => {
                    let (mid, fin) = m.forward_pair_var(&mut fw, x)?;
                    let mids = prob_maps(fw.graph.value(mid));
                    let fins = prob_maps(fw.graph.value(fin));
                    out.extend(mids.into_iter().zip(fins));
                }
            }
        }
        Ok(out)
    }

    /// Eval-mode final probability maps.
    pub fn predict(&self, samples: &[&Sample], batch_size: usize) -> Result<Vec<ProbMap>> {
        Ok(self.predict_pairs(samples, batch_size)?.into_iter().map(|(_, f)| f).collect())
    }
}

/// What one optimisation step did. The inactive term is exactly zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub objective: f64,
    pub l1: f64,
    pub l2: f64,
}

/// One Adam step on the batch mean of the active loss term.
///
/// Under `(1, 0)` only the backbone runs forward, so refinement parameters
/// and their optimizer moments are untouched. Under `(0, 1)` the BCE of the
/// refined output backpropagates through the head and the backbone.
pub fn train_step<T: Real>(
    model: &mut SegModel<T>,
    batch: &[&Sample],
    weights: EpochLossWeights,
    opt: &mut Adam<T>,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let masks: Vec<_> = batch.iter().map(|s| &s.mask).collect();
    let x_t = image_batch::<T>(&images)?;
    let target = mask_tensor::<T>(&masks)?;
    let active = weights.active();

    let mut fw = Forward::train(Some(dropout_rng));
    let x = fw.input(x_t, false);
    let loss = match (&*model, active) {
        (SegModel::Plain(b), LossId::L1) => {
            let p = b.forward_var(&mut fw, x)?;
            fw.graph.mse(p, &target)
        }
        (SegModel::Plain(b), LossId::L2) => {
            let p = b.forward_var(&mut fw, x)?;
            fw.graph.bce(p, &target, T::lit(BCE_EPS))
        }
        (SegModel::Refined(m), LossId::L1) => {
            let mid = m.backbone.forward_var(&mut fw, x)?;
            fw.graph.mse(mid, &target)
        }
        (SegModel::Refined(m), LossId::L2) => {
            let (_, fin) = m.forward_pair_var(&mut fw, x)?;
            fw.graph.bce(fin, &target, T::lit(BCE_EPS))
        }
    };
    let value = fw.graph.value(loss).item().as_f64();
    let grads = fw.graph.backward(loss);
    let named = fw.param_grads(&grads);
    let bn_stats = fw.take_bn_stats();
    drop(fw);

    for store in model.stores_mut() {
        opt.step(store, &named);
        store.apply_bn_stats(&bn_stats);
    }
    let (l1, l2) = match active {
        LossId::L1 => (value, 0.0),
        LossId::L2 => (0.0, value),
    };
    Ok(StepOutcome {
        objective: f64::from(weights.w1) * l1 + f64::from(weights.w2) * l2,
        l1,
        l2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub active_loss: LossId,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn active_losses(&self) -> Vec<LossId> {
        self.records.iter().map(|r| r.active_loss).collect()
    }

    pub fn val_dice(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_dice).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,active_loss,train_loss,val_dice,val_mse\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.active_loss, r.train_loss, r.val_dice, r.val_mse
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("epoch,active_loss,train_loss,val_dice,val_mse") {
            return Err(Error::parse("history csv", "unexpected header"));
        }
        let num = |v: &str| v.parse::<f64>().map_err(|e| Error::parse("history csv", e));
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::parse("history csv", format!("bad row {line:?}")));
            }
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|e| Error::parse("history csv", e))?,
                active_loss: match f[1] {
                    "L1" => LossId::L1,
                    "L2" => LossId::L2,
                    other => return Err(Error::parse("history csv", format!("loss id {other:?}"))),
                },
                train_loss: num(f[2])?,
                val_dice: num(f[3])?,
                val_mse: num(f[4])?,
            });
        }
        Ok(Self { records })
    }
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// RNG for one purpose within one epoch, so a run resumed at any epoch
/// boundary replays the same draws.
pub fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | stream);
    rng
}

/// Everything needed to continue a run at `next_epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Real = f32> {
    pub model: SegModel<T>,
    pub optimizer: Adam<T>,
    pub next_epoch: usize,
    pub history: TrainHistory,
    pub config: TrainConfig,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(model: SegModel<T>, cfg: &TrainConfig) -> Self {
        Self {
            model,
            optimizer: Adam::new(cfg.learning_rate, cfg.adam_betas, cfg.adam_eps),
            next_epoch: 0,
            history: TrainHistory::default(),
            config: cfg.clone(),
        }
    }
}

/// Optional side effects of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Directory for `epoch_XXXX.ckpt` and `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Write a checkpoint after every `k`-th epoch.
    pub checkpoint_every: Option<usize>,
    /// Stop (without error) once this many epochs are complete.
    pub stop_after: Option<usize>,
    /// Called after each epoch; returning `false` stops training.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord) -> bool>,
    /// Tag written into checkpoints, normally the split-manifest digest.
    pub manifest_hash: Option<String>,
}

fn check_shape(strategy: Strategy, model: &SegModel<impl Real>) -> Result<()> {
    match (strategy.uses_refinement(), model) {
        (false, SegModel::Plain(_)) | (true, SegModel::Refined(_)) => Ok(()),
        _ => Err(Error::InvalidConfig(format!(
            "strategy {strategy} does not match the model shape"
        ))),
    }
}

/// Validation DICE at the configured threshold and validation MSE of the
/// final output.
pub fn validate<T: Real>(model: &SegModel<T>, val: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let refs: Vec<&Sample> = val.samples().iter().collect();
    let probs = model.predict(&refs, cfg.eval_batch_size)?;
    let gts: Vec<MaskTensor> = val.samples().iter().map(|s| s.mask.clone()).collect();
    Ok((mean_dice(&probs, &gts, cfg.eval_threshold)?, mean_mse(&probs, &gts)?))
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train<T: Real>(
    model: SegModel<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SegModel<T>, TrainHistory)> {
    let state = run_training(TrainState::fresh(model, cfg), train, val, &mut TrainHooks::default())?;
    Ok((state.model, state.history))
}

/// Continues `state` until `state.config.epochs` epochs are complete or a
/// hook stops it.
pub fn run_training<T: Real>(
    mut state: TrainState<T>,
    train: &Dataset,
    val: &Dataset,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainState<T>> {
    let cfg = state.config.clone();
    cfg.validate()?;
    check_shape(cfg.strategy, &state.model)?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSplit);
    }
    if let Some(dir) = &hooks.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut best_dice = state
        .history
        .records
        .iter()
        .map(|r| r.val_dice)
        .fold(f64::NEG_INFINITY, f64::max);
    while state.next_epoch < cfg.epochs {
        if hooks.stop_after.is_some_and(|n| state.next_epoch >= n) {
            break;
        }
        let epoch = state.next_epoch;
        let weights = cfg.weights_for(epoch);
        let order = permutation(train.len(), &mut epoch_rng(cfg.seed, epoch, SHUFFLE_STREAM));
        let mut dropout_rng = epoch_rng(cfg.seed, epoch, DROPOUT_STREAM);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train.samples()[i]).collect();
            let out = train_step(&mut state.model, &batch, weights, &mut state.optimizer, &mut dropout_rng)?;
            loss_sum += out.objective * batch.len() as f64;
        }
        let (val_dice, val_mse) = validate(&state.model, val, &cfg)?;
        let record = EpochRecord {
            epoch,
            active_loss: weights.active(),
            train_loss: loss_sum / train.len() as f64,
            val_dice,
            val_mse,
        };
        log::debug!(
            "epoch {epoch} {} loss {:.5} val dice {:.4} mse {:.4}",
            record.active_loss,
            record.train_loss,
            val_dice,
            val_mse
        );
        state.history.records.push(record.clone());
        state.next_epoch += 1;

        if let Some(dir) = &hooks.checkpoint_dir {
            let tag = hooks.manifest_hash.as_deref();
            if hooks.checkpoint_every.is_some_and(|k| k > 0 && state.next_epoch.is_multiple_of(k)) {
                persistence::save_checkpoint(&state, tag, &dir.join(format!("epoch_{:04}.ckpt", state.next_epoch)))?;
            }
            if val_dice > best_dice {
                best_dice = val_dice;
                persistence::save_checkpoint(&state, tag, &dir.join("best.ckpt"))?;
            }
        }
        if let Some(cb) = hooks.on_epoch.as_mut() {
            if !cb(&record) {
                break;
            }
        }
    }
    Ok(state)
}
