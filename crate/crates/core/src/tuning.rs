//! Learning-rate search with median pruning.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::persistence::write_json;
use crate::training::{run_training, EpochRecord, ModelConfig, SegModel, TrainConfig, TrainHooks, TrainState};
use crate::types::Dataset;
use crate::{Error, Result};

pub const LR_MIN: f64 = 1e-6;
pub const LR_MAX: f64 = 1e-2;

fn default_lr_min() -> f64 {
    LR_MIN
}
fn default_lr_max() -> f64 {
    LR_MAX
}
fn default_trials() -> usize {
    20
}
fn default_warmup() -> usize {
    5
}
fn default_min_trials() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunerConfig {
    /// Epoch indices below this are never pruned.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    /// Completed trials needed before pruning can fire.
    #[serde(default = "default_min_trials")]
    pub min_trials: usize,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: default_warmup(),
            min_trials: default_min_trials(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub pruner: PrunerConfig,
    /// Epoch budget per trial; defaults to the training budget.
    #[serde(default)]
    pub epochs: Option<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr_min: LR_MIN,
            lr_max: LR_MAX,
            trials: default_trials(),
            pruner: PrunerConfig::default(),
            epochs: None,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning-rate bounds [{}, {}]",
                self.lr_min, self.lr_max
            )));
        }
        if self.epochs == Some(0) {
            return Err(Error::InvalidConfig("tuning epochs must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("at least one trial is required".into()));
        }
        Ok(())
    }
}

/// Log-uniform learning rate within the space's bounds.
pub fn sample_lr<R: Rng>(space: &SearchSpace, rng: &mut R) -> f64 {
    let (lo, hi) = (space.lr_min.ln(), space.lr_max.ln());
    let u: f64 = rng.gen();
    (lo + u * (hi - lo)).exp().clamp(space.lr_min, space.lr_max)
}

/// `base` with a freshly drawn learning rate; every other field is kept.
pub fn sample_config<R: Rng>(space: &SearchSpace, base: &TrainConfig, rng: &mut R) -> TrainConfig {
    TrainConfig {
        learning_rate: sample_lr(space, rng),
        ..base.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Complete,
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub learning_rate: f64,
    pub val_dice: Vec<f64>,
    pub status: TrialStatus,
    /// Last recorded validation DICE.
    pub final_score: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// True iff `record`'s validation DICE at `epoch` is strictly below the
/// median of the completed trials' values at that epoch.
pub fn should_prune(record: &TrialRecord, completed: &[TrialRecord], epoch: usize, pruner: &PrunerConfig) -> bool {
    if epoch < pruner.warmup_epochs {
        return false;
    }
    let Some(&value) = record.val_dice.get(epoch) else {
        return false;
    };
    let mut peers: Vec<f64> = completed
        .iter()
        .filter(|t| t.status == TrialStatus::Complete)
        .filter_map(|t| t.val_dice.get(epoch).copied())
        .filter(|v| !v.is_nan())
        .collect();
    if peers.len() < pruner.min_trials.max(1) || value.is_nan() {
        return false;
    }
    value < median(&mut peers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyStatus {
    Ok,
    /// No trial completed; the best partial trial was returned.
    AllPruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub status: StudyStatus,
    pub best_trial: usize,
    pub best_learning_rate: f64,
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneOutcome {
    pub best: TrainConfig,
    pub summary: StudySummary,
}

/// Picks the completed trial with the highest final score (lowest trial id
/// on ties), or the best partial trial when everything was pruned.
pub fn select_best(records: &[TrialRecord]) -> Option<(usize, StudyStatus)> {
    let pick = |complete_only: bool| {
        records
            .iter()
            .enumerate()
            .filter(|(_, r)| !complete_only || r.status == TrialStatus::Complete)
            .filter(|(_, r)| !r.final_score.is_nan())
            .fold(None::<(usize, f64)>, |best, (i, r)| match best {
                Some((_, s)) if s >= r.final_score => best,
                _ => Some((i, r.final_score)),
            })
            .map(|(i, _)| i)
    };
    match pick(true) {
        Some(i) => Some((i, StudyStatus::Ok)),
        None => pick(false).or(if records.is_empty() { None } else { Some(0) }).map(|i| (i, StudyStatus::AllPruned)),
    }
}

/// Runs `space.trials` sequential trials. Trial `i` draws its learning rate
/// from a ChaCha8 stream seeded by `seed`; everything else comes from
/// `base`. With `study_dir`, each trial is written to `trial_XXX.json` and
/// the summary to `study.json`.
pub fn tune(
    space: &SearchSpace,
    model: &ModelConfig,
    base: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    study_dir: Option<&Path>,
) -> Result<TuneOutcome> {
    space.validate()?;
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<TrialRecord> = Vec::with_capacity(space.trials);
    let mut configs = Vec::with_capacity(space.trials);
    for trial in 0..space.trials {
        let mut cfg = sample_config(space, base, &mut rng);
        cfg.epochs = space.epochs.unwrap_or(base.epochs);
        let mut current = TrialRecord {
            trial,
            learning_rate: cfg.learning_rate,
            val_dice: Vec::new(),
            status: TrialStatus::Complete,
            final_score: f64::NAN,
        };
        let last_epoch = cfg.epochs - 1;
        let mut pruned = false;
        {
            let done = &records;
            let mut on_epoch = |r: &EpochRecord| {
                current.val_dice.push(r.val_dice);
                if r.epoch < last_epoch && should_prune(&current, done, r.epoch, &space.pruner) {
                    pruned = true;
                    return false;
                }
                true
            };
            let mut hooks = TrainHooks {
                on_epoch: Some(&mut on_epoch),
                ..TrainHooks::default()
            };
            let state = TrainState::fresh(SegModel::<f32>::build(model)?, &cfg);
            run_training(state, train, val, &mut hooks)?;
        }
        current.status = if pruned { TrialStatus::Pruned } else { TrialStatus::Complete };
        current.final_score = current.val_dice.last().copied().unwrap_or(f64::NAN);
        log::info!(
            "trial {trial}: lr {:.3e} {:?} score {:.4}",
            current.learning_rate,
            current.status,
            current.final_score
        );
        if let Some(dir) = study_dir {
            write_json(&dir.join(format!("trial_{trial:03}.json")), &current)?;
        }
        records.push(current);
        configs.push(cfg);
    }
    let (best, status) = select_best(&records).expect("at least one trial");
    if status == StudyStatus::AllPruned {
        log::warn!("every trial was pruned; returning the best partial trial");
    }
    let summary = StudySummary {
        status,
        best_trial: best,
        best_learning_rate: records[best].learning_rate,
        best_score: records[best].final_score,
        trials: records,
    };
    if let Some(dir) = study_dir {
        write_json(&dir.join("study.json"), &summary)?;
    }
    Ok(TuneOutcome {
        best: configs.swap_remove(best),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(trial: usize, dice: &[f64], status: TrialStatus) -> TrialRecord {
        TrialRecord {
            trial,
            learning_rate: 1e-3,
            val_dice: dice.to_vec(),
            status,
            final_score: *dice.last().unwrap_or(&f64::NAN),
        }
    }

    #[test]
    fn median_rule_examples() {
        let p = PrunerConfig::default();
        let peers: Vec<_> = [0.5, 0.6, 0.7].iter().enumerate().map(|(i, &v)| rec(i, &[v; 6], TrialStatus::Complete)).collect();
        assert!(should_prune(&rec(9, &[0.4; 6], TrialStatus::Complete), &peers, 5, &p));
        assert!(!should_prune(&rec(9, &[0.6; 6], TrialStatus::Complete), &peers, 5, &p));
        assert!(!should_prune(&rec(9, &[0.4; 6], TrialStatus::Complete), &peers, 4, &p));
        assert!(!should_prune(&rec(9, &[0.4; 6], TrialStatus::Complete), &peers[..2], 5, &p));
        let mut with_pruned = peers.clone();
        with_pruned[2].status = TrialStatus::Pruned;
        assert!(!should_prune(&rec(9, &[0.4; 6], TrialStatus::Complete), &with_pruned, 5, &p));
    }

    #[test]
    fn even_peer_count_averages() {
        let p = PrunerConfig { warmup_epochs: 0, min_trials: 1 };
        let peers = vec![rec(0, &[0.2], TrialStatus::Complete), rec(1, &[0.6], TrialStatus::Complete)];
        assert!(should_prune(&rec(2, &[0.39], TrialStatus::Complete), &peers, 0, &p));
        assert!(!should_prune(&rec(2, &[0.4], TrialStatus::Complete), &peers, 0, &p));
    }

    #[test]
    fn best_selection() {
        let r = vec![
            rec(0, &[0.7], TrialStatus::Complete),
            rec(1, &[0.8], TrialStatus::Complete),
            rec(2, &[0.9], TrialStatus::Pruned),
            rec(3, &[0.8], TrialStatus::Complete),
        ];
        assert_eq!(select_best(&r), Some((1, StudyStatus::Ok)));
        let all_pruned = vec![rec(0, &[0.3], TrialStatus::Pruned), rec(1, &[0.5], TrialStatus::Pruned)];
        assert_eq!(select_best(&all_pruned), Some((1, StudyStatus::AllPruned)));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn lr_draws_reproducible() {
        let s = SearchSpace::default();
        let a: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            (0..20).map(|_| sample_lr(&s, &mut rng)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(a.iter().all(|&v| v == sample_lr(&s, &mut rng)));
    }

    proptest! {
        #[test]
        fn lr_within_bounds(seed in any::<u64>()) {
            let s = SearchSpace::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let v = sample_lr(&s, &mut rng);
                prop_assert!((LR_MIN..=LR_MAX).contains(&v));
            }
        }

        #[test]
        fn no_pruning_during_warmup(vals in proptest::collection::vec(0.0f64..1.0, 8), epoch in 0usize..5) {
            let peers: Vec<_> = (0..5).map(|i| rec(i, &[1.0; 8], TrialStatus::Complete)).collect();
            prop_assert!(!should_prune(&rec(9, &vals, TrialStatus::Complete), &peers, epoch, &PrunerConfig::default()));
        }
    }
}
