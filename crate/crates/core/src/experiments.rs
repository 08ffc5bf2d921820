//! Config-driven experiment grid: dataset × backbone × strategy.
//!
//! Each cell tunes the learning rate, trains, picks the binarization
//! threshold on the training split and only then scores the test split.
//! Results land in `{output_dir}/{dataset}__{backbone}__{strategy}/`;
//! per-dataset artifacts (split manifest, figures) in `{output_dir}/{dataset}/`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::data::{load_dataset, split_dataset, synth_shapes, DatasetLayout, SplitSpec, Splits};
use crate::metrics::{best_threshold, default_threshold_grid, evaluate, pr_curve_to_csv, EvalReport};
use crate::persistence::{load_checkpoint_for, read_json, save_checkpoint, write_json, atomic_write, FORMAT_VERSION};
use crate::refinement::RefinementConfig;
use crate::render::{emit_pr_plot, emit_prob_maps, PrPanel, ProbGridRow};
use crate::training::{run_training, LossId, ModelConfig, SegModel, Strategy, TrainConfig, TrainHooks, TrainState};
use crate::tuning::{tune, SearchSpace, StudyStatus, StudySummary};
use crate::types::{Dataset, ImageTensor, MaskTensor, ProbMap, Sample};
use crate::{Error, Result};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "CRIS_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synth,
    Kvasir,
    Cvc,
    Directory,
}

fn default_size() -> [usize; 2] {
    [128, 128]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DatasetSource,
    /// Dataset root for on-disk sources.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Sample count for the synthetic source.
    #[serde(default)]
    pub count: Option<usize>,
    /// Target `[height, width]`.
    #[serde(default = "default_size")]
    pub size: [usize; 2],
}

impl DatasetSpec {
    pub fn load(&self, master_seed: u64) -> Result<Dataset> {
        let (h, w) = (self.size[0], self.size[1]);
        match self.source {
            DatasetSource::Synth => {
                let n = self
                    .count
                    .ok_or_else(|| Error::InvalidConfig(format!("dataset {}: synth needs `count`", self.name)))?;
                let d = synth_shapes(n, (h, w), derive_seed(master_seed, &format!("synth/{}", self.name)))?;
                Ok(Dataset::new(self.name.clone(), d.samples().to_vec())?)
            }
            _ => {
                let root = self
                    .root
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig(format!("dataset {}: `root` is required", self.name)))?;
                load_dataset(&self.name, &DatasetLayout::detect(root)?, (h, w))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneEntry {
    Kind(BackboneKind),
    Config(BackboneConfig),
}

impl BackboneEntry {
    pub fn config(&self) -> BackboneConfig {
        match self {
            BackboneEntry::Kind(k) => BackboneConfig::new(*k),
            BackboneEntry::Config(c) => c.clone(),
        }
    }
}

fn default_batch() -> usize {
    4
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1e-3
}
fn default_eval_batch() -> usize {
    8
}

/// Training fields shared by every cell; the strategy comes from the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Used when tuning is disabled.
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub baseline_loss: Option<LossId>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            epochs: default_epochs(),
            learning_rate: default_lr(),
            baseline_loss: None,
            eval_batch_size: default_eval_batch(),
            checkpoint_every: None,
        }
    }
}

fn default_preview() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    pub datasets: Vec<DatasetSpec>,
    pub backbones: Vec<BackboneEntry>,
    pub strategies: Vec<Strategy>,
    /// Learning-rate search; omitted means train at `train.learning_rate`.
    #[serde(default)]
    pub tuning: Option<SearchSpace>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub refinement: RefinementConfig,
    /// Test images rendered per cell in the probability-map figure.
    #[serde(default = "default_preview")]
    pub preview_samples: usize,
}

/// First eight bytes of `SHA-256(master_le || label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// One fully resolved grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPlan {
    pub dataset: String,
    pub backbone: BackboneKind,
    pub strategy: Strategy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tuning_seed: u64,
}

impl CellPlan {
    pub fn dir_name(&self) -> String {
        cell_dir_name(&self.dataset, self.backbone, self.strategy)
    }
}

pub fn cell_dir_name(dataset: &str, backbone: BackboneKind, strategy: Strategy) -> String {
    format!("{dataset}__{}__{}", backbone.as_str().replace('+', "p"), strategy.as_str())
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("experiment spec", e))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `output_dir`, or the value of [`OUTPUT_DIR_ENV`] when set.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.backbones.is_empty() || self.strategies.is_empty() {
            return Err(Error::InvalidConfig("datasets, backbones and strategies must be nonempty".into()));
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate dataset name".into()));
        }
        if let Some(bad) = names.iter().find(|n| n.is_empty() || n.contains(['/', '\\']) || n.contains("__")) {
            return Err(Error::InvalidConfig(format!("dataset name {bad:?} cannot be used as a directory")));
        }
        let mut kinds: Vec<BackboneKind> = self.backbones.iter().map(|b| b.config().kind).collect();
        kinds.sort_unstable();
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate backbone".into()));
        }
        let mut strategies = self.strategies.clone();
        strategies.sort_unstable();
        if strategies.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate strategy".into()));
        }
        for b in &self.backbones {
            b.config().validate()?;
        }
        self.refinement.validate()?;
        if let Some(t) = &self.tuning {
            t.validate()?;
        }
        for c in self.plan() {
            c.train.validate()?;
        }
        Ok(())
    }

    /// Every cell in dataset, backbone, strategy order.
    pub fn plan(&self) -> Vec<CellPlan> {
        let model_seed = derive_seed(self.master_seed, "model");
        let train_seed = derive_seed(self.master_seed, "train");
        let mut cells = Vec::new();
        for d in &self.datasets {
            for b in &self.backbones {
                let backbone = b.config().with_seed(model_seed);
                for &strategy in &self.strategies {
                    let refinement = RefinementConfig {
                        seed: model_seed,
                        ..self.refinement.clone()
                    };
                    let mut train = TrainConfig::new(strategy);
                    train.batch_size = self.train.batch_size;
                    train.epochs = self.train.epochs;
                    train.learning_rate = self.train.learning_rate;
                    train.eval_batch_size = self.train.eval_batch_size;
                    train.seed = train_seed;
                    if let Some(l) = self.train.baseline_loss {
                        train.baseline_loss = l;
                    }
                    cells.push(CellPlan {
                        dataset: d.name.clone(),
                        backbone: backbone.kind,
                        strategy,
                        model: ModelConfig::for_strategy(strategy, backbone.clone(), refinement),
                        train,
                        tuning_seed: derive_seed(self.master_seed, &format!("tune/{}/{}", backbone.kind, strategy)),
                    });
                }
            }
        }
        cells
    }

    pub fn find_cell(&self, dataset: &str, backbone: BackboneKind, strategy: Strategy) -> Result<CellPlan> {
        self.plan()
            .into_iter()
            .find(|c| c.dataset == dataset && c.backbone == backbone && c.strategy == strategy)
            .ok_or_else(|| Error::InvalidConfig(format!("no cell {}", cell_dir_name(dataset, backbone, strategy))))
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetSpec> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown dataset {name:?}")))
    }

    /// Human-readable resolved grid for `--dry-run`.
    pub fn describe(&self) -> String {
        let mut s = format!("output_dir: {}\nmaster_seed: {}\n", self.effective_output_dir().display(), self.master_seed);
        match &self.tuning {
            Some(t) => s.push_str(&format!(
                "tuning: {} trials, lr in [{:e}, {:e}]\n",
                t.trials, t.lr_min, t.lr_max
            )),
            None => s.push_str(&format!("tuning: off (lr {:e})\n", self.train.learning_rate)),
        }
        for c in self.plan() {
            s.push_str(&format!(
                "{}: {} epochs, batch {}\n",
                c.dir_name(),
                c.train.epochs,
                c.train.batch_size
            ));
        }
        s
    }
}

/// A dataset loaded and split once for all of its cells.
pub struct PreparedDataset {
    pub name: String,
    pub splits: Splits,
    pub manifest_hash: String,
}

/// Loads and splits a dataset, writing or verifying
/// `{output_dir}/{name}/split_manifest.tsv`.
pub fn prepare_dataset(spec: &ExperimentSpec, name: &str, output_dir: &Path) -> Result<PreparedDataset> {
    let ds = spec.dataset(name)?;
    let data = ds.load(spec.master_seed)?;
    let split_seed = derive_seed(spec.master_seed, &format!("split/{name}"));
    let splits = split_dataset(&data, &SplitSpec::new(split_seed))?;
    splits
        .manifest
        .write_or_verify(&output_dir.join(name).join("split_manifest.tsv"))?;
    Ok(PreparedDataset {
        name: name.to_string(),
        manifest_hash: splits.manifest.digest(),
        splits,
    })
}

/// Persisted result of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub format_version: u32,
    pub dataset: String,
    pub backbone: BackboneKind,
    pub strategy: Strategy,
    pub manifest_hash: String,
    pub learning_rate: f64,
    pub tuning: Option<StudyStatus>,
    pub epochs_trained: usize,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PreviewSample {
    id: String,
    height: usize,
    width: usize,
    image: Vec<f32>,
    mask: Vec<f32>,
    prob: Vec<f32>,
}

/// Tunes a cell and returns the winning config with the full epoch budget.
pub fn tune_cell(spec: &ExperimentSpec, plan: &CellPlan, data: &PreparedDataset, cell_dir: &Path) -> Result<(TrainConfig, Option<StudySummary>)> {
    let Some(space) = &spec.tuning else {
        return Ok((plan.train.clone(), None));
    };
    let out = tune(
        space,
        &plan.model,
        &plan.train,
        &data.splits.train,
        &data.splits.val,
        plan.tuning_seed,
        Some(&cell_dir.join("tuning")),
    )?;
    let cfg = TrainConfig {
        epochs: plan.train.epochs,
        ..out.best
    };
    Ok((cfg, Some(out.summary)))
}

/// Learning rate recorded by an earlier `tune_cell`, if any.
pub fn tuned_config(plan: &CellPlan, cell_dir: &Path) -> Result<(TrainConfig, Option<StudyStatus>)> {
    let study = cell_dir.join("tuning").join("study.json");
    if !study.exists() {
        return Ok((plan.train.clone(), None));
    }
    let s: StudySummary = read_json(&study)?;
    Ok((
        TrainConfig {
            learning_rate: s.best_learning_rate,
            ..plan.train.clone()
        },
        Some(s.status),
    ))
}

/// Trains a cell and writes `model.ckpt` and `history.csv`.
pub fn train_cell(
    spec: &ExperimentSpec,
    plan: &CellPlan,
    cfg: &TrainConfig,
    data: &PreparedDataset,
    cell_dir: &Path,
) -> Result<TrainState<f32>> {
    fs::create_dir_all(cell_dir).map_err(|e| Error::io(cell_dir, e))?;
    let model = SegModel::<f32>::build(&plan.model)?;
    let mut hooks = TrainHooks {
        checkpoint_dir: spec.train.checkpoint_every.map(|_| cell_dir.join("checkpoints")),
        checkpoint_every: spec.train.checkpoint_every,
        manifest_hash: Some(data.manifest_hash.clone()),
        ..TrainHooks::default()
    };
    let state = run_training(TrainState::fresh(model, cfg), &data.splits.train, &data.splits.val, &mut hooks)?;
    save_checkpoint(&state, Some(&data.manifest_hash), &cell_dir.join("model.ckpt"))?;
    atomic_write(&cell_dir.join("history.csv"), state.history.to_csv().as_bytes())?;
    Ok(state)
}

/// Threshold from the training split, then scores on the test split. Writes
/// `report.json`, `report.csv`, `pr_curve.csv`, `manifest_hash.txt` and
/// `preview.json`.
pub fn evaluate_cell(
    spec: &ExperimentSpec,
    plan: &CellPlan,
    state: &TrainState<f32>,
    tuning: Option<StudyStatus>,
    data: &PreparedDataset,
    cell_dir: &Path,
) -> Result<CellReport> {
    let grid = default_threshold_grid();
    let bs = state.config.eval_batch_size;
    let train_refs: Vec<&Sample> = data.splits.train.samples().iter().collect();
    let train_probs = state.model.predict(&train_refs, bs)?;
    let train_gts: Vec<MaskTensor> = data.splits.train.samples().iter().map(|s| s.mask.clone()).collect();
    let threshold = best_threshold(&train_probs, &train_gts, &grid)?;

    let test = data.splits.test();
    let test_refs: Vec<&Sample> = test.samples().iter().collect();
    let probs = state.model.predict(&test_refs, bs)?;
    let gts: Vec<MaskTensor> = test.samples().iter().map(|s| s.mask.clone()).collect();
    let eval = evaluate(&probs, &gts, threshold, &grid)?;

    let report = CellReport {
        format_version: FORMAT_VERSION,
        dataset: plan.dataset.clone(),
        backbone: plan.backbone,
        strategy: plan.strategy,
        manifest_hash: data.manifest_hash.clone(),
        learning_rate: state.config.learning_rate,
        tuning,
        epochs_trained: state.history.records.len(),
        eval,
    };
    write_json(&cell_dir.join("report.json"), &report)?;
    let csv = report.eval.to_csv(plan.backbone.as_str(), &plan.dataset, plan.strategy.as_str());
    atomic_write(&cell_dir.join("report.csv"), csv.as_bytes())?;
    atomic_write(&cell_dir.join("pr_curve.csv"), pr_curve_to_csv(&report.eval.pr_curve).as_bytes())?;
    atomic_write(&cell_dir.join("manifest_hash.txt"), format!("{}\n", data.manifest_hash).as_bytes())?;
    let preview: Vec<PreviewSample> = test
        .samples()
        .iter()
        .zip(&probs)
        .take(spec.preview_samples)
        .map(|(s, p)| PreviewSample {
            id: s.id.clone(),
            height: p.height(),
            width: p.width(),
            image: s.image.data().to_vec(),
            mask: s.mask.data().to_vec(),
            prob: p.data().to_vec(),
        })
        .collect();
    write_json(&cell_dir.join("preview.json"), &preview)?;
    Ok(report)
}

/// Reloads a trained cell and re-runs [`evaluate_cell`].
pub fn evaluate_saved_cell(spec: &ExperimentSpec, plan: &CellPlan, data: &PreparedDataset, cell_dir: &Path) -> Result<CellReport> {
    let (state, tag) = load_checkpoint_for::<f32>(&cell_dir.join("model.ckpt"), &plan.model)?;
    if tag.as_deref() != Some(data.manifest_hash.as_str()) {
        return Err(Error::ManifestMismatch(cell_dir.join("model.ckpt")));
    }
    let (_, tuning) = tuned_config(plan, cell_dir)?;
    evaluate_cell(spec, plan, &state, tuning, data, cell_dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: String,
    pub status: CellStatus,
    pub error: Option<String>,
    /// `(phase, test-split accesses so far)` in execution order.
    pub trace: Vec<(String, usize)>,
    #[serde(skip)]
    pub report: Option<CellReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub cells: Vec<CellOutcome>,
}

impl GridOutcome {
    pub fn reports(&self) -> Vec<&CellReport> {
        self.cells.iter().filter_map(|c| c.report.as_ref()).collect()
    }

    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }
}

fn run_cell(spec: &ExperimentSpec, plan: &CellPlan, data: &PreparedDataset, cell_dir: &Path, trace: &mut Vec<(String, usize)>) -> Result<CellReport> {
    let accesses = || data.splits.test_accesses();
    trace.push(("start".into(), accesses()));
    let (cfg, study) = tune_cell(spec, plan, data, cell_dir)?;
    trace.push(("tuned".into(), accesses()));
    let state = train_cell(spec, plan, &cfg, data, cell_dir)?;
    trace.push(("trained".into(), accesses()));
    let report = evaluate_cell(spec, plan, &state, study.map(|s| s.status), data, cell_dir)?;
    trace.push(("evaluated".into(), accesses()));
    Ok(report)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs every cell sequentially. A failing cell is recorded in the outcome
/// and in `grid.json`; the remaining cells still run.
pub fn run_grid(spec: &ExperimentSpec) -> Result<GridOutcome> {
    spec.validate()?;
    let out_dir = spec.effective_output_dir();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_json(&out_dir.join("experiment.json"), spec)?;
    let plan = spec.plan();
    let mut outcome = GridOutcome::default();
    for ds in &spec.datasets {
        let cells: Vec<&CellPlan> = plan.iter().filter(|c| c.dataset == ds.name).collect();
        let prepared = match prepare_dataset(spec, &ds.name, &out_dir) {
            Ok(p) => p,
            Err(e) => {
                log::error!("dataset {}: {e}", ds.name);
                for c in cells {
                    outcome.cells.push(CellOutcome {
                        cell: c.dir_name(),
                        status: CellStatus::Failed,
                        error: Some(format!("dataset: {e}")),
                        trace: Vec::new(),
                        report: None,
                    });
                }
                continue;
            }
        };
        for c in cells {
            let cell_dir = out_dir.join(c.dir_name());
            let mut trace = Vec::new();
            log::info!("cell {}", c.dir_name());
            let result = catch_unwind(AssertUnwindSafe(|| run_cell(spec, c, &prepared, &cell_dir, &mut trace)))
                .unwrap_or_else(|p| Err(Error::InvalidConfig(format!("cell panicked: {}", panic_message(p)))));
            let (status, error, report) = match result {
                Ok(r) => (CellStatus::Ok, None, Some(r)),
                Err(e) => {
                    log::error!("cell {} failed: {e}", c.dir_name());
                    (CellStatus::Failed, Some(e.to_string()), None)
                }
            };
            outcome.cells.push(CellOutcome {
                cell: c.dir_name(),
                status,
                error,
                trace,
                report,
            });
        }
    }
    write_json(&out_dir.join("grid.json"), &outcome)?;
    atomic_write(&out_dir.join("results.md"), emit_table(&outcome.reports().into_iter().cloned().collect::<Vec<_>>()).as_bytes())?;
    emit_plots(&out_dir)?;
    Ok(outcome)
}

/// Every `*/report.json` under `dir`, in directory-name order.
pub fn load_reports(dir: &Path) -> Result<Vec<CellReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

const TABLE_ROWS: [Option<Strategy>; 4] = [
    Some(Strategy::BackboneOnly),
    None,
    Some(Strategy::BackboneFcnJoint),
    Some(Strategy::Cris),
];

fn flag(s: String, best: bool) -> String {
    if best {
        format!("**{s}**")
    } else {
        s
    }
}

/// Markdown tables, one per dataset: strategies as rows, two columns (DICE
/// ×100 with 2 decimals, MSE with 3 decimals) per backbone. The best DICE
/// and the best MSE of each column are bold. A CRF row is kept for layout
/// and marked N/A.
pub fn emit_table(reports: &[CellReport]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let mut out = String::new();
    for ds in datasets {
        let rs: Vec<&CellReport> = reports.iter().filter(|r| r.dataset == ds).collect();
        let backbones: Vec<BackboneKind> = BackboneKind::ALL
            .into_iter()
            .filter(|k| rs.iter().any(|r| r.backbone == *k))
            .collect();
        let strategies: Vec<Strategy> = Strategy::ALL.into_iter().filter(|s| rs.iter().any(|r| r.strategy == *s)).collect();
        let cell = |b: BackboneKind, s: Strategy| rs.iter().find(|r| r.backbone == b && r.strategy == s);
        out.push_str(&format!("### {ds}\n\n| Strategy |"));
        for b in &backbones {
            out.push_str(&format!(" {} DICE | {} MSE |", b.display_name(), b.display_name()));
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|---:|".repeat(backbones.len()));
        out.push('\n');
        let mut best: BTreeMap<BackboneKind, (f64, f64)> = BTreeMap::new();
        for &b in &backbones {
            let vals: Vec<&CellReport> = strategies.iter().filter_map(|&s| cell(b, s).copied()).collect();
            let d = vals.iter().map(|r| r.eval.dice).fold(f64::NEG_INFINITY, f64::max);
            let m = vals.iter().map(|r| r.eval.mse).fold(f64::INFINITY, f64::min);
            best.insert(b, (d, m));
        }
        for row in TABLE_ROWS {
            match row {
                None => {
                    out.push_str("| Backbone+CRF[^crf] |");
                    out.push_str(&" N/A | N/A |".repeat(backbones.len()));
                }
                Some(s) if strategies.contains(&s) => {
                    out.push_str(&format!("| {} |", s.display_name()));
                    for &b in &backbones {
                        match cell(b, s) {
                            Some(r) => {
                                let (bd, bm) = best[&b];
                                out.push_str(&format!(
                                    " {} | {} |",
                                    flag(format!("{:.2}", r.eval.dice * 100.0), r.eval.dice == bd),
                                    flag(format!("{:.3}", r.eval.mse), r.eval.mse == bm)
                                ));
                            }
                            None => out.push_str(" – | – |"),
                        }
                    }
                }
                Some(_) => continue,
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out.push_str("[^crf]: CRF post-processing is not implemented; the row is kept so the table layout matches the full comparison.\n");
    out
}

/// Rebuilds `results.md` from the reports stored under `dir`.
pub fn emit_table_from_dir(dir: &Path) -> Result<String> {
    let reports = load_reports(dir)?;
    if reports.is_empty() {
        return Err(Error::EmptyInput("cell reports"));
    }
    let table = emit_table(&reports);
    atomic_write(&dir.join("results.md"), table.as_bytes())?;
    Ok(table)
}

/// Writes `{dataset}/pr_curves.png` and `{dataset}/prob_maps.png` for every
/// dataset with stored reports under `dir`. Returns the written paths.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let reports = load_reports(dir)?;
    let mut datasets: Vec<&str> = reports.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    let mut written = Vec::new();
    for ds in datasets {
        let rs: Vec<&CellReport> = reports.iter().filter(|r| r.dataset == ds).collect();
        let backbones: Vec<BackboneKind> = BackboneKind::ALL.into_iter().filter(|k| rs.iter().any(|r| r.backbone == *k)).collect();
        let strategies: Vec<Strategy> = Strategy::ALL.into_iter().filter(|s| rs.iter().any(|r| r.strategy == *s)).collect();
        let panels: Vec<PrPanel> = backbones
            .iter()
            .map(|&b| PrPanel {
                title: b.display_name().to_string(),
                curves: strategies
                    .iter()
                    .filter_map(|&s| {
                        rs.iter()
                            .find(|r| r.backbone == b && r.strategy == s)
                            .map(|r| (s.display_name().to_string(), r.eval.pr_curve.clone()))
                    })
                    .collect(),
            })
            .collect();
        let pr_path = dir.join(ds).join("pr_curves.png");
        emit_pr_plot(&panels, &pr_path)?;
        written.push(pr_path);

        let columns: Vec<String> = strategies.iter().map(|s| s.display_name().to_string()).collect();
        let mut rows = Vec::new();
        for &b in &backbones {
            let previews: Vec<Option<Vec<PreviewSample>>> = strategies
                .iter()
                .map(|&s| {
                    let p = dir.join(cell_dir_name(ds, b, s)).join("preview.json");
                    p.is_file().then(|| read_json(&p)).transpose()
                })
                .collect::<Result<_>>()?;
            let Some(reference) = previews.iter().flatten().next() else { continue };
            for (i, sample) in reference.iter().enumerate() {
                let maps = previews
                    .iter()
                    .map(|p| {
                        p.as_ref()
                            .and_then(|v| v.get(i))
                            .map(|x| ProbMap::new(x.height, x.width, x.prob.clone()))
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(ProbGridRow {
                    label: b.display_name().to_string(),
                    image: ImageTensor::new(sample.height, sample.width, sample.image.clone())?,
                    mask: MaskTensor::new(sample.height, sample.width, sample.mask.clone())?,
                    maps,
                });
            }
        }
        if !rows.is_empty() {
            let path = dir.join(ds).join("prob_maps.png");
            emit_prob_maps(&columns, &rows, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PRPoint;

    fn report(dataset: &str, backbone: BackboneKind, strategy: Strategy, dice: f64, mse: f64) -> CellReport {
        CellReport {
            format_version: FORMAT_VERSION,
            dataset: dataset.into(),
            backbone,
            strategy,
            manifest_hash: "h".into(),
            learning_rate: 1e-3,
            tuning: None,
            epochs_trained: 1,
            eval: EvalReport {
                dice,
                mse,
                best_threshold: 0.5,
                pr_curve: vec![PRPoint { threshold: 0.5, precision: 0.5, recall: 0.5 }],
                per_image_dice: vec![dice],
            },
        }
    }

    #[test]
    fn table_formatting() {
        let t = emit_table(&[report("kvasir", BackboneKind::Unet, Strategy::Cris, 0.8599, 0.0347)]);
        assert!(t.contains("| Proposed | **85.99** | **0.035** |"), "{t}");
        assert!(t.contains("| Backbone+CRF[^crf] | N/A | N/A |"));
        assert_eq!(t.matches("**").count(), 4);
    }

    #[test]
    fn table_flags_best_per_column() {
        let t = emit_table(&[
            report("d", BackboneKind::Unet, Strategy::BackboneOnly, 0.7669, 0.05),
            report("d", BackboneKind::Unet, Strategy::Cris, 0.8599, 0.06),
            report("d", BackboneKind::Segnet, Strategy::BackboneOnly, 0.8639, 0.02),
        ]);
        assert!(t.contains("| Strategy | UNet DICE | UNet MSE | SegNet DICE | SegNet MSE |"), "{t}");
        assert!(t.contains("| Backbone | 76.69 | **0.050** | **86.39** | **0.020** |"), "{t}");
        assert!(t.contains("| Proposed | **85.99** | 0.060 | – | – |"), "{t}");
    }

    #[test]
    fn spec_parsing_and_validation() {
        let text = r#"
            output_dir = "out"
            master_seed = 7
            strategies = ["backbone_only", "cris"]
            backbones = ["unet", { kind = "segnet", base_channels = 8, depth = 2 }]

            [[datasets]]
            name = "synth"
            source = "synth"
            count = 12
            size = [32, 32]

            [tuning]
            trials = 2
            epochs = 1

            [train]
            epochs = 2
        "#;
        let spec = ExperimentSpec::from_toml(text).unwrap();
        spec.validate().unwrap();
        let plan = spec.plan();
        assert_eq!(plan.len(), 4);
        assert_eq!(plan[0].dir_name(), "synth__unet__backbone_only");
        assert_eq!(plan[3].model.backbone().depth, 2);
        assert!(spec.describe().contains("synth__segnet__cris"));

        let mut dup = spec.clone();
        dup.strategies.push(Strategy::Cris);
        assert!(dup.validate().is_err());
        assert!(ExperimentSpec::from_toml("output_dir = 1").is_err());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(0, "a"), derive_seed(0, "b"));
        assert_ne!(derive_seed(0, "a"), derive_seed(1, "a"));
        assert_eq!(derive_seed(3, "x"), derive_seed(3, "x"));
    }
}
