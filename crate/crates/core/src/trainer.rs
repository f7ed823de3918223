//! Two-phase training.
//!
//! Phase 1 trains the Level-1 network on the reliable subset, freezes it,
//! pre-trains each pathway on its filtered subset, then builds routing
//! targets from which pathway actually predicted each reliable sample best
//! and fits the routing network to them. Phase 2 alternates `k` joint
//! classifier epochs (routes from the current routing decision) with one
//! routing epoch on the targets collected meanwhile.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{filter_subsets, BookRecord, StoreSet};
use crate::error::{Error, Result};
use crate::gating::{build_sgm_target, Pathway, SgmTarget};
use crate::losses::LossParams;
use crate::metrics::{evaluate_hierarchical, Conventions, HierarchicalSample, MetricsReport};
use crate::model::{classifier_group, level1_group, pathway_group, router_group, GateAudit, GenreModel, Inputs, NetId, Objective, RawPrediction, Variant};
use crate::nn::AdamHyper;
use crate::parallel::Parallelism;
use crate::seed::{self, Rng};
use crate::taxonomy::{Branch, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEpochs {
    pub phi_b: usize,
    pub phi_v: usize,
    pub phi_t: usize,
    pub phi_m: usize,
    pub phi_s: usize,
    pub phase2_total: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs { phi_b: 20, phi_v: 20, phi_t: 20, phi_m: 20, phi_s: 10, phase2_total: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: StageEpochs,
    /// Classifier epochs per routing epoch in phase 2.
    pub k: usize,
    pub batch: usize,
    pub adam: AdamHyper,
    pub loss: LossParams,
    pub seed: u64,
    pub variant: Variant,
    /// Evaluation fan-out; training itself is single-threaded.
    pub parallelism: Parallelism,
    /// Score the validation split after every epoch.
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: StageEpochs::default(),
            k: 5,
            batch: 32,
            adam: AdamHyper::default(),
            loss: LossParams::default(),
            seed: 0,
            variant: Variant::Full,
            parallelism: Parallelism::default(),
            validate_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("train.k must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("train.adam: invalid hyperparameters {a:?}")));
        }
        self.loss.validate()
    }
}

/// Resolved inputs and labels for a list of records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub inputs: Inputs,
    pub truth: Vec<LabelVector>,
}

impl Dataset {
    pub fn new(records: &[BookRecord], stores: &StoreSet, model: &GenreModel) -> Result<Self> {
        let refs: Vec<&BookRecord> = records.iter().collect();
        Ok(Dataset {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            inputs: Inputs::from_records(&refs, stores, model.config())?,
            truth: records.iter().map(|r| r.labels(model.taxonomy())).collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn batch(&self, rows: &[usize]) -> (Inputs, Vec<LabelVector>) {
        (self.inputs.select(rows), rows.iter().map(|&i| self.truth[i].clone()).collect())
    }
}

/// Validation snapshot after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub level1_accuracy: f64,
    pub fiction_macro_f1: f64,
    pub nonfiction_macro_f1: f64,
    pub fiction_sample_f1: f64,
    pub nonfiction_sample_f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgmDatasetStats {
    pub candidates: usize,
    pub excluded: usize,
}

impl SgmDatasetStats {
    pub fn size(&self) -> usize {
        self.candidates - self.excluded
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    /// Mean batch loss per epoch, keyed by stage. `None` marks an epoch with
    /// nothing to train on.
    pub curves: BTreeMap<String, Vec<Option<f64>>>,
    pub validation: Vec<EpochMetrics>,
    pub phase1_sgm: SgmDatasetStats,
    /// One entry per phase-2 routing epoch.
    pub phase2_sgm: Vec<SgmDatasetStats>,
    pub skipped_stages: Vec<String>,
    pub gate_audit: GateAudit,
    /// Routing decisions that were not one-hot at an argmax.
    pub non_argmax_routes: u64,
    pub checkpoint: Option<String>,
}

pub const STAGE_PHI_B: &str = "phase1.phi_b";
pub const STAGE_PHI_S: &str = "phase1.phi_s";
pub const STAGE_CLASSIFIER: &str = "phase2.classifier";
pub const STAGE_ROUTER: &str = "phase2.router";

pub fn pathway_stage(p: Pathway) -> String {
    let name = match p {
        Pathway::Multimodal => "phi_m",
        Pathway::Visual => "phi_v",
        Pathway::Textual => "phi_t",
    };
    format!("phase1.{name}")
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    shuffle: Rng,
    pub report: TrainReport,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, model: &GenreModel, train: &'a Dataset, val: Option<&'a Dataset>) -> Result<Self> {
        config.validate()?;
        if model.variant() != config.variant {
            return Err(Error::Config(format!("model built as {} but training config says {}", model.variant(), config.variant)));
        }
        if train.is_empty() {
            return Err(Error::Training("training split is empty".into()));
        }
        Ok(Trainer {
            config,
            train,
            val,
            shuffle: seed::substream(config.seed, "shuffle"),
            report: TrainReport { variant: config.variant, ..Default::default() },
        })
    }

    fn batches(&mut self, rows: &[usize]) -> Vec<Vec<usize>> {
        use rand::seq::SliceRandom;
        let mut order = rows.to_vec();
        order.shuffle(&mut self.shuffle);
        order.chunks(self.config.batch).map(<[usize]>::to_vec).collect()
    }

    fn push_curve(&mut self, stage: &str, loss: Option<f64>) {
        self.report.curves.entry(stage.to_string()).or_default().push(loss);
    }

    fn snapshot(&mut self, model: &GenreModel, stage: &str, epoch: usize) -> Result<()> {
        if !self.config.validate_each_epoch {
            return Ok(());
        }
        let Some(val) = self.val.filter(|v| !v.is_empty()) else { return Ok(()) };
        let (m, _) = evaluate(model, val, self.config.parallelism)?;
        self.report.validation.push(EpochMetrics {
            stage: stage.to_string(),
            epoch,
            level1_accuracy: m.level1.accuracy,
            fiction_macro_f1: m.fiction.f1.macro_,
            nonfiction_macro_f1: m.nonfiction.f1.macro_,
            fiction_sample_f1: m.fiction.f1.samples,
            nonfiction_sample_f1: m.nonfiction.f1.samples,
        });
        Ok(())
    }

    /// One epoch of `objective` over `rows`, updating `group`. Returns the
    /// mean batch loss.
    fn epoch(&mut self, model: &mut GenreModel, rows: &[usize], objective: Objective, group: &[NetId]) -> Result<Option<f64>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        let batches = self.batches(rows);
        for b in &batches {
            let (x, truth) = self.train.batch(b);
            let step = model.compute_gradients(&x, &truth, objective, None, None, &self.config.loss)?;
            model.apply(&step.grads, group, &self.config.adam)?;
            self.report.gate_audit.merge(&step.audit);
            total += step.loss;
        }
        Ok(Some(total / batches.len() as f64))
    }

    fn router_epoch(&mut self, model: &mut GenreModel, targets: &BTreeMap<usize, Pathway>) -> Result<Option<f64>> {
        if targets.is_empty() {
            return Ok(None);
        }
        let rows: Vec<usize> = targets.keys().copied().collect();
        let mut total = 0.0;
        let batches = self.batches(&rows);
        for b in &batches {
            let (x, truth) = self.train.batch(b);
            let t: Vec<Pathway> = b.iter().map(|i| targets[i]).collect();
            let step = model.compute_gradients(&x, &truth, Objective::Router, None, Some(&t), &self.config.loss)?;
            model.apply(&step.grads, &router_group(), &self.config.adam)?;
            total += step.loss;
        }
        Ok(Some(total / batches.len() as f64))
    }

    /// Experience targets for `rows` under the model's current state.
    fn experience(&self, model: &GenreModel, rows: &[usize]) -> Result<Vec<SgmTarget>> {
        let tau = model.config().threshold;
        let chunks = self.config.parallelism.map_chunks(rows, EVAL_CHUNK, |c| -> Result<Vec<SgmTarget>> {
            let (x, truth) = self.train.batch(c);
            let all = model.all_pathways(&x)?;
            Ok(all
                .iter()
                .zip(c.iter().zip(&truth))
                .map(|((branch, probs), (&i, t))| {
                    let preds = probs.clone().map(|p| (*branch, p.iter().map(|&v| v >= tau).collect()));
                    build_sgm_target(&self.train.ids[i], &preds, t)
                })
                .collect())
        });
        Ok(chunks.into_iter().collect::<Result<Vec<_>>>()?.concat())
    }

    pub fn phase1(&mut self, model: &mut GenreModel, train_records: &[BookRecord], stores: &StoreSet) -> Result<()> {
        let subsets = filter_subsets(train_records, stores);
        let cfg = self.config;
        for e in 0..cfg.epochs.phi_b {
            let l = self.epoch(model, &subsets.reliable, Objective::Level1, &level1_group())?;
            self.push_curve(STAGE_PHI_B, l);
            self.snapshot(model, STAGE_PHI_B, e)?;
        }
        let forced = cfg.variant.forced_pathway();
        for (p, rows, epochs) in [
            (Pathway::Visual, &subsets.visual, cfg.epochs.phi_v),
            (Pathway::Textual, &subsets.textual, cfg.epochs.phi_t),
            (Pathway::Multimodal, &subsets.multimodal, cfg.epochs.phi_m),
        ] {
            let stage = pathway_stage(p);
            if forced.is_some_and(|f| f != p) {
                continue;
            }
            if rows.is_empty() {
                log::warn!("{stage}: training subset is empty, stage skipped");
                self.report.skipped_stages.push(stage);
                continue;
            }
            for e in 0..epochs {
                let l = self.epoch(model, rows, Objective::Pathway(p), &pathway_group(p))?;
                self.push_curve(&stage, l);
                self.snapshot(model, &stage, e)?;
            }
        }
        if forced.is_some() {
            return Ok(());
        }
        let targets = self.experience(model, &subsets.reliable)?;
        self.report.phase1_sgm = SgmDatasetStats { candidates: targets.len(), excluded: targets.iter().filter(|t| t.excluded()).count() };
        let targets: BTreeMap<usize, Pathway> =
            subsets.reliable.iter().zip(&targets).filter_map(|(&i, t)| t.target.map(|p| (i, p))).collect();
        for e in 0..cfg.epochs.phi_s {
            let l = self.router_epoch(model, &targets)?;
            self.push_curve(STAGE_PHI_S, l);
            self.snapshot(model, STAGE_PHI_S, e)?;
        }
        Ok(())
    }

    pub fn phase2(&mut self, model: &mut GenreModel) -> Result<()> {
        let cfg = self.config;
        let all: Vec<usize> = (0..self.train.len()).collect();
        let routed = cfg.variant.forced_pathway().is_none();
        let mut buffer: BTreeMap<usize, Option<Pathway>> = BTreeMap::new();
        let mut consumed = 0;
        let mut since_router = 0;
        while consumed < cfg.epochs.phase2_total {
            if routed && since_router == cfg.k {
                let stats = SgmDatasetStats { candidates: buffer.len(), excluded: buffer.values().filter(|t| t.is_none()).count() };
                let targets: BTreeMap<usize, Pathway> = std::mem::take(&mut buffer).into_iter().filter_map(|(i, t)| t.map(|p| (i, p))).collect();
                let l = self.router_epoch(model, &targets)?;
                if l.is_none() {
                    log::warn!("{STAGE_ROUTER}: no usable routing targets this cycle");
                }
                self.report.phase2_sgm.push(stats);
                self.push_curve(STAGE_ROUTER, l);
                self.snapshot(model, STAGE_ROUTER, consumed)?;
                since_router = 0;
            } else {
                let mut total = 0.0;
                let batches = self.batches(&all);
                for b in &batches {
                    let (x, truth) = self.train.batch(b);
                    let decisions = model.route(&x)?;
                    for d in &decisions {
                        let max = d.distribution.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        if d.distribution[d.hard.index()] != max || d.hard.one_hot().iter().sum::<f64>() != 1.0 {
                            self.report.non_argmax_routes += 1;
                        }
                    }
                    if routed {
                        for (&i, t) in b.iter().zip(self.experience(model, b)?) {
                            buffer.insert(i, t.target);
                        }
                    }
                    let routes: Vec<Pathway> = decisions.iter().map(|d| d.hard).collect();
                    let step = model.compute_gradients(&x, &truth, Objective::Joint, Some(&routes), None, &cfg.loss)?;
                    model.apply(&step.grads, &classifier_group(), &cfg.adam)?;
                    self.report.gate_audit.merge(&step.audit);
                    total += step.loss;
                }
                self.push_curve(STAGE_CLASSIFIER, Some(total / batches.len() as f64));
                self.snapshot(model, STAGE_CLASSIFIER, consumed)?;
                since_router += 1;
            }
            consumed += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainReport {
        self.report
    }
}

/// Rows per prediction chunk; fixed so parallel and sequential runs agree.
pub const EVAL_CHUNK: usize = 64;

/// Predict every row of `data`, in order.
pub fn predict_dataset(model: &GenreModel, inputs: &Inputs, par: Parallelism) -> Result<Vec<RawPrediction>> {
    let rows: Vec<usize> = (0..inputs.len()).collect();
    let chunks = par.map_chunks(&rows, EVAL_CHUNK, |c| model.predict_raw(&inputs.select(c)));
    Ok(chunks.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Full metrics for a split, plus the raw predictions behind them.
pub fn evaluate(model: &GenreModel, data: &Dataset, par: Parallelism) -> Result<(MetricsReport, Vec<RawPrediction>)> {
    if data.is_empty() {
        return Err(Error::Evaluation("cannot evaluate an empty split".into()));
    }
    let preds = predict_dataset(model, &data.inputs, par)?;
    let tau = model.config().threshold;
    let samples: Vec<HierarchicalSample> = preds
        .iter()
        .zip(&data.truth)
        .map(|(p, t)| HierarchicalSample { truth_branch: t.branch, truth: t.level2.clone(), pred_branch: p.branch, pred: p.labels(tau) })
        .collect();
    let names = |b: Branch| model.taxonomy().genres(b).iter().map(|g| g.name.clone()).collect::<Vec<_>>();
    let report = evaluate_hierarchical(&samples, &names(Branch::Fiction), &names(Branch::Nonfiction), &Conventions::default())?;
    Ok((report, preds))
}

/// Run both phases.
pub fn train(
    model: &mut GenreModel,
    config: &TrainConfig,
    train_records: &[BookRecord],
    stores: &StoreSet,
    val: Option<&Dataset>,
) -> Result<TrainReport> {
    let data = Dataset::new(train_records, stores, model)?;
    let mut t = Trainer::new(config, model, &data, val)?;
    t.phase1(model, train_records, stores)?;
    t.phase2(model)?;
    Ok(t.finish())
}
