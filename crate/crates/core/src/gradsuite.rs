//! Finite-difference verification of every trainable objective, composed
//! through the real model: Level-1 BCE, each Level-2 head's gated ASL, the
//! routing cross-entropy, the joint hierarchical loss, and the graph
//! embedding's margin ranking loss.

use std::sync::Mutex;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::Pathway;
use crate::kg::{Relation, TransD, Triplet};
use crate::losses::LossParams;
use crate::model::{classifier_group, level1_group, pathway_group, router_group, GenreModel, Inputs, Modality, ModelConfig, NetId, Objective, Variant};
use crate::nn::{check_parameters, GradCheck, Probe};
use crate::parallel::Parallelism;
use crate::seed::{self, Rng};
use crate::taxonomy::{Branch, GenreTaxonomy, LabelVector};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Random instances per row.
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { instances: 50, seed: 0, tolerance: DEFAULT_TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub target: String,
    pub loss: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradRow {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.checked > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Case {
    Level1,
    Head(Pathway, Branch),
    Router,
    Joint,
    Margin,
}

impl Case {
    fn all() -> Vec<Case> {
        let mut v = vec![Case::Level1];
        for p in Pathway::ALL {
            for b in Branch::ALL {
                v.push(Case::Head(p, b));
            }
        }
        v.extend([Case::Router, Case::Joint, Case::Margin]);
        v
    }

    fn labels(self) -> (String, &'static str) {
        match self {
            Case::Level1 => (NetId::Level1.name(), "bce"),
            Case::Head(p, b) => (NetId::Head(p, b).name(), "asl"),
            Case::Router => (NetId::Router.name(), "ce"),
            Case::Joint => ("classifiers".into(), "hierarchical"),
            Case::Margin => ("graph".into(), "margin_ranking"),
        }
    }
}

struct Instance {
    model: GenreModel,
    x: Inputs,
    truth: Vec<LabelVector>,
    routes: Vec<Pathway>,
    loss: LossParams,
}

fn random_instance(rng: &mut Rng, case: Case, seed_value: u64) -> Result<Instance> {
    let config = ModelConfig {
        width: if rng.random_bool(0.5) { 8 } else { 16 },
        visual_dim: rng.random_range(2..7),
        blurb_dim: rng.random_range(2..7),
        cover_text_dim: rng.random_range(2..7),
        metadata_dim: rng.random_range(2..7),
        ..Default::default()
    };
    let taxonomy = GenreTaxonomy::synthetic(rng.random_range(2..6), rng.random_range(2..6))?;
    let model = GenreModel::new(config.clone(), taxonomy.clone(), Variant::Full, seed_value)?;
    let n = rng.random_range(1..7);
    let x = Inputs { modalities: Modality::ALL.map(|m| ndarray::Array2::from_shape_simple_fn((n, config.input_dim(m)), || rng.random_range(-1.0..1.0))) };
    let truth = (0..n)
        .map(|_| {
            let branch = match case {
                Case::Head(_, b) => b,
                _ => Branch::ALL[rng.random_range(0..2)],
            };
            LabelVector { branch, level2: (0..taxonomy.len(branch)).map(|_| rng.random_bool(0.4)).collect() }
        })
        .collect();
    let routes = (0..n)
        .map(|_| match case {
            Case::Head(p, _) => p,
            _ => Pathway::ALL[rng.random_range(0..3)],
        })
        .collect();
    let loss = LossParams {
        gamma_pos: rng.random_range(0.0..2.0),
        gamma_neg: rng.random_range(0.0..5.0),
        epsilon: rng.random_range(0.0..0.1),
        ..Default::default()
    };
    Ok(Instance { model, x, truth, routes, loss })
}

fn check_model(inst: &Instance, case: Case) -> Result<GradCheck> {
    let (objective, group) = match case {
        Case::Level1 => (Objective::Level1, level1_group()),
        Case::Head(p, _) => (Objective::Pathway(p), pathway_group(p)),
        Case::Router => (Objective::Router, router_group()),
        Case::Joint => (Objective::Joint, classifier_group()),
        Case::Margin => unreachable!("graph case has its own check"),
    };
    let step = inst.model.compute_gradients(&inst.x, &inst.truth, objective, Some(&inst.routes), Some(&inst.routes), &inst.loss)?;
    let probe = |m: &GenreModel| m.probe_objective(&inst.x, &inst.truth, objective, &inst.routes, &inst.loss);
    let base_loss = probe(&inst.model)?.loss;
    if (base_loss - step.loss).abs() > 1e-12 * step.loss.abs().max(1.0) {
        return Err(Error::Contract(format!("forward-only loss {base_loss} disagrees with the training pass {}", step.loss)));
    }
    let analytic = GenreModel::group_grads(&step.grads, &inst.model, &group);
    let base = inst.model.group_params(&group);
    // probes run one at a time against a single working copy
    let work = Mutex::new(inst.model.clone());
    Ok(check_parameters(Parallelism::Sequential, &analytic, |i, delta| {
        let mut m = work.lock().expect("probe panicked");
        m.set_group_param(&group, i, base[i] + delta);
        let r = probe(&m).expect("shapes checked by the unperturbed run");
        m.set_group_param(&group, i, base[i]);
        Probe { loss: r.loss, pattern: r.pattern, margin: r.margin }
    }))
}

struct MarginInstance {
    emb: TransD,
    pos: Triplet,
    neg: Triplet,
}

fn random_margin_instance(rng: &mut Rng) -> MarginInstance {
    let (n, de, dr) = (rng.random_range(2..6), rng.random_range(1..7), rng.random_range(1..7));
    let mut t = |r, c| ndarray::Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
    let emb = TransD { entity: t(n, de), entity_proj: t(n, de), relation: t(6, dr), relation_proj: t(6, dr) };
    let mut triplet = || {
        let head = rng.random_range(0..n);
        Triplet { head, tail: (head + rng.random_range(1..n)) % n, relation: Relation::ALL[rng.random_range(0..6)] }
    };
    let (pos, neg) = (triplet(), triplet());
    MarginInstance { emb, pos, neg }
}

fn check_margin(inst: &MarginInstance) -> Result<GradCheck> {
    let MarginInstance { emb, pos, neg } = inst;
    let margin = 4.0;
    let (_, g) = emb.pair_gradient(pos, neg, margin)?;
    let base = emb.flat();
    let work = Mutex::new(emb.clone());
    Ok(check_parameters(Parallelism::Sequential, &g.flat(), |i, delta| {
        let mut probe = work.lock().expect("probe panicked");
        probe.set_flat(i, base[i] + delta);
        let raw = margin + probe.distance(pos).expect("finite") - probe.distance(neg).expect("finite");
        probe.set_flat(i, base[i]);
        Probe { loss: raw.max(0.0), pattern: vec![raw > 0.0], margin: raw.abs() }
    }))
}

enum Job {
    Model(Instance),
    Margin(MarginInstance),
}

/// One row per objective/target pair. Instances are drawn sequentially and
/// checked in parallel.
pub fn run_suite(config: &SuiteConfig, par: Parallelism) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for (k, case) in Case::all().into_iter().enumerate() {
        let mut rng = seed::substream(config.seed, &format!("gradcheck.{k}"));
        let jobs = (0..config.instances)
            .map(|i| {
                Ok(if case == Case::Margin {
                    Job::Margin(random_margin_instance(&mut rng))
                } else {
                    Job::Model(random_instance(&mut rng, case, config.seed.wrapping_add(i as u64))?)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let checks = par.map(&jobs, |job| match job {
            Job::Model(inst) => check_model(inst, case),
            Job::Margin(inst) => check_margin(inst),
        });
        let mut total = GradCheck { max_rel_error: 0.0, worst: None, checked: 0, skipped: 0 };
        for c in checks {
            total = total.merge(c?);
        }
        let (target, loss) = case.labels();
        rows.push(GradRow {
            target,
            loss: loss.into(),
            instances: config.instances,
            checked: total.checked,
            skipped: total.skipped,
            max_rel_error: total.max_rel_error,
        });
    }
    Ok(rows)
}
