//! The hierarchical classifier.
//!
//! Ten single-layer projection heads map raw modality vectors to width `D`.
//! The Level-1 network fuses four of them (visual, blurb, cover text,
//! metadata, in that order) and decides the branch; its last hidden
//! activation is the latent vector shared with Level-2. The routing network
//! reads its own visual and blurb projections and picks one of three
//! pathways, each holding a fiction and a nonfiction multi-label head.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::dataio::{BookRecord, StoreSet, METADATA};
use crate::error::{Error, Result};
use crate::gating::{class_gate, Pathway, PathwayDecision};
use crate::losses::{asl_loss, bce_loss, ce_loss, level2_loss, overall_loss, LossParams};
use crate::nn::{Activation, AdamHyper, Dense, ForwardCache, Gradients, Network, NetworkSpec, OutputActivation};
use crate::seed;
use crate::taxonomy::{Branch, GenreTaxonomy, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Blurb,
    CoverText,
    Metadata,
}

impl Modality {
    /// Level-1 concatenation order.
    pub const ALL: [Modality; 4] = [Modality::Visual, Modality::Blurb, Modality::CoverText, Modality::Metadata];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Level1Visual,
    Level1Blurb,
    CoverText,
    Metadata,
    RouterVisual,
    RouterBlurb,
    VisualPathway,
    TextPathway,
    MultiVisual,
    MultiBlurb,
}

impl Projection {
    pub const ALL: [Projection; 10] = [
        Projection::Level1Visual,
        Projection::Level1Blurb,
        Projection::CoverText,
        Projection::Metadata,
        Projection::RouterVisual,
        Projection::RouterBlurb,
        Projection::VisualPathway,
        Projection::TextPathway,
        Projection::MultiVisual,
        Projection::MultiBlurb,
    ];

    pub fn modality(self) -> Modality {
        use Projection::*;
        match self {
            Level1Visual | RouterVisual | VisualPathway | MultiVisual => Modality::Visual,
            Level1Blurb | RouterBlurb | TextPathway | MultiBlurb => Modality::Blurb,
            CoverText => Modality::CoverText,
            Metadata => Modality::Metadata,
        }
    }

    pub fn name(self) -> &'static str {
        use Projection::*;
        match self {
            Level1Visual => "level1_visual",
            Level1Blurb => "level1_blurb",
            CoverText => "cover_text",
            Metadata => "metadata",
            RouterVisual => "router_visual",
            RouterBlurb => "router_blurb",
            VisualPathway => "visual_pathway",
            TextPathway => "text_pathway",
            MultiVisual => "multi_visual",
            MultiBlurb => "multi_blurb",
        }
    }
}

/// Level-1 projections in fusion order.
const LEVEL1_PROJECTIONS: [Projection; 4] =
    [Projection::Level1Visual, Projection::Level1Blurb, Projection::CoverText, Projection::Metadata];
const ROUTER_PROJECTIONS: [Projection; 2] = [Projection::RouterVisual, Projection::RouterBlurb];

fn pathway_projections(p: Pathway) -> &'static [Projection] {
    match p {
        Pathway::Multimodal => &[Projection::MultiVisual, Projection::MultiBlurb],
        Pathway::Visual => &[Projection::VisualPathway],
        Pathway::Textual => &[Projection::TextPathway],
    }
}

/// Identifies one of the model's networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NetId {
    Proj(Projection),
    Level1,
    Router,
    Head(Pathway, Branch),
}

pub const NET_COUNT: usize = 18;

impl NetId {
    pub fn all() -> Vec<NetId> {
        let mut v: Vec<NetId> = Projection::ALL.iter().map(|&p| NetId::Proj(p)).collect();
        v.push(NetId::Level1);
        v.push(NetId::Router);
        for p in Pathway::ALL {
            for b in Branch::ALL {
                v.push(NetId::Head(p, b));
            }
        }
        v
    }

    pub fn index(self) -> usize {
        match self {
            NetId::Proj(p) => p as usize,
            NetId::Level1 => 10,
            NetId::Router => 11,
            NetId::Head(p, b) => 12 + 2 * p.index() + b.index(),
        }
    }

    pub fn name(self) -> String {
        match self {
            NetId::Proj(p) => format!("proj.{}", p.name()),
            NetId::Level1 => "level1".into(),
            NetId::Router => "router".into(),
            NetId::Head(p, b) => format!("head.{}.{}", p.name(), b.name()),
        }
    }

    pub fn is_level2_head(self) -> bool {
        matches!(self, NetId::Head(..))
    }
}

/// Networks updated together in one training stage.
pub fn level1_group() -> Vec<NetId> {
    let mut v: Vec<NetId> = LEVEL1_PROJECTIONS.iter().map(|&p| NetId::Proj(p)).collect();
    v.push(NetId::Level1);
    v
}

pub fn pathway_group(p: Pathway) -> Vec<NetId> {
    let mut v: Vec<NetId> = pathway_projections(p).iter().map(|&q| NetId::Proj(q)).collect();
    v.extend(Branch::ALL.iter().map(|&b| NetId::Head(p, b)));
    v
}

pub fn router_group() -> Vec<NetId> {
    let mut v: Vec<NetId> = ROUTER_PROJECTIONS.iter().map(|&p| NetId::Proj(p)).collect();
    v.push(NetId::Router);
    v
}

pub fn classifier_group() -> Vec<NetId> {
    let mut v = level1_group();
    for p in Pathway::ALL {
        v.extend(pathway_group(p));
    }
    v
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "UMv")]
    VisualOnly,
    #[serde(rename = "UMd")]
    TextOnly,
    #[serde(rename = "MMvd")]
    VisualText,
    #[serde(rename = "MMvdc")]
    VisualTextCover,
    #[serde(rename = "MMvdm")]
    VisualTextMetadata,
    #[serde(rename = "psiM")]
    MultimodalOnly,
    #[default]
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::VisualOnly,
        Variant::TextOnly,
        Variant::VisualText,
        Variant::VisualTextCover,
        Variant::VisualTextMetadata,
        Variant::MultimodalOnly,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VisualOnly => "UMv",
            Variant::TextOnly => "UMd",
            Variant::VisualText => "MMvd",
            Variant::VisualTextCover => "MMvdc",
            Variant::VisualTextMetadata => "MMvdm",
            Variant::MultimodalOnly => "psiM",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected one of UMv, UMd, MMvd, MMvdc, MMvdm, psiM, full)")))
    }

    /// Fixed pathway, or `None` when the routing network decides.
    pub fn forced_pathway(self) -> Option<Pathway> {
        match self {
            Variant::VisualOnly => Some(Pathway::Visual),
            Variant::TextOnly => Some(Pathway::Textual),
            Variant::Full => None,
            _ => Some(Pathway::Multimodal),
        }
    }

    /// Active Level-1 inputs in fusion order.
    pub fn level1_inputs(self) -> [bool; 4] {
        match self {
            Variant::VisualOnly => [true, false, false, false],
            Variant::TextOnly => [false, true, false, false],
            Variant::VisualText => [true, true, false, false],
            Variant::VisualTextCover => [true, true, true, false],
            Variant::VisualTextMetadata => [true, true, false, true],
            Variant::MultimodalOnly | Variant::Full => [true; 4],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Projection width `D`.
    pub width: usize,
    pub visual_dim: usize,
    pub blurb_dim: usize,
    pub cover_text_dim: usize,
    pub metadata_dim: usize,
    /// Level-2 decision threshold.
    pub threshold: f64,
    /// Hidden widths of the Level-1 and Level-2 networks; default `[D, D/2, D/4, D/8]`.
    pub classifier_hidden: Option<Vec<usize>>,
    /// Hidden widths of the routing network; default `[D/2, D/8]`.
    pub router_hidden: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 512,
            visual_dim: 768,
            blurb_dim: 768,
            cover_text_dim: 768,
            metadata_dim: 512,
            threshold: 0.5,
            classifier_hidden: None,
            router_hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn classifier_widths(&self) -> Vec<usize> {
        let d = self.width;
        self.classifier_hidden.clone().unwrap_or_else(|| vec![d, d / 2, d / 4, d / 8])
    }

    pub fn router_widths(&self) -> Vec<usize> {
        let d = self.width;
        self.router_hidden.clone().unwrap_or_else(|| vec![d / 2, d / 8])
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual_dim,
            Modality::Blurb => self.blurb_dim,
            Modality::CoverText => self.cover_text_dim,
            Modality::Metadata => self.metadata_dim,
        }
    }

    /// Width of the latent vector passed from Level-1 to Level-2.
    pub fn latent_dim(&self) -> usize {
        *self.classifier_widths().last().unwrap_or(&(4 * self.width))
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("width", self.width),
            ("visual_dim", self.visual_dim),
            ("blurb_dim", self.blurb_dim),
            ("cover_text_dim", self.cover_text_dim),
            ("metadata_dim", self.metadata_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{field} must be >= 1")));
            }
        }
        if self.classifier_widths().contains(&0) {
            return Err(Error::Config(format!("model.classifier_hidden: widths must be >= 1 (width {} too small for the default stack)", self.width)));
        }
        if self.router_widths().contains(&0) {
            return Err(Error::Config(format!("model.router_hidden: widths must be >= 1 (width {} too small for the default stack)", self.width)));
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::Config(format!("model.threshold {} must be a finite non-negative number", self.threshold)));
        }
        Ok(())
    }

    fn spec(&self, id: NetId, taxonomy: &GenreTaxonomy) -> NetworkSpec {
        let d = self.width;
        match id {
            NetId::Proj(p) => NetworkSpec::new(self.input_dim(p.modality()), &[], (d, OutputActivation::Identity)),
            NetId::Level1 => NetworkSpec::stack(4 * d, &self.classifier_widths(), Activation::Relu, (2, OutputActivation::Softmax)),
            NetId::Router => NetworkSpec::stack(2 * d, &self.router_widths(), Activation::Gelu, (3, OutputActivation::Softmax)),
            NetId::Head(p, b) => {
                let input = pathway_projections(p).len() * d + self.latent_dim();
                NetworkSpec::stack(input, &self.classifier_widths(), Activation::Relu, (taxonomy.len(b), OutputActivation::Sigmoid))
            }
        }
    }
}

/// Raw modality vectors for a batch of books, one row per book.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub modalities: [Array2<f64>; 4],
}

impl Inputs {
    pub fn len(&self) -> usize {
        self.modalities[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, m: Modality) -> &Array2<f64> {
        &self.modalities[m.index()]
    }

    pub fn zeros(config: &ModelConfig, n: usize) -> Self {
        Inputs { modalities: Modality::ALL.map(|m| Array2::zeros((n, config.input_dim(m)))) }
    }

    pub fn select(&self, rows: &[usize]) -> Inputs {
        Inputs { modalities: self.modalities.clone().map(|a| a.select(Axis(0), rows)) }
    }

    /// Resolve embedding references; absent modalities become zero vectors.
    /// The metadata vector is looked up by record id in the `metadata` store.
    pub fn from_records(records: &[&BookRecord], stores: &StoreSet, config: &ModelConfig) -> Result<Inputs> {
        let mut out = Inputs::zeros(config, records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.visual_ref.is_none() && rec.blurb_ref.is_none() {
                return Err(Error::Input(format!("record {} has neither a visual nor a blurb embedding", rec.id)));
            }
            let refs = [&rec.visual_ref, &rec.blurb_ref, &rec.cover_text_ref];
            for (m, r) in Modality::ALL.iter().zip(refs) {
                if let Some(v) = stores.resolve(r.as_ref())? {
                    out.set_row(*m, i, &v, &rec.id)?;
                }
            }
            if let Some(v) = stores.get(METADATA).and_then(|s| s.lookup(&rec.id)) {
                let v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
                out.set_row(Modality::Metadata, i, &v, &rec.id)?;
            }
        }
        Ok(out)
    }

    fn set_row(&mut self, m: Modality, row: usize, v: &[f64], id: &str) -> Result<()> {
        let a = &mut self.modalities[m.index()];
        if v.len() != a.ncols() {
            return Err(Error::shape(format!("{:?} vectors of width {}", m, a.ncols()), format!("{} for record {id}", v.len())));
        }
        a.row_mut(row).assign(&ndarray::ArrayView1::from(v));
        Ok(())
    }
}

/// Per-head evaluation counters (rows passed through each Level-2 head).
#[derive(Debug, Default)]
pub struct HeadCounters([AtomicU64; 6]);

impl HeadCounters {
    fn slot(p: Pathway, b: Branch) -> usize {
        2 * p.index() + b.index()
    }

    fn add(&self, p: Pathway, b: Branch, n: usize) {
        self.0[Self::slot(p, b)].fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn get(&self, p: Pathway, b: Branch) -> u64 {
        self.0[Self::slot(p, b)].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    pub fn reset(&self) {
        self.0.iter().for_each(|c| c.store(0, Ordering::Relaxed));
    }
}

impl Clone for HeadCounters {
    fn clone(&self) -> Self {
        HeadCounters(std::array::from_fn(|i| AtomicU64::new(self.0[i].load(Ordering::Relaxed))))
    }
}

/// Output of one Level-1 pass with everything needed for backpropagation.
struct Level1Pass {
    proj: Vec<ForwardCache>,
    fused: ForwardCache,
    /// Rows of (fiction, nonfiction) probabilities.
    yhat: Array2<f64>,
}

impl Level1Pass {
    fn latent(&self) -> &Array2<f64> {
        self.fused.last_hidden()
    }
}

/// One Level-2 head evaluated on a subset of rows.
struct HeadPass {
    rows: Vec<usize>,
    proj: Vec<ForwardCache>,
    head: ForwardCache,
}

/// Objective for one gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Level-1 cross-entropy only.
    Level1,
    /// Level-2 term of the hierarchical loss for one pathway, the Level-1
    /// network frozen.
    Pathway(Pathway),
    /// Full hierarchical loss with per-sample routes.
    Joint,
    /// Cross-entropy of the routing network against target pathways.
    Router,
}

/// Per-net gradients, indexed by [`NetId::index`].
#[derive(Debug, Clone)]
pub struct GradSet(Vec<Option<Gradients>>);

impl Default for GradSet {
    fn default() -> Self {
        GradSet(vec![None; NET_COUNT])
    }
}

impl GradSet {
    pub fn get(&self, id: NetId) -> Option<&Gradients> {
        self.0[id.index()].as_ref()
    }

    fn add(&mut self, id: NetId, g: Gradients) {
        match &mut self.0[id.index()] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Nets whose gradient has a nonzero entry.
    pub fn nonzero(&self) -> Vec<NetId> {
        NetId::all().into_iter().filter(|&id| self.get(id).is_some_and(|g| !g.is_zero())).collect()
    }
}

/// Gating bookkeeping gathered while computing gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateAudit {
    pub samples: u64,
    /// Samples whose Level-2 upstream gradient was nonzero.
    pub level2_active: u64,
    /// Samples sending nonzero gradient to more than one Level-2 head.
    pub multi_head: u64,
    /// Samples with a wrong Level-1 decision but nonzero Level-2 gradient.
    pub wrong_gate_leaks: u64,
    /// Samples whose Level-2 gradient reached a head other than their route.
    pub off_route: u64,
}

impl GateAudit {
    pub fn merge(&mut self, o: &GateAudit) {
        self.samples += o.samples;
        self.level2_active += o.level2_active;
        self.multi_head += o.multi_head;
        self.wrong_gate_leaks += o.wrong_gate_leaks;
        self.off_route += o.off_route;
    }

    pub fn violations(&self) -> u64 {
        self.multi_head + self.wrong_gate_leaks + self.off_route
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    /// Mean objective over the batch.
    pub loss: f64,
    pub grads: GradSet,
    pub audit: GateAudit,
}

/// See [`GenreModel::probe_objective`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveProbe {
    pub loss: f64,
    pub pattern: Vec<bool>,
    pub margin: f64,
}

/// Raw model output for one book.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub level1: [f64; 2],
    pub branch: Branch,
    pub routing: PathwayDecision,
    /// Level-2 probabilities of the selected (pathway, branch) head.
    pub probs: Vec<f64>,
}

impl RawPrediction {
    pub fn labels(&self, threshold: f64) -> Vec<bool> {
        self.probs.iter().map(|&p| p >= threshold).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level1Output {
    pub label: Branch,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreScore {
    pub name: String,
    pub p: f64,
}

/// Prediction record written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub level1: Level1Output,
    pub pathway: Pathway,
    pub routing: [f64; 3],
    pub genres: Vec<GenreScore>,
    #[serde(rename = "τ")]
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct GenreModel {
    config: ModelConfig,
    variant: Variant,
    taxonomy: GenreTaxonomy,
    nets: Vec<Network>,
    counters: HeadCounters,
}

fn rows_of(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    a.select(Axis(0), rows)
}

impl GenreModel {
    pub fn new(config: ModelConfig, taxonomy: GenreTaxonomy, variant: Variant, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::substream(seed_value, "init");
        let nets = NetId::all()
            .into_iter()
            .map(|id| Network::with_rng(config.spec(id, &taxonomy), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(GenreModel { config, variant, taxonomy, nets, counters: HeadCounters::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn taxonomy(&self) -> &GenreTaxonomy {
        &self.taxonomy
    }

    pub fn net(&self, id: NetId) -> &Network {
        &self.nets[id.index()]
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut Network {
        &mut self.nets[id.index()]
    }

    pub fn counters(&self) -> &HeadCounters {
        &self.counters
    }

    pub fn set_threshold(&mut self, tau: f64) {
        self.config.threshold = tau;
    }

    fn check_inputs(&self, x: &Inputs) -> Result<()> {
        for m in Modality::ALL {
            let a = x.get(m);
            if a.ncols() != self.config.input_dim(m) {
                return Err(Error::shape(format!("{m:?} width {}", self.config.input_dim(m)), a.ncols()));
            }
            if a.nrows() != x.len() {
                return Err(Error::shape(format!("{} rows", x.len()), a.nrows()));
            }
        }
        Ok(())
    }

    fn project(&self, p: Projection, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.net(NetId::Proj(p)).forward(x)
    }

    fn level1_pass(&self, x: &Inputs) -> Result<Level1Pass> {
        self.check_inputs(x)?;
        let active = self.variant.level1_inputs();
        let mut blocks = Vec::with_capacity(4);
        let mut proj = Vec::with_capacity(4);
        for (k, &p) in LEVEL1_PROJECTIONS.iter().enumerate() {
            let (mut out, cache) = self.project(p, x.get(p.modality()).view())?;
            if !active[k] {
                out.fill(0.0);
            }
            blocks.push(out);
            proj.push(cache);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let fused_in = concatenate(Axis(1), &views).expect("equal row counts");
        let (yhat, fused) = self.net(NetId::Level1).forward(fused_in.view())?;
        Ok(Level1Pass { proj, fused, yhat })
    }

    /// Level-1 distribution (fiction first) and the latent vector per row.
    pub fn level1_forward(&self, x: &Inputs) -> Result<(Array2<f64>, Array2<f64>)> {
        let pass = self.level1_pass(x)?;
        let latent = pass.latent().clone();
        Ok((pass.yhat, latent))
    }

    fn head_pass(&self, p: Pathway, b: Branch, x: &Inputs, latent: &Array2<f64>, rows: Vec<usize>) -> Result<(Array2<f64>, HeadPass)> {
        let mut blocks = Vec::new();
        let mut proj = Vec::new();
        for &q in pathway_projections(p) {
            let (out, cache) = self.project(q, rows_of(x.get(q.modality()), &rows).view())?;
            blocks.push(out);
            proj.push(cache);
        }
        blocks.push(rows_of(latent, &rows));
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let input = concatenate(Axis(1), &views).expect("equal row counts");
        let (y, head) = self.net(NetId::Head(p, b)).forward(input.view())?;
        self.counters.add(p, b, rows.len());
        Ok((y, HeadPass { rows, proj, head }))
    }

    /// Probabilities of one Level-2 head for every row.
    pub fn level2_forward(&self, p: Pathway, b: Branch, x: &Inputs, latent: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(x)?;
        if latent.dim() != (x.len(), self.config.latent_dim()) {
            return Err(Error::shape(format!("latent {}x{}", x.len(), self.config.latent_dim()), format!("{:?}", latent.dim())));
        }
        Ok(self.head_pass(p, b, x, latent, (0..x.len()).collect())?.0)
    }

    fn router_pass(&self, x: &Inputs) -> Result<(Array2<f64>, Vec<ForwardCache>, ForwardCache)> {
        let mut blocks = Vec::new();
        let mut proj = Vec::new();
        for &q in &ROUTER_PROJECTIONS {
            let (out, cache) = self.project(q, x.get(q.modality()).view())?;
            blocks.push(out);
            proj.push(cache);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let input = concatenate(Axis(1), &views).expect("equal row counts");
        let (dist, cache) = self.net(NetId::Router).forward(input.view())?;
        Ok((dist, proj, cache))
    }

    /// Routing decision per row: the routing network's, or the variant's
    /// fixed pathway.
    pub fn route(&self, x: &Inputs) -> Result<Vec<PathwayDecision>> {
        self.check_inputs(x)?;
        if let Some(p) = self.variant.forced_pathway() {
            return Ok(vec![PathwayDecision { distribution: p.one_hot(), hard: p }; x.len()]);
        }
        let (dist, _, _) = self.router_pass(x)?;
        dist.rows().into_iter().map(|r| PathwayDecision::from_distribution(r.as_slice().expect("standard layout"))).collect()
    }

    /// Full inference: branch, route, and the one selected Level-2 head.
    pub fn predict_raw(&self, x: &Inputs) -> Result<Vec<RawPrediction>> {
        let (yhat, latent) = self.level1_forward(x)?;
        let routes = self.route(x)?;
        let branches = yhat.rows().into_iter().map(|r| class_gate(r.as_slice().expect("standard layout"))).collect::<Result<Vec<_>>>()?;
        let mut probs: Vec<Vec<f64>> = vec![Vec::new(); x.len()];
        for p in Pathway::ALL {
            for b in Branch::ALL {
                let rows: Vec<usize> = (0..x.len()).filter(|&i| routes[i].hard == p && branches[i] == b).collect();
                if rows.is_empty() {
                    continue;
                }
                let (y, pass) = self.head_pass(p, b, x, &latent, rows)?;
                for (k, &i) in pass.rows.iter().enumerate() {
                    probs[i] = y.row(k).to_vec();
                }
            }
        }
        Ok((0..x.len())
            .map(|i| RawPrediction {
                level1: [yhat[[i, 0]], yhat[[i, 1]]],
                branch: branches[i],
                routing: routes[i],
                probs: std::mem::take(&mut probs[i]),
            })
            .collect())
    }

    /// For each row: the predicted branch and every pathway's probabilities
    /// under it (used to build routing targets).
    pub fn all_pathways(&self, x: &Inputs) -> Result<Vec<(Branch, [Vec<f64>; 3])>> {
        let (yhat, latent) = self.level1_forward(x)?;
        let branches = yhat.rows().into_iter().map(|r| class_gate(r.as_slice().expect("standard layout"))).collect::<Result<Vec<_>>>()?;
        let mut out: Vec<(Branch, [Vec<f64>; 3])> = branches.iter().map(|&b| (b, Default::default())).collect();
        for p in Pathway::ALL {
            for b in Branch::ALL {
                let rows: Vec<usize> = (0..x.len()).filter(|&i| branches[i] == b).collect();
                if rows.is_empty() {
                    continue;
                }
                let (y, pass) = self.head_pass(p, b, x, &latent, rows)?;
                for (k, &i) in pass.rows.iter().enumerate() {
                    out[i].1[p.index()] = y.row(k).to_vec();
                }
            }
        }
        Ok(out)
    }

    pub fn to_prediction(&self, id: &str, raw: &RawPrediction) -> Prediction {
        let tau = self.config.threshold;
        let genres = raw
            .probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= tau)
            .map(|(j, &p)| GenreScore { name: self.taxonomy.genre(raw.branch, j).expect("head width matches taxonomy").name.clone(), p })
            .collect();
        Prediction {
            id: id.to_string(),
            level1: Level1Output { label: raw.branch, p: raw.level1[raw.branch.index()] },
            pathway: raw.routing.hard,
            routing: raw.routing.distribution,
            genres,
            tau,
        }
    }

    fn backprop_projections(&self, grads: &mut GradSet, projections: &[Projection], caches: &[ForwardCache], d_input: ArrayView2<f64>, mask: Option<&[bool]>) -> Result<()> {
        let d = self.config.width;
        for (k, (&q, cache)) in projections.iter().zip(caches).enumerate() {
            if mask.is_some_and(|m| !m[k]) {
                continue;
            }
            let slice = d_input.slice(s![.., k * d..(k + 1) * d]);
            let (g, _) = self.net(NetId::Proj(q)).backward(cache, slice)?;
            grads.add(NetId::Proj(q), g);
        }
        Ok(())
    }

    /// Gradients of the mean objective over a batch.
    ///
    /// `routes` is required for [`Objective::Joint`]; `router_targets` for
    /// [`Objective::Router`].
    pub fn compute_gradients(
        &self,
        x: &Inputs,
        truth: &[LabelVector],
        objective: Objective,
        routes: Option<&[Pathway]>,
        router_targets: Option<&[Pathway]>,
        loss: &LossParams,
    ) -> Result<StepResult> {
        self.check_inputs(x)?;
        let n = x.len();
        if truth.len() != n {
            return Err(Error::shape(format!("{n} label vectors"), truth.len()));
        }
        if n == 0 {
            return Err(Error::Training("empty batch".into()));
        }
        let scale = 1.0 / n as f64;
        let mut grads = GradSet::default();
        let mut audit = GateAudit { samples: n as u64, ..Default::default() };

        if objective == Objective::Router {
            let targets = router_targets.ok_or_else(|| Error::Contract("routing objective needs targets".into()))?;
            if targets.len() != n {
                return Err(Error::shape(format!("{n} routing targets"), targets.len()));
            }
            let (dist, proj, cache) = self.router_pass(x)?;
            let mut dy = Array2::zeros(dist.dim());
            let mut total = 0.0;
            for i in 0..n {
                let l = ce_loss(dist.row(i).as_slice().expect("standard layout"), &targets[i].one_hot(), loss.epsilon0)?;
                total += l.value;
                for (j, g) in l.gradient.iter().enumerate() {
                    dy[[i, j]] = g * scale;
                }
            }
            let (g, dx) = self.net(NetId::Router).backward(&cache, dy.view())?;
            grads.add(NetId::Router, g);
            self.backprop_projections(&mut grads, &ROUTER_PROJECTIONS, &proj, dx.view(), None)?;
            return Ok(StepResult { loss: total * scale, grads, audit });
        }

        let l1 = self.level1_pass(x)?;
        let gates: Vec<Branch> = l1.yhat.rows().into_iter().map(|r| class_gate(r.as_slice().expect("standard layout"))).collect::<Result<_>>()?;
        let fiction_p = |i: usize| l1.yhat[[i, Branch::Fiction.index()]];

        if objective == Objective::Level1 {
            let mut dy = Array2::zeros(l1.yhat.dim());
            let mut total = 0.0;
            for (i, t) in truth.iter().enumerate() {
                let l = bce_loss(fiction_p(i), t.level1(), loss.epsilon0)?;
                total += l.value;
                dy[[i, Branch::Fiction.index()]] = l.gradient[0] * scale;
            }
            self.level1_backward(&mut grads, &l1, dy.view(), None)?;
            return Ok(StepResult { loss: total * scale, grads, audit });
        }

        let route_of = |i: usize| -> Result<Pathway> {
            match objective {
                Objective::Pathway(p) => Ok(p),
                _ => routes
                    .ok_or_else(|| Error::Contract("joint objective needs per-sample routes".into()))
                    .and_then(|r| r.get(i).copied().ok_or_else(|| Error::shape(format!("{n} routes"), r.len()))),
            }
        };
        let sample_routes: Vec<Pathway> = (0..n).map(route_of).collect::<Result<_>>()?;
        let joint = objective == Objective::Joint;

        let mut total = 0.0;
        let mut dy1 = Array2::zeros(l1.yhat.dim());
        let mut d_latent = Array2::zeros(l1.latent().dim());
        // heads with a nonzero upstream row, per sample
        let mut touched: Vec<Vec<NetId>> = vec![Vec::new(); n];
        let mut level1_terms = vec![0.0; n];
        let mut level2_seen = vec![false; n];

        for p in Pathway::ALL {
            for b in Branch::ALL {
                let rows: Vec<usize> = (0..n).filter(|&i| sample_routes[i] == p && truth[i].branch == b).collect();
                if rows.is_empty() {
                    continue;
                }
                let (y, pass) = self.head_pass(p, b, x, l1.latent(), rows)?;
                let mut dy = Array2::zeros(y.dim());
                for (k, &i) in pass.rows.iter().enumerate() {
                    let asl = asl_loss(y.row(k).as_slice().expect("standard layout"), &truth[i].as_f64(), loss)?;
                    let mut per_path = [None, None, None];
                    per_path[p.index()] = Some(&asl);
                    let gated = level2_loss(per_path, p.one_hot())?;
                    let selected = crate::losses::LossValue {
                        value: gated.value,
                        gradient: gated.gradients[p.index()].clone().expect("selected pathway has a gradient"),
                    };
                    let (fic, non) = match b {
                        Branch::Fiction => (Some(&selected), None),
                        Branch::Nonfiction => (None, Some(&selected)),
                    };
                    let overall = overall_loss(truth[i].level1(), fiction_p(i), gates[i].indicator(), fic, non, loss.epsilon0)?;
                    level1_terms[i] = overall.level1;
                    level2_seen[i] = true;
                    total += if joint { overall.value } else { overall.value - overall.level1 };
                    let g = match b {
                        Branch::Fiction => overall.fiction_grad,
                        Branch::Nonfiction => overall.nonfiction_grad,
                    }
                    .expect("branch loss supplied");
                    let mut any = false;
                    for (j, gj) in g.iter().enumerate() {
                        dy[[k, j]] = gj * scale;
                        any |= *gj != 0.0;
                    }
                    if any {
                        touched[i].push(NetId::Head(p, b));
                    }
                }
                let (g, dx) = self.net(NetId::Head(p, b)).backward(&pass.head, dy.view())?;
                grads.add(NetId::Head(p, b), g);
                self.backprop_projections(&mut grads, pathway_projections(p), &pass.proj, dx.view(), None)?;
                if joint {
                    let off = pathway_projections(p).len() * self.config.width;
                    for (k, &i) in pass.rows.iter().enumerate() {
                        let mut row = d_latent.row_mut(i);
                        row += &dx.slice(s![k, off..]);
                    }
                }
            }
        }

        for i in 0..n {
            let heads = &touched[i];
            if !heads.is_empty() {
                audit.level2_active += 1;
            }
            if heads.len() > 1 {
                audit.multi_head += 1;
            }
            if gates[i] != truth[i].branch && !heads.is_empty() {
                audit.wrong_gate_leaks += 1;
            }
            if heads.iter().any(|&h| h != NetId::Head(sample_routes[i], truth[i].branch)) {
                audit.off_route += 1;
            }
        }

        if joint {
            for (i, t) in truth.iter().enumerate() {
                let l = bce_loss(fiction_p(i), t.level1(), loss.epsilon0)?;
                debug_assert!(!level2_seen[i] || l.value == level1_terms[i]);
                if !level2_seen[i] {
                    total += l.value;
                }
                dy1[[i, Branch::Fiction.index()]] = l.gradient[0] * scale;
            }
            self.level1_backward(&mut grads, &l1, dy1.view(), Some(d_latent.view()))?;
        }
        Ok(StepResult { loss: total * scale, grads, audit })
    }

    fn level1_backward(&self, grads: &mut GradSet, l1: &Level1Pass, dy: ArrayView2<f64>, d_latent: Option<ArrayView2<f64>>) -> Result<()> {
        let (g, dx) = self.net(NetId::Level1).backward_with_hidden(&l1.fused, dy, d_latent)?;
        grads.add(NetId::Level1, g);
        let active = self.variant.level1_inputs();
        self.backprop_projections(grads, &LEVEL1_PROJECTIONS, &l1.proj, dx.view(), Some(&active))
    }

    /// Apply one optimizer step to every net in `group` that received a
    /// nonzero gradient. Nets outside `group` must have none.
    pub fn apply(&mut self, grads: &GradSet, group: &[NetId], hyper: &AdamHyper) -> Result<()> {
        for id in grads.nonzero() {
            if !group.contains(&id) {
                return Err(Error::Contract(format!("{} received gradient outside its training stage", id.name())));
            }
        }
        for &id in group {
            if let Some(g) = grads.get(id) {
                if !g.is_zero() {
                    self.nets[id.index()].optimizer_step(g, hyper).map_err(|e| match e {
                        Error::Training(m) => Error::Training(format!("{}: {m}", id.name())),
                        e => e,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Flat parameter vector of a group of nets (for finite-difference checks).
    pub fn group_params(&self, group: &[NetId]) -> Vec<f64> {
        group.iter().flat_map(|&id| {
            let net = self.net(id);
            (0..net.param_count()).map(move |i| net.param(i))
        }).collect()
    }

    pub fn set_group_param(&mut self, group: &[NetId], mut i: usize, v: f64) {
        for &id in group {
            let n = self.net(id).param_count();
            if i < n {
                self.net_mut(id).set_param(i, v);
                return;
            }
            i -= n;
        }
        panic!("parameter index out of range");
    }

    pub fn group_grads(grads: &GradSet, model: &GenreModel, group: &[NetId]) -> Vec<f64> {
        group
            .iter()
            .flat_map(|&id| match grads.get(id) {
                Some(g) => g.iter().collect::<Vec<_>>(),
                None => vec![0.0; model.net(id).param_count()],
            })
            .collect()
    }

    /// Forward-only value of an objective, with every discrete switch it
    /// passes through (relu activity, class gates, ASL clipping) and the
    /// distance of the nearest one, so finite-difference probes can skip
    /// kinks. Values sitting exactly on a switch are left to the pattern
    /// comparison.
    pub fn probe_objective(
        &self,
        x: &Inputs,
        truth: &[LabelVector],
        objective: Objective,
        routes: &[Pathway],
        loss: &LossParams,
    ) -> Result<ObjectiveProbe> {
        let n = x.len() as f64;
        if objective == Objective::Router {
            let (dist, _, _) = self.router_pass(x)?;
            let mut total = 0.0;
            for (row, t) in dist.rows().into_iter().zip(routes) {
                total += ce_loss(row.as_slice().expect("standard layout"), &t.one_hot(), loss.epsilon0)?.value;
            }
            // the routing network is smooth
            return Ok(ObjectiveProbe { loss: total / n, pattern: Vec::new(), margin: f64::INFINITY });
        }
        let l1 = self.level1_pass(x)?;
        let net = self.net(NetId::Level1);
        let mut pattern = net.relu_pattern(&l1.fused);
        let mut margin = net.min_relu_margin(&l1.fused);
        let fiction_p = |i: usize| l1.yhat[[i, Branch::Fiction.index()]];
        for i in 0..x.len() {
            let p = fiction_p(i);
            pattern.push(p >= 0.5);
            if p != 0.5 {
                margin = margin.min((p - 0.5).abs());
            }
        }
        let mut total = 0.0;
        if objective == Objective::Level1 {
            for (i, t) in truth.iter().enumerate() {
                total += bce_loss(fiction_p(i), t.level1(), loss.epsilon0)?.value;
            }
            return Ok(ObjectiveProbe { loss: total / n, pattern, margin });
        }
        let route_of = |i: usize| match objective {
            Objective::Pathway(p) => p,
            _ => routes[i],
        };
        for p in Pathway::ALL {
            for b in Branch::ALL {
                let rows: Vec<usize> = (0..x.len()).filter(|&i| route_of(i) == p && truth[i].branch == b).collect();
                if rows.is_empty() {
                    continue;
                }
                let (y, pass) = self.head_pass(p, b, x, l1.latent(), rows)?;
                let net = self.net(NetId::Head(p, b));
                pattern.extend(net.relu_pattern(&pass.head));
                margin = margin.min(net.min_relu_margin(&pass.head));
                for (k, &i) in pass.rows.iter().enumerate() {
                    let q = y.row(k);
                    if loss.epsilon > 0.0 {
                        for (j, &v) in q.iter().enumerate() {
                            if !truth[i].level2[j] {
                                pattern.push(v > loss.epsilon);
                                if v != loss.epsilon {
                                    margin = margin.min((v - loss.epsilon).abs());
                                }
                            }
                        }
                    }
                    let asl = asl_loss(q.as_slice().expect("standard layout"), &truth[i].as_f64(), loss)?;
                    let gate = class_gate(l1.yhat.row(i).as_slice().expect("standard layout"))?;
                    let (fic, non) = match b {
                        Branch::Fiction => (Some(&asl), None),
                        Branch::Nonfiction => (None, Some(&asl)),
                    };
                    let o = overall_loss(truth[i].level1(), fiction_p(i), gate.indicator(), fic, non, loss.epsilon0)?;
                    total += if objective == Objective::Joint { o.value } else { o.value - o.level1 };
                }
            }
        }
        Ok(ObjectiveProbe { loss: total / n, pattern, margin })
    }

    pub fn save(&self, path: impl AsRef<Path>, hyper: &AdamHyper) -> Result<()> {
        self.to_container(hyper)?.save(path)
    }

    pub fn to_container(&self, hyper: &AdamHyper) -> Result<Container> {
        let ids = NetId::all();
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            taxonomy_hash: self.taxonomy.hash(),
            taxonomy: serde_json::from_str(&self.taxonomy.to_json())?,
            config: self.config.clone(),
            variant: self.variant,
            optimizer: *hyper,
            networks: ids.iter().map(|&id| (id.name(), self.net(id).spec().clone())).collect(),
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        for id in ids {
            for (k, layer) in self.net(id).layers().iter().enumerate() {
                c.push(format!("{}/{k}/w", id.name()), layer.w.clone());
                c.push_vec(format!("{}/{k}/b", id.name()), layer.b.as_slice().expect("contiguous"));
            }
        }
        Ok(c)
    }

    /// Load a checkpoint. With `expected` set, its hash must match the
    /// stored taxonomy hash.
    pub fn load(path: impl AsRef<Path>, expected: Option<&GenreTaxonomy>) -> Result<(Self, AdamHyper)> {
        Self::from_container(&Container::load(path)?, expected)
    }

    pub fn from_container(c: &Container, expected: Option<&GenreTaxonomy>) -> Result<(Self, AdamHyper)> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(format!("checkpoint index: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format `{}`", meta.format)));
        }
        let taxonomy = GenreTaxonomy::from_json(&meta.taxonomy.to_string())?;
        if taxonomy.hash() != meta.taxonomy_hash {
            return Err(Error::Corruption("embedded taxonomy does not match its hash".into()));
        }
        if let Some(t) = expected {
            if t.hash() != meta.taxonomy_hash {
                return Err(Error::Validation(format!(
                    "checkpoint was trained on taxonomy {} but {} was supplied",
                    &meta.taxonomy_hash[..12],
                    &t.hash()[..12]
                )));
            }
        }
        meta.config.validate()?;
        let ids = NetId::all();
        if meta.networks.len() != ids.len() {
            return Err(Error::shape(format!("{} networks", ids.len()), meta.networks.len()));
        }
        let mut nets = Vec::with_capacity(ids.len());
        for (id, (name, spec)) in ids.iter().zip(&meta.networks) {
            if *name != id.name() || *spec != meta.config.spec(*id, &taxonomy) {
                return Err(Error::shape(format!("network {} as configured", id.name()), format!("stored {name}")));
            }
            let layers = (0..spec.depth())
                .map(|k| {
                    let w = c.get(&format!("{name}/{k}/w"))?.clone();
                    let b = c.get(&format!("{name}/{k}/b"))?;
                    if b.nrows() != 1 {
                        return Err(Error::shape("bias row vector", format!("{:?}", b.dim())));
                    }
                    Ok(Dense { w, b: b.row(0).to_owned() })
                })
                .collect::<Result<Vec<_>>>()?;
            nets.push(Network::from_layers(spec.clone(), layers)?);
        }
        Ok((GenreModel { config: meta.config, variant: meta.variant, taxonomy, nets, counters: HeadCounters::default() }, meta.optimizer))
    }
}

const CHECKPOINT_FORMAT: &str = "genre-model/1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    taxonomy_hash: String,
    taxonomy: serde_json::Value,
    config: ModelConfig,
    variant: Variant,
    optimizer: AdamHyper,
    networks: Vec<(String, NetworkSpec)>,
}
