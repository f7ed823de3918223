//! Metadata knowledge graph and TransD embeddings.
//!
//! Entities are authors, publishers, Level-1 branches and Level-2 genres.
//! Level-2 genre entities are branch-qualified (`fiction:Literature`) since
//! the two branches reuse genre names.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::dataio::{BookRecord, EmbeddingStore};
use crate::error::{Error, Result};
use crate::losses::margin_ranking_loss;
use crate::seed::{self, Rng};
use crate::taxonomy::{Branch, GenreTaxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Author,
    Publisher,
    Level1,
    Level2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "A-P")]
    AuthorPublisher,
    #[serde(rename = "A-L1")]
    AuthorLevel1,
    #[serde(rename = "A-L2")]
    AuthorLevel2,
    #[serde(rename = "P-L1")]
    PublisherLevel1,
    #[serde(rename = "P-L2")]
    PublisherLevel2,
    #[serde(rename = "L1-L2")]
    Level1Level2,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::AuthorPublisher,
        Relation::AuthorLevel1,
        Relation::AuthorLevel2,
        Relation::PublisherLevel1,
        Relation::PublisherLevel2,
        Relation::Level1Level2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// (head kind, tail kind).
    pub fn signature(self) -> (EntityKind, EntityKind) {
        use EntityKind::*;
        match self {
            Relation::AuthorPublisher => (Author, Publisher),
            Relation::AuthorLevel1 => (Author, Level1),
            Relation::AuthorLevel2 => (Author, Level2),
            Relation::PublisherLevel1 => (Publisher, Level1),
            Relation::PublisherLevel2 => (Publisher, Level2),
            Relation::Level1Level2 => (Level1, Level2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub kind: EntityKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: usize,
    pub tail: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    index: BTreeMap<(EntityKind, String), usize>,
    by_kind: BTreeMap<EntityKind, Vec<usize>>,
    triplets: Vec<Triplet>,
    positives: BTreeSet<Triplet>,
}

pub fn level2_entity_name(branch: Branch, genre: &str) -> String {
    format!("{}:{}", branch.name(), genre)
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index of the entity, inserting it if new.
    pub fn entity(&mut self, kind: EntityKind, name: &str) -> usize {
        if let Some(&i) = self.index.get(&(kind, name.to_string())) {
            return i;
        }
        let i = self.entities.len();
        self.entities.push(Entity { name: name.to_string(), kind });
        self.index.insert((kind, name.to_string()), i);
        self.by_kind.entry(kind).or_default().push(i);
        i
    }

    /// Add a triplet; duplicates are ignored. Returns whether it was new.
    pub fn add(&mut self, t: Triplet) -> Result<bool> {
        let (hk, tk) = t.relation.signature();
        let kind = |i: usize| self.entities.get(i).map(|e| e.kind);
        if kind(t.head) != Some(hk) || kind(t.tail) != Some(tk) {
            return Err(Error::Contract(format!("triplet {t:?} does not match its relation signature")));
        }
        if self.positives.insert(t) {
            self.triplets.push(t);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn link(&mut self, relation: Relation, head: &str, tail: &str) -> Result<bool> {
        let (hk, tk) = relation.signature();
        let head = self.entity(hk, head);
        let tail = self.entity(tk, tail);
        self.add(Triplet { head, tail, relation })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.positives.contains(t)
    }

    pub fn lookup(&self, kind: EntityKind, name: &str) -> Option<usize> {
        self.index.get(&(kind, name.to_string())).copied()
    }

    pub fn of_kind(&self, kind: EntityKind) -> &[usize] {
        self.by_kind.get(&kind).map_or(&[], Vec::as_slice)
    }
}

/// Graph over the training records only.
pub fn build_graph(train: &[BookRecord], taxonomy: &GenreTaxonomy) -> Result<KnowledgeGraph> {
    let mut g = KnowledgeGraph::new();
    for rec in train {
        let l1 = rec.level1.name();
        let l2: Vec<String> = rec
            .genres
            .iter()
            .map(|&id| {
                let idx = taxonomy.index_of_id(rec.level1, id).ok_or_else(|| {
                    Error::UnknownGenre(format!("genre id {id} in branch {l1} (record {})", rec.id))
                })?;
                Ok(level2_entity_name(rec.level1, &taxonomy.genre(rec.level1, idx).expect("index valid").name))
            })
            .collect::<Result<_>>()?;
        for a in &rec.authors {
            for p in &rec.publishers {
                g.link(Relation::AuthorPublisher, a, p)?;
            }
            g.link(Relation::AuthorLevel1, a, l1)?;
            for x in &l2 {
                g.link(Relation::AuthorLevel2, a, x)?;
            }
        }
        for p in &rec.publishers {
            g.link(Relation::PublisherLevel1, p, l1)?;
            for x in &l2 {
                g.link(Relation::PublisherLevel2, p, x)?;
            }
        }
        for x in &l2 {
            g.link(Relation::Level1Level2, l1, x)?;
        }
    }
    Ok(g)
}

pub const MAX_CORRUPTION_TRIES: usize = 100;

/// One corrupted counterpart per positive (`None` when none was found).
pub fn sample_negatives(graph: &KnowledgeGraph, positives: &[Triplet], rng: &mut Rng) -> Vec<Option<Triplet>> {
    positives
        .iter()
        .map(|&pos| {
            let (hk, tk) = pos.relation.signature();
            for _ in 0..MAX_CORRUPTION_TRIES {
                let mut cand = pos;
                if rng.random_bool(0.5) {
                    let pool = graph.of_kind(hk);
                    cand.head = pool[rng.random_range(0..pool.len())];
                } else {
                    let pool = graph.of_kind(tk);
                    cand.tail = pool[rng.random_range(0..pool.len())];
                }
                if !graph.contains(&cand) {
                    return Some(cand);
                }
            }
            log::warn!("no corruption found for triplet {pos:?} after {MAX_CORRUPTION_TRIES} tries; skipped");
            None
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransDHyper {
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TransDHyper {
    fn default() -> Self {
        TransDHyper { entity_dim: 512, relation_dim: 256, margin: 1.0, lr: 0.01, epochs: 100, batch: 128, seed: 0 }
    }
}

impl TransDHyper {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("entity_dim", self.entity_dim), ("relation_dim", self.relation_dim), ("batch", self.batch)] {
            if v == 0 {
                return Err(Error::Config(format!("graph.{field} must be >= 1")));
            }
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("graph.margin {} must be positive", self.margin)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("graph.lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Per entity: semantic vector and projection vector (rows of `entity`,
/// `entity_proj`); likewise per relation.
#[derive(Debug, Clone, PartialEq)]
pub struct TransD {
    pub entity: Array2<f64>,
    pub entity_proj: Array2<f64>,
    pub relation: Array2<f64>,
    pub relation_proj: Array2<f64>,
}

/// Gradient of a distance w.r.t. the six vectors of one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub head: Array1<f64>,
    pub head_proj: Array1<f64>,
    pub tail: Array1<f64>,
    pub tail_proj: Array1<f64>,
    pub relation: Array1<f64>,
    pub relation_proj: Array1<f64>,
}

impl TransD {
    /// Uniform init in ±6/√D per table (D its own width).
    pub fn init(n_entities: usize, entity_dim: usize, relation_dim: usize, rng: &mut Rng) -> Self {
        let mut table = |rows: usize, d: usize| {
            let b = 6.0 / (d as f64).sqrt();
            Array2::from_shape_simple_fn((rows, d), || rng.random_range(-b..=b))
        };
        let entity = table(n_entities, entity_dim);
        let entity_proj = table(n_entities, entity_dim);
        let relation = table(Relation::ALL.len(), relation_dim);
        let relation_proj = table(Relation::ALL.len(), relation_dim);
        TransD { entity, entity_proj, relation, relation_proj }
    }

    pub fn entity_dim(&self) -> usize {
        self.entity.ncols()
    }

    pub fn relation_dim(&self) -> usize {
        self.relation.ncols()
    }

    pub fn n_entities(&self) -> usize {
        self.entity.nrows()
    }

    fn check(&self, t: &Triplet) -> Result<()> {
        if t.head >= self.n_entities() || t.tail >= self.n_entities() {
            return Err(Error::Lookup(format!("triplet {t:?} references an unknown entity")));
        }
        Ok(())
    }

    /// `r_p (x_p · x) + Ĩ x`, Ĩ truncating or zero-padding to the relation width.
    fn project(&self, e: usize, rel: usize) -> Array1<f64> {
        let x = self.entity.row(e);
        let s = self.entity_proj.row(e).dot(&x);
        let mut out = self.relation_proj.row(rel).mapv(|v| v * s);
        let n = self.entity_dim().min(self.relation_dim());
        for k in 0..n {
            out[k] += x[k];
        }
        out
    }

    fn residual(&self, t: &Triplet) -> Array1<f64> {
        let r = t.relation.index();
        self.project(t.head, r) + &self.relation.row(r) - &self.project(t.tail, r)
    }

    /// `−‖M_h h + r − M_t t‖²`.
    pub fn score(&self, t: &Triplet) -> Result<f64> {
        self.check(t)?;
        let v = self.residual(t);
        Ok(-v.dot(&v))
    }

    pub fn distance(&self, t: &Triplet) -> Result<f64> {
        Ok(-self.score(t)?)
    }

    /// Gradient of the distance `‖v‖²` w.r.t. every vector involved.
    pub fn distance_grad(&self, t: &Triplet) -> Result<TripletGrad> {
        self.check(t)?;
        let r = t.relation.index();
        let g = self.residual(t).mapv(|v| 2.0 * v);
        let rp = self.relation_proj.row(r);
        let rg = rp.dot(&g);
        let n = self.entity_dim().min(self.relation_dim());
        let pad_t = |g: &Array1<f64>| {
            let mut o = Array1::zeros(self.entity_dim());
            o.slice_mut(ndarray::s![..n]).assign(&g.slice(ndarray::s![..n]));
            o
        };
        let (h, hp) = (self.entity.row(t.head), self.entity_proj.row(t.head));
        let (tt, tp) = (self.entity.row(t.tail), self.entity_proj.row(t.tail));
        let it_g = pad_t(&g);
        Ok(TripletGrad {
            head: hp.mapv(|v| v * rg) + &it_g,
            head_proj: h.mapv(|v| v * rg),
            tail: -(tp.mapv(|v| v * rg) + &it_g),
            tail_proj: tt.mapv(|v| -v * rg),
            relation: g.clone(),
            relation_proj: g.mapv(|v| v * (hp.dot(&h) - tp.dot(&tt))),
        })
    }

    /// Margin ranking loss on one (positive, negative) pair and its gradients.
    pub fn pair_loss(&self, pos: &Triplet, neg: &Triplet, margin: f64) -> Result<(f64, Option<(TripletGrad, TripletGrad)>)> {
        let (dp, dn) = (self.distance(pos)?, self.distance(neg)?);
        if !(dp.is_finite() && dn.is_finite()) {
            return Err(Error::Training("graph embedding distances overflowed; lower the learning rate".into()));
        }
        let l = margin_ranking_loss(dp, dn, margin)?;
        if l.gradient[0] == 0.0 {
            return Ok((l.value, None));
        }
        let mut gn = self.distance_grad(neg)?;
        for a in [&mut gn.head, &mut gn.head_proj, &mut gn.tail, &mut gn.tail_proj, &mut gn.relation, &mut gn.relation_proj] {
            a.mapv_inplace(|v| -v);
        }
        Ok((l.value, Some((self.distance_grad(pos)?, gn))))
    }

    /// Pair loss with its gradient scattered into tables shaped like `self`.
    pub fn pair_gradient(&self, pos: &Triplet, neg: &Triplet, margin: f64) -> Result<(f64, TransD)> {
        let mut g = TransD {
            entity: Array2::zeros(self.entity.dim()),
            entity_proj: Array2::zeros(self.entity_proj.dim()),
            relation: Array2::zeros(self.relation.dim()),
            relation_proj: Array2::zeros(self.relation_proj.dim()),
        };
        let (l, grads) = self.pair_loss(pos, neg, margin)?;
        if let Some((gp, gn)) = grads {
            for (t, tg) in [(pos, gp), (neg, gn)] {
                let r = t.relation.index();
                add_row(&mut g.entity, t.head, &tg.head, 1.0);
                add_row(&mut g.entity_proj, t.head, &tg.head_proj, 1.0);
                add_row(&mut g.entity, t.tail, &tg.tail, 1.0);
                add_row(&mut g.entity_proj, t.tail, &tg.tail_proj, 1.0);
                add_row(&mut g.relation, r, &tg.relation, 1.0);
                add_row(&mut g.relation_proj, r, &tg.relation_proj, 1.0);
            }
        }
        Ok((l, g))
    }

    fn tables(&self) -> [&Array2<f64>; 4] {
        [&self.entity, &self.entity_proj, &self.relation, &self.relation_proj]
    }

    /// Flat parameter view: entity, entity_proj, relation, relation_proj,
    /// each row-major.
    pub fn flat(&self) -> Vec<f64> {
        self.tables().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for t in [&mut self.entity, &mut self.entity_proj, &mut self.relation, &mut self.relation_proj] {
            if i < t.len() {
                t.as_slice_mut().expect("standard layout")[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn clamp_entity_norms(&mut self) {
        for mut row in self.entity.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 1.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
    }

    /// Sum-pooled (or mean-pooled) semantic vectors of the given entities;
    /// zero when the list is empty.
    pub fn pool(&self, entities: &[usize], pooling: Pooling) -> Vec<f64> {
        let mut out = vec![0.0; self.entity_dim()];
        for &e in entities {
            for (o, v) in out.iter_mut().zip(self.entity.row(e)) {
                *o += v;
            }
        }
        if pooling == Pooling::Mean && !entities.is_empty() {
            let k = entities.len() as f64;
            out.iter_mut().for_each(|o| *o /= k);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedGraph {
    pub embeddings: TransD,
    /// Mean margin loss per epoch.
    pub curve: Vec<f64>,
    pub skipped_negatives: usize,
}

fn add_row(table: &mut Array2<f64>, row: usize, g: &Array1<f64>, scale: f64) {
    table.row_mut(row).scaled_add(scale, g);
}

/// Mini-batch SGD on the margin ranking loss with fresh negatives each epoch.
pub fn train_transd(graph: &KnowledgeGraph, hyper: &TransDHyper) -> Result<TrainedGraph> {
    hyper.validate()?;
    if graph.triplets().is_empty() {
        return Err(Error::Training("cannot embed an empty graph".into()));
    }
    let mut emb = TransD::init(graph.entities().len(), hyper.entity_dim, hyper.relation_dim, &mut seed::substream(hyper.seed, "init"));
    let mut shuffle = seed::substream(hyper.seed, "shuffle");
    let mut negatives = seed::substream(hyper.seed, "negatives");
    let mut order: Vec<Triplet> = graph.triplets().to_vec();
    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut skipped = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut shuffle);
        let negs = sample_negatives(graph, &order, &mut negatives);
        let (mut total, mut pairs) = (0.0, 0usize);
        for (pos_chunk, neg_chunk) in order.chunks(hyper.batch).zip(negs.chunks(hyper.batch)) {
            let mut updates = Vec::new();
            for (pos, neg) in pos_chunk.iter().zip(neg_chunk) {
                let Some(neg) = neg else {
                    skipped += 1;
                    continue;
                };
                let (l, grads) = emb.pair_loss(pos, neg, hyper.margin)?;
                total += l;
                pairs += 1;
                if let Some((gp, gn)) = grads {
                    updates.push((*pos, gp));
                    updates.push((*neg, gn));
                }
            }
            let step = -hyper.lr / pos_chunk.len() as f64;
            for (t, g) in &updates {
                let r = t.relation.index();
                add_row(&mut emb.entity, t.head, &g.head, step);
                add_row(&mut emb.entity_proj, t.head, &g.head_proj, step);
                add_row(&mut emb.entity, t.tail, &g.tail, step);
                add_row(&mut emb.entity_proj, t.tail, &g.tail_proj, step);
                add_row(&mut emb.relation, r, &g.relation, step);
                add_row(&mut emb.relation_proj, r, &g.relation_proj, step);
            }
        }
        emb.clamp_entity_norms();
        if emb.entity.iter().chain(emb.entity_proj.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Training("graph embeddings diverged".into()));
        }
        curve.push(if pairs == 0 { 0.0 } else { total / pairs as f64 });
    }
    Ok(TrainedGraph { embeddings: emb, curve, skipped_negatives: skipped })
}

/// g^m for one record: pooled embeddings of its known authors and publishers.
pub fn metadata_feature(record: &BookRecord, graph: &KnowledgeGraph, emb: &TransD, pooling: Pooling) -> Vec<f64> {
    let known: Vec<usize> = record
        .authors
        .iter()
        .filter_map(|a| graph.lookup(EntityKind::Author, a))
        .chain(record.publishers.iter().filter_map(|p| graph.lookup(EntityKind::Publisher, p)))
        .collect();
    emb.pool(&known, pooling)
}

/// Store of g^m rows keyed by record id.
pub fn metadata_store(records: &[BookRecord], graph: &KnowledgeGraph, emb: &TransD, pooling: Pooling) -> Result<EmbeddingStore> {
    let ids = records.iter().map(|r| r.id.clone()).collect();
    let data = records.iter().flat_map(|r| metadata_feature(r, graph, emb, pooling)).map(|v| v as f32).collect();
    EmbeddingStore::new(crate::dataio::METADATA, emb.entity_dim(), ids, data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphIndex {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    triplets: Vec<Triplet>,
}

/// Save graph and embeddings in one parameter container.
pub fn save_graph(path: impl AsRef<Path>, graph: &KnowledgeGraph, emb: &TransD) -> Result<()> {
    let index = GraphIndex { entities: graph.entities.clone(), relations: Relation::ALL.to_vec(), triplets: graph.triplets.clone() };
    let mut c = Container::new(serde_json::to_value(index)?);
    c.push("entity", emb.entity.clone());
    c.push("entity_proj", emb.entity_proj.clone());
    c.push("relation", emb.relation.clone());
    c.push("relation_proj", emb.relation_proj.clone());
    c.save(path)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<(KnowledgeGraph, TransD)> {
    let c = Container::load(path)?;
    let index: GraphIndex = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(format!("graph index: {e}")))?;
    if index.relations != Relation::ALL {
        return Err(Error::Format("unexpected relation table in graph checkpoint".into()));
    }
    let mut g = KnowledgeGraph::new();
    for e in &index.entities {
        g.entity(e.kind, &e.name);
    }
    for t in index.triplets {
        g.add(t)?;
    }
    let emb = TransD {
        entity: c.get("entity")?.clone(),
        entity_proj: c.get("entity_proj")?.clone(),
        relation: c.get("relation")?.clone(),
        relation_proj: c.get("relation_proj")?.clone(),
    };
    if emb.entity.nrows() != g.entities().len() || emb.entity_proj.dim() != emb.entity.dim() || emb.relation_proj.dim() != emb.relation.dim() {
        return Err(Error::Corruption("graph embedding tables disagree with the index".into()));
    }
    Ok((g, emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::QualityFlags;
    use ndarray::array;

    fn record(id: &str, authors: &[&str], publishers: &[&str], genres: &[u32]) -> BookRecord {
        BookRecord {
            id: id.into(),
            title: String::new(),
            authors: authors.iter().map(|s| s.to_string()).collect(),
            publishers: publishers.iter().map(|s| s.to_string()).collect(),
            level1: Branch::Fiction,
            genres: genres.to_vec(),
            visual_ref: None,
            blurb_ref: None,
            cover_text_ref: None,
            flags: QualityFlags::default(),
        }
    }

    #[test]
    fn triplet_enumeration() {
        let tax = GenreTaxonomy::synthetic(4, 4).unwrap();
        let g = build_graph(&[record("a", &["x"], &["p"], &[1, 2])], &tax).unwrap();
        assert_eq!(g.triplets().len(), 9);
        let g = build_graph(&[record("a", &[], &["p"], &[1, 2])], &tax).unwrap();
        assert!(g.triplets().iter().all(|t| !matches!(t.relation, Relation::AuthorPublisher | Relation::AuthorLevel1 | Relation::AuthorLevel2)));
        assert_eq!(g.triplets().len(), 1 + 2 + 2);
        let r = record("a", &["x"], &["p"], &[1, 2]);
        let once = build_graph(&[r.clone()], &tax).unwrap();
        let twice = build_graph(&[r.clone(), r], &tax).unwrap();
        assert_eq!(once.triplets(), twice.triplets());
    }

    #[test]
    fn saturated_graph_skips() {
        let mut g = KnowledgeGraph::new();
        g.link(Relation::Level1Level2, "fiction", "fiction:a").unwrap();
        let negs = sample_negatives(&g, g.triplets(), &mut seed::rng(0));
        assert_eq!(negs, vec![None]);
    }

    #[test]
    fn score_example() {
        let emb = TransD {
            entity: array![[1.0, 0.0], [0.0, 1.0]],
            entity_proj: array![[0.0, 1.0], [1.0, 0.0]],
            relation: Array2::from_shape_fn((6, 2), |_| 0.5),
            relation_proj: Array2::from_shape_fn((6, 2), |_| 1.0),
        };
        let t = Triplet { head: 0, tail: 1, relation: Relation::AuthorPublisher };
        assert!((emb.score(&t).unwrap() + 2.5).abs() < 1e-15);
        let zero = TransD { entity: Array2::zeros((2, 3)), entity_proj: Array2::zeros((2, 3)), relation: Array2::zeros((6, 2)), relation_proj: Array2::zeros((6, 2)) };
        assert_eq!(zero.score(&t).unwrap(), 0.0);
        assert!(matches!(zero.score(&Triplet { head: 5, ..t }), Err(Error::Lookup(_))));
    }

    #[test]
    fn zero_epochs_keep_init() {
        let tax = GenreTaxonomy::synthetic(4, 4).unwrap();
        let g = build_graph(&[record("a", &["x", "y"], &["p", "q"], &[1, 2])], &tax).unwrap();
        let hyper = TransDHyper { entity_dim: 4, relation_dim: 3, epochs: 0, seed: 3, ..Default::default() };
        let out = train_transd(&g, &hyper).unwrap();
        let init = TransD::init(g.entities().len(), 4, 3, &mut seed::substream(3, "init"));
        assert_eq!(out.embeddings, init);
        assert!(out.curve.is_empty());
        assert!(matches!(train_transd(&KnowledgeGraph::new(), &hyper), Err(Error::Training(_))));
    }

    #[test]
    fn pooling() {
        let tax = GenreTaxonomy::synthetic(4, 4).unwrap();
        let g = build_graph(&[record("a", &["x"], &["p"], &[1])], &tax).unwrap();
        let emb = TransD::init(g.entities().len(), 3, 2, &mut seed::rng(1));
        let x = emb.entity.row(g.lookup(EntityKind::Author, "x").unwrap()).to_vec();
        let p = emb.entity.row(g.lookup(EntityKind::Publisher, "p").unwrap()).to_vec();
        for pool in [Pooling::Sum, Pooling::Mean] {
            assert_eq!(metadata_feature(&record("b", &["x"], &[], &[]), &g, &emb, pool), x);
        }
        let mean = metadata_feature(&record("b", &["x"], &["p"], &[]), &g, &emb, Pooling::Mean);
        for k in 0..3 {
            assert!((mean[k] - (x[k] + p[k]) / 2.0).abs() < 1e-15);
        }
        assert_eq!(metadata_feature(&record("b", &["zz"], &["qq"], &[]), &g, &emb, Pooling::Sum), vec![0.0; 3]);
    }

    #[test]
    fn graph_checkpoint_round_trip() {
        let tax = GenreTaxonomy::synthetic(4, 4).unwrap();
        let g = build_graph(&[record("a", &["x"], &["p"], &[1, 3])], &tax).unwrap();
        let emb = TransD::init(g.entities().len(), 5, 4, &mut seed::rng(2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kg.bin");
        save_graph(&path, &g, &emb).unwrap();
        let (g2, e2) = load_graph(&path).unwrap();
        assert_eq!(g2, g);
        assert_eq!(e2, emb);
    }
}
