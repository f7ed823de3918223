//! Workflow steps shared by the command-line tool and the acceptance suite:
//! each reads what the run config points at and writes documented files
//! under the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::synth::{generate, SynthDataset};
use crate::dataio::{partition, read_manifest, write_manifest, BookRecord, DatasetSplit, StoreSet, BLURB, COVER_TEXT, METADATA, VISUAL};
use crate::error::{Error, Result};
use crate::kg::{build_graph, load_graph, metadata_store, save_graph, train_transd, KnowledgeGraph, TrainedGraph};
use crate::metrics::MetricsReport;
use crate::model::{GenreModel, Prediction, Variant};
use crate::taxonomy::{Branch, GenreTaxonomy};
use crate::trainer::{evaluate, Dataset, TrainReport, Trainer};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const PHASE1_CHECKPOINT: &str = "checkpoint.phase1.bin";
pub const REPORT: &str = "report.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const GRAPH: &str = "graph.bin";
pub const GRAPH_SUMMARY: &str = "graph.json";
pub const GRAPH_CURVE: &str = "graph_curve.csv";

pub const STORE_NAMES: [&str; 4] = [VISUAL, BLURB, COVER_TEXT, METADATA];

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

pub fn output(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.output.join(name)
}

pub fn load_taxonomy(cfg: &RunConfig) -> Result<GenreTaxonomy> {
    match &cfg.paths.taxonomy {
        Some(p) => GenreTaxonomy::load(p),
        None => Ok(GenreTaxonomy::default_books()),
    }
}

/// Generate the synthetic corpus and write taxonomy, manifest, stores and
/// split where the config points.
pub fn gen_synth(cfg: &RunConfig) -> Result<SynthDataset> {
    let ds = generate(&cfg.synth, cfg.seed)?;
    let p = &cfg.paths;
    if let Some(t) = &p.taxonomy {
        write(t, ds.taxonomy.to_json())?;
    }
    write(&p.manifest, [])?;
    write_manifest(&p.manifest, &ds.records)?;
    std::fs::create_dir_all(&p.stores).map_err(|e| Error::io(&p.stores, e))?;
    for name in [VISUAL, BLURB, COVER_TEXT] {
        ds.stores.get(name).expect("generated").write(p.stores.join(name))?;
    }
    write(&p.split, [])?;
    ds.split.save(&p.split)?;
    Ok(ds)
}

/// Everything a run reads from disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub taxonomy: GenreTaxonomy,
    pub records: Vec<BookRecord>,
    pub stores: StoreSet,
    pub split: DatasetSplit,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.paths.require(&["manifest", "stores", "split", "taxonomy"])?;
        let taxonomy = load_taxonomy(cfg)?;
        let records = read_manifest(&cfg.paths.manifest, &taxonomy)?;
        let stores = StoreSet::open_dir(&cfg.paths.stores, &STORE_NAMES)?;
        stores.check_refs(&records)?;
        let split = DatasetSplit::load(&cfg.paths.split)?;
        Ok(Corpus { taxonomy, records, stores, split })
    }

    pub fn parts(&self) -> Result<[Vec<BookRecord>; 3]> {
        partition(&self.records, &self.split)
    }

    /// Check that store widths agree with the model config.
    pub fn check_dims(&self, cfg: &RunConfig) -> Result<()> {
        let m = &cfg.model;
        for (name, want) in [(VISUAL, m.visual_dim), (BLURB, m.blurb_dim), (COVER_TEXT, m.cover_text_dim), (METADATA, m.metadata_dim)] {
            if let Some(s) = self.stores.get(name) {
                if s.dim() != want {
                    return Err(Error::Config(format!("store `{name}` has width {} but the model expects {want}", s.dim())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryRunReport {
    pub records: usize,
    pub stores: Vec<(String, usize, usize)>,
    pub split: [usize; 3],
    pub taxonomy_hash: String,
}

/// Open and validate every input without running a model.
pub fn dry_run(cfg: &RunConfig) -> Result<DryRunReport> {
    let c = Corpus::load(cfg)?;
    c.check_dims(cfg)?;
    let parts = c.parts()?;
    Ok(DryRunReport {
        records: c.records.len(),
        stores: c.stores.names().map(|n| {
            let s = c.stores.get(n).expect("listed");
            (n.to_string(), s.rows(), s.dim())
        }).collect(),
        split: [parts[0].len(), parts[1].len(), parts[2].len()],
        taxonomy_hash: c.taxonomy.hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub entities: usize,
    pub triplets: usize,
    pub per_relation: Vec<(String, usize)>,
}

/// Build the metadata graph from the training split.
pub fn kg_build(cfg: &RunConfig, corpus: &Corpus) -> Result<(KnowledgeGraph, GraphSummary)> {
    let [train, _, _] = corpus.parts()?;
    let g = build_graph(&train, &corpus.taxonomy)?;
    let per_relation = crate::kg::Relation::ALL
        .iter()
        .map(|r| (serde_json::to_value(r).expect("serialises").as_str().unwrap_or_default().to_string(), g.triplets().iter().filter(|t| t.relation == *r).count()))
        .collect();
    let summary = GraphSummary { entities: g.entities().len(), triplets: g.triplets().len(), per_relation };
    write_json(&output(cfg, GRAPH_SUMMARY), &summary)?;
    Ok((g, summary))
}

/// Embed the graph and write the metadata store next to the others.
pub fn kg_train(cfg: &RunConfig, corpus: &mut Corpus) -> Result<TrainedGraph> {
    let (g, _) = kg_build(cfg, corpus)?;
    let trained = train_transd(&g, &cfg.graph.hyper(cfg.seed))?;
    save_graph(output(cfg, GRAPH), &g, &trained.embeddings)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in trained.curve.iter().enumerate() {
        writeln!(csv, "{i},{l}").expect("string write");
    }
    write(&output(cfg, GRAPH_CURVE), csv)?;
    let store = metadata_store(&corpus.records, &g, &trained.embeddings, cfg.graph.pooling)?;
    store.write(cfg.paths.stores.join(METADATA))?;
    corpus.stores.insert(store);
    Ok(trained)
}

/// Reload saved graph embeddings, e.g. to featurise new records.
pub fn load_metadata_graph(cfg: &RunConfig) -> Result<(KnowledgeGraph, crate::kg::TransD)> {
    load_graph(output(cfg, GRAPH))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub train: TrainReport,
    pub test: Option<MetricsReport>,
}

pub struct TrainOutcome {
    pub model: GenreModel,
    pub report: RunReport,
}

/// Train the configured variant and evaluate it on the test split. Writes
/// checkpoints, report, curves and test metrics.
pub fn run_training(cfg: &RunConfig, corpus: &Corpus, phase: Phase) -> Result<TrainOutcome> {
    corpus.check_dims(cfg)?;
    if corpus.stores.get(METADATA).is_none() {
        log::warn!("no `{METADATA}` store in {}; metadata inputs will be zero (run kg-train first)", cfg.paths.stores.display());
    }
    let [train, val, test] = corpus.parts()?;
    std::fs::create_dir_all(&cfg.paths.output).map_err(|e| Error::io(&cfg.paths.output, e))?;
    let mut model = match phase {
        Phase::Two => GenreModel::load(output(cfg, PHASE1_CHECKPOINT), Some(&corpus.taxonomy))?.0,
        _ => GenreModel::new(cfg.model.clone(), corpus.taxonomy.clone(), cfg.variant, cfg.seed)?,
    };
    let train_data = Dataset::new(&train, &corpus.stores, &model)?;
    let val_data = if val.is_empty() { None } else { Some(Dataset::new(&val, &corpus.stores, &model)?) };
    let mut trainer = Trainer::new(&cfg.train, &model, &train_data, val_data.as_ref())?;
    if phase != Phase::Two {
        trainer.phase1(&mut model, &train, &corpus.stores)?;
        model.save(output(cfg, PHASE1_CHECKPOINT), &cfg.train.adam)?;
    }
    let final_name = if phase == Phase::One {
        PHASE1_CHECKPOINT
    } else {
        trainer.phase2(&mut model)?;
        model.save(output(cfg, CHECKPOINT), &cfg.train.adam)?;
        CHECKPOINT
    };
    let mut train_report = trainer.finish();
    train_report.checkpoint = Some(final_name.to_string());
    let test = if test.is_empty() {
        None
    } else {
        let data = Dataset::new(&test, &corpus.stores, &model)?;
        Some(evaluate(&model, &data, cfg.train.parallelism)?.0)
    };
    let report = RunReport { variant: cfg.variant, train: train_report, test };
    write_json(&output(cfg, REPORT), &report)?;
    write(&output(cfg, CURVES_CSV), curves_csv(&report.train))?;
    if let Some(t) = &report.test {
        write(&output(cfg, METRICS_CSV), metrics_csv(t))?;
    }
    Ok(TrainOutcome { model, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

pub fn load_model(cfg: &RunConfig, corpus: &Corpus, checkpoint: Option<&Path>) -> Result<GenreModel> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| output(cfg, CHECKPOINT));
    let (mut model, _) = GenreModel::load(path, Some(&corpus.taxonomy))?;
    model.set_threshold(cfg.model.threshold);
    Ok(model)
}

/// Metrics for one split of a trained model; writes `evaluation.<split>.json`
/// and `metrics.csv`.
pub fn run_evaluation(cfg: &RunConfig, corpus: &Corpus, model: &GenreModel, split: SplitName) -> Result<MetricsReport> {
    let records = &corpus.parts()?[split.index()];
    let data = Dataset::new(records, &corpus.stores, model)?;
    let (report, _) = evaluate(model, &data, cfg.train.parallelism)?;
    let name = format!("evaluation.{}.json", serde_json::to_value(split)?.as_str().unwrap_or_default());
    write_json(&output(cfg, &name), &report)?;
    write(&output(cfg, METRICS_CSV), metrics_csv(&report))?;
    Ok(report)
}

/// Predictions for the given records, in order; writes `predictions.jsonl`.
pub fn run_prediction(cfg: &RunConfig, stores: &StoreSet, model: &GenreModel, records: &[BookRecord]) -> Result<Vec<Prediction>> {
    let refs: Vec<&BookRecord> = records.iter().collect();
    let inputs = crate::model::Inputs::from_records(&refs, stores, model.config())?;
    let raw = crate::trainer::predict_dataset(model, &inputs, cfg.train.parallelism)?;
    let preds: Vec<Prediction> = records.iter().zip(&raw).map(|(r, p)| model.to_prediction(&r.id, p)).collect();
    let mut out = String::new();
    for p in &preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    write(&output(cfg, PREDICTIONS), out)?;
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub test: MetricsReport,
}

/// Train and test each variant with the same seed and data; writes
/// `ablation.csv` and per-variant reports under `ablation/<variant>/`.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let mut rows = Vec::new();
    for &v in variants {
        let mut c = cfg.clone();
        c.variant = v;
        c.train.variant = v;
        c.paths.output = cfg.paths.output.join("ablation").join(v.name());
        let out = run_training(&c, corpus, Phase::Both)?;
        let test = out.report.test.ok_or_else(|| Error::Evaluation("ablation needs a non-empty test split".into()))?;
        rows.push(AblationRow { variant: v, test });
    }
    write(&output(cfg, ABLATION_CSV), ablation_csv(&rows))?;
    Ok(rows)
}

/// Long-format metrics: `scope,metric,value`.
pub fn metrics_csv(m: &MetricsReport) -> String {
    let mut s = String::from("scope,metric,value\n");
    let mut row = |scope: &str, metric: &str, v: f64| writeln!(s, "{scope},{metric},{v}").expect("string write");
    row("level1", "accuracy", m.level1.accuracy);
    row("level1", "f1", m.level1.f1);
    for b in Branch::ALL {
        let bm = m.branch(b);
        let scope = b.name();
        for (kind, suite) in [("f1", &bm.f1), ("ba", &bm.ba)] {
            row(scope, &format!("{kind}_micro"), suite.micro);
            row(scope, &format!("{kind}_macro"), suite.macro_);
            row(scope, &format!("{kind}_weighted"), suite.weighted);
            row(scope, &format!("{kind}_samples"), suite.samples);
        }
        row(scope, "hamming_loss", bm.hamming_loss);
        for g in &bm.genres {
            let scope = format!("{}/{}", b.name(), g.genre.replace(',', " "));
            row(&scope, "support", g.support as f64);
            row(&scope, "precision", g.precision);
            row(&scope, "recall", g.recall);
            row(&scope, "f1", g.f1);
            row(&scope, "balanced_accuracy", g.balanced_accuracy);
        }
    }
    s
}

/// `stage,epoch,loss`; empty loss for epochs with nothing to train on.
pub fn curves_csv(r: &TrainReport) -> String {
    let mut s = String::from("stage,epoch,loss\n");
    for (stage, curve) in &r.curves {
        for (i, l) in curve.iter().enumerate() {
            match l {
                Some(l) => writeln!(s, "{stage},{i},{l}"),
                None => writeln!(s, "{stage},{i},"),
            }
            .expect("string write");
        }
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,level1_accuracy,level1_f1");
    for b in Branch::ALL {
        for col in ["f1_micro", "f1_macro", "f1_weighted", "f1_samples", "ba_micro", "ba_macro", "ba_weighted", "ba_samples", "hamming_loss"] {
            write!(s, ",{}_{col}", b.name()).expect("string write");
        }
    }
    s.push('\n');
    for r in rows {
        let t = &r.test;
        write!(s, "{},{},{}", r.variant, t.level1.accuracy, t.level1.f1).expect("string write");
        for b in Branch::ALL {
            let m = t.branch(b);
            for v in [m.f1.micro, m.f1.macro_, m.f1.weighted, m.f1.samples, m.ba.micro, m.ba.macro_, m.ba.weighted, m.ba.samples, m.hamming_loss] {
                write!(s, ",{v}").expect("string write");
            }
        }
        s.push('\n');
    }
    s
}

pub fn gradcheck_csv(rows: &[crate::gradsuite::GradRow], tol: f64) -> String {
    let mut s = String::from("target,loss,instances,checked,skipped,max_rel_error,pass\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{:e},{}", r.target, r.loss, r.instances, r.checked, r.skipped, r.max_rel_error, r.passes(tol)).expect("string write");
    }
    s
}

pub fn write_gradcheck(cfg: &RunConfig, rows: &[crate::gradsuite::GradRow]) -> Result<()> {
    write(&output(cfg, GRADCHECK_CSV), gradcheck_csv(rows, cfg.gradcheck.tolerance))
}
