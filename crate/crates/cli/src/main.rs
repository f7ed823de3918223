use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use genre_core::config::RunConfig;
use genre_core::dataio::{read_manifest, METADATA};
use genre_core::gradsuite::run_suite;
use genre_core::kg::metadata_store;
use genre_core::model::Variant;
use genre_core::pipeline::{self, Corpus, Phase, SplitName};
use genre_core::taxonomy::Branch;

#[derive(Parser)]
#[command(name = "genre", version, about = "Hierarchical multi-label book-genre classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults to the built-in synthetic setup.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.batch=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `paths.output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus: taxonomy, manifest, stores and split.
    GenSynth(Common),
    /// Build the metadata graph from the training split and summarise it.
    KgBuild(Common),
    /// Embed the metadata graph and write the `metadata` store.
    KgTrain(Common),
    /// Two-phase training; evaluates on the test split when done.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
    },
    /// Metrics for one split of a trained model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoint to load (default: `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only open and validate manifest, stores, split and taxonomy.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write predictions as JSON lines.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        /// Predict every record of this manifest instead of a split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every objective; fails if any error
    /// reaches the tolerance.
    Gradcheck(Common),
    /// Train and test several variants with the same seed and data.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: UMv, UMd, MMvd, MMvdc, MMvdm, psiM, full.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        variants: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p, &overrides)?,
        None => {
            let mut v = serde_json::to_value(RunConfig::synthetic())?;
            for o in &overrides {
                genre_core::config::apply_override(&mut v, o)?;
            }
            let cfg = RunConfig::from_json(&v.to_string())?;
            cfg.validate()?;
            cfg
        }
    };
    if let Some(out) = &c.out {
        cfg.paths.output = out.clone();
    }
    Ok(cfg)
}

fn print_metrics(r: &genre_core::metrics::MetricsReport) {
    println!("level1    accuracy {:6.2}  f1 {:6.2}", r.level1.accuracy, r.level1.f1);
    for b in Branch::ALL {
        let m = r.branch(b);
        println!(
            "{:<10}macro-f1 {:6.2}  micro-f1 {:6.2}  sample-f1 {:6.2}  macro-ba {:6.2}  hamming {:.4}",
            b.name(),
            m.f1.macro_,
            m.f1.micro,
            m.f1.samples,
            m.ba.macro_,
            m.hamming_loss
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(c) => {
            let cfg = load_config(&c)?;
            let ds = pipeline::gen_synth(&cfg)?;
            println!("wrote {} records to {}", ds.records.len(), cfg.paths.manifest.display());
        }
        Command::KgBuild(c) => {
            let cfg = load_config(&c)?;
            let (_, s) = pipeline::kg_build(&cfg, &Corpus::load(&cfg)?)?;
            println!("{} entities, {} triplets", s.entities, s.triplets);
        }
        Command::KgTrain(c) => {
            let cfg = load_config(&c)?;
            let mut corpus = Corpus::load(&cfg)?;
            let t = pipeline::kg_train(&cfg, &mut corpus)?;
            println!(
                "margin loss {:.4} -> {:.4} over {} epochs",
                t.curve.first().copied().unwrap_or(0.0),
                t.curve.last().copied().unwrap_or(0.0),
                t.curve.len()
            );
        }
        Command::Train { common, phase } => {
            let cfg = load_config(&common)?;
            let phase = match phase {
                PhaseArg::One => Phase::One,
                PhaseArg::Two => Phase::Two,
                PhaseArg::Both => Phase::Both,
            };
            let out = pipeline::run_training(&cfg, &Corpus::load(&cfg)?, phase)?;
            for s in &out.report.train.skipped_stages {
                println!("skipped stage: {s}");
            }
            if let Some(t) = &out.report.test {
                print_metrics(t);
            }
            println!("outputs in {}", cfg.paths.output.display());
        }
        Command::Evaluate { common, split, checkpoint, dry_run } => {
            let cfg = load_config(&common)?;
            if dry_run {
                let r = pipeline::dry_run(&cfg)?;
                println!("{}", serde_json::to_string_pretty(&r)?);
                return Ok(());
            }
            let corpus = Corpus::load(&cfg)?;
            let model = pipeline::load_model(&cfg, &corpus, checkpoint.as_deref())?;
            let r = pipeline::run_evaluation(&cfg, &corpus, &model, SplitName::parse(&split)?)?;
            print_metrics(&r);
        }
        Command::Predict { common, split, manifest, checkpoint } => {
            let cfg = load_config(&common)?;
            let mut corpus = Corpus::load(&cfg)?;
            let model = pipeline::load_model(&cfg, &corpus, checkpoint.as_deref())?;
            let records = match manifest {
                Some(m) => read_manifest(&m, &corpus.taxonomy)?,
                None => corpus.parts()?[split_index(&split)?].clone(),
            };
            // books unseen by the metadata store get features from the saved graph
            let missing = corpus.stores.get(METADATA).is_none_or(|s| records.iter().any(|r| s.lookup(&r.id).is_none()));
            if missing && pipeline::output(&cfg, pipeline::GRAPH).exists() {
                let (g, emb) = pipeline::load_metadata_graph(&cfg)?;
                corpus.stores.insert(metadata_store(&records, &g, &emb, cfg.graph.pooling)?);
            }
            let preds = pipeline::run_prediction(&cfg, &corpus.stores, &model, &records)?;
            println!("wrote {} predictions to {}", preds.len(), pipeline::output(&cfg, pipeline::PREDICTIONS).display());
        }
        Command::Gradcheck(c) => {
            let cfg = load_config(&c)?;
            let rows = run_suite(&cfg.gradcheck, cfg.train.parallelism)?;
            pipeline::write_gradcheck(&cfg, &rows)?;
            let tol = cfg.gradcheck.tolerance;
            println!("{:<22}{:<16}{:>9}{:>9}{:>14}", "target", "loss", "checked", "skipped", "max rel err");
            for r in &rows {
                println!(
                    "{:<22}{:<16}{:>9}{:>9}{:>14.3e}{}",
                    r.target,
                    r.loss,
                    r.checked,
                    r.skipped,
                    r.max_rel_error,
                    if r.passes(tol) { "" } else { "  FAIL" }
                );
            }
            let failed = rows.iter().filter(|r| !r.passes(tol)).count();
            if failed > 0 {
                bail!("{failed} gradient checks at or above {tol:e}");
            }
        }
        Command::Ablate { common, variants } => {
            let cfg = load_config(&common)?;
            let variants = variants.iter().map(|v| Variant::parse(v.trim())).collect::<genre_core::Result<Vec<_>>>()?;
            let rows = pipeline::run_ablation(&cfg, &Corpus::load(&cfg)?, &variants)?;
            println!("{:<8}{:>10}{:>14}{:>14}", "variant", "L1 acc", "fic macro-f1", "non macro-f1");
            for r in &rows {
                println!("{:<8}{:>10.2}{:>14.2}{:>14.2}", r.variant.name(), r.test.level1.accuracy, r.test.fiction.f1.macro_, r.test.nonfiction.f1.macro_);
            }
        }
    }
    Ok(())
}

fn split_index(s: &str) -> Result<usize> {
    Ok(match SplitName::parse(s)? {
        SplitName::Train => 0,
        SplitName::Val => 1,
        SplitName::Test => 2,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already carry their cause in the message
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
