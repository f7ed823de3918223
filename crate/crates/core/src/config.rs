//! Run configuration: one JSON file for a whole workflow, with dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthSpec;
use crate::error::{Error, Result};
use crate::gradsuite::SuiteConfig;
use crate::kg::{Pooling, TransDHyper};
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainConfig;

/// File locations. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    /// Directory holding `<name>.f32` / `<name>.ids` stores.
    pub stores: PathBuf,
    /// `None` selects the built-in 29 + 29 book taxonomy.
    pub taxonomy: Option<PathBuf>,
    pub split: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: "data/manifest.jsonl".into(),
            stores: "data".into(),
            taxonomy: Some("data/taxonomy.json".into()),
            split: "data/split.json".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub pooling: Pooling,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let h = TransDHyper::default();
        GraphConfig {
            entity_dim: h.entity_dim,
            relation_dim: h.relation_dim,
            margin: h.margin,
            lr: h.lr,
            epochs: h.epochs,
            batch: h.batch,
            pooling: Pooling::default(),
        }
    }
}

impl GraphConfig {
    pub fn hyper(&self, seed: u64) -> TransDHyper {
        TransDHyper {
            entity_dim: self.entity_dim,
            relation_dim: self.relation_dim,
            margin: self.margin,
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every component draws from named substreams of it.
    pub seed: u64,
    pub variant: Variant,
    pub paths: PathsConfig,
    pub synth: SynthSpec,
    pub graph: GraphConfig,
    /// `metadata_dim` is taken from `graph.entity_dim`.
    pub model: ModelConfig,
    /// `seed` and `variant` are taken from the top level.
    pub train: TrainConfig,
    pub gradcheck: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Full,
            paths: PathsConfig::default(),
            synth: SynthSpec::standard(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gradcheck: SuiteConfig::default(),
        }
    }
}

impl RunConfig {
    /// The configuration used for the synthetic end-to-end run: width 64,
    /// 32-dim modalities and a 32/16 graph embedding.
    pub fn synthetic() -> Self {
        let mut c = RunConfig { seed: 42, ..Default::default() };
        c.graph = GraphConfig { entity_dim: 32, relation_dim: 16, epochs: 50, batch: 32, ..Default::default() };
        c.model = ModelConfig { width: 64, visual_dim: 32, blurb_dim: 32, cover_text_dim: 32, ..Default::default() };
        c.normalise();
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?)
    }

    fn from_value(v: serde_json::Value) -> Result<Self> {
        let mut c: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.normalise();
        Ok(c)
    }

    /// Load a config file and apply `key=value` overrides. Relative paths
    /// are rebased onto the file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let mut c = Self::from_value(v)?;
        if let Some(base) = path.parent() {
            c.paths.rebase(base);
        }
        c.validate()?;
        Ok(c)
    }

    fn normalise(&mut self) {
        self.model.metadata_dim = self.graph.entity_dim;
        self.train.seed = self.seed;
        self.train.variant = self.variant;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.graph.hyper(self.seed).validate()?;
        if !(self.gradcheck.tolerance > 0.0) || self.gradcheck.instances == 0 {
            return Err(Error::Config("gradcheck: tolerance must be > 0 and instances >= 1".into()));
        }
        Ok(())
    }
}

impl PathsConfig {
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.stores);
        fix(&mut self.split);
        fix(&mut self.output);
        if let Some(t) = &mut self.taxonomy {
            fix(t);
        }
    }

    /// Fail with the field name if a required input is missing.
    pub fn require(&self, fields: &[&str]) -> Result<()> {
        for &f in fields {
            let p = match f {
                "manifest" => &self.manifest,
                "stores" => &self.stores,
                "split" => &self.split,
                "taxonomy" => match &self.taxonomy {
                    Some(t) => t,
                    None => continue,
                },
                other => return Err(Error::Config(format!("unknown path field `{other}`"))),
            };
            if !p.exists() {
                return Err(Error::Config(format!("paths.{f}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Set `a.b.c=value` in a JSON tree. The value is parsed as JSON when it can
/// be, otherwise taken as a string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key `{key}` has an empty segment")));
        }
        if !node.is_object() {
            return Err(Error::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))));
        }
        let map = node.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}
