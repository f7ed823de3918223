//! Synthetic book corpus with known generating labels.
//!
//! Every genre owns one random prototype per modality. A book's modality
//! embedding is the mean of its genres' prototypes plus Gaussian noise; with
//! the configured corruption rate a modality is replaced by pure noise and
//! the matching challenged flag is set. Authors favour one or two genres and
//! a home publisher, which gives the metadata graph something to learn.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    split_dataset, write_manifest, BookRecord, DatasetSplit, EmbeddingRef, EmbeddingStore, QualityFlags, StoreSet,
    BLURB, COVER_TEXT, VISUAL,
};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::taxonomy::{Branch, GenreTaxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub visual: usize,
    pub blurb: usize,
    pub cover_text: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRates {
    pub visual: f64,
    pub blurb: f64,
    pub cover_text: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub m1: usize,
    pub m2: usize,
    pub dims: ModalityDims,
    pub noise_sigma: f64,
    pub corruption: CorruptionRates,
    #[serde(default = "default_max_labels")]
    pub max_labels: usize,
    #[serde(default = "default_fiction_fraction")]
    pub fiction_fraction: f64,
    #[serde(default = "default_ratio")]
    pub split_ratio: [u32; 3],
}

fn default_max_labels() -> usize {
    3
}
fn default_fiction_fraction() -> f64 {
    0.5
}
fn default_ratio() -> [u32; 3] {
    [8, 1, 1]
}

impl SynthSpec {
    /// The corpus used by the end-to-end checks: 2000 books, 8 + 8 genres,
    /// 32-dim modalities, sigma 0.1 and 15% corruption per modality.
    pub fn standard() -> Self {
        SynthSpec {
            n_samples: 2000,
            m1: 8,
            m2: 8,
            dims: ModalityDims { visual: 32, blurb: 32, cover_text: 32 },
            noise_sigma: 0.1,
            corruption: CorruptionRates { visual: 0.15, blurb: 0.15, cover_text: 0.15 },
            max_labels: 3,
            fiction_fraction: 0.5,
            split_ratio: [8, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth.{m}")));
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if self.m1 == 0 || self.m2 == 0 {
            return bad("m1 and synth.m2 must be >= 1");
        }
        for (name, d) in [("visual", self.dims.visual), ("blurb", self.dims.blurb), ("cover_text", self.dims.cover_text)] {
            if d == 0 {
                return bad(&format!("dims.{name} must be >= 1"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        for (name, r) in [
            ("visual", self.corruption.visual),
            ("blurb", self.corruption.blurb),
            ("cover_text", self.corruption.cover_text),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("corruption.{name} must be in [0, 1]"));
            }
        }
        if self.max_labels == 0 {
            return bad("max_labels must be positive");
        }
        if !(0.0..=1.0).contains(&self.fiction_fraction) {
            return bad("fiction_fraction must be in [0, 1]");
        }
        Ok(())
    }
}

/// Everything `gen_synthetic` writes, kept in memory as well.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub taxonomy: GenreTaxonomy,
    pub records: Vec<BookRecord>,
    pub stores: StoreSet,
    pub split: DatasetSplit,
}

struct Author {
    name: String,
    branch: Branch,
    favourites: Vec<usize>,
    publisher: usize,
}

fn gaussian(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Generate the corpus in memory. Deterministic per seed.
pub fn generate(spec: &SynthSpec, seed_value: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let taxonomy = GenreTaxonomy::synthetic(spec.m1, spec.m2)?;
    let mut rng = seed::substream(seed_value, "synth");
    let dims = [spec.dims.visual, spec.dims.blurb, spec.dims.cover_text];
    let rates = [spec.corruption.visual, spec.corruption.blurb, spec.corruption.cover_text];

    // prototypes[modality][branch][genre]
    let prototypes: Vec<[Vec<Vec<f64>>; 2]> = dims
        .iter()
        .map(|&d| {
            [spec.m1, spec.m2].map(|m| (0..m).map(|_| gaussian(&mut rng, d, 1.0)).collect())
        })
        .collect();

    let n_publishers = (spec.n_samples / 40).max(4);
    let publisher_branch: Vec<Branch> = (0..n_publishers)
        .map(|i| if i % 2 == 0 { Branch::Fiction } else { Branch::Nonfiction })
        .collect();
    let n_authors = (spec.n_samples / 8).max(4);
    let authors: Vec<Author> = (0..n_authors)
        .map(|i| {
            let branch = if rng.random_bool(spec.fiction_fraction) { Branch::Fiction } else { Branch::Nonfiction };
            let m = taxonomy.len(branch);
            let mut favourites = vec![rng.random_range(0..m)];
            if m > 1 && rng.random_bool(0.5) {
                let mut g = rng.random_range(0..m);
                while g == favourites[0] {
                    g = rng.random_range(0..m);
                }
                favourites.push(g);
            }
            let candidates: Vec<usize> = (0..n_publishers).filter(|&p| publisher_branch[p] == branch).collect();
            let publisher = *candidates.choose(&mut rng).expect("publishers cover both branches");
            Author { name: format!("author-{i:04}"), branch, favourites, publisher }
        })
        .collect();

    let mut records = Vec::with_capacity(spec.n_samples);
    let mut data: [Vec<f32>; 3] = Default::default();
    let mut ids = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let author = &authors[rng.random_range(0..n_authors)];
        let branch = author.branch;
        let m = taxonomy.len(branch);
        let k = rng.random_range(1..=spec.max_labels.min(m));
        let mut genres: Vec<usize> = Vec::with_capacity(k);
        for &f in &author.favourites {
            if genres.len() < k && rng.random_bool(0.8) {
                genres.push(f);
            }
        }
        let mut pool: Vec<usize> = (0..m).filter(|g| !genres.contains(g)).collect();
        pool.shuffle(&mut rng);
        genres.extend(pool.into_iter().take(k - genres.len()));
        genres.sort_unstable();

        let publisher = if rng.random_bool(0.9) { author.publisher } else { rng.random_range(0..n_publishers) };

        let mut corrupted = [false; 3];
        for (mo, &d) in dims.iter().enumerate() {
            corrupted[mo] = rng.random_bool(rates[mo]);
            let v: Vec<f64> = if corrupted[mo] {
                gaussian(&mut rng, d, 1.0)
            } else {
                let mut v = vec![0.0; d];
                for &g in &genres {
                    for (x, p) in v.iter_mut().zip(&prototypes[mo][branch.index()][g]) {
                        *x += p;
                    }
                }
                let noise = gaussian(&mut rng, d, spec.noise_sigma);
                v.iter().zip(noise).map(|(x, e)| x / k as f64 + e).collect()
            };
            data[mo].extend(v.iter().map(|&x| x as f32));
        }

        let id = format!("syn-{i:06}");
        ids.push(id.clone());
        let mk_ref = |store: &str| Some(EmbeddingRef { store: store.to_string(), row: i });
        records.push(BookRecord {
            id,
            title: format!("Synthetic book {i}"),
            authors: vec![author.name.clone()],
            publishers: vec![format!("publisher-{publisher:03}")],
            level1: branch,
            genres: genres.iter().map(|&g| taxonomy.genres(branch)[g].id).collect(),
            visual_ref: mk_ref(VISUAL),
            blurb_ref: mk_ref(BLURB),
            cover_text_ref: mk_ref(COVER_TEXT),
            flags: QualityFlags { visually_challenged: corrupted[0], textually_challenged: corrupted[1] },
        });
    }

    let mut stores = StoreSet::new();
    let [dv, db, dc] = data;
    for (name, d, values) in [(VISUAL, dims[0], dv), (BLURB, dims[1], db), (COVER_TEXT, dims[2], dc)] {
        stores.insert(EmbeddingStore::new(name, d, ids.clone(), values)?);
    }
    let split = split_dataset(&records, &taxonomy, spec.split_ratio, seed_value)?;
    Ok(SynthDataset { taxonomy, records, stores, split })
}

/// Generate the corpus and write taxonomy, manifest, stores and split into `out_dir`.
pub fn gen_synthetic(spec: &SynthSpec, seed_value: u64, out_dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ds = generate(spec, seed_value)?;
    ds.taxonomy.save(out_dir.join("taxonomy.json"))?;
    write_manifest(out_dir.join("manifest.jsonl"), &ds.records)?;
    for name in [VISUAL, BLURB, COVER_TEXT] {
        ds.stores.get(name).expect("generated").write(out_dir.join(name))?;
    }
    ds.split.save(out_dir.join("split.json"))?;
    Ok(ds)
}
