//! Dataset manifests, embedding stores, splitting, subset filtering and the
//! synthetic data generator.

mod manifest;
mod split;
mod store;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

pub use manifest::{read_manifest, write_manifest, BookRecord, EmbeddingRef, QualityFlags};
pub use split::{split_dataset, DatasetSplit, MIN_PER_BRANCH};
pub use store::{decode_block, encode_block, EmbeddingStore, EMB1_MAGIC, HEADER_LEN};
pub use synth::{gen_synthetic, SynthSpec};

use crate::error::{Error, Result};

/// Conventional store names.
pub const VISUAL: &str = "visual";
pub const BLURB: &str = "blurb";
pub const COVER_TEXT: &str = "cover_text";
pub const METADATA: &str = "metadata";

/// Embedding stores addressed by name.
#[derive(Debug, Clone, Default)]
pub struct StoreSet {
    stores: BTreeMap<String, EmbeddingStore>,
}

impl StoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, store: EmbeddingStore) {
        self.stores.insert(store.name.clone(), store);
    }

    pub fn get(&self, name: &str) -> Option<&EmbeddingStore> {
        self.stores.get(name)
    }

    /// Open every `<dir>/<name>.f32` that exists for the given names.
    pub fn open_dir(dir: impl AsRef<Path>, names: &[&str]) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = StoreSet::new();
        for name in names {
            let prefix = dir.join(name);
            if prefix.with_extension("f32").exists() {
                let mut s = EmbeddingStore::open(&prefix)?;
                s.name = name.to_string();
                set.insert(s);
            }
        }
        Ok(set)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.stores.keys().map(String::as_str)
    }

    pub fn resolvable(&self, r: Option<&EmbeddingRef>) -> bool {
        r.is_some_and(|r| self.get(&r.store).is_some_and(|s| r.row < s.rows()))
    }

    /// Resolve a reference to an f64 vector. `None` for a null reference.
    pub fn resolve(&self, r: Option<&EmbeddingRef>) -> Result<Option<Vec<f64>>> {
        let Some(r) = r else { return Ok(None) };
        let store = self
            .get(&r.store)
            .ok_or_else(|| Error::Lookup(format!("no embedding store named `{}`", r.store)))?;
        store
            .row_f64(r.row)
            .map(Some)
            .ok_or_else(|| Error::Lookup(format!("row {} out of range for store `{}` ({} rows)", r.row, r.store, store.rows())))
    }

    /// Check that every non-null reference in `records` is in range.
    pub fn check_refs(&self, records: &[BookRecord]) -> Result<()> {
        for rec in records {
            for r in [&rec.visual_ref, &rec.blurb_ref, &rec.cover_text_ref].into_iter().flatten() {
                self.resolve(Some(r))
                    .map_err(|e| Error::Validation(format!("record {}: {e}", rec.id)))?;
            }
        }
        Ok(())
    }
}

/// Phase-1 training subsets, as indices into the train records.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingSubsets {
    /// Records with both visual and blurb embeddings resolvable.
    pub reliable: Vec<usize>,
    /// `reliable` minus visually challenged.
    pub visual: Vec<usize>,
    /// `reliable` minus textually challenged.
    pub textual: Vec<usize>,
    /// `visual` ∩ `textual`.
    pub multimodal: Vec<usize>,
}

pub fn filter_subsets(train: &[BookRecord], stores: &StoreSet) -> TrainingSubsets {
    let mut out = TrainingSubsets::default();
    for (i, r) in train.iter().enumerate() {
        if !(stores.resolvable(r.visual_ref.as_ref()) && stores.resolvable(r.blurb_ref.as_ref())) {
            continue;
        }
        out.reliable.push(i);
        let v = r.flags.visually_challenged;
        let t = r.flags.textually_challenged;
        if !v {
            out.visual.push(i);
        }
        if !t {
            out.textual.push(i);
        }
        if !v && !t {
            out.multimodal.push(i);
        }
    }
    if out.multimodal.is_empty() {
        log::warn!("multi-modal training subset is empty ({} reliable records)", out.reliable.len());
    }
    out
}

/// Split records by id into (train, val, test) record lists.
pub fn partition(records: &[BookRecord], split: &DatasetSplit) -> Result<[Vec<BookRecord>; 3]> {
    let by_id: std::collections::HashMap<&str, &BookRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let take = |ids: &[String]| -> Result<Vec<BookRecord>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Lookup(format!("split references unknown record `{id}`")))
            })
            .collect()
    };
    Ok([take(&split.train)?, take(&split.val)?, take(&split.test)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Branch;

    fn rec(i: usize, v: bool, t: bool) -> BookRecord {
        BookRecord {
            id: format!("b{i}"),
            title: String::new(),
            authors: vec![],
            publishers: vec![],
            level1: Branch::Fiction,
            genres: vec![1],
            visual_ref: Some(EmbeddingRef { store: VISUAL.into(), row: i }),
            blurb_ref: Some(EmbeddingRef { store: BLURB.into(), row: i }),
            cover_text_ref: None,
            flags: QualityFlags { visually_challenged: v, textually_challenged: t },
        }
    }

    fn stores(n: usize) -> StoreSet {
        let mut s = StoreSet::new();
        for name in [VISUAL, BLURB] {
            let ids = (0..n).map(|i| format!("b{i}")).collect();
            s.insert(EmbeddingStore::new(name, 2, ids, vec![0.0; 2 * n]).unwrap());
        }
        s
    }

    #[test]
    fn subset_enumeration() {
        let recs = vec![rec(0, false, false), rec(1, true, false), rec(2, false, true), rec(3, true, true)];
        let s = filter_subsets(&recs, &stores(4));
        assert_eq!(s.reliable.len(), 4);
        assert_eq!(s.visual, vec![0, 2]);
        assert_eq!(s.textual, vec![0, 1]);
        assert_eq!(s.multimodal, vec![0]);
    }

    #[test]
    fn no_flags_and_all_flags() {
        let recs: Vec<_> = (0..5).map(|i| rec(i, false, false)).collect();
        let s = filter_subsets(&recs, &stores(5));
        assert_eq!(s.reliable, s.visual);
        assert_eq!(s.reliable, s.textual);
        assert_eq!(s.reliable, s.multimodal);

        let recs: Vec<_> = (0..5).map(|i| rec(i, true, true)).collect();
        let s = filter_subsets(&recs, &stores(5));
        assert!(s.multimodal.is_empty());
        assert!(s.visual.is_empty() && s.textual.is_empty());
    }

    #[test]
    fn unresolvable_refs_leave_reliable_set() {
        let mut recs = vec![rec(0, false, false), rec(1, false, false)];
        recs[1].blurb_ref = None;
        let s = filter_subsets(&recs, &stores(1));
        assert_eq!(s.reliable, vec![0]);
    }

    #[test]
    fn subsets_nest() {
        use rand::Rng;
        let mut rng = crate::seed::rng(9);
        for _ in 0..50 {
            let recs: Vec<_> = (0..30).map(|i| rec(i, rng.random_bool(0.3), rng.random_bool(0.3))).collect();
            let s = filter_subsets(&recs, &stores(30));
            let sub = |a: &[usize], b: &[usize]| a.iter().all(|x| b.contains(x));
            assert!(sub(&s.multimodal, &s.visual) && sub(&s.visual, &s.reliable));
            assert!(sub(&s.multimodal, &s.textual) && sub(&s.textual, &s.reliable));
        }
    }
}
