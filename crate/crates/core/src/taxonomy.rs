//! Two-level genre hierarchy and label-vector encoding.
//!
//! Level 1 is the fiction / nonfiction split. Level 2 is a per-branch list of
//! genres; a genre's position in its branch list is its label-vector index.
//! Class ids are carried along for display and manifests but never used as
//! indices (they have gaps per branch).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy_default.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fiction,
    Nonfiction,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Fiction, Branch::Nonfiction];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Fiction => "fiction",
            Branch::Nonfiction => "nonfiction",
        }
    }

    pub fn parse(s: &str) -> Result<Branch> {
        match s {
            "fiction" => Ok(Branch::Fiction),
            "nonfiction" => Ok(Branch::Nonfiction),
            other => Err(Error::Lookup(format!("unknown level-1 branch `{other}`"))),
        }
    }

    /// Internal level-1 indicator: 1 = fiction, 0 = nonfiction.
    pub fn indicator(self) -> f64 {
        match self {
            Branch::Fiction => 1.0,
            Branch::Nonfiction => 0.0,
        }
    }

    pub fn from_indicator(fiction: bool) -> Branch {
        if fiction {
            Branch::Fiction
        } else {
            Branch::Nonfiction
        }
    }

    /// 0 for fiction, 1 for nonfiction; used to index per-branch arrays.
    pub fn index(self) -> usize {
        match self {
            Branch::Fiction => 0,
            Branch::Nonfiction => 1,
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Fiction => Branch::Nonfiction,
            Branch::Nonfiction => Branch::Fiction,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genre {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyDoc {
    fiction: Vec<Genre>,
    nonfiction: Vec<Genre>,
}

#[derive(Debug, Clone)]
struct BranchIndex {
    genres: Vec<Genre>,
    by_name: HashMap<String, usize>,
    by_id: HashMap<u32, usize>,
}

impl BranchIndex {
    fn build(branch: Branch, genres: Vec<Genre>) -> Result<Self> {
        if genres.is_empty() {
            return Err(Error::Schema(format!("{branch} branch lists no genres")));
        }
        let mut by_name = HashMap::with_capacity(genres.len());
        let mut by_id = HashMap::with_capacity(genres.len());
        for (i, g) in genres.iter().enumerate() {
            if g.name.is_empty() {
                return Err(Error::Schema(format!("{branch} genre id {} has an empty name", g.id)));
            }
            if by_id.insert(g.id, i).is_some() {
                return Err(Error::Schema(format!("duplicate class id {} in {branch}", g.id)));
            }
            if by_name.insert(g.name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate genre name `{}` in {branch}", g.name)));
            }
        }
        Ok(BranchIndex { genres, by_name, by_id })
    }
}

/// The genre hierarchy. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GenreTaxonomy {
    branches: [BranchIndex; 2],
}

impl GenreTaxonomy {
    pub fn new(fiction: Vec<Genre>, nonfiction: Vec<Genre>) -> Result<Self> {
        Ok(GenreTaxonomy {
            branches: [
                BranchIndex::build(Branch::Fiction, fiction)?,
                BranchIndex::build(Branch::Nonfiction, nonfiction)?,
            ],
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TaxonomyDoc =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("taxonomy document: {e}")))?;
        Self::new(doc.fiction, doc.nonfiction)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The bundled 29 + 29 book-genre hierarchy.
    pub fn default_books() -> Self {
        Self::from_json(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    /// A synthetic taxonomy with `m1` fiction and `m2` nonfiction genres.
    pub fn synthetic(m1: usize, m2: usize) -> Result<Self> {
        let mk = |prefix: &str, m: usize| {
            (1..=m)
                .map(|i| Genre {
                    id: i as u32,
                    name: format!("{prefix}-{i:02}"),
                })
                .collect::<Vec<_>>()
        };
        Self::new(mk("fiction", m1), mk("nonfiction", m2))
    }

    pub fn to_json(&self) -> String {
        let doc = TaxonomyDoc {
            fiction: self.genres(Branch::Fiction).to_vec(),
            nonfiction: self.genres(Branch::Nonfiction).to_vec(),
        };
        serde_json::to_string_pretty(&doc).expect("taxonomy serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn genres(&self, branch: Branch) -> &[Genre] {
        &self.branches[branch.index()].genres
    }

    pub fn len(&self, branch: Branch) -> usize {
        self.genres(branch).len()
    }

    pub fn index_of_name(&self, branch: Branch, name: &str) -> Option<usize> {
        self.branches[branch.index()].by_name.get(name).copied()
    }

    pub fn index_of_id(&self, branch: Branch, id: u32) -> Option<usize> {
        self.branches[branch.index()].by_id.get(&id).copied()
    }

    pub fn genre(&self, branch: Branch, index: usize) -> Option<&Genre> {
        self.genres(branch).get(index)
    }
}

/// Dense labels for one book.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub branch: Branch,
    pub level2: Vec<bool>,
}

impl LabelVector {
    pub fn level1(&self) -> f64 {
        self.branch.indicator()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.level2.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.level2.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Build from class ids of the record's branch.
    pub fn from_ids(branch: Branch, ids: &[u32], taxonomy: &GenreTaxonomy) -> Result<Self> {
        let mut level2 = vec![false; taxonomy.len(branch)];
        for &id in ids {
            let i = taxonomy
                .index_of_id(branch, id)
                .ok_or_else(|| Error::Validation(format!("genre id {id} is not a {branch} genre")))?;
            level2[i] = true;
        }
        Ok(LabelVector { branch, level2 })
    }
}

pub fn encode_labels<S: AsRef<str>>(
    level1_name: &str,
    genre_names: &[S],
    taxonomy: &GenreTaxonomy,
) -> Result<LabelVector> {
    let branch = Branch::parse(level1_name)?;
    let mut level2 = vec![false; taxonomy.len(branch)];
    for name in genre_names {
        let name = name.as_ref();
        match taxonomy.index_of_name(branch, name) {
            Some(i) => level2[i] = true,
            None if taxonomy.index_of_name(branch.other(), name).is_some() => {
                return Err(Error::BranchMismatch {
                    genre: name.to_string(),
                    branch: branch.name().to_string(),
                })
            }
            None => return Err(Error::UnknownGenre(name.to_string())),
        }
    }
    Ok(LabelVector { branch, level2 })
}

pub fn decode_labels(
    vector: &LabelVector,
    taxonomy: &GenreTaxonomy,
) -> Result<(Branch, BTreeSet<String>)> {
    let m = taxonomy.len(vector.branch);
    if vector.level2.len() != m {
        return Err(Error::shape(
            format!("{} labels for {}", m, vector.branch),
            vector.level2.len(),
        ));
    }
    let names = vector
        .active()
        .map(|i| taxonomy.genres(vector.branch)[i].name.clone())
        .collect();
    Ok((vector.branch, names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_taxonomy_matches_table() {
        let t = GenreTaxonomy::default_books();
        assert_eq!(t.len(Branch::Fiction), 29);
        assert_eq!(t.len(Branch::Nonfiction), 29);
        let i = t.index_of_id(Branch::Fiction, 29).unwrap();
        assert_eq!(t.genres(Branch::Fiction)[i].name, "Sci-Fi & Fantasy");
        let j = t.index_of_id(Branch::Nonfiction, 30).unwrap();
        assert_eq!(t.genres(Branch::Nonfiction)[j].name, "Biographies & Memoir");
        assert!(t.index_of_id(Branch::Fiction, 30).is_none());
        assert!(t.index_of_id(Branch::Nonfiction, 29).is_none());
    }

    #[test]
    fn minimal_taxonomy() {
        let t = GenreTaxonomy::from_json(
            r#"{"fiction":[{"id":1,"name":"a"}],"nonfiction":[{"id":1,"name":"a"}]}"#,
        )
        .unwrap();
        assert_eq!(t.len(Branch::Fiction), 1);
        assert_eq!(t.len(Branch::Nonfiction), 1);
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = GenreTaxonomy::from_json(
            r#"{"fiction":[{"id":13,"name":"a"},{"id":13,"name":"b"}],"nonfiction":[{"id":1,"name":"c"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn duplicate_name_and_empty_branch_rejected() {
        assert!(matches!(
            GenreTaxonomy::from_json(
                r#"{"fiction":[{"id":1,"name":"a"},{"id":2,"name":"a"}],"nonfiction":[{"id":1,"name":"c"}]}"#
            ),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            GenreTaxonomy::from_json(r#"{"fiction":[],"nonfiction":[{"id":1,"name":"c"}]}"#),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn encode_single_and_pair() {
        let t = GenreTaxonomy::default_books();
        let v = encode_labels("fiction", &["Literature"], &t).unwrap();
        assert_eq!(v.level1(), 1.0);
        assert_eq!(v.active().collect::<Vec<_>>(), vec![t.index_of_name(Branch::Fiction, "Literature").unwrap()]);

        let v = encode_labels("nonfiction", &["History", "Humanities"], &t).unwrap();
        assert_eq!(v.level1(), 0.0);
        assert_eq!(v.active().count(), 2);
        let (b, names) = decode_labels(&v, &t).unwrap();
        assert_eq!(b, Branch::Nonfiction);
        assert_eq!(
            names,
            ["History", "Humanities"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn encode_errors() {
        let t = GenreTaxonomy::default_books();
        assert!(matches!(
            encode_labels("fiction", &["Biographies & Memoir"], &t),
            Err(Error::BranchMismatch { .. })
        ));
        assert!(matches!(
            encode_labels("fiction", &["Cyberpunk"], &t),
            Err(Error::UnknownGenre(_))
        ));
    }

    #[test]
    fn decode_empty_and_wrong_length() {
        let t = GenreTaxonomy::default_books();
        let empty = LabelVector { branch: Branch::Fiction, level2: vec![false; 29] };
        assert!(decode_labels(&empty, &t).unwrap().1.is_empty());
        let bad = LabelVector { branch: Branch::Fiction, level2: vec![false; 5] };
        assert!(matches!(decode_labels(&bad, &t), Err(Error::Shape { .. })));
    }

    #[test]
    fn reload_preserves_indices() {
        let t = GenreTaxonomy::default_books();
        let again = GenreTaxonomy::from_json(&t.to_json()).unwrap();
        for b in Branch::ALL {
            for (i, g) in t.genres(b).iter().enumerate() {
                assert_eq!(again.index_of_name(b, &g.name), Some(i));
                assert_eq!(again.index_of_id(b, g.id), Some(i));
            }
        }
        assert_eq!(t.hash(), again.hash());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(fiction in any::<bool>(), mask in proptest::collection::vec(any::<bool>(), 29)) {
            let t = GenreTaxonomy::default_books();
            let branch = Branch::from_indicator(fiction);
            let names: Vec<String> = mask.iter().enumerate().filter(|(_, b)| **b)
                .map(|(i, _)| t.genres(branch)[i].name.clone()).collect();
            let v = encode_labels(branch.name(), &names, &t).unwrap();
            prop_assert_eq!(&v.level2, &mask);
            let (b, decoded) = decode_labels(&v, &t).unwrap();
            prop_assert_eq!(b, branch);
            prop_assert_eq!(decoded, names.into_iter().collect::<BTreeSet<_>>());
        }
    }
}
