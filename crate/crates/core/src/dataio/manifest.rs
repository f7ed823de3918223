use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{Branch, GenreTaxonomy, LabelVector};

/// Pointer to one row of a named embedding store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRef {
    pub store: String,
    pub row: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityFlags {
    #[serde(default)]
    pub visually_challenged: bool,
    #[serde(default)]
    pub textually_challenged: bool,
}

/// One book in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub authors: Vec<String>,
    #[serde(default)]
    pub publishers: Vec<String>,
    pub level1: Branch,
    pub genres: Vec<u32>,
    #[serde(default)]
    pub visual_ref: Option<EmbeddingRef>,
    #[serde(default)]
    pub blurb_ref: Option<EmbeddingRef>,
    #[serde(default)]
    pub cover_text_ref: Option<EmbeddingRef>,
    #[serde(default)]
    pub flags: QualityFlags,
}

impl BookRecord {
    pub fn validate(&self, taxonomy: &GenreTaxonomy) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("record has an empty id".into()));
        }
        if self.visual_ref.is_none() && self.blurb_ref.is_none() {
            return Err(Error::Validation(format!(
                "record {} has neither visual_ref nor blurb_ref",
                self.id
            )));
        }
        if self.genres.is_empty() {
            return Err(Error::Validation(format!("record {} has no genres", self.id)));
        }
        for &g in &self.genres {
            if taxonomy.index_of_id(self.level1, g).is_none() {
                return Err(Error::Validation(format!(
                    "record {}: unknown {} genre id {g}",
                    self.id, self.level1
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self, taxonomy: &GenreTaxonomy) -> Result<LabelVector> {
        LabelVector::from_ids(self.level1, &self.genres, taxonomy)
    }
}

/// Read a JSON Lines manifest, validating every record.
pub fn read_manifest(path: impl AsRef<Path>, taxonomy: &GenreTaxonomy) -> Result<Vec<BookRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BookRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        rec.validate(taxonomy)
            .map_err(|e| Error::Validation(format!("{}:{line_no}: {e}", path.display())))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: duplicate record id {}",
                path.display(),
                rec.id
            )));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[BookRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, genres: &str, visual: bool, blurb: bool) -> String {
        let v = if visual { r#"{"store":"visual","row":0}"# } else { "null" };
        let b = if blurb { r#"{"store":"blurb","row":0}"# } else { "null" };
        format!(
            r#"{{"id":"{id}","title":"t","authors":["a"],"publishers":["p"],"level1":"fiction","genres":{genres},"visual_ref":{v},"blurb_ref":{b},"cover_text_ref":null,"flags":{{"visually_challenged":false,"textually_challenged":true}}}}"#
        )
    }

    fn write(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn reads_well_formed() {
        let t = GenreTaxonomy::default_books();
        let f = write(&[line("a", "[1]", true, true), line("b", "[2,3]", false, true), line("c", "[29]", true, false)]);
        let recs = read_manifest(f.path(), &t).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs[0].flags.textually_challenged);
        assert_eq!(recs[1].labels(&t).unwrap().active().count(), 2);
    }

    #[test]
    fn unknown_genre_is_named() {
        let t = GenreTaxonomy::default_books();
        let f = write(&[line("a", "[30]", true, true)]);
        let err = read_manifest(f.path(), &t).unwrap_err().to_string();
        assert!(err.contains("30"), "{err}");
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn missing_both_refs_rejected() {
        let t = GenreTaxonomy::default_books();
        let f = write(&[line("a", "[1]", true, true), line("b", "[1]", false, false)]);
        let err = read_manifest(f.path(), &t).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let t = GenreTaxonomy::default_books();
        let f = write(&[line("a", "[1]", true, true), "{not json".to_string()]);
        match read_manifest(f.path(), &t).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }
}
