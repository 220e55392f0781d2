//! The synthetic fixture corpus shipped under `fixtures/`: twenty documents in
//! five equipment families and the lookup map for the `mock_lookup`
//! provider.
//!
//! The content is synthetic, written from general reliability-engineering
//! knowledge; it exists to exercise the pipeline, not as engineering advice.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::model::{validate_document, FmeaDocument, Provenance};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    pub documents: Vec<FmeaDocument>,
    pub lookup_map: BTreeMap<String, String>,
}

/// `fixtures/` at the workspace root.
pub fn default_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Equipment family of a fixture id (`pump-03` is a `pump`).
pub fn family(doc_id: &str) -> &str {
    doc_id.rsplit_once('-').map_or(doc_id, |(f, _)| f)
}

fn read(path: &Path) -> Result<String, FixtureError> {
    fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load every `corpus/*.json` document (sorted by file name) and
/// `lookup.json` from `dir`. Each document must validate and carry fixture
/// provenance.
pub fn load_fixtures_from(dir: &Path) -> Result<FixtureSet, FixtureError> {
    let corpus = dir.join("corpus");
    let mut paths: Vec<PathBuf> = fs::read_dir(&corpus)
        .map_err(|source| FixtureError::Io {
            path: corpus.clone(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut documents = Vec::with_capacity(paths.len());
    for path in paths {
        let corrupt = |message: String| FixtureError::Corrupt {
            path: path.clone(),
            message,
        };
        let doc = FmeaDocument::from_json(&read(&path)?).map_err(|e| corrupt(e.to_string()))?;
        let report = validate_document(&doc);
        if !report.is_ok() {
            return Err(corrupt(format!("invalid document: {:?}", report.violations)));
        }
        if doc.provenance != Provenance::Fixture {
            return Err(corrupt("provenance must be `fixture`".into()));
        }
        documents.push(doc);
    }
    let lookup_path = dir.join("lookup.json");
    let lookup_map = serde_json::from_str(&read(&lookup_path)?).map_err(|e| FixtureError::Corrupt {
        path: lookup_path,
        message: e.to_string(),
    })?;
    Ok(FixtureSet { documents, lookup_map })
}

pub fn load_fixtures() -> Result<FixtureSet, FixtureError> {
    load_fixtures_from(&default_fixture_dir())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StepKind;
    use crate::parser::parse;
    use crate::prompt::{format_example, step_input};
    use std::collections::BTreeSet;

    #[test]
    fn loads_deterministically() {
        let a = load_fixtures().unwrap();
        assert_eq!(a, load_fixtures().unwrap());
        assert_eq!(a.documents.len(), 20);
    }

    #[test]
    fn every_family_has_several_documents() {
        let set = load_fixtures().unwrap();
        let mut counts = BTreeMap::new();
        for d in &set.documents {
            *counts.entry(family(d.doc_id.as_str())).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 5);
        assert!(counts.values().all(|&c| c >= 2), "{counts:?}");
    }

    #[test]
    fn lookup_map_is_the_step_chain_of_every_document() {
        let set = load_fixtures().unwrap();
        let mut expected = BTreeMap::new();
        for d in &set.documents {
            for step in StepKind::ALL {
                expected.insert(step_input(d, step).unwrap(), format_example(d, step).unwrap());
            }
        }
        assert_eq!(set.lookup_map, expected);
        for (_, block) in set.lookup_map {
            let steps: BTreeSet<_> = StepKind::ALL
                .into_iter()
                .filter(|s| parse(&block, *s).is_ok_and(|f| f.warnings.is_empty()))
                .collect();
            assert_eq!(steps.len(), 1, "{block}");
        }
    }

    #[test]
    fn corrupted_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("corpus")).unwrap();
        fs::write(dir.path().join("corpus/broken.json"), "{ not json").unwrap();
        fs::write(dir.path().join("lookup.json"), "{}").unwrap();
        let err = load_fixtures_from(dir.path()).unwrap_err();
        assert!(err.to_string().contains("broken.json"), "{err}");
    }
}
