//! Inputs shared by the benchmarks.

use std::sync::Arc;

use fmea_core::embedding::HashEmbedder;
use fmea_core::fixtures::load_fixtures;
use fmea_core::parser::ParsedFragment;
use fmea_core::{CorpusStore, FmeaDocument, Retriever, StepKind};

pub fn fixture_documents() -> Vec<FmeaDocument> {
    load_fixtures().expect("fixtures load").documents
}

pub fn fixture_retriever() -> Retriever {
    let store = CorpusStore::in_memory();
    for r in store.ingest_many(fixture_documents()) {
        r.expect("fixtures ingest");
    }
    Retriever::new(Arc::new(store), Arc::new(HashEmbedder::default()))
}

/// `n` fragments whose items overlap partly, with case and order noise.
pub fn noisy_fragments(n: usize, items: usize) -> Vec<ParsedFragment> {
    (0..n)
        .map(|v| {
            let mut f = ParsedFragment::empty(StepKind::FailureLocations);
            f.items = (0..items)
                .filter(|i| (i + v) % 4 != 0)
                .map(|i| if v % 2 == 0 { format!("Part {i} housing") } else { format!("part {i}  housing") })
                .collect();
            f
        })
        .collect()
}
