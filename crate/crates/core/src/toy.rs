//! Small bundled dataset for demos, smoke runs and tests.

use crate::prompts::{parse_definitions, DefinitionRecord};

pub const DEFINITIONS_JSONL: &str = include_str!("../data/definitions.jsonl");
pub const CORPUS: &str = include_str!("../data/corpus.txt");
pub const WORDSIM_TSV: &str = include_str!("../data/wordsim.tsv");

pub fn definitions() -> Vec<DefinitionRecord> {
    let (recs, bad) = parse_definitions(DEFINITIONS_JSONL);
    debug_assert!(bad.is_empty());
    recs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_files_parse() {
        let defs = definitions();
        assert!(defs.len() >= 150);
        let d = defs.iter().find(|r| r.word == "discomfort").unwrap();
        assert_eq!(d.definition, "To cause annoyance or distress to");
        assert!(CORPUS.lines().count() > 1000);
        assert!(WORDSIM_TSV.lines().all(|l| l.split('\t').count() == 3));
    }
}
