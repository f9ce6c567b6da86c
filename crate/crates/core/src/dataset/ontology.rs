use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{io_err, DatasetError};
use crate::tmap::NUM_CLASSES;

const DEFAULT_ONTOLOGY: &str = include_str!("../../assets/default_ontology.txt");

/// Semantic id to cost class lookup, parsed from `semantic_id = cost_id`
/// lines. `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    table: BTreeMap<u32, u8>,
}

impl Ontology {
    pub fn parse(text: &str, origin: &str) -> Result<Self, DatasetError> {
        let mut table = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| DatasetError::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (lhs, rhs) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `id = cost`, found {line:?}")))?;
            let sem: u32 = lhs.trim().parse().map_err(|e| err(format!("semantic id: {e}")))?;
            let cost: u8 = rhs.trim().parse().map_err(|e| err(format!("cost id: {e}")))?;
            if cost as usize >= NUM_CLASSES {
                return Err(err(format!("cost id {cost} outside 0..=4")));
            }
            if table.insert(sem, cost).is_some() {
                return Err(err(format!("duplicate semantic id {sem}")));
            }
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// The ontology bundled with the crate (`assets/default_ontology.txt`).
    pub fn shipped_default() -> Self {
        Self::parse(DEFAULT_ONTOLOGY, "default_ontology.txt").expect("bundled ontology parses")
    }

    pub fn default_text() -> &'static str {
        DEFAULT_ONTOLOGY
    }

    pub fn cost_of(&self, semantic: u32) -> Option<u8> {
        self.table.get(&semantic).copied()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Elementwise semantic-to-cost lookup. Fails listing every id the
/// ontology does not cover.
pub fn map_semantics(labels: &[u32], ontology: &Ontology) -> Result<Vec<u8>, DatasetError> {
    let mut missing = Vec::new();
    let costs = labels
        .iter()
        .map(|&l| {
            ontology.cost_of(l).unwrap_or_else(|| {
                missing.push(l);
                0
            })
        })
        .collect();
    if missing.is_empty() {
        Ok(costs)
    } else {
        missing.sort_unstable();
        missing.dedup();
        Err(DatasetError::UnknownSemantic(missing))
    }
}
