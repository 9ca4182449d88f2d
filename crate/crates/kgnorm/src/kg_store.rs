//! Concept dictionary and relation triplet store.
//!
//! Ingests two flat TSV files: concepts (`CUI <TAB> LANG <TAB> SEMTYPE <TAB> TERM`)
//! and relations (`HEAD_CUI <TAB> REL_LABEL <TAB> TAIL_CUI`). Everything is
//! read-only after load; iteration order is deterministic (concepts sorted by id,
//! triplets and relation labels in file order).

use crate::error::{Error, Result};
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;
use unicode_normalization::UnicodeNormalization;

/// One surface string naming a concept, tagged with a language code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub surface: String,
    pub language: String,
}

/// A concept: unique id, semantic types, and its synonym terms.
///
/// The first term listed in the source file is the preferred term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: String,
    pub semantic_types: BTreeSet<String>,
    pub terms: Vec<Term>,
    pub preferred_index: usize,
}

impl Concept {
    pub fn preferred_term(&self) -> &Term {
        &self.terms[self.preferred_index]
    }
}

/// Id-keyed map of concepts with deterministic (sorted) iteration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConceptDictionary {
    concepts: BTreeMap<String, Concept>,
}

impl ConceptDictionary {
    /// Build from in-memory concepts, validating the type invariants.
    pub fn from_concepts(concepts: Vec<Concept>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for c in concepts {
            if c.terms.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "concept {} has no terms",
                    c.id
                )));
            }
            if c.preferred_index >= c.terms.len() {
                return Err(Error::InvalidInput(format!(
                    "concept {} preferred_index out of range",
                    c.id
                )));
            }
            if map.insert(c.id.clone(), c).is_some() {
                return Err(Error::InvalidInput("duplicate concept id".into()));
            }
        }
        Ok(ConceptDictionary { concepts: map })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.concepts.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.concepts.contains_key(id)
    }

    /// Concepts in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn term_count(&self) -> usize {
        self.concepts.values().map(|c| c.terms.len()).sum()
    }

    /// One of the concept's terms, uniformly at random.
    pub fn sample_term<R: Rng>(&self, concept_id: &str, rng: &mut R) -> Result<&Term> {
        let concept = self
            .concepts
            .get(concept_id)
            .ok_or_else(|| Error::UnknownConcept(concept_id.to_string()))?;
        let idx = rng.random_range(0..concept.terms.len());
        Ok(&concept.terms[idx])
    }
}

/// A (head, relation, tail) triplet over dictionary concepts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationTriplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Relation triplets plus the relation-label inventory in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RelationStore {
    pub triplets: Vec<RelationTriplet>,
    pub labels: Vec<String>,
    pub dropped: usize,
    label_index: HashMap<String, usize>,
}

impl RelationStore {
    /// Build from in-memory triplets; every endpoint must resolve.
    pub fn from_triplets(triplets: Vec<RelationTriplet>, dict: &ConceptDictionary) -> Result<Self> {
        let mut store = RelationStore::default();
        for t in triplets {
            if !dict.contains(&t.head) || !dict.contains(&t.tail) {
                return Err(Error::UnknownConcept(if dict.contains(&t.head) {
                    t.tail.clone()
                } else {
                    t.head.clone()
                }));
            }
            if !store.label_index.contains_key(&t.relation) {
                store
                    .label_index
                    .insert(t.relation.clone(), store.labels.len());
                store.labels.push(t.relation.clone());
            }
            store.triplets.push(t);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.label_index.get(label).copied()
    }
}

/// NFC-normalize and trim a surface string. No case folding.
pub fn normalize_surface(s: &str) -> String {
    s.trim().nfc().collect()
}

fn read_data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = std::fs::File::open(path)?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        lines.push((lineno, line));
    }
    Ok(lines)
}

/// Load the concept TSV. Rows with the same CUI are grouped; the first term
/// listed becomes the preferred term; duplicate (CUI, surface, lang) rows collapse.
pub fn load_concepts(path: &Path) -> Result<ConceptDictionary> {
    let lines = read_data_lines(path)?;
    if lines.is_empty() {
        return Err(Error::EmptyDictionary(path.to_path_buf()));
    }

    let mut concepts: BTreeMap<String, Concept> = BTreeMap::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let (cui, lang, semtype, term) = (fields[0], fields[1], fields[2], fields[3]);
        let surface = normalize_surface(term);
        if cui.is_empty() || lang.is_empty() || semtype.is_empty() || surface.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "empty field".to_string(),
            });
        }
        let entry = concepts.entry(cui.to_string()).or_insert_with(|| Concept {
            id: cui.to_string(),
            semantic_types: BTreeSet::new(),
            terms: Vec::new(),
            preferred_index: 0,
        });
        entry.semantic_types.insert(semtype.to_string());
        let duplicate = entry
            .terms
            .iter()
            .any(|t| t.surface == surface && t.language == lang);
        if !duplicate {
            entry.terms.push(Term {
                surface,
                language: lang.to_string(),
            });
        }
    }
    Ok(ConceptDictionary { concepts })
}

/// Load the relation TSV against a dictionary. Triplets whose head or tail is
/// absent are dropped and counted; the label inventory keeps first-seen order.
pub fn load_relations(path: &Path, dict: &ConceptDictionary) -> Result<RelationStore> {
    let lines = read_data_lines(path)?;
    let mut store = RelationStore::default();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let (head, label, tail) = (fields[0], fields[1], fields[2]);
        if head.is_empty() || label.is_empty() || tail.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "empty field".to_string(),
            });
        }
        if !dict.contains(head) || !dict.contains(tail) {
            store.dropped += 1;
            continue;
        }
        if !store.label_index.contains_key(label) {
            store
                .label_index
                .insert(label.to_string(), store.labels.len());
            store.labels.push(label.to_string());
        }
        store.triplets.push(RelationTriplet {
            head: head.to_string(),
            relation: label.to_string(),
            tail: tail.to_string(),
        });
    }
    Ok(store)
}
