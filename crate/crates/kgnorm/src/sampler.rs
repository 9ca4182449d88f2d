//! Training batch construction with the m-repeat guarantee.
//!
//! A batch holds k relation triplets: k/m distinct triplets drawn from the
//! store (without replacement within the batch when the store is large
//! enough), each replicated exactly m times. Every head/tail slot samples a
//! synonym independently, so repeats vary in surface form and populate
//! positive pairs for mining. Index convention: `concept_ids[i]` is the head
//! of slot i and `concept_ids[k+i]` its tail.

use crate::error::{Error, Result};
use crate::kg_store::{ConceptDictionary, RelationStore, RelationTriplet};
use crate::tokenizer::{tokenize, TokenSequence, Vocab};
use rand::Rng;

/// One sampled batch of k triplet slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub triplets: Vec<RelationTriplet>,
    pub head_terms: Vec<TokenSequence>,
    pub tail_terms: Vec<TokenSequence>,
    /// 2k concept ids, heads then tails.
    pub concept_ids: Vec<String>,
    /// k indices into the relation-label inventory.
    pub relation_ids: Vec<usize>,
    pub repeat: usize,
}

impl TrainingBatch {
    pub fn k(&self) -> usize {
        self.triplets.len()
    }
}

/// Validate the (k, m) constraint: k divisible by m and 2 <= m <= sqrt(k).
pub fn check_batch_params(k: usize, m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!("repeat m must be >= 2, got {m}")));
    }
    if m * m > k {
        return Err(Error::InvalidConfig(format!(
            "repeat m must satisfy m <= sqrt(k): m = {m}, k = {k}"
        )));
    }
    if k % m != 0 {
        return Err(Error::InvalidConfig(format!(
            "batch size k = {k} must be divisible by m = {m}"
        )));
    }
    Ok(())
}

/// Draw one batch: k/m distinct triplets, each repeated m times, synonyms
/// re-sampled per occurrence, tokenized at `max_len`.
pub fn sample_batch<R: Rng>(
    dict: &ConceptDictionary,
    store: &RelationStore,
    vocab: &Vocab,
    k: usize,
    m: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    check_batch_params(k, m)?;
    if store.is_empty() {
        return Err(Error::InvalidInput("relation store is empty".into()));
    }
    let distinct = k / m;
    let n = store.len();

    let chosen: Vec<usize> = if n >= distinct {
        // partial Fisher-Yates for a without-replacement draw
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..distinct {
            let j = rng.random_range(i..n);
            indices.swap(i, j);
        }
        indices.truncate(distinct);
        indices
    } else {
        // store too small for distinctness; fall back to replacement
        (0..distinct).map(|_| rng.random_range(0..n)).collect()
    };

    let mut triplets = Vec::with_capacity(k);
    let mut head_terms = Vec::with_capacity(k);
    let mut tail_terms = Vec::with_capacity(k);
    let mut head_ids = Vec::with_capacity(k);
    let mut tail_ids = Vec::with_capacity(k);
    let mut relation_ids = Vec::with_capacity(k);

    for &ti in &chosen {
        let triplet = &store.triplets[ti];
        let rel_id = store
            .label_id(&triplet.relation)
            .ok_or_else(|| Error::InvalidInput(format!("label {:?} not in inventory", triplet.relation)))?;
        for _ in 0..m {
            let head_term = dict.sample_term(&triplet.head, rng)?;
            let tail_term = dict.sample_term(&triplet.tail, rng)?;
            head_terms.push(tokenize(&head_term.surface, vocab, max_len)?);
            tail_terms.push(tokenize(&tail_term.surface, vocab, max_len)?);
            head_ids.push(triplet.head.clone());
            tail_ids.push(triplet.tail.clone());
            relation_ids.push(rel_id);
            triplets.push(triplet.clone());
        }
    }

    let mut concept_ids = head_ids;
    concept_ids.extend(tail_ids);
    Ok(TrainingBatch {
        triplets,
        head_terms,
        tail_terms,
        concept_ids,
        relation_ids,
        repeat: m,
    })
}
