//! Synthetic knowledge-graph benchmark generator.
//!
//! Builds G groups x C concepts with pseudoword synonyms and four relations
//! defined by group arithmetic, so relation structure is learnable and probe
//! classes are balanced. Each concept gets three dictionary synonyms plus one
//! held-out synonym that becomes the normalization gold query:
//!
//! - `stem` (preferred)
//! - `stem n1 n2` (n* drawn from a small shared noise-word pool)
//! - `grp stem+suffix1`
//! - held out: `n1' n2' stem+suffix2`, where (n1', n2') is the *next*
//!   concept's dictionary noise pair
//!
//! The held-out query shares its stem with the gold concept but its noise
//! words with decoy concepts, so a random encoder is pulled toward the decoys
//! while a trained one must rely on the stem: only a handful of distinct
//! noise pairs exist, each reused by many concepts, so noise words cannot
//! separate concepts and the contrastive loss keeps mining same-pair
//! negatives until stems dominate. Concepts of a group share the group word;
//! the group label doubles as the semantic type. Each concept emits two of
//! the four relations (alternating by index), keeping probe classes balanced
//! while the graph stays sparse.

use crate::error::{Error, Result};
use crate::kg_store::load_concepts;
use crate::tokenizer::{build_vocab_tokens, save_vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

const CONSONANTS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const SUFFIXES: [&str; 5] = ["an", "el", "or", "it", "ul"];
pub const RELATION_LABELS: [&str; 4] = ["same_group", "next_group", "shares_prefix", "inverse_next"];

fn syllable(i: usize) -> String {
    let i = i % (CONSONANTS.len() * VOWELS.len());
    format!("{}{}", CONSONANTS[i % 14], VOWELS[(i / 14) % 5])
}

/// Generator settings. Defaults give 100 concepts x 4 synonyms (1 held out)
/// with 4 relation types.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub groups: usize,
    pub per_group: usize,
    pub noise_pool: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            groups: 10,
            per_group: 10,
            noise_pool: 12,
            vocab_size: 8192,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=70).contains(&self.groups) {
            return Err(Error::InvalidConfig("groups must be in 3..=70".into()));
        }
        if !(2..=70).contains(&self.per_group) {
            return Err(Error::InvalidConfig("per-group must be in 2..=70".into()));
        }
        if !(4..=70).contains(&self.noise_pool) {
            return Err(Error::InvalidConfig("noise-pool must be in 4..=70".into()));
        }
        if self.vocab_size < 64 {
            return Err(Error::InvalidConfig("vocab-size must be >= 64".into()));
        }
        Ok(())
    }
}

/// Paths of one generated file family.
#[derive(Debug, Clone)]
pub struct SynthFamily {
    pub concepts: PathBuf,
    pub relations: PathBuf,
    pub gold: PathBuf,
    pub pairs: PathBuf,
    pub vocab: PathBuf,
    pub concept_count: usize,
    pub triplet_count: usize,
    pub vocab_count: usize,
}

fn cui(groups_c: usize, g: usize, c: usize) -> String {
    format!("C{:07}", g * groups_c + c)
}

/// Stems start with a syllable determined by the in-group index, so concepts
/// related by `shares_prefix` (same index, different group) share it.
fn stem(g: usize, c: usize) -> String {
    format!(
        "{}{}{}",
        syllable(c),
        syllable(17 + g),
        syllable(29 + 2 * g + 3 * c)
    )
}

fn group_word(g: usize) -> String {
    format!("w{}", syllable(11 + 3 * g))
}

fn noise_word(p: usize) -> String {
    format!("x{}{}", syllable(7 * p + 3), syllable(5 * p + 11))
}

/// Generate the file family into `dir`.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<SynthFamily> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let (gs, cs) = (cfg.groups, cfg.per_group);
    let n = gs * cs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // per-concept dictionary noise pair with distinct members
    let mut noise_slots: Vec<(usize, usize)> = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.random_range(0..cfg.noise_pool);
        let mut b = rng.random_range(0..cfg.noise_pool);
        while b == a {
            b = rng.random_range(0..cfg.noise_pool);
        }
        noise_slots.push((a, b));
    }

    let mut concepts_tsv = String::new();
    let mut gold_tsv = String::new();
    let mut relations_tsv = String::new();
    let mut pairs_tsv = String::new();

    for g in 0..gs {
        for c in 0..cs {
            let i = g * cs + c;
            let id = cui(cs, g, c);
            let s = stem(g, c);
            let t = group_word(g);
            let semtype = format!("G{g:02}");
            let (na, nb) = noise_slots[i];
            let suf1 = SUFFIXES[i % SUFFIXES.len()];
            let suf2 = SUFFIXES[(i + 2) % SUFFIXES.len()];
            let (da, db) = noise_slots[(i + 1) % n];

            let synonyms = [
                s.clone(),
                format!("{s} {} {}", noise_word(na), noise_word(nb)),
                format!("{t} {s}{suf1}"),
            ];
            for surface in &synonyms {
                concepts_tsv.push_str(&format!("{id}\ten\t{semtype}\t{surface}\n"));
            }
            let held_out = format!("{} {} {s}{suf2}", noise_word(da), noise_word(db));
            gold_tsv.push_str(&format!("{held_out}\t{id}\n"));

            let targets = [
                (RELATION_LABELS[0], cui(cs, g, (c + 1) % cs)),
                (RELATION_LABELS[1], cui(cs, (g + 1) % gs, c)),
                (RELATION_LABELS[2], cui(cs, (g + 2) % gs, c)),
                (RELATION_LABELS[3], cui(cs, (g + gs - 1) % gs, c)),
            ];
            // alternate relation pairs by concept index: the graph stays
            // sparse but every class keeps the same triplet count
            for (slot, (label, tail)) in targets.into_iter().enumerate() {
                if (i + slot) % 2 != 0 {
                    continue;
                }
                relations_tsv.push_str(&format!("{id}\t{label}\t{tail}\n"));
                pairs_tsv.push_str(&format!("{id}\t{tail}\t{label}\n"));
            }
        }
    }

    let family = SynthFamily {
        concepts: dir.join("concepts.tsv"),
        relations: dir.join("relations.tsv"),
        gold: dir.join("gold.tsv"),
        pairs: dir.join("pairs.tsv"),
        vocab: dir.join("vocab.txt"),
        concept_count: n,
        triplet_count: 2 * n,
        vocab_count: 0,
    };
    std::fs::write(&family.concepts, concepts_tsv)?;
    std::fs::write(&family.relations, relations_tsv)?;
    std::fs::write(&family.gold, gold_tsv)?;
    std::fs::write(&family.pairs, pairs_tsv)?;

    let dict = load_concepts(&family.concepts)?;
    let tokens = build_vocab_tokens(&dict, cfg.vocab_size, 4);
    save_vocab(&tokens, &family.vocab)?;

    Ok(SynthFamily {
        vocab_count: tokens.len() + crate::tokenizer::RESERVED.len(),
        ..family
    })
}
