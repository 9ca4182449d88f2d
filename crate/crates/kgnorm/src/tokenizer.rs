//! Deterministic subword tokenization.
//!
//! Greedy longest-prefix-match segmentation with `##` continuations over a
//! flat vocabulary file (one token per line, ids assigned in line order after
//! the four reserved tokens). A word containing any unmatchable character maps
//! to a single `[UNK]`.

use crate::error::{Error, Result};
use crate::kg_store::ConceptDictionary;
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const CONTINUATION: &str = "##";

/// Token inventory with dense ids `0..V-1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from plain tokens; reserved tokens get ids 0..3 first.
    pub fn from_tokens<I: IntoIterator<Item = String>>(iter: I) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for (i, tok) in iter.into_iter().enumerate() {
            if token_to_id.contains_key(&tok) {
                return Err(Error::Parse {
                    path: "<tokens>".into(),
                    line: i + 1,
                    msg: format!("duplicate token {tok:?}"),
                });
            }
            token_to_id.insert(tok.clone(), tokens.len() as u32);
            tokens.push(tok);
        }
        Ok(Vocab {
            token_to_id,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Non-reserved tokens in id order (the on-disk line order).
    pub fn plain_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

/// Load a vocabulary file: one token per line, UTF-8, ids in line order.
pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let file = std::fs::File::open(path)?;
    let mut tokens = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let tok = line.trim_end_matches(['\r', '\n']).to_string();
        if tok.is_empty() {
            continue;
        }
        let lineno = i + 1;
        if seen.contains_key(&tok) || RESERVED.contains(&tok.as_str()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("duplicate token {tok:?}"),
            });
        }
        seen.insert(tok.clone(), lineno);
        tokens.push(tok);
    }
    Vocab::from_tokens(tokens)
}

/// Write a vocabulary file accepted by [`load_vocab`].
pub fn save_vocab(tokens: &[String], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in tokens {
        out.push_str(t);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Fixed-length token-id sequence: `[CLS] ... [SEP]` then `[PAD]`s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    /// Number of non-pad positions.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Split a lowercased surface into words: runs of alphanumerics, with every
/// other non-whitespace character kept as a single-char word.
fn split_words(surface: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in surface.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-prefix segmentation of a single word. `None` means the word
/// could not be fully segmented and becomes a single `[UNK]`.
fn segment_word(word: &str, vocab: &Vocab) -> Option<Vec<u32>> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        let mut end = chars.len();
        while end > start {
            let sub: String = chars[start..end].iter().collect();
            let candidate = if start == 0 {
                sub
            } else {
                format!("{CONTINUATION}{sub}")
            };
            if let Some(id) = vocab.id(&candidate) {
                matched = Some((id, end));
                break;
            }
            end -= 1;
        }
        match matched {
            Some((id, e)) => {
                pieces.push(id);
                start = e;
            }
            None => return None,
        }
    }
    Some(pieces)
}

/// Tokenize a term surface into a fixed-length sequence.
///
/// Lowercases, splits on whitespace/punctuation, segments each word greedily,
/// wraps with `[CLS]`/`[SEP]`, truncates so `[SEP]` is always the last non-pad
/// token, and pads to `max_len`.
pub fn tokenize(surface: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::InvalidConfig(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    let lowered: String = surface.to_lowercase();
    let words = split_words(&lowered);
    if words.is_empty() {
        return Err(Error::InvalidInput(format!(
            "surface {surface:?} is empty after trimming"
        )));
    }

    let mut pieces = Vec::new();
    for word in &words {
        match segment_word(word, vocab) {
            Some(ids) => pieces.extend(ids),
            None => pieces.push(UNK),
        }
    }
    pieces.truncate(max_len - 2);

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(&pieces);
    ids.push(SEP);
    let active = ids.len();
    ids.resize(max_len, PAD);

    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..active].fill(1);
    Ok(TokenSequence {
        ids,
        attention_mask,
    })
}

/// Inverse of segmentation for debugging and round-trip tests: strips `##`
/// and joins pieces back into words.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for &id in ids {
        if id == PAD || id == CLS || id == SEP {
            continue;
        }
        let tok = vocab.token(id).unwrap_or("[UNK]");
        if let Some(rest) = tok.strip_prefix(CONTINUATION) {
            if let Some(last) = words.last_mut() {
                last.push_str(rest);
                continue;
            }
        }
        words.push(tok.to_string());
    }
    words
}

/// Build a frequency-ranked subword vocabulary from the dictionary's term
/// surfaces: every single character of the corpus (word-initial and `##`
/// continuation forms), all full words, and character n-grams up to
/// `max_ngram`, ranked by frequency then lexicographically, capped at `size`
/// non-reserved tokens.
pub fn build_vocab_tokens(dict: &ConceptDictionary, size: usize, max_ngram: usize) -> Vec<String> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut must_keep: Vec<String> = Vec::new();
    let mut seen_chars: std::collections::BTreeSet<char> = std::collections::BTreeSet::new();

    for concept in dict.iter() {
        for term in &concept.terms {
            let lowered = term.surface.to_lowercase();
            for word in split_words(&lowered) {
                let chars: Vec<char> = word.chars().collect();
                seen_chars.extend(chars.iter().copied());
                // full word
                *counts.entry(word.clone()).or_insert(0) += 1;
                // n-grams at every offset
                for start in 0..chars.len() {
                    for n in 1..=max_ngram.min(chars.len() - start) {
                        let sub: String = chars[start..start + n].iter().collect();
                        let tok = if start == 0 {
                            sub
                        } else {
                            format!("{CONTINUATION}{sub}")
                        };
                        *counts.entry(tok).or_insert(0) += 1;
                    }
                }
            }
        }
    }

    for ch in &seen_chars {
        must_keep.push(ch.to_string());
        must_keep.push(format!("{CONTINUATION}{ch}"));
    }

    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = Vec::new();
    let mut in_vocab: std::collections::HashSet<String> = std::collections::HashSet::new();
    for tok in must_keep {
        if in_vocab.insert(tok.clone()) {
            tokens.push(tok);
        }
    }
    for (tok, _) in ranked {
        if tokens.len() >= size {
            break;
        }
        if in_vocab.insert(tok.clone()) {
            tokens.push(tok);
        }
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::load_concepts;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn vocab_of(tokens: &[&str]) -> Vocab {
        Vocab::from_tokens(tokens.iter().map(|s| s.to_string())).unwrap()
    }

    #[test]
    fn load_vocab_assigns_ids_after_reserved() {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(b"back\npain\n##ache\n").unwrap();
        let v = load_vocab(f.path()).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("back"), Some(4));
        assert_eq!(v.id("##ache"), Some(6));
        assert_eq!(v.id("[CLS]"), Some(CLS));
    }

    #[test]
    fn duplicate_token_errors_with_line() {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(b"back\npain\npain\n").unwrap();
        match load_vocab(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_vocab_maps_everything_to_unk() {
        let f = NamedTempFile::new().unwrap();
        let v = load_vocab(f.path()).unwrap();
        assert_eq!(v.len(), 4);
        let seq = tokenize("back pain", &v, 8).unwrap();
        assert_eq!(&seq.ids[..4], &[CLS, UNK, UNK, SEP]);
    }

    #[test]
    fn greedy_segmentation_with_continuation() {
        let v = vocab_of(&["back", "##ache"]);
        let seq = tokenize("backache", &v, 8).unwrap();
        assert_eq!(
            seq.ids,
            vec![CLS, v.id("back").unwrap(), v.id("##ache").unwrap(), SEP, PAD, PAD, PAD, PAD]
        );
        assert_eq!(seq.attention_mask, vec![1, 1, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn unmatchable_word_becomes_single_unk() {
        let v = vocab_of(&["back"]);
        let seq = tokenize("qq", &v, 8).unwrap();
        assert_eq!(&seq.ids[..3], &[CLS, UNK, SEP]);
        assert_eq!(seq.active_len(), 3);
    }

    #[test]
    fn truncation_keeps_sep_last() {
        let v = vocab_of(&["w"]);
        let long: String = vec!["w"; 100].join(" ");
        let seq = tokenize(&long, &v, 32).unwrap();
        assert_eq!(seq.active_len(), 32);
        assert_eq!(seq.ids[31], SEP);
        assert_eq!(seq.ids[0], CLS);
        assert!(seq.ids[1..31].iter().all(|&id| id == v.id("w").unwrap()));
    }

    #[test]
    fn max_len_below_three_errors() {
        let v = vocab_of(&[]);
        assert!(matches!(
            tokenize("pain", &v, 2),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn empty_surface_errors() {
        let v = vocab_of(&[]);
        assert!(matches!(
            tokenize("   ", &v, 8),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn punctuation_kept_as_single_char_tokens() {
        let v = vocab_of(&["back", "ache", "-"]);
        let seq = tokenize("Back-Ache", &v, 8).unwrap();
        assert_eq!(
            &seq.ids[..5],
            &[
                CLS,
                v.id("back").unwrap(),
                v.id("-").unwrap(),
                v.id("ache").unwrap(),
                SEP
            ]
        );
    }

    #[test]
    fn lowercasing_applies_across_scripts() {
        let v = vocab_of(&["dolor", "r\u{fc}cken"]);
        let a = tokenize("DOLOR", &v, 8).unwrap();
        assert_eq!(a.ids[1], v.id("dolor").unwrap());
        let b = tokenize("R\u{dc}CKEN", &v, 8).unwrap();
        assert_eq!(b.ids[1], v.id("r\u{fc}cken").unwrap());
    }

    #[test]
    fn determinism_same_input_same_output() {
        let v = vocab_of(&["back", "##ache", "pain"]);
        let a = tokenize("backache pain", &v, 16).unwrap();
        let b = tokenize("backache pain", &v, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip_on_in_vocab_words() {
        let v = vocab_of(&["back", "##ache", "dolor", "de", "espalda"]);
        for surface in ["backache", "dolor de espalda", "Backache Dolor"] {
            let seq = tokenize(surface, &v, 32).unwrap();
            let words = detokenize(&seq.ids, &v);
            let expected: Vec<String> = split_words(&surface.to_lowercase());
            assert_eq!(words, expected, "round trip failed for {surface:?}");
        }
    }

    #[test]
    fn length_bound_holds_for_random_surfaces() {
        let v = vocab_of(&["ba", "##ck", "pain"]);
        for surface in ["x", "ba", "pain pain pain", "a b c d e f g h i j k l m n"] {
            let seq = tokenize(surface, &v, 10).unwrap();
            let n = seq.active_len();
            assert!((3..=10).contains(&n), "active len {n} out of bounds");
            // mask exactly marks the non-pad prefix
            for (i, &m) in seq.attention_mask.iter().enumerate() {
                assert_eq!(m == 1, i < n);
            }
        }
    }

    #[test]
    fn vocab_builder_covers_corpus_words() {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all("C1\ten\tT1\tback pain\nC1\tes\tT1\tdolor de espalda\nC2\ten\tT1\tbackache\n".as_bytes())
            .unwrap();
        let dict = load_concepts(f.path()).unwrap();
        let tokens = build_vocab_tokens(&dict, 512, 4);
        let vocab = Vocab::from_tokens(tokens).unwrap();
        // every corpus word must segment without [UNK]
        for surface in ["back pain", "dolor de espalda", "backache"] {
            let seq = tokenize(surface, &vocab, 32).unwrap();
            assert!(
                !seq.ids.contains(&UNK),
                "builder vocab left [UNK] in {surface:?}"
            );
        }
        // builder is deterministic
        let again = build_vocab_tokens(&dict, 512, 4);
        assert_eq!(again, vocab.plain_tokens());
    }
}
