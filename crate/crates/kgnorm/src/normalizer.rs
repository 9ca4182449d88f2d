//! Embedding index over a term dictionary and zero-shot normalization.
//!
//! Every term of every concept is embedded, L2-normalized, and stored in a
//! flat matrix. Queries embed with the same pooling and rank concepts by the
//! maximum cosine over their terms (exact full scan, ties broken by ascending
//! concept id).

use crate::encoder::{forward, EncoderParams, Pooling};
use crate::error::{Error, Result};
use crate::kg_store::ConceptDictionary;
use crate::num::Scalar;
use crate::tokenizer::{tokenize, Vocab};
use ndarray::{Array1, Array2, ArrayView1};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Origin of one index row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMeta {
    pub surface: String,
    pub concept_id: String,
}

/// Immutable matrix of unit-normalized term embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex<F: Scalar> {
    rows: Array2<F>,
    meta: Vec<RowMeta>,
    pooling: Pooling,
}

/// One ranked retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub concept_id: String,
    pub term: String,
    pub score: f64,
}

impl<F: Scalar> EmbeddingIndex<F> {
    /// Normalize raw rows into an index; rejects zero-norm rows.
    pub fn from_parts(raw: Array2<F>, meta: Vec<RowMeta>, pooling: Pooling) -> Result<Self> {
        if raw.nrows() != meta.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} metadata entries",
                raw.nrows(),
                meta.len()
            )));
        }
        let mut rows = raw;
        for (i, m) in meta.iter().enumerate() {
            let norm = rows.row(i).dot(&rows.row(i)).sqrt();
            if norm == F::zero() {
                return Err(Error::ZeroNorm(m.surface.clone()));
            }
            let mut r = rows.row_mut(i);
            r.mapv_inplace(|x| x / norm);
        }
        Ok(EmbeddingIndex {
            rows,
            meta,
            pooling,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn rows(&self) -> &Array2<F> {
        &self.rows
    }

    pub fn contains_concept(&self, id: &str) -> bool {
        self.meta.iter().any(|m| m.concept_id == id)
    }

    /// Distinct concept count.
    pub fn concept_count(&self) -> usize {
        self.meta
            .iter()
            .map(|m| m.concept_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Embed one surface with the encoder and the given pooling.
pub fn embed_term<F: Scalar>(
    params: &EncoderParams<F>,
    vocab: &Vocab,
    surface: &str,
    pooling: Pooling,
) -> Result<Array1<F>> {
    let tokens = tokenize(surface, vocab, params.dims.max_len)?;
    let hidden = forward(params, &tokens)?;
    Ok(pooling.apply(&hidden))
}

/// Embed every term of every concept; rows ordered by concept id, then the
/// concept's term order. Deterministic given identical inputs.
pub fn build_index<F: Scalar>(
    dict: &ConceptDictionary,
    params: &EncoderParams<F>,
    vocab: &Vocab,
    pooling: Pooling,
) -> Result<EmbeddingIndex<F>> {
    let mut raw: Vec<F> = Vec::new();
    let mut meta = Vec::new();
    let l = params.dims.d_embed;
    for concept in dict.iter() {
        for term in &concept.terms {
            let e = embed_term(params, vocab, &term.surface, pooling)?;
            raw.extend(e.iter().copied());
            meta.push(RowMeta {
                surface: term.surface.clone(),
                concept_id: concept.id.clone(),
            });
        }
    }
    let rows = Array2::from_shape_vec((meta.len(), l), raw)
        .map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingIndex::from_parts(rows, meta, pooling)
}

/// Rank concepts against a raw query vector: score = max cosine over each
/// concept's terms, ties broken by ascending concept id. Exact full scan.
pub fn top_k_vec<F: Scalar>(
    index: &EmbeddingIndex<F>,
    query: ArrayView1<F>,
    k: usize,
) -> Result<Vec<Match>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let qnorm = query.dot(&query).sqrt();
    // per-concept best (score, term); zero-norm queries score 0 everywhere
    let mut best: Vec<(usize, F)> = Vec::new(); // row index of best term, score
    let mut concept_of: Vec<&str> = Vec::new();
    let mut seen: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for (i, m) in index.meta.iter().enumerate() {
        let score = if qnorm == F::zero() {
            F::zero()
        } else {
            index.rows.row(i).dot(&query) / qnorm
        };
        let score = score.min(F::one()).max(-F::one());
        match seen.get(m.concept_id.as_str()) {
            Some(&slot) => {
                if score > best[slot].1 {
                    best[slot] = (i, score);
                }
            }
            None => {
                seen.insert(m.concept_id.as_str(), best.len());
                concept_of.push(m.concept_id.as_str());
                best.push((i, score));
            }
        }
    }
    let mut order: Vec<usize> = (0..best.len()).collect();
    order.sort_by(|&a, &b| {
        best[b]
            .1
            .partial_cmp(&best[a].1)
            .expect("finite scores")
            .then_with(|| concept_of[a].cmp(concept_of[b]))
    });
    order.truncate(k);
    Ok(order
        .into_iter()
        .map(|slot| {
            let (row, score) = best[slot];
            Match {
                concept_id: index.meta[row].concept_id.clone(),
                term: index.meta[row].surface.clone(),
                score: crate::num::to_f64(score),
            }
        })
        .collect())
}

/// Embed a query surface and rank concepts; `top_k(.., 1)` is the zero-shot
/// normalization predictor.
pub fn top_k<F: Scalar>(
    index: &EmbeddingIndex<F>,
    params: &EncoderParams<F>,
    vocab: &Vocab,
    query: &str,
    k: usize,
) -> Result<Vec<Match>> {
    if query.trim().is_empty() {
        return Err(Error::InvalidInput("empty query".into()));
    }
    let q = embed_term(params, vocab, query, index.pooling)?;
    top_k_vec(index, q.view(), k)
}

/// Top-k accuracy over gold (query, concept) pairs, per requested k.
pub fn eval_acc_at_k<F: Scalar>(
    index: &EmbeddingIndex<F>,
    params: &EncoderParams<F>,
    vocab: &Vocab,
    gold: &[(String, String)],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if gold.is_empty() {
        return Err(Error::InvalidInput("empty gold set".into()));
    }
    let missing: Vec<&str> = gold
        .iter()
        .map(|(_, cui)| cui.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|cui| !index.contains_concept(cui))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGold(missing.join(", ")));
    }
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut hits = vec![0usize; ks.len()];
    for (query, cui) in gold {
        let ranked = top_k(index, params, vocab, query, max_k)?;
        let rank = ranked.iter().position(|m| &m.concept_id == cui);
        if let Some(r) = rank {
            for (slot, &k) in ks.iter().enumerate() {
                if r < k {
                    hits[slot] += 1;
                }
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / gold.len() as f64))
        .collect())
}

/// Precision/recall/F1 for one-concept-per-query prediction against gold
/// sets. With exactly one prediction per query precision equals recall; the
/// formula is kept general.
pub fn eval_f1_one_cui<F: Scalar>(
    index: &EmbeddingIndex<F>,
    params: &EncoderParams<F>,
    vocab: &Vocab,
    gold: &[(String, BTreeSet<String>)],
) -> Result<(f64, f64, f64)> {
    if gold.is_empty() {
        return Err(Error::InvalidInput("empty gold set".into()));
    }
    if gold.iter().any(|(_, set)| set.is_empty()) {
        return Err(Error::InvalidInput("gold set with no concepts".into()));
    }
    let mut tp = 0usize;
    for (query, cuis) in gold {
        let ranked = top_k(index, params, vocab, query, 1)?;
        if let Some(top) = ranked.first() {
            if cuis.contains(&top.concept_id) {
                tp += 1;
            }
        }
    }
    let predictions = gold.len();
    let mentions = gold.len();
    let precision = tp as f64 / predictions as f64;
    let recall = tp as f64 / mentions as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

/// Parse a gold file with exactly one concept per line: `QUERY <TAB> CUI`.
pub fn parse_gold_single(path: &Path) -> Result<Vec<(String, String)>> {
    parse_gold_multi(path)?
        .into_iter()
        .enumerate()
        .map(|(i, (q, set))| {
            if set.len() != 1 {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected exactly one concept id, got {}", set.len()),
                })
            } else {
                Ok((q, set.into_iter().next().unwrap()))
            }
        })
        .collect()
}

/// Parse a gold file `QUERY <TAB> CUI[,CUI...]`.
pub fn parse_gold_multi(path: &Path) -> Result<Vec<(String, BTreeSet<String>)>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `QUERY<TAB>CUI[,CUI...]`".to_string(),
            });
        }
        let cuis: BTreeSet<String> = fields[1]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string())
            .collect();
        if cuis.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "no concept ids".to_string(),
            });
        }
        out.push((fields[0].to_string(), cuis));
    }
    Ok(out)
}

/// Write raw (pre-normalization) embeddings as `CUI <TAB> TERM <TAB> v1,...,vl`.
pub fn export_embeddings<F: Scalar, W: Write>(
    dict: &ConceptDictionary,
    params: &EncoderParams<F>,
    vocab: &Vocab,
    pooling: Pooling,
    w: &mut W,
) -> Result<()> {
    for concept in dict.iter() {
        for term in &concept.terms {
            let e = embed_term(params, vocab, &term.surface, pooling)?;
            let values: Vec<String> = e.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{}\t{}\t{}", concept.id, term.surface, values.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::kg_store::load_concepts;
    use crate::tokenizer::build_vocab_tokens;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write as _;
    use tempfile::NamedTempFile;

    fn fixture() -> (ConceptDictionary, EncoderParams<f64>, Vocab) {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(
            "C1\ten\tT1\tback pain\nC1\tes\tT1\tdolor de espalda\n\
             C2\ten\tT1\tdorsalgia\nC2\ten\tT1\tbackache\n\
             C3\ten\tT1\theadache\nC3\ten\tT1\tcephalgia\n"
                .as_bytes(),
        )
        .unwrap();
        let dict = load_concepts(f.path()).unwrap();
        let vocab = Vocab::from_tokens(build_vocab_tokens(&dict, 4096, 6)).unwrap();
        let dims = EncoderDims {
            vocab: vocab.len(),
            d_model: 8,
            d_ffn: 12,
            d_embed: 6,
            max_len: 12,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EncoderParams::init(dims, vec![], &mut rng);
        (dict, params, vocab)
    }

    #[test]
    fn index_has_one_row_per_term() {
        let (dict, params, vocab) = fixture();
        let index = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        assert_eq!(index.len(), 6);
        assert_eq!(index.concept_count(), 3);
    }

    #[test]
    fn rebuilt_index_is_identical() {
        let (dict, params, vocab) = fixture();
        let a = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        let b = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn rows_are_unit_norm() {
        let (dict, params, vocab) = fixture();
        let index = build_index(&dict, &params, &vocab, Pooling::Avg).unwrap();
        for i in 0..index.len() {
            let n = index.rows().row(i).dot(&index.rows().row(i)).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_norm_embedding_errors_with_term_name() {
        let (dict, params, vocab) = fixture();
        let zero = EncoderParams::<f64>::zeros(params.dims, vec![]);
        match build_index(&dict, &zero, &vocab, Pooling::Cls) {
            Err(Error::ZeroNorm(term)) => assert_eq!(term, "back pain"),
            other => panic!("expected ZeroNorm, got {other:?}"),
        }
    }

    #[test]
    fn exact_surface_query_ranks_first_with_unit_score() {
        let (dict, params, vocab) = fixture();
        let index = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        let ranked = top_k(&index, &params, &vocab, "dorsalgia", 3).unwrap();
        assert_eq!(ranked[0].concept_id, "C2");
        assert_eq!(ranked[0].term, "dorsalgia");
        assert!((ranked[0].score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn k_larger_than_concept_count_returns_all() {
        let (dict, params, vocab) = fixture();
        let index = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        let ranked = top_k(&index, &params, &vocab, "pain", 50).unwrap();
        assert_eq!(ranked.len(), 3);
    }

    #[test]
    fn empty_query_errors() {
        let (dict, params, vocab) = fixture();
        let index = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        assert!(matches!(
            top_k(&index, &params, &vocab, "  ", 1),
            Err(Error::InvalidInput(_))
        ));
    }

    /// Full-scan oracle with its own score/sort logic.
    fn brute_force_rank(index: &EmbeddingIndex<f64>, q: ArrayView1<f64>) -> Vec<(String, f64)> {
        let qn = q.dot(&q).sqrt();
        let mut best: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
        for (i, m) in index.meta().iter().enumerate() {
            let s = if qn == 0.0 {
                0.0
            } else {
                index.rows().row(i).dot(&q) / qn
            };
            let s = s.clamp(-1.0, 1.0);
            let e = best.entry(m.concept_id.clone()).or_insert(f64::NEG_INFINITY);
            if s > *e {
                *e = s;
            }
        }
        let mut v: Vec<(String, f64)> = best.into_iter().collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        v
    }

    #[test]
    fn top_k_matches_brute_force_on_random_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let l = 8;
        let n = 50;
        let raw = Array2::from_shape_fn((n, l), |_| rng.random_range(-1.0..1.0));
        let meta: Vec<RowMeta> = (0..n)
            .map(|i| RowMeta {
                surface: format!("term{i}"),
                concept_id: format!("C{:03}", i / 2),
            })
            .collect();
        let index = EmbeddingIndex::from_parts(raw, meta, Pooling::Cls).unwrap();
        for _ in 0..20 {
            let q: Array1<f64> = Array1::from_shape_fn(l, |_| rng.random_range(-1.0..1.0));
            let got = top_k_vec(&index, q.view(), 25).unwrap();
            let expected = brute_force_rank(&index, q.view());
            assert_eq!(got.len(), expected.len());
            for (g, e) in got.iter().zip(&expected) {
                assert_eq!(g.concept_id, e.0);
                assert!((g.score - e.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ranking_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let raw = Array2::from_shape_fn((20, 6), |_| rng.random_range(-1.0..1.0));
        let meta: Vec<RowMeta> = (0..20)
            .map(|i| RowMeta {
                surface: format!("t{i}"),
                concept_id: format!("C{i}"),
            })
            .collect();
        let a = EmbeddingIndex::from_parts(raw.clone(), meta.clone(), Pooling::Cls).unwrap();
        let b = EmbeddingIndex::from_parts(raw * 7.3, meta, Pooling::Cls).unwrap();
        let q: Array1<f64> = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
        let ra: Vec<String> = top_k_vec(&a, q.view(), 20)
            .unwrap()
            .into_iter()
            .map(|m| m.concept_id)
            .collect();
        let rb: Vec<String> = top_k_vec(&b, q.view(), 20)
            .unwrap()
            .into_iter()
            .map(|m| m.concept_id)
            .collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn acc_at_k_exact_surfaces_and_monotonicity() {
        let (dict, params, vocab) = fixture();
        let index = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        let gold = vec![
            ("back pain".to_string(), "C1".to_string()),
            ("dorsalgia".to_string(), "C2".to_string()),
            ("headache".to_string(), "C3".to_string()),
        ];
        let accs = eval_acc_at_k(&index, &params, &vocab, &gold, &[1, 2, 3]).unwrap();
        assert_eq!(accs[0], (1, 1.0));
        // non-decreasing in k
        assert!(accs[0].1 <= accs[1].1 && accs[1].1 <= accs[2].1);
    }

    #[test]
    fn acc_at_k_with_adversarial_vectors() {
        // gold concept always ranked last in a 10-concept index
        let l = 4;
        let mut raw = Array2::<f64>::zeros((10, l));
        for i in 0..10 {
            raw[[i, 0]] = 1.0;
            raw[[i, 1]] = i as f64; // increasing angle from the query axis
        }
        let meta: Vec<RowMeta> = (0..10)
            .map(|i| RowMeta {
                surface: format!("t{i}"),
                concept_id: format!("C{i}"),
            })
            .collect();
        let index = EmbeddingIndex::from_parts(raw, meta, Pooling::Cls).unwrap();
        let q = ndarray::array![1.0f64, 0.0, 0.0, 0.0];
        let ranked = top_k_vec(&index, q.view(), 10).unwrap();
        assert_eq!(ranked[0].concept_id, "C0");
        assert_eq!(ranked[9].concept_id, "C9");
    }

    #[test]
    fn missing_gold_concept_is_reported() {
        let (dict, params, vocab) = fixture();
        let index = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        let gold = vec![("pain".to_string(), "C9".to_string())];
        match eval_acc_at_k(&index, &params, &vocab, &gold, &[1]) {
            Err(Error::MissingGold(msg)) => assert!(msg.contains("C9")),
            other => panic!("expected MissingGold, got {other:?}"),
        }
    }

    #[test]
    fn f1_cases() {
        let (dict, params, vocab) = fixture();
        let index = build_index(&dict, &params, &vocab, Pooling::Cls).unwrap();
        let set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();

        // all correct (exact surfaces rank first)
        let gold = vec![
            ("back pain".to_string(), set(&["C1", "C2"])),
            ("dorsalgia".to_string(), set(&["C2"])),
        ];
        let (p, r, f1) = eval_f1_one_cui(&index, &params, &vocab, &gold).unwrap();
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));

        // none correct
        let gold = vec![
            ("back pain".to_string(), set(&["C3"])),
            ("dorsalgia".to_string(), set(&["C3"])),
        ];
        let (_, _, f1) = eval_f1_one_cui(&index, &params, &vocab, &gold).unwrap();
        assert_eq!(f1, 0.0);

        // half correct
        let gold = vec![
            ("back pain".to_string(), set(&["C1"])),
            ("dorsalgia".to_string(), set(&["C3"])),
        ];
        let (_, _, f1) = eval_f1_one_cui(&index, &params, &vocab, &gold).unwrap();
        assert_eq!(f1, 0.5);
    }

    #[test]
    fn gold_file_parsers() {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(b"# comment\nback pain\tC1\ndolor\tC1,C2\n").unwrap();
        let multi = parse_gold_multi(f.path()).unwrap();
        assert_eq!(multi.len(), 2);
        assert_eq!(multi[1].1.len(), 2);
        assert!(matches!(
            parse_gold_single(f.path()),
            Err(Error::Parse { .. })
        ));

        let mut ok = NamedTempFile::new().unwrap();
        ok.write_all(b"back pain\tC1\n").unwrap();
        assert_eq!(
            parse_gold_single(ok.path()).unwrap(),
            vec![("back pain".to_string(), "C1".to_string())]
        );
    }

    #[test]
    fn export_writes_one_row_per_term() {
        let (dict, params, vocab) = fixture();
        let mut buf = Vec::new();
        export_embeddings(&dict, &params, &vocab, Pooling::Cls, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        let fields: Vec<&str> = lines[0].split('\t').collect();
        assert_eq!(fields.len(), 3);
        assert_eq!(fields[0], "C1");
        assert_eq!(fields[2].split(',').count(), 6);
    }
}
