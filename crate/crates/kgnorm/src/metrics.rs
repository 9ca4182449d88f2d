//! Semantic-neighborhood measure and the relation-classification probe.
//!
//! The neighborhood measure scores how many same-semantic-type concepts sit
//! among each concept's k nearest neighbors, discounted by rank. The probe is
//! a linear softmax classifier over concatenated head/tail concept embeddings,
//! trained with cross-entropy either on frozen embeddings (feature mode) or
//! jointly with the encoder (fine-tune mode).

use crate::encoder::{EncoderParams, ParamGrads, Pooling};
use crate::error::{Error, Result};
use crate::kg_store::ConceptDictionary;
use crate::normalizer::{embed_term, EmbeddingIndex, RowMeta};
use crate::num::{from_f64, outer, to_f64, Scalar};
use crate::tokenizer::{tokenize, TokenSequence, Vocab};
use crate::trainer::{adamw_update_slice, AdamHyper};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// How a concept is represented by a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConceptRepr {
    /// Preferred-term embedding (default).
    #[default]
    Preferred,
    /// Mean over all synonym embeddings.
    SynonymMean,
}

impl std::str::FromStr for ConceptRepr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preferred" => Ok(ConceptRepr::Preferred),
            "mean" => Ok(ConceptRepr::SynonymMean),
            other => Err(Error::InvalidConfig(format!(
                "unknown concept representation {other:?} (expected preferred or mean)"
            ))),
        }
    }
}

/// One unit-normalized row per concept, in dictionary (id) order.
pub fn concept_index<F: Scalar>(
    dict: &ConceptDictionary,
    params: &EncoderParams<F>,
    vocab: &Vocab,
    pooling: Pooling,
    repr: ConceptRepr,
) -> Result<EmbeddingIndex<F>> {
    let l = params.dims.d_embed;
    let mut raw: Vec<F> = Vec::new();
    let mut meta = Vec::new();
    for concept in dict.iter() {
        let e = match repr {
            ConceptRepr::Preferred => {
                embed_term(params, vocab, &concept.preferred_term().surface, pooling)?
            }
            ConceptRepr::SynonymMean => {
                let mut sum: Array1<F> = Array1::zeros(l);
                for term in &concept.terms {
                    sum = sum + embed_term(params, vocab, &term.surface, pooling)?;
                }
                sum / F::from_usize(concept.terms.len()).unwrap()
            }
        };
        raw.extend(e.iter().copied());
        meta.push(RowMeta {
            surface: concept.preferred_term().surface.clone(),
            concept_id: concept.id.clone(),
        });
    }
    let rows =
        Array2::from_shape_vec((meta.len(), l), raw).map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingIndex::from_parts(rows, meta, pooling)
}

/// Rank-discounted weight sum `sum_{i=1}^{k} 1/log2(i+1)`, the analytic
/// maximum of the neighborhood measure.
pub fn mcsm_upper_bound(k: usize) -> f64 {
    (1..=k).map(|i| 1.0 / ((i + 1) as f64).log2()).sum()
}

/// Average discounted count of same-type concepts among each type-T
/// concept's k nearest neighbors by cosine.
///
/// The query concept is excluded from its own neighbor list; ties break by
/// ascending concept id; multi-type concepts count as type T if T is in
/// their type set.
pub fn mcsm<F: Scalar>(
    dict: &ConceptDictionary,
    index: &EmbeddingIndex<F>,
    semantic_type: &str,
    k: usize,
) -> Result<f64> {
    let n = index.len();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if k >= n {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must be smaller than the concept count {n}"
        )));
    }
    let has_type: Vec<bool> = index
        .meta()
        .iter()
        .map(|m| {
            dict.get(&m.concept_id)
                .map(|c| c.semantic_types.contains(semantic_type))
                .unwrap_or(false)
        })
        .collect();
    let queries: Vec<usize> = (0..n).filter(|&i| has_type[i]).collect();
    if queries.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no concepts with semantic type {semantic_type:?}"
        )));
    }

    let mut total = 0.0f64;
    for &q in &queries {
        let qrow = index.rows().row(q);
        let mut scored: Vec<(usize, F)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (j, index.rows().row(j).dot(&qrow)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then_with(|| {
                    index.meta()[a.0]
                        .concept_id
                        .cmp(&index.meta()[b.0].concept_id)
                })
        });
        for (rank, (j, _)) in scored.iter().take(k).enumerate() {
            if has_type[*j] {
                total += 1.0 / ((rank + 2) as f64).log2();
            }
        }
    }
    Ok(total / queries.len() as f64)
}

// ---- relation-classification probe ----

/// Linear softmax classifier over `[e_head, e_tail]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel<F: Scalar> {
    /// `C x 2l` weight matrix.
    pub w: Array2<F>,
    pub b: Array1<F>,
    /// Class labels in index order (sorted lexicographically).
    pub classes: Vec<String>,
}

impl<F: Scalar> ProbeModel<F> {
    pub fn zeros(n_classes: usize, feat_dim: usize) -> Self {
        ProbeModel {
            w: Array2::zeros((n_classes, feat_dim)),
            b: Array1::zeros(n_classes),
            classes: (0..n_classes).map(|i| format!("class{i}")).collect(),
        }
    }

    /// Softmax class probabilities for one feature vector.
    pub fn predict_probs(&self, feat: &Array1<F>) -> Array1<F> {
        let logits = self.w.dot(feat) + &self.b;
        let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
        let exp = logits.mapv(|z| (z - max).exp());
        let denom = exp.sum();
        exp / denom
    }

    /// Argmax class; ties break toward the lowest class index.
    pub fn predict_class(&self, feat: &Array1<F>) -> usize {
        let p = self.predict_probs(feat);
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        best
    }
}

/// Fixed-embedding probe dataset.
#[derive(Debug, Clone)]
pub struct ProbeData<F: Scalar> {
    pub heads: Array2<F>,
    pub tails: Array2<F>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

/// Training settings; learning rates follow the probe defaults (1e-3 for the
/// classifier head, 2e-5 for the encoder when fine-tuning, 50 epochs, batch
/// 512 feature / 96 fine-tune).
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            batch_size: 512,
            lr_head: 1e-3,
            lr_encoder: 2e-5,
            seed: 0,
        }
    }
}

/// Trained probe plus the seeded 4:1 split it used.
#[derive(Debug, Clone)]
pub struct ProbeOutcome<F: Scalar> {
    pub model: ProbeModel<F>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub test_accuracy: f64,
}

fn check_probe_data<F: Scalar>(data: &ProbeData<F>) -> Result<()> {
    let n = data.labels.len();
    if data.heads.nrows() != n || data.tails.nrows() != n {
        return Err(Error::Shape("probe rows and labels disagree".into()));
    }
    let distinct: BTreeSet<usize> = data.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidInput(
            "probe needs at least 2 classes in the data".into(),
        ));
    }
    if n < 5 {
        return Err(Error::InvalidInput(
            "too few pairs for a 4:1 train/test split".into(),
        ));
    }
    Ok(())
}

/// Seeded shuffle then 4:1 train/test split.
fn split_indices(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (n * 4) / 5;
    let test = idx.split_off(n_train);
    (idx, test)
}

fn concat_feat<F: Scalar>(h: ndarray::ArrayView1<F>, t: ndarray::ArrayView1<F>) -> Array1<F> {
    let mut feat = Array1::zeros(h.len() + t.len());
    for (i, &x) in h.iter().enumerate() {
        feat[i] = x;
    }
    for (i, &x) in t.iter().enumerate() {
        feat[h.len() + i] = x;
    }
    feat
}

/// Cross-entropy of one example plus `d logits`.
fn ce_and_dlogits<F: Scalar>(model: &ProbeModel<F>, feat: &Array1<F>, label: usize) -> (f64, Array1<F>) {
    let p = model.predict_probs(feat);
    let loss = -to_f64(p[label]).max(1e-300).ln();
    let mut dz = p;
    dz[label] -= F::one();
    (loss, dz)
}

/// Train the probe on frozen embeddings (feature mode): only W and b update.
pub fn probe_train_feature<F: Scalar>(
    data: &ProbeData<F>,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome<F>> {
    check_probe_data(data)?;
    let n = data.labels.len();
    let feat_dim = data.heads.ncols() + data.tails.ncols();
    let n_classes = data.classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, test_idx) = split_indices(n, &mut rng);

    let mut model = ProbeModel::zeros(n_classes, feat_dim);
    model.classes = data.classes.clone();
    let mut mw = Array2::<F>::zeros(model.w.raw_dim());
    let mut vw = Array2::<F>::zeros(model.w.raw_dim());
    let mut mb = Array1::<F>::zeros(n_classes);
    let mut vb = Array1::<F>::zeros(n_classes);
    let hyper = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    let mut t = 0u64;

    let mut order = train_idx.clone();
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut dw = Array2::<F>::zeros(model.w.raw_dim());
            let mut db = Array1::<F>::zeros(n_classes);
            let scale = from_f64::<F>(1.0 / chunk.len() as f64);
            for &ex in chunk {
                let feat = concat_feat(data.heads.row(ex), data.tails.row(ex));
                let (_, dz) = ce_and_dlogits(&model, &feat, data.labels[ex]);
                dw = dw + outer(&dz, &feat) * scale;
                db = db + dz * scale;
            }
            t += 1;
            adamw_update_slice(
                model.w.as_slice_mut().unwrap(),
                dw.as_slice().unwrap(),
                mw.as_slice_mut().unwrap(),
                vw.as_slice_mut().unwrap(),
                t,
                cfg.lr_head,
                &hyper,
            );
            adamw_update_slice(
                model.b.as_slice_mut().unwrap(),
                db.as_slice().unwrap(),
                mb.as_slice_mut().unwrap(),
                vb.as_slice_mut().unwrap(),
                t,
                cfg.lr_head,
                &hyper,
            );
        }
    }

    let test_accuracy = probe_eval(&model, data, &test_idx)?;
    Ok(ProbeOutcome {
        model,
        train_idx,
        test_idx,
        test_accuracy,
    })
}

/// Argmax-class accuracy over the given examples.
pub fn probe_eval<F: Scalar>(
    model: &ProbeModel<F>,
    data: &ProbeData<F>,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut correct = 0usize;
    for &ex in indices {
        let feat = concat_feat(data.heads.row(ex), data.tails.row(ex));
        if model.predict_class(&feat) == data.labels[ex] {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Raw term pairs for fine-tune mode.
#[derive(Debug, Clone)]
pub struct TermPairs {
    pub head_terms: Vec<String>,
    pub tail_terms: Vec<String>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

/// Train the probe with the encoder unfrozen: the classifier head updates at
/// `lr_head` and every encoder tensor at `lr_encoder`, both via AdamW.
/// Terms are embedded with `[CLS]` pooling.
pub fn probe_train_finetune<F: Scalar>(
    pairs: &TermPairs,
    mut params: EncoderParams<F>,
    vocab: &Vocab,
    cfg: &ProbeConfig,
) -> Result<(ProbeOutcome<F>, EncoderParams<F>)> {
    let n = pairs.labels.len();
    let distinct: BTreeSet<usize> = pairs.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidInput(
            "probe needs at least 2 classes in the data".into(),
        ));
    }
    if n < 5 {
        return Err(Error::InvalidInput(
            "too few pairs for a 4:1 train/test split".into(),
        ));
    }
    let tokens: Vec<(TokenSequence, TokenSequence)> = pairs
        .head_terms
        .iter()
        .zip(&pairs.tail_terms)
        .map(|(h, t)| {
            Ok((
                tokenize(h, vocab, params.dims.max_len)?,
                tokenize(t, vocab, params.dims.max_len)?,
            ))
        })
        .collect::<Result<_>>()?;

    let l = params.dims.d_embed;
    let n_classes = pairs.classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, test_idx) = split_indices(n, &mut rng);

    let mut model = ProbeModel::<F>::zeros(n_classes, 2 * l);
    model.classes = pairs.classes.clone();
    let mut mw = Array2::<F>::zeros(model.w.raw_dim());
    let mut vw = Array2::<F>::zeros(model.w.raw_dim());
    let mut mb = Array1::<F>::zeros(n_classes);
    let mut vb = Array1::<F>::zeros(n_classes);
    let mut m_enc = ParamGrads::zeros_like(&params);
    let mut v_enc = ParamGrads::zeros_like(&params);
    let hyper = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    let mut t = 0u64;

    let mut order = train_idx.clone();
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut dw = Array2::<F>::zeros(model.w.raw_dim());
            let mut db = Array1::<F>::zeros(n_classes);
            let mut enc_grads = ParamGrads::zeros_like(&params);
            let scale = from_f64::<F>(1.0 / chunk.len() as f64);
            for &ex in chunk {
                let (ht, tt) = &tokens[ex];
                let (hh, hc) = crate::encoder::forward_cached(&params, ht)?;
                let (th, tc) = crate::encoder::forward_cached(&params, tt)?;
                let eh = Pooling::Cls.apply(&hh);
                let et = Pooling::Cls.apply(&th);
                let feat = concat_feat(eh.view(), et.view());
                let (_, dz) = ce_and_dlogits(&model, &feat, pairs.labels[ex]);
                dw = dw + outer(&dz, &feat) * scale;
                db = db + &dz * scale;
                // d feat = W^T dz, split into head and tail halves
                let dfeat = model.w.t().dot(&dz) * scale;
                let dh_emb = dfeat.slice(ndarray::s![..l]).to_owned();
                let dt_emb = dfeat.slice(ndarray::s![l..]).to_owned();
                let dh = Pooling::Cls.backward(&dh_emb, &ht.attention_mask);
                crate::encoder::accumulate_backward(&params, ht, &hc, &dh, &mut enc_grads)?;
                let dt = Pooling::Cls.backward(&dt_emb, &tt.attention_mask);
                crate::encoder::accumulate_backward(&params, tt, &tc, &dt, &mut enc_grads)?;
            }
            t += 1;
            adamw_update_slice(
                model.w.as_slice_mut().unwrap(),
                dw.as_slice().unwrap(),
                mw.as_slice_mut().unwrap(),
                vw.as_slice_mut().unwrap(),
                t,
                cfg.lr_head,
                &hyper,
            );
            adamw_update_slice(
                model.b.as_slice_mut().unwrap(),
                db.as_slice().unwrap(),
                mb.as_slice_mut().unwrap(),
                vb.as_slice_mut().unwrap(),
                t,
                cfg.lr_head,
                &hyper,
            );
            let relations = params.relations.clone();
            for (((_, p), (_, g)), ((_, m), (_, v))) in params
                .tensors_mut()
                .into_iter()
                .zip(enc_grads.tensors(&relations))
                .zip(
                    m_enc
                        .tensors_mut(&relations)
                        .into_iter()
                        .zip(v_enc.tensors_mut(&relations)),
                )
            {
                adamw_update_slice(p, g, m, v, t, cfg.lr_encoder, &hyper);
            }
        }
    }

    // evaluate with the fine-tuned encoder
    let mut correct = 0usize;
    for &ex in &test_idx {
        let (ht, tt) = &tokens[ex];
        let eh = Pooling::Cls.apply(&crate::encoder::forward(&params, ht)?);
        let et = Pooling::Cls.apply(&crate::encoder::forward(&params, tt)?);
        let feat = concat_feat(eh.view(), et.view());
        if model.predict_class(&feat) == pairs.labels[ex] {
            correct += 1;
        }
    }
    let test_accuracy = correct as f64 / test_idx.len() as f64;
    Ok((
        ProbeOutcome {
            model,
            train_idx,
            test_idx,
            test_accuracy,
        },
        params,
    ))
}

/// Parse a relation-pair file: `HEAD_CUI <TAB> TAIL_CUI <TAB> CLASS_LABEL`.
/// Returns the raw pairs plus the sorted class inventory.
pub fn parse_probe_pairs(path: &Path) -> Result<(Vec<(String, String, String)>, Vec<String>)> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut classes = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `HEAD_CUI<TAB>TAIL_CUI<TAB>CLASS`".to_string(),
            });
        }
        classes.insert(fields[2].to_string());
        out.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
        ));
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no pairs in {}",
            path.display()
        )));
    }
    Ok((out, classes.into_iter().collect()))
}
