//! Similarities, pair labels, online hard-pair mining, and multi-similarity
//! losses for term-term and term-relation-term pairs, with exact gradients.
//!
//! A batch of 2k embeddings is ordered head-block then tail-block. The
//! term-term block scores all 2k x 2k cosine pairs; the relation block scores
//! each (head term, relation) anchor against the k tail terms, either through
//! a per-relation matrix (`cos(M_r^T e_h, e_t)`) or a translation vector
//! (`-||e_h + r - e_t||`). Mining treats the selected index sets as constants,
//! so gradients flow only through mined pairs.

use crate::error::{Error, Result};
use crate::num::{from_f64, outer, Scalar};
use ndarray::{Array1, Array2, ArrayView1};

/// Exponent arguments are clamped here before `exp` to keep the loss finite;
/// a clamped term contributes zero gradient.
pub const EXP_CLAMP: f64 = 50.0;

/// Multi-similarity loss hyperparameters for both pair kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsLossParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub alpha_rel: f64,
    pub beta_rel: f64,
    pub lambda_rel: f64,
    pub epsilon_rel: f64,
    pub mu: f64,
}

/// One (alpha, beta, lambda, epsilon) quadruple as consumed by [`ms_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsQuad {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl MsLossParams {
    /// Default hyperparameters per similarity mode. The bounded cosine form
    /// shares one quadruple for both pair kinds; the translation form needs a
    /// center matched to the init-scale norm (similarities sit near -28) and
    /// softer scales because its similarity is unbounded.
    pub fn defaults_for(mode: RelMode) -> Self {
        match mode {
            RelMode::DistmultCos | RelMode::None => MsLossParams {
                alpha: 2.0,
                beta: 50.0,
                lambda: 0.5,
                epsilon: 0.1,
                alpha_rel: 2.0,
                beta_rel: 50.0,
                lambda_rel: 0.5,
                epsilon_rel: 0.1,
                mu: 1.0,
            },
            RelMode::TransE => MsLossParams {
                alpha: 2.0,
                beta: 50.0,
                lambda: 0.5,
                epsilon: 0.1,
                alpha_rel: 0.2,
                beta_rel: 5.0,
                lambda_rel: -28.0,
                epsilon_rel: 0.1,
                mu: 0.1,
            },
        }
    }

    pub fn term_quad(&self) -> MsQuad {
        MsQuad {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            epsilon: self.epsilon,
        }
    }

    pub fn rel_quad(&self) -> MsQuad {
        MsQuad {
            alpha: self.alpha_rel,
            beta: self.beta_rel,
            lambda: self.lambda_rel,
            epsilon: self.epsilon_rel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_rel", self.alpha_rel),
            ("beta_rel", self.beta_rel),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("epsilon", self.epsilon), ("epsilon_rel", self.epsilon_rel)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if self.mu < 0.0 || !self.mu.is_finite() {
            return Err(Error::InvalidConfig("mu must be >= 0".into()));
        }
        if !self.lambda.is_finite() || !self.lambda_rel.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Which term-relation-term similarity the relation block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelMode {
    /// `cos(M_r^T e_h, e_t)` with a trainable matrix per relation.
    DistmultCos,
    /// `-||e_h + r - e_t||` with a trainable vector per relation.
    TransE,
    /// Relation block disabled (term-term loss only).
    None,
}

impl std::fmt::Display for RelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RelMode::DistmultCos => write!(f, "distmult-cos"),
            RelMode::TransE => write!(f, "transe"),
            RelMode::None => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for RelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distmult-cos" => Ok(RelMode::DistmultCos),
            "transe" => Ok(RelMode::TransE),
            "none" => Ok(RelMode::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown rel mode {other:?} (expected distmult-cos, transe, or none)"
            ))),
        }
    }
}

/// Cosine similarity, defined as 0 when either vector has zero norm, and
/// clamped to [-1, 1] against floating-point drift.
pub fn cosine<F: Scalar>(u: ArrayView1<F>, v: ArrayView1<F>) -> F {
    let dot = u.dot(&v);
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == F::zero() || nv == F::zero() {
        return F::zero();
    }
    let c = dot / (nu * nv);
    c.min(F::one()).max(-F::one())
}

/// Partial derivatives of `g * cos(u, v)` added into `du`/`dv`.
/// Zero norms contribute nothing (subgradient choice matching `cosine`).
fn add_cosine_grad<F: Scalar>(
    u: ArrayView1<F>,
    v: ArrayView1<F>,
    g: F,
    du: &mut Array1<F>,
    dv: &mut Array1<F>,
) {
    let dot = u.dot(&v);
    let nu2 = u.dot(&u);
    let nv2 = v.dot(&v);
    if nu2 == F::zero() || nv2 == F::zero() {
        return;
    }
    let nu = nu2.sqrt();
    let nv = nv2.sqrt();
    let inv = F::one() / (nu * nv);
    let c = dot * inv;
    for i in 0..u.len() {
        du[i] += g * (v[i] * inv - c * u[i] / nu2);
        dv[i] += g * (u[i] * inv - c * v[i] / nv2);
    }
}

/// Term-term pair labels: `tau[i][j] = 1` iff the concepts are equal.
pub fn pair_labels(concept_ids: &[String]) -> Array2<bool> {
    let n = concept_ids.len();
    Array2::from_shape_fn((n, n), |(i, j)| concept_ids[i] == concept_ids[j])
}

/// Term-relation-term labels under the tail-equality proxy:
/// `tau_rel[i][j] = 1` iff the tail concepts at i and j are equal.
pub fn rel_pair_labels(tail_ids: &[String]) -> Array2<bool> {
    pair_labels(tail_ids)
}

/// `cos(M_r^T e_head, e_tail)`; equals plain cosine when `M_r = I`.
pub fn rel_similarity<F: Scalar>(
    e_head: ArrayView1<F>,
    m_r: &Array2<F>,
    e_tail: ArrayView1<F>,
) -> F {
    let u = m_r.t().dot(&e_head);
    cosine(u.view(), e_tail)
}

/// Translation similarity `-||e_head + r - e_tail||`; 0 at an exact match,
/// unbounded below.
pub fn transe_rel_similarity<F: Scalar>(
    e_head: ArrayView1<F>,
    r_vec: ArrayView1<F>,
    e_tail: ArrayView1<F>,
) -> F {
    let mut sq = F::zero();
    for i in 0..e_head.len() {
        let w = e_head[i] + r_vec[i] - e_tail[i];
        sq += w * w;
    }
    -sq.sqrt()
}

/// Online hard-pair mining for one anchor row.
///
/// The anchor is excluded from its own candidate set. Negatives harder than
/// the weakest positive (minus the margin) and positives weaker than the
/// strongest negative (plus the margin) are selected. With no positives in
/// the row the negative set is empty, and vice versa.
///
/// Returns `(positives, negatives)` in ascending index order.
pub fn mine_pairs<F: Scalar>(
    s_row: ArrayView1<F>,
    tau_row: ArrayView1<bool>,
    epsilon: f64,
    anchor: usize,
) -> (Vec<usize>, Vec<usize>) {
    let eps = from_f64::<F>(epsilon);
    let mut min_pos: Option<F> = None;
    let mut max_neg: Option<F> = None;
    for j in 0..s_row.len() {
        if j == anchor {
            continue;
        }
        let s = s_row[j];
        if tau_row[j] {
            min_pos = Some(match min_pos {
                Some(m) => m.min(s),
                None => s,
            });
        } else {
            max_neg = Some(match max_neg {
                Some(m) => m.max(s),
                None => s,
            });
        }
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for j in 0..s_row.len() {
        if j == anchor {
            continue;
        }
        let s = s_row[j];
        if tau_row[j] {
            if let Some(mn) = max_neg {
                if s < mn + eps {
                    positives.push(j);
                }
            }
        } else if let Some(mp) = min_pos {
            if s > mp - eps {
                negatives.push(j);
            }
        }
    }
    (positives, negatives)
}

fn clamped_exp(arg: f64) -> (f64, bool) {
    if arg > EXP_CLAMP {
        (EXP_CLAMP.exp(), true)
    } else {
        (arg.exp(), false)
    }
}

/// Multi-similarity loss over one labelled similarity matrix.
///
/// Returns the loss and its gradient with respect to every matrix entry
/// (mining sets treated as constants; anchors with an empty mined set
/// contribute log(1) = 0).
pub fn ms_loss<F: Scalar>(s: &Array2<F>, tau: &Array2<bool>, q: &MsQuad) -> Result<(F, Array2<F>)> {
    let n = s.nrows();
    if s.ncols() != n || tau.nrows() != n || tau.ncols() != n {
        return Err(Error::Shape(format!(
            "similarity matrix {}x{} and labels {}x{} must be square and equal",
            s.nrows(),
            s.ncols(),
            tau.nrows(),
            tau.ncols()
        )));
    }
    if let Some(bad) = s.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("similarity entry {bad}")));
    }
    if n == 0 {
        return Ok((F::zero(), Array2::zeros((0, 0))));
    }

    let mut loss = 0.0f64;
    let mut grad: Array2<F> = Array2::zeros((n, n));
    let inv_n = 1.0 / n as f64;

    for i in 0..n {
        let (positives, negatives) = mine_pairs(s.row(i), tau.row(i), q.epsilon, i);

        if !positives.is_empty() {
            let mut sum = 0.0;
            let mut terms = Vec::with_capacity(positives.len());
            for &j in &positives {
                let arg = -q.alpha * (crate::num::to_f64(s[[i, j]]) - q.lambda);
                let (e, clamped) = clamped_exp(arg);
                sum += e;
                terms.push((j, e, clamped));
            }
            loss += (1.0 + sum).ln() / q.alpha * inv_n;
            for (j, e, clamped) in terms {
                if !clamped {
                    grad[[i, j]] += from_f64::<F>(-e / (1.0 + sum) * inv_n);
                }
            }
        }

        if !negatives.is_empty() {
            let mut sum = 0.0;
            let mut terms = Vec::with_capacity(negatives.len());
            for &j in &negatives {
                let arg = q.beta * (crate::num::to_f64(s[[i, j]]) - q.lambda);
                let (e, clamped) = clamped_exp(arg);
                sum += e;
                terms.push((j, e, clamped));
            }
            loss += (1.0 + sum).ln() / q.beta * inv_n;
            for (j, e, clamped) in terms {
                if !clamped {
                    grad[[i, j]] += from_f64::<F>(e / (1.0 + sum) * inv_n);
                }
            }
        }
    }
    Ok((from_f64(loss), grad))
}

/// Similarity matrices and labels for one batch, mostly for inspection and
/// invariant tests; [`total_loss`] computes the same quantities inline.
#[derive(Debug, Clone)]
pub struct SimilarityBlock<F: Scalar> {
    /// 2k x 2k term-term cosine matrix, symmetric with unit diagonal.
    pub s: Array2<F>,
    /// k x k term-relation-term matrix (empty when the mode is `None`).
    pub s_rel: Array2<F>,
    pub tau: Array2<bool>,
    pub tau_rel: Array2<bool>,
}

fn term_similarities<F: Scalar>(embeddings: &Array2<F>) -> Array2<F> {
    let n = embeddings.nrows();
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        s[[i, i]] = F::one();
        for j in (i + 1)..n {
            let c = cosine(embeddings.row(i), embeddings.row(j));
            s[[i, j]] = c;
            s[[j, i]] = c;
        }
    }
    s
}

fn rel_similarities<F: Scalar>(
    embeddings: &Array2<F>,
    relation_ids: &[usize],
    rel_mats: &[Array2<F>],
    rel_vecs: &[Array1<F>],
    mode: RelMode,
) -> Result<(Array2<F>, Vec<Array1<F>>)> {
    let k = relation_ids.len();
    let mut s_rel = Array2::zeros((k, k));
    let mut transformed = Vec::with_capacity(k);
    for i in 0..k {
        let r = relation_ids[i];
        match mode {
            RelMode::DistmultCos => {
                let m = rel_mats.get(r).ok_or_else(|| {
                    Error::Shape(format!(
                        "relation id {r} has no matrix (have {})",
                        rel_mats.len()
                    ))
                })?;
                let u = m.t().dot(&embeddings.row(i));
                for j in 0..k {
                    s_rel[[i, j]] = cosine(u.view(), embeddings.row(k + j));
                }
                transformed.push(u);
            }
            RelMode::TransE => {
                let rv = rel_vecs.get(r).ok_or_else(|| {
                    Error::Shape(format!(
                        "relation id {r} has no vector (have {})",
                        rel_vecs.len()
                    ))
                })?;
                for j in 0..k {
                    s_rel[[i, j]] =
                        transe_rel_similarity(embeddings.row(i), rv.view(), embeddings.row(k + j));
                }
            }
            RelMode::None => unreachable!("rel_similarities not called in mode none"),
        }
    }
    Ok((s_rel, transformed))
}

/// Build all four matrices of one batch.
pub fn build_similarity_block<F: Scalar>(
    embeddings: &Array2<F>,
    concept_ids: &[String],
    relation_ids: &[usize],
    rel_mats: &[Array2<F>],
    rel_vecs: &[Array1<F>],
    mode: RelMode,
) -> Result<SimilarityBlock<F>> {
    check_batch_shape(embeddings, concept_ids, relation_ids)?;
    let k = relation_ids.len();
    let s = term_similarities(embeddings);
    let tau = pair_labels(concept_ids);
    let (s_rel, tau_rel) = if mode == RelMode::None {
        (Array2::zeros((0, 0)), Array2::from_elem((0, 0), false))
    } else {
        let (s_rel, _) = rel_similarities(embeddings, relation_ids, rel_mats, rel_vecs, mode)?;
        (s_rel, rel_pair_labels(&concept_ids[k..]))
    };
    Ok(SimilarityBlock {
        s,
        s_rel,
        tau,
        tau_rel,
    })
}

fn check_batch_shape<F: Scalar>(
    embeddings: &Array2<F>,
    concept_ids: &[String],
    relation_ids: &[usize],
) -> Result<()> {
    let n = embeddings.nrows();
    if n == 0 || n % 2 != 0 {
        return Err(Error::Shape(format!(
            "batch must hold 2k embeddings, got {n}"
        )));
    }
    if concept_ids.len() != n {
        return Err(Error::Shape(format!(
            "{} concept ids for {} embeddings",
            concept_ids.len(),
            n
        )));
    }
    if relation_ids.len() != n / 2 {
        return Err(Error::Shape(format!(
            "{} relation ids for k = {}",
            relation_ids.len(),
            n / 2
        )));
    }
    Ok(())
}

/// Loss value and exact gradients for one batch.
#[derive(Debug, Clone)]
pub struct TotalLoss<F: Scalar> {
    pub loss: F,
    pub term_loss: F,
    pub rel_loss: F,
    pub d_embeddings: Array2<F>,
    pub d_rel_mats: Vec<Array2<F>>,
    pub d_rel_vecs: Vec<Array1<F>>,
}

/// Term-term MS-loss plus `mu` times the relation MS-loss, with gradients for
/// the 2k embeddings and the relation tensors of the selected mode.
///
/// Embeddings are ordered head-block then tail-block; `relation_ids[i]` labels
/// the triplet at slot i. Mode `None` zeroes the relation term.
pub fn total_loss<F: Scalar>(
    embeddings: &Array2<F>,
    concept_ids: &[String],
    relation_ids: &[usize],
    rel_mats: &[Array2<F>],
    rel_vecs: &[Array1<F>],
    mode: RelMode,
    params: &MsLossParams,
) -> Result<TotalLoss<F>> {
    params.validate()?;
    check_batch_shape(embeddings, concept_ids, relation_ids)?;
    let k = relation_ids.len();
    let l = embeddings.ncols();

    let s = term_similarities(embeddings);
    let tau = pair_labels(concept_ids);
    let (term_loss, ds) = ms_loss(&s, &tau, &params.term_quad())?;

    let mut d_emb: Array2<F> = Array2::zeros(embeddings.raw_dim());
    for i in 0..2 * k {
        for j in 0..2 * k {
            let g = ds[[i, j]];
            if g == F::zero() || i == j {
                continue;
            }
            let (mut du, mut dv) = (Array1::zeros(l), Array1::zeros(l));
            add_cosine_grad(embeddings.row(i), embeddings.row(j), g, &mut du, &mut dv);
            for c in 0..l {
                d_emb[[i, c]] += du[c];
                d_emb[[j, c]] += dv[c];
            }
        }
    }

    let mut d_rel_mats: Vec<Array2<F>> = rel_mats
        .iter()
        .map(|m| Array2::zeros(m.raw_dim()))
        .collect();
    let mut d_rel_vecs: Vec<Array1<F>> = rel_vecs
        .iter()
        .map(|v| Array1::zeros(v.raw_dim()))
        .collect();
    let mut rel_loss = F::zero();

    if mode != RelMode::None && params.mu != 0.0 {
        let (s_rel, transformed) =
            rel_similarities(embeddings, relation_ids, rel_mats, rel_vecs, mode)?;
        let tau_rel = rel_pair_labels(&concept_ids[k..]);
        let (rl, ds_rel) = ms_loss(&s_rel, &tau_rel, &params.rel_quad())?;
        rel_loss = rl;
        let mu = from_f64::<F>(params.mu);

        for i in 0..k {
            let r = relation_ids[i];
            for j in 0..k {
                let g = ds_rel[[i, j]] * mu;
                if g == F::zero() {
                    continue;
                }
                match mode {
                    RelMode::DistmultCos => {
                        let u = &transformed[i];
                        let tail = embeddings.row(k + j);
                        let (mut du, mut dv) = (Array1::zeros(l), Array1::zeros(l));
                        add_cosine_grad(u.view(), tail, g, &mut du, &mut dv);
                        // u = M^T e_head: de_head = M du, dM = e_head du^T
                        let dh = rel_mats[r].dot(&du);
                        for c in 0..l {
                            d_emb[[i, c]] += dh[c];
                            d_emb[[k + j, c]] += dv[c];
                        }
                        let douter = outer(&embeddings.row(i).to_owned(), &du);
                        d_rel_mats[r] = &d_rel_mats[r] + &douter;
                    }
                    RelMode::TransE => {
                        let rv = &rel_vecs[r];
                        let head = embeddings.row(i);
                        let tail = embeddings.row(k + j);
                        let mut sq = F::zero();
                        let mut w = Array1::zeros(l);
                        for c in 0..l {
                            let x = head[c] + rv[c] - tail[c];
                            w[c] = x;
                            sq += x * x;
                        }
                        let nrm = sq.sqrt();
                        if nrm == F::zero() {
                            continue;
                        }
                        // S = -||w||, dS/dw = -w/||w||
                        for c in 0..l {
                            let dw = -w[c] / nrm * g;
                            d_emb[[i, c]] += dw;
                            d_rel_vecs[r][c] += dw;
                            d_emb[[k + j, c]] -= dw;
                        }
                    }
                    RelMode::None => unreachable!(),
                }
            }
        }
    }

    let loss = term_loss + from_f64::<F>(params.mu) * rel_loss;
    Ok(TotalLoss {
        loss,
        term_loss,
        rel_loss,
        d_embeddings: d_emb,
        d_rel_mats,
        d_rel_vecs,
    })
}
