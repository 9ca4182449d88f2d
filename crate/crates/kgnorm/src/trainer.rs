//! Optimization loop: AdamW with linear warmup/decay, gradient accumulation,
//! periodic checkpoints, and a finite-difference gradient checker.
//!
//! Update u (0-based) uses `lr_at(u)`; bias correction uses the post-increment
//! step count, so the first update is corrected with t = 1. Gradient
//! accumulation sums the losses of independently mined micro-batches; the
//! summed gradient feeds one optimizer step.

use crate::contrastive::{total_loss, MsLossParams, RelMode};
use crate::encoder::{
    accumulate_backward, forward_cached, save_checkpoint, EncoderDims, EncoderParams, ParamGrads,
    Pooling,
};
use crate::error::{Error, Result};
use crate::kg_store::{load_concepts, load_relations, Concept, ConceptDictionary, RelationStore, RelationTriplet, Term};
use crate::num::{from_f64, Scalar};
use crate::sampler::{sample_batch, TrainingBatch};
use crate::tokenizer::{build_vocab_tokens, load_vocab, Vocab};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Piecewise-linear learning-rate schedule: 0 -> peak over `warmup_steps`,
/// then peak -> 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.peak <= 0.0 || !self.peak.is_finite() {
            return Err(Error::InvalidConfig("peak learning rate must be positive".into()));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup ({}) must be smaller than total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at step t; 0 beyond `total_steps`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if t > self.total_steps {
            return 0.0;
        }
        if t <= self.warmup_steps && self.warmup_steps > 0 {
            self.peak * t as f64 / self.warmup_steps as f64
        } else {
            let denom = (self.total_steps - self.warmup_steps) as f64;
            if denom == 0.0 {
                return 0.0;
            }
            self.peak * (self.total_steps - t) as f64 / denom
        }
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators plus the step counter and schedule.
pub struct OptimizerState<F: Scalar> {
    pub m: ParamGrads<F>,
    pub v: ParamGrads<F>,
    pub t: u64,
    pub hyper: AdamHyper,
    pub schedule: LrSchedule,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &EncoderParams<F>, hyper: AdamHyper, schedule: LrSchedule) -> Self {
        OptimizerState {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            t: 0,
            hyper,
            schedule,
        }
    }
}

/// Core AdamW update on one flat tensor. Decoupled weight decay is applied
/// before the moment-based update; `t_after` is the step count including this
/// update (so the first call passes 1).
pub fn adamw_update_slice<F: Scalar>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    t_after: u64,
    lr: f64,
    hyper: &AdamHyper,
) {
    let lr = from_f64::<F>(lr);
    let b1 = from_f64::<F>(hyper.beta1);
    let b2 = from_f64::<F>(hyper.beta2);
    let eps = from_f64::<F>(hyper.eps);
    let wd = from_f64::<F>(hyper.weight_decay);
    let one = F::one();
    let bc1 = one - b1.powi(t_after as i32);
    let bc2 = one - b2.powi(t_after as i32);
    for i in 0..param.len() {
        param[i] = param[i] - lr * wd * param[i];
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] = param[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One optimizer step over every tensor. The learning rate comes from the
/// schedule at the pre-increment step index.
pub fn adamw_step<F: Scalar>(
    params: &mut EncoderParams<F>,
    grads: &ParamGrads<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    for (name, g) in grads.tensors(&params.relations) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let lr = state.schedule.lr_at(state.t);
    state.t += 1;
    let t_after = state.t;
    let relations = params.relations.clone();
    let hyper = state.hyper;
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors(&relations))
        .zip(
            state
                .m
                .tensors_mut(&relations)
                .into_iter()
                .zip(state.v.tensors_mut(&relations)),
        )
    {
        adamw_update_slice(p, g, m, v, t_after, lr, &hyper);
    }
    Ok(())
}

/// Encode a whole batch (heads then tails) with the given pooling, returning
/// the 2k x l embedding matrix and per-sequence caches for backward.
pub fn encode_batch<F: Scalar>(
    params: &EncoderParams<F>,
    batch: &TrainingBatch,
    pooling: Pooling,
) -> Result<(
    Array2<F>,
    Vec<(crate::encoder::HiddenStates<F>, crate::encoder::ForwardCache<F>)>,
)> {
    let k = batch.k();
    let l = params.dims.d_embed;
    let mut embeddings = Array2::zeros((2 * k, l));
    let mut caches = Vec::with_capacity(2 * k);
    for (row, tokens) in batch
        .head_terms
        .iter()
        .chain(batch.tail_terms.iter())
        .enumerate()
    {
        let (hidden, cache) = forward_cached(params, tokens)?;
        let e = pooling.apply(&hidden);
        embeddings.row_mut(row).assign(&e);
        caches.push((hidden, cache));
    }
    Ok((embeddings, caches))
}

/// Loss of one batch plus exact gradients for every parameter, accumulated
/// into `grads`. Returns (loss, term loss, rel loss).
pub fn batch_loss_and_grads<F: Scalar>(
    params: &EncoderParams<F>,
    batch: &TrainingBatch,
    mode: RelMode,
    ms: &MsLossParams,
    pooling: Pooling,
    grads: &mut ParamGrads<F>,
) -> Result<(F, F, F)> {
    let k = batch.k();
    let (embeddings, caches) = encode_batch(params, batch, pooling)?;
    let out = total_loss(
        &embeddings,
        &batch.concept_ids,
        &batch.relation_ids,
        &params.rel_mats,
        &params.rel_vecs,
        mode,
        ms,
    )?;
    for (r, dm) in out.d_rel_mats.iter().enumerate() {
        grads.rel_mats[r] = &grads.rel_mats[r] + dm;
    }
    for (r, dv) in out.d_rel_vecs.iter().enumerate() {
        grads.rel_vecs[r] = &grads.rel_vecs[r] + dv;
    }
    for (row, tokens) in batch
        .head_terms
        .iter()
        .chain(batch.tail_terms.iter())
        .enumerate()
    {
        let d_emb = out.d_embeddings.row(row).to_owned();
        let dh = pooling.backward(&d_emb, &tokens.attention_mask);
        accumulate_backward(params, tokens, &caches[row].1, &dh, grads)?;
    }
    let _ = k;
    Ok((out.loss, out.term_loss, out.rel_loss))
}

/// Loss only, for finite differencing.
pub fn batch_loss<F: Scalar>(
    params: &EncoderParams<F>,
    batch: &TrainingBatch,
    mode: RelMode,
    ms: &MsLossParams,
    pooling: Pooling,
) -> Result<F> {
    let (embeddings, _) = encode_batch(params, batch, pooling)?;
    let out = total_loss(
        &embeddings,
        &batch.concept_ids,
        &batch.relation_ids,
        &params.rel_mats,
        &params.rel_vecs,
        mode,
        ms,
    )?;
    Ok(out.loss)
}

/// Full training configuration. Defaults are the desk-scale setup; the
/// paper-scale regime (k = 128, m = 8, 2e-5 peak over 100K steps with 10K
/// warmup and accumulation 8) is reachable through the same knobs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub concepts: PathBuf,
    pub relations: PathBuf,
    pub vocab: PathBuf,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub d_model: usize,
    pub d_ffn: usize,
    pub d_embed: usize,
    pub max_len: usize,
    pub k: usize,
    pub m: usize,
    pub steps: u64,
    pub warmup: u64,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub grad_accum: usize,
    pub mode: RelMode,
    pub ms: MsLossParams,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            concepts: PathBuf::new(),
            relations: PathBuf::new(),
            vocab: PathBuf::new(),
            out: PathBuf::new(),
            log: None,
            d_model: 64,
            d_ffn: 128,
            d_embed: 64,
            max_len: 32,
            k: 32,
            m: 4,
            steps: 2000,
            warmup: 200,
            lr_peak: 1e-3,
            weight_decay: 0.01,
            grad_accum: 1,
            mode: RelMode::DistmultCos,
            ms: MsLossParams::defaults_for(RelMode::DistmultCos),
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        crate::sampler::check_batch_params(self.k, self.m)?;
        self.ms.validate()?;
        if self.steps > 0 {
            LrSchedule {
                peak: self.lr_peak,
                warmup_steps: self.warmup,
                total_steps: self.steps,
            }
            .validate()?;
        }
        if self.grad_accum == 0 {
            return Err(Error::InvalidConfig("grad_accum must be >= 1".into()));
        }
        if self.max_len < 3 {
            return Err(Error::InvalidConfig("max_len must be >= 3".into()));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("d_embed", self.d_embed),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr_peak,
            warmup_steps: self.warmup,
            total_steps: self.steps,
        }
    }
}

fn periodic_path(out: &Path, step: u64) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "checkpoint".to_string());
    let ext = out
        .extension()
        .map(|s| format!(".{}", s.to_string_lossy()))
        .unwrap_or_default();
    out.with_file_name(format!("{stem}-step{step:06}{ext}"))
}

/// Run the training loop and write the final checkpoint to `config.out`.
///
/// Deterministic given the config: identical runs produce bitwise-identical
/// checkpoints and logs. Terms are encoded by their `[CLS]` representation.
pub fn train<F: Scalar>(config: &TrainConfig) -> Result<PathBuf> {
    config.validate()?;
    let dict = load_concepts(&config.concepts)?;
    let store = load_relations(&config.relations, &dict)?;
    let vocab = load_vocab(&config.vocab)?;
    train_loaded::<F>(config, &dict, &store, &vocab)
}

/// Training body over pre-loaded inputs.
pub fn train_loaded<F: Scalar>(
    config: &TrainConfig,
    dict: &ConceptDictionary,
    store: &RelationStore,
    vocab: &Vocab,
) -> Result<PathBuf> {
    config.validate()?;
    if store.is_empty() {
        return Err(Error::InvalidInput("relation store is empty".into()));
    }
    let dims = EncoderDims {
        vocab: vocab.len(),
        d_model: config.d_model,
        d_ffn: config.d_ffn,
        d_embed: config.d_embed,
        max_len: config.max_len,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: EncoderParams<F> =
        EncoderParams::init(dims, store.labels.clone(), &mut init_rng);
    let mut state = OptimizerState::new(&params, AdamHyper {
        weight_decay: config.weight_decay,
        ..AdamHyper::default()
    }, config.schedule());
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));

    let mut log_file = match &config.log {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "# step\tlr\tloss\tloss_term\tloss_rel")?;
            Some(f)
        }
        None => None,
    };

    for step in 0..config.steps {
        let mut grads = ParamGrads::zeros_like(&params);
        let mut loss_sum = 0.0f64;
        let mut term_sum = 0.0f64;
        let mut rel_sum = 0.0f64;
        for _ in 0..config.grad_accum {
            let batch = sample_batch(
                dict,
                store,
                vocab,
                config.k,
                config.m,
                config.max_len,
                &mut sample_rng,
            )?;
            let (loss, term, rel) = batch_loss_and_grads(
                &params,
                &batch,
                config.mode,
                &config.ms,
                Pooling::Cls,
                &mut grads,
            )?;
            loss_sum += crate::num::to_f64(loss);
            term_sum += crate::num::to_f64(term);
            rel_sum += crate::num::to_f64(rel);
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let lr = state.schedule.lr_at(state.t);
        adamw_step(&mut params, &grads, &mut state)?;

        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{step}\t{lr}\t{loss_sum}\t{term_sum}\t{rel_sum}")?;
        }
        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            eprintln!(
                "step {}/{} lr {lr:.3e} loss {loss_sum:.6} (term {term_sum:.6} rel {rel_sum:.6})",
                step + 1,
                config.steps
            );
        }
        if config.checkpoint_every > 0
            && (step + 1) % config.checkpoint_every == 0
            && step + 1 < config.steps
        {
            save_checkpoint(&params, &periodic_path(&config.out, step + 1))?;
        }
    }

    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    save_checkpoint(&params, &config.out)?;
    Ok(config.out.clone())
}

// ---- gradient checking ----

/// Central finite difference of a scalar function.
pub fn central_diff<G: Fn(f64) -> f64>(f: G, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Configuration for the finite-difference gradient check. Runs on a small
/// synthetic graph built in memory; float64 only.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub k: usize,
    pub m: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub d_embed: usize,
    pub max_len: usize,
    pub mode: RelMode,
    pub seed: u64,
    /// Coordinates sampled per tensor.
    pub coords_per_tensor: usize,
    pub fd_step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            k: 8,
            m: 2,
            d_model: 16,
            d_ffn: 32,
            d_embed: 16,
            max_len: 12,
            mode: RelMode::DistmultCos,
            seed: 12345,
            coords_per_tensor: 13,
            fd_step: 1e-5,
        }
    }
}

/// One checked coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// Tensors whose worst coordinate exceeds the tolerance.
    pub fn flagged(&self, tol: f64) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if e.rel_err > tol && !out.contains(&e.tensor) {
                out.push(e.tensor.clone());
            }
        }
        out
    }

    pub fn worst_per_tensor(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(t, _)| t == &e.tensor) {
                Some((_, w)) => *w = w.max(e.rel_err),
                None => out.push((e.tensor.clone(), e.rel_err)),
            }
        }
        out
    }
}

/// Relative error with an absolute floor so FD roundoff noise on near-zero
/// gradients does not register as disagreement.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Tiny in-memory graph for gradient checks: one triplet per relation so a
/// k/m = 4 batch covers every relation tensor.
fn gradcheck_fixture() -> (ConceptDictionary, RelationStore, Vocab) {
    let words = [
        ["muvora", "tilden"],
        ["rasquel", "ondira"],
        ["veltapi", "junor"],
        ["cromell", "baxin"],
        ["seldova", "pirant"],
        ["quombra", "efton"],
        ["lurvane", "dokkal"],
        ["yentira", "wosp"],
    ];
    let mut concepts = Vec::new();
    for (i, pair) in words.iter().enumerate() {
        let kind = if i < 4 { "H" } else { "T" };
        let idx = i % 4;
        concepts.push(Concept {
            id: format!("{kind}{idx}"),
            semantic_types: BTreeSet::from(["T0".to_string()]),
            terms: pair
                .iter()
                .map(|w| Term {
                    surface: w.to_string(),
                    language: "en".to_string(),
                })
                .collect(),
            preferred_index: 0,
        });
    }
    let dict = ConceptDictionary::from_concepts(concepts).unwrap();
    let triplets = (0..4)
        .map(|i| RelationTriplet {
            head: format!("H{i}"),
            relation: format!("rel_{i}"),
            tail: format!("T{i}"),
        })
        .collect();
    let store = RelationStore::from_triplets(triplets, &dict).unwrap();
    let vocab = Vocab::from_tokens(build_vocab_tokens(&dict, 4096, 8)).unwrap();
    (dict, store, vocab)
}

/// Compare analytic gradients against central finite differences over
/// sampled coordinates of every tensor.
fn compare_with_fd(
    params: &EncoderParams<f64>,
    batch: &TrainingBatch,
    mode: RelMode,
    ms: &MsLossParams,
    analytic: &ParamGrads<f64>,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    use rand::Rng;
    let names: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, s)| (n, s.len()))
        .collect();
    let mut entries = Vec::new();
    let mut max_rel_err = 0.0f64;
    for (ti, (name, len)) in names.iter().enumerate() {
        for _ in 0..cfg.coords_per_tensor {
            let ci = rng.random_range(0..*len);
            let mut up = params.clone();
            up.tensors_mut()[ti].1[ci] += cfg.fd_step;
            let lu = crate::num::to_f64(batch_loss(&up, batch, mode, ms, Pooling::Cls)?);
            let mut dn = params.clone();
            dn.tensors_mut()[ti].1[ci] -= cfg.fd_step;
            let ld = crate::num::to_f64(batch_loss(&dn, batch, mode, ms, Pooling::Cls)?);
            let numeric = (lu - ld) / (2.0 * cfg.fd_step);
            let an = analytic.tensors(&params.relations)[ti].1[ci];
            let err = rel_err(an, numeric);
            max_rel_err = max_rel_err.max(err);
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                coord: ci,
                analytic: an,
                numeric,
                rel_err: err,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err,
    })
}

/// Build the fixture, compute analytic gradients of the full training loss,
/// and verify them against central finite differences.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (dict, store, vocab) = gradcheck_fixture();
    let dims = EncoderDims {
        vocab: vocab.len(),
        d_model: cfg.d_model,
        d_ffn: cfg.d_ffn,
        d_embed: cfg.d_embed,
        max_len: cfg.max_len,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params: EncoderParams<f64> = EncoderParams::init(dims, store.labels.clone(), &mut rng);
    let ms = MsLossParams::defaults_for(cfg.mode);
    let batch = sample_batch(&dict, &store, &vocab, cfg.k, cfg.m, cfg.max_len, &mut rng)?;

    let mut analytic = ParamGrads::zeros_like(&params);
    batch_loss_and_grads(&params, &batch, cfg.mode, &ms, Pooling::Cls, &mut analytic)?;

    compare_with_fd(&params, &batch, cfg.mode, &ms, &analytic, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn lr_schedule_hits_endpoints_exactly() {
        let s = LrSchedule {
            peak: 2e-5,
            warmup_steps: 10_000,
            total_steps: 100_000,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10_000), 2e-5);
        assert_eq!(s.lr_at(100_000), 0.0);
        assert_eq!(s.lr_at(100_001), 0.0);
    }

    #[test]
    fn lr_schedule_is_continuous_piecewise_linear() {
        let s = LrSchedule {
            peak: 1.0,
            warmup_steps: 10,
            total_steps: 50,
        };
        // linear up
        for t in 0..=10u64 {
            assert!((s.lr_at(t) - t as f64 / 10.0).abs() < 1e-15);
        }
        // linear down
        for t in 10..=50u64 {
            assert!((s.lr_at(t) - (50 - t) as f64 / 40.0).abs() < 1e-15);
        }
        // peak exactly at warmup
        let just_before = s.lr_at(9);
        let at = s.lr_at(10);
        let just_after = s.lr_at(11);
        assert!(just_before < at && just_after < at);
    }

    #[test]
    fn lr_schedule_zero_warmup_starts_at_peak() {
        let s = LrSchedule {
            peak: 0.5,
            warmup_steps: 0,
            total_steps: 10,
        };
        assert_eq!(s.lr_at(0), 0.5);
        assert_eq!(s.lr_at(10), 0.0);
    }

    #[test]
    fn adamw_zero_grads_without_decay_keep_params() {
        let mut p = [1.0f64, -2.0, 0.5];
        let g = [0.0f64; 3];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        adamw_update_slice(&mut p, &g, &mut m, &mut v, 1, 0.1, &hyper);
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(m, [0.0; 3]);
        assert_eq!(v, [0.0; 3]);
    }

    #[test]
    fn adamw_first_step_approximates_signed_lr() {
        for g0 in [3.0f64, -0.004, 17.5] {
            let mut p = [0.0f64];
            let g = [g0];
            let mut m = [0.0f64];
            let mut v = [0.0f64];
            let hyper = AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::default()
            };
            adamw_update_slice(&mut p, &g, &mut m, &mut v, 1, 0.01, &hyper);
            // first bias-corrected step is g/(|g| + eps) ~ sign(g)
            assert!(
                (p[0] + 0.01 * g0.signum()).abs() < 1e-5,
                "step for grad {g0} was {}",
                p[0]
            );
        }
    }

    /// Ten AdamW steps on 0.5 * sum a_i (p_i - c_i)^2, frozen from an
    /// independent float64 reference implementation of the decoupled
    /// weight-decay update (lr 0.1, betas (0.9, 0.999), eps 1e-8, wd 0.01).
    #[test]
    fn adamw_matches_frozen_reference_trace() {
        let a = [1.0f64, 2.0, 0.5, 3.0];
        let c = [1.0f64, -2.0, 0.5, 0.0];
        let expected: [[f64; 4]; 10] = [
            [9.99999990000000200e-2, -9.99999997500000126e-2, 9.99999960000001742e-2, 0.0],
            [1.99487770288661909e-1, -1.99733513884548908e-1, 1.98712572130412879e-1, 0.0],
            [2.98115089103515474e-1, -2.99077161515153678e-1, 2.94833256834809265e-1, 0.0],
            [3.95467738955813775e-1, -3.97897712686855309e-1, 3.86509317921636397e-1, 0.0],
            [4.91057150332984971e-1, -4.96051782378615691e-1, 4.71267416688793628e-1, 0.0],
            [5.84313724473827345e-1, -5.93385607863760711e-1, 5.46140068259569844e-1, 0.0],
            [6.74583799574306475e-1, -6.89734936955085143e-1, 6.08132270732170022e-1, 0.0],
            [7.61132880589492467e-1, -7.84925059044254025e-1, 6.54965057298088960e-1, 0.0],
            [8.43158164337826199e-1, -8.78771014964159436e-1, 6.85703313613261312e-1, 0.0],
            [9.19813130395501499e-1, -9.71078025114308296e-1, 7.00865788641691023e-1, 0.0],
        ];
        let mut p = [0.0f64; 4];
        let mut m = [0.0f64; 4];
        let mut v = [0.0f64; 4];
        let hyper = AdamHyper::default();
        for t in 1..=10u64 {
            let g: Vec<f64> = (0..4).map(|i| a[i] * (p[i] - c[i])).collect();
            adamw_update_slice(&mut p, &g, &mut m, &mut v, t, 0.1, &hyper);
            for i in 0..4 {
                assert!(
                    (p[i] - expected[t as usize - 1][i]).abs() < 1e-10,
                    "step {t} coord {i}: {} vs {}",
                    p[i],
                    expected[t as usize - 1][i]
                );
            }
        }
    }

    #[test]
    fn adamw_step_rejects_non_finite_grads() {
        let (_, store, vocab) = gradcheck_fixture();
        let dims = EncoderDims {
            vocab: vocab.len(),
            d_model: 4,
            d_ffn: 8,
            d_embed: 4,
            max_len: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params: EncoderParams<f64> =
            EncoderParams::init(dims, store.labels.clone(), &mut rng);
        let mut grads = ParamGrads::zeros_like(&params);
        grads.w_q[[0, 0]] = f64::NAN;
        let mut state = OptimizerState::new(
            &params,
            AdamHyper::default(),
            LrSchedule {
                peak: 1e-3,
                warmup_steps: 1,
                total_steps: 10,
            },
        );
        match adamw_step(&mut params, &grads, &mut state) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("w_q"), "message was {msg}"),
            other => panic!("expected NonFinite naming w_q, got {other:?}"),
        }
    }

    #[test]
    fn central_diff_self_test_on_square() {
        let fd = central_diff(|x| x * x, 3.0, 1e-5);
        assert!(rel_err(6.0, fd) < 1e-10, "fd = {fd}");
    }

    #[test]
    fn grad_check_full_model_both_modes() {
        for mode in [RelMode::DistmultCos, RelMode::TransE] {
            let cfg = GradCheckConfig {
                mode,
                coords_per_tensor: 4,
                d_model: 8,
                d_ffn: 12,
                d_embed: 8,
                max_len: 8,
                ..GradCheckConfig::default()
            };
            let report = grad_check(&cfg).unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "{mode}: max rel err {} in {:?}",
                report.max_rel_err,
                report.flagged(1e-4)
            );
        }
    }

    #[test]
    fn grad_check_flags_corrupted_gradient() {
        let cfg = GradCheckConfig {
            coords_per_tensor: 6,
            d_model: 8,
            d_ffn: 12,
            d_embed: 8,
            max_len: 8,
            ..GradCheckConfig::default()
        };
        let (dict, store, vocab) = gradcheck_fixture();
        let dims = EncoderDims {
            vocab: vocab.len(),
            d_model: cfg.d_model,
            d_ffn: cfg.d_ffn,
            d_embed: cfg.d_embed,
            max_len: cfg.max_len,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params: EncoderParams<f64> =
            EncoderParams::init(dims, store.labels.clone(), &mut rng);
        let ms = MsLossParams::defaults_for(cfg.mode);
        let batch = sample_batch(&dict, &store, &vocab, cfg.k, cfg.m, cfg.max_len, &mut rng).unwrap();
        let mut analytic = ParamGrads::zeros_like(&params);
        batch_loss_and_grads(&params, &batch, cfg.mode, &ms, Pooling::Cls, &mut analytic).unwrap();
        // inject a 2x fault into one tensor
        analytic.out_w.mapv_inplace(|x| x * 2.0);
        let report =
            compare_with_fd(&params, &batch, cfg.mode, &ms, &analytic, &cfg, &mut rng).unwrap();
        let flagged = report.flagged(1e-4);
        assert!(
            flagged.contains(&"out_w".to_string()),
            "fault not flagged: {flagged:?}"
        );
    }

    fn write_tiny_kg(dir: &std::path::Path) -> (PathBuf, PathBuf, PathBuf) {
        let concepts = dir.join("concepts.tsv");
        let relations = dir.join("relations.tsv");
        let vocab = dir.join("vocab.txt");
        let mut ctext = String::new();
        let mut rtext = String::new();
        for i in 0..6 {
            ctext.push_str(&format!("H{i}\ten\tT1\thead word{i}\n"));
            ctext.push_str(&format!("H{i}\ten\tT1\thw{i}\n"));
            ctext.push_str(&format!("T{i}\ten\tT1\ttail word{i}\n"));
            ctext.push_str(&format!("T{i}\ten\tT1\ttw{i}\n"));
            rtext.push_str(&format!("H{i}\trel_{}\tT{i}\n", i % 2));
        }
        std::fs::write(&concepts, ctext).unwrap();
        std::fs::write(&relations, rtext).unwrap();
        let dict = load_concepts(&concepts).unwrap();
        crate::tokenizer::save_vocab(&build_vocab_tokens(&dict, 4096, 6), &vocab).unwrap();
        (concepts, relations, vocab)
    }

    fn tiny_config(dir: &std::path::Path, steps: u64, seed: u64) -> TrainConfig {
        let (concepts, relations, vocab) = write_tiny_kg(dir);
        TrainConfig {
            concepts,
            relations,
            vocab,
            out: dir.join(format!("model-{seed}-{steps}.kge")),
            log: Some(dir.join(format!("log-{seed}-{steps}.tsv"))),
            d_model: 8,
            d_ffn: 16,
            d_embed: 8,
            max_len: 8,
            k: 4,
            m: 2,
            steps,
            warmup: 10,
            lr_peak: 1e-2,
            grad_accum: 1,
            seed,
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), 0, 7);
        cfg.log = None;
        let out = train::<f32>(&cfg).unwrap();
        let trained: EncoderParams<f32> = crate::encoder::load_checkpoint(&out).unwrap();

        let dict = load_concepts(&cfg.concepts).unwrap();
        let store = load_relations(&cfg.relations, &dict).unwrap();
        let vocab = load_vocab(&cfg.vocab).unwrap();
        let dims = EncoderDims {
            vocab: vocab.len(),
            d_model: cfg.d_model,
            d_ffn: cfg.d_ffn,
            d_embed: cfg.d_embed,
            max_len: cfg.max_len,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let expected: EncoderParams<f32> = EncoderParams::init(dims, store.labels, &mut rng);
        assert_eq!(trained, expected);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = tiny_config(dir.path(), 30, 11);
        a.out = dir.path().join("a.kge");
        a.log = Some(dir.path().join("a.tsv"));
        let mut b = tiny_config(dir.path(), 30, 11);
        b.out = dir.path().join("b.kge");
        b.log = Some(dir.path().join("b.tsv"));
        train::<f32>(&a).unwrap();
        train::<f32>(&b).unwrap();
        assert_eq!(
            std::fs::read(&a.out).unwrap(),
            std::fs::read(&b.out).unwrap(),
            "checkpoints differ"
        );
        assert_eq!(
            std::fs::read(a.log.as_ref().unwrap()).unwrap(),
            std::fs::read(b.log.as_ref().unwrap()).unwrap(),
            "logs differ"
        );
    }

    #[test]
    fn loss_decreases_over_training() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 200, 13);
        train::<f32>(&cfg).unwrap();
        let log = std::fs::read_to_string(cfg.log.as_ref().unwrap()).unwrap();
        let losses: Vec<f64> = log
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(losses.len(), 200);
        let first: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(
            last < first,
            "no learning signal: first 20 mean {first}, last 20 mean {last}"
        );
    }

    #[test]
    fn periodic_checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), 20, 17);
        cfg.checkpoint_every = 10;
        train::<f32>(&cfg).unwrap();
        assert!(periodic_path(&cfg.out, 10).exists());
        // the final step writes config.out itself, not a periodic file
        assert!(!periodic_path(&cfg.out, 20).exists());
        assert!(cfg.out.exists());
    }

    #[test]
    fn accumulation_sums_micro_batch_gradients() {
        // two different micro-batches accumulated into one grads buffer must
        // equal the sum of separately computed gradients
        let (dict, store, vocab) = gradcheck_fixture();
        let dims = EncoderDims {
            vocab: vocab.len(),
            d_model: 8,
            d_ffn: 12,
            d_embed: 8,
            max_len: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: EncoderParams<f64> = EncoderParams::init(dims, store.labels.clone(), &mut rng);
        let ms = MsLossParams::defaults_for(RelMode::DistmultCos);
        let b1 = sample_batch(&dict, &store, &vocab, 4, 2, 8, &mut rng).unwrap();
        let b2 = sample_batch(&dict, &store, &vocab, 4, 2, 8, &mut rng).unwrap();

        let mut acc = ParamGrads::zeros_like(&params);
        batch_loss_and_grads(&params, &b1, RelMode::DistmultCos, &ms, Pooling::Cls, &mut acc)
            .unwrap();
        batch_loss_and_grads(&params, &b2, RelMode::DistmultCos, &ms, Pooling::Cls, &mut acc)
            .unwrap();

        let mut g1 = ParamGrads::zeros_like(&params);
        batch_loss_and_grads(&params, &b1, RelMode::DistmultCos, &ms, Pooling::Cls, &mut g1)
            .unwrap();
        let mut g2 = ParamGrads::zeros_like(&params);
        batch_loss_and_grads(&params, &b2, RelMode::DistmultCos, &ms, Pooling::Cls, &mut g2)
            .unwrap();

        for (((_, a), (_, x)), (_, y)) in acc
            .tensors(&params.relations)
            .into_iter()
            .zip(g1.tensors(&params.relations))
            .zip(g2.tensors(&params.relations))
        {
            for i in 0..a.len() {
                assert!(
                    (a[i] - (x[i] + y[i])).abs() < 1e-12,
                    "accumulated gradient is not the sum"
                );
            }
        }
    }

    #[test]
    fn rng_draws_match_expected_uniformity() {
        // guard against a rand upgrade silently changing range semantics
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: usize = rng.random_range(0..4);
            assert!(x < 4);
        }
    }
}
