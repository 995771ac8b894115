//! Discriminative neural PLDA.
//!
//! The pairwise network mirrors the generative pipeline layer by layer:
//! an affine layer reproduces centering + LDA, a length-normalization
//! activation reproduces unit-norm projection, a second affine layer
//! reproduces the diagonalizing transform, and a quadratic output layer
//! reproduces the LLR form. Initialized from a trained generative model it
//! scores identically; training then minimizes a differentiable two-point
//! detection-cost surrogate in which the hard accept indicator is replaced
//! by a sigmoid warped by a sharpness factor `alpha`.
//!
//! Gradients are exact analytic backpropagation (the length-norm Jacobian is
//! `(I - u u^T) / ||z||`); the optimizer is Adam with per-batch updates, and
//! batches preserve the global target:nontarget ratio to within one trial.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{EmbeddingSet, Label, ScoreSet, TrialList};
use crate::error::{Error, Result};
use crate::gplda::GPLDAModel;
use crate::metrics::{self, Betas};
use crate::preprocess::length_normalize;

/// Trainable pairwise scoring network. Fields are public so that external
/// oracles (finite differences) can perturb parameters directly.
#[derive(Debug, Clone, PartialEq)]
pub struct NPLDAModel {
    /// First affine layer, `R x D` (centering + LDA at init).
    pub affine1_w: DMatrix<f64>,
    pub affine1_b: DVector<f64>,
    /// Second affine layer, `R x R` (diagonalizing transform at init).
    pub affine2: DMatrix<f64>,
    /// Quadratic scoring layer; kept symmetric after every update.
    pub quad_q: DMatrix<f64>,
    pub quad_p: DMatrix<f64>,
    pub const_c: f64,
    /// Trainable decision thresholds of the two operating points.
    pub theta1: f64,
    pub theta2: f64,
    /// Sigmoid warping factor of the soft cost (hyperparameter, not trained).
    pub alpha: f64,
    /// Cost weights the model is (or was) trained for.
    pub beta1: f64,
    pub beta2: f64,
}

/// Default sigmoid sharpness: tight enough that the surrogate tracks the
/// hard cost at LLR-scale scores, loose enough to keep gradients alive.
pub const DEFAULT_ALPHA: f64 = 15.0;

impl NPLDAModel {
    /// Builds the network from a trained generative back-end so that the
    /// initial forward scores equal the generative LLR.
    pub fn init_from_gplda(model: &GPLDAModel, alpha: f64, betas: Betas) -> NPLDAModel {
        let pre = model.preprocessor();
        let scoring = model.scoring();
        NPLDAModel {
            affine1_w: pre.lda().clone(),
            affine1_b: -(pre.lda() * pre.mean()),
            affine2: pre.diag_transform().clone(),
            quad_q: scoring.q.clone(),
            quad_p: scoring.p.clone(),
            const_c: scoring.c,
            theta1: betas.beta1.ln(),
            theta2: betas.beta2.ln(),
            alpha,
            beta1: betas.beta1,
            beta2: betas.beta2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.affine1_w.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.affine1_w.nrows()
    }

    pub fn betas(&self) -> Betas {
        Betas {
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    fn embed_stages(&self, x: &DVector<f64>) -> Result<EmbedStages> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let z = &self.affine1_w * x + &self.affine1_b;
        let norm = z.norm();
        let u = length_normalize(&z)?;
        let a = &self.affine2 * &u;
        Ok(EmbedStages { norm, u, a })
    }

    /// Network embedding of one input (both affine layers and the
    /// length-norm activation).
    pub fn embed(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.embed_stages(x)?.a)
    }

    fn score_embedded(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let quad_a = 0.5 * a.dot(&(&self.quad_q * a));
        let quad_b = 0.5 * b.dot(&(&self.quad_q * b));
        let cross = 0.5 * (a.dot(&(&self.quad_p * b)) + b.dot(&(&self.quad_p * a)));
        (quad_a + quad_b) + cross + self.const_c
    }

    /// Pairwise score on raw embeddings; symmetric in its two inputs.
    pub fn forward(&self, x_e: &DVector<f64>, x_t: &DVector<f64>) -> Result<f64> {
        let a = self.embed_stages(x_e)?;
        let b = self.embed_stages(x_t)?;
        Ok(self.score_embedded(&a.a, &b.a))
    }

    /// Scores every pair of a trial list, embedding each utterance once.
    pub fn score_trials(&self, embeddings: &EmbeddingSet, trials: &TrialList) -> Result<ScoreSet> {
        let index = embeddings.index_map();
        let mut cache: HashMap<usize, DVector<f64>> = HashMap::new();
        let mut scores = Vec::with_capacity(trials.len());
        for (trial_index, (enroll, test)) in trials.pairs().iter().enumerate() {
            let mut a_of = |id: &str| -> Result<DVector<f64>> {
                let &row = index.get(id).ok_or_else(|| Error::UnknownUtterance {
                    id: id.to_string(),
                    trial_index,
                })?;
                if let Some(a) = cache.get(&row) {
                    return Ok(a.clone());
                }
                let a = self.embed(&embeddings.row(row))?;
                cache.insert(row, a.clone());
                Ok(a)
            };
            let a = a_of(enroll)?;
            let b = a_of(test)?;
            scores.push(self.score_embedded(&a, &b));
        }
        ScoreSet::new(trials.pairs().to_vec(), scores)
    }

    fn all_finite(&self) -> bool {
        self.affine1_w.iter().all(|v| v.is_finite())
            && self.affine1_b.iter().all(|v| v.is_finite())
            && self.affine2.iter().all(|v| v.is_finite())
            && self.quad_q.iter().all(|v| v.is_finite())
            && self.quad_p.iter().all(|v| v.is_finite())
            && self.const_c.is_finite()
            && self.theta1.is_finite()
            && self.theta2.is_finite()
    }

    fn symmetrize_quadratic(&mut self) {
        self.quad_q = crate::linalg::symmetrize(&self.quad_q);
        self.quad_p = crate::linalg::symmetrize(&self.quad_p);
    }
}

struct EmbedStages {
    norm: f64,
    u: DVector<f64>,
    a: DVector<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn class_counts(is_target: &[bool]) -> Result<(f64, f64)> {
    let n_t = is_target.iter().filter(|&&t| t).count();
    let n_n = is_target.len() - n_t;
    if n_t == 0 {
        return Err(Error::SingleClass("no target trials"));
    }
    if n_n == 0 {
        return Err(Error::SingleClass("no nontarget trials"));
    }
    Ok((n_t as f64, n_n as f64))
}

/// Soft detection cost `P_miss_soft(theta) + beta * P_fa_soft(theta)` with
/// the indicator replaced by `sigmoid(alpha * (s - theta))`.
pub fn soft_detection_cost(
    scores: &[f64],
    is_target: &[bool],
    alpha: f64,
    beta: f64,
    theta: f64,
) -> Result<f64> {
    if scores.len() != is_target.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scores but {} labels",
            scores.len(),
            is_target.len()
        )));
    }
    let (n_t, n_n) = class_counts(is_target)?;
    let mut miss = 0.0;
    let mut fa = 0.0;
    for (&s, &t) in scores.iter().zip(is_target) {
        let sig = sigmoid(alpha * (s - theta));
        if t {
            miss += 1.0 - sig;
        } else {
            fa += sig;
        }
    }
    Ok(miss / n_t + beta * (fa / n_n))
}

/// Loss of a batch of already-computed scores: the mean of the two
/// operating points' soft costs at the model's trainable thresholds.
fn soft_primary_loss(model: &NPLDAModel, scores: &[f64], is_target: &[bool]) -> Result<f64> {
    let c1 = soft_detection_cost(scores, is_target, model.alpha, model.beta1, model.theta1)?;
    let c2 = soft_detection_cost(scores, is_target, model.alpha, model.beta2, model.theta2)?;
    Ok(0.5 * (c1 + c2))
}

/// A training batch: raw embedding row indices per trial side plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<(usize, usize)>,
    pub is_target: Vec<bool>,
}

impl Batch {
    /// Resolves a labeled trial list against an embedding set.
    pub fn from_trials(embeddings: &EmbeddingSet, trials: &TrialList) -> Result<Batch> {
        let index = embeddings.index_map();
        let mut pairs = Vec::with_capacity(trials.len());
        let mut is_target = Vec::with_capacity(trials.len());
        for (trial_index, (e, t)) in trials.pairs().iter().enumerate() {
            let &ei = index.get(e.as_str()).ok_or_else(|| Error::UnknownUtterance {
                id: e.clone(),
                trial_index,
            })?;
            let &ti = index.get(t.as_str()).ok_or_else(|| Error::UnknownUtterance {
                id: t.clone(),
                trial_index,
            })?;
            pairs.push((ei, ti));
            match trials.labels()[trial_index] {
                Label::Target => is_target.push(true),
                Label::Nontarget => is_target.push(false),
                Label::Unknown => {
                    return Err(Error::InvalidConfig(format!(
                        "trial {trial_index} has no label; training needs ground truth"
                    )))
                }
            }
        }
        Ok(Batch { pairs, is_target })
    }
}

/// Loss of a batch under the current model parameters.
pub fn nplda_loss(model: &NPLDAModel, embeddings: &EmbeddingSet, batch: &Batch) -> Result<f64> {
    let mut cache: HashMap<usize, DVector<f64>> = HashMap::new();
    let mut scores = Vec::with_capacity(batch.pairs.len());
    for &(e, t) in &batch.pairs {
        for idx in [e, t] {
            if !cache.contains_key(&idx) {
                cache.insert(idx, model.embed(&embeddings.row(idx))?);
            }
        }
        scores.push(model.score_embedded(&cache[&e], &cache[&t]));
    }
    soft_primary_loss(model, &scores, &batch.is_target)
}

/// Gradient of the loss with respect to every trainable parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub affine1_w: DMatrix<f64>,
    pub affine1_b: DVector<f64>,
    pub affine2: DMatrix<f64>,
    pub quad_q: DMatrix<f64>,
    pub quad_p: DMatrix<f64>,
    pub const_c: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl Gradients {
    fn zeros(r: usize, d: usize) -> Gradients {
        Gradients {
            affine1_w: DMatrix::zeros(r, d),
            affine1_b: DVector::zeros(r),
            affine2: DMatrix::zeros(r, r),
            quad_q: DMatrix::zeros(r, r),
            quad_p: DMatrix::zeros(r, r),
            const_c: 0.0,
            theta1: 0.0,
            theta2: 0.0,
        }
    }

    fn all_finite(&self) -> bool {
        self.affine1_w.iter().all(|v| v.is_finite())
            && self.affine1_b.iter().all(|v| v.is_finite())
            && self.affine2.iter().all(|v| v.is_finite())
            && self.quad_q.iter().all(|v| v.is_finite())
            && self.quad_p.iter().all(|v| v.is_finite())
            && self.const_c.is_finite()
            && self.theta1.is_finite()
            && self.theta2.is_finite()
    }
}

/// Analytic loss and gradients for one batch.
///
/// Per-score weights come from the sigmoid derivative of the soft cost; the
/// per-trial backward pass walks the quadratic layer, the second affine
/// layer, the length-norm Jacobian and the first affine layer.
pub fn loss_gradients(
    model: &NPLDAModel,
    embeddings: &EmbeddingSet,
    batch: &Batch,
) -> Result<(f64, Gradients)> {
    let r = model.latent_dim();
    let d = model.input_dim();
    let (n_t, n_n) = class_counts(&batch.is_target)?;

    // Forward pass with per-utterance caching.
    let mut stages: HashMap<usize, EmbedStages> = HashMap::new();
    let mut scores = Vec::with_capacity(batch.pairs.len());
    for &(e, t) in &batch.pairs {
        for idx in [e, t] {
            if let std::collections::hash_map::Entry::Vacant(slot) = stages.entry(idx) {
                slot.insert(model.embed_stages(&embeddings.row(idx))?);
            }
        }
        scores.push(model.score_embedded(&stages[&e].a, &stages[&t].a));
    }
    let loss = soft_primary_loss(model, &scores, &batch.is_target)?;

    let mut grads = Gradients::zeros(r, d);
    for (i, (&(e, t), &target)) in batch.pairs.iter().zip(&batch.is_target).enumerate() {
        let s = scores[i];
        // d(loss)/d(s_i) accumulated over both operating points, and the
        // threshold gradients (each threshold only sees its own cost).
        let mut g_score = 0.0;
        for (beta, theta, g_theta) in [
            (model.beta1, model.theta1, &mut grads.theta1),
            (model.beta2, model.theta2, &mut grads.theta2),
        ] {
            let sig = sigmoid(model.alpha * (s - theta));
            let dsig = model.alpha * sig * (1.0 - sig);
            let weight = if target { -1.0 / n_t } else { beta / n_n };
            let dc_ds = dsig * weight;
            g_score += 0.5 * dc_ds;
            *g_theta -= 0.5 * dc_ds;
        }
        if g_score == 0.0 {
            grads.const_c += 0.0;
            continue;
        }

        let se = &stages[&e];
        let st = &stages[&t];
        grads.const_c += g_score;
        // d(s)/dQ = 1/2 (a a^T + b b^T); d(s)/dP = 1/2 (a b^T + b a^T).
        grads.quad_q.syger(0.5 * g_score, &se.a, &se.a, 1.0);
        grads.quad_q.syger(0.5 * g_score, &st.a, &st.a, 1.0);
        grads.quad_p.ger(0.5 * g_score, &se.a, &st.a, 1.0);
        grads.quad_p.ger(0.5 * g_score, &st.a, &se.a, 1.0);

        for (side, other, idx) in [(se, st, e), (st, se, t)] {
            // d(s)/da = Q a + P b (Q, P symmetric).
            let grad_a = (&model.quad_q * &side.a + &model.quad_p * &other.a) * g_score;
            grads.affine2.ger(1.0, &grad_a, &side.u, 1.0);
            let grad_u = model.affine2.transpose() * grad_a;
            // Length-norm Jacobian: (I - u u^T) / ||z||.
            let grad_z = (&grad_u - &side.u * side.u.dot(&grad_u)) / side.norm;
            grads.affine1_w.ger(1.0, &grad_z, &embeddings.row(idx), 1.0);
            grads.affine1_b += grad_z;
        }
    }
    // syger fills only the lower triangle.
    let n = grads.quad_q.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            grads.quad_q[(i, j)] = grads.quad_q[(j, i)];
        }
    }
    Ok((loss, grads))
}

/// Adam configuration and schedule for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            epochs: 20,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NPLDAModel,
    /// Loss of every optimizer step, in order.
    pub loss_trace: Vec<f64>,
    /// Validation minimum cost per checkpoint (entry 0 is the initial
    /// model); empty without a validation set.
    pub val_c_min: Vec<f64>,
    /// Checkpoint chosen when validation is present (0 = initial model).
    pub best_checkpoint: Option<usize>,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(r: usize, d: usize) -> Adam {
        Adam {
            m: Gradients::zeros(r, d),
            v: Gradients::zeros(r, d),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut NPLDAModel, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.t);
        let mut update = |param: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
            *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *param -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        };
        for ((p, m), (v, g)) in model
            .affine1_w
            .iter_mut()
            .zip(self.m.affine1_w.iter_mut())
            .zip(self.v.affine1_w.iter_mut().zip(grads.affine1_w.iter()))
        {
            update(p, m, v, *g);
        }
        for ((p, m), (v, g)) in model
            .affine1_b
            .iter_mut()
            .zip(self.m.affine1_b.iter_mut())
            .zip(self.v.affine1_b.iter_mut().zip(grads.affine1_b.iter()))
        {
            update(p, m, v, *g);
        }
        for ((p, m), (v, g)) in model
            .affine2
            .iter_mut()
            .zip(self.m.affine2.iter_mut())
            .zip(self.v.affine2.iter_mut().zip(grads.affine2.iter()))
        {
            update(p, m, v, *g);
        }
        for ((p, m), (v, g)) in model
            .quad_q
            .iter_mut()
            .zip(self.m.quad_q.iter_mut())
            .zip(self.v.quad_q.iter_mut().zip(grads.quad_q.iter()))
        {
            update(p, m, v, *g);
        }
        for ((p, m), (v, g)) in model
            .quad_p
            .iter_mut()
            .zip(self.m.quad_p.iter_mut())
            .zip(self.v.quad_p.iter_mut().zip(grads.quad_p.iter()))
        {
            update(p, m, v, *g);
        }
        update(
            &mut model.const_c,
            &mut self.m.const_c,
            &mut self.v.const_c,
            grads.const_c,
        );
        update(
            &mut model.theta1,
            &mut self.m.theta1,
            &mut self.v.theta1,
            grads.theta1,
        );
        update(
            &mut model.theta2,
            &mut self.m.theta2,
            &mut self.v.theta2,
            grads.theta2,
        );
    }
}

/// Splits shuffled target/nontarget index pools into batches whose class
/// ratio matches the global ratio to within one trial.
fn ratio_batches(
    targets: &[usize],
    nontargets: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = targets.len() + nontargets.len();
    let k = n.div_ceil(batch_size);
    let quota = |pool: usize, j: usize| (j * pool) / k;
    let mut batches = Vec::with_capacity(k);
    for j in 0..k {
        let t_lo = quota(targets.len(), j);
        let t_hi = quota(targets.len(), j + 1);
        let n_lo = quota(nontargets.len(), j);
        let n_hi = quota(nontargets.len(), j + 1);
        if t_hi == t_lo || n_hi == n_lo {
            return Err(Error::InvalidConfig(format!(
                "batch {j} would hold a single class; increase batch_size \
                 (got {batch_size}) or rebalance the trial list"
            )));
        }
        let mut batch: Vec<usize> = targets[t_lo..t_hi].to_vec();
        batch.extend_from_slice(&nontargets[n_lo..n_hi]);
        batches.push(batch);
    }
    Ok(batches)
}

/// Trains the network with Adam on labeled trials.
///
/// Deterministic given `cfg.seed`. When a validation set is supplied, the
/// checkpoint (including the untrained initialization) with the lowest
/// validation minimum cost is returned; otherwise the final parameters are.
pub fn train(
    model: NPLDAModel,
    embeddings: &EmbeddingSet,
    trial_list: &TrialList,
    cfg: &TrainConfig,
    validation: Option<(&EmbeddingSet, &TrialList)>,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
    }
    let all = Batch::from_trials(embeddings, trial_list)?;
    class_counts(&all.is_target)?;

    let mut model = model;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.latent_dim(), model.input_dim());
    let mut loss_trace = Vec::new();
    let mut val_c_min = Vec::new();

    let val_cost = |m: &NPLDAModel| -> Result<f64> {
        let (val_emb, val_trials) = validation.unwrap();
        let scored = m.score_trials(val_emb, val_trials)?;
        let (scores, labels) = crate::data::align_labels(&scored, val_trials)?;
        Ok(metrics::c_min(&scores, &labels, m.betas())?.value)
    };

    let mut best: Option<(usize, f64, NPLDAModel)> = None;
    if validation.is_some() {
        let c = val_cost(&model)?;
        val_c_min.push(c);
        best = Some((0, c, model.clone()));
    }

    let target_idx: Vec<usize> = (0..all.pairs.len()).filter(|&i| all.is_target[i]).collect();
    let nontarget_idx: Vec<usize> =
        (0..all.pairs.len()).filter(|&i| !all.is_target[i]).collect();

    for epoch in 0..cfg.epochs {
        let mut targets = target_idx.clone();
        let mut nontargets = nontarget_idx.clone();
        targets.shuffle(&mut rng);
        nontargets.shuffle(&mut rng);

        for batch_rows in ratio_batches(&targets, &nontargets, cfg.batch_size)? {
            let batch = Batch {
                pairs: batch_rows.iter().map(|&i| all.pairs[i]).collect(),
                is_target: batch_rows.iter().map(|&i| all.is_target[i]).collect(),
            };
            let (loss, grads) = loss_gradients(&model, embeddings, &batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "training step {} (epoch {epoch}): loss {loss}",
                    loss_trace.len()
                )));
            }
            adam.step(&mut model, &grads, cfg);
            model.symmetrize_quadratic();
            if !model.all_finite() {
                return Err(Error::NonFinite(format!(
                    "model parameters after step {} (epoch {epoch})",
                    loss_trace.len()
                )));
            }
            loss_trace.push(loss);
        }

        if validation.is_some() {
            let c = val_cost(&model)?;
            val_c_min.push(c);
            let improved = best.as_ref().map(|(_, b, _)| c < *b).unwrap_or(true);
            if improved {
                best = Some((epoch + 1, c, model.clone()));
            }
        }
    }

    let (model, best_checkpoint) = match best {
        Some((idx, _, m)) => (m, Some(idx)),
        None => (model, None),
    };
    Ok(TrainOutcome {
        model,
        loss_trace,
        val_c_min,
        best_checkpoint,
    })
}
