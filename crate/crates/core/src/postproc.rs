//! Score post-processing: adaptive symmetric cohort normalization, linear
//! calibration by prior-weighted logistic regression, and multi-system
//! linear fusion.
//!
//! Calibration and fusion share one convex solver (damped Newton on the
//! prior-weighted cross-entropy with an L2 penalty on the scale weights);
//! calibration is the single-system case.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::data::ScoreSet;
use crate::error::{Error, Result};
use crate::metrics::Betas;

/// Default L2 penalty on calibration/fusion scale weights; keeps separable
/// fits finite.
pub const DEFAULT_L2: f64 = 1e-4;

/// Default iteration cap of the Newton solver.
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Smallest admissible calibration scale: fits on anti- or un-informative
/// data clamp here instead of going non-positive.
const MIN_SCALE: f64 = 1e-12;

/// Gradient norm below which the solver declares convergence.
const GRAD_TOL: f64 = 1e-6;

/// Effective prior averaged over the two cost operating points:
/// `1/2 [1/(1+beta1) + 1/(1+beta2)]`.
pub fn default_effective_prior(betas: Betas) -> f64 {
    0.5 * (1.0 / (1.0 + betas.beta1) + 1.0 / (1.0 + betas.beta2))
}

/// Per-side cohort scores for adaptive normalization. Every vector is
/// aligned with `cohort_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortScores {
    cohort_ids: Vec<String>,
    enroll: HashMap<String, Vec<f64>>,
    test: HashMap<String, Vec<f64>>,
}

impl CohortScores {
    pub fn new(
        cohort_ids: Vec<String>,
        enroll: HashMap<String, Vec<f64>>,
        test: HashMap<String, Vec<f64>>,
    ) -> Result<Self> {
        if cohort_ids.len() < 2 {
            return Err(Error::InvalidConfig(
                "cohort must contain at least 2 utterances".into(),
            ));
        }
        for (side, map) in [("enroll", &enroll), ("test", &test)] {
            for (id, v) in map {
                if v.len() != cohort_ids.len() {
                    return Err(Error::InvalidConfig(format!(
                        "{side} cohort vector for {id:?} has {} scores, expected {}",
                        v.len(),
                        cohort_ids.len()
                    )));
                }
            }
        }
        Ok(CohortScores {
            cohort_ids,
            enroll,
            test,
        })
    }

    /// Assembles cohort vectors from two standard score sets: pairs are
    /// `(trial-side id, cohort id)`. Every referenced side id must be scored
    /// against the complete declared cohort exactly once.
    pub fn from_score_sets(
        cohort_ids: Vec<String>,
        enroll_scores: &ScoreSet,
        test_scores: &ScoreSet,
    ) -> Result<Self> {
        let index: HashMap<&str, usize> = cohort_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        if index.len() != cohort_ids.len() {
            return Err(Error::InvalidConfig("duplicate cohort id".into()));
        }
        let collect = |scores: &ScoreSet, side: &str| -> Result<HashMap<String, Vec<f64>>> {
            let mut map: HashMap<String, Vec<Option<f64>>> = HashMap::new();
            for ((side_id, cohort_id), &s) in scores.pairs().iter().zip(scores.scores()) {
                let &slot = index.get(cohort_id.as_str()).ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "{side} cohort score references {cohort_id:?}, not in the declared cohort"
                    ))
                })?;
                let entry = map
                    .entry(side_id.clone())
                    .or_insert_with(|| vec![None; cohort_ids.len()]);
                if entry[slot].replace(s).is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate {side} cohort score for ({side_id}, {cohort_id})"
                    )));
                }
            }
            let mut out = HashMap::new();
            for (id, v) in map {
                let complete: Option<Vec<f64>> = v.into_iter().collect();
                let Some(complete) = complete else {
                    return Err(Error::InvalidConfig(format!(
                        "{side} side {id:?} is missing scores against part of the cohort"
                    )));
                };
                out.insert(id, complete);
            }
            Ok(out)
        };
        CohortScores::new(
            cohort_ids.clone(),
            collect(enroll_scores, "enroll")?,
            collect(test_scores, "test")?,
        )
    }

    pub fn cohort_size(&self) -> usize {
        self.cohort_ids.len()
    }

    /// Mean and unbiased std of the `top_k` largest scores of one side.
    /// Ties in the top-k cut are broken by cohort-utterance id.
    fn top_k_stats(&self, side: Side, id: &str, top_k: usize) -> Result<(f64, f64)> {
        let map = match side {
            Side::Enroll => &self.enroll,
            Side::Test => &self.test,
        };
        let scores = map.get(id).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no {} cohort scores for id {id:?}",
                side.name()
            ))
        })?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("finite cohort scores")
                .then_with(|| self.cohort_ids[a].cmp(&self.cohort_ids[b]))
        });
        let top = &order[..top_k];
        let mean = top.iter().map(|&i| scores[i]).sum::<f64>() / top_k as f64;
        let var = top
            .iter()
            .map(|&i| (scores[i] - mean).powi(2))
            .sum::<f64>()
            / (top_k - 1) as f64;
        let std = var.sqrt();
        if std <= 1e-12 {
            return Err(Error::Degenerate(format!(
                "top-{top_k} cohort scores of {} side {id:?} are constant",
                side.name()
            )));
        }
        Ok((mean, std))
    }
}

#[derive(Clone, Copy)]
enum Side {
    Enroll,
    Test,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::Enroll => "enroll",
            Side::Test => "test",
        }
    }
}

/// Adaptive symmetric normalization:
/// `s' = 1/2 [(s - mu_e)/sigma_e + (s - mu_t)/sigma_t]`, where each side's
/// statistics come from its `top_k` largest cohort scores.
pub fn as_norm(raw: &ScoreSet, cohort: &CohortScores, top_k: usize) -> Result<ScoreSet> {
    if top_k < 2 || top_k > cohort.cohort_size() {
        return Err(Error::InvalidConfig(format!(
            "top_k must be in 2..={}, got {top_k}",
            cohort.cohort_size()
        )));
    }
    // Stats once per distinct side id, then a pass over the trials.
    let mut enroll_stats: HashMap<&str, (f64, f64)> = HashMap::new();
    let mut test_stats: HashMap<&str, (f64, f64)> = HashMap::new();
    for (enroll, test) in raw.pairs() {
        if !enroll_stats.contains_key(enroll.as_str()) {
            let st = cohort.top_k_stats(Side::Enroll, enroll, top_k)?;
            enroll_stats.insert(enroll, st);
        }
        if !test_stats.contains_key(test.as_str()) {
            let st = cohort.top_k_stats(Side::Test, test, top_k)?;
            test_stats.insert(test, st);
        }
    }
    let mut out = Vec::with_capacity(raw.len());
    for ((enroll, test), &s) in raw.pairs().iter().zip(raw.scores()) {
        let (mu_e, sd_e) = enroll_stats[enroll.as_str()];
        let (mu_t, sd_t) = test_stats[test.as_str()];
        out.push(0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t));
    }
    raw.with_scores(out)
}

/// Default top-k for adaptive normalization.
pub fn default_top_k(cohort_size: usize) -> usize {
    200.min(cohort_size)
}

/// Order-preserving affine score map `s -> a s + b` with positive scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineCalibration {
    a: f64,
    b: f64,
}

impl AffineCalibration {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() || a <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "calibration needs finite parameters with a > 0, got a={a}, b={b}"
            )));
        }
        Ok(AffineCalibration { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn apply_one(&self, s: f64) -> f64 {
        self.a * s + self.b
    }
}

/// Trial-wise linear combination of `K` systems.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    weights: Vec<f64>,
    bias: f64,
}

impl FusionModel {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::InvalidConfig(
                "fusion needs at least one finite weight and a finite bias".into(),
            ));
        }
        Ok(FusionModel { weights, bias })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }
}

pub(crate) struct SolverReport {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective_trace: Vec<f64>,
    pub grad_norm: f64,
}

/// Prior-weighted logistic objective:
/// `pi * mean_targets softplus(-f) + (1-pi) * mean_nontargets softplus(f)
///  + l2 * |w|^2` with `f_i = w . s_i + b + logit(pi)`.
fn objective(
    systems: &[Vec<f64>],
    is_target: &[bool],
    prior_logit: f64,
    prior: f64,
    l2: f64,
    w: &DVector<f64>,
    bias: f64,
    counts: (f64, f64),
) -> f64 {
    let (n_t, n_n) = counts;
    let softplus = |x: f64| {
        if x > 30.0 {
            x
        } else {
            x.exp().ln_1p()
        }
    };
    let mut obj = 0.0;
    for i in 0..is_target.len() {
        let f: f64 = systems.iter().zip(w.iter()).map(|(s, wk)| s[i] * wk).sum::<f64>()
            + bias
            + prior_logit;
        obj += if is_target[i] {
            prior * softplus(-f) / n_t
        } else {
            (1.0 - prior) * softplus(f) / n_n
        };
    }
    obj + l2 * w.norm_squared()
}

/// Damped Newton on the convex objective. Deterministic: starts at zero,
/// halves the step until the objective decreases, stops when the gradient
/// norm drops below 1e-6.
pub(crate) fn fit_linear_logistic(
    systems: &[Vec<f64>],
    is_target: &[bool],
    effective_prior: f64,
    max_iters: usize,
    l2: f64,
) -> Result<SolverReport> {
    let k = systems.len();
    if k == 0 {
        return Err(Error::InvalidConfig("no systems to fit".into()));
    }
    let n = is_target.len();
    for (idx, s) in systems.iter().enumerate() {
        if s.len() != n {
            return Err(Error::InvalidConfig(format!(
                "system {idx} has {} scores but {} labels",
                s.len(),
                n
            )));
        }
        if let Some(j) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "system {idx} score {j} is not finite"
            )));
        }
    }
    if !(effective_prior > 0.0 && effective_prior < 1.0) {
        return Err(Error::InvalidConfig(
            "effective_prior must lie strictly between 0 and 1".into(),
        ));
    }
    if l2 < 0.0 {
        return Err(Error::InvalidConfig("l2 must be non-negative".into()));
    }
    let n_t = is_target.iter().filter(|&&t| t).count();
    let n_n = n - n_t;
    if n_t == 0 {
        return Err(Error::SingleClass("no target trials"));
    }
    if n_n == 0 {
        return Err(Error::SingleClass("no nontarget trials"));
    }
    let counts = (n_t as f64, n_n as f64);
    let prior = effective_prior;
    let prior_logit = (prior / (1.0 - prior)).ln();

    let sigmoid = |x: f64| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };

    let mut w = DVector::zeros(k);
    let mut bias = 0.0;
    let mut trace = vec![objective(
        systems, is_target, prior_logit, prior, l2, &w, bias, counts,
    )];
    let mut grad_norm = f64::INFINITY;

    for _iter in 0..max_iters {
        // Gradient and Hessian in the (w, b) joint coordinates.
        let mut grad = DVector::zeros(k + 1);
        let mut hess = DMatrix::zeros(k + 1, k + 1);
        let mut x = DVector::zeros(k + 1);
        for i in 0..n {
            for j in 0..k {
                x[j] = systems[j][i];
            }
            x[k] = 1.0;
            let f: f64 = (0..k).map(|j| x[j] * w[j]).sum::<f64>() + bias + prior_logit;
            let sig = sigmoid(f);
            let weight = if is_target[i] {
                prior * (sig - 1.0) / counts.0
            } else {
                (1.0 - prior) * sig / counts.1
            };
            grad.axpy(weight, &x, 1.0);
            let curv = if is_target[i] {
                prior * sig * (1.0 - sig) / counts.0
            } else {
                (1.0 - prior) * sig * (1.0 - sig) / counts.1
            };
            hess.syger(curv, &x, &x, 1.0);
        }
        for j in 0..k {
            grad[j] += 2.0 * l2 * w[j];
            hess[(j, j)] += 2.0 * l2;
        }
        for i in 0..(k + 1) {
            for j in (i + 1)..(k + 1) {
                hess[(i, j)] = hess[(j, i)];
            }
        }

        grad_norm = grad.norm();
        if grad_norm < GRAD_TOL {
            return Ok(SolverReport {
                weights: w.iter().copied().collect(),
                bias,
                objective_trace: trace,
                grad_norm,
            });
        }

        let chol = hess.clone().cholesky().ok_or_else(|| {
            Error::Singular(
                "logistic Hessian is singular (rank-deficient systems with l2 = 0?)".into(),
            )
        })?;
        let step = chol.solve(&(-&grad));

        // Backtracking keeps the objective monotone.
        let current = *trace.last().unwrap();
        let step_w = step.rows(0, k).into_owned();
        let step_b = step[k];
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let w_try = &w + &step_w * scale;
            let b_try = bias + step_b * scale;
            let obj = objective(
                systems, is_target, prior_logit, prior, l2, &w_try, b_try, counts,
            );
            if obj <= current {
                w = w_try;
                bias = b_try;
                trace.push(obj);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // Cannot make progress: treat the current point as converged if
            // the gradient is small, otherwise report failure.
            break;
        }
    }

    if grad_norm < GRAD_TOL {
        Ok(SolverReport {
            weights: w.iter().copied().collect(),
            bias,
            objective_trace: trace,
            grad_norm,
        })
    } else {
        Err(Error::NotConverged {
            iters: max_iters,
            grad_norm,
        })
    }
}

/// Fits an affine calibration by prior-weighted logistic regression.
///
/// The optimum scale is clamped at a tiny positive floor when the
/// unconstrained fit is non-positive (uninformative or inverted scores);
/// the offset is then re-optimized with the scale held fixed.
pub fn fit_calibration(
    scores: &[f64],
    is_target: &[bool],
    effective_prior: f64,
    max_iters: usize,
    l2: f64,
) -> Result<AffineCalibration> {
    let systems = [scores.to_vec()];
    let report = fit_linear_logistic(&systems, is_target, effective_prior, max_iters, l2)?;
    let a = report.weights[0];
    let mut b = report.bias;
    if a <= MIN_SCALE {
        // KKT step for the constrained problem a >= floor: refit only b by
        // calibrating the (constant-like) feature floor * s.
        let floored: Vec<f64> = scores.iter().map(|s| MIN_SCALE * s).collect();
        let shifted = fit_offset_only(&floored, is_target, effective_prior, max_iters)?;
        b = shifted;
        return AffineCalibration::new(MIN_SCALE, b);
    }
    AffineCalibration::new(a, b)
}

/// One-dimensional Newton for the offset with the scale fixed.
fn fit_offset_only(
    fixed_scores: &[f64],
    is_target: &[bool],
    effective_prior: f64,
    max_iters: usize,
) -> Result<f64> {
    let sigmoid = |x: f64| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };
    let prior = effective_prior;
    let prior_logit = (prior / (1.0 - prior)).ln();
    let n_t = is_target.iter().filter(|&&t| t).count() as f64;
    let n_n = is_target.len() as f64 - n_t;
    let mut b = 0.0;
    for _ in 0..max_iters.max(50) {
        let mut g = 0.0;
        let mut h = 0.0;
        for (&s, &t) in fixed_scores.iter().zip(is_target) {
            let sig = sigmoid(s + b + prior_logit);
            let (weight, curv) = if t {
                (prior * (sig - 1.0) / n_t, prior * sig * (1.0 - sig) / n_t)
            } else {
                (
                    (1.0 - prior) * sig / n_n,
                    (1.0 - prior) * sig * (1.0 - sig) / n_n,
                )
            };
            g += weight;
            h += curv;
        }
        if g.abs() < GRAD_TOL {
            break;
        }
        b -= g / h;
    }
    Ok(b)
}

/// Applies an affine calibration elementwise.
pub fn apply_calibration(scores: &ScoreSet, cal: &AffineCalibration) -> ScoreSet {
    let out: Vec<f64> = scores.scores().iter().map(|&s| cal.apply_one(s)).collect();
    scores
        .with_scores(out)
        .expect("affine map of finite scores is finite")
}

/// Legacy calibration: scales scores to unit pooled within-class variance,
/// then shifts so that the two min-cost thresholds land, on average, on the
/// fixed operating thresholds `ln beta`.
pub fn fit_shift_calibration(
    scores: &[f64],
    is_target: &[bool],
    betas: Betas,
) -> Result<AffineCalibration> {
    let n_t = is_target.iter().filter(|&&t| t).count();
    let n_n = is_target.len() - n_t;
    if n_t == 0 {
        return Err(Error::SingleClass("no target trials"));
    }
    if n_n == 0 {
        return Err(Error::SingleClass("no nontarget trials"));
    }
    let mut m_t = 0.0;
    let mut m_n = 0.0;
    for (&s, &t) in scores.iter().zip(is_target) {
        if t {
            m_t += s / n_t as f64;
        } else {
            m_n += s / n_n as f64;
        }
    }
    let mut pooled = 0.0;
    for (&s, &t) in scores.iter().zip(is_target) {
        let m = if t { m_t } else { m_n };
        pooled += (s - m) * (s - m);
    }
    let denom = (is_target.len() as isize - 2).max(1) as f64;
    let sigma = (pooled / denom).sqrt();
    if sigma <= 1e-12 {
        return Err(Error::Degenerate(
            "within-class score variance is zero; cannot variance-normalize".into(),
        ));
    }
    let a = 1.0 / sigma;
    let scaled: Vec<f64> = scores.iter().map(|&s| a * s).collect();
    // The sweep can return an infinite sentinel (accept or reject all) on
    // weakly separated scores; clamp to just past the score range so the
    // shift stays finite.
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let (th1, _) = crate::metrics::min_c_norm(&scaled, is_target, betas.beta1)?;
    let (th2, _) = crate::metrics::min_c_norm(&scaled, is_target, betas.beta2)?;
    let (target1, target2) = betas.thresholds();
    let b = 0.5 * ((target1 - th1.clamp(lo, hi)) + (target2 - th2.clamp(lo, hi)));
    AffineCalibration::new(a, b)
}

/// Fits a linear fusion of `K` systems by the same prior-weighted logistic
/// regression as calibration.
pub fn fit_fusion(
    systems: &[Vec<f64>],
    is_target: &[bool],
    effective_prior: f64,
    max_iters: usize,
    l2: f64,
) -> Result<FusionModel> {
    let report = fit_linear_logistic(systems, is_target, effective_prior, max_iters, l2)?;
    FusionModel::new(report.weights, report.bias)
}

/// Writes `a=...` / `b=...` lines; values use shortest round-trip formatting
/// so a reload is value-exact.
pub fn write_calibration(cal: &AffineCalibration, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, format!("a={}\nb={}\n", cal.a, cal.b)).map_err(|e| Error::io(path, e))
}

pub fn load_calibration(path: &std::path::Path) -> Result<AffineCalibration> {
    let kv = read_key_values(path)?;
    let get = |key: &str| -> Result<f64> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::parse(path, 1, format!("missing key {key:?}")))
    };
    AffineCalibration::new(get("a")?, get("b")?)
}

/// Writes `w1=...`, `w2=...`, ..., `bias=...` lines.
pub fn write_fusion(fusion: &FusionModel, path: &std::path::Path) -> Result<()> {
    let mut text = String::new();
    for (i, w) in fusion.weights.iter().enumerate() {
        text.push_str(&format!("w{}={}\n", i + 1, w));
    }
    text.push_str(&format!("bias={}\n", fusion.bias));
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_fusion(path: &std::path::Path) -> Result<FusionModel> {
    let kv = read_key_values(path)?;
    let mut weights = Vec::new();
    loop {
        let key = format!("w{}", weights.len() + 1);
        match kv.iter().find(|(k, _)| *k == key) {
            Some((_, v)) => weights.push(*v),
            None => break,
        }
    }
    let bias = kv
        .iter()
        .find(|(k, _)| k == "bias")
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::parse(path, 1, "missing key \"bias\""))?;
    FusionModel::new(weights, bias)
}

fn read_key_values(path: &std::path::Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(path, lineno + 1, "expected key=value")
        })?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, format!("bad value {value:?}")))?;
        out.push((key.trim().to_string(), value));
    }
    Ok(out)
}

/// Applies a fusion model to score sets over the identical trial list.
pub fn fuse_scores(systems: &[ScoreSet], fusion: &FusionModel) -> Result<ScoreSet> {
    if systems.len() != fusion.weights.len() {
        return Err(Error::InvalidConfig(format!(
            "fusion has {} weights but {} systems were supplied",
            fusion.weights.len(),
            systems.len()
        )));
    }
    let first = &systems[0];
    for (k, s) in systems.iter().enumerate().skip(1) {
        if s.pairs() != first.pairs() {
            return Err(Error::InvalidConfig(format!(
                "system {k} scores a different trial list than system 0"
            )));
        }
    }
    let mut fused = vec![fusion.bias; first.len()];
    for (s, &w) in systems.iter().zip(&fusion.weights) {
        for (f, &v) in fused.iter_mut().zip(s.scores()) {
            *f += w * v;
        }
    }
    first.with_scores(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn score_set(pairs: Vec<(&str, &str)>, scores: Vec<f64>) -> ScoreSet {
        ScoreSet::new(
            pairs
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            scores,
        )
        .unwrap()
    }

    fn cohort(
        ids: Vec<&str>,
        enroll: Vec<(&str, Vec<f64>)>,
        test: Vec<(&str, Vec<f64>)>,
    ) -> CohortScores {
        CohortScores::new(
            ids.into_iter().map(String::from).collect(),
            enroll
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            test.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unit_cohort_statistics_are_identity() {
        // Two cohort scores +-1/sqrt(2): mean 0, unbiased std exactly 1.
        let x = 1.0 / 2.0f64.sqrt();
        let c = cohort(
            vec!["c1", "c2"],
            vec![("e", vec![x, -x])],
            vec![("t", vec![x, -x])],
        );
        let raw = score_set(vec![("e", "t")], vec![1.7]);
        let out = as_norm(&raw, &c, 2).unwrap();
        assert_abs_diff_eq!(out.scores()[0], 1.7, epsilon = 1e-12);
    }

    #[test]
    fn worked_example_matches_hand_arithmetic() {
        // enroll top-2 {1, 3}: mu 2, sigma sqrt(2); test top-2 {0, 2}:
        // mu 1, sigma sqrt(2); s = 5 -> 7 / (2 sqrt(2)).
        let c = cohort(
            vec!["c1", "c2", "c3"],
            vec![("e", vec![1.0, 3.0, 0.5])],
            vec![("t", vec![0.0, 2.0, -1.0])],
        );
        let raw = score_set(vec![("e", "t")], vec![5.0]);
        let out = as_norm(&raw, &c, 2).unwrap();
        assert_abs_diff_eq!(out.scores()[0], 2.474874, epsilon = 1e-6);
        assert_abs_diff_eq!(out.scores()[0], 7.0 / (2.0 * 2.0f64.sqrt()), epsilon = 1e-12);
    }

    #[test]
    fn full_cohort_reduces_to_z_norm() {
        let scores = vec![0.3, -1.2, 2.0, 0.7, 1.1];
        let c = cohort(
            vec!["c1", "c2", "c3", "c4", "c5"],
            vec![("e", scores.clone())],
            vec![("t", scores.clone())],
        );
        let raw = score_set(vec![("e", "t")], vec![0.9]);
        let out = as_norm(&raw, &c, 5).unwrap();

        let mu = scores.iter().sum::<f64>() / 5.0;
        let sd = (scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert_abs_diff_eq!(out.scores()[0], (0.9 - mu) / sd, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_and_missing_cohorts_error() {
        let c = cohort(
            vec!["c1", "c2"],
            vec![("e", vec![1.0, 1.0])],
            vec![("t", vec![0.0, 1.0])],
        );
        let raw = score_set(vec![("e", "t")], vec![0.5]);
        match as_norm(&raw, &c, 2).unwrap_err() {
            Error::Degenerate(msg) => assert!(msg.contains("\"e\"")),
            other => panic!("unexpected {other:?}"),
        }

        let raw = score_set(vec![("missing", "t")], vec![0.5]);
        assert!(as_norm(&raw, &c, 2).is_err());
    }

    #[test]
    fn as_norm_is_per_trial_local() {
        let c = cohort(
            vec!["c1", "c2", "c3"],
            vec![("e1", vec![1.0, 0.0, 2.0]), ("e2", vec![0.5, 1.5, -0.5])],
            vec![("t1", vec![0.2, 0.8, 0.0]), ("t2", vec![1.0, -1.0, 0.3])],
        );
        let raw1 = score_set(vec![("e1", "t1"), ("e2", "t2")], vec![1.0, 2.0]);
        let raw2 = score_set(vec![("e1", "t1"), ("e2", "t2")], vec![1.0, 3.0]);
        let out1 = as_norm(&raw1, &c, 2).unwrap();
        let out2 = as_norm(&raw2, &c, 2).unwrap();
        assert_eq!(out1.scores()[0], out2.scores()[0]);
        assert_ne!(out1.scores()[1], out2.scores()[1]);
    }

    /// Synthetic proper-LLR scores with same/different-speaker labels.
    fn llr_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        llr_scores_with_noise(n, seed, 0.8)
    }

    fn llr_scores_with_noise(n: usize, seed: u64, noise_scale: f64) -> (Vec<f64>, Vec<bool>) {
        use crate::preprocess::Preprocessor;
        use crate::synth::{self, SynthConfig};
        let data = synth::generate(&SynthConfig {
            n_speakers: 300,
            utts_per_speaker: 4,
            dim: 5,
            speaker_scale: 1.0,
            noise_scale,
            domain_shift: None,
            seed,
        })
        .unwrap();
        let model = crate::gplda::GPLDAModel::new(
            Preprocessor::identity(5),
            data.phi.clone(),
            data.sigma_wc.clone(),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
        let set = &data.embeddings;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        while scores.len() < n {
            let i = rng.random_range(0..set.len());
            let j = rng.random_range(0..set.len());
            if i == j {
                continue;
            }
            scores.push(model.score_preprocessed(&set.row(i), &set.row(j)).unwrap());
            labels.push(set.speakers()[i] == set.speakers()[j]);
        }
        (scores, labels)
    }

    #[test]
    fn proper_llrs_calibrate_to_identity() {
        let (scores, labels) = llr_scores(100_000, 21);
        let cal = fit_calibration(&scores, &labels, 0.0075, DEFAULT_MAX_ITERS, DEFAULT_L2).unwrap();
        assert!(
            cal.a() > 0.9 && cal.a() < 1.1,
            "scale {} not near 1",
            cal.a()
        );
        assert!(cal.b().abs() < 0.1, "offset {} not near 0", cal.b());
    }

    #[test]
    fn random_labels_shrink_the_scale() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let scores: Vec<f64> = (0..20_000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<bool> = (0..20_000).map(|_| rng.random_bool(0.1)).collect();
        let cal = fit_calibration(&scores, &labels, 0.0075, DEFAULT_MAX_ITERS, DEFAULT_L2).unwrap();
        assert!(cal.a() > 0.0);
        assert!(cal.a() < 0.05, "scale {} did not shrink", cal.a());
        let spread = cal.a() * 10.0;
        assert!(spread < 0.5, "calibrated scores not near-constant");
    }

    #[test]
    fn informative_scores_get_positive_scale() {
        let (scores, labels) = llr_scores(5_000, 34);
        let cal = fit_calibration(&scores, &labels, 0.01, DEFAULT_MAX_ITERS, DEFAULT_L2).unwrap();
        assert!(cal.a() > 0.0);
    }

    #[test]
    fn calibration_preserves_c_min_and_eer() {
        let (scores, labels) = llr_scores(5_000, 35);
        let miscal: Vec<f64> = scores.iter().map(|s| 3.0 * s + 2.0).collect();
        let cal = fit_calibration(&miscal, &labels, 0.0075, DEFAULT_MAX_ITERS, DEFAULT_L2).unwrap();
        let set = ScoreSet::new(
            (0..miscal.len())
                .map(|i| (format!("e{i}"), format!("t{i}")))
                .collect(),
            miscal.clone(),
        )
        .unwrap();
        let calibrated = apply_calibration(&set, &cal);
        let betas = Betas::default();
        let before = metrics::c_min(&miscal, &labels, betas).unwrap();
        let after = metrics::c_min(calibrated.scores(), &labels, betas).unwrap();
        assert_eq!(before.value, after.value);
        assert_eq!(
            metrics::eer(&miscal, &labels).unwrap(),
            metrics::eer(calibrated.scores(), &labels).unwrap()
        );
        // The fixed-threshold cost does change.
        let cp_before = metrics::c_primary_actual(&miscal, &labels, betas).unwrap();
        let cp_after = metrics::c_primary_actual(calibrated.scores(), &labels, betas).unwrap();
        assert_ne!(cp_before, cp_after);
    }

    #[test]
    fn apply_calibration_is_affine() {
        let set = score_set(vec![("e", "t")], vec![3.0]);
        let cal = AffineCalibration::new(2.0, -1.0).unwrap();
        assert_eq!(apply_calibration(&set, &cal).scores()[0], 5.0);
        let id = AffineCalibration::new(1.0, 0.0).unwrap();
        assert_eq!(apply_calibration(&set, &id).scores()[0], 3.0);
    }

    #[test]
    fn single_system_fusion_equals_calibration() {
        let (scores, labels) = llr_scores(5_000, 36);
        let cal = fit_calibration(&scores, &labels, 0.0075, DEFAULT_MAX_ITERS, DEFAULT_L2).unwrap();
        let fusion = fit_fusion(
            &[scores.clone()],
            &labels,
            0.0075,
            DEFAULT_MAX_ITERS,
            DEFAULT_L2,
        )
        .unwrap();
        assert!((fusion.weights()[0] - cal.a()).abs() < 1e-8);
        assert!((fusion.bias() - cal.b()).abs() < 1e-8);
    }

    #[test]
    fn duplicated_systems_share_weight_under_l2() {
        let (scores, labels) = llr_scores(5_000, 37);
        let fusion = fit_fusion(
            &[scores.clone(), scores.clone()],
            &labels,
            0.0075,
            DEFAULT_MAX_ITERS,
            1e-3,
        )
        .unwrap();
        assert!(
            (fusion.weights()[0] - fusion.weights()[1]).abs() < 1e-6,
            "weights {:?}",
            fusion.weights()
        );
    }

    #[test]
    fn duplicated_systems_without_l2_are_singular() {
        let (scores, labels) = llr_scores(2_000, 38);
        assert!(matches!(
            fit_fusion(
                &[scores.clone(), scores.clone()],
                &labels,
                0.0075,
                DEFAULT_MAX_ITERS,
                0.0
            )
            .unwrap_err(),
            Error::Singular(_)
        ));
    }

    #[test]
    fn solver_objective_is_monotone_and_converges() {
        let (scores, labels) = llr_scores(5_000, 39);
        let report =
            fit_linear_logistic(&[scores], &labels, 0.0075, DEFAULT_MAX_ITERS, DEFAULT_L2).unwrap();
        for w in report.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "objective increased: {w:?}");
        }
        assert!(report.grad_norm < 1e-6);
    }

    #[test]
    fn shift_calibration_centers_min_cost_thresholds() {
        // Well-separated scores keep both min-cost thresholds finite.
        let (scores, labels) = llr_scores_with_noise(20_000, 40, 0.4);
        let betas = Betas::default();
        let cal = fit_shift_calibration(&scores, &labels, betas).unwrap();
        assert!(cal.a() > 0.0);
        let calibrated: Vec<f64> = scores.iter().map(|&s| cal.apply_one(s)).collect();
        let (th1, _) = metrics::min_c_norm(&calibrated, &labels, betas.beta1).unwrap();
        let (th2, _) = metrics::min_c_norm(&calibrated, &labels, betas.beta2).unwrap();
        let (t1, t2) = betas.thresholds();
        let residual = 0.5 * ((th1 - t1) + (th2 - t2));
        assert!(residual.abs() < 1e-6, "mean threshold residual {residual}");
    }

    #[test]
    fn fuse_scores_combines_linearly() {
        let a = score_set(vec![("e", "t"), ("f", "u")], vec![1.0, 2.0]);
        let b = score_set(vec![("e", "t"), ("f", "u")], vec![-1.0, 0.5]);
        let fusion = FusionModel::new(vec![2.0, 1.0], 0.25).unwrap();
        let fused = fuse_scores(&[a, b], &fusion).unwrap();
        assert_eq!(fused.scores(), &[2.0 - 1.0 + 0.25, 4.0 + 0.5 + 0.25]);
    }

    #[test]
    fn parameter_files_round_trip_exactly() {
        let dir = std::env::temp_dir().join("sv-core-postproc");
        std::fs::create_dir_all(&dir).unwrap();
        let cal_path = dir.join(format!("{}-cal.txt", std::process::id()));
        let cal = AffineCalibration::new(1.0 / 3.0, -0.12345678901234567).unwrap();
        write_calibration(&cal, &cal_path).unwrap();
        assert_eq!(load_calibration(&cal_path).unwrap(), cal);

        let fus_path = dir.join(format!("{}-fus.txt", std::process::id()));
        let fusion = FusionModel::new(vec![0.7, -0.2, 1.0 / 7.0], 2.5e-3).unwrap();
        write_fusion(&fusion, &fus_path).unwrap();
        assert_eq!(load_fusion(&fus_path).unwrap(), fusion);
    }

    #[test]
    fn default_effective_prior_value() {
        assert_abs_diff_eq!(
            default_effective_prior(Betas::default()),
            0.0075,
            epsilon = 1e-12
        );
    }
}
