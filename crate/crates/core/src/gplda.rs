//! Generative two-covariance PLDA.
//!
//! Model: `eta = phi * omega + epsilon` with standard-normal latent speaker
//! factor `omega` and residual `epsilon ~ N(0, sigma_wc)`. The speaker
//! subspace is full-rank square, so the across-class covariance is
//! `sigma_ac = phi * phi^T`.
//!
//! Scoring is the exact joint-Gaussian log-likelihood ratio
//! `s = 1/2 eta_e^T Q eta_e + 1/2 eta_t^T Q eta_t + eta_e^T P eta_t + c`,
//! where `c` is the log-determinant ratio that makes the score a true LLR.
//! Training is EM with a per-speaker posterior over the latent factor,
//! initialized from the sample between/within moments.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::data::{EmbeddingSet, ScoreSet, TrialList};
use crate::error::{Error, Result};
use crate::linalg;
use crate::preprocess::{self, Preprocessor};

/// Scoring matrices of the exact LLR quadratic form.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringParams {
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub c: f64,
}

/// Computes `(Q, P, c)` from the model covariances.
///
/// `Q = tot_inv - schur_inv`, `P = tot_inv * sigma_ac * schur_inv` with
/// `schur = sigma_tot - sigma_ac * tot_inv * sigma_ac`, and
/// `c = 1/2 (log det sigma_tot - log det schur)`, the log-determinant ratio
/// of the different- and same-speaker joint covariances.
pub fn scoring_params(phi: &DMatrix<f64>, sigma_wc: &DMatrix<f64>) -> Result<ScoringParams> {
    let r = phi.nrows();
    if phi.ncols() != r {
        return Err(Error::DimensionMismatch {
            context: "speaker subspace must be square",
            expected: r,
            actual: phi.ncols(),
        });
    }
    if sigma_wc.nrows() != r || sigma_wc.ncols() != r {
        return Err(Error::DimensionMismatch {
            context: "within-class covariance",
            expected: r,
            actual: sigma_wc.nrows(),
        });
    }
    let sigma_ac = linalg::symmetrize(&(phi * phi.transpose()));
    let sigma_tot = &sigma_ac + sigma_wc;
    let tot_inv = linalg::spd_inverse(&sigma_tot, "total covariance")?;
    let schur = linalg::symmetrize(&(&sigma_tot - &sigma_ac * &tot_inv * &sigma_ac));
    let schur_inv = linalg::spd_inverse(&schur, "same-speaker Schur complement")?;
    let q = linalg::symmetrize(&(&tot_inv - &schur_inv));
    let p = linalg::symmetrize(&(&tot_inv * &sigma_ac * &schur_inv));
    let c = 0.5
        * (linalg::spd_log_det(&sigma_tot, "total covariance")?
            - linalg::spd_log_det(&schur, "same-speaker Schur complement")?);
    Ok(ScoringParams { q, p, c })
}

/// Trained generative PLDA back-end: the preprocessing chain plus the
/// two-covariance model and its cached scoring form. Immutable after
/// construction; scoring is pure.
#[derive(Debug, Clone, PartialEq)]
pub struct GPLDAModel {
    preprocessor: Preprocessor,
    phi: DMatrix<f64>,
    sigma_wc: DMatrix<f64>,
    sigma_ac: DMatrix<f64>,
    sigma_tot: DMatrix<f64>,
    scoring: ScoringParams,
}

impl GPLDAModel {
    pub fn new(
        preprocessor: Preprocessor,
        phi: DMatrix<f64>,
        sigma_wc: DMatrix<f64>,
    ) -> Result<Self> {
        let r = preprocessor.output_dim();
        if phi.nrows() != r {
            return Err(Error::DimensionMismatch {
                context: "speaker subspace vs preprocessor output",
                expected: r,
                actual: phi.nrows(),
            });
        }
        let scoring = scoring_params(&phi, &sigma_wc)?;
        let sigma_ac = linalg::symmetrize(&(&phi * phi.transpose()));
        let sigma_tot = &sigma_ac + &sigma_wc;
        Ok(GPLDAModel {
            preprocessor,
            phi,
            sigma_wc,
            sigma_ac,
            sigma_tot,
            scoring,
        })
    }

    pub fn preprocessor(&self) -> &Preprocessor {
        &self.preprocessor
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn sigma_wc(&self) -> &DMatrix<f64> {
        &self.sigma_wc
    }

    pub fn sigma_ac(&self) -> &DMatrix<f64> {
        &self.sigma_ac
    }

    pub fn sigma_tot(&self) -> &DMatrix<f64> {
        &self.sigma_tot
    }

    pub fn scoring(&self) -> &ScoringParams {
        &self.scoring
    }

    /// Latent dimension of the model (after preprocessing).
    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    /// Raw input dimension expected by `score_trial`.
    pub fn input_dim(&self) -> usize {
        self.preprocessor.input_dim()
    }

    /// LLR of a trial given already-preprocessed embeddings.
    ///
    /// The cross term is evaluated symmetrically so that swapping the inputs
    /// returns a bit-identical score.
    pub fn score_preprocessed(&self, eta_e: &DVector<f64>, eta_t: &DVector<f64>) -> Result<f64> {
        let r = self.dim();
        if eta_e.len() != r || eta_t.len() != r {
            return Err(Error::DimensionMismatch {
                context: "preprocessed trial embedding",
                expected: r,
                actual: if eta_e.len() != r { eta_e.len() } else { eta_t.len() },
            });
        }
        let quad_e = 0.5 * linalg::quad_form(eta_e, &self.scoring.q, eta_e);
        let quad_t = 0.5 * linalg::quad_form(eta_t, &self.scoring.q, eta_t);
        let cross = 0.5
            * (linalg::quad_form(eta_e, &self.scoring.p, eta_t)
                + linalg::quad_form(eta_t, &self.scoring.p, eta_e));
        Ok((quad_e + quad_t) + cross + self.scoring.c)
    }

    /// LLR of a trial given raw (un-preprocessed) embeddings.
    pub fn score_trial(&self, x_e: &DVector<f64>, x_t: &DVector<f64>) -> Result<f64> {
        let eta_e = self.preprocessor.apply(x_e)?;
        let eta_t = self.preprocessor.apply(x_t)?;
        self.score_preprocessed(&eta_e, &eta_t)
    }

    /// Multi-session enrollment: raw enrollment embeddings are averaged
    /// before preprocessing, then scored as a single trial.
    pub fn score_trial_multi_enroll(
        &self,
        enrollments: &[DVector<f64>],
        x_t: &DVector<f64>,
    ) -> Result<f64> {
        let pooled = average_enrollment(enrollments)?;
        self.score_trial(&pooled, x_t)
    }

    /// Scores every pair of a trial list. Each utterance is preprocessed
    /// once and reused; output order matches the trial list.
    pub fn score_trials(&self, embeddings: &EmbeddingSet, trials: &TrialList) -> Result<ScoreSet> {
        let index = embeddings.index_map();
        let mut cache: HashMap<usize, DVector<f64>> = HashMap::new();
        let mut scores = Vec::with_capacity(trials.len());
        for (trial_index, (enroll, test)) in trials.pairs().iter().enumerate() {
            let mut eta_of = |id: &str| -> Result<DVector<f64>> {
                let &row = index.get(id).ok_or_else(|| Error::UnknownUtterance {
                    id: id.to_string(),
                    trial_index,
                })?;
                if let Some(eta) = cache.get(&row) {
                    return Ok(eta.clone());
                }
                let eta = self.preprocessor.apply(&embeddings.row(row))?;
                cache.insert(row, eta.clone());
                Ok(eta)
            };
            let eta_e = eta_of(enroll)?;
            let eta_t = eta_of(test)?;
            scores.push(self.score_preprocessed(&eta_e, &eta_t)?);
        }
        ScoreSet::new(trials.pairs().to_vec(), scores)
    }
}

/// Pools a multi-session enrollment by averaging raw embeddings.
pub fn average_enrollment(embeddings: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty enrollment set".into()))?;
    let mut sum = DVector::zeros(first.len());
    for e in embeddings {
        if e.len() != first.len() {
            return Err(Error::DimensionMismatch {
                context: "enrollment embedding",
                expected: first.len(),
                actual: e.len(),
            });
        }
        sum += e;
    }
    Ok(sum / embeddings.len() as f64)
}

/// Output of [`fit_gplda`]: model covariances plus the marginal
/// log-likelihood trace (entry 0 is the initialization, one entry per EM
/// iteration after that).
#[derive(Debug, Clone, PartialEq)]
pub struct PldaEstimate {
    pub phi: DMatrix<f64>,
    pub sigma_wc: DMatrix<f64>,
    pub log_likelihood: Vec<f64>,
}

struct SpeakerStats {
    count: f64,
    sum: DVector<f64>,
    /// Sum of x x^T over the speaker's rows.
    scatter: DMatrix<f64>,
}

/// EM training of the two-covariance model on preprocessed, labeled data.
///
/// `em_iters == 0` returns the moment-based initialization (between-class
/// covariance of speaker means, pooled within-class covariance). The
/// marginal log-likelihood is evaluated after every iteration and must be
/// non-decreasing to within 1e-8; a violation reports numerical breakdown.
pub fn fit_gplda(data: &EmbeddingSet, em_iters: usize) -> Result<PldaEstimate> {
    let groups = preprocess::validate_labeled_classes(data)?;
    let r = data.dim();
    let n_total: usize = groups.values().map(|v| v.len()).sum();

    let mut stats = Vec::with_capacity(groups.len());
    for idxs in groups.values() {
        let mut sum = DVector::zeros(r);
        let mut scatter = DMatrix::zeros(r, r);
        for &i in idxs {
            let x = data.row(i);
            sum += &x;
            scatter.syger(1.0, &x, &x, 1.0);
        }
        mirror_lower(&mut scatter);
        stats.push(SpeakerStats {
            count: idxs.len() as f64,
            sum,
            scatter,
        });
    }

    let (within, between, _) = preprocess::class_covariances(data.matrix(), &groups);
    let mut b = floor_spd(&between);
    let mut w = floor_spd(&within);

    let mut trace = Vec::with_capacity(em_iters + 1);
    trace.push(log_likelihood(&stats, &b, &w, n_total, r)?);

    for iter in 0..em_iters {
        let b_inv = linalg::spd_inverse(&b, "between-class covariance during EM")?;
        let w_inv = linalg::spd_inverse(&w, "within-class covariance during EM")?;

        let mut b_acc = DMatrix::zeros(r, r);
        let mut w_acc = DMatrix::zeros(r, r);
        for s in &stats {
            let precision = &b_inv + &w_inv * s.count;
            let cov = linalg::spd_inverse(&precision, "posterior precision during EM")?;
            let mean = &cov * (&w_inv * &s.sum);

            b_acc += &cov + &mean * mean.transpose();
            // sum_i (x_i - m)(x_i - m)^T = scatter - m sum^T - sum m^T + n m m^T
            w_acc += &s.scatter - &mean * s.sum.transpose() - &s.sum * mean.transpose()
                + (&mean * mean.transpose() + &cov) * s.count;
        }
        b = linalg::symmetrize(&(b_acc / stats.len() as f64));
        w = linalg::symmetrize(&(w_acc / n_total as f64));

        let ll = log_likelihood(&stats, &b, &w, n_total, r)?;
        let prev = *trace.last().unwrap();
        if ll < prev - 1e-8 {
            return Err(Error::Numerical(format!(
                "EM log-likelihood decreased at iteration {}: {prev} -> {ll}",
                iter + 1
            )));
        }
        trace.push(ll);
    }

    let phi = linalg::spd_cholesky(&b, "between-class covariance")?.l();
    Ok(PldaEstimate {
        phi,
        sigma_wc: w,
        log_likelihood: trace,
    })
}

/// Marginal log-likelihood of the grouped data under `(B, W)`: for each
/// speaker the observations are jointly Gaussian with the latent speaker
/// mean integrated out analytically.
fn log_likelihood(
    stats: &[SpeakerStats],
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    n_total: usize,
    r: usize,
) -> Result<f64> {
    let w_inv = linalg::spd_inverse(w, "within-class covariance")?;
    let log_det_w = linalg::spd_log_det(w, "within-class covariance")?;
    let b_inv = linalg::spd_inverse(b, "between-class covariance")?;
    let log_det_b = linalg::spd_log_det(b, "between-class covariance")?;

    let mut ll = -0.5 * (n_total * r) as f64 * (2.0 * std::f64::consts::PI).ln();
    for s in stats {
        let precision = &b_inv + &w_inv * s.count;
        let log_det_prec = linalg::spd_log_det(&precision, "posterior precision")?;
        let rhs = &w_inv * &s.sum;
        let mean = linalg::spd_cholesky(&precision, "posterior precision")?.solve(&rhs);
        let data_term = (&w_inv * &s.scatter).trace();
        ll += -0.5 * s.count * log_det_w - 0.5 * data_term - 0.5 * log_det_b
            - 0.5 * log_det_prec
            + 0.5 * mean.dot(&(&precision * &mean));
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("PLDA log-likelihood evaluation".into()));
    }
    Ok(ll)
}

fn mirror_lower(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Clips tiny or negative eigenvalues so moment initializations are usable
/// as positive-definite covariances.
fn floor_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = linalg::sym_eigen_desc(m);
    let floor = (vals[0].max(0.0) * 1e-10).max(1e-12);
    let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|&v| v.max(floor)));
    linalg::symmetrize(&(&vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose()))
}

/// Convenience pipeline: fits the preprocessing chain on raw labeled data,
/// transforms it, runs EM and assembles the full back-end model. Returns the
/// model and the EM log-likelihood trace.
pub fn train_backend(
    data: &EmbeddingSet,
    lda_dim: usize,
    em_iters: usize,
) -> Result<(GPLDAModel, Vec<f64>)> {
    let preprocessor = preprocess::fit_preprocessor(data, lda_dim)?;
    let transformed = preprocessor.apply_set(data)?;
    let estimate = fit_gplda(&transformed, em_iters)?;
    let model = GPLDAModel::new(preprocessor, estimate.phi, estimate.sigma_wc)?;
    Ok((model, estimate.log_likelihood))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Gender;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn one_d_model() -> GPLDAModel {
        GPLDAModel::new(
            Preprocessor::identity(1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    fn random_spd(r: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        let a = DMatrix::<f64>::from_fn(r, r, |_, _| StandardNormal.sample(rng));
        linalg::symmetrize(&(&a * a.transpose())) + DMatrix::identity(r, r) * 0.5
    }

    #[test]
    fn zero_speaker_covariance_gives_null_scoring() {
        let phi = DMatrix::zeros(3, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let wc = random_spd(3, &mut rng);
        let sp = scoring_params(&phi, &wc).unwrap();
        assert_eq!(sp.q, DMatrix::zeros(3, 3));
        assert_eq!(sp.p, DMatrix::zeros(3, 3));
        assert_eq!(sp.c, 0.0);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let phi = DMatrix::from_element(1, 1, 1.0);
        let wc = DMatrix::from_element(1, 1, 1.0);
        let sp = scoring_params(&phi, &wc).unwrap();
        // Sigma_tot = 2, Schur = 3/2; joint determinants are 4 and 3.
        assert_abs_diff_eq!(sp.q[(0, 0)], -1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sp.p[(0, 0)], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sp.c, 0.5 * (4.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(sp.c, 0.5 * (4.0f64.ln() - 3.0f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn scoring_params_match_joint_gaussian_blocks() {
        // Brute force from the 2R x 2R joint quadratic form:
        // LLR = 1/2 z^T (Sigma_diff^-1 - Sigma_same^-1) z + c, whose top-left
        // block is Q and top-right block is P.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for r in [1usize, 3, 6] {
            let a = DMatrix::<f64>::from_fn(r, r, |_, _| StandardNormal.sample(&mut rng));
            let phi = a.clone();
            let wc = random_spd(r, &mut rng);
            let sp = scoring_params(&phi, &wc).unwrap();

            let ac = &phi * phi.transpose();
            let tot = &ac + &wc;
            let mut same = DMatrix::zeros(2 * r, 2 * r);
            let mut diff = DMatrix::zeros(2 * r, 2 * r);
            for i in 0..r {
                for j in 0..r {
                    same[(i, j)] = tot[(i, j)];
                    same[(i + r, j + r)] = tot[(i, j)];
                    same[(i, j + r)] = ac[(i, j)];
                    same[(i + r, j)] = ac[(i, j)];
                    diff[(i, j)] = tot[(i, j)];
                    diff[(i + r, j + r)] = tot[(i, j)];
                }
            }
            let m = diff.clone().try_inverse().unwrap() - same.clone().try_inverse().unwrap();
            for i in 0..r {
                for j in 0..r {
                    assert_abs_diff_eq!(sp.q[(i, j)], m[(i, j)], epsilon = 1e-8);
                    assert_abs_diff_eq!(sp.p[(i, j)], m[(i, j + r)], epsilon = 1e-8);
                }
            }

            // Symmetry and negative semidefiniteness of Q.
            assert!((&sp.q - sp.q.transpose()).abs().max() < 1e-10);
            assert!((&sp.p - sp.p.transpose()).abs().max() < 1e-10);
            let (vals, _) = linalg::sym_eigen_desc(&sp.q);
            assert!(vals[0] <= 1e-10, "Q has positive eigenvalue {}", vals[0]);
        }
    }

    #[test]
    fn score_of_zero_embeddings_is_c() {
        let m = one_d_model();
        let zero = DVector::from_element(1, 0.0);
        let s = m.score_preprocessed(&zero, &zero).unwrap();
        assert_abs_diff_eq!(s, 0.14384103622589045, epsilon = 1e-12);
    }

    #[test]
    fn score_of_unit_embeddings_matches_hand_value() {
        let m = one_d_model();
        let one = DVector::from_element(1, 1.0);
        let s = m.score_preprocessed(&one, &one).unwrap();
        let expected = -1.0 / 6.0 + 1.0 / 3.0 + 0.5 * (4.0f64 / 3.0).ln();
        assert_abs_diff_eq!(s, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.310508, epsilon = 1e-6);
    }

    #[test]
    fn one_dimensional_score_matches_numerical_integration() {
        // Independent oracle: trapezoid quadrature of the same-speaker
        // marginal against the closed-form different-speaker density.
        let m = one_d_model();
        let gauss =
            |x: f64, var: f64| (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        for (e, t) in [(1.0, 1.0), (0.3, -0.8), (2.0, 1.5), (-1.2, 0.4)] {
            let mut p_same = 0.0;
            let h = 1e-3;
            let lim = 10.0;
            let steps = (2.0 * lim / h) as usize;
            for k in 0..=steps {
                let omega = -lim + k as f64 * h;
                let f = gauss(omega, 1.0) * gauss(e - omega, 1.0) * gauss(t - omega, 1.0);
                let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
                p_same += weight * f * h;
            }
            let p_diff = gauss(e, 2.0) * gauss(t, 2.0);
            let oracle = p_same.ln() - p_diff.ln();
            let got = m
                .score_preprocessed(&DVector::from_element(1, e), &DVector::from_element(1, t))
                .unwrap();
            assert_abs_diff_eq!(got, oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn score_is_bit_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let phi = DMatrix::<f64>::from_fn(5, 5, |_, _| StandardNormal.sample(&mut rng));
        let wc = random_spd(5, &mut rng);
        let m = GPLDAModel::new(Preprocessor::identity(5), phi, wc).unwrap();
        for _ in 0..100 {
            let e = DVector::<f64>::from_fn(5, |_, _| StandardNormal.sample(&mut rng));
            let t = DVector::<f64>::from_fn(5, |_, _| StandardNormal.sample(&mut rng));
            let ab = m.score_trial(&e, &t).unwrap();
            let ba = m.score_trial(&t, &e).unwrap();
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn fit_rejects_single_speaker() {
        let rows = DMatrix::from_row_slice(4, 2, &[0.1, 0.2, 0.3, -0.1, -0.2, 0.4, 0.0, 0.5]);
        let set = EmbeddingSet::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![Some("s".into()); 4],
            vec![Gender::M; 4],
            rows,
        )
        .unwrap();
        assert!(matches!(fit_gplda(&set, 3).unwrap_err(), Error::Infeasible(_)));
    }

    #[test]
    fn zero_iterations_return_moment_init() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n_spk = 20;
        let utts = 6;
        let r = 3;
        let mut rows = DMatrix::zeros(n_spk * utts, r);
        let mut speakers = Vec::new();
        for s in 0..n_spk {
            let mean: Vec<f64> = (0..r)
                .map(|_| {
                    2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            for u in 0..utts {
                for j in 0..r {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    rows[(s * utts + u, j)] = mean[j] + 0.5 * e;
                }
                speakers.push(Some(format!("s{s}")));
            }
        }
        let set = EmbeddingSet::new(
            (0..n_spk * utts).map(|i| format!("u{i}")).collect(),
            speakers,
            vec![Gender::F; n_spk * utts],
            rows,
        )
        .unwrap();

        let init = fit_gplda(&set, 0).unwrap();
        assert_eq!(init.log_likelihood.len(), 1);
        // phi phi^T reproduces the floored between-class moment.
        let groups = set.speaker_groups();
        let (within, between, _) = preprocess::class_covariances(set.matrix(), &groups);
        let b = &init.phi * init.phi.transpose();
        assert!((&b - &between).abs().max() < 1e-8);
        assert!((&init.sigma_wc - &within).abs().max() < 1e-8);

        // And EM from there is monotone.
        let fitted = fit_gplda(&set, 10).unwrap();
        assert_eq!(fitted.log_likelihood.len(), 11);
        for w in fitted.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "log-likelihood decreased: {w:?}");
        }
    }

    #[test]
    fn batch_scoring_matches_single_and_reports_unknown_ids() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let phi = DMatrix::<f64>::from_fn(3, 3, |_, _| StandardNormal.sample(&mut rng));
        let wc = random_spd(3, &mut rng);
        let model = GPLDAModel::new(Preprocessor::identity(3), phi, wc).unwrap();

        let n = 40;
        let rows = DMatrix::<f64>::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let set = EmbeddingSet::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            vec![None; n],
            vec![Gender::U; n],
            rows,
        )
        .unwrap();

        let empty = model
            .score_trials(&set, &TrialList::unlabeled(vec![]))
            .unwrap();
        assert!(empty.is_empty());

        let mut pairs = Vec::new();
        for _ in 0..500 {
            let i = rand::Rng::random_range(&mut rng, 0..n);
            let j = rand::Rng::random_range(&mut rng, 0..n);
            pairs.push((format!("u{i}"), format!("u{j}")));
        }
        let trials = TrialList::unlabeled(pairs.clone());
        let batch = model.score_trials(&set, &trials).unwrap();
        for (k, (e, t)) in pairs.iter().enumerate() {
            let i: usize = e[1..].parse().unwrap();
            let j: usize = t[1..].parse().unwrap();
            let single = model.score_trial(&set.row(i), &set.row(j)).unwrap();
            assert!((batch.scores()[k] - single).abs() < 1e-12);
        }

        let bad = TrialList::unlabeled(vec![("u0".into(), "nope".into())]);
        match model.score_trials(&set, &bad).unwrap_err() {
            Error::UnknownUtterance { id, trial_index } => {
                assert_eq!(id, "nope");
                assert_eq!(trial_index, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn enrollment_averaging() {
        let a = DVector::from_vec(vec![1.0, 3.0]);
        let b = DVector::from_vec(vec![3.0, 5.0]);
        let avg = average_enrollment(&[a.clone(), b]).unwrap();
        assert_eq!(avg, DVector::from_vec(vec![2.0, 4.0]));
        assert_eq!(average_enrollment(&[a.clone()]).unwrap(), a);
        assert!(average_enrollment(&[]).is_err());
    }
}
