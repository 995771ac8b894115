//! Embedding preprocessing chain: centering and LDA projection, unit length
//! normalization, then a linear transform that simultaneously diagonalizes
//! the within- and between-class covariances of the training data.
//!
//! Covariance conventions used throughout (and assumed by the fits):
//! within = sum_s sum_i (x - mean_s)(x - mean_s)^T / N, between =
//! sum_s n_s (mean_s - mean)(mean_s - mean)^T / N, so within + between is the
//! total covariance about the global mean.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg;

/// Norms at or below this are treated as degenerate by length normalization.
pub const LENGTH_NORM_EPS: f64 = 1e-12;

/// Ridge added to the within-class covariance before the LDA eigenproblem,
/// as a fraction of `trace / D`.
const LDA_RIDGE: f64 = 1e-6;

/// Fitted preprocessing chain. Immutable once fitted; `apply` is pure.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    mean: DVector<f64>,
    lda: DMatrix<f64>,
    diag_transform: DMatrix<f64>,
}

impl Preprocessor {
    pub fn new(mean: DVector<f64>, lda: DMatrix<f64>, diag_transform: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let r = lda.nrows();
        if lda.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "preprocessor LDA columns vs mean",
                expected: d,
                actual: lda.ncols(),
            });
        }
        if diag_transform.nrows() != r || diag_transform.ncols() != r {
            return Err(Error::DimensionMismatch {
                context: "preprocessor diagonalizing transform",
                expected: r,
                actual: diag_transform.nrows().max(diag_transform.ncols()),
            });
        }
        if !linalg::all_finite(&lda) || !linalg::all_finite(&diag_transform) || !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("preprocessor contains non-finite entries".into()));
        }
        Ok(Preprocessor {
            mean,
            lda,
            diag_transform,
        })
    }

    /// Pass-through preprocessor of dimension `d` (length normalization is
    /// still applied; the linear stages are identities).
    pub fn identity(d: usize) -> Self {
        Preprocessor {
            mean: DVector::zeros(d),
            lda: DMatrix::identity(d, d),
            diag_transform: DMatrix::identity(d, d),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.lda.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn lda(&self) -> &DMatrix<f64> {
        &self.lda
    }

    pub fn diag_transform(&self) -> &DMatrix<f64> {
        &self.diag_transform
    }

    /// Full chain: center, project, length-normalize, diagonalize.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "preprocessor input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let projected = &self.lda * (x - &self.mean);
        let normalized = length_normalize(&projected)?;
        Ok(&self.diag_transform * normalized)
    }

    /// Applies the chain to every row of a set, preserving metadata.
    pub fn apply_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        let r = self.output_dim();
        let mut out = DMatrix::zeros(set.len(), r);
        for i in 0..set.len() {
            let eta = self.apply(&set.row(i))?;
            out.set_row(i, &eta.transpose());
        }
        EmbeddingSet::new(
            set.utt_ids().to_vec(),
            set.speakers().to_vec(),
            set.genders().to_vec(),
            out,
        )
    }
}

/// `v / ||v||`; degenerate when the norm is at or below [`LENGTH_NORM_EPS`].
pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if !norm.is_finite() || norm <= LENGTH_NORM_EPS {
        return Err(Error::Degenerate(format!(
            "cannot length-normalize a vector with norm {norm:.3e}"
        )));
    }
    Ok(v / norm)
}

/// Default LDA output dimension for a dataset shape.
pub fn default_lda_dim(dim: usize, n_speakers: usize) -> usize {
    150.min(dim).min(n_speakers.saturating_sub(1)).max(1)
}

/// Within- and between-class covariance of `rows` (N x D) under the module's
/// conventions. `groups` maps speaker to row indices. Returns
/// `(within, between, global_mean)`.
pub(crate) fn class_covariances(
    rows: &DMatrix<f64>,
    groups: &BTreeMap<&str, Vec<usize>>,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n: usize = groups.values().map(|v| v.len()).sum();
    let d = rows.ncols();
    let mut global = DVector::zeros(d);
    for idxs in groups.values() {
        for &i in idxs {
            global += rows.row(i).transpose();
        }
    }
    global /= n as f64;

    let mut within = DMatrix::zeros(d, d);
    let mut between = DMatrix::zeros(d, d);
    for idxs in groups.values() {
        let mut mean_s = DVector::zeros(d);
        for &i in idxs {
            mean_s += rows.row(i).transpose();
        }
        mean_s /= idxs.len() as f64;
        for &i in idxs {
            let dev = rows.row(i).transpose() - &mean_s;
            within.syger(1.0, &dev, &dev, 1.0);
        }
        let dev = &mean_s - &global;
        between.syger(idxs.len() as f64, &dev, &dev, 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..d {
        for j in (i + 1)..d {
            within[(i, j)] = within[(j, i)];
            between[(i, j)] = between[(j, i)];
        }
    }
    within /= n as f64;
    between /= n as f64;
    (within, between, global)
}

pub(crate) fn validate_labeled_classes(set: &EmbeddingSet) -> Result<BTreeMap<&str, Vec<usize>>> {
    if set.labeled_rows().len() != set.len() {
        return Err(Error::InvalidConfig(
            "data contains unlabeled utterances; select the labeled subset before fitting".into(),
        ));
    }
    let groups = set.speaker_groups();
    if groups.len() < 2 {
        return Err(Error::Infeasible(format!(
            "need at least 2 speakers, got {}",
            groups.len()
        )));
    }
    for (spk, idxs) in &groups {
        if idxs.len() < 2 {
            return Err(Error::Infeasible(format!(
                "speaker {spk:?} has {} utterance(s); at least 2 are required",
                idxs.len()
            )));
        }
    }
    Ok(groups)
}

/// Fits the full preprocessing chain on labeled training data.
///
/// After fitting, the chain maps the training set to coordinates whose
/// within-class covariance is the identity and whose between-class
/// covariance is diagonal. Deterministic: eigenvalues sorted descending and
/// eigenvector signs fixed.
pub fn fit_preprocessor(set: &EmbeddingSet, lda_dim: usize) -> Result<Preprocessor> {
    let groups = validate_labeled_classes(set)?;
    let d = set.dim();
    let max_dim = d.min(groups.len() - 1);
    if lda_dim == 0 || lda_dim > max_dim {
        return Err(Error::InvalidConfig(format!(
            "lda_dim {lda_dim} out of range: must be in 1..={max_dim} for {} speakers in {d}-D",
            groups.len()
        )));
    }

    let (within, between, mean) = class_covariances(set.matrix(), &groups);
    let ridge = LDA_RIDGE * within.trace() / d as f64;
    let within_reg = &within + DMatrix::identity(d, d) * ridge;
    let (_, vectors) = linalg::generalized_eigen_desc(&between, &within_reg, "within-class covariance")?;
    let lda = vectors.columns(0, lda_dim).transpose();

    // Project and length-normalize the training data, then fit the transform
    // that re-diagonalizes both covariances in the normalized space.
    let mut projected = DMatrix::zeros(set.len(), lda_dim);
    for i in 0..set.len() {
        let y = &lda * (set.row(i) - &mean);
        let y = length_normalize(&y)?;
        projected.set_row(i, &y.transpose());
    }
    let (w_hat, b_hat, _) = class_covariances(&projected, &groups);

    let (w_vals, w_vecs) = linalg::sym_eigen_desc(&w_hat);
    let floor = 1e-10 * w_vals[0].max(0.0);
    if w_vals.iter().any(|&v| v <= floor.max(0.0) || v <= 0.0) {
        return Err(Error::Singular(
            "within-class covariance after LDA is singular (too little data)".into(),
        ));
    }
    let mut whitener = DMatrix::zeros(lda_dim, lda_dim);
    for i in 0..lda_dim {
        let row = w_vecs.column(i).transpose() / w_vals[i].sqrt();
        whitener.set_row(i, &row);
    }
    let m = linalg::symmetrize(&(&whitener * &b_hat * whitener.transpose()));
    let (_, u) = linalg::sym_eigen_desc(&m);
    let mut diag_transform = u.transpose() * whitener;
    fix_row_signs(&mut diag_transform);

    Preprocessor::new(mean, lda.clone_owned(), diag_transform)
}

fn fix_row_signs(m: &mut DMatrix<f64>) {
    let mut t = m.transpose();
    linalg::fix_column_signs(&mut t);
    *m = t.transpose();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Gender;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn set_from(rows: DMatrix<f64>, speakers: Vec<&str>) -> EmbeddingSet {
        let n = rows.nrows();
        EmbeddingSet::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            speakers.into_iter().map(|s| Some(s.to_string())).collect(),
            vec![Gender::M; n],
            rows,
        )
        .unwrap()
    }

    fn gaussian_set(
        rng: &mut ChaCha12Rng,
        n_speakers: usize,
        utts: usize,
        class_std: &[f64],
        noise: f64,
    ) -> EmbeddingSet {
        let d = class_std.len();
        let mut rows = DMatrix::zeros(n_speakers * utts, d);
        let mut speakers = Vec::new();
        for s in 0..n_speakers {
            let mean: Vec<f64> = class_std
                .iter()
                .map(|&sd| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            for u in 0..utts {
                for j in 0..d {
                    let e: f64 = StandardNormal.sample(rng);
                    rows[(s * utts + u, j)] = mean[j] + noise * e;
                }
                speakers.push(format!("s{s}"));
            }
        }
        EmbeddingSet::new(
            (0..n_speakers * utts).map(|i| format!("u{i}")).collect(),
            speakers.into_iter().map(Some).collect(),
            vec![Gender::M; n_speakers * utts],
            rows,
        )
        .unwrap()
    }

    #[test]
    fn length_normalize_cases() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let n = length_normalize(&v).unwrap();
        assert_abs_diff_eq!(n[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n[1], 0.8, epsilon = 1e-15);

        let unit = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(length_normalize(&unit).unwrap(), unit);

        let zero = DVector::from_vec(vec![0.0, 0.0]);
        assert!(matches!(
            length_normalize(&zero).unwrap_err(),
            Error::Degenerate(_)
        ));
    }

    #[test]
    fn apply_reduces_to_length_norm_for_identity() {
        let p = Preprocessor::identity(2);
        let out = p.apply(&DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert_abs_diff_eq!(out[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn apply_at_mean_is_degenerate() {
        let p = Preprocessor::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(matches!(
            p.apply(&DVector::from_vec(vec![1.0, 2.0])).unwrap_err(),
            Error::Degenerate(_)
        ));
    }

    #[test]
    fn apply_matches_manual_stage_composition() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let d = 6;
        let r = 4;
        let randm = |rows: usize, cols: usize, rng: &mut ChaCha12Rng| {
            DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
        };
        let mean = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let lda = randm(r, d, &mut rng);
        let diag = randm(r, r, &mut rng);
        let p = Preprocessor::new(mean.clone(), lda.clone(), diag.clone()).unwrap();

        for _ in 0..20 {
            let x = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let y = &lda * (&x - &mean);
            let y_hat = &y / y.norm();
            let manual = &diag * y_hat;
            let got = p.apply(&x).unwrap();
            assert_abs_diff_eq!((got - manual).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn scale_invariance_about_the_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let set = gaussian_set(&mut rng, 6, 8, &[2.0, 1.5, 1.0, 0.8], 0.5);
        let p = fit_preprocessor(&set, 3).unwrap();
        for _ in 0..10 {
            let x = DVector::<f64>::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
            let base = p.apply(&x).unwrap();
            for c in [0.5, 2.0, 10.0] {
                let scaled = p.mean() + (&x - p.mean()) * c;
                let got = p.apply(&scaled).unwrap();
                assert!((got - &base).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn two_speakers_separated_along_first_axis() {
        // Hand-solvable 2-class problem: class means (-0.5, 0) and (0.5, 0),
        // per-class scatter diag(8, 2), so between = diag(0.25, 0) and
        // within = diag(2, 0.5). The top generalized eigenvector is axis 0.
        // Within-class spread exceeds the separation so that both signs
        // survive the 1-D length normalization.
        let rows = DMatrix::from_row_slice(
            8,
            2,
            &[
                -2.5, 0.0, 1.5, 0.0, -0.5, -1.0, -0.5, 1.0, //
                -1.5, 0.0, 2.5, 0.0, 0.5, -1.0, 0.5, 1.0,
            ],
        );
        let set = set_from(rows, vec!["a", "a", "a", "a", "b", "b", "b", "b"]);
        let p = fit_preprocessor(&set, 1).unwrap();
        let row = p.lda().row(0);
        assert!(row[0] > 0.0, "sign convention");
        assert!(
            row[1].abs() < 1e-9 * row[0].abs(),
            "lda row {row:?} not parallel to axis 0"
        );
    }

    #[test]
    fn full_chain_diagonalizes_training_covariances() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let set = gaussian_set(
            &mut rng,
            5,
            20,
            &[3.0, 2.5, 2.0, 1.5, 1.2, 1.0, 0.9, 0.8, 0.7, 0.6],
            0.7,
        );
        let lda_dim = 4;
        let p = fit_preprocessor(&set, lda_dim).unwrap();
        let eta = p.apply_set(&set).unwrap();

        // Brute-force recomputation of the class covariances.
        let groups = eta.speaker_groups();
        let n = eta.len() as f64;
        let d = lda_dim;
        let mut global = DVector::zeros(d);
        for i in 0..eta.len() {
            global += eta.row(i);
        }
        global /= n;
        let mut within = DMatrix::zeros(d, d);
        let mut between = DMatrix::zeros(d, d);
        for idxs in groups.values() {
            let mut m = DVector::zeros(d);
            for &i in idxs {
                m += eta.row(i);
            }
            m /= idxs.len() as f64;
            for &i in idxs {
                let dev = eta.row(i) - &m;
                within += &dev * dev.transpose();
            }
            let dev = &m - &global;
            between += &dev * dev.transpose() * idxs.len() as f64;
        }
        within /= n;
        between /= n;

        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (within[(i, j)] - target).abs() < 1e-6,
                    "within[{i},{j}] = {}",
                    within[(i, j)]
                );
                if i != j {
                    assert!(
                        between[(i, j)].abs() < 1e-6,
                        "between[{i},{j}] = {}",
                        between[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn near_white_data_gives_near_axis_chain() {
        // Data already centered with identity within-class covariance and a
        // distinct-diagonal between-class covariance: the fitted chain should
        // be close to an axis permutation with positive dominant entries.
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let set = gaussian_set(&mut rng, 600, 30, &[3.0, 2.0, 1.0], 1.0);
        let p = fit_preprocessor(&set, 3).unwrap();
        for v in p.mean().iter() {
            assert!(v.abs() < 0.2, "mean entry {v}");
        }
        let chain = p.diag_transform() * p.lda();
        for i in 0..3 {
            let row = chain.row(i);
            let mut dominant = 0usize;
            for j in 0..3 {
                if row[j].abs() > row[dominant].abs() {
                    dominant = j;
                }
            }
            assert_eq!(dominant, i, "row {i} of {chain}");
            assert!(row[i] > 0.0);
            for j in 0..3 {
                if j != i {
                    assert!(
                        row[j].abs() < 0.15 * row[i].abs(),
                        "row {i}: off-axis {} vs dominant {}",
                        row[j],
                        row[i]
                    );
                }
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let set = gaussian_set(&mut rng, 8, 6, &[2.0, 1.0, 0.5, 0.25], 0.4);
        let a = fit_preprocessor(&set, 3).unwrap();
        let b = fit_preprocessor(&set, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let set = gaussian_set(&mut rng, 4, 5, &[1.0, 1.0], 0.3);
        // lda_dim out of range: max is min(D, S-1) = 2.
        assert!(matches!(
            fit_preprocessor(&set, 3).unwrap_err(),
            Error::InvalidConfig(_)
        ));
        assert!(matches!(
            fit_preprocessor(&set, 0).unwrap_err(),
            Error::InvalidConfig(_)
        ));

        // Single speaker.
        let rows = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let solo = set_from(rows, vec!["a", "a"]);
        assert!(matches!(
            fit_preprocessor(&solo, 1).unwrap_err(),
            Error::Infeasible(_)
        ));

        // A speaker with a single utterance.
        let rows = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, 2.0, 2.0]);
        let thin = set_from(rows, vec!["a", "a", "b"]);
        assert!(matches!(
            fit_preprocessor(&thin, 1).unwrap_err(),
            Error::Infeasible(_)
        ));
    }

    #[test]
    fn default_lda_dim_clamps() {
        assert_eq!(default_lda_dim(512, 1000), 150);
        assert_eq!(default_lda_dim(20, 1000), 20);
        assert_eq!(default_lda_dim(512, 12), 11);
        assert_eq!(default_lda_dim(512, 1), 1);
    }
}
