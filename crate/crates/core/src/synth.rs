//! Synthetic data generation from a known two-covariance model, plus
//! brute-force oracles used to validate the model and metric modules.
//!
//! The generator samples the model forward: a standard-normal latent factor
//! per speaker, mapped through a known speaker subspace, plus correlated
//! within-class noise. An optional second partition gets a mean offset and
//! covariance inflation to emulate domain mismatch.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{EmbeddingSet, Gender};
use crate::error::{Error, Result};
use crate::linalg;

/// Mismatched second domain: embeddings are drawn from the same speaker
/// model, then scaled by `sqrt(inflation)` and shifted by `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub offset: DVector<f64>,
    pub inflation: f64,
    pub n_speakers: usize,
}

/// Generator configuration. `seed` drives both the model parameters and the
/// sampled data.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub dim: usize,
    /// Scale of the speaker-subspace spectrum; zero removes all speaker
    /// information.
    pub speaker_scale: f64,
    /// Scale of the within-class noise; must be positive.
    pub noise_scale: f64,
    pub domain_shift: Option<DomainShift>,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utts_per_speaker == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig(
                "n_speakers, utts_per_speaker and dim must be positive".into(),
            ));
        }
        if !(self.speaker_scale >= 0.0) || !(self.noise_scale > 0.0) {
            return Err(Error::InvalidConfig(
                "speaker_scale must be >= 0 and noise_scale > 0".into(),
            ));
        }
        if let Some(shift) = &self.domain_shift {
            if shift.offset.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    context: "domain shift offset",
                    expected: self.dim,
                    actual: shift.offset.len(),
                });
            }
            if !(shift.inflation > 0.0) || shift.n_speakers == 0 {
                return Err(Error::InvalidConfig(
                    "domain shift needs positive inflation and speaker count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Generated embeddings plus the true model parameters behind them. Rows are
/// speaker-major: all base-domain speakers first, then the shifted-domain
/// partition (if configured).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub embeddings: EmbeddingSet,
    pub phi: DMatrix<f64>,
    pub sigma_wc: DMatrix<f64>,
    /// Number of leading rows belonging to the base domain.
    pub n_base_rows: usize,
}

impl SynthData {
    /// Row indices of the base-domain partition.
    pub fn base_rows(&self) -> Vec<usize> {
        (0..self.n_base_rows).collect()
    }

    /// Row indices of the shifted-domain partition (empty without a shift).
    pub fn shifted_rows(&self) -> Vec<usize> {
        (self.n_base_rows..self.embeddings.len()).collect()
    }
}

fn random_orthogonal(d: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let mut q = g.qr().q();
    linalg::fix_column_signs(&mut q);
    q
}

/// True speaker subspace for a config: random orthogonal basis times a
/// decaying spectrum (floored to keep the between-class covariance
/// invertible).
fn speaker_subspace(dim: usize, scale: f64, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let u = random_orthogonal(dim, rng);
    let spectrum =
        DVector::from_fn(dim, |j, _| scale * 0.55f64.powi(j as i32).max(0.2));
    u * DMatrix::from_diagonal(&spectrum)
}

/// True within-class covariance: random orientation with a mild linear
/// eigenvalue decay from 1 to 0.5 times `noise_scale^2`.
fn within_covariance(dim: usize, noise_scale: f64, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let v = random_orthogonal(dim, rng);
    let spectrum = DVector::from_fn(dim, |j, _| {
        let frac = if dim > 1 { j as f64 / (dim - 1) as f64 } else { 0.0 };
        noise_scale * noise_scale * (1.0 - 0.5 * frac)
    });
    linalg::symmetrize(&(&v * DMatrix::from_diagonal(&spectrum) * v.transpose()))
}

/// Samples embeddings from the forward model. Deterministic given the seed;
/// genders alternate per speaker (shifted-domain speakers continue the
/// alternation).
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let phi = speaker_subspace(d, cfg.speaker_scale, &mut rng);
    let sigma_wc = within_covariance(d, cfg.noise_scale, &mut rng);
    let chol_wc = linalg::spd_cholesky(&sigma_wc, "within-class covariance")?;
    let noise_l = chol_wc.l();

    let n_shift_speakers = cfg.domain_shift.as_ref().map_or(0, |s| s.n_speakers);
    let total_speakers = cfg.n_speakers + n_shift_speakers;
    let total_rows = total_speakers * cfg.utts_per_speaker;

    let mut rows = DMatrix::zeros(total_rows, d);
    let mut utt_ids = Vec::with_capacity(total_rows);
    let mut speakers = Vec::with_capacity(total_rows);
    let mut genders = Vec::with_capacity(total_rows);

    let mut row = 0usize;
    for spk in 0..total_speakers {
        let shifted = spk >= cfg.n_speakers;
        let omega = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let class_mean = &phi * omega;
        let gender = if spk % 2 == 0 { Gender::M } else { Gender::F };
        let spk_id = if shifted {
            format!("shift{:05}", spk - cfg.n_speakers)
        } else {
            format!("spk{spk:05}")
        };
        for _ in 0..cfg.utts_per_speaker {
            let z = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let mut x = &class_mean + &noise_l * z;
            if shifted {
                let shift = cfg.domain_shift.as_ref().unwrap();
                x = &shift.offset + x * shift.inflation.sqrt();
            }
            rows.set_row(row, &x.transpose());
            utt_ids.push(format!("utt{row:06}"));
            speakers.push(Some(spk_id.clone()));
            genders.push(gender);
            row += 1;
        }
    }

    Ok(SynthData {
        embeddings: EmbeddingSet::new(utt_ids, speakers, genders, rows)?,
        phi,
        sigma_wc,
        n_base_rows: cfg.n_speakers * cfg.utts_per_speaker,
    })
}

fn joint_log_density(z: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = linalg::spd_cholesky(cov, "joint trial covariance")?;
    let dim = z.len() as f64;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let solved = chol.solve(z);
    Ok(-0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det + z.dot(&solved)))
}

/// Trial LLR computed directly from the 2R x 2R joint Gaussian densities of
/// the same- and different-speaker hypotheses. Independent of the scoring
/// matrices used by the model module.
pub fn oracle_llr(
    phi: &DMatrix<f64>,
    sigma_wc: &DMatrix<f64>,
    eta_e: &DVector<f64>,
    eta_t: &DVector<f64>,
) -> Result<f64> {
    let r = phi.nrows();
    if eta_e.len() != r || eta_t.len() != r {
        return Err(Error::DimensionMismatch {
            context: "oracle trial embedding",
            expected: r,
            actual: if eta_e.len() != r { eta_e.len() } else { eta_t.len() },
        });
    }
    let sigma_ac = linalg::symmetrize(&(phi * phi.transpose()));
    let sigma_tot = &sigma_ac + sigma_wc;

    let mut same = DMatrix::zeros(2 * r, 2 * r);
    let mut diff = DMatrix::zeros(2 * r, 2 * r);
    for i in 0..r {
        for j in 0..r {
            same[(i, j)] = sigma_tot[(i, j)];
            same[(i + r, j + r)] = sigma_tot[(i, j)];
            same[(i, j + r)] = sigma_ac[(i, j)];
            same[(i + r, j)] = sigma_ac[(i, j)];
            diff[(i, j)] = sigma_tot[(i, j)];
            diff[(i + r, j + r)] = sigma_tot[(i, j)];
        }
    }
    let mut z = DVector::zeros(2 * r);
    for i in 0..r {
        z[i] = eta_e[i];
        z[i + r] = eta_t[i];
    }
    Ok(joint_log_density(&z, &same)? - joint_log_density(&z, &diff)?)
}

/// Exhaustive minimum of the normalized detection cost by naive counting.
///
/// Candidate thresholds are the midpoints between adjacent sorted distinct
/// scores plus infinite sentinels; every candidate is evaluated by a full
/// pass over the scores. Ties resolve to the smallest threshold. This is the
/// independent oracle for the metrics module.
pub fn brute_force_min_cost(scores: &[f64], is_target: &[bool], beta: f64) -> Result<(f64, f64)> {
    if scores.len() != is_target.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scores but {} labels",
            scores.len(),
            is_target.len()
        )));
    }
    let n_t = is_target.iter().filter(|&&t| t).count();
    let n_n = is_target.len() - n_t;
    if n_t == 0 {
        return Err(Error::SingleClass("no target trials"));
    }
    if n_n == 0 {
        return Err(Error::SingleClass("no nontarget trials"));
    }

    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();

    let mut candidates = vec![f64::NEG_INFINITY];
    for w in distinct.windows(2) {
        let mut mid = 0.5 * (w[0] + w[1]);
        if mid <= w[0] {
            mid = w[1];
        }
        candidates.push(mid);
    }
    candidates.push(f64::INFINITY);

    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for &theta in &candidates {
        let mut misses = 0usize;
        let mut fas = 0usize;
        for (&s, &t) in scores.iter().zip(is_target) {
            if t && s < theta {
                misses += 1;
            }
            if !t && s >= theta {
                fas += 1;
            }
        }
        let cost = misses as f64 / n_t as f64 + beta * fas as f64 / n_n as f64;
        if cost < best.1 {
            best = (theta, cost);
        }
    }
    Ok(best)
}
