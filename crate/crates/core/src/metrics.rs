//! Hard detection metrics: normalized detection cost, its two-operating-point
//! average at fixed and at optimal thresholds, EER and DET-curve points.
//!
//! Threshold sweeps are exhaustive over the finite score set: candidate
//! thresholds are the midpoints between adjacent distinct scores plus -inf
//! and +inf sentinels, so the reported minima are exactly optimal. The
//! boundary convention is accept iff `score >= threshold`.

use crate::error::{Error, Result};

/// The two cost-weighting operating points. `c_primary` evaluates each
/// `C_Norm(beta, ln beta)` and averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Betas {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Betas {
            beta1: 99.0,
            beta2: 199.0,
        }
    }
}

impl Betas {
    /// Fixed decision thresholds `(ln beta1, ln beta2)` used by `c_primary`.
    pub fn thresholds(&self) -> (f64, f64) {
        (self.beta1.ln(), self.beta2.ln())
    }
}

/// One evaluated operating point of the detection-error tradeoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

/// Minimum two-point detection cost and its argmin thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinCost {
    pub value: f64,
    pub theta1: f64,
    pub theta2: f64,
}

/// Full evaluation summary for one scored trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub eer: f64,
    pub c_min: f64,
    pub c_primary: f64,
    pub theta_min_1: f64,
    pub theta_min_2: f64,
    pub det_points: Vec<DetPoint>,
}

fn validate(scores: &[f64], is_target: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != is_target.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scores but {} labels",
            scores.len(),
            is_target.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Degenerate(format!("score {i} is not finite")));
    }
    let n_target = is_target.iter().filter(|&&t| t).count();
    let n_nontarget = is_target.len() - n_target;
    if n_target == 0 {
        return Err(Error::SingleClass("no target trials"));
    }
    if n_nontarget == 0 {
        return Err(Error::SingleClass("no nontarget trials"));
    }
    Ok((n_target, n_nontarget))
}

/// Miss and false-alarm rates at a threshold: `P_miss` is the fraction of
/// targets strictly below `theta`, `P_fa` the fraction of nontargets at or
/// above it.
pub fn hard_rates(scores: &[f64], is_target: &[bool], theta: f64) -> Result<(f64, f64)> {
    let (n_t, n_n) = validate(scores, is_target)?;
    let mut misses = 0usize;
    let mut fas = 0usize;
    for (&s, &t) in scores.iter().zip(is_target) {
        if t {
            if s < theta {
                misses += 1;
            }
        } else if s >= theta {
            fas += 1;
        }
    }
    Ok((misses as f64 / n_t as f64, fas as f64 / n_n as f64))
}

/// Normalized detection cost `P_miss(theta) + beta * P_fa(theta)`.
pub fn c_norm(scores: &[f64], is_target: &[bool], beta: f64, theta: f64) -> Result<f64> {
    let (p_miss, p_fa) = hard_rates(scores, is_target, theta)?;
    Ok(p_miss + beta * p_fa)
}

/// Actual two-point cost at the fixed thresholds `ln beta`.
pub fn c_primary_actual(scores: &[f64], is_target: &[bool], betas: Betas) -> Result<f64> {
    let (th1, th2) = betas.thresholds();
    let c1 = c_norm(scores, is_target, betas.beta1, th1)?;
    let c2 = c_norm(scores, is_target, betas.beta2, th2)?;
    Ok(0.5 * (c1 + c2))
}

/// Distinct sorted score values with per-value class counts, plus the
/// cumulative counts strictly below each candidate threshold.
struct Sweep {
    /// Candidate thresholds in ascending order (first is -inf, last +inf).
    thresholds: Vec<f64>,
    /// `p_miss[i]`, `p_fa[i]` at `thresholds[i]`.
    p_miss: Vec<f64>,
    p_fa: Vec<f64>,
}

fn sweep(scores: &[f64], is_target: &[bool]) -> Result<Sweep> {
    let (n_t, n_n) = validate(scores, is_target)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Group equal score values.
    let mut values: Vec<f64> = Vec::new();
    let mut t_counts: Vec<usize> = Vec::new();
    let mut n_counts: Vec<usize> = Vec::new();
    for &i in &order {
        if values.last() != Some(&scores[i]) {
            values.push(scores[i]);
            t_counts.push(0);
            n_counts.push(0);
        }
        if is_target[i] {
            *t_counts.last_mut().unwrap() += 1;
        } else {
            *n_counts.last_mut().unwrap() += 1;
        }
    }

    let m = values.len();
    let mut thresholds = Vec::with_capacity(m + 1);
    thresholds.push(f64::NEG_INFINITY);
    for i in 1..m {
        let (a, b) = (values[i - 1], values[i]);
        let mut mid = 0.5 * (a + b);
        // Adjacent floats can round the midpoint onto the lower value; the
        // upper value classifies identically under the >= convention.
        if mid <= a {
            mid = b;
        }
        thresholds.push(mid);
    }
    thresholds.push(f64::INFINITY);

    let mut p_miss = Vec::with_capacity(thresholds.len());
    let mut p_fa = Vec::with_capacity(thresholds.len());
    let mut below_t = 0usize;
    let mut below_n = 0usize;
    for i in 0..thresholds.len() {
        if i > 0 {
            below_t += t_counts[i - 1];
            below_n += n_counts[i - 1];
        }
        p_miss.push(below_t as f64 / n_t as f64);
        p_fa.push((n_n - below_n) as f64 / n_n as f64);
    }

    Ok(Sweep {
        thresholds,
        p_miss,
        p_fa,
    })
}

fn min_over_sweep(sw: &Sweep, beta: f64) -> (f64, f64) {
    let mut best_theta = sw.thresholds[0];
    let mut best_cost = f64::INFINITY;
    for i in 0..sw.thresholds.len() {
        let cost = sw.p_miss[i] + beta * sw.p_fa[i];
        // Strict improvement keeps the smallest threshold on ties.
        if cost < best_cost {
            best_cost = cost;
            best_theta = sw.thresholds[i];
        }
    }
    (best_theta, best_cost)
}

/// Minimum `C_Norm` over thresholds for one operating point. Returns
/// `(theta*, cost*)`; ties resolve to the smallest threshold.
pub fn min_c_norm(scores: &[f64], is_target: &[bool], beta: f64) -> Result<(f64, f64)> {
    let sw = sweep(scores, is_target)?;
    Ok(min_over_sweep(&sw, beta))
}

/// Minimum two-point cost: each operating point minimized independently.
pub fn c_min(scores: &[f64], is_target: &[bool], betas: Betas) -> Result<MinCost> {
    let sw = sweep(scores, is_target)?;
    let (theta1, c1) = min_over_sweep(&sw, betas.beta1);
    let (theta2, c2) = min_over_sweep(&sw, betas.beta2);
    Ok(MinCost {
        value: 0.5 * (c1 + c2),
        theta1,
        theta2,
    })
}

fn eer_from_sweep(sw: &Sweep) -> f64 {
    // p_miss - p_fa goes from -1 at -inf to +1 at +inf; find the sign change
    // and interpolate linearly between the adjacent operating points.
    let mut prev = sw.p_miss[0] - sw.p_fa[0];
    for i in 1..sw.thresholds.len() {
        let d = sw.p_miss[i] - sw.p_fa[i];
        if d >= 0.0 {
            if d == 0.0 {
                return sw.p_miss[i];
            }
            if prev == 0.0 {
                return sw.p_miss[i - 1];
            }
            let t = -prev / (d - prev);
            return sw.p_miss[i - 1] + t * (sw.p_miss[i] - sw.p_miss[i - 1]);
        }
        prev = d;
    }
    // Unreachable for two-class input: d = +1 at the +inf sentinel.
    1.0
}

/// Equal error rate from the DET staircase with linear crossing
/// interpolation.
pub fn eer(scores: &[f64], is_target: &[bool]) -> Result<f64> {
    let sw = sweep(scores, is_target)?;
    Ok(eer_from_sweep(&sw))
}

/// One `(theta, P_fa, P_miss)` point per candidate threshold, ascending in
/// `theta`. Duplicate score values collapse to a single threshold.
pub fn det_points(scores: &[f64], is_target: &[bool]) -> Result<Vec<DetPoint>> {
    let sw = sweep(scores, is_target)?;
    Ok((0..sw.thresholds.len())
        .map(|i| DetPoint {
            threshold: sw.thresholds[i],
            p_fa: sw.p_fa[i],
            p_miss: sw.p_miss[i],
        })
        .collect())
}

/// Computes every summary metric from one sweep.
pub fn evaluate(scores: &[f64], is_target: &[bool], betas: Betas) -> Result<MetricReport> {
    let sw = sweep(scores, is_target)?;
    let (theta1, c1) = min_over_sweep(&sw, betas.beta1);
    let (theta2, c2) = min_over_sweep(&sw, betas.beta2);
    let det = (0..sw.thresholds.len())
        .map(|i| DetPoint {
            threshold: sw.thresholds[i],
            p_fa: sw.p_fa[i],
            p_miss: sw.p_miss[i],
        })
        .collect();
    Ok(MetricReport {
        eer: eer_from_sweep(&sw),
        c_min: 0.5 * (c1 + c2),
        c_primary: c_primary_actual(scores, is_target, betas)?,
        theta_min_1: theta1,
        theta_min_2: theta2,
        det_points: det,
    })
}
