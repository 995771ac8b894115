//! Gender-matched random sampling of target and non-target trials.
//!
//! Pairs are always gender-matched (M-M or F-F; unknown-gender and
//! unlabeled utterances are skipped), targets are same-speaker pairs,
//! self-trials (the same utterance on both sides) are excluded, and the
//! target count is exactly `round(n_trials * target_fraction)`. Sampled
//! targets precede sampled nontargets in the output list.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::{EmbeddingSet, Gender, Label, TrialList};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub n_trials: usize,
    pub target_fraction: f64,
    pub seed: u64,
    /// When false, no unordered pair appears twice.
    pub allow_repeats: bool,
}

/// Utterance indices of one gender, grouped by speaker.
struct GenderPool {
    /// All usable utterance rows of this gender.
    utts: Vec<usize>,
    /// Per-speaker rows (sorted speaker order), parallel `speaker_of` index.
    groups: Vec<Vec<usize>>,
    /// Group index for each entry of `utts`.
    group_of: Vec<usize>,
}

fn pairs_in(n: usize) -> u64 {
    (n as u64) * (n as u64).saturating_sub(1) / 2
}

fn build_pools(data: &EmbeddingSet) -> Vec<GenderPool> {
    let mut pools = Vec::new();
    for gender in [Gender::M, Gender::F] {
        let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for i in 0..data.len() {
            if data.genders()[i] != gender {
                continue;
            }
            let Some(spk) = data.speakers()[i].as_deref() else {
                continue;
            };
            by_speaker.entry(spk).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = by_speaker.into_values().collect();
        let mut utts = Vec::new();
        let mut group_of = Vec::new();
        for (g, rows) in groups.iter().enumerate() {
            for &r in rows {
                utts.push(r);
                group_of.push(g);
            }
        }
        pools.push(GenderPool {
            utts,
            groups,
            group_of,
        });
    }
    pools
}

/// Samples a gender-matched trial list. Deterministic given the seed.
pub fn sample_trials(data: &EmbeddingSet, cfg: &SamplingConfig) -> Result<TrialList> {
    if cfg.n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
    }
    if !(cfg.target_fraction > 0.0 && cfg.target_fraction < 1.0) {
        return Err(Error::InvalidConfig(
            "target_fraction must lie strictly between 0 and 1".into(),
        ));
    }
    let n_targets = (cfg.n_trials as f64 * cfg.target_fraction).round() as usize;
    let n_nontargets = cfg.n_trials - n_targets;

    let pools = build_pools(data);
    let target_capacity: u64 = pools
        .iter()
        .flat_map(|p| p.groups.iter())
        .map(|g| pairs_in(g.len()))
        .sum();
    let nontarget_capacity: u64 = pools
        .iter()
        .map(|p| pairs_in(p.utts.len()) - p.groups.iter().map(|g| pairs_in(g.len())).sum::<u64>())
        .sum();

    if target_capacity == 0 && n_targets > 0 {
        return Err(Error::Infeasible(
            "no speaker has two same-gender utterances; cannot sample target trials".into(),
        ));
    }
    if nontarget_capacity == 0 && n_nontargets > 0 {
        return Err(Error::Infeasible(
            "no gender-matched cross-speaker pair exists; cannot sample nontarget trials".into(),
        ));
    }
    if !cfg.allow_repeats {
        if n_targets as u64 > target_capacity {
            return Err(Error::Infeasible(format!(
                "requested {n_targets} distinct target trials but only {target_capacity} exist"
            )));
        }
        if n_nontargets as u64 > nontarget_capacity {
            return Err(Error::Infeasible(format!(
                "requested {n_nontargets} distinct nontarget trials but only {nontarget_capacity} exist"
            )));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let targets = sample_targets(&pools, n_targets, target_capacity, cfg, &mut rng)?;
    let nontargets = sample_nontargets(&pools, n_nontargets, nontarget_capacity, cfg, &mut rng)?;

    let mut pairs = Vec::with_capacity(cfg.n_trials);
    let mut labels = Vec::with_capacity(cfg.n_trials);
    let ids = data.utt_ids();
    for (a, b) in targets {
        pairs.push((ids[a].clone(), ids[b].clone()));
        labels.push(Label::Target);
    }
    for (a, b) in nontargets {
        pairs.push((ids[a].clone(), ids[b].clone()));
        labels.push(Label::Nontarget);
    }
    TrialList::new(pairs, labels)
}

/// Switch point between rejection sampling and full enumeration: when the
/// request covers a large share of the universe, rejection stalls.
fn should_enumerate(requested: usize, capacity: u64) -> bool {
    (requested as u64).saturating_mul(4) >= capacity
}

fn sample_targets(
    pools: &[GenderPool],
    n: usize,
    capacity: u64,
    cfg: &SamplingConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if !cfg.allow_repeats && should_enumerate(n, capacity) {
        let mut all = Vec::new();
        for pool in pools {
            for group in &pool.groups {
                for i in 0..group.len() {
                    for j in (i + 1)..group.len() {
                        all.push((group[i], group[j]));
                    }
                }
            }
        }
        all.shuffle(rng);
        all.truncate(n);
        return Ok(all);
    }

    // Cumulative pair counts over (pool, group), for uniform group choice.
    let mut cumulative = Vec::new();
    let mut flat_groups = Vec::new();
    let mut acc = 0u64;
    for pool in pools {
        for group in &pool.groups {
            let c = pairs_in(group.len());
            if c > 0 {
                acc += c;
                cumulative.push(acc);
                flat_groups.push(group);
            }
        }
    }

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let r = rng.random_range(0..acc);
        let g = cumulative.partition_point(|&c| c <= r);
        let group = flat_groups[g];
        let i = rng.random_range(0..group.len());
        let mut j = rng.random_range(0..group.len() - 1);
        if j >= i {
            j += 1;
        }
        let pair = (group[i.min(j)], group[i.max(j)]);
        if cfg.allow_repeats || seen.insert(pair) {
            out.push(pair);
        }
    }
    Ok(out)
}

fn sample_nontargets(
    pools: &[GenderPool],
    n: usize,
    capacity: u64,
    cfg: &SamplingConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if !cfg.allow_repeats && should_enumerate(n, capacity) {
        let mut all = Vec::new();
        for pool in pools {
            for a in 0..pool.utts.len() {
                for b in (a + 1)..pool.utts.len() {
                    if pool.group_of[a] != pool.group_of[b] {
                        all.push((pool.utts[a], pool.utts[b]));
                    }
                }
            }
        }
        all.shuffle(rng);
        all.truncate(n);
        return Ok(all);
    }

    let counts: Vec<u64> = pools
        .iter()
        .map(|p| pairs_in(p.utts.len()) - p.groups.iter().map(|g| pairs_in(g.len())).sum::<u64>())
        .collect();
    let total: u64 = counts.iter().sum();

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut stall_guard = 0u64;
    while out.len() < n {
        stall_guard += 1;
        if stall_guard > 1000 * (n as u64 + 16) {
            return Err(Error::Numerical(
                "nontarget rejection sampling stalled; request too close to capacity".into(),
            ));
        }
        let r = rng.random_range(0..total);
        let pool = if r < counts[0] { &pools[0] } else { &pools[1] };
        let a = rng.random_range(0..pool.utts.len());
        let b = rng.random_range(0..pool.utts.len());
        if a == b || pool.group_of[a] == pool.group_of[b] {
            continue;
        }
        let pair = (pool.utts[a.min(b)], pool.utts[a.max(b)]);
        if cfg.allow_repeats || seen.insert(pair) {
            out.push(pair);
        }
    }
    Ok(out)
}
