//! Closed-form model of t-condition violation and message loss in a single
//! MSS group under Poisson mobility.
//!
//! Four event classes drive membership of a group `j` over a window `τ`:
//! `e1` Byzantine leave, `e2` honest leave, `e3` Byzantine join,
//! `e4` honest join. Each class `x` is a Poisson process with rate `λx`.

use statrs::function::gamma::ln_gamma;

mod table;

pub use table::{emit_fig7_sweep, emit_table1, verify_table1, Mismatch, Table, REFERENCE_TABLE1};

/// Observed event count `k` over a window `tau`, rescaled to a target window `tau1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSpec {
    pub k: u64,
    pub tau: f64,
    pub tau1: f64,
}

/// Per-group parameters used by the loss model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupProfile {
    pub nmh: u64,
    pub t: u64,
    /// Mean number of broadcasts a host issues per window.
    pub epsilon: f64,
    /// Number of messages whose loss is being evaluated.
    pub m_threshold: u64,
}

/// `λ = (k / τ) · τ1`.
pub fn rate(spec: RateSpec) -> f64 {
    assert!(spec.tau > 0.0 && spec.tau1 > 0.0, "windows must be positive");
    spec.k as f64 / spec.tau * spec.tau1
}

/// `e^{-μ} μ^k / k!`, evaluated through log-gamma.
pub fn poisson_pmf(k: u64, mean: f64) -> f64 {
    assert!(mean >= 0.0, "mean must be nonnegative");
    if mean == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let k = k as f64;
    (k * mean.ln() - mean - ln_gamma(k + 1.0)).exp()
}

/// `1 - Σ_{i<k_min} pmf(i, mean)`.
pub fn poisson_tail(k_min: u64, mean: f64) -> f64 {
    let head = kahan_sum((0..k_min).map(|i| poisson_pmf(i, mean)));
    (1.0 - head).clamp(0.0, 1.0)
}

/// Joint probability of observing exactly `counts` events in the four classes.
pub fn joint_event_prob(counts: [u64; 4], means: [f64; 4]) -> f64 {
    counts.iter().zip(means.iter()).map(|(&k, &mu)| poisson_pmf(k, mu)).product()
}

/// Number of ways to pick `r` of `n` classes, for `r = 1..=n`.
pub fn combinations_by_size(n: u64) -> Vec<u64> {
    (1..=n).map(|r| binomial(n, r)).collect()
}

/// Number of non-empty combinations of the four event classes.
pub fn event_combinations() -> u64 {
    combinations_by_size(4).iter().sum()
}

fn binomial(n: u64, r: u64) -> u64 {
    let r = r.min(n - r);
    (0..r).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Probability that exactly `M` messages are sent while at least `k3_min`
/// Byzantine joins occur in the window.
pub fn loss_probability(profile: GroupProfile, tau: f64, lambda3: f64, k3_min: u64) -> f64 {
    poisson_pmf(profile.m_threshold, tau * profile.epsilon) * poisson_tail(k3_min, tau * lambda3)
}

/// Probability that at least `M` messages are sent while at least `k3_min`
/// Byzantine joins occur in the window.
pub fn loss_probability_at_least(profile: GroupProfile, tau: f64, lambda3: f64, k3_min: u64) -> f64 {
    poisson_tail(profile.m_threshold, tau * profile.epsilon) * poisson_tail(k3_min, tau * lambda3)
}

/// Combined-event violation condition: at most `t` Byzantine leaves, fewer
/// than two thirds of the group leaving honestly, and enough Byzantine joins
/// to reach a third of what remains.
pub fn combined_violation(nmh: u64, t: u64, k1: u64, k2: u64, k3: u64) -> bool {
    if k1 > t || 3 * k2 >= 2 * nmh {
        return false;
    }
    let remaining = nmh.saturating_sub(k1 + k2) as i64;
    let need = remaining / 3 - t as i64 - k1 as i64;
    k3 as i64 >= need
}

/// Probability mass of the combined violation region, with `e4` inactive.
/// Counts are enumerated up to `kmax` per class.
pub fn combined_violation_probability(nmh: u64, t: u64, means: [f64; 3], kmax: u64) -> f64 {
    let mut terms = Vec::new();
    for k1 in 0..=kmax {
        for k2 in 0..=kmax {
            for k3 in 0..=kmax {
                if combined_violation(nmh, t, k1, k2, k3) {
                    terms.push(joint_event_prob([k1, k2, k3, 0], [means[0], means[1], means[2], 0.0]));
                }
            }
        }
    }
    kahan_sum(terms)
}

fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}
