//! Fano-type lower bound on the relevance term in terms of the TD loss.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Inputs to the relevance bound. Entropies are in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceInputs {
    pub td_loss: f64,
    /// Smallest gap between the optimal and any other joint action value.
    pub delta_min: f64,
    /// Joint action count `K`.
    pub joint_actions: usize,
    pub entropy_y: f64,
}

impl RelevanceInputs {
    pub fn new(td_loss: f64, delta_min: f64, joint_actions: usize, entropy_y: f64) -> Result<Self> {
        if !(td_loss >= 0.0) {
            return contract(format!("td loss must be >= 0, got {td_loss}"));
        }
        if !(delta_min > 0.0) {
            return contract(format!("minimum action gap must be > 0, got {delta_min}"));
        }
        if joint_actions < 2 {
            return contract("need at least two joint actions");
        }
        if !(entropy_y >= 0.0) {
            return contract("entropy must be >= 0");
        }
        Ok(Self { td_loss, delta_min, joint_actions, entropy_y })
    }

    /// `c = delta_min^2 / (4K)`.
    pub fn separation_constant(&self) -> f64 {
        self.delta_min * self.delta_min / (4.0 * self.joint_actions as f64)
    }

    /// Largest error probability for which the bound is informative.
    pub fn valid_limit(&self) -> f64 {
        let k = self.joint_actions as f64;
        (k - 1.0) / k
    }
}

/// `-p ln p - (1-p) ln(1-p)` with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return contract(format!("probability out of range: {p}"));
    }
    let xlnx = |x: f64| if x == 0.0 { 0.0 } else { x * x.ln() };
    Ok(-xlnx(p) - xlnx(1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeBound {
    pub value: f64,
    /// False when the value exceeds `(K-1)/K`.
    pub in_domain: bool,
}

/// Markov bound on the greedy action error: `P_e <= L_TD / c`.
pub fn pe_upper_bound(inputs: &RelevanceInputs) -> PeBound {
    let value = inputs.td_loss / inputs.separation_constant();
    PeBound { value, in_domain: value <= inputs.valid_limit() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoBound {
    pub bound: f64,
    pub valid: bool,
}

/// `H(Y) - h(p) - p ln(K-1)` with `p` from [`pe_upper_bound`]. Outside the
/// valid domain the number is still returned, flagged invalid.
pub fn fano_relevance_lower_bound(inputs: &RelevanceInputs) -> FanoBound {
    let pe = pe_upper_bound(inputs);
    let p = pe.value;
    let h = binary_entropy(p.min(1.0)).unwrap_or(0.0);
    let bound = inputs.entropy_y - h - p * ((inputs.joint_actions - 1) as f64).ln();
    FanoBound { bound, valid: pe.in_domain }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCheck {
    pub measured_pe: f64,
    pub pe_bound: f64,
    pub td_loss: f64,
    pub delta_min: f64,
    pub entropy_y: f64,
    pub implied_bound: FanoBound,
    /// `measured_pe <= pe_bound`.
    pub holds: bool,
}

/// Compares a learned action-value table against the optimal one over
/// every state-action pair (uniform action coverage).
///
/// An error at state `s` is any action other than the optimal one whose
/// learned value is at least the learned optimal value.
pub fn empirical_relevance_check(
    q_table: &[Vec<f64>],
    q_star: &[Vec<f64>],
    state_dist: &[f64],
) -> Result<RelevanceCheck> {
    let states = q_star.len();
    if states == 0 || q_table.len() != states || state_dist.len() != states {
        return contract("tables and state distribution must cover the same states");
    }
    let k = q_star[0].len();
    if k < 2 || q_star.iter().chain(q_table).any(|row| row.len() != k) {
        return contract("every state needs the same action count (>= 2)");
    }
    let mass: f64 = state_dist.iter().sum();
    if state_dist.iter().any(|p| !(*p >= 0.0)) || (mass - 1.0).abs() > 1e-9 {
        return contract("state distribution must be nonnegative and sum to 1");
    }

    let mut delta_min = f64::INFINITY;
    let mut optimal = Vec::with_capacity(states);
    for (s, row) in q_star.iter().enumerate() {
        let (best, &top) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty row");
        let gap = row
            .iter()
            .enumerate()
            .filter(|(u, _)| *u != best)
            .map(|(_, v)| top - v)
            .fold(f64::INFINITY, f64::min);
        if !(gap > 0.0) {
            return contract(format!("optimal action at state {s} is not unique"));
        }
        delta_min = delta_min.min(gap);
        optimal.push(best);
    }

    let mut td_loss = 0.0;
    let mut measured_pe = 0.0;
    let mut y_mass = vec![0.0; k];
    for s in 0..states {
        let y = optimal[s];
        let learned = &q_table[s];
        let mse = learned
            .iter()
            .zip(&q_star[s])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / k as f64;
        td_loss += state_dist[s] * mse;
        if learned.iter().enumerate().any(|(u, v)| u != y && *v >= learned[y]) {
            measured_pe += state_dist[s];
        }
        y_mass[y] += state_dist[s];
    }
    let entropy_y = -y_mass.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    let inputs = RelevanceInputs::new(td_loss, delta_min, k, entropy_y.max(0.0))?;
    let pe_bound = pe_upper_bound(&inputs).value;
    Ok(RelevanceCheck {
        measured_pe,
        pe_bound,
        td_loss,
        delta_min,
        entropy_y: inputs.entropy_y,
        implied_bound: fano_relevance_lower_bound(&inputs),
        holds: measured_pe <= pe_bound + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_entropy_values() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
        let expect = 0.25 * 4f64.ln() + 0.75 * (4.0f64 / 3.0).ln();
        assert!((binary_entropy(0.25).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.5623).abs() < 1e-4);
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn pe_bound_values() {
        let zero = RelevanceInputs::new(0.0, 1.0, 4, 1.0).unwrap();
        assert_eq!(pe_upper_bound(&zero).value, 0.0);
        let edge = RelevanceInputs::new(1.0 / 16.0, 1.0, 4, 1.0).unwrap();
        let b = pe_upper_bound(&edge);
        assert!((b.value - 1.0).abs() < 1e-15);
        assert!(!b.in_domain);
        let ok = RelevanceInputs::new(0.0625, 2.0, 4, 1.0).unwrap();
        let b = pe_upper_bound(&ok);
        assert!((b.value - 0.25).abs() < 1e-15);
        assert!(b.in_domain);
        assert!(RelevanceInputs::new(0.1, 0.0, 4, 1.0).is_err());
        assert!(RelevanceInputs::new(0.1, 1.0, 1, 1.0).is_err());
    }

    #[test]
    fn fano_values() {
        let h = 4f64.ln();
        let zero = RelevanceInputs::new(0.0, 2.0, 4, h).unwrap();
        let f = fano_relevance_lower_bound(&zero);
        assert_eq!(f.bound, h);
        assert!(f.valid);
        let quarter = RelevanceInputs::new(0.0625, 2.0, 4, h).unwrap();
        let f = fano_relevance_lower_bound(&quarter);
        assert!((f.bound - 0.5493061443340549).abs() < 1e-12, "{}", f.bound);
        // p = (K-1)/K: uniform guessing saturates the bound at zero
        let sat = RelevanceInputs::new(0.75 * 0.25, 2.0, 4, h).unwrap();
        let f = fano_relevance_lower_bound(&sat);
        assert!(f.bound.abs() < 1e-12 && f.valid);
        let out = RelevanceInputs::new(1.0, 1.0, 4, h).unwrap();
        assert!(!fano_relevance_lower_bound(&out).valid);
    }

    #[test]
    fn fano_monotone_on_valid_domain() {
        let (delta, k, h) = (1.5, 6, 6f64.ln());
        let c = delta * delta / (4.0 * k as f64);
        let limit = (k as f64 - 1.0) / k as f64 * c;
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let td = limit * i as f64 / 1000.0;
            let f = fano_relevance_lower_bound(&RelevanceInputs::new(td, delta, k, h).unwrap());
            assert!(f.valid);
            assert!(f.bound <= prev + 1e-12);
            prev = f.bound;
        }
    }

    #[test]
    fn exact_table_has_no_error() {
        let q = vec![vec![1.0, 0.0, 0.5], vec![0.0, 2.0, 1.0]];
        let r = empirical_relevance_check(&q, &q, &[0.5, 0.5]).unwrap();
        assert_eq!(r.measured_pe, 0.0);
        assert_eq!(r.td_loss, 0.0);
        assert!(r.holds);
        assert!((r.entropy_y - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn small_noise_keeps_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q_star = vec![vec![1.0, 0.2, 0.0, 0.7], vec![0.0, 0.9, 0.3, 0.1]];
        let delta = 0.3;
        let q: Vec<Vec<f64>> = q_star
            .iter()
            .map(|row| row.iter().map(|v| v + rng.random_range(-0.49..0.49) * delta).collect())
            .collect();
        let r = empirical_relevance_check(&q, &q_star, &[0.3, 0.7]).unwrap();
        assert!((r.delta_min - delta).abs() < 1e-12);
        assert_eq!(r.measured_pe, 0.0);
    }

    #[test]
    fn tied_optimum_rejected() {
        let q = vec![vec![1.0, 1.0]];
        assert!(empirical_relevance_check(&q, &q, &[1.0]).is_err());
    }
}
