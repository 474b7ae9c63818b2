//! Brute-force reference computations used by the property suites.
//!
//! These deliberately share no code path with the solvers they check.

use rand::Rng;

use crate::allocator::Channel;
use crate::env::HiddenBitGame;

#[derive(Debug, Clone, PartialEq)]
pub struct GridAllocation {
    pub rates: Vec<f64>,
    pub objective: f64,
}

/// Exhaustive search over allocations on a grid of step `h`, by dynamic
/// programming over channels (exact on the grid, no concavity assumed).
pub fn grid_allocation(channels: &[Channel], budget: f64, h: f64) -> GridAllocation {
    let steps = (budget / h + 1e-9).floor() as usize;
    // value[c][j]: utility of channel c at j grid steps, capped at its max
    let value: Vec<Vec<f64>> = channels
        .iter()
        .map(|c| (0..=steps).map(|j| c.objective(j as f64 * h)).collect())
        .collect();
    let mut best = vec![0.0f64; steps + 1];
    let mut choice: Vec<Vec<usize>> = Vec::with_capacity(channels.len());
    for v in &value {
        let mut next = vec![f64::NEG_INFINITY; steps + 1];
        let mut pick = vec![0usize; steps + 1];
        for b in 0..=steps {
            for j in 0..=b {
                let cand = v[j] + best[b - j];
                if cand > next[b] {
                    next[b] = cand;
                    pick[b] = j;
                }
            }
        }
        best = next;
        choice.push(pick);
    }
    let mut rates = vec![0.0; channels.len()];
    let mut b = steps;
    for c in (0..channels.len()).rev() {
        let j = choice[c][b];
        rates[c] = j as f64 * h;
        b -= j;
    }
    GridAllocation { rates, objective: best[steps] }
}

/// Best memoryless no-communication value of the hidden-bit game by joint
/// enumeration over every agent's policy at once (no per-group split).
pub fn joint_oracle_value(game: &HiddenBitGame) -> f64 {
    let (n, m) = (game.n(), game.m());
    let p = game.partition();
    // outcomes: (probability, group bits, per-agent observation code)
    let mut outcomes = Vec::new();
    for bits in 0..1usize << m {
        for mask in 0..1usize << n {
            let mut prob = 0.5f64.powi(m as i32);
            let mut codes = Vec::with_capacity(n);
            for i in 0..n {
                let seen = (mask >> i) & 1 == 1;
                prob *= if seen { game.p_obs } else { 1.0 - game.p_obs };
                let b = (bits >> p.group_of(i)) & 1;
                codes.push(if seen { 1 + b } else { 0 });
            }
            if prob > 0.0 {
                let bits: Vec<u8> = (0..m).map(|g| ((bits >> g) & 1) as u8).collect();
                outcomes.push((prob, bits, codes));
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut actions = vec![0u8; n];
    for profile in 0..1usize << (3 * n) {
        let mut v = 0.0;
        for (prob, bits, codes) in &outcomes {
            for i in 0..n {
                actions[i] = ((profile >> (3 * i + codes[i])) & 1) as u8;
            }
            v += prob * game.reward(bits, &actions);
        }
        best = best.max(v);
    }
    best
}

/// Mutual information (nats) between an agent's observation and one
/// group's bit, by enumerating bits and the agent's visibility.
pub fn observation_bit_mutual_information(game: &HiddenBitGame, agent: usize, group: usize) -> f64 {
    let m = game.m();
    let own = game.partition().group_of(agent);
    let mut joint = [[0.0f64; 2]; 3];
    for bits in 0..1usize << m {
        let pb = 0.5f64.powi(m as i32);
        let target = (bits >> group) & 1;
        let own_bit = (bits >> own) & 1;
        joint[0][target] += pb * (1.0 - game.p_obs);
        joint[1 + own_bit][target] += pb * game.p_obs;
    }
    let po: Vec<f64> = joint.iter().map(|r| r[0] + r[1]).collect();
    let pt = [joint.iter().map(|r| r[0]).sum::<f64>(), joint.iter().map(|r| r[1]).sum::<f64>()];
    let mut mi = 0.0;
    for (o, row) in joint.iter().enumerate() {
        for (t, &pj) in row.iter().enumerate() {
            if pj > 0.0 {
                mi += pj * (pj / (po[o] * pt[t])).ln();
            }
        }
    }
    mi
}

/// A random action-value table with a unique optimum per state, a learned
/// approximation of it, and a state distribution.
pub struct RelevanceInstance {
    pub q_star: Vec<Vec<f64>>,
    pub q_table: Vec<Vec<f64>>,
    pub state_dist: Vec<f64>,
}

pub fn random_relevance_instance<R: Rng + ?Sized>(rng: &mut R, states: usize, actions: usize, noise: f64) -> RelevanceInstance {
    let q_star: Vec<Vec<f64>> = (0..states)
        .map(|_| {
            let mut row: Vec<f64> = (0..actions).map(|_| rng.random_range(0.0..1.0)).collect();
            let best = rng.random_range(0..actions);
            // lift the chosen action strictly above the rest
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row[best] = top + rng.random_range(0.05..0.5);
            row
        })
        .collect();
    let q_table = q_star
        .iter()
        .map(|row| row.iter().map(|v| if noise > 0.0 { v + rng.random_range(-noise..noise) } else { *v }).collect())
        .collect();
    let w: Vec<f64> = (0..states).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    RelevanceInstance { q_star, q_table, state_dist: w.iter().map(|x| x / total).collect() }
}
