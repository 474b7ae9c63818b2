//! Cooperative hidden-bit game with ground-truth groups.
//!
//! Every step each group draws a fresh uniform bit. An agent sees its own
//! group's bit with probability `p_obs`. The team earns one point per group
//! whose members all play that group's bit. Other groups' bits are
//! independent of an agent's observation, so cross-group links carry no
//! task information.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::groups::GroupPartition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub n: usize,
    /// Group sizes; agents are assigned to groups in order.
    pub groups: Vec<usize>,
    pub episode_length: usize,
    pub p_obs: f64,
    pub gamma: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { n: 6, groups: vec![3, 3], episode_length: 8, p_obs: 0.8, gamma: 0.99 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.groups.iter().sum::<usize>() != self.n || self.groups.contains(&0) {
            return bad(format!("group sizes {:?} do not partition {} agents", self.groups, self.n));
        }
        if self.episode_length == 0 {
            return bad("episode_length must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_obs) {
            return bad(format!("p_obs {} outside [0, 1]", self.p_obs));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentObs {
    /// The group bit if seen, else 0.
    pub bit: u8,
    pub seen: bool,
}

impl AgentObs {
    /// 0 = unseen, 1 = saw 0, 2 = saw 1.
    pub fn code(self) -> usize {
        if self.seen {
            1 + self.bit as usize
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub bits: Vec<u8>,
    pub obs: Vec<AgentObs>,
    /// Previous joint action; `None` at the first step.
    pub prev_actions: Option<Vec<u8>>,
    pub step: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub actions: Vec<u8>,
    pub reward: f64,
    pub next: EnvState,
    pub done: bool,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBitGame {
    partition: GroupPartition,
    pub episode_length: usize,
    pub p_obs: f64,
    pub gamma: f64,
}

impl HiddenBitGame {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            partition: GroupPartition::from_sizes(&cfg.groups)?,
            episode_length: cfg.episode_length,
            p_obs: cfg.p_obs,
            gamma: cfg.gamma,
        })
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn m(&self) -> usize {
        self.partition.m()
    }

    /// Per-agent network input: `[bit, seen, prev action one-hot, agent id one-hot]`.
    pub fn local_dim(&self) -> usize {
        4 + self.n()
    }

    /// Mixer state: group bits, observation mask, normalized time.
    pub fn state_dim(&self) -> usize {
        self.m() + self.n() + 1
    }

    fn draw<R: Rng + ?Sized>(&self, step: usize, prev: Option<Vec<u8>>, rng: &mut R) -> EnvState {
        let bits: Vec<u8> = (0..self.m()).map(|_| rng.random_range(0..2u8)).collect();
        let obs = (0..self.n())
            .map(|i| {
                let seen = rng.random_bool(self.p_obs);
                AgentObs { bit: if seen { bits[self.partition.group_of(i)] } else { 0 }, seen }
            })
            .collect();
        EnvState { bits, obs, prev_actions: prev, step, done: false }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        self.draw(0, None, rng)
    }

    /// `sum_g 1[every member of g plays b_g]`.
    pub fn reward(&self, bits: &[u8], actions: &[u8]) -> f64 {
        (0..self.m())
            .filter(|&g| self.partition.members(g).iter().all(|&i| actions[i] == bits[g]))
            .count() as f64
    }

    pub fn env_step<R: Rng + ?Sized>(&self, state: &EnvState, actions: &[u8], rng: &mut R) -> Result<Transition> {
        if state.done {
            return contract("episode already finished");
        }
        if actions.len() != self.n() || actions.iter().any(|&a| a > 1) {
            return contract("need one binary action per agent");
        }
        let reward = self.reward(&state.bits, actions);
        let step = state.step + 1;
        let done = step >= self.episode_length;
        let mut next = self.draw(step, Some(actions.to_vec()), rng);
        next.done = done;
        Ok(Transition { state: state.clone(), actions: actions.to_vec(), reward, next, done, step: state.step })
    }

    pub fn local_features(&self, state: &EnvState, agent: usize) -> Vec<f64> {
        let o = state.obs[agent];
        let mut v = vec![0.0; self.local_dim()];
        v[0] = f64::from(o.bit);
        v[1] = if o.seen { 1.0 } else { 0.0 };
        if let Some(prev) = &state.prev_actions {
            v[2 + prev[agent] as usize] = 1.0;
        }
        v[4 + agent] = 1.0;
        v
    }

    pub fn state_features(&self, state: &EnvState) -> Vec<f64> {
        let mut v: Vec<f64> = state.bits.iter().map(|&b| f64::from(b)).collect();
        v.extend(state.obs.iter().map(|o| if o.seen { 1.0 } else { 0.0 }));
        v.push(state.step as f64 / self.episode_length as f64);
        v
    }

    /// Best expected per-step reward of memoryless policies that map each
    /// agent's own observation to an action, by enumeration per group.
    pub fn oracle_value(&self) -> f64 {
        (0..self.m()).map(|g| self.group_oracle(self.partition.members(g).len())).sum()
    }

    fn group_oracle(&self, size: usize) -> f64 {
        // a policy maps each of the 3 observation codes to an action
        let profiles = 1usize << (3 * size);
        let mut best = 0.0f64;
        for prof in 0..profiles {
            let act = |k: usize, code: usize| ((prof >> (3 * k + code)) & 1) as u8;
            best = best.max(self.group_value(size, &act));
        }
        best
    }

    /// Expected success probability of one group under a fixed policy.
    fn group_value(&self, size: usize, act: &dyn Fn(usize, usize) -> u8) -> f64 {
        let mut v = 0.0;
        for bit in 0..2u8 {
            for mask in 0..(1usize << size) {
                let mut p = 0.5;
                let mut ok = true;
                for k in 0..size {
                    let seen = (mask >> k) & 1 == 1;
                    p *= if seen { self.p_obs } else { 1.0 - self.p_obs };
                    let code = if seen { 1 + bit as usize } else { 0 };
                    ok &= act(k, code) == bit;
                }
                if ok {
                    v += p;
                }
            }
        }
        v
    }

    /// Expected per-step reward when every group pools its observations.
    pub fn pooled_value(&self) -> f64 {
        (0..self.m())
            .map(|g| {
                let miss = (1.0 - self.p_obs).powi(self.partition.members(g).len() as i32);
                1.0 - miss + 0.5 * miss
            })
            .sum()
    }

    /// Expected immediate reward of every joint action in every bit
    /// configuration, for fully informed agents: `2^m x 2^n`.
    pub fn bandit_q_table(&self) -> Vec<Vec<f64>> {
        let (n, m) = (self.n(), self.m());
        (0..1usize << m)
            .map(|s| {
                let bits: Vec<u8> = (0..m).map(|g| ((s >> g) & 1) as u8).collect();
                (0..1usize << n)
                    .map(|u| {
                        let a: Vec<u8> = (0..n).map(|i| ((u >> i) & 1) as u8).collect();
                        self.reward(&bits, &a)
                    })
                    .collect()
            })
            .collect()
    }
}
