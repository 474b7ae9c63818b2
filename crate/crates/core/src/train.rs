//! Training loop: epsilon-greedy collection, replay, one gradient step per
//! environment step, periodic target copies and greedy evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::env::{EnvState, HiddenBitGame, Transition};
use crate::error::{Error, Result};
use crate::groups::BlockKind;
use crate::network::{warmup_factor, Batch, LossReport, LossWeights, Network, NoiseSource, Params};
use crate::prior::group_prior;
use crate::replay::ReplayBuffer;
use crate::tape::Mat;

pub const LOG_HEADER: &str = "step,td,aib_total,aib_intra,aib_cross,xib_total,return,eps";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub td: f64,
    pub aib_total: f64,
    pub aib_intra: f64,
    pub aib_cross: f64,
    pub xib_total: f64,
    /// Return of the latest finished training episode.
    pub ret: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLog {
    pub step: usize,
    pub layer: usize,
    pub block: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub mean_return: f64,
}

/// Tail-window means for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub name: String,
    pub seed: u64,
    pub steps: usize,
    pub tail_start: usize,
    pub tail_td: f64,
    pub tail_aib_intra_per_edge: f64,
    pub tail_aib_cross_per_edge: f64,
    /// Cross over intra mean per-edge KL.
    pub cross_intra_ratio: f64,
    pub tail_xib: f64,
    pub tail_train_return: f64,
    pub tail_eval_return: f64,
    pub episode_length: usize,
    pub groups: usize,
    /// Best per-step reward without communication, and with pooled groups.
    pub no_comm_value: f64,
    pub pooled_value: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// One row per gradient step.
    pub steps: Vec<StepLog>,
    pub blocks: Vec<BlockLog>,
    pub evals: Vec<EvalLog>,
    /// Returns of finished training episodes with the step they ended on.
    pub episodes: Vec<(usize, f64)>,
    pub summary: SeedSummary,
    pub params: Params,
    pub log_interval: usize,
}

/// Independent generator per purpose, all derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn build_network(cfg: &RunConfig, game: &HiddenBitGame) -> Result<Network> {
    let blocks = crate::groups::build_edge_blocks(game.partition());
    let prior = group_prior(&blocks, cfg.prior.intra_var(), cfg.prior.cross_var())?.with_feature_scale(cfg.prior.x0_var())?;
    Network::new(cfg.network.clone(), game.partition().clone(), &prior, game.local_dim(), game.state_dim())
}

fn local_mat(game: &HiddenBitGame, states: &[&EnvState]) -> Mat {
    let (n, d) = (game.n(), game.local_dim());
    let mut data = Vec::with_capacity(states.len() * n * d);
    for s in states {
        for i in 0..n {
            data.extend(game.local_features(s, i));
        }
    }
    Mat::from_vec(states.len() * n, d, data)
}

fn state_mat(game: &HiddenBitGame, states: &[&EnvState]) -> Mat {
    let d = game.state_dim();
    Mat::from_vec(states.len(), d, states.iter().flat_map(|s| game.state_features(s)).collect())
}

fn greedy(q: &Mat) -> Vec<u8> {
    (0..q.rows).map(|i| u8::from(q.get(i, 1) > q.get(i, 0))).collect()
}

/// Noise-free greedy joint action.
pub fn greedy_actions(net: &Network, params: &Params, game: &HiddenBitGame, state: &EnvState) -> Result<Vec<u8>> {
    let q = net.agent_q_values(params, &local_mat(game, &[state]), &game.state_features(state))?;
    Ok(greedy(&q))
}

/// `r + gamma (1 - done) Q_tot'(s', greedy)` under frozen parameters.
pub fn td_targets(net: &Network, target: &Params, game: &HiddenBitGame, batch: &[&Transition]) -> Result<Vec<f64>> {
    let next: Vec<&EnvState> = batch.iter().map(|t| &t.next).collect();
    let b = Batch { local: local_mat(game, &next), state: state_mat(game, &next), actions: None };
    let f = net.forward::<ChaCha8Rng>(target, &b, NoiseSource::Mean)?;
    let n = game.n();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(s, t)| {
            if t.done {
                return t.reward;
            }
            let q = &f.trace.q;
            let v: f64 = (0..n).map(|i| f.trace.mixer_w.get(s, i) * q.get(s * n + i, 0).max(q.get(s * n + i, 1))).sum();
            t.reward + game.gamma * (v + f.trace.mixer_b.data[s])
        })
        .collect())
}

pub fn training_batch(game: &HiddenBitGame, batch: &[&Transition]) -> Batch {
    let states: Vec<&EnvState> = batch.iter().map(|t| &t.state).collect();
    let n = game.n();
    let mut actions = Mat::zeros(batch.len() * n, 2);
    for (s, t) in batch.iter().enumerate() {
        for i in 0..n {
            actions.set(s * n + i, t.actions[i] as usize, 1.0);
        }
    }
    Batch { local: local_mat(game, &states), state: state_mat(game, &states), actions: Some(actions) }
}

/// Momentum SGD with global-norm clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    velocity: Params,
}

impl Optimizer {
    pub fn new(lr: f64, momentum: f64, clip: f64) -> Self {
        Self { lr, momentum, clip, velocity: Params::default() }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> f64 {
        let norm = grads.0.values().flat_map(|m| m.data.iter()).map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        for (name, g) in &grads.0 {
            let v = self.velocity.0.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let p = params.0.get_mut(name).expect("gradient for known parameter");
            for ((vi, gi), pi) in v.data.iter_mut().zip(&g.data).zip(p.data.iter_mut()) {
                *vi = self.momentum * *vi + scale * gi;
                *pi -= self.lr * *vi;
            }
        }
        norm
    }
}

/// One full gradient step on a sampled batch; returns the loss report.
#[allow(clippy::too_many_arguments)]
pub fn gradient_step<R: Rng + ?Sized>(
    net: &Network,
    params: &mut Params,
    target: &Params,
    opt: &mut Optimizer,
    game: &HiddenBitGame,
    batch: &[&Transition],
    weights: &LossWeights,
    noise_rng: &mut R,
) -> Result<LossReport> {
    let y = td_targets(net, target, game, batch)?;
    let b = training_batch(game, batch);
    let mut fwd = net.forward(params, &b, NoiseSource::Sample(noise_rng))?;
    let (loss, report) = net.assemble_loss(&mut fwd, &y, weights)?;
    let grads = net.backward(&fwd, loss)?;
    opt.step(params, &grads);
    Ok(report)
}

fn epsilon(cfg: &RunConfig, step: usize) -> f64 {
    let t = &cfg.training;
    let horizon = t.eps_decay_frac * t.steps as f64;
    if horizon <= 0.0 {
        return t.eps_end;
    }
    let frac = step as f64 / horizon;
    if frac >= 1.0 {
        t.eps_end
    } else {
        t.eps_start + (t.eps_end - t.eps_start) * frac
    }
}

fn evaluate<R: Rng + ?Sized>(net: &Network, params: &Params, game: &HiddenBitGame, episodes: usize, rng: &mut R) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = game.reset(rng);
        while !s.done {
            let a = greedy_actions(net, params, game, &s)?;
            let tr = game.env_step(&s, &a, rng)?;
            total += tr.reward;
            s = tr.next;
        }
    }
    Ok(total / episodes as f64)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

pub fn train(cfg: &RunConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let game = HiddenBitGame::new(&cfg.env)?;
    let net = build_network(cfg, &game)?;
    let (mut env_rng, mut act_rng, mut replay_rng, mut noise_rng, mut eval_rng) =
        (stream(seed, 1), stream(seed, 2), stream(seed, 3), stream(seed, 4), stream(seed, 5));
    let mut params = net.init_params(&mut stream(seed, 0));
    let mut target = params.clone();
    let t = &cfg.training;
    let mut opt = Optimizer::new(t.lr, t.momentum, t.grad_clip);
    let mut buffer = ReplayBuffer::new(t.buffer_episodes)?;
    let blocks = net.blocks().clone();

    let mut steps = Vec::new();
    let mut block_log = Vec::new();
    let mut evals = Vec::new();
    let mut episodes = Vec::new();
    let mut current = Vec::with_capacity(game.episode_length);
    let mut state = game.reset(&mut env_rng);
    let (mut ep_return, mut last_return) = (0.0, 0.0);
    let mut grad_steps = 0usize;

    for step in 1..=t.steps {
        let eps = epsilon(cfg, step - 1);
        // independent per-agent exploration
        let mut actions = greedy_actions(&net, &params, &game, &state)?;
        for a in actions.iter_mut() {
            if act_rng.random_bool(eps) {
                *a = act_rng.random_range(0..2u8);
            }
        }
        let tr = game.env_step(&state, &actions, &mut env_rng)?;
        ep_return += tr.reward;
        state = tr.next.clone();
        let done = tr.done;
        current.push(tr);
        if done {
            buffer.push(std::mem::take(&mut current));
            episodes.push((step, ep_return));
            last_return = ep_return;
            ep_return = 0.0;
            state = game.reset(&mut env_rng);
        }

        if buffer.len() >= t.warm_episodes {
            let ramp = warmup_factor(grad_steps, cfg.loss.t_warm);
            let weights = LossWeights::scaled(&blocks, cfg.loss.lambda_a_dim, cfg.loss.lambda_x_dim, cfg.loss.lambda_g, cfg.network.xib_dim, ramp);
            let batch = buffer.sample(t.batch_size, &mut replay_rng)?;
            let report = match gradient_step(&net, &mut params, &target, &mut opt, &game, &batch, &weights, &mut noise_rng) {
                Ok(r) if params.all_finite() => r,
                Ok(r) => {
                    return Err(Error::Divergence { step, diagnostics: serde_json::to_string(&r).unwrap_or_default() });
                }
                Err(Error::Numeric(msg)) => return Err(Error::Divergence { step, diagnostics: msg }),
                Err(e) => return Err(e),
            };
            grad_steps += 1;
            if grad_steps.is_multiple_of(t.target_interval) {
                target = params.clone();
            }
            let aib_intra = report.aib_kind(&blocks, BlockKind::Intra);
            let aib_cross = report.aib_kind(&blocks, BlockKind::Cross);
            steps.push(StepLog {
                step,
                td: report.td,
                aib_total: aib_intra + aib_cross,
                aib_intra,
                aib_cross,
                xib_total: report.xib_per_agent.iter().sum(),
                ret: last_return,
                eps,
            });
            if step % t.log_interval == 0 {
                for (l, layer) in report.aib_per_layer_block.iter().enumerate() {
                    for (b, kl) in layer.iter().enumerate() {
                        block_log.push(BlockLog { step, layer: l, block: b, kl: *kl });
                    }
                }
            }
        }
        if step % t.eval_interval == 0 || step == t.steps {
            evals.push(EvalLog { step, mean_return: evaluate(&net, &params, &game, t.eval_episodes, &mut eval_rng)? });
        }
    }

    let tail_start = t.steps - t.steps / 10;
    let in_tail = |s: usize| s > tail_start;
    let tail: Vec<&StepLog> = steps.iter().filter(|r| in_tail(r.step)).collect();
    let layers = cfg.network.layers as f64;
    let k_intra = blocks.kind_size(BlockKind::Intra) as f64;
    let k_cross = blocks.kind_size(BlockKind::Cross) as f64;
    let intra = mean(tail.iter().map(|r| r.aib_intra)) / (layers * k_intra);
    let cross = if k_cross > 0.0 { mean(tail.iter().map(|r| r.aib_cross)) / (layers * k_cross) } else { f64::NAN };
    let summary = SeedSummary {
        name: cfg.name.clone(),
        seed,
        steps: t.steps,
        tail_start,
        tail_td: mean(tail.iter().map(|r| r.td)),
        tail_aib_intra_per_edge: intra,
        tail_aib_cross_per_edge: cross,
        cross_intra_ratio: cross / intra,
        tail_xib: mean(tail.iter().map(|r| r.xib_total)),
        tail_train_return: mean(episodes.iter().filter(|e| in_tail(e.0)).map(|e| e.1)),
        tail_eval_return: mean(evals.iter().filter(|e| in_tail(e.step)).map(|e| e.mean_return)),
        episode_length: game.episode_length,
        groups: game.m(),
        no_comm_value: game.oracle_value(),
        pooled_value: game.pooled_value(),
    };
    Ok(RunOutput { steps, blocks: block_log, evals, episodes, summary, params, log_interval: t.log_interval })
}

impl RunOutput {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in self.steps.iter().filter(|r| r.step % self.log_interval == 0) {
            let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.step, r.td, r.aib_total, r.aib_intra, r.aib_cross, r.xib_total, r.ret, r.eps);
        }
        s
    }

    pub fn blocks_csv(&self) -> String {
        let mut s = String::from("step,layer,block,kl\n");
        for r in &self.blocks {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.layer, r.block, r.kl);
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from("step,mean_return\n");
        for r in &self.evals {
            let _ = writeln!(s, "{},{}", r.step, r.mean_return);
        }
        s
    }

    /// Writes `log.csv`, `kl_blocks.csv`, `eval.csv`, `summary.json` and
    /// `checkpoint.bin` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("log.csv"), self.log_csv())?;
        std::fs::write(dir.join("kl_blocks.csv"), self.blocks_csv())?;
        std::fs::write(dir.join("eval.csv"), self.eval_csv())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        std::fs::write(dir.join("checkpoint.bin"), checkpoint::encode(&self.params))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, HIBCG_DEFAULT};

    fn small() -> RunConfig {
        let mut c = RunConfig::parse(HIBCG_DEFAULT).unwrap();
        c.training.steps = 400;
        c.training.warm_episodes = 5;
        c.training.eval_interval = 200;
        c.training.eval_episodes = 3;
        c.training.batch_size = 4;
        c
    }

    #[test]
    fn fixed_seed_gives_identical_logs() {
        let c = small();
        let a = train(&c, 3).unwrap();
        let b = train(&c, 3).unwrap();
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.eval_csv(), b.eval_csv());
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.params, b.params);
        let other = train(&c, 4).unwrap();
        assert_ne!(a.log_csv(), other.log_csv());
        assert!(a.log_csv().starts_with(LOG_HEADER));
        // warm start: first gradient step after 5 finished episodes
        assert_eq!(a.steps[0].step, 5 * c.env.episode_length);
        assert!(a.steps.iter().all(|r| r.ret >= 0.0 && r.ret <= (2 * c.env.episode_length) as f64));
    }

    #[test]
    fn td_descends_on_fixed_batch() {
        let mut c = small();
        c.loss.lambda_a_dim = 0.0;
        c.loss.lambda_x_dim = 0.0;
        c.network.q_hidden = 8;
        let game = HiddenBitGame::new(&c.env).unwrap();
        let net = build_network(&c, &game).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = net.init_params(&mut rng);
        let mut transitions = Vec::new();
        let mut s = game.reset(&mut rng);
        while !s.done {
            let a: Vec<u8> = (0..6).map(|_| rng.random_range(0..2)).collect();
            let tr = game.env_step(&s, &a, &mut rng).unwrap();
            s = tr.next.clone();
            transitions.push(tr);
        }
        let batch: Vec<&Transition> = transitions.iter().collect();
        let target = params.clone();
        let zero = LossWeights::scaled(net.blocks(), 0.0, 0.0, 0.0, 4, 1.0);
        let mut opt = Optimizer::new(0.01, 0.0, 100.0);
        let first = gradient_step(&net, &mut params, &target, &mut opt, &game, &batch, &zero, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut last = first.td;
        for _ in 0..200 {
            last = gradient_step(&net, &mut params, &target, &mut opt, &game, &batch, &zero, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().td;
        }
        assert!(last < 0.5 * first.td, "{} -> {last}", first.td);
    }

    #[test]
    fn epsilon_schedule() {
        let c = small();
        assert_eq!(epsilon(&c, 0), 1.0);
        assert!((epsilon(&c, 40) - (1.0 - 0.95 * 0.5)).abs() < 1e-12);
        assert_eq!(epsilon(&c, 80), 0.05);
        assert_eq!(epsilon(&c, 399), 0.05);
    }

    #[test]
    fn optimizer_clips() {
        let mut p = Params([("w".to_string(), Mat::from_vec(1, 2, vec![0.0, 0.0]))].into_iter().collect());
        let g = Params([("w".to_string(), Mat::from_vec(1, 2, vec![3.0, 4.0]))].into_iter().collect());
        let mut opt = Optimizer::new(1.0, 0.0, 1.0);
        assert_eq!(opt.step(&mut p, &g), 5.0);
        assert!((p.get("w").data[0] + 0.6).abs() < 1e-15);
        assert!((p.get("w").data[1] + 0.8).abs() < 1e-15);
    }
}
