//! The three-stage coordination-graph learner: base graph, layer-wise
//! structural encoders with block-prior KL penalties, per-agent message
//! compression, Q-heads and a monotone mixer.
//!
//! A forward pass processes a minibatch of `B` joint observations at once.
//! Per-agent quantities are stacked as `(B*n) x k` matrices (sample-major),
//! per-edge quantities as `(B*n*n) x 1` columns with edge `e = i*n + j`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::groups::{build_edge_blocks, gacg_edge_covariance, group_mask, pair_scores, BlockKind, EdgeBlockIndex, GroupPartition};
use crate::prior::BlockPrior;
use crate::tape::{sigmoid, Mat, Tape, Var};

/// Threshold used by the hard gate.
pub const HARD_GATE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Mode {
    Gaussian,
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Symmetric,
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gating {
    Sigmoid,
    /// `1[sigmoid(z) > 0.6]`; has no gradient, evaluation only.
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: usize,
    pub msg_dim: usize,
    pub xib_dim: usize,
    pub q_hidden: usize,
    pub normalization: Normalization,
    pub gating: Gating,
    /// Reparameterization noise scale on edge latents, in `[0, 1]`.
    pub delta: f64,
    /// Relaxed-Bernoulli temperature.
    pub tau: f64,
    pub stage1: Stage1Mode,
    /// Low-rank and diagonal variances of the base-graph sampler.
    pub alpha: f64,
    pub eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            msg_dim: 8,
            xib_dim: 8,
            q_hidden: 32,
            normalization: Normalization::Symmetric,
            gating: Gating::Sigmoid,
            delta: 1.0,
            tau: 0.5,
            stage1: Stage1Mode::Gaussian,
            alpha: 0.1,
            eps: 0.01,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 {
            return bad("layers must be >= 1");
        }
        if self.msg_dim == 0 || self.xib_dim == 0 || self.q_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1]");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.alpha >= 0.0) || !(self.eps >= 0.0) {
            return bad("alpha and eps must be nonnegative");
        }
        Ok(())
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params(pub BTreeMap<String, Mat>);

impl Params {
    pub fn get(&self, name: &str) -> &Mat {
        self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn count(&self) -> usize {
        self.0.values().map(|m| m.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Mat::all_finite)
    }
}

/// Mixer agent weights after the nonnegativity transform.
pub fn mixer_weights_are_nonnegative(w: &Mat) -> bool {
    w.data.iter().all(|&v| v >= 0.0)
}

/// One minibatch. `local` is `(B*n) x in_dim`, `state` is `B x state_dim`,
/// `actions` (when present) is a `(B*n) x 2` one-hot matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub local: Mat,
    pub state: Mat,
    pub actions: Option<Mat>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.state.rows
    }
}

/// All randomness consumed by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// Normalized base graphs, `(B*n) x n`.
    pub a0: Mat,
    /// Standard-normal draws per layer, `(B*n*n) x 1`.
    pub layer_eps: Vec<Mat>,
    /// Standard-normal draws for the message code, `(B*n) x xib_dim`.
    pub xib_eps: Mat,
}

pub enum NoiseSource<'a, R: Rng + ?Sized> {
    Sample(&'a mut R),
    Replay(&'a Noise),
    /// Noise-free evaluation: base graph from the mean score, zero draws.
    Mean,
}

/// Symmetrize then normalize with self-loops. Degrees use absolute values
/// so signed inputs stay well defined.
pub fn normalize_adjacency(a: &Mat, mode: Normalization) -> Mat {
    let n = a.rows;
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i)) + if i == j { 1.0 } else { 0.0 };
            s.set(i, j, v);
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| s.row(i).iter().map(|v| v.abs()).sum::<f64>().max(1e-12)).collect();
    for i in 0..n {
        for j in 0..n {
            let f = match mode {
                Normalization::Symmetric => 1.0 / (deg[i] * deg[j]).sqrt(),
                Normalization::Row => 1.0 / deg[i],
            };
            s.set(i, j, s.get(i, j) * f);
        }
    }
    s
}

/// Symmetrized base-graph draw before normalization.
pub fn stage1_raw_sample<R: Rng + ?Sized>(
    obs_embeds: &[Vec<f64>],
    partition: &GroupPartition,
    cfg: &NetworkConfig,
    rng: Option<&mut R>,
) -> Result<Mat> {
    let n = partition.n();
    if obs_embeds.len() != n {
        return contract(format!("{} embeddings for {n} agents", obs_embeds.len()));
    }
    let mu = pair_scores(obs_embeds)?;
    let z = match (cfg.stage1, rng) {
        (Stage1Mode::Gaussian, Some(rng)) if cfg.alpha > 0.0 && cfg.eps > 0.0 => {
            gacg_edge_covariance(&group_mask(partition), cfg.alpha, cfg.eps)?.sample(&mu, rng)?
        }
        (Stage1Mode::Gaussian, Some(rng)) => {
            // degenerate covariance: draw the components that remain
            let mask = group_mask(partition).vec();
            let shared: f64 = rng.sample(StandardNormal);
            mu.iter()
                .zip(&mask)
                .map(|(m, v)| {
                    let own: f64 = rng.sample(StandardNormal);
                    m + cfg.alpha.sqrt() * v * shared + cfg.eps.sqrt() * own
                })
                .collect()
        }
        (Stage1Mode::Gaussian, None) => mu,
        (Stage1Mode::Relaxed, Some(rng)) => mu
            .iter()
            .map(|m| {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                sigmoid((m + u.ln() - (-u).ln_1p()) / cfg.tau)
            })
            .collect(),
        (Stage1Mode::Relaxed, None) => mu.iter().map(|m| sigmoid(m / cfg.tau)).collect(),
    };
    let z = Mat::from_vec(n, n, z);
    let mut sym = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym.set(i, j, 0.5 * (z.get(i, j) + z.get(j, i)));
        }
    }
    if !sym.all_finite() {
        return Err(Error::Numeric("non-finite base graph".into()));
    }
    Ok(sym)
}

/// Base graph: pair scores of the observation embeddings, perturbed by the
/// group-masked sampler (or relaxed-Bernoulli), symmetrized and normalized.
/// Passing no generator gives the noise-free graph.
pub fn stage1_init_graph<R: Rng + ?Sized>(
    obs_embeds: &[Vec<f64>],
    partition: &GroupPartition,
    cfg: &NetworkConfig,
    rng: Option<&mut R>,
) -> Result<Mat> {
    let raw = stage1_raw_sample(obs_embeds, partition, cfg, rng)?;
    Ok(normalize_adjacency(&raw, cfg.normalization))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub mu: Mat,
    pub log_var: Mat,
    /// Symmetrized edge latent, `(B*n) x n`.
    pub sampled: Mat,
    /// Gate values in `[0, 1]`, `(B*n) x n`.
    pub gated: Mat,
    pub z: Mat,
    /// Batch-mean KL per edge block.
    pub aib: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub a0: Mat,
    pub layers: Vec<LayerTrace>,
    pub mu_x: Mat,
    pub log_var_x: Mat,
    pub z_out: Mat,
    pub xib_per_agent: Vec<f64>,
    /// Per-agent action values, `(B*n) x 2`.
    pub q: Mat,
    pub mixer_w: Mat,
    pub mixer_b: Mat,
    pub q_tot: Option<Mat>,
    pub noise: Noise,
}

/// A forward pass with its tape, ready for loss assembly and backward.
pub struct Forward {
    pub trace: ForwardTrace,
    tape: Tape,
    params: BTreeMap<String, Var>,
    aib: Vec<Var>,
    xib: Var,
    q_tot: Option<Var>,
}

impl Forward {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}

/// Per-block penalty weights and the message-code weight, after warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: Vec<f64>,
    pub lambda_x: f64,
    pub lambda_g: f64,
}

/// Linear ramp from 0 to 1 over `t_warm` steps.
pub fn warmup_factor(step: usize, t_warm: usize) -> f64 {
    if t_warm == 0 {
        1.0
    } else {
        (step as f64 / t_warm as f64).min(1.0)
    }
}

impl LossWeights {
    /// `lambda_A = lambda_A_dim * k` per block and `lambda_X =
    /// lambda_X_dim * xib_dim`, both scaled by `ramp`.
    pub fn scaled(blocks: &EdgeBlockIndex, lambda_a_dim: f64, lambda_x_dim: f64, lambda_g: f64, xib_dim: usize, ramp: f64) -> Self {
        Self {
            lambda_a: blocks.blocks().iter().map(|b| ramp * lambda_a_dim * b.size() as f64).collect(),
            lambda_x: ramp * lambda_x_dim * xib_dim as f64,
            lambda_g: ramp * lambda_g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub td: f64,
    /// Always zero: ground-truth partitions are supplied.
    pub group_loss: f64,
    /// `[layer][block]`.
    pub aib_per_layer_block: Vec<Vec<f64>>,
    pub xib_per_agent: Vec<f64>,
    pub weights: LossWeights,
    pub total: f64,
}

/// `sum_g lambda_g * aib_g`.
pub fn weighted_penalty(aib: &[f64], lambda: &[f64]) -> f64 {
    aib.iter().zip(lambda).map(|(a, l)| a * l).sum()
}

impl LossReport {
    pub fn recompute_total(&self) -> f64 {
        let aib: f64 = self.aib_per_layer_block.iter().map(|l| weighted_penalty(l, &self.weights.lambda_a)).sum();
        let xib: f64 = self.xib_per_agent.iter().sum();
        self.td + self.weights.lambda_g * self.group_loss + aib + self.weights.lambda_x * xib
    }

    /// Summed AIB over layers and blocks of one kind.
    pub fn aib_kind(&self, blocks: &EdgeBlockIndex, kind: BlockKind) -> f64 {
        self.aib_per_layer_block
            .iter()
            .flat_map(|l| l.iter().zip(blocks.blocks()).filter(|(_, b)| b.kind == kind).map(|(a, _)| *a))
            .sum()
    }
}

pub struct Network {
    pub cfg: NetworkConfig,
    pub in_dim: usize,
    pub state_dim: usize,
    partition: GroupPartition,
    blocks: EdgeBlockIndex,
    edge_var: Vec<f64>,
    feature_var: f64,
    indicator: Mat,
    init_log_var: f64,
}

impl Network {
    pub fn new(cfg: NetworkConfig, partition: GroupPartition, prior: &BlockPrior, in_dim: usize, state_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let blocks = build_edge_blocks(&partition);
        if prior.per_block_scale.len() != blocks.blocks().len() {
            return contract("prior does not match the partition's edge blocks");
        }
        let n = partition.n();
        let edge_var = prior.edge_scales(&blocks);
        let nb = blocks.blocks().len();
        let mut indicator = Mat::zeros(n * n, nb);
        for e in 0..n * n {
            indicator.set(e, blocks.block_of_edge(e).0, 1.0);
        }
        let init_log_var = edge_var.iter().cloned().fold(f64::INFINITY, f64::min).ln();
        Ok(Self { cfg, in_dim, state_dim, partition, blocks, edge_var, feature_var: prior.feature_scale, indicator, init_log_var })
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn blocks(&self) -> &EdgeBlockIndex {
        &self.blocks
    }

    pub fn edge_prior_variances(&self) -> &[f64] {
        &self.edge_var
    }

    /// Prior variance of each message-code dimension.
    pub fn feature_prior_variance(&self) -> f64 {
        self.feature_var
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, dx, h) = (self.cfg.msg_dim, self.cfg.xib_dim, self.cfg.q_hidden);
        let mut v = vec![("embed.w".to_string(), self.in_dim, d), ("embed.b".to_string(), 1, d)];
        for l in 0..self.cfg.layers {
            v.push((format!("layer{l}.enc1.w"), 1 + 3 * d, d));
            v.push((format!("layer{l}.enc1.b"), 1, d));
            v.push((format!("layer{l}.enc2.w"), d, 2));
            v.push((format!("layer{l}.enc2.b"), 1, 2));
            v.push((format!("layer{l}.msg.w"), d, d));
        }
        v.extend([
            ("xib.mu.w".to_string(), d, dx),
            ("xib.mu.b".to_string(), 1, dx),
            ("xib.lv.w".to_string(), d, dx),
            ("xib.lv.b".to_string(), 1, dx),
            ("q.h.w".to_string(), self.in_dim + dx, h),
            ("q.h.b".to_string(), 1, h),
            ("q.out.w".to_string(), h, 2),
            ("q.out.b".to_string(), 1, 2),
            ("mix.w.w".to_string(), self.state_dim, self.n()),
            ("mix.w.b".to_string(), 1, self.n()),
            ("mix.b.w".to_string(), self.state_dim, 1),
            ("mix.b.b".to_string(), 1, 1),
        ]);
        v
    }

    /// Uniform Glorot initialization; biases zero except the log-variance
    /// heads, which start at the tightest prior variance.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        let mut p = BTreeMap::new();
        for (name, r, c) in self.param_shapes() {
            let m = if name.ends_with(".b") {
                Mat::zeros(r, c)
            } else {
                let mut lim = (6.0 / (r + c) as f64).sqrt();
                if name.contains("enc2") || name.starts_with("xib.lv") {
                    lim *= 0.1;
                }
                Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-lim..lim)).collect())
            };
            p.insert(name, m);
        }
        for l in 0..self.cfg.layers {
            p.get_mut(&format!("layer{l}.enc2.b")).unwrap().data[1] = self.init_log_var;
        }
        let fv = self.feature_var.ln();
        p.get_mut("xib.lv.b").unwrap().data.iter_mut().for_each(|x| *x = fv);
        Params(p)
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        for (name, r, c) in self.param_shapes() {
            match params.0.get(&name) {
                Some(m) if m.shape() == (r, c) => {}
                Some(m) => return contract(format!("parameter {name} has shape {:?}, expected {:?}", m.shape(), (r, c))),
                None => return contract(format!("missing parameter {name}")),
            }
        }
        if params.0.len() != self.param_shapes().len() {
            return contract("unexpected extra parameters");
        }
        Ok(())
    }

    fn draw_noise<R: Rng + ?Sized>(&self, batch: &Batch, src: NoiseSource<'_, R>) -> Result<Noise> {
        let (b, n) = (batch.size(), self.n());
        let embeds = |s: usize| -> Vec<Vec<f64>> { (0..n).map(|i| batch.local.row(s * n + i).to_vec()).collect() };
        let stack = |graphs: Vec<Mat>| Mat::from_vec(b * n, n, graphs.into_iter().flat_map(|g| g.data).collect());
        match src {
            NoiseSource::Replay(noise) => {
                let ok = noise.a0.shape() == (b * n, n)
                    && noise.layer_eps.len() == self.cfg.layers
                    && noise.layer_eps.iter().all(|e| e.shape() == (b * n * n, 1))
                    && noise.xib_eps.shape() == (b * n, self.cfg.xib_dim);
                if !ok {
                    return contract("replayed noise does not match the batch");
                }
                Ok(noise.clone())
            }
            NoiseSource::Mean => {
                let graphs = (0..b)
                    .map(|s| stage1_init_graph::<R>(&embeds(s), &self.partition, &self.cfg, None))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Noise {
                    a0: stack(graphs),
                    layer_eps: vec![Mat::zeros(b * n * n, 1); self.cfg.layers],
                    xib_eps: Mat::zeros(b * n, self.cfg.xib_dim),
                })
            }
            NoiseSource::Sample(rng) => {
                let mut graphs = Vec::with_capacity(b);
                for s in 0..b {
                    graphs.push(stage1_init_graph(&embeds(s), &self.partition, &self.cfg, Some(&mut *rng))?);
                }
                let mut normal = |rows: usize, cols: usize| {
                    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                };
                let layer_eps = (0..self.cfg.layers).map(|_| normal(b * n * n, 1)).collect();
                let xib_eps = normal(b * n, self.cfg.xib_dim);
                Ok(Noise { a0: stack(graphs), layer_eps, xib_eps })
            }
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, params: &Params, batch: &Batch, src: NoiseSource<'_, R>) -> Result<Forward> {
        self.check_params(params)?;
        let (b, n) = (batch.size(), self.n());
        if batch.local.shape() != (b * n, self.in_dim) || batch.state.shape() != (b, self.state_dim) {
            return contract("batch shapes do not match the network");
        }
        if let Some(a) = &batch.actions {
            if a.shape() != (b * n, 2) {
                return contract("actions must be a (B*n) x 2 one-hot matrix");
            }
        }
        let noise = self.draw_noise(batch, src)?;
        let mut tape = Tape::new();
        let pv: BTreeMap<String, Var> = params.0.iter().map(|(k, m)| (k.clone(), tape.leaf(m.clone()))).collect();
        let p = |name: &str| pv[name];

        let x = tape.leaf(batch.local.clone());
        let h0 = tape.matmul(x, p("embed.w"));
        let h0 = tape.add_row(h0, p("embed.b"));
        let mut z = tape.tanh(h0);

        let ctx = EdgeContext::new(self, b);
        let a0_edges = tape.leaf(Mat::from_vec(b * n * n, 1, noise.a0.data.clone()));
        let mut layers = Vec::with_capacity(self.cfg.layers);
        let mut aib_vars = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let out = self.stage2_layer(&mut tape, &pv, l, a0_edges, z, &ctx, &noise.layer_eps[l])?;
            z = out.z;
            aib_vars.push(out.aib);
            layers.push(out.trace);
        }

        let (z_out, xib, mu_x, lv_x) = self.stage3_xib(&mut tape, &pv, z, &noise.xib_eps, b)?;
        let (q, w, bias) = self.q_heads_and_mix(&mut tape, &pv, x, z_out, &batch.state);

        let q_tot = batch.actions.as_ref().map(|a| {
            let av = tape.leaf(a.clone());
            let chosen = tape.mul(q, av);
            let chosen = tape.row_sum(chosen);
            let chosen = tape.reshape(chosen, b, n);
            let weighted = tape.mul(w, chosen);
            let s = tape.row_sum(weighted);
            tape.add(s, bias)
        });

        let trace = ForwardTrace {
            a0: noise.a0.clone(),
            layers,
            mu_x: tape.value(mu_x).clone(),
            log_var_x: tape.value(lv_x).clone(),
            z_out: tape.value(z_out).clone(),
            xib_per_agent: tape.value(xib).data.clone(),
            q: tape.value(q).clone(),
            mixer_w: tape.value(w).clone(),
            mixer_b: tape.value(bias).clone(),
            q_tot: q_tot.map(|v| tape.value(v).clone()),
            noise,
        };
        if !trace.q.all_finite() {
            return Err(Error::Numeric("non-finite action values".into()));
        }
        Ok(Forward { trace, tape, params: pv, aib: aib_vars, xib, q_tot })
    }

    /// One structural-encoder layer followed by gated message passing.
    #[allow(clippy::too_many_arguments)]
    fn stage2_layer(
        &self,
        tape: &mut Tape,
        pv: &BTreeMap<String, Var>,
        l: usize,
        a0_edges: Var,
        z_prev: Var,
        ctx: &EdgeContext,
        eps: &Mat,
    ) -> Result<LayerOut> {
        let p = |s: &str| pv[&format!("layer{l}.{s}")];
        let (b, n) = (ctx.batch, self.n());
        let zi = tape.gather_rows(z_prev, ctx.src.clone());
        let zj = tape.gather_rows(z_prev, ctx.dst.clone());
        let zij = tape.mul(zi, zj);
        let feats = tape.concat_cols(&[a0_edges, zi, zj, zij]);
        let hid = tape.matmul(feats, p("enc1.w"));
        let hid = tape.add_row(hid, p("enc1.b"));
        let hid = tape.tanh(hid);
        let out = tape.matmul(hid, p("enc2.w"));
        let out = tape.add_row(out, p("enc2.b"));
        let mu = tape.slice_cols(out, 0, 1);
        let lv = tape.slice_cols(out, 1, 2);

        let half_lv = tape.scale(lv, 0.5);
        let std = tape.exp(half_lv);
        let e = tape.leaf(eps.map(|v| v * self.cfg.delta));
        let jitter = tape.mul(std, e);
        let latent = tape.add(mu, jitter);
        let latent = tape.reshape(latent, b * n, n);
        let latent_t = tape.block_transpose(latent, n);
        let both = tape.add(latent, latent_t);
        let sym = tape.scale(both, 0.5);

        let gate = match self.cfg.gating {
            Gating::Sigmoid => tape.sigmoid(sym),
            Gating::Threshold => tape.detached(sym, |v| if sigmoid(v) > HARD_GATE_THRESHOLD { 1.0 } else { 0.0 }),
        };
        let eye = tape.leaf(ctx.eye.clone());
        let s = tape.add(gate, eye);
        let deg = tape.row_sum(s);
        let prop = match self.cfg.normalization {
            Normalization::Symmetric => {
                let dinv = tape.powf(deg, -0.5);
                let left = tape.scale_rows(s, dinv);
                let left_t = tape.block_transpose(left, n);
                tape.scale_rows(left_t, dinv)
            }
            Normalization::Row => {
                let dinv = tape.powf(deg, -1.0);
                tape.scale_rows(s, dinv)
            }
        };
        let msg = tape.block_matmul(prop, z_prev, n);
        let msg = tape.matmul(msg, p("msg.w"));
        let z = tape.tanh(msg);
        if !tape.value(z).all_finite() {
            return Err(Error::Numeric(format!("non-finite activations in layer {l}")));
        }

        // per-edge KL against the block prior, summed per block, batch mean
        let inv0 = tape.leaf(ctx.inv_var.clone());
        let c0 = tape.leaf(ctx.log_var_m1.clone());
        let var = tape.exp(lv);
        let a = tape.mul(var, inv0);
        let mu2 = tape.mul(mu, mu);
        let m = tape.mul(mu2, inv0);
        let s1 = tape.add(a, m);
        let s1 = tape.add(s1, c0);
        let s1 = tape.sub(s1, lv);
        let kl_edge = tape.scale(s1, 0.5);
        let kl_rows = tape.reshape(kl_edge, b, n * n);
        let ind = tape.leaf(self.indicator.clone());
        let per_sample = tape.matmul(kl_rows, ind);
        let mean_row = tape.leaf(Mat::filled(1, b, 1.0 / b as f64));
        let aib = tape.matmul(mean_row, per_sample);

        let trace = LayerTrace {
            mu: tape.value(mu).clone(),
            log_var: tape.value(lv).clone(),
            sampled: tape.value(sym).clone(),
            gated: tape.value(gate).clone(),
            z: tape.value(z).clone(),
            aib: tape.value(aib).data.clone(),
        };
        Ok(LayerOut { z, aib, trace })
    }

    /// Per-agent Gaussian message code and its KL to the feature prior.
    fn stage3_xib(&self, tape: &mut Tape, pv: &BTreeMap<String, Var>, z: Var, eps: &Mat, b: usize) -> Result<(Var, Var, Var, Var)> {
        let n = self.n();
        let mu = tape.matmul(z, pv["xib.mu.w"]);
        let mu = tape.add_row(mu, pv["xib.mu.b"]);
        let lv = tape.matmul(z, pv["xib.lv.w"]);
        let lv = tape.add_row(lv, pv["xib.lv.b"]);
        let half = tape.scale(lv, 0.5);
        let std = tape.exp(half);
        let e = tape.leaf(eps.clone());
        let jitter = tape.mul(std, e);
        let z_out = tape.add(mu, jitter);

        let inv = 1.0 / self.feature_var;
        let var = tape.exp(lv);
        let mu2 = tape.mul(mu, mu);
        let s = tape.add(var, mu2);
        let s = tape.scale(s, inv);
        let s = tape.add_scalar(s, self.feature_var.ln() - 1.0);
        let s = tape.sub(s, lv);
        let s = tape.scale(s, 0.5);
        let per_row = tape.row_sum(s);
        let per_agent = tape.reshape(per_row, b, n);
        let mean_row = tape.leaf(Mat::filled(1, b, 1.0 / b as f64));
        let xib = tape.matmul(mean_row, per_agent);
        if !tape.value(z_out).all_finite() {
            return Err(Error::Numeric("non-finite message code".into()));
        }
        Ok((z_out, xib, mu, lv))
    }

    /// Shared per-agent Q-head over `[local input, tanh(code)]` and the
    /// state-conditioned monotone mixer weights.
    fn q_heads_and_mix(&self, tape: &mut Tape, pv: &BTreeMap<String, Var>, x: Var, z_out: Var, state: &Mat) -> (Var, Var, Var) {
        let code = tape.tanh(z_out);
        let inp = tape.concat_cols(&[x, code]);
        let h = tape.matmul(inp, pv["q.h.w"]);
        let h = tape.add_row(h, pv["q.h.b"]);
        let h = tape.tanh(h);
        let q = tape.matmul(h, pv["q.out.w"]);
        let q = tape.add_row(q, pv["q.out.b"]);
        let s = tape.leaf(state.clone());
        let w = tape.matmul(s, pv["mix.w.w"]);
        let w = tape.add_row(w, pv["mix.w.b"]);
        let w = tape.softplus(w);
        let bias = tape.matmul(s, pv["mix.b.w"]);
        let bias = tape.add_row(bias, pv["mix.b.b"]);
        (q, w, bias)
    }

    /// Adds the TD and penalty terms to the tape. `targets` has one entry
    /// per sample.
    pub fn assemble_loss(&self, fwd: &mut Forward, targets: &[f64], weights: &LossWeights) -> Result<(Var, LossReport)> {
        let Some(q_tot) = fwd.q_tot else {
            return contract("loss needs a batch with actions");
        };
        let b = fwd.trace.q_tot.as_ref().map_or(0, |m| m.rows);
        if targets.len() != b {
            return contract(format!("{} targets for a batch of {b}", targets.len()));
        }
        if weights.lambda_a.len() != self.blocks.blocks().len() {
            return contract("one AIB weight per edge block required");
        }
        let tape = &mut fwd.tape;
        let y = tape.leaf(Mat::from_vec(b, 1, targets.to_vec()));
        let diff = tape.sub(q_tot, y);
        let sq = tape.mul(diff, diff);
        let sq = tape.sum(sq);
        let td = tape.scale(sq, 1.0 / b as f64);
        let lam = tape.leaf(Mat::from_vec(weights.lambda_a.len(), 1, weights.lambda_a.clone()));
        let mut total = td;
        for &a in &fwd.aib {
            let pen = tape.matmul(a, lam);
            total = tape.add(total, pen);
        }
        let xs = tape.sum(fwd.xib);
        let xs = tape.scale(xs, weights.lambda_x);
        total = tape.add(total, xs);
        let total_v = tape.scalar(total);
        if !total_v.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let report = LossReport {
            td: tape.scalar(td),
            group_loss: 0.0,
            aib_per_layer_block: fwd.trace.layers.iter().map(|l| l.aib.clone()).collect(),
            xib_per_agent: fwd.trace.xib_per_agent.clone(),
            weights: weights.clone(),
            total: total_v,
        };
        Ok((total, report))
    }

    /// Gradients of `loss` with respect to every parameter.
    pub fn backward(&self, fwd: &Forward, loss: Var) -> Result<Params> {
        if loss.0 >= fwd.tape.len() || fwd.tape.value(loss).shape() != (1, 1) {
            return contract("loss is not a scalar on this trace");
        }
        let grads = fwd.tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, v) in &fwd.params {
            let shape = fwd.tape.value(*v).shape();
            out.insert(name.clone(), grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape.0, shape.1)));
        }
        Ok(Params(out))
    }

    /// Noise-free per-agent action values for a single joint observation.
    pub fn agent_q_values(&self, params: &Params, local: &Mat, state: &[f64]) -> Result<Mat> {
        let batch = Batch { local: local.clone(), state: Mat::from_vec(1, state.len(), state.to_vec()), actions: None };
        let fwd = self.forward::<rand_chacha::ChaCha8Rng>(params, &batch, NoiseSource::Mean)?;
        Ok(fwd.trace.q)
    }
}

struct LayerOut {
    z: Var,
    aib: Var,
    trace: LayerTrace,
}

/// Batch-size dependent constants for the edge computations.
struct EdgeContext {
    batch: usize,
    src: Rc<Vec<usize>>,
    dst: Rc<Vec<usize>>,
    eye: Mat,
    inv_var: Mat,
    log_var_m1: Mat,
}

impl EdgeContext {
    fn new(net: &Network, b: usize) -> Self {
        let n = net.n();
        let mut src = Vec::with_capacity(b * n * n);
        let mut dst = Vec::with_capacity(b * n * n);
        for s in 0..b {
            for i in 0..n {
                for j in 0..n {
                    src.push(s * n + i);
                    dst.push(s * n + j);
                }
            }
        }
        let mut eye = Mat::zeros(b * n, n);
        for r in 0..b * n {
            eye.set(r, r % n, 1.0);
        }
        let inv: Vec<f64> = net.edge_var.iter().map(|v| 1.0 / v).collect();
        let lm1: Vec<f64> = net.edge_var.iter().map(|v| v.ln() - 1.0).collect();
        Self {
            batch: b,
            src: Rc::new(src),
            dst: Rc::new(dst),
            eye,
            inv_var: Mat::from_vec(b * n * n, 1, inv.repeat(b)),
            log_var_m1: Mat::from_vec(b * n * n, 1, lm1.repeat(b)),
        }
    }
}
