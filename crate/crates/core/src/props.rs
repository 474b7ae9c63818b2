//! Randomized property suites, one per proposition, with machine-readable
//! reports. Every suite is a pure function of `(trials, seed)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::allocator::{dual_ascent_step, verify_kkt, water_fill, Channel, ChannelKind, DualState, UtilityCurve, DEFAULT_TOL};
use crate::error::{contract, Result};
use crate::groups::{build_edge_blocks, GroupPartition};
use crate::kl::{
    anisotropy_kl, blockwise_kl, diag_gauss_kl, diag_gauss_kl_per_dim, gauss_zero_mean_kl, matched_isotropic_scale,
    mi_kl_decomposition, BlockId, DiagGaussian, IsotropicPrior,
};
use crate::network::{mixer_weights_are_nonnegative, Batch, LossWeights, Network, NetworkConfig, Noise, NoiseSource, Params};
use crate::oracles::{grid_allocation, random_relevance_instance};
use crate::prior::{bound_gap, flat_prior, group_prior, matched_group_prior};
use crate::relevance::{empirical_relevance_check, fano_relevance_lower_bound, RelevanceInputs};
use crate::tape::Mat;

pub const SUITES: [&str; 5] = ["prop1", "prop2", "prop3", "prop4", "prop5"];

/// Trial count used when none is given.
pub fn default_trials(suite: &str) -> usize {
    match suite {
        "prop4" => 100,
        "prop5" => 50,
        _ => 1000,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    /// Most adverse observed value of the checked quantity.
    pub worst: Option<f64>,
    pub tolerance: f64,
    /// Inputs of the first failing case.
    pub counterexample: Option<Value>,
}

impl PropertyOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub properties: Vec<PropertyOutcome>,
}

#[derive(Clone, Copy)]
enum Worse {
    Larger,
    Smaller,
}

struct Tracker {
    out: PropertyOutcome,
    worse: Worse,
}

impl Tracker {
    fn new(name: &str, tolerance: f64, worse: Worse) -> Self {
        let out = PropertyOutcome { name: name.into(), trials: 0, failures: 0, worst: None, tolerance, counterexample: None };
        Self { out, worse }
    }

    fn record(&mut self, metric: f64, ok: bool, case: impl FnOnce() -> Value) {
        self.out.trials += 1;
        let worse = match (self.out.worst, self.worse) {
            (None, _) => true,
            (Some(w), Worse::Larger) => metric > w || metric.is_nan(),
            (Some(w), Worse::Smaller) => metric < w || metric.is_nan(),
        };
        if worse {
            self.out.worst = Some(metric);
        }
        if !ok {
            self.out.failures += 1;
            if self.out.counterexample.is_none() {
                self.out.counterexample = Some(case());
            }
        }
    }

    fn finish(self) -> PropertyOutcome {
        self.out
    }
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Runs one suite (or every suite for `"all"`).
pub fn run(suite: &str, trials: Option<usize>, seed: u64) -> Result<Vec<SuiteReport>> {
    let names: Vec<&str> = match suite {
        "all" => SUITES.to_vec(),
        s if SUITES.contains(&s) => vec![s],
        other => return contract(format!("unknown suite {other:?}; expected all|prop1|prop2|prop3|prop4|prop5")),
    };
    if trials == Some(0) {
        return contract("trial count must be >= 1");
    }
    names
        .into_iter()
        .map(|name| {
            let t = trials.unwrap_or_else(|| default_trials(name));
            let properties = match name {
                "prop1" => prop1(t, seed)?,
                "prop2" => prop2(t, seed)?,
                "prop3" => prop3(t, seed)?,
                "prop4" => prop4(t, seed)?,
                _ => prop5(t, seed)?,
            };
            let passed = properties.iter().all(PropertyOutcome::passed);
            Ok(SuiteReport { suite: name.into(), seed, trials: t, passed, properties })
        })
        .collect()
}

fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Result<DiagGaussian> {
    let mean = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lv = (0..dim).map(|_| rng.random_range(-4.0..2.0)).collect();
    DiagGaussian::new(mean, lv)
}

fn random_partition(rng: &mut ChaCha8Rng, max_groups: usize, max_size: usize) -> Result<GroupPartition> {
    let m = rng.random_range(1..=max_groups);
    let sizes: Vec<usize> = (0..m).map(|_| rng.random_range(1..=max_size)).collect();
    GroupPartition::from_sizes(&sizes)
}

// ---------------------------------------------------------------- prop1

/// Variational bound pieces: KL nonnegativity, the MI/prior-gap split, the
/// matched-scale optimum, AM-GM, and the network's KL paths.
fn prop1(trials: usize, seed: u64) -> Result<Vec<PropertyOutcome>> {
    let mut out = Vec::new();

    let mut rng = stream(seed, 1);
    let mut t = Tracker::new("kl_nonnegative", 0.0, Worse::Smaller);
    for _ in 0..trials {
        let dim = rng.random_range(1..=8);
        let p = random_gaussian(&mut rng, dim)?;
        let scale = rng.random_range(0.05..3.0);
        let kl = diag_gauss_kl(&p, &IsotropicPrior::new(scale, dim)?)?;
        t.record(kl, kl >= 0.0, || json!({"mean": p.mean(), "log_var": p.log_var(), "prior_scale": scale}));
    }
    out.push(t.finish());

    let mut t = Tracker::new("kl_zero_at_prior", 1e-14, Worse::Larger);
    for _ in 0..trials {
        let dim = rng.random_range(1..=8);
        let scale: f64 = rng.random_range(0.05..3.0);
        let p = DiagGaussian::new(vec![0.0; dim], vec![scale.ln(); dim])?;
        let kl = diag_gauss_kl(&p, &IsotropicPrior::new(scale, dim)?)?;
        t.record(kl.abs(), kl.abs() <= 1e-14, || json!({"dim": dim, "prior_scale": scale, "kl": kl}));
    }
    out.push(t.finish());

    let mut t = Tracker::new("mi_prior_gap_split", 1e-12, Worse::Larger);
    for _ in 0..trials {
        let dim = rng.random_range(1..=4);
        let parts = rng.random_range(1..=5);
        let raw: Vec<f64> = (0..parts).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let ensemble = raw
            .iter()
            .map(|w| Ok((w / total, random_gaussian(&mut rng, dim)?)))
            .collect::<Result<Vec<_>>>()?;
        let scale = rng.random_range(0.1..3.0);
        let d = mi_kl_decomposition(&ensemble, &IsotropicPrior::new(scale, dim)?)?;
        let err = rel_err(d.expected_kl, d.mi_estimate + d.prior_gap);
        let ok = err <= 1e-12 && d.prior_gap >= 0.0 && d.mi_estimate >= -1e-12 * d.expected_kl.max(1.0);
        t.record(err, ok, || {
            json!({
                "weights": ensemble.iter().map(|e| e.0).collect::<Vec<_>>(),
                "means": ensemble.iter().map(|e| e.1.mean().to_vec()).collect::<Vec<_>>(),
                "log_vars": ensemble.iter().map(|e| e.1.log_var().to_vec()).collect::<Vec<_>>(),
                "prior_scale": scale,
                "decomposition": d,
            })
        });
    }
    out.push(t.finish());

    let mut t = Tracker::new("matched_scale_is_grid_argmin", 1e-3, Worse::Larger);
    for _ in 0..trials {
        let k = rng.random_range(1..=10);
        let vars: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..2.0)).collect();
        let analytic = matched_isotropic_scale(&vars)?;
        let h = 1e-3;
        let (mut best_s, mut best) = (0.0, f64::INFINITY);
        let mut s = 0.01;
        while s <= 2.5 {
            let kl: f64 = vars.iter().map(|&v| gauss_zero_mean_kl(v, 1, s)).sum::<Result<f64>>()?;
            if kl < best {
                best = kl;
                best_s = s;
            }
            s += h;
        }
        let dist = (best_s - analytic).abs();
        t.record(dist, dist <= h + 1e-12, || json!({"variances": vars, "analytic": analytic, "grid_argmin": best_s}));
    }
    out.push(t.finish());

    let mut t = Tracker::new("anisotropy_am_gm", 0.0, Worse::Smaller);
    for i in 0..trials {
        let k = rng.random_range(1..=10);
        let vars: Vec<f64> = if i % 4 == 0 {
            vec![rng.random_range(0.05..2.0); k]
        } else {
            (0..k).map(|_| rng.random_range(0.05..2.0)).collect()
        };
        let a = anisotropy_kl(&vars)?;
        let constant = vars.iter().all(|v| *v == vars[0]);
        let ok = a >= 0.0 && (!constant || a == 0.0);
        t.record(a, ok, || json!({"variances": vars, "anisotropy_kl": a}));
    }
    out.push(t.finish());

    out.extend(network_invariants(trials.div_ceil(10), seed)?);
    let fd = gradient_check(seed, trials.div_ceil(100), 1e-5)?;
    out.push(PropertyOutcome {
        name: "gradient_fidelity".into(),
        trials: fd.entries,
        failures: fd.failures,
        worst: Some(fd.max_rel_err),
        tolerance: GRAD_TOL,
        counterexample: fd.worst_entry.filter(|_| fd.failures > 0).map(|w| json!(w)),
    });
    Ok(out)
}

fn perturbed_params(net: &Network, rng: &mut ChaCha8Rng) -> Params {
    let mut p = net.init_params(rng);
    for m in p.0.values_mut() {
        m.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    p
}

fn random_batch(net: &Network, b: usize, rng: &mut ChaCha8Rng) -> Batch {
    let n = net.n();
    let local = Mat::from_vec(b * n, net.in_dim, (0..b * n * net.in_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    let state = Mat::from_vec(b, net.state_dim, (0..b * net.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut actions = Mat::zeros(b * n, 2);
    for r in 0..b * n {
        actions.set(r, rng.random_range(0..2), 1.0);
    }
    Batch { local, state, actions: Some(actions) }
}

fn random_network(rng: &mut ChaCha8Rng, flat: bool) -> Result<Network> {
    let partition = random_partition(rng, 3, 3)?;
    let blocks = build_edge_blocks(&partition);
    let feature = rng.random_range(0.1..1.5);
    let prior = if flat {
        flat_prior(rng.random_range(0.1..1.5), &blocks)?
    } else {
        group_prior(&blocks, rng.random_range(0.1..1.5), rng.random_range(0.1..1.5))?
    }
    .with_feature_scale(feature)?;
    let cfg = NetworkConfig {
        layers: rng.random_range(1..=2),
        msg_dim: rng.random_range(2..=4),
        xib_dim: rng.random_range(1..=3),
        q_hidden: 5,
        ..NetworkConfig::default()
    };
    let n = partition.n();
    Network::new(cfg, partition, &prior, 2 + n, 3)
}

fn network_invariants(nets: usize, seed: u64) -> Result<Vec<PropertyOutcome>> {
    let mut rng = stream(seed, 2);
    let mut kl_path = Tracker::new("network_kl_matches_closed_form", 1e-10, Worse::Larger);
    let mut at_prior = Tracker::new("network_prior_matched_zero_penalty", 1e-10, Worse::Larger);
    let mut pressure = Tracker::new("asymmetric_pressure", 0.0, Worse::Smaller);
    let mut mono = Tracker::new("mixer_monotone", 0.0, Worse::Smaller);

    for case in 0..nets {
        let net = random_network(&mut rng, false)?;
        let p = perturbed_params(&net, &mut rng);
        let b = rng.random_range(1..=3);
        let batch = random_batch(&net, b, &mut rng);
        let f = net.forward(&p, &batch, NoiseSource::Sample(&mut rng))?;
        let (n, n2) = (net.n(), net.n() * net.n());
        let mut worst = 0.0f64;
        let mut nonneg = true;
        for layer in &f.trace.layers {
            for blk in net.blocks().blocks() {
                let mut want = 0.0;
                for s in 0..b {
                    let (mean, lv): (Vec<f64>, Vec<f64>) = blk
                        .edges
                        .iter()
                        .map(|&(i, j)| (layer.mu.data[s * n2 + i * n + j], layer.log_var.data[s * n2 + i * n + j]))
                        .unzip();
                    let scale = net.edge_prior_variances()[blk.edges[0].0 * n + blk.edges[0].1];
                    want += diag_gauss_kl(&DiagGaussian::new(mean, lv)?, &IsotropicPrior::new(scale, blk.size())?)? / b as f64;
                }
                let got = layer.aib[blk.id.0];
                nonneg &= got >= 0.0;
                worst = worst.max((got - want).abs() / want.abs().max(1.0));
            }
        }
        for i in 0..n {
            let mut want = 0.0;
            for s in 0..b {
                let r = s * n + i;
                let post = DiagGaussian::new(f.trace.mu_x.row(r).to_vec(), f.trace.log_var_x.row(r).to_vec())?;
                let fv = vec![net.feature_prior_variance(); net.cfg.xib_dim];
                want += diag_gauss_kl_per_dim(&post, &fv)? / b as f64;
            }
            let got = f.trace.xib_per_agent[i];
            nonneg &= got >= 0.0;
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
        kl_path.record(worst, nonneg && worst <= 1e-10, || json!({"case": case, "seed": seed, "partition": net.partition().sizes()}));

        // encoder outputs pinned to the prior, targets equal to the prediction
        let flat = random_network(&mut rng, true)?;
        let mut p = perturbed_params(&flat, &mut rng);
        let edge_lv = flat.edge_prior_variances()[0].ln();
        let feat_lv = flat.feature_prior_variance().ln();
        for l in 0..flat.cfg.layers {
            p.0.get_mut(&format!("layer{l}.enc2.w")).expect("param").data.iter_mut().for_each(|v| *v = 0.0);
            let bias = p.0.get_mut(&format!("layer{l}.enc2.b")).expect("param");
            bias.data[0] = 0.0;
            bias.data[1] = edge_lv;
        }
        for name in ["xib.mu.w", "xib.lv.w", "xib.mu.b"] {
            p.0.get_mut(name).expect("param").data.iter_mut().for_each(|v| *v = 0.0);
        }
        p.0.get_mut("xib.lv.b").expect("param").data.iter_mut().for_each(|v| *v = feat_lv);
        let batch = random_batch(&flat, b, &mut rng);
        let f = flat.forward(&p, &batch, NoiseSource::Sample(&mut rng))?;
        let y = f.trace.q_tot.clone().expect("actions given").data;
        let noise = f.trace.noise.clone();
        let mut f = flat.forward::<ChaCha8Rng>(&p, &batch, NoiseSource::Replay(&noise))?;
        let w = LossWeights::scaled(flat.blocks(), 0.3, 0.3, 0.0, flat.cfg.xib_dim, 1.0);
        let (loss, report) = flat.assemble_loss(&mut f, &y, &w)?;
        let grads = flat.backward(&f, loss)?;
        let gmax = grads.0.values().map(Mat::max_abs).fold(0.0, f64::max);
        let m = report.total.abs().max(gmax);
        at_prior.record(m, m <= 1e-10, || json!({"case": case, "seed": seed, "total": report.total, "max_grad": gmax}));

        // equal per-edge posteriors under two scales; the regime where the
        // posterior second moment exceeds both prior scales
        let s_small: f64 = rng.random_range(0.01..1.0);
        let s_large = s_small * rng.random_range(1.01..10.0);
        let mu: f64 = rng.random_range(-1.0..1.0);
        let var = (s_large - mu * mu).max(0.0) + rng.random_range(0.0..1.0) + 1e-3;
        let post = DiagGaussian::from_variances(vec![mu], &[var])?;
        let kl_small = diag_gauss_kl(&post, &IsotropicPrior::new(s_small, 1)?)?;
        let kl_large = diag_gauss_kl(&post, &IsotropicPrior::new(s_large, 1)?)?;
        let margin = kl_small - kl_large;
        pressure.record(margin, margin > 0.0, || json!({"mu": mu, "var": var, "s_small": s_small, "s_large": s_large}));

        // mixer weights are the partials of Q_tot in each Q_i
        for _ in 0..100 {
            let probe = random_batch(&net, 1, &mut rng);
            let f = net.forward::<ChaCha8Rng>(&p_for(&net, &mut rng), &probe, NoiseSource::Mean)?;
            let wmin = f.trace.mixer_w.data.iter().cloned().fold(f64::INFINITY, f64::min);
            mono.record(wmin, mixer_weights_are_nonnegative(&f.trace.mixer_w), || json!({"case": case, "seed": seed, "mixer_w": f.trace.mixer_w.data}));
        }
    }
    Ok(vec![kl_path.finish(), at_prior.finish(), pressure.finish(), mono.finish()])
}

fn p_for(net: &Network, rng: &mut ChaCha8Rng) -> Params {
    let mut p = perturbed_params(net, rng);
    // push the mixer far from its init so negative raw weights are common
    for name in ["mix.w.w", "mix.w.b"] {
        p.0.get_mut(name).expect("param").data.iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
    }
    p
}

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradEntry {
    pub network: usize,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub networks: usize,
    pub entries: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst_entry: Option<GradEntry>,
}

/// Central finite differences against the analytic gradient of the full
/// loss on tiny networks (`n = 3`, one layer), with the noise replayed.
/// Relative error is `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn gradient_check(seed: u64, networks: usize, h: f64) -> Result<GradCheck> {
    let mut report = GradCheck { networks, entries: 0, failures: 0, max_rel_err: 0.0, worst_entry: None };
    let partition = GroupPartition::from_sizes(&[2, 1])?;
    let blocks = build_edge_blocks(&partition);
    for k in 0..networks {
        let mut rng = stream(seed, 100 + k as u64);
        let prior = group_prior(&blocks, rng.random_range(0.2..1.0), rng.random_range(0.05..0.5))?
            .with_feature_scale(rng.random_range(0.3..1.0))?;
        let cfg = NetworkConfig { layers: 1, msg_dim: 4, xib_dim: 3, q_hidden: 5, ..NetworkConfig::default() };
        let net = Network::new(cfg, partition.clone(), &prior, 5, 3)?;
        let p = perturbed_params(&net, &mut rng);
        let batch = random_batch(&net, 2, &mut rng);
        let y = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let w = LossWeights::scaled(net.blocks(), 0.05, 0.1, 0.0, 3, 1.0);
        let mut f = net.forward(&p, &batch, NoiseSource::Sample(&mut rng))?;
        let noise = f.trace.noise.clone();
        let (loss, _) = net.assemble_loss(&mut f, &y, &w)?;
        let g = net.backward(&f, loss)?;
        let eval = |pp: &Params| -> Result<f64> { replayed_loss(&net, pp, &batch, &noise, &y, &w) };
        for (name, m) in &p.0 {
            for idx in 0..m.data.len() {
                let mut pp = p.clone();
                pp.0.get_mut(name).expect("param").data[idx] += h;
                let up = eval(&pp)?;
                pp.0.get_mut(name).expect("param").data[idx] -= 2.0 * h;
                let down = eval(&pp)?;
                let fd = (up - down) / (2.0 * h);
                let an = g.get(name).data[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                report.entries += 1;
                if rel > GRAD_TOL || !rel.is_finite() {
                    report.failures += 1;
                }
                if rel > report.max_rel_err || report.worst_entry.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.worst_entry = Some(GradEntry {
                        network: k,
                        param: name.clone(),
                        index: idx,
                        analytic: an,
                        finite_difference: fd,
                        rel_err: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn replayed_loss(net: &Network, p: &Params, batch: &Batch, noise: &Noise, y: &[f64], w: &LossWeights) -> Result<f64> {
    let mut f = net.forward::<ChaCha8Rng>(p, batch, NoiseSource::Replay(noise))?;
    Ok(net.assemble_loss(&mut f, y, w)?.1.total)
}

// ---------------------------------------------------------------- prop2

/// Random zero-mean block-isotropic aggregate over a random partition.
fn random_aggregate(rng: &mut ChaCha8Rng) -> Result<(crate::groups::EdgeBlockIndex, BTreeMap<BlockId, (f64, usize)>)> {
    let partition = random_partition(rng, 4, 4)?;
    let blocks = build_edge_blocks(&partition);
    let shared = rng.random_bool(0.1).then(|| rng.random_range(0.01..2.0));
    let agg = blocks
        .blocks()
        .iter()
        .map(|b| (b.id, (shared.unwrap_or_else(|| rng.random_range(0.01..2.0)), b.size())))
        .collect();
    Ok((blocks, agg))
}

/// Group-prior no-regret: the matched block prior never loses to flat.
fn prop2(trials: usize, seed: u64) -> Result<Vec<PropertyOutcome>> {
    let mut rng = stream(seed, 3);
    let mut regret = Tracker::new("no_regret", -1e-9, Worse::Smaller);
    let mut inclusion = Tracker::new("matched_beats_any_block_prior", -1e-9, Worse::Smaller);
    let mut degenerate = Tracker::new("equal_variances_recover_flat", 0.0, Worse::Larger);
    for _ in 0..trials {
        let (blocks, agg) = random_aggregate(&mut rng)?;
        let vars: BTreeMap<BlockId, Vec<f64>> = agg.iter().map(|(&id, &(v, k))| (id, vec![v; k])).collect();
        let matched = matched_group_prior(&vars)?;
        let flat = flat_prior(rng.random_range(0.01..2.0), &blocks)?;
        let r = bound_gap(&agg, &flat, &matched)?;
        let spread = {
            let v: Vec<f64> = agg.values().map(|x| x.0).collect();
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        let identity = (r.gap - (r.flat_expected_kl - r.group_expected_kl)).abs() <= 1e-12 * r.flat_expected_kl.max(1.0);
        let ok = identity && r.gap >= -1e-9 && (spread <= 1e-6 || r.gap > 0.0);
        let case = || json!({"aggregate": agg.iter().map(|(id, (v, k))| (id.0, v, k)).collect::<Vec<_>>(), "flat_scale": flat.scale(BlockId(0)), "report": r});
        regret.record(r.gap, ok, case);

        let other = group_prior(&blocks, rng.random_range(0.01..2.0), rng.random_range(0.01..2.0))?;
        let r2 = bound_gap(&agg, &other, &matched)?;
        inclusion.record(r2.gap, r2.gap >= -1e-9, || json!({"aggregate": agg.iter().map(|(id, (v, k))| (id.0, v, k)).collect::<Vec<_>>(), "other": other.per_block_scale.values().collect::<Vec<_>>()}));

        if spread == 0.0 {
            let v = agg.values().next().expect("nonempty").0;
            let same = matched.per_block_scale == flat_prior(v, &blocks)?.per_block_scale;
            degenerate.record(if same { 0.0 } else { 1.0 }, same, || json!({"variance": v}));
        }
    }
    Ok(vec![regret.finish(), inclusion.finish(), degenerate.finish()])
}

// ---------------------------------------------------------------- prop3

/// Block additivity: per-block KLs sum to the KL of the concatenation.
fn prop3(trials: usize, seed: u64) -> Result<Vec<PropertyOutcome>> {
    let mut rng = stream(seed, 4);
    let mut t = Tracker::new("blockwise_additivity", 1e-12, Worse::Larger);
    for _ in 0..trials {
        let partition = random_partition(&mut rng, 4, 4)?;
        let blocks = build_edge_blocks(&partition);
        let mut posts = BTreeMap::new();
        let mut scales = BTreeMap::new();
        for b in blocks.blocks() {
            posts.insert(b.id, random_gaussian(&mut rng, b.size())?);
            scales.insert(b.id, rng.random_range(0.01..3.0));
        }
        let total = blockwise_kl(&posts, &scales)?.total;
        let concat = DiagGaussian::concat(posts.values())?;
        let prior_vec: Vec<f64> = posts.iter().flat_map(|(id, p)| std::iter::repeat_n(scales[id], p.dim())).collect();
        let mono = diag_gauss_kl_per_dim(&concat, &prior_vec)?;
        let err = (total - mono).abs() / mono.abs().max(f64::MIN_POSITIVE);
        t.record(err, err <= 1e-12, || json!({"partition": partition.sizes(), "blockwise": total, "monolithic": mono}));
    }
    Ok(vec![t.finish()])
}

// ---------------------------------------------------------------- prop4

/// Relevance bound: limit, monotonicity, and empirical containment.
fn prop4(trials: usize, seed: u64) -> Result<Vec<PropertyOutcome>> {
    let mut rng = stream(seed, 5);
    // at td_loss = 1e-12 the residual h(p) + p ln(K-1) stays below 1e-6 as
    // long as delta_min >= 0.1 and K <= 64
    let mut limit = Tracker::new("fano_limit_is_entropy", 1e-6, Worse::Larger);
    let mut mono = Tracker::new("fano_nonincreasing", 1e-12, Worse::Larger);
    for _ in 0..trials {
        let k = rng.random_range(2..=64usize);
        let delta = rng.random_range(0.1..2.0);
        let h = rng.random_range(0.0..(k as f64).ln());
        let at_zero = fano_relevance_lower_bound(&RelevanceInputs::new(1e-12, delta, k, h)?);
        let gap = (at_zero.bound - h).abs();
        limit.record(gap, gap <= 1e-6 && at_zero.valid, || json!({"k": k, "delta_min": delta, "entropy_y": h, "bound": at_zero.bound}));

        let base = RelevanceInputs::new(0.0, delta, k, h)?;
        let c = base.separation_constant();
        let pmax = base.valid_limit();
        let mut prev = f64::INFINITY;
        let mut worst_rise = f64::NEG_INFINITY;
        for i in 0..1000 {
            let p = pmax * i as f64 / 999.0;
            let b = fano_relevance_lower_bound(&RelevanceInputs::new(p * c, delta, k, h)?).bound;
            worst_rise = worst_rise.max(b - prev);
            prev = b;
        }
        mono.record(worst_rise, worst_rise <= 1e-12, || json!({"k": k, "delta_min": delta, "entropy_y": h}));
    }

    let mut contain = Tracker::new("markov_containment", 1e-12, Worse::Larger);
    let mut exact = Tracker::new("exact_recovery", 0.0, Worse::Larger);
    for i in 0..trials {
        let states = rng.random_range(1..=6);
        let actions = rng.random_range(2..=8);
        let noise = rng.random_range(0.0..1.0);
        let inst = random_relevance_instance(&mut rng, states, actions, noise);
        let r = empirical_relevance_check(&inst.q_table, &inst.q_star, &inst.state_dist)?;
        contain.record(r.measured_pe - r.pe_bound, r.holds, || json!({"q_star": inst.q_star, "q_table": inst.q_table, "state_dist": inst.state_dist, "check": r}));

        // learned table within half the smallest gap of the optimum
        let clean = random_relevance_instance(&mut rng, states, actions, 0.0);
        let gap = empirical_relevance_check(&clean.q_star, &clean.q_star, &clean.state_dist)?.delta_min;
        let q_table: Vec<Vec<f64>> = clean
            .q_star
            .iter()
            .map(|row| row.iter().map(|v| v + rng.random_range(-0.49..0.49) * gap).collect())
            .collect();
        let r = empirical_relevance_check(&q_table, &clean.q_star, &clean.state_dist)?;
        exact.record(r.measured_pe, r.measured_pe == 0.0 && r.holds, || json!({"case": i, "q_star": clean.q_star, "q_table": q_table}));
    }

    let mut greedy = Tracker::new("greedy_is_joint_argmax", 1e-12, Worse::Larger);
    for _ in 0..trials.div_ceil(10) {
        let net = random_network(&mut rng, false)?;
        let p = p_for(&net, &mut rng);
        let mut batch = random_batch(&net, 1, &mut rng);
        batch.actions = None;
        let f = net.forward::<ChaCha8Rng>(&p, &batch, NoiseSource::Mean)?;
        let n = net.n();
        let (q, w, b) = (&f.trace.q, &f.trace.mixer_w, f.trace.mixer_b.data[0]);
        let total = |u: &[usize]| (0..n).map(|i| w.data[i] * q.get(i, u[i])).sum::<f64>() + b;
        let g: Vec<usize> = (0..n).map(|i| usize::from(q.get(i, 1) > q.get(i, 0))).collect();
        let best = (0..1usize << n)
            .map(|code| total(&(0..n).map(|i| (code >> i) & 1).collect::<Vec<_>>()))
            .fold(f64::NEG_INFINITY, f64::max);
        let short = best - total(&g);
        greedy.record(short, short <= 1e-12, || json!({"q": q.data, "mixer_w": w.data, "mixer_b": b}));
    }
    Ok(vec![limit.finish(), mono.finish(), contain.finish(), exact.finish(), greedy.finish()])
}

// ---------------------------------------------------------------- prop5

fn random_curve(rng: &mut ChaCha8Rng) -> UtilityCurve {
    match rng.random_range(0..3) {
        0 => UtilityCurve::Reciprocal { a: rng.random_range(0.1..5.0) },
        1 => UtilityCurve::Exponential { a: rng.random_range(0.1..5.0), b: rng.random_range(0.2..3.0) },
        _ => {
            let mut knots = vec![(0.0, rng.random_range(0.5..5.0))];
            for _ in 0..rng.random_range(1..5) {
                let (r, u) = *knots.last().expect("nonempty");
                knots.push((r + rng.random_range(0.05..1.0), u * rng.random_range(0.0..1.0)));
            }
            UtilityCurve::Tabulated { knots }
        }
    }
}

fn random_channels(rng: &mut ChaCha8Rng) -> Result<Vec<Channel>> {
    (0..rng.random_range(1..=5))
        .map(|i| {
            let kind = if rng.random_bool(0.5) { ChannelKind::Aib } else { ChannelKind::Xib };
            let cap = rng.random_bool(0.2).then(|| rng.random_range(0.1..1.5));
            Channel::new(format!("c{i}"), kind, random_curve(rng), cap)
        })
        .collect()
}

/// One block of the synthetic closed-loop system: the inner problem
/// `min_R 0.5 c (R - free)^2 + lambda (R - target)` answers
/// `R = max(0, free - lambda / c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticBlock {
    pub curvature: f64,
    pub free_rate: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualLoopOutcome {
    /// First iteration at which every rate sat within `rel_tol` of target.
    pub converged_at: Option<usize>,
    pub rates: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub multipliers_stayed_nonnegative: bool,
}

/// Projected dual ascent on [`QuadraticBlock`]s until every measured rate
/// is within `rel_tol` of its target or `max_iters` updates have run.
pub fn quadratic_dual_loop(system: &[QuadraticBlock], step: f64, max_iters: usize, rel_tol: f64) -> Result<DualLoopOutcome> {
    if system.iter().any(|b| !(b.curvature > 0.0)) {
        return contract("curvatures must be positive");
    }
    let targets = system.iter().enumerate().map(|(i, b)| (i, b.target)).collect();
    let mut st = DualState::new(targets, step)?;
    let inner = |st: &DualState<usize>| -> BTreeMap<usize, f64> {
        system
            .iter()
            .enumerate()
            .map(|(i, b)| (i, (b.free_rate - st.multipliers[&i] / b.curvature).max(0.0)))
            .collect()
    };
    let mut nonneg = true;
    let mut converged_at = None;
    let mut rates = inner(&st);
    for it in 0..=max_iters {
        if system.iter().enumerate().all(|(i, b)| (rates[&i] - b.target).abs() <= rel_tol * b.target) {
            converged_at = Some(it);
            break;
        }
        if it == max_iters {
            break;
        }
        st = dual_ascent_step(&st, &rates)?;
        nonneg &= st.multipliers.values().all(|&l| l >= 0.0);
        rates = inner(&st);
    }
    Ok(DualLoopOutcome {
        converged_at,
        rates: rates.into_values().collect(),
        multipliers: st.multipliers.into_values().collect(),
        multipliers_stayed_nonnegative: nonneg,
    })
}

/// Water-filling: grid-oracle equivalence, equalization, budget
/// monotonicity, and the dual-ascent closed loop.
fn prop5(trials: usize, seed: u64) -> Result<Vec<PropertyOutcome>> {
    let mut rng = stream(seed, 6);
    let h = 1e-3;
    let mut oracle = Tracker::new("water_fill_matches_grid", h, Worse::Larger);
    let mut equal = Tracker::new("active_marginal_utilities_equal", 1e-6, Worse::Larger);
    let mut kkt = Tracker::new("kkt_conditions", 1e-6, Worse::Larger);
    let mut budget = Tracker::new("budget_monotone", 1e-9, Worse::Smaller);
    for _ in 0..trials {
        let ch = random_channels(&mut rng)?;
        let b = rng.random_range(0.2..2.0);
        let wf = water_fill(&ch, b, DEFAULT_TOL)?;
        let grid = grid_allocation(&ch, b, h);
        // each grid rate is within one step of a continuous optimum, so the
        // objectives may differ by at most h times the steepest utility
        let slack = h * ch.iter().map(|c| c.utility(0.0)).sum::<f64>();
        let diff = wf.objective(&ch) - grid.objective;
        let case = || json!({"channels": ch, "budget": b, "water_fill": wf, "grid_rates": grid.rates, "grid_objective": grid.objective});
        oracle.record(diff.abs() / slack.max(f64::MIN_POSITIVE) * h, diff >= -slack && diff <= slack, case);

        let active: Vec<f64> = ch
            .iter()
            .zip(&wf.rates)
            .filter(|(c, (_, r))| *r > 1e-9 && *r < c.cap() - 1e-9)
            .map(|(c, (_, r))| c.utility(*r))
            .collect();
        let spread = active.iter().map(|u| (u - wf.water_level).abs()).fold(0.0, f64::max);
        equal.record(spread, spread <= 1e-6, || json!({"channels": ch, "budget": b, "water_fill": wf}));

        let rep = verify_kkt(&ch, &wf, 1e-6);
        kkt.record(rep.violations.len() as f64, rep.ok, || json!({"channels": ch, "budget": b, "violations": rep.violations}));

        let more = water_fill(&ch, b * rng.random_range(1.0..2.0), DEFAULT_TOL)?;
        let drop = wf.rates.iter().zip(&more.rates).map(|((_, a), (_, c))| c - a).fold(f64::INFINITY, f64::min);
        budget.record(drop, drop >= -1e-9, || json!({"channels": ch, "small": wf, "large": more}));
    }

    let mut dual = Tracker::new("dual_ascent_closed_loop", 500.0, Worse::Larger);
    for _ in 0..trials {
        let system: Vec<QuadraticBlock> = (0..rng.random_range(2..=5))
            .map(|_| {
                let free_rate = rng.random_range(1.0..5.0);
                QuadraticBlock { curvature: rng.random_range(0.5..4.0), free_rate, target: free_rate * rng.random_range(0.1..0.9) }
            })
            .collect();
        let step = 0.5 * system.iter().map(|b| b.curvature).fold(f64::INFINITY, f64::min);
        let r = quadratic_dual_loop(&system, step, 500, 0.05)?;
        let iters = r.converged_at.map_or(f64::INFINITY, |i| i as f64);
        dual.record(iters, r.converged_at.is_some() && r.multipliers_stayed_nonnegative, || json!({"system": system, "step": step, "outcome": r}));
    }
    Ok(vec![oracle.finish(), equal.finish(), kkt.finish(), budget.finish(), dual.finish()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass_and_are_deterministic() {
        for s in SUITES {
            let a = run(s, Some(20), 3).unwrap();
            let b = run(s, Some(20), 3).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            for p in &a[0].properties {
                assert!(p.passed(), "{s}/{}: {:?}", p.name, p.counterexample);
            }
        }
    }

    #[test]
    fn unknown_suite_and_zero_trials_rejected() {
        assert!(run("prop9", None, 0).is_err());
        assert!(run("prop1", Some(0), 0).is_err());
        assert_eq!(run("all", Some(1), 0).unwrap().len(), 5);
    }

    #[test]
    fn failing_property_keeps_first_counterexample() {
        let mut t = Tracker::new("x", 0.0, Worse::Larger);
        t.record(1.0, true, || json!(1));
        t.record(3.0, false, || json!("first"));
        t.record(2.0, false, || json!("second"));
        let o = t.finish();
        assert_eq!(o.failures, 2);
        assert_eq!(o.worst, Some(3.0));
        assert_eq!(o.counterexample, Some(json!("first")));
        assert!(!o.passed());
    }

    #[test]
    fn dual_loop_reports_divergent_step() {
        let sys = [QuadraticBlock { curvature: 1.0, free_rate: 2.0, target: 1.0 }];
        assert!(quadratic_dual_loop(&sys, 0.5, 500, 0.05).unwrap().converged_at.is_some());
        // step far past 2c oscillates without settling
        assert!(quadratic_dual_loop(&sys, 5.0, 500, 0.05).unwrap().converged_at.is_none());
    }
}
