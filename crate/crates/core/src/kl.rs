//! Closed-form Gaussian KL divergences.
//!
//! Everything here is in nats. Posteriors are diagonal Gaussians stored as
//! `(mean, log_var)`; priors are zero-mean and isotropic (per block).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Variances are floored here before taking logs.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Identifier of an edge block (index into an [`crate::groups::EdgeBlockIndex`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub usize);

/// Diagonal Gaussian `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return contract("diagonal gaussian needs dimension >= 1");
        }
        if mean.len() != log_var.len() {
            return contract(format!(
                "mean has {} entries but log_var has {}",
                mean.len(),
                log_var.len()
            ));
        }
        if let Some(i) = log_var.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("log_var[{i}] is not finite")));
        }
        if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("mean[{i}] is not finite")));
        }
        Ok(Self { mean, log_var })
    }

    /// Builds from variances instead of log-variances.
    pub fn from_variances(mean: Vec<f64>, var: &[f64]) -> Result<Self> {
        if let Some(i) = var.iter().position(|v| !(*v > 0.0)) {
            return contract(format!("variance[{i}] must be positive"));
        }
        Self::new(mean, var.iter().map(|v| v.ln()).collect())
    }

    /// Isotropic `N(0, scale I)` of dimension `dim`.
    pub fn standard(dim: usize, scale: f64) -> Result<Self> {
        Self::from_variances(vec![0.0; dim], &vec![scale; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self, d: usize) -> f64 {
        self.log_var[d].exp().max(VARIANCE_FLOOR)
    }

    /// Concatenates several Gaussians into one of summed dimension.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a DiagGaussian>) -> Result<Self> {
        let mut mean = Vec::new();
        let mut log_var = Vec::new();
        for p in parts {
            mean.extend_from_slice(&p.mean);
            log_var.extend_from_slice(&p.log_var);
        }
        Self::new(mean, log_var)
    }
}

/// Zero-mean isotropic prior `N(0, scale I_dim)`; `scale` is a variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicPrior {
    pub scale: f64,
    pub dim: usize,
}

impl IsotropicPrior {
    pub fn new(scale: f64, dim: usize) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return contract(format!("prior scale must be positive and finite, got {scale}"));
        }
        if dim == 0 {
            return contract("prior dimension must be >= 1");
        }
        Ok(Self { scale, dim })
    }
}

/// Per-block KL contributions plus their total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlBreakdown {
    pub per_block: Vec<(BlockId, f64)>,
    pub total: f64,
}

impl KlBreakdown {
    pub fn from_blocks(per_block: Vec<(BlockId, f64)>) -> Self {
        let total = per_block.iter().map(|(_, v)| v).sum();
        Self { per_block, total }
    }

    pub fn get(&self, id: BlockId) -> Option<f64> {
        self.per_block.iter().find(|(b, _)| *b == id).map(|(_, v)| *v)
    }
}

#[inline]
fn kl_term(mean: f64, var: f64, prior_var: f64) -> f64 {
    0.5 * ((var + mean * mean) / prior_var - 1.0 + (prior_var / var).ln())
}

/// `KL(p || N(0, prior.scale I))`.
pub fn diag_gauss_kl(p: &DiagGaussian, prior: &IsotropicPrior) -> Result<f64> {
    if p.dim() != prior.dim {
        return contract(format!(
            "posterior dimension {} does not match prior dimension {}",
            p.dim(),
            prior.dim
        ));
    }
    Ok((0..p.dim())
        .map(|d| kl_term(p.mean[d], p.variance(d), prior.scale))
        .sum())
}

/// `KL(p || N(0, diag(prior_var)))` with one prior variance per dimension.
pub fn diag_gauss_kl_per_dim(p: &DiagGaussian, prior_var: &[f64]) -> Result<f64> {
    if p.dim() != prior_var.len() {
        return contract(format!(
            "posterior dimension {} does not match {} prior variances",
            p.dim(),
            prior_var.len()
        ));
    }
    if let Some(i) = prior_var.iter().position(|v| !(*v > 0.0)) {
        return contract(format!("prior variance[{i}] must be positive"));
    }
    Ok((0..p.dim())
        .map(|d| kl_term(p.mean[d], p.variance(d), prior_var[d]))
        .sum())
}

/// Blockwise KL against a block-diagonal isotropic-per-block prior.
///
/// `prior_scales[b]` is the prior variance of block `b`; every block must
/// have a posterior.
pub fn blockwise_kl(
    posteriors: &BTreeMap<BlockId, DiagGaussian>,
    prior_scales: &BTreeMap<BlockId, f64>,
) -> Result<KlBreakdown> {
    let mut per_block = Vec::with_capacity(prior_scales.len());
    for (&id, &scale) in prior_scales {
        let Some(post) = posteriors.get(&id) else {
            return contract(format!("no posterior for block {}", id.0));
        };
        let prior = IsotropicPrior::new(scale, post.dim())?;
        per_block.push((id, diag_gauss_kl(post, &prior)?));
    }
    Ok(KlBreakdown::from_blocks(per_block))
}

fn check_positive(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return contract(format!("{what}: empty input"));
    }
    if let Some(i) = values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return contract(format!("{what}: entry {i} is not a positive finite number"));
    }
    Ok(())
}

/// KL-minimising isotropic scale for a block: the mean of its variances.
pub fn matched_isotropic_scale(block_variances: &[f64]) -> Result<f64> {
    check_positive(block_variances, "matched_isotropic_scale")?;
    // exact on constant blocks, where summation would drift by an ulp
    if block_variances.iter().all(|v| *v == block_variances[0]) {
        return Ok(block_variances[0]);
    }
    Ok(block_variances.iter().sum::<f64>() / block_variances.len() as f64)
}

/// Residual KL left after matching the isotropic scale: `(k/2) ln(AM/GM)`.
pub fn anisotropy_kl(block_variances: &[f64]) -> Result<f64> {
    check_positive(block_variances, "anisotropy_kl")?;
    if block_variances.iter().all(|v| *v == block_variances[0]) {
        return Ok(0.0);
    }
    let k = block_variances.len() as f64;
    let am = block_variances.iter().sum::<f64>() / k;
    let log_gm = block_variances.iter().map(|v| v.ln()).sum::<f64>() / k;
    // max(0) absorbs the last-ulp negative result on constant input
    Ok((0.5 * k * (am.ln() - log_gm)).max(0.0))
}

/// KL between zero-mean isotropic Gaussians of dimension `k`.
pub fn gauss_zero_mean_kl(block_var: f64, k: usize, prior_var: f64) -> Result<f64> {
    if !(block_var > 0.0) || !(prior_var > 0.0) {
        return contract(format!(
            "variances must be positive (block {block_var}, prior {prior_var})"
        ));
    }
    let r = block_var / prior_var;
    Ok(0.5 * k as f64 * (r - 1.0 - r.ln()))
}

/// Result of [`mi_kl_decomposition`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiKlDecomposition {
    pub mi_estimate: f64,
    pub prior_gap: f64,
    pub expected_kl: f64,
}

/// Splits `E_i KL(P_i || Q)` into `I + KL(P_bar || Q)`.
///
/// `P_bar` is the moment-matched Gaussian of the weighted mixture.
pub fn mi_kl_decomposition(
    ensemble: &[(f64, DiagGaussian)],
    prior: &IsotropicPrior,
) -> Result<MiKlDecomposition> {
    if ensemble.is_empty() {
        return contract("empty ensemble");
    }
    let wsum: f64 = ensemble.iter().map(|(w, _)| w).sum();
    if ensemble.iter().any(|(w, _)| !(*w >= 0.0)) || (wsum - 1.0).abs() > 1e-9 {
        return contract(format!("weights must be nonnegative and sum to 1 (sum {wsum})"));
    }
    let dim = prior.dim;
    let mut expected_kl = 0.0;
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for (w, p) in ensemble {
        expected_kl += w * diag_gauss_kl(p, prior)?;
        for d in 0..dim {
            let mu = p.mean[d];
            m1[d] += w * mu;
            m2[d] += w * (p.variance(d) + mu * mu);
        }
    }
    let var: Vec<f64> = (0..dim)
        .map(|d| (m2[d] - m1[d] * m1[d]).max(VARIANCE_FLOOR))
        .collect();
    let aggregate = DiagGaussian::from_variances(m1, &var)?;
    let prior_gap = diag_gauss_kl(&aggregate, prior)?;
    Ok(MiKlDecomposition {
        mi_estimate: expected_kl - prior_gap,
        prior_gap,
        expected_kl,
    })
}
