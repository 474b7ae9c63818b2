//! Flat and group-aligned block-diagonal priors over edge latents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::groups::{BlockKind, EdgeBlockIndex};
use crate::kl::{gauss_zero_mean_kl, matched_isotropic_scale, BlockId};

/// How a configured prior scale should be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleUnits {
    /// The number is a standard deviation; it is squared.
    Std,
    /// The number already is a variance.
    #[default]
    Var,
}

impl ScaleUnits {
    pub fn to_variance(self, value: f64) -> f64 {
        match self {
            ScaleUnits::Std => value * value,
            ScaleUnits::Var => value,
        }
    }
}

/// Zero-mean block-diagonal prior: one variance per edge block plus a
/// feature-level variance for the message encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPrior {
    pub per_block_scale: BTreeMap<BlockId, f64>,
    pub feature_scale: f64,
}

impl BlockPrior {
    pub fn scale(&self, id: BlockId) -> f64 {
        self.per_block_scale[&id]
    }

    pub fn with_feature_scale(mut self, feature_scale: f64) -> Result<Self> {
        check_scale(feature_scale, "feature scale")?;
        self.feature_scale = feature_scale;
        Ok(self)
    }

    /// Per-edge prior variance, indexed by flat edge id.
    pub fn edge_scales(&self, blocks: &EdgeBlockIndex) -> Vec<f64> {
        let n = blocks.n();
        (0..n * n).map(|e| self.scale(blocks.block_of_edge(e))).collect()
    }
}

fn check_scale(v: f64, what: &str) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return contract(format!("{what} must be positive and finite, got {v}"));
    }
    Ok(())
}

pub fn flat_prior(sigma0_sq: f64, blocks: &EdgeBlockIndex) -> Result<BlockPrior> {
    group_prior(blocks, sigma0_sq, sigma0_sq)
}

pub fn group_prior(
    blocks: &EdgeBlockIndex,
    sigma_intra_sq: f64,
    sigma_cross_sq: f64,
) -> Result<BlockPrior> {
    check_scale(sigma_intra_sq, "intra-group scale")?;
    check_scale(sigma_cross_sq, "cross-group scale")?;
    let per_block_scale = blocks
        .blocks()
        .iter()
        .map(|b| {
            let s = match b.kind {
                BlockKind::Intra => sigma_intra_sq,
                BlockKind::Cross => sigma_cross_sq,
            };
            (b.id, s)
        })
        .collect();
    Ok(BlockPrior { per_block_scale, feature_scale: 1.0 })
}

pub fn matched_group_prior(block_variances: &BTreeMap<BlockId, Vec<f64>>) -> Result<BlockPrior> {
    if block_variances.is_empty() {
        return contract("no blocks given");
    }
    let per_block_scale = block_variances
        .iter()
        .map(|(&id, v)| Ok((id, matched_isotropic_scale(v)?)))
        .collect::<Result<_>>()?;
    Ok(BlockPrior { per_block_scale, feature_scale: 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundGapReport {
    pub flat_expected_kl: f64,
    pub group_expected_kl: f64,
    pub gap: f64,
    pub per_block_flat: Vec<(BlockId, f64)>,
    pub per_block_group: Vec<(BlockId, f64)>,
}

/// Prior-mismatch KL of a zero-mean block-isotropic aggregate under a flat
/// and a group prior. `aggregate` maps each block to `(variance, size)`.
pub fn bound_gap(
    aggregate: &BTreeMap<BlockId, (f64, usize)>,
    flat: &BlockPrior,
    group: &BlockPrior,
) -> Result<BoundGapReport> {
    let same_keys = |p: &BlockPrior| {
        p.per_block_scale.len() == aggregate.len()
            && p.per_block_scale.keys().all(|k| aggregate.contains_key(k))
    };
    if !same_keys(flat) || !same_keys(group) {
        return contract("aggregate and priors cover different block sets");
    }
    let mut per_block_flat = Vec::with_capacity(aggregate.len());
    let mut per_block_group = Vec::with_capacity(aggregate.len());
    for (&id, &(var, k)) in aggregate {
        per_block_flat.push((id, gauss_zero_mean_kl(var, k, flat.scale(id))?));
        per_block_group.push((id, gauss_zero_mean_kl(var, k, group.scale(id))?));
    }
    let flat_expected_kl: f64 = per_block_flat.iter().map(|x| x.1).sum();
    let group_expected_kl: f64 = per_block_group.iter().map(|x| x.1).sum();
    Ok(BoundGapReport {
        flat_expected_kl,
        group_expected_kl,
        gap: flat_expected_kl - group_expected_kl,
        per_block_flat,
        per_block_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{build_edge_blocks, GroupPartition};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ten_agents() -> EdgeBlockIndex {
        build_edge_blocks(&GroupPartition::from_sizes(&[4, 6]).unwrap())
    }

    fn aggregate(blocks: &EdgeBlockIndex, vars: [f64; 4]) -> BTreeMap<BlockId, (f64, usize)> {
        blocks.blocks().iter().map(|b| (b.id, (vars[b.id.0], b.size()))).collect()
    }

    // block order is (g1,g1), (g1,g2), (g2,g1), (g2,g2)
    const PART_ONE: [f64; 4] = [0.9, 0.3, 0.3, 0.8];

    #[test]
    fn flat_and_group_shapes() {
        let blocks = ten_agents();
        let flat = flat_prior(0.6, &blocks).unwrap();
        assert!(flat.per_block_scale.values().all(|&s| s == 0.6));
        let g = group_prior(&blocks, 0.6, 0.6).unwrap();
        assert_eq!(g, flat);
        let hib = group_prior(&blocks, 0.1, 0.01).unwrap();
        assert_eq!(hib.scale(BlockId(0)), 0.1);
        assert_eq!(hib.scale(BlockId(1)), 0.01);
        let reversed = group_prior(&blocks, 0.01, 0.1).unwrap();
        assert_eq!(reversed.scale(BlockId(3)), 0.01);
        assert!(flat_prior(0.0, &blocks).is_err());
        assert!(group_prior(&blocks, 1.0, -1.0).is_err());
        assert!(flat.with_feature_scale(0.0).is_err());
    }

    #[test]
    fn units_conversion() {
        assert_eq!(ScaleUnits::Std.to_variance(0.1), 0.1 * 0.1);
        assert_eq!(ScaleUnits::Var.to_variance(0.1), 0.1);
    }

    #[test]
    fn worked_example_flat_vs_matched() {
        let blocks = ten_agents();
        let agg = aggregate(&blocks, PART_ONE);
        let flat = flat_prior(0.6, &blocks).unwrap();
        let vars: BTreeMap<_, _> = blocks
            .blocks()
            .iter()
            .map(|b| (b.id, vec![PART_ONE[b.id.0]; b.size()]))
            .collect();
        let matched = matched_group_prior(&vars).unwrap();
        for (id, s) in &matched.per_block_scale {
            assert!((s - PART_ONE[id.0]).abs() < 1e-12);
        }
        let r = bound_gap(&agg, &flat, &matched).unwrap();
        assert!((r.flat_expected_kl - 6.213534164441315).abs() < 1e-12);
        assert!(r.group_expected_kl.abs() < 1e-12);
        assert!((r.gap - r.flat_expected_kl).abs() < 1e-12);

        let sub = group_prior(&blocks, 0.7, 0.4).unwrap();
        let r = bound_gap(&agg, &flat, &sub).unwrap();
        assert!((r.group_expected_kl - 1.3474321024969433).abs() < 1e-12);
        assert!(1.0 - r.group_expected_kl / r.flat_expected_kl > 0.78);
    }

    #[test]
    fn isotropic_aggregate_has_no_gap() {
        let blocks = ten_agents();
        let agg = aggregate(&blocks, [0.5; 4]);
        let flat = flat_prior(0.5, &blocks).unwrap();
        let vars = blocks.blocks().iter().map(|b| (b.id, vec![0.5; b.size()])).collect();
        let matched = matched_group_prior(&vars).unwrap();
        assert_eq!(matched.per_block_scale, flat.per_block_scale);
        assert_eq!(bound_gap(&agg, &flat, &matched).unwrap().gap, 0.0);
    }

    #[test]
    fn block_mismatch_rejected() {
        let blocks = ten_agents();
        let mut agg = aggregate(&blocks, PART_ONE);
        agg.remove(&BlockId(2));
        let flat = flat_prior(0.6, &blocks).unwrap();
        assert!(bound_gap(&agg, &flat, &flat).is_err());
    }

    #[test]
    fn matched_prior_is_mean_of_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vars: BTreeMap<_, _> = (0..5)
            .map(|b| (BlockId(b), (0..7).map(|_| rng.random_range(0.01..2.0)).collect::<Vec<f64>>()))
            .collect();
        let p = matched_group_prior(&vars).unwrap();
        for (id, v) in &vars {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!((p.scale(*id) - mean).abs() < 1e-15);
        }
        assert!(matched_group_prior(&BTreeMap::new()).is_err());
    }

    #[test]
    fn matched_beats_any_block_prior() {
        let blocks = ten_agents();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let vars = [0; 4].map(|_| rng.random_range(0.01..3.0));
            let agg = aggregate(&blocks, vars);
            let matched = matched_group_prior(
                &blocks.blocks().iter().map(|b| (b.id, vec![vars[b.id.0]])).collect(),
            )
            .unwrap();
            let other = group_prior(&blocks, rng.random_range(0.01..3.0), rng.random_range(0.01..3.0)).unwrap();
            let r = bound_gap(&agg, &other, &matched).unwrap();
            assert!(r.gap >= -1e-9);
            assert!((r.gap - (r.flat_expected_kl - r.group_expected_kl)).abs() < 1e-12);
        }
    }
}
