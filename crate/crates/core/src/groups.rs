//! Agent partitions and the edge blocks they induce.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::kl::BlockId;

/// Assignment of `n` agents to `m` nonempty groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    assignment: Vec<usize>,
    m: usize,
}

impl GroupPartition {
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return contract("partition needs at least one agent");
        }
        let m = assignment.iter().max().map_or(0, |g| g + 1);
        let mut sizes = vec![0usize; m];
        for &g in &assignment {
            sizes[g] += 1;
        }
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return contract(format!("group {g} is empty"));
        }
        Ok(Self { assignment, m })
    }

    /// Consecutive groups of the given sizes: `[2, 3]` puts agents 0..2 in
    /// group 0 and 2..5 in group 1.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.contains(&0) {
            return contract("group sizes must be positive");
        }
        let assignment = sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &s)| std::iter::repeat_n(g, s))
            .collect();
        Self::new(assignment)
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn group_of(&self, agent: usize) -> usize {
        self.assignment[agent]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == group).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.m).map(|g| self.members(g).len()).collect()
    }

    /// Parses the plain-text partition format: one `agent_id group_id` pair
    /// per line, `#` starts a comment. Agent ids must be exactly `0..n`;
    /// group labels may be any nonnegative integers and are relabelled
    /// densely in ascending order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, u64)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: lineno + 1, msg };
            let mut fields = line.split_whitespace();
            let (Some(a), Some(g), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(err(format!("expected `agent_id group_id`, got {line:?}")));
            };
            let agent: usize = a.parse().map_err(|_| err(format!("bad agent id {a:?}")))?;
            let group: u64 = g.parse().map_err(|_| err(format!("bad group id {g:?}")))?;
            pairs.push((agent, group));
        }
        if pairs.is_empty() {
            return contract("partition file lists no agents");
        }
        let n = pairs.len();
        let mut slots: Vec<Option<u64>> = vec![None; n];
        for &(agent, group) in &pairs {
            if agent >= n {
                return contract(format!("agent id {agent} out of range for {n} agents"));
            }
            if slots[agent].replace(group).is_some() {
                return contract(format!("agent id {agent} listed twice"));
            }
        }
        let mut labels: Vec<u64> = pairs.iter().map(|p| p.1).collect();
        labels.sort_unstable();
        labels.dedup();
        let assignment = slots
            .into_iter()
            .map(|s| labels.binary_search(&s.expect("every slot filled")).expect("label present"))
            .collect();
        Self::new(assignment)
    }
}

impl fmt::Display for GroupPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.assignment.iter().enumerate() {
            writeln!(f, "{i} {g}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Intra,
    Cross,
}

/// One `g_src x g_dst` block of directed edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeBlock {
    pub id: BlockId,
    pub src_group: usize,
    pub dst_group: usize,
    pub kind: BlockKind,
    pub edges: Vec<(usize, usize)>,
}

impl EdgeBlock {
    pub fn size(&self) -> usize {
        self.edges.len()
    }
}

/// The `m^2` edge blocks over all `n^2` ordered pairs (self-edges included).
///
/// Block `a * m + b` holds edges from group `a` to group `b`. Edge `(i, j)`
/// has flat index `i * n + j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeBlockIndex {
    n: usize,
    m: usize,
    blocks: Vec<EdgeBlock>,
    edge_block: Vec<BlockId>,
}

impl EdgeBlockIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn blocks(&self) -> &[EdgeBlock] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &EdgeBlock {
        &self.blocks[id.0]
    }

    pub fn block_between(&self, src_group: usize, dst_group: usize) -> &EdgeBlock {
        &self.blocks[src_group * self.m + dst_group]
    }

    /// Block of flat edge index `e = i * n + j`.
    pub fn block_of_edge(&self, e: usize) -> BlockId {
        self.edge_block[e]
    }

    pub fn kind_of_edge(&self, e: usize) -> BlockKind {
        self.blocks[self.edge_block[e].0].kind
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(EdgeBlock::size).collect()
    }

    /// Total number of edges of the given kind.
    pub fn kind_size(&self, kind: BlockKind) -> usize {
        self.blocks.iter().filter(|b| b.kind == kind).map(EdgeBlock::size).sum()
    }
}

pub fn build_edge_blocks(p: &GroupPartition) -> EdgeBlockIndex {
    let (n, m) = (p.n(), p.m());
    let mut blocks: Vec<EdgeBlock> = (0..m * m)
        .map(|id| {
            let (a, b) = (id / m, id % m);
            EdgeBlock {
                id: BlockId(id),
                src_group: a,
                dst_group: b,
                kind: if a == b { BlockKind::Intra } else { BlockKind::Cross },
                edges: Vec::new(),
            }
        })
        .collect();
    let mut edge_block = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let id = p.group_of(i) * m + p.group_of(j);
            blocks[id].edges.push((i, j));
            edge_block.push(BlockId(id));
        }
    }
    EdgeBlockIndex { n, m, blocks, edge_block }
}

/// `M_ij = 1` iff agents `i` and `j` share a group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMask {
    n: usize,
    mask: Vec<u8>,
}

impl GroupMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.mask[i * self.n + j]
    }

    /// Row-major `vec(M)`.
    pub fn vec(&self) -> Vec<f64> {
        self.mask.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn ones(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

pub fn group_mask(p: &GroupPartition) -> GroupMask {
    let n = p.n();
    let mask = (0..n * n)
        .map(|e| u8::from(p.group_of(e / n) == p.group_of(e % n)))
        .collect();
    GroupMask { n, mask }
}

/// Rank-one-plus-diagonal edge covariance `alpha v v^T + eps I` with
/// `v = vec(M)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCovariance {
    pub alpha: f64,
    pub eps: f64,
    pub direction: Vec<f64>,
}

impl EdgeCovariance {
    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    /// `alpha * vec(M)`, the scaled low-rank factor.
    pub fn scaled_direction(&self) -> Vec<f64> {
        self.direction.iter().map(|v| self.alpha * v).collect()
    }

    pub fn entry(&self, a: usize, b: usize) -> f64 {
        let diag = if a == b { self.eps } else { 0.0 };
        self.alpha * self.direction[a] * self.direction[b] + diag
    }

    /// Exact draw `mean + sqrt(alpha) v g0 + sqrt(eps) g`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if mean.len() != self.dim() {
            return contract(format!(
                "mean has {} entries, covariance is {}-dimensional",
                mean.len(),
                self.dim()
            ));
        }
        let shared: f64 = rng.sample(StandardNormal);
        let (sa, se) = (self.alpha.sqrt(), self.eps.sqrt());
        Ok(mean
            .iter()
            .zip(&self.direction)
            .map(|(mu, v)| {
                let own: f64 = rng.sample(StandardNormal);
                mu + sa * v * shared + se * own
            })
            .collect())
    }
}

pub fn gacg_edge_covariance(mask: &GroupMask, alpha: f64, eps: f64) -> Result<EdgeCovariance> {
    if !(alpha > 0.0) || !(eps > 0.0) {
        return contract(format!("alpha ({alpha}) and eps ({eps}) must be positive"));
    }
    Ok(EdgeCovariance { alpha, eps, direction: mask.vec() })
}

/// Scaled dot-product scores `e_i . e_j / sqrt(d)`, row-major `n x n`.
pub fn pair_scores(obs_embed: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = obs_embed.first() else {
        return contract("no embeddings");
    };
    let d = first.len();
    if d == 0 || obs_embed.iter().any(|e| e.len() != d) {
        return contract("embeddings must share a positive dimension");
    }
    let n = obs_embed.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = obs_embed[i].iter().zip(&obs_embed[j]).map(|(a, b)| a * b).sum::<f64>() * scale;
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn micro_example_block_sizes() {
        let p = GroupPartition::from_sizes(&[2, 3]).unwrap();
        let idx = build_edge_blocks(&p);
        assert_eq!(idx.block_between(0, 0).size(), 4);
        assert_eq!(idx.block_between(1, 1).size(), 9);
        assert_eq!(idx.block_between(0, 1).size(), 6);
        assert_eq!(idx.block_between(1, 0).size(), 6);
        assert_eq!(idx.block_between(0, 1).kind, BlockKind::Cross);
    }

    #[test]
    fn ten_agent_block_sizes() {
        let p = GroupPartition::from_sizes(&[4, 6]).unwrap();
        let idx = build_edge_blocks(&p);
        assert_eq!(idx.block_between(0, 0).size(), 16);
        assert_eq!(idx.block_between(1, 1).size(), 36);
        assert_eq!(idx.block_between(0, 1).size(), 24);
        assert_eq!(idx.block_between(1, 0).size(), 24);
        assert_eq!(idx.sizes().iter().sum::<usize>(), 100);
        let mask = group_mask(&p);
        assert_eq!(mask.ones(), idx.kind_size(BlockKind::Intra));
        assert_eq!(mask.ones(), 16 + 36);
    }

    #[test]
    fn single_group_is_one_block() {
        let p = GroupPartition::new(vec![0; 5]).unwrap();
        let idx = build_edge_blocks(&p);
        assert_eq!(idx.blocks().len(), 1);
        assert_eq!(idx.blocks()[0].size(), 25);
        assert!(group_mask(&p).vec().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn singleton_groups_give_identity_mask() {
        let p = GroupPartition::new(vec![0, 1]).unwrap();
        assert_eq!(group_mask(&p).vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_group_rejected() {
        assert!(GroupPartition::new(vec![0, 2]).is_err());
        assert!(GroupPartition::new(vec![]).is_err());
        assert!(GroupPartition::from_sizes(&[2, 0]).is_err());
    }

    #[test]
    fn parse_partition_file() {
        let p = GroupPartition::parse("# two teams\n0 7\n1 7\n2 3 # trailing\n\n3 3\n").unwrap();
        assert_eq!(p.assignment(), &[1, 1, 0, 0]);
        assert!(matches!(GroupPartition::parse("0 1\n0 1\n"), Err(Error::Contract(_))));
        assert!(matches!(GroupPartition::parse("0 x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(GroupPartition::parse("0 1 2\n"), Err(Error::Parse { .. })));
        assert!(GroupPartition::parse("5 0\n").is_err());
        assert!(GroupPartition::parse("# nothing\n").is_err());
    }

    #[test]
    fn display_round_trips() {
        let p = GroupPartition::from_sizes(&[3, 1, 2]).unwrap();
        assert_eq!(GroupPartition::parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn covariance_rejects_nonpositive() {
        let mask = group_mask(&GroupPartition::from_sizes(&[2]).unwrap());
        assert!(gacg_edge_covariance(&mask, 0.0, 1.0).is_err());
        assert!(gacg_edge_covariance(&mask, 1.0, -1.0).is_err());
    }

    #[test]
    fn singleton_groups_correlate_only_self_edges() {
        let p = GroupPartition::new(vec![0, 1, 2]).unwrap();
        let cov = gacg_edge_covariance(&group_mask(&p), 0.5, 0.1).unwrap();
        for a in 0..9 {
            for b in 0..9 {
                let self_a = a / 3 == a % 3;
                let self_b = b / 3 == b % 3;
                if a != b && !(self_a && self_b) {
                    assert_eq!(cov.entry(a, b), 0.0);
                }
            }
        }
        assert_eq!(cov.entry(0, 4), 0.5);
    }

    #[test]
    fn sampler_covariance_monte_carlo() {
        let p = GroupPartition::from_sizes(&[1, 2]).unwrap();
        let (alpha, eps) = (0.7, 0.3);
        let cov = gacg_edge_covariance(&group_mask(&p), alpha, eps).unwrap();
        let d = cov.dim();
        let mean: Vec<f64> = (0..d).map(|i| i as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; d * d];
        let mut samples = Vec::with_capacity(draws);
        for _ in 0..draws {
            let z = cov.sample(&mean, &mut rng).unwrap();
            for a in 0..d {
                s1[a] += z[a];
            }
            samples.push(z);
        }
        let mu: Vec<f64> = s1.iter().map(|v| v / draws as f64).collect();
        for z in &samples {
            for a in 0..d {
                for b in 0..d {
                    s2[a * d + b] += (z[a] - mu[a]) * (z[b] - mu[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                let emp = s2[a * d + b] / draws as f64;
                let truth = cov.entry(a, b);
                // standard error of a Gaussian sample covariance
                let se = ((cov.entry(a, a) * cov.entry(b, b) + truth * truth) / draws as f64).sqrt();
                assert!((emp - truth).abs() < 3.0 * se + 1e-12, "({a},{b}) {emp} vs {truth}");
            }
        }
    }

    #[test]
    fn pair_score_cases() {
        let same = vec![vec![1.0, 2.0]; 3];
        let s = pair_scores(&same).unwrap();
        assert!(s.iter().all(|v| (v - s[0]).abs() < 1e-15));
        let orth = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = pair_scores(&orth).unwrap();
        assert_eq!((s[1], s[2]), (0.0, 0.0));
        assert!(pair_scores(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn pair_scores_match_dot_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s = pair_scores(&emb).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut dot = 0.0;
                for k in 0..4 {
                    dot += emb[i][k] * emb[j][k];
                }
                assert!((s[i * 5 + j] - dot / 2.0).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn blocks_tile_the_grid(assignment in proptest::collection::vec(0usize..4, 1..9)) {
            // relabel so every group is nonempty
            let mut labels = assignment.clone();
            labels.sort_unstable();
            labels.dedup();
            let dense: Vec<usize> = assignment.iter().map(|g| labels.binary_search(g).unwrap()).collect();
            let p = GroupPartition::new(dense).unwrap();
            let n = p.n();
            let idx = build_edge_blocks(&p);
            prop_assert_eq!(idx.blocks().len(), p.m() * p.m());
            let mut all: Vec<(usize, usize)> = idx.blocks().iter().flat_map(|b| b.edges.clone()).collect();
            all.sort_unstable();
            let grid: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
            prop_assert_eq!(all, grid);
            let sizes = p.sizes();
            for b in idx.blocks() {
                prop_assert_eq!(b.size(), sizes[b.src_group] * sizes[b.dst_group]);
                prop_assert_eq!(b.kind == BlockKind::Intra, b.src_group == b.dst_group);
            }
            let mask = group_mask(&p);
            prop_assert_eq!(mask.ones(), idx.kind_size(BlockKind::Intra));
            for i in 0..n {
                prop_assert_eq!(mask.get(i, i), 1);
                for j in 0..n {
                    prop_assert_eq!(mask.get(i, j), mask.get(j, i));
                }
            }
        }

        #[test]
        fn parse_never_panics(s in "\\PC{0,64}") {
            let _ = GroupPartition::parse(&s);
        }
    }
}
