//! TOML run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::prior::ScaleUnits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma_intra: f64,
    pub sigma_cross: f64,
    /// Prior scale of the per-agent message code.
    pub sigma_x0: f64,
    #[serde(default)]
    pub units: ScaleUnits,
}

impl PriorConfig {
    pub fn intra_var(&self) -> f64 {
        self.units.to_variance(self.sigma_intra)
    }

    pub fn cross_var(&self) -> f64 {
        self.units.to_variance(self.sigma_cross)
    }

    pub fn x0_var(&self) -> f64 {
        self.units.to_variance(self.sigma_x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_a_dim: f64,
    pub lambda_x_dim: f64,
    #[serde(default)]
    pub lambda_g: f64,
    pub t_warm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Environment steps; one gradient step follows each once the buffer is warm.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub buffer_episodes: usize,
    pub warm_episodes: usize,
    pub target_interval: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of `steps` over which exploration decays linearly.
    pub eps_decay_frac: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub log_interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub prior: PriorConfig,
    pub loss: LossConfig,
    pub training: TrainingConfig,
    pub output: OutputConfig,
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be positive, got {v}")))
    }
}

fn nonneg(v: f64, what: &str) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be nonnegative, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("name must be a non-empty plain identifier".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        self.env.validate()?;
        self.network.validate()?;
        positive(self.prior.sigma_intra, "prior.sigma_intra")?;
        positive(self.prior.sigma_cross, "prior.sigma_cross")?;
        positive(self.prior.sigma_x0, "prior.sigma_x0")?;
        nonneg(self.loss.lambda_a_dim, "loss.lambda_a_dim")?;
        nonneg(self.loss.lambda_x_dim, "loss.lambda_x_dim")?;
        nonneg(self.loss.lambda_g, "loss.lambda_g")?;
        let t = &self.training;
        if t.steps == 0 || t.batch_size == 0 || t.buffer_episodes == 0 || t.target_interval == 0 {
            return Err(Error::Config("steps, batch_size, buffer_episodes and target_interval must be >= 1".into()));
        }
        if t.eval_interval == 0 || t.eval_episodes == 0 || t.log_interval == 0 {
            return Err(Error::Config("eval_interval, eval_episodes and log_interval must be >= 1".into()));
        }
        if t.warm_episodes == 0 || t.warm_episodes > t.buffer_episodes {
            return Err(Error::Config("warm_episodes must lie in [1, buffer_episodes]".into()));
        }
        positive(t.lr, "training.lr")?;
        positive(t.grad_clip, "training.grad_clip")?;
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("training.momentum must lie in [0, 1)".into()));
        }
        for (v, what) in [(t.eps_start, "eps_start"), (t.eps_end, "eps_end"), (t.eps_decay_frac, "eps_decay_frac")] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("training.{what} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Same run with `sigma_intra / sigma_cross = ratio`, keeping the cross
    /// scale fixed.
    pub fn with_sigma_ratio(&self, ratio: f64) -> Result<Self> {
        positive(ratio, "sigma ratio")?;
        let mut c = self.clone();
        c.prior.sigma_intra = ratio * c.prior.sigma_cross;
        c.name = format!("{}_ratio{}", self.name, ratio);
        c.validate()?;
        Ok(c)
    }
}

pub const HIBCG_DEFAULT: &str = include_str!("../configs/hibcg_default.toml");
pub const FLAT_PRIOR: &str = include_str!("../configs/flat_prior.toml");
pub const AIB_ONLY: &str = include_str!("../configs/aib_only.toml");

/// Bundled configurations by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "hibcg_default" => Some(HIBCG_DEFAULT),
        "flat_prior" => Some(FLAT_PRIOR),
        "aib_only" => Some(AIB_ONLY),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse_and_round_trip() {
        for name in ["hibcg_default", "flat_prior", "aib_only"] {
            let c = RunConfig::parse(bundled(name).unwrap()).unwrap();
            assert_eq!(c.name, name);
            let again = RunConfig::parse(&c.to_toml()).unwrap();
            assert_eq!(c, again);
        }
        assert!(bundled("nope").is_none());
    }

    #[test]
    fn ablations_differ_only_where_intended() {
        let base = RunConfig::parse(HIBCG_DEFAULT).unwrap();
        let mut flat = RunConfig::parse(FLAT_PRIOR).unwrap();
        assert_eq!(flat.prior.sigma_intra, flat.prior.sigma_cross);
        assert_eq!(base.prior.sigma_intra / base.prior.sigma_cross, 10.0);
        flat.name = base.name.clone();
        flat.prior = base.prior.clone();
        assert_eq!(flat, base);
        let mut aib = RunConfig::parse(AIB_ONLY).unwrap();
        assert_eq!(aib.loss.lambda_x_dim, 0.0);
        aib.name = base.name.clone();
        aib.loss.lambda_x_dim = base.loss.lambda_x_dim;
        assert_eq!(aib, base);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = RunConfig::parse(HIBCG_DEFAULT).unwrap();
        let check = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            assert!(RunConfig::parse(&c.to_toml()).is_err());
        };
        check(&|c| c.prior.sigma_cross = 0.0);
        check(&|c| c.network.layers = 0);
        check(&|c| c.seeds.clear());
        check(&|c| c.seeds = vec![1, 1]);
        check(&|c| c.env.p_obs = 2.0);
        check(&|c| c.training.momentum = 1.0);
        check(&|c| c.training.warm_episodes = 0);
        check(&|c| c.name = "a/b".into());
        assert!(RunConfig::parse("name = 3").is_err());
        let extra = format!("{}\nbogus = 1\n", HIBCG_DEFAULT);
        assert!(RunConfig::parse(&extra).is_err());
    }

    #[test]
    fn sigma_ratio_variants() {
        let base = RunConfig::parse(HIBCG_DEFAULT).unwrap();
        let flat = base.with_sigma_ratio(1.0).unwrap();
        assert_eq!(flat.prior.sigma_intra, flat.prior.sigma_cross);
        let rev = base.with_sigma_ratio(0.1).unwrap();
        assert!(rev.prior.sigma_intra < rev.prior.sigma_cross);
        assert!(base.with_sigma_ratio(-1.0).is_err());
    }

    #[test]
    fn units_apply() {
        let mut p = RunConfig::parse(HIBCG_DEFAULT).unwrap().prior;
        p.units = ScaleUnits::Std;
        assert!((p.intra_var() - p.sigma_intra * p.sigma_intra).abs() < 1e-15);
    }
}
