//! Model and sampler configuration read from TOML.

use msfpca::basis::{orthonormalize, SplineBasisSpec, DEFAULT_GRID_SIZE};
use msfpca::model::{BlockSpec, ModelSpec};
use msfpca::sampler::{ChainConfig, Trajectory};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Block id as it appears in the data; blocks are matched by position when omitted.
    pub name: Option<String>,
    pub components: usize,
    pub basis: usize,
    /// Interior knots on `[0, 1]`; uniform when omitted.
    pub knots: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub per_block_sigma: bool,
    /// Sd of a normal prior on the unconstrained covariance coordinates; flat when omitted.
    pub cov_prior_sd: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    /// Fixed leapfrog count; replaces the dynamic trajectory when set.
    pub n_steps: Option<usize>,
    pub init_radius: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            chains: c.chains,
            warmup: c.warmup,
            draws: c.draws,
            seed: c.seed,
            target_accept: c.target_accept,
            max_tree_depth: 10,
            n_steps: None,
            init_radius: c.init_radius,
        }
    }
}

impl SamplerSection {
    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            chains: self.chains,
            warmup: self.warmup,
            draws: self.draws,
            seed: self.seed,
            target_accept: self.target_accept,
            trajectory: match self.n_steps {
                Some(n_steps) => Trajectory::Static { n_steps },
                None => Trajectory::Nuts { max_depth: self.max_tree_depth },
            },
            init_radius: self.init_radius,
        }
    }
}

/// Candidate `(K, Q)` settings for `fit --sweep`; every pair of entries is tried.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub components: Vec<Vec<usize>>,
    pub basis: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(rename = "block")]
    pub blocks: Vec<BlockConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    pub sweep: Option<SweepSection>,
}

impl FitConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::ConfigParse(e.message().to_string()))?;
        if cfg.blocks.is_empty() {
            return Err(CliError::ConfigParse("at least one [[block]] is required".into()));
        }
        Ok(cfg)
    }

    /// Reorders blocks to follow `data_blocks` when the config names them.
    pub fn align_to_data(&mut self, data_blocks: &[String]) -> Result<(), CliError> {
        if self.blocks.len() != data_blocks.len() {
            return Err(CliError::SpecMismatch(format!(
                "data has {} blocks but the model spec has {}",
                data_blocks.len(),
                self.blocks.len()
            )));
        }
        if self.blocks.iter().all(|b| b.name.is_none()) {
            return Ok(());
        }
        let mut ordered = Vec::with_capacity(self.blocks.len());
        for name in data_blocks {
            let b = self
                .blocks
                .iter()
                .find(|b| b.name.as_deref() == Some(name.as_str()))
                .ok_or_else(|| CliError::SpecMismatch(format!("data block {name} has no [[block]] entry")))?;
            ordered.push(b.clone());
        }
        self.blocks = ordered;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec<f64>, CliError> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let spline = match &b.knots {
                    Some(k) => SplineBasisSpec::with_knots(b.basis, k.clone()),
                    None => SplineBasisSpec::uniform(b.basis),
                }
                .map_err(|e| CliError::ConfigParse(e.to_string()))?;
                let basis = orthonormalize(spline, DEFAULT_GRID_SIZE).map_err(|e| CliError::ConfigParse(e.to_string()))?;
                Ok(BlockSpec { n_components: b.components, basis })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        ModelSpec::new(blocks)
            .and_then(|s| s.with_per_block_sigma(self.model.per_block_sigma).with_cov_prior_sd(self.model.cov_prior_sd))
            .map_err(|e| CliError::ConfigParse(e.to_string()))
    }

    /// One config per sweep candidate, in `components`-major order.
    pub fn sweep_candidates(&self) -> Result<Vec<FitConfig>, CliError> {
        let sweep = self.sweep.as_ref().ok_or_else(|| CliError::ConfigParse("--sweep needs a [sweep] section".into()))?;
        let mut out = Vec::new();
        for ks in &sweep.components {
            for qs in &sweep.basis {
                if ks.len() != self.blocks.len() || qs.len() != self.blocks.len() {
                    return Err(CliError::ConfigParse(format!(
                        "sweep entries must have one value per block ({})",
                        self.blocks.len()
                    )));
                }
                let mut c = self.clone();
                c.sweep = None;
                for ((b, &k), &q) in c.blocks.iter_mut().zip(ks).zip(qs) {
                    b.components = k;
                    b.basis = q;
                    b.knots = None;
                }
                out.push(c);
            }
        }
        if out.is_empty() {
            return Err(CliError::ConfigParse("[sweep] has no candidates".into()));
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        let ks: Vec<String> = self.blocks.iter().map(|b| b.components.to_string()).collect();
        let qs: Vec<String> = self.blocks.iter().map(|b| b.basis.to_string()).collect();
        format!("K=({}) Q=({})", ks.join(","), qs.join(","))
    }

    /// TOML text that reproduces this configuration.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            s.push_str("[[block]]\n");
            if let Some(n) = &b.name {
                s.push_str(&format!("name = {n:?}\n"));
            }
            s.push_str(&format!("components = {}\nbasis = {}\n", b.components, b.basis));
            if let Some(k) = &b.knots {
                let ks: Vec<String> = k.iter().map(|v| format!("{v:?}")).collect();
                s.push_str(&format!("knots = [{}]\n", ks.join(", ")));
            }
            s.push('\n');
        }
        s.push_str(&format!("[model]\nper_block_sigma = {}\n", self.model.per_block_sigma));
        if let Some(sd) = self.model.cov_prior_sd {
            s.push_str(&format!("cov_prior_sd = {sd:?}\n"));
        }
        s.push('\n');
        let sm = &self.sampler;
        s.push_str(&format!(
            "[sampler]\nchains = {}\nwarmup = {}\ndraws = {}\nseed = {}\ntarget_accept = {:?}\nmax_tree_depth = {}\ninit_radius = {:?}\n",
            sm.chains, sm.warmup, sm.draws, sm.seed, sm.target_accept, sm.max_tree_depth, sm.init_radius
        ));
        if let Some(n) = sm.n_steps {
            s.push_str(&format!("n_steps = {n}\n"));
        }
        s
    }
}
