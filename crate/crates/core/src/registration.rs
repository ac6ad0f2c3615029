//! End-to-end registration: sample, pick the MAP, recover correspondences.

use serde::{Deserialize, Serialize};

use crate::analysis::registration_mse;
use crate::error::Result;
use crate::geometry::{PointSet, TransformParams};
use crate::model::{
    estimate_correspondence, map_estimate, posterior_mean_from_chain, CorrespondenceMatrix,
    CorrespondenceMode, ModelSpec, RegistrationTarget,
};
use crate::samplers::{run_chain_on, Chain, SamplerConfig};

/// Sampler settings plus how many independent chains to pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub sampler: SamplerConfig,
    /// Independent chains, seeded `sampler.seed ^ index`.
    pub chains: usize,
    /// Refine the MAP sample by deterministic descent.
    pub polish: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            sampler: SamplerConfig::default(),
            chains: 1,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub chains: Vec<Chain>,
    /// Chain holding the MAP sample.
    pub best_chain: usize,
    pub theta_map: TransformParams,
    pub energy_map: f64,
    /// Posterior mean of the chain holding the MAP sample.
    pub theta_mean: TransformParams,
    pub mse: f64,
    pub correspondence_closest: CorrespondenceMatrix,
    /// `None` when there are more observations than reference points.
    pub correspondence_assignment: Option<CorrespondenceMatrix>,
}

impl Registration {
    pub fn best(&self) -> &Chain {
        &self.chains[self.best_chain]
    }

    pub fn acceptance_rate(&self) -> f64 {
        let (a, p) = self
            .chains
            .iter()
            .fold((0, 0), |(a, p), c| (a + c.accept_count, p + c.proposal_count));
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }
}

pub fn register(
    x: &PointSet,
    y: &PointSet,
    spec: &ModelSpec,
    cfg: &RegistrationConfig,
) -> Result<Registration> {
    let target = RegistrationTarget::new(x, y, spec)?;
    let chains = (0..cfg.chains.max(1) as u64)
        .map(|c| {
            let sampler = SamplerConfig {
                seed: cfg.sampler.seed ^ c,
                ..cfg.sampler.clone()
            };
            run_chain_on(&target, x, y, &sampler)
        })
        .collect::<Result<Vec<_>>>()?;
    let best_chain = chains
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            c.energies
                .iter()
                .copied()
                .filter(|e| !e.is_nan())
                .min_by(f64::total_cmp)
                .map(|e| (i, e))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(i, _)| i);
    let (theta_map, energy_map) = map_estimate(&target, x.dim(), &chains, cfg.polish)?;
    let theta_mean = posterior_mean_from_chain(&chains[best_chain])?;
    let mse = registration_mse(&theta_map, x, y)?;
    let correspondence_closest =
        estimate_correspondence(&theta_map, x, y, CorrespondenceMode::Closest)?;
    let correspondence_assignment = if y.len() <= x.len() {
        Some(estimate_correspondence(
            &theta_map,
            x,
            y,
            CorrespondenceMode::Assignment,
        )?)
    } else {
        None
    };
    Ok(Registration {
        chains,
        best_chain,
        theta_map,
        energy_map,
        theta_mean,
        mse,
        correspondence_closest,
        correspondence_assignment,
    })
}
