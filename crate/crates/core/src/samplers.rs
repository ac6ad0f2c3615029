//! Gradient-based MCMC: leapfrog integration, HMC and MALA.
//!
//! Samplers work on an unconstrained parameter vector. Angles are only
//! wrapped into their canonical ranges when a sample is recorded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_count, canonicalize_params, PointSet, TransformParams};
use crate::model::{ModelSpec, RegistrationTarget};

/// An energy `E(theta)` (negative log density up to a constant) with gradient.
pub trait Potential {
    fn dim(&self) -> usize;

    fn energy(&self, theta: &[f64]) -> f64;

    /// Writes `dE/dtheta` into `grad` and returns `E(theta)`.
    fn energy_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// Proposals with `H(new) - H(old)` above this are treated as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Hmc,
    Mala,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// Uniform over the canonical angle box; translation from a box around
    /// the centroid offset of the two point sets.
    #[default]
    Random,
    Fixed(TransformParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Diagonal of the mass matrix; `None` means identity.
    pub mass_diag: Option<Vec<f64>>,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub initial_theta: Initialization,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Hmc,
            step_size: 0.05,
            leapfrog_steps: 20,
            mass_diag: None,
            iterations: 100_000,
            burn_in: 10_000,
            seed: 0,
            initial_theta: Initialization::Random,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, n_params: usize) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sampler.step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.kind == SamplerKind::Hmc && self.leapfrog_steps == 0 {
            return Err(Error::InvalidArgument(
                "sampler.leapfrog_steps must be at least 1".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "sampler.iterations must be at least 1".into(),
            ));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidArgument(format!(
                "sampler.burn_in ({}) must be below sampler.iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if let Some(m) = &self.mass_diag {
            if m.len() != n_params {
                return Err(Error::InvalidArgument(format!(
                    "sampler.mass_diag has {} entries, expected {}",
                    m.len(),
                    n_params
                )));
            }
            if m.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(
                    "sampler.mass_diag entries must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    fn mass(&self, n_params: usize) -> Vec<f64> {
        self.mass_diag
            .clone()
            .unwrap_or_else(|| vec![1.0; n_params])
    }
}

/// Current position with its cached energy and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
}

impl ChainState {
    pub fn new<P: Potential>(target: &P, theta: Vec<f64>) -> Self {
        let mut grad = vec![0.0; theta.len()];
        let energy = target.energy_and_gradient(&theta, &mut grad);
        ChainState {
            theta,
            energy,
            grad,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: ChainState,
    pub accepted: bool,
    /// Metropolis-Hastings acceptance probability of the proposal (0 if divergent).
    pub accept_prob: f64,
}

/// End point of a leapfrog trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LeapfrogEnd {
    pub theta: Vec<f64>,
    pub momentum: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
}

/// Integrates Hamilton's equations for `H = E(theta) + p^T M^-1 p / 2` with
/// `n_steps` leapfrog steps of size `h`. `grad` is `dE/dtheta` at `theta`.
///
/// Returns `None` if a non-finite energy or gradient is met.
pub fn leapfrog<P: Potential>(
    target: &P,
    theta: &[f64],
    momentum: &[f64],
    grad: &[f64],
    h: f64,
    n_steps: usize,
    inv_mass: &[f64],
) -> Option<LeapfrogEnd> {
    if n_steps == 0 {
        return None;
    }
    let dim = theta.len();
    let mut q = theta.to_vec();
    let mut p = momentum.to_vec();
    let mut g = grad.to_vec();
    let mut energy = f64::NAN;
    for k in 0..dim {
        p[k] -= 0.5 * h * g[k];
    }
    for step in 0..n_steps {
        for k in 0..dim {
            q[k] += h * inv_mass[k] * p[k];
        }
        energy = target.energy_and_gradient(&q, &mut g);
        if !energy.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let scale = if step + 1 == n_steps { 0.5 * h } else { h };
        for k in 0..dim {
            p[k] -= scale * g[k];
        }
    }
    Some(LeapfrogEnd {
        theta: q,
        momentum: p,
        energy,
        grad: g,
    })
}

pub fn kinetic_energy(momentum: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * momentum
        .iter()
        .zip(inv_mass)
        .map(|(p, im)| p * p * im)
        .sum::<f64>()
}

fn metropolis(state: &ChainState, proposal: Option<ChainState>, log_alpha: f64, rng: &mut impl Rng) -> StepOutcome {
    let u: f64 = rng.random();
    match proposal {
        Some(next) if log_alpha.is_finite() => {
            let accept_prob = log_alpha.min(0.0).exp();
            if u < accept_prob {
                StepOutcome {
                    state: next,
                    accepted: true,
                    accept_prob,
                }
            } else {
                StepOutcome {
                    state: state.clone(),
                    accepted: false,
                    accept_prob,
                }
            }
        }
        _ => StepOutcome {
            state: state.clone(),
            accepted: false,
            accept_prob: 0.0,
        },
    }
}

/// One HMC transition: fresh momentum `p ~ N(0, M)`, leapfrog proposal and
/// acceptance with probability `min(1, exp(H(p, theta) - H(p*, theta*)))`.
pub fn hmc_step<P: Potential>(
    state: &ChainState,
    target: &P,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> StepOutcome {
    let dim = state.theta.len();
    let mass = cfg.mass(dim);
    let inv_mass: Vec<f64> = mass.iter().map(|m| 1.0 / m).collect();
    let p0: Vec<f64> = mass
        .iter()
        .map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let h0 = state.energy + kinetic_energy(&p0, &inv_mass);
    let end = leapfrog(
        target,
        &state.theta,
        &p0,
        &state.grad,
        cfg.step_size,
        cfg.leapfrog_steps,
        &inv_mass,
    );
    let (proposal, log_alpha) = match end {
        Some(end) => {
            let h1 = end.energy + kinetic_energy(&end.momentum, &inv_mass);
            let delta = h1 - h0;
            if !delta.is_finite() || delta > DIVERGENCE_THRESHOLD {
                (None, f64::NEG_INFINITY)
            } else {
                (
                    Some(ChainState {
                        theta: end.theta,
                        energy: end.energy,
                        grad: end.grad,
                    }),
                    -delta,
                )
            }
        }
        None => (None, f64::NEG_INFINITY),
    };
    metropolis(state, proposal, log_alpha, rng)
}

/// Langevin proposal `theta - (h^2/2) M^-1 grad + h M^-1/2 z`.
pub fn mala_proposal(theta: &[f64], grad: &[f64], h: f64, inv_mass: &[f64], z: &[f64]) -> Vec<f64> {
    (0..theta.len())
        .map(|k| theta[k] - 0.5 * h * h * inv_mass[k] * grad[k] + h * inv_mass[k].sqrt() * z[k])
        .collect()
}

/// `log q(from -> to)` up to a constant for the Langevin proposal.
pub fn mala_log_proposal_density(
    from: &[f64],
    grad_from: &[f64],
    to: &[f64],
    h: f64,
    inv_mass: &[f64],
) -> f64 {
    let mut acc = 0.0;
    for k in 0..from.len() {
        let mean = from[k] - 0.5 * h * h * inv_mass[k] * grad_from[k];
        let diff = to[k] - mean;
        acc += diff * diff / inv_mass[k];
    }
    -acc / (2.0 * h * h)
}

/// Log Metropolis-Hastings ratio for a MALA move between two states.
pub fn mala_log_acceptance(from: &ChainState, to: &ChainState, h: f64, inv_mass: &[f64]) -> f64 {
    let forward = mala_log_proposal_density(&from.theta, &from.grad, &to.theta, h, inv_mass);
    let backward = mala_log_proposal_density(&to.theta, &to.grad, &from.theta, h, inv_mass);
    from.energy - to.energy + backward - forward
}

/// One MALA transition with the asymmetric proposal correction.
pub fn mala_step<P: Potential>(
    state: &ChainState,
    target: &P,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> StepOutcome {
    let dim = state.theta.len();
    let inv_mass: Vec<f64> = cfg.mass(dim).iter().map(|m| 1.0 / m).collect();
    let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let theta = mala_proposal(&state.theta, &state.grad, cfg.step_size, &inv_mass, &z);
    let next = ChainState::new(target, theta);
    let finite = next.energy.is_finite() && next.grad.iter().all(|v| v.is_finite());
    if !finite || next.energy - state.energy > DIVERGENCE_THRESHOLD {
        return metropolis(state, None, f64::NEG_INFINITY, rng);
    }
    let log_alpha = mala_log_acceptance(state, &next, cfg.step_size, &inv_mass);
    metropolis(state, Some(next), log_alpha, rng)
}

/// Raw output of [`sample_potential`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    pub accepted: Vec<bool>,
    pub accept_count: usize,
    pub proposal_count: usize,
}

/// Runs `cfg.iterations` transitions from `start`, recording everything
/// after `cfg.burn_in`.
pub fn sample_potential<P: Potential>(
    target: &P,
    start: Vec<f64>,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Trace> {
    cfg.validate(target.dim())?;
    if start.len() != target.dim() {
        return Err(Error::InvalidArgument(format!(
            "start has {} parameters, target has {}",
            start.len(),
            target.dim()
        )));
    }
    let mut state = ChainState::new(target, start);
    if !state.energy.is_finite() {
        return Err(Error::InvalidArgument(
            "energy is not finite at the initial point".into(),
        ));
    }
    let kept = cfg.iterations - cfg.burn_in;
    let mut trace = Trace {
        samples: Vec::with_capacity(kept),
        energies: Vec::with_capacity(kept),
        accepted: Vec::with_capacity(kept),
        accept_count: 0,
        proposal_count: 0,
    };
    for it in 0..cfg.iterations {
        let out = match cfg.kind {
            SamplerKind::Hmc => hmc_step(&state, target, cfg, rng),
            SamplerKind::Mala => mala_step(&state, target, cfg, rng),
        };
        trace.proposal_count += 1;
        if out.accepted {
            trace.accept_count += 1;
        }
        state = out.state;
        if it >= cfg.burn_in {
            trace.samples.push(state.theta.clone());
            trace.energies.push(state.energy);
            trace.accepted.push(out.accepted);
        }
    }
    Ok(trace)
}

/// Post burn-in samples of a registration chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// Canonicalised samples.
    pub samples: Vec<TransformParams>,
    pub energies: Vec<f64>,
    /// Whether the transition producing each sample was accepted.
    pub accepted: Vec<bool>,
    pub accept_count: usize,
    pub proposal_count: usize,
    pub seed: u64,
    /// Iteration index of the first recorded sample.
    pub first_iteration: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposal_count == 0 {
            0.0
        } else {
            self.accept_count as f64 / self.proposal_count as f64
        }
    }

    /// Values of parameter `k` (angles then translation) across samples.
    pub fn parameter_series(&self, k: usize) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| {
                let na = s.angles.len();
                if k < na {
                    s.angles[k]
                } else {
                    s.translation[k - na]
                }
            })
            .collect()
    }
}

/// Random starting point: uniform angles over the canonical box and a
/// translation uniform in the box `centroid(Y) - R centroid(X) +- extent(Y)/2`.
pub fn random_initial_theta(x: &PointSet, y: &PointSet, rng: &mut impl Rng) -> TransformParams {
    use std::f64::consts::{FRAC_PI_2, TAU};
    let dim = x.dim();
    let angles: Vec<f64> = if dim == 2 {
        vec![rng.random::<f64>() * TAU]
    } else {
        vec![
            rng.random::<f64>() * TAU,
            rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
            rng.random::<f64>() * TAU,
        ]
    };
    let rot = TransformParams {
        dim,
        angles: angles.clone(),
        translation: vec![0.0; dim],
    };
    let r = crate::geometry::rotation_matrix(&rot).expect("finite angles");
    let cx = nalgebra::DVector::from_vec(x.centroid());
    let rcx = &r * cx;
    let cy = y.centroid();
    let translation = (0..dim)
        .map(|k| {
            let row = y.points.row(k);
            let half = 0.5 * (row.max() - row.min());
            let center = cy[k] - rcx[k];
            if half > 0.0 {
                rng.random_range(center - half..=center + half)
            } else {
                center
            }
        })
        .collect();
    TransformParams {
        dim,
        angles,
        translation,
    }
}

/// Wraps a raw trace of registration parameters into a [`Chain`].
pub fn chain_from_trace(point_dim: usize, trace: Trace, seed: u64, first_iteration: usize) -> Result<Chain> {
    let samples = trace
        .samples
        .iter()
        .map(|v| TransformParams::from_vector(point_dim, v).map(|p| canonicalize_params(&p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Chain {
        samples,
        energies: trace.energies,
        accepted: trace.accepted,
        accept_count: trace.accept_count,
        proposal_count: trace.proposal_count,
        seed,
        first_iteration,
    })
}

/// Samples the marginal posterior over transformations. Deterministic in
/// `cfg.seed`.
pub fn run_chain(x: &PointSet, y: &PointSet, spec: &ModelSpec, cfg: &SamplerConfig) -> Result<Chain> {
    let target = RegistrationTarget::new(x, y, spec)?;
    run_chain_on(&target, x, y, cfg)
}

pub(crate) fn run_chain_on(
    target: &RegistrationTarget,
    x: &PointSet,
    y: &PointSet,
    cfg: &SamplerConfig,
) -> Result<Chain> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = match &cfg.initial_theta {
        Initialization::Random => random_initial_theta(x, y, &mut rng),
        Initialization::Fixed(p) => {
            p.validate()?;
            if p.dim != x.dim() {
                return Err(Error::InvalidArgument(format!(
                    "initial transform is {}D, data is {}D",
                    p.dim,
                    x.dim()
                )));
            }
            p.clone()
        }
    };
    debug_assert_eq!(start.angles.len(), angle_count(x.dim()));
    let trace = sample_potential(target, start.to_vector(), cfg, &mut rng)?;
    chain_from_trace(x.dim(), trace, cfg.seed, cfg.burn_in)
}

/// Independent chains with seeds `cfg.seed ^ index`; chain 0 equals [`run_chain`].
pub fn run_chains(
    x: &PointSet,
    y: &PointSet,
    spec: &ModelSpec,
    cfg: &SamplerConfig,
    n_chains: usize,
) -> Result<Vec<Chain>> {
    let target = RegistrationTarget::new(x, y, spec)?;
    (0..n_chains as u64)
        .map(|c| {
            let cfg = SamplerConfig {
                seed: cfg.seed ^ c,
                ..cfg.clone()
            };
            run_chain_on(&target, x, y, &cfg)
        })
        .collect()
}
