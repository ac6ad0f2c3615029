//! HMC and MALA on the same noisy instance.

use std::time::Instant;

use psreg::synthdata::{generate_instance, NoiseModel, SynthSpec};
use psreg::{register, ModelSpec, RegistrationConfig, SamplerConfig, SamplerKind};

fn main() -> psreg::Result<()> {
    let gamma = 0.25;
    let spec = SynthSpec {
        p: 0.75,
        noise: NoiseModel::truncated(gamma, 3.0),
        ..SynthSpec::default()
    };
    let inst = generate_instance(&spec, 0)?;
    let model = ModelSpec::uniform(gamma, inst.reference.len(), inst.observation.len());

    for (kind, iterations) in [(SamplerKind::Hmc, 250), (SamplerKind::Mala, 5000)] {
        let cfg = RegistrationConfig {
            sampler: SamplerConfig {
                kind,
                step_size: 0.02,
                leapfrog_steps: 20,
                iterations,
                burn_in: iterations / 10,
                seed: 0,
                ..SamplerConfig::default()
            },
            chains: 40,
            polish: true,
        };
        let start = Instant::now();
        let reg = register(&inst.reference, &inst.observation, &model, &cfg)?;
        println!(
            "{kind:?}: MSE {:.4}, acceptance {:.3}, {:.2} s",
            reg.mse,
            reg.acceptance_rate(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
