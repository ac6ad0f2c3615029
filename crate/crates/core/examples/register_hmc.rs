//! Register a partial, noise-free observation of a BCC cluster with HMC.

use psreg::synthdata::{generate_instance, SynthSpec};
use psreg::{register, ModelSpec, RegistrationConfig, SamplerConfig};

fn main() -> psreg::Result<()> {
    let spec = SynthSpec {
        p: 0.75,
        ..SynthSpec::default()
    };
    let inst = generate_instance(&spec, 1)?;
    println!(
        "reference: {} points, observed: {}",
        inst.reference.len(),
        inst.observation.len()
    );

    let model = ModelSpec::uniform(0.05, inst.reference.len(), inst.observation.len());
    let cfg = RegistrationConfig {
        sampler: SamplerConfig {
            step_size: 0.004,
            leapfrog_steps: 20,
            iterations: 250,
            burn_in: 25,
            seed: 1,
            ..SamplerConfig::default()
        },
        chains: 40,
        polish: true,
    };
    let reg = register(&inst.reference, &inst.observation, &model, &cfg)?;

    println!("true theta: {:?} {:?}", inst.true_theta.angles, inst.true_theta.translation);
    println!("MAP theta:  {:?} {:?}", reg.theta_map.angles, reg.theta_map.translation);
    println!("MAP energy {:.6}, MSE {:.3e}", reg.energy_map, reg.mse);
    println!("acceptance rate {:.3}", reg.acceptance_rate());
    Ok(())
}
