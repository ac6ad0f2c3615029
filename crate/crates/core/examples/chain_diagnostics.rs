//! Autocorrelation, effective sample size and marginals of one chain.

use psreg::analysis::{autocorrelation, effective_sample_size, marginal_histograms};
use psreg::samplers::run_chain;
use psreg::synthdata::{generate_instance, NoiseModel, Structure, SynthSpec};
use psreg::{ModelSpec, SamplerConfig, TransformParams};

fn main() -> psreg::Result<()> {
    let spec = SynthSpec {
        dim: 2,
        structure: Structure::Cubic,
        noise: NoiseModel::gaussian(0.2),
        ..SynthSpec::default()
    };
    let inst = generate_instance(&spec, 5)?;
    let model = ModelSpec::uniform(0.2, inst.reference.len(), inst.observation.len());
    let cfg = SamplerConfig {
        step_size: 0.015,
        leapfrog_steps: 6,
        iterations: 4000,
        burn_in: 400,
        seed: 5,
        ..SamplerConfig::default()
    };
    let chain = run_chain(&inst.reference, &inst.observation, &model, &cfg)?;
    println!("{} samples, acceptance {:.3}", chain.len(), chain.acceptance_rate());

    for (k, name) in TransformParams::param_names(2).iter().enumerate() {
        let s = chain.parameter_series(k);
        let rho = autocorrelation(&s, 20)?;
        println!(
            "{name}: ESS {:7.1}, rho(1) {:.3}, rho(10) {:.3}",
            effective_sample_size(&s)?,
            rho[1],
            rho[10]
        );
    }

    let h = marginal_histograms(&chain, 12)?;
    let phi = &h.marginals[0];
    println!("\nmarginal of {}:", TransformParams::param_names(2)[0]);
    for (b, c) in phi.counts.iter().enumerate() {
        let (lo, hi) = phi.bin_edges(b);
        println!("[{lo:+.2}, {hi:+.2}) {}", "#".repeat(c * 60 / chain.len().max(1)));
    }
    Ok(())
}
