//! Many registrations of one reference: error statistics and reference RMSE.

use psreg::cli::{run_ensemble, ExperimentConfig};
use psreg::synthdata::NoiseModel;

fn main() -> psreg::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.synth.p = 0.75;
    cfg.synth.noise = NoiseModel::truncated(0.25, 3.0);
    cfg.model.gamma = 0.25;
    cfg.sampler.step_size = 0.02;
    cfg.sampler.iterations = 250;
    cfg.sampler.burn_in = 25;
    cfg.registration.chains = 40;
    cfg.ensemble.run_count = 10;
    cfg.ensemble.parallelism = std::thread::available_parallelism().map_or(1, |n| n.get());
    cfg.seed = 3;

    let out = run_ensemble(&cfg)?;
    let r = &out.report;
    for (l, mse) in r.per_run_mse.iter().enumerate() {
        println!("run {l:2}: MSE {mse:.4}");
    }
    println!(
        "mean {:.4}, variance {:.5}, 95% interval ({:.4}, {:.4})",
        r.stats.mean, r.stats.var, r.stats.ci95.0, r.stats.ci95.1
    );
    println!(
        "reference RMSE {:.4} over {} of {} reference points",
        r.reference_rmse,
        r.retained,
        out.reference.len()
    );
    Ok(())
}
