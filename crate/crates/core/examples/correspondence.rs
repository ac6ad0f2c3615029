//! Recover which reference point each observation came from.
//!
//! An irregular reference makes the correspondence identifiable; on a
//! symmetric lattice any symmetry-equivalent labelling is equally good.

use psreg::model::{estimate_correspondence, CorrespondenceMode};
use psreg::synthdata::{random_transform, simulate_observation, NoiseModel};
use psreg::{register, ModelSpec, PointSet, RegistrationConfig, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> psreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let x = PointSet::from_rows(3, &rows)?;
    let theta = random_transform(3, 3.0, &mut rng);
    let inst = simulate_observation(&x, &theta, 8, &NoiseModel::truncated(0.1, 3.0), &mut rng)?;

    let model = ModelSpec::uniform(0.1, x.len(), inst.observation.len());
    let cfg = RegistrationConfig {
        sampler: SamplerConfig {
            step_size: 0.008,
            leapfrog_steps: 20,
            iterations: 250,
            burn_in: 25,
            seed: 8,
            ..SamplerConfig::default()
        },
        chains: 40,
        polish: true,
    };
    let reg = register(&x, &inst.observation, &model, &cfg)?;
    println!("MSE {:.4}", reg.mse);

    let truth = &inst.true_correspondence.assignment;
    let closest = &reg.correspondence_closest.assignment;
    let matched = estimate_correspondence(&reg.theta_map, &x, &inst.observation, CorrespondenceMode::Assignment)?;
    println!("obs  truth  closest  assignment");
    for j in 0..truth.len() {
        println!("{j:3}  {:5}  {:7}  {:10}", truth[j], closest[j], matched.assignment[j]);
    }
    let hits = |a: &[usize]| a.iter().zip(truth).filter(|(a, b)| a == b).count();
    println!(
        "correct: closest {}/{}, assignment {}/{}",
        hits(closest),
        truth.len(),
        hits(&matched.assignment),
        truth.len()
    );
    Ok(())
}
