//! Posterior energy along a rotation sweep, and the analytic gradient.

use std::f64::consts::{FRAC_PI_2, TAU};

use psreg::geometry::apply_transform;
use psreg::{ModelSpec, PointSet, RegistrationTarget, TransformParams};

fn main() -> psreg::Result<()> {
    let x = PointSet::from_rows(2, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]])?;
    let truth = TransformParams::new(2, vec![FRAC_PI_2], vec![0.5, -0.5])?;
    let y = apply_transform(&truth, &x.select(&[0, 2]))?;

    let spec = ModelSpec::uniform(0.2, x.len(), y.len());
    let target = RegistrationTarget::new(&x, &y, &spec)?;

    println!("angle     energy");
    for k in 0..=16 {
        let phi = k as f64 * TAU / 16.0;
        let th = TransformParams::new(2, vec![phi], truth.translation.clone())?;
        println!("{phi:6.3}  {:10.4}", target.potential_energy(&th)?);
    }

    let probe = TransformParams::new(2, vec![1.4], vec![0.3, -0.7])?;
    println!("\nlog-likelihood at probe: {:.6}", target.log_likelihood(&probe)?);
    println!("gradient of the energy:  {:?}", target.grad_potential_energy(&probe)?);
    Ok(())
}
