//! Lattice references and noisy partial observations.

use psreg::synthdata::{
    generate_instance, make_reference, pointset_csv_string, required_reference_size, NoiseModel,
    Structure, SynthSpec,
};

fn main() -> psreg::Result<()> {
    for s in [Structure::Cubic, Structure::Bcc, Structure::Fcc] {
        let n = required_reference_size(10, 0.45)?;
        let x = make_reference(3, n, &s, 1.0)?;
        println!("{s:?}: {} points, nearest to the centre {:?}", x.len(), x.point(0));
    }

    let spec = SynthSpec {
        p: 0.45,
        noise: NoiseModel::gaussian(0.1),
        ..SynthSpec::default()
    };
    let inst = generate_instance(&spec, 42)?;
    println!("\nobserved reference indices: {:?}", inst.true_correspondence.assignment);
    println!("true transform: {:?} {:?}", inst.true_theta.angles, inst.true_theta.translation);
    print!("observation CSV:\n{}", pointset_csv_string(&inst.observation));
    Ok(())
}
