//! Rotating and translating point sets in 2D and 3D.

use std::f64::consts::FRAC_PI_2;

use psreg::geometry::{apply_transform, canonicalize_params, pullback, rotation_matrix};
use psreg::{PointSet, TransformParams};

fn main() -> psreg::Result<()> {
    let square = PointSet::from_rows(
        2,
        &[vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]],
    )?;
    let quarter_turn = TransformParams::new(2, vec![FRAC_PI_2], vec![3.0, 0.0])?;
    let moved = apply_transform(&quarter_turn, &square)?;
    println!("2D square turned by 90 degrees and shifted by (3, 0):");
    for p in moved.iter() {
        println!("  ({:+.3}, {:+.3})", p[0], p[1]);
    }
    let back = pullback(&quarter_turn, &moved)?;
    println!("pullback recovers the original: {:?}", back.point(0));

    let theta = TransformParams::new(3, vec![0.3, -0.2, 1.1], vec![0.5, 0.0, -1.0])?;
    println!("\n3D rotation Rz Ry Rx:\n{}", rotation_matrix(&theta)?);

    // angles outside the canonical box describe the same rotation
    let wrapped = TransformParams::new(3, vec![0.3 + 7.0, -0.2, 1.1], vec![0.5, 0.0, -1.0])?;
    println!("canonical angles: {:?}", canonicalize_params(&wrapped).angles);
    Ok(())
}
