//! Removes the first intrinsic mode from a textured plane and from an image.

use camid::emd2d::{
    decompose_first, emd_residue_image, find_extrema, reconstruction_error, Plane, SolverLimits,
};
use camid::pipeline::SyntheticCameraSpec;

fn main() -> camid::Result<()> {
    // Slow ramp plus a fast oscillation: the first mode should take the oscillation.
    let plane = Plane::from_fn(64, 64, |x, y| {
        0.5 * x as f64 + 20.0 * ((x as f64 * 0.9).sin() * (y as f64 * 0.7).cos())
    });
    let ext = find_extrema(&plane)?;
    println!("maxima {} minima {}", ext.maxima.len(), ext.minima.len());
    let res = decompose_first(&plane, SolverLimits::default())?;
    let imf_energy: f64 =
        res.imf1.data.iter().map(|v| v * v).sum::<f64>() / res.imf1.data.len() as f64;
    println!(
        "imf1 rms {:.3}, reconstruction error {:.2e}",
        imf_energy.sqrt(),
        reconstruction_error(&plane, &res)
    );

    let img = SyntheticCameraSpec::default_set(1)[1].render(0, 64);
    let out = emd_residue_image(&img, SolverLimits { n_max: 500 })?;
    let diff: f64 = img
        .data()
        .iter()
        .zip(out.data())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
        .sum::<f64>()
        / img.data().len() as f64;
    println!(
        "residue image {}x{}, mean |change| {:.2}",
        out.width(),
        out.height(),
        diff
    );
    Ok(())
}
