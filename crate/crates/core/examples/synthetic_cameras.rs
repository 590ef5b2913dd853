//! Renders a small labelled dataset from the built-in synthetic cameras.
//!
//! Usage: `synthetic_cameras [out_dir] [images_per_camera]`

use camid::pipeline::{generate_synthetic_dataset, SyntheticCameraSpec};

fn main() -> camid::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("camid_synth"));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let cams = SyntheticCameraSpec::default_set(0);
    for c in &cams {
        println!(
            "{}: {:?} {:?} noise {} jpeg q{}",
            c.model_id, c.cfa, c.demosaic, c.noise_sigma, c.jpeg_quality
        );
    }
    let m = generate_synthetic_dataset(&cams, n, 256, &out)?;
    println!("wrote {} images to {}", m.len(), out.display());
    println!("class counts {:?}", m.class_counts(cams.len()));
    Ok(())
}
