//! Applies every augmentation operation to one image and reports the effect.

use camid::augment::ManipSpec;
use camid::pipeline::SyntheticCameraSpec;

fn mean(data: &[u8]) -> f64 {
    data.iter().map(|&v| f64::from(v)).sum::<f64>() / data.len() as f64
}

fn main() -> camid::Result<()> {
    let img = SyntheticCameraSpec::default_set(3)[2].render(0, 256);
    println!("source 256x256 mean {:.2}", mean(img.data()));
    for op in ManipSpec::ALL {
        let out = op.apply(&img)?;
        println!(
            "{:<9} -> {:>3}x{:<3} mean {:6.2} tag {:?}",
            op.name(),
            out.width(),
            out.height(),
            mean(out.data()),
            op.manipulation()
        );
    }
    Ok(())
}
