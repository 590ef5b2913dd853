//! Prints the DenseNet-201 channel trace and extracts features with the toy net.

use camid::densenet::{channel_trace, DenseNet, DenseNetConfig};
use camid::pipeline::SyntheticCameraSpec;

fn main() -> camid::Result<()> {
    let full = DenseNetConfig::densenet201();
    println!(
        "densenet201 channels after each stage: {:?}",
        channel_trace(&full)
    );
    println!("densenet201 feature length {}", full.feature_len());

    let net = DenseNet::new(DenseNetConfig::toy(), None, 0)?;
    let img = SyntheticCameraSpec::default_set(0)[0].render(0, 256);
    for size in [64, 128, 256] {
        let patch = camid::image::extract_patch(&img, camid::Region::new(0, 0, size))?;
        let f = net.extract_feature(&patch)?;
        let norm = f.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "toy net, {size} patch: {} values, l2 norm {:.4}",
            f.values.len(),
            norm
        );
    }
    Ok(())
}
