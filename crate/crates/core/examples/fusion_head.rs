//! Multi-scale fusion of one 256 patch and an untrained SE head prediction.

use camid::densenet::{DenseNet, DenseNetConfig};
use camid::fusionhead::{fuse, predict_image, SeHead, DEFAULT_REDUCTION};
use camid::netcore::ForwardCtx;
use camid::patchqual::QualityParams;
use camid::pipeline::SyntheticCameraSpec;

fn main() -> camid::Result<()> {
    let net = DenseNet::new(DenseNetConfig::toy(), None, 1)?;
    let img = SyntheticCameraSpec::default_set(0)[3].render(0, 512);
    let patch = camid::image::extract_patch(&img, camid::Region::new(0, 0, 256))?;
    let fused = fuse(&net, &patch)?;
    for (i, name) in ["256", "4x128 mean", "16x64 mean"].iter().enumerate() {
        let row = fused.row(i);
        println!(
            "row {name}: mean {:.4}",
            row.iter().sum::<f64>() / row.len() as f64
        );
    }

    let head = SeHead::new(net.feature_len(), 4, DEFAULT_REDUCTION, 1)?;
    let x = camid::fusionhead::fused_to_tensor(&[&fused])?;
    let gates = head.gates(&x, &ForwardCtx::eval())?;
    let g = gates.data();
    let (lo, hi) = g
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("{} SE gates in [{lo:.3}, {hi:.3}]", g.len());
    let probs = predict_image(&net, &head, &img, 4, &QualityParams::default())?;
    println!("image probabilities over 4 classes {probs:.4?}");
    Ok(())
}
