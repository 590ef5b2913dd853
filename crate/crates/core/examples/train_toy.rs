//! Trains the toy extractor to tell two synthetic cameras apart from 64 patches.
//! Rotation augmentation stays off: quarter turns change the Bayer phase.

use camid::densenet::{DenseNet, DenseNetConfig};
use camid::image::extract_patch;
use camid::patchqual::{select_top_patches, QualityParams};
use camid::pipeline::SyntheticCameraSpec;
use camid::trainer::{fit, Labeled, OptimizerConfig};
use camid::RasterImage;

fn patches(
    cam: &SyntheticCameraSpec,
    label: usize,
    range: std::ops::Range<usize>,
) -> camid::Result<Vec<Labeled<RasterImage>>> {
    let q = QualityParams::default();
    let mut out = Vec::new();
    for i in range {
        let img = cam.render(i, 256);
        for p in select_top_patches(&img, 64, 4, &q)? {
            out.push(Labeled {
                input: extract_patch(&img, p.region)?,
                label,
            });
        }
    }
    Ok(out)
}

fn main() -> camid::Result<()> {
    let cams = SyntheticCameraSpec::default_set(2);
    let (a, b) = (&cams[0], &cams[3]);
    let mut train = patches(a, 0, 0..8)?;
    train.extend(patches(b, 1, 0..8)?);
    let mut val = patches(a, 0, 8..11)?;
    val.extend(patches(b, 1, 8..11)?);

    let mut net = DenseNet::new(DenseNetConfig::toy(), Some(2), 2)?;
    let cfg = OptimizerConfig {
        lr_init: 0.01,
        batch_size: 16,
        max_epochs: 6,
        seed: 2,
        ..Default::default()
    };
    let mut log = std::io::stdout();
    let rep = fit(&mut net, &train, &val, &cfg, false, Some(&mut log))?;
    println!("best epoch {} stop {:?}", rep.best_epoch, rep.stop);
    Ok(())
}
