//! End-to-end camera identification on synthetic cameras.
//!
//! Usage: `camera_surrogate [seed] [images_per_camera] [extractor_epochs]`
//! The defaults run the full protocol, which takes several minutes.

use camid::pipeline::CameraSurrogate;

fn main() -> camid::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut run = CameraSurrogate::new(seed);
    if let Some(n) = args.next().and_then(|s| s.parse().ok()) {
        run.images_per_camera = n;
    }
    if let Some(e) = args.next().and_then(|s| s.parse().ok()) {
        run.extractor_opt.max_epochs = e;
    }
    let dir = std::env::temp_dir().join(format!("camid_surrogate_{seed}"));
    let out = run.run(&dir)?;
    for r in &out.extractor_history {
        println!(
            "extractor epoch {:2} lr {:.0e} train {:.4} val {:.4} acc {:.3}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc
        );
    }
    for r in &out.head_history {
        println!(
            "head epoch {:2} lr {:.0e} train {:.4} val {:.4} acc {:.3}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc
        );
    }
    println!(
        "test accuracy {:.4} on {} images, training {:.1}s",
        out.accuracy, out.n_test, out.train_seconds
    );
    println!("confusion {:?}", out.confusion);
    Ok(())
}
