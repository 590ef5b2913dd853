//! Four-way manipulation detection, optionally warm-started from a camera run.
//!
//! Usage: `manipulation_surrogate [seed] [--warm]`

use camid::pipeline::{CameraSurrogate, ManipulationSurrogate};

fn main() -> camid::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let init = if args.iter().any(|a| a == "--warm") {
        let dir = std::env::temp_dir().join(format!("camid_surrogate_{seed}"));
        Some(CameraSurrogate::new(seed).run(&dir)?.extractor)
    } else {
        None
    };
    let out = ManipulationSurrogate::new(seed).run(init.as_ref())?;
    for r in &out.extractor_history {
        println!(
            "epoch {:2} lr {:.0e} train {:.4} val {:.4} acc {:.3}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc
        );
    }
    println!(
        "test accuracy {:.4} on {} patches, training {:.1}s",
        out.accuracy, out.n_test, out.train_seconds
    );
    println!(
        "confusion (unaltered, jpeg, gamma, resized) {:?}",
        out.confusion
    );
    Ok(())
}
