//! Shows the reduce-on-plateau decisions for a validation loss curve.

use camid::trainer::{plateau_schedule, LrAction, OptimizerConfig};

fn main() {
    let cfg = OptimizerConfig::default();
    let losses = [
        1.0, 0.8, 0.7, 0.71, 0.72, 0.69, 0.70, 0.70, 0.70, 0.70, 0.70, 0.70, 0.70, 0.70, 0.70,
    ];
    for (epoch, (loss, action)) in losses
        .iter()
        .zip(plateau_schedule(&losses, &cfg))
        .enumerate()
    {
        let what = match action {
            LrAction::Keep(lr) => format!("keep   lr {lr:.0e}"),
            LrAction::Decay(lr) => format!("decay  lr {lr:.0e}"),
            LrAction::Stop => "stop".to_string(),
        };
        println!("epoch {epoch:2} val loss {loss:.2} -> {what}");
    }
}
