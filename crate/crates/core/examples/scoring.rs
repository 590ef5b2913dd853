//! Weighted forensic score and report files for a hand-made prediction set.

use camid::pipeline::{report, score, Manifest, ManifestRow, Prediction};
use camid::Manipulation;

fn main() -> camid::Result<()> {
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for i in 0..20 {
        let mut row = ManifestRow::new(format!("img{i}.png"), &format!("src{i}"), i % 4);
        if i >= 14 {
            row.manipulation = Manipulation::JpegCompressed;
        }
        // Unaltered images mostly right, manipulated ones half right.
        let correct = if i < 14 { i % 7 != 0 } else { i % 2 == 0 };
        let class = if correct {
            row.label
        } else {
            (row.label + 1) % 4
        };
        preds.push(Prediction {
            key: row.key(),
            class,
            manipulation: None,
            probabilities: Vec::new(),
        });
        rows.push(row);
    }
    let names = (0..4).map(|c| format!("camera{c}")).collect();
    let r = score(&preds, &Manifest::new(rows), names)?;
    println!("{}", r.summary());
    let dir = std::env::temp_dir().join("camid_report");
    report(&r, &dir)?;
    println!("report written to {}", dir.display());
    Ok(())
}
