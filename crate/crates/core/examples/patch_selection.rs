//! Scores every 64-pixel grid cell of a synthetic frame and lists the best.

use camid::patchqual::{candidate_grid, select_top_patches, QualityParams};
use camid::pipeline::SyntheticCameraSpec;

fn main() -> camid::Result<()> {
    let cam = &SyntheticCameraSpec::default_set(7)[0];
    let img = cam.render(0, 512);
    let q = QualityParams::default();
    let cells = candidate_grid(img.width(), img.height(), 64).len();
    println!(
        "{} candidate cells, best attainable score {:.4}",
        cells,
        q.max_score()
    );
    for (rank, p) in select_top_patches(&img, 64, 8, &q)?.iter().enumerate() {
        println!(
            "#{rank} at ({:3},{:3}) score {:.4}",
            p.region.x0, p.region.y0, p.score
        );
    }
    Ok(())
}
