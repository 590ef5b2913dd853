//! Patch quality scoring and top-K patch selection.
//!
//! The score rewards mid-range mean intensity and non-zero spread, so
//! saturated and flat patches score low:
//!
//! Q = 1/3 * sum_c [ alpha * beta * (mu_c - mu_c^2) + (1 - alpha) * (1 - exp(gamma * sigma_c)) ]
//!
//! with mu_c, sigma_c the per-channel mean and standard deviation of the
//! patch scaled to [0, 1].

use crate::error::{Error, Result};
use crate::image::{channel_stats, ChannelStats, Manipulation, PatchRef, RasterImage, Region};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_q: f64,
}

impl Default for QualityParams {
    fn default() -> Self {
        QualityParams {
            alpha: 0.7,
            beta: 4.0,
            gamma_q: 0.01f64.ln(),
        }
    }
}

impl QualityParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || self.beta <= 0.0 || self.gamma_q >= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "quality params need 0<=alpha<=1, beta>0, gamma<0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Largest attainable score: alpha*beta/4 + (1 - alpha).
    pub fn max_score(&self) -> f64 {
        self.alpha * self.beta / 4.0 + (1.0 - self.alpha)
    }
}

/// Score from precomputed channel statistics.
pub fn quality_from_stats(stats: &ChannelStats, params: &QualityParams) -> f64 {
    let mut total = 0.0;
    for c in 0..3 {
        let mu = stats.mean[c];
        let sigma = stats.stddev[c];
        total += params.alpha * params.beta * (mu - mu * mu)
            + (1.0 - params.alpha) * (1.0 - (params.gamma_q * sigma).exp());
    }
    total / 3.0
}

/// Quality of a whole (square) patch image.
pub fn quality(patch: &RasterImage, params: &QualityParams) -> f64 {
    let region = Region::new(0, 0, patch.width().min(patch.height()));
    let stats = channel_stats(patch, region).expect("full-patch region is in bounds");
    quality_from_stats(&stats, params)
}

/// Quality of `region` within `image`.
pub fn region_quality(image: &RasterImage, region: Region, params: &QualityParams) -> Result<f64> {
    Ok(quality_from_stats(&channel_stats(image, region)?, params))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPatch {
    pub region: Region,
    pub score: f64,
}

impl ScoredPatch {
    pub fn to_patch_ref(
        &self,
        source_id: &str,
        label: usize,
        manipulation: Manipulation,
    ) -> Result<PatchRef> {
        PatchRef::new(source_id, self.region, label, manipulation)
    }
}

/// Candidate windows: a non-overlapping grid with stride `size`, in raster order.
pub fn candidate_grid(width: usize, height: usize, size: usize) -> Vec<Region> {
    if size == 0 || width < size || height < size {
        return Vec::new();
    }
    let mut out = Vec::new();
    for y0 in (0..=height - size).step_by(size) {
        for x0 in (0..=width - size).step_by(size) {
            out.push(Region::new(x0, y0, size));
        }
    }
    out
}

/// Scores every grid cell and returns the `k` best, highest first.
/// Ties keep raster order.
pub fn select_top_patches(
    image: &RasterImage,
    size: usize,
    k: usize,
    params: &QualityParams,
) -> Result<Vec<ScoredPatch>> {
    if size == 0 || image.width() < size || image.height() < size {
        return Err(Error::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            size,
        });
    }
    let mut scored = candidate_grid(image.width(), image.height(), size)
        .into_iter()
        .map(|region| {
            Ok(ScoredPatch {
                region,
                score: region_quality(image, region, params)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    scored.truncate(k);
    Ok(scored)
}
