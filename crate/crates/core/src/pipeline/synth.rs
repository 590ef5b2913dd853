use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRow};
use crate::augment::jpeg_compress;
use crate::error::{Error, IoContext, Result};
use crate::image::{save_png, RasterImage};

/// Bayer layout, named by the colours of the top-left 2x2 cell in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CfaPattern {
    Rggb,
    Grbg,
    Gbrg,
    Bggr,
}

impl CfaPattern {
    /// Channel sampled at (x, y).
    pub fn channel_at(self, x: usize, y: usize) -> usize {
        let cell = match self {
            CfaPattern::Rggb => [0, 1, 1, 2],
            CfaPattern::Grbg => [1, 0, 2, 1],
            CfaPattern::Gbrg => [1, 2, 0, 1],
            CfaPattern::Bggr => [2, 1, 1, 0],
        };
        cell[(y % 2) * 2 + x % 2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemosaicKind {
    Bilinear,
    SmoothHue,
    Nearest,
}

impl FromStr for CfaPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "rggb" => CfaPattern::Rggb,
            "grbg" => CfaPattern::Grbg,
            "gbrg" => CfaPattern::Gbrg,
            "bggr" => CfaPattern::Bggr,
            _ => return Err(Error::InvalidConfig(format!("unknown CFA pattern {s:?}"))),
        })
    }
}

impl FromStr for DemosaicKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "bilinear" => DemosaicKind::Bilinear,
            "smooth-hue" => DemosaicKind::SmoothHue,
            "nearest" => DemosaicKind::Nearest,
            _ => return Err(Error::InvalidConfig(format!("unknown demosaic kind {s:?}"))),
        })
    }
}

/// A simulated camera model: sensor layout, interpolation, noise and native
/// JPEG quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCameraSpec {
    pub model_id: String,
    pub cfa: CfaPattern,
    pub demosaic: DemosaicKind,
    pub noise_sigma: f64,
    pub jpeg_quality: u8,
    pub seed: u64,
}

impl SyntheticCameraSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "{}: noise sigma must be >= 0",
                self.model_id
            )));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::InvalidSpec(format!(
                "{}: JPEG quality must be in 1..=100",
                self.model_id
            )));
        }
        Ok(())
    }

    /// Four cameras that differ in interpolation, noise and compression.
    pub fn default_set(seed: u64) -> Vec<SyntheticCameraSpec> {
        let mk = |id: &str, cfa, demosaic, noise_sigma, jpeg_quality, k: u64| SyntheticCameraSpec {
            model_id: id.to_string(),
            cfa,
            demosaic,
            noise_sigma,
            jpeg_quality,
            seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k),
        };
        vec![
            mk(
                "cam_a",
                CfaPattern::Rggb,
                DemosaicKind::Bilinear,
                1.0,
                95,
                1,
            ),
            mk(
                "cam_b",
                CfaPattern::Grbg,
                DemosaicKind::SmoothHue,
                2.0,
                90,
                2,
            ),
            mk("cam_c", CfaPattern::Bggr, DemosaicKind::Nearest, 0.5, 85, 3),
            mk(
                "cam_d",
                CfaPattern::Gbrg,
                DemosaicKind::Bilinear,
                3.0,
                92,
                4,
            ),
        ]
    }

    /// Renders image `index` of this camera.
    pub fn render(&self, index: usize, size: usize) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
        );
        let scene = random_scene(size, size, &mut rng);
        let mosaic = mosaic(&scene, size, size, self.cfa);
        let mut rgb = demosaic(&mosaic, size, size, self.cfa, self.demosaic);
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma checked");
            for v in &mut rgb {
                *v += normal.sample(&mut rng);
            }
        }
        let data = rgb
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = RasterImage::new(size, size, data).expect("buffer sized to image");
        jpeg_compress(&img, self.jpeg_quality)
    }
}

/// Smooth gradients, soft blobs, a few edges, band-limited noise and fine
/// pixel-scale texture.
/// Interleaved RGB in [0, 255].
pub fn random_scene(width: usize, height: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; width * height * 3];
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(60.0..190.0));
    let grad: [[f64; 2]; 3] =
        std::array::from_fn(|_| [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0)]);
    struct Blob {
        cx: f64,
        cy: f64,
        r: f64,
        color: [f64; 3],
        hard: bool,
    }
    let blobs: Vec<Blob> = (0..rng.gen_range(4..10))
        .map(|_| Blob {
            cx: rng.gen_range(0.0..width as f64),
            cy: rng.gen_range(0.0..height as f64),
            r: rng.gen_range(0.05..0.3) * width.max(height) as f64,
            color: std::array::from_fn(|_| rng.gen_range(-70.0..70.0)),
            hard: rng.gen_bool(0.5),
        })
        .collect();

    // Band-limited noise: a coarse random lattice, bilinearly upsampled.
    let cell = 8usize;
    let (lw, lh) = (width / cell + 2, height / cell + 2);
    let lattice: Vec<f64> = (0..lw * lh * 3)
        .map(|_| rng.gen_range(-18.0..18.0))
        .collect();
    let freq = [rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4)];
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.0..20.0);

    // Fine texture: white noise under a [1, 2, 1] binomial blur, mostly
    // shared across channels like real luminance detail.
    let tex_amp = rng.gen_range(4.0..16.0);
    let white: Vec<f64> = (0..width * height * 4)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let texture = fine_texture(&white, width, height);

    for y in 0..height {
        let (fy, ty) = ((y / cell), (y % cell) as f64 / cell as f64);
        for x in 0..width {
            let (fx, tx) = ((x / cell), (x % cell) as f64 / cell as f64);
            let u = x as f64 / width as f64 - 0.5;
            let v = y as f64 / height as f64 - 0.5;
            let wave = amp * (freq[0] * x as f64 + freq[1] * y as f64 + phase).sin();
            for c in 0..3 {
                let mut val = base[c] + grad[c][0] * u + grad[c][1] * v + wave;
                for b in &blobs {
                    let d = ((x as f64 - b.cx).powi(2) + (y as f64 - b.cy).powi(2)).sqrt() / b.r;
                    let w = if b.hard {
                        (d < 1.0) as u8 as f64
                    } else {
                        (-d * d).exp()
                    };
                    val += w * b.color[c];
                }
                let l = |ix: usize, iy: usize| lattice[(iy * lw + ix) * 3 + c];
                val += (1.0 - ty) * ((1.0 - tx) * l(fx, fy) + tx * l(fx + 1, fy))
                    + ty * ((1.0 - tx) * l(fx, fy + 1) + tx * l(fx + 1, fy + 1));
                let t = &texture[(y * width + x) * 4..];
                val += tex_amp * (t[0] + 0.3 * t[1 + c]);
                out[(y * width + x) * 3 + c] = val.clamp(0.0, 255.0);
            }
        }
    }
    out
}

/// Blurs four interleaved white-noise planes with a separable [1, 2, 1]
/// kernel (clamped at the border) and rescales each to unit variance.
fn fine_texture(white: &[f64], width: usize, height: usize) -> Vec<f64> {
    let blur = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let (a, b) = if horizontal {
                    (
                        (y * width + x.saturating_sub(1)),
                        (y * width + (x + 1).min(width - 1)),
                    )
                } else {
                    (
                        (y.saturating_sub(1) * width + x),
                        ((y + 1).min(height - 1) * width + x),
                    )
                };
                let i = y * width + x;
                for k in 0..4 {
                    out[i * 4 + k] =
                        0.25 * src[a * 4 + k] + 0.5 * src[i * 4 + k] + 0.25 * src[b * 4 + k];
                }
            }
        }
        out
    };
    // Variance of U(-1,1) is 1/3; the 2D kernel keeps (3/8)^2 of it.
    let scale = (3.0f64 * 64.0 / 9.0).sqrt();
    blur(&blur(white, true), false)
        .into_iter()
        .map(|v| v * scale)
        .collect()
}

/// Keeps one channel per pixel according to the CFA.
pub fn mosaic(rgb: &[f64], width: usize, height: usize, cfa: CfaPattern) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = rgb[(y * width + x) * 3 + cfa.channel_at(x, y)];
        }
    }
    out
}

/// Average of the samples of `channel` in the 3x3 window around (x, y).
fn neighbour_mean(
    w: usize,
    h: usize,
    cfa: CfaPattern,
    x: usize,
    y: usize,
    channel: usize,
    f: impl Fn(usize, usize) -> f64,
) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            if cfa.channel_at(xx, yy) == channel {
                sum += f(xx, yy);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Reconstructs interleaved RGB from a Bayer mosaic.
pub fn demosaic(
    raw: &[f64],
    width: usize,
    height: usize,
    cfa: CfaPattern,
    kind: DemosaicKind,
) -> Vec<f64> {
    let (w, h) = (width, height);
    let mut out = vec![0.0; w * h * 3];
    let at = |x: usize, y: usize| raw[y * w + x];
    match kind {
        DemosaicKind::Nearest => {
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = (x & !1, y & !1);
                    for c in 0..3 {
                        // Sample of colour c in this pixel's 2x2 cell; for green
                        // prefer the one on the pixel's own row.
                        let mut val = None;
                        for (dx, dy) in [
                            (x - cx, y - cy),
                            (1 - (x - cx), y - cy),
                            (x - cx, 1 - (y - cy)),
                            (1 - (x - cx), 1 - (y - cy)),
                        ] {
                            let (sx, sy) = ((cx + dx).min(w - 1), (cy + dy).min(h - 1));
                            if cfa.channel_at(sx, sy) == c {
                                val = Some(at(sx, sy));
                                break;
                            }
                        }
                        out[(y * w + x) * 3 + c] =
                            val.unwrap_or_else(|| neighbour_mean(w, h, cfa, x, y, c, at));
                    }
                }
            }
        }
        DemosaicKind::Bilinear => {
            for y in 0..h {
                for x in 0..w {
                    let own = cfa.channel_at(x, y);
                    for c in 0..3 {
                        out[(y * w + x) * 3 + c] = if c == own {
                            at(x, y)
                        } else {
                            neighbour_mean(w, h, cfa, x, y, c, at)
                        };
                    }
                }
            }
        }
        DemosaicKind::SmoothHue => {
            let mut green = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    green[y * w + x] = if cfa.channel_at(x, y) == 1 {
                        at(x, y)
                    } else {
                        neighbour_mean(w, h, cfa, x, y, 1, at)
                    };
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let own = cfa.channel_at(x, y);
                    let g = green[y * w + x];
                    out[(y * w + x) * 3 + 1] = g;
                    for c in [0, 2] {
                        out[(y * w + x) * 3 + c] = if c == own {
                            at(x, y)
                        } else {
                            // Interpolate the hue ratio rather than the colour.
                            let hue = neighbour_mean(w, h, cfa, x, y, c, |xx, yy| {
                                (at(xx, yy) + 1.0) / (green[yy * w + xx] + 1.0)
                            });
                            hue * (g + 1.0) - 1.0
                        };
                    }
                }
            }
        }
    }
    out
}

/// Renders `images_per_camera` images per camera into `out_dir` as PNG and
/// writes `out_dir/manifest.jsonl`. Labels follow the order of `cameras`.
pub fn generate_synthetic_dataset(
    cameras: &[SyntheticCameraSpec],
    images_per_camera: usize,
    size: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    use rayon::prelude::*;
    let out_dir = out_dir.as_ref();
    if cameras.len() < 2 {
        return Err(Error::InvalidSpec("need at least two camera models".into()));
    }
    for (i, c) in cameras.iter().enumerate() {
        c.validate()?;
        for d in &cameras[..i] {
            if d.model_id == c.model_id {
                return Err(Error::InvalidSpec(format!(
                    "duplicate model id {}",
                    c.model_id
                )));
            }
            if (d.cfa, d.demosaic, d.noise_sigma, d.jpeg_quality)
                == (c.cfa, c.demosaic, c.noise_sigma, c.jpeg_quality)
            {
                return Err(Error::InvalidSpec(format!(
                    "{} and {} differ only in seed",
                    d.model_id, c.model_id
                )));
            }
        }
    }
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let jobs: Vec<(usize, usize)> = (0..cameras.len())
        .flat_map(|c| (0..images_per_camera).map(move |i| (c, i)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(c, i)| {
            let cam = &cameras[c];
            let path = out_dir.join(format!("{}_{i:04}.png", cam.model_id));
            save_png(&cam.render(i, size), &path)?;
            let mut row = ManifestRow::new(path, &format!("{}_{i:04}", cam.model_id), c);
            row.device_id = cam.model_id.clone();
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(rows);
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

impl fmt::Display for SyntheticCameraSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({:?}, {:?}, sigma {}, q{})",
            self.model_id, self.cfa, self.demosaic, self.noise_sigma, self.jpeg_quality
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cfa_cells() {
        for cfa in [
            CfaPattern::Rggb,
            CfaPattern::Grbg,
            CfaPattern::Gbrg,
            CfaPattern::Bggr,
        ] {
            let mut counts = [0; 3];
            for y in 0..2 {
                for x in 0..2 {
                    counts[cfa.channel_at(x, y)] += 1;
                }
            }
            assert_eq!(counts, [1, 2, 1]);
        }
        assert_eq!(CfaPattern::Bggr.channel_at(0, 0), 2);
        assert_eq!(CfaPattern::Grbg.channel_at(1, 0), 0);
    }

    #[test]
    fn flat_scene_survives_every_demosaic() {
        let (w, h) = (9, 7);
        let rgb: Vec<f64> = (0..w * h).flat_map(|_| [40.0, 120.0, 200.0]).collect();
        for cfa in [CfaPattern::Rggb, CfaPattern::Gbrg] {
            let raw = mosaic(&rgb, w, h, cfa);
            for kind in [
                DemosaicKind::Bilinear,
                DemosaicKind::SmoothHue,
                DemosaicKind::Nearest,
            ] {
                let out = demosaic(&raw, w, h, cfa, kind);
                for (a, b) in out.iter().zip(&rgb) {
                    assert!((a - b).abs() < 1e-9, "{cfa:?} {kind:?}");
                }
            }
        }
    }

    #[test]
    fn known_samples_are_kept() {
        let (w, h) = (8, 8);
        let raw: Vec<f64> = (0..w * h).map(|i| (i * 7 % 255) as f64).collect();
        for kind in [
            DemosaicKind::Bilinear,
            DemosaicKind::SmoothHue,
            DemosaicKind::Nearest,
        ] {
            let out = demosaic(&raw, w, h, CfaPattern::Grbg, kind);
            for y in 0..h {
                for x in 0..w {
                    let c = CfaPattern::Grbg.channel_at(x, y);
                    assert!((out[(y * w + x) * 3 + c] - raw[y * w + x]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_varied() {
        let cam = &SyntheticCameraSpec::default_set(7)[1];
        assert_eq!(cam.render(3, 64), cam.render(3, 64));
        assert_ne!(cam.render(3, 64), cam.render(4, 64));
    }

    #[test]
    fn parsing() {
        assert_eq!("GRBG".parse::<CfaPattern>().unwrap(), CfaPattern::Grbg);
        assert_eq!(
            "smooth_hue".parse::<DemosaicKind>().unwrap(),
            DemosaicKind::SmoothHue
        );
        assert!("xyz".parse::<CfaPattern>().is_err());
    }
}
