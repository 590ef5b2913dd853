//! Post-processing transforms: JPEG recompression, bicubic resizing,
//! gamma correction and quarter-turn rotations.
//!
//! They double as training augmentations and as the manipulation classes
//! of the manipulation-detection task.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{extract_patch, Manipulation, RasterImage, Region};
use crate::jpeg::{self, ChromaSubsampling};

/// The fixed set of augmentation operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ManipSpec {
    JpegQ90,
    JpegQ70,
    Resize05,
    Resize08,
    Resize15,
    Resize20,
    Gamma08,
    Gamma12,
    Rot0,
    Rot90,
    Rot180,
    Rot270,
}

impl ManipSpec {
    pub const ALL: [ManipSpec; 12] = [
        ManipSpec::JpegQ90,
        ManipSpec::JpegQ70,
        ManipSpec::Resize05,
        ManipSpec::Resize08,
        ManipSpec::Resize15,
        ManipSpec::Resize20,
        ManipSpec::Gamma08,
        ManipSpec::Gamma12,
        ManipSpec::Rot0,
        ManipSpec::Rot90,
        ManipSpec::Rot180,
        ManipSpec::Rot270,
    ];

    /// The eight post-processing operations (rotations excluded).
    pub const POST_PROCESSING: [ManipSpec; 8] = [
        ManipSpec::JpegQ90,
        ManipSpec::JpegQ70,
        ManipSpec::Resize05,
        ManipSpec::Resize08,
        ManipSpec::Resize15,
        ManipSpec::Resize20,
        ManipSpec::Gamma08,
        ManipSpec::Gamma12,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManipSpec::JpegQ90 => "jpeg90",
            ManipSpec::JpegQ70 => "jpeg70",
            ManipSpec::Resize05 => "resize05",
            ManipSpec::Resize08 => "resize08",
            ManipSpec::Resize15 => "resize15",
            ManipSpec::Resize20 => "resize20",
            ManipSpec::Gamma08 => "gamma08",
            ManipSpec::Gamma12 => "gamma12",
            ManipSpec::Rot0 => "rot0",
            ManipSpec::Rot90 => "rot90",
            ManipSpec::Rot180 => "rot180",
            ManipSpec::Rot270 => "rot270",
        }
    }

    pub fn manipulation(self) -> Manipulation {
        match self {
            ManipSpec::JpegQ90 | ManipSpec::JpegQ70 => Manipulation::JpegCompressed,
            ManipSpec::Resize05
            | ManipSpec::Resize08
            | ManipSpec::Resize15
            | ManipSpec::Resize20 => Manipulation::Resized,
            ManipSpec::Gamma08 | ManipSpec::Gamma12 => Manipulation::GammaCorrected,
            ManipSpec::Rot0 | ManipSpec::Rot90 | ManipSpec::Rot180 | ManipSpec::Rot270 => {
                Manipulation::Unaltered
            }
        }
    }

    pub fn apply(self, image: &RasterImage) -> Result<RasterImage> {
        match self {
            ManipSpec::JpegQ90 => Ok(jpeg_compress(image, 90)),
            ManipSpec::JpegQ70 => Ok(jpeg_compress(image, 70)),
            ManipSpec::Resize05 => resize(image, 0.5),
            ManipSpec::Resize08 => resize(image, 0.8),
            ManipSpec::Resize15 => resize(image, 1.5),
            ManipSpec::Resize20 => resize(image, 2.0),
            ManipSpec::Gamma08 => Ok(gamma_correct(image, 0.8)),
            ManipSpec::Gamma12 => Ok(gamma_correct(image, 1.2)),
            ManipSpec::Rot0 => Ok(rotate(image, 0)),
            ManipSpec::Rot90 => Ok(rotate(image, 1)),
            ManipSpec::Rot180 => Ok(rotate(image, 2)),
            ManipSpec::Rot270 => Ok(rotate(image, 3)),
        }
    }
}

impl fmt::Display for ManipSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManipSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManipSpec::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown augmentation `{s}`")))
    }
}

/// JPEG round trip at IJG `quality` with 4:2:0 chroma.
pub fn jpeg_compress(image: &RasterImage, quality: u8) -> RasterImage {
    jpeg_compress_with(image, quality, ChromaSubsampling::Yuv420)
}

pub fn jpeg_compress_with(
    image: &RasterImage,
    quality: u8,
    subsampling: ChromaSubsampling,
) -> RasterImage {
    let bytes = jpeg::encode(image, quality, subsampling);
    jpeg::decode(&bytes).expect("decoding our own baseline stream")
}

const CUBIC_A: f64 = -0.5;

fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((CUBIC_A + 2.0) * t - (CUBIC_A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((CUBIC_A * t - 5.0 * CUBIC_A) * t + 8.0 * CUBIC_A) * t - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// For each output index: the four source taps (clamped) and their weights.
fn taps(out_len: usize, in_len: usize, factor: f64) -> Vec<([usize; 4], [f64; 4])> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let pos = base as i64 - 1 + k as i64;
                idx[k] = pos.clamp(0, in_len as i64 - 1) as usize;
                w[k] = cubic_weight(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic convolution resize (a = -0.5) with edge-clamped sampling.
/// Output dimensions are floor(factor * dim).
pub fn resize(image: &RasterImage, factor: f64) -> Result<RasterImage> {
    let (w, h) = (image.width(), image.height());
    let ow = (factor * w as f64).floor();
    let oh = (factor * h as f64).floor();
    if !(factor > 0.0) || ow < 1.0 || oh < 1.0 {
        return Err(Error::OutputTooSmall {
            width: w,
            height: h,
            factor,
        });
    }
    let (ow, oh) = (ow as usize, oh as usize);
    let xt = taps(ow, w, factor);
    let yt = taps(oh, h, factor);
    let src = image.data();

    // Horizontal pass into f64 rows, then vertical pass.
    let mut horiz = vec![0.0f64; ow * h * 3];
    for y in 0..h {
        let row = &src[y * w * 3..(y + 1) * w * 3];
        for (ox, (idx, wt)) in xt.iter().enumerate() {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += wt[k] * f64::from(row[idx[k] * 3 + c]);
                }
                horiz[(y * ow + ox) * 3 + c] = s;
            }
        }
    }
    let mut out = Vec::with_capacity(ow * oh * 3);
    for (idx, wt) in &yt {
        for i in 0..ow * 3 {
            let mut s = 0.0;
            for k in 0..4 {
                s += wt[k] * horiz[idx[k] * ow * 3 + i];
            }
            out.push(s.round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(ow, oh, out)
}

/// Centered `size`x`size` crop; returns the input unchanged when it is
/// already smaller than `size` in either dimension.
pub fn center_crop(image: &RasterImage, size: usize) -> RasterImage {
    if image.width() < size || image.height() < size {
        return image.clone();
    }
    let region = Region::new(
        (image.width() - size) / 2,
        (image.height() - size) / 2,
        size,
    );
    extract_patch(image, region).expect("centered region is in bounds")
}

/// out = round(255 * (in / 255)^gamma), applied to every sample.
pub fn gamma_correct(image: &RasterImage, gamma: f64) -> RasterImage {
    let mut lut = [0u8; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        *v = (255.0 * (i as f64 / 255.0).powf(gamma))
            .round()
            .clamp(0.0, 255.0) as u8;
    }
    let data = image.data().iter().map(|&s| lut[s as usize]).collect();
    RasterImage::new(image.width(), image.height(), data).expect("same dimensions")
}

/// Rotates clockwise by `quarter_turns` x 90 degrees (taken mod 4).
pub fn rotate(image: &RasterImage, quarter_turns: u8) -> RasterImage {
    let (w, h) = (image.width(), image.height());
    let turns = quarter_turns % 4;
    if turns == 0 {
        return image.clone();
    }
    let (ow, oh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    RasterImage::from_fn(ow, oh, |x, y| {
        let (sx, sy) = match turns {
            1 => (y, h - 1 - x),
            2 => (w - 1 - x, h - 1 - y),
            _ => (w - 1 - y, x),
        };
        image.pixel(sx, sy)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(w: usize, h: usize) -> RasterImage {
        RasterImage::from_fn(w, h, |x, y| {
            [
                (x * 7 + y) as u8,
                (y * 13 + x * x) as u8,
                ((x ^ y) * 5) as u8,
            ]
        })
    }

    #[test]
    fn gamma_identity_and_endpoints() {
        let img = sample(20, 9);
        assert_eq!(gamma_correct(&img, 1.0), img);
        let ends = RasterImage::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        for g in [0.8, 1.2, 2.2, 0.3] {
            assert_eq!(gamma_correct(&ends, g), ends);
        }
    }

    #[test]
    fn gamma_point_value() {
        // round(255 * (64/255)^0.8) = 84
        let img = RasterImage::filled(1, 1, [64; 3]);
        assert_eq!(gamma_correct(&img, 0.8).data(), &[84, 84, 84]);
    }

    #[test]
    fn rotation_group() {
        let img = sample(7, 4);
        let r1 = rotate(&img, 1);
        assert_eq!((r1.width(), r1.height()), (4, 7));
        assert_eq!(rotate(&r1, 3), img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate(&r, 1);
        }
        assert_eq!(r, img);
        assert_eq!(rotate(&rotate(&img, 2), 2), img);
    }

    #[test]
    fn rotation_direction() {
        // Top-left pixel moves to the top-right corner on a clockwise turn.
        let img = sample(3, 2);
        let r = rotate(&img, 1);
        assert_eq!(r.pixel(1, 0), img.pixel(0, 0));
    }

    #[test]
    fn resize_dimensions() {
        let img = RasterImage::filled(512, 512, [3; 3]);
        let r = resize(&img, 0.5).unwrap();
        assert_eq!((r.width(), r.height()), (256, 256));
        let odd = sample(25, 13);
        for (f, (w, h)) in [(0.8, (20, 10)), (1.5, (37, 19)), (2.0, (50, 26))] {
            let r = resize(&odd, f).unwrap();
            assert_eq!((r.width(), r.height()), (w, h));
        }
        assert!(matches!(
            resize(&odd, 0.01),
            Err(Error::OutputTooSmall { .. })
        ));
        assert!(resize(&odd, -1.0).is_err());
    }

    #[test]
    fn resize_identity_and_uniform() {
        let img = sample(31, 17);
        assert_eq!(resize(&img, 1.0).unwrap(), img);
        let flat = RasterImage::filled(40, 30, [17, 200, 99]);
        for f in [0.5, 0.8, 1.5, 2.0, 0.37, 3.3] {
            let r = resize(&flat, f).unwrap();
            assert!(
                r.data().chunks_exact(3).all(|p| p == [17, 200, 99]),
                "factor {f}"
            );
        }
    }

    #[test]
    fn kernel_partition_of_unity() {
        for i in 0..100 {
            let f = i as f64 / 100.0;
            let s: f64 = (0..4).map(|k| cubic_weight(f - (k as f64 - 1.0))).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_names_round_trip() {
        for m in ManipSpec::ALL {
            assert_eq!(m.name().parse::<ManipSpec>().unwrap(), m);
        }
        assert!("jpeg50".parse::<ManipSpec>().is_err());
    }

    #[test]
    fn center_crop_is_centered() {
        let img = sample(10, 8);
        let c = center_crop(&img, 4);
        assert_eq!(c.pixel(0, 0), img.pixel(3, 2));
    }
}
