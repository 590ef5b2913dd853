//! RGB rasters, patch geometry, and channel statistics.
//!
//! Every stage works on one layout: row-major, interleaved 8-bit RGB.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::jpeg;

/// Patch sizes the network pipeline accepts.
pub const PATCH_SIZES: [usize; 3] = [64, 128, 256];

/// An immutable 8-bit RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RasterImage({}x{})", self.width, self.height)
    }
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        RasterImage {
            width,
            height,
            data,
        }
    }

    /// Builds an image from a per-pixel function.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RasterImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One channel as a row-major plane of raw sample values.
    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(channel)
            .step_by(3)
            .map(|&v| f64::from(v))
            .collect()
    }

    /// Reassembles an image from three planes, rounding and clamping to 8 bits.
    pub fn from_planes(width: usize, height: usize, planes: [&[f64]; 3]) -> Result<Self> {
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::ShapeMismatch(
                "plane size differs from image size".into(),
            ));
        }
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            for p in &planes {
                data.push(p[i].round().clamp(0.0, 255.0) as u8);
            }
        }
        RasterImage::new(width, height, data)
    }

    pub fn contains(&self, region: Region) -> bool {
        region.x0 + region.size <= self.width && region.y0 + region.size <= self.height
    }

    fn check(&self, region: Region) -> Result<()> {
        if self.contains(region) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x0: region.x0,
                y0: region.y0,
                size: region.size,
                width: self.width,
                height: self.height,
            })
        }
    }
}

/// A square window into an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl Region {
    pub fn new(x0: usize, y0: usize, size: usize) -> Self {
        Region { x0, y0, size }
    }

    pub fn full(image: &RasterImage) -> Self {
        Region::new(0, 0, image.width().min(image.height()))
    }
}

/// Post-processing applied to an image before it reached the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    #[default]
    Unaltered,
    JpegCompressed,
    GammaCorrected,
    Resized,
    EmdResidue,
}

impl Manipulation {
    /// Class index in the four-way manipulation task, if the tag is one of
    /// its classes (unaltered, jpeg, gamma, resized).
    pub fn manipulation_class(self) -> Option<usize> {
        match self {
            Manipulation::Unaltered => Some(0),
            Manipulation::JpegCompressed => Some(1),
            Manipulation::GammaCorrected => Some(2),
            Manipulation::Resized => Some(3),
            Manipulation::EmdResidue => None,
        }
    }

    pub const CLASS_NAMES: [&'static str; 4] = ["unaltered", "jpeg", "gamma", "resized"];

    pub fn is_manipulated(self) -> bool {
        !matches!(self, Manipulation::Unaltered | Manipulation::EmdResidue)
    }
}

/// A patch of a source image with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub source_id: String,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub label: usize,
    #[serde(default)]
    pub manipulation: Manipulation,
}

impl PatchRef {
    pub fn new(
        source_id: impl Into<String>,
        region: Region,
        label: usize,
        manipulation: Manipulation,
    ) -> Result<Self> {
        if !PATCH_SIZES.contains(&region.size) {
            return Err(Error::BadPatchSize(region.size));
        }
        Ok(PatchRef {
            source_id: source_id.into(),
            x0: region.x0,
            y0: region.y0,
            size: region.size,
            label,
            manipulation,
        })
    }

    pub fn region(&self) -> Region {
        Region::new(self.x0, self.y0, self.size)
    }
}

/// Per-channel mean and standard deviation of samples scaled to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub stddev: [f64; 3],
}

/// Population mean and standard deviation per channel over `region`.
///
/// Sums are accumulated in integers, so the result does not depend on
/// traversal order (rotated patches give bit-identical statistics).
pub fn channel_stats(image: &RasterImage, region: Region) -> Result<ChannelStats> {
    image.check(region)?;
    let mut sum = [0u64; 3];
    let mut sq = [0u64; 3];
    for y in region.y0..region.y0 + region.size {
        let start = (y * image.width + region.x0) * 3;
        for px in image.data[start..start + region.size * 3].chunks_exact(3) {
            for c in 0..3 {
                let v = u64::from(px[c]);
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let n = (region.size * region.size) as u128;
    let mut stats = ChannelStats {
        mean: [0.0; 3],
        stddev: [0.0; 3],
    };
    if n == 0 {
        return Ok(stats);
    }
    for c in 0..3 {
        let s = u128::from(sum[c]);
        let var_num = n * u128::from(sq[c]) - s * s;
        let scale = n as f64 * 255.0;
        stats.mean[c] = s as f64 / scale;
        stats.stddev[c] = (var_num as f64).sqrt() / scale;
    }
    Ok(stats)
}

/// Copies `region` out of `image`.
pub fn extract_patch(image: &RasterImage, region: Region) -> Result<RasterImage> {
    image.check(region)?;
    let mut data = Vec::with_capacity(region.size * region.size * 3);
    for y in region.y0..region.y0 + region.size {
        let start = (y * image.width + region.x0) * 3;
        data.extend_from_slice(&image.data[start..start + region.size * 3]);
    }
    RasterImage::new(region.size, region.size, data)
}

/// Decodes PNG (RGB8) or baseline JPEG bytes.
pub fn decode_bytes(bytes: &[u8]) -> Result<RasterImage> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else if bytes.starts_with(&[0xff, 0xd8]) {
        jpeg::decode(bytes)
    } else {
        Err(Error::UnsupportedFormat("neither PNG nor JPEG".into()))
    }
}

pub fn decode_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).at(path)?;
    decode_bytes(&bytes)
}

fn decode_png(bytes: &[u8]) -> Result<RasterImage> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::CorruptStream(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "PNG {:?}/{:?} (RGB8 required)",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptStream(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    RasterImage::new(w, h, buf)
}

pub fn encode_png(image: &RasterImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        // Writing to a Vec cannot fail for well-formed dimensions.
        let mut writer = enc.write_header().expect("png header");
        writer.write_image_data(&image.data).expect("png data");
    }
    out
}

pub fn save_png(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(image)).at(path)
}
