use camid::image::{decode_bytes, encode_png};
use camid::jpeg::{self, ChromaSubsampling};
use camid::RasterImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zune_core::colorspace::ColorSpace;
use zune_core::options::DecoderOptions;
use zune_jpeg::JpegDecoder;

fn textured(seed: u64, w: usize, h: usize) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    RasterImage::from_fn(w, h, |x, y| {
        let base = 128.0
            + 80.0 * ((x as f64) * 0.07 * (1.0 + a)).sin() * ((y as f64) * 0.05 * (1.0 + b)).cos();
        let n = rng.gen_range(-20.0..20.0);
        [
            (base + n).clamp(0.0, 255.0) as u8,
            (base * 0.8 + 30.0 * c + n).clamp(0.0, 255.0) as u8,
            (255.0 - base + n).clamp(0.0, 255.0) as u8,
        ]
    })
}

fn reference_decode(bytes: &[u8], raw: bool) -> Vec<u8> {
    let space = if raw {
        ColorSpace::YCbCr
    } else {
        ColorSpace::RGB
    };
    let options = DecoderOptions::default().jpeg_set_out_colorspace(space);
    JpegDecoder::new_with_options(bytes, options)
        .decode()
        .unwrap()
}

fn max_abs_diff(a: &[u8], b: &[u8]) -> u8 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x.abs_diff(y)).max().unwrap()
}

// Component samples after the IDCT agree within one level. With 4:2:0 only
// luma is compared: the reference upsamples chroma with a two-pass rounded
// filter instead of libjpeg's single-pass triangle filter.
#[test]
fn decoder_matches_reference_within_one() {
    let dims = [
        (64, 64),
        (100, 75),
        (33, 17),
        (256, 128),
        (8, 8),
        (129, 130),
        (50, 50),
        (16, 200),
        (97, 31),
        (64, 48),
    ];
    for (i, &(w, h)) in dims.iter().enumerate() {
        let img = textured(i as u64, w, h);
        for q in [90, 70] {
            let bytes = jpeg::encode(&img, q, ChromaSubsampling::Yuv444);
            let (_, _, ours) = jpeg::decode_ycbcr(&bytes).unwrap();
            let worst = max_abs_diff(&ours, &reference_decode(&bytes, true));
            assert!(
                worst <= 1,
                "image {i} ({w}x{h}) q{q} 4:4:4: max diff {worst}"
            );

            let bytes = jpeg::encode(&img, q, ChromaSubsampling::Yuv420);
            let (_, _, ours) = jpeg::decode_ycbcr(&bytes).unwrap();
            let reference = reference_decode(&bytes, true);
            let luma = |v: &[u8]| v.iter().step_by(3).copied().collect::<Vec<_>>();
            let worst = max_abs_diff(&luma(&ours), &luma(&reference));
            assert!(
                worst <= 1,
                "image {i} ({w}x{h}) q{q} 4:2:0 luma: max diff {worst}"
            );
        }
    }
}

// After color conversion a one-level component difference can grow to
// 1 + 1.772 levels in blue, so RGB agreement is bounded by 3.
#[test]
fn rgb_decode_close_to_reference() {
    for seed in 20..25 {
        let img = textured(seed, 96, 80);
        let bytes = jpeg::encode(&img, 85, ChromaSubsampling::Yuv444);
        let ours = jpeg::decode(&bytes).unwrap();
        assert!(max_abs_diff(ours.data(), &reference_decode(&bytes, false)) <= 3);
    }
}

#[test]
fn truncated_stream_is_corrupt() {
    let bytes = jpeg::encode(&textured(3, 64, 64), 80, ChromaSubsampling::Yuv420);
    let cut = &bytes[..bytes.len() / 2];
    assert!(matches!(
        decode_bytes(cut),
        Err(camid::Error::CorruptStream(_))
    ));
}

#[test]
fn uniform_gray_survives_any_quality() {
    let img = RasterImage::filled(40, 24, [120, 120, 120]);
    for q in [10, 50, 70, 90, 100] {
        let out = jpeg::decode(&jpeg::encode(&img, q, ChromaSubsampling::Yuv420)).unwrap();
        let lo = *out.data().iter().min().unwrap();
        let hi = *out.data().iter().max().unwrap();
        assert!(hi - lo <= 1, "q{q}: {lo}..{hi}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn png_is_lossless(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let img = RasterImage::new(w, h, data).unwrap();
        prop_assert_eq!(decode_bytes(&encode_png(&img)).unwrap(), img);
    }
}
