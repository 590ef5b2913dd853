//! Multi-scale fusion, squeeze-and-excitation gating and the classification
//! head that sits on top of a frozen extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::densenet::DenseNet;
use crate::error::{Error, Result};
use crate::image::{extract_patch, RasterImage, Region};
use crate::netcore::{
    add_bias, dense, dropout, fan_in_uniform, matmul, mean_rows, mul_rows, relu, sigmoid, softmax,
    ForwardCtx, ParamId, ParamStore, Tensor,
};
use crate::patchqual::{select_top_patches, QualityParams};
use crate::weights::config_digest;

pub const FUSED_ROWS: usize = 3;
pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_DROPOUT: f64 = 0.3;

/// `3 x F` matrix: the 256 feature, the mean of the four 128 quadrants and
/// the mean of the sixteen 64 tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub feature_len: usize,
    pub values: Vec<f64>,
}

impl FusedFeature {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.feature_len..(i + 1) * self.feature_len]
    }
}

/// Disjoint `size` tiles of a 256 patch in raster order.
pub fn tiles(patch: &RasterImage, size: usize) -> Vec<RasterImage> {
    let per_side = patch.width() / size;
    let mut out = Vec::with_capacity(per_side * per_side);
    for ty in 0..per_side {
        for tx in 0..per_side {
            out.push(
                extract_patch(patch, Region::new(tx * size, ty * size, size))
                    .expect("tile inside patch"),
            );
        }
    }
    out
}

fn mean_of(features: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; features[0].len()];
    for f in features {
        for (a, v) in acc.iter_mut().zip(f) {
            *a += v;
        }
    }
    let n = features.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Fuses one 256x256 patch with a shared eval-mode extractor.
pub fn fuse(extractor: &DenseNet, patch256: &RasterImage) -> Result<FusedFeature> {
    Ok(fuse_batch(extractor, &[patch256])?
        .pop()
        .expect("one fused feature per patch"))
}

/// Batched [`fuse`]: each scale goes through the extractor as one batch.
pub fn fuse_batch(extractor: &DenseNet, patches: &[&RasterImage]) -> Result<Vec<FusedFeature>> {
    for p in patches {
        if p.width() != 256 || p.height() != 256 {
            return Err(Error::BadPatchSize(if p.width() != 256 {
                p.width()
            } else {
                p.height()
            }));
        }
    }
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let f = extractor.feature_len();
    let full = extractor.extract_features(patches)?;
    let quads: Vec<RasterImage> = patches.iter().flat_map(|p| tiles(p, 128)).collect();
    let small: Vec<RasterImage> = patches.iter().flat_map(|p| tiles(p, 64)).collect();
    let quad_f = extractor.extract_features(&quads.iter().collect::<Vec<_>>())?;
    let small_f = extractor.extract_features(&small.iter().collect::<Vec<_>>())?;
    Ok((0..patches.len())
        .map(|i| {
            let q: Vec<Vec<f64>> = quad_f[i * 4..(i + 1) * 4]
                .iter()
                .map(|v| v.values.clone())
                .collect();
            let s: Vec<Vec<f64>> = small_f[i * 16..(i + 1) * 16]
                .iter()
                .map(|v| v.values.clone())
                .collect();
            let mut values = Vec::with_capacity(3 * f);
            values.extend_from_slice(&full[i].values);
            values.extend(mean_of(&q));
            values.extend(mean_of(&s));
            FusedFeature {
                feature_len: f,
                values,
            }
        })
        .collect())
}

/// Stacks fused features into a `[B, 3, F]` tensor.
pub fn fused_to_tensor(features: &[&FusedFeature]) -> Result<Tensor> {
    let f = features.first().map(|x| x.feature_len).unwrap_or(0);
    let mut data = Vec::with_capacity(features.len() * FUSED_ROWS * f);
    for x in features {
        if x.feature_len != f {
            return Err(Error::ShapeMismatch(
                "fused features of different widths".into(),
            ));
        }
        data.extend_from_slice(&x.values);
    }
    Tensor::new(&[features.len(), FUSED_ROWS, f], data)
}

/// Excitation gates `[B, F]`: sigmoid(relu(z W1 + b1) W2 + b2), where z is
/// the mean over the scale rows.
pub fn se_gates(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let z = mean_rows(x)?;
    let hidden = relu(&dense(&z, w1, b1)?);
    Ok(sigmoid(&add_bias(&matmul(&hidden, w2)?, b2)?))
}

/// Reweights every row of `x [B, 3, F]` by its gates.
pub fn se_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    mul_rows(x, &se_gates(x, w1, b1, w2, b2)?)
}

/// Dropout, mean over scale rows, dense layer. Returns logits `[B, C]`.
pub fn head_logits(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    rate: f64,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let h = dropout(x, rate, ctx)?;
    dense(&mean_rows(&h)?, w, b)
}

/// Class probabilities from [`head_logits`].
pub fn head_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    rate: f64,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    softmax(&head_logits(x, w, b, rate, ctx)?)
}

/// Trainable SE block plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct SeHead {
    pub store: ParamStore,
    pub feature_len: usize,
    pub reduction: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    ids: [ParamId; 6],
}

impl SeHead {
    pub fn new(
        feature_len: usize,
        num_classes: usize,
        reduction: usize,
        seed: u64,
    ) -> Result<Self> {
        if reduction == 0 || feature_len % reduction != 0 || feature_len < reduction {
            return Err(Error::InvalidConfig(format!(
                "feature length {feature_len} not divisible by reduction {reduction}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!("{num_classes} classes")));
        }
        let f = feature_len;
        let hdim = f / reduction;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = [
            store.add(
                "se.reduce.weight",
                &[f, hdim],
                fan_in_uniform(&mut rng, f, f * hdim),
                true,
            )?,
            store.add("se.reduce.bias", &[hdim], vec![0.0; hdim], true)?,
            store.add(
                "se.expand.weight",
                &[hdim, f],
                fan_in_uniform(&mut rng, hdim, hdim * f),
                true,
            )?,
            store.add("se.expand.bias", &[f], vec![0.0; f], true)?,
            store.add(
                "head.weight",
                &[f, num_classes],
                fan_in_uniform(&mut rng, f, f * num_classes),
                true,
            )?,
            store.add("head.bias", &[num_classes], vec![0.0; num_classes], true)?,
        ];
        Ok(SeHead {
            store,
            feature_len,
            reduction,
            num_classes,
            dropout_rate: DEFAULT_DROPOUT,
            ids,
        })
    }

    pub fn digest(&self) -> String {
        config_digest(&format!(
            "sehead;f={};r={};classes={};dropout={}",
            self.feature_len, self.reduction, self.num_classes, self.dropout_rate
        ))
    }

    fn params(&self, ctx: &ForwardCtx) -> Vec<Tensor> {
        self.ids
            .iter()
            .map(|&id| ctx.param(&self.store, id))
            .collect()
    }

    pub fn gates(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let p = self.params(ctx);
        se_gates(x, &p[0], &p[1], &p[2], &p[3])
    }

    /// SE then head; logits `[B, C]`.
    pub fn forward_logits(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let p = self.params(ctx);
        let y = se_forward(x, &p[0], &p[1], &p[2], &p[3])?;
        head_logits(&y, &p[4], &p[5], self.dropout_rate, ctx)
    }

    pub fn forward_probs(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        softmax(&self.forward_logits(x, ctx)?)
    }

    /// Eval-mode probabilities for each fused feature.
    pub fn predict(&self, features: &[&FusedFeature]) -> Result<Vec<Vec<f64>>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.forward_probs(&fused_to_tensor(features)?, &mut ForwardCtx::eval())?;
        Ok(p.data()
            .chunks_exact(self.num_classes)
            .map(<[f64]>::to_vec)
            .collect())
    }
}

/// Mean of probability vectors, renormalized to sum to one.
pub fn average_probabilities(per_patch: &[Vec<f64>]) -> Vec<f64> {
    let mut avg = mean_of(per_patch);
    let s: f64 = avg.iter().sum();
    if s > 0.0 {
        avg.iter_mut().for_each(|v| *v /= s);
    }
    avg
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Top-K 256 patches by quality, fused, classified, and averaged.
pub fn predict_image(
    extractor: &DenseNet,
    head: &SeHead,
    image: &RasterImage,
    top_k: usize,
    quality: &QualityParams,
) -> Result<Vec<f64>> {
    let picks = select_top_patches(image, 256, top_k.max(1), quality)?;
    let patches: Vec<RasterImage> = picks
        .iter()
        .map(|p| extract_patch(image, p.region))
        .collect::<Result<_>>()?;
    let fused = fuse_batch(extractor, &patches.iter().collect::<Vec<_>>())?;
    let probs = head.predict(&fused.iter().collect::<Vec<_>>())?;
    Ok(average_probabilities(&probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_must_divide() {
        assert!(SeHead::new(50, 4, 16, 0).is_err());
        assert!(SeHead::new(48, 1, 16, 0).is_err());
        let h = SeHead::new(1920, 10, 16, 0).unwrap();
        assert_eq!(
            h.store.get("se.reduce.weight").unwrap().shape,
            vec![1920, 120]
        );
    }

    #[test]
    fn averaging_renormalizes() {
        let avg = average_probabilities(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        assert!((avg[0] - 0.4).abs() < 1e-15 && (avg[1] - 0.6).abs() < 1e-15);
        assert_eq!(argmax(&avg), 1);
    }

    #[test]
    fn tiles_are_raster_ordered() {
        let img = RasterImage::from_fn(256, 256, |x, y| [(x / 128) as u8, (y / 128) as u8, 0]);
        let q = tiles(&img, 128);
        assert_eq!(q.len(), 4);
        assert_eq!(q[1].pixel(0, 0), [1, 0, 0]);
        assert_eq!(q[2].pixel(0, 0), [0, 1, 0]);
        assert_eq!(tiles(&img, 64).len(), 16);
    }
}
