//! DenseNet feature extractor: stem, dense blocks with bottleneck layers,
//! compressing transitions, and a global-average-pooled feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{RasterImage, PATCH_SIZES};
use crate::netcore::{
    self, avg_pool2d, batch_norm, concat_channels, conv2d, dense, fan_in_uniform, global_avg_pool,
    kaiming_uniform, max_pool2d, relu, softmax, BatchNormParams, ForwardCtx, ParamId, ParamStore,
    Tensor,
};
use crate::weights::config_digest;

/// Fixed input standardization applied after scaling samples to [0, 1].
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub block_sizes: Vec<usize>,
    pub growth_rate: usize,
    pub compression: f64,
    pub init_channels: usize,
    pub input_size: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_width: usize,
}

impl DenseNetConfig {
    pub fn densenet201() -> Self {
        DenseNetConfig {
            block_sizes: vec![6, 12, 48, 32],
            growth_rate: 32,
            compression: 0.5,
            init_channels: 64,
            input_size: 256,
            bottleneck_width: 4,
        }
    }

    /// Small network used for desk-scale training.
    pub fn toy() -> Self {
        DenseNetConfig {
            block_sizes: vec![2, 2, 2],
            growth_rate: 12,
            compression: 0.5,
            init_channels: 24,
            input_size: 64,
            bottleneck_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.block_sizes.is_empty() {
            return bad("block_sizes must not be empty");
        }
        if self.growth_rate == 0 || self.init_channels == 0 || self.bottleneck_width == 0 {
            return bad("growth rate, initial channels and bottleneck width must be positive");
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad("compression must lie in (0, 1]");
        }
        if self.input_size < 32 {
            return bad("input size must be at least 32");
        }
        for c in transition_channels(self) {
            if c == 0 {
                return bad("compression leaves a transition with zero channels");
            }
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        *channel_trace(self).last().expect("trace is never empty")
    }

    /// Canonical string used for weight-file digests.
    pub fn canonical(&self) -> String {
        format!(
            "densenet;blocks={:?};k={};theta={};init={};bottleneck={}",
            self.block_sizes,
            self.growth_rate,
            self.compression,
            self.init_channels,
            self.bottleneck_width
        )
    }

    pub fn digest(&self) -> String {
        config_digest(&self.canonical())
    }
}

fn compress(c: usize, theta: f64) -> usize {
    (theta * c as f64).floor() as usize
}

fn transition_channels(cfg: &DenseNetConfig) -> Vec<usize> {
    let mut c = cfg.init_channels;
    let mut out = Vec::new();
    for (b, &n) in cfg.block_sizes.iter().enumerate() {
        c += n * cfg.growth_rate;
        if b + 1 < cfg.block_sizes.len() {
            c = compress(c, cfg.compression);
            out.push(c);
        }
    }
    out
}

/// Channel counts after the stem, then after every block and transition.
pub fn channel_trace(cfg: &DenseNetConfig) -> Vec<usize> {
    let mut c = cfg.init_channels;
    let mut trace = vec![c];
    for (b, &n) in cfg.block_sizes.iter().enumerate() {
        c += n * cfg.growth_rate;
        trace.push(c);
        if b + 1 < cfg.block_sizes.len() {
            c = compress(c, cfg.compression);
            trace.push(c);
        }
    }
    trace
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams {
    pub norm1: BatchNormParams,
    pub conv1: ParamId,
    pub norm2: BatchNormParams,
    pub conv2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionParams {
    pub norm: BatchNormParams,
    pub conv: ParamId,
    pub pool: PoolKind,
}

/// BN, ReLU, 1x1 conv to the bottleneck width, BN, ReLU, 3x3 conv to k
/// channels; the result is appended to the input channels.
pub fn dense_layer(
    x: &Tensor,
    p: &DenseLayerParams,
    store: &ParamStore,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let h = relu(&batch_norm(x, &p.norm1, store, ctx)?);
    let h = conv2d(&h, &ctx.param(store, p.conv1), 1, 0)?;
    let h = relu(&batch_norm(&h, &p.norm2, store, ctx)?);
    let h = conv2d(&h, &ctx.param(store, p.conv2), 1, 1)?;
    concat_channels(&[x.clone(), h])
}

/// BN, ReLU, 1x1 compression conv, then a stride-2 pool.
pub fn transition(
    x: &Tensor,
    p: &TransitionParams,
    store: &ParamStore,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let h = relu(&batch_norm(x, &p.norm, store, ctx)?);
    let h = conv2d(&h, &ctx.param(store, p.conv), 1, 0)?;
    match p.pool {
        PoolKind::Max => max_pool2d(&h, 3, 2, 1),
        PoolKind::Avg => avg_pool2d(&h, 2, 2, 0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchScale {
    P256,
    P128,
    P64,
}

impl PatchScale {
    pub fn from_size(size: usize) -> Result<Self> {
        match size {
            256 => Ok(PatchScale::P256),
            128 => Ok(PatchScale::P128),
            64 => Ok(PatchScale::P64),
            other => Err(Error::BadPatchSize(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub scale: PatchScale,
}

/// One image as a normalized `[3, H, W]` buffer.
pub fn normalize_image(img: &RasterImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; 3 * w * h];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + i] = (f64::from(px[c]) / 255.0 - INPUT_MEAN) / INPUT_STD;
        }
    }
    out
}

/// Stacks equally sized images into a normalized NCHW tensor.
pub fn images_to_tensor(images: &[&RasterImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {}x{} and {w}x{h} images",
                img.width(),
                img.height()
            )));
        }
        data.extend(normalize_image(img));
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub config: DenseNetConfig,
    pub store: ParamStore,
    stem_conv: ParamId,
    stem_norm: BatchNormParams,
    blocks: Vec<Vec<DenseLayerParams>>,
    transitions: Vec<TransitionParams>,
    final_norm: BatchNormParams,
    classifier: Option<(ParamId, ParamId)>,
}

fn conv_param(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    o: usize,
    c: usize,
    k: usize,
) -> Result<ParamId> {
    store.add(
        name,
        &[o, c, k, k],
        kaiming_uniform(rng, c * k * k, o * c * k * k),
        true,
    )
}

/// Pixels per forward pass in `extract_features`.
const EXTRACT_PIXEL_BUDGET: usize = 8 * 256 * 256;

impl DenseNet {
    /// Builds the extractor with seeded initialization. `num_classes`
    /// attaches a dense softmax classifier on the pooled feature.
    pub fn new(config: DenseNetConfig, num_classes: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.growth_rate;
        let bw = config.bottleneck_width * k;
        let mut c = config.init_channels;
        let stem_conv = conv_param(&mut store, &mut rng, "features.conv0.weight", c, 3, 7)?;
        let stem_norm = BatchNormParams::register(&mut store, "features.norm0", c)?;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &n) in config.block_sizes.iter().enumerate() {
            let mut layers = Vec::with_capacity(n);
            for l in 0..n {
                let p = format!("features.block{}.layer{}", b + 1, l + 1);
                layers.push(DenseLayerParams {
                    norm1: BatchNormParams::register(&mut store, &format!("{p}.norm1"), c)?,
                    conv1: conv_param(
                        &mut store,
                        &mut rng,
                        &format!("{p}.conv1.weight"),
                        bw,
                        c,
                        1,
                    )?,
                    norm2: BatchNormParams::register(&mut store, &format!("{p}.norm2"), bw)?,
                    conv2: conv_param(
                        &mut store,
                        &mut rng,
                        &format!("{p}.conv2.weight"),
                        k,
                        bw,
                        3,
                    )?,
                });
                c += k;
            }
            blocks.push(layers);
            if b + 1 < config.block_sizes.len() {
                let out = compress(c, config.compression);
                let p = format!("features.transition{}", b + 1);
                transitions.push(TransitionParams {
                    norm: BatchNormParams::register(&mut store, &format!("{p}.norm"), c)?,
                    conv: conv_param(&mut store, &mut rng, &format!("{p}.conv.weight"), out, c, 1)?,
                    pool: if b == 0 { PoolKind::Max } else { PoolKind::Avg },
                });
                c = out;
            }
        }
        let final_norm = BatchNormParams::register(&mut store, "features.norm_final", c)?;
        let classifier = match num_classes {
            Some(n) if n >= 2 => Some((
                store.add(
                    "classifier.weight",
                    &[c, n],
                    fan_in_uniform(&mut rng, c, c * n),
                    true,
                )?,
                store.add("classifier.bias", &[n], vec![0.0; n], true)?,
            )),
            Some(n) => return Err(Error::InvalidConfig(format!("{n} classes"))),
            None => None,
        };
        Ok(DenseNet {
            config,
            store,
            stem_conv,
            stem_norm,
            blocks,
            transitions,
            final_norm,
            classifier,
        })
    }

    pub fn feature_len(&self) -> usize {
        self.config.feature_len()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.map(|(_, b)| self.store.entry(b).data.len())
    }

    pub fn blocks(&self) -> &[Vec<DenseLayerParams>] {
        &self.blocks
    }

    pub fn transitions(&self) -> &[TransitionParams] {
        &self.transitions
    }

    /// Digest covering the architecture and the classifier width.
    pub fn digest(&self) -> String {
        config_digest(&format!(
            "{};classes={:?}",
            self.config.canonical(),
            self.num_classes()
        ))
    }

    /// Activations after the stem and after every block and transition,
    /// followed by the pooled `[N, F]` feature.
    pub fn forward_trace(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Vec<Tensor>> {
        let s = &self.store;
        let mut h = conv2d(x, &ctx.param(s, self.stem_conv), 2, 3)?;
        h = relu(&batch_norm(&h, &self.stem_norm, s, ctx)?);
        h = max_pool2d(&h, 3, 2, 1)?;
        let mut trace = vec![h.clone()];
        for (b, layers) in self.blocks.iter().enumerate() {
            for l in layers {
                h = dense_layer(&h, l, s, ctx)?;
            }
            if b + 1 == self.blocks.len() {
                h = relu(&batch_norm(&h, &self.final_norm, s, ctx)?);
            }
            trace.push(h.clone());
            if let Some(t) = self.transitions.get(b) {
                h = transition(&h, t, s, ctx)?;
                trace.push(h.clone());
            }
        }
        trace.push(global_avg_pool(&h)?);
        Ok(trace)
    }

    /// Pooled features `[N, F]` for a normalized NCHW batch.
    pub fn forward_features(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        Ok(self
            .forward_trace(x, ctx)?
            .pop()
            .expect("trace ends with the feature"))
    }

    /// Classifier logits `[N, classes]`.
    pub fn forward_logits(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (w, b) = self
            .classifier
            .ok_or_else(|| Error::InvalidConfig("network has no classifier head".into()))?;
        let f = self.forward_features(x, ctx)?;
        dense(&f, &ctx.param(&self.store, w), &ctx.param(&self.store, b))
    }

    pub fn forward_probs(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        softmax(&self.forward_logits(x, ctx)?)
    }

    /// Eval-mode features of one square patch of a supported size.
    pub fn extract_feature(&self, patch: &RasterImage) -> Result<FeatureVector> {
        let mut v = self.extract_features(&[patch])?;
        Ok(v.pop().expect("one feature per patch"))
    }

    /// Eval-mode features of equally sized square patches.
    pub fn extract_features(&self, patches: &[&RasterImage]) -> Result<Vec<FeatureVector>> {
        let Some(first) = patches.first() else {
            return Ok(Vec::new());
        };
        let size = first.width();
        if first.height() != size || !PATCH_SIZES.contains(&size) {
            return Err(Error::BadPatchSize(if first.height() != size {
                first.height()
            } else {
                size
            }));
        }
        let scale = PatchScale::from_size(size)?;
        // Bound the activation memory of one forward pass.
        let per_chunk = (EXTRACT_PIXEL_BUDGET / (size * size)).max(1);
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(per_chunk) {
            let f = self.forward_features(&images_to_tensor(chunk)?, &mut ForwardCtx::eval())?;
            let flen = f.shape()[1];
            out.extend(f.data().chunks_exact(flen).map(|v| FeatureVector {
                values: v.to_vec(),
                scale,
            }));
        }
        Ok(out)
    }
}

/// Output spatial size after the stem for an input side `n`.
pub fn stem_output_size(n: usize) -> Result<usize> {
    let conv = netcore::conv_output_size(n, 7, 2, 3)?;
    netcore::conv_output_size(conv, 3, 2, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densenet201_trace() {
        let cfg = DenseNetConfig::densenet201();
        assert_eq!(
            channel_trace(&cfg),
            vec![64, 256, 128, 512, 256, 1792, 896, 1920]
        );
        assert_eq!(cfg.feature_len(), 1920);
    }

    #[test]
    fn small_trace() {
        let cfg = DenseNetConfig {
            block_sizes: vec![2, 2],
            growth_rate: 4,
            compression: 0.5,
            init_channels: 8,
            input_size: 32,
            bottleneck_width: 4,
        };
        assert_eq!(cfg.feature_len(), 16);
        assert_eq!(DenseNetConfig::toy().feature_len(), 48);
    }

    #[test]
    fn invalid_configs() {
        let mut c = DenseNetConfig::toy();
        c.compression = 0.0;
        assert!(c.validate().is_err());
        c.compression = 1.5;
        assert!(c.validate().is_err());
        let mut c = DenseNetConfig::toy();
        c.block_sizes.clear();
        assert!(matches!(
            DenseNet::new(c, None, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn theta_one_keeps_channels() {
        let mut c = DenseNetConfig::toy();
        c.compression = 1.0;
        assert_eq!(channel_trace(&c), vec![24, 48, 48, 72, 72, 96]);
    }

    #[test]
    fn stem_quarter_resolution() {
        assert_eq!(stem_output_size(256).unwrap(), 64);
        assert_eq!(stem_output_size(64).unwrap(), 16);
    }

    #[test]
    fn normalization_constants() {
        let img = RasterImage::new(1, 1, vec![0, 255, 128]).unwrap();
        let v = normalize_image(&img);
        assert_eq!(v[0], -2.0);
        assert_eq!(v[1], 2.0);
        assert!((v[2] - (128.0 / 255.0 - 0.5) / 0.25).abs() < 1e-15);
    }
}
