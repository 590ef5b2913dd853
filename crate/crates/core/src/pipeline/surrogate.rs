use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::manifest::Manifest;
use super::synth::{generate_synthetic_dataset, SyntheticCameraSpec};
use crate::augment::ManipSpec;
use crate::densenet::{DenseNet, DenseNetConfig};
use crate::error::Result;
use crate::fusionhead::{argmax, fuse_batch, predict_image, SeHead, DEFAULT_REDUCTION};
use crate::image::{extract_patch, Manipulation, RasterImage};
use crate::patchqual::{select_top_patches, QualityParams};
use crate::trainer::{
    evaluate, fit, split_dataset, EpochRecord, Labeled, OptimizerConfig, SplitSpec,
};

/// Desk-scale camera identification run: synthetic cameras, extractor
/// trained on top-K patches, SE head on fused features, per-image test
/// accuracy on held-out images.
#[derive(Debug, Clone)]
pub struct CameraSurrogate {
    pub cameras: Vec<SyntheticCameraSpec>,
    pub images_per_camera: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Extractor training patches taken per image, best quality first.
    pub train_patches: usize,
    /// 256 patches fused per image for head training.
    pub head_patches: usize,
    /// 256 patches averaged per test image.
    pub top_k: usize,
    /// Random quarter turns while training the extractor. Off by default:
    /// the four default cameras cover all four Bayer phases, which are one
    /// orbit under rotation, so rotating erases the CFA cue.
    pub augment: bool,
    pub arch: DenseNetConfig,
    pub extractor_opt: OptimizerConfig,
    pub head_opt: OptimizerConfig,
    pub seed: u64,
}

impl CameraSurrogate {
    pub fn new(seed: u64) -> Self {
        CameraSurrogate {
            cameras: SyntheticCameraSpec::default_set(seed),
            images_per_camera: 200,
            image_size: 512,
            patch_size: 64,
            train_patches: 8,
            head_patches: 1,
            top_k: 4,
            augment: false,
            arch: DenseNetConfig::toy(),
            extractor_opt: OptimizerConfig {
                lr_init: 0.01,
                max_epochs: 30,
                seed,
                ..Default::default()
            },
            head_opt: OptimizerConfig {
                lr_init: 0.01,
                max_epochs: 60,
                seed,
                ..Default::default()
            },
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateOutcome {
    pub accuracy: f64,
    pub n_test: usize,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub train_seconds: f64,
    pub extractor_history: Vec<EpochRecord>,
    pub head_history: Vec<EpochRecord>,
    pub extractor: DenseNet,
}

fn top_patches(
    img: &RasterImage,
    size: usize,
    k: usize,
    q: &QualityParams,
) -> Result<Vec<RasterImage>> {
    select_top_patches(img, size, k, q)?
        .iter()
        .map(|p| extract_patch(img, p.region))
        .collect()
}

fn load_all(m: &Manifest) -> Result<Vec<Labeled<RasterImage>>> {
    m.rows
        .par_iter()
        .map(|r| {
            Ok(Labeled {
                input: r.load_image()?,
                label: r.label,
            })
        })
        .collect()
}

impl CameraSurrogate {
    /// Writes the synthetic images under `work_dir` and runs the protocol.
    pub fn run(&self, work_dir: impl AsRef<Path>) -> Result<SurrogateOutcome> {
        let q = QualityParams::default();
        let n_classes = self.cameras.len();
        let manifest = generate_synthetic_dataset(
            &self.cameras,
            self.images_per_camera,
            self.image_size,
            work_dir.as_ref(),
        )?;
        let split = |m: &Manifest, salt: u64| {
            split_dataset(
                m,
                SplitSpec {
                    train_fraction: 0.85,
                    seed: self.seed ^ salt,
                },
            )
        };
        let (trainval, test) = split(&manifest, 0x7e57)?;
        let (train, val) = split(&trainval, 0x0a1)?;
        let (train, val, test) = (load_all(&train)?, load_all(&val)?, load_all(&test)?);

        let started = Instant::now();
        let patchify = |set: &[Labeled<RasterImage>]| -> Result<Vec<Labeled<RasterImage>>> {
            let per: Vec<Vec<Labeled<RasterImage>>> = set
                .par_iter()
                .map(|s| {
                    Ok(
                        top_patches(&s.input, self.patch_size, self.train_patches, &q)?
                            .into_iter()
                            .map(|p| Labeled {
                                input: p,
                                label: s.label,
                            })
                            .collect(),
                    )
                })
                .collect::<Result<_>>()?;
            Ok(per.into_iter().flatten().collect())
        };
        let mut extractor = DenseNet::new(self.arch.clone(), Some(n_classes), self.seed)?;
        let ex = fit(
            &mut extractor,
            &patchify(&train)?,
            &patchify(&val)?,
            &self.extractor_opt,
            self.augment,
            None,
        )?;
        extractor.store = ex.best_store;

        let fuse = |set: &[Labeled<RasterImage>]| -> Result<Vec<Labeled<_>>> {
            let mut patches = Vec::new();
            let mut labels = Vec::new();
            for s in set {
                for p in top_patches(&s.input, 256, self.head_patches, &q)? {
                    patches.push(p);
                    labels.push(s.label);
                }
            }
            let feats = fuse_batch(&extractor, &patches.iter().collect::<Vec<_>>())?;
            Ok(feats
                .into_iter()
                .zip(labels)
                .map(|(f, label)| Labeled { input: f, label })
                .collect())
        };
        let mut head = SeHead::new(
            extractor.feature_len(),
            n_classes,
            DEFAULT_REDUCTION,
            self.seed,
        )?;
        let hd = fit(
            &mut head,
            &fuse(&train)?,
            &fuse(&val)?,
            &self.head_opt,
            false,
            None,
        )?;
        head.store = hd.best_store;
        let train_seconds = started.elapsed().as_secs_f64();

        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for s in &test {
            let p = predict_image(&extractor, &head, &s.input, self.top_k, &q)?;
            confusion[s.label][argmax(&p)] += 1;
        }
        let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
        Ok(SurrogateOutcome {
            accuracy: correct as f64 / test.len() as f64,
            n_test: test.len(),
            confusion,
            train_seconds,
            extractor_history: ex.history,
            head_history: hd.history,
            extractor,
        })
    }
}

/// Four-way manipulation detection (unaltered, JPEG, gamma, resized) on
/// 128 patches of synthetic images, with the extractor optionally
/// initialized from a camera-identification run.
#[derive(Debug, Clone)]
pub struct ManipulationSurrogate {
    pub cameras: Vec<SyntheticCameraSpec>,
    pub sources_per_camera: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Patches taken from each manipulated version, best quality first.
    pub patches_per_version: usize,
    pub arch: DenseNetConfig,
    pub opt: OptimizerConfig,
    pub seed: u64,
}

impl ManipulationSurrogate {
    pub fn new(seed: u64) -> Self {
        ManipulationSurrogate {
            cameras: SyntheticCameraSpec::default_set(seed ^ 0x5eed),
            sources_per_camera: 50,
            image_size: 512,
            patch_size: 128,
            patches_per_version: 4,
            arch: DenseNetConfig::toy(),
            opt: OptimizerConfig {
                lr_init: 0.01,
                max_epochs: 15,
                seed,
                ..Default::default()
            },
            seed,
        }
    }

    /// Each source is manipulated once per class with a random operation
    /// of that class; each version contributes its best 128 patches.
    /// Items are (source id, camera index, patch).
    pub fn dataset(&self) -> Result<Vec<(String, usize, Labeled<RasterImage>)>> {
        let q = QualityParams::default();
        let jobs: Vec<(usize, usize)> = (0..self.cameras.len())
            .flat_map(|c| (0..self.sources_per_camera).map(move |i| (c, i)))
            .collect();
        let per: Vec<Vec<(String, usize, Labeled<RasterImage>)>> = jobs
            .par_iter()
            .map(|&(c, i)| {
                let src = self.cameras[c].render(i, self.image_size);
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((c * 100_003 + i) as u64));
                let group = format!("{}_{i:04}", self.cameras[c].model_id);
                let choices: [&[ManipSpec]; 4] = [
                    &[ManipSpec::Rot0],
                    &[ManipSpec::JpegQ90, ManipSpec::JpegQ70],
                    &[ManipSpec::Gamma08, ManipSpec::Gamma12],
                    &[
                        ManipSpec::Resize05,
                        ManipSpec::Resize08,
                        ManipSpec::Resize15,
                        ManipSpec::Resize20,
                    ],
                ];
                let mut out = Vec::new();
                for ops in choices {
                    let op = *ops.choose(&mut rng).expect("non-empty");
                    let img = op.apply(&src)?;
                    let label = op
                        .manipulation()
                        .manipulation_class()
                        .expect("four-way class");
                    for patch in top_patches(&img, self.patch_size, self.patches_per_version, &q)? {
                        out.push((
                            group.clone(),
                            c,
                            Labeled {
                                input: patch,
                                label,
                            },
                        ));
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    }

    /// Trains the extractor with a four-way classifier; reports held-out
    /// patch accuracy.
    pub fn run(&self, init_from: Option<&DenseNet>) -> Result<SurrogateOutcome> {
        let data = self.dataset()?;
        let groups: Vec<&str> = data.iter().map(|(g, _, _)| g.as_str()).collect();
        // Every source contributes all four classes, so stratify by camera.
        let strata: Vec<usize> = data.iter().map(|(_, c, _)| *c).collect();
        let split = |idx: &[usize], salt: u64| -> Result<(Vec<usize>, Vec<usize>)> {
            let g: Vec<&str> = idx.iter().map(|&i| groups[i]).collect();
            let s: Vec<usize> = idx.iter().map(|&i| strata[i]).collect();
            let (a, b) = crate::trainer::split_groups(
                &g,
                &s,
                SplitSpec {
                    train_fraction: 0.85,
                    seed: self.seed ^ salt,
                },
            )?;
            Ok((
                a.iter().map(|&j| idx[j]).collect(),
                b.iter().map(|&j| idx[j]).collect(),
            ))
        };
        let all: Vec<usize> = (0..data.len()).collect();
        let (trainval, test) = split(&all, 0x7e57)?;
        let (train, val) = split(&trainval, 0x0a1)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].2.clone()).collect::<Vec<_>>();

        let started = Instant::now();
        let mut net = DenseNet::new(
            self.arch.clone(),
            Some(Manipulation::CLASS_NAMES.len()),
            self.seed,
        )?;
        if let Some(src) = init_from {
            let ws = crate::weights::WeightStore::from_params(&src.store, &src.digest());
            ws.apply_prefix(&mut net.store, "features.")?;
        }
        let rep = fit(&mut net, &pick(&train), &pick(&val), &self.opt, true, None)?;
        net.store = rep.best_store;
        let train_seconds = started.elapsed().as_secs_f64();

        let test = pick(&test);
        let mut confusion = vec![vec![0; 4]; 4];
        for chunk in test.chunks(32) {
            let imgs: Vec<&RasterImage> = chunk.iter().map(|s| &s.input).collect();
            let logits = net.forward_logits(
                &crate::densenet::images_to_tensor(&imgs)?,
                &mut crate::netcore::ForwardCtx::eval(),
            )?;
            for (row, s) in logits.data().chunks_exact(4).zip(chunk) {
                confusion[s.label][argmax(row)] += 1;
            }
        }
        let (_, acc) = evaluate(&net, &test, 32)?;
        Ok(SurrogateOutcome {
            accuracy: acc,
            n_test: test.len(),
            confusion,
            train_seconds,
            extractor_history: rep.history,
            head_history: Vec::new(),
            extractor: net,
        })
    }
}
