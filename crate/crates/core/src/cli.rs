//! Command-line front end. `run` returns the process exit status:
//! 0 on success, 1 on usage errors, 2 on data errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::augment::{center_crop, ManipSpec};
use crate::emd2d::{emd_residue_image, SolverLimits};
use crate::error::{Error, IoContext, Result};
use crate::fusionhead::{argmax, average_probabilities, fuse_batch, SeHead};
use crate::image::{extract_patch, save_png, Manipulation, RasterImage};
use crate::patchqual::{candidate_grid, select_top_patches, QualityParams};
use crate::pipeline::{
    generate_synthetic_dataset, report, score, Manifest, ManifestRow, Prediction, ScoreReport,
    SyntheticCameraSpec,
};
use crate::trainer::{load_extractor, run_phase, split_dataset, Phase, RunConfig, SplitSpec};
use crate::weights::WeightStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "camid",
    version,
    about = "Camera-model identification and manipulation detection"
)]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// key = value run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score grid patches and keep the best per image.
    Patches(PatchesArgs),
    /// Replace images by their EMD residue.
    Emd(EmdArgs),
    /// Apply post-processing operations.
    Augment(AugmentArgs),
    /// Render a synthetic multi-camera dataset.
    Synth(SynthArgs),
    /// Run one training phase.
    Train(TrainArgs),
    /// Extract per-patch or fused features.
    Features(FeaturesArgs),
    /// Per-image predictions from trained weights.
    Predict(PredictArgs),
    /// Weighted score of predictions against a truth manifest.
    Score(ScoreArgs),
    /// Write confusion CSV and summary files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PatchesArgs {
    /// Image manifest, or a directory holding manifest.jsonl.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 20)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct EmdArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Most extrema used per envelope.
    #[arg(long, default_value_t = 2000)]
    pub n_max: usize,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated operations, e.g. jpeg90,gamma08,resize05,rot90.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ops: Vec<String>,
    /// Center-crop every output to this size.
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// How many of the built-in cameras to use (2 to 4).
    #[arg(long, default_value_t = 4)]
    pub cameras: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// p1-extractor, p1-head, p2 or p3.
    #[arg(long)]
    pub phase: String,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Three-row multi-scale features (rows must be 256 patches).
    #[arg(long)]
    pub fused: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub extractor: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
    /// Use the first four grid tiles instead of the best-scoring patches.
    #[arg(long)]
    pub tiled: bool,
    /// Four-way manipulation weights (extractor plus classifier) to tag
    /// each image on 128 patches.
    #[arg(long)]
    pub manipulation: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated class names; defaults to device ids or class<i>.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            let _ = writeln!(err, "error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // Fails only when a pool already exists, e.g. in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::InvalidConfig(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.jsonl")
    } else {
        p.to_path_buf()
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.optimizer.seed = s;
    }
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Output file name for `row`, unique even when rows share a source file.
fn out_name(row: &ManifestRow, suffix: &str) -> String {
    match row.patch {
        Some(r) => format!(
            "{}_{}_{}_{}{suffix}.png",
            stem(&row.path),
            r.x0,
            r.y0,
            r.size
        ),
        None => format!("{}{suffix}.png", stem(&row.path)),
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let cams: Vec<SyntheticCameraSpec> =
                SyntheticCameraSpec::default_set(cli.seed.unwrap_or(0))
                    .into_iter()
                    .take(a.cameras)
                    .collect();
            let m = generate_synthetic_dataset(&cams, a.images, a.size, &a.out)?;
            writeln!(out, "wrote {} images to {}", m.len(), a.out.display())?;
        }
        Command::Patches(a) => {
            let m = Manifest::load(manifest_path(&a.input))?;
            let q = QualityParams::default();
            let rows = m
                .rows
                .par_iter()
                .map(|row| {
                    let img = row.load_image()?;
                    let picks = select_top_patches(&img, a.size, a.top, &q)?;
                    Ok(picks
                        .into_iter()
                        .map(|p| {
                            let mut r = row.clone();
                            r.patch = Some(match row.patch {
                                Some(base) => crate::image::Region::new(
                                    base.x0 + p.region.x0,
                                    base.y0 + p.region.y0,
                                    p.region.size,
                                ),
                                None => p.region,
                            });
                            r.score = Some(p.score);
                            r
                        })
                        .collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            let pm = Manifest::new(rows.into_iter().flatten().collect());
            std::fs::create_dir_all(&a.out).at(&a.out)?;
            pm.save(a.out.join("manifest.jsonl"))?;
            writeln!(out, "selected {} patches from {} images", pm.len(), m.len())?;
        }
        Command::Emd(a) => {
            let m = Manifest::load(manifest_path(&a.input))?;
            let limits = SolverLimits { n_max: a.n_max };
            std::fs::create_dir_all(&a.out).at(&a.out)?;
            let rows = m
                .rows
                .iter()
                .map(|row| {
                    let img = row.load_image()?;
                    let res = emd_residue_image(&img, limits)?;
                    let path = a.out.join(out_name(row, "_emd"));
                    save_png(&res, &path)?;
                    let mut r = row.clone();
                    r.path = path;
                    r.patch = None;
                    r.manipulation = Manipulation::EmdResidue;
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            Manifest::new(rows).save(a.out.join("manifest.jsonl"))?;
            writeln!(out, "wrote {} residue images", m.len())?;
        }
        Command::Augment(a) => {
            let ops: Vec<ManipSpec> = a.ops.iter().map(|s| s.parse()).collect::<Result<_>>()?;
            let m = Manifest::load(manifest_path(&a.input))?;
            std::fs::create_dir_all(&a.out).at(&a.out)?;
            let rows = m
                .rows
                .par_iter()
                .map(|row| {
                    let img = row.load_image()?;
                    ops.iter()
                        .map(|op| {
                            let mut res = op.apply(&img)?;
                            if let Some(c) = a.crop {
                                res = center_crop(&res, c);
                            }
                            let path = a.out.join(out_name(row, &format!("_{op}")));
                            save_png(&res, &path)?;
                            let mut r = row.clone();
                            r.path = path;
                            r.patch = None;
                            r.score = None;
                            if op.manipulation().is_manipulated() {
                                r.manipulation = op.manipulation();
                            }
                            Ok(r)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let am = Manifest::new(rows.into_iter().flatten().collect());
            am.save(a.out.join("manifest.jsonl"))?;
            writeln!(out, "wrote {} images", am.len())?;
        }
        Command::Train(a) => {
            let phase: Phase = a.phase.parse()?;
            let cfg = run_config(cli)?;
            let train_path = cfg
                .train_manifest
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("config needs train_manifest".into()))?;
            let all = Manifest::load(train_path)?;
            let (train, val) = match &cfg.val_manifest {
                Some(v) => (all, Manifest::load(v)?),
                None => split_dataset(
                    &all,
                    SplitSpec {
                        train_fraction: 0.85,
                        seed: cfg.optimizer.seed,
                    },
                )?,
            };
            let res = run_phase(&cfg.phase_spec(phase), &cfg, &train, &val)?;
            let last = res.report.history.last().expect("at least one epoch");
            writeln!(
                out,
                "{phase}: {} epochs, best epoch {}, val loss {:.4}, val acc {:.4}",
                res.report.history.len(),
                res.report.best_epoch,
                last.best_val_loss,
                res.report.history[res.report.best_epoch.max(1) - 1].val_acc
            )?;
            writeln!(out, "best weights {}", res.best_weights.display())?;
        }
        Command::Features(a) => {
            let cfg = run_config(cli)?;
            let net = load_extractor(&cfg.arch, None, Some(&a.weights), 0)?;
            let m = Manifest::load(&a.manifest)?;
            let images: Vec<RasterImage> = m
                .rows
                .par_iter()
                .map(ManifestRow::load_image)
                .collect::<Result<_>>()?;
            let refs: Vec<&RasterImage> = images.iter().collect();
            let vectors: Vec<Vec<f64>> = if a.fused {
                fuse_batch(&net, &refs)?
                    .into_iter()
                    .map(|f| f.values)
                    .collect()
            } else {
                net.extract_features(&refs)?
                    .into_iter()
                    .map(|f| f.values)
                    .collect()
            };
            let mut w = std::io::BufWriter::new(std::fs::File::create(&a.out).at(&a.out)?);
            for (row, v) in m.rows.iter().zip(vectors) {
                let rec = serde_json::json!({ "key": row.key(), "label": row.label, "values": v });
                writeln!(w, "{rec}").at(&a.out)?;
            }
            w.flush().at(&a.out)?;
            writeln!(out, "wrote {} feature vectors", m.len())?;
        }
        Command::Predict(a) => {
            let cfg = run_config(cli)?;
            let extractor = load_extractor(&cfg.arch, None, Some(&a.extractor), 0)?;
            let mut head = SeHead::new(extractor.feature_len(), cfg.num_classes, cfg.reduction, 0)?;
            head.dropout_rate = cfg.dropout;
            let hw = WeightStore::load(&a.head)?;
            let digest = head.digest();
            hw.apply_to(&mut head.store, &digest)?;
            let manip = match &a.manipulation {
                Some(p) => Some(load_extractor(&cfg.arch, Some(4), Some(p), 0).and_then(
                    |mut n| {
                        WeightStore::load(p)?.apply_prefix(&mut n.store, "classifier.")?;
                        Ok(n)
                    },
                )?),
                None => None,
            };
            let m = Manifest::load(&a.manifest)?;
            let q = QualityParams::default();
            let pick = |img: &RasterImage, size: usize| -> Result<Vec<RasterImage>> {
                let regions: Vec<_> = if a.tiled {
                    candidate_grid(img.width(), img.height(), size)
                        .into_iter()
                        .take(a.top_k)
                        .collect()
                } else {
                    select_top_patches(img, size, a.top_k, &q)?
                        .into_iter()
                        .map(|p| p.region)
                        .collect()
                };
                if regions.is_empty() {
                    return Err(Error::ImageTooSmall {
                        width: img.width(),
                        height: img.height(),
                        size,
                    });
                }
                regions.into_iter().map(|r| extract_patch(img, r)).collect()
            };
            let mut preds = Vec::with_capacity(m.len());
            for row in &m.rows {
                let img = row.load_image()?;
                let patches = pick(&img, 256)?;
                let fused = fuse_batch(&extractor, &patches.iter().collect::<Vec<_>>())?;
                let probs =
                    average_probabilities(&head.predict(&fused.iter().collect::<Vec<_>>())?);
                let manipulation = match &manip {
                    Some(net) => {
                        let ps = pick(&img, 128)?;
                        let x = crate::densenet::images_to_tensor(&ps.iter().collect::<Vec<_>>())?;
                        let p = net.forward_probs(&x, &mut crate::netcore::ForwardCtx::eval())?;
                        let per: Vec<Vec<f64>> =
                            p.data().chunks_exact(4).map(<[f64]>::to_vec).collect();
                        Some(MANIPULATION_TAGS[argmax(&average_probabilities(&per))])
                    }
                    None => None,
                };
                preds.push(Prediction {
                    key: row.key(),
                    class: argmax(&probs),
                    manipulation,
                    probabilities: probs,
                });
            }
            write_predictions(&preds, &a.out)?;
            writeln!(out, "wrote {} predictions", preds.len())?;
        }
        Command::Score(a) => {
            let r = score_files(&a.predictions, &a.manifest, &a.classes)?;
            writeln!(out, "{:.4}", r.weighted_score)?;
            write!(out, "{}", r.summary())?;
        }
        Command::Report(a) => {
            let r = score_files(&a.predictions, &a.manifest, &a.classes)?;
            report(&r, &a.out)?;
            writeln!(out, "{:.4}", r.weighted_score)?;
            writeln!(out, "report written to {}", a.out.display())?;
        }
    }
    Ok(())
}

const MANIPULATION_TAGS: [Manipulation; 4] = [
    Manipulation::Unaltered,
    Manipulation::JpegCompressed,
    Manipulation::GammaCorrected,
    Manipulation::Resized,
];

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    std::fs::write(path, text).at(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::InvalidSpec(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn score_files(pred_path: &Path, manifest: &Path, classes: &[String]) -> Result<ScoreReport> {
    let preds = read_predictions(pred_path)?;
    let truth = Manifest::load(manifest)?;
    let names = if classes.is_empty() {
        let n = truth
            .num_classes()
            .max(preds.iter().map(|p| p.class + 1).max().unwrap_or(0));
        (0..n)
            .map(|c| {
                truth
                    .rows
                    .iter()
                    .find(|r| r.label == c && !r.device_id.is_empty())
                    .map(|r| r.device_id.clone())
                    .unwrap_or_else(|| format!("class{c}"))
            })
            .collect()
    } else {
        classes.to_vec()
    };
    score(&preds, &truth, names)
}
