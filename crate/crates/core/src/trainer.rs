//! SGD with momentum, the plateau learning-rate schedule, grouped dataset
//! splits and the training phases.
//!
//! Phase I trains the extractor with a temporary softmax classifier on 256
//! patches, then trains the SE block and head on frozen fused features.
//! Phases II and III start from the Phase I extractor and train extractor
//! and classifier jointly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::rotate;
use crate::densenet::{images_to_tensor, DenseNet, DenseNetConfig};
use crate::error::{Error, IoContext, Result};
use crate::fusionhead::{fuse_batch, fused_to_tensor, FusedFeature, SeHead, DEFAULT_REDUCTION};
use crate::image::RasterImage;
use crate::netcore::{softmax_cross_entropy, ForwardCtx, Gradients, ParamId, ParamStore, Tensor};
use crate::pipeline::Manifest;
use crate::weights::WeightStore;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr_init: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub lr_floor: f64,
    pub batch_size: usize,
    /// Safety cap; the schedule normally stops the run first.
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_init: 1e-3,
            momentum: 0.9,
            lr_decay: 0.1,
            plateau_patience: 2,
            lr_floor: 1e-7,
            batch_size: 32,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_init > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.lr_decay > 0.0
            && self.lr_decay < 1.0
            && self.lr_floor > 0.0
            && self.batch_size > 0
            && self.max_epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "bad optimizer config {self:?}"
            )))
        }
    }
}

/// Momentum buffers keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }
}

/// v <- momentum * v + g; p <- p - lr * v, for every parameter with a gradient.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for id in grads.ids() {
        let g = grads.get(id).expect("id from the same map");
        let p = store.data_mut(id);
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} values, parameter {}",
                g.len(),
                p.len()
            )));
        }
        let v = state
            .velocity
            .entry(id)
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrAction {
    Keep(f64),
    Decay(f64),
    Stop,
}

/// Decays the rate when the best validation loss has not strictly improved
/// for `patience` epochs, counted since the last improvement or decay.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    lr_init: f64,
    decay: f64,
    patience: usize,
    floor: f64,
    decays: i32,
    best: f64,
    since_best: usize,
    stopped: bool,
}

impl PlateauSchedule {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        PlateauSchedule {
            lr_init: cfg.lr_init,
            decay: cfg.lr_decay,
            patience: cfg.plateau_patience,
            floor: cfg.lr_floor,
            decays: 0,
            best: f64::INFINITY,
            since_best: 0,
            stopped: false,
        }
    }

    /// Current rate, recomputed from the decay count to avoid drift.
    pub fn lr(&self) -> f64 {
        self.lr_init * self.decay.powi(self.decays)
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    /// Feeds one epoch's validation loss and returns the rate for the next.
    pub fn observe(&mut self, val_loss: f64) -> LrAction {
        if self.stopped {
            return LrAction::Stop;
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            return LrAction::Keep(self.lr());
        }
        self.since_best += 1;
        if self.since_best < self.patience.max(1) {
            return LrAction::Keep(self.lr());
        }
        let next = self.lr_init * self.decay.powi(self.decays + 1);
        // Relative slack so 1e-3 * 0.1^4 still counts as reaching 1e-7.
        if next < self.floor * (1.0 - 1e-9) {
            self.stopped = true;
            return LrAction::Stop;
        }
        self.decays += 1;
        self.since_best = 0;
        LrAction::Decay(next)
    }
}

/// Replays a loss history and returns the action after each epoch, ending
/// early at the first `Stop`.
pub fn plateau_schedule(history: &[f64], cfg: &OptimizerConfig) -> Vec<LrAction> {
    let mut s = PlateauSchedule::new(cfg);
    let mut out = Vec::with_capacity(history.len());
    for &l in history {
        let a = s.observe(l);
        out.push(a);
        if a == LrAction::Stop {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.85,
            seed: 0,
        }
    }
}

/// Index split keeping every group on one side. Groups are stratified by
/// the label of their first item; per-class train counts are allocated from
/// rounded cumulative targets so the total stays at the requested fraction.
pub fn split_groups(
    groups: &[&str],
    labels: &[usize],
    spec: SplitSpec,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if groups.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if groups.len() != labels.len() || !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::InvalidConfig("bad split request".into()));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (g, idx) in &members {
        by_class.entry(labels[idx[0]]).or_default().push(g);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let (mut seen, mut taken) = (0usize, 0usize);
    for (_, mut gs) in by_class {
        gs.shuffle(&mut rng);
        seen += gs.len();
        let target = (spec.train_fraction * seen as f64).round() as usize;
        let n_train = target.saturating_sub(taken).min(gs.len());
        taken += n_train;
        for (j, g) in gs.iter().enumerate() {
            let side = if j < n_train { &mut train } else { &mut val };
            side.extend_from_slice(&members[g]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Grouped by `source_id`, stratified by label, seeded.
pub fn split_dataset(manifest: &Manifest, spec: SplitSpec) -> Result<(Manifest, Manifest)> {
    let groups: Vec<&str> = manifest.rows.iter().map(|r| r.source_id.as_str()).collect();
    let labels: Vec<usize> = manifest.rows.iter().map(|r| r.label).collect();
    let (t, v) = split_groups(&groups, &labels, spec)?;
    let pick = |idx: Vec<usize>| {
        Manifest::new(idx.into_iter().map(|i| manifest.rows[i].clone()).collect())
    };
    Ok((pick(t), pick(v)))
}

/// Fails when the largest and smallest class counts differ by more than
/// `tolerance` of the largest.
pub fn check_balance(counts: &[usize], tolerance: f64) -> Result<()> {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if max == 0 {
        return Err(Error::EmptyManifest);
    }
    if (max - min) as f64 > tolerance * max as f64 {
        return Err(Error::InvalidSpec(format!(
            "class counts {counts:?} differ by more than {:.1}%",
            100.0 * tolerance
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Labeled<T> {
    pub input: T,
    pub label: usize,
}

/// A model the training loop can drive.
pub trait Trainable {
    type Input: Clone;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn digest(&self) -> String;
    fn logits(&self, batch: &[&Self::Input], ctx: &mut ForwardCtx) -> Result<Tensor>;

    /// Training-time augmentation of one sample.
    fn augment(&self, input: &Self::Input, _rng: &mut ChaCha8Rng) -> Self::Input {
        input.clone()
    }
}

impl Trainable for DenseNet {
    type Input = RasterImage;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn digest(&self) -> String {
        DenseNet::digest(self)
    }

    fn logits(&self, batch: &[&RasterImage], ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.forward_logits(&images_to_tensor(batch)?, ctx)
    }

    /// Random quarter turn: 0, +90, 180 or -90 degrees.
    fn augment(&self, input: &RasterImage, rng: &mut ChaCha8Rng) -> RasterImage {
        rotate(input, rng.gen_range(0..4))
    }
}

impl Trainable for SeHead {
    type Input = FusedFeature;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn digest(&self) -> String {
        SeHead::digest(self)
    }

    fn logits(&self, batch: &[&FusedFeature], ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.forward_logits(&fused_to_tensor(batch)?, ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    LrFloor,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_store: ParamStore,
    pub stop: StopReason,
}

/// Mean cross-entropy and accuracy in eval mode.
pub fn evaluate<M: Trainable>(
    model: &M,
    data: &[Labeled<M::Input>],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let inputs: Vec<&M::Input> = chunk.iter().map(|s| &s.input).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let logits = model.logits(&inputs, &mut ForwardCtx::eval())?;
        loss += softmax_cross_entropy(&logits, &labels)?.item()? * chunk.len() as f64;
        let c = logits.shape()[1];
        for (row, &l) in logits.data().chunks_exact(c).zip(&labels) {
            correct += (crate::fusionhead::argmax(row) == l) as usize;
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// One optimizer step on one batch; returns the batch loss.
pub fn train_step<M: Trainable>(
    model: &mut M,
    batch: &[&Labeled<M::Input>],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    ctx_seed: u64,
) -> Result<f64> {
    let inputs: Vec<&M::Input> = batch.iter().map(|s| &s.input).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let mut ctx = ForwardCtx::train(ctx_seed);
    let loss = softmax_cross_entropy(&model.logits(&inputs, &mut ctx)?, &labels)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::DivergedLoss {
            epoch: 0,
            batch: 0,
            value,
        });
    }
    let grads = loss.backward()?;
    sgd_step(model.store_mut(), &grads, state, lr, momentum)?;
    ctx.commit(model.store_mut());
    Ok(value)
}

/// Epoch loop: seeded shuffle, optional augmentation, SGD, validation and
/// the plateau schedule. Each epoch's record goes to `log` as a JSON line.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &[Labeled<M::Input>],
    val: &[Labeled<M::Input>],
    cfg: &OptimizerConfig,
    augment: bool,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut schedule = PlateauSchedule::new(cfg);
    let mut state = SgdState::new();
    let mut history = Vec::new();
    let mut best = (0usize, model.store().clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let owned: Vec<Labeled<M::Input>>;
            let batch: Vec<&Labeled<M::Input>> = if augment {
                owned = idx
                    .iter()
                    .map(|&i| Labeled {
                        input: model.augment(&train[i].input, &mut rng),
                        label: train[i].label,
                    })
                    .collect();
                owned.iter().collect()
            } else {
                idx.iter().map(|&i| &train[i]).collect()
            };
            let loss = train_step(model, &batch, &mut state, lr, cfg.momentum, rng.gen()).map_err(
                |e| match e {
                    Error::DivergedLoss { value, .. } => Error::DivergedLoss {
                        epoch,
                        batch: b,
                        value,
                    },
                    e => e,
                },
            )?;
            total += loss * idx.len() as f64;
        }
        let (val_loss, val_acc) = evaluate(model, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::DivergedLoss {
                epoch,
                batch: usize::MAX,
                value: val_loss,
            });
        }
        if val_loss < schedule.best() {
            best = (epoch, model.store().clone());
        }
        let action = schedule.observe(val_loss);
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_loss,
            val_acc,
            best_val_loss: schedule.best(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        history.push(rec);
        if action == LrAction::Stop {
            stop = StopReason::LrFloor;
            break;
        }
    }
    Ok(TrainReport {
        history,
        best_epoch: best.0,
        best_store: best.1,
        stop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    P1Extractor,
    P1Head,
    P2,
    P3,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::P1Extractor => "p1-extractor",
            Phase::P1Head => "p1-head",
            Phase::P2 => "p2",
            Phase::P3 => "p3",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "p1-extractor" => Phase::P1Extractor,
            "p1-head" => Phase::P1Head,
            "p2" => Phase::P2,
            "p3" => Phase::P3,
            _ => return Err(Error::InvalidConfig(format!("unknown phase {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpec {
    pub phase: Phase,
    pub num_classes: usize,
    pub patch_size: usize,
    /// Extractor weights to start from (P2, P3) or to fuse with (P1 head).
    pub init_from: Option<PathBuf>,
    pub balance_tolerance: f64,
}

impl PhaseSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("{}: {m}", self.phase)));
        if self.num_classes < 2 {
            return bad(format!("{} classes", self.num_classes));
        }
        if !crate::image::PATCH_SIZES.contains(&self.patch_size) {
            return bad(format!("patch size {}", self.patch_size));
        }
        match self.phase {
            Phase::P1Head if self.patch_size != 256 => {
                return bad("fusion needs 256 patches".into())
            }
            Phase::P3 if self.patch_size != 128 => {
                return bad("manipulation detection uses 128 patches".into())
            }
            Phase::P3 if self.num_classes != 4 => {
                return bad("manipulation detection has 4 classes".into())
            }
            _ => {}
        }
        if matches!(self.phase, Phase::P1Head | Phase::P2 | Phase::P3) && self.init_from.is_none() {
            return bad("init_from is required".into());
        }
        if !(0.0..1.0).contains(&self.balance_tolerance) {
            return bad(format!("balance tolerance {}", self.balance_tolerance));
        }
        Ok(())
    }
}

/// Every hyperparameter of a run, read from a `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub optimizer: OptimizerConfig,
    pub arch: DenseNetConfig,
    pub num_classes: usize,
    pub patch_size: usize,
    pub top_k: usize,
    pub reduction: usize,
    pub dropout: f64,
    pub balance_tolerance: f64,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            optimizer: OptimizerConfig::default(),
            arch: DenseNetConfig::densenet201(),
            num_classes: 10,
            patch_size: 256,
            top_k: 4,
            reduction: DEFAULT_REDUCTION,
            dropout: crate::fusionhead::DEFAULT_DROPOUT,
            balance_tolerance: 0.05,
            train_manifest: None,
            val_manifest: None,
            init_from: None,
            out_dir: PathBuf::from("."),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", n + 1))
            })?;
            c.set(k.trim(), v.trim(), base)?;
        }
        c.optimizer.validate()?;
        c.arch.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = || Some(base.join(v));
        let o = &mut self.optimizer;
        match key {
            "seed" => o.seed = parse_num(key, v)?,
            "lr" => o.lr_init = parse_num(key, v)?,
            "momentum" => o.momentum = parse_num(key, v)?,
            "lr_decay" => o.lr_decay = parse_num(key, v)?,
            "plateau_patience" => o.plateau_patience = parse_num(key, v)?,
            "lr_floor" => o.lr_floor = parse_num(key, v)?,
            "batch_size" => o.batch_size = parse_num(key, v)?,
            "max_epochs" => o.max_epochs = parse_num(key, v)?,
            "arch" => {
                self.arch = match v {
                    "densenet201" => DenseNetConfig::densenet201(),
                    "toy" => DenseNetConfig::toy(),
                    _ => return Err(Error::InvalidConfig(format!("arch: unknown {v:?}"))),
                }
            }
            "block_sizes" => {
                self.arch.block_sizes = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "growth_rate" => self.arch.growth_rate = parse_num(key, v)?,
            "compression" => self.arch.compression = parse_num(key, v)?,
            "init_channels" => self.arch.init_channels = parse_num(key, v)?,
            "bottleneck_width" => self.arch.bottleneck_width = parse_num(key, v)?,
            "input_size" => self.arch.input_size = parse_num(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "top_k" => self.top_k = parse_num(key, v)?,
            "reduction" => self.reduction = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "balance_tolerance" => self.balance_tolerance = parse_num(key, v)?,
            "train_manifest" => self.train_manifest = path(),
            "val_manifest" => self.val_manifest = path(),
            "init_from" => self.init_from = path(),
            "out_dir" => self.out_dir = base.join(v),
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn phase_spec(&self, phase: Phase) -> PhaseSpec {
        PhaseSpec {
            phase,
            num_classes: self.num_classes,
            patch_size: self.patch_size,
            init_from: self.init_from.clone(),
            balance_tolerance: self.balance_tolerance,
        }
    }
}

/// Files written by `run_phase`.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub report: TrainReport,
    pub best_weights: PathBuf,
    pub final_weights: PathBuf,
    pub log: PathBuf,
}

fn load_patches(m: &Manifest, size: usize) -> Result<Vec<Labeled<RasterImage>>> {
    use rayon::prelude::*;
    m.rows
        .par_iter()
        .map(|r| {
            let img = r.load_image()?;
            if img.width() != size || img.height() != size {
                return Err(Error::BadPatchSize(img.width()));
            }
            Ok(Labeled {
                input: img,
                label: r.label,
            })
        })
        .collect()
}

/// Extractor with its classifier, with `features.*` loaded from `path` when given.
pub fn load_extractor(
    arch: &DenseNetConfig,
    classes: Option<usize>,
    path: Option<&Path>,
    seed: u64,
) -> Result<DenseNet> {
    let mut net = DenseNet::new(arch.clone(), classes, seed)?;
    if let Some(p) = path {
        WeightStore::load(p)?.apply_prefix(&mut net.store, "features.")?;
    }
    Ok(net)
}

/// Runs one training phase from manifests and writes
/// `<phase>_best.ctws`, `<phase>_final.ctws` and `<phase>_log.jsonl`
/// into `cfg.out_dir`.
pub fn run_phase(
    spec: &PhaseSpec,
    cfg: &RunConfig,
    train: &Manifest,
    val: &Manifest,
) -> Result<PhaseOutcome> {
    spec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyManifest);
    }
    train.validate_labels(spec.num_classes)?;
    val.validate_labels(spec.num_classes)?;
    if spec.phase == Phase::P3 {
        check_balance(
            &train.class_counts(spec.num_classes),
            spec.balance_tolerance,
        )?;
    }
    std::fs::create_dir_all(&cfg.out_dir).at(&cfg.out_dir)?;
    let name = spec.phase.name();
    let log_path = cfg.out_dir.join(format!("{name}_log.jsonl"));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).at(&log_path)?);
    let seed = cfg.optimizer.seed;
    let (report, digest, final_store) = match spec.phase {
        Phase::P1Head => {
            let extractor = load_extractor(&cfg.arch, None, spec.init_from.as_deref(), seed)?;
            let fuse = |m: &Manifest| -> Result<Vec<Labeled<FusedFeature>>> {
                let pl = load_patches(m, 256)?;
                let feats =
                    fuse_batch(&extractor, &pl.iter().map(|s| &s.input).collect::<Vec<_>>())?;
                Ok(feats
                    .into_iter()
                    .zip(&pl)
                    .map(|(f, s)| Labeled {
                        input: f,
                        label: s.label,
                    })
                    .collect())
            };
            let (tr, va) = (fuse(train)?, fuse(val)?);
            let mut head = SeHead::new(
                extractor.feature_len(),
                spec.num_classes,
                cfg.reduction,
                seed,
            )?;
            head.dropout_rate = cfg.dropout;
            let r = fit(&mut head, &tr, &va, &cfg.optimizer, false, Some(&mut log))?;
            (r, head.digest(), head.store)
        }
        _ => {
            let mut net = load_extractor(
                &cfg.arch,
                Some(spec.num_classes),
                spec.init_from.as_deref(),
                seed,
            )?;
            let (tr, va) = (
                load_patches(train, spec.patch_size)?,
                load_patches(val, spec.patch_size)?,
            );
            let r = fit(&mut net, &tr, &va, &cfg.optimizer, true, Some(&mut log))?;
            (r, net.digest(), net.store)
        }
    };
    log.flush().at(&log_path)?;
    let best_weights = cfg.out_dir.join(format!("{name}_best.ctws"));
    let final_weights = cfg.out_dir.join(format!("{name}_final.ctws"));
    WeightStore::from_params(&report.best_store, &digest).save(&best_weights)?;
    WeightStore::from_params(&final_store, &digest).save(&final_weights)?;
    Ok(PhaseOutcome {
        report,
        best_weights,
        final_weights,
        log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Tensor;
    use std::sync::Arc;

    fn one_param_grads(g: Vec<f64>) -> (ParamStore, Gradients) {
        let mut store = ParamStore::new();
        let id = store
            .add("p", &[g.len()], vec![1.0; g.len()], true)
            .unwrap();
        let p = Tensor::variable(id, &[g.len()], Arc::clone(&store.entry(id).data)).unwrap();
        let c = Tensor::new(&[g.len()], g).unwrap();
        let loss = crate::netcore::sum(&crate::netcore::mul(&p, &c).unwrap());
        let grads = loss.backward().unwrap();
        (store, grads)
    }

    #[test]
    fn plain_sgd_step() {
        let (mut store, grads) = one_param_grads(vec![2.0, -1.0]);
        sgd_step(&mut store, &grads, &mut SgdState::new(), 0.1, 0.0).unwrap();
        let d = &store.get("p").unwrap().data;
        assert!((d[0] - 0.8).abs() < 1e-15 && (d[1] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let cfg = OptimizerConfig::default();
        assert!(plateau_schedule(&[1.0, 0.9, 0.8], &cfg)
            .iter()
            .all(|a| *a == LrAction::Keep(1e-3)));
        let a = plateau_schedule(&[1.0, 1.1, 1.2], &cfg);
        assert_eq!(a[2], LrAction::Decay(1e-3 * 0.1));
    }

    #[test]
    fn config_parsing() {
        let text =
            "# run\nlr = 0.01\nbatch_size=8\narch = toy\nblock_sizes = 1, 2\nout_dir = out\n";
        let c = RunConfig::parse(text, Path::new("/tmp/x")).unwrap();
        assert_eq!(c.optimizer.lr_init, 0.01);
        assert_eq!(c.optimizer.batch_size, 8);
        assert_eq!(c.arch.block_sizes, vec![1, 2]);
        assert_eq!(c.out_dir, Path::new("/tmp/x/out"));
        assert!(RunConfig::parse("nonsense = 1", Path::new(".")).is_err());
        assert!(RunConfig::parse("lr = abc", Path::new(".")).is_err());
        assert!(RunConfig::parse("lr 0.1", Path::new(".")).is_err());
    }

    #[test]
    fn phase_spec_rules() {
        let mut s = PhaseSpec {
            phase: Phase::P3,
            num_classes: 4,
            patch_size: 256,
            init_from: Some("p1.ctws".into()),
            balance_tolerance: 0.05,
        };
        assert!(s.validate().is_err());
        s.patch_size = 128;
        assert!(s.validate().is_ok());
        s.init_from = None;
        assert!(s.validate().is_err());
        s.phase = Phase::P1Extractor;
        assert!(s.validate().is_ok());
        assert_eq!("p1-head".parse::<Phase>().unwrap(), Phase::P1Head);
    }

    #[test]
    fn balance() {
        assert!(check_balance(&[100, 100, 96, 100], 0.05).is_ok());
        assert!(check_balance(&[100, 100, 94, 100], 0.05).is_err());
        assert!(check_balance(&[0, 0], 0.05).is_err());
    }
}
