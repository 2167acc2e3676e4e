//! Downstream adaptation and evaluation: task heads, the few-shot protocol,
//! Dice / accuracy / MAE, linear probes on pooled latents and metric reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::normalize;
use crate::model::ops;
use crate::model::{DecodeMode, Grads, Init, ModelError, ParamId, UNet};
use crate::objectives::{cross_entropy_grad, pathology_loss_grad, ImageId};
use crate::optim::{AdamW, OptimizerConfig};
use crate::phantom::{ContrastFunction, LESION, SCALE_RANGE};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::sigmoid;
use crate::tensor::{Tensor, Volume};
use crate::training::{Checkpoint, PretrainConfig};
use crate::volume_store::{DatasetManifest, ManifestEntry, Split, StoreError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("incompatible shape: {0}")]
    IncompatibleShape(String),
    #[error("need {needed} labeled subjects, the fine-tune split has {available}")]
    InsufficientLabeledSubjects { needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("probe labels contain a single class")]
    SingleClassLabels,
    #[error("subject {0} appears in both fine-tuning and test data")]
    SplitLeak(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
}

/// Dice overlap `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &Volume<bool>, truth: &Volume<bool>) -> Result<f64, EvalError> {
    if pred.dims() != truth.dims() {
        return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", pred.dims(), truth.dims())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::ShapeMismatch(format!("{a} predictions vs {b} labels")));
    }
    if a == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// Fraction of positions where `preds` equals `labels`.
pub fn accuracy<L: PartialEq>(preds: &[L], labels: &[L]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), targets.len())?;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Lesion mask.
    Seg,
    /// Health status.
    Cls,
    /// Anatomical scale factor (the synthetic "age").
    Reg,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Seg, TaskKind::Cls, TaskKind::Reg];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Seg => "seg",
            TaskKind::Cls => "cls",
            TaskKind::Reg => "reg",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Seg => "dice",
            TaskKind::Cls => "accuracy",
            TaskKind::Reg => "mae",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != TaskKind::Reg
    }

    /// Input contrast: the lesion-visible one for lesion and health tasks.
    pub fn contrast(self) -> &'static str {
        match self {
            TaskKind::Seg | TaskKind::Cls => "c2",
            TaskKind::Reg => "c1",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "seg" | "segmentation" => Ok(TaskKind::Seg),
            "cls" | "classification" => Ok(TaskKind::Cls),
            "reg" | "regression" => Ok(TaskKind::Reg),
            other => Err(format!("unknown task {other:?} (expected seg, cls or reg)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub k_shot: usize,
    pub seeds: Vec<u64>,
    pub init: InitKind,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, k_shot: usize, seeds: Vec<u64>) -> Self {
        Self { kind, k_shot, seeds, init: InitKind::Pretrained }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Passes over the k labeled subjects.
    pub epochs: usize,
    /// Backbone learning rate (a tenth of the pre-training rate by default).
    pub lr: f64,
    /// Multiplier applied to the freshly initialized head.
    pub head_lr_multiplier: f64,
    pub weight_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-4, head_lr_multiplier: 10.0, weight_decay: 1e-4 }
    }
}

impl FinetuneConfig {
    /// Defaults with the backbone rate at a tenth of the pre-training rate.
    pub fn for_pretraining(cfg: &PretrainConfig) -> Self {
        Self { lr: cfg.optimizer.lr / 10.0, ..Self::default() }
    }
}

/// Normalizes a scale factor from `SCALE_RANGE` to `[-1, 1]`.
pub fn scale_to_target(s: f64) -> f64 {
    let (lo, hi) = SCALE_RANGE;
    2.0 * (s - lo) / (hi - lo) - 1.0
}

pub fn target_to_scale(t: f64) -> f64 {
    let (lo, hi) = SCALE_RANGE;
    lo + (t + 1.0) * 0.5 * (hi - lo)
}

/// One labeled image.
#[derive(Debug, Clone)]
pub struct TaskExample {
    pub subject: String,
    /// Normalized input `(1, D, H, W)`.
    pub input: Tensor<f32>,
    pub lesion: Option<Volume<bool>>,
    pub health: Option<bool>,
    pub scale: Option<f64>,
}

/// Timepoint-0 images of `kind`'s contrast for the subjects of `split`.
pub fn load_examples(manifest: &DatasetManifest, kind: TaskKind, split: Split) -> Result<Vec<TaskExample>, EvalError> {
    let contrast = kind.contrast();
    if !manifest.contrasts.iter().any(|c| c == contrast) {
        return Err(EvalError::InvalidTask(format!("task {} needs contrast {contrast}", kind.name())));
    }
    let mut out = Vec::new();
    for e in manifest.entries_in(split).filter(|e| e.contrast_id == contrast && e.timepoint == 0) {
        let rec = manifest.read_entry(e)?;
        let (norm, _) = normalize(&rec.voxels);
        let lesion = match kind {
            TaskKind::Seg => Some(manifest.read_tissue_map(&e.subject_id)?.map(|l| l == LESION)),
            _ => None,
        };
        let scale = manifest.subject(&e.subject_id).and_then(|s| s.scale);
        let ex = TaskExample { subject: e.subject_id.clone(), input: Tensor::from_volume(&norm), lesion, health: e.health_status, scale };
        let labeled = match kind {
            TaskKind::Seg => true,
            TaskKind::Cls => ex.health.is_some(),
            TaskKind::Reg => ex.scale.is_some(),
        };
        if labeled {
            out.push(ex);
        }
    }
    out.sort_by(|a, b| a.subject.cmp(&b.subject));
    Ok(out)
}

/// Output of a task model on one image.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutput {
    /// Two-class logits `(2, D, H, W)`.
    Logits(Tensor<f32>),
    /// Single logit or regression value.
    Scalar(f32),
}

/// Pre-trained (or random) backbone plus a fresh task head.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub kind: TaskKind,
    pub net: UNet<f32>,
    pub head: [ParamId; 2],
    /// Per-channel `(mean, 1/std)` applied to pooled features before the
    /// affine head; identity until [`TaskModel::fit_feature_scaling`].
    pub feature_scale: Option<(Vec<f32>, Vec<f32>)>,
}

/// Pooled features whose spread across the fine-tuning set falls below this
/// are ignored by the scalar heads.
pub const FEATURE_STD_FLOOR: f32 = 1e-6;

/// Attaches a fresh head: a pointwise two-class projection on the decoder
/// features for segmentation, and an affine map of the pooled full
/// bottleneck for classification and regression.
pub fn attach_head(mut net: UNet<f32>, kind: TaskKind, dims: [usize; 3], seed: u64) -> Result<TaskModel, EvalError> {
    net.config().check_input_dims(dims).map_err(|e| EvalError::IncompatibleShape(e.to_string()))?;
    let cfg = net.config().clone();
    let hseed = derive_seed(seed, Stream::FineTune, &[0]);
    let (c_in, c_out) = match kind {
        TaskKind::Seg => (cfg.width(0), 2),
        TaskKind::Cls | TaskKind::Reg => (cfg.bottleneck_channels, 1),
    };
    let w = net.params.register(format!("task.{}.w", kind.name()), &[c_out, c_in], Init::FanIn { fan_in: c_in, gain: 1.0 }, hseed);
    let b = net.params.register(format!("task.{}.b", kind.name()), &[c_out], Init::Zeros, hseed);
    Ok(TaskModel { kind, net, head: [w, b], feature_scale: None })
}

impl TaskModel {
    fn scaled_features(&self, pooled: &[f32]) -> Vec<f32> {
        match &self.feature_scale {
            Some((mu, inv)) => pooled.iter().zip(mu).zip(inv).map(|((m, mu), s)| (m - mu) * s).collect(),
            None => pooled.to_vec(),
        }
    }

    /// Freezes standardization statistics of the pooled bottleneck over
    /// `examples` under the current weights (scalar heads only).
    pub fn fit_feature_scaling(&mut self, examples: &[TaskExample]) -> Result<(), EvalError> {
        if self.kind == TaskKind::Seg || examples.is_empty() {
            return Ok(());
        }
        let feats = examples
            .iter()
            .map(|e| Ok(self.net.encode(&e.input)?.latent.bottleneck().channel_means()))
            .collect::<Result<Vec<_>, EvalError>>()?;
        let n = feats.len() as f32;
        let c = feats[0].len();
        let mu: Vec<f32> = (0..c).map(|j| feats.iter().map(|f| f[j]).sum::<f32>() / n).collect();
        let inv: Vec<f32> = (0..c)
            .map(|j| {
                let sd = (feats.iter().map(|f| (f[j] - mu[j]).powi(2)).sum::<f32>() / n).sqrt();
                if sd < FEATURE_STD_FLOOR {
                    0.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        self.feature_scale = Some((mu, inv));
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<TaskOutput, EvalError> {
        let enc = self.net.encode(x)?;
        let [w, b] = self.head.map(|id| self.net.params.get(id));
        Ok(match self.kind {
            TaskKind::Seg => {
                let (f, _) = self.net.decode_features_with_tape(&enc.latent.anat, &enc.latent.contrast, Some(&enc.skips));
                TaskOutput::Logits(ops::pointwise(&f, w, b, 2))
            }
            TaskKind::Cls | TaskKind::Reg => {
                let f = self.scaled_features(&enc.latent.bottleneck().channel_means());
                TaskOutput::Scalar(f.iter().zip(w).map(|(m, w)| m * w).sum::<f32>() + b[0])
            }
        })
    }

    /// Loss on one example; accumulates gradients into `grads`.
    pub fn loss_and_grad(&self, ex: &TaskExample, grads: &mut Grads<f32>) -> Result<f64, EvalError> {
        let (enc, etape) = self.net.encode_with_tape(&ex.input)?;
        let [w_id, b_id] = self.head;
        match self.kind {
            TaskKind::Seg => {
                let truth = ex.lesion.as_ref().ok_or_else(|| EvalError::InvalidTask("missing lesion mask".into()))?;
                let (f, dtape) =
                    self.net.decode_features_with_tape(&enc.latent.anat, &enc.latent.contrast, Some(&enc.skips));
                let logits = ops::pointwise(&f, self.net.params.get(w_id), self.net.params.get(b_id), 2);
                let (loss, g) = seg_loss_grad(&logits, truth)?;
                let w = self.net.params.get(w_id).to_vec();
                let (gw, gb) = grads.pair(w_id, b_id);
                let gf = ops::pointwise_backward(&f, &w, &g, gw, gb, true).expect("input grad");
                let dg = self.net.decoder_backward(&dtape, gf, grads);
                self.net.encode_backward(&etape, Some(&dg.anat), Some(&dg.contrast), dg.skips.as_deref(), grads);
                Ok(loss)
            }
            TaskKind::Cls | TaskKind::Reg => {
                let z = enc.latent.bottleneck();
                let f = self.scaled_features(&z.channel_means());
                let w = self.net.params.get(w_id).to_vec();
                let out = f.iter().zip(&w).map(|(m, w)| m * w).sum::<f32>() + self.net.params.get(b_id)[0];
                let (loss, g) = if self.kind == TaskKind::Cls {
                    let label = ex.health.ok_or_else(|| EvalError::InvalidTask("missing health label".into()))?;
                    pathology_loss_grad(out, label)
                } else {
                    let s = ex.scale.ok_or_else(|| EvalError::InvalidTask("missing scale".into()))?;
                    let d = out - scale_to_target(s) as f32;
                    (d * d, 2.0 * d)
                };
                let (gw, gb) = grads.pair(w_id, b_id);
                gb[0] += g;
                for (gw, f) in gw.iter_mut().zip(&f) {
                    *gw += g * f;
                }
                let n = z.spatial_len() as f32;
                let mut gz = Tensor::from_vec(z.shape(), vec![0.0; z.len()]);
                for c in 0..z.channels() {
                    let s = self.feature_scale.as_ref().map_or(1.0, |(_, inv)| inv[c]);
                    let v = g * w[c] * s / n;
                    gz.channel_mut(c).iter_mut().for_each(|x| *x = v);
                }
                let ca = self.net.config().anat_channels;
                let (ga, gc) = (gz.slice_channels(0, ca), gz.slice_channels(ca, gz.channels()));
                self.net.encode_backward(&etape, Some(&ga), Some(&gc), None, grads);
                Ok(loss as f64)
            }
        }
    }

    pub fn predict_mask(&self, x: &Tensor<f32>) -> Result<Volume<bool>, EvalError> {
        match self.forward(x)? {
            TaskOutput::Logits(l) => {
                let data = l.channel(1).iter().zip(l.channel(0)).map(|(a, b)| a > b).collect();
                Ok(Volume::from_vec(l.spatial(), data))
            }
            TaskOutput::Scalar(_) => Err(EvalError::InvalidTask("not a segmentation model".into())),
        }
    }

    /// Health probability (classification) or scale estimate (regression).
    pub fn predict_scalar(&self, x: &Tensor<f32>) -> Result<f64, EvalError> {
        match (self.forward(x)?, self.kind) {
            (TaskOutput::Scalar(v), TaskKind::Cls) => Ok(sigmoid(v as f64)),
            (TaskOutput::Scalar(v), _) => Ok(target_to_scale(v as f64)),
            _ => Err(EvalError::InvalidTask("not a scalar model".into())),
        }
    }

    /// Mean task metric over `examples`.
    pub fn evaluate(&self, examples: &[TaskExample]) -> Result<f64, EvalError> {
        match self.kind {
            TaskKind::Seg => {
                let mut total = 0.0;
                for ex in examples {
                    let truth = ex.lesion.as_ref().ok_or_else(|| EvalError::InvalidTask("missing lesion mask".into()))?;
                    total += dice(&self.predict_mask(&ex.input)?, truth)?;
                }
                if examples.is_empty() {
                    return Err(EvalError::EmptyInput);
                }
                Ok(total / examples.len() as f64)
            }
            TaskKind::Cls => {
                let preds = examples.iter().map(|e| self.predict_scalar(&e.input).map(|p| p > 0.5)).collect::<Result<Vec<_>, _>>()?;
                let labels: Vec<bool> = examples.iter().map(|e| e.health.unwrap_or(false)).collect();
                accuracy(&preds, &labels)
            }
            TaskKind::Reg => {
                let preds = examples.iter().map(|e| self.predict_scalar(&e.input)).collect::<Result<Vec<_>, _>>()?;
                let targets: Vec<f64> = examples.iter().map(|e| e.scale.unwrap_or(f64::NAN)).collect();
                mae(&preds, &targets)
            }
        }
    }
}

/// Soft Dice smoothing constant.
pub const DICE_SMOOTH: f32 = 1.0;

/// Cross-entropy plus soft Dice on the lesion probability, with the
/// gradient w.r.t. the two-class logits.
pub fn seg_loss_grad(logits: &Tensor<f32>, truth: &Volume<bool>) -> Result<(f64, Tensor<f32>), EvalError> {
    let labels = truth.map(|t| t as u8);
    let (ce, mut g) = cross_entropy_grad(logits, &labels).map_err(|e| EvalError::ShapeMismatch(e.to_string()))?;
    let n = logits.spatial_len();
    let p1: Vec<f32> = (0..n).map(|i| sigmoid(logits.channel(1)[i] - logits.channel(0)[i])).collect();
    let q: Vec<f32> = truth.data().iter().map(|&t| t as u8 as f32).collect();
    let inter: f32 = p1.iter().zip(&q).map(|(p, q)| p * q).sum();
    let denom = p1.iter().sum::<f32>() + q.iter().sum::<f32>() + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let dice_loss = 1.0 - num / denom;
    for i in 0..n {
        let d_dp = -(2.0 * q[i] * denom - num) / (denom * denom);
        let dz = d_dp * p1[i] * (1.0 - p1[i]);
        g.channel_mut(1)[i] += dz;
        g.channel_mut(0)[i] -= dz;
    }
    Ok((ce as f64 + dice_loss as f64, g))
}

/// Picks `k` subjects from `pool` with a seeded shuffle, alternating between
/// health classes while both remain so small draws see both.
pub fn select_subjects(pool: &[TaskExample], k: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    if k == 0 || k > pool.len() {
        return Err(EvalError::InsufficientLabeledSubjects { needed: k, available: pool.len() });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::FineTune, &[1]));
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| pool[i].health.unwrap_or(false));
    pos.reverse();
    neg.reverse();
    let mut out = Vec::with_capacity(k);
    let mut turn = stream_rng(seed, Stream::FineTune, &[2]).random_bool(0.5);
    while out.len() < k {
        let next = if turn { pos.pop().or_else(|| neg.pop()) } else { neg.pop().or_else(|| pos.pop()) };
        out.push(next.expect("k <= pool size"));
        turn = !turn;
    }
    Ok(out)
}

use rand::Rng as _;

/// Full fine-tuning of `model` on `train` for `cfg.epochs` passes.
pub fn few_shot_finetune(mut model: TaskModel, train: &[TaskExample], cfg: &FinetuneConfig, seed: u64) -> Result<TaskModel, EvalError> {
    if train.is_empty() {
        return Err(EvalError::InsufficientLabeledSubjects { needed: 1, available: 0 });
    }
    let ocfg = OptimizerConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, min_lr: 0.0, ..OptimizerConfig::default() };
    let mut opt = AdamW::new(ocfg, &model.net.params);
    for id in model.head {
        opt.set_lr_scale(id, cfg.head_lr_multiplier);
    }
    model.fit_feature_scaling(train)?;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::FineTune, &[3, epoch as u64]));
        for i in order {
            let mut grads = model.net.params.zero_grads();
            model.loss_and_grad(&train[i], &mut grads)?;
            opt.step(&mut model.net.params, &grads, cfg.lr);
        }
    }
    Ok(model)
}

/// Errors if any subject of `test` appears in `train`.
pub fn audit_disjoint(train: &[TaskExample], test: &[TaskExample]) -> Result<(), EvalError> {
    let seen: BTreeSet<&str> = train.iter().map(|e| e.subject.as_str()).collect();
    match test.iter().find(|e| seen.contains(e.subject.as_str())) {
        Some(e) => Err(EvalError::SplitLeak(e.subject.clone())),
        None => Ok(()),
    }
}

/// Metric of one fine-tuning run from the given initialization.
pub fn run_one(
    ckpt: &Checkpoint,
    kind: TaskKind,
    init: InitKind,
    train: &[TaskExample],
    test: &[TaskExample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<f64, EvalError> {
    audit_disjoint(train, test)?;
    let net = match init {
        InitKind::Pretrained => ckpt.network()?,
        InitKind::Random => UNet::new(&ckpt.config.model, derive_seed(seed, Stream::FineTune, &[4]))?,
    };
    let dims = train.first().map(|e| e.input.spatial()).ok_or(EvalError::EmptyInput)?;
    let model = attach_head(net, kind, dims, seed)?;
    let tuned = few_shot_finetune(model, train, cfg, seed)?;
    tuned.evaluate(test)
}

/// Paired comparison of checkpoint and random initialization over the
/// seeds of `spec`. Few-shot subjects come from the validation split;
/// evaluation uses the test split.
pub fn evaluate_task(ckpt: &Checkpoint, manifest: &DatasetManifest, spec: &TaskSpec, cfg: &FinetuneConfig) -> Result<MetricReport, EvalError> {
    if spec.k_shot == 0 {
        return Err(EvalError::InvalidTask("k_shot must be >= 1".into()));
    }
    let pool = load_examples(manifest, spec.kind, Split::Val)?;
    let test = load_examples(manifest, spec.kind, Split::Test)?;
    if test.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut rows = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let picked = select_subjects(&pool, spec.k_shot, seed)?;
        let train: Vec<TaskExample> = picked.iter().map(|&i| pool[i].clone()).collect();
        let a = run_one(ckpt, spec.kind, spec.init, &train, &test, cfg, seed)?;
        let b = run_one(ckpt, spec.kind, InitKind::Random, &train, &test, cfg, seed)?;
        log::info!("{} seed {seed}: {:?} {a:.4} random {b:.4}", spec.kind.name(), spec.init);
        rows.push(SeedResult { seed, pretrained: a, random: b });
    }
    Ok(MetricReport { task: spec.kind, metric: spec.kind.metric().into(), k_shot: spec.k_shot, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub pretrained: f64,
    pub random: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub metric: String,
    pub k_shot: usize,
    pub rows: Vec<SeedResult>,
}

impl MetricReport {
    pub fn pretrained(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.pretrained).collect()
    }

    pub fn random(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.random).collect()
    }

    /// Strict improvement of the mean in the metric's preferred direction.
    pub fn pretrained_wins(&self) -> bool {
        let (a, _) = mean_sd(&self.pretrained());
        let (b, _) = mean_sd(&self.random());
        if self.task.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: one row per seed, then a mean ± sd row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task {} ({}, k={})", self.task.name(), self.metric, self.k_shot);
        let _ = writeln!(s, "{:>10}  {:>17}  {:>17}", "seed", "pretrained", "random");
        for r in &self.rows {
            let _ = writeln!(s, "{:>10}  {:>17.4}  {:>17.4}", r.seed, r.pretrained, r.random);
        }
        let (pm, ps) = mean_sd(&self.pretrained());
        let (rm, rs) = mean_sd(&self.random());
        let _ = writeln!(s, "{:>10}  {:>17}  {:>17}", "mean±sd", format!("{pm:.4}±{ps:.4}"), format!("{rm:.4}±{rs:.4}"));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
    /// Features whose training std falls below this are zeroed.
    pub std_floor: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { iterations: 500, lr: 0.5, l2: 1e-3, seed: 0, std_floor: 1e-6 }
    }
}

/// Feature vectors with categorical labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl ProbeSet {
    pub fn push(&mut self, features: Vec<f64>, label: impl Into<String>) {
        self.features.push(features);
        self.labels.push(label.into());
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Multinomial logistic regression trained by full-batch gradient descent
/// on standardized features; returns accuracy on `test`.
pub fn linear_probe(train: &ProbeSet, test: &ProbeSet, spec: &ProbeSpec) -> Result<f64, EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let classes: Vec<&String> = train.labels.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(EvalError::SingleClassLabels);
    }
    let index: BTreeMap<&String, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let d = train.features[0].len();
    if train.features.iter().chain(&test.features).any(|f| f.len() != d) {
        return Err(EvalError::ShapeMismatch("feature lengths differ".into()));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for f in &train.features {
        for j in 0..d {
            mean[j] += f[j] / n;
        }
    }
    for f in &train.features {
        for j in 0..d {
            sd[j] += (f[j] - mean[j]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt()).collect();
    let standardize = |f: &[f64]| -> Vec<f64> {
        (0..d).map(|j| if sd[j] < spec.std_floor { 0.0 } else { (f[j] - mean[j]) / sd[j] }).collect()
    };
    let xs: Vec<Vec<f64>> = train.features.iter().map(|f| standardize(f)).collect();
    let ys: Vec<usize> = train.labels.iter().map(|l| index[l]).collect();
    let k = classes.len();
    let mut w = vec![vec![0.0; d]; k];
    let mut b = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for _ in 0..spec.iterations {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for (x, &y) in xs.iter().zip(&ys) {
            softmax_into(&w, &b, x, &mut probs);
            for c in 0..k {
                let g = (probs[c] - (c == y) as u8 as f64) / n;
                gb[c] += g;
                for j in 0..d {
                    gw[c][j] += g * x[j];
                }
            }
        }
        for c in 0..k {
            b[c] -= spec.lr * gb[c];
            for j in 0..d {
                w[c][j] -= spec.lr * (gw[c][j] + spec.l2 * w[c][j]);
            }
        }
    }
    let mut hits = 0;
    for (f, label) in test.features.iter().zip(&test.labels) {
        softmax_into(&w, &b, &standardize(f), &mut probs);
        let mut best = 0;
        for c in 1..k {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        hits += (classes[best] == label) as usize;
    }
    Ok(hits as f64 / test.len() as f64)
}

fn softmax_into(w: &[Vec<f64>], b: &[f64], x: &[f64], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = b[c] + w[c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Same probe with training labels permuted by `seed`.
pub fn shuffled_label_probe(train: &ProbeSet, test: &ProbeSet, spec: &ProbeSpec, seed: u64) -> Result<f64, EvalError> {
    let mut shuffled = train.clone();
    shuffled.labels.shuffle(&mut stream_rng(seed, Stream::Probe, &[0]));
    linear_probe(&shuffled, test, spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeFactor {
    Subject,
    Contrast,
    Lesion,
}

impl std::str::FromStr for ProbeFactor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "subject" => Ok(ProbeFactor::Subject),
            "contrast" => Ok(ProbeFactor::Contrast),
            "lesion" => Ok(ProbeFactor::Lesion),
            other => Err(format!("unknown factor {other:?} (expected subject, contrast or lesion)")),
        }
    }
}

/// Spatial means of both latent partitions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLatent {
    pub id: ImageId,
    pub health: Option<bool>,
    pub anat: Vec<f64>,
    pub contrast: Vec<f64>,
}

/// Encodes the unmasked, normalized images of `entries`.
pub fn pooled_latents<'a>(
    net: &UNet<f32>,
    manifest: &DatasetManifest,
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
) -> Result<Vec<PooledLatent>, EvalError> {
    let mut out = Vec::new();
    for e in entries {
        let rec = manifest.read_entry(e)?;
        let (norm, _) = normalize(&rec.voxels);
        let enc = net.encode(&Tensor::from_volume(&norm))?;
        let mean = |t: &Tensor<f32>| t.channel_means().iter().map(|&v| v as f64).collect();
        out.push(PooledLatent {
            id: ImageId::new(e.subject_id.clone(), e.contrast_id.clone(), e.timepoint),
            health: e.health_status,
            anat: mean(&enc.latent.anat),
            contrast: mean(&enc.latent.contrast),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorProbeReport {
    pub factor: ProbeFactor,
    pub acc_anat: f64,
    pub acc_contrast: f64,
    /// Mean accuracy of shuffled-label probes on each partition.
    pub chance_anat: f64,
    pub chance_contrast: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Number of shuffled-label probes averaged into the chance estimate.
pub const CHANCE_REPEATS: u64 = 10;

fn lesion_visible(contrast: &str) -> bool {
    ContrastFunction::builtin(contrast).is_some_and(|c| c.lesion_visible)
}

/// Probe for one generative factor on both partitions.
///
/// * contrast: train-split subjects vs test-split subjects, all contrasts;
/// * lesion: as above, restricted to lesion-visible contrasts;
/// * subject: test-split subjects, first contrast vs the remaining ones.
pub fn factor_probe(net: &UNet<f32>, manifest: &DatasetManifest, factor: ProbeFactor, spec: &ProbeSpec) -> Result<FactorProbeReport, EvalError> {
    let t0 = |e: &&ManifestEntry| e.timepoint == 0;
    let (train_lat, test_lat, label): (Vec<PooledLatent>, Vec<PooledLatent>, fn(&PooledLatent) -> String) = match factor {
        ProbeFactor::Contrast => (
            pooled_latents(net, manifest, manifest.entries_in(Split::Train).filter(t0))?,
            pooled_latents(net, manifest, manifest.entries_in(Split::Test).filter(t0))?,
            |p| p.id.contrast.clone(),
        ),
        ProbeFactor::Lesion => {
            let vis = |e: &&ManifestEntry| e.timepoint == 0 && lesion_visible(&e.contrast_id) && e.health_status.is_some();
            (
                pooled_latents(net, manifest, manifest.entries_in(Split::Train).filter(vis))?,
                pooled_latents(net, manifest, manifest.entries_in(Split::Test).filter(vis))?,
                |p| if p.health == Some(true) { "healthy".into() } else { "lesion".into() },
            )
        }
        ProbeFactor::Subject => {
            let first = manifest.contrasts.first().cloned().ok_or(EvalError::EmptyInput)?;
            let all = pooled_latents(net, manifest, manifest.entries_in(Split::Test).filter(t0))?;
            let (a, b): (Vec<_>, Vec<_>) = all.into_iter().partition(|p| p.id.contrast == first);
            (a, b, |p| p.id.subject.clone())
        }
    };
    let build = |lat: &[PooledLatent], anat: bool| {
        let mut s = ProbeSet::default();
        for p in lat {
            s.push(if anat { p.anat.clone() } else { p.contrast.clone() }, label(p));
        }
        s
    };
    let mut accs = [0.0; 2];
    let mut chance = [0.0; 2];
    for (i, anat) in [true, false].into_iter().enumerate() {
        let (tr, te) = (build(&train_lat, anat), build(&test_lat, anat));
        accs[i] = linear_probe(&tr, &te, spec)?;
        for r in 0..CHANCE_REPEATS {
            chance[i] += shuffled_label_probe(&tr, &te, spec, derive_seed(spec.seed, Stream::Probe, &[r]))? / CHANCE_REPEATS as f64;
        }
    }
    Ok(FactorProbeReport {
        factor,
        acc_anat: accs[0],
        acc_contrast: accs[1],
        chance_anat: chance[0],
        chance_contrast: chance[1],
        n_train: train_lat.len(),
        n_test: test_lat.len(),
    })
}

/// Bottleneck tissue accuracy of the anatomical head and the accuracy of
/// always predicting the most frequent pooled label, on `split`.
pub fn anat_head_accuracy(net: &UNet<f32>, manifest: &DatasetManifest, split: Split) -> Result<(f64, f64), EvalError> {
    let k = net.config().anat_classes;
    let (mut hits, mut total) = (0usize, 0usize);
    let mut freq = vec![0usize; k];
    for e in manifest.entries_in(split).filter(|e| e.has_tissue_map) {
        let rec = manifest.read_entry(e)?;
        let (norm, _) = normalize(&rec.voxels);
        let enc = net.encode(&Tensor::from_volume(&norm))?;
        let pred = crate::objectives::argmax_channels(&net.anat_head(&enc.latent.anat)?);
        let truth = crate::objectives::majority_pool(&manifest.read_tissue_map(&e.subject_id)?, pred.dims(), k)
            .map_err(|e| EvalError::ShapeMismatch(e.to_string()))?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            hits += (p == t) as usize;
            freq[t as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok((hits as f64 / total as f64, *freq.iter().max().expect("k >= 1") as f64 / total as f64))
}

/// Accuracy of the pathology head (logit > 0 means healthy) on `split`.
pub fn pathology_head_accuracy(net: &UNet<f32>, manifest: &DatasetManifest, split: Split) -> Result<f64, EvalError> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for e in manifest.entries_in(split).filter(|e| e.health_status.is_some()) {
        let rec = manifest.read_entry(e)?;
        let (norm, _) = normalize(&rec.voxels);
        let enc = net.encode(&Tensor::from_volume(&norm))?;
        preds.push(net.pathology_head(&enc.latent.contrast)? > 0.0);
        labels.push(e.health_status.expect("filtered"));
    }
    accuracy(&preds, &labels)
}

/// Decodes anatomy of `(s, a)` with the contrast code of `(s, b)` for every
/// test subject having both, returning `(mse_to_b, mse_to_a)` per subject.
pub fn swap_errors(net: &UNet<f32>, manifest: &DatasetManifest, split: Split, a: &str, b: &str) -> Result<Vec<(String, f64, f64)>, EvalError> {
    let mut out = Vec::new();
    let subjects: Vec<String> = manifest.splits.get(split).to_vec();
    for s in subjects {
        let find = |c: &str| manifest.entries.iter().find(|e| e.subject_id == s && e.contrast_id == c && e.timepoint == 0);
        let (Some(ea), Some(eb)) = (find(a), find(b)) else { continue };
        let load = |e: &ManifestEntry| -> Result<Tensor<f32>, EvalError> {
            Ok(Tensor::from_volume(&normalize(&manifest.read_entry(e)?.voxels).0))
        };
        let (xa, xb) = (load(ea)?, load(eb)?);
        let (za, zb) = (net.encode(&xa)?, net.encode(&xb)?);
        let y = net.decode(&za.latent.anat, &zb.latent.contrast, None, DecodeMode::Swap)?;
        let mse = |t: &Tensor<f32>| {
            y.data().iter().zip(t.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / y.len() as f64
        };
        out.push((s.clone(), mse(&xb), mse(&xa)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;
    use rand::{Rng, SeedableRng};

    fn mask(dims: [usize; 3], on: &[usize]) -> Volume<bool> {
        let mut v = Volume::filled(dims, false);
        for &i in on {
            v.data_mut()[i] = true;
        }
        v
    }

    #[test]
    fn dice_cases() {
        let a = mask([2, 2, 2], &[0, 1, 2, 3]);
        let b = mask([2, 2, 2], &[2, 3, 4, 5]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask([2, 2, 2], &[4, 5, 6, 7])).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let e = mask([2, 2, 2], &[]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &mask([2, 2, 1], &[])).is_err());
    }

    #[test]
    fn dice_monotone_in_overlap() {
        let a = mask([4, 4, 1], &[0, 1, 2, 3]);
        let mut last = -1.0;
        for shift in (0..=4).rev() {
            let b = mask([4, 4, 1], &(shift..shift + 4).collect::<Vec<_>>());
            let d = dice(&a, &b).unwrap();
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn accuracy_and_mae_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[true, false], &[true, true]).unwrap(), 0.5);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert!(matches!(accuracy::<u8>(&[], &[]), Err(EvalError::EmptyInput)));
        assert!(matches!(mae(&[], &[]), Err(EvalError::EmptyInput)));
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn scale_target_round_trip() {
        assert_eq!(scale_to_target(0.8), -1.0);
        assert_eq!(scale_to_target(1.0), 1.0);
        assert!((target_to_scale(scale_to_target(0.87)) - 0.87).abs() < 1e-12);
    }

    #[test]
    fn probe_separable_and_shuffled() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut train = ProbeSet::default();
        let mut test = ProbeSet::default();
        for i in 0..200 {
            let c = i % 2;
            let f = vec![c as f64 * 4.0 - 2.0 + rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0)];
            if i < 100 {
                train.push(f, c.to_string());
            } else {
                test.push(f, c.to_string());
            }
        }
        let spec = ProbeSpec::default();
        assert_eq!(linear_probe(&train, &test, &spec).unwrap(), 1.0);
        assert_eq!(linear_probe(&train, &test, &spec).unwrap(), linear_probe(&train, &test, &spec).unwrap());

        let mut noise_train = ProbeSet::default();
        let mut noise_test = ProbeSet::default();
        for i in 0..2000 {
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l = rng.random_bool(0.5).to_string();
            if i < 1000 {
                noise_train.push(f, l);
            } else {
                noise_test.push(f, l);
            }
        }
        let acc = shuffled_label_probe(&noise_train, &noise_test, &spec, 1).unwrap();
        assert!((0.4..=0.6).contains(&acc), "{acc}");
        let mut single = train.clone();
        single.labels.iter_mut().for_each(|l| *l = "x".into());
        assert!(matches!(linear_probe(&single, &test, &spec), Err(EvalError::SingleClassLabels)));
    }

    #[test]
    fn constant_features_are_ignored() {
        let mut train = ProbeSet::default();
        for i in 0..10 {
            train.push(vec![1.0, i as f64], (i % 2).to_string());
        }
        let acc = linear_probe(&train, &train, &ProbeSpec::default()).unwrap();
        assert!(acc.is_finite());
    }

    fn example(dims: [usize; 3], seed: u64, health: bool) -> TaskExample {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        TaskExample {
            subject: format!("s{seed}"),
            input: Tensor::from_vec([1, dims[0], dims[1], dims[2]], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
            lesion: Some(mask(dims, if health { &[] } else { &[0, 1, 2] })),
            health: Some(health),
            scale: Some(0.9),
        }
    }

    #[test]
    fn head_shapes() {
        let cfg = UNetConfig::desk();
        let seg = attach_head(UNet::new(&cfg, 0).unwrap(), TaskKind::Seg, [24; 3], 0).unwrap();
        let x = example([24; 3], 0, true).input;
        match seg.forward(&x).unwrap() {
            TaskOutput::Logits(l) => assert_eq!(l.shape(), [2, 24, 24, 24]),
            other => panic!("{other:?}"),
        }
        let cls = attach_head(UNet::new(&cfg, 0).unwrap(), TaskKind::Cls, [24; 3], 0).unwrap();
        assert!(matches!(cls.forward(&x).unwrap(), TaskOutput::Scalar(_)));
        assert!(matches!(
            attach_head(UNet::new(&cfg, 0).unwrap(), TaskKind::Cls, [10; 3], 0),
            Err(EvalError::IncompatibleShape(_))
        ));
    }

    #[test]
    fn seg_loss_gradient_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::from_vec([2, 2, 2, 2], (0..16).map(|_| rng.random_range(-2.0f32..2.0)).collect());
        let truth = mask([2, 2, 2], &[1, 4, 5]);
        let (_, g) = seg_loss_grad(&logits, &truth).unwrap();
        for i in 0..16 {
            let h = 1e-2f32;
            let mut up = logits.clone();
            up.data_mut()[i] += h;
            let mut dn = logits.clone();
            dn.data_mut()[i] -= h;
            let fd = (seg_loss_grad(&up, &truth).unwrap().0 - seg_loss_grad(&dn, &truth).unwrap().0) / (2.0 * h as f64);
            assert!((fd - g.data()[i] as f64).abs() < 2e-3, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn finetune_is_deterministic_and_learns() {
        let cfg = UNetConfig::tiny();
        let train: Vec<_> = (0..2).map(|s| example([8; 3], s, s % 2 == 0)).collect();
        let fcfg = FinetuneConfig { epochs: 3, ..Default::default() };
        let run = || {
            let m = attach_head(UNet::new(&cfg, 1).unwrap(), TaskKind::Reg, [8; 3], 5).unwrap();
            few_shot_finetune(m, &train, &fcfg, 5).unwrap()
        };
        assert_eq!(run().net.params, run().net.params);
    }

    #[test]
    fn selection_alternates_classes_and_checks_size() {
        let pool: Vec<_> = (0..6).map(|s| example([4; 3], s, s < 2)).collect();
        for seed in 0..5 {
            let picked = select_subjects(&pool, 4, seed).unwrap();
            let healthy = picked.iter().filter(|&&i| pool[i].health == Some(true)).count();
            assert_eq!(healthy, 2);
        }
        assert!(matches!(select_subjects(&pool, 7, 0), Err(EvalError::InsufficientLabeledSubjects { .. })));
    }

    #[test]
    fn audit_catches_leak() {
        let a = vec![example([4; 3], 1, true)];
        assert!(audit_disjoint(&a, &[example([4; 3], 2, true)]).is_ok());
        assert!(matches!(audit_disjoint(&a, &a), Err(EvalError::SplitLeak(_))));
    }

    #[test]
    fn report_table_rows() {
        let r = MetricReport {
            task: TaskKind::Seg,
            metric: "dice".into(),
            k_shot: 4,
            rows: (0..5).map(|s| SeedResult { seed: s, pretrained: 0.5 + s as f64 * 0.01, random: 0.4 }).collect(),
        };
        let t = r.to_table();
        assert_eq!(t.lines().count(), 2 + 5 + 1);
        assert!(t.lines().last().unwrap().contains("mean±sd"));
        assert!(r.pretrained_wins());
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(mean_sd(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
    }
}
