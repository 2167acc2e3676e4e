//! Pre-training driver: same-subject pair sampling, the optimization loop,
//! NDJSON step logs and the `.fmck` checkpoint container.
//!
//! All randomness is derived from `(seed, epoch, batch, slot, member)`, so
//! the sampler position is the only RNG state a checkpoint needs to carry.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::masking::{augment_pair_plans, normalize, sample_mask, voxel_mask, AugmentPolicy, PatchGrid};
use crate::model::{ModelError, ParamSet, UNet, UNetConfig};
use crate::objectives::{total_loss, ImageId, LossBatch, LossReport, LossSample, LossWeights, ObjectiveError, TermValues, Variant};
use crate::optim::{AdamW, LrSchedule, OptimizerConfig};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::{Tensor, Volume};
use crate::volume_store::{DatasetManifest, ManifestEntry, ManifestError, Split, StoreError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("subject {subject} has no (timepoint) group with two or more images")]
    InsufficientImagesPerSubject { subject: String },
    #[error("non-finite loss at step {step} in term {term}")]
    NonFiniteLoss { step: usize, term: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("config hash mismatch: checkpoint has {found}, config is {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub ratio: f64,
    /// Patch side in voxels.
    pub patch: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { ratio: 0.6, patch: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: UNetConfig,
    pub loss: LossWeights,
    pub mask: MaskConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentPolicy,
    /// Batch size in same-subject pairs.
    pub batch_pairs: usize,
    pub epochs: usize,
    /// Stops early after this many steps (the schedule still spans `epochs`).
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub manifest: String,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::desk(),
            loss: LossWeights::for_variant(Variant::Fomo25),
            mask: MaskConfig::default(),
            optimizer: OptimizerConfig { lr: 3e-3, ..OptimizerConfig::default() },
            augment: AugmentPolicy::default(),
            batch_pairs: 4,
            epochs: 150,
            max_steps: None,
            seed: 0,
            manifest: "manifest.json".into(),
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    /// Smallest profile, for determinism tests.
    pub fn tiny() -> Self {
        Self { model: UNetConfig::tiny(), batch_pairs: 2, epochs: 10, ..Self::default() }
    }

    /// Replaces the loss weights by the defaults of `variant`.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.loss = LossWeights::for_variant(variant);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    /// SHA-256 (hex) of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate().map_err(TrainError::InvalidConfig)?;
        self.augment.validate().map_err(TrainError::InvalidConfig)?;
        if !(0.0..=1.0).contains(&self.mask.ratio) || self.mask.patch == 0 {
            return bad(format!("mask ratio {} / patch {} invalid", self.mask.ratio, self.mask.patch));
        }
        if self.loss.is_active(crate::objectives::Term::Mae) && self.mask.ratio == 0.0 {
            return bad("the reconstruction term needs a positive mask ratio".into());
        }
        if self.batch_pairs == 0 || self.epochs == 0 {
            return bad("batch_pairs and epochs must be >= 1".into());
        }
        Ok(())
    }
}

/// Same-subject image pairs of the train split, grouped into epochs.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pub entries: Vec<ManifestEntry>,
    /// Indices into `entries`; each pair shares subject and timepoint.
    pub pairs: Vec<(usize, usize)>,
    pub batch_pairs: usize,
    pub seed: u64,
}

impl PairSampler {
    pub fn new(manifest: &DatasetManifest, seed: u64, batch_pairs: usize) -> Result<Self, TrainError> {
        if batch_pairs == 0 {
            return Err(TrainError::InvalidConfig("batch_pairs must be >= 1".into()));
        }
        let mut entries: Vec<ManifestEntry> = manifest.entries_in(Split::Train).cloned().collect();
        entries.sort_by(|a, b| {
            (&a.subject_id, a.timepoint, &a.contrast_id).cmp(&(&b.subject_id, b.timepoint, &b.contrast_id))
        });
        let mut groups: BTreeMap<(&str, u32), Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            groups.entry((e.subject_id.as_str(), e.timepoint)).or_default().push(i);
        }
        let mut pairs = Vec::new();
        let mut paired_subjects = std::collections::BTreeSet::new();
        for ((subject, _), idx) in &groups {
            for (k, &a) in idx.iter().enumerate() {
                for &b in &idx[k + 1..] {
                    pairs.push((a, b));
                    paired_subjects.insert(*subject);
                }
            }
        }
        for subject in &manifest.splits.train {
            if !paired_subjects.contains(subject.as_str()) {
                return Err(TrainError::InsufficientImagesPerSubject { subject: subject.clone() });
            }
        }
        Ok(Self { entries, pairs, batch_pairs, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_pairs)
    }

    /// Batches of epoch `epoch`; every pair appears exactly once.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<(usize, usize)>> {
        let mut order = self.pairs.clone();
        order.shuffle(&mut stream_rng(self.seed, Stream::Sampler, &[epoch as u64]));
        order.chunks(self.batch_pairs).map(|c| c.to_vec()).collect()
    }
}

/// Train-split volumes and tissue maps held in memory.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub volumes: Vec<Volume<f32>>,
    pub tissue: Vec<Option<Volume<u8>>>,
}

impl TrainData {
    pub fn load(manifest: &DatasetManifest, sampler: &PairSampler) -> Result<Self, TrainError> {
        let mut maps: HashMap<&str, Volume<u8>> = HashMap::new();
        let mut volumes = Vec::with_capacity(sampler.entries.len());
        let mut tissue = Vec::with_capacity(sampler.entries.len());
        for e in &sampler.entries {
            volumes.push(manifest.read_entry(e)?.voxels);
            if e.has_tissue_map {
                if !maps.contains_key(e.subject_id.as_str()) {
                    maps.insert(&e.subject_id, manifest.read_tissue_map(&e.subject_id)?);
                }
                tissue.push(Some(maps[e.subject_id.as_str()].clone()));
            } else {
                tissue.push(None);
            }
        }
        Ok(Self { volumes, tissue })
    }
}

/// Builds the network inputs of one batch: augment (flips shared within a
/// pair), z-score normalize, then mask.
#[allow(clippy::too_many_arguments)]
pub fn prepare_batch(
    sampler: &PairSampler,
    data: &TrainData,
    cfg: &PretrainConfig,
    epoch: usize,
    batch_index: usize,
    pairs: &[(usize, usize)],
) -> Result<LossBatch<f32>, TrainError> {
    let mut batch = LossBatch { samples: Vec::with_capacity(2 * pairs.len()), pairs: Vec::with_capacity(pairs.len()) };
    for (slot, &(a, b)) in pairs.iter().enumerate() {
        let key = [epoch as u64, batch_index as u64, slot as u64];
        let plans = augment_pair_plans(&cfg.augment, derive_seed(cfg.seed, Stream::Augment, &key));
        for (member, (&idx, plan)) in [a, b].iter().zip(plans).enumerate() {
            let e = &sampler.entries[idx];
            let vol = plan.apply(&data.volumes[idx]);
            let (norm, _) = normalize(&vol);
            let grid = PatchGrid::new(norm.dims(), cfg.mask.patch)
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            let mseed = derive_seed(cfg.seed, Stream::Mask, &[key[0], key[1], key[2], member as u64]);
            let mask = voxel_mask(&sample_mask(&grid, cfg.mask.ratio, mseed), &grid);
            let input: Vec<f32> = norm.data().iter().zip(mask.data()).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
            let tissue = data.tissue[idx].as_ref().map(|t| crate::masking::flip_volume(t, plan.flips));
            batch.samples.push(LossSample {
                id: ImageId::new(e.subject_id.clone(), e.contrast_id.clone(), e.timepoint),
                input: Tensor::from_vec([1, norm.dims()[0], norm.dims()[1], norm.dims()[2]], input),
                target: Tensor::from_volume(&norm),
                mask: mask.into_vec(),
                tissue,
                health: e.health_status,
            });
        }
        batch.pairs.push((2 * slot, 2 * slot + 1));
    }
    Ok(batch)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cons: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap: Option<f64>,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, lr: f64, r: &LossReport) -> Self {
        let TermValues { mae, seg, cons, path, swap } = r.terms;
        Self { step, epoch, lr, mae, seg, cons, path, swap, total: r.total }
    }
}

/// Mean totals over the first and last tenth of the steps taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_decile_mean: f64,
    pub last_decile_mean: f64,
}

impl TrainSummary {
    pub fn from_log(log: &[StepRecord]) -> Option<Self> {
        if log.is_empty() {
            return None;
        }
        let k = (log.len() / 10).max(1);
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
        Some(Self { steps: log.len(), first_decile_mean: mean(&log[..k]), last_decile_mean: mean(&log[log.len() - k..]) })
    }

    pub fn decreased(&self) -> bool {
        self.last_decile_mean < self.first_decile_mean
    }
}

/// Pre-training state machine; one `step()` is one optimizer update.
pub struct Trainer {
    pub cfg: PretrainConfig,
    pub config_hash: String,
    pub sampler: PairSampler,
    pub data: TrainData,
    pub schedule: LrSchedule,
    pub net: UNet<f32>,
    pub opt: AdamW<f32>,
    /// Number of updates applied so far.
    pub step: usize,
    pub last_report: Option<LossReport>,
    epoch_cache: Option<(usize, Vec<Vec<(usize, usize)>>)>,
}

impl Trainer {
    pub fn new(cfg: PretrainConfig) -> Result<Self, TrainError> {
        let manifest = DatasetManifest::load(Path::new(&cfg.manifest))?;
        Self::with_manifest(cfg, &manifest)
    }

    pub fn with_manifest(cfg: PretrainConfig, manifest: &DatasetManifest) -> Result<Self, TrainError> {
        cfg.validate()?;
        cfg.model.check_input_dims(manifest.shape)?;
        PatchGrid::new(manifest.shape, cfg.mask.patch).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let sampler = PairSampler::new(manifest, cfg.seed, cfg.batch_pairs)?;
        let data = TrainData::load(manifest, &sampler)?;
        let total = cfg.epochs * sampler.batches_per_epoch();
        let schedule = LrSchedule::new(&cfg.optimizer, total);
        let net = UNet::new(&cfg.model, cfg.seed)?;
        let opt = AdamW::new(cfg.optimizer.clone(), &net.params);
        Ok(Self {
            config_hash: cfg.hash(),
            cfg,
            sampler,
            data,
            schedule,
            net,
            opt,
            step: 0,
            last_report: None,
            epoch_cache: None,
        })
    }

    /// Restores weights, optimizer state and sampler position from `ckpt`.
    pub fn restore(&mut self, ckpt: &Checkpoint, allow_config_mismatch: bool) -> Result<(), TrainError> {
        if ckpt.config_hash != self.config_hash && !allow_config_mismatch {
            return Err(TrainError::ConfigHashMismatch { expected: self.config_hash.clone(), found: ckpt.config_hash.clone() });
        }
        ckpt.restore_into(&mut self.net.params, Some(&mut self.opt))?;
        self.step = ckpt.step;
        self.last_report = None;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        let full = self.schedule.total_steps;
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        self.step / self.sampler.batches_per_epoch()
    }

    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let bpe = self.sampler.batches_per_epoch();
        let (epoch, b) = (self.step / bpe, self.step % bpe);
        if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.epoch_cache = Some((epoch, self.sampler.epoch(epoch)));
        }
        let pairs = &self.epoch_cache.as_ref().expect("cached").1[b];
        let batch = prepare_batch(&self.sampler, &self.data, &self.cfg, epoch, b, pairs)?;
        let mut grads = self.net.params.zero_grads();
        let report = total_loss(&self.net, &batch, &self.cfg.loss, Some(&mut grads))?;
        if let Some(term) = report.non_finite_term() {
            return Err(TrainError::NonFiniteLoss { step: self.step, term: term.to_string() });
        }
        if !grads.all_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step, term: "gradient".into() });
        }
        let lr = self.schedule.lr_at(self.step);
        self.opt.step(&mut self.net.params, &grads, lr);
        let rec = StepRecord::new(self.step, epoch, lr, &report);
        self.step += 1;
        self.last_report = Some(report);
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let bpe = self.sampler.batches_per_epoch();
        let mut metrics = BTreeMap::new();
        if let Some(r) = &self.last_report {
            for t in crate::objectives::Term::ALL {
                if let Some(v) = r.terms.get(t) {
                    metrics.insert(t.name().to_string(), v);
                }
            }
            metrics.insert("total".into(), r.total);
        }
        Checkpoint {
            meta: CheckpointMeta {
                config: self.cfg.clone(),
                config_hash: self.config_hash.clone(),
                step: self.step,
                epoch: self.step / bpe,
                rng: RngState { seed: self.cfg.seed, epoch: self.step / bpe, batch: self.step % bpe },
                metrics,
                optimizer: Some(OptimizerState { steps: self.opt.steps.clone(), lr_scale: self.opt.lr_scale.clone() }),
            },
            params: self.net.params.clone(),
            adam: Some((self.opt.m.clone(), self.opt.v.clone())),
        }
    }

    /// Runs to completion. Appends NDJSON records to `log` and, when
    /// `run_dir` is given, writes checkpoints into it.
    pub fn run(&mut self, run_dir: Option<&Path>, log: &mut dyn Write) -> Result<Vec<StepRecord>, TrainError> {
        let bpe = self.sampler.batches_per_epoch();
        let mut records = Vec::new();
        while !self.is_done() {
            let rec = self.step()?;
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(log, "{line}").map_err(io_err(Path::new("<log>")))?;
            records.push(rec);
            let finished_epoch = self.step % bpe == 0;
            if let (Some(dir), true) = (run_dir, finished_epoch && self.cfg.checkpoint_every > 0) {
                if (self.step / bpe) % self.cfg.checkpoint_every == 0 && !self.is_done() {
                    self.checkpoint().save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        if let Some(dir) = run_dir {
            self.checkpoint().save(&checkpoint_path(dir, self.step))?;
        }
        Ok(records)
    }
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{step}.fmck"))
}

/// Result of [`pretrain`].
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub summary: Option<TrainSummary>,
}

/// Runs pre-training on an already loaded manifest. With `run_dir`, writes
/// `config.json`, `train_log.ndjson` and checkpoints there.
pub fn pretrain(cfg: &PretrainConfig, manifest: &DatasetManifest, run_dir: Option<&Path>) -> Result<PretrainOutcome, TrainError> {
    let mut trainer = Trainer::with_manifest(cfg.clone(), manifest)?;
    let log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let cpath = dir.join("config.json");
            fs::write(&cpath, cfg.to_json()).map_err(io_err(&cpath))?;
            let lpath = dir.join("train_log.ndjson");
            let mut f = std::io::BufWriter::new(fs::File::create(&lpath).map_err(io_err(&lpath))?);
            let log = trainer.run(Some(dir), &mut f)?;
            f.flush().map_err(io_err(&lpath))?;
            log
        }
        None => trainer.run(None, &mut std::io::sink())?,
    };
    Ok(PretrainOutcome { checkpoint: trainer.checkpoint(), summary: TrainSummary::from_log(&log), log })
}

/// Sampler position; every random stream is derived from these counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub steps: Vec<u64>,
    pub lr_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: PretrainConfig,
    pub config_hash: String,
    pub step: usize,
    pub epoch: usize,
    pub rng: RngState,
    pub metrics: BTreeMap<String, f64>,
    pub optimizer: Option<OptimizerState>,
}

/// Weights, optimizer moments and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
    /// First and second moments, parallel to `params`.
    pub adam: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

impl std::ops::Deref for Checkpoint {
    type Target = CheckpointMeta;

    fn deref(&self) -> &CheckpointMeta {
        &self.meta
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TrainError::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, TrainError> {
        let n = self.u64(what)?;
        usize::try_from(n).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| {
            TrainError::CorruptCheckpoint(format!("{what} length {n} exceeds file size"))
        })
    }
}

impl Checkpoint {
    /// Network built from the stored config and weights.
    pub fn network(&self) -> Result<UNet<f32>, TrainError> {
        let mut net = UNet::new(&self.config.model, self.config.seed)?;
        self.restore_into(&mut net.params, None)?;
        Ok(net)
    }

    /// Copies weights (and, if given, optimizer state) into existing buffers
    /// after checking names and shapes.
    pub fn restore_into(&self, params: &mut ParamSet<f32>, opt: Option<&mut AdamW<f32>>) -> Result<(), TrainError> {
        if params.len() != self.params.len() {
            return Err(TrainError::CorruptCheckpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((id, p), (_, q)) in params.iter().zip(self.params.iter()) {
            if p.name != q.name || p.shape != q.shape {
                return Err(TrainError::CorruptCheckpoint(format!(
                    "parameter {} {:?} does not match checkpoint entry {} {:?}",
                    p.name, p.shape, q.name, q.shape
                )));
            }
            let _ = id;
        }
        *params = self.params.clone();
        if let Some(opt) = opt {
            let (Some((m, v)), Some(state)) = (&self.adam, &self.optimizer) else {
                return Err(TrainError::CorruptCheckpoint("optimizer state missing".into()));
            };
            opt.m = m.clone();
            opt.v = v.clone();
            opt.steps = state.steps.clone();
            opt.lr_scale = state.lr_scale.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut arrays: Vec<(String, &[usize], &[f32])> = Vec::new();
        for (_, p) in self.params.iter() {
            arrays.push((format!("param/{}", p.name), &p.shape, &p.value));
        }
        if let Some((m, v)) = &self.adam {
            for (prefix, moments) in [("adam_m", m), ("adam_v", v)] {
                for ((_, p), values) in self.params.iter().zip(moments) {
                    arrays.push((format!("{prefix}/{}", p.name), &p.shape, values));
                }
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, shape, values) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |m: String| TrainError::CorruptCheckpoint(m);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let json_len = r.len("metadata")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(json_len, "metadata")?).map_err(|e| corrupt(format!("metadata: {e}")))?;
        if meta.config.hash() != meta.config_hash {
            return Err(corrupt("stored config hash does not match stored config".into()));
        }
        let n = r.u32("array count")? as usize;
        let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        let mut order = Vec::new();
        for _ in 0..n {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| corrupt("array name not UTF-8".into()))?;
            let ndim = r.u32("ndim")? as usize;
            if ndim > 8 {
                return Err(corrupt(format!("array {name} has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.len("dim")?);
            }
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&c| c <= bytes.len() / 4);
            let count = count.ok_or_else(|| corrupt(format!("array {name} shape {shape:?} exceeds file size")))?;
            let raw = r.take(count * 4, &name)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            order.push(name.clone());
            if arrays.insert(name.clone(), (shape, values)).is_some() {
                return Err(corrupt(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        // layout comes from the config; values from the arrays
        let mut params = UNet::<f32>::new(&meta.config.model, meta.config.seed)?.params;
        let mut take = |prefix: &str, name: &str, shape: &[usize]| -> Result<Vec<f32>, TrainError> {
            let key = format!("{prefix}/{name}");
            let (s, v) = arrays.remove(&key).ok_or_else(|| corrupt(format!("missing array {key}")))?;
            if s != shape {
                return Err(corrupt(format!("array {key} has shape {s:?}, expected {shape:?}")));
            }
            Ok(v)
        };
        let layout: Vec<(String, Vec<usize>)> = params.iter().map(|(_, p)| (p.name.clone(), p.shape.clone())).collect();
        for (i, (name, shape)) in layout.iter().enumerate() {
            let v = take("param", name, shape)?;
            params.get_mut(crate::model::ParamId(i)).copy_from_slice(&v);
        }
        let has_adam = order.iter().any(|n| n.starts_with("adam_m/"));
        let adam = if has_adam {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, shape) in &layout {
                m.push(take("adam_m", name, shape)?);
                v.push(take("adam_v", name, shape)?);
            }
            Some((m, v))
        } else {
            None
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(corrupt(format!("unexpected array {extra}")));
        }
        if let Some(o) = &meta.optimizer {
            if o.steps.len() != layout.len() || o.lr_scale.len() != layout.len() {
                return Err(corrupt("optimizer state length mismatch".into()));
            }
        }
        Ok(Self { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    /// Errors unless `cfg` hashes to the stored config hash.
    pub fn check_config(&self, cfg: &PretrainConfig, allow_mismatch: bool) -> Result<(), TrainError> {
        let h = cfg.hash();
        if h != self.config_hash && !allow_mismatch {
            return Err(TrainError::ConfigHashMismatch { expected: h, found: self.config_hash.clone() });
        }
        Ok(())
    }
}
