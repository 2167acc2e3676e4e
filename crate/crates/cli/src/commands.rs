use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fmch::finetune_eval::{
    evaluate_task, factor_probe, EvalError, FinetuneConfig, MetricReport, ProbeFactor, ProbeSpec, SeedResult, TaskKind, TaskSpec,
};
use fmch::objectives::Variant;
use fmch::phantom::{build_phantom_dataset, ContrastFunction, PhantomConfig, PhantomError, MIN_EXTENT};
use fmch::training::{checkpoint_path, Checkpoint, PretrainConfig, TrainError, Trainer};
use fmch::volume_store::{read_nifti, DatasetManifest, ManifestError, NiftiImage, Split, StoreError};
use serde_json::json;

use crate::run_dir::{self, Provenance};
use crate::{EvaluateArgs, FinetuneArgs, InspectArgs, PhantomArgs, PretrainArgs, ProbeArgs};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RESUME_MISMATCH: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: String,
    pub flag: Option<String>,
    pub message: String,
    pub details: serde_json::Value,
}

impl CliError {
    pub fn usage(flag: &str, message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, kind: "Usage".into(), flag: Some(flag.into()), message: message.into(), details: json!({}) }
    }

    fn runtime(kind: &str, message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, kind: kind.into(), flag: None, message: message.into(), details: json!({}) }
    }

    pub fn to_json(&self) -> String {
        json!({
            "error": self.kind,
            "exit_code": self.code,
            "flag": self.flag,
            "message": self.message,
            "details": self.details,
        })
        .to_string()
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime("Io", format!("{}: {e}", path.display()))
}

fn store_kind(e: &StoreError) -> String {
    match e {
        StoreError::Codec { source, .. } => source.kind().into(),
        StoreError::Io { .. } => "Io".into(),
        StoreError::Manifest(_) => "Manifest".into(),
        StoreError::ShapeMismatch { .. } => "ShapeMismatch".into(),
        StoreError::NoTissueMap(_) => "NoTissueMap".into(),
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let message = e.to_string();
        match e {
            TrainError::ConfigHashMismatch { expected, found } => CliError {
                code: EXIT_RESUME_MISMATCH,
                kind: "ConfigHashMismatch".into(),
                flag: Some("--resume".into()),
                message,
                details: json!({ "expected": expected, "found": found }),
            },
            TrainError::NonFiniteLoss { step, term } => CliError {
                details: json!({ "step": step, "term": term }),
                ..CliError::runtime("NonFiniteLoss", message)
            },
            TrainError::InvalidConfig(_) => CliError { kind: "InvalidConfig".into(), ..CliError::usage("--config", message) },
            TrainError::Store(ref s) => CliError::runtime(&store_kind(s), message),
            TrainError::CorruptCheckpoint(_) => CliError::runtime("CorruptCheckpoint", message),
            TrainError::InsufficientImagesPerSubject { .. } => CliError::runtime("InsufficientImagesPerSubject", message),
            TrainError::Manifest(_) => CliError::runtime("Manifest", message),
            _ => CliError::runtime("Training", message),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let message = e.to_string();
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::InsufficientLabeledSubjects { .. } => CliError {
                kind: "InsufficientLabeledSubjects".into(),
                ..CliError::usage("--k-shot", message)
            },
            EvalError::IncompatibleShape(_) => CliError::runtime("IncompatibleShape", message),
            EvalError::SingleClassLabels => CliError::runtime("SingleClassLabels", message),
            EvalError::Store(ref s) => CliError::runtime(&store_kind(s), message),
            _ => CliError::runtime("Evaluation", message),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        let kind = match &e {
            PhantomError::ShapeTooSmall { .. } => "ShapeTooSmall",
            PhantomError::InvalidContrast(_) => "InvalidContrast",
            PhantomError::InvalidArgument(_) => "InvalidArgument",
            _ => "Generation",
        };
        CliError::runtime(kind, e.to_string())
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::runtime("Manifest", e.to_string())
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::usage("--checkpoint", format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn load_manifest(path: &str) -> Result<DatasetManifest, CliError> {
    Ok(DatasetManifest::load(Path::new(path))?)
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

pub fn phantom(a: PhantomArgs) -> Result<(), CliError> {
    if a.subjects == 0 {
        return Err(CliError::usage("--subjects", "--subjects must be >= 1"));
    }
    if a.timepoints == 0 {
        return Err(CliError::usage("--timepoints", "--timepoints must be >= 1"));
    }
    if a.shape < MIN_EXTENT {
        return Err(CliError::usage("--shape", format!("--shape must be >= {MIN_EXTENT}")));
    }
    if a.contrasts.is_empty() {
        return Err(CliError::usage("--contrasts", "--contrasts must name at least one contrast"));
    }
    if let Some(c) = a.contrasts.iter().find(|c| ContrastFunction::builtin(c).is_none()) {
        return Err(CliError::usage("--contrasts", format!("unknown contrast {c:?} (known: c1, c2, c3)")));
    }
    let ids: Vec<&str> = a.contrasts.iter().map(String::as_str).collect();
    let mut cfg = PhantomConfig::new(a.subjects, &ids, a.timepoints, a.shape, a.seed);
    if let Some(p) = a.lesion_prevalence {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::usage("--lesion-prevalence", "--lesion-prevalence must lie in [0, 1]"));
        }
        cfg.lesion_prevalence = p;
    }
    if a.check {
        println!("ok: {} subjects x {} contrasts x {} timepoints at {}^3", a.subjects, ids.len(), a.timepoints, a.shape);
        return Ok(());
    }
    let m = build_phantom_dataset(&cfg, &a.out)?;
    println!("manifest: {}", a.out.join("manifest.json").display());
    println!("images: {}", m.entries.len());
    println!("contrasts: {}", m.contrasts.join(","));
    println!("shape: {:?}", m.shape);
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:?}: {} subjects", m.splits.get(split).len());
    }
    let lesions = m.subjects.iter().filter(|s| m.entries.iter().any(|e| e.subject_id == s.subject_id && e.health_status == Some(false))).count();
    println!("subjects with lesion: {lesions}");
    Ok(())
}

fn effective_config(a: &PretrainArgs) -> Result<PretrainConfig, CliError> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| CliError::usage("--config", format!("cannot read {}: {e}", a.config.display())))?;
    let mut cfg = PretrainConfig::from_json(&text).map_err(|e| CliError::usage("--config", e.to_string()))?;
    if let Some(v) = &a.variant {
        let v: Variant = v.parse().map_err(|e: String| CliError::usage("--variant", e))?;
        cfg = cfg.with_variant(v);
    }
    if let Some(m) = &a.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.validate().map_err(|e| CliError::usage("--config", e.to_string()))?;
    Ok(cfg)
}

pub fn pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let cfg = effective_config(&a)?;
    let hash = cfg.hash();
    let resume = match &a.resume {
        Some(p) if !p.is_file() => {
            return Err(CliError::usage("--resume", format!("checkpoint {} does not exist", p.display())));
        }
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            ckpt.check_config(&cfg, a.allow_config_mismatch)?;
            Some(ckpt)
        }
        None => None,
    };
    let manifest = load_manifest(&cfg.manifest)?;
    let mut trainer = Trainer::with_manifest(cfg.clone(), &manifest)?;
    if let Some(ckpt) = &resume {
        trainer.restore(ckpt, a.allow_config_mismatch)?;
    }
    if a.check {
        println!("ok: config {} valid, {} steps planned from step {}", short(&hash), trainer.total_steps(), trainer.step);
        return Ok(());
    }
    let dir = run_dir::resolve(a.out.clone(), &format!("pretrain-{}-seed{}", short(&hash), cfg.seed));
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let prov = Provenance::start(Some(hash.clone()), vec![cfg.seed]);
    let cpath = dir.join("config.json");
    fs::write(&cpath, cfg.to_json()).map_err(io(&cpath))?;
    let lpath = dir.join("train_log.ndjson");
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&lpath)
        .map_err(io(&lpath))?;
    let mut log = std::io::BufWriter::new(file);
    let records = trainer.run(Some(&dir), &mut log);
    log.flush().map_err(io(&lpath))?;
    let records = records?;
    prov.finish(&dir).map_err(io(&dir))?;
    println!("run: {}", dir.display());
    println!("config hash: {hash}");
    println!("steps: {}", trainer.step);
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!("loss: {:.5} (step {}) -> {:.5} (step {})", first.total, first.step, last.total, last.step);
    }
    println!("checkpoint: {}", checkpoint_path(&dir, trainer.step).display());
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<(), CliError> {
    let kind: TaskKind = a.task.parse().map_err(|e: String| CliError::usage("--task", e))?;
    if a.k_shot == 0 {
        return Err(CliError::usage("--k-shot", "--k-shot must be >= 1"));
    }
    if a.seeds.is_empty() {
        return Err(CliError::usage("--seeds", "--seeds must list at least one seed"));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(a.manifest.as_deref().unwrap_or(&ckpt.config.manifest))?;
    let defaults = FinetuneConfig::for_pretraining(&ckpt.config);
    let fcfg = FinetuneConfig { epochs: a.epochs.unwrap_or(defaults.epochs), lr: a.lr.unwrap_or(defaults.lr), ..defaults };
    let spec = TaskSpec::new(kind, a.k_shot, a.seeds.clone());
    if a.check {
        println!("ok: task {} k={} seeds {:?} epochs {} lr {}", kind.name(), a.k_shot, a.seeds, fcfg.epochs, fcfg.lr);
        return Ok(());
    }
    let dir = run_dir::resolve(a.out.clone(), &format!("finetune-{}-k{}-{}", kind.name(), a.k_shot, short(&ckpt.config_hash)));
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let prov = Provenance::start(Some(ckpt.config_hash.clone()), a.seeds.clone());
    let spath = dir.join(format!("finetune_{}.json", kind.name()));
    let snapshot = json!({ "checkpoint": a.checkpoint, "task": spec, "finetune": fcfg });
    fs::write(&spath, serde_json::to_string_pretty(&snapshot).expect("serializes")).map_err(io(&spath))?;
    let report = evaluate_task(&ckpt, &manifest, &spec, &fcfg)?;
    let rpath = dir.join(format!("report_{}.json", kind.name()));
    fs::write(&rpath, report.to_json()).map_err(io(&rpath))?;
    prov.finish(&dir).map_err(io(&dir))?;
    print!("{}", report.to_table());
    if kind == TaskKind::Reg {
        println!("(synthetic age: anatomical scale factor)");
    }
    println!("report: {}", rpath.display());
    Ok(())
}

fn collect_reports(dir: &Path, out: &mut Vec<(PathBuf, MetricReport)>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).map_err(io(dir))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("report") && n.ends_with(".json")) {
            let text = fs::read_to_string(&p).map_err(io(&p))?;
            let r: MetricReport = serde_json::from_str(&text)
                .map_err(|e| CliError::runtime("InvalidReport", format!("{}: {e}", p.display())))?;
            out.push((p, r));
        }
    }
    Ok(())
}

/// Merges reports of the same task and k; later files win on repeated seeds.
pub fn merge_reports(reports: Vec<MetricReport>) -> Vec<MetricReport> {
    let mut groups: BTreeMap<(TaskKind, usize), BTreeMap<u64, SeedResult>> = BTreeMap::new();
    for r in reports {
        let g = groups.entry((r.task, r.k_shot)).or_default();
        for row in r.rows {
            g.insert(row.seed, row);
        }
    }
    groups
        .into_iter()
        .map(|((task, k_shot), rows)| MetricReport { task, metric: task.metric().into(), k_shot, rows: rows.into_values().collect() })
        .collect()
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    if !a.run.is_dir() {
        return Err(CliError::usage("--run", format!("run directory {} does not exist", a.run.display())));
    }
    let mut found = Vec::new();
    collect_reports(&a.run, &mut found)?;
    if found.is_empty() {
        return Err(CliError::runtime("NoReports", format!("no report_*.json under {}", a.run.display())));
    }
    let merged = merge_reports(found.into_iter().map(|(_, r)| r).collect());
    if a.check {
        println!("ok: {} task group(s)", merged.len());
        return Ok(());
    }
    let mut text = String::new();
    for r in &merged {
        let verdict = if r.pretrained_wins() { "pretrained better" } else { "pretrained not better" };
        text.push_str(&r.to_table());
        text.push_str(&format!("=> {verdict}\n\n"));
    }
    print!("{text}");
    let jpath = a.run.join("evaluation.json");
    fs::write(&jpath, serde_json::to_string_pretty(&merged).expect("serializes")).map_err(io(&jpath))?;
    let tpath = a.run.join("evaluation.txt");
    fs::write(&tpath, text).map_err(io(&tpath))?;
    Ok(())
}

pub fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let factor: ProbeFactor = a.factor.parse().map_err(|e: String| CliError::usage("--factor", e))?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(a.manifest.as_deref().unwrap_or(&ckpt.config.manifest))?;
    let net = ckpt.network()?;
    if a.check {
        println!("ok: probe {factor:?} on {} images", manifest.entries.len());
        return Ok(());
    }
    let spec = ProbeSpec { seed: a.seed, ..ProbeSpec::default() };
    let r = factor_probe(&net, &manifest, factor, &spec)?;
    println!("factor {factor:?} (train {}, test {})", r.n_train, r.n_test);
    println!("{:>10}  {:>9}  {:>9}", "latent", "accuracy", "chance");
    println!("{:>10}  {:>9.4}  {:>9.4}", "z_anat", r.acc_anat, r.chance_anat);
    println!("{:>10}  {:>9.4}  {:>9.4}", "z_contrast", r.acc_contrast, r.chance_contrast);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let p = dir.join(format!("probe_{}.json", a.factor));
        fs::write(&p, serde_json::to_string_pretty(&r).expect("serializes")).map_err(io(&p))?;
    }
    Ok(())
}

/// Histogram of integer-valued voxels, or `None` if any voxel is fractional
/// or outside `0..=255`.
pub fn label_histogram(img: &NiftiImage) -> Option<BTreeMap<u8, usize>> {
    let mut h = BTreeMap::new();
    for &v in img.voxels.data() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return None;
        }
        *h.entry(v as u8).or_insert(0) += 1;
    }
    Some(h)
}

pub fn inspect(a: InspectArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.file).map_err(io(&a.file))?;
    let img = read_nifti(&bytes).map_err(|e| CliError {
        details: json!({ "field": e.field() }),
        ..CliError::runtime(e.kind(), e.to_string())
    })?;
    let h = &img.header;
    println!("file: {}", a.file.display());
    println!("dims: {:?}", h.dims());
    println!("datatype: {} (bitpix {})", h.datatype, h.bitpix);
    println!("spacing_mm: {:?}", img.spacing);
    println!("vox_offset: {}", h.vox_offset);
    println!("scl_slope: {} scl_inter: {}", h.scl_slope, h.scl_inter);
    println!("magic: {:?}", String::from_utf8_lossy(&h.magic).trim_end_matches('\0'));
    let data = img.voxels.data();
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = data.iter().copied().fold(f32::INFINITY, f32::min);
    let max = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let nonzero = data.iter().filter(|&&v| v != 0.0).count();
    println!("min: {min} max: {max} mean: {mean:.6} std: {sd:.6} nonzero: {nonzero}");
    if let Some(hist) = label_histogram(&img) {
        println!("labels:");
        for (label, count) in hist {
            println!("  {label}: {count}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fmch::volume_store::NiftiHeader;
    use fmch::Volume;

    fn report(seeds: &[u64], value: f64) -> MetricReport {
        MetricReport {
            task: TaskKind::Seg,
            metric: "dice".into(),
            k_shot: 4,
            rows: seeds.iter().map(|&seed| SeedResult { seed, pretrained: value, random: 0.0 }).collect(),
        }
    }

    #[test]
    fn merge_combines_seeds_and_later_wins() {
        let merged = merge_reports(vec![report(&[0, 1], 0.1), report(&[1, 2], 0.2)]);
        assert_eq!(merged.len(), 1);
        let rows = &merged[0].rows;
        assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(rows[1].pretrained, 0.2);
    }

    fn image(data: Vec<f32>) -> NiftiImage {
        let dims = [data.len(), 1, 1];
        NiftiImage { header: NiftiHeader::for_float32(dims, [1.0; 3]), voxels: Volume::from_vec(dims, data), spacing: [1.0; 3] }
    }

    #[test]
    fn histogram_only_for_integer_labels() {
        let h = label_histogram(&image(vec![0.0, 1.0, 1.0, 4.0])).unwrap();
        assert_eq!(h.into_iter().collect::<Vec<_>>(), vec![(0, 1), (1, 2), (4, 1)]);
        assert!(label_histogram(&image(vec![0.5, 1.0])).is_none());
        assert!(label_histogram(&image(vec![-1.0])).is_none());
    }

    #[test]
    fn error_json_carries_code_and_flag() {
        let e = CliError::usage("--shape", "bad");
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["exit_code"], 2);
        assert_eq!(v["flag"], "--shape");
        let e: CliError = TrainError::ConfigHashMismatch { expected: "a".into(), found: "b".into() }.into();
        assert_eq!(e.code, EXIT_RESUME_MISMATCH);
    }
}
