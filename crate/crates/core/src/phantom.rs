//! Deterministic multi-contrast brain phantoms with exact ground truth.
//!
//! Anatomy is three nested ellipsoidal shells (CSF ⊃ GM ⊃ WM) warped by a
//! low-order sinusoidal displacement, with an optional spherical lesion
//! carved out of white matter. A contrast is an intensity transfer function
//! over tissue labels plus Gaussian noise. All coordinates are normalized to
//! `[-1, 1]` per axis, so one [`SubjectSpec`] rasterizes at any grid size.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::Volume;
use crate::volume_store::{write_nifti_file, DatasetManifest, ManifestEntry, StoreError, SubjectInfo};

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GM: u8 = 2;
pub const WM: u8 = 3;
pub const LESION: u8 = 4;
pub const NUM_TISSUE_CLASSES: usize = 5;

/// Range of the synthetic anatomical scale factor (the regression target).
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.0);
/// Smallest grid the shells are rasterized on.
pub const MIN_EXTENT: usize = 8;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("shape {shape:?} is too small: {reason}")]
    ShapeTooSmall { shape: [usize; 3], reason: String },
    #[error("unknown tissue label {label} at voxel {index}")]
    UnknownLabel { label: u8, index: usize },
    #[error("invalid contrast set: {0}")]
    InvalidContrast(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionSpec {
    pub present: bool,
    /// Normalized coordinates (in the warped frame).
    pub center: [f64; 3],
    /// Radius in voxels of the rasterization grid.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSpec {
    pub subject_id: String,
    pub seed: u64,
    pub center: [f64; 3],
    /// Global anatomical scale, within [`SCALE_RANGE`].
    pub scale: f64,
    /// Semi-axes of the CSF, GM and WM shells (already scaled).
    pub semi_axes: [[f64; 3]; 3],
    /// Displacement coefficients: `d_a(p) = c[a][0] sin(pi p_{a+1}) + c[a][1] sin(pi p_{a+2})`.
    pub deformation: [[f64; 2]; 3],
    pub lesion: LesionSpec,
}

pub fn subject_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Draws subject `subject_index` of the cohort keyed by `global_seed`.
pub fn generate_subject(global_seed: u64, subject_index: usize, lesion_prevalence: f64) -> SubjectSpec {
    let prevalence = if lesion_prevalence.is_nan() { 0.0 } else { lesion_prevalence.clamp(0.0, 1.0) };
    if prevalence != lesion_prevalence {
        log::warn!("lesion_prevalence {lesion_prevalence} clamped to {prevalence}");
    }
    let seed = derive_seed(global_seed, Stream::Subject, &[subject_index as u64]);
    let mut rng = stream_rng(global_seed, Stream::Subject, &[subject_index as u64]);

    let scale = rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1);
    let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let base = [0.78, 0.84, 0.74];
    let csf: [f64; 3] = std::array::from_fn(|a| base[a] * rng.random_range(0.95..1.05));
    let gm_ratio = rng.random_range(0.82..0.88);
    let wm_ratio = rng.random_range(0.72..0.78);
    let gm: [f64; 3] = std::array::from_fn(|a| csf[a] * gm_ratio);
    let wm: [f64; 3] = std::array::from_fn(|a| gm[a] * wm_ratio);
    let semi_axes = [csf, gm, wm].map(|ax| ax.map(|x| x * scale));
    let deformation: [[f64; 2]; 3] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.015..0.015)));

    // Lesion draws happen unconditionally so the stream layout is fixed.
    let present = rng.random::<f64>() < prevalence;
    let dir: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let frac = rng.random_range(0.0..0.4);
    let lesion_center: [f64; 3] = std::array::from_fn(|a| center[a] + frac * dir[a] / norm * semi_axes[2][a]);
    let radius = rng.random_range(2.0..3.0);

    SubjectSpec {
        subject_id: subject_id(subject_index),
        seed,
        center,
        scale,
        semi_axes,
        deformation,
        lesion: LesionSpec { present, center: lesion_center, radius },
    }
}

impl SubjectSpec {
    /// The same anatomy at a later timepoint: slightly perturbed deformation.
    pub fn at_timepoint(&self, global_seed: u64, subject_index: usize, timepoint: u32) -> SubjectSpec {
        if timepoint == 0 {
            return self.clone();
        }
        let mut rng = stream_rng(global_seed, Stream::Timepoint, &[subject_index as u64, timepoint as u64]);
        let mut out = self.clone();
        for row in &mut out.deformation {
            for c in row {
                *c += rng.random_range(-0.005..0.005);
            }
        }
        out
    }

    /// Warped normalized coordinate of a point.
    #[inline]
    fn warp(&self, p: [f64; 3]) -> [f64; 3] {
        use std::f64::consts::PI;
        std::array::from_fn(|a| {
            let c = self.deformation[a];
            p[a] + c[0] * (PI * p[(a + 1) % 3]).sin() + c[1] * (PI * p[(a + 2) % 3]).sin()
        })
    }

    /// Ellipsoid level value of `shell` at warped point `q` (inside iff <= 1).
    #[inline]
    fn level(&self, shell: usize, q: [f64; 3]) -> f64 {
        (0..3).map(|a| ((q[a] - self.center[a]) / self.semi_axes[shell][a]).powi(2)).sum()
    }
}

/// Normalized coordinate of voxel `i` along an axis of extent `n`.
#[inline]
pub fn voxel_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

/// Label volume with codes [`BACKGROUND`]..=[`LESION`].
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMap(pub Volume<u8>);

impl TissueMap {
    pub fn labels(&self) -> &Volume<u8> {
        &self.0
    }

    pub fn counts(&self) -> [usize; NUM_TISSUE_CLASSES] {
        let mut c = [0; NUM_TISSUE_CLASSES];
        for &l in self.0.data() {
            c[l as usize] += 1;
        }
        c
    }

    pub fn has_lesion(&self) -> bool {
        self.0.data().contains(&LESION)
    }

    pub fn lesion_mask(&self) -> Volume<bool> {
        self.0.map(|l| l == LESION)
    }

    /// Applies the axis flips used by augmentation.
    pub fn flipped(&self, axes: [bool; 3]) -> TissueMap {
        TissueMap(crate::masking::flip_volume(&self.0, axes))
    }
}

/// Labels each voxel with the innermost shell containing it; lesion then
/// replaces white matter within its radius.
pub fn rasterize_tissue(spec: &SubjectSpec, shape: [usize; 3]) -> Result<TissueMap, PhantomError> {
    if shape.iter().any(|&n| n < MIN_EXTENT) {
        return Err(PhantomError::ShapeTooSmall { shape, reason: format!("every extent must be >= {MIN_EXTENT}") });
    }
    let mut labels = Volume::filled(shape, BACKGROUND);
    // lesion radius in normalized units per axis
    let lesion_r: [f64; 3] = std::array::from_fn(|a| spec.lesion.radius * 2.0 / shape[a] as f64);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let p = [voxel_coord(d, shape[0]), voxel_coord(h, shape[1]), voxel_coord(w, shape[2])];
                let q = spec.warp(p);
                let mut label = BACKGROUND;
                for (shell, code) in [(0, CSF), (1, GM), (2, WM)] {
                    if spec.level(shell, q) <= 1.0 {
                        label = code;
                    } else {
                        break;
                    }
                }
                if label == WM && spec.lesion.present && spec.lesion.radius > 0.0 {
                    let dist: f64 = (0..3).map(|a| ((q[a] - spec.lesion.center[a]) / lesion_r[a]).powi(2)).sum();
                    if dist <= 1.0 {
                        label = LESION;
                    }
                }
                labels.set(d, h, w, label);
            }
        }
    }
    let [nd, nh, nw] = shape;
    let touches_border = (0..nd).any(|d| {
        (0..nh).any(|h| {
            (0..nw).any(|w| {
                let on_face = d == 0 || h == 0 || w == 0 || d == nd - 1 || h == nh - 1 || w == nw - 1;
                on_face && labels.get(d, h, w) != BACKGROUND
            })
        })
    });
    if touches_border {
        return Err(PhantomError::ShapeTooSmall { shape, reason: "outer shell reaches the grid border".into() });
    }
    Ok(TissueMap(labels))
}

/// Intensity transfer function for one contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastFunction {
    pub contrast_id: String,
    /// Mean intensity per label code; the lesion entry is used only when visible.
    pub means: [f64; NUM_TISSUE_CLASSES],
    pub sigma: f64,
    pub lesion_visible: bool,
}

impl ContrastFunction {
    /// Built-in contrasts: `c1` (T1-like), `c2` (FLAIR-like, lesion visible),
    /// `c3` (T2-like).
    pub fn builtin(id: &str) -> Option<ContrastFunction> {
        let (means, lesion_visible) = match id {
            "c1" => ([0.0, 0.25, 0.55, 0.85, 0.85], false),
            "c2" => ([0.0, 0.2, 0.65, 0.4, 0.95], true),
            "c3" => ([0.0, 0.9, 0.6, 0.35, 0.35], false),
            _ => return None,
        };
        Some(ContrastFunction { contrast_id: id.into(), means, sigma: 0.05, lesion_visible })
    }

    pub fn default_set() -> Vec<ContrastFunction> {
        ["c1", "c2", "c3"].iter().filter_map(|id| Self::builtin(id)).collect()
    }

    /// Mean rendered for `label`.
    #[inline]
    pub fn mean_for(&self, label: u8) -> f64 {
        if label == LESION && !self.lesion_visible {
            self.means[WM as usize]
        } else {
            self.means[label as usize]
        }
    }

    /// Visible tissue means must be at least `3 sigma` apart.
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(PhantomError::InvalidContrast(format!("{}: sigma {}", self.contrast_id, self.sigma)));
        }
        let n = if self.lesion_visible { 5 } else { 4 };
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.means[i] - self.means[j]).abs() < 3.0 * self.sigma {
                    return Err(PhantomError::InvalidContrast(format!(
                        "{}: labels {i} and {j} closer than 3 sigma",
                        self.contrast_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Checks a multi-contrast set: each contrast valid, and at least one with
/// and one without a visible lesion.
pub fn validate_contrast_set(contrasts: &[ContrastFunction]) -> Result<(), PhantomError> {
    for c in contrasts {
        c.validate()?;
    }
    if contrasts.len() >= 2 {
        let visible = contrasts.iter().filter(|c| c.lesion_visible).count();
        if visible == 0 || visible == contrasts.len() {
            return Err(PhantomError::InvalidContrast(
                "need at least one contrast with and one without a visible lesion".into(),
            ));
        }
    }
    Ok(())
}

pub fn render_contrast(
    tissue: &TissueMap,
    contrast: &ContrastFunction,
    noise_seed: u64,
) -> Result<Volume<f32>, PhantomError> {
    let labels = tissue.labels();
    let mut out = Vec::with_capacity(labels.len());
    for (index, &label) in labels.data().iter().enumerate() {
        if label as usize >= NUM_TISSUE_CLASSES {
            return Err(PhantomError::UnknownLabel { label, index });
        }
        out.push(contrast.mean_for(label));
    }
    if contrast.sigma > 0.0 {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(noise_seed);
        for v in &mut out {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += contrast.sigma * n;
        }
    }
    Ok(Volume::from_vec(labels.dims(), out.into_iter().map(|v| v as f32).collect()))
}

fn contrast_key(id: &str) -> u64 {
    // FNV-1a: stable across runs and platforms
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Noise seed for one rendered image.
pub fn noise_seed(global_seed: u64, subject_index: usize, contrast_id: &str, timepoint: u32) -> u64 {
    derive_seed(global_seed, Stream::Noise, &[subject_index as u64, contrast_key(contrast_id), timepoint as u64])
}

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    pub contrasts: Vec<ContrastFunction>,
    pub timepoints: u32,
    pub shape: [usize; 3],
    pub global_seed: u64,
    pub lesion_prevalence: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl PhantomConfig {
    pub fn new(n_subjects: usize, contrast_ids: &[&str], timepoints: u32, extent: usize, global_seed: u64) -> Self {
        Self {
            n_subjects,
            contrasts: contrast_ids.iter().filter_map(|id| ContrastFunction::builtin(id)).collect(),
            timepoints,
            shape: [extent; 3],
            global_seed,
            lesion_prevalence: 0.5,
            val_fraction: 0.15,
            test_fraction: 0.25,
        }
    }
}

/// Assigns subject indices to splits: a seeded permutation, cut by fraction.
fn assign_splits(cfg: &PhantomConfig) -> Vec<crate::volume_store::Split> {
    use crate::volume_store::Split;
    use rand::seq::SliceRandom;
    let n = cfg.n_subjects;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(cfg.global_seed, Stream::Split, &[n as u64]));
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).min(n.saturating_sub(1));
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - 1 - n_test.min(n - 1));
    let mut split = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        if rank < n_test {
            split[idx] = Split::Test;
        } else if rank < n_test + n_val {
            split[idx] = Split::Val;
        }
    }
    split
}

/// Writes images, tissue maps and `manifest.json` under `out_dir`.
pub fn build_phantom_dataset(cfg: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest, PhantomError> {
    use crate::volume_store::Split;
    if cfg.n_subjects == 0 {
        return Err(PhantomError::InvalidArgument("n_subjects must be >= 1".into()));
    }
    if cfg.contrasts.is_empty() {
        return Err(PhantomError::InvalidArgument("at least one contrast is required".into()));
    }
    if cfg.timepoints == 0 {
        return Err(PhantomError::InvalidArgument("timepoints must be >= 1".into()));
    }
    for f in [cfg.val_fraction, cfg.test_fraction] {
        if !(0.0..=1.0).contains(&f) {
            return Err(PhantomError::InvalidArgument(format!("split fraction {f} outside [0, 1]")));
        }
    }
    validate_contrast_set(&cfg.contrasts)?;

    let images = out_dir.join("images");
    let labels = out_dir.join("labels");
    for dir in [&images, &labels] {
        fs::create_dir_all(dir).map_err(|source| PhantomError::Io { path: dir.clone(), source })?;
    }
    let spacing = [1.0f32; 3];
    let mut manifest = DatasetManifest::new(
        cfg.shape,
        spacing,
        cfg.contrasts.iter().map(|c| c.contrast_id.clone()).collect(),
    );
    let splits = assign_splits(cfg);

    for index in 0..cfg.n_subjects {
        let spec = generate_subject(cfg.global_seed, index, cfg.lesion_prevalence);
        let sid = spec.subject_id.clone();
        let healthy = !spec.lesion.present;
        let tissue_rel = format!("labels/{sid}_tissue.nii");
        for t in 0..cfg.timepoints {
            let spec_t = spec.at_timepoint(cfg.global_seed, index, t);
            let tissue = rasterize_tissue(&spec_t, cfg.shape)?;
            if t == 0 {
                write_nifti_file(&out_dir.join(&tissue_rel), &tissue.labels().map(|l| l as f32), spacing)?;
            }
            for c in &cfg.contrasts {
                let img = render_contrast(&tissue, c, noise_seed(cfg.global_seed, index, &c.contrast_id, t))?;
                let rel = format!("images/{sid}_{}_t{t}.nii", c.contrast_id);
                write_nifti_file(&out_dir.join(&rel), &img, spacing)?;
                manifest.entries.push(ManifestEntry {
                    subject_id: sid.clone(),
                    contrast_id: c.contrast_id.clone(),
                    timepoint: t,
                    path: rel,
                    health_status: Some(healthy),
                    has_tissue_map: t == 0,
                });
            }
        }
        manifest.subjects.push(SubjectInfo {
            subject_id: sid.clone(),
            tissue_map: Some(tissue_rel),
            scale: Some(spec.scale),
        });
        match splits[index] {
            Split::Train => manifest.splits.train.push(sid),
            Split::Val => manifest.splits.val.push(sid),
            Split::Test => manifest.splits.test.push(sid),
        }
    }
    let path = out_dir.join("manifest.json");
    manifest.save(&path).map_err(StoreError::from)?;
    manifest.base_dir = out_dir.to_path_buf();
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_subject(0, 0, 0.5), generate_subject(0, 0, 0.5));
        assert_ne!(generate_subject(0, 0, 0.5), generate_subject(0, 1, 0.5));
    }

    #[test]
    fn shells_are_strictly_nested() {
        for i in 0..200 {
            let s = generate_subject(3, i, 0.5);
            for a in 0..3 {
                assert!(s.semi_axes[0][a] > s.semi_axes[1][a]);
                assert!(s.semi_axes[1][a] > s.semi_axes[2][a]);
            }
            assert!((SCALE_RANGE.0..SCALE_RANGE.1).contains(&s.scale));
        }
    }

    #[test]
    fn zero_prevalence_never_draws_a_lesion() {
        assert!((0..500).all(|i| !generate_subject(0, i, 0.0).lesion.present));
        // out-of-range values are clamped, not rejected
        assert!((0..50).all(|i| generate_subject(0, i, 7.0).lesion.present));
    }

    #[test]
    fn prevalence_half_is_within_binomial_band() {
        let n = (0..1000).filter(|&i| generate_subject(0, i, 0.5).lesion.present).count();
        assert!((450..=550).contains(&n), "lesion count {n}");
    }

    #[test]
    fn center_voxel_is_white_matter_without_deformation() {
        let mut s = generate_subject(0, 0, 0.0);
        s.deformation = [[0.0; 2]; 3];
        s.center = [0.0; 3];
        let t = rasterize_tissue(&s, [32; 3]).unwrap();
        assert_eq!(t.labels().get(16, 16, 16), WM);
        assert_eq!(t.labels().get(0, 0, 0), BACKGROUND);
    }

    #[test]
    fn zero_radius_lesion_draws_nothing() {
        let mut s = generate_subject(0, 0, 1.0);
        assert!(s.lesion.present);
        assert!(rasterize_tissue(&s, [24; 3]).unwrap().has_lesion());
        s.lesion.radius = 0.0;
        assert!(!rasterize_tissue(&s, [24; 3]).unwrap().has_lesion());
    }

    #[test]
    fn lesion_label_iff_present() {
        for i in 0..40 {
            let s = generate_subject(11, i, 0.5);
            let t = rasterize_tissue(&s, [24; 3]).unwrap();
            assert_eq!(t.has_lesion(), s.lesion.present, "subject {i}");
        }
    }

    #[test]
    fn tiny_grids_are_rejected() {
        let s = generate_subject(0, 0, 0.5);
        assert!(matches!(rasterize_tissue(&s, [4, 24, 24]), Err(PhantomError::ShapeTooSmall { .. })));
    }

    #[test]
    fn noiseless_render_is_relabeling() {
        let s = generate_subject(0, 2, 1.0);
        let t = rasterize_tissue(&s, [16; 3]).unwrap();
        let c = ContrastFunction {
            contrast_id: "x".into(),
            means: [0.0, 1.0, 2.0, 3.0, 4.0],
            sigma: 0.0,
            lesion_visible: true,
        };
        let v = render_contrast(&t, &c, 9).unwrap();
        for (&l, &x) in t.labels().data().iter().zip(v.data()) {
            assert_eq!(x, l as f32);
        }
    }

    #[test]
    fn invisible_lesion_renders_as_healthy_tissue() {
        let s = generate_subject(0, 2, 1.0);
        let mut healthy = s.clone();
        healthy.lesion.present = false;
        let mut c1 = ContrastFunction::builtin("c1").unwrap();
        c1.sigma = 0.0;
        let a = render_contrast(&rasterize_tissue(&s, [24; 3]).unwrap(), &c1, 1).unwrap();
        let b = render_contrast(&rasterize_tissue(&healthy, [24; 3]).unwrap(), &c1, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_amplitude_matches_half_normal_mean() {
        let s = generate_subject(0, 0, 0.5);
        let t = rasterize_tissue(&s, [24; 3]).unwrap();
        let mut c = ContrastFunction::builtin("c2").unwrap();
        c.sigma = 0.0;
        let clean = render_contrast(&t, &c, 5).unwrap();
        c.sigma = 0.1;
        let noisy = render_contrast(&t, &c, 5).unwrap();
        let mad: f64 = clean.data().iter().zip(noisy.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / clean.len() as f64;
        assert!((0.06..=0.10).contains(&mad), "mad {mad}");
    }

    #[test]
    fn unknown_label_is_reported() {
        let t = TissueMap(Volume::from_vec([1, 1, 2], vec![1, 9]));
        let c = ContrastFunction::builtin("c1").unwrap();
        assert!(matches!(render_contrast(&t, &c, 0), Err(PhantomError::UnknownLabel { label: 9, index: 1 })));
    }

    #[test]
    fn builtin_contrasts_are_valid() {
        validate_contrast_set(&ContrastFunction::default_set()).unwrap();
        let only_invisible = vec![ContrastFunction::builtin("c1").unwrap(), ContrastFunction::builtin("c3").unwrap()];
        assert!(validate_contrast_set(&only_invisible).is_err());
    }
}
