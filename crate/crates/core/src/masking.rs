//! Patch-grid masking, intensity normalization and light augmentation for
//! masked-autoencoder pre-training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Volume;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Regular partition of a volume into cubic patches of side `patch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid: [usize; 3],
}

impl PatchGrid {
    pub fn new(dims: [usize; 3], patch: usize) -> Result<Self, MaskError> {
        if patch == 0 || dims.iter().any(|&d| d == 0 || d % patch != 0) {
            return Err(MaskError::ShapeMismatch(format!("patch size {patch} does not divide {dims:?}")));
        }
        Ok(Self { patch, grid: dims.map(|d| d / patch) })
    }

    /// Total patch count.
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        self.grid.map(|g| g * self.patch)
    }

    #[inline]
    fn patch_of(&self, d: usize, h: usize, w: usize) -> usize {
        let p = self.patch;
        ((d / p) * self.grid[1] + h / p) * self.grid[2] + w / p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    /// `true` = masked, one per patch in grid order.
    pub masked: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl PatchMask {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Number of patches masked at `ratio` out of `total`.
pub fn masked_count(total: usize, ratio: f64) -> usize {
    ((ratio.clamp(0.0, 1.0) * total as f64).round() as usize).min(total)
}

/// Masks exactly `round(ratio * P)` patches, chosen uniformly without replacement.
pub fn sample_mask(grid: &PatchGrid, ratio: f64, seed: u64) -> PatchMask {
    let total = grid.len();
    let k = masked_count(total, ratio);
    let mut masked = vec![false; total];
    let mut rng = stream_rng(seed, Stream::Mask, &[]);
    for i in rand::seq::index::sample(&mut rng, total, k) {
        masked[i] = true;
    }
    PatchMask { masked, ratio, seed }
}

fn check_dims<T: Copy>(volume: &Volume<T>, mask: &PatchMask, grid: &PatchGrid) -> Result<(), MaskError> {
    if volume.dims() != grid.volume_dims() || mask.masked.len() != grid.len() {
        return Err(MaskError::ShapeMismatch(format!(
            "volume {:?} / mask of {} patches vs grid {:?} of patch {}",
            volume.dims(),
            mask.masked.len(),
            grid.grid,
            grid.patch
        )));
    }
    Ok(())
}

/// Replaces voxels of masked patches by `fill`; others are copied unchanged.
pub fn apply_mask<T: Copy>(volume: &Volume<T>, mask: &PatchMask, grid: &PatchGrid, fill: T) -> Result<Volume<T>, MaskError> {
    check_dims(volume, mask, grid)?;
    let vm = voxel_mask(mask, grid);
    let data = volume.data().iter().zip(vm.data()).map(|(&v, &m)| if m { fill } else { v }).collect();
    Ok(Volume::from_vec(volume.dims(), data))
}

/// Broadcasts patch decisions to voxels.
pub fn voxel_mask(mask: &PatchMask, grid: &PatchGrid) -> Volume<bool> {
    let dims = grid.volume_dims();
    let mut out = Volume::filled(dims, false);
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                if mask.masked[grid.patch_of(d, h, w)] {
                    out.set(d, h, w, true);
                }
            }
        }
    }
    out
}

/// Statistics of per-volume z-score normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }
}

/// Z-scores a volume using the statistics of its nonzero voxels.
pub fn normalize<T: Scalar>(volume: &Volume<T>) -> (Volume<T>, NormStats) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for &v in volume.data() {
        if !v.is_zero() {
            let x = v.as_f64();
            n += 1;
            sum += x;
            sq += x * x;
        }
    }
    let stats = if n == 0 {
        NormStats { mean: 0.0, std: 1.0 }
    } else {
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        NormStats { mean, std: var.sqrt().max(1e-8) }
    };
    let out = volume.map(|v| T::lit((v.as_f64() - stats.mean) / stats.std));
    (out, stats)
}

pub fn flip_volume<T: Copy>(volume: &Volume<T>, axes: [bool; 3]) -> Volume<T> {
    if !axes.iter().any(|&a| a) {
        return volume.clone();
    }
    let [nd, nh, nw] = volume.dims();
    let mut out = volume.clone();
    for d in 0..nd {
        let sd = if axes[0] { nd - 1 - d } else { d };
        for h in 0..nh {
            let sh = if axes[1] { nh - 1 - h } else { h };
            for w in 0..nw {
                let sw = if axes[2] { nw - 1 - w } else { w };
                out.set(d, h, w, volume.get(sd, sh, sw));
            }
        }
    }
    out
}

/// Which augmentations are enabled. Scale range must lie in `[0.9, 1.1]`
/// and the noise sigma in `[0, 0.05]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Axes that may be flipped (each with probability 1/2).
    pub flip_axes: [bool; 3],
    pub intensity_scale: Option<(f64, f64)>,
    pub noise_sigma: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { flip_axes: [true, true, true], intensity_scale: Some((0.9, 1.1)), noise_sigma: 0.02 }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self { flip_axes: [false; 3], intensity_scale: None, noise_sigma: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_axes.iter().any(|&a| a) && self.intensity_scale.is_none() && self.noise_sigma == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some((lo, hi)) = self.intensity_scale {
            if !(0.9..=1.1).contains(&lo) || !(0.9..=1.1).contains(&hi) || lo > hi {
                return Err(format!("intensity_scale ({lo}, {hi}) must lie within [0.9, 1.1]"));
            }
        }
        if !(0.0..=0.05).contains(&self.noise_sigma) {
            return Err(format!("noise_sigma {} must lie within [0, 0.05]", self.noise_sigma));
        }
        Ok(())
    }

    /// Draws concrete augmentation parameters from `seed`.
    pub fn plan(&self, seed: u64) -> AugmentPlan {
        let mut rng = stream_rng(seed, Stream::Augment, &[]);
        let coin: [bool; 3] = std::array::from_fn(|_| rng.random::<bool>());
        let u: f64 = rng.random();
        let noise_seed: u64 = rng.random();
        AugmentPlan {
            flips: std::array::from_fn(|a| self.flip_axes[a] && coin[a]),
            scale: self.intensity_scale.map_or(1.0, |(lo, hi)| lo + (hi - lo) * u),
            noise_sigma: self.noise_sigma,
            noise_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub flips: [bool; 3],
    pub scale: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl AugmentPlan {
    pub fn apply<T: Scalar>(&self, volume: &Volume<T>) -> Volume<T> {
        let mut out = flip_volume(volume, self.flips);
        if self.scale != 1.0 {
            let s = T::lit(self.scale);
            out.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
        if self.noise_sigma > 0.0 {
            let mut rng = stream_rng(self.noise_seed, Stream::Augment, &[1]);
            let sigma = self.noise_sigma;
            for v in out.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += T::lit(sigma * n);
            }
        }
        out
    }
}

/// Plans for the two members of a pair: flips are shared so both images
/// stay spatially aligned; intensity scale and noise are drawn per image.
pub fn augment_pair_plans(policy: &AugmentPolicy, seed: u64) -> [AugmentPlan; 2] {
    let first = policy.plan(derive_seed(seed, Stream::Augment, &[0]));
    let mut second = policy.plan(derive_seed(seed, Stream::Augment, &[1]));
    second.flips = first.flips;
    [first, second]
}

/// Applies `policy` with parameters drawn from `seed`.
pub fn augment<T: Scalar>(volume: &Volume<T>, seed: u64, policy: &AugmentPolicy) -> Volume<T> {
    if policy.is_identity() {
        return volume.clone();
    }
    policy.plan(seed).apply(volume)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume<f64> {
        Volume::from_vec(dims, (0..dims.iter().product::<usize>()).map(|i| i as f64 * 0.5 + 1.0).collect())
    }

    #[test]
    fn ratio_extremes() {
        let g = PatchGrid::new([16; 3], 4).unwrap();
        assert_eq!(sample_mask(&g, 0.0, 1).count(), 0);
        assert_eq!(sample_mask(&g, 1.0, 1).count(), 64);
    }

    #[test]
    fn sixty_percent_of_512_is_307() {
        let g = PatchGrid::new([32; 3], 4).unwrap();
        assert_eq!(g.len(), 512);
        assert_eq!(sample_mask(&g, 0.6, 42).count(), 307);
    }

    #[test]
    fn mask_is_deterministic_in_seed() {
        let g = PatchGrid::new([16; 3], 4).unwrap();
        assert_eq!(sample_mask(&g, 0.5, 9), sample_mask(&g, 0.5, 9));
        assert_ne!(sample_mask(&g, 0.5, 9).masked, sample_mask(&g, 0.5, 10).masked);
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        assert!(PatchGrid::new([10, 12, 12], 4).is_err());
    }

    #[test]
    fn apply_mask_identity_saturation_and_single_patch() {
        let g = PatchGrid::new([8; 3], 4).unwrap();
        let v = ramp([8; 3]);
        let none = PatchMask { masked: vec![false; 8], ratio: 0.0, seed: 0 };
        assert_eq!(apply_mask(&v, &none, &g, 0.0).unwrap(), v);
        let all = PatchMask { masked: vec![true; 8], ratio: 1.0, seed: 0 };
        assert!(apply_mask(&v, &all, &g, 0.0).unwrap().data().iter().all(|&x| x == 0.0));
        let mut one = none.clone();
        one.masked[0] = true;
        let out = apply_mask(&v, &one, &g, 0.0).unwrap();
        let changed = out.data().iter().zip(v.data()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 64);
        assert_eq!(voxel_mask(&one, &g).data().iter().filter(|&&m| m).count(), 64);
        assert!(voxel_mask(&none, &g).data().iter().all(|&m| !m));
        assert!(voxel_mask(&all, &g).data().iter().all(|&m| m));
    }

    #[test]
    fn apply_mask_checks_shape() {
        let g = PatchGrid::new([8; 3], 4).unwrap();
        let m = sample_mask(&g, 0.5, 0);
        assert!(apply_mask(&ramp([4; 3]), &m, &g, 0.0).is_err());
    }

    #[test]
    fn empty_policy_is_identity() {
        let v = ramp([4, 5, 6]);
        assert_eq!(augment(&v, 3, &AugmentPolicy::none()), v);
    }

    #[test]
    fn double_flip_is_identity() {
        let v = ramp([4, 5, 6]);
        for axes in [[true, false, false], [false, true, false], [false, false, true], [true, true, true]] {
            let once = flip_volume(&v, axes);
            assert_ne!(once, v);
            assert_eq!(flip_volume(&once, axes), v);
        }
    }

    #[test]
    fn intensity_scale_scales_the_mean() {
        let v = ramp([6; 3]);
        let policy = AugmentPolicy { flip_axes: [false; 3], intensity_scale: Some((0.9, 1.1)), noise_sigma: 0.0 };
        for seed in 0..5 {
            let plan = policy.plan(seed);
            let out = plan.apply(&v);
            let rel = (out.mean() - plan.scale * v.mean()).abs() / (plan.scale * v.mean());
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn normalization_zero_mean_unit_std_over_nonzero() {
        let v = Volume::from_vec([1, 1, 5], vec![0.0f64, 2.0, 4.0, 6.0, 8.0]);
        let (n, s) = normalize(&v);
        assert!((s.mean - 5.0).abs() < 1e-12);
        let nz: Vec<f64> = n.data()[1..].to_vec();
        let m: f64 = nz.iter().sum::<f64>() / 4.0;
        let var: f64 = nz.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!((s.denormalize(n.data()[2]) - 4.0).abs() < 1e-12);
    }
}
