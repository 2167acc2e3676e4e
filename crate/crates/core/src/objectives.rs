//! Pre-training loss terms, their weighted combination and finite-difference
//! gradient verification.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ops::{self, NORM_EPS};
use crate::model::{DecodeMode, EncoderOutput, Grads, ModelError, UNet};
use crate::rng::{stream_rng, Stream};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Tensor, Volume};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("mask selects no voxels")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pairing contract violated: {a} vs {b}")]
    SubjectMismatch { a: String, b: String },
    #[error("consistency or swap terms are active but the batch has no same-subject pairs")]
    MissingPairing,
    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ssl3d,
    Fomo25,
    Combined,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ssl3d" => Ok(Variant::Ssl3d),
            "fomo25" => Ok(Variant::Fomo25),
            "combined" => Ok(Variant::Combined),
            other => Err(format!("unknown variant {other:?} (expected ssl3d, fomo25 or combined)")),
        }
    }
}

/// The five loss terms, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Mae,
    Seg,
    Cons,
    Path,
    Swap,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Mae, Term::Seg, Term::Cons, Term::Path, Term::Swap];

    pub fn name(self) -> &'static str {
        match self {
            Term::Mae => "mae",
            Term::Seg => "seg",
            Term::Cons => "cons",
            Term::Path => "path",
            Term::Swap => "swap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub variant: Variant,
    pub mae: f64,
    pub seg: f64,
    pub cons: f64,
    pub path: f64,
    pub swap: f64,
    /// Swap decoding from masked-input encodings instead of full volumes.
    #[serde(default)]
    pub swap_on_masked: bool,
}

impl LossWeights {
    pub fn for_variant(variant: Variant) -> Self {
        let (seg, path, swap) = match variant {
            Variant::Ssl3d => (1.0, 0.1, 0.0),
            Variant::Fomo25 => (0.0, 0.0, 1.0),
            Variant::Combined => (1.0, 0.1, 1.0),
        };
        Self { variant, mae: 1.0, seg, cons: 0.1, path, swap, swap_on_masked: false }
    }

    /// Only the masked reconstruction term.
    pub fn mae_only() -> Self {
        Self { mae: 1.0, seg: 0.0, cons: 0.0, path: 0.0, swap: 0.0, ..Self::for_variant(Variant::Combined) }
    }

    /// A single active term with weight 1.
    pub fn only(term: Term) -> Self {
        let mut w = Self { mae: 0.0, seg: 0.0, cons: 0.0, path: 0.0, swap: 0.0, ..Self::for_variant(Variant::Combined) };
        *w.weight_mut(term) = 1.0;
        w
    }

    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Mae => self.mae,
            Term::Seg => self.seg,
            Term::Cons => self.cons,
            Term::Path => self.path,
            Term::Swap => self.swap,
        }
    }

    pub fn weight_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Mae => &mut self.mae,
            Term::Seg => &mut self.seg,
            Term::Cons => &mut self.cons,
            Term::Path => &mut self.path,
            Term::Swap => &mut self.swap,
        }
    }

    pub fn is_active(&self, term: Term) -> bool {
        self.weight(term) > 0.0
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::InvalidWeights(m));
        for t in Term::ALL {
            let w = self.weight(t);
            if !w.is_finite() || w < 0.0 {
                return bad(format!("weight {} = {w} must be finite and non-negative", t.name()));
            }
        }
        if Term::ALL.iter().all(|&t| self.weight(t) == 0.0) {
            return bad("at least one weight must be positive".into());
        }
        match self.variant {
            Variant::Ssl3d if self.swap != 0.0 => bad("ssl3d variant requires swap = 0".into()),
            Variant::Fomo25 if self.seg != 0.0 || self.path != 0.0 => {
                bad("fomo25 variant requires seg = path = 0".into())
            }
            _ => Ok(()),
        }
    }
}

/// Value of each computed term; `None` for terms that were skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub mae: Option<f64>,
    pub seg: Option<f64>,
    pub cons: Option<f64>,
    pub path: Option<f64>,
    pub swap: Option<f64>,
}

impl TermValues {
    pub fn get(&self, term: Term) -> Option<f64> {
        match term {
            Term::Mae => self.mae,
            Term::Seg => self.seg,
            Term::Cons => self.cons,
            Term::Path => self.path,
            Term::Swap => self.swap,
        }
    }

    pub fn set(&mut self, term: Term, v: f64) {
        let slot = match term {
            Term::Mae => &mut self.mae,
            Term::Seg => &mut self.seg,
            Term::Cons => &mut self.cons,
            Term::Path => &mut self.path,
            Term::Swap => &mut self.swap,
        };
        *slot = Some(v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: TermValues,
    pub total: f64,
}

impl LossReport {
    /// Weighted sum of the computed terms, accumulated in `Term::ALL` order.
    pub fn combine(weights: &LossWeights, terms: TermValues) -> Self {
        let total = Term::ALL
            .iter()
            .filter_map(|&t| terms.get(t).map(|v| weights.weight(t) * v))
            .fold(0.0, |acc, v| acc + v);
        Self { terms, total }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && Term::ALL.iter().all(|&t| self.terms.get(t).is_none_or(f64::is_finite))
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Term::ALL
            .iter()
            .find(|&&t| self.terms.get(t).is_some_and(|v| !v.is_finite()))
            .map(|t| t.name())
            .or_else(|| (!self.total.is_finite()).then_some("total"))
    }
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), ObjectiveError> {
    if a.shape() != b.shape() {
        return Err(ObjectiveError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error over voxels with `mask[i] == true`, with its gradient
/// w.r.t. `prediction`. Unmasked gradient entries are exactly zero.
pub fn masked_recon_loss_grad<T: Scalar>(
    prediction: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
) -> Result<(T, Tensor<T>), ObjectiveError> {
    check_same_shape(prediction, target)?;
    if mask.len() != prediction.spatial_len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "mask has {} voxels, volume has {}",
            mask.len(),
            prediction.spatial_len()
        )));
    }
    let m = mask.iter().filter(|&&b| b).count() * prediction.channels();
    if m == 0 {
        return Err(ObjectiveError::EmptyMask);
    }
    let inv = T::one() / T::of_usize(m);
    let two = T::lit(2.0);
    let mut grad = Tensor::zeros(prediction.shape());
    let mut sum = T::zero();
    for c in 0..prediction.channels() {
        let (p, t) = (prediction.channel(c), target.channel(c));
        let g = grad.channel_mut(c);
        for (i, &on) in mask.iter().enumerate() {
            if on {
                let d = p[i] - t[i];
                sum += d * d;
                g[i] = two * d * inv;
            }
        }
    }
    Ok((sum * inv, grad))
}

pub fn masked_recon_loss<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> Result<T, ObjectiveError> {
    masked_recon_loss_grad(prediction, target, mask).map(|(v, _)| v)
}

/// Full-volume mean squared error and its gradient.
pub fn mse_grad<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>), ObjectiveError> {
    check_same_shape(prediction, target)?;
    let n = T::of_usize(prediction.len().max(1));
    let two = T::lit(2.0);
    let mut grad = prediction.clone();
    let mut sum = T::zero();
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        sum += d * d;
        *g = two * d / n;
    }
    Ok((sum / n, grad))
}

/// Downsamples a label volume to `out_dims` by per-block majority vote;
/// ties go to the lowest label.
pub fn majority_pool(labels: &Volume<u8>, out_dims: [usize; 3], classes: usize) -> Result<Volume<u8>, ObjectiveError> {
    let dims = labels.dims();
    let mut f = [0usize; 3];
    for a in 0..3 {
        if out_dims[a] == 0 || dims[a] % out_dims[a] != 0 {
            return Err(ObjectiveError::ShapeMismatch(format!("cannot pool {dims:?} to {out_dims:?}")));
        }
        f[a] = dims[a] / out_dims[a];
    }
    let mut out = Volume::filled(out_dims, 0u8);
    let mut counts = vec![0usize; classes];
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                counts.iter_mut().for_each(|c| *c = 0);
                for dz in 0..f[0] {
                    for dy in 0..f[1] {
                        for dx in 0..f[2] {
                            let l = labels.get(z * f[0] + dz, y * f[1] + dy, x * f[2] + dx) as usize;
                            if l >= classes {
                                return Err(ObjectiveError::InvalidArgument(format!("label {l} >= {classes} classes")));
                            }
                            counts[l] += 1;
                        }
                    }
                }
                let mut best = 0;
                for (k, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = k;
                    }
                }
                out.set(z, y, x, best as u8);
            }
        }
    }
    Ok(out)
}

/// Per-voxel argmax over channels; ties go to the lowest channel.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Volume<u8> {
    let n = logits.spatial_len();
    let mut out = vec![0u8; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut best = 0;
        for k in 1..logits.channels() {
            if logits.channel(k)[i] > logits.channel(best)[i] {
                best = k;
            }
        }
        *o = best as u8;
    }
    Volume::from_vec(logits.spatial(), out)
}

/// Mean voxelwise softmax cross-entropy against integer labels, with its
/// gradient w.r.t. the logits.
pub fn cross_entropy_grad<T: Scalar>(logits: &Tensor<T>, labels: &Volume<u8>) -> Result<(T, Tensor<T>), ObjectiveError> {
    if logits.spatial() != labels.dims() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            labels.dims()
        )));
    }
    let k = logits.channels();
    let n = logits.spatial_len();
    let inv_n = T::one() / T::of_usize(n);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let mut row = vec![T::zero(); k];
    for i in 0..n {
        let label = labels.data()[i] as usize;
        if label >= k {
            return Err(ObjectiveError::InvalidArgument(format!("label {label} >= {k} classes")));
        }
        for (c, r) in row.iter_mut().enumerate() {
            *r = logits.channel(c)[i];
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[label];
        let gd = grad.data_mut();
        for c in 0..k {
            let p = (row[c] - lse).exp();
            let y = if c == label { T::one() } else { T::zero() };
            gd[c * n + i] = (p - y) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Cross-entropy of bottleneck tissue logits against the majority-pooled
/// tissue map.
pub fn anat_anchor_loss_grad<T: Scalar>(logits: &Tensor<T>, tissue_map: &Volume<u8>) -> Result<(T, Tensor<T>), ObjectiveError> {
    let pooled = majority_pool(tissue_map, logits.spatial(), logits.channels())?;
    cross_entropy_grad(logits, &pooled)
}

pub fn anat_anchor_loss<T: Scalar>(logits: &Tensor<T>, tissue_map: &Volume<u8>) -> Result<T, ObjectiveError> {
    anat_anchor_loss_grad(logits, tissue_map).map(|(v, _)| v)
}

/// Mean squared difference of the per-channel standardized feature maps,
/// with gradients for both arguments.
pub fn anat_consistency_loss_grad<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>), ObjectiveError> {
    check_same_shape(a, b)?;
    let (sa, ca) = ops::instance_norm(a, None);
    let (sb, cb) = ops::instance_norm(b, None);
    let (v, g) = mse_grad(&sa, &sb)?;
    let mut neg = g.clone();
    neg.data_mut().iter_mut().for_each(|x| *x = -*x);
    Ok((v, ops::instance_norm_backward(&ca, &g, None), ops::instance_norm_backward(&cb, &neg, None)))
}

pub fn anat_consistency_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T, ObjectiveError> {
    anat_consistency_loss_grad(a, b).map(|(v, _, _)| v)
}

/// Standardization constant shared with the consistency term.
pub const CONSISTENCY_EPS: f64 = NORM_EPS;

/// Binary cross-entropy with logits and its derivative w.r.t. the logit.
pub fn pathology_loss_grad<T: Scalar>(logit: T, label: bool) -> (T, T) {
    let y = if label { T::one() } else { T::zero() };
    let loss = logit.max(T::zero()) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

pub fn pathology_loss<T: Scalar>(logit: T, label: bool) -> T {
    pathology_loss_grad(logit, label).0
}

/// Identity of one image within a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageId {
    pub subject: String,
    pub contrast: String,
    pub timepoint: u32,
}

impl ImageId {
    pub fn new(subject: impl Into<String>, contrast: impl Into<String>, timepoint: u32) -> Self {
        Self { subject: subject.into(), contrast: contrast.into(), timepoint }
    }
}

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/t{}", self.subject, self.contrast, self.timepoint)
    }
}

fn check_pairing(a: &ImageId, b: &ImageId) -> Result<(), ObjectiveError> {
    if a.subject != b.subject || a.timepoint != b.timepoint {
        return Err(ObjectiveError::SubjectMismatch { a: a.to_string(), b: b.to_string() });
    }
    Ok(())
}

/// Decodes the anatomy code of `source` with the contrast code of `target`
/// in swap mode and scores it against `target_volume` over all voxels.
pub fn swap_recon_loss<T: Scalar>(
    net: &UNet<T>,
    source: (&ImageId, &EncoderOutput<T>),
    target: (&ImageId, &EncoderOutput<T>),
    target_volume: &Tensor<T>,
) -> Result<T, ObjectiveError> {
    check_pairing(source.0, target.0)?;
    let out = net.decode(&source.1.latent.anat, &target.1.latent.contrast, None, DecodeMode::Swap)?;
    mse_grad(&out, target_volume).map(|(v, _)| v)
}

/// One prepared image: the masked network input and its supervision.
#[derive(Debug, Clone)]
pub struct LossSample<T> {
    pub id: ImageId,
    /// Augmented, normalized and masked input `(1, D, H, W)`.
    pub input: Tensor<T>,
    /// Same volume before masking.
    pub target: Tensor<T>,
    /// Voxels hidden from the encoder.
    pub mask: Vec<bool>,
    pub tissue: Option<Volume<u8>>,
    pub health: Option<bool>,
}

/// Samples plus same-subject pairs indexing into them.
#[derive(Debug, Clone, Default)]
pub struct LossBatch<T> {
    pub samples: Vec<LossSample<T>>,
    pub pairs: Vec<(usize, usize)>,
}

struct EncGrad<T> {
    anat: Option<Tensor<T>>,
    contrast: Option<Tensor<T>>,
    skips: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> EncGrad<T> {
    fn new() -> Self {
        Self { anat: None, contrast: None, skips: None }
    }

    fn acc(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
        match slot {
            Some(s) => s.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    fn add_anat(&mut self, g: Tensor<T>) {
        Self::acc(&mut self.anat, g);
    }

    fn add_contrast(&mut self, g: Tensor<T>) {
        Self::acc(&mut self.contrast, g);
    }

    fn add_skips(&mut self, gs: Vec<Tensor<T>>) {
        match &mut self.skips {
            Some(s) => s.iter_mut().zip(&gs).for_each(|(a, b)| a.add_assign(b)),
            None => self.skips = Some(gs),
        }
    }

    fn is_empty(&self) -> bool {
        self.anat.is_none() && self.contrast.is_none() && self.skips.is_none()
    }
}

fn scaled<T: Scalar>(mut t: Tensor<T>, s: T) -> Tensor<T> {
    t.data_mut().iter_mut().for_each(|v| *v *= s);
    t
}

/// Evaluates every active term on `batch`. When `grads` is given, the
/// gradient of the weighted total is accumulated into it.
///
/// Term averaging: reconstruction over samples, anchoring and pathology
/// over samples carrying the respective label, consistency over pairs, and
/// swap over both directions of every pair.
pub fn total_loss<T: Scalar>(
    net: &UNet<T>,
    batch: &LossBatch<T>,
    weights: &LossWeights,
    mut grads: Option<&mut Grads<T>>,
) -> Result<LossReport, ObjectiveError> {
    weights.validate()?;
    let active = |t: Term| weights.is_active(t);
    let need_pairs = active(Term::Cons) || active(Term::Swap);
    if need_pairs && batch.pairs.is_empty() {
        return Err(ObjectiveError::MissingPairing);
    }
    for &(a, b) in &batch.pairs {
        if a >= batch.samples.len() || b >= batch.samples.len() {
            return Err(ObjectiveError::InvalidArgument(format!("pair ({a}, {b}) out of range")));
        }
        check_pairing(&batch.samples[a].id, &batch.samples[b].id)?;
    }
    let n = batch.samples.len();
    if n == 0 {
        return Err(ObjectiveError::InvalidArgument("empty batch".into()));
    }
    let want_grad = grads.is_some();
    let masked_enc_needed = active(Term::Mae)
        || active(Term::Seg)
        || active(Term::Cons)
        || active(Term::Path)
        || (active(Term::Swap) && weights.swap_on_masked);

    let mut values = TermValues::default();
    let mut enc = Vec::with_capacity(n);
    let mut eg: Vec<EncGrad<T>> = (0..n).map(|_| EncGrad::new()).collect();
    if masked_enc_needed {
        for s in &batch.samples {
            enc.push(net.encode_with_tape(&s.input)?);
        }
    }

    if active(Term::Mae) {
        let coef = T::lit(weights.mae) / T::of_usize(n);
        let mut sum = T::zero();
        for (i, s) in batch.samples.iter().enumerate() {
            let out = &enc[i].0;
            let (pred, tape) =
                net.decode_with_tape(&out.latent.anat, &out.latent.contrast, Some(&out.skips), DecodeMode::MaskedRecon)?;
            let (v, g) = masked_recon_loss_grad(&pred, &s.target, &s.mask)?;
            sum += v;
            if let Some(gr) = grads.as_deref_mut() {
                let dg = net.decode_backward(&tape, scaled(g, coef), gr);
                eg[i].add_anat(dg.anat);
                eg[i].add_contrast(dg.contrast);
                if let Some(sk) = dg.skips {
                    eg[i].add_skips(sk);
                }
            }
        }
        values.set(Term::Mae, T::as_f64(sum) / n as f64);
    }

    if active(Term::Seg) {
        let labeled: Vec<usize> = (0..n).filter(|&i| batch.samples[i].tissue.is_some()).collect();
        let mut sum = T::zero();
        if !labeled.is_empty() {
            let coef = T::lit(weights.seg) / T::of_usize(labeled.len());
            for &i in &labeled {
                let anat = &enc[i].0.latent.anat;
                let logits = net.anat_head(anat)?;
                let (v, g) = anat_anchor_loss_grad(&logits, batch.samples[i].tissue.as_ref().expect("labeled"))?;
                sum += v;
                if let Some(gr) = grads.as_deref_mut() {
                    let ga = net.anat_head_backward(anat, &scaled(g, coef), gr);
                    eg[i].add_anat(ga);
                }
            }
        }
        values.set(Term::Seg, T::as_f64(sum) / labeled.len().max(1) as f64);
    }

    if active(Term::Path) {
        let labeled: Vec<usize> = (0..n).filter(|&i| batch.samples[i].health.is_some()).collect();
        let mut sum = T::zero();
        if !labeled.is_empty() {
            let coef = T::lit(weights.path) / T::of_usize(labeled.len());
            for &i in &labeled {
                let contrast = &enc[i].0.latent.contrast;
                let logit = net.pathology_head(contrast)?;
                let (v, g) = pathology_loss_grad(logit, batch.samples[i].health.expect("labeled"));
                sum += v;
                if let Some(gr) = grads.as_deref_mut() {
                    let gc = net.pathology_head_backward(contrast, g * coef, gr);
                    eg[i].add_contrast(gc);
                }
            }
        }
        values.set(Term::Path, T::as_f64(sum) / labeled.len().max(1) as f64);
    }

    if active(Term::Cons) {
        let coef = T::lit(weights.cons) / T::of_usize(batch.pairs.len());
        let mut sum = T::zero();
        for &(a, b) in &batch.pairs {
            let (v, ga, gb) = anat_consistency_loss_grad(&enc[a].0.latent.anat, &enc[b].0.latent.anat)?;
            sum += v;
            if want_grad {
                eg[a].add_anat(scaled(ga, coef));
                eg[b].add_anat(scaled(gb, coef));
            }
        }
        values.set(Term::Cons, T::as_f64(sum) / batch.pairs.len() as f64);
    }

    // full-volume encodings used only by the swap term
    let mut full_enc: Vec<Option<_>> = (0..n).map(|_| None).collect();
    let mut full_eg: Vec<EncGrad<T>> = (0..n).map(|_| EncGrad::new()).collect();
    if active(Term::Swap) {
        if !weights.swap_on_masked {
            for &(a, b) in &batch.pairs {
                for i in [a, b] {
                    if full_enc[i].is_none() {
                        full_enc[i] = Some(net.encode_with_tape(&batch.samples[i].target)?);
                    }
                }
            }
        }
        let n_dir = 2 * batch.pairs.len();
        let coef = T::lit(weights.swap) / T::of_usize(n_dir);
        let mut sum = T::zero();
        for &(a, b) in &batch.pairs {
            for (src, tgt) in [(a, b), (b, a)] {
                let (s_out, t_out) = if weights.swap_on_masked {
                    (&enc[src].0, &enc[tgt].0)
                } else {
                    (&full_enc[src].as_ref().expect("encoded").0, &full_enc[tgt].as_ref().expect("encoded").0)
                };
                let (pred, tape) =
                    net.decode_with_tape(&s_out.latent.anat, &t_out.latent.contrast, None, DecodeMode::Swap)?;
                let (v, g) = mse_grad(&pred, &batch.samples[tgt].target)?;
                sum += v;
                if let Some(gr) = grads.as_deref_mut() {
                    let dg = net.decode_backward(&tape, scaled(g, coef), gr);
                    let sink = if weights.swap_on_masked { &mut eg } else { &mut full_eg };
                    sink[src].add_anat(dg.anat);
                    sink[tgt].add_contrast(dg.contrast);
                }
            }
        }
        values.set(Term::Swap, T::as_f64(sum) / n_dir as f64);
    }

    if let Some(gr) = grads {
        for (i, g) in eg.iter().enumerate() {
            if !g.is_empty() {
                net.encode_backward(&enc[i].1, g.anat.as_ref(), g.contrast.as_ref(), g.skips.as_deref(), gr);
            }
        }
        for (i, g) in full_eg.iter().enumerate() {
            if !g.is_empty() {
                let tape = &full_enc[i].as_ref().expect("encoded").1;
                net.encode_backward(tape, g.anat.as_ref(), g.contrast.as_ref(), None, gr);
            }
        }
    }
    Ok(LossReport::combine(weights, values))
}

/// Largest allowed number of probed coordinates.
pub const GRAD_CHECK_MAX_COORDS: usize = 200;

/// Compares `analytic` with central differences of `f` at `point` on up to
/// `GRAD_CHECK_MAX_COORDS` coordinates drawn from `seed`, returning the
/// largest relative error `|fd - an| / max(|fd|, |an|, 1e-8)`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    step: f64,
    seed: u64,
) -> Result<f64, ObjectiveError> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(ObjectiveError::InvalidArgument(format!("step {step} outside [1e-6, 1e-3]")));
    }
    if analytic.len() != point.len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "gradient has {} entries, point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let k = point.len().min(GRAD_CHECK_MAX_COORDS);
    let mut rng = stream_rng(seed, Stream::GradCheck, &[]);
    let coords = sample(&mut rng, point.len(), k).into_vec();
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        x[i] = point[i] + step;
        let up = f(&x);
        x[i] = point[i] - step;
        let down = f(&x);
        x[i] = point[i];
        let fd = (up - down) / (2.0 * step);
        let an = analytic[i];
        if !fd.is_finite() || !an.is_finite() {
            return Err(ObjectiveError::NonFiniteGradient { index: i });
        }
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Random batch of two same-subject images on `dims`, with labels.
pub fn random_batch(dims: [usize; 3], seed: u64) -> LossBatch<f64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, Stream::GradCheck, &[1]);
    let n: usize = dims.iter().product();
    let samples = ["c1", "c2"]
        .iter()
        .map(|c| {
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0 || rng.random_bool(0.3)).collect();
            let input = target.iter().zip(&mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
            let tissue: Vec<u8> = (0..n).map(|_| rng.random_range(0..crate::phantom::NUM_TISSUE_CLASSES as u8)).collect();
            LossSample {
                id: ImageId::new("s0", *c, 0),
                input: Tensor::from_vec([1, dims[0], dims[1], dims[2]], input),
                target: Tensor::from_vec([1, dims[0], dims[1], dims[2]], target),
                mask,
                tissue: Some(Volume::from_vec(dims, tissue)),
                health: Some(rng.random_bool(0.5)),
            }
        })
        .collect();
    LossBatch { samples, pairs: vec![(0, 1)] }
}

/// Gradient check of one term, through the whole network, w.r.t. all
/// network parameters of `net` on `batch` (double precision).
pub fn network_grad_check(
    net: &UNet<f64>,
    batch: &LossBatch<f64>,
    term: Term,
    step: f64,
    seed: u64,
) -> Result<f64, ObjectiveError> {
    let weights = LossWeights::only(term);
    let mut grads = net.params.zero_grads();
    total_loss(net, batch, &weights, Some(&mut grads))?;
    let analytic = grads.flatten();
    let point = net.params.flatten();
    let mut probe = net.clone();
    let f = |x: &[f64]| {
        probe.params.unflatten(x);
        total_loss(&probe, batch, &weights, None).map(|r| r.total).unwrap_or(f64::NAN)
    };
    grad_check(f, &analytic, &point, step, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn masked_recon_basics() {
        let t = rand_tensor([1, 4, 4, 4], 1);
        let mask: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        assert_eq!(masked_recon_loss(&t, &t, &mask).unwrap(), 0.0);
        let mut p = t.clone();
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            if mask[i] {
                *v += 1.0;
            }
        }
        assert!((masked_recon_loss(&p, &t, &mask).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(masked_recon_loss(&p, &t, &[false; 64]), Err(ObjectiveError::EmptyMask));
    }

    #[test]
    fn masked_recon_matches_naive_loop() {
        let p = rand_tensor([1, 4, 4, 4], 2);
        let t = rand_tensor([1, 4, 4, 4], 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let idx = sample(&mut rng, 64, 32).into_vec();
        let mut mask = vec![false; 64];
        idx.iter().for_each(|&i| mask[i] = true);
        let mut s = 0.0;
        let mut c = 0;
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let i = (z * 4 + y) * 4 + x;
                    if mask[i] {
                        s += (p.data()[i] - t.data()[i]).powi(2);
                        c += 1;
                    }
                }
            }
        }
        assert!((masked_recon_loss(&p, &t, &mask).unwrap() - s / c as f64).abs() < 1e-12);
    }

    #[test]
    fn masked_gradient_is_bit_zero_outside_mask() {
        let p = rand_tensor([1, 4, 4, 4], 5);
        let t = rand_tensor([1, 4, 4, 4], 6);
        let mask: Vec<bool> = (0..64).map(|i| i % 5 < 2).collect();
        let (_, g) = masked_recon_loss_grad(&p, &t, &mask).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(g.data()[i].to_bits(), 0);
            } else {
                assert_ne!(g.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn anchor_saturated_and_uniform() {
        let labels = Volume::from_vec([2, 2, 2], vec![0, 1, 2, 3, 4, 0, 1, 2]);
        let mut logits = Tensor::<f64>::zeros([5, 2, 2, 2]);
        assert!((anat_anchor_loss(&logits, &labels).unwrap() - 5f64.ln()).abs() < 1e-12);
        for (i, &l) in labels.data().iter().enumerate() {
            logits.channel_mut(l as usize)[i] = 100.0;
        }
        assert!(anat_anchor_loss(&logits, &labels).unwrap() < 1e-6);
    }

    #[test]
    fn anchor_hand_computed() {
        // 4³ labels pooled to 2³; logits only favor class 1 by 1.0 everywhere
        let mut labels = Volume::filled([4, 4, 4], 0u8);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    labels.set(z, y, x, 1);
                }
            }
        }
        let mut logits = Tensor::<f64>::zeros([2, 2, 2, 2]);
        logits.channel_mut(1).iter_mut().for_each(|v| *v = 1.0);
        // one block has label 1, seven have label 0
        let lse = (1.0f64 + 1f64.exp()).ln();
        let expect = (1.0 * (lse - 1.0) + 7.0 * lse) / 8.0;
        assert!((anat_anchor_loss(&logits, &labels).unwrap() - expect).abs() < 1e-12);
        assert!(anat_anchor_loss(&Tensor::<f64>::zeros([2, 3, 2, 2]), &labels).is_err());
    }

    #[test]
    fn majority_pool_breaks_ties_low() {
        let labels = Volume::from_vec([2, 2, 2], vec![3, 3, 3, 3, 2, 2, 2, 2]);
        assert_eq!(majority_pool(&labels, [1, 1, 1], 5).unwrap().data(), &[2]);
        let labels = Volume::from_vec([2, 2, 2], vec![4, 4, 4, 1, 1, 0, 0, 0]);
        assert_eq!(majority_pool(&labels, [1, 1, 1], 5).unwrap().data(), &[0]);
    }

    #[test]
    fn consistency_properties() {
        let a = rand_tensor([3, 3, 3, 3], 7);
        assert!(anat_consistency_loss(&a, &a).unwrap().abs() < 1e-15);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v + 3.0);
        assert!(anat_consistency_loss(&a, &b).unwrap() < 1e-5);
        let c = rand_tensor([3, 3, 3, 3], 8);
        assert_eq!(anat_consistency_loss(&a, &c).unwrap(), anat_consistency_loss(&c, &a).unwrap());
    }

    #[test]
    fn consistency_matches_naive_loop() {
        let (ch, s) = (16, 6);
        let a = rand_tensor([ch, s, s, s], 9);
        let b = rand_tensor([ch, s, s, s], 10);
        let n = s * s * s;
        let standardize = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / n as f64;
            let v = x.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / n as f64;
            x.iter().map(|t| (t - m) / (v + CONSISTENCY_EPS).sqrt()).collect()
        };
        let mut total = 0.0;
        for c in 0..ch {
            let (sa, sb) = (standardize(a.channel(c)), standardize(b.channel(c)));
            for i in 0..n {
                total += (sa[i] - sb[i]).powi(2);
            }
        }
        let naive = total / (ch * n) as f64;
        assert!((anat_consistency_loss(&a, &b).unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn pathology_values() {
        assert!((pathology_loss(0.0f64, true) - 2f64.ln()).abs() < 1e-15);
        assert!((pathology_loss(0.0f64, false) - 2f64.ln()).abs() < 1e-15);
        assert!(pathology_loss(100.0f64, true) < 1e-6);
        assert!((pathology_loss(-100.0f64, true) - 100.0).abs() < 1e-9);
        assert!(pathology_loss(1e4f32, false).is_finite());
        assert!(pathology_loss(-1e4f32, true).is_finite());
        for label in [false, true] {
            let (_, g) = pathology_loss_grad(0.0f64, label);
            assert_eq!(g, 0.5 - if label { 1.0 } else { 0.0 });
            let err = grad_check(|x| pathology_loss(x[0], label), &[g], &[0.0], 1e-5, 0).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn weights_invariants() {
        for v in [Variant::Ssl3d, Variant::Fomo25, Variant::Combined] {
            LossWeights::for_variant(v).validate().unwrap();
        }
        let mut w = LossWeights::for_variant(Variant::Ssl3d);
        w.swap = 1.0;
        assert!(w.validate().is_err());
        let mut w = LossWeights::for_variant(Variant::Fomo25);
        w.path = 0.1;
        assert!(w.validate().is_err());
        let mut w = LossWeights::mae_only();
        w.mae = 0.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn combine_is_exact_linear_combination() {
        let w = LossWeights { mae: 1.0, seg: 1.0, cons: 0.1, path: 0.1, swap: 1.0, ..LossWeights::for_variant(Variant::Combined) };
        let (a, b, c, d, e) = (0.7, 1.3, 2.9, 0.4, 0.05);
        let terms = TermValues { mae: Some(a), seg: Some(b), cons: Some(c), path: Some(d), swap: Some(e) };
        assert_eq!(LossReport::combine(&w, terms).total, a + b + 0.1 * c + 0.1 * d + e);
    }

    #[test]
    fn total_loss_single_term_and_skipping() {
        let net = UNet::<f64>::new(&UNetConfig::tiny(), 0).unwrap();
        let batch = random_batch([4, 4, 4], 1);
        let r = total_loss(&net, &batch, &LossWeights::mae_only(), None).unwrap();
        assert!(r.terms.seg.is_none() && r.terms.swap.is_none());
        let mut expect = 0.0;
        for s in &batch.samples {
            let e = net.encode(&s.input).unwrap();
            let p = net.decode(&e.latent.anat, &e.latent.contrast, Some(&e.skips), DecodeMode::MaskedRecon).unwrap();
            expect += masked_recon_loss(&p, &s.target, &s.mask).unwrap();
        }
        assert!((r.total - expect / 2.0).abs() < 1e-14);
    }

    #[test]
    fn total_matches_reported_terms() {
        let net = UNet::<f64>::new(&UNetConfig::tiny(), 0).unwrap();
        let batch = random_batch([4, 4, 4], 2);
        let w = LossWeights::for_variant(Variant::Combined);
        let r = total_loss(&net, &batch, &w, None).unwrap();
        let recomputed: f64 = Term::ALL.iter().map(|&t| w.weight(t) * r.terms.get(t).unwrap()).sum();
        assert!((recomputed - r.total).abs() <= 1e-6 * r.total.abs());
        assert!(Term::ALL.iter().all(|&t| r.terms.get(t).unwrap() >= 0.0));
    }

    #[test]
    fn pairing_errors() {
        let net = UNet::<f64>::new(&UNetConfig::tiny(), 0).unwrap();
        let mut batch = random_batch([4, 4, 4], 3);
        batch.pairs.clear();
        let err = total_loss(&net, &batch, &LossWeights::for_variant(Variant::Fomo25), None);
        assert_eq!(err, Err(ObjectiveError::MissingPairing));
        let mut batch = random_batch([4, 4, 4], 3);
        batch.samples[1].id.subject = "s9".into();
        let err = total_loss(&net, &batch, &LossWeights::for_variant(Variant::Fomo25), None);
        assert!(matches!(err, Err(ObjectiveError::SubjectMismatch { .. })));
    }

    #[test]
    fn swap_self_is_no_skip_self_reconstruction() {
        let net = UNet::<f64>::new(&UNetConfig::tiny(), 0).unwrap();
        let batch = random_batch([4, 4, 4], 4);
        let s = &batch.samples[0];
        let e = net.encode(&s.target).unwrap();
        let v = swap_recon_loss(&net, (&s.id, &e), (&s.id, &e), &s.target).unwrap();
        let out = net.decode(&e.latent.anat, &e.latent.contrast, None, DecodeMode::Swap).unwrap();
        assert_eq!(v, mse_grad(&out, &s.target).unwrap().0);
        let other = ImageId::new("s1", "c2", 0);
        assert!(swap_recon_loss(&net, (&s.id, &e), (&other, &e), &s.target).is_err());
    }

    #[test]
    fn grad_check_quadratic() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(|p| p.iter().map(|v| v * v).sum(), &g, &x, 1e-4, 0).unwrap();
        assert!(err < 1e-8, "{err}");
        assert!(grad_check(|_| 0.0, &g, &x, 1e-2, 0).is_err());
        assert!(matches!(
            grad_check(|_| f64::NAN, &g, &x, 1e-4, 0),
            Err(ObjectiveError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn masked_recon_grad_check() {
        let p = rand_tensor([1, 4, 4, 4], 11);
        let t = rand_tensor([1, 4, 4, 4], 12);
        let mask: Vec<bool> = (0..64).map(|i| i % 2 == 0).collect();
        let (_, g) = masked_recon_loss_grad(&p, &t, &mask).unwrap();
        let f = |x: &[f64]| masked_recon_loss(&Tensor::from_vec(p.shape(), x.to_vec()), &t, &mask).unwrap();
        let err = grad_check(f, g.data(), p.data(), 1e-4, 3).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn every_term_passes_network_grad_check() {
        let net = UNet::<f64>::new(&UNetConfig::tiny(), 7).unwrap();
        let batch = random_batch([4, 4, 4], 7);
        for t in Term::ALL {
            let err = network_grad_check(&net, &batch, t, 1e-5, 1).unwrap();
            assert!(err < 1e-4, "{}: {err}", t.name());
        }
    }
}
