//! Training objective: bootstrapped cross-entropy, the unbiased guidance
//! KL between the two banks' readouts, and the mask-consistency KL under
//! morphological mask perturbation.

use rand::Rng;

use crate::autodiff::Var;
use crate::encoders::{image_embedding, mask_values, EncoderWeights, ObjectMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub mu: f64,
    pub gamma: f64,
    /// Fraction of hardest pixels kept by the cross-entropy, in `(0, 1]`.
    pub bootstrap_ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mu: 10.0,
            gamma: 10.0,
            bootstrap_ratio: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("loss.mu and loss.gamma must be non-negative".into()));
        }
        check_ratio(self.bootstrap_ratio)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("bootstrap ratio {ratio} outside (0, 1]")))
    }
}

/// Cross-entropy of `(N+1)×H×W` class logits against `gt`, averaged over
/// the `⌈ratio·H·W⌉` pixels with the highest loss.
pub fn bootstrapped_ce<'t>(logits: &Var<'t>, gt: &ObjectMask, ratio: f64) -> Result<Var<'t>> {
    check_ratio(ratio)?;
    let s = logits.shape();
    if s.len() != 3 || s[0] != gt.num_objects() + 1 || s[1] != gt.height() || s[2] != gt.width() {
        return Err(Error::dim(format!(
            "logits {s:?} do not fit a {}x{} mask with {} objects",
            gt.height(),
            gt.width(),
            gt.num_objects()
        )));
    }
    let (classes, hw) = (s[0], s[1] * s[2]);
    let tape = logits.tape();
    let onehot = Tensor::from_fn(&[classes, hw], |i| {
        (gt.labels()[i % hw] as usize == i / hw) as u8 as f64
    });
    let picked = logits
        .log_softmax(0)?
        .reshape(&[classes, hw])?
        .mul(&tape.constant(onehot))?;
    let per_pixel = tape
        .constant(Tensor::ones(&[1, classes]))
        .matmul(&picked)?
        .neg();
    let kept = ((ratio * hw as f64).ceil() as usize).clamp(1, hw);
    let mut order: Vec<usize> = (0..hw).collect();
    let losses = per_pixel.value().data();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let mut weights = Tensor::zeros(&[1, hw]);
    for &p in &order[..kept] {
        weights.data_mut()[p] = 1.0 / kept as f64;
    }
    Ok(per_pixel.mul(&tape.constant(weights))?.sum())
}

/// Softmax over the channel axis at every location.
pub fn feature_distribution<'t>(f: &Var<'t>) -> Result<Var<'t>> {
    f.softmax(0)
}

/// `Σ_i KL(fd(teacher_i) ‖ fd(student_i))` with the teacher detached.
pub fn unbiased_guidance_loss<'t>(teacher: &[Var<'t>], student: &[Var<'t>]) -> Result<Var<'t>> {
    kl_sum(teacher, student, true)
}

fn kl_sum<'t>(p: &[Var<'t>], q: &[Var<'t>], detach_p: bool) -> Result<Var<'t>> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::dim(format!("{} against {} feature maps", p.len(), q.len())));
    }
    let mut total: Option<Var<'t>> = None;
    for (a, b) in p.iter().zip(q) {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!("{:?} against {:?}", a.shape(), b.shape())));
        }
        let a = if detach_p { a.detach() } else { a.clone() };
        let term = feature_distribution(&a)?.kl_divergence(&feature_distribution(b)?, 0)?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("nonempty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Morph {
    Dilate,
    Erode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbConfig {
    pub radius_max: usize,
    /// Overrides every drawn radius; `Some(0)` makes the perturbation the
    /// identity.
    pub force_radius: Option<usize>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            radius_max: 5,
            force_radius: None,
        }
    }
}

/// Per-pixel disk test of one binary map.
fn morph_binary(map: &[bool], h: usize, w: usize, op: Morph, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return map.to_vec();
    }
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            let mut inside = offsets.iter().filter_map(|(dy, dx)| {
                let (yy, xx) = (y + dy, x + dx);
                (yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize)
                    .then(|| map[yy as usize * w + xx as usize])
            });
            match op {
                Morph::Dilate => inside.any(|v| v),
                Morph::Erode => inside.all(|v| v),
            }
        })
        .collect()
}

/// Applies one `(op, radius)` per object; lower ids win overlaps and
/// vacated pixels become background.
pub fn morph_mask(mask: &ObjectMask, ops: &[(Morph, usize)]) -> Result<ObjectMask> {
    if ops.len() != mask.num_objects() {
        return Err(Error::dim(format!(
            "{} operations for {} objects",
            ops.len(),
            mask.num_objects()
        )));
    }
    let (h, w) = (mask.height(), mask.width());
    let maps: Vec<Vec<bool>> = ops
        .iter()
        .enumerate()
        .map(|(i, &(op, r))| morph_binary(&mask.binary(i + 1), h, w, op, r))
        .collect();
    let labels = (0..h * w)
        .map(|p| maps.iter().position(|m| m[p]).map_or(0, |i| i as u8 + 1))
        .collect();
    ObjectMask::new(h, w, mask.num_objects(), labels)
}

/// Random dilation or erosion of every object with a disk of radius drawn
/// from `1..=radius_max`.
pub fn perturb_mask<R: Rng>(mask: &ObjectMask, config: &PerturbConfig, rng: &mut R) -> Result<ObjectMask> {
    if config.radius_max == 0 {
        return Err(Error::Config("perturb.radius_max must be at least 1".into()));
    }
    let ops: Vec<(Morph, usize)> = (0..mask.num_objects())
        .map(|_| {
            let op = if rng.gen_bool(0.5) { Morph::Dilate } else { Morph::Erode };
            let r = rng.gen_range(1..=config.radius_max);
            (op, config.force_radius.unwrap_or(r))
        })
        .collect();
    morph_mask(mask, &ops)
}

/// `KL(fd(k₁) ‖ fd(k̈₁)) + Σ_i KL(fd(v₁,i) ‖ fd(v̈₁,i))` for the frame encoded
/// with its true mask and with `perturbed`.
pub fn mask_consistency_loss<'t>(
    pixels: &Var<'t>,
    gt: &ObjectMask,
    perturbed: &ObjectMask,
    encoder: &EncoderWeights<Var<'t>>,
) -> Result<Var<'t>> {
    if gt.height() != perturbed.height()
        || gt.width() != perturbed.width()
        || gt.num_objects() != perturbed.num_objects()
    {
        return Err(Error::dim("perturbed mask does not match the reference mask"));
    }
    let (key, _) = image_embedding(pixels, encoder)?;
    let (perturbed_key, _) = image_embedding(pixels, encoder)?;
    let key_term = kl_sum(&[key], &[perturbed_key], false)?;
    let values = mask_values(pixels, gt, encoder)?;
    let perturbed_values = mask_values(pixels, perturbed, encoder)?;
    key_term.add(&kl_sum(&values, &perturbed_values, false)?)
}

/// Loss terms of one five-frame clip, in frame order.
#[derive(Clone, Debug, Default)]
pub struct ClipTerms<'t> {
    /// Cross-entropy of frames segmented with the growing bank (2 and 4).
    pub stm_ce: Vec<Var<'t>>,
    /// Cross-entropy of frames segmented with the constant bank (3 and 5).
    pub sam_ce: Vec<Var<'t>>,
    /// Guidance terms at frames 3 and 5.
    pub guidance: Vec<Var<'t>>,
    pub consistency: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown<T> {
    pub seg: T,
    pub guidance: T,
    pub consistency: T,
    pub total: T,
}

impl<'t> LossBreakdown<Var<'t>> {
    pub fn values(&self) -> Result<LossBreakdown<f64>> {
        Ok(LossBreakdown {
            seg: self.seg.value().item()?,
            guidance: self.guidance.value().item()?,
            consistency: self.consistency.value().item()?,
            total: self.total.value().item()?,
        })
    }
}

fn sum_all<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let mut it = terms.iter();
    let first = it.next().ok_or_else(|| Error::contract("no loss terms"))?.clone();
    it.try_fold(first, |acc, t| acc.add(t))
}

/// `L_Seg + μ·L_UG + γ·L_MC` with `L_Seg` half the sum of the four
/// cross-entropies.
pub fn total_loss<'t>(terms: &ClipTerms<'t>, weights: &LossWeights) -> Result<LossBreakdown<Var<'t>>> {
    weights.validate()?;
    if terms.stm_ce.len() != 2 || terms.sam_ce.len() != 2 || terms.guidance.len() != 2 {
        return Err(Error::contract(format!(
            "expected 2+2 cross-entropies and 2 guidance terms, got {}+{} and {}",
            terms.stm_ce.len(),
            terms.sam_ce.len(),
            terms.guidance.len()
        )));
    }
    let consistency = terms
        .consistency
        .clone()
        .ok_or_else(|| Error::contract("mask-consistency term missing"))?;
    let ce: Vec<Var<'t>> = terms.stm_ce.iter().chain(&terms.sam_ce).cloned().collect();
    let seg = sum_all(&ce)?.scale(0.5);
    let guidance = sum_all(&terms.guidance)?;
    let total = seg
        .add(&guidance.scale(weights.mu))?
        .add(&consistency.scale(weights.gamma))?;
    Ok(LossBreakdown {
        seg,
        guidance,
        consistency,
        total,
    })
}
