//! Five-frame clip training with plain gradient descent.
//!
//! Memory slots are built from ground-truth masks (teacher forcing). Frames
//! 2 and 4 are segmented with the growing bank, frames 3 and 5 with the
//! constant bank `[F, F, L, RDE]`, where the embedding is aggregated from
//! the previous one and the latest slot. Guidance compares the two banks'
//! readouts at frames 3 and 5, and mask consistency is taken on frame 1.

use crate::autodiff::{Tape, Var};
use crate::encoders::{image_embedding, mask_values, Frame, ObjectMask};
use crate::error::{Error, Result};
use crate::losses::{
    bootstrapped_ce, mask_consistency_loss, perturb_mask, total_loss, unbiased_guidance_loss,
    ClipTerms, LossBreakdown, LossWeights, PerturbConfig,
};
use crate::model::{ModelParams, ModelWeights};
use crate::readout::{class_logits, decode, read_memory};
use crate::sam::{sam_forward, SamLayout, SamWeights};
use crate::weights::seeded_rng;

pub const CLIP_LEN: usize = 5;

/// Random stream reserved for mask perturbation.
const PERTURB_STREAM: u64 = 7;

#[derive(Clone, Debug)]
pub struct TrainClip {
    frames: Vec<Frame>,
    gt_masks: Vec<ObjectMask>,
}

impl TrainClip {
    pub fn new(frames: Vec<Frame>, gt_masks: Vec<ObjectMask>) -> Result<Self> {
        if frames.len() != CLIP_LEN || gt_masks.len() != CLIP_LEN {
            return Err(Error::dim(format!(
                "a clip has {CLIP_LEN} frames and masks, got {} and {}",
                frames.len(),
                gt_masks.len()
            )));
        }
        let (h, w, n) = (frames[0].height(), frames[0].width(), gt_masks[0].num_objects());
        if n == 0 {
            return Err(Error::dim("clip masks have no objects"));
        }
        for (f, m) in frames.iter().zip(&gt_masks) {
            if f.height() != h || f.width() != w || m.height() != h || m.width() != w || m.num_objects() != n {
                return Err(Error::dim("clip frames and masks disagree in size or object count"));
            }
        }
        Ok(TrainClip { frames, gt_masks })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn gt_masks(&self) -> &[ObjectMask] {
        &self.gt_masks
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub perturb: PerturbConfig,
    pub topk: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            steps: 200,
            seed: 0,
            loss: LossWeights::default(),
            perturb: PerturbConfig::default(),
            topk: Some(40),
        }
    }
}

/// Loss values of one step, taken before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub seg: f64,
    pub guidance: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(step: usize, b: &LossBreakdown<f64>) -> Self {
        LossRecord {
            step,
            seg: b.seg,
            guidance: b.guidance,
            consistency: b.consistency,
            total: b.total,
        }
    }
}

/// A memory slot on the tape: key `Ck×h×w`, one `Cv×h×w` value per object.
#[derive(Clone)]
struct Slot<'t> {
    key: Var<'t>,
    values: Vec<Var<'t>>,
}

fn flatten<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]])
}

fn concat_all<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut it = parts.iter();
    let first = it.next().ok_or_else(|| Error::contract("empty memory bank"))?.clone();
    it.try_fold(first, |acc, p| acc.concat(p, 1))
}

fn read_bank<'t>(bank: &[&Slot<'t>], query_key: &Var<'t>, topk: Option<usize>) -> Result<Vec<Var<'t>>> {
    let keys = bank.iter().map(|s| flatten(&s.key)).collect::<Result<Vec<_>>>()?;
    let objects = bank[0].values.len();
    let values = (0..objects)
        .map(|i| concat_all(&bank.iter().map(|s| flatten(&s.values[i])).collect::<Result<Vec<_>>>()?))
        .collect::<Result<Vec<_>>>()?;
    read_memory(&concat_all(&keys)?, &values, query_key, topk)
}

fn aggregate<'t>(prev: &Var<'t>, latest: &Var<'t>, w: &SamWeights<Var<'t>>, layout: &SamLayout) -> Result<Var<'t>> {
    let s = prev.shape().to_vec();
    let as_time = |x: &Var<'t>| x.reshape(&[s[0], 1, s[1], s[2]]);
    sam_forward(&as_time(prev)?, &as_time(latest)?, w, layout)?.reshape(&s)
}

fn update_rde<'t>(rde: &Slot<'t>, latest: &Slot<'t>, w: &ModelWeights<Var<'t>>, params: &ModelParams) -> Result<Slot<'t>> {
    Ok(Slot {
        key: aggregate(&rde.key, &latest.key, &w.key_sam, &params.key_layout)?,
        values: rde
            .values
            .iter()
            .zip(&latest.values)
            .map(|(r, l)| aggregate(r, l, &w.value_sam, &params.value_layout))
            .collect::<Result<_>>()?,
    })
}

/// All loss terms of `clip` on `tape`, using `perturbed` as the corrupted
/// first-frame mask.
pub fn clip_terms<'t>(
    tape: &'t Tape,
    params: &ModelParams,
    w: &ModelWeights<Var<'t>>,
    clip: &TrainClip,
    perturbed: &ObjectMask,
    config: &TrainConfig,
) -> Result<ClipTerms<'t>> {
    let pixels: Vec<Var<'t>> = clip.frames.iter().map(|f| tape.constant(f.pixels.clone())).collect();
    let embeddings = pixels
        .iter()
        .map(|p| image_embedding(p, &w.encoder))
        .collect::<Result<Vec<_>>>()?;
    let slots = (0..CLIP_LEN - 1)
        .map(|t| {
            Ok(Slot {
                key: embeddings[t].0.clone(),
                values: mask_values(&pixels[t], &clip.gt_masks[t], &w.encoder)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ratio = config.loss.bootstrap_ratio;
    let segment = |readouts: &[Var<'t>], t: usize| -> Result<Var<'t>> {
        let logits = readouts
            .iter()
            .map(|r| decode(r, &embeddings[t].1, &w.decoder))
            .collect::<Result<Vec<_>>>()?;
        bootstrapped_ce(&class_logits(&logits)?, &clip.gt_masks[t], ratio)
    };
    let read = |bank: &[&Slot<'t>], t: usize| read_bank(bank, &embeddings[t].0, config.topk);

    let mut terms = ClipTerms::default();
    let mut rde = slots[0].clone();
    for t in 1..CLIP_LEN {
        let stm: Vec<&Slot<'t>> = slots[..t].iter().collect();
        let stm_readouts = read(&stm, t)?;
        if t % 2 == 1 {
            terms.stm_ce.push(segment(&stm_readouts, t)?);
        } else {
            let latest = &slots[t - 1];
            rde = update_rde(&rde, latest, w, params)?;
            let sam_readouts = read(&[&slots[0], &slots[0], latest, &rde], t)?;
            terms.sam_ce.push(segment(&sam_readouts, t)?);
            terms.guidance.push(unbiased_guidance_loss(&stm_readouts, &sam_readouts)?);
        }
    }
    terms.consistency = Some(mask_consistency_loss(&pixels[0], &clip.gt_masks[0], perturbed, &w.encoder)?);
    Ok(terms)
}

fn perturbation(clip: &TrainClip, config: &TrainConfig, step: usize) -> Result<ObjectMask> {
    let mut rng = seeded_rng(config.seed.wrapping_add(step as u64), PERTURB_STREAM);
    perturb_mask(&clip.gt_masks[0], &config.perturb, &mut rng)
}

/// Loss of `clip` under the perturbation drawn for `step`, without updating.
pub fn evaluate(params: &ModelParams, clip: &TrainClip, config: &TrainConfig, step: usize) -> Result<LossRecord> {
    let tape = Tape::inference();
    let w = params.bind(&tape);
    let perturbed = perturbation(clip, config, step)?;
    let terms = clip_terms(&tape, params, &w, clip, &perturbed, config)?;
    Ok(LossRecord::new(step, &total_loss(&terms, &config.loss)?.values()?))
}

/// One gradient-descent step; returns the loss before the update.
pub fn train_step(params: &mut ModelParams, clip: &TrainClip, config: &TrainConfig, step: usize) -> Result<LossRecord> {
    let tape = Tape::new();
    let w = params.bind(&tape);
    let perturbed = perturbation(clip, config, step)?;
    let terms = clip_terms(&tape, params, &w, clip, &perturbed, config)?;
    let loss = total_loss(&terms, &config.loss)?;
    let record = LossRecord::new(step, &loss.values()?);
    if !record.total.is_finite() {
        return Err(Error::domain(format!(
            "non-finite loss at step {step}: seg {} guidance {} consistency {}",
            record.seg, record.guidance, record.consistency
        )));
    }
    let grads = tape.backward(&loss.total)?;
    let g = ModelParams::gradients(&grads, &w);
    params.sgd_step(&g, config.lr);
    Ok(record)
}

/// Runs `config.steps` steps and returns one record per step.
pub fn train(params: &mut ModelParams, clip: &TrainClip, config: &TrainConfig) -> Result<Vec<LossRecord>> {
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::Config(format!("train.lr must be finite and non-negative, got {}", config.lr)));
    }
    config.loss.validate()?;
    (0..config.steps).map(|s| train_step(params, clip, config, s)).collect()
}
