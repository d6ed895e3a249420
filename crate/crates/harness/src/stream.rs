//! Streaming inference over a video under one memory discipline.

use std::time::Instant;

use rde_core::encoders::ObjectMask;
use rde_core::memory::{
    assemble_bank, ema_update, is_update_frame, MemoryBank, MemorySlot, MostSimilar, Origin, Pattern, RdeState,
    Strategy,
};
use rde_core::model::ModelParams;
use rde_core::readout::segment_frame;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SyntheticVideo;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub pattern: Pattern,
    pub theta: usize,
    pub topk: Option<usize>,
    /// Bank layout for the SAM pattern; `None` means `2F&L&RDE`.
    pub strategy: Option<Strategy>,
    /// EMA weight of the old entry.
    pub lambda: f64,
    /// Timed passes over the video; each frame reports its median.
    pub latency_repeats: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            pattern: Pattern::Sam,
            theta: 3,
            topk: Some(40),
            strategy: None,
            lambda: 0.5,
            latency_repeats: 3,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta == 0 {
            return Err(Error::Config("memory.theta must be at least 1".into()));
        }
        if self.topk == Some(0) {
            return Err(Error::Config("readout.topk must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("memory.lambda {} outside [0, 1]", self.lambda)));
        }
        if self.latency_repeats == 0 {
            return Err(Error::Config("stream.latency_repeats must be at least 1".into()));
        }
        if self.strategy.is_some() && self.pattern != Pattern::Sam {
            return Err(Error::Config(format!(
                "memory.strategy applies to the sam pattern, not {}",
                self.pattern
            )));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy.unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub latency_s: f64,
    pub slots: usize,
    pub floats: usize,
    pub iou_mean: f64,
    /// Region similarity against ground truth, one per object.
    pub iou: Vec<f64>,
}

/// Per-frame records of one run. Means skip frame 0, which is copied from
/// ground truth; the peak covers every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub pattern: String,
    pub theta: usize,
    pub strategy: Option<String>,
    pub mean_latency_s: f64,
    pub peak_floats: usize,
    pub mean_iou: f64,
    pub records: Vec<FrameRecord>,
}

impl RunReport {
    fn new(config: &StreamConfig, records: Vec<FrameRecord>) -> Self {
        let mut report = RunReport {
            pattern: config.pattern.name().to_string(),
            theta: config.theta,
            strategy: (config.pattern == Pattern::Sam).then(|| config.strategy().short_name().to_string()),
            mean_latency_s: 0.0,
            peak_floats: 0,
            mean_iou: 0.0,
            records,
        };
        report.recompute();
        report
    }

    /// Refreshes the aggregates from the records.
    pub fn recompute(&mut self) {
        let tail = if self.records.len() > 1 { &self.records[1..] } else { &self.records[..] };
        let n = tail.len().max(1) as f64;
        self.mean_latency_s = tail.iter().map(|r| r.latency_s).sum::<f64>() / n;
        self.mean_iou = tail.iter().map(|r| r.iou_mean).sum::<f64>() / n;
        self.peak_floats = self.records.iter().map(|r| r.floats).max().unwrap_or(0);
    }

    /// The same report with every timing zeroed.
    pub fn without_latency(&self) -> Self {
        let mut r = self.clone();
        for rec in &mut r.records {
            rec.latency_s = 0.0;
        }
        r.mean_latency_s = 0.0;
        r
    }

    pub fn final_slots(&self) -> usize {
        self.records.last().map_or(0, |r| r.slots)
    }
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub report: RunReport,
    pub masks: Vec<ObjectMask>,
}

#[derive(Clone)]
struct State {
    bank: MemoryBank,
    gt: MemorySlot,
    latest: MemorySlot,
    rde: RdeState,
}

fn init(video: &SyntheticVideo, model: &ModelParams, config: &StreamConfig) -> Result<State> {
    let (key, values) = model.encoder().encode_mask(&video.frames[0], &video.gt_masks[0])?;
    let gt = MemorySlot::new(key, values, Origin::Gt, 0)?;
    let latest = gt.with_origin(Origin::Latest);
    let rde = RdeState::from_slot(&gt);
    let bank = match config.pattern {
        Pattern::Stm => {
            let mut bank = MemoryBank::new(Pattern::Stm, config.theta)?;
            bank.stm_append(gt.clone())?;
            bank
        }
        Pattern::Ema => MemoryBank::from_slots(
            Pattern::Ema,
            config.theta,
            vec![gt.clone(), gt.with_origin(Origin::Historical)],
        )?,
        Pattern::Sam => assemble_bank(&gt, &latest, &rde, config.strategy(), config.theta)?,
    };
    Ok(State { bank, gt, latest, rde })
}

/// Segments frame `t` and applies the pattern's update.
fn step(
    mut state: State,
    video: &SyntheticVideo,
    t: usize,
    model: &ModelParams,
    config: &StreamConfig,
) -> Result<(State, ObjectMask)> {
    let frame = &video.frames[t];
    let seg = segment_frame(&state.bank, frame, model.encoder(), model.decoder(), config.topk)?;
    let update = is_update_frame(t, config.theta);
    let strategy = config.strategy();
    let wants_latest = config.pattern == Pattern::Sam && strategy.composition().contains(&Origin::Latest);
    if update || wants_latest {
        let values = model.encoder().encode_values(frame, &seg.mask)?;
        state.latest = MemorySlot::new(seg.key, values, Origin::Latest, t)?;
    }
    match config.pattern {
        Pattern::Stm => {
            if update {
                state.bank.stm_append(state.latest.clone())?;
            }
        }
        Pattern::Ema => {
            if update {
                let blended = ema_update(&state.bank.slots()[1], &state.latest, config.lambda, &MostSimilar)?;
                state.bank.replace_slots(vec![state.gt.clone(), blended])?;
            }
        }
        Pattern::Sam => {
            if update {
                state.rde = rde_core::memory::sam_update(&state.rde, &state.latest, &model.key_sam(), &model.value_sam())?;
            }
            state.bank = assemble_bank(&state.gt, &state.latest, &state.rde, strategy, config.theta)?;
        }
    }
    Ok((state, seg.mask))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn record(t: usize, latency_s: f64, bank: &MemoryBank, pred: &ObjectMask, gt: &ObjectMask) -> FrameRecord {
    let iou: Vec<f64> = (1..=gt.num_objects()).map(|id| pred.iou(gt, id)).collect();
    FrameRecord {
        frame_index: t,
        latency_s,
        slots: bank.len(),
        floats: bank.float_count(),
        iou_mean: iou.iter().sum::<f64>() / iou.len().max(1) as f64,
        iou,
    }
}

/// Runs `video` frame by frame. Frame 0 initialises the bank from its
/// ground truth and is reported with that mask as its prediction.
/// One timed pass; latencies are per frame, records carry none yet.
fn single_pass(video: &SyntheticVideo, model: &ModelParams, config: &StreamConfig) -> Result<(Vec<f64>, StreamOutput)> {
    let gt0 = &video.gt_masks[0];
    let start = Instant::now();
    let mut state = init(video, model, config)?;
    let mut latencies = vec![start.elapsed().as_secs_f64()];
    let mut records = vec![record(0, 0.0, &state.bank, gt0, gt0)];
    let mut masks = vec![gt0.clone()];
    for t in 1..video.len() {
        let start = Instant::now();
        let (next, mask) = step(state, video, t, model, config)?;
        latencies.push(start.elapsed().as_secs_f64());
        records.push(record(t, 0.0, &next.bank, &mask, &video.gt_masks[t]));
        masks.push(mask);
        state = next;
    }
    let report = RunReport::new(config, records);
    Ok((latencies, StreamOutput { report, masks }))
}

/// Streams the whole video `latency_repeats` times and reports, per frame,
/// the median over passes. Passes are identical apart from timing.
pub fn run_stream(video: &SyntheticVideo, model: &ModelParams, config: &StreamConfig) -> Result<StreamOutput> {
    config.validate()?;
    if video.is_empty() {
        return Err(Error::Config("video has no frames".into()));
    }
    let mut timings = Vec::with_capacity(config.latency_repeats);
    let mut kept = None;
    for _ in 0..config.latency_repeats {
        let (latencies, out) = single_pass(video, model, config)?;
        timings.push(latencies);
        kept.get_or_insert(out);
    }
    let mut out = kept.expect("at least one pass");
    for (t, rec) in out.report.records.iter_mut().enumerate() {
        rec.latency_s = median(timings.iter().map(|l| l[t]).collect());
    }
    out.report.recompute();
    Ok(out)
}
