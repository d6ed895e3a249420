//! Cost scaling of each memory discipline with video length.

use rde_core::memory::Pattern;
use rde_core::model::ModelParams;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{run_stream, RunReport, StreamConfig};
use crate::synth::{synth_long_video, SyntheticVideo};

/// Repeat factors of the long-video experiment.
pub const DEFAULT_REPEATS: [usize; 4] = [1, 10, 15, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub pattern: String,
    pub repeat: usize,
    pub frames: usize,
    pub mean_latency_s: f64,
    pub peak_slots: usize,
    pub peak_floats: usize,
    pub final_slots: usize,
    pub mean_iou: f64,
}

impl ScalingRow {
    fn new(repeat: usize, report: &RunReport) -> Self {
        ScalingRow {
            pattern: report.pattern.clone(),
            repeat,
            frames: report.records.len(),
            mean_latency_s: report.mean_latency_s,
            peak_slots: report.records.iter().map(|r| r.slots).max().unwrap_or(0),
            peak_floats: report.peak_floats,
            final_slots: report.final_slots(),
            mean_iou: report.mean_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub theta: usize,
    /// Repeat-major, then patterns in the requested order.
    pub rows: Vec<ScalingRow>,
}

impl CompareReport {
    pub fn row(&self, pattern: Pattern, repeat: usize) -> Option<&ScalingRow> {
        self.rows
            .iter()
            .find(|r| r.pattern == pattern.name() && r.repeat == repeat)
    }

    pub fn without_latency(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.mean_latency_s = 0.0;
        }
        r
    }
}

/// Runs every pattern on the long video built from `unit` for each repeat
/// factor. `base` supplies everything but the pattern; its strategy is used
/// only for the SAM pattern.
pub fn compare_patterns(
    unit: &SyntheticVideo,
    patterns: &[Pattern],
    repeats: &[usize],
    model: &ModelParams,
    base: &StreamConfig,
) -> Result<CompareReport> {
    if patterns.len() < 2 {
        return Err(Error::Config("compare needs at least two patterns".into()));
    }
    if repeats.is_empty() {
        return Err(Error::Config("compare needs at least one repeat factor".into()));
    }
    let mut rows = Vec::with_capacity(patterns.len() * repeats.len());
    for &repeat in repeats {
        let video = synth_long_video(unit, repeat)?;
        for &pattern in patterns {
            let config = StreamConfig {
                pattern,
                strategy: if pattern == Pattern::Sam { base.strategy } else { None },
                ..base.clone()
            };
            let out = run_stream(&video, model, &config)?;
            rows.push(ScalingRow::new(repeat, &out.report));
        }
    }
    Ok(CompareReport {
        theta: base.theta,
        rows,
    })
}
