//! Bank-composition ablation under the SAM pattern.

use rde_core::memory::{Pattern, Strategy};
use rde_core::model::ModelParams;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{run_stream, StreamConfig};
use crate::synth::SyntheticVideo;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub slots: usize,
    pub mean_latency_s: f64,
    pub peak_floats: usize,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub theta: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn without_latency(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.mean_latency_s = 0.0;
        }
        r
    }
}

/// One SAM-pattern run per strategy on the same video. Every frame's bank
/// must hold exactly the strategy's slot count.
pub fn ablate_strategies(
    video: &SyntheticVideo,
    strategies: &[Strategy],
    model: &ModelParams,
    base: &StreamConfig,
) -> Result<AblationReport> {
    if strategies.is_empty() {
        return Err(Error::Config("ablation needs at least one strategy".into()));
    }
    let rows = strategies
        .iter()
        .map(|&strategy| {
            let config = StreamConfig {
                pattern: Pattern::Sam,
                strategy: Some(strategy),
                ..base.clone()
            };
            let report = run_stream(video, model, &config)?.report;
            if let Some(bad) = report.records.iter().find(|r| r.slots != strategy.slot_count()) {
                return Err(Error::Contract(format!(
                    "{} bank held {} slots at frame {}, expected {}",
                    strategy.short_name(),
                    bad.slots,
                    bad.frame_index,
                    strategy.slot_count()
                )));
            }
            Ok(AblationRow {
                strategy: strategy.short_name().to_string(),
                slots: strategy.slot_count(),
                mean_latency_s: report.mean_latency_s,
                peak_floats: report.peak_floats,
                mean_iou: report.mean_iou,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        theta: base.theta,
        rows,
    })
}
