//! CSV and JSON emission. Column order is fixed per report kind.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rde_core::train::LossRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::ablate::AblationReport;
use crate::compare::CompareReport;
use crate::error::{Error, Result};
use crate::stream::RunReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// `.json` means JSON; anything else is CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// A report with a header row and one string row per record.
pub trait Table: Serialize {
    fn header(&self) -> Vec<String>;
    fn rows(&self) -> Vec<Vec<String>>;
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl Table for RunReport {
    fn header(&self) -> Vec<String> {
        let mut h = cols(&["frame_index", "latency_s", "slots", "floats", "iou_mean"]);
        let n = self.records.first().map_or(0, |r| r.iou.len());
        h.extend((1..=n).map(|i| format!("iou_{i}")));
        h
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.frame_index.to_string(),
                    r.latency_s.to_string(),
                    r.slots.to_string(),
                    r.floats.to_string(),
                    r.iou_mean.to_string(),
                ];
                row.extend(r.iou.iter().map(f64::to_string));
                row
            })
            .collect()
    }
}

impl Table for CompareReport {
    fn header(&self) -> Vec<String> {
        cols(&[
            "pattern",
            "repeat",
            "frames",
            "mean_latency_s",
            "peak_slots",
            "peak_floats",
            "final_slots",
            "mean_iou",
        ])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.pattern.clone(),
                    r.repeat.to_string(),
                    r.frames.to_string(),
                    r.mean_latency_s.to_string(),
                    r.peak_slots.to_string(),
                    r.peak_floats.to_string(),
                    r.final_slots.to_string(),
                    r.mean_iou.to_string(),
                ]
            })
            .collect()
    }
}

impl Table for AblationReport {
    fn header(&self) -> Vec<String> {
        cols(&["strategy", "slots", "mean_latency_s", "peak_floats", "mean_iou"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.strategy.clone(),
                    r.slots.to_string(),
                    r.mean_latency_s.to_string(),
                    r.peak_floats.to_string(),
                    r.mean_iou.to_string(),
                ]
            })
            .collect()
    }
}

/// Loss curve, one row per step.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LossCurve {
    pub records: Vec<LossRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub l_seg: f64,
    pub l_ug: f64,
    pub l_mc: f64,
    pub total: f64,
}

impl From<&[LossRecord]> for LossCurve {
    fn from(records: &[LossRecord]) -> Self {
        LossCurve {
            records: records
                .iter()
                .map(|r| LossRow {
                    step: r.step,
                    l_seg: r.seg,
                    l_ug: r.guidance,
                    l_mc: r.consistency,
                    total: r.total,
                })
                .collect(),
        }
    }
}

impl Table for LossCurve {
    fn header(&self) -> Vec<String> {
        cols(&["step", "L_Seg", "L_UG", "L_MC", "total"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .map(|r| {
                vec![
                    r.step.to_string(),
                    r.l_seg.to_string(),
                    r.l_ug.to_string(),
                    r.l_mc.to_string(),
                    r.total.to_string(),
                ]
            })
            .collect()
    }
}

pub fn render<T: Table>(report: &T, format: Format) -> Result<String> {
    match format {
        Format::Json => serde_json::to_string_pretty(report)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Contract(format!("report serialization failed: {e}"))),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let fail = |e: csv::Error| Error::Contract(format!("csv serialization failed: {e}"));
            w.write_record(report.header()).map_err(fail)?;
            for row in report.rows() {
                w.write_record(row).map_err(fail)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::Contract(format!("csv flush failed: {e}")))?;
            String::from_utf8(bytes).map_err(|e| Error::Contract(e.to_string()))
        }
    }
}

pub fn emit_report<T: Table>(report: &T, format: Format, path: &Path) -> Result<()> {
    let text = render(report, format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::FrameRecord;

    fn report() -> RunReport {
        RunReport {
            pattern: "sam".into(),
            theta: 3,
            strategy: Some("2F&L&RDE".into()),
            mean_latency_s: 0.25,
            peak_floats: 40,
            mean_iou: 0.5,
            records: (0..3)
                .map(|t| FrameRecord {
                    frame_index: t,
                    latency_s: 0.1 * t as f64,
                    slots: 4,
                    floats: 40,
                    iou_mean: 0.5,
                    iou: vec![0.25, 0.75],
                })
                .collect(),
        }
    }

    #[test]
    fn csv_layout() {
        let text = render(&report(), Format::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "frame_index,latency_s,slots,floats,iou_mean,iou_1,iou_2");
        assert_eq!(lines[2], "1,0.1,4,40,0.5,0.25,0.75");
    }

    #[test]
    fn json_round_trip() {
        let r = report();
        let text = render(&r, Format::Json).unwrap();
        assert_eq!(serde_json::from_str::<RunReport>(&text).unwrap(), r);
    }

    #[test]
    fn format_from_path() {
        assert_eq!(Format::from_path(Path::new("a/b.JSON")), Format::Json);
        assert_eq!(Format::from_path(Path::new("a/b.csv")), Format::Csv);
        assert!("xml".parse::<Format>().is_err());
    }
}
