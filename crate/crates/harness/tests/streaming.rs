use rde_core::encoders::EncoderConfig;
use rde_core::memory::{Pattern, Strategy};
use rde_core::model::{ModelConfig, ModelParams};
use rde_harness::ablate::ablate_strategies;
use rde_harness::compare::compare_patterns;
use rde_harness::report::{emit_report, read_json, render, Format};
use rde_harness::stream::{run_stream, RunReport, StreamConfig};
use rde_harness::synth::{synth_base_clip, synth_long_video, SynthConfig, SyntheticVideo};
use rde_harness::Error;

fn model() -> ModelParams {
    ModelParams::init(&ModelConfig {
        encoder: EncoderConfig {
            ck: 16,
            cv: 32,
            widths: [8, 8, 16, 16],
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    })
    .unwrap()
}

fn unit(base_len: usize) -> SyntheticVideo {
    synth_base_clip(&SynthConfig {
        seed: 5,
        base_len,
        height: 32,
        width: 32,
        objects: 2,
    })
    .unwrap()
}

fn stream(pattern: Pattern, theta: usize) -> StreamConfig {
    StreamConfig {
        pattern,
        theta,
        latency_repeats: 1,
        ..StreamConfig::default()
    }
}

#[test]
fn sam_bank_is_constant_and_frame_zero_is_exact() {
    let video = synth_long_video(&unit(8), 2).unwrap();
    let out = run_stream(&video, &model(), &stream(Pattern::Sam, 3)).unwrap();
    let r = &out.report;
    assert_eq!(r.records.len(), video.len());
    assert!(r.records.iter().all(|x| x.slots == 4 && x.floats == r.peak_floats));
    assert_eq!(out.masks[0], video.gt_masks[0]);
    assert!(r.records[0].iou.iter().all(|&v| v == 1.0));
    for rec in &r.records {
        assert!(rec.iou.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(rec.iou.len(), 2);
    }
}

#[test]
fn stm_grows_one_slot_every_theta_frames() {
    let video = synth_long_video(&unit(10), 5).unwrap();
    assert_eq!(video.len(), 100);
    let r = run_stream(&video, &model(), &stream(Pattern::Stm, 5)).unwrap().report;
    assert_eq!(r.final_slots(), 20);
    for rec in &r.records {
        assert_eq!(rec.slots, rec.frame_index / 5 + 1);
    }
    let per_slot = r.records[0].floats;
    assert_eq!(r.peak_floats, 20 * per_slot);
}

#[test]
fn ema_bank_keeps_two_slots() {
    let video = synth_long_video(&unit(6), 1).unwrap();
    let r = run_stream(&video, &model(), &stream(Pattern::Ema, 2)).unwrap().report;
    assert!(r.records.iter().all(|x| x.slots == 2));
}

#[test]
fn config_mismatches_are_rejected() {
    let video = synth_long_video(&unit(4), 1).unwrap();
    let m = model();
    let bad = [
        StreamConfig {
            strategy: Some(Strategy::First),
            ..stream(Pattern::Stm, 3)
        },
        StreamConfig {
            lambda: 1.5,
            ..stream(Pattern::Ema, 3)
        },
        stream(Pattern::Sam, 0),
        StreamConfig {
            topk: Some(0),
            ..stream(Pattern::Sam, 3)
        },
    ];
    for c in bad {
        assert!(matches!(run_stream(&video, &m, &c), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn reports_are_deterministic_modulo_latency() {
    let video = synth_long_video(&unit(6), 1).unwrap();
    let run = || {
        run_stream(&video, &model(), &stream(Pattern::Sam, 3))
            .unwrap()
            .report
            .without_latency()
    };
    let (a, b) = (run(), run());
    assert_eq!(render(&a, Format::Csv).unwrap(), render(&b, Format::Csv).unwrap());
    assert_eq!(render(&a, Format::Json).unwrap(), render(&b, Format::Json).unwrap());
}

#[test]
fn emitted_reports_have_one_row_per_frame_and_round_trip() {
    let video = synth_long_video(&unit(5), 1).unwrap();
    let report = run_stream(&video, &model(), &stream(Pattern::Sam, 3)).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("nested/run.csv");
    let json_path = dir.path().join("run.json");
    emit_report(&report, Format::Csv, &csv_path).unwrap();
    emit_report(&report, Format::Json, &json_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), video.len() + 1);
    assert!(text.starts_with("frame_index,latency_s,slots,floats,iou_mean"));
    let back: RunReport = read_json(&json_path).unwrap();
    assert_eq!(back, report);
    let first = std::fs::read(&json_path).unwrap();
    emit_report(&report, Format::Json, &json_path).unwrap();
    assert_eq!(std::fs::read(&json_path).unwrap(), first);
    let mut recomputed = back.clone();
    recomputed.recompute();
    assert_eq!(recomputed, back);
}

#[test]
fn unwritable_report_path_names_the_path() {
    let video = synth_long_video(&unit(3), 1).unwrap();
    let report = run_stream(&video, &model(), &stream(Pattern::Stm, 3)).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = emit_report(&report, Format::Csv, &blocker.join("r.csv")).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}

#[test]
fn compare_scales_and_needs_two_patterns() {
    let m = model();
    let u = unit(4);
    let base = stream(Pattern::Sam, 3);
    assert!(matches!(
        compare_patterns(&u, &[Pattern::Sam], &[1, 2], &m, &base),
        Err(Error::Config(_))
    ));
    let report = compare_patterns(&u, &[Pattern::Stm, Pattern::Sam], &[1, 2, 3], &m, &base).unwrap();
    assert_eq!(report.rows.len(), 6);
    let sam: Vec<usize> = [1, 2, 3].iter().map(|&r| report.row(Pattern::Sam, r).unwrap().peak_floats).collect();
    assert!(sam.windows(2).all(|w| w[0] == w[1]));
    let stm: Vec<usize> = [1, 2, 3].iter().map(|&r| report.row(Pattern::Stm, r).unwrap().peak_floats).collect();
    assert!(stm.windows(2).all(|w| w[0] < w[1]));
    for r in [1, 2, 3] {
        let row = report.row(Pattern::Stm, r).unwrap();
        assert_eq!(row.frames, 8 * r);
        assert_eq!(row.final_slots, (row.frames - 1) / 3 + 1);
    }
}

#[test]
fn ablation_runs_every_strategy() {
    let video = synth_long_video(&unit(8), 2).unwrap();
    assert_eq!(video.len(), 32);
    let report = ablate_strategies(&video, &Strategy::ALL, &model(), &stream(Pattern::Sam, 3)).unwrap();
    assert_eq!(report.rows.len(), 10);
    for (row, s) in report.rows.iter().zip(Strategy::ALL) {
        assert_eq!(row.strategy, s.short_name());
        assert_eq!(row.slots, s.slot_count());
    }
    assert_eq!(report.rows[0].slots, 1);
    assert_eq!(report.rows[9].slots, 4);
    assert!(matches!(
        ablate_strategies(&video, &[], &model(), &stream(Pattern::Sam, 3)),
        Err(Error::Config(_))
    ));
}
