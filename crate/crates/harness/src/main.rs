use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rde_core::memory::{Pattern, Strategy};
use rde_core::model::ModelParams;
use rde_core::train::{evaluate, train};
use rde_harness::ablate::ablate_strategies;
use rde_harness::compare::{compare_patterns, DEFAULT_REPEATS};
use rde_harness::config::HarnessConfig;
use rde_harness::maskio::{write_frame_ppm, write_mask, MaskFormat};
use rde_harness::report::{emit_report, Format, LossCurve, Table};
use rde_harness::stream::run_stream;
use rde_harness::synth::{synth_base_clip, synth_long_video, SyntheticVideo};
use rde_harness::{Error, Result};

#[derive(Parser)]
#[command(name = "rde-harness", version, about = "Streaming memory-bank VOS harness on synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long video and dump frames, masks and an archive.
    Synth {
        #[command(flatten)]
        video: VideoArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mask_format: Option<MaskFormat>,
    },
    /// Stream one video under one memory pattern.
    Run {
        #[arg(long)]
        pattern: Option<Pattern>,
        #[command(flatten)]
        stream: StreamArgs,
        #[command(flatten)]
        video: VideoArgs,
        /// Video archive written by `synth`; otherwise one is generated.
        #[arg(long)]
        video_file: Option<PathBuf>,
        /// Directory for predicted masks.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        mask_format: Option<MaskFormat>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Cost scaling of several patterns over repeat factors.
    Compare {
        #[arg(long, value_delimiter = ',', default_values_t = [Pattern::Stm, Pattern::Ema, Pattern::Sam])]
        patterns: Vec<Pattern>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_REPEATS)]
        repeats: Vec<usize>,
        #[command(flatten)]
        stream: StreamArgs,
        #[command(flatten)]
        video: VideoArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Bank-composition ablation under the SAM pattern.
    Ablate {
        /// Comma-separated, e.g. `F,L&RDE,2F&L&RDE`; all ten by default.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,
        #[command(flatten)]
        stream: StreamArgs,
        #[command(flatten)]
        video: VideoArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Toy optimisation on the first five frames of a synthetic clip.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        train_seed: Option<u64>,
        #[command(flatten)]
        video: VideoArgs,
        /// Where to save the trained weights.
        #[arg(long)]
        save: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct VideoArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Square frame side, a multiple of 16.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    theta: Option<usize>,
    /// 0 reads densely.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Overrides the format implied by the report path.
    #[arg(long)]
    format: Option<Format>,
    /// Model weights archive; seeded initial weights otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, base: HarnessConfig) -> Result<HarnessConfig> {
    match path {
        Some(p) => HarnessConfig::load(p, base),
        None => Ok(base),
    }
}

fn apply_video(c: &mut HarnessConfig, v: &VideoArgs) {
    if let Some(s) = v.seed {
        c.synth.seed = s;
    }
    if let Some(b) = v.base_len {
        c.synth.base_len = b;
    }
    if let Some(s) = v.size {
        c.synth.height = s;
        c.synth.width = s;
    }
    if let Some(n) = v.objects {
        c.synth.objects = n;
    }
}

fn apply_stream(c: &mut HarnessConfig, s: &StreamArgs) {
    if let Some(t) = s.theta {
        c.stream.theta = t;
    }
    if let Some(k) = s.topk {
        c.stream.topk = (k > 0).then_some(k);
    }
    if s.strategy.is_some() {
        c.stream.strategy = s.strategy;
    }
}

fn model(c: &HarnessConfig, weights: Option<&Path>) -> Result<ModelParams> {
    Ok(match weights {
        Some(p) => ModelParams::load(&c.model, p)?,
        None => ModelParams::init(&c.model)?,
    })
}

fn video(c: &HarnessConfig, repeat: usize) -> Result<SyntheticVideo> {
    synth_long_video(&synth_base_clip(&c.synth)?, repeat)
}

fn emit<T: Table>(report: &T, common: &CommonArgs) -> Result<()> {
    if let Some(path) = &common.report {
        let format = common.format.unwrap_or_else(|| Format::from_path(path));
        emit_report(report, format, path)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })
}

fn dump_masks(dir: &Path, masks: &[rde_core::encoders::ObjectMask], format: MaskFormat) -> Result<()> {
    create_dir(dir)?;
    for (t, m) in masks.iter().enumerate() {
        write_mask(m, format, &dir.join(format!("{t:05}.{}", format.extension())))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            video: v,
            out,
            config,
            mask_format,
        } => {
            let mut c = load_config(config.as_deref(), HarnessConfig::default())?;
            apply_video(&mut c, &v);
            let vid = video(&c, v.repeat)?;
            let format = mask_format.unwrap_or(c.mask_format);
            create_dir(&out.join("frames"))?;
            for f in &vid.frames {
                write_frame_ppm(f, &out.join("frames").join(format!("{:05}.ppm", f.index)))?;
            }
            dump_masks(&out.join("masks"), &vid.gt_masks, format)?;
            vid.to_archive().save(&out.join("video.bin"))?;
            println!(
                "{} frames of {}x{} with {} objects written to {}",
                vid.len(),
                vid.height(),
                vid.width(),
                vid.num_objects(),
                out.display()
            );
        }
        Command::Run {
            pattern,
            stream,
            video: v,
            video_file,
            masks,
            mask_format,
            common,
        } => {
            let mut c = load_config(common.config.as_deref(), HarnessConfig::default())?;
            apply_video(&mut c, &v);
            apply_stream(&mut c, &stream);
            if let Some(p) = pattern {
                c.stream.pattern = p;
            }
            let vid = match &video_file {
                Some(p) => SyntheticVideo::from_archive(&rde_core::TensorArchive::load(p)?)?,
                None => video(&c, v.repeat)?,
            };
            let out = run_stream(&vid, &model(&c, common.weights.as_deref())?, &c.stream)?;
            let r = &out.report;
            println!(
                "{}: {} frames, mean latency {:.4} s, peak floats {}, final slots {}, mean IoU {:.4}",
                r.pattern,
                r.records.len(),
                r.mean_latency_s,
                r.peak_floats,
                r.final_slots(),
                r.mean_iou
            );
            if let Some(dir) = masks {
                dump_masks(&dir, &out.masks, mask_format.unwrap_or(c.mask_format))?;
            }
            emit(r, &common)?;
        }
        Command::Compare {
            patterns,
            repeats,
            stream,
            video: v,
            common,
        } => {
            let mut c = load_config(common.config.as_deref(), HarnessConfig::default())?;
            apply_video(&mut c, &v);
            apply_stream(&mut c, &stream);
            let unit = synth_base_clip(&c.synth)?;
            let report = compare_patterns(&unit, &patterns, &repeats, &model(&c, common.weights.as_deref())?, &c.stream)?;
            println!("pattern repeat frames mean_latency_s peak_floats final_slots mean_iou");
            for r in &report.rows {
                println!(
                    "{} {} {} {:.5} {} {} {:.4}",
                    r.pattern, r.repeat, r.frames, r.mean_latency_s, r.peak_floats, r.final_slots, r.mean_iou
                );
            }
            emit(&report, &common)?;
        }
        Command::Ablate {
            strategies,
            stream,
            video: v,
            common,
        } => {
            let mut c = load_config(common.config.as_deref(), HarnessConfig::default())?;
            apply_video(&mut c, &v);
            apply_stream(&mut c, &stream);
            let strategies = if strategies.is_empty() { Strategy::ALL.to_vec() } else { strategies };
            let vid = video(&c, v.repeat)?;
            let report = ablate_strategies(&vid, &strategies, &model(&c, common.weights.as_deref())?, &c.stream)?;
            println!("strategy slots mean_iou");
            for r in &report.rows {
                println!("{} {} {:.4}", r.strategy, r.slots, r.mean_iou);
            }
            emit(&report, &common)?;
        }
        Command::Train {
            steps,
            lr,
            train_seed,
            video: v,
            save,
            common,
        } => {
            let mut c = load_config(common.config.as_deref(), HarnessConfig::for_training())?;
            apply_video(&mut c, &v);
            if let Some(s) = steps {
                c.train.steps = s;
            }
            if let Some(l) = lr {
                c.train.lr = l;
            }
            if let Some(s) = train_seed {
                c.train.seed = s;
            }
            let clip = video(&c, v.repeat)?.train_clip()?;
            let mut params = model(&c, common.weights.as_deref())?;
            let initial = evaluate(&params, &clip, &c.train, 0)?;
            let records = train(&mut params, &clip, &c.train)?;
            let last = evaluate(&params, &clip, &c.train, 0)?;
            println!(
                "{} steps: total loss {:.5} -> {:.5} (ratio {:.3})",
                records.len(),
                initial.total,
                last.total,
                last.total / initial.total
            );
            if let Some(p) = save {
                params.save(&p)?;
                println!("weights saved to {}", p.display());
            }
            emit(&LossCurve::from(records.as_slice()), &common)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
