//! Seeded synthetic videos: rigid coloured discs and squares drifting over
//! a static textured background, with exact masks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rde_core::encoders::{Frame, ObjectMask, STRIDE};
use rde_core::train::{TrainClip, CLIP_LEN};
use rde_core::{Tensor, TensorArchive};

use crate::error::{Error, Result};

const MAX_SPEED: f64 = 2.0;
const MIN_SPEED: f64 = 0.5;
const MAX_ATTEMPTS: u64 = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub base_len: usize,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            base_len: 8,
            height: 64,
            width: 64,
            objects: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<Frame>,
    pub gt_masks: Vec<ObjectMask>,
    pub repeat_factor: usize,
    pub base_length: usize,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc,
    Square,
}

#[derive(Clone, Debug)]
struct Mover {
    shape: Shape,
    colour: [f64; 3],
    radius: f64,
    start: [f64; 2],
    velocity: [f64; 2],
}

impl Mover {
    fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let cy = self.start[0] + self.velocity[0] * t as f64;
        let cx = self.start[1] + self.velocity[1] * t as f64;
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        match self.shape {
            Shape::Disc => dy * dy + dx * dx <= self.radius * self.radius,
            Shape::Square => dy.abs().max(dx.abs()) <= 0.85 * self.radius,
        }
    }
}

/// Start coordinate and velocity along one axis such that the centre stays
/// at least `margin` inside `[0, extent)` for `frames` frames.
fn axis_motion(rng: &mut ChaCha8Rng, extent: usize, margin: f64, frames: usize, v: f64) -> (f64, f64) {
    let (lo, hi) = (margin, extent as f64 - margin);
    let span = v * frames.saturating_sub(1) as f64;
    let room = (hi - lo).max(0.0);
    let v = if span.abs() > room { v * room / span.abs() } else { v };
    let span = v * frames.saturating_sub(1) as f64;
    let (a, b) = (lo - span.min(0.0), hi - span.max(0.0));
    let start = if b > a { rng.gen_range(a..b) } else { (lo + hi) / 2.0 };
    (start, v)
}

fn draw_movers(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<Mover> {
    let side = config.height.min(config.width) as f64;
    (0..config.objects)
        .map(|i| {
            let radius = rng.gen_range(side / 10.0..side / 6.0);
            let speed = rng.gen_range(MIN_SPEED..MAX_SPEED);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (y0, vy) = axis_motion(rng, config.height, radius + 1.0, config.base_len, speed * angle.sin());
            let (x0, vx) = axis_motion(rng, config.width, radius + 1.0, config.base_len, speed * angle.cos());
            let mut colour = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
            colour[i % 3] = rng.gen_range(0.8..1.0);
            Mover {
                shape: if i % 2 == 0 { Shape::Disc } else { Shape::Square },
                colour,
                radius,
                start: [y0, x0],
                velocity: [vy, vx],
            }
        })
        .collect()
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let freq: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..0.5)).collect();
    let phase: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let noise = Tensor::uniform(&[3, h, w], -0.05, 0.05, rng);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let wave = (freq[2 * c] * x + phase[2 * c]).sin() * (freq[2 * c + 1] * y + phase[2 * c + 1]).cos();
        0.35 + 0.15 * wave + noise.data()[i]
    })
}

fn render(movers: &[Mover], bg: &Tensor, t: usize, h: usize, w: usize) -> Result<(Frame, ObjectMask)> {
    let labels: Vec<u8> = (0..h * w)
        .map(|p| {
            movers
                .iter()
                .rposition(|m| m.covers(t, p / w, p % w))
                .map_or(0, |i| i as u8 + 1)
        })
        .collect();
    let pixels = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        match labels[p] {
            0 => bg.data()[i],
            id => movers[id as usize - 1].colour[c],
        }
    });
    Ok((Frame::new(pixels, t)?, ObjectMask::new(h, w, movers.len(), labels)?))
}

fn check(config: &SynthConfig) -> Result<()> {
    if config.height == 0 || config.width == 0 || !config.height.is_multiple_of(STRIDE) || !config.width.is_multiple_of(STRIDE) {
        return Err(Error::Config(format!(
            "frame size {}x{} must be a positive multiple of {STRIDE}",
            config.height, config.width
        )));
    }
    if config.base_len == 0 {
        return Err(Error::Config("synth.base_len must be at least 1".into()));
    }
    if config.objects == 0 || config.objects > u8::MAX as usize {
        return Err(Error::Config(format!("synth.objects must be in 1..=255, got {}", config.objects)));
    }
    Ok(())
}

/// One basic unit of `base_len` frames. A draw in which some object is
/// hidden in any frame is discarded and the next seed is tried.
pub fn synth_base_clip(config: &SynthConfig) -> Result<SyntheticVideo> {
    check(config)?;
    let (h, w) = (config.height, config.width);
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(attempt));
        let movers = draw_movers(&mut rng, config);
        let bg = background(&mut rng, h, w);
        let (frames, gt_masks): (Vec<_>, Vec<_>) = (0..config.base_len)
            .map(|t| render(&movers, &bg, t, h, w))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let visible = gt_masks
            .iter()
            .all(|m| (1..=config.objects).all(|id| m.pixel_count(id) > 0));
        if visible {
            return Ok(SyntheticVideo {
                frames,
                gt_masks,
                repeat_factor: 1,
                base_length: config.base_len,
            });
        }
    }
    Err(Error::Config(format!(
        "no draw with every object visible after {MAX_ATTEMPTS} seeds from {}",
        config.seed
    )))
}

/// `R` repetitions of the unit played forward then backward.
pub fn synth_long_video(unit: &SyntheticVideo, repeat: usize) -> Result<SyntheticVideo> {
    if repeat == 0 {
        return Err(Error::Config("repeat factor must be at least 1".into()));
    }
    let b = unit.base_length;
    if unit.frames.len() < b || unit.gt_masks.len() < b {
        return Err(Error::Contract("unit is shorter than its base length".into()));
    }
    let order: Vec<usize> = (0..b).chain((0..b).rev()).collect();
    let mut frames = Vec::with_capacity(2 * b * repeat);
    let mut gt_masks = Vec::with_capacity(2 * b * repeat);
    for _ in 0..repeat {
        for &i in &order {
            let mut f = unit.frames[i].clone();
            f.index = frames.len();
            frames.push(f);
            gt_masks.push(unit.gt_masks[i].clone());
        }
    }
    Ok(SyntheticVideo {
        frames,
        gt_masks,
        repeat_factor: repeat,
        base_length: b,
    })
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn num_objects(&self) -> usize {
        self.gt_masks[0].num_objects()
    }

    /// The first five frames as a training clip.
    pub fn train_clip(&self) -> Result<TrainClip> {
        if self.len() < CLIP_LEN {
            return Err(Error::Config(format!("a training clip needs {CLIP_LEN} frames, video has {}", self.len())));
        }
        Ok(TrainClip::new(
            self.frames[..CLIP_LEN].to_vec(),
            self.gt_masks[..CLIP_LEN].to_vec(),
        )?)
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        let meta = vec![
            self.repeat_factor as f64,
            self.base_length as f64,
            self.num_objects() as f64,
        ];
        a.push("video.meta", Tensor::new(vec![3], meta).expect("3 values"));
        for (t, (f, m)) in self.frames.iter().zip(&self.gt_masks).enumerate() {
            a.push(format!("frame.{t}"), f.pixels.clone());
            let labels = m.labels().iter().map(|&l| l as f64).collect();
            a.push(
                format!("mask.{t}"),
                Tensor::new(vec![m.height(), m.width()], labels).expect("mask size"),
            );
        }
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let meta = a.require("video.meta")?.data().to_vec();
        if meta.len() != 3 {
            return Err(Error::Config("video.meta must hold 3 values".into()));
        }
        let (repeat_factor, base_length, objects) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
        let mut frames = Vec::new();
        let mut gt_masks = Vec::new();
        while let Some(pixels) = a.get(&format!("frame.{}", frames.len())) {
            let t = frames.len();
            let m = a.require(&format!("mask.{t}"))?;
            let (h, w) = (m.shape()[0], m.shape()[1]);
            let labels = m.data().iter().map(|&v| v as u8).collect();
            gt_masks.push(ObjectMask::new(h, w, objects, labels)?);
            frames.push(Frame::new(pixels.clone(), t)?);
        }
        if frames.is_empty() {
            return Err(Error::Config("archive holds no frames".into()));
        }
        Ok(SyntheticVideo {
            frames,
            gt_masks,
            repeat_factor,
            base_length,
        })
    }
}
