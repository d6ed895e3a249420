//! Seeded stand-ins for the image and mask encoders.
//!
//! One trunk of four stride-2 3×3 convolutions (with ReLU) reads the frame
//! plus one mask channel and lands at 1/16 resolution; two 1×1 heads project
//! to the key (`Ck` channels) and value (`Cv` channels) embeddings. The
//! image path feeds an all-zero mask channel, so keys never depend on any
//! mask and `encode_mask` reuses the image key.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::Tensor;
use crate::weights::{gaussian, seeded_rng, Shared, WeightSet};

/// Spatial reduction from frame to embedding.
pub const STRIDE: usize = 16;

const TRUNK_DEPTH: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `3×H×W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub index: usize,
}

impl Frame {
    pub fn new(pixels: Tensor, index: usize) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim(format!("frame must be 3xHxW, got {s:?}")));
        }
        if !s[1].is_multiple_of(STRIDE) || !s[2].is_multiple_of(STRIDE) {
            return Err(Error::dim(format!(
                "frame {}x{} not divisible by {STRIDE}",
                s[1], s[2]
            )));
        }
        Ok(Frame { pixels, index })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Per-pixel object ids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMask {
    height: usize,
    width: usize,
    num_objects: usize,
    labels: Vec<u8>,
}

impl ObjectMask {
    pub fn new(height: usize, width: usize, num_objects: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if num_objects == 0 || num_objects > u8::MAX as usize {
            return Err(Error::domain(format!("num_objects {num_objects} out of range")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_objects) {
            return Err(Error::domain(format!(
                "object id {bad} exceeds num_objects {num_objects}"
            )));
        }
        Ok(ObjectMask {
            height,
            width,
            num_objects,
            labels,
        })
    }

    pub fn background(height: usize, width: usize, num_objects: usize) -> Result<Self> {
        Self::new(height, width, num_objects, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Binary map of object `id` (1-based).
    pub fn binary(&self, id: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == id).collect()
    }

    pub fn pixel_count(&self, id: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == id).count()
    }

    /// `1×H×W` tensor with ones on object `id`.
    pub fn channel(&self, id: usize) -> Tensor {
        let data = self
            .labels
            .iter()
            .map(|&l| if l as usize == id { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("mask shape")
    }

    /// Intersection over union of object `id` in `self` and `other`; two
    /// empty regions count as a perfect match.
    pub fn iou(&self, other: &ObjectMask, id: usize) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.labels.iter().zip(&other.labels) {
            let (a, b) = (a as usize == id, b as usize == id);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Target-agnostic key embedding, `Ck×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMap(pub Tensor);

/// Per-object value embeddings, each `Cv×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueMap(pub Vec<Tensor>);

impl KeyMap {
    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }
}

impl ValueMap {
    pub fn num_objects(&self) -> usize {
        self.0.len()
    }

    pub fn float_count(&self) -> usize {
        self.0.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub seed: u64,
    pub ck: usize,
    pub cv: usize,
    pub widths: [usize; TRUNK_DEPTH],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            seed: 11,
            ck: 64,
            cv: 512,
            widths: [16, 32, 64, 128],
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderWeights<T> {
    /// Stride-2 3×3 convolutions; the first reads RGB plus a mask channel.
    pub trunk: Vec<T>,
    pub key_head: T,
    pub value_head: T,
}

pub type EncoderParams = EncoderWeights<Shared>;

impl<T> EncoderWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            trunk: self.trunk.iter().map(&mut f).collect(),
            key_head: f(&self.key_head),
            value_head: f(&self.value_head),
        }
    }
}

impl<T> WeightSet<T> for EncoderWeights<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        for (i, w) in self.trunk.iter().enumerate() {
            f(format!("trunk.{i}"), w);
        }
        f("key_head".into(), &self.key_head);
        f("value_head".into(), &self.value_head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        for (i, w) in self.trunk.iter_mut().enumerate() {
            f(format!("trunk.{i}"), w);
        }
        f("key_head".into(), &mut self.key_head);
        f("value_head".into(), &mut self.value_head);
    }
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig) -> Self {
        let mut rng = seeded_rng(config.seed, 0);
        let mut trunk = Vec::with_capacity(TRUNK_DEPTH);
        let mut cin = 4;
        for &cout in &config.widths {
            trunk.push(gaussian(&[cout, cin, 3, 3], cin * 9, 1.0, &mut rng));
            cin = cout;
        }
        EncoderWeights {
            trunk,
            key_head: gaussian(&[config.ck, cin, 1, 1], cin, 1.0, &mut rng),
            value_head: gaussian(&[config.cv, cin, 1, 1], cin, 1.0, &mut rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> EncoderWeights<Var<'t>> {
        self.map(|w| tape.leaf(Arc::clone(w)))
    }

    pub fn ck(&self) -> usize {
        self.key_head.shape()[0]
    }

    pub fn cv(&self) -> usize {
        self.value_head.shape()[0]
    }

    /// Key and query-value features of a frame.
    pub fn encode_image(&self, frame: &Frame) -> Result<(KeyMap, Tensor)> {
        let tape = Tape::inference();
        let w = self.bind(&tape);
        let (k, v) = image_embedding(&tape.constant(frame.pixels.clone()), &w)?;
        Ok((KeyMap(k.value().clone()), v.value().clone()))
    }

    /// Key and per-object values of a frame with its mask.
    pub fn encode_mask(&self, frame: &Frame, mask: &ObjectMask) -> Result<(KeyMap, ValueMap)> {
        let tape = Tape::inference();
        let w = self.bind(&tape);
        let pixels = tape.constant(frame.pixels.clone());
        let (k, _) = image_embedding(&pixels, &w)?;
        let values = mask_values(&pixels, mask, &w)?;
        Ok((
            KeyMap(k.value().clone()),
            ValueMap(values.iter().map(|v| v.value().clone()).collect()),
        ))
    }

    /// Values only, for when the key of the frame is already known.
    pub fn encode_values(&self, frame: &Frame, mask: &ObjectMask) -> Result<ValueMap> {
        let tape = Tape::inference();
        let w = self.bind(&tape);
        let values = mask_values(&tape.constant(frame.pixels.clone()), mask, &w)?;
        Ok(ValueMap(values.iter().map(|v| v.value().clone()).collect()))
    }
}

fn check_pixels(pixels: &Tensor) -> Result<(usize, usize)> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(STRIDE) || !s[2].is_multiple_of(STRIDE) {
        return Err(Error::dim(format!(
            "encoder input must be 3xHxW with H, W divisible by {STRIDE}, got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

fn trunk<'t>(input: &Var<'t>, w: &EncoderWeights<Var<'t>>) -> Result<Var<'t>> {
    let mut x = input.clone();
    for layer in &w.trunk {
        x = x.conv(layer, ConvSpec::strided(2))?.relu();
    }
    Ok(x)
}

/// `(key, query value)` of `pixels` (`3×H×W`).
pub fn image_embedding<'t>(
    pixels: &Var<'t>,
    w: &EncoderWeights<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (h, wd) = check_pixels(pixels.value())?;
    let blank = pixels.tape().constant(Tensor::zeros(&[1, h, wd]));
    let features = trunk(&pixels.concat(&blank, 0)?, w)?;
    Ok((
        features.conv(&w.key_head, ConvSpec::UNIT)?,
        features.conv(&w.value_head, ConvSpec::UNIT)?,
    ))
}

/// One value embedding per object of `mask`, each from the frame stacked
/// with that object's binary channel.
pub fn mask_values<'t>(
    pixels: &Var<'t>,
    mask: &ObjectMask,
    w: &EncoderWeights<Var<'t>>,
) -> Result<Vec<Var<'t>>> {
    let (h, wd) = check_pixels(pixels.value())?;
    if mask.height() != h || mask.width() != wd {
        return Err(Error::dim(format!(
            "mask {}x{} does not match frame {h}x{wd}",
            mask.height(),
            mask.width()
        )));
    }
    (1..=mask.num_objects())
        .map(|id| {
            let channel = pixels.tape().constant(mask.channel(id));
            trunk(&pixels.concat(&channel, 0)?, w)?.conv(&w.value_head, ConvSpec::UNIT)
        })
        .collect()
}
