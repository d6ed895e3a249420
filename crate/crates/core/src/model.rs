//! All learnable parts in one bundle: encoder, key and value aggregation
//! modules, decoder.

use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Gradients, Tape, Var};
use crate::encoders::{EncoderConfig, EncoderParams, EncoderWeights};
use crate::error::Result;
use crate::readout::{DecoderConfig, DecoderParams, DecoderWeights};
use crate::sam::{SamConfig, SamLayout, SamParams, SamWeights};
use crate::tensor::{Tensor, TensorArchive};
use crate::weights::{self, Shared, WeightSet};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sam: SamConfig,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug)]
pub struct ModelWeights<T> {
    pub encoder: EncoderWeights<T>,
    pub key_sam: SamWeights<T>,
    pub value_sam: SamWeights<T>,
    pub decoder: DecoderWeights<T>,
}

impl<T> ModelWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelWeights<U> {
        ModelWeights {
            encoder: self.encoder.map(&mut f),
            key_sam: self.key_sam.map(&mut f),
            value_sam: self.value_sam.map(&mut f),
            decoder: self.decoder.map(&mut f),
        }
    }
}

impl<T> WeightSet<T> for ModelWeights<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit(&mut |n, t| f(format!("encoder.{n}"), t));
        self.key_sam.visit(&mut |n, t| f(format!("key_sam.{n}"), t));
        self.value_sam.visit(&mut |n, t| f(format!("value_sam.{n}"), t));
        self.decoder.visit(&mut |n, t| f(format!("decoder.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.encoder.visit_mut(&mut |n, t| f(format!("encoder.{n}"), t));
        self.key_sam.visit_mut(&mut |n, t| f(format!("key_sam.{n}"), t));
        self.value_sam.visit_mut(&mut |n, t| f(format!("value_sam.{n}"), t));
        self.decoder.visit_mut(&mut |n, t| f(format!("decoder.{n}"), t));
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub weights: ModelWeights<Shared>,
    pub key_layout: SamLayout,
    pub value_layout: SamLayout,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let encoder = EncoderParams::init(&config.encoder);
        let key_sam = SamParams::init(&config.sam, config.encoder.ck, 0)?;
        let value_sam = SamParams::init(&config.sam, config.encoder.cv, 1)?;
        let decoder = DecoderParams::init(&config.decoder, config.encoder.cv);
        Ok(ModelParams {
            weights: ModelWeights {
                encoder,
                key_sam: key_sam.weights,
                value_sam: value_sam.weights,
                decoder,
            },
            key_layout: key_sam.layout,
            value_layout: value_sam.layout,
        })
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.weights.encoder
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.weights.decoder
    }

    pub fn key_sam(&self) -> SamParams {
        SamParams {
            weights: self.weights.key_sam.clone(),
            layout: self.key_layout.clone(),
        }
    }

    pub fn value_sam(&self) -> SamParams {
        SamParams {
            weights: self.weights.value_sam.clone(),
            layout: self.value_layout.clone(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelWeights<Var<'t>> {
        self.weights.map(|w| tape.leaf(Arc::clone(w)))
    }

    /// Gradients of every bound leaf, in the same layout.
    pub fn gradients(grads: &Gradients, bound: &ModelWeights<Var<'_>>) -> ModelWeights<Tensor> {
        bound.map(|v| grads.wrt(v))
    }

    pub fn sgd_step(&mut self, grads: &ModelWeights<Tensor>, lr: f64) {
        weights::sgd_step(&mut self.weights, grads, lr);
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::default();
        weights::to_archive(&self.weights, "", &mut archive);
        archive
    }

    /// Overwrites the weights with those in `archive`; shapes must match.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        weights::load_archive(&mut self.weights, "", archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        let mut params = Self::init(config)?;
        params.load_archive(&TensorArchive::load(path)?)?;
        Ok(params)
    }
}
