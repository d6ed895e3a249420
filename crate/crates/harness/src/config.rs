//! Flat `section.key = value` config file, overlaid on defaults.
//!
//! ```toml
//! encoder.ck = 64
//! memory.pattern = "sam"
//! memory.theta = 3
//! readout.topk = 40
//! ```

use std::path::Path;

use rde_core::memory::{Pattern, Strategy};
use rde_core::model::ModelConfig;
use rde_core::train::TrainConfig;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::maskio::MaskFormat;
use crate::stream::StreamConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HarnessConfig {
    pub model: ModelConfig,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub mask_format: MaskFormat,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EncoderKeys {
    seed: Option<u64>,
    ck: Option<usize>,
    cv: Option<usize>,
    widths: Option<[usize; 4]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SamKeys {
    seed: Option<u64>,
    pool: Option<usize>,
    aspp_rates: Option<Vec<usize>>,
    attention_gain: Option<f64>,
    branch_gain: Option<f64>,
    squeeze_noise: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DecoderKeys {
    seed: Option<u64>,
    hidden: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MemoryKeys {
    pattern: Option<String>,
    theta: Option<usize>,
    strategy: Option<String>,
    lambda: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReadoutKeys {
    /// 0 reads densely.
    topk: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StreamKeys {
    latency_repeats: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LossKeys {
    mu: Option<f64>,
    gamma: Option<f64>,
    bootstrap_ratio: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PerturbKeys {
    radius_max: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainKeys {
    lr: Option<f64>,
    steps: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthKeys {
    seed: Option<u64>,
    base_len: Option<usize>,
    size: Option<usize>,
    objects: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OutputKeys {
    mask_format: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Keys {
    encoder: EncoderKeys,
    sam: SamKeys,
    decoder: DecoderKeys,
    memory: MemoryKeys,
    readout: ReadoutKeys,
    stream: StreamKeys,
    loss: LossKeys,
    perturb: PerturbKeys,
    train: TrainKeys,
    synth: SynthKeys,
    output: OutputKeys,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl HarnessConfig {
    /// Defaults for toy training: 16×16 frames give 1×1 feature maps, so the
    /// aggregation module does not pool.
    pub fn for_training() -> Self {
        let mut c = HarnessConfig::default();
        c.model.sam.pool = 1;
        c.synth.height = 16;
        c.synth.width = 16;
        c
    }

    pub fn parse(text: &str, mut base: HarnessConfig) -> Result<Self> {
        let keys: Keys = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let m = &mut base.model;
        set(&mut m.encoder.seed, keys.encoder.seed);
        set(&mut m.encoder.ck, keys.encoder.ck);
        set(&mut m.encoder.cv, keys.encoder.cv);
        set(&mut m.encoder.widths, keys.encoder.widths);
        set(&mut m.sam.seed, keys.sam.seed);
        set(&mut m.sam.pool, keys.sam.pool);
        set(&mut m.sam.aspp_rates, keys.sam.aspp_rates);
        set(&mut m.sam.attention_gain, keys.sam.attention_gain);
        set(&mut m.sam.branch_gain, keys.sam.branch_gain);
        set(&mut m.sam.squeeze_noise, keys.sam.squeeze_noise);
        set(&mut m.decoder.seed, keys.decoder.seed);
        set(&mut m.decoder.hidden, keys.decoder.hidden);

        let s = &mut base.stream;
        if let Some(p) = keys.memory.pattern {
            s.pattern = p.parse::<Pattern>()?;
        }
        set(&mut s.theta, keys.memory.theta);
        if let Some(st) = keys.memory.strategy {
            s.strategy = Some(st.parse::<Strategy>()?);
        }
        set(&mut s.lambda, keys.memory.lambda);
        if let Some(k) = keys.readout.topk {
            s.topk = (k > 0).then_some(k);
        }
        set(&mut s.latency_repeats, keys.stream.latency_repeats);

        let t = &mut base.train;
        set(&mut t.loss.mu, keys.loss.mu);
        set(&mut t.loss.gamma, keys.loss.gamma);
        set(&mut t.loss.bootstrap_ratio, keys.loss.bootstrap_ratio);
        set(&mut t.perturb.radius_max, keys.perturb.radius_max);
        set(&mut t.lr, keys.train.lr);
        set(&mut t.steps, keys.train.steps);
        set(&mut t.seed, keys.train.seed);
        t.topk = s.topk;

        let v = &mut base.synth;
        set(&mut v.seed, keys.synth.seed);
        set(&mut v.base_len, keys.synth.base_len);
        set(&mut v.objects, keys.synth.objects);
        if let Some(size) = keys.synth.size {
            v.height = size;
            v.width = size;
        }
        if let Some(f) = keys.output.mask_format {
            base.mask_format = f.parse()?;
        }
        Ok(base)
    }

    pub fn load(path: &Path, base: HarnessConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
