//! Memory reading and the stub decoder.
//!
//! Similarity is the negative squared distance between memory and query
//! key columns; an optional top-k filter masks all but the `k` best memory
//! positions per query column; a column softmax gives the affinity, and
//! each object's memory values are read out through it. The decoder maps
//! `[readout ‖ query value]` to one logit map per object.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::encoders::{EncoderParams, Frame, KeyMap, ObjectMask, STRIDE};
use crate::error::{Error, Result};
use crate::memory::{flatten_bank, MemoryBank};
use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;
use crate::weights::{gaussian, seeded_rng, Shared, WeightSet};

/// Column-stochastic `N_mem×N_query` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix(pub Tensor);

pub fn similarity(mem_keys: &Tensor, query_keys: &Tensor) -> Result<Tensor> {
    ops::neg_sq_dist(mem_keys, query_keys)
}

/// Keeps the `k` largest entries of every column and sets the rest to
/// `-inf`; ties favour the lower memory index.
pub fn topk_filter(s: &Tensor, k: usize) -> Result<Tensor> {
    let keep = ops::topk_columns(s, k)?;
    let data = s
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &kept)| if kept { v } else { f64::NEG_INFINITY })
        .collect();
    Tensor::new(s.shape().to_vec(), data)
}

pub fn affinity(s: &Tensor) -> Result<AffinityMatrix> {
    if s.rank() != 2 {
        return Err(Error::dim(format!("affinity needs a matrix, got {:?}", s.shape())));
    }
    Ok(AffinityMatrix(ops::softmax(s, 0)?))
}

/// `values · W`, `Cv×N_mem` to `Cv×N_query`.
pub fn readout(w: &AffinityMatrix, mem_values: &Tensor) -> Result<Tensor> {
    ops::matmul(mem_values, &w.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub seed: u64,
    pub hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { seed: 37, hidden: 32 }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderWeights<T> {
    /// `hidden×2Cv×3×3`.
    pub hidden: T,
    pub hidden_bias: T,
    /// `1×hidden×1×1`.
    pub out: T,
    pub out_bias: T,
}

pub type DecoderParams = DecoderWeights<Shared>;

impl<T> DecoderWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DecoderWeights<U> {
        DecoderWeights {
            hidden: f(&self.hidden),
            hidden_bias: f(&self.hidden_bias),
            out: f(&self.out),
            out_bias: f(&self.out_bias),
        }
    }
}

impl<T> WeightSet<T> for DecoderWeights<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("hidden".into(), &self.hidden);
        f("hidden_bias".into(), &self.hidden_bias);
        f("out".into(), &self.out);
        f("out_bias".into(), &self.out_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("hidden".into(), &mut self.hidden);
        f("hidden_bias".into(), &mut self.hidden_bias);
        f("out".into(), &mut self.out);
        f("out_bias".into(), &mut self.out_bias);
    }
}

impl DecoderParams {
    pub fn init(config: &DecoderConfig, cv: usize) -> Self {
        let mut rng = seeded_rng(config.seed, 0);
        let h = config.hidden;
        DecoderWeights {
            hidden: gaussian(&[h, 2 * cv, 3, 3], 2 * cv * 9, 2f64.sqrt(), &mut rng),
            hidden_bias: Arc::new(Tensor::zeros(&[h])),
            out: gaussian(&[1, h, 1, 1], h, 1.0, &mut rng),
            out_bias: Arc::new(Tensor::zeros(&[1])),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> DecoderWeights<Var<'t>> {
        self.map(|w| tape.leaf(Arc::clone(w)))
    }

    /// Full-resolution `H×W` logits for one object.
    pub fn decode(&self, readout: &Tensor, query_value: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let w = self.bind(&tape);
        let out = decode(&tape.constant(readout.clone()), &tape.constant(query_value.clone()), &w)?;
        Ok(out.value().clone())
    }
}

/// Object readouts (`Cv×h×w` each) for the query key `Ck×h×w`. `topk` is
/// clamped to the number of memory positions; `None` reads densely.
pub fn read_memory<'t>(
    mem_keys: &Var<'t>,
    mem_values: &[Var<'t>],
    query_key: &Var<'t>,
    topk: Option<usize>,
) -> Result<Vec<Var<'t>>> {
    let qs = query_key.shape().to_vec();
    if qs.len() != 3 {
        return Err(Error::dim(format!("query key must be Ckxhxw, got {qs:?}")));
    }
    let nq = qs[1] * qs[2];
    let query = query_key.reshape(&[qs[0], nq])?;
    let mut s = mem_keys.neg_sq_dist(&query)?;
    let n_mem = s.shape()[0];
    if let Some(k) = topk {
        let k = k.min(n_mem);
        if k < n_mem {
            let keep = ops::topk_columns(s.value(), k)?;
            s = s.mask_neg_inf(Arc::new(keep))?;
        }
    }
    let w = s.softmax(0)?;
    mem_values
        .iter()
        .map(|v| {
            let cv = v.shape()[0];
            v.matmul(&w)?.reshape(&[cv, qs[1], qs[2]])
        })
        .collect()
}

pub fn decode<'t>(
    readout: &Var<'t>,
    query_value: &Var<'t>,
    w: &DecoderWeights<Var<'t>>,
) -> Result<Var<'t>> {
    if readout.shape() != query_value.shape() || readout.shape().len() != 3 {
        return Err(Error::dim(format!(
            "decoder inputs {:?} and {:?} must match as Cvxhxw",
            readout.shape(),
            query_value.shape()
        )));
    }
    let (h, wd) = (readout.shape()[1], readout.shape()[2]);
    readout
        .concat(query_value, 0)?
        .conv(&w.hidden, ConvSpec::UNIT)?
        .add_channel_bias(&w.hidden_bias)?
        .relu()
        .conv(&w.out, ConvSpec::UNIT)?
        .add_channel_bias(&w.out_bias)?
        .upsample_nearest(STRIDE)?
        .reshape(&[h * STRIDE, wd * STRIDE])
}

/// Stacks a zero background map under the object logits: `(N+1)×H×W`.
pub fn class_logits<'t>(objects: &[Var<'t>]) -> Result<Var<'t>> {
    let first = objects
        .first()
        .ok_or_else(|| Error::contract("no object logits"))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let mut out = first.tape().constant(Tensor::zeros(&[1, h, w]));
    for o in objects {
        out = out.concat(&o.reshape(&[1, h, w])?, 0)?;
    }
    Ok(out)
}

/// Per-pixel argmax over `(N+1)×H×W` class logits; on ties the lower id wins.
pub fn labels_from_logits(logits: &Tensor) -> Result<ObjectMask> {
    let s = logits.shape();
    if s.len() != 3 || s[0] < 2 {
        return Err(Error::dim(format!("class logits must be (N+1)xHxW, got {s:?}")));
    }
    let hw = s[1] * s[2];
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..s[0] {
                if logits.data()[c * hw + p] > logits.data()[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    ObjectMask::new(s[1], s[2], s[0] - 1, labels)
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: ObjectMask,
    /// `(N+1)×H×W`, background first.
    pub logits: Tensor,
    /// Per-object memory readouts, `Cv×h×w`.
    pub readouts: Vec<Tensor>,
    pub key: KeyMap,
    pub query_value: Tensor,
}

/// Segments one frame against `bank`.
pub fn segment_frame(
    bank: &MemoryBank,
    frame: &Frame,
    encoder: &EncoderParams,
    decoder: &DecoderParams,
    topk: Option<usize>,
) -> Result<Segmentation> {
    let flat = flatten_bank(bank)?;
    let (key, query_value) = encoder.encode_image(frame)?;
    let tape = Tape::inference();
    let w = decoder.bind(&tape);
    let mem_keys = tape.constant(flat.keys);
    let mem_values: Vec<Var<'_>> = flat.values.into_iter().map(|v| tape.constant(v)).collect();
    let qv = tape.constant(query_value.clone());
    let readouts = read_memory(&mem_keys, &mem_values, &tape.constant(key.0.clone()), topk)?;
    let object_logits = readouts
        .iter()
        .map(|r| decode(r, &qv, &w))
        .collect::<Result<Vec<_>>>()?;
    let logits = class_logits(&object_logits)?.value().clone();
    Ok(Segmentation {
        mask: labels_from_logits(&logits)?,
        logits,
        readouts: readouts.iter().map(|r| r.value().clone()).collect(),
        key,
        query_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::memory::{MemorySlot, Origin, Pattern};
    use crate::testutil::{grad_error, naive_matmul};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn naive_similarity(m: &Tensor, q: &Tensor) -> Tensor {
        let (c, nm, nq) = (m.shape()[0], m.shape()[1], q.shape()[1]);
        Tensor::from_fn(&[nm, nq], |i| {
            let (p, j) = (i / nq, i % nq);
            -(0..c).map(|ch| (m.at(&[ch, p]) - q.at(&[ch, j])).powi(2)).sum::<f64>()
        })
    }

    #[test]
    fn similarity_hand_cases_and_oracle() {
        let m = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let q = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(similarity(&m, &q).unwrap().data(), &[-2.0]);
        assert_eq!(similarity(&m, &m).unwrap().data(), &[0.0]);
        for seed in 0..10 {
            let mut r = rng(seed);
            let m = Tensor::randn(&[64, 20], 1.0, &mut r);
            let q = Tensor::randn(&[64, 12], 1.0, &mut r);
            assert!(similarity(&m, &q).unwrap().max_abs_diff(&naive_similarity(&m, &q)) < 1e-9);
        }
    }

    #[test]
    fn topk_cases() {
        let s = Tensor::new(vec![3, 1], vec![3.0, 1.0, 2.0]).unwrap();
        let one = topk_filter(&s, 1).unwrap();
        assert_eq!(one.data()[0], 3.0);
        assert!(one.data()[1..].iter().all(|v| *v == f64::NEG_INFINITY));
        assert_eq!(topk_filter(&s, 3).unwrap(), s);
        assert!(matches!(topk_filter(&s, 0), Err(Error::Domain(_))));
        assert!(matches!(topk_filter(&s, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn affinity_cases() {
        let uniform = affinity(&Tensor::full(&[4, 2], 1.5)).unwrap();
        assert!(uniform.0.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = Tensor::new(vec![2, 1], vec![f64::NEG_INFINITY, -3.0]).unwrap();
        assert_eq!(affinity(&s).unwrap().0.data(), &[0.0, 1.0]);
        let dead = Tensor::full(&[2, 1], f64::NEG_INFINITY);
        assert!(matches!(affinity(&dead), Err(Error::Contract(_))));
        let w = affinity(&Tensor::randn(&[9, 7], 3.0, &mut rng(1))).unwrap();
        for j in 0..7 {
            let sum: f64 = (0..9).map(|i| w.0.at(&[i, j])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn readout_cases() {
        let mut r = rng(2);
        let values = Tensor::randn(&[5, 4], 1.0, &mut r);
        let onehot = AffinityMatrix(Tensor::new(vec![4, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let picked = readout(&onehot, &values).unwrap();
        for ch in 0..5 {
            assert_eq!(picked.at(&[ch, 0]), values.at(&[ch, 2]));
        }
        let mean = readout(&AffinityMatrix(Tensor::full(&[4, 1], 0.25)), &values).unwrap();
        for ch in 0..5 {
            let m: f64 = (0..4).map(|p| values.at(&[ch, p])).sum::<f64>() / 4.0;
            assert!((mean.at(&[ch, 0]) - m).abs() < 1e-15);
        }
        let w = affinity(&Tensor::randn(&[4, 6], 1.0, &mut r)).unwrap();
        assert!(readout(&w, &values).unwrap().max_abs_diff(&naive_matmul(&values, &w.0)) < 1e-10);
        let constant = readout(&w, &Tensor::full(&[5, 4], 2.5)).unwrap();
        assert!(constant.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn readout_is_linear_in_values() {
        let mut r = rng(3);
        let w = affinity(&Tensor::randn(&[6, 3], 1.0, &mut r)).unwrap();
        let v1 = Tensor::randn(&[4, 6], 1.0, &mut r);
        let v2 = Tensor::randn(&[4, 6], 1.0, &mut r);
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::from_fn(&[4, 6], |i| a * v1.data()[i] + b * v2.data()[i]);
        let lhs = readout(&w, &mixed).unwrap();
        let (r1, r2) = (readout(&w, &v1).unwrap(), readout(&w, &v2).unwrap());
        let rhs = Tensor::from_fn(&[4, 3], |i| a * r1.data()[i] + b * r2.data()[i]);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    fn read(keys: &Tensor, values: &Tensor, query: &Tensor, topk: Option<usize>) -> Tensor {
        let tape = Tape::inference();
        let out = read_memory(
            &tape.constant(keys.clone()),
            &[tape.constant(values.clone())],
            &tape.constant(query.clone()),
            topk,
        )
        .unwrap();
        out[0].value().clone()
    }

    #[test]
    fn full_topk_equals_dense_pipeline() {
        let mut r = rng(4);
        let keys = Tensor::randn(&[8, 12], 1.0, &mut r);
        let values = Tensor::randn(&[5, 12], 1.0, &mut r);
        let query = Tensor::randn(&[8, 2, 3], 1.0, &mut r);
        let dense = read(&keys, &values, &query, None);
        assert_eq!(read(&keys, &values, &query, Some(12)), dense);
        assert_eq!(read(&keys, &values, &query, Some(40)), dense);
        let s = similarity(&keys, &query.reshape(&[8, 6]).unwrap()).unwrap();
        let manual = readout(&affinity(&topk_filter(&s, 12).unwrap()).unwrap(), &values).unwrap();
        assert_eq!(manual.data(), dense.data());
        assert_ne!(read(&keys, &values, &query, Some(3)), dense);
    }

    #[test]
    fn labels_follow_argmax() {
        let fg = Tensor::from_fn(&[2, 4, 4], |i| if i < 16 { 0.0 } else { 0.3 });
        assert!(labels_from_logits(&fg).unwrap().labels().iter().all(|&l| l == 1));
        let bg = Tensor::from_fn(&[3, 4, 4], |i| if i < 16 { 0.0 } else { -0.1 });
        assert!(labels_from_logits(&bg).unwrap().labels().iter().all(|&l| l == 0));
        let tie = Tensor::from_fn(&[3, 1, 1], |i| [0.0, 1.0, 1.0][i]);
        assert_eq!(labels_from_logits(&tie).unwrap().labels(), &[1]);
    }

    #[test]
    fn decode_shape_and_determinism() {
        let dec = DecoderParams::init(&DecoderConfig::default(), 16);
        let mut r = rng(5);
        let a = Tensor::randn(&[16, 2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[16, 2, 3], 1.0, &mut r);
        let out = dec.decode(&a, &b).unwrap();
        assert_eq!(out.shape(), &[32, 48]);
        assert_eq!(out, DecoderParams::init(&DecoderConfig::default(), 16).decode(&a, &b).unwrap());
        assert!(matches!(
            dec.decode(&a, &Tensor::zeros(&[16, 2, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        for seed in 0..20 {
            let config = DecoderConfig { seed, hidden: 4 };
            let dec = DecoderParams::init(&config, 3);
            let mut r = rng(300 + seed);
            let mut inputs = vec![
                Tensor::uniform(&[3, 2, 2], -2.0, 2.0, &mut r),
                Tensor::uniform(&[3, 2, 2], -2.0, 2.0, &mut r),
            ];
            dec.visit(&mut |_, w| inputs.push((**w).clone()));
            inputs[3] = Tensor::uniform(&[4], -0.5, 0.5, &mut r);
            let weighting = Tensor::uniform(&[32, 32], -1.0, 1.0, &mut r);
            let err = grad_error(&inputs, |tape, v| {
                let w = DecoderWeights {
                    hidden: v[2].clone(),
                    hidden_bias: v[3].clone(),
                    out: v[4].clone(),
                    out_bias: v[5].clone(),
                };
                Ok(decode(&v[0], &v[1], &w)?.mul(&tape.constant(weighting.clone()))?.sum())
            });
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn read_memory_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut r = rng(400 + seed);
            let inputs = vec![
                Tensor::uniform(&[3, 8], -2.0, 2.0, &mut r),
                Tensor::uniform(&[4, 8], -2.0, 2.0, &mut r),
                Tensor::uniform(&[3, 2, 2], -2.0, 2.0, &mut r),
            ];
            let weighting = Tensor::uniform(&[4, 2, 2], -1.0, 1.0, &mut r);
            let topk = if seed % 2 == 0 { Some(3) } else { None };
            let err = grad_error(&inputs, |tape, v| {
                let out = read_memory(&v[0], &[v[1].clone()], &v[2], topk)?;
                Ok(out[0].mul(&tape.constant(weighting.clone()))?.sum())
            });
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    fn small_models() -> (EncoderParams, DecoderParams) {
        let enc = EncoderParams::init(&EncoderConfig {
            ck: 8,
            cv: 16,
            ..EncoderConfig::default()
        });
        let dec = DecoderParams::init(&DecoderConfig::default(), 16);
        (enc, dec)
    }

    fn frame(seed: u64) -> Frame {
        Frame::new(Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng(seed)), seed as usize).unwrap()
    }

    fn mask() -> ObjectMask {
        let labels = (0..32 * 32)
            .map(|i| if (i / 32) < 12 && (i % 32) < 12 { 1 } else if i % 32 > 24 { 2 } else { 0 })
            .collect();
        ObjectMask::new(32, 32, 2, labels).unwrap()
    }

    #[test]
    fn segmentation_is_invariant_to_slot_order() {
        let (enc, dec) = small_models();
        let slots: Vec<MemorySlot> = (0..3)
            .map(|i| {
                let (k, v) = enc.encode_mask(&frame(10 + i), &mask()).unwrap();
                MemorySlot::new(k, v, Origin::Historical, i as usize).unwrap()
            })
            .collect();
        let bank = MemoryBank::from_slots(Pattern::Stm, 1, slots.clone()).unwrap();
        let reversed = MemoryBank::from_slots(Pattern::Stm, 1, slots.into_iter().rev().collect()).unwrap();
        let query = frame(20);
        let a = segment_frame(&bank, &query, &enc, &dec, None).unwrap();
        let b = segment_frame(&reversed, &query, &enc, &dec, Some(12)).unwrap();
        assert_eq!(a.mask, b.mask);
        assert!(a.logits.max_abs_diff(&b.logits) < 1e-9);
        assert_eq!(a.logits.shape(), &[3, 32, 32]);
        assert_eq!(a.readouts.len(), 2);
        assert_eq!(a.readouts[0].shape(), &[16, 2, 2]);
    }

    #[test]
    fn segmenting_needs_memory() {
        let (enc, dec) = small_models();
        let empty = MemoryBank::new(Pattern::Sam, 3).unwrap();
        assert!(matches!(
            segment_frame(&empty, &frame(1), &enc, &dec, Some(40)),
            Err(Error::Contract(_))
        ));
    }
}
