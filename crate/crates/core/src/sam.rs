//! Spatio-temporal aggregation module.
//!
//! `sam_forward(prev, latest) = squeeze(enhance(extract(prev, latest)))`
//! maps two `C×1×h×w` embeddings to one. `extract` is a dot-product
//! non-local block over the time-concatenated pair, with `φ` and `g` read
//! from a spatially max-pooled copy; `enhance` adds a residual pyramid of
//! dilated convolutions; `squeeze` is a `2×3×3` convolution without time
//! padding.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::Tensor;
use crate::weights::{gaussian, seeded_rng, Shared, WeightSet};

#[derive(Clone, Debug, PartialEq)]
pub struct SamConfig {
    pub seed: u64,
    /// Max-pool kernel and stride for the `φ`/`g` branch; 1 disables pooling.
    pub pool: usize,
    pub aspp_rates: Vec<usize>,
    /// Scale of the `ω` and `φ` projections.
    pub attention_gain: f64,
    /// Scale of the pyramid branches and their merge.
    pub branch_gain: f64,
    /// Spread of the squeeze kernel around a two-frame average.
    pub squeeze_noise: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            seed: 23,
            pool: 2,
            aspp_rates: vec![1, 2, 4],
            attention_gain: 0.1,
            branch_gain: 0.1,
            squeeze_noise: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SamWeights<T> {
    pub omega: T,
    pub phi: T,
    pub g: T,
    /// One `3×3` kernel per pyramid rate.
    pub aspp: Vec<T>,
    pub merge: T,
    pub squeeze: T,
}

impl<T> SamWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> SamWeights<U> {
        SamWeights {
            omega: f(&self.omega),
            phi: f(&self.phi),
            g: f(&self.g),
            aspp: self.aspp.iter().map(&mut f).collect(),
            merge: f(&self.merge),
            squeeze: f(&self.squeeze),
        }
    }
}

impl<T> WeightSet<T> for SamWeights<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("omega".into(), &self.omega);
        f("phi".into(), &self.phi);
        f("g".into(), &self.g);
        for (i, w) in self.aspp.iter().enumerate() {
            f(format!("aspp.{i}"), w);
        }
        f("merge".into(), &self.merge);
        f("squeeze".into(), &self.squeeze);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("omega".into(), &mut self.omega);
        f("phi".into(), &mut self.phi);
        f("g".into(), &mut self.g);
        for (i, w) in self.aspp.iter_mut().enumerate() {
            f(format!("aspp.{i}"), w);
        }
        f("merge".into(), &mut self.merge);
        f("squeeze".into(), &mut self.squeeze);
    }
}

/// Non-learned layout of one module instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamLayout {
    pub pool: usize,
    pub rates: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SamParams {
    pub weights: SamWeights<Shared>,
    pub layout: SamLayout,
}

impl SamParams {
    /// Seeded weights for `channels` channels; `stream` separates the key
    /// and value instances drawn from one seed.
    pub fn init(config: &SamConfig, channels: usize, stream: u64) -> Result<Self> {
        if config.pool == 0 {
            return Err(Error::Config("sam.pool must be at least 1".into()));
        }
        if config.aspp_rates.is_empty() || config.aspp_rates.contains(&0) {
            return Err(Error::Config("sam.aspp_rates must be nonempty and positive".into()));
        }
        let c = channels;
        let mut rng = seeded_rng(config.seed, stream);
        let point = [c, c, 1, 1, 1];
        let omega = gaussian(&point, c, config.attention_gain, &mut rng);
        let phi = gaussian(&point, c, config.attention_gain, &mut rng);
        let g = gaussian(&point, c, 1.0, &mut rng);
        let aspp = config
            .aspp_rates
            .iter()
            .map(|_| gaussian(&[c, c, 1, 3, 3], 9 * c, config.branch_gain, &mut rng))
            .collect();
        let merge = gaussian(
            &[c, c * config.aspp_rates.len(), 1, 1, 1],
            c * config.aspp_rates.len(),
            config.branch_gain,
            &mut rng,
        );
        let mut squeeze = (*gaussian(&[c, c, 2, 3, 3], 18 * c, config.squeeze_noise, &mut rng)).clone();
        for ch in 0..c {
            for t in 0..2 {
                let idx = squeeze.offset(&[ch, ch, t, 1, 1]);
                squeeze.data_mut()[idx] += 0.5;
            }
        }
        Ok(SamParams {
            weights: SamWeights {
                omega,
                phi,
                g,
                aspp,
                merge,
                squeeze: Arc::new(squeeze),
            },
            layout: SamLayout {
                pool: config.pool,
                rates: config.aspp_rates.clone(),
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.weights.g.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> SamWeights<Var<'t>> {
        self.weights.map(|w| tape.leaf(Arc::clone(w)))
    }

    /// Inference-only evaluation on plain tensors.
    pub fn forward(&self, prev: &Tensor, latest: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let w = self.bind(&tape);
        let out = sam_forward(
            &tape.constant(prev.clone()),
            &tape.constant(latest.clone()),
            &w,
            &self.layout,
        )?;
        Ok(out.value().clone())
    }
}

fn check_pair(prev: &Tensor, latest: &Tensor, channels: usize) -> Result<()> {
    let s = prev.shape();
    if s.len() != 4 || s[1] != 1 || s[0] != channels {
        return Err(Error::dim(format!(
            "module input must be {channels}x1xhxw, got {s:?}"
        )));
    }
    if latest.shape() != s {
        return Err(Error::dim(format!(
            "previous {s:?} and latest {:?} differ",
            latest.shape()
        )));
    }
    Ok(())
}

/// `x_agg(p) = (1/M) Σ_q ⟨ω(x)(p), φ(x↓)(q)⟩ g(x↓)(q)` over the time
/// concatenation `x` of `prev` and `latest`; `M` is the pooled position count.
pub fn extract<'t>(
    prev: &Var<'t>,
    latest: &Var<'t>,
    w: &SamWeights<Var<'t>>,
    layout: &SamLayout,
) -> Result<Var<'t>> {
    let c = w.g.shape()[0];
    check_pair(prev.value(), latest.value(), c)?;
    let x = prev.concat(latest, 1)?;
    let n: usize = x.shape()[1..].iter().product();
    let pooled = if layout.pool > 1 {
        x.maxpool2d(layout.pool, layout.pool)?
    } else {
        x.clone()
    };
    let m: usize = pooled.shape()[1..].iter().product();
    let omega = x.conv(&w.omega, ConvSpec::UNIT)?.reshape(&[c, n])?;
    let phi = pooled.conv(&w.phi, ConvSpec::UNIT)?.reshape(&[c, m])?;
    let g = pooled.conv(&w.g, ConvSpec::UNIT)?.reshape(&[c, m])?;
    let weights = phi.transpose()?.matmul(&omega)?;
    g.matmul(&weights)?
        .scale(1.0 / m as f64)
        .reshape(x.shape())
}

/// `x + merge(relu(conv_r(x)) for each rate r)`, applied per time step.
pub fn enhance<'t>(x: &Var<'t>, w: &SamWeights<Var<'t>>, layout: &SamLayout) -> Result<Var<'t>> {
    if x.shape().len() != 4 {
        return Err(Error::dim(format!("enhance needs CxTxhxw, got {:?}", x.shape())));
    }
    if w.aspp.len() != layout.rates.len() {
        return Err(Error::Config(format!(
            "{} pyramid kernels for {} rates",
            w.aspp.len(),
            layout.rates.len()
        )));
    }
    let mut stacked: Option<Var<'t>> = None;
    for (kernel, &rate) in w.aspp.iter().zip(&layout.rates) {
        let branch = x.conv(kernel, ConvSpec::dilated(rate))?.relu();
        stacked = Some(match stacked {
            None => branch,
            Some(s) => s.concat(&branch, 0)?,
        });
    }
    let stacked = stacked.expect("at least one rate");
    x.add(&stacked.conv(&w.merge, ConvSpec::UNIT)?)
}

/// Folds the two time steps into one; time length other than 2 is rejected.
pub fn squeeze<'t>(x: &Var<'t>, w: &SamWeights<Var<'t>>) -> Result<Var<'t>> {
    if x.shape().len() != 4 || x.shape()[1] != 2 {
        return Err(Error::contract(format!(
            "squeeze needs a time length of 2, got {:?}",
            x.shape()
        )));
    }
    x.conv(&w.squeeze, ConvSpec::UNIT)
}

pub fn sam_forward<'t>(
    prev: &Var<'t>,
    latest: &Var<'t>,
    w: &SamWeights<Var<'t>>,
    layout: &SamLayout,
) -> Result<Var<'t>> {
    squeeze(&enhance(&extract(prev, latest, w, layout)?, w, layout)?, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{grad_error, naive_conv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn params(c: usize, pool: usize, seed: u64) -> SamParams {
        let config = SamConfig {
            seed,
            pool,
            attention_gain: 1.0,
            branch_gain: 1.0,
            squeeze_noise: 1.0,
            ..SamConfig::default()
        };
        SamParams::init(&config, c, 0).unwrap()
    }

    fn eval(
        p: &SamParams,
        prev: &Tensor,
        latest: &Tensor,
        stage: impl for<'t> Fn(&Var<'t>, &Var<'t>, &SamWeights<Var<'t>>, &SamLayout) -> Result<Var<'t>>,
    ) -> Result<Tensor> {
        let tape = Tape::inference();
        let w = p.bind(&tape);
        let out = stage(
            &tape.constant(prev.clone()),
            &tape.constant(latest.clone()),
            &w,
            &p.layout,
        )?;
        Ok(out.value().clone())
    }

    fn naive_extract(p: &SamParams, prev: &Tensor, latest: &Tensor) -> Tensor {
        let c = p.channels();
        let (h, wd) = (prev.shape()[2], prev.shape()[3]);
        let n = 2 * h * wd;
        let x = |ch: usize, pos: usize| {
            let src = if pos < h * wd { prev } else { latest };
            src.data()[ch * h * wd + pos % (h * wd)]
        };
        let proj = |w: &Tensor, pos: usize| -> Vec<f64> {
            (0..c)
                .map(|o| (0..c).map(|i| w.data()[o * c + i] * x(i, pos)).sum())
                .collect()
        };
        let w = &p.weights;
        let mut out = Tensor::zeros(&[c, 2, h, wd]);
        for pp in 0..n {
            let om = proj(&w.omega, pp);
            for q in 0..n {
                let ph = proj(&w.phi, q);
                let gq = proj(&w.g, q);
                let dot: f64 = om.iter().zip(&ph).map(|(a, b)| a * b).sum();
                for ch in 0..c {
                    out.data_mut()[ch * n + pp] += dot * gq[ch] / n as f64;
                }
            }
        }
        out
    }

    #[test]
    fn extract_shape() {
        let p = params(3, 2, 1);
        let mut r = rng(1);
        let a = Tensor::randn(&[3, 1, 4, 4], 1.0, &mut r);
        let b = Tensor::randn(&[3, 1, 4, 4], 1.0, &mut r);
        assert_eq!(eval(&p, &a, &b, extract).unwrap().shape(), &[3, 2, 4, 4]);
    }

    #[test]
    fn extract_rejects_mismatched_inputs() {
        let p = params(3, 1, 1);
        let a = Tensor::zeros(&[3, 1, 4, 4]);
        let b = Tensor::zeros(&[3, 1, 2, 4]);
        assert!(matches!(eval(&p, &a, &b, extract), Err(Error::Dimension(_))));
    }

    #[test]
    fn extract_constant_field_closed_form() {
        let c = 4;
        let mut p = params(c, 2, 1);
        let eye = Arc::new(Tensor::from_fn(&[c, c, 1, 1, 1], |i| {
            if i / c == i % c {
                1.0
            } else {
                0.0
            }
        }));
        p.weights.omega = Arc::clone(&eye);
        p.weights.phi = Arc::clone(&eye);
        p.weights.g = eye;
        let v = 0.7;
        let a = Tensor::full(&[c, 1, 4, 4], v);
        let out = eval(&p, &a, &a, extract).unwrap();
        let expected = c as f64 * v * v * v;
        assert!(out.data().iter().all(|&x| (x - expected).abs() < 1e-12));
    }

    #[test]
    fn extract_matches_all_pairs_oracle_without_pooling() {
        for seed in 0..10 {
            let size = 2 + (seed as usize % 5);
            let p = params(3, 1, seed);
            let mut r = rng(100 + seed);
            let a = Tensor::uniform(&[3, 1, size, size], -2.0, 2.0, &mut r);
            let b = Tensor::uniform(&[3, 1, size, size], -2.0, 2.0, &mut r);
            let got = eval(&p, &a, &b, extract).unwrap();
            assert!(got.max_abs_diff(&naive_extract(&p, &a, &b)) < 1e-10);
        }
    }

    #[test]
    fn enhance_with_zero_pyramid_is_identity() {
        let mut p = params(3, 2, 2);
        for w in &mut p.weights.aspp {
            *w = Arc::new(Tensor::zeros(w.shape()));
        }
        p.weights.merge = Arc::new(Tensor::zeros(p.weights.merge.shape()));
        let x = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng(3));
        let out = eval(&p, &x, &x, |a, _, w, l| enhance(a, w, l)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn enhance_matches_naive_composition() {
        let c = 3;
        let p = params(c, 2, 4);
        let x = Tensor::uniform(&[c, 2, 6, 6], -2.0, 2.0, &mut rng(4));
        let got = eval(&p, &x, &x, |a, _, w, l| enhance(a, w, l)).unwrap();
        let mut branches = Vec::new();
        for (k, &rate) in p.weights.aspp.iter().zip(&p.layout.rates) {
            branches.push(naive_conv(&x, k, ConvSpec::dilated(rate)).map(|v| v.max(0.0)));
        }
        let stacked = Tensor::from_fn(&[3 * c, 2, 6, 6], |i| {
            let per = 2 * 36 * c;
            branches[i / per].data()[i % per]
        });
        let merged = naive_conv(&stacked, &p.weights.merge, ConvSpec::UNIT);
        let expected = Tensor::from_fn(x.shape(), |i| x.data()[i] + merged.data()[i]);
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn squeeze_shape_and_time_contract() {
        let p = params(3, 2, 5);
        for &(h, w) in &[(4, 4), (2, 6), (1, 1)] {
            let x = Tensor::randn(&[3, 2, h, w], 1.0, &mut rng(5));
            let out = eval(&p, &x, &x, |a, _, w, _| squeeze(a, w)).unwrap();
            assert_eq!(out.shape(), &[3, 1, h, w]);
        }
        let bad = Tensor::zeros(&[3, 3, 4, 4]);
        assert!(matches!(
            eval(&p, &bad, &bad, |a, _, w, _| squeeze(a, w)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn squeeze_with_averaging_kernel_on_equal_slices() {
        let c = 2;
        let mut p = params(c, 2, 6);
        let spatial = Tensor::randn(&[c, c, 3, 3], 1.0, &mut rng(6));
        p.weights.squeeze = Arc::new(Tensor::from_fn(&[c, c, 2, 3, 3], |i| {
            let (o, rest) = (i / (c * 18), i % (c * 18));
            let (ci, tap) = (rest / 18, rest % 9);
            0.5 * spatial.data()[(o * c + ci) * 9 + tap]
        }));
        let slice = Tensor::randn(&[c, 1, 4, 4], 1.0, &mut rng(7));
        let x = Tensor::from_fn(&[c, 2, 4, 4], |i| slice.data()[(i / 32) * 16 + i % 16]);
        let out = eval(&p, &x, &x, |a, _, w, _| squeeze(a, w)).unwrap();
        let expected = naive_conv(&slice.reshape(&[c, 4, 4]).unwrap(), &spatial, ConvSpec::UNIT);
        assert!(out.data().iter().zip(expected.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn squeeze_matches_naive_conv() {
        let p = params(3, 2, 8);
        let x = Tensor::uniform(&[3, 2, 5, 5], -2.0, 2.0, &mut rng(8));
        let out = eval(&p, &x, &x, |a, _, w, _| squeeze(a, w)).unwrap();
        assert!(out.max_abs_diff(&naive_conv(&x, &p.weights.squeeze, ConvSpec::UNIT)) < 1e-12);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let p = SamParams::init(&SamConfig::default(), 8, 1).unwrap();
        let q = SamParams::init(&SamConfig::default(), 8, 1).unwrap();
        let mut r = rng(9);
        let a = Tensor::randn(&[8, 1, 4, 4], 1.0, &mut r);
        let b = Tensor::randn(&[8, 1, 4, 4], 1.0, &mut r);
        let out = p.forward(&a, &b).unwrap();
        assert_eq!(out.shape(), a.shape());
        assert_eq!(out, q.forward(&a, &b).unwrap());
        assert_eq!(out, p.forward(&a, &b).unwrap());
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let p = SamParams::init(&SamConfig::default(), 16, 0).unwrap();
        for seed in 0..5 {
            let mut r = rng(seed);
            let a = Tensor::uniform(&[16, 1, 4, 4], -10.0, 10.0, &mut r);
            let b = Tensor::uniform(&[16, 1, 4, 4], -10.0, 10.0, &mut r);
            assert!(p.forward(&a, &b).unwrap().all_finite());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let p = params(2, if seed % 2 == 0 { 2 } else { 1 }, seed);
            let mut r = rng(200 + seed);
            let prev = Tensor::uniform(&[2, 1, 4, 4], -2.0, 2.0, &mut r);
            let latest = Tensor::uniform(&[2, 1, 4, 4], -2.0, 2.0, &mut r);
            let weighting = Tensor::uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut r);
            let mut inputs = vec![prev, latest];
            p.weights.visit(&mut |_, w| inputs.push((**w).clone()));
            let layout = p.layout.clone();
            let err = grad_error(&inputs, |tape, vars| {
                let w = SamWeights {
                    omega: vars[2].clone(),
                    phi: vars[3].clone(),
                    g: vars[4].clone(),
                    aspp: vars[5..8].to_vec(),
                    merge: vars[8].clone(),
                    squeeze: vars[9].clone(),
                };
                let out = sam_forward(&vars[0], &vars[1], &w, &layout)?;
                Ok(out.mul(&tape.constant(weighting.clone()))?.sum())
            });
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }
}
