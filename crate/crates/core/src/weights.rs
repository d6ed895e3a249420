//! Shared plumbing for the seeded parameter sets of the encoders, the
//! aggregation modules and the decoder.
//!
//! Every parameter set is a struct generic over its leaf type: `Arc<Tensor>`
//! for stored parameters, `Var<'t>` once bound to a tape, `Tensor` for
//! gradients. [`WeightSet`] gives them a common, stable visiting order.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorArchive};

pub type Shared = Arc<Tensor>;

pub trait WeightSet<T> {
    /// Visits every leaf in a fixed order with a stable name.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T));

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T));

    fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }
}

/// Deterministic generator for one named parameter stream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian weights with standard deviation `gain / sqrt(fan_in)`.
pub fn gaussian(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Shared {
    Arc::new(Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng))
}

pub fn to_archive<W: WeightSet<Shared>>(weights: &W, prefix: &str, archive: &mut TensorArchive) {
    weights.visit(&mut |name, t| archive.push(format!("{prefix}{name}"), (**t).clone()));
}

/// Replaces every leaf with the archive entry of the same name; shapes must
/// match the current leaves.
pub fn load_archive<W: WeightSet<Shared>>(
    weights: &mut W,
    prefix: &str,
    archive: &TensorArchive,
) -> Result<()> {
    let mut failure = None;
    weights.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match archive.require(&key) {
            Ok(stored) if stored.shape() == t.shape() => *t = Arc::new(stored.clone()),
            Ok(stored) => {
                failure = Some(Error::Format(format!(
                    "`{key}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )))
            }
            Err(e) => failure = Some(e),
        }
    });
    failure.map_or(Ok(()), Err)
}

/// One plain gradient-descent step: `w ← w − lr·g`, pairing leaves by
/// visiting order.
pub fn sgd_step<W: WeightSet<Shared>, G: WeightSet<Tensor>>(weights: &mut W, grads: &G, lr: f64) {
    let grads = grads.leaves();
    let mut i = 0;
    weights.visit_mut(&mut |_, w| {
        let g = grads[i];
        i += 1;
        if lr == 0.0 {
            return;
        }
        let mut next = (**w).clone();
        for (v, d) in next.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
        *w = Arc::new(next);
    });
}
