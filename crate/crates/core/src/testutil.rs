//! Naive loop oracles shared by the unit tests.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{finite_diff_grad, max_rel_error, FD_STEP};
use crate::ops::ConvSpec;
use crate::tensor::Tensor;

/// Largest relative error between the taped gradient of `f` and central
/// differences, over every coordinate of every input.
pub(crate) fn grad_error(
    inputs: &[Tensor],
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let numeric = finite_diff_grad(
            |probe| {
                let tape = Tape::inference();
                let vars: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.leaf(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                f(&tape, &vars).unwrap().value().item().unwrap()
            },
            &inputs[i],
            FD_STEP,
        );
        if std::env::var_os("GRAD_DEBUG").is_some() {
            eprintln!("input {i}: {}", max_rel_error(&analytic, &numeric));
            for (j, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
                if crate::gradcheck::rel_error(*a, *n) > 1e-5 {
                    eprintln!("  [{j}] analytic {a:e} numeric {n:e}");
                }
            }
        }
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    worst
}

pub(crate) fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.at(&[i, l]) * b.at(&[l, j]);
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

/// Direct sliding-window cross-correlation over a C×T×H×W input.
pub(crate) fn naive_conv(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
    let (x4, w5, temporal) = if x.rank() == 3 {
        let s = x.shape();
        let ws = w.shape();
        (
            x.reshape(&[s[0], 1, s[1], s[2]]).unwrap(),
            w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]).unwrap(),
            false,
        )
    } else {
        (x.clone(), w.clone(), true)
    };
    let [cin, tt, h, wd] = [x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]];
    let [cout, _, kt, kh, kw] = [
        w5.shape()[0],
        w5.shape()[1],
        w5.shape()[2],
        w5.shape()[3],
        w5.shape()[4],
    ];
    let d = spec.dilation as isize;
    let s = spec.stride as isize;
    let ph = (spec.dilation * (kh - 1) / 2) as isize;
    let pw = (spec.dilation * (kw - 1) / 2) as isize;
    let ho = ((h as isize + 2 * ph - d * (kh as isize - 1) - 1) / s + 1) as usize;
    let wo = ((wd as isize + 2 * pw - d * (kw as isize - 1) - 1) / s + 1) as usize;
    let to = tt - kt + 1;
    let mut out = Tensor::zeros(&[cout, to, ho, wo]);
    for co in 0..cout {
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for a in 0..kt {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let iy = oy as isize * s + b as isize * d - ph;
                                    let ix = ox as isize * s + c as isize * d - pw;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w5.at(&[co, ci, a, b, c])
                                        * x4.at(&[ci, ot + a, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    let idx = out.offset(&[co, ot, oy, ox]);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    if temporal {
        out
    } else {
        out.reshape(&[cout, ho, wo]).unwrap()
    }
}
