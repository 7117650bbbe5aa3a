//! Finite-difference verification of the hand-written backward passes.
//!
//! The check drives a stack with a squared-error loss against a fixed
//! target and compares analytic parameter/input gradients with central
//! differences. Stochastic layers are frozen by reseeding the generator
//! identically for every forward evaluation.

use super::stack::{Mode, Stack};
use super::tensor::{Real, Tensor2};
use crate::error::Result;
use crate::seeding::rng_from_seed;

/// 0.5 * sum((y - t)^2), the probe loss.
fn probe_loss<T: Real>(y: &Tensor2<T>, t: &Tensor2<T>) -> f64 {
    y.data
        .iter()
        .zip(&t.data)
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            0.5 * d * d
        })
        .sum()
}

fn loss_grad<T: Real>(y: &Tensor2<T>, t: &Tensor2<T>) -> Tensor2<T> {
    let mut g = y.clone();
    for (gv, tv) in g.data.iter_mut().zip(&t.data) {
        *gv = *gv - *tv;
    }
    g
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_param_rel_err: f64,
    pub max_input_rel_err: f64,
    pub params_checked: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-9 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-12)
}

/// Compare analytic gradients with central finite differences (step `h`)
/// for every trainable parameter and every input entry.
///
/// `mode` selects train or eval semantics; in train mode the generator is
/// reseeded from `seed` before each forward so dropout masks and noise are
/// identical across evaluations.
pub fn check_stack_gradients<T: Real>(
    stack: &mut Stack<T>,
    input: &Tensor2<T>,
    target: &Tensor2<T>,
    mode: Mode,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut rng = rng_from_seed(seed);
    let (y, cache) = stack.forward(input, mode, Some(&mut rng), true)?;
    let cache = cache.expect("cache requested");
    let dy = loss_grad(&y, target);
    let (grads, dinput) = stack.backward(&cache, &dy, true)?;
    let grads = grads.expect("param grads requested");
    let analytic: Vec<Vec<f64>> = Stack::grad_arrays(&grads)
        .iter()
        .map(|a| a.iter().map(|v| v.as_f64()).collect())
        .collect();

    let eval = |stack: &mut Stack<T>, x: &Tensor2<T>| -> Result<f64> {
        let mut rng = rng_from_seed(seed);
        let (y, _) = stack.forward(x, mode, Some(&mut rng), false)?;
        Ok(probe_loss(&y, target))
    };

    let mut max_param_rel = 0.0f64;
    let mut checked = 0usize;
    let num_arrays = analytic.len();
    for ai in 0..num_arrays {
        for i in 0..analytic[ai].len() {
            let orig = {
                let mut arrays = stack.param_arrays_mut();
                let v = arrays[ai][i];
                arrays[ai][i] = v + T::from_f64(h);
                v
            };
            let lp = eval(stack, input)?;
            {
                let mut arrays = stack.param_arrays_mut();
                arrays[ai][i] = orig - T::from_f64(h);
            }
            let lm = eval(stack, input)?;
            {
                let mut arrays = stack.param_arrays_mut();
                arrays[ai][i] = orig;
            }
            let fd = (lp - lm) / (2.0 * h);
            max_param_rel = max_param_rel.max(rel_err(analytic[ai][i], fd));
            checked += 1;
        }
    }

    let mut max_input_rel = 0.0f64;
    let mut x = input.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        x.data[i] = orig + T::from_f64(h);
        let lp = eval(stack, &x)?;
        x.data[i] = orig - T::from_f64(h);
        let lm = eval(stack, &x)?;
        x.data[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        max_input_rel = max_input_rel.max(rel_err(dinput.data[i].as_f64(), fd));
    }

    Ok(GradCheckReport {
        max_param_rel_err: max_param_rel,
        max_input_rel_err: max_input_rel,
        params_checked: checked,
    })
}
