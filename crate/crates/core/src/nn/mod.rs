//! Minimal differentiable-network substrate: fc stacks, batch
//! normalization, leaky ReLU, softmax, dropout, Xavier initialization and
//! Adam. No autograd; each layer's backward is written out by hand and
//! verified against finite differences.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod stack;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use stack::{Layer, LayerCache, LayerGrads, LayerSpec, LayerState, Mode, Stack, StackCache, StackGrads};
pub use tensor::{Real, Tensor2};

#[cfg(test)]
mod xavier_tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    #[test]
    fn xavier_statistics_and_bounds() {
        // fan_in 40, fan_out 25: 1000 weights per init; pool many inits to
        // get ~1e5 draws.
        let mut rng = rng_from_seed(12);
        let (fan_in, fan_out) = (40usize, 25usize);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let mut all = Vec::with_capacity(100_000);
        while all.len() < 100_000 {
            let mut s: Stack<f32> =
                Stack::new(fan_in, &[LayerSpec::Fc { inp: fan_in, out: fan_out }]).unwrap();
            s.xavier_init(&mut rng);
            if let LayerState::Fc { w, b } = &s.layers[0].state {
                assert!(b.iter().all(|v| *v == 0.0));
                assert!(w.data.iter().all(|v| v.abs() <= bound));
                all.extend_from_slice(&w.data);
            }
        }
        let n = all.len() as f64;
        let mean: f64 = all.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var: f64 = all.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (fan_in + fan_out) as f64;
        assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
    }
}
