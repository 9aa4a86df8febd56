//! Quantization, learned factorized entropy models and the range-coded
//! bitstream.

mod bitstream;
mod factorized;
mod range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bitstream::{decode_bitstream, encode_bitstream, Bitstream, CodingTables, QuantizedLatent, SymbolTable, MAGIC, MAX_ALPHABET, VERSION};
pub use factorized::{fit_model, init_params, FactorizedModel, FitOptions, LIKELIHOOD_FLOOR, PARAMS_PER_CHANNEL};
pub use range::{RangeDecoder, RangeEncoder, PROB_BITS, PROB_TOTAL};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Grid step for latent coordinates in `[-1, 1]`.
    pub coord_step: f64,
    /// Step for latent features after the learned per-channel scale.
    pub feature_step: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            coord_step: 2.0 / 1024.0,
            feature_step: 1.0,
        }
    }
}

/// `round(v / step)` with ties to even.
pub fn quantize(values: &[f64], step: f64) -> Vec<i64> {
    assert!(step > 0.0, "quantization step must be positive");
    values.iter().map(|v| (v / step).round_ties_even() as i64).collect()
}

pub fn dequantize(q: &[i64], step: f64) -> Vec<f64> {
    q.iter().map(|&v| v as f64 * step).collect()
}

/// Additive `U(-step/2, step/2)` noise, the training stand-in for rounding.
pub fn noise_proxy(values: &[f64], step: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = step / 2.0;
    values
        .iter()
        .map(|&v| if h > 0.0 { v + rng.gen_range(-h..h) } else { v })
        .collect()
}

/// A `rows x cols` tensor of `U(-step/2, step/2)` draws.
pub fn noise_tensor(rows: usize, cols: usize, step: f64, seed: u64) -> Tensor {
    Tensor::from_vec(rows, cols, noise_proxy(&vec![0.0; rows * cols], step, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.4], 1.0), vec![0]);
        assert_eq!(dequantize(&[0], 1.0), vec![0.0]);
        assert_eq!(quantize(&[0.74], 0.5), vec![1]);
        assert_eq!(dequantize(&[1], 0.5), vec![0.5]);
        assert_eq!(quantize(&[0.5, 1.5, 2.5, -0.5], 1.0), vec![0, 2, 2, 0]);
        let on_grid = [0.75, -1.5, 3.0];
        assert_eq!(dequantize(&quantize(&on_grid, 0.25), 0.25), on_grid.to_vec());
    }

    #[test]
    fn noise_is_centred_and_bounded() {
        let step = 0.3;
        let x = vec![1.25; 100_000];
        let y = noise_proxy(&x, step, 11);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.25).abs() <= 1e-2 * step);
        assert!(y.iter().all(|v| (v - 1.25).abs() <= step / 2.0));
        assert_eq!(noise_proxy(&x[..10], 0.0, 3), x[..10].to_vec());
    }

    proptest! {
        #[test]
        fn quantization_error_bounded(v in prop::collection::vec(-100.0f64..100.0, 1..50), step in 1e-3f64..10.0) {
            let back = dequantize(&quantize(&v, step), step);
            for (a, b) in v.iter().zip(&back) {
                prop_assert!((a - b).abs() <= step / 2.0 + 1e-12);
            }
        }
    }
}
