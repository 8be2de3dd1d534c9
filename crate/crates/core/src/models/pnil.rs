//! Pixelwise noise injection.
//!
//! Per input feature `j` the layer computes a log-variance
//! `sigma_j = x_j * w_j + b_j` and resamples `x'_j = x_j + n_j * exp(sigma_j / 2)`
//! with `n_j ~ N(0, 1)`. Writing the draw as a deterministic function of the
//! external noise `n` keeps `x'` differentiable in `x`, `w` and `b`. Noise is
//! sampled in training and at inference alike.

use crate::rng::{derive_seed, Gaussian};
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

use super::Noise;

/// Stream label for noise-layer draws.
pub const PNIL_STREAM: &str = "pnil";

/// Per-feature weights and biases of the noise layer; both shaped like one
/// input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PnilParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Constant initial values for a freshly built layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnilInit {
    pub weight: f64,
    pub bias: f64,
    /// Upper clamp on `sigma / 2` before exponentiation.
    pub max_half_log_var: f64,
}

impl Default for PnilInit {
    fn default() -> Self {
        Self {
            weight: 0.0,
            bias: -3.0,
            max_half_log_var: 10.0,
        }
    }
}

/// Standard-normal draws shaped like `shape` (batch first).
pub fn standard_normal_batch<T: Scalar>(noise: Noise<'_, T>, shape: &[usize]) -> Result<Tensor<T>> {
    match noise {
        Noise::Fixed(t) => {
            if t.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "pnil noise",
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            Ok(t.clone())
        }
        Noise::PerSample { seed, ids } => {
            if ids.len() != shape[0] {
                return Err(TensorError::InvalidShape {
                    op: "pnil noise",
                    msg: format!("{} sample ids for batch of {}", ids.len(), shape[0]),
                });
            }
            let mut out = Tensor::zeros(shape);
            for (i, &id) in ids.iter().enumerate() {
                Gaussian::new(derive_seed(seed, PNIL_STREAM, id)).fill(out.sample_mut(i));
            }
            Ok(out)
        }
    }
}

/// Records the noise layer on `tape`. Returns `(x', sigma)`.
pub fn pnil_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    noise: &Tensor<T>,
    max_half_log_var: T,
) -> Result<(Var, Var)> {
    let xs = tape.value(x).shape();
    let (ws, bs) = (tape.value(weight).shape(), tape.value(bias).shape());
    if ws != bs || xs.len() != ws.len() + 1 || xs[1..] != *ws {
        return Err(TensorError::ShapeMismatch {
            op: "pnil",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let xw = tape.mul(x, weight)?;
    let sigma = tape.add(xw, bias)?;
    let half = tape.scale(sigma, T::from_f64(0.5))?;
    let half = tape.clamp_max(half, max_half_log_var)?;
    let std = tape.exp(half)?;
    let n = tape.constant(noise.clone());
    let scaled = tape.mul(std, n)?;
    let out = tape.add(x, scaled)?;
    Ok((out, sigma))
}
