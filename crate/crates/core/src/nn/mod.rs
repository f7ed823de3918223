//! Dense feedforward networks with explicit backpropagation.
//!
//! Everything is `f64`. Batches are row-major: one sample per row.

mod gradcheck;
mod network;
mod optim;

pub use gradcheck::{
    check_parameters, grad_check, grad_check_with, relative_error, relative_error_floored, resolution_floor, GradCheck, Probe, FD_NOISE_ULPS,
    FD_STEP, KINK_TOLERANCE, RESOLUTION_TOL,
};
pub use network::{Dense, ForwardCache, Gradients, Network};
pub use optim::{AdamHyper, AdamState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputLayer {
    pub width: usize,
    pub activation: OutputActivation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub output: OutputLayer,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: &[(usize, Activation)], output: (usize, OutputActivation)) -> Self {
        NetworkSpec {
            input_dim,
            hidden: hidden.iter().map(|&(width, activation)| HiddenLayer { width, activation }).collect(),
            output: OutputLayer { width: output.0, activation: output.1 },
        }
    }

    /// Uniform hidden stack `widths` with one activation.
    pub fn stack(input_dim: usize, widths: &[usize], activation: Activation, output: (usize, OutputActivation)) -> Self {
        let hidden: Vec<_> = widths.iter().map(|&w| (w, activation)).collect();
        Self::new(input_dim, &hidden, output)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("network input_dim must be >= 1".into()));
        }
        if self.hidden.iter().any(|h| h.width == 0) || self.output.width == 0 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for h in &self.hidden {
            dims.push((fan_in, h.width));
            fan_in = h.width;
        }
        dims.push((fan_in, self.output.width));
        dims
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            // exact Gaussian-CDF form
            Activation::Gelu => 0.5 * z * (1.0 + erf(z * INV_SQRT_2)),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + erf(z * INV_SQRT_2));
                let pdf = INV_SQRT_2PI * (-0.5 * z * z).exp();
                cdf + z * pdf
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Log-sum-exp stabilised softmax of one row, written in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_points() {
        // Phi(1) = 0.841344746068543
        assert!((Activation::Gelu.apply(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        let h = 1e-6;
        for z in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (Activation::Gelu.apply(z + h) - Activation::Gelu.apply(z - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_normalised_on_wide_logits() {
        use rand::Rng;
        let mut rng = crate::seed::rng(3);
        for _ in 0..1000 {
            let mut row: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
            softmax_in_place(&mut row);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut row = vec![0.0; 3];
        softmax_in_place(&mut row);
        assert!(row.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
