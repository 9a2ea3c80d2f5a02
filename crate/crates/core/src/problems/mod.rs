//! Concrete bilevel problems.

pub mod dataset;
pub mod hypercleaning;
pub mod logistic;
pub mod quadratic;

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::oracle::{Sample, Stream};
use crate::scalar::Scalar;

/// Per-stream standard deviations of additive Gaussian gradient noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevels {
    #[serde(default)]
    pub upper: f64,
    #[serde(default)]
    pub lower: f64,
    #[serde(default)]
    pub ls: f64,
}

impl NoiseLevels {
    pub fn uniform(sigma: f64) -> Self {
        Self {
            upper: sigma,
            lower: sigma,
            ls: sigma,
        }
    }

    pub fn sigma(&self, stream: Stream) -> f64 {
        match stream {
            Stream::UpperXi => self.upper,
            Stream::LowerZeta => self.lower,
            Stream::LsPsi => self.ls,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.upper, self.lower, self.ls]
            .iter()
            .all(|s| s.is_finite() && *s >= 0.0)
    }
}

/// Noise component tags; each objective/variable pair gets its own draw.
#[derive(Debug, Clone, Copy)]
pub(crate) enum NoiseSlot {
    Fx = 1,
    Fy = 2,
    Gx = 3,
    Gy = 4,
}

/// Additive noise vector for `slot` under `sample`, or `None` when noiseless.
///
/// The same vector is added to the gradient at every point, and its inner
/// product with the variable is added to the sampled objective value, so
/// sampled values and gradients stay consistent.
pub(crate) fn additive_noise<T: Scalar>(
    noise: &NoiseLevels,
    sample: Sample,
    slot: NoiseSlot,
    dim: usize,
) -> Option<Vec<T>> {
    let Sample::Key(key) = sample else {
        return None;
    };
    let sigma = noise.sigma(key.stream);
    if sigma == 0.0 {
        return None;
    }
    let mut rng = key.rng(slot as u64);
    Some(linalg::scale(T::lit(sigma), &linalg::standard_normal(&mut rng, dim)))
}

pub(crate) fn with_noise<T: Scalar>(grad: Vec<T>, noise: Option<Vec<T>>) -> Vec<T> {
    match noise {
        Some(n) => linalg::add(&grad, &n),
        None => grad,
    }
}

/// Numerically stable `log(1 + e^z)`.
pub(crate) fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `σ'(z) = σ(z)(1 − σ(z))`
pub(crate) fn sigmoid_prime<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() - s)
}
