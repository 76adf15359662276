//! Counter-based noise streams and the stochastic-gradient perturbation models.
//!
//! A [`StreamKey`] maps directly onto a ChaCha8 keystream position: the master
//! seed keys the cipher, `(agent_id, draw_index)` selects the 64-bit stream and
//! `step` selects a 2³² word block within it. No generator state is shared, so
//! agents can be sampled in any order with identical results.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("noise model has dimension {model}, point has dimension {point}")]
    DimensionMismatch { model: usize, point: usize },
    #[error("invalid noise parameter: {0}")]
    BadParameter(String),
}

/// Address of one noise draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub agent_id: u32,
    pub step: u64,
    pub draw_index: u32,
}

impl StreamKey {
    pub fn with_draw(self, draw_index: u32) -> Self {
        Self { draw_index, ..self }
    }

    /// A generator positioned at the start of this key's block.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(((self.agent_id as u64) << 32) | self.draw_index as u64);
        rng.set_word_pos((self.step as u128) << 32);
        rng
    }
}

/// Key for `(master_seed, agent_id, step)` with draw index 0.
pub fn derive_stream(master_seed: u64, agent_id: u32, step: u64) -> StreamKey {
    StreamKey { master_seed, agent_id, step, draw_index: 0 }
}

/// SplitMix64 finalizer; decorrelates nearby integers.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Master seed of run `run_index` within an ensemble seeded by `master_seed`.
pub fn run_seed(master_seed: u64, run_index: u64) -> u64 {
    splitmix(master_seed ^ splitmix(run_index))
}

/// Rule producing `B(x)` for state-dependent noise.
pub type MatrixRule = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Distribution of the per-agent perturbation `ζ`. Steppers subtract `η·ζ`;
/// any minibatch `1/√b` factor belongs in the amplitude.
#[derive(Clone)]
pub enum NoiseModel {
    None,
    /// Independent `U(-a, a)` per coordinate.
    Uniform(f64),
    /// Independent `N(0, σ²)` per coordinate.
    Gaussian(f64),
    /// `Bξ` with `ξ` standard normal; `B` is `n × m`.
    ConstantMatrix(DMatrix<f64>),
    /// `B(x)ξ` with `B(x)` square.
    StateScaledGaussian(MatrixRule),
}

impl fmt::Debug for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "None"),
            Self::Uniform(a) => write!(f, "Uniform({a})"),
            Self::Gaussian(s) => write!(f, "Gaussian({s})"),
            Self::ConstantMatrix(b) => write!(f, "ConstantMatrix({}x{})", b.nrows(), b.ncols()),
            Self::StateScaledGaussian(_) => write!(f, "StateScaledGaussian(<rule>)"),
        }
    }
}

impl NoiseModel {
    pub fn uniform(half_width: f64) -> Result<Self, NoiseError> {
        if half_width >= 0.0 && half_width.is_finite() {
            Ok(Self::Uniform(half_width))
        } else {
            Err(NoiseError::BadParameter(format!("uniform half-width {half_width}")))
        }
    }

    pub fn gaussian(sigma: f64) -> Result<Self, NoiseError> {
        if sigma >= 0.0 && sigma.is_finite() {
            Ok(Self::Gaussian(sigma))
        } else {
            Err(NoiseError::BadParameter(format!("gaussian sigma {sigma}")))
        }
    }

    pub fn matrix(b: DMatrix<f64>) -> Result<Self, NoiseError> {
        if b.nrows() == 0 || b.iter().any(|v| !v.is_finite()) {
            return Err(NoiseError::BadParameter("matrix must be nonempty and finite".into()));
        }
        Ok(Self::ConstantMatrix(b))
    }

    /// Fixed dimension, if the model has one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::ConstantMatrix(b) => Some(b.nrows()),
            _ => None,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    /// `Tr Σ` for an `n`-dimensional draw; `None` for state-dependent noise.
    pub fn trace(&self, n: usize) -> Option<f64> {
        match self {
            Self::None => Some(0.0),
            Self::Uniform(a) => Some(n as f64 * a * a / 3.0),
            Self::Gaussian(s) => Some(n as f64 * s * s),
            Self::ConstantMatrix(b) => Some(b.iter().map(|v| v * v).sum()),
            Self::StateScaledGaussian(_) => None,
        }
    }

    /// Covariance of one draw, where it is state independent.
    pub fn covariance(&self, n: usize) -> Option<DMatrix<f64>> {
        match self {
            Self::None => Some(DMatrix::zeros(n, n)),
            Self::Uniform(a) => Some(DMatrix::identity(n, n) * (a * a / 3.0)),
            Self::Gaussian(s) => Some(DMatrix::identity(n, n) * (s * s)),
            Self::ConstantMatrix(b) => Some(b * b.transpose()),
            Self::StateScaledGaussian(_) => None,
        }
    }
}

/// Writes one draw of `ζ` at `x` into `out`.
pub fn sample_noise_into(
    model: &NoiseModel,
    x: &[f64],
    key: StreamKey,
    out: &mut [f64],
) -> Result<(), NoiseError> {
    let n = x.len();
    if out.len() != n {
        return Err(NoiseError::DimensionMismatch { model: out.len(), point: n });
    }
    if let Some(m) = model.dim() {
        if m != n {
            return Err(NoiseError::DimensionMismatch { model: m, point: n });
        }
    }
    match model {
        NoiseModel::None => out.fill(0.0),
        NoiseModel::Uniform(a) => {
            let mut rng = key.rng();
            let a = *a;
            for o in out.iter_mut() {
                *o = rng.random_range(-a..=a);
            }
        }
        NoiseModel::Gaussian(s) => {
            let mut rng = key.rng();
            for o in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *o = s * z;
            }
        }
        NoiseModel::ConstantMatrix(b) => correlated_normal(b, key, out),
        NoiseModel::StateScaledGaussian(rule) => {
            let b = rule(x);
            if b.nrows() != n {
                return Err(NoiseError::DimensionMismatch { model: b.nrows(), point: n });
            }
            correlated_normal(&b, key, out)
        }
    }
    Ok(())
}

fn correlated_normal(b: &DMatrix<f64>, key: StreamKey, out: &mut [f64]) {
    let mut rng = key.rng();
    let xi: Vec<f64> = (0..b.ncols()).map(|_| rng.sample(StandardNormal)).collect();
    for (r, o) in out.iter_mut().enumerate() {
        *o = (0..b.ncols()).map(|c| b[(r, c)] * xi[c]).sum();
    }
}

/// One draw of `ζ` at `x`.
pub fn sample_noise(model: &NoiseModel, x: &[f64], key: StreamKey) -> Result<Vec<f64>, NoiseError> {
    let mut out = vec![0.0; x.len()];
    sample_noise_into(model, x, key, &mut out)?;
    Ok(out)
}
