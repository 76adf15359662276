//! Euler–Maruyama integration of the continuous-time coupled systems.

use super::{center_of_mass, draw_noise, finish, require_gain, row, DynamicsError, EnsembleState};
use crate::objectives::Objective;
use crate::stochastic::NoiseModel;
use ndarray::Array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftKind {
    /// Agents pulled toward the center of mass.
    Qsgd,
    /// Agents pulled toward `x̃`, which obeys `dx̃ = kp(x• − x̃)dt`.
    Easgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeParams {
    pub k: f64,
    pub dt: f64,
    /// Minibatch size `b` dividing the diffusion.
    pub batch: f64,
}

/// `xⁱ ← xⁱ + (−∇f(xⁱ) + k(z − xⁱ))dt + √(ηᵢ dt / b)·ζⁱ`, where `ζⁱ` is one
/// draw of `noise` (so `Bξ` for the Gaussian variants) and `ηᵢ` is the
/// agent's learning rate.
pub fn euler_maruyama_step(
    state: &EnsembleState,
    drift: DriftKind,
    obj: &dyn Objective,
    params: &SdeParams,
    noise: &NoiseModel,
    seed: u64,
) -> Result<EnsembleState, DynamicsError> {
    let SdeParams { k, dt, batch } = *params;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::BadParameter(format!("time step {dt}")));
    }
    if !(batch >= 1.0) {
        return Err(DynamicsError::BadParameter(format!("batch size {batch}")));
    }
    require_gain(k)?;
    let (p, n) = state.positions.dim();
    let com = center_of_mass(state.positions.view());
    let target: &[f64] = match drift {
        DriftKind::Qsgd => &com,
        DriftKind::Easgd => state.quorum.as_deref().ok_or(DynamicsError::MissingQuorum)?,
    };
    let zeta = draw_noise(state, noise, seed)?;
    let mut next = Array2::zeros((p, n));
    let mut grad = vec![0.0; n];
    for i in 0..p {
        let x = state.agent(i);
        obj.gradient(x, &mut grad);
        let diffusion = (state.etas[i] * dt / batch).sqrt();
        let z = row(&zeta, i);
        let out = next.row_mut(i).into_slice().expect("fresh array is contiguous");
        for c in 0..n {
            out[c] = x[c] + (-grad[c] + k * (target[c] - x[c])) * dt + diffusion * z[c];
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Divergence { agent: Some(i), step: state.step + 1 });
        }
    }
    let quorum = match drift {
        DriftKind::Qsgd => state.quorum.clone(),
        DriftKind::Easgd => Some(
            target
                .iter()
                .zip(&com)
                .map(|(q, m)| q + k * p as f64 * (m - q) * dt)
                .collect(),
        ),
    };
    finish(state, next, None, quorum)
}
