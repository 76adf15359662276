//! Closed-form synchronization, distortion and convergence bounds.
//!
//! Every function validates its preconditions and returns
//! [`BoundError::Precondition`] outside its domain of validity.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("{bound}: {reason}")]
    Precondition { bound: &'static str, reason: String },
}

fn fail<T>(bound: &'static str, reason: impl Into<String>) -> Result<T, BoundError> {
    Err(BoundError::Precondition { bound, reason: reason.into() })
}

/// Parameters shared by the bounds; every field must be nonnegative. A
/// negative curvature estimate (`−λ_min` of a convex loss) enters as
/// `lambda_bar = 0`, which keeps every bound valid but no longer tight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundInputs {
    pub p: usize,
    pub n: usize,
    /// Minibatch size.
    pub b: f64,
    pub eta: f64,
    /// Upper bound on the noise covariance trace.
    pub c: f64,
    /// Upper bound on the Hessian eigenvalues of each `−(∇f)_j`.
    pub q: f64,
    pub k: f64,
    /// Largest eigenvalue of `−∇²f`.
    pub lambda_bar: f64,
    /// Strong-convexity modulus.
    pub lambda_strong: f64,
    pub k1: f64,
    pub k2: f64,
    pub mu: f64,
    pub delta_metric: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            p: 1,
            n: 1,
            b: 1.0,
            eta: 0.0,
            c: 0.0,
            q: 0.0,
            k: 0.0,
            lambda_bar: 0.0,
            lambda_strong: 0.0,
            k1: 0.0,
            k2: 0.0,
            mu: 0.0,
            delta_metric: 0.0,
        }
    }
}

impl BoundInputs {
    fn validate(&self, bound: &'static str) -> Result<(), BoundError> {
        if self.p == 0 {
            return fail(bound, "need at least one agent");
        }
        if !(self.b >= 1.0) {
            return fail(bound, format!("batch size {} < 1", self.b));
        }
        let named = [
            ("eta", self.eta),
            ("C", self.c),
            ("Q", self.q),
            ("k", self.k),
            ("lambda", self.lambda_strong),
            ("lambda_bar", self.lambda_bar),
            ("k1", self.k1),
            ("k2", self.k2),
            ("mu", self.mu),
            ("delta", self.delta_metric),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(bound, format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    fn sync_margin(&self, bound: &'static str) -> Result<f64, BoundError> {
        self.validate(bound)?;
        let margin = self.k - self.lambda_bar;
        if margin > 0.0 {
            Ok(margin)
        } else {
            fail(bound, format!("coupling k = {} does not exceed lambda_bar = {}", self.k, self.lambda_bar))
        }
    }
}

/// Expected post-transient `Σᵢ‖xⁱ − x•‖²` bound: `(p−1)Cη / (2b(k−λ̄))`.
pub fn sync_bound(inputs: &BoundInputs) -> Result<f64, BoundError> {
    let margin = inputs.sync_margin("sync_bound")?;
    let p = inputs.p as f64;
    Ok((p - 1.0) * inputs.c * inputs.eta / (2.0 * inputs.b * margin))
}

/// Synchronization bound with per-agent rates: `C/(2pb(k−λ̄))·Σ_{i<j}(ηᵢ+ηⱼ)`.
pub fn sync_bound_multi_lr(inputs: &BoundInputs, etas: &[f64]) -> Result<f64, BoundError> {
    let margin = inputs.sync_margin("sync_bound_multi_lr")?;
    if etas.len() != inputs.p {
        return fail("sync_bound_multi_lr", format!("{} rates for {} agents", etas.len(), inputs.p));
    }
    if etas.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return fail("sync_bound_multi_lr", "rates must be finite and nonnegative");
    }
    // Σ_{i<j}(ηᵢ + ηⱼ) = (p−1)Σηᵢ: each rate appears in p−1 pairs.
    let p = inputs.p as f64;
    let pair_sum = (p - 1.0) * etas.iter().sum::<f64>();
    Ok(inputs.c / (2.0 * p * inputs.b * margin) * pair_sum)
}

/// Bound on `E‖ε‖`: `(p−1)√n·Q·C·η / (4p·b·rate)`.
pub fn eps_bound(inputs: &BoundInputs, rate: f64) -> Result<f64, BoundError> {
    inputs.validate("eps_bound")?;
    if !(rate > 0.0) {
        return fail("eps_bound", format!("contraction rate {rate} must be positive"));
    }
    let p = inputs.p as f64;
    let n = inputs.n as f64;
    Ok((p - 1.0) * n.sqrt() * inputs.q * inputs.c * inputs.eta / (4.0 * p * inputs.b * rate))
}

/// Bound on `E‖x• − x*‖` for QSGD on a `λ`-strongly convex loss.
pub fn qsgd_conv_bound(inputs: &BoundInputs) -> Result<f64, BoundError> {
    inputs.validate("qsgd_conv_bound")?;
    let lambda = inputs.lambda_strong;
    if !(lambda > 0.0) {
        return fail("qsgd_conv_bound", "strong-convexity modulus must be positive");
    }
    let BoundInputs { b, eta, c, q, k, .. } = *inputs;
    let p = inputs.p as f64;
    let n = inputs.n as f64;
    let distortion = q * (p - 1.0) * c * n.sqrt() * eta / (4.0 * p * b * lambda * (lambda + k));
    let diffusion = (eta * c / (2.0 * b * p * lambda)).sqrt();
    Ok(distortion + diffusion)
}

/// Lower bound on the contraction rate of the synchronized EASGD system.
pub fn easgd_rate(lambda_strong: f64, k: f64, p: usize) -> Result<f64, BoundError> {
    if !(lambda_strong > 0.0 && k > 0.0 && p >= 1) || !lambda_strong.is_finite() || !k.is_finite() {
        return fail("easgd_rate", "requires lambda > 0, k > 0, p >= 1");
    }
    let p = p as f64;
    let half_sum = (lambda_strong + k + k * p) / 2.0;
    let half_diff = (lambda_strong + k - k * p) / 2.0;
    Ok(half_sum - (half_diff * half_diff + k * k * p).sqrt())
}

/// Bound on `E‖x• − x*‖` for EASGD given the metric-weighted noise constant
/// `C(p)` and a contraction rate `γ`.
pub fn easgd_conv_bound(inputs: &BoundInputs, c_p: f64, gamma: f64) -> Result<f64, BoundError> {
    inputs.validate("easgd_conv_bound")?;
    if !(gamma > 0.0) {
        return fail("easgd_conv_bound", format!("rate {gamma} must be positive"));
    }
    if !(c_p >= 0.0 && c_p.is_finite()) {
        return fail("easgd_conv_bound", format!("noise constant {c_p} must be nonnegative"));
    }
    let BoundInputs { b, eta, q, k, lambda_strong, .. } = *inputs;
    let p = inputs.p as f64;
    let n = inputs.n as f64;
    let distortion =
        q * (p - 1.0) * c_p * n.sqrt() * eta / (4.0 * b * p.sqrt() * gamma * (lambda_strong + k));
    let diffusion = (eta * c_p / (2.0 * b * p * gamma)).sqrt();
    Ok(distortion + diffusion)
}

/// Result of the momentum synchronization lemma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentumSync {
    /// Whether the position gain clears the sufficient condition.
    pub threshold_ok: bool,
    pub xi: f64,
}

/// Synchronization rate for QSGD with momentum coupled through position
/// (`k1`) and velocity (`k2`), with damping lower bound `mu_inf`.
pub fn momentum_sync_rate(
    k1: f64,
    k2: f64,
    mu_inf: f64,
    lambda_strong: f64,
    lambda_smooth: f64,
) -> Result<MomentumSync, BoundError> {
    let args = [k1, k2, mu_inf, lambda_strong, lambda_smooth];
    if args.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return fail("momentum_sync_rate", "arguments must be finite and nonnegative");
    }
    let damping = mu_inf + k2;
    if damping == 0.0 {
        return fail("momentum_sync_rate", "mu_inf + k2 must be positive");
    }
    let spread = (1.0 - lambda_smooth).powi(2).max((1.0 - lambda_strong).powi(2));
    let half_diff = (k1 - damping) / 2.0;
    Ok(MomentumSync {
        threshold_ok: k1 > spread / (4.0 * damping),
        xi: (k1 + damping) / 2.0 - (half_diff * half_diff + spread / 4.0).sqrt(),
    })
}

/// Metric shape for the momentum convergence analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricParams {
    pub delta: f64,
    pub a: f64,
    /// Smallest eigenvalue of the metric.
    pub psi: f64,
    /// Largest eigenvalue of the metric.
    pub psi_max: f64,
}

/// Default backoff of `δ` below its limiting value.
pub const DEFAULT_DELTA_BACKOFF: f64 = 1e-3;

/// Smallest admissible damping `2√(λ + L − 2√(λL))`.
pub fn momentum_damping_threshold(lambda_strong: f64, lambda_smooth: f64) -> f64 {
    2.0 * (lambda_strong + lambda_smooth - 2.0 * (lambda_strong * lambda_smooth).sqrt())
        .max(0.0)
        .sqrt()
}

/// Chooses `δ(μ)` (backed off by `alpha`) and derives the metric.
pub fn momentum_metric_params(
    mu: f64,
    lambda_strong: f64,
    lambda_smooth: f64,
    alpha: f64,
) -> Result<MetricParams, BoundError> {
    const NAME: &str = "momentum_metric_params";
    if !(lambda_strong > 0.0 && lambda_smooth >= lambda_strong) {
        return fail(NAME, "requires 0 < lambda <= L");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return fail(NAME, format!("backoff {alpha} outside (0, 1)"));
    }
    let threshold = momentum_damping_threshold(lambda_strong, lambda_smooth);
    if !(mu > threshold) {
        return fail(NAME, format!("damping {mu} not above threshold {threshold}"));
    }
    let gap = 2.0 * (lambda_strong * lambda_smooth).sqrt() - (lambda_strong + lambda_smooth);
    let disc = mu * mu + 4.0 * gap;
    let delta = ((disc.max(0.0).sqrt() + mu) / (2.0 * mu) - alpha)
        .clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    metric_params_with_delta(mu, delta, lambda_strong, lambda_smooth)
}

/// Metric for an explicitly chosen `δ ∈ (0, 1)`.
pub fn metric_params_with_delta(
    mu: f64,
    delta: f64,
    lambda_strong: f64,
    lambda_smooth: f64,
) -> Result<MetricParams, BoundError> {
    const NAME: &str = "momentum_metric_params";
    if !(delta > 0.0 && delta < 1.0) {
        return fail(NAME, format!("delta {delta} outside (0, 1)"));
    }
    let a_sq = 0.5 * (lambda_strong + lambda_smooth + 2.0 * (delta - 1.0) * delta * mu * mu);
    if !(a_sq > 0.0) {
        return fail(NAME, "metric scale a is not real");
    }
    let trace = 1.0 + a_sq + delta * delta * mu * mu;
    let root = (trace * trace - 4.0 * a_sq).max(0.0).sqrt();
    Ok(MetricParams {
        delta,
        a: a_sq.sqrt(),
        psi: 0.5 * (trace - root),
        psi_max: 0.5 * (trace + root),
    })
}

/// Lower bound on the contraction rate of the synchronized heavy-ball system.
pub fn momentum_contraction_rate(
    mu: f64,
    delta: f64,
    lambda_strong: f64,
    lambda_smooth: f64,
) -> Result<f64, BoundError> {
    const NAME: &str = "momentum_contraction_rate";
    if !(mu > 0.0 && delta > 0.0 && delta < 1.0) {
        return fail(NAME, "requires mu > 0 and delta in (0, 1)");
    }
    let denom = lambda_strong + lambda_smooth + 2.0 * (delta - 1.0) * delta * mu * mu;
    if !(denom > 0.0) {
        return fail(NAME, "inner square root is not real");
    }
    let fast = delta * mu;
    let slow = (1.0 - delta) * mu;
    let coupling = 0.25 * ((lambda_smooth - lambda_strong).powi(2) / (2.0 * denom));
    Ok((fast + slow) / 2.0 - (((fast - slow) / 2.0).powi(2) + coupling).sqrt())
}

/// Bound on `E‖x• − x*‖` for QSGD with momentum.
pub fn momentum_conv_bound(
    inputs: &BoundInputs,
    kappa: f64,
    xi: f64,
    psi: f64,
    psi_max: f64,
) -> Result<f64, BoundError> {
    const NAME: &str = "momentum_conv_bound";
    inputs.validate(NAME)?;
    if !(kappa > 0.0 && xi > 0.0 && psi > 0.0 && psi_max >= psi) {
        return fail(NAME, "rates and metric eigenvalues must be positive");
    }
    let BoundInputs { b, eta, c, q, .. } = *inputs;
    let p = inputs.p as f64;
    let n = inputs.n as f64;
    let distortion =
        q * psi_max.sqrt() * (p - 1.0) * c * n.sqrt() * eta / (psi.sqrt() * 4.0 * b * p * kappa * xi);
    let diffusion = (eta * c / (2.0 * b * p * psi * kappa)).sqrt();
    Ok(distortion + diffusion)
}

/// Synchronization rate under state-dependent gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SdSyncRate {
    pub rate: f64,
    /// False when the rate is nonpositive and no synchronization is implied.
    pub guaranteed: bool,
}

pub fn sd_sync_rate(inf_gain_sum: f64, sup_lambda_bar: f64) -> SdSyncRate {
    let rate = inf_gain_sum - sup_lambda_bar;
    SdSyncRate { rate, guaranteed: rate > 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base() -> BoundInputs {
        BoundInputs { p: 4, c: 1.0, eta: 0.1, k: 2.0, lambda_bar: 1.0, ..Default::default() }
    }

    #[test]
    fn sync_examples() {
        assert_relative_eq!(sync_bound(&base()).unwrap(), 0.15, epsilon = 1e-15);
        assert_eq!(sync_bound(&BoundInputs { p: 1, ..base() }).unwrap(), 0.0);
        let wide = BoundInputs { k: 3.0, ..base() };
        assert_relative_eq!(sync_bound(&wide).unwrap(), 0.075, epsilon = 1e-15);
        assert!(sync_bound(&BoundInputs { k: 1.0, ..base() }).is_err());
        assert!(sync_bound(&BoundInputs { lambda_bar: -1.0, ..base() }).is_err());
    }

    #[test]
    fn multi_lr_examples() {
        let inputs = BoundInputs { p: 2, k: 2.0, ..base() };
        assert_relative_eq!(sync_bound_multi_lr(&inputs, &[0.1, 0.3]).unwrap(), 0.1, epsilon = 1e-15);
        let equal = sync_bound_multi_lr(&base(), &[0.1; 4]).unwrap();
        assert_relative_eq!(equal, sync_bound(&base()).unwrap(), epsilon = 1e-15);
        assert!(sync_bound_multi_lr(&base(), &[0.1; 3]).is_err());
    }

    #[test]
    fn eps_examples() {
        let inputs = BoundInputs { p: 2, q: 1.0, ..base() };
        assert_relative_eq!(eps_bound(&inputs, 1.0).unwrap(), 0.0125, epsilon = 1e-15);
        assert_eq!(eps_bound(&BoundInputs { p: 1, q: 1.0, ..base() }, 1.0).unwrap(), 0.0);
        assert!(eps_bound(&inputs, 0.0).is_err());
    }

    #[test]
    fn qsgd_conv_example() {
        let inputs = BoundInputs {
            p: 2,
            q: 1.0,
            c: 1.0,
            eta: 0.1,
            lambda_strong: 1.0,
            k: 1.0,
            ..Default::default()
        };
        let expected = 0.00625 + (0.1f64 / 4.0).sqrt();
        assert_relative_eq!(qsgd_conv_bound(&inputs).unwrap(), expected, epsilon = 1e-15);
        assert_relative_eq!(qsgd_conv_bound(&inputs).unwrap(), 0.16436, epsilon = 1e-5);
        assert!(qsgd_conv_bound(&BoundInputs { lambda_strong: 0.0, ..inputs }).is_err());
    }

    #[test]
    fn easgd_examples() {
        assert_relative_eq!(easgd_rate(1.0, 1.0, 1).unwrap(), 1.5 - 1.25f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(easgd_rate(1.0, 1.0, 1).unwrap(), 0.38197, epsilon = 1e-5);
        assert!(easgd_rate(0.0, 1.0, 1).is_err());
        let inputs = BoundInputs {
            p: 4,
            q: 1.0,
            n: 1,
            eta: 0.1,
            lambda_strong: 1.0,
            k: 1.0,
            ..Default::default()
        };
        // 1·3·2·1·0.1 / (4·1·2·0.3·2) + √(0.1·2 / (2·1·4·0.3))
        let expected = 0.125 + (0.2f64 / 2.4).sqrt();
        assert_relative_eq!(easgd_conv_bound(&inputs, 2.0, 0.3).unwrap(), expected, epsilon = 1e-15);
        assert!(easgd_conv_bound(&inputs, 2.0, 0.0).is_err());
    }

    #[test]
    fn momentum_sync_examples() {
        let r = momentum_sync_rate(2.0, 0.0, 2.0, 1.0, 1.0).unwrap();
        assert!(r.threshold_ok);
        assert_eq!(r.xi, 2.0);
        // λ = 0 gives (1 − λ)² = 1.
        let r = momentum_sync_rate(2.0, 0.0, 2.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(r.xi, 1.5, epsilon = 1e-15);
        assert!(momentum_sync_rate(1.0, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metric_params_with_delta(1.0, 0.5, 1.0, 1.0).unwrap();
        assert_relative_eq!(m.a, 0.75f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(m.psi * m.psi_max, 0.75, epsilon = 1e-14);
        let m = momentum_metric_params(3.0, 1.0, 4.0, DEFAULT_DELTA_BACKOFF).unwrap();
        assert!(m.delta > 0.5 && m.delta < 1.0);
        assert!(momentum_metric_params(1.0, 1.0, 4.0, 1e-3).is_err());
        assert!(momentum_metric_params(3.0, 1.0, 4.0, 0.0).is_err());
    }

    #[test]
    fn contraction_examples() {
        // δ = 1/2, λ = 1, L = 2, μ = 2: 1 − √(1/8).
        let kappa = momentum_contraction_rate(2.0, 0.5, 1.0, 2.0).unwrap();
        assert_relative_eq!(kappa, 1.0 - 0.125f64.sqrt(), epsilon = 1e-15);
        let kappa = momentum_contraction_rate(2.0, 0.8, 1.5, 1.5).unwrap();
        assert_relative_eq!(kappa, 0.4, epsilon = 1e-14);
        assert!(momentum_contraction_rate(10.0, 0.5, 1.0, 2.0).is_err());
    }

    #[test]
    fn momentum_conv_example() {
        let inputs = BoundInputs {
            p: 2,
            q: 1.0,
            c: 1.0,
            eta: 0.1,
            ..Default::default()
        };
        // 1·√4·1·1·1·0.1 / (√1·4·1·2·0.5·2) + √(0.1 / (2·1·2·1·0.5))
        let expected = 0.2 / 8.0 + 0.05f64.sqrt();
        let got = momentum_conv_bound(&inputs, 0.5, 2.0, 1.0, 4.0).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-15);
        assert!(momentum_conv_bound(&inputs, 0.0, 2.0, 1.0, 4.0).is_err());
    }

    #[test]
    fn sd_rate() {
        assert_eq!(sd_sync_rate(2.0, 3.0), SdSyncRate { rate: -1.0, guaranteed: false });
        assert!(sd_sync_rate(3.0, 1.0).guaranteed);
    }
}
