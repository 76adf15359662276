//! Property tests for the invariants that hold for every input, not just the
//! worked examples in the unit tests.

use ndarray::Array2;
use proptest::prelude::*;
use quorum_core::analysis::{epsilon_distortion, kde_at, smoothed_loss, sync_measure};
use quorum_core::bounds::{easgd_rate, eps_bound, qsgd_conv_bound, sync_bound, BoundInputs};
use quorum_core::dynamics::{
    apply_easgd, apply_qsgd, apply_qsgd_momentum, apply_sd_qsgd, apply_sgd, draw_noise, step_qsgd,
    wta_gains, CouplingSchedule, EnsembleState,
};
use quorum_core::harness::SimulationConfig;
use quorum_core::objectives::{
    double_well_value, finite_difference_gradient, nd_loss_value, DoubleWell, NdLoss, Objective,
    Quadratic,
};
use quorum_core::stochastic::{derive_stream, sample_noise, NoiseModel};
use std::path::Path;

fn positions(p: usize, n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, p * n)
        .prop_map(move |v| Array2::from_shape_vec((p, n), v).unwrap())
}

fn ensemble() -> impl Strategy<Value = Array2<f64>> {
    (1usize..12, 1usize..4).prop_flat_map(|(p, n)| positions(p, n))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gradients_match_finite_differences(x in prop::collection::vec(-3.0..3.0f64, 3)) {
        let objectives: [Box<dyn Objective>; 3] = [
            Box::new(DoubleWell::new(150.0).unwrap()),
            Box::new(NdLoss::new(3, 150.0).unwrap()),
            Box::new(Quadratic::diagonal(&[0.5, 2.0, 7.0]).unwrap()),
        ];
        for obj in &objectives {
            let x = &x[..obj.dim()];
            let analytic = obj.gradient_vec(x);
            let numeric = finite_difference_gradient(obj.as_ref(), x);
            for (a, b) in analytic.iter().zip(&numeric) {
                prop_assert!(rel_err(*a, *b) <= 1e-6, "{a} vs {b}");
            }
        }
    }

    /// In one dimension the pair sums collapse to squares of the same three
    /// bases the double well uses linearly.
    #[test]
    fn nd_loss_one_dimensional_relation(x in -3.0..3.0f64, scale in 1.0..500.0f64) {
        let fast = (20.0 * x).sin();
        let cos = (10.0 * std::f64::consts::E * x / 3.0).cos();
        let slow = (2.0 * std::f64::consts::PI * x).sin();
        let correction = 0.4 * (3.0 * fast * (fast - 1.0) + cos * (cos - 1.0) - 3.5 * slow * (slow - 1.0));
        let lhs = nd_loss_value(&[x], scale) - double_well_value(x, scale);
        prop_assert!((lhs - correction / scale).abs() <= 1e-12);
    }

    #[test]
    fn pairwise_sync_identity(x in ensemble()) {
        let p = x.nrows();
        let mut pairs = 0.0;
        for i in 0..p {
            for j in (i + 1)..p {
                pairs += (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum();
            }
        }
        let s = sync_measure(x.view());
        prop_assert!(s >= 0.0);
        prop_assert!((p as f64 * s - pairs).abs() <= 1e-12 * pairs.max(1.0));
    }

    #[test]
    fn distortion_vanishes_on_quadratics(x in positions(6, 3), d in prop::collection::vec(0.1..10.0f64, 3)) {
        let q = Quadratic::diagonal(&d).unwrap();
        for e in epsilon_distortion(&q, x.view()) {
            prop_assert!(e.abs() <= 1e-12);
        }
    }

    #[test]
    fn kde_is_permutation_invariant(samples in prop::collection::vec(-5.0..5.0f64, 2..60), seed in any::<u64>()) {
        let mut shuffled = samples.clone();
        // Deterministic Fisher–Yates driven by the generated seed.
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let points: Vec<f64> = (0..50).map(|i| -6.0 + 0.25 * i as f64).collect();
        let a = kde_at(&samples, None, &points).unwrap();
        let b = kde_at(&shuffled, None, &points).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!(*u >= 0.0);
            prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn bounds_nonnegative_and_monotone(
        p in 1usize..64,
        c in 0.01..10.0f64,
        eta in 1e-4..0.5f64,
        b in 1.0..64.0f64,
        lambda_bar in 0.0..5.0f64,
        margin in 0.01..10.0f64,
        q in 0.0..5.0f64,
        lambda in 0.01..5.0f64,
    ) {
        let base = BoundInputs {
            p, n: 2, b, eta, c, q, k: lambda_bar + margin, lambda_bar, lambda_strong: lambda,
            ..Default::default()
        };
        let sync = sync_bound(&base).unwrap();
        let conv = qsgd_conv_bound(&base).unwrap();
        let eps = eps_bound(&base, margin).unwrap();
        prop_assert!(sync >= 0.0 && conv >= 0.0 && eps >= 0.0);

        let more_k = BoundInputs { k: base.k * 1.5, ..base.clone() };
        prop_assert!(sync_bound(&more_k).unwrap() <= sync);
        prop_assert!(qsgd_conv_bound(&more_k).unwrap() <= conv);
        let more_b = BoundInputs { b: b * 2.0, ..base.clone() };
        prop_assert!(sync_bound(&more_b).unwrap() <= sync);
        prop_assert!(qsgd_conv_bound(&more_b).unwrap() <= conv);
        let more_eta = BoundInputs { eta: eta * 2.0, ..base.clone() };
        prop_assert!(sync_bound(&more_eta).unwrap() >= sync);
        prop_assert!(qsgd_conv_bound(&more_eta).unwrap() >= conv);
        let more_c = BoundInputs { c: c * 2.0, ..base.clone() };
        prop_assert!(sync_bound(&more_c).unwrap() >= sync);
        prop_assert!(qsgd_conv_bound(&more_c).unwrap() >= conv);
        let more_q = BoundInputs { q: q + 1.0, ..base.clone() };
        prop_assert!(qsgd_conv_bound(&more_q).unwrap() >= conv);
    }

    #[test]
    fn easgd_rate_below_strong_convexity(lambda in 0.01..5.0f64, k in 0.01..10.0f64, p in 1usize..128) {
        let r = easgd_rate(lambda, k, p).unwrap();
        prop_assert!(r > 0.0 && r < lambda);
    }

    #[test]
    fn uncoupled_single_agent_bound_is_sgd_deviation(c in 0.01..10.0f64, eta in 1e-4..0.5f64, lambda in 0.01..5.0f64) {
        let inputs = BoundInputs { p: 1, n: 3, b: 1.0, eta, c, q: 2.0, k: 0.0, lambda_strong: lambda, ..Default::default() };
        let expected = (eta * c / (2.0 * lambda)).sqrt();
        prop_assert!(rel_err(qsgd_conv_bound(&inputs).unwrap(), expected) <= 1e-14);
    }

    #[test]
    fn wta_gains_sum_to_boosted_then_relaxed_total(
        k in 0.1..10.0f64, boost in 1.0..20.0f64, tau in 1.0..100.0f64, p in 1usize..32, frac in 0.0..1.0f64,
    ) {
        let spike = 4.0 * tau;
        let leader = p / 2;
        let start: f64 = wta_gains(0.0, leader, k, boost, tau, spike, p).unwrap().iter().sum();
        let end: f64 = wta_gains(spike, leader, k, boost, tau, spike, p).unwrap().iter().sum();
        prop_assert!(rel_err(start, boost * k) <= 1e-12);
        prop_assert!(rel_err(end, k) <= 1e-12);
        for g in wta_gains(frac * spike, leader, k, boost, tau, spike, p).unwrap() {
            prop_assert!(g >= 0.0);
        }
    }

    /// Averaging the QSGD updates cancels the coupling exactly.
    #[test]
    fn center_of_mass_update(x in positions(7, 2), k in 0.0..5.0f64, eta in 1e-3..0.2f64, seed in any::<u64>()) {
        let obj = NdLoss::new(2, 150.0).unwrap();
        let state = EnsembleState::uniform(x, eta).unwrap();
        let zeta = draw_noise(&state, &NoiseModel::uniform(1.5).unwrap(), seed).unwrap();
        let next = apply_qsgd(&state, &obj, k, &zeta).unwrap();
        let p = state.agents() as f64;
        let com = state.center_of_mass();
        let new_com = next.center_of_mass();
        for c in 0..2 {
            let grad_mean: f64 = (0..state.agents()).map(|i| obj.gradient_vec(state.agent(i))[c]).sum::<f64>() / p;
            let noise_mean = zeta.column(c).sum() / p;
            let expected = com[c] - eta * grad_mean - eta * noise_mean;
            prop_assert!((new_com[c] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_agent_qsgd_is_sgd(x in positions(1, 2), k in 0.0..10.0f64, seed in any::<u64>()) {
        let obj = NdLoss::new(2, 150.0).unwrap();
        let state = EnsembleState::uniform(x, 0.1).unwrap();
        let zeta = draw_noise(&state, &NoiseModel::gaussian(1.0).unwrap(), seed).unwrap();
        let q = apply_qsgd(&state, &obj, k, &zeta).unwrap();
        let s = apply_sgd(&state, &obj, &zeta).unwrap();
        prop_assert_eq!(q.positions, s.positions);
    }

    #[test]
    fn sd_qsgd_constant_schedule_is_qsgd(x in positions(5, 1), k in 0.0..5.0f64, seed in any::<u64>()) {
        let obj = DoubleWell::new(150.0).unwrap();
        let state = EnsembleState::uniform(x, 0.1).unwrap();
        let zeta = draw_noise(&state, &NoiseModel::uniform(1.5).unwrap(), seed).unwrap();
        let mut schedule = CouplingSchedule::Constant(k);
        let sd = apply_sd_qsgd(&state, &obj, &mut schedule, None, &zeta, &[0.0; 5]).unwrap();
        let q = apply_qsgd(&state, &obj, k, &zeta).unwrap();
        prop_assert_eq!(sd.positions, q.positions);
    }

    /// Relabelling agents (with their noise) relabels every stepper's output.
    #[test]
    fn steppers_are_permutation_equivariant(x in positions(6, 2), k in 0.0..3.0f64, seed in any::<u64>(), shift in 1usize..6) {
        let obj = NdLoss::new(2, 150.0).unwrap();
        let p = x.nrows();
        let perm: Vec<usize> = (0..p).map(|i| (i + shift) % p).collect();
        let permute = |m: &Array2<f64>| Array2::from_shape_fn(m.raw_dim(), |(i, c)| m[(perm[i], c)]);
        let state = EnsembleState::uniform(x.clone(), 0.05).unwrap();
        let zeta = draw_noise(&state, &NoiseModel::uniform(1.5).unwrap(), seed).unwrap();
        let permuted = EnsembleState::uniform(permute(&x), 0.05).unwrap();
        let pzeta = permute(&zeta);

        let a = apply_qsgd(&state, &obj, k, &zeta).unwrap();
        let b = apply_qsgd(&permuted, &obj, k, &pzeta).unwrap();
        prop_assert!(max_abs_diff(&permute(&a.positions), &b.positions) <= 1e-12);

        let m = state.clone().with_velocities();
        let pm = permuted.clone().with_velocities();
        let a = apply_qsgd_momentum(&m, &obj, k, 0.9, &zeta).unwrap();
        let b = apply_qsgd_momentum(&pm, &obj, k, 0.9, &pzeta).unwrap();
        prop_assert!(max_abs_diff(&permute(&a.positions), &b.positions) <= 1e-12);

        let e = state.clone().with_quorum_at_mean();
        let pe = permuted.clone().with_quorum_at_mean();
        let a = apply_easgd(&e, &obj, k, &zeta).unwrap();
        let b = apply_easgd(&pe, &obj, k, &pzeta).unwrap();
        prop_assert!(max_abs_diff(&permute(&a.positions), &b.positions) <= 1e-12);
        let (qa, qb) = (a.quorum.unwrap(), b.quorum.unwrap());
        for (u, v) in qa.iter().zip(&qb) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn noise_keys_are_deterministic(seed in any::<u64>(), agent in 0u32..1000, step in 0u64..1_000_000) {
        let key = derive_stream(seed, agent, step);
        let model = NoiseModel::gaussian(2.0).unwrap();
        let x = [0.0; 4];
        prop_assert_eq!(sample_noise(&model, &x, key).unwrap(), sample_noise(&model, &x, key).unwrap());
        prop_assert_ne!(
            sample_noise(&model, &x, key).unwrap(),
            sample_noise(&model, &x, derive_stream(seed, agent, step + 1)).unwrap()
        );
    }

    #[test]
    fn config_round_trip(
        agents in 1usize..500,
        iterations in 1u64..100_000,
        eta in 1e-4..1.0f64,
        k in 0.0..20.0f64,
        half_width in 0.1..3.0f64,
        seed in any::<u64>(),
        runs in 1usize..300,
        stride in 1u64..1000,
    ) {
        let text = format!(
            "algorithm = \"qsgd\"\nagents = {agents}\niterations = {iterations}\neta = {eta:?}\nk = {k:?}\n\
             seed = {seed}\nruns = {runs}\nrecord_stride = {stride}\n\
             objective = {{ kind = \"double_well\", scale = 150.0 }}\n\
             noise = {{ kind = \"uniform\", half_width = {half_width:?} }}\n\
             init = {{ kind = \"uniform\", lo = -3.0, hi = 3.0 }}\n"
        );
        let parsed = SimulationConfig::from_toml(&text, Path::new(".")).unwrap();
        let again = SimulationConfig::from_toml(&parsed.to_toml(), Path::new(".")).unwrap();
        prop_assert_eq!(&parsed.to_toml(), &again.to_toml());
        prop_assert_eq!(parsed.hash(), again.hash());
        prop_assert_eq!(parsed, again);
    }
}

#[test]
fn distortion_nonzero_on_double_well_with_distinct_agents() {
    let obj = DoubleWell::new(150.0).unwrap();
    let x = Array2::from_shape_vec((3, 1), vec![-1.0, 0.3, 1.7]).unwrap();
    assert!(epsilon_distortion(&obj, x.view())[0].abs() > 1e-6);
}

#[test]
fn noise_is_mean_zero() {
    const DRAWS: u64 = 1_000_000;
    let models = [
        NoiseModel::uniform(1.5).unwrap(),
        NoiseModel::gaussian(0.7).unwrap(),
        NoiseModel::matrix(nalgebra::DMatrix::from_row_slice(1, 1, &[1.3])).unwrap(),
    ];
    for model in &models {
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for step in 0..DRAWS {
            let z = sample_noise(model, &[0.0], derive_stream(3, 0, step)).unwrap()[0];
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / DRAWS as f64;
        let se = ((sum_sq / DRAWS as f64 - mean * mean) / DRAWS as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se, "{model:?}: mean {mean}, se {se}");
    }
}

#[test]
fn matrix_noise_covariance() {
    let b = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 0.8]);
    let target = &b * b.transpose();
    let model = NoiseModel::matrix(b).unwrap();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(2, 2);
    const DRAWS: u64 = 100_000;
    for step in 0..DRAWS {
        let z = nalgebra::DVector::from_vec(sample_noise(&model, &[0.0, 0.0], derive_stream(4, 0, step)).unwrap());
        cov += &z * z.transpose();
    }
    cov /= DRAWS as f64;
    assert!((&cov - &target).norm() <= 0.05 * target.norm());
}

#[test]
fn smoothed_loss_error_shrinks_as_inverse_root() {
    let obj = DoubleWell::new(150.0).unwrap();
    let noise = NoiseModel::uniform(1.5).unwrap();
    let ns = [100usize, 1000, 10_000];
    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| smoothed_loss(&obj, &noise, 0.15, &[0.4], n, derive_stream(5, 0, 0)).unwrap().std_error)
        .collect();
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 3.0, ly.iter().sum::<f64>() / 3.0);
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}

/// Noise off, quadratic, coupling above the curvature constant: the spread
/// decays monotonically at the continuous-time rate.
#[test]
fn noiseless_sync_decay_rate() {
    let h = 1.5;
    let (k, eta, steps) = (2.0, 1e-3, 2000u64);
    let obj = Quadratic::diagonal(&[h]).unwrap();
    let x = Array2::from_shape_vec((4, 1), vec![-2.0, -0.5, 1.0, 2.5]).unwrap();
    let mut state = EnsembleState::uniform(x, eta).unwrap();
    let initial = sync_measure(state.positions.view());
    let mut last = initial;
    for _ in 0..steps {
        state = step_qsgd(&state, &obj, k, &NoiseModel::None, 0).unwrap();
        let s = sync_measure(state.positions.view());
        assert!(s < last);
        last = s;
    }
    let observed = (last / initial).ln() / steps as f64;
    let predicted = -2.0 * (k + h) * eta;
    assert!((observed / predicted - 1.0).abs() <= 0.2, "{observed} vs {predicted}");
}
