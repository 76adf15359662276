//! Gaussian kernel density estimates of final iterates.

use super::AnalysisError;
use ndarray::ArrayView2;
use serde::Serialize;
use std::f64::consts::PI;

/// Evaluation points of the automatic grid.
pub const KDE_GRID_POINTS: usize = 512;

/// Kernel contributions beyond this many bandwidths are below 1e-14 and skipped.
const KERNEL_CUTOFF: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    /// All samples coincide: `grid` holds the single location and `density`
    /// its unit mass.
    pub spike: bool,
}

fn mean_and_std(samples: &[f64]) -> (f64, f64) {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

/// `1.06·σ̂·m^{−1/5}` with the unbiased sample deviation.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let (_, std) = mean_and_std(samples);
    1.06 * std * (samples.len() as f64).powf(-0.2)
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Density at `points` from samples sorted ascending. The sum order depends
/// only on the sorted values, so the result is invariant under permutation.
fn evaluate(sorted: &[f64], bandwidth: f64, points: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (sorted.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    let reach = KERNEL_CUTOFF * bandwidth;
    points
        .iter()
        .map(|&x| {
            let lo = sorted.partition_point(|&s| s < x - reach);
            let hi = sorted.partition_point(|&s| s <= x + reach);
            let sum: f64 = sorted[lo..hi]
                .iter()
                .map(|&s| (-0.5 * ((x - s) / bandwidth).powi(2)).exp())
                .sum();
            norm * sum
        })
        .collect()
}

fn check(samples: &[f64]) -> Result<(), AnalysisError> {
    if samples.len() < 2 {
        return Err(AnalysisError::TooFewSamples { need: 2, got: samples.len() });
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(AnalysisError::Misaligned("non-finite sample".into()));
    }
    Ok(())
}

/// Density on an automatic grid spanning the samples ± 3 bandwidths.
/// `bandwidth` defaults to Silverman's rule.
pub fn kde(samples: &[f64], bandwidth: Option<f64>) -> Result<DensityEstimate, AnalysisError> {
    check(samples)?;
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(AnalysisError::Misaligned(format!("bandwidth {h}"))),
        None => silverman_bandwidth(samples),
    };
    let s = sorted(samples);
    if h == 0.0 {
        return Ok(DensityEstimate { grid: vec![s[0]], density: vec![1.0], bandwidth: 0.0, spike: true });
    }
    let lo = s[0] - 3.0 * h;
    let hi = s[s.len() - 1] + 3.0 * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let density = evaluate(&s, h, &grid);
    Ok(DensityEstimate { grid, density, bandwidth: h, spike: false })
}

/// Density at caller-chosen points.
pub fn kde_at(samples: &[f64], bandwidth: Option<f64>, points: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    check(samples)?;
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(samples));
    if !(h > 0.0) {
        return Err(AnalysisError::Misaligned("zero bandwidth".into()));
    }
    Ok(evaluate(&sorted(samples), h, points))
}

/// One estimate per coordinate of row-wise points.
pub fn kde_marginals(
    points: ArrayView2<f64>,
    bandwidth: Option<f64>,
) -> Result<Vec<DensityEstimate>, AnalysisError> {
    points.columns().into_iter().map(|col| kde(&col.to_vec(), bandwidth)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn trapezoid(d: &DensityEstimate) -> f64 {
        d.grid
            .windows(2)
            .zip(d.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    #[test]
    fn spike_path() {
        let d = kde(&[0.0; 10], None).unwrap();
        assert!(d.spike);
        assert_eq!(d.grid, vec![0.0]);
        assert_eq!(d.density, vec![1.0]);
    }

    #[test]
    fn too_few_samples() {
        assert_eq!(kde(&[1.0], None), Err(AnalysisError::TooFewSamples { need: 2, got: 1 }));
    }

    #[test]
    fn integrates_to_one() {
        let samples: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let d = kde(&samples, None).unwrap();
        assert!((trapezoid(&d) - 1.0).abs() < 0.01);
        assert!(d.density.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn silverman_two_points() {
        // σ̂ = √2 for {0, 2}.
        let h = silverman_bandwidth(&[0.0, 2.0]);
        assert!((h - 1.06 * 2f64.sqrt() * 2f64.powf(-0.2)).abs() < 1e-15);
    }

    #[test]
    fn marginals() {
        let d = kde_marginals(array![[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]].view(), None).unwrap();
        assert!(!d[0].spike);
        assert!(d[1].spike);
    }
}
