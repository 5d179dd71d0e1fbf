//! Convergence-order estimation by least squares on log–log data.

use serde::Serialize;

use crate::error::{GeoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SlopeFit {
    /// Every error sat below the noise floor: the check is exact.
    Exact,
    Fitted { slope: f64, intercept: f64, used: usize },
}

impl SlopeFit {
    pub fn slope(&self) -> Option<f64> {
        match self {
            SlopeFit::Exact => None,
            SlopeFit::Fitted { slope, .. } => Some(*slope),
        }
    }

    /// True if exact, or the fitted slope is at least `min`.
    pub fn at_least(&self, min: f64) -> bool {
        self.slope().is_none_or(|s| s >= min)
    }

    /// True if the fitted slope lies in `target ± tol`. An exact result does
    /// not satisfy a two-sided bound.
    pub fn within(&self, target: f64, tol: f64) -> bool {
        self.slope().is_some_and(|s| (s - target).abs() <= tol)
    }

    pub fn describe(&self) -> String {
        match self {
            SlopeFit::Exact => "exact".to_string(),
            SlopeFit::Fitted { slope, used, .. } => format!("{slope:.3} ({used} scales)"),
        }
    }
}

/// Least-squares slope of `ln(error)` against `ln(scale)`, ignoring points
/// whose error is below `floor`.
///
/// Returns `Exact` when every error is below the floor and
/// `InsufficientSignal` when fewer than three points survive otherwise.
pub fn fit_slope(scales: &[f64], errors: &[f64], floor: f64) -> Result<SlopeFit> {
    assert_eq!(scales.len(), errors.len());
    let pts: Vec<(f64, f64)> = scales
        .iter()
        .zip(errors)
        .filter(|(s, e)| **s > 0.0 && e.is_finite() && **e > floor)
        .map(|(s, e)| (s.ln(), e.ln()))
        .collect();
    if pts.is_empty() && errors.iter().all(|e| e.is_finite()) {
        return Ok(SlopeFit::Exact);
    }
    if pts.len() < 3 {
        return Err(GeoError::InsufficientSignal { usable: pts.len() });
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(SlopeFit::Fitted { slope, intercept: my - slope * mx, used: pts.len() })
}

/// Dyadic scales `start, start/2, …` (`count` of them).
pub fn dyadic(start: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| start / f64::powi(2.0, k as i32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recovers_power_law() {
        let s = dyadic(0.2, 4);
        let e: Vec<f64> = s.iter().map(|x| 3.0 * x.powi(4)).collect();
        let f = fit_slope(&s, &e, 1e-14).unwrap();
        assert!((f.slope().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn all_below_floor_is_exact() {
        let s = dyadic(0.2, 4);
        assert_eq!(fit_slope(&s, &[0.0, 1e-16, 0.0, 0.0], 1e-12).unwrap(), SlopeFit::Exact);
    }

    #[test]
    fn too_few_points_is_insufficient_signal() {
        let s = dyadic(0.2, 4);
        let r = fit_slope(&s, &[1e-3, 1e-5, 1e-13, 1e-14], 1e-12);
        assert_eq!(r, Err(GeoError::InsufficientSignal { usable: 2 }));
    }

    proptest! {
        #[test]
        fn slope_is_invariant_to_prefactor(p in 0.5f64..6.0, c in 1e-3f64..1e3) {
            let s = dyadic(0.3, 5);
            let e: Vec<f64> = s.iter().map(|x| c * x.powf(p)).collect();
            let f = fit_slope(&s, &e, 0.0).unwrap();
            prop_assert!((f.slope().unwrap() - p).abs() < 1e-9);
        }
    }
}
