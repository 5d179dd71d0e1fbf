//! Periodic uniform grids: 4th-order central differences and trigonometric
//! interpolation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{GeoError, Result};

/// Uniform periodic lattice with 1 or 2 axes. Samples are stored row-major
/// (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterGrid {
    pub counts: Vec<usize>,
    pub periods: Vec<f64>,
    /// Lower corner; sample `k` along an axis sits at `origin + (k + ½)·step`.
    #[serde(default)]
    pub origin: Vec<f64>,
}

impl ParameterGrid {
    pub fn new(counts: Vec<usize>, periods: Vec<f64>) -> Result<Self> {
        let origin = vec![0.0; counts.len()];
        Self::with_origin(counts, periods, origin)
    }

    pub fn with_origin(counts: Vec<usize>, periods: Vec<f64>, origin: Vec<f64>) -> Result<Self> {
        let g = Self { counts, periods, origin };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.counts.len();
        if !(1..=2).contains(&d) || self.periods.len() != d || self.origin.len() != d {
            return Err(GeoError::Precondition("grid needs 1 or 2 axes with matching periods".into()));
        }
        // the widest stencil (third derivative) spans 7 points
        if self.counts.iter().any(|&n| n < 7) {
            return Err(GeoError::Precondition("grid needs at least 7 points per axis".into()));
        }
        if self.periods.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(GeoError::Precondition("grid periods must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, axis: usize) -> f64 {
        self.periods[axis] / self.counts[axis] as f64
    }

    /// Quadrature weight of one cell.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.step(a)).product()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.counts).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            out[a] = k % self.counts[a];
            k /= self.counts[a];
        }
        out
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        self.multi_index(k)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + (i as f64 + 0.5) * self.step(a))
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    /// Flat index of the neighbour `offset` steps along `axis` (wrapping).
    pub fn shifted(&self, k: usize, axis: usize, offset: isize) -> usize {
        let mut m = self.multi_index(k);
        let n = self.counts[axis] as isize;
        m[axis] = (m[axis] as isize + offset).rem_euclid(n) as usize;
        self.index(&m)
    }

    /// `order`-th derivative (1..=3) of a scalar sample array along `axis`.
    pub fn derivative(&self, f: &[f64], axis: usize, order: usize) -> Vec<f64> {
        assert_eq!(f.len(), self.len());
        let (offsets, weights, denom) = stencil(order);
        let h = self.step(axis);
        let scale = 1.0 / (denom * h.powi(order as i32));
        (0..self.len())
            .map(|k| {
                offsets
                    .iter()
                    .zip(weights)
                    .map(|(&o, &w)| w * f[self.shifted(k, axis, o)])
                    .sum::<f64>()
                    * scale
            })
            .collect()
    }

    /// Mixed partial derivative: apply the 1st derivative along each listed
    /// axis in turn (repeated axes use the higher-order pure stencil).
    pub fn partial(&self, f: &[f64], axes: &[usize]) -> Vec<f64> {
        let mut counts = vec![0usize; self.dim()];
        for &a in axes {
            counts[a] += 1;
        }
        let mut out = f.to_vec();
        for (a, &c) in counts.iter().enumerate() {
            if c > 0 {
                out = self.derivative(&out, a, c);
            }
        }
        out
    }
}

/// Offsets, integer weights and common denominator of the 4th-order central
/// stencil for the given derivative order.
pub fn stencil(order: usize) -> (&'static [isize], &'static [f64], f64) {
    match order {
        1 => (&[-2, -1, 1, 2], &[1.0, -8.0, 8.0, -1.0], 12.0),
        2 => (&[-2, -1, 0, 1, 2], &[-1.0, 16.0, -30.0, 16.0, -1.0], 12.0),
        3 => (&[-3, -2, -1, 1, 2, 3], &[1.0, -8.0, 13.0, -13.0, 8.0, -1.0], 8.0),
        _ => panic!("stencil order {order} not supported"),
    }
}

/// Trigonometric interpolant of periodic samples `f_k = f(origin + (k+½)h)`.
#[derive(Debug, Clone)]
pub struct TrigInterpolant1 {
    n: usize,
    period: f64,
    origin: f64,
    /// Complex DFT coefficients `(re, im)` for wavenumbers `0..=n/2`.
    coeffs: Vec<(f64, f64)>,
}

impl TrigInterpolant1 {
    pub fn new(samples: &[f64], period: f64, origin: f64) -> Self {
        let n = samples.len();
        let h = period / n as f64;
        let coeffs = (0..=n / 2)
            .map(|m| {
                let km = m as f64;
                let mut re = 0.0;
                let mut im = 0.0;
                for (j, f) in samples.iter().enumerate() {
                    let x = (j as f64 + 0.5) * h;
                    let ph = -2.0 * PI * km * x / period;
                    re += f * ph.cos();
                    im += f * ph.sin();
                }
                (re / n as f64, im / n as f64)
            })
            .collect();
        Self { n, period, origin, coeffs }
    }

    /// Real-data form `Re Σ_{k=0}^{n/2} a_k c_k e^{ikx}` with `a_k = 2` except
    /// at `k = 0` and the Nyquist mode.
    pub fn eval(&self, x: f64) -> f64 {
        let t = x - self.origin;
        let mut acc = 0.0;
        for m in 0..=self.n / 2 {
            let (re, im) = self.coeffs[m];
            let w = if m == 0 || 2 * m == self.n { 1.0 } else { 2.0 };
            let ph = 2.0 * PI * m as f64 * t / self.period;
            acc += w * (re * ph.cos() - im * ph.sin());
        }
        acc
    }
}

/// Trigonometric interpolation of samples on a [`ParameterGrid`] (1-D or
/// tensor-product 2-D).
pub fn interpolate(grid: &ParameterGrid, samples: &[f64], x: &[f64]) -> f64 {
    match grid.dim() {
        1 => TrigInterpolant1::new(samples, grid.periods[0], grid.origin[0]).eval(x[0]),
        2 => {
            let (n0, n1) = (grid.counts[0], grid.counts[1]);
            let column: Vec<f64> = (0..n0)
                .map(|i| {
                    TrigInterpolant1::new(&samples[i * n1..(i + 1) * n1], grid.periods[1], grid.origin[1]).eval(x[1])
                })
                .collect();
            TrigInterpolant1::new(&column, grid.periods[0], grid.origin[0]).eval(x[0])
        }
        _ => unreachable!("grid dimension validated"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stencils_are_fourth_order() {
        let errs: Vec<f64> = [16usize, 32]
            .iter()
            .map(|&n| {
                let g = ParameterGrid::new(vec![n], vec![2.0 * PI]).unwrap();
                let f: Vec<f64> = g.points().iter().map(|p| p[0].sin()).collect();
                let d3 = g.derivative(&f, 0, 3);
                g.points().iter().zip(&d3).map(|(p, d)| (d + p[0].cos()).abs()).fold(0.0, f64::max)
            })
            .collect();
        let ratio = errs[0] / errs[1];
        assert!(ratio > 14.0 && ratio < 18.0, "{ratio}");
    }

    #[test]
    fn mixed_partial_on_torus() {
        let g = ParameterGrid::new(vec![64, 48], vec![2.0 * PI, 2.0 * PI]).unwrap();
        let f: Vec<f64> = g.points().iter().map(|p| p[0].sin() * (2.0 * p[1]).cos()).collect();
        let d = g.partial(&f, &[0, 1, 1]);
        for (k, p) in g.points().iter().enumerate() {
            assert!((d[k] + 4.0 * p[0].cos() * (2.0 * p[1]).cos()).abs() < 5e-4);
        }
    }

    #[test]
    fn index_round_trip_and_wrap() {
        let g = ParameterGrid::new(vec![8, 9], vec![1.0, 1.0]).unwrap();
        for k in 0..g.len() {
            assert_eq!(g.index(&g.multi_index(k)), k);
        }
        assert_eq!(g.shifted(0, 1, -1), 8);
        assert_eq!(g.shifted(0, 0, -1), 7 * 9);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        assert!(ParameterGrid::new(vec![6], vec![1.0]).is_err());
    }

    #[test]
    fn trig_interpolation_is_exact_for_band_limited_data() {
        for n in [15usize, 16] {
            let g = ParameterGrid::with_origin(vec![n], vec![3.0], vec![0.2]).unwrap();
            let f = |x: f64| 0.3 + (2.0 * PI * x / 3.0).sin() - 0.5 * (2.0 * PI * 3.0 * x / 3.0).cos();
            let s: Vec<f64> = g.points().iter().map(|p| f(p[0])).collect();
            for x in [0.0, 0.77, 1.9, 2.95] {
                assert_relative_eq!(interpolate(&g, &s, &[x]), f(x), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tensor_interpolation_in_2d() {
        let g = ParameterGrid::new(vec![12, 10], vec![2.0 * PI, 2.0 * PI]).unwrap();
        let f = |x: &[f64]| (x[0]).cos() * (2.0 * x[1]).sin() + 0.1;
        let s: Vec<f64> = g.points().iter().map(|p| f(p)).collect();
        assert_relative_eq!(interpolate(&g, &s, &[0.4, 1.3]), f(&[0.4, 1.3]), epsilon = 1e-12);
    }
}
