//! Immersions `X: P → S` sampled on a periodic parameter grid.
//!
//! Non-periodic directions (lines, planes, graphs, coordinates that wind
//! around a periodic ambient axis) are handled with lattice offsets:
//! `X(σ + period·e_α) = X(σ) + T_α`. Grid derivatives act on the periodic
//! remainder `X(σ) − Σ_α T_α σ_α / period_α`.

use std::f64::consts::PI;

use crate::error::{GeoError, Result};
use crate::field::FourierField;
use crate::grid::{interpolate, ParameterGrid};
use crate::manifold::ManifoldSpec;

#[derive(Debug, Clone)]
pub struct Immersion {
    name: String,
    ambient: ManifoldSpec,
    grid: ParameterGrid,
    samples: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    normalization: f64,
    multiplicity: f64,
}

impl Immersion {
    /// Samples `f` at the grid points. `offsets[α]` is the jump `T_α`.
    pub fn from_fn(
        name: impl Into<String>,
        ambient: ManifoldSpec,
        grid: ParameterGrid,
        offsets: Vec<Vec<f64>>,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let samples = grid.points().iter().map(|p| f(p)).collect();
        Self::from_samples(name, ambient, grid, offsets, samples)
    }

    pub fn from_samples(
        name: impl Into<String>,
        ambient: ManifoldSpec,
        grid: ParameterGrid,
        offsets: Vec<Vec<f64>>,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        grid.validate()?;
        let dd = ambient.dim();
        if dd <= grid.dim() {
            return Err(GeoError::Precondition(format!(
                "ambient dimension {dd} must exceed parameter dimension {}",
                grid.dim()
            )));
        }
        if samples.len() != grid.len() || samples.iter().any(|s| s.len() != dd) {
            return Err(GeoError::Precondition("sample array does not match grid and ambient dimension".into()));
        }
        if offsets.len() != grid.dim() || offsets.iter().any(|o| o.len() != dd) {
            return Err(GeoError::Precondition("one offset vector per parameter axis is required".into()));
        }
        if samples.iter().flatten().any(|c| !c.is_finite()) {
            return Err(GeoError::NonFinite("immersion samples"));
        }
        Ok(Self { name: name.into(), ambient, grid, samples, offsets, normalization: 1.0, multiplicity: 1.0 })
    }

    /// The constant 𝒩 (units of length^d).
    pub fn with_normalization(mut self, n: f64) -> Self {
        assert!(n > 0.0 && n.is_finite(), "normalization must be positive");
        self.normalization = n;
        self
    }

    /// Number of times the grid covers the image (quadrature weights are divided by it).
    pub fn with_multiplicity(mut self, m: f64) -> Self {
        self.multiplicity = m;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ambient(&self) -> &ManifoldSpec {
        &self.ambient
    }

    pub fn grid(&self) -> &ParameterGrid {
        &self.grid
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn offsets(&self) -> &[Vec<f64>] {
        &self.offsets
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn multiplicity(&self) -> f64 {
        self.multiplicity
    }

    /// Intrinsic dimension `d`.
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Ambient dimension `D`.
    pub fn ambient_dim(&self) -> usize {
        self.ambient.dim()
    }

    /// Quadrature weight of one grid cell.
    pub fn weight(&self) -> f64 {
        self.grid.cell_volume() / self.multiplicity
    }

    fn linear_part(&self, sigma: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim()];
        for (a, t) in self.offsets.iter().enumerate() {
            let s = (sigma[a] - self.grid.origin[a]) / self.grid.periods[a];
            for (o, ti) in out.iter_mut().zip(t) {
                *o += ti * s;
            }
        }
        out
    }

    fn periodic_component(&self, mu: usize) -> Vec<f64> {
        self.grid
            .points()
            .iter()
            .zip(&self.samples)
            .map(|(p, x)| x[mu] - self.linear_part(p)[mu])
            .collect()
    }

    /// Grid derivative `∂_{axes} X^μ` for every `μ`, as `[point][μ]`.
    pub fn derivative(&self, axes: &[usize]) -> Vec<Vec<f64>> {
        assert!(!axes.is_empty() && axes.len() <= 3);
        let dd = self.ambient_dim();
        let per_mu: Vec<Vec<f64>> = (0..dd)
            .map(|mu| {
                let mut d = self.grid.partial(&self.periodic_component(mu), axes);
                if axes.len() == 1 {
                    let a = axes[0];
                    let slope = self.offsets[a][mu] / self.grid.periods[a];
                    d.iter_mut().for_each(|v| *v += slope);
                }
                d
            })
            .collect();
        (0..self.grid.len()).map(|k| (0..dd).map(|mu| per_mu[mu][k]).collect()).collect()
    }

    /// Position at an arbitrary parameter value by trigonometric
    /// interpolation of the periodic part.
    pub fn position_at(&self, sigma: &[f64]) -> Vec<f64> {
        let lin = self.linear_part(sigma);
        (0..self.ambient_dim())
            .map(|mu| lin[mu] + interpolate(&self.grid, &self.periodic_component(mu), sigma))
            .collect()
    }

    /// A copy with displaced samples `X + δ` (same offsets).
    pub fn displaced(&self, name: impl Into<String>, samples: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = Self::from_samples(name, self.ambient.clone(), self.grid.clone(), self.offsets.clone(), samples)?;
        out.normalization = self.normalization;
        out.multiplicity = self.multiplicity;
        Ok(out)
    }

    // builtins

    /// Straight line along the first axis of ℝ².
    pub fn line(length: f64, n: usize) -> Result<Self> {
        let grid = ParameterGrid::new(vec![n], vec![length])?;
        Self::from_fn("line", ManifoldSpec::euclidean(2), grid, vec![vec![length, 0.0]], |s| vec![s[0], 0.0])
    }

    /// The plane `z = 0` in ℝ³ with Cartesian parameters.
    pub fn plane(length: f64, n: usize) -> Result<Self> {
        let grid = ParameterGrid::new(vec![n, n], vec![length, length])?;
        Self::from_fn(
            "plane",
            ManifoldSpec::euclidean(3),
            grid,
            vec![vec![length, 0.0, 0.0], vec![0.0, length, 0.0]],
            |s| vec![s[0], s[1], 0.0],
        )
    }

    pub fn circle(radius: f64, n: usize) -> Result<Self> {
        let grid = ParameterGrid::new(vec![n], vec![2.0 * PI])?;
        Self::from_fn("circle", ManifoldSpec::euclidean(2), grid, vec![vec![0.0; 2]], move |s| {
            vec![radius * s[0].cos(), radius * s[0].sin()]
        })
    }

    /// Circle in the `xy`-plane of ℝ³ (codimension 2).
    pub fn circle3(radius: f64, n: usize) -> Result<Self> {
        let grid = ParameterGrid::new(vec![n], vec![2.0 * PI])?;
        Self::from_fn("circle3", ManifoldSpec::euclidean(3), grid, vec![vec![0.0; 3]], move |s| {
            vec![radius * s[0].cos(), radius * s[0].sin(), 0.0]
        })
    }

    pub fn ellipse(a: f64, b: f64, n: usize) -> Result<Self> {
        let grid = ParameterGrid::new(vec![n], vec![2.0 * PI])?;
        Self::from_fn("ellipse", ManifoldSpec::euclidean(2), grid, vec![vec![0.0; 2]], move |s| {
            vec![a * s[0].cos(), b * s[0].sin()]
        })
    }

    /// Round sphere of radius `r` in ℝ³ with `(θ, φ)` parameters. The θ axis
    /// runs over `[0, 2π)`, a smooth periodic double cover; the grid's half-step
    /// offset keeps every sample away from the poles.
    pub fn sphere(radius: f64, n_theta: usize, n_phi: usize) -> Result<Self> {
        let grid = ParameterGrid::new(vec![n_theta, n_phi], vec![2.0 * PI, 2.0 * PI])?;
        Ok(Self::from_fn("sphere", ManifoldSpec::euclidean(3), grid, vec![vec![0.0; 3]; 2], move |s| {
            let (t, p) = (s[0], s[1]);
            vec![radius * t.sin() * p.cos(), radius * t.sin() * p.sin(), radius * t.cos()]
        })?
        .with_multiplicity(2.0))
    }

    /// Round sphere with polar angle `θ = (π/2)(1 − cos u)`. Unlike
    /// [`Immersion::sphere`], whose area density `|sin θ|` has a kink at the
    /// poles, the density here vanishes like `|u|³`, so uniform quadrature of
    /// the area converges at the rate of the difference stencils.
    pub fn sphere_smooth(radius: f64, n_u: usize, n_phi: usize) -> Result<Self> {
        let grid = ParameterGrid::new(vec![n_u, n_phi], vec![2.0 * PI, 2.0 * PI])?;
        Ok(Self::from_fn("sphere_smooth", ManifoldSpec::euclidean(3), grid, vec![vec![0.0; 3]; 2], move |s| {
            let t = 0.5 * PI * (1.0 - s[0].cos());
            vec![radius * t.sin() * s[1].cos(), radius * t.sin() * s[1].sin(), radius * t.cos()]
        })?
        .with_multiplicity(2.0))
    }

    /// Torus of revolution with tube radius `r` around a circle of radius `big_r`.
    pub fn torus(big_r: f64, r: f64, n_u: usize, n_v: usize) -> Result<Self> {
        let grid = ParameterGrid::new(vec![n_u, n_v], vec![2.0 * PI, 2.0 * PI])?;
        Self::from_fn("torus", ManifoldSpec::euclidean(3), grid, vec![vec![0.0; 3]; 2], move |s| {
            let (u, v) = (s[0], s[1]);
            let rho = big_r + r * v.cos();
            vec![rho * u.cos(), rho * u.sin(), r * v.sin()]
        })
    }

    /// Graph `(x, y, f_1(x,y), …, f_k(x,y))` over a periodic box, in ℝ^{2+k}.
    /// `heights` has one component per extra dimension.
    pub fn graph(heights: &FourierField, periods: [f64; 2], n: usize) -> Result<Self> {
        let k = heights.dim;
        let dd = 2 + k;
        let grid = ParameterGrid::new(vec![n, n], periods.to_vec())?;
        let mut t0 = vec![0.0; dd];
        t0[0] = periods[0];
        let mut t1 = vec![0.0; dd];
        t1[1] = periods[1];
        let h = heights.clone();
        Self::from_fn(if k == 1 { "graph" } else { "graph4" }, ManifoldSpec::euclidean(dd), grid, vec![t0, t1], move |s| {
            let mut x = vec![s[0], s[1]];
            x.extend(h.value(s));
            x
        })
    }

    /// Closed curve `θ = θ0 + a sin(mσ), φ = σ` on the unit 2-sphere.
    pub fn worldline_on_sphere(theta0: f64, amplitude: f64, mode: i32, n: usize) -> Result<Self> {
        let collar = 0.05;
        if theta0 - amplitude.abs() <= collar || theta0 + amplitude.abs() >= PI - collar {
            return Err(GeoError::Precondition("world-line leaves the sphere chart".into()));
        }
        let grid = ParameterGrid::new(vec![n], vec![2.0 * PI])?;
        Self::from_fn("worldline_s2", ManifoldSpec::sphere(1.0, collar), grid, vec![vec![0.0, 2.0 * PI]], move |s| {
            vec![theta0 + amplitude * (mode as f64 * s[0]).sin(), s[0]]
        })
    }

    /// Builtin by name with default parameters and `n` points per axis.
    pub fn builtin(name: &str, n: usize) -> Result<Self> {
        match name {
            "line" => Self::line(2.0, n),
            "plane" => Self::plane(2.0, n),
            "circle" => Self::circle(1.0, n),
            "circle3" => Self::circle3(1.0, n),
            "ellipse" => Self::ellipse(1.5, 0.75, n),
            "sphere" => Self::sphere(1.0, n, n),
            "sphere_smooth" => Self::sphere_smooth(1.0, n, n),
            "torus" => Self::torus(2.0, 0.7, n, n),
            "graph" => Self::graph(&default_heights(1), [2.0, 2.0], n),
            "graph4" => Self::graph(&default_heights(2), [2.0, 2.0], n),
            "worldline_s2" => Self::worldline_on_sphere(1.2, 0.2, 2, n),
            other => Err(GeoError::Precondition(format!("unknown builtin immersion '{other}'"))),
        }
    }

    pub const BUILTINS: [&'static str; 11] = [
        "line",
        "plane",
        "circle",
        "circle3",
        "ellipse",
        "sphere",
        "sphere_smooth",
        "torus",
        "graph",
        "graph4",
        "worldline_s2",
    ];
}

/// Fixed smooth height fields for the builtin graphs.
fn default_heights(k: usize) -> FourierField {
    FourierField::random(2, k, &[2.0, 2.0], 1, 0.08, 17)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn offsets_restore_linear_growth() {
        let l = Immersion::line(3.0, 16).unwrap();
        let d = l.derivative(&[0]);
        for v in d {
            assert_relative_eq!(v[0], 1.0, epsilon = 1e-12);
            assert_relative_eq!(v[1], 0.0, epsilon = 1e-12);
        }
        let dd = l.derivative(&[0, 0]);
        assert!(dd.iter().flatten().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn circle_derivatives_match_closed_form() {
        let c = Immersion::circle(2.0, 64).unwrap();
        let d1 = c.derivative(&[0]);
        let d3 = c.derivative(&[0, 0, 0]);
        for (k, p) in c.grid().points().iter().enumerate() {
            assert!((d1[k][0] + 2.0 * p[0].sin()).abs() < 2e-5);
            assert!((d3[k][1] + 2.0 * p[0].cos()).abs() < 1e-4);
        }
    }

    #[test]
    fn interpolated_position_off_grid() {
        let c = Immersion::worldline_on_sphere(1.2, 0.2, 2, 32).unwrap();
        let x = c.position_at(&[0.37]);
        assert_relative_eq!(x[0], 1.2 + 0.2 * (0.74f64).sin(), epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.37, epsilon = 1e-12);
    }

    #[test]
    fn every_builtin_constructs() {
        for name in Immersion::BUILTINS {
            let i = Immersion::builtin(name, 16).unwrap();
            assert!(i.ambient_dim() > i.dim(), "{name}");
        }
        assert!(Immersion::builtin("klein", 16).is_err());
    }

    #[test]
    fn sample_shape_is_validated() {
        let grid = ParameterGrid::new(vec![8], vec![1.0]).unwrap();
        let r = Immersion::from_samples("bad", ManifoldSpec::euclidean(2), grid, vec![vec![0.0, 0.0]], vec![vec![0.0]; 8]);
        assert!(r.is_err());
    }
}
