//! Riemannian manifold kernel: metric evaluation, connection and curvature.
//!
//! Curvature convention:
//!
//! ```text
//! Γ^a_bc   = ½ h^ad (h_db,c + h_dc,b − h_bc,d)
//! R^a_bcd  = Γ^a_bd,c − Γ^a_bc,d + Γ^a_ce Γ^e_bd − Γ^a_de Γ^e_bc
//! R_ab     = R^c_acb
//! ```
//!
//! With this convention the unit sphere has `R_ab = +h_ab`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{GeoError, Result};
use crate::field::{PartialJet, VectorField};
use crate::tensor::{Tensor3, Tensor4};

pub type MetricFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
/// `∂_c h` for each `c`.
pub type MetricGradFn = Arc<dyn Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync>;
/// `∂_c ∂_d h`, indexed `[c][d]`.
pub type MetricHessFn = Arc<dyn Fn(&[f64]) -> Vec<Vec<DMatrix<f64>>> + Send + Sync>;

pub const DEFAULT_FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisDomain {
    Interval { lo: f64, hi: f64 },
    Periodic { period: f64 },
}

impl AxisDomain {
    fn contains(&self, x: f64) -> bool {
        match *self {
            AxisDomain::Interval { lo, hi } => x >= lo && x <= hi,
            AxisDomain::Periodic { .. } => x.is_finite(),
        }
    }
}

#[derive(Clone)]
pub struct ManifoldSpec {
    name: String,
    dim: usize,
    metric: MetricFn,
    grad: Option<MetricGradFn>,
    hess: Option<MetricHessFn>,
    fd_step: f64,
    domain: Vec<AxisDomain>,
    flat: bool,
}

impl fmt::Debug for ManifoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ManifoldSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("analytic_derivatives", &self.grad.is_some())
            .field("fd_step", &self.fd_step)
            .field("domain", &self.domain)
            .finish()
    }
}

/// Metric with its inverse and log-determinant at one point.
#[derive(Debug, Clone)]
pub struct MetricEval {
    pub metric: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

/// Metric and its first two partial derivatives at one point.
#[derive(Debug, Clone)]
pub struct MetricJet {
    pub metric: DMatrix<f64>,
    pub grad: Vec<DMatrix<f64>>,
    pub hess: Vec<Vec<DMatrix<f64>>>,
}

/// Connection and curvature at one point.
///
/// Layout: `gamma[(a,b,c)] = Γ^a_bc`, `dgamma[(a,b,c,e)] = ∂_e Γ^a_bc`,
/// `riemann[(a,b,c,d)] = R^a_bcd`, `ricci[(a,b)] = R_ab`.
#[derive(Debug, Clone)]
pub struct CurvatureBundle {
    pub metric: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub gamma: Tensor3,
    pub dgamma: Tensor4,
    pub riemann: Tensor4,
    pub ricci: DMatrix<f64>,
}

impl CurvatureBundle {
    pub fn dim(&self) -> usize {
        self.metric.nrows()
    }

    /// `R_abcd = h_ae R^e_bcd`.
    pub fn riemann_lowered(&self) -> Tensor4 {
        let n = self.dim();
        Tensor4::from_fn(n, |a, b, c, d| (0..n).map(|e| self.metric[(a, e)] * self.riemann[(e, b, c, d)]).sum())
    }

    /// Largest violations of the algebraic curvature identities:
    /// `(R_abcd + R_abdc, R_abcd + R_bacd, first Bianchi, Γ symmetry)`.
    pub fn identity_residuals(&self) -> [f64; 4] {
        let n = self.dim();
        let low = self.riemann_lowered();
        let mut out = [0.0f64; 4];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    out[3] = out[3].max((self.gamma[(a, b, c)] - self.gamma[(a, c, b)]).abs());
                    for d in 0..n {
                        out[0] = out[0].max((low[(a, b, c, d)] + low[(a, b, d, c)]).abs());
                        out[1] = out[1].max((low[(a, b, c, d)] + low[(b, a, c, d)]).abs());
                        let bianchi = self.riemann[(a, b, c, d)] + self.riemann[(a, c, d, b)] + self.riemann[(a, d, b, c)];
                        out[2] = out[2].max(bianchi.abs());
                    }
                }
            }
        }
        out
    }

    /// Scalar curvature `h^ab R_ab`.
    pub fn scalar(&self) -> f64 {
        self.inverse.component_mul(&self.ricci).sum()
    }
}

impl ManifoldSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        metric: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        domain: Vec<AxisDomain>,
    ) -> Self {
        assert_eq!(domain.len(), dim, "one domain entry per coordinate");
        Self {
            name: name.into(),
            dim,
            metric: Arc::new(metric),
            grad: None,
            hess: None,
            fd_step: DEFAULT_FD_STEP,
            domain,
            flat: false,
        }
    }

    pub fn with_analytic_derivatives(
        mut self,
        grad: impl Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
        hess: impl Fn(&[f64]) -> Vec<Vec<DMatrix<f64>>> + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self.hess = Some(Arc::new(hess));
        self
    }

    /// Drops analytic derivatives so everything goes through finite differences.
    pub fn without_analytic_derivatives(mut self) -> Self {
        self.grad = None;
        self.hess = None;
        self
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        assert!(step > 0.0);
        self.fd_step = step;
        self
    }

    pub fn with_domain(mut self, domain: Vec<AxisDomain>) -> Self {
        assert_eq!(domain.len(), self.dim);
        self.domain = domain;
        self
    }

    fn mark_flat(mut self) -> Self {
        self.flat = true;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn domain(&self) -> &[AxisDomain] {
        &self.domain
    }

    /// True for builtins whose metric is constant in the chart.
    pub fn is_chart_flat(&self) -> bool {
        self.flat
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.grad.is_some() && self.hess.is_some()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim && x.iter().zip(&self.domain).all(|(v, d)| d.contains(*v))
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::NonFinite("point coordinates"));
        }
        if !self.contains(x) {
            return Err(GeoError::DomainExit { point: x.to_vec(), parameter: None });
        }
        Ok(())
    }

    /// Chart difference `x1 − x0`, taking the short way round periodic axes.
    pub fn chart_difference(&self, x0: &[f64], x1: &[f64]) -> Vec<f64> {
        x0.iter()
            .zip(x1)
            .zip(&self.domain)
            .map(|((a, b), d)| {
                let diff = b - a;
                match *d {
                    AxisDomain::Periodic { period } => diff - period * (diff / period).round(),
                    AxisDomain::Interval { .. } => diff,
                }
            })
            .collect()
    }

    pub fn raw_metric(&self, x: &[f64]) -> DMatrix<f64> {
        (self.metric)(x)
    }

    pub fn metric_at(&self, x: &[f64]) -> Result<MetricEval> {
        self.check_point(x)?;
        evaluate_metric(&self.raw_metric(x), x)
    }

    pub fn norm(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        let h = self.metric_at(x)?.metric;
        Ok(quadratic_form(&h, v, v).max(0.0).sqrt())
    }

    fn check_stencil(&self, x: &[f64], reach: f64) -> Result<()> {
        for (c, d) in self.domain.iter().enumerate() {
            if let AxisDomain::Interval { lo, hi } = *d {
                if x[c] - reach < lo || x[c] + reach > hi {
                    return Err(GeoError::DomainExit { point: x.to_vec(), parameter: None });
                }
            }
        }
        Ok(())
    }

    /// Metric jet from analytic derivatives when available, else 4th-order
    /// central differences with step `fd_step`.
    pub fn jet(&self, x: &[f64]) -> Result<MetricJet> {
        self.check_point(x)?;
        let metric = self.raw_metric(x);
        if metric.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::NonFinite("metric"));
        }
        if let (Some(g), Some(h)) = (&self.grad, &self.hess) {
            return Ok(MetricJet { metric, grad: g(x), hess: h(x) });
        }
        self.fd_jet(x, self.fd_step)
    }

    /// Finite-difference jet with an explicit step.
    pub fn fd_jet(&self, x: &[f64], s: f64) -> Result<MetricJet> {
        self.check_stencil(x, 2.0 * s)?;
        let n = self.dim;
        let at = |offsets: &[(usize, f64)]| {
            let mut p = x.to_vec();
            for &(c, o) in offsets {
                p[c] += o;
            }
            (self.metric)(&p)
        };
        let center = at(&[]);
        let w = [(2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0)];
        let mut grad = Vec::with_capacity(n);
        let mut hess = vec![vec![DMatrix::zeros(n, n); n]; n];
        for c in 0..n {
            let mut g = DMatrix::zeros(n, n);
            for &(k, wk) in &w {
                g += at(&[(c, k * s)]) * wk;
            }
            grad.push(g / (12.0 * s));
            let second = (at(&[(c, 2.0 * s)]) * -1.0
                + at(&[(c, s)]) * 16.0
                + &center * -30.0
                + at(&[(c, -s)]) * 16.0
                + at(&[(c, -2.0 * s)]) * -1.0)
                / (12.0 * s * s);
            hess[c][c] = second;
        }
        for c in 0..n {
            for d in c + 1..n {
                let mut m = DMatrix::zeros(n, n);
                for &(kc, wc) in &w {
                    for &(kd, wd) in &w {
                        m += at(&[(c, kc * s), (d, kd * s)]) * (wc * wd);
                    }
                }
                m /= 144.0 * s * s;
                hess[d][c] = m.clone();
                hess[c][d] = m;
            }
        }
        let all_finite = grad.iter().chain(hess.iter().flatten()).all(|m| m.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(GeoError::NonFinite("metric derivatives"));
        }
        Ok(MetricJet { metric: center, grad, hess })
    }

    /// Christoffel symbols only; cheaper than `curvature_at` (no second
    /// derivatives). Used by the geodesic integrator.
    pub fn christoffel_at(&self, x: &[f64]) -> Result<Tensor3> {
        self.check_point(x)?;
        let n = self.dim;
        let metric = self.raw_metric(x);
        let grad = match &self.grad {
            Some(g) => g(x),
            None => {
                let s = self.fd_step;
                self.check_stencil(x, 2.0 * s)?;
                (0..n)
                    .map(|c| {
                        let mut p = x.to_vec();
                        let mut at = |o: f64| {
                            p[c] = x[c] + o;
                            (self.metric)(&p)
                        };
                        (at(-2.0 * s) - at(2.0 * s) + (at(s) - at(-s)) * 8.0) / (12.0 * s)
                    })
                    .collect()
            }
        };
        let eval = evaluate_metric(&metric, x)?;
        let hi = &eval.inverse;
        let gamma = Tensor3::from_fn(n, |a, b, c| {
            (0..n).map(|d| 0.5 * hi[(a, d)] * (grad[c][(d, b)] + grad[b][(d, c)] - grad[d][(b, c)])).sum()
        });
        if gamma.max_abs().is_finite() {
            Ok(gamma)
        } else {
            Err(GeoError::NonFinite("connection"))
        }
    }

    /// Richardson-extrapolated finite-difference jet from steps `s` and `s/2`.
    pub fn richardson_jet(&self, x: &[f64], s: f64) -> Result<MetricJet> {
        let coarse = self.fd_jet(x, s)?;
        let fine = self.fd_jet(x, 0.5 * s)?;
        let mix = |f: &DMatrix<f64>, c: &DMatrix<f64>| (f * 16.0 - c) / 15.0;
        Ok(MetricJet {
            metric: fine.metric.clone(),
            grad: fine.grad.iter().zip(&coarse.grad).map(|(f, c)| mix(f, c)).collect(),
            hess: fine
                .hess
                .iter()
                .zip(&coarse.hess)
                .map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| mix(f, c)).collect())
                .collect(),
        })
    }

    /// Γ, ∂Γ, Riemann and Ricci at `x`. Falls back to a Richardson jet when
    /// the finite-difference result violates the curvature identities.
    pub fn curvature_at(&self, x: &[f64]) -> Result<CurvatureBundle> {
        let jet = self.jet(x)?;
        let bundle = curvature_from_jet(&jet, x)?;
        if self.has_analytic_derivatives() {
            return Ok(bundle);
        }
        let scale = bundle.riemann.max_abs().max(1.0);
        let tol = 10.0 * self.fd_step * self.fd_step * scale;
        if bundle.identity_residuals().iter().all(|r| *r <= tol) {
            return Ok(bundle);
        }
        curvature_from_jet(&self.richardson_jet(x, self.fd_step)?, x)
    }

    // ---- builtins ----

    /// Euclidean ℝⁿ in Cartesian coordinates.
    pub fn euclidean(n: usize) -> Self {
        let big = 1e6;
        Self::new(format!("euclidean{n}"), n, move |_| DMatrix::identity(n, n), vec![AxisDomain::Interval { lo: -big, hi: big }; n])
            .with_analytic_derivatives(
                move |_| vec![DMatrix::zeros(n, n); n],
                move |_| vec![vec![DMatrix::zeros(n, n); n]; n],
            )
            .mark_flat()
    }

    /// Flat torus with the given periods.
    pub fn flat_torus(periods: &[f64]) -> Self {
        let n = periods.len();
        Self::new("flat_torus", n, move |_| DMatrix::identity(n, n), periods.iter().map(|&p| AxisDomain::Periodic { period: p }).collect())
            .with_analytic_derivatives(
                move |_| vec![DMatrix::zeros(n, n); n],
                move |_| vec![vec![DMatrix::zeros(n, n); n]; n],
            )
            .mark_flat()
    }

    /// Round sphere of radius `radius` in (θ, φ); θ ∈ [collar, π − collar].
    pub fn sphere(radius: f64, collar: f64) -> Self {
        let r2 = radius * radius;
        Self::new(
            "sphere",
            2,
            move |x| {
                let s = x[0].sin();
                DMatrix::from_row_slice(2, 2, &[r2, 0.0, 0.0, r2 * s * s])
            },
            vec![
                AxisDomain::Interval { lo: collar, hi: std::f64::consts::PI - collar },
                AxisDomain::Periodic { period: 2.0 * std::f64::consts::PI },
            ],
        )
        .with_analytic_derivatives(
            move |x| {
                let d = r2 * (2.0 * x[0]).sin();
                vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, d]), DMatrix::zeros(2, 2)]
            },
            move |x| {
                let dd = 2.0 * r2 * (2.0 * x[0]).cos();
                vec![
                    vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, dd]), DMatrix::zeros(2, 2)],
                    vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
                ]
            },
        )
    }

    pub fn unit_sphere() -> Self {
        Self::sphere(1.0, 0.1)
    }

    /// Round sphere in Riemann normal coordinates about a point, restricted
    /// to the box |Y_i| ≤ `half_width`.
    ///
    /// `h = f I + q Y Yᵀ` with `f = sin²(r/ρ) ρ²/r²` and `q = (1 − f)/r²`.
    pub fn sphere_normal(radius: f64, half_width: f64) -> Self {
        Self::new(
            "sphere_normal",
            2,
            move |y| {
                let r2 = y[0] * y[0] + y[1] * y[1];
                let (f, q) = sinc2_parts(r2, radius);
                DMatrix::from_row_slice(2, 2, &[f + q * y[0] * y[0], q * y[0] * y[1], q * y[0] * y[1], f + q * y[1] * y[1]])
            },
            vec![AxisDomain::Interval { lo: -half_width, hi: half_width }; 2],
        )
    }

    /// Poincaré half-plane `(dx² + dy²)/y²`, y ∈ [y_min, y_max].
    pub fn poincare_half_plane() -> Self {
        Self::new(
            "poincare",
            2,
            |x| DMatrix::identity(2, 2) / (x[1] * x[1]),
            vec![AxisDomain::Interval { lo: -1e6, hi: 1e6 }, AxisDomain::Interval { lo: 1e-3, hi: 1e6 }],
        )
        .with_analytic_derivatives(
            |x| vec![DMatrix::zeros(2, 2), DMatrix::identity(2, 2) * (-2.0 / x[1].powi(3))],
            |x| {
                vec![
                    vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
                    vec![DMatrix::zeros(2, 2), DMatrix::identity(2, 2) * (6.0 / x[1].powi(4))],
                ]
            },
        )
    }

    /// Euclidean plane in polar coordinates (r, ϑ), r ∈ [r_min, r_max].
    pub fn polar_plane(r_min: f64, r_max: f64) -> Self {
        Self::new(
            "polar_plane",
            2,
            |x| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, x[0] * x[0]]),
            vec![AxisDomain::Interval { lo: r_min, hi: r_max }, AxisDomain::Periodic { period: 2.0 * std::f64::consts::PI }],
        )
        .with_analytic_derivatives(
            |x| vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0 * x[0]]), DMatrix::zeros(2, 2)],
            |_| {
                vec![
                    vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]), DMatrix::zeros(2, 2)],
                    vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
                ]
            },
        )
    }
}

/// `(f, q)` for the normal-coordinate sphere metric; series near the origin.
fn sinc2_parts(r2: f64, rho: f64) -> (f64, f64) {
    let x2 = r2 / (rho * rho);
    if x2 < 1e-4 {
        let f = 1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 45.0 - x2 * x2 * x2 / 315.0;
        let q = (1.0 / 3.0 - 2.0 * x2 / 45.0 + x2 * x2 / 315.0 - 2.0 * x2 * x2 * x2 / 14175.0) / (rho * rho);
        (f, q)
    } else {
        let x = x2.sqrt();
        let f = (x.sin() / x).powi(2);
        (f, (1.0 - f) / r2)
    }
}

pub fn quadratic_form(m: &DMatrix<f64>, u: &[f64], v: &[f64]) -> f64 {
    let n = u.len();
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            s += m[(a, b)] * u[a] * v[b];
        }
    }
    s
}

fn evaluate_metric(h: &DMatrix<f64>, x: &[f64]) -> Result<MetricEval> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(GeoError::NonFinite("metric"));
    }
    let sym = (h + h.transpose()) * 0.5;
    let chol = sym
        .clone()
        .cholesky()
        .ok_or_else(|| GeoError::SignatureViolation { point: x.to_vec() })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(MetricEval { inverse: chol.inverse(), metric: sym, log_det })
}

/// Orthonormal frame `E` (columns) with `Eᵀ h E = I`, from the Cholesky
/// factor `h = L Lᵀ` as `E = L⁻ᵀ`.
pub fn orthonormal_frame(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = h.clone().cholesky()?;
    let l = chol.l();
    l.transpose().try_inverse()
}

pub fn curvature_from_jet(jet: &MetricJet, x: &[f64]) -> Result<CurvatureBundle> {
    let n = jet.metric.nrows();
    let eval = evaluate_metric(&jet.metric, x)?;
    let hi = &eval.inverse;
    let dh = &jet.grad;
    let ddh = &jet.hess;
    // lowered Γ_dbc = ½(h_db,c + h_dc,b − h_bc,d)
    let low = Tensor3::from_fn(n, |d, b, c| 0.5 * (dh[c][(d, b)] + dh[b][(d, c)] - dh[d][(b, c)]));
    let gamma = Tensor3::from_fn(n, |a, b, c| (0..n).map(|d| hi[(a, d)] * low[(d, b, c)]).sum());
    // ∂_e h^ad = −h^af ∂_e h_fg h^gd
    let dinv: Vec<DMatrix<f64>> = (0..n).map(|e| -(hi * &dh[e] * hi)).collect();
    let dgamma = Tensor4::from_fn(n, |a, b, c, e| {
        let mut s = 0.0;
        for d in 0..n {
            let dlow = 0.5 * (ddh[c][e][(d, b)] + ddh[b][e][(d, c)] - ddh[d][e][(b, c)]);
            s += dinv[e][(a, d)] * low[(d, b, c)] + hi[(a, d)] * dlow;
        }
        s
    });
    let riemann = Tensor4::from_fn(n, |a, b, c, d| {
        let mut r = dgamma[(a, b, d, c)] - dgamma[(a, b, c, d)];
        for e in 0..n {
            r += gamma[(a, c, e)] * gamma[(e, b, d)] - gamma[(a, d, e)] * gamma[(e, b, c)];
        }
        r
    });
    let ricci = DMatrix::from_fn(n, n, |a, b| (0..n).map(|c| riemann[(c, a, c, b)]).sum());
    let bundle = CurvatureBundle { metric: eval.metric, inverse: eval.inverse, gamma, dgamma, riemann, ricci };
    if bundle.riemann.max_abs().is_finite() {
        Ok(bundle)
    } else {
        Err(GeoError::NonFinite("curvature"))
    }
}

/// Covariant derivatives of a vector field at one point.
///
/// `first[(a, b)] = ∇_b v^a`, `second[(a, b, c)] = ∇_c ∇_b v^a`.
#[derive(Debug, Clone)]
pub struct CovariantJet {
    pub value: Vec<f64>,
    pub first: DMatrix<f64>,
    pub second: Tensor3,
}

#[derive(Debug, Clone)]
pub enum CovariantDerivative {
    First(DMatrix<f64>),
    Second(Tensor3),
}

pub fn covariant_jet_from_partials(curv: &CurvatureBundle, jet: &PartialJet) -> CovariantJet {
    let n = curv.dim();
    let v = &jet.value;
    let g = &curv.gamma;
    let first = DMatrix::from_fn(n, n, |a, b| jet.jacobian[(a, b)] + (0..n).map(|e| g[(a, b, e)] * v[e]).sum::<f64>());
    let second = Tensor3::from_fn(n, |a, b, c| {
        // ∂_c(∇_b v^a) = ∂_c∂_b v^a + ∂_cΓ^a_be v^e + Γ^a_be ∂_c v^e
        let mut s = jet.hessian[(a, b, c)];
        for e in 0..n {
            s += curv.dgamma[(a, b, e, c)] * v[e] + g[(a, b, e)] * jet.jacobian[(e, c)];
            s += g[(a, c, e)] * first[(e, b)] - g[(e, c, b)] * first[(a, e)];
        }
        s
    });
    CovariantJet { value: v.clone(), first, second }
}

pub fn covariant_jet(m: &ManifoldSpec, v: &VectorField, x: &[f64]) -> Result<CovariantJet> {
    let curv = m.curvature_at(x)?;
    let partial = v.jet(x);
    if partial.value.iter().any(|c| !c.is_finite()) {
        return Err(GeoError::NonFinite("vector field"));
    }
    Ok(covariant_jet_from_partials(&curv, &partial))
}

pub fn covariant_derivative(m: &ManifoldSpec, v: &VectorField, x: &[f64], order: usize) -> Result<CovariantDerivative> {
    let jet = covariant_jet(m, v, x)?;
    match order {
        1 => Ok(CovariantDerivative::First(jet.first)),
        2 => Ok(CovariantDerivative::Second(jet.second)),
        _ => Err(GeoError::Precondition(format!("covariant derivative order {order} not supported (1 or 2)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn euclidean_metric_is_identity() {
        let m = ManifoldSpec::euclidean(2);
        let e = m.metric_at(&[0.3, -4.0]).unwrap();
        assert_eq!(e.metric, DMatrix::identity(2, 2));
        assert_eq!(e.log_det, 0.0);
    }

    #[test]
    fn sphere_metric_at_sixty_degrees() {
        let m = ManifoldSpec::unit_sphere();
        let e = m.metric_at(&[PI / 3.0, 1.0]).unwrap();
        assert_relative_eq!(e.metric[(1, 1)], 0.75, epsilon = 1e-15);
        assert_relative_eq!(e.log_det, 0.75f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn poincare_metric_at_height_two() {
        let m = ManifoldSpec::poincare_half_plane();
        let e = m.metric_at(&[0.7, 2.0]).unwrap();
        assert_relative_eq!(e.metric, DMatrix::identity(2, 2) * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn indefinite_metric_is_a_signature_violation() {
        let m = ManifoldSpec::new("bad", 2, |_| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), vec![AxisDomain::Interval { lo: -1.0, hi: 1.0 }; 2]);
        match m.metric_at(&[0.0, 0.5]) {
            Err(GeoError::SignatureViolation { point }) => assert_eq!(point, vec![0.0, 0.5]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn points_outside_the_collar_are_rejected() {
        let m = ManifoldSpec::unit_sphere();
        assert!(matches!(m.metric_at(&[0.05, 0.0]), Err(GeoError::DomainExit { .. })));
        // the stencil must fit too
        let fd = ManifoldSpec::unit_sphere().without_analytic_derivatives();
        assert!(matches!(fd.curvature_at(&[0.1005, 0.0]), Err(GeoError::DomainExit { .. })));
    }

    #[test]
    fn nan_metric_propagates_as_error() {
        let m = ManifoldSpec::new("nan", 1, |_| DMatrix::from_element(1, 1, f64::NAN), vec![AxisDomain::Interval { lo: -1.0, hi: 1.0 }]);
        assert!(matches!(m.curvature_at(&[0.0]), Err(GeoError::NonFinite(_))));
    }

    #[test]
    fn flat_space_has_no_curvature() {
        for n in 1..=4 {
            let m = ManifoldSpec::euclidean(n).without_analytic_derivatives();
            let c = m.curvature_at(&vec![0.2; n]).unwrap();
            assert!(c.gamma.max_abs() < 1e-12);
            assert!(c.riemann.max_abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_ricci_equals_metric_and_equator_gamma_vanishes() {
        for m in [ManifoldSpec::unit_sphere(), ManifoldSpec::unit_sphere().without_analytic_derivatives()] {
            let x = [PI / 2.0, 0.4];
            let c = m.curvature_at(&x).unwrap();
            assert_relative_eq!(c.ricci, c.metric, epsilon = 1e-8);
            assert!(c.gamma[(0, 1, 1)].abs() < 1e-10);
            let y = [1.1, 0.4];
            let c = m.curvature_at(&y).unwrap();
            assert_relative_eq!(c.gamma[(0, 1, 1)], -y[0].sin() * y[0].cos(), epsilon = 1e-9);
            assert_relative_eq!(c.ricci, c.metric, epsilon = 1e-8);
        }
    }

    #[test]
    fn poincare_ricci_is_minus_metric() {
        for m in [ManifoldSpec::poincare_half_plane(), ManifoldSpec::poincare_half_plane().without_analytic_derivatives()] {
            for x in [[0.0, 1.0], [2.0, 0.5], [-1.0, 3.0]] {
                let c = m.curvature_at(&x).unwrap();
                assert_relative_eq!(c.ricci, -&c.metric, epsilon = 1e-6 * c.metric.max());
            }
        }
    }

    #[test]
    fn normal_coordinate_sphere_has_unit_curvature_and_no_gamma_at_origin() {
        let m = ManifoldSpec::sphere_normal(1.0, 0.5);
        let c = m.curvature_at(&[0.0, 0.0]).unwrap();
        assert!(c.gamma.max_abs() < 1e-10);
        assert_relative_eq!(c.ricci, DMatrix::identity(2, 2), epsilon = 1e-6);
        let c = m.curvature_at(&[0.2, -0.1]).unwrap();
        assert_relative_eq!(c.ricci, c.metric, epsilon = 1e-6);
    }

    #[test]
    fn polar_plane_is_flat() {
        let m = ManifoldSpec::polar_plane(0.5, 3.0);
        let c = m.curvature_at(&[1.3, 0.2]).unwrap();
        assert!(c.riemann.max_abs() < 1e-12);
        assert_relative_eq!(c.gamma[(0, 1, 1)], -1.3, epsilon = 1e-14);
        assert_relative_eq!(c.gamma[(1, 0, 1)], 1.0 / 1.3, epsilon = 1e-14);
    }

    #[test]
    fn finite_difference_connection_converges_at_fourth_order() {
        let exact = ManifoldSpec::poincare_half_plane();
        let x = [0.3, 0.8];
        let reference = exact.curvature_at(&x).unwrap();
        let err = |s: f64| {
            let c = curvature_from_jet(&exact.fd_jet(&x, s).unwrap(), &x).unwrap();
            let mut e: f64 = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    for cc in 0..2 {
                        e = e.max((c.gamma[(a, b, cc)] - reference.gamma[(a, b, cc)]).abs());
                        for d in 0..2 {
                            e = e.max((c.riemann[(a, b, cc, d)] - reference.riemann[(a, b, cc, d)]).abs());
                        }
                    }
                }
            }
            e
        };
        let (coarse, fine) = (err(0.04), err(0.02));
        assert!(coarse / fine >= 12.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn metric_compatibility_holds_at_random_points() {
        let ms = [ManifoldSpec::unit_sphere(), ManifoldSpec::poincare_half_plane(), ManifoldSpec::sphere_normal(1.0, 0.5), ManifoldSpec::polar_plane(0.5, 3.0)];
        let pts = [[1.2, 0.3], [0.4, 1.5], [0.1, -0.2], [1.5, 2.0]];
        for (m, x) in ms.iter().zip(pts) {
            let jet = m.jet(&x).unwrap();
            let c = curvature_from_jet(&jet, &x).unwrap();
            // ∇_c h_ab = ∂_c h_ab − Γ^e_ca h_eb − Γ^e_cb h_ae
            for a in 0..2 {
                for b in 0..2 {
                    for cc in 0..2 {
                        let mut r = jet.grad[cc][(a, b)];
                        for e in 0..2 {
                            r -= c.gamma[(e, cc, a)] * c.metric[(e, b)] + c.gamma[(e, cc, b)] * c.metric[(a, e)];
                        }
                        assert!(r.abs() < 1e-9, "{} {r}", m.name());
                    }
                }
            }
            let res = c.identity_residuals();
            assert!(res.iter().all(|r| *r < 1e-5), "{}: {res:?}", m.name());
        }
    }

    #[test]
    fn tensors_transform_under_chart_rescaling() {
        // x' = 2x: h'(x') = h(x'/2)/4; Ricci is a (0,2) tensor so R'_ab(x') = R_ab(x)/4.
        let base = ManifoldSpec::poincare_half_plane();
        let scaled = ManifoldSpec::new("scaled", 2, |x| DMatrix::identity(2, 2) / (x[1] * x[1] / 4.0) / 4.0, vec![AxisDomain::Interval { lo: -10.0, hi: 10.0 }, AxisDomain::Interval { lo: 0.01, hi: 10.0 }]);
        let x = [0.2, 0.7];
        let c = base.curvature_at(&x).unwrap();
        let cs = scaled.curvature_at(&[0.4, 1.4]).unwrap();
        assert_relative_eq!(cs.ricci * 4.0, c.ricci, epsilon = 1e-7);
        // Γ^a_bc picks up a factor 1/2
        assert_relative_eq!(cs.gamma[(1, 1, 1)] * 2.0, c.gamma[(1, 1, 1)], epsilon = 1e-8);
    }

    #[test]
    fn covariant_derivative_of_rotation_field() {
        let m = ManifoldSpec::euclidean(2);
        let rot = VectorField::from_fn(2, |x| vec![-x[1], x[0]]);
        match covariant_derivative(&m, &rot, &[0.3, 0.9], 1).unwrap() {
            CovariantDerivative::First(d) => {
                assert_relative_eq!(d, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]), epsilon = 1e-10);
                assert!(d.trace().abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        let constant = VectorField::constant(vec![1.0, 2.0]);
        let j = covariant_jet(&m, &constant, &[0.0, 0.0]).unwrap();
        assert_eq!(j.first.max(), 0.0);
        assert!(covariant_derivative(&m, &constant, &[0.0, 0.0], 3).is_err());
    }

    #[test]
    fn coordinate_constant_field_on_sphere_picks_up_christoffels() {
        let m = ManifoldSpec::unit_sphere();
        let v = VectorField::constant(vec![0.3, -0.5]);
        let x = [1.0, 0.2];
        let c = m.curvature_at(&x).unwrap();
        let j = covariant_jet(&m, &v, &x).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let expect: f64 = (0..2).map(|e| c.gamma[(a, b, e)] * [0.3, -0.5][e]).sum();
                assert_relative_eq!(j.first[(a, b)], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn second_covariant_derivative_commutator_is_curvature() {
        // ∇_c∇_b v^a − ∇_b∇_c v^a = R^a_ecb v^e
        let m = ManifoldSpec::unit_sphere();
        let v = VectorField::from_fn(2, |x| vec![x[1].sin() * 0.2, x[0].cos()]);
        let x = [1.2, 0.5];
        let c = m.curvature_at(&x).unwrap();
        let j = covariant_jet(&m, &v, &x).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for cc in 0..2 {
                    let lhs = j.second[(a, b, cc)] - j.second[(a, cc, b)];
                    let rhs: f64 = (0..2).map(|e| c.riemann[(a, e, cc, b)] * j.value[e]).sum();
                    assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
                }
            }
        }
    }
}
