//! Exact geodesics, the log map, and the third-order geodesic expansion with
//! its group operations.
//!
//! The expansion maps a base point `x0` and generator `v` to
//!
//! ```text
//! x1^a ≃ x0^a + v^a − ½ Γ^a_bc v^b v^c + ⅙ (−Γ^a_bc,d + 2 Γ^a_de Γ^e_bc) v^b v^c v^d
//! ```
//!
//! and two expansions compose (to third order) as
//!
//! ```text
//! v = v1 + v2 + v1^b ∇_b v2 + ½ v1^b v1^c ∇_c∇_b v2 + ⅓ R^a_bcd (v2^b + ½ v1^b) v2^c v1^d
//! ```
//!
//! with everything evaluated at `x0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GeoError, Result};
use crate::field::VectorField;
use crate::manifold::{covariant_jet_from_partials, quadratic_form, CovariantJet, CurvatureBundle, ManifoldSpec, orthonormal_frame};

/// Result of integrating the geodesic equation.
#[derive(Debug, Clone)]
pub struct Shot {
    pub point: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Largest deviation of the velocity's metric norm from its initial value.
    pub norm_drift: f64,
    pub steps: usize,
}

// Dormand–Prince 5(4)
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn geodesic_rhs(m: &ManifoldSpec, y: &[f64], param: f64) -> Result<Vec<f64>> {
    let n = m.dim();
    let (x, u) = y.split_at(n);
    let gamma = m.christoffel_at(x).map_err(|e| match e {
        GeoError::DomainExit { point, .. } => GeoError::DomainExit { point, parameter: Some(param) },
        other => other,
    })?;
    let mut out = Vec::with_capacity(2 * n);
    out.extend_from_slice(u);
    for a in 0..n {
        let mut acc = 0.0;
        for b in 0..n {
            for c in 0..n {
                acc += gamma[(a, b, c)] * u[b] * u[c];
            }
        }
        out.push(-acc);
    }
    Ok(out)
}

/// Integrates the geodesic equation from `x0` with initial velocity `v` up
/// to affine parameter `t`, with adaptive Dormand–Prince steps controlled to
/// local error `tol`.
pub fn shoot(m: &ManifoldSpec, x0: &[f64], v: &[f64], t: f64, tol: f64) -> Result<Shot> {
    let n = m.dim();
    m.check_point(x0)?;
    if v.iter().any(|c| !c.is_finite()) {
        return Err(GeoError::NonFinite("initial velocity"));
    }
    let norm0 = m.norm(x0, v)?;
    let mut y: Vec<f64> = x0.iter().chain(v).copied().collect();
    if t == 0.0 {
        return Ok(Shot { point: x0.to_vec(), velocity: v.to_vec(), norm_drift: 0.0, steps: 0 });
    }
    let dir = t.signum();
    let total = t.abs();
    let mut s = 0.0;
    let mut h = (0.05 / (1.0 + norm0)).min(total);
    let mut drift: f64 = 0.0;
    let mut steps = 0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; 2 * n]; 7];
    while s < total {
        if h < 1e-14 * total.max(1.0) {
            return Err(GeoError::Stiffness { parameter: dir * s });
        }
        if s + h > total {
            h = total - s;
        }
        let hs = dir * h;
        let mut stage_ok = true;
        let mut stage_err = None;
        for i in 0..7 {
            let mut yi = y.clone();
            for j in 0..i {
                if A[i][j] != 0.0 {
                    for (c, kc) in yi.iter_mut().zip(&k[j]) {
                        *c += hs * A[i][j] * kc;
                    }
                }
            }
            match geodesic_rhs(m, &yi, dir * (s + C[i] * h)) {
                Ok(f) => k[i] = f,
                Err(e @ GeoError::DomainExit { .. }) => {
                    stage_ok = false;
                    stage_err = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if !stage_ok {
            // shrink towards the boundary; give up once the step is tiny
            if h < 1e-9 {
                return Err(stage_err.unwrap());
            }
            h *= 0.25;
            continue;
        }
        let mut y5 = y.clone();
        let mut err_norm: f64 = 0.0;
        for c in 0..2 * n {
            let mut inc5 = 0.0;
            let mut inc4 = 0.0;
            for i in 0..7 {
                inc5 += B5[i] * k[i][c];
                inc4 += B4[i] * k[i][c];
            }
            y5[c] += hs * inc5;
            let sc = tol * (1.0 + y[c].abs().max(y5[c].abs()));
            err_norm = err_norm.max((hs * (inc5 - inc4)).abs() / sc);
        }
        if !err_norm.is_finite() {
            return Err(GeoError::NonFinite("geodesic integration"));
        }
        if err_norm <= 1.0 {
            s += h;
            y = y5;
            steps += 1;
            let (x, u) = y.split_at(n);
            if !m.contains(x) {
                return Err(GeoError::DomainExit { point: x.to_vec(), parameter: Some(dir * s) });
            }
            let nrm = m.norm(x, u)?;
            drift = drift.max((nrm - norm0).abs());
        }
        let factor = if err_norm == 0.0 { 5.0 } else { (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    let (x, u) = y.split_at(n);
    Ok(Shot { point: x.to_vec(), velocity: u.to_vec(), norm_drift: drift, steps })
}

/// Initial velocity of the geodesic from `x0` reaching `x1` at parameter 1,
/// by Newton iteration on the endpoint residual.
pub fn log_map(m: &ManifoldSpec, x0: &[f64], x1: &[f64], tol: f64) -> Result<Vec<f64>> {
    const MAX_ITER: usize = 40;
    let n = m.dim();
    m.check_point(x0)?;
    m.check_point(x1)?;
    let delta = m.chart_difference(x0, x1);
    if m.is_chart_flat() {
        return Ok(delta);
    }
    // second-order inverse of the expansion as the starting guess
    let gamma = m.christoffel_at(x0)?;
    let mut v: Vec<f64> = (0..n)
        .map(|a| {
            let mut q = 0.0;
            for b in 0..n {
                for c in 0..n {
                    q += gamma[(a, b, c)] * delta[b] * delta[c];
                }
            }
            delta[a] + 0.5 * q
        })
        .collect();
    let inner_tol = (tol * 1e-2).max(1e-14);
    let residual = |v: &[f64]| -> Result<Vec<f64>> {
        let shot = shoot(m, x0, v, 1.0, inner_tol)?;
        Ok(m.chart_difference(x1, &shot.point))
    };
    let mut r = match residual(&v) {
        Ok(r) => r,
        Err(_) => {
            v = delta.clone();
            residual(&v)?
        }
    };
    let mut rnorm = r.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for _ in 0..MAX_ITER {
        if rnorm <= tol {
            return Ok(v);
        }
        let scale = v.iter().fold(1.0f64, |a, b| a.max(b.abs()));
        let step = 1e-6 * scale;
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += step;
            vm[j] -= step;
            let rp = residual(&vp)?;
            let rm = residual(&vm)?;
            for i in 0..n {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * step);
            }
        }
        let dv = match jac.lu().solve(&DVector::from_column_slice(&r)) {
            Some(d) => d,
            None => return Err(GeoError::NoUniqueGeodesic { iterations: 0, residual: rnorm }),
        };
        // damped update: accept the first step length that reduces the residual
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = v.iter().zip(dv.iter()).map(|(a, d)| a - lambda * d).collect();
            if let Ok(rt) = residual(&trial) {
                let tn = rt.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                if tn < rnorm || lambda < 1e-3 {
                    v = trial;
                    r = rt;
                    rnorm = tn;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-3 {
                return Err(GeoError::NoUniqueGeodesic { iterations: MAX_ITER, residual: rnorm });
            }
        }
    }
    if rnorm <= tol {
        Ok(v)
    } else {
        Err(GeoError::NoUniqueGeodesic { iterations: MAX_ITER, residual: rnorm })
    }
}

/// Covariant determinant of `∂ exp_x0(v)/∂v`, i.e. `det J · √(h(x)/h(x0))`.
fn exp_jacobian_det(m: &ManifoldSpec, x0: &[f64], v: &[f64], tol: f64) -> Result<f64> {
    let n = m.dim();
    let step = 1e-5;
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut vp = v.to_vec();
        let mut vm = v.to_vec();
        vp[j] += step;
        vm[j] -= step;
        let p = shoot(m, x0, &vp, 1.0, tol)?.point;
        let q = shoot(m, x0, &vm, 1.0, tol)?.point;
        let d = m.chart_difference(&q, &p);
        for i in 0..n {
            jac[(i, j)] = d[i] / (2.0 * step);
        }
    }
    let x = shoot(m, x0, v, 1.0, tol)?.point;
    let ratio = (0.5 * (m.metric_at(&x)?.log_det - m.metric_at(x0)?.log_det)).exp();
    Ok(jac.determinant() * ratio)
}

/// `0.5 ×` the smallest distance, over sampled directions, at which the
/// (covariantly normalized) exponential-map Jacobian falls below 10% of its
/// value at the origin or the geodesic leaves the chart. Capped at `t_max`.
pub fn estimate_trust_radius(m: &ManifoldSpec, x0: &[f64], t_max: f64) -> Result<f64> {
    let n = m.dim();
    let h0 = m.metric_at(x0)?.metric;
    let frame = orthonormal_frame(&h0).ok_or_else(|| GeoError::SignatureViolation { point: x0.to_vec() })?;
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        dirs.push(e.clone());
        dirs.push(-e);
        for j in i + 1..n {
            for s in [1.0, -1.0] {
                let mut d = DVector::zeros(n);
                d[i] = std::f64::consts::FRAC_1_SQRT_2;
                d[j] = s * std::f64::consts::FRAC_1_SQRT_2;
                dirs.push(d);
            }
        }
    }
    let mut best = t_max;
    for d in dirs {
        let u = &frame * d;
        let mut t = 0.05;
        let mut last_good = 0.0;
        while t <= best {
            let v: Vec<f64> = u.iter().map(|c| c * t).collect();
            match exp_jacobian_det(m, x0, &v, 1e-10) {
                Ok(det) if det > 0.1 => last_good = t,
                _ => break,
            }
            t *= 1.25;
        }
        if last_good < best && t <= best {
            best = last_good.max(1e-3);
        }
    }
    Ok(0.5 * best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrustRadius {
    /// No gate.
    Unchecked,
    Fixed(f64),
    /// Estimated with [`estimate_trust_radius`] (cap 10).
    Auto,
}

impl TrustRadius {
    fn resolve(&self, m: &ManifoldSpec, x0: &[f64]) -> Result<Option<f64>> {
        match *self {
            TrustRadius::Unchecked => Ok(None),
            TrustRadius::Fixed(r) => Ok(Some(r)),
            TrustRadius::Auto => estimate_trust_radius(m, x0, 10.0).map(Some),
        }
    }

    fn violated(&self, m: &ManifoldSpec, x0: &[f64], vs: &[&[f64]]) -> Result<bool> {
        let Some(r) = self.resolve(m, x0)? else { return Ok(false) };
        for v in vs {
            if m.norm(x0, v)? > r {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

#[derive(Debug, Clone)]
pub enum Generator {
    Vector(Vec<f64>),
    Field(VectorField),
}

impl Generator {
    pub fn value_at(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Generator::Vector(v) => v.clone(),
            Generator::Field(f) => f.eval(x),
        }
    }

    /// A bare vector becomes the chart-constant field.
    pub fn as_field(&self) -> VectorField {
        match self {
            Generator::Vector(v) => VectorField::constant(v.clone()),
            Generator::Field(f) => f.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeodesicExpansion {
    pub base: Vec<f64>,
    pub generator: Generator,
    /// Truncation order, 1..=3.
    pub order: usize,
    pub trust: TrustRadius,
}

impl GeodesicExpansion {
    pub fn new(base: Vec<f64>, v: Vec<f64>, order: usize) -> Self {
        Self { base, generator: Generator::Vector(v), order, trust: TrustRadius::Auto }
    }

    pub fn with_trust(mut self, trust: TrustRadius) -> Self {
        self.trust = trust;
        self
    }
}

/// Individual orders of the expansion; `point = base + linear + quadratic + cubic`.
#[derive(Debug, Clone)]
pub struct ExpansionTerms {
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
    pub cubic: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub point: Vec<f64>,
    pub terms: ExpansionTerms,
    pub trust_violated: bool,
}

/// Terms of the expansion from a precomputed curvature bundle.
pub fn expansion_terms(curv: &CurvatureBundle, v: &[f64]) -> ExpansionTerms {
    let n = curv.dim();
    let g = &curv.gamma;
    let mut quadratic = vec![0.0; n];
    let mut cubic = vec![0.0; n];
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let vbc = v[b] * v[c];
                quadratic[a] -= 0.5 * g[(a, b, c)] * vbc;
                for d in 0..n {
                    let mut k = -curv.dgamma[(a, b, c, d)];
                    for e in 0..n {
                        k += 2.0 * g[(a, d, e)] * g[(e, b, c)];
                    }
                    cubic[a] += k * vbc * v[d] / 6.0;
                }
            }
        }
    }
    ExpansionTerms { linear: v.to_vec(), quadratic, cubic }
}

pub fn truncated_point(x0: &[f64], t: &ExpansionTerms, order: usize) -> Vec<f64> {
    (0..x0.len())
        .map(|a| {
            let mut p = x0[a] + t.linear[a];
            if order >= 2 {
                p += t.quadratic[a];
            }
            if order >= 3 {
                p += t.cubic[a];
            }
            p
        })
        .collect()
}

pub fn expand3(m: &ManifoldSpec, e: &GeodesicExpansion) -> Result<Expansion> {
    if !(1..=3).contains(&e.order) {
        return Err(GeoError::Precondition(format!("expansion order {} outside 1..=3", e.order)));
    }
    let v = e.generator.value_at(&e.base);
    let curv = m.curvature_at(&e.base)?;
    let terms = expansion_terms(&curv, &v);
    let point = truncated_point(&e.base, &terms, e.order);
    let trust_violated = e.trust.violated(m, &e.base, &[&v])?;
    Ok(Expansion { point, terms, trust_violated })
}

/// The four pieces of the composition law.
#[derive(Debug, Clone)]
pub struct ComposeTerms {
    /// `v1 + v2`
    pub sum: Vec<f64>,
    /// `v1^b ∇_b v2^a`
    pub transport: Vec<f64>,
    /// `½ v1^b v1^c ∇_c∇_b v2^a`
    pub second_derivative: Vec<f64>,
    /// `⅓ R^a_bcd (v2^b + ½ v1^b) v2^c v1^d`
    pub curvature: Vec<f64>,
}

impl ComposeTerms {
    pub fn total(&self) -> Vec<f64> {
        (0..self.sum.len())
            .map(|a| self.sum[a] + self.transport[a] + self.second_derivative[a] + self.curvature[a])
            .collect()
    }
}

/// Composition law from precomputed curvature and covariant jet of `v2`.
pub fn compose_terms(curv: &CurvatureBundle, v1: &[f64], v2: &CovariantJet) -> ComposeTerms {
    let n = curv.dim();
    let w = &v2.value;
    let mut sum = vec![0.0; n];
    let mut transport = vec![0.0; n];
    let mut second = vec![0.0; n];
    let mut curvature = vec![0.0; n];
    for a in 0..n {
        sum[a] = v1[a] + w[a];
        for b in 0..n {
            transport[a] += v1[b] * v2.first[(a, b)];
            for c in 0..n {
                second[a] += 0.5 * v1[b] * v1[c] * v2.second[(a, b, c)];
                for d in 0..n {
                    curvature[a] += curv.riemann[(a, b, c, d)] * (w[b] + 0.5 * v1[b]) * w[c] * v1[d] / 3.0;
                }
            }
        }
    }
    ComposeTerms { sum, transport, second_derivative: second, curvature }
}

#[derive(Debug, Clone)]
pub struct Composition {
    pub vector: Vec<f64>,
    pub terms: ComposeTerms,
    pub trust_violated: bool,
}

/// Generator of `v2 ∘ v1` at `x0`: first follow `v1` from `x0`, then the
/// field `v2` from the endpoint.
pub fn compose3(m: &ManifoldSpec, x0: &[f64], v1: &[f64], v2: &VectorField, trust: TrustRadius) -> Result<Composition> {
    let curv = m.curvature_at(x0)?;
    let jet = covariant_jet_from_partials(&curv, &v2.jet(x0));
    let terms = compose_terms(&curv, v1, &jet);
    let trust_violated = trust.violated(m, x0, &[v1, &jet.value])?;
    Ok(Composition { vector: terms.total(), terms, trust_violated })
}

#[derive(Debug, Clone)]
pub struct Inversion {
    /// `expand3(x0, v)`.
    pub endpoint: Vec<f64>,
    /// Generator based at the endpoint that leads back to `x0`.
    pub inverse: Vec<f64>,
}

/// Inverse of an expansion: minus the series for the endpoint velocity,
/// `w = −(v − Γvv + ½(−∂Γ + 2ΓΓ)vvv)` at `x0`.
pub fn invert3(m: &ManifoldSpec, x0: &[f64], v: &[f64]) -> Result<Inversion> {
    let curv = m.curvature_at(x0)?;
    let t = expansion_terms(&curv, v);
    let endpoint = truncated_point(x0, &t, 3);
    // d/dθ of (θ v − ½θ² Γvv + ⅙θ³ K vvv) at θ = 1
    let inverse = (0..v.len()).map(|a| -(t.linear[a] + 2.0 * t.quadratic[a] + 3.0 * t.cubic[a])).collect();
    Ok(Inversion { endpoint, inverse })
}

/// Riemann normal coordinates about a base point.
#[derive(Debug, Clone)]
pub struct NormalChart {
    manifold: ManifoldSpec,
    base: Vec<f64>,
    /// Columns: an `h`-orthonormal frame at the base point.
    frame: DMatrix<f64>,
    frame_inv: DMatrix<f64>,
    radius: f64,
    tol: f64,
}

pub fn normal_chart(m: &ManifoldSpec, x0: &[f64], radius: f64) -> Result<NormalChart> {
    let h0 = m.metric_at(x0)?.metric;
    let frame = orthonormal_frame(&h0).ok_or_else(|| GeoError::SignatureViolation { point: x0.to_vec() })?;
    let frame_inv = frame.clone().try_inverse().ok_or_else(|| GeoError::SignatureViolation { point: x0.to_vec() })?;
    Ok(NormalChart { manifold: m.clone(), base: x0.to_vec(), frame, frame_inv, radius, tol: 1e-13 })
}

impl NormalChart {
    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn to_normal(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = log_map(&self.manifold, &self.base, x, 1e-12)?;
        Ok((&self.frame_inv * DVector::from_column_slice(&v)).iter().copied().collect())
    }

    pub fn from_normal(&self, y: &[f64]) -> Result<Vec<f64>> {
        let v = &self.frame * DVector::from_column_slice(y);
        Ok(shoot(&self.manifold, &self.base, v.as_slice(), 1.0, self.tol)?.point)
    }

    /// Pullback metric `Jᵀ h J` at normal coordinates `y`, with `J = ∂x/∂Y`
    /// by 4th-order differences of the inverse map.
    pub fn metric_at(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let n = y.len();
        let s = 1e-3;
        let x = self.from_normal(y)?;
        let mut jac = DMatrix::zeros(n, n);
        for b in 0..n {
            let mut pts = Vec::with_capacity(4);
            for o in [2.0, 1.0, -1.0, -2.0] {
                let mut yy = y.to_vec();
                yy[b] += o * s;
                pts.push(self.manifold.chart_difference(&x, &self.from_normal(&yy)?));
            }
            for a in 0..n {
                jac[(a, b)] = (-pts[0][a] + 8.0 * pts[1][a] - 8.0 * pts[2][a] + pts[3][a]) / (12.0 * s);
            }
        }
        let h = self.manifold.metric_at(&x)?.metric;
        Ok(jac.transpose() * h * jac)
    }

    /// The chart as a manifold over the box `|Y_i| ≤ radius`. Evaluation
    /// failures surface as non-finite metrics.
    pub fn as_manifold(&self) -> ManifoldSpec {
        let me = self.clone();
        let n = self.base.len();
        ManifoldSpec::new(
            format!("{}_normal", self.manifold.name()),
            n,
            move |y| me.metric_at(y).unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN)),
            vec![crate::manifold::AxisDomain::Interval { lo: -self.radius, hi: self.radius }; n],
        )
        .with_fd_step(1e-2)
    }
}

/// Chart distance `|a − b|_∞` (periodic-aware).
pub fn chart_distance(m: &ManifoldSpec, a: &[f64], b: &[f64]) -> f64 {
    m.chart_difference(a, b).iter().fold(0.0, |acc, d| acc.max(d.abs()))
}

/// Metric length of the chart displacement `b − a`, measured at `a`.
pub fn metric_distance(m: &ManifoldSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    let d = m.chart_difference(a, b);
    let h = m.metric_at(a)?.metric;
    Ok(quadratic_form(&h, &d, &d).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn euclidean_geodesics_are_straight_lines() {
        let m = ManifoldSpec::euclidean(3);
        let s = shoot(&m, &[1.0, 2.0, 3.0], &[0.5, -1.0, 0.25], 1.0, 1e-12).unwrap();
        assert_relative_eq!(s.point.as_slice(), [1.5, 1.0, 3.25].as_slice(), epsilon = 1e-13);
        let v = log_map(&m, &[0.0, 0.0, 0.0], &[1.0, -2.0, 0.5], 1e-12).unwrap();
        assert_eq!(v, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sphere_meridian_reaches_the_collar() {
        // from the equator, travel π/2 − 0.1 along a meridian: lands on the collar
        let m = ManifoldSpec::unit_sphere();
        let arc = FRAC_PI_2 - 0.1;
        let s = shoot(&m, &[FRAC_PI_2, 0.3], &[-1.0, 0.0], arc, 1e-12).unwrap();
        assert_relative_eq!(s.point[0], 0.1, epsilon = 1e-10);
        assert_relative_eq!(s.point[1], 0.3, epsilon = 1e-12);
        assert!(s.norm_drift < 1e-11);
        // a full π/2 leaves the chart
        let e = shoot(&m, &[FRAC_PI_2, 0.3], &[-1.0, 0.0], FRAC_PI_2, 1e-12).unwrap_err();
        match e {
            GeoError::DomainExit { parameter: Some(t), .. } => assert!(t > arc - 0.05 && t <= FRAC_PI_2),
            other => panic!("{other:?}"),
        }
        // without the collar the pole itself is reached (θ = 0 is singular, so stop just short)
        let whole = ManifoldSpec::sphere(1.0, 1e-4);
        let s = shoot(&whole, &[FRAC_PI_2, 0.0], &[-1.0, 0.0], FRAC_PI_2 - 0.01, 1e-12).unwrap();
        assert_relative_eq!(s.point[0], 0.01, epsilon = 1e-9);
    }

    #[test]
    fn poincare_vertical_geodesic_is_exponential() {
        let m = ManifoldSpec::poincare_half_plane();
        let s = shoot(&m, &[0.0, 1.0], &[0.0, 1.0], 2f64.ln(), 1e-12).unwrap();
        assert_relative_eq!(s.point.as_slice(), [0.0, 2.0].as_slice(), epsilon = 1e-10);
        assert!(s.norm_drift < 1e-10);
    }

    #[test]
    fn sphere_log_map_along_equator() {
        let m = ManifoldSpec::unit_sphere();
        let v = log_map(&m, &[FRAC_PI_2, 0.1], &[FRAC_PI_2, 0.4], 1e-11).unwrap();
        assert!(v[0].abs() < 1e-9);
        assert_relative_eq!(m.norm(&[FRAC_PI_2, 0.1], &v).unwrap(), 0.3, epsilon = 1e-9);
    }

    #[test]
    fn log_map_inverts_shoot_on_sphere() {
        let m = ManifoldSpec::unit_sphere();
        let x0 = [1.1, 0.2];
        for (i, v) in [[0.1, 0.05], [-0.2, 0.3], [0.05, -0.4], [0.3, 0.0]].iter().enumerate() {
            let x1 = shoot(&m, &x0, v, 1.0, 1e-13).unwrap().point;
            let w = log_map(&m, &x0, &x1, 1e-12).unwrap();
            for a in 0..2 {
                assert!((w[a] - v[a]).abs() < 1e-10, "case {i}: {w:?} vs {v:?}");
            }
        }
    }

    #[test]
    fn log_map_without_a_geodesic_in_the_chart_fails() {
        // both great-circle arcs joining these points cross a pole, outside the chart
        let m = ManifoldSpec::unit_sphere();
        let r = log_map(&m, &[0.2, 0.0], &[0.2, PI], 1e-10);
        assert!(r.is_err());
    }

    #[test]
    fn euclidean_expansion_is_exact() {
        let m = ManifoldSpec::euclidean(2);
        for order in 1..=3 {
            let e = GeodesicExpansion::new(vec![1.0, 1.0], vec![0.3, -0.7], order).with_trust(TrustRadius::Unchecked);
            let r = expand3(&m, &e).unwrap();
            assert_eq!(r.point, vec![1.3, 0.30000000000000004]);
        }
    }

    #[test]
    fn order_out_of_range_is_rejected() {
        let m = ManifoldSpec::euclidean(2);
        let e = GeodesicExpansion::new(vec![0.0, 0.0], vec![0.1, 0.1], 4);
        assert!(expand3(&m, &e).is_err());
    }

    #[test]
    fn trust_violation_is_flagged_not_fatal() {
        let m = ManifoldSpec::unit_sphere();
        let e = GeodesicExpansion::new(vec![1.2, 0.0], vec![0.4, 0.0], 3).with_trust(TrustRadius::Fixed(0.1));
        let r = expand3(&m, &e).unwrap();
        assert!(r.trust_violated);
        let e = e.with_trust(TrustRadius::Fixed(1.0));
        assert!(!expand3(&m, &e).unwrap().trust_violated);
    }

    #[test]
    fn auto_trust_radius_is_bounded_by_the_collar_on_sphere() {
        let m = ManifoldSpec::unit_sphere();
        let r = estimate_trust_radius(&m, &[FRAC_PI_2, 0.0], 10.0).unwrap();
        // meridian directions leave the chart after π/2 − 0.1
        assert!(r > 0.4 && r <= 0.5 * (FRAC_PI_2 - 0.1) + 1e-9, "{r}");
        let flat = estimate_trust_radius(&ManifoldSpec::euclidean(2), &[0.0, 0.0], 10.0).unwrap();
        assert_relative_eq!(flat, 5.0);
    }

    #[test]
    fn identity_and_flat_composition() {
        let m = ManifoldSpec::unit_sphere();
        let x0 = [1.0, 0.3];
        let v1 = [0.05, -0.02];
        let c = compose3(&m, &x0, &v1, &VectorField::zero(2), TrustRadius::Unchecked).unwrap();
        assert_eq!(c.vector, v1.to_vec());
        let e = ManifoldSpec::euclidean(2);
        let c = compose3(&e, &[0.0, 0.0], &v1, &VectorField::constant(vec![0.1, 0.2]), TrustRadius::Unchecked).unwrap();
        assert_relative_eq!(c.vector.as_slice(), [0.15, 0.18].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn inverse_of_zero_and_flat() {
        let m = ManifoldSpec::unit_sphere();
        let inv = invert3(&m, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(inv.inverse, vec![0.0, 0.0]);
        let e = ManifoldSpec::euclidean(2);
        let inv = invert3(&e, &[1.0, 0.0], &[0.2, -0.1]).unwrap();
        assert_eq!(inv.inverse, vec![-0.2, 0.1]);
    }

    #[test]
    fn inverse_matches_reversed_endpoint_velocity() {
        let m = ManifoldSpec::unit_sphere();
        let x0 = [1.0, 0.0];
        let v = [0.03, 0.04];
        let inv = invert3(&m, &x0, &v).unwrap();
        let shot = shoot(&m, &x0, &v, 1.0, 1e-13).unwrap();
        for a in 0..2 {
            assert!((inv.inverse[a] + shot.velocity[a]).abs() < 1e-5);
        }
    }

    #[test]
    fn normal_chart_origin_and_metric() {
        let m = ManifoldSpec::unit_sphere();
        let x0 = [1.0, 0.5];
        let chart = normal_chart(&m, &x0, 0.3).unwrap();
        let y = chart.to_normal(&x0).unwrap();
        assert!(y.iter().all(|c| c.abs() < 1e-12));
        let h = chart.metric_at(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(h, DMatrix::identity(2, 2), epsilon = 1e-9);
        // round trip away from the origin
        let x = chart.from_normal(&[0.1, -0.05]).unwrap();
        let back = chart.to_normal(&x).unwrap();
        assert_relative_eq!(back.as_slice(), [0.1, -0.05].as_slice(), epsilon = 1e-10);
    }

    #[test]
    fn normal_chart_geodesics_are_straight_and_gamma_vanishes_at_origin() {
        let m = ManifoldSpec::unit_sphere();
        let chart = normal_chart(&m, &[1.2, 0.0], 0.3).unwrap();
        let u = [0.6, 0.8];
        let v = chart.frame() * DVector::from_column_slice(&u);
        for s in [0.05, 0.1, 0.2] {
            let x = shoot(&m, &[1.2, 0.0], &[v[0] * s, v[1] * s], 1.0, 1e-13).unwrap().point;
            let y = chart.to_normal(&x).unwrap();
            assert_relative_eq!(y.as_slice(), [u[0] * s, u[1] * s].as_slice(), epsilon = 1e-9);
        }
        let nm = chart.as_manifold();
        let gamma = nm.christoffel_at(&[0.0, 0.0]).unwrap();
        // fd tolerance for a shot-based metric at step 1e-2: 10 × step² × |R|
        assert!(gamma.max_abs() < 10.0 * 1e-4, "{}", gamma.max_abs());
    }
}
