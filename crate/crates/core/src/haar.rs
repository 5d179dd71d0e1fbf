//! Log-densities of the right- and left-invariant measures on geodesic
//! expansions and of the diffeomorphism measure, with lattice Jacobian
//! verifications of the determinant identities behind them.
//!
//! With `v` a generator at `x0`, the exponents are
//!
//! ```text
//! right:  −⅙ R_ab v^a v^b
//! left:   −∇_a v^a + ½ ∇_b v^a ∇_a v^b + ⅓ R_ab v^a v^b
//! ```
//!
//! and the volume prefactors `|h|^{k/2}` carry `k = 1` (right, left) or
//! `k = (n+2)/2` (diffeomorphisms).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GeoError, Result};
use crate::field::{PartialJet, VectorField};
use crate::geodesic::{compose_terms, expansion_terms, normal_chart, truncated_point};
use crate::grid::ParameterGrid;
use crate::manifold::{covariant_jet, covariant_jet_from_partials, CurvatureBundle, ManifoldSpec};
use crate::tensor::{Tensor3, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    Right,
    Left,
    Diffeo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightTerm {
    pub name: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureWeight {
    pub log_density: f64,
    pub base: Vec<f64>,
    pub kind: MeasureKind,
    pub includes_volume_factor: bool,
    /// Individual exponent terms; the volume factor, if folded in, is listed last.
    pub terms: Vec<WeightTerm>,
}

impl MeasureWeight {
    fn assemble(base: &[f64], kind: MeasureKind, mut terms: Vec<WeightTerm>, volume: Option<f64>) -> Result<Self> {
        if let Some(v) = volume {
            terms.push(WeightTerm { name: "volume", value: v });
        }
        let log_density: f64 = terms.iter().map(|t| t.value).sum();
        if !log_density.is_finite() {
            return Err(GeoError::NonFinite("measure weight"));
        }
        Ok(Self { log_density, base: base.to_vec(), kind, includes_volume_factor: volume.is_some(), terms })
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

fn ricci_form(curv: &CurvatureBundle, u: &[f64], v: &[f64]) -> f64 {
    crate::manifold::quadratic_form(&curv.ricci, u, v)
}

/// `−⅙ R_ab v^a v^b`.
pub fn right_exponent(curv: &CurvatureBundle, v: &[f64]) -> f64 {
    -ricci_form(curv, v, v) / 6.0
}

/// Terms `[−∇_a v^a, ½ ∇_b v^a ∇_a v^b, ⅓ R_ab v^a v^b]` from the value and
/// first covariant derivative (`first[(a, b)] = ∇_b v^a`).
pub fn left_exponent_terms(curv: &CurvatureBundle, v: &[f64], first: &DMatrix<f64>) -> [f64; 3] {
    let div = first.trace();
    let quad = (first * first).trace();
    [-div, 0.5 * quad, ricci_form(curv, v, v) / 3.0]
}

pub fn left_exponent(curv: &CurvatureBundle, v: &[f64], first: &DMatrix<f64>) -> f64 {
    left_exponent_terms(curv, v, first).iter().sum()
}

fn volume(m: &ManifoldSpec, x0: &[f64], k: f64, include: bool) -> Result<Option<f64>> {
    if include {
        Ok(Some(0.5 * k * m.metric_at(x0)?.log_det))
    } else {
        Ok(None)
    }
}

pub fn right_log_weight(m: &ManifoldSpec, x0: &[f64], v: &[f64], include_volume: bool) -> Result<MeasureWeight> {
    let curv = m.curvature_at(x0)?;
    let terms = vec![WeightTerm { name: "curvature", value: right_exponent(&curv, v) }];
    MeasureWeight::assemble(x0, MeasureKind::Right, terms, volume(m, x0, 1.0, include_volume)?)
}

fn left_terms(m: &ManifoldSpec, x0: &[f64], v: &VectorField) -> Result<Vec<WeightTerm>> {
    let jet = covariant_jet(m, v, x0)?;
    let curv = m.curvature_at(x0)?;
    let [div, quad, ric] = left_exponent_terms(&curv, &jet.value, &jet.first);
    Ok(vec![
        WeightTerm { name: "divergence", value: div },
        WeightTerm { name: "derivative_square", value: quad },
        WeightTerm { name: "curvature", value: ric },
    ])
}

pub fn left_log_weight(m: &ManifoldSpec, x0: &[f64], v: &VectorField, include_volume: bool) -> Result<MeasureWeight> {
    let terms = left_terms(m, x0, v)?;
    MeasureWeight::assemble(x0, MeasureKind::Left, terms, volume(m, x0, 1.0, include_volume)?)
}

/// Same exponent as the left measure with the `|h|^{(n+2)/4}` prefactor.
pub fn diffeo_log_weight(m: &ManifoldSpec, x0: &[f64], v: &VectorField, include_volume: bool) -> Result<MeasureWeight> {
    let terms = left_terms(m, x0, v)?;
    let k = (m.dim() as f64 + 2.0) / 2.0;
    MeasureWeight::assemble(x0, MeasureKind::Diffeo, terms, volume(m, x0, k, include_volume)?)
}

/// Periodic lattice over a coordinate patch. The first-derivative operator is
/// the 4th-order central difference, which is antisymmetric, so its trace
/// vanishes.
#[derive(Debug, Clone)]
pub struct FieldGrid {
    pub lattice: ParameterGrid,
}

impl FieldGrid {
    /// `counts` points per axis on the box `center ± half_widths`.
    pub fn patch(center: &[f64], half_widths: &[f64], counts: &[usize]) -> Result<Self> {
        let periods: Vec<f64> = half_widths.iter().map(|w| 2.0 * w).collect();
        let origin: Vec<f64> = center.iter().zip(half_widths).map(|(c, w)| c - w).collect();
        let lattice = ParameterGrid::with_origin(counts.to_vec(), periods, origin)?;
        let g = Self { lattice };
        g.check_antisymmetry()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.lattice.points()
    }

    /// Dense first-derivative matrix along `axis`.
    pub fn derivative_matrix(&self, axis: usize) -> DMatrix<f64> {
        let n = self.len();
        let mut d = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.lattice.derivative(&e, axis, 1);
            for i in 0..n {
                d[(i, j)] = col[i];
            }
        }
        d
    }

    fn check_antisymmetry(&self) -> Result<()> {
        for a in 0..self.dim() {
            let d = self.derivative_matrix(a);
            let defect = (&d + d.transpose()).abs().max();
            if defect > 1e-12 * d.abs().max() {
                return Err(GeoError::Precondition(format!("lattice derivative along axis {a} is not antisymmetric")));
            }
        }
        Ok(())
    }

    /// Samples `[point][component]`.
    pub fn sample(&self, v: &VectorField) -> Vec<Vec<f64>> {
        self.points().iter().map(|p| v.eval(p)).collect()
    }

    /// Partial jets of lattice data `u` (flat, index `k·n + a`) from the
    /// lattice derivative; second derivatives are products of first ones.
    fn lattice_jets(&self, u: &[f64]) -> Vec<PartialJet> {
        let n = self.dim();
        let npts = self.len();
        let comp: Vec<Vec<f64>> = (0..n).map(|a| (0..npts).map(|k| u[k * n + a]).collect()).collect();
        let d1: Vec<Vec<Vec<f64>>> =
            comp.iter().map(|c| (0..n).map(|b| self.lattice.derivative(c, b, 1)).collect()).collect();
        let d2: Vec<Vec<Vec<Vec<f64>>>> = d1
            .iter()
            .map(|per_b| per_b.iter().map(|db| (0..n).map(|c| self.lattice.derivative(db, c, 1)).collect()).collect())
            .collect();
        (0..npts)
            .map(|k| PartialJet {
                value: (0..n).map(|a| comp[a][k]).collect(),
                jacobian: DMatrix::from_fn(n, n, |a, b| d1[a][b][k]),
                hessian: Tensor3::from_fn(n, |a, b, c| 0.5 * (d2[a][b][c][k] + d2[a][c][b][k])),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Right,
    Left,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianCheck {
    pub side: Side,
    pub numeric_logdet: f64,
    pub formula_logdet: f64,
    pub residual: f64,
    /// Right side: raw lattice log-determinant before the flat-reference and
    /// volume-ratio corrections.
    pub raw_logdet: f64,
    /// Right side: log-determinant of the same lattice map with Γ = R = 0.
    pub flat_reference_logdet: f64,
    /// Right side: `Σ ½ log(h(x1)/h(x))`, the Christoffel-diagonal trace.
    pub volume_ratio_logdet: f64,
    /// Invariance defect of the measure itself (see module docs).
    pub invariance_residual: f64,
}

fn log_abs_det(m: DMatrix<f64>) -> Result<f64> {
    let lu = m.lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)].abs();
        if d == 0.0 || !d.is_finite() {
            return Err(GeoError::Precondition("singular lattice Jacobian".into()));
        }
        acc += d.ln();
    }
    Ok(acc)
}

fn flat_bundle(n: usize) -> CurvatureBundle {
    CurvatureBundle {
        metric: DMatrix::identity(n, n),
        inverse: DMatrix::identity(n, n),
        gamma: Tensor3::zeros(n),
        dgamma: Tensor4::zeros(n),
        riemann: Tensor4::zeros(n),
        ricci: DMatrix::zeros(n, n),
    }
}

/// Dense Jacobian of `f: ℝ^m → ℝ^m` by central differences (exact for
/// quadratic maps up to rounding).
fn dense_jacobian(f: &(dyn Fn(&[f64]) -> Vec<f64> + Sync), u: &[f64], step: f64) -> DMatrix<f64> {
    let m = u.len();
    let cols: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[j] += step;
            um[j] -= step;
            let fp = f(&up);
            let fm = f(&um);
            fp.iter().zip(&fm).map(|(p, q)| (p - q) / (2.0 * step)).collect()
        })
        .collect();
    DMatrix::from_fn(m, m, |i, j| cols[j][i])
}

/// Compares the lattice log-determinant of the composition map
/// `Ẋ = Ẋ₂ ∘ Ẋ₁` against the closed-form exponent.
///
/// Right side: the Jacobian `δẊ/δẊ₂` over all lattice degrees of freedom,
/// with `δ(x,x) ↦ 1/w` so the formula becomes a plain sum of
/// `⅓ R_ab Ẋ₂^a Ẋ₁^b + ⅙ R_ab Ẋ₁^a Ẋ₁^b`. The lattice shift operators have
/// traces of their own at second order, which are removed by dividing by the
/// same map built with Γ = R = 0; the Christoffel-diagonal trace
/// `Γ^a_ca Ẋ₁^c δ(x,x)` is non-covariant and removed as the volume ratio
/// `½ log(h(x1)/h(x))`.
///
/// Left side: `δẊ/δẊ₁` is pointwise, so it is a product of `n×n`
/// determinants compared with `L(Ẋ₁) − L(Ẋ)` where `L` is the left exponent.
pub fn product_jacobian_check(
    m: &ManifoldSpec,
    grid: &FieldGrid,
    v1: &VectorField,
    v2: &VectorField,
    side: Side,
) -> Result<JacobianCheck> {
    let n = m.dim();
    if grid.dim() != n {
        return Err(GeoError::Precondition("lattice and manifold dimensions differ".into()));
    }
    let points = grid.points();
    let curvs: Vec<CurvatureBundle> = points.par_iter().map(|p| m.curvature_at(p)).collect::<Result<_>>()?;
    let v1s = grid.sample(v1);
    match side {
        Side::Right => right_check(m, grid, &points, &curvs, &v1s, v2),
        Side::Left => left_check(m, &points, &curvs, &v1s, v1, v2),
    }
}

fn right_check(
    m: &ManifoldSpec,
    grid: &FieldGrid,
    points: &[Vec<f64>],
    curvs: &[CurvatureBundle],
    v1s: &[Vec<f64>],
    v2: &VectorField,
) -> Result<JacobianCheck> {
    let n = m.dim();
    let u: Vec<f64> = grid.sample(v2).into_iter().flatten().collect();
    let flat = flat_bundle(n);
    let composed = |u: &[f64], curved: bool| -> Vec<f64> {
        let jets = grid.lattice_jets(u);
        jets.iter()
            .enumerate()
            .flat_map(|(k, jet)| {
                let c = if curved { &curvs[k] } else { &flat };
                compose_terms(c, &v1s[k], &covariant_jet_from_partials(c, jet)).total()
            })
            .collect()
    };
    let step = 1e-3 * u.iter().fold(1e-3f64, |a, b| a.max(b.abs()));
    let raw = log_abs_det(dense_jacobian(&|x: &[f64]| composed(x, true), &u, step))?;
    let reference = log_abs_det(dense_jacobian(&|x: &[f64]| composed(x, false), &u, step))?;
    let mut volume_ratio = 0.0;
    let mut formula = 0.0;
    let mut invariance = 0.0;
    let total = composed(&u, true);
    for (k, p) in points.iter().enumerate() {
        let c = &curvs[k];
        let x1 = truncated_point(p, &expansion_terms(c, &v1s[k]), 3);
        volume_ratio += 0.5 * (m.metric_at(&x1)?.log_det - m.metric_at(p)?.log_det);
        let w2 = &u[k * n..(k + 1) * n];
        formula += ricci_form(c, w2, &v1s[k]) / 3.0 + ricci_form(c, &v1s[k], &v1s[k]) / 6.0;
        invariance += right_exponent(c, &total[k * n..(k + 1) * n]) - right_exponent(c, w2);
    }
    let numeric = raw - reference - volume_ratio;
    Ok(JacobianCheck {
        side: Side::Right,
        numeric_logdet: numeric,
        formula_logdet: formula,
        residual: numeric - formula,
        raw_logdet: raw,
        flat_reference_logdet: reference,
        volume_ratio_logdet: volume_ratio,
        invariance_residual: invariance + numeric,
    })
}

fn composed_field(m: &ManifoldSpec, v1: &VectorField, v2: &VectorField) -> VectorField {
    let (m, v1, v2) = (m.clone(), v1.clone(), v2.clone());
    let n = m.dim();
    VectorField::from_fn(n, move |x| {
        let curv = match m.curvature_at(x) {
            Ok(c) => c,
            Err(_) => return vec![f64::NAN; n],
        };
        let jet = covariant_jet_from_partials(&curv, &v2.jet(x));
        compose_terms(&curv, &v1.eval(x), &jet).total()
    })
}

fn left_check(
    m: &ManifoldSpec,
    points: &[Vec<f64>],
    curvs: &[CurvatureBundle],
    v1s: &[Vec<f64>],
    v1: &VectorField,
    v2: &VectorField,
) -> Result<JacobianCheck> {
    let n = m.dim();
    let total = composed_field(m, v1, v2);
    let per_point: Vec<(f64, f64)> = points
        .par_iter()
        .enumerate()
        .map(|(k, p)| -> Result<(f64, f64)> {
            let c = &curvs[k];
            let jet2 = covariant_jet_from_partials(c, &v2.jet(p));
            let f = |w: &[f64]| compose_terms(c, w, &jet2).total();
            let scale = v1s[k].iter().fold(1e-3f64, |a, b| a.max(b.abs()));
            let block = dense_jacobian(&f, &v1s[k], 1e-3 * scale);
            let numeric = log_abs_det(block)?;
            let first1 = covariant_jet(m, v1, p)?.first;
            let xv = total.eval(p);
            let jac = total.jacobian_at(p);
            let first = DMatrix::from_fn(n, n, |a, b| {
                jac[(a, b)] + (0..n).map(|e| c.gamma[(a, b, e)] * xv[e]).sum::<f64>()
            });
            let formula = left_exponent(c, &v1s[k], &first1) - left_exponent(c, &xv, &first);
            Ok((numeric, formula))
        })
        .collect::<Result<_>>()?;
    let numeric: f64 = per_point.iter().map(|p| p.0).sum();
    let formula: f64 = per_point.iter().map(|p| p.1).sum();
    Ok(JacobianCheck {
        side: Side::Left,
        numeric_logdet: numeric,
        formula_logdet: formula,
        residual: numeric - formula,
        raw_logdet: numeric,
        flat_reference_logdet: 0.0,
        volume_ratio_logdet: 0.0,
        invariance_residual: numeric - formula,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalMetricFit {
    /// Fitted `C_abcd` with `h^Y_ab(Y) − δ_ab ≈ C_abcd Y^c Y^d`, symmetric in `(c, d)`.
    #[serde(skip)]
    pub coefficient: Tensor4,
    /// `−⅓ R_acbd` symmetrized over `(c, d)`, in the orthonormal frame.
    #[serde(skip)]
    pub target: Tensor4,
    pub max_deviation: f64,
    /// Largest violation of `C_abcd = C_bacd`.
    pub symmetry_defect: f64,
    pub fit_rms: f64,
    pub condition: f64,
    pub samples: usize,
}

/// Least-squares fit of the normal-coordinate metric near `x0` to a
/// polynomial of degrees 2..4 in `Y`, returning the quadratic coefficient.
pub fn normal_metric_expansion_check(m: &ManifoldSpec, x0: &[f64], radius: f64) -> Result<NormalMetricFit> {
    let n = m.dim();
    let chart = normal_chart(m, x0, radius)?;
    // sample rings through the ball
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let dirs = sphere_directions(n, 16);
    for frac in [0.25, 0.5, 0.75, 1.0] {
        for d in &dirs {
            ys.push(d.iter().map(|c| c * frac * radius).collect());
        }
    }
    let monos: Vec<Vec<usize>> = (2..=4).flat_map(|deg| monomials(n, deg)).collect();
    let design = DMatrix::from_fn(ys.len(), monos.len(), |i, j| {
        monos[j].iter().map(|&c| ys[i][c]).product::<f64>() / radius.powi(monos[j].len() as i32)
    });
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = smax / smin;
    if !condition.is_finite() || condition > 1e10 {
        return Err(GeoError::Sampling(format!("normal-metric fit is ill-conditioned ({condition:.3e})")));
    }
    let metrics: Vec<DMatrix<f64>> = ys.par_iter().map(|y| chart.metric_at(y)).collect::<Result<_>>()?;
    let mut coefficient = Tensor4::zeros(n);
    let mut sq = 0.0;
    for a in 0..n {
        for b in 0..n {
            let rhs = DVector::from_fn(ys.len(), |i, _| metrics[i][(a, b)] - if a == b { 1.0 } else { 0.0 });
            let sol = svd.solve(&rhs, 0.0).map_err(|e| GeoError::Sampling(e.to_string()))?;
            sq += (&design * &sol - &rhs).norm_squared();
            for (j, mono) in monos.iter().enumerate() {
                if mono.len() != 2 {
                    continue;
                }
                let coef = sol[j] / radius.powi(2);
                let (c, d) = (mono[0], mono[1]);
                if c == d {
                    coefficient[(a, b, c, d)] = coef;
                } else {
                    coefficient[(a, b, c, d)] = 0.5 * coef;
                    coefficient[(a, b, d, c)] = 0.5 * coef;
                }
            }
        }
    }
    let curv = m.curvature_at(x0)?;
    let lowered = curv.riemann_lowered();
    let e = chart.frame();
    let rf = Tensor4::from_fn(n, |a, b, c, d| {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for t in 0..n {
                        s += e[(p, a)] * e[(q, b)] * e[(r, c)] * e[(t, d)] * lowered[(p, q, r, t)];
                    }
                }
            }
        }
        s
    });
    let target = Tensor4::from_fn(n, |a, b, c, d| -(rf[(a, c, b, d)] + rf[(a, d, b, c)]) / 6.0);
    let mut max_deviation: f64 = 0.0;
    let mut symmetry_defect: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                for d in 0..n {
                    max_deviation = max_deviation.max((coefficient[(a, b, c, d)] - target[(a, b, c, d)]).abs());
                    symmetry_defect = symmetry_defect.max((coefficient[(a, b, c, d)] - coefficient[(b, a, c, d)]).abs());
                }
            }
        }
    }
    Ok(NormalMetricFit {
        coefficient,
        target,
        max_deviation,
        symmetry_defect,
        fit_rms: (sq / (ys.len() * n * n) as f64).sqrt(),
        condition,
        samples: ys.len(),
    })
}

/// Monomials of a given degree as sorted index lists.
fn monomials(n: usize, deg: usize) -> Vec<Vec<usize>> {
    if deg == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for m in monomials(n, deg - 1) {
        let start = m.last().copied().unwrap_or(0);
        for i in start..n {
            let mut mm = m.clone();
            mm.push(i);
            out.push(mm);
        }
    }
    out
}

/// Unit directions: a circle of `k` angles in 2-D, or coordinate, face and
/// corner diagonals in higher dimension.
fn sphere_directions(n: usize, k: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![1.0], vec![-1.0]];
    }
    if n == 2 {
        return (0..k)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * (i as f64 + 0.25) / k as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
    }
    let mut out = Vec::new();
    for mask in 1..3usize.pow(n as u32) {
        let mut v = vec![0.0; n];
        let mut m = mask;
        for c in v.iter_mut() {
            *c = (m % 3) as f64 - 1.0;
            m /= 3;
        }
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        out.push(v.iter().map(|c| c / norm).collect());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffeoCheck {
    /// `Σ [log det(δY/δẊ) − log det(δY/δX)]` over the lattice.
    pub passive_numeric_logdet: f64,
    /// `Σ (−∇_a v^a + ½ ∇_b v^a ∇_a v^b + ⅓ R_ab v^a v^b)`.
    pub covariant_formula_logdet: f64,
    /// `Σ (−Γ^a_ab v^b − ½ Γ^c_{cb;a} v^a v^b)`, present in both Jacobians.
    pub noncovariant_terms: f64,
    /// `log det(δY/δẊ)` alone, minus its closed form `−⅙ R v v + noncovariant`.
    pub generator_jacobian_residual: f64,
    /// `log det(δY/δX)` alone, minus its closed form.
    pub coordinate_jacobian_residual: f64,
    pub residual: f64,
    /// `Σ (|v| + |∇v|)³`: the size of the neglected third-order terms.
    pub truncation_scale: f64,
}

/// Diffeomorphism `Y(x) = x + v − ½Γvv + ⅙(−∂Γ + 2ΓΓ)vvv` generated by the
/// field `v`, checked against `D Y = h^{n/4} D_L` point by point.
pub fn diffeo_measure_check(m: &ManifoldSpec, grid: &FieldGrid, v: &VectorField) -> Result<DiffeoCheck> {
    let n = m.dim();
    if grid.dim() != n {
        return Err(GeoError::Precondition("lattice and manifold dimensions differ".into()));
    }
    let y_of = |x: &[f64]| -> Vec<f64> {
        match m.curvature_at(x) {
            Ok(c) => truncated_point(x, &expansion_terms(&c, &v.eval(x)), 3),
            Err(_) => vec![f64::NAN; n],
        }
    };
    let rows: Vec<[f64; 6]> = grid
        .points()
        .par_iter()
        .map(|p| -> Result<[f64; 6]> {
            let c = m.curvature_at(p)?;
            let vk = v.eval(p);
            let gen_jac = cubic_jacobian(&|w: &[f64]| truncated_point(p, &expansion_terms(&c, w), 3), &vk);
            let s = 1e-3;
            let coord_jac = fd4_jacobian(&y_of, p, s, m);
            if coord_jac.iter().any(|x| !x.is_finite()) {
                return Err(GeoError::DomainExit { point: p.clone(), parameter: None });
            }
            let ly = log_abs_det(gen_jac)?;
            let lx = log_abs_det(coord_jac)?;
            let jet = covariant_jet(m, v, p)?;
            let [div, quad, ric] = left_exponent_terms(&c, &vk, &jet.first);
            let ricci_vv = ricci_form(&c, &vk, &vk);
            let nc = noncovariant(&c, &vk);
            let vnorm = m.norm(p, &vk)?;
            let dnorm = {
                let hf = &c.metric * &jet.first;
                let ih = &c.inverse;
                (hf.transpose() * ih * &hf * ih).trace().max(0.0).sqrt()
            };
            Ok([
                ly - lx,
                div + quad + ric,
                nc,
                ly - (-ricci_vv / 6.0 + nc),
                lx - (nc - div - quad - 0.5 * ricci_vv),
                (vnorm + dnorm).powi(3),
            ])
        })
        .collect::<Result<_>>()?;
    let sum = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>();
    let (numeric, formula) = (sum(0), sum(1));
    Ok(DiffeoCheck {
        passive_numeric_logdet: numeric,
        covariant_formula_logdet: formula,
        noncovariant_terms: sum(2),
        generator_jacobian_residual: sum(3),
        coordinate_jacobian_residual: sum(4),
        residual: numeric - formula,
        truncation_scale: sum(5),
    })
}

/// `−Γ^a_ab v^b − ½ (∂_aΓ^c_cb − Γ^e_ab Γ^c_ce) v^a v^b`.
fn noncovariant(c: &CurvatureBundle, v: &[f64]) -> f64 {
    let n = c.dim();
    let mut lin = 0.0;
    let mut quad = 0.0;
    for b in 0..n {
        for a in 0..n {
            lin += c.gamma[(a, a, b)] * v[b];
            let mut t = 0.0;
            for cc in 0..n {
                t += c.dgamma[(cc, cc, b, a)];
                for e in 0..n {
                    t -= c.gamma[(e, a, b)] * c.gamma[(cc, cc, e)];
                }
            }
            quad += t * v[a] * v[b];
        }
    }
    -lin - 0.5 * quad
}

/// Jacobian of a cubic polynomial map by the 4-point central stencil, which
/// is exact for cubics.
fn cubic_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, w: &[f64]) -> DMatrix<f64> {
    let n = w.len();
    let s = 1e-2 * w.iter().fold(1e-2f64, |a, b| a.max(b.abs()));
    let mut j = DMatrix::zeros(n, n);
    for b in 0..n {
        let at = |o: f64| {
            let mut ww = w.to_vec();
            ww[b] += o * s;
            f(&ww)
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        for a in 0..n {
            j[(a, b)] = (-p2[a] + 8.0 * p1[a] - 8.0 * m1[a] + m2[a]) / (12.0 * s);
        }
    }
    j
}

/// 4th-order central Jacobian of a map between chart points.
fn fd4_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], s: f64, m: &ManifoldSpec) -> DMatrix<f64> {
    let n = x.len();
    let base = f(x);
    let mut j = DMatrix::zeros(n, n);
    for b in 0..n {
        let at = |o: f64| {
            let mut xx = x.to_vec();
            xx[b] += o * s;
            m.chart_difference(&base, &f(&xx))
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        for a in 0..n {
            j[(a, b)] = (-p2[a] + 8.0 * p1[a] - 8.0 * m1[a] + m2[a]) / (12.0 * s);
        }
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FourierField;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn right_weight_examples() {
        let e = right_log_weight(&ManifoldSpec::euclidean(3), &[0.0; 3], &[1.0, 2.0, 3.0], false).unwrap();
        assert_eq!(e.log_density, 0.0);
        // |v|_h = 0.1 on the unit sphere (Ricci = h)
        let s = ManifoldSpec::unit_sphere();
        let x0 = [1.0, 0.0];
        let v = [0.06, 0.08 / 1f64.sin()];
        assert_relative_eq!(s.norm(&x0, &v).unwrap(), 0.1, epsilon = 1e-14);
        let w = right_log_weight(&s, &x0, &v, false).unwrap();
        assert_relative_eq!(w.log_density, -1.0 / 600.0, epsilon = 1e-9);
        // Poincaré (Ricci = −h)
        let p = ManifoldSpec::poincare_half_plane();
        let w = right_log_weight(&p, &[0.0, 2.0], &[0.2, 0.0], false).unwrap();
        assert_relative_eq!(w.log_density, 1.0 / 600.0, epsilon = 1e-9);
    }

    #[test]
    fn volume_factor_is_folded_in_on_request() {
        let s = ManifoldSpec::unit_sphere();
        let w = right_log_weight(&s, &[FRAC_PI_2 / 1.5, 0.0], &[0.0, 0.0], true).unwrap();
        assert!(w.includes_volume_factor);
        assert_relative_eq!(w.log_density, 0.5 * 0.75f64.ln(), epsilon = 1e-12);
        let v = VectorField::zero(2);
        let d = diffeo_log_weight(&s, &[FRAC_PI_2 / 1.5, 0.0], &v, true).unwrap();
        assert_relative_eq!(d.log_density, 0.75f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn left_weight_examples() {
        let e = ManifoldSpec::euclidean(2);
        let rot = VectorField::from_fn(2, |x| vec![-x[1], x[0]]);
        let w = left_log_weight(&e, &[0.3, 0.7], &rot, false).unwrap();
        assert!(w.term("divergence").unwrap().abs() < 1e-10);
        assert_relative_eq!(w.term("derivative_square").unwrap(), -1.0, epsilon = 1e-9);
        assert_relative_eq!(w.log_density, -1.0, epsilon = 1e-9);
        let z = left_log_weight(&e, &[0.0, 0.0], &VectorField::zero(2), false).unwrap();
        assert_eq!(z.log_density, 0.0);
        let c = left_log_weight(&e, &[0.0, 0.0], &VectorField::constant(vec![1.0, -2.0]), false).unwrap();
        assert!(c.log_density.abs() < 1e-12);
    }

    #[test]
    fn weight_parity() {
        let s = ManifoldSpec::unit_sphere();
        let x0 = [1.1, 0.4];
        let f = FourierField::random(2, 2, &[1.0, 1.0], 1, 0.1, 3).to_vector_field();
        let a = left_log_weight(&s, &x0, &f, false).unwrap();
        let b = left_log_weight(&s, &x0, &f.scaled(-1.0), false).unwrap();
        assert_relative_eq!(a.term("divergence").unwrap(), -b.term("divergence").unwrap(), epsilon = 1e-12);
        assert_relative_eq!(a.term("curvature").unwrap(), b.term("curvature").unwrap(), epsilon = 1e-12);
        assert_relative_eq!(a.term("derivative_square").unwrap(), b.term("derivative_square").unwrap(), epsilon = 1e-12);
        let v = [0.03, -0.02];
        let r1 = right_log_weight(&s, &x0, &v, false).unwrap();
        let r2 = right_log_weight(&s, &x0, &[-0.03, 0.02], false).unwrap();
        assert_eq!(r1.log_density, r2.log_density);
    }

    #[test]
    fn right_weight_is_chart_covariant() {
        // same exponent at the origin of the normal-coordinate sphere chart
        let s = ManifoldSpec::unit_sphere();
        let n = ManifoldSpec::sphere_normal(1.0, 0.5);
        let x0 = [FRAC_PI_2, 0.0];
        // at the equator the frame is the identity, so components agree
        let v = [0.05, -0.03];
        let a = right_log_weight(&s, &x0, &v, false).unwrap().log_density;
        let b = right_log_weight(&n, &[0.0, 0.0], &v, false).unwrap().log_density;
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn lattice_derivative_is_antisymmetric_and_traceless() {
        let g = FieldGrid::patch(&[0.0, 0.0], &[0.4, 0.4], &[8, 8]).unwrap();
        let d = g.derivative_matrix(1);
        assert_eq!(d.trace(), 0.0);
        assert!((&d + d.transpose()).abs().max() < 1e-12);
        assert!(FieldGrid::patch(&[0.0], &[1.0], &[4]).is_err());
    }

    fn patch_fields(seed: u64, eps: f64) -> (VectorField, VectorField) {
        let per = [0.8, 0.8];
        let v1 = FourierField::random(2, 2, &per, 1, eps, seed).to_vector_field();
        let v2 = FourierField::random(2, 2, &per, 1, eps, seed + 1).to_vector_field();
        (v1, v2)
    }

    #[test]
    fn euclidean_right_check_is_exactly_zero() {
        let m = ManifoldSpec::euclidean(2);
        let g = FieldGrid::patch(&[0.0, 0.0], &[0.4, 0.4], &[8, 8]).unwrap();
        let (v1, v2) = patch_fields(5, 0.1);
        let r = product_jacobian_check(&m, &g, &v1, &v2, Side::Right).unwrap();
        assert_eq!(r.formula_logdet, 0.0);
        assert!(r.numeric_logdet.abs() < 1e-10, "{r:?}");
    }

    #[test]
    fn zero_first_generator_gives_identity() {
        let m = ManifoldSpec::sphere_normal(1.0, 0.6);
        let g = FieldGrid::patch(&[0.0, 0.0], &[0.4, 0.4], &[8, 8]).unwrap();
        let (_, v2) = patch_fields(9, 0.1);
        let r = product_jacobian_check(&m, &g, &VectorField::zero(2), &v2, Side::Right).unwrap();
        assert!(r.numeric_logdet.abs() < 1e-9 && r.formula_logdet == 0.0, "{r:?}");
    }

    #[test]
    fn normal_metric_fit_on_flat_space_vanishes() {
        let m = ManifoldSpec::euclidean(2);
        let f = normal_metric_expansion_check(&m, &[0.3, 0.1], 0.1).unwrap();
        assert!(f.coefficient.max_abs() < 1e-6);
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2, 2).len(), 3);
        assert_eq!(monomials(3, 2).len(), 6);
        assert_eq!(monomials(2, 4).len(), 5);
    }
}
