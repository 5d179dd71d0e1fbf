//! Deviation fields `Ẋ(σ)` over a background immersion, their transformation
//! under reparametrizations generated by `η(σ)`, the tangential/normal split
//! `ξ`, the invariant `ξ₀ⁱ` and the generator that removes `ξ^α`.
//!
//! Covariant derivatives of `ξⁱ` use the normal connection,
//! `∇_α ξⁱ = ∂_α ξⁱ + A^i_jα ξʲ`; derivatives of `ξ^α` use the induced metric.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{GeoError, Result};
use crate::field::{FourierField, PartialJet};
use crate::geodesic::estimate_trust_radius;
use crate::geometry::{analyze, analyze_with_rotation, ImmersionGeometry, PointGeometry};
use crate::grid::ParameterGrid;
use crate::immersion::Immersion;
use crate::manifold::{covariant_jet_from_partials, quadratic_form, CovariantJet};
use crate::tensor::Tensor3;

/// An immersion together with its analysed geometry.
#[derive(Debug, Clone)]
pub struct Background {
    pub immersion: Immersion,
    pub geometry: ImmersionGeometry,
}

impl Background {
    pub fn new(immersion: Immersion) -> Result<Self> {
        let geometry = analyze(&immersion)?;
        Ok(Self { immersion, geometry })
    }

    /// Same immersion with the normal frame rotated by a constant orthogonal matrix.
    pub fn with_frame_rotation(immersion: Immersion, rotation: &DMatrix<f64>) -> Result<Self> {
        let geometry = analyze_with_rotation(&immersion, Some(rotation))?;
        Ok(Self { immersion, geometry })
    }

    pub fn grid(&self) -> &ParameterGrid {
        self.immersion.grid()
    }

    pub fn len(&self) -> usize {
        self.geometry.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.immersion.dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.immersion.ambient_dim()
    }

    pub fn codim(&self) -> usize {
        self.ambient_dim() - self.dim()
    }

    pub fn point(&self, p: usize) -> &PointGeometry {
        &self.geometry.points[p]
    }

    /// Ambient trust radius, the minimum over a few evenly spaced samples.
    pub fn trust_radius(&self) -> Result<f64> {
        let n = self.len();
        let stride = (n / 8).max(1);
        let mut r = f64::INFINITY;
        for p in (0..n).step_by(stride) {
            r = r.min(estimate_trust_radius(self.immersion.ambient(), &self.immersion.samples()[p], 10.0)?);
        }
        Ok(r)
    }
}

/// `Ẋ^μ(σ)` sampled on the background grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationField {
    pub samples: Vec<Vec<f64>>,
    /// Bookkeeping scale for convergence sweeps.
    pub scale: f64,
    pub trust_violated: bool,
}

impl DeviationField {
    pub fn new(bg: &Background, samples: Vec<Vec<f64>>) -> Result<Self> {
        check_samples(bg, &samples, bg.ambient_dim())?;
        Ok(Self { samples, scale: 1.0, trust_violated: false })
    }

    pub fn zero(bg: &Background) -> Self {
        Self { samples: vec![vec![0.0; bg.ambient_dim()]; bg.len()], scale: 1.0, trust_violated: false }
    }

    /// `ε · F(σ)` for a Fourier field with `D` components over the parameters.
    pub fn from_fourier(bg: &Background, field: &FourierField, scale: f64) -> Result<Self> {
        let samples = sample_fourier(bg, field, bg.ambient_dim(), scale)?;
        Ok(Self { samples, scale, trust_violated: false })
    }

    /// Largest pointwise norm `|Ẋ|_h`.
    pub fn max_norm(&self, bg: &Background) -> f64 {
        self.samples
            .iter()
            .zip(&bg.geometry.points)
            .map(|(v, p)| quadratic_form(&p.ambient.metric, v, v).sqrt())
            .fold(0.0, f64::max)
    }
}

/// `η^α(σ)` sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorField {
    pub samples: Vec<Vec<f64>>,
}

impl GeneratorField {
    pub fn new(bg: &Background, samples: Vec<Vec<f64>>) -> Result<Self> {
        check_samples(bg, &samples, bg.dim())?;
        if samples.iter().flatten().any(|c| !c.is_finite()) {
            return Err(GeoError::NonFinite("generator field"));
        }
        Ok(Self { samples })
    }

    pub fn zero(bg: &Background) -> Self {
        Self { samples: vec![vec![0.0; bg.dim()]; bg.len()] }
    }

    pub fn from_fourier(bg: &Background, field: &FourierField, scale: f64) -> Result<Self> {
        Ok(Self { samples: sample_fourier(bg, field, bg.dim(), scale)? })
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v.iter().map(|c| c * s).collect()).collect() }
    }
}

fn check_samples(bg: &Background, samples: &[Vec<f64>], comps: usize) -> Result<()> {
    if samples.len() != bg.len() || samples.iter().any(|v| v.len() != comps) {
        return Err(GeoError::Precondition(format!("expected {} samples with {comps} components", bg.len())));
    }
    Ok(())
}

fn sample_fourier(bg: &Background, field: &FourierField, comps: usize, scale: f64) -> Result<Vec<Vec<f64>>> {
    if field.dim != comps {
        return Err(GeoError::Precondition(format!("field needs {comps} components, has {}", field.dim)));
    }
    Ok(bg.grid().points().iter().map(|s| field.value(s).iter().map(|c| c * scale).collect()).collect())
}

/// Grid partials of a multi-component sample array: `([p][α][c], [p][α][β][c])`.
#[allow(clippy::type_complexity)]
pub(crate) fn grid_partials(grid: &ParameterGrid, samples: &[Vec<f64>]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<Vec<f64>>>>) {
    let d = grid.dim();
    let n = grid.len();
    let comps = samples.first().map_or(0, |v| v.len());
    let mut d1 = vec![vec![vec![0.0; comps]; d]; n];
    let mut d2 = vec![vec![vec![vec![0.0; comps]; d]; d]; n];
    for c in 0..comps {
        let f: Vec<f64> = samples.iter().map(|v| v[c]).collect();
        for a in 0..d {
            let da = grid.partial(&f, &[a]);
            for b in a..d {
                let dab = grid.partial(&f, &[a, b]);
                for p in 0..n {
                    d2[p][a][b][c] = dab[p];
                    d2[p][b][a][c] = dab[p];
                }
            }
            for p in 0..n {
                d1[p][a][c] = da[p];
            }
        }
    }
    (d1, d2)
}

fn gamma_uv(g: &Tensor3, u: &[f64], v: &[f64]) -> Vec<f64> {
    let n = g.dim();
    (0..n)
        .map(|a| {
            let mut s = 0.0;
            for b in 0..n {
                for c in 0..n {
                    s += g[(a, b, c)] * u[b] * v[c];
                }
            }
            s
        })
        .collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn tangent(p: &PointGeometry, a: usize) -> Vec<f64> {
    p.tangents.column(a).iter().copied().collect()
}

fn normal(p: &PointGeometry, i: usize) -> Vec<f64> {
    p.normals.column(i).iter().copied().collect()
}

/// Individual contributions to `Ẋ′`, each `[point][μ]`.
#[derive(Debug, Clone, Default)]
pub struct DiffeoTerms {
    /// `η^α ∂_αX₀`
    pub shift: Vec<Vec<f64>>,
    /// `η^α ∇_α Ẋ`
    pub transport: Vec<Vec<f64>>,
    /// `½ η^α η^β H^i_αβ N_i`
    pub extrinsic: Vec<Vec<f64>>,
    /// `½ η^α η^β ∇_α∇_β Ẋ`
    pub second_derivative: Vec<Vec<f64>>,
    /// `(1/6) η^α η^β η^γ ∇_α(H^i_βγ N_i)`
    pub extrinsic_derivative: Vec<Vec<f64>>,
    /// `(1/3) R̃^μ_νλρ (Ẋ + ½η∂X₀)^ν Ẋ^λ (η∂X₀)^ρ`
    pub curvature: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DiffeoAction {
    pub field: DeviationField,
    pub terms: DiffeoTerms,
}

/// `Ẋ′ = f_η ∘ Ẋ` truncated at `order` (1, 2 or 3) in `(Ẋ, η)`.
pub fn act_diffeo(bg: &Background, dev: &DeviationField, eta: &GeneratorField, order: usize) -> Result<DiffeoAction> {
    if !(1..=3).contains(&order) {
        return Err(GeoError::Precondition("act_diffeo order must be 1, 2 or 3".into()));
    }
    check_samples(bg, &dev.samples, bg.ambient_dim())?;
    check_samples(bg, &eta.samples, bg.dim())?;
    let d = bg.dim();
    let dd = bg.ambient_dim();
    let k = bg.codim();
    let (dx1, dx2) = grid_partials(bg.grid(), &dev.samples);

    let per_point: Vec<[Vec<f64>; 6]> = (0..bg.len())
        .into_par_iter()
        .map(|p| {
            let pg = bg.point(p);
            let x = &dev.samples[p];
            let e = &eta.samples[p];
            let amb = &pg.ambient;
            let intr = &pg.intrinsic.gamma;
            let xa: Vec<Vec<f64>> = (0..d).map(|a| tangent(pg, a)).collect();
            let mut shift = vec![0.0; dd];
            for a in 0..d {
                axpy(&mut shift, e[a], &xa[a]);
            }
            // ∇_β Ẋ
            let nab: Vec<Vec<f64>> = (0..d)
                .map(|b| {
                    let mut v = dx1[p][b].clone();
                    axpy(&mut v, 1.0, &gamma_uv(&amb.gamma, &xa[b], x));
                    v
                })
                .collect();
            let mut transport = vec![0.0; dd];
            for a in 0..d {
                axpy(&mut transport, e[a], &nab[a]);
            }
            let hv = |b: usize, c: usize| pg.second_form_vector(b, c);
            let mut extrinsic = vec![0.0; dd];
            for a in 0..d {
                for b in 0..d {
                    axpy(&mut extrinsic, 0.5 * e[a] * e[b], &hv(a, b));
                }
            }
            if order < 3 {
                return [shift, transport, extrinsic, vec![0.0; dd], vec![0.0; dd], vec![0.0; dd]];
            }
            // ∇_α∇_β Ẋ
            let mut second = vec![0.0; dd];
            for a in 0..d {
                for b in 0..d {
                    let w = 0.5 * e[a] * e[b];
                    if w == 0.0 {
                        continue;
                    }
                    let mut v = dx2[p][a][b].clone();
                    for mu in 0..dd {
                        for nu in 0..dd {
                            for rho in 0..dd {
                                let mut dg = 0.0;
                                for tau in 0..dd {
                                    dg += amb.dgamma[(mu, nu, rho, tau)] * xa[a][tau];
                                }
                                v[mu] += dg * xa[b][nu] * x[rho];
                            }
                        }
                    }
                    axpy(&mut v, 1.0, &gamma_uv(&amb.gamma, &pg.second[a][b], x));
                    axpy(&mut v, 1.0, &gamma_uv(&amb.gamma, &xa[b], &dx1[p][a]));
                    axpy(&mut v, 1.0, &gamma_uv(&amb.gamma, &xa[a], &nab[b]));
                    for c in 0..d {
                        axpy(&mut v, -intr[(c, a, b)], &nab[c]);
                    }
                    axpy(&mut second, w, &v);
                }
            }
            // ∇_α(H^i_βγ N_i)
            let hvs: Vec<Vec<Vec<f64>>> = (0..d).map(|b| (0..d).map(|c| hv(b, c)).collect()).collect();
            let mut ext_d = vec![0.0; dd];
            for a in 0..d {
                for b in 0..d {
                    for c in 0..d {
                        let w = e[a] * e[b] * e[c] / 6.0;
                        if w == 0.0 {
                            continue;
                        }
                        let mut v = vec![0.0; dd];
                        for i in 0..k {
                            axpy(&mut v, pg.dsecond_form[i][(b, c, a)], &normal(pg, i));
                            let dn: Vec<f64> = pg.dnormals[a].column(i).iter().copied().collect();
                            axpy(&mut v, pg.second_form[i][(b, c)], &dn);
                        }
                        axpy(&mut v, 1.0, &gamma_uv(&amb.gamma, &xa[a], &hvs[b][c]));
                        for f in 0..d {
                            axpy(&mut v, -intr[(f, a, b)], &hvs[f][c]);
                            axpy(&mut v, -intr[(f, a, c)], &hvs[b][f]);
                        }
                        axpy(&mut ext_d, w, &v);
                    }
                }
            }
            // curvature term
            let mut u = x.clone();
            axpy(&mut u, 0.5, &shift);
            let mut curv = vec![0.0; dd];
            for (mu, cm) in curv.iter_mut().enumerate() {
                let mut s = 0.0;
                for nu in 0..dd {
                    for lam in 0..dd {
                        for rho in 0..dd {
                            s += amb.riemann[(mu, nu, lam, rho)] * u[nu] * x[lam] * shift[rho];
                        }
                    }
                }
                *cm = s / 3.0;
            }
            [shift, transport, extrinsic, second, ext_d, curv]
        })
        .collect();

    let mut terms = DiffeoTerms::default();
    let mut out = Vec::with_capacity(bg.len());
    for (p, [shift, transport, extrinsic, second, ext_d, curv]) in per_point.into_iter().enumerate() {
        let mut v = dev.samples[p].clone();
        axpy(&mut v, 1.0, &shift);
        if order >= 2 {
            axpy(&mut v, 1.0, &transport);
            axpy(&mut v, 1.0, &extrinsic);
        }
        if order >= 3 {
            axpy(&mut v, 1.0, &second);
            axpy(&mut v, 1.0, &ext_d);
            axpy(&mut v, 1.0, &curv);
        }
        out.push(v);
        terms.shift.push(shift);
        terms.transport.push(transport);
        terms.extrinsic.push(extrinsic);
        terms.second_derivative.push(second);
        terms.extrinsic_derivative.push(ext_d);
        terms.curvature.push(curv);
    }
    let mut field = DeviationField { samples: out, scale: dev.scale, trust_violated: false };
    field.trust_violated = field.max_norm(bg) > bg.trust_radius()?;
    Ok(DiffeoAction { field, terms })
}

/// Parameter shift `δσ^α` of the intrinsic geodesic expansion generated by `η`
/// (third order, induced-metric connection).
pub fn parameter_shift(bg: &Background, eta: &GeneratorField) -> Vec<Vec<f64>> {
    let d = bg.dim();
    (0..bg.len())
        .map(|p| {
            let c = &bg.point(p).intrinsic;
            let e = &eta.samples[p];
            (0..d)
                .map(|a| {
                    let mut s = e[a];
                    for b in 0..d {
                        for g in 0..d {
                            s -= 0.5 * c.gamma[(a, b, g)] * e[b] * e[g];
                            for dl in 0..d {
                                let mut gg = 0.0;
                                for f in 0..d {
                                    gg += c.gamma[(a, dl, f)] * c.gamma[(f, b, g)];
                                }
                                s += (-c.dgamma[(a, b, g, dl)] + 2.0 * gg) * e[b] * e[g] * e[dl] / 6.0;
                            }
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Tangential covector components `ξ_α` and normal components `ξⁱ`.
#[derive(Debug, Clone, PartialEq)]
pub struct XiDecomposition {
    /// `[p][α]`, index down.
    pub tangential: Vec<Vec<f64>>,
    /// `[p][i]`.
    pub normal: Vec<Vec<f64>>,
    /// Seeds of the frame the normal components refer to.
    pub frame_seeds: Vec<usize>,
}

impl XiDecomposition {
    /// Build from `ξ^α` (index up) and `ξⁱ`.
    pub fn from_upper(bg: &Background, upper: Vec<Vec<f64>>, normal: Vec<Vec<f64>>) -> Result<Self> {
        check_samples(bg, &upper, bg.dim())?;
        check_samples(bg, &normal, bg.codim())?;
        let tangential = upper.iter().zip(&bg.geometry.points).map(|(u, p)| lower(p.metric(), u)).collect();
        Ok(Self { tangential, normal, frame_seeds: bg.geometry.frame.seeds.clone() })
    }

    /// Purely normal deviation.
    pub fn normal_only(bg: &Background, normal: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_upper(bg, vec![vec![0.0; bg.dim()]; bg.len()], normal)
    }

    /// `ξ^α = g^{αβ} ξ_β`.
    pub fn upper(&self, bg: &Background) -> Vec<Vec<f64>> {
        self.tangential.iter().zip(&bg.geometry.points).map(|(t, p)| lower(p.inverse_metric(), t)).collect()
    }
}

fn lower(g: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..v.len()).map(|a| (0..v.len()).map(|b| g[(a, b)] * v[b]).sum()).collect()
}

/// `ξ_α = ∂_αX₀·h·Ẋ`, `ξ_i = N_i·h·Ẋ`.
pub fn decompose(bg: &Background, dev: &DeviationField) -> Result<XiDecomposition> {
    check_samples(bg, &dev.samples, bg.ambient_dim())?;
    let d = bg.dim();
    let k = bg.codim();
    let mut tangential = Vec::with_capacity(bg.len());
    let mut normal_c = Vec::with_capacity(bg.len());
    for (pg, x) in bg.geometry.points.iter().zip(&dev.samples) {
        let h = &pg.ambient.metric;
        tangential.push((0..d).map(|a| quadratic_form(h, &tangent(pg, a), x)).collect());
        normal_c.push((0..k).map(|i| quadratic_form(h, &normal(pg, i), x)).collect());
    }
    Ok(XiDecomposition { tangential, normal: normal_c, frame_seeds: bg.geometry.frame.seeds.clone() })
}

/// `Ẋ = ξ^α ∂_αX₀ + ξⁱ N_i`.
pub fn recompose(bg: &Background, xi: &XiDecomposition) -> DeviationField {
    let up = xi.upper(bg);
    let samples = bg
        .geometry
        .points
        .iter()
        .enumerate()
        .map(|(p, pg)| {
            let mut v = vec![0.0; bg.ambient_dim()];
            for (a, c) in up[p].iter().enumerate() {
                axpy(&mut v, *c, &tangent(pg, a));
            }
            for (i, c) in xi.normal[p].iter().enumerate() {
                axpy(&mut v, *c, &normal(pg, i));
            }
            v
        })
        .collect();
    DeviationField { samples, scale: 1.0, trust_violated: false }
}

/// Covariant jets of `ξ^α` and `∇_α ξⁱ` on the grid.
struct XiJets {
    up: Vec<Vec<f64>>,
    tangential: Vec<CovariantJet>,
    /// `[p][α][i]` = `∇_α ξⁱ`
    normal_first: Vec<Vec<Vec<f64>>>,
}

fn xi_jets(bg: &Background, xi: &XiDecomposition) -> XiJets {
    let d = bg.dim();
    let k = bg.codim();
    let up = xi.upper(bg);
    let (t1, t2) = grid_partials(bg.grid(), &up);
    let (n1, _) = grid_partials(bg.grid(), &xi.normal);
    let tangential = (0..bg.len())
        .map(|p| {
            let partial = PartialJet {
                value: up[p].clone(),
                jacobian: DMatrix::from_fn(d, d, |a, b| t1[p][b][a]),
                hessian: Tensor3::from_fn(d, |a, b, c| t2[p][b][c][a]),
            };
            covariant_jet_from_partials(&bg.point(p).intrinsic, &partial)
        })
        .collect();
    let normal_first = (0..bg.len())
        .map(|p| {
            let pg = bg.point(p);
            (0..d)
                .map(|a| {
                    (0..k)
                        .map(|i| n1[p][a][i] + (0..k).map(|j| pg.connection[a][(i, j)] * xi.normal[p][j]).sum::<f64>())
                        .collect()
                })
                .collect()
        })
        .collect();
    XiJets { up, tangential, normal_first }
}

/// Terms of the tangential (`[p][α]`, index up) and normal (`[p][i]`)
/// transformation laws.
#[derive(Debug, Clone, Default)]
pub struct XiTransformTerms {
    /// `η^α`
    pub generator: Vec<Vec<f64>>,
    /// `η^β ∇_β ξ^α`
    pub transport: Vec<Vec<f64>>,
    /// `−H^α_iβ η^β ξⁱ`
    pub extrinsic_mixing: Vec<Vec<f64>>,
    /// `½ η^β η^γ ∇_β∇_γ ξ^α`
    pub second_derivative: Vec<Vec<f64>>,
    /// `−½ η^β η^γ ξⁱ ∇_β H^α_iγ`
    pub extrinsic_gradient: Vec<Vec<f64>>,
    /// `−(1/6) η^β η^γ η^δ H^{iα}_β H_iγδ`
    pub extrinsic_cubic: Vec<Vec<f64>>,
    /// `−H^α_iβ (η^β η^γ ∇_γ ξⁱ + ½ η^β η^γ H^i_γδ ξ^δ)`
    pub extrinsic_quadratic: Vec<Vec<f64>>,
    /// ambient curvature projection
    pub curvature: Vec<Vec<f64>>,
    /// `η^α ∇_α ξⁱ`
    pub normal_transport: Vec<Vec<f64>>,
    /// `H^i_αβ η^α ξ^β`
    pub normal_mixing: Vec<Vec<f64>>,
    /// `½ H^i_αβ η^α η^β`
    pub normal_extrinsic: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct XiTransform {
    pub xi: XiDecomposition,
    pub terms: XiTransformTerms,
}

/// `ξ′` under `f_η`: tangential components to `tangential_order ≤ 3`, normal
/// components to `normal_order ≤ 2`.
pub fn xi_transform(
    bg: &Background,
    xi: &XiDecomposition,
    eta: &GeneratorField,
    tangential_order: usize,
    normal_order: usize,
) -> Result<XiTransform> {
    if !(1..=3).contains(&tangential_order) || !(1..=2).contains(&normal_order) {
        return Err(GeoError::Precondition("xi_transform orders: tangential 1..=3, normal 1..=2".into()));
    }
    check_samples(bg, &eta.samples, bg.dim())?;
    let d = bg.dim();
    let dd = bg.ambient_dim();
    let k = bg.codim();
    let jets = xi_jets(bg, xi);

    let rows: Vec<[Vec<f64>; 11]> = (0..bg.len())
        .into_par_iter()
        .map(|p| {
            let pg = bg.point(p);
            let e = &eta.samples[p];
            let xu = &jets.up[p];
            let xn = &xi.normal[p];
            let cj = &jets.tangential[p];
            let nf = &jets.normal_first[p];
            let shapes: Vec<DMatrix<f64>> = (0..k).map(|i| pg.shape_operator(i)).collect();
            let hs = &pg.second_form;
            let zd = vec![0.0; d];
            let zk = vec![0.0; k];

            let generator = e.clone();
            let mut transport = zd.clone();
            let mut mixing = zd.clone();
            for a in 0..d {
                for b in 0..d {
                    transport[a] += e[b] * cj.first[(a, b)];
                    for i in 0..k {
                        mixing[a] -= shapes[i][(a, b)] * e[b] * xn[i];
                    }
                }
            }

            let (mut second, mut grad, mut cubic, mut quad, mut curv) =
                (zd.clone(), zd.clone(), zd.clone(), zd.clone(), zd.clone());
            if tangential_order >= 3 {
                let cov = pg.covariant_dsecond_form();
                let ginv = pg.inverse_metric();
                for a in 0..d {
                    for b in 0..d {
                        for c in 0..d {
                            let ee = e[b] * e[c];
                            second[a] += 0.5 * ee * cj.second[(a, c, b)];
                            for i in 0..k {
                                // ∇_b H^a_{i c} = g^{a f} ∇_b H^i_{f c}
                                let dh: f64 = (0..d).map(|f| ginv[(a, f)] * cov[i][(f, c, b)]).sum();
                                grad[a] -= 0.5 * ee * xn[i] * dh;
                                quad[a] -= shapes[i][(a, b)] * ee * nf[c][i];
                                for f in 0..d {
                                    cubic[a] -= ee * e[f] * shapes[i][(a, b)] * hs[i][(c, f)] / 6.0;
                                    quad[a] -= 0.5 * shapes[i][(a, b)] * ee * hs[i][(c, f)] * xu[f];
                                }
                            }
                        }
                    }
                }
                // R̃(∂^αX₀, Ẋ + ½η∂X₀, Ẋ, η∂X₀)
                let rl = pg.ambient.riemann_lowered();
                let mut xdot = vec![0.0; dd];
                let mut ex = vec![0.0; dd];
                for b in 0..d {
                    axpy(&mut xdot, xu[b], &tangent(pg, b));
                    axpy(&mut ex, e[b], &tangent(pg, b));
                }
                for i in 0..k {
                    axpy(&mut xdot, xn[i], &normal(pg, i));
                }
                let mut u = xdot.clone();
                axpy(&mut u, 0.5, &ex);
                for a in 0..d {
                    let mut up_t = vec![0.0; dd];
                    for b in 0..d {
                        axpy(&mut up_t, ginv[(a, b)], &tangent(pg, b));
                    }
                    let mut s = 0.0;
                    for mu in 0..dd {
                        if up_t[mu] == 0.0 {
                            continue;
                        }
                        for nu in 0..dd {
                            for lam in 0..dd {
                                for rho in 0..dd {
                                    s += rl[(mu, nu, lam, rho)] * up_t[mu] * u[nu] * xdot[lam] * ex[rho];
                                }
                            }
                        }
                    }
                    curv[a] = s / 3.0;
                }
            }

            let (mut n_tr, mut n_mix, mut n_ext) = (zk.clone(), zk.clone(), zk.clone());
            if normal_order >= 2 {
                for i in 0..k {
                    for a in 0..d {
                        n_tr[i] += e[a] * nf[a][i];
                        for b in 0..d {
                            n_mix[i] += hs[i][(a, b)] * e[a] * xu[b];
                            n_ext[i] += 0.5 * hs[i][(a, b)] * e[a] * e[b];
                        }
                    }
                }
            }
            [generator, transport, mixing, second, grad, cubic, quad, curv, n_tr, n_mix, n_ext]
        })
        .collect();

    let mut terms = XiTransformTerms::default();
    let mut upper = Vec::with_capacity(bg.len());
    let mut normal_out = Vec::with_capacity(bg.len());
    for (p, r) in rows.into_iter().enumerate() {
        let [generator, transport, mixing, second, grad, cubic, quad, curv, n_tr, n_mix, n_ext] = r;
        let mut t = jets.up[p].clone();
        axpy(&mut t, 1.0, &generator);
        if tangential_order >= 2 {
            axpy(&mut t, 1.0, &transport);
            axpy(&mut t, 1.0, &mixing);
        }
        if tangential_order >= 3 {
            for v in [&second, &grad, &cubic, &quad, &curv] {
                axpy(&mut t, 1.0, v);
            }
        }
        let mut n = xi.normal[p].clone();
        for v in [&n_tr, &n_mix, &n_ext] {
            axpy(&mut n, 1.0, v);
        }
        upper.push(t);
        normal_out.push(n);
        terms.generator.push(generator);
        terms.transport.push(transport);
        terms.extrinsic_mixing.push(mixing);
        terms.second_derivative.push(second);
        terms.extrinsic_gradient.push(grad);
        terms.extrinsic_cubic.push(cubic);
        terms.extrinsic_quadratic.push(quad);
        terms.curvature.push(curv);
        terms.normal_transport.push(n_tr);
        terms.normal_mixing.push(n_mix);
        terms.normal_extrinsic.push(n_ext);
    }
    let mut out = XiDecomposition::from_upper(bg, upper, normal_out)?;
    out.frame_seeds = xi.frame_seeds.clone();
    Ok(XiTransform { xi: out, terms })
}

/// `ξ₀ⁱ = ξⁱ − ξ^α ∇_α ξⁱ − ½ H^i_αβ ξ^α ξ^β`, as `[p][i]`.
pub fn xi_invariant(bg: &Background, xi: &XiDecomposition) -> Vec<Vec<f64>> {
    let d = bg.dim();
    let k = bg.codim();
    let jets = xi_jets(bg, xi);
    (0..bg.len())
        .map(|p| {
            let pg = bg.point(p);
            let xu = &jets.up[p];
            (0..k)
                .map(|i| {
                    let mut s = xi.normal[p][i];
                    for a in 0..d {
                        s -= xu[a] * jets.normal_first[p][a][i];
                        for b in 0..d {
                            s -= 0.5 * pg.second_form[i][(a, b)] * xu[a] * xu[b];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Generator that removes the tangential components:
/// `η^α = −ξ^α + ξ^β ∇_β ξ^α − H^α_iβ ξⁱ ξ^β` (`order = 2`) or `−ξ^α` (`order = 1`).
pub fn gauge_generator(bg: &Background, xi: &XiDecomposition, order: usize) -> Result<GeneratorField> {
    if !(1..=2).contains(&order) {
        return Err(GeoError::Precondition("gauge_generator order must be 1 or 2".into()));
    }
    let d = bg.dim();
    let k = bg.codim();
    let jets = xi_jets(bg, xi);
    let samples = (0..bg.len())
        .map(|p| {
            let pg = bg.point(p);
            let xu = &jets.up[p];
            let mut eta: Vec<f64> = xu.iter().map(|c| -c).collect();
            if order == 2 {
                for a in 0..d {
                    for b in 0..d {
                        eta[a] += xu[b] * jets.tangential[p].first[(a, b)];
                    }
                }
                for i in 0..k {
                    let shape = pg.shape_operator(i);
                    for a in 0..d {
                        for b in 0..d {
                            eta[a] -= shape[(a, b)] * xi.normal[p][i] * xu[b];
                        }
                    }
                }
            }
            eta
        })
        .collect();
    Ok(GeneratorField { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn circle(n: usize) -> Background {
        Background::new(Immersion::circle(1.3, n).unwrap()).unwrap()
    }

    #[test]
    fn zero_generator_is_identity() {
        let bg = circle(32);
        let f = FourierField::random(1, 2, &[2.0 * std::f64::consts::PI], 2, 0.05, 3);
        let dev = DeviationField::from_fourier(&bg, &f, 1.0).unwrap();
        let out = act_diffeo(&bg, &dev, &GeneratorField::zero(&bg), 3).unwrap();
        assert_eq!(out.field.samples, dev.samples);
    }

    #[test]
    fn line_first_order_shift() {
        let bg = Background::new(Immersion::line(2.0, 16).unwrap()).unwrap();
        let dev = DeviationField::new(&bg, (0..16).map(|p| vec![0.01 * p as f64, 0.02]).collect()).unwrap();
        let eta = GeneratorField::new(&bg, vec![vec![0.1]; 16]).unwrap();
        let out = act_diffeo(&bg, &dev, &eta, 1).unwrap();
        for p in 0..16 {
            let xa = bg.point(p).tangents[(0, 0)];
            assert_relative_eq!(out.field.samples[p][0], dev.samples[p][0] + 0.1 * xa, epsilon = 1e-15);
            assert_relative_eq!(out.field.samples[p][1], 0.02, epsilon = 1e-15);
        }
    }

    #[test]
    fn decompose_tangent_on_circle() {
        let r = 1.3;
        let bg = circle(64);
        let samples = (0..64).map(|p| bg.point(p).tangents.column(0).iter().copied().collect()).collect();
        let xi = decompose(&bg, &DeviationField::new(&bg, samples).unwrap()).unwrap();
        for p in 0..64 {
            assert_relative_eq!(xi.tangential[p][0], r * r, epsilon = 1e-4);
            assert!(xi.normal[p][0].abs() < 1e-12);
        }
    }

    #[test]
    fn normal_deviation_has_no_tangential_part() {
        let bg = circle(32);
        let samples = (0..32).map(|p| bg.point(p).normals.column(0).iter().map(|c| 0.2 * c).collect()).collect();
        let xi = decompose(&bg, &DeviationField::new(&bg, samples).unwrap()).unwrap();
        for p in 0..32 {
            assert!(xi.tangential[p][0].abs() < 1e-14);
            assert_relative_eq!(xi.normal[p][0], 0.2, epsilon = 1e-14);
        }
    }

    #[test]
    fn round_trip_on_sphere() {
        let bg = Background::new(Immersion::sphere(1.0, 16, 16).unwrap()).unwrap();
        let f = FourierField::random(2, 3, &bg.grid().periods.clone(), 2, 0.1, 9);
        let dev = DeviationField::from_fourier(&bg, &f, 1.0).unwrap();
        let back = recompose(&bg, &decompose(&bg, &dev).unwrap());
        for (a, b) in back.samples.iter().zip(&dev.samples) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_tangential_part_keeps_normal_and_zero_generator() {
        let bg = circle(32);
        let xi = XiDecomposition::normal_only(&bg, (0..32).map(|p| vec![0.1 * (p as f64).sin()]).collect()).unwrap();
        assert_eq!(xi_invariant(&bg, &xi), xi.normal);
        assert!(gauge_generator(&bg, &xi, 2).unwrap().samples.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn flat_first_order_xi_transform() {
        let bg = Background::new(Immersion::line(2.0, 16).unwrap()).unwrap();
        let xi = XiDecomposition::from_upper(&bg, vec![vec![0.3]; 16], vec![vec![0.1]; 16]).unwrap();
        let eta = GeneratorField::new(&bg, vec![vec![0.05]; 16]).unwrap();
        let out = xi_transform(&bg, &xi, &eta, 1, 1).unwrap();
        for u in out.xi.upper(&bg) {
            assert_relative_eq!(u[0], 0.35, epsilon = 1e-14);
        }
    }
}
