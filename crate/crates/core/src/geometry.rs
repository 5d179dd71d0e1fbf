//! Extrinsic geometry of an immersion: induced metric, normal frame, second
//! fundamental form `H^i_αβ`, normal connection `A^i_jα`, normal curvature
//! `F^i_jαβ`, and the Gauss, Codazzi and Ricci structure equations.
//!
//! Only the primitive fields `X` and `N_i` are differentiated on the grid.
//! Everything built from them (`g` and its derivatives, `H`, `A` and their
//! derivatives) is assembled with the product and chain rules using the
//! ambient metric jet at `X(σ)`. Differencing composite fields such as `g`
//! directly loses an order of magnitude in the curvature residuals.
//!
//! Conventions: `H^i_αβ = N_i · (∂_α∂_βX + Γ̃ ∂_αX ∂_βX)`, the mean curvature
//! is the half trace `H^i = ½ g^{αβ} H^i_αβ`, and
//! `A^i_jα = N_i · (∂_α N_j + Γ̃ ∂_αX N_j)`.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GeoError, Result};
use crate::immersion::Immersion;
use crate::manifold::{curvature_from_jet, CurvatureBundle, MetricJet};
use crate::tensor::Tensor3;

/// Everything known at one grid point.
#[derive(Debug, Clone)]
pub struct PointGeometry {
    pub x: Vec<f64>,
    /// `D × d`, column `α` is `∂_αX`.
    pub tangents: DMatrix<f64>,
    /// `[α][β]` → `∂_α∂_βX`.
    pub second: Vec<Vec<Vec<f64>>>,
    /// `D × k`, column `i` is `N_i`.
    pub normals: DMatrix<f64>,
    /// `[α]` → `∂_α N` (`D × k`).
    pub dnormals: Vec<DMatrix<f64>>,
    pub ambient: CurvatureBundle,
    /// Directional derivatives `∂_τ h_μν ∂_αX^τ`, `[α]`.
    pub ambient_dh: Vec<DMatrix<f64>>,
    /// Curvature of the induced metric `g`.
    pub intrinsic: CurvatureBundle,
    pub sqrt_g: f64,
    /// `[i]` → `H^i_αβ` (`d × d`).
    pub second_form: Vec<DMatrix<f64>>,
    /// `[i]`, `(α, β, γ)` → `∂_γ H^i_αβ`.
    pub dsecond_form: Vec<Tensor3>,
    /// `[α]` → `A^i_jα` (`k × k`, antisymmetric).
    pub connection: Vec<DMatrix<f64>>,
    /// `[α][β]` → `∂_α A_β`.
    pub dconnection: Vec<Vec<DMatrix<f64>>>,
    /// `[α][β]` → `F^i_jαβ`.
    pub field_strength: Vec<Vec<DMatrix<f64>>>,
}

impl PointGeometry {
    pub fn dim(&self) -> usize {
        self.tangents.ncols()
    }

    pub fn codim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.intrinsic.metric
    }

    pub fn inverse_metric(&self) -> &DMatrix<f64> {
        &self.intrinsic.inverse
    }

    /// `H^i = ½ g^{αβ} H^i_αβ`.
    pub fn mean_curvature(&self) -> Vec<f64> {
        self.second_form.iter().map(|h| 0.5 * (self.inverse_metric() * h).trace()).collect()
    }

    /// `H^{iβ}_α = g^{βγ} H^i_γα`, as a matrix with row `β`, column `α`.
    pub fn shape_operator(&self, i: usize) -> DMatrix<f64> {
        self.inverse_metric() * &self.second_form[i]
    }

    /// `∇_γ H^i_αβ` including the normal connection, as `[i]`, `(α, β, γ)`.
    pub fn covariant_dsecond_form(&self) -> Vec<Tensor3> {
        let d = self.dim();
        let k = self.codim();
        let gam = &self.intrinsic.gamma;
        (0..k)
            .map(|i| {
                Tensor3::from_fn(d, |a, b, c| {
                    let mut s = self.dsecond_form[i][(a, b, c)];
                    for e in 0..d {
                        s -= gam[(e, c, a)] * self.second_form[i][(e, b)] + gam[(e, c, b)] * self.second_form[i][(a, e)];
                    }
                    for j in 0..k {
                        s += self.connection[c][(i, j)] * self.second_form[j][(a, b)];
                    }
                    s
                })
            })
            .collect()
    }

    /// `H^μ_αβ = H^i_αβ N_i^μ`.
    pub fn second_form_vector(&self, a: usize, b: usize) -> Vec<f64> {
        let dd = self.x.len();
        (0..dd).map(|mu| (0..self.codim()).map(|i| self.second_form[i][(a, b)] * self.normals[(mu, i)]).sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    /// Basis vectors used as global seeds for all normals but the last.
    pub seeds: Vec<usize>,
    /// Seed whose projection fixed the sign of the last normal at grid point 0.
    pub last_sign_seed: usize,
    pub orthogonality: f64,
    pub orthonormality: f64,
    pub completeness: f64,
}

#[derive(Debug, Clone)]
pub struct ImmersionGeometry {
    pub points: Vec<PointGeometry>,
    pub frame: FrameReport,
    /// Quadrature weight per grid point (cell volume over cover multiplicity).
    pub weight: f64,
    pub normalization: f64,
    pub weingarten_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StructureResiduals {
    pub gauss: f64,
    pub codazzi: f64,
    pub ricci: f64,
}

fn bil(m: &DMatrix<f64>, u: &[f64], v: &[f64]) -> f64 {
    crate::manifold::quadratic_form(m, u, v)
}

fn col(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

/// `Γ̃^ν_ρσ u^ρ v^σ`.
fn gamma_uv(c: &CurvatureBundle, u: &[f64], v: &[f64]) -> Vec<f64> {
    let n = c.dim();
    (0..n)
        .map(|a| {
            let mut s = 0.0;
            for b in 0..n {
                for e in 0..n {
                    s += c.gamma[(a, b, e)] * u[b] * v[e];
                }
            }
            s
        })
        .collect()
}

/// `∂_τ Γ̃^ν_ρσ w^τ u^ρ v^σ`.
fn dgamma_wuv(c: &CurvatureBundle, w: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
    let n = c.dim();
    (0..n)
        .map(|a| {
            let mut s = 0.0;
            for b in 0..n {
                for e in 0..n {
                    for t in 0..n {
                        s += c.dgamma[(a, b, e, t)] * w[t] * u[b] * v[e];
                    }
                }
            }
            s
        })
        .collect()
}

fn add(u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter().zip(v).map(|(a, b)| a + b).collect()
}

fn directional(jet_grad: &[DMatrix<f64>], w: &[f64]) -> DMatrix<f64> {
    let n = jet_grad[0].nrows();
    let mut m = DMatrix::zeros(n, n);
    for (t, g) in jet_grad.iter().enumerate() {
        m += g * w[t];
    }
    m
}

/// Induced metric `g_αβ` and its intrinsic curvature at every grid point.
pub fn induced_metric(imm: &Immersion) -> Result<Vec<CurvatureBundle>> {
    Ok(analyze(imm)?.points.into_iter().map(|p| p.intrinsic).collect())
}

/// One `D × d` (tangents) or `D × k` (normals) matrix per grid point.
pub type Frames = Vec<DMatrix<f64>>;

/// Frame only (tangents and normals) with its invariant residuals.
pub fn build_frame(imm: &Immersion) -> Result<(Frames, Frames, FrameReport)> {
    let g = analyze(imm)?;
    let t = g.points.iter().map(|p| p.tangents.clone()).collect();
    let n = g.points.iter().map(|p| p.normals.clone()).collect();
    Ok((t, n, g.frame))
}

/// Full analysis with the deterministic frame.
pub fn analyze(imm: &Immersion) -> Result<ImmersionGeometry> {
    analyze_with_rotation(imm, None)
}

/// Full analysis, optionally rotating the normal frame by a constant
/// orthogonal matrix `R` (`N'_i = R_ij N_j`).
pub fn analyze_with_rotation(imm: &Immersion, rotation: Option<&DMatrix<f64>>) -> Result<ImmersionGeometry> {
    let grid = imm.grid();
    let d = imm.dim();
    let dd = imm.ambient_dim();
    let k = dd - d;
    let npts = grid.len();
    let m = imm.ambient();

    let d1: Vec<Vec<Vec<f64>>> = (0..d).map(|a| imm.derivative(&[a])).collect();
    let d2: Vec<Vec<Vec<Vec<f64>>>> = (0..d).map(|a| (0..d).map(|b| imm.derivative(&[a, b])).collect()).collect();
    let d3: Vec<Vec<Vec<Vec<Vec<f64>>>>> = (0..d)
        .map(|a| (0..d).map(|b| (0..d).map(|c| imm.derivative(&[a, b, c])).collect()).collect())
        .collect();

    let jets: Vec<MetricJet> = imm.samples().par_iter().map(|x| m.jet(x)).collect::<Result<_>>()?;
    let tangents: Vec<DMatrix<f64>> = (0..npts).map(|p| DMatrix::from_fn(dd, d, |mu, a| d1[a][p][mu])).collect();

    // regularity
    for p in 0..npts {
        let g = tangents[p].transpose() * &jets[p].metric * &tangents[p];
        if g.clone().cholesky().is_none() {
            return Err(GeoError::IrregularImmersion { index: grid.multi_index(p) });
        }
    }

    let (mut normals, report_seeds) = build_normals(imm, &tangents, &jets)?;
    if let Some(r) = rotation {
        if r.nrows() != k || r.ncols() != k || (r.transpose() * r - DMatrix::identity(k, k)).abs().max() > 1e-12 {
            return Err(GeoError::Precondition("frame rotation must be a k×k orthogonal matrix".into()));
        }
        for n in normals.iter_mut() {
            *n = &*n * r.transpose();
        }
    }

    // grid derivatives of the normal components
    let comp = |i: usize, mu: usize| -> Vec<f64> { normals.iter().map(|n| n[(mu, i)]).collect() };
    let mut dn: Vec<Vec<DMatrix<f64>>> = vec![vec![DMatrix::zeros(dd, k); d]; npts];
    let mut ddn: Vec<Vec<Vec<DMatrix<f64>>>> = vec![vec![vec![DMatrix::zeros(dd, k); d]; d]; npts];
    for i in 0..k {
        for mu in 0..dd {
            let c = comp(i, mu);
            for a in 0..d {
                let da = grid.partial(&c, &[a]);
                for p in 0..npts {
                    dn[p][a][(mu, i)] = da[p];
                }
                for b in 0..d {
                    let dab = grid.partial(&c, &[a, b]);
                    for p in 0..npts {
                        ddn[p][a][b][(mu, i)] = dab[p];
                    }
                }
            }
        }
    }

    let points: Vec<PointGeometry> = (0..npts)
        .into_par_iter()
        .map(|p| -> Result<PointGeometry> {
            let jet = &jets[p];
            let x = &imm.samples()[p];
            let amb = curvature_from_jet(jet, x)?;
            let h = &jet.metric;
            let a: Vec<Vec<f64>> = (0..d).map(|al| d1[al][p].clone()).collect();
            let s = |al: usize, be: usize| -> &Vec<f64> { &d2[al][be][p] };
            let t = |al: usize, be: usize, ga: usize| -> &Vec<f64> { &d3[al][be][ga][p] };
            let dh: Vec<DMatrix<f64>> = (0..d).map(|al| directional(&jet.grad, &a[al])).collect();
            let ddh = |al: usize, be: usize| -> DMatrix<f64> {
                let mut out = DMatrix::zeros(dd, dd);
                for ta in 0..dd {
                    for sg in 0..dd {
                        let w = a[al][ta] * a[be][sg];
                        if w != 0.0 {
                            out += &jet.hess[ta][sg] * w;
                        }
                    }
                }
                out
            };

            // induced metric jet
            let g = DMatrix::from_fn(d, d, |al, be| bil(h, &a[al], &a[be]));
            let grad: Vec<DMatrix<f64>> = (0..d)
                .map(|ga| {
                    DMatrix::from_fn(d, d, |al, be| {
                        bil(&dh[ga], &a[al], &a[be]) + bil(h, s(ga, al), &a[be]) + bil(h, &a[al], s(ga, be))
                    })
                })
                .collect();
            let hess: Vec<Vec<DMatrix<f64>>> = (0..d)
                .map(|ga| {
                    (0..d)
                        .map(|de| {
                            let h2 = ddh(ga, de);
                            let hs = directional(&jet.grad, s(ga, de));
                            DMatrix::from_fn(d, d, |al, be| {
                                bil(&h2, &a[al], &a[be])
                                    + bil(&hs, &a[al], &a[be])
                                    + bil(&dh[ga], s(de, al), &a[be])
                                    + bil(&dh[ga], &a[al], s(de, be))
                                    + bil(&dh[de], s(ga, al), &a[be])
                                    + bil(&dh[de], &a[al], s(ga, be))
                                    + bil(h, t(ga, de, al), &a[be])
                                    + bil(h, s(ga, al), s(de, be))
                                    + bil(h, s(de, al), s(ga, be))
                                    + bil(h, &a[al], t(ga, de, be))
                            })
                        })
                        .collect()
                })
                .collect();
            let gjet = MetricJet { metric: g.clone(), grad, hess };
            let intrinsic = curvature_from_jet(&gjet, x)?;
            let sqrt_g = g.determinant().abs().sqrt();

            let nrm = &normals[p];
            let nv: Vec<Vec<f64>> = (0..k).map(|i| col(nrm, i)).collect();
            let dnv: Vec<Vec<Vec<f64>>> = (0..d).map(|al| (0..k).map(|i| col(&dn[p][al], i)).collect()).collect();

            // second fundamental form and its partial derivatives
            let kvec = |al: usize, be: usize| add(s(al, be), &gamma_uv(&amb, &a[al], &a[be]));
            let dkvec = |al: usize, be: usize, ga: usize| {
                let mut v = t(al, be, ga).clone();
                let parts = [
                    dgamma_wuv(&amb, &a[ga], &a[al], &a[be]),
                    gamma_uv(&amb, s(al, ga), &a[be]),
                    gamma_uv(&amb, &a[al], s(be, ga)),
                ];
                for q in parts {
                    v = add(&v, &q);
                }
                v
            };
            let kk: Vec<Vec<Vec<f64>>> = (0..d).map(|al| (0..d).map(|be| kvec(al, be)).collect()).collect();
            let second_form: Vec<DMatrix<f64>> = (0..k)
                .map(|i| {
                    let hm = DMatrix::from_fn(d, d, |al, be| bil(h, &nv[i], &kk[al][be]));
                    (&hm + hm.transpose()) * 0.5
                })
                .collect();
            let dsecond_form: Vec<Tensor3> = (0..k)
                .map(|i| {
                    let raw = Tensor3::from_fn(d, |al, be, ga| {
                        bil(&dh[ga], &nv[i], &kk[al][be])
                            + bil(h, &dnv[ga][i], &kk[al][be])
                            + bil(h, &nv[i], &dkvec(al, be, ga))
                    });
                    Tensor3::from_fn(d, |al, be, ga| 0.5 * (raw[(al, be, ga)] + raw[(be, al, ga)]))
                })
                .collect();

            // normal connection and its partial derivatives
            let wvec = |j: usize, al: usize| add(&dnv[al][j], &gamma_uv(&amb, &a[al], &nv[j]));
            let ww: Vec<Vec<Vec<f64>>> = (0..k).map(|j| (0..d).map(|al| wvec(j, al)).collect()).collect();
            let connection: Vec<DMatrix<f64>> = (0..d)
                .map(|al| {
                    let raw = DMatrix::from_fn(k, k, |i, j| bil(h, &nv[i], &ww[j][al]));
                    (&raw - raw.transpose()) * 0.5
                })
                .collect();
            let dconnection: Vec<Vec<DMatrix<f64>>> = (0..d)
                .map(|be| {
                    (0..d)
                        .map(|al| {
                            let raw = DMatrix::from_fn(k, k, |i, j| {
                                let ddn_j = col(&ddn[p][al][be], j);
                                let mut dw = ddn_j;
                                for q in [
                                    dgamma_wuv(&amb, &a[be], &a[al], &nv[j]),
                                    gamma_uv(&amb, s(al, be), &nv[j]),
                                    gamma_uv(&amb, &a[al], &dnv[be][j]),
                                ] {
                                    dw = add(&dw, &q);
                                }
                                bil(&dh[be], &nv[i], &ww[j][al]) + bil(h, &dnv[be][i], &ww[j][al]) + bil(h, &nv[i], &dw)
                            });
                            (&raw - raw.transpose()) * 0.5
                        })
                        .collect()
                })
                .collect();
            let field_strength: Vec<Vec<DMatrix<f64>>> = (0..d)
                .map(|al| {
                    (0..d)
                        .map(|be| {
                            &dconnection[al][be] - &dconnection[be][al] + &connection[al] * &connection[be]
                                - &connection[be] * &connection[al]
                        })
                        .collect()
                })
                .collect();

            Ok(PointGeometry {
                x: x.clone(),
                tangents: tangents[p].clone(),
                second: (0..d).map(|al| (0..d).map(|be| s(al, be).clone()).collect()).collect(),
                normals: nrm.clone(),
                dnormals: dn[p].clone(),
                ambient: amb,
                ambient_dh: dh,
                intrinsic,
                sqrt_g,
                second_form,
                dsecond_form,
                connection,
                dconnection,
                field_strength,
            })
        })
        .collect::<Result<_>>()?;

    let frame = frame_report(&points, report_seeds);
    let weingarten_residual = points.iter().map(weingarten).fold(0.0, f64::max);
    Ok(ImmersionGeometry {
        points,
        frame,
        weight: imm.weight(),
        normalization: imm.normalization(),
        weingarten_residual,
    })
}

/// Normal frame: global Gram–Schmidt seeds for all but the last normal; the
/// last normal is the best-conditioned projection at each point, oriented at
/// grid point 0 by the first admissible seed and propagated by continuity.
fn build_normals(
    imm: &Immersion,
    tangents: &[DMatrix<f64>],
    jets: &[MetricJet],
) -> Result<(Frames, (Vec<usize>, usize))> {
    let grid = imm.grid();
    let d = imm.dim();
    let dd = imm.ambient_dim();
    let k = dd - d;
    let npts = grid.len();
    const ADMISSIBLE: f64 = 0.5;

    // h-orthogonal projection of e_s off the tangents and the normals so far
    let project = |p: usize, built: &[Vec<f64>], s: usize| -> (Vec<f64>, f64) {
        let h = &jets[p].metric;
        let t = &tangents[p];
        let g = t.transpose() * h * t;
        let ginv = g.try_inverse().expect("regularity checked");
        let mut e = vec![0.0; dd];
        e[s] = 1.0;
        let he = h * nalgebra::DVector::from_column_slice(&e);
        let te = t.transpose() * &he;
        let coef = &ginv * te;
        let mut v: Vec<f64> = e.clone();
        for al in 0..d {
            for mu in 0..dd {
                v[mu] -= t[(mu, al)] * coef[al];
            }
        }
        for n in built {
            let c = bil(h, n, &e);
            for mu in 0..dd {
                v[mu] -= c * n[mu];
            }
        }
        let norm = bil(h, &v, &v).max(0.0).sqrt();
        let seed_norm = h[(s, s)].sqrt();
        (v, norm / seed_norm)
    };

    let mut built: Vec<Vec<Vec<f64>>> = vec![Vec::new(); npts];
    let mut seeds = Vec::new();
    for s in 0..dd {
        if seeds.len() + 1 >= k {
            break;
        }
        let projections: Vec<(Vec<f64>, f64)> = (0..npts).map(|p| project(p, &built[p], s)).collect();
        if projections.iter().all(|(_, r)| *r > ADMISSIBLE) {
            for (p, (v, _)) in projections.into_iter().enumerate() {
                let h = &jets[p].metric;
                let norm = bil(h, &v, &v).sqrt();
                built[p].push(v.iter().map(|c| c / norm).collect());
            }
            seeds.push(s);
        }
    }
    if seeds.len() + 1 < k {
        return Err(GeoError::FrameDegenerate { index: vec![] });
    }

    // last normal: best seed per point, sign by continuity from point 0
    let mut last: Vec<Vec<f64>> = (0..npts)
        .map(|p| {
            let (v, _) = (0..dd)
                .map(|s| project(p, &built[p], s))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let norm = bil(&jets[p].metric, &v, &v).sqrt();
            v.iter().map(|c| c / norm).collect()
        })
        .collect();
    let sign_seed = (0..dd)
        .find(|&s| project(0, &built[0], s).1 > ADMISSIBLE)
        .ok_or_else(|| GeoError::FrameDegenerate { index: grid.multi_index(0) })?;
    if last[0][sign_seed] * jets[0].metric[(sign_seed, sign_seed)] < 0.0
        && bil(&jets[0].metric, &last[0], &unit(dd, sign_seed)) < 0.0
    {
        last[0].iter_mut().for_each(|c| *c = -*c);
    }
    let mut done = vec![false; npts];
    done[0] = true;
    let mut queue = VecDeque::from([0usize]);
    while let Some(p) = queue.pop_front() {
        for ax in 0..d {
            for off in [-1isize, 1] {
                let q = grid.shifted(p, ax, off);
                if !done[q] {
                    let overlap = bil(&jets[q].metric, &last[p], &last[q]);
                    if overlap < 0.0 {
                        last[q].iter_mut().for_each(|c| *c = -*c);
                    }
                    done[q] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    // every neighbour pair must now agree
    for p in 0..npts {
        for ax in 0..d {
            let q = grid.shifted(p, ax, 1);
            if bil(&jets[q].metric, &last[p], &last[q]) <= 0.0 {
                return Err(GeoError::FrameDegenerate { index: grid.multi_index(p) });
            }
        }
    }
    let normals = (0..npts)
        .map(|p| {
            let mut cols = built[p].clone();
            cols.push(last[p].clone());
            DMatrix::from_fn(dd, k, |mu, i| cols[i][mu])
        })
        .collect();
    Ok((normals, (seeds, sign_seed)))
}

fn unit(n: usize, s: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[s] = 1.0;
    e
}

fn frame_report(points: &[PointGeometry], (seeds, last_sign_seed): (Vec<usize>, usize)) -> FrameReport {
    let mut orth: f64 = 0.0;
    let mut on: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for p in points {
        let h = &p.ambient.metric;
        let k = p.codim();
        let tn = p.tangents.transpose() * h * &p.normals;
        orth = orth.max(tn.abs().max());
        let nn = p.normals.transpose() * h * &p.normals;
        on = on.max((nn - DMatrix::identity(k, k)).abs().max());
        let c = &p.tangents * p.inverse_metric() * p.tangents.transpose() + &p.normals * p.normals.transpose();
        comp = comp.max((c - &p.ambient.inverse).abs().max());
    }
    FrameReport { seeds, last_sign_seed, orthogonality: orth, orthonormality: on, completeness: comp }
}

/// `|∂_αN_i + Γ̃ ∂_αX N_i + A^i_jα N_j + H^{iβ}_α ∂_βX|` at one point.
fn weingarten(p: &PointGeometry) -> f64 {
    let d = p.dim();
    let k = p.codim();
    let mut worst: f64 = 0.0;
    for al in 0..d {
        let a = col(&p.tangents, al);
        for i in 0..k {
            let n = col(&p.normals, i);
            let mut v = add(&col(&p.dnormals[al], i), &gamma_uv(&p.ambient, &a, &n));
            let shape = p.shape_operator(i);
            for (mu, vm) in v.iter_mut().enumerate() {
                for j in 0..k {
                    *vm += p.connection[al][(i, j)] * p.normals[(mu, j)];
                }
                for be in 0..d {
                    *vm += shape[(be, al)] * p.tangents[(mu, be)];
                }
            }
            worst = worst.max(v.iter().fold(0.0, |m, c| m.max(c.abs())));
        }
    }
    worst
}

/// `R̃_μνλρ u^μ v^ν w^λ z^ρ`.
fn ambient_riemann(p: &PointGeometry, rl: &crate::tensor::Tensor4, u: &[f64], v: &[f64], w: &[f64], z: &[f64]) -> f64 {
    let n = p.x.len();
    let mut s = 0.0;
    for a in 0..n {
        if u[a] == 0.0 {
            continue;
        }
        for b in 0..n {
            for c in 0..n {
                for e in 0..n {
                    s += rl[(a, b, c, e)] * u[a] * v[b] * w[c] * z[e];
                }
            }
        }
    }
    s
}

/// Residuals of the Gauss, Codazzi and Ricci equations at one point.
pub fn point_structure_residuals(p: &PointGeometry) -> StructureResiduals {
    let d = p.dim();
    let k = p.codim();
    let rl = p.ambient.riemann_lowered();
    let ri = p.intrinsic.riemann_lowered();
    let a: Vec<Vec<f64>> = (0..d).map(|al| col(&p.tangents, al)).collect();
    let n: Vec<Vec<f64>> = (0..k).map(|i| col(&p.normals, i)).collect();
    let hs = &p.second_form;
    let mut gauss: f64 = 0.0;
    for al in 0..d {
        for be in 0..d {
            for ga in 0..d {
                for de in 0..d {
                    let lhs = ambient_riemann(p, &rl, &a[al], &a[be], &a[ga], &a[de]);
                    let mut rhs = ri[(al, be, ga, de)];
                    for i in 0..k {
                        rhs += hs[i][(al, de)] * hs[i][(be, ga)] - hs[i][(al, ga)] * hs[i][(be, de)];
                    }
                    gauss = gauss.max((lhs - rhs).abs());
                }
            }
        }
    }
    let cov = p.covariant_dsecond_form();
    let mut codazzi: f64 = 0.0;
    for i in 0..k {
        for al in 0..d {
            for be in 0..d {
                for ga in 0..d {
                    let lhs = ambient_riemann(p, &rl, &a[al], &a[be], &n[i], &a[ga]);
                    let rhs = cov[i][(be, ga, al)] - cov[i][(al, ga, be)];
                    codazzi = codazzi.max((lhs - rhs).abs());
                }
            }
        }
    }
    let shapes: Vec<DMatrix<f64>> = (0..k).map(|i| p.shape_operator(i)).collect();
    let mut ricci: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            for al in 0..d {
                for be in 0..d {
                    let lhs = ambient_riemann(p, &rl, &a[al], &a[be], &n[i], &n[j]);
                    let mut rhs = p.field_strength[al][be][(i, j)];
                    for ga in 0..d {
                        rhs -= shapes[i][(ga, al)] * hs[j][(ga, be)];
                        rhs += shapes[i][(ga, be)] * hs[j][(ga, al)];
                    }
                    ricci = ricci.max((lhs - rhs).abs());
                }
            }
        }
    }
    StructureResiduals { gauss, codazzi, ricci }
}

impl ImmersionGeometry {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Max-norm residuals of the structure equations over the grid.
    pub fn structure_residuals(&self) -> StructureResiduals {
        self.points.par_iter().map(point_structure_residuals).reduce(
            || StructureResiduals { gauss: 0.0, codazzi: 0.0, ricci: 0.0 },
            |a, b| StructureResiduals {
                gauss: a.gauss.max(b.gauss),
                codazzi: a.codazzi.max(b.codazzi),
                ricci: a.ricci.max(b.ricci),
            },
        )
    }

    /// `𝒱 = Σ w √g`.
    pub fn volume(&self) -> f64 {
        self.points.iter().map(|p| p.sqrt_g).sum::<f64>() * self.weight
    }

    /// `Σ_σ w · D · δ(σ,σ)` with `δ(σ,σ) = √g/𝒩`, which equals `D·𝒱/𝒩`.
    pub fn functional_trace(&self) -> f64 {
        let dd = self.points[0].x.len() as f64;
        self.points.iter().map(|p| self.weight * dd * p.sqrt_g / self.normalization).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::immersion::Immersion;
    use approx::assert_relative_eq;

    #[test]
    fn circle_metric_frame_and_curvature() {
        let r = 1.7;
        let g = analyze(&Immersion::circle(r, 64).unwrap()).unwrap();
        for p in &g.points {
            assert_relative_eq!(p.metric()[(0, 0)], r * r, epsilon = 1e-4);
            // outward normal: N = (cos φ, sin φ)
            let phi = p.x[1].atan2(p.x[0]);
            assert_relative_eq!(p.normals[(0, 0)], phi.cos(), epsilon = 1e-12);
            assert_relative_eq!(p.mean_curvature()[0], -1.0 / (2.0 * r), epsilon = 1e-5);
            assert_relative_eq!(p.second_form[0][(0, 0)], -r, epsilon = 1e-5);
        }
        assert_eq!(g.frame.last_sign_seed, 0);
    }

    #[test]
    fn line_normal_is_up() {
        let g = analyze(&Immersion::line(2.0, 16).unwrap()).unwrap();
        for p in &g.points {
            assert_relative_eq!(p.normals[(1, 0)], 1.0, epsilon = 1e-14);
            assert!(p.second_form[0].abs().max() < 1e-12);
        }
    }

    #[test]
    fn sphere_metric_and_umbilic_second_form() {
        let g = analyze(&Immersion::sphere(2.0, 32, 32).unwrap()).unwrap();
        for p in &g.points {
            let th = p.x[2].atan2((p.x[0].powi(2) + p.x[1].powi(2)).sqrt());
            let theta = std::f64::consts::FRAC_PI_2 - th;
            assert_relative_eq!(p.metric()[(1, 1)], 4.0 * theta.sin().powi(2), epsilon = 1e-3);
            let hs = &p.second_form[0];
            assert!((hs - p.metric() * (-0.5)).abs().max() < 1e-3);
            assert_relative_eq!(p.mean_curvature()[0], -0.5, epsilon = 1e-3);
        }
        assert!(g.frame.completeness < 1e-8);
    }

    #[test]
    fn hypersurfaces_have_trivial_normal_bundle() {
        let g = analyze(&Immersion::torus(2.0, 0.7, 24, 24).unwrap()).unwrap();
        assert!(g.points.iter().all(|p| p.connection[0].abs().max() == 0.0 && p.field_strength[0][1].abs().max() == 0.0));
    }

    #[test]
    fn circle_in_r3_has_flat_normal_bundle() {
        let g = analyze(&Immersion::circle3(1.0, 32).unwrap()).unwrap();
        assert_eq!(g.frame.seeds, vec![2]);
        for p in &g.points {
            assert!(p.connection[0].iter().all(|c| c.is_finite()));
            assert!(p.field_strength[0][0].abs().max() == 0.0);
        }
        assert!(g.weingarten_residual < 1e-4, "{}", g.weingarten_residual);
    }

    #[test]
    fn frame_invariants_hold_for_every_builtin() {
        for name in Immersion::BUILTINS {
            let g = analyze(&Immersion::builtin(name, 24).unwrap()).unwrap();
            assert!(g.frame.orthogonality < 1e-10, "{name}");
            assert!(g.frame.orthonormality < 1e-10, "{name}");
            assert!(g.frame.completeness < 1e-8, "{name}: {}", g.frame.completeness);
            for p in &g.points {
                for h in &p.second_form {
                    assert!((h - h.transpose()).abs().max() < 1e-14);
                }
                for a in &p.connection {
                    assert!((a + a.transpose()).abs().max() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn flat_plane_residuals_vanish() {
        let g = analyze(&Immersion::plane(2.0, 16).unwrap()).unwrap();
        let r = g.structure_residuals();
        assert!(r.gauss < 1e-12 && r.codazzi < 1e-12 && r.ricci < 1e-12, "{r:?}");
    }

    #[test]
    fn volume_and_functional_trace() {
        let c = Immersion::circle(2.0, 64).unwrap().with_normalization(0.5);
        let g = analyze(&c).unwrap();
        assert_relative_eq!(g.volume(), 4.0 * std::f64::consts::PI, max_relative = 1e-5);
        assert_relative_eq!(g.functional_trace(), 2.0 * g.volume() / 0.5, epsilon = 1e-9);
    }
}
