//! Functional measures over deviation fields, the Faddeev-Popov determinant
//! of the tangential gauge, the gauge-fixed integrand over normal
//! deviations, and the area action with its semiclassical expansion.
//!
//! Every density is summed over the grid with weight `w·√g/𝒩`, where `w` is
//! the cell volume divided by the cover multiplicity. Per-point prefactors of
//! the measures enter as plain sums of logarithms.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::deviation::{grid_partials, xi_invariant, Background, DeviationField, GeneratorField, XiDecomposition};
use crate::error::{GeoError, Result};
use crate::field::PartialJet;
use crate::geometry::PointGeometry;
use crate::immersion::Immersion;
use crate::manifold::{covariant_jet_from_partials, quadratic_form};
use crate::tensor::Tensor3;

/// A log-density together with its itemized contributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionalWeight {
    pub log_density: f64,
    pub breakdown: Vec<(String, f64)>,
    pub grid_counts: Vec<usize>,
    pub normalization: f64,
}

impl FunctionalWeight {
    fn new(bg: &Background, breakdown: Vec<(&str, f64)>) -> Self {
        let breakdown: Vec<(String, f64)> = breakdown.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Self {
            log_density: breakdown.iter().map(|(_, v)| v).sum(),
            breakdown,
            grid_counts: bg.grid().counts.clone(),
            normalization: bg.geometry.normalization,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.breakdown.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// `(term, value)` CSV rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("term,value\n");
        for (k, v) in &self.breakdown {
            s.push_str(&format!("{k},{v:.17e}\n"));
        }
        s.push_str(&format!("total,{:.17e}\n", self.log_density));
        s
    }
}

fn col(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

/// `w·√g/𝒩` at a point.
fn measure(bg: &Background, p: &PointGeometry) -> f64 {
    bg.geometry.weight * p.sqrt_g / bg.geometry.normalization
}

/// `Σ_σ ½ log|h| + (k/2) log(√g/𝒩)`, the per-point product prefactors.
fn prefactor(bg: &Background, sqrt_h: bool, power: f64) -> f64 {
    bg.geometry
        .points
        .iter()
        .map(|p| {
            let h = if sqrt_h { 0.5 * p.ambient.metric.determinant().abs().ln() } else { 0.0 };
            h + power * (p.sqrt_g / bg.geometry.normalization).ln()
        })
        .sum()
}

/// `R̃_μνλρ u^μ v^ν w^λ z^ρ`.
fn riemann4(rl: &crate::tensor::Tensor4, u: &[f64], v: &[f64], w: &[f64], z: &[f64]) -> f64 {
    let n = u.len();
    let mut s = 0.0;
    for a in 0..n {
        if u[a] == 0.0 {
            continue;
        }
        for b in 0..n {
            if v[b] == 0.0 {
                continue;
            }
            for c in 0..n {
                for e in 0..n {
                    s += rl[(a, b, c, e)] * u[a] * v[b] * w[c] * z[e];
                }
            }
        }
    }
    s
}

/// `g^{αβ} R̃(∂_αX, N_i, ∂_βX, N_j)`.
fn tangential_curvature(p: &PointGeometry, i: usize, j: usize) -> f64 {
    let rl = p.ambient.riemann_lowered();
    let d = p.dim();
    let (ni, nj) = (col(&p.normals, i), col(&p.normals, j));
    let mut s = 0.0;
    for a in 0..d {
        for b in 0..d {
            s += p.inverse_metric()[(a, b)] * riemann4(&rl, &col(&p.tangents, a), &ni, &col(&p.tangents, b), &nj);
        }
    }
    s
}

/// `Σ_k R̃(N_k, N_i, N_k, N_j)`.
fn normal_curvature(p: &PointGeometry, i: usize, j: usize) -> f64 {
    let rl = p.ambient.riemann_lowered();
    let (ni, nj) = (col(&p.normals, i), col(&p.normals, j));
    (0..p.codim()).map(|k| {
        let nk = col(&p.normals, k);
        riemann4(&rl, &nk, &ni, &nk, &nj)
    }).sum()
}

/// `H_iαβ H_j^{αβ}`.
fn extrinsic_product(p: &PointGeometry, i: usize, j: usize) -> f64 {
    let gi = p.inverse_metric();
    let up = gi * &p.second_form[j] * gi;
    p.second_form[i].component_mul(&up).sum()
}

/// Right-invariant measure over `Ẋ`:
/// `−(1/6𝒩) Σ w √g R̃_μν Ẋ^μ Ẋ^ν` plus `Σ [½ log|h| + (D/2) log(√g/𝒩)]`.
pub fn functional_right_measure_log(bg: &Background, dev: &DeviationField) -> Result<FunctionalWeight> {
    if dev.samples.len() != bg.len() {
        return Err(GeoError::Precondition("deviation field does not match the background grid".into()));
    }
    let ricci: f64 = bg
        .geometry
        .points
        .iter()
        .zip(&dev.samples)
        .map(|(p, x)| -measure(bg, p) * quadratic_form(&p.ambient.ricci, x, x) / 6.0)
        .sum();
    let dd = bg.ambient_dim() as f64;
    Ok(FunctionalWeight::new(
        bg,
        vec![
            ("ricci", ricci),
            ("metric_prefactor", prefactor(bg, true, 0.0)),
            ("volume_prefactor", prefactor(bg, false, dd / 2.0)),
        ],
    ))
}

/// Covariant first derivatives `∇_β η^α` (`[p]`, row `α`, column `β`).
fn covariant_gradient(bg: &Background, eta: &GeneratorField) -> Vec<DMatrix<f64>> {
    let d = bg.dim();
    let (d1, d2) = grid_partials(bg.grid(), &eta.samples);
    (0..bg.len())
        .map(|p| {
            let partial = PartialJet {
                value: eta.samples[p].clone(),
                jacobian: DMatrix::from_fn(d, d, |a, b| d1[p][b][a]),
                hessian: Tensor3::from_fn(d, |a, b, c| d2[p][b][c][a]),
            };
            covariant_jet_from_partials(&bg.point(p).intrinsic, &partial).first
        })
        .collect()
}

/// Left-invariant measure over the generator `η` of reparametrizations.
pub fn eta_measure_log(bg: &Background, eta: &GeneratorField) -> Result<FunctionalWeight> {
    if eta.samples.len() != bg.len() {
        return Err(GeoError::Precondition("generator field does not match the background grid".into()));
    }
    let grads = covariant_gradient(bg, eta);
    let (mut div, mut sq, mut curv) = (0.0, 0.0, 0.0);
    for (p, (pg, g)) in bg.geometry.points.iter().zip(&grads).enumerate() {
        let w = measure(bg, pg);
        div -= w * g.trace();
        sq += w * 0.5 * (g * g).trace();
        curv += w * quadratic_form(&pg.intrinsic.ricci, &eta.samples[p], &eta.samples[p]) / 3.0;
    }
    let d = bg.dim() as f64;
    let pre: f64 = bg
        .geometry
        .points
        .iter()
        .map(|p| p.sqrt_g.ln() + d / 2.0 * (p.sqrt_g / bg.geometry.normalization).ln())
        .sum();
    Ok(FunctionalWeight::new(
        bg,
        vec![("divergence", div), ("derivative_square", sq), ("curvature", curv), ("volume_prefactor", pre)],
    ))
}

/// Faddeev-Popov log-determinant of the tangential gauge:
/// `Σ w√g/𝒩 (−2H_i ξ₀ⁱ − ½ H_iαβ H_j^{αβ} ξⁱξʲ − (1/3) R̃(∂^αX, N_i, ∂_αX, N_j) ξⁱξʲ)`.
pub fn fp_log_determinant(bg: &Background, xi: &XiDecomposition) -> Result<FunctionalWeight> {
    let xi0 = xi_invariant(bg, xi);
    let k = bg.codim();
    let (mut mean, mut ext, mut amb) = (0.0, 0.0, 0.0);
    for (p, pg) in bg.geometry.points.iter().enumerate() {
        let w = measure(bg, pg);
        let h = pg.mean_curvature();
        let n = &xi.normal[p];
        for i in 0..k {
            mean -= w * 2.0 * h[i] * xi0[p][i];
            for j in 0..k {
                ext -= w * 0.5 * extrinsic_product(pg, i, j) * n[i] * n[j];
                amb -= w * tangential_curvature(pg, i, j) * n[i] * n[j] / 3.0;
            }
        }
    }
    Ok(FunctionalWeight::new(
        bg,
        vec![("mean_curvature", mean), ("extrinsic_square", ext), ("ambient_curvature", amb)],
    ))
}

/// Determinant of the map `(ξ^α, ξⁱ) ↦ Ẋ` at each grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameJacobian {
    /// `det(∂X | N)`, signed by the frame orientation.
    pub det_a: Vec<f64>,
    pub sqrt_g_over_h: Vec<f64>,
    /// `max |ǀdet Aǀ − √(g/h)|`.
    pub max_residual: f64,
}

pub fn frame_jacobian_check(bg: &Background) -> FrameJacobian {
    let mut det_a = Vec::with_capacity(bg.len());
    let mut ratio = Vec::with_capacity(bg.len());
    let mut worst: f64 = 0.0;
    for p in &bg.geometry.points {
        let d = p.dim();
        let dd = p.x.len();
        let a = DMatrix::from_fn(dd, dd, |mu, c| if c < d { p.tangents[(mu, c)] } else { p.normals[(mu, c - d)] });
        let det = a.determinant();
        let r = (p.metric().determinant() / p.ambient.metric.determinant()).abs().sqrt();
        worst = worst.max((det.abs() - r).abs());
        det_a.push(det);
        ratio.push(r);
    }
    FrameJacobian { det_a, sqrt_g_over_h: ratio, max_residual: worst }
}

/// Gauge-fixed exponent over normal deviations (`ξ^α = 0`) with the `Dξ`
/// prefactor `Σ ((D−d)/2) log(√g/𝒩)`.
pub fn gauge_fixed_log_integrand(bg: &Background, xi: &XiDecomposition) -> Result<FunctionalWeight> {
    let tangential = xi.tangential.iter().flatten().fold(0.0f64, |m, c| m.max(c.abs()));
    if tangential > 0.0 {
        return Err(GeoError::Precondition(format!(
            "gauge-fixed integrand needs ξ^α = 0, got max |ξ_α| = {tangential:e}"
        )));
    }
    let k = bg.codim();
    let (mut mean, mut ext, mut tan, mut nor) = (0.0, 0.0, 0.0, 0.0);
    for (p, pg) in bg.geometry.points.iter().enumerate() {
        let w = measure(bg, pg);
        let h = pg.mean_curvature();
        let n = &xi.normal[p];
        for i in 0..k {
            mean -= w * 2.0 * h[i] * n[i];
            for j in 0..k {
                let nn = n[i] * n[j];
                ext -= w * 0.5 * extrinsic_product(pg, i, j) * nn;
                tan -= w * 0.5 * tangential_curvature(pg, i, j) * nn;
                nor -= w * normal_curvature(pg, i, j) * nn / 6.0;
            }
        }
    }
    let codim = k as f64;
    Ok(FunctionalWeight::new(
        bg,
        vec![
            ("mean_curvature", mean),
            ("extrinsic_square", ext),
            ("ambient_tangential", tan),
            ("ambient_normal", nor),
            ("xi_prefactor", prefactor(bg, false, codim / 2.0)),
        ],
    ))
}

/// The gauge-fixed integrand assembled from its ingredients: the right
/// measure on `Ẋ = ξⁱN_i`, the Faddeev-Popov determinant, the frame Jacobian
/// `log|det A|` and the removed `D_L η` prefactor. Terms are grouped to match
/// [`gauge_fixed_log_integrand`]; the two ambient-curvature projections are
/// compared as a sum.
pub fn recombined_log_integrand(bg: &Background, xi: &XiDecomposition) -> Result<FunctionalWeight> {
    let dev = crate::deviation::recompose(bg, xi);
    let right = functional_right_measure_log(bg, &dev)?;
    let fp = fp_log_determinant(bg, xi)?;
    let jac: f64 = frame_jacobian_check(bg).det_a.iter().map(|d| d.abs().ln()).sum();
    let d = bg.dim() as f64;
    let eta_pre: f64 = bg
        .geometry
        .points
        .iter()
        .map(|p| p.sqrt_g.ln() + d / 2.0 * (p.sqrt_g / bg.geometry.normalization).ln())
        .sum();
    let get = |w: &FunctionalWeight, k: &str| w.term(k).unwrap_or(0.0);
    Ok(FunctionalWeight::new(
        bg,
        vec![
            ("mean_curvature", get(&fp, "mean_curvature")),
            ("extrinsic_square", get(&fp, "extrinsic_square")),
            ("ambient", get(&right, "ricci") + get(&fp, "ambient_curvature")),
            (
                "xi_prefactor",
                get(&right, "metric_prefactor") + get(&right, "volume_prefactor") + jac - eta_pre,
            ),
        ],
    ))
}

/// Area action `𝒩⁻¹ Σ w √|det g|`.
pub fn nambu_goto_action(imm: &Immersion) -> Result<f64> {
    let d = imm.dim();
    let first: Vec<Vec<Vec<f64>>> = (0..d).map(|a| imm.derivative(&[a])).collect();
    let mut total = 0.0;
    for (p, x) in imm.samples().iter().enumerate() {
        let h = imm.ambient().metric_at(x)?.metric;
        let g = DMatrix::from_fn(d, d, |a, b| quadratic_form(&h, &first[a][p], &first[b][p]));
        let det = g.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(GeoError::IrregularImmersion { index: imm.grid().multi_index(p) });
        }
        total += det.abs().sqrt();
    }
    Ok(total * imm.weight() / imm.normalization())
}

/// Itemized semiclassical expansion of the area action around the background.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionExpansion {
    pub background: f64,
    /// `−2 H_i ξ₀ⁱ`
    pub linear: f64,
    /// `−½ ξ_j ∇² ξʲ`
    pub kinetic: f64,
    /// `−½ H^{jαβ} H_iαβ ξ_j ξⁱ`
    pub extrinsic_square: f64,
    /// `+2 H^j H_i ξ_j ξⁱ`
    pub mean_square: f64,
    /// `−½ R̃(∂^αX, N^j, ∂_αX, N_i) ξ_j ξⁱ`
    pub curvature: f64,
}

impl ActionExpansion {
    pub fn total(&self) -> f64 {
        self.background + self.linear + self.kinetic + self.extrinsic_square + self.mean_square + self.curvature
    }
}

/// Normal-bundle Laplacian `g^{αβ} ∇_α∇_β ξⁱ`, as `[p][i]`.
fn normal_laplacian(bg: &Background, normal: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = bg.dim();
    let k = bg.codim();
    let (d1, d2) = grid_partials(bg.grid(), normal);
    (0..bg.len())
        .map(|p| {
            let pg = bg.point(p);
            let xi = &normal[p];
            let a = &pg.connection;
            // ∇_α ξⁱ
            let first: Vec<Vec<f64>> = (0..d)
                .map(|al| (0..k).map(|i| d1[p][al][i] + (0..k).map(|j| a[al][(i, j)] * xi[j]).sum::<f64>()).collect())
                .collect();
            let gi = pg.inverse_metric();
            (0..k)
                .map(|i| {
                    let mut s = 0.0;
                    for al in 0..d {
                        for be in 0..d {
                            // ∇_β ∇_α ξⁱ
                            let mut v = d2[p][be][al][i];
                            for j in 0..k {
                                v += pg.dconnection[be][al][(i, j)] * xi[j] + a[al][(i, j)] * d1[p][be][j];
                                v += a[be][(i, j)] * first[al][j];
                            }
                            for ga in 0..d {
                                v -= pg.intrinsic.gamma[(ga, be, al)] * first[ga][i];
                            }
                            s += gi[(al, be)] * v;
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// `𝒩⁻¹ Σ w √g [1 − 2H_iξ₀ⁱ − ½ ξ_j (δ∇² + H·H − 4HH + R̃ projection) ξⁱ]`.
pub fn action_expansion(bg: &Background, xi: &XiDecomposition) -> Result<ActionExpansion> {
    let xi0 = xi_invariant(bg, xi);
    let lap = normal_laplacian(bg, &xi.normal);
    let k = bg.codim();
    let mut out = ActionExpansion {
        background: 0.0,
        linear: 0.0,
        kinetic: 0.0,
        extrinsic_square: 0.0,
        mean_square: 0.0,
        curvature: 0.0,
    };
    for (p, pg) in bg.geometry.points.iter().enumerate() {
        let w = measure(bg, pg);
        let h = pg.mean_curvature();
        let n = &xi.normal[p];
        out.background += w;
        for i in 0..k {
            out.linear -= w * 2.0 * h[i] * xi0[p][i];
            out.kinetic -= w * 0.5 * n[i] * lap[p][i];
            for j in 0..k {
                let nn = n[i] * n[j];
                out.extrinsic_square -= w * 0.5 * extrinsic_product(pg, j, i) * nn;
                out.mean_square += w * 2.0 * h[j] * h[i] * nn;
                out.curvature -= w * 0.5 * tangential_curvature(pg, j, i) * nn;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn breakdown_sums_to_total() {
        let bg = Background::new(Immersion::circle(1.0, 32).unwrap()).unwrap();
        let xi = XiDecomposition::normal_only(&bg, (0..32).map(|p| vec![0.01 * p as f64]).collect()).unwrap();
        let w = gauge_fixed_log_integrand(&bg, &xi).unwrap();
        let s: f64 = w.breakdown.iter().map(|(_, v)| v).sum();
        assert_eq!(s, w.log_density);
        assert!(w.to_csv().starts_with("term,value\n"));
    }

    #[test]
    fn flat_ambient_has_no_ricci_term_and_measure_is_quadratic() {
        let bg = Background::new(Immersion::circle(1.0, 32).unwrap()).unwrap();
        let dev = DeviationField::new(&bg, vec![vec![0.1, -0.2]; 32]).unwrap();
        assert_eq!(functional_right_measure_log(&bg, &dev).unwrap().term("ricci"), Some(0.0));
    }

    #[test]
    fn constant_generator_on_circle_has_zero_exponent() {
        let bg = Background::new(Immersion::circle(1.5, 32).unwrap()).unwrap();
        let w = eta_measure_log(&bg, &GeneratorField::new(&bg, vec![vec![0.3]; 32]).unwrap()).unwrap();
        for t in ["divergence", "derivative_square", "curvature"] {
            assert!(w.term(t).unwrap().abs() < 1e-12, "{t}");
        }
    }

    #[test]
    fn geodesic_background_has_trivial_fp_determinant() {
        let bg = Background::new(Immersion::line(2.0, 16).unwrap()).unwrap();
        let xi = XiDecomposition::from_upper(&bg, vec![vec![0.2]; 16], vec![vec![0.3]; 16]).unwrap();
        assert_eq!(fp_log_determinant(&bg, &xi).unwrap().log_density, 0.0);
    }

    #[test]
    fn circle_frame_jacobian_is_radius() {
        let bg = Background::new(Immersion::circle(1.7, 64).unwrap()).unwrap();
        let j = frame_jacobian_check(&bg);
        for (d, r) in j.det_a.iter().zip(&j.sqrt_g_over_h) {
            assert_relative_eq!(d.abs(), 1.7, epsilon = 1e-4);
            assert_relative_eq!(*r, 1.7, epsilon = 1e-4);
        }
        assert!(j.max_residual < 1e-10);
    }

    #[test]
    fn tangential_input_is_rejected() {
        let bg = Background::new(Immersion::circle(1.0, 16).unwrap()).unwrap();
        let xi = XiDecomposition::from_upper(&bg, vec![vec![0.1]; 16], vec![vec![0.0]; 16]).unwrap();
        assert!(gauge_fixed_log_integrand(&bg, &xi).is_err());
    }

    #[test]
    fn area_of_circle_and_sphere() {
        assert_relative_eq!(nambu_goto_action(&Immersion::circle(1.3, 256).unwrap()).unwrap(), 2.0 * PI * 1.3, max_relative = 1e-6);
        assert_relative_eq!(nambu_goto_action(&Immersion::sphere_smooth(1.0, 256, 256).unwrap()).unwrap(), 4.0 * PI, max_relative = 1e-6);
    }

    #[test]
    fn zero_deviation_expansion_is_the_area() {
        let imm = Immersion::circle(2.0, 64).unwrap();
        let bg = Background::new(imm.clone()).unwrap();
        let xi = XiDecomposition::normal_only(&bg, vec![vec![0.0]; 64]).unwrap();
        let e = action_expansion(&bg, &xi).unwrap();
        assert_relative_eq!(e.total(), nambu_goto_action(&imm).unwrap(), max_relative = 1e-12);
    }
}
