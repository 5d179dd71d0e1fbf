//! Chart-coordinate vector fields with analytic or finite-difference jets.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor3;

type ValueFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
type HessianFn = Arc<dyn Fn(&[f64]) -> Tensor3 + Send + Sync>;

/// Partial derivatives of a field at one point.
///
/// `jacobian[(a, b)] = ∂_b v^a`, `hessian[(a, b, c)] = ∂_b ∂_c v^a`.
#[derive(Debug, Clone)]
pub struct PartialJet {
    pub value: Vec<f64>,
    pub jacobian: DMatrix<f64>,
    pub hessian: Tensor3,
}

#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    value: ValueFn,
    jacobian: Option<JacobianFn>,
    hessian: Option<HessianFn>,
    fd_step: f64,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .field("analytic_hessian", &self.hessian.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

impl VectorField {
    pub fn from_fn(dim: usize, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self { dim, value: Arc::new(f), jacobian: None, hessian: None, fd_step: 1e-3 }
    }

    /// Field with closed-form first and second partial derivatives.
    pub fn analytic(
        dim: usize,
        value: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        hessian: impl Fn(&[f64]) -> Tensor3 + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Arc::new(value),
            jacobian: Some(Arc::new(jacobian)),
            hessian: Some(Arc::new(hessian)),
            fd_step: 1e-3,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    /// Chart-constant components (the promotion rule for bare vectors).
    pub fn constant(components: Vec<f64>) -> Self {
        let dim = components.len();
        Self::analytic(
            dim,
            move |_| components.clone(),
            move |_| DMatrix::zeros(dim, dim),
            move |_| Tensor3::zeros(dim),
        )
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        self.fd_step = step;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.value)(x)
    }

    /// Multiplies the field (and all its derivatives) by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let value = self.value.clone();
        let jacobian = self.jacobian.clone();
        let hessian = self.hessian.clone();
        Self {
            dim: self.dim,
            value: Arc::new(move |x| value(x).into_iter().map(|v| v * s).collect()),
            jacobian: jacobian.map(|j| -> JacobianFn { Arc::new(move |x| j(x) * s) }),
            hessian: hessian.map(|h| -> HessianFn {
                Arc::new(move |x| {
                    let mut t = h(x);
                    t.scale(s);
                    t
                })
            }),
            fd_step: self.fd_step,
        }
    }

    pub fn jacobian_at(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.jacobian {
            Some(j) => j(x),
            None => fd_jacobian(self.dim, x, self.fd_step, |p| (self.value)(p)),
        }
    }

    pub fn hessian_at(&self, x: &[f64]) -> Tensor3 {
        if let Some(h) = &self.hessian {
            return h(x);
        }
        let n = self.dim;
        let s = self.fd_step;
        let mut out = Tensor3::zeros(n);
        // differentiate the Jacobian (analytic or not) once more
        for c in 0..n {
            let col = fd_axis(x, c, s, |p| {
                let j = self.jacobian_at(p);
                j.as_slice().to_vec()
            });
            for a in 0..n {
                for b in 0..n {
                    // column-major storage: (a, b) at b * n + a
                    out[(a, b, c)] = col[b * n + a];
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                for c in b + 1..n {
                    let m = 0.5 * (out[(a, b, c)] + out[(a, c, b)]);
                    out[(a, b, c)] = m;
                    out[(a, c, b)] = m;
                }
            }
        }
        out
    }

    pub fn jet(&self, x: &[f64]) -> PartialJet {
        PartialJet { value: self.eval(x), jacobian: self.jacobian_at(x), hessian: self.hessian_at(x) }
    }
}

/// Fourth-order central difference of a vector-valued function along axis `c`.
pub(crate) fn fd_axis(x: &[f64], c: usize, s: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut p = x.to_vec();
    let mut at = |off: f64| {
        p[c] = x[c] + off;
        f(&p)
    };
    let fp2 = at(2.0 * s);
    let fp1 = at(s);
    let fm1 = at(-s);
    let fm2 = at(-2.0 * s);
    fp2.iter()
        .zip(&fp1)
        .zip(fm1.iter().zip(&fm2))
        .map(|((a2, a1), (b1, b2))| (-a2 + 8.0 * a1 - 8.0 * b1 + b2) / (12.0 * s))
        .collect()
}

pub(crate) fn fd_jacobian(dim: usize, x: &[f64], s: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let first = f(x);
    let mut j = DMatrix::zeros(first.len(), dim);
    for b in 0..dim {
        let col = fd_axis(x, b, s, &f);
        for (a, v) in col.into_iter().enumerate() {
            j[(a, b)] = v;
        }
    }
    j
}

/// One Fourier mode `cos_coeffs·cos(k·x) + sin_coeffs·sin(k·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierMode {
    pub wavevector: Vec<f64>,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

/// Low-mode trigonometric field; values and all derivatives are closed-form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierField {
    /// Number of components.
    pub dim: usize,
    #[serde(default)]
    pub constant: Vec<f64>,
    #[serde(default)]
    pub modes: Vec<FourierMode>,
}

impl FourierField {
    pub fn zero(dim: usize) -> Self {
        Self { dim, constant: vec![0.0; dim], modes: Vec::new() }
    }

    /// Deterministic random field: integer wavenumbers (in units of
    /// `2π/period` per axis) with |k_i| ≤ `max_mode`, coefficients uniform in
    /// `[-amplitude, amplitude]`, drawn from ChaCha8 seeded with `seed`.
    pub fn random(
        dim: usize,
        components: usize,
        periods: &[f64],
        max_mode: i32,
        amplitude: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes = Vec::new();
        let mut ks: Vec<Vec<i32>> = vec![vec![]];
        for _ in 0..dim {
            ks = ks
                .into_iter()
                .flat_map(|k| (-max_mode..=max_mode).map(move |m| {
                    let mut k = k.clone();
                    k.push(m);
                    k
                }))
                .collect();
        }
        for k in ks {
            // keep one representative of each ±k pair, skip k = 0
            let first_nonzero = k.iter().find(|&&m| m != 0);
            match first_nonzero {
                Some(&m) if m > 0 => {}
                _ => continue,
            }
            let wavevector = k
                .iter()
                .zip(periods)
                .map(|(&m, &p)| 2.0 * std::f64::consts::PI * m as f64 / p)
                .collect();
            let cos = (0..components).map(|_| rng.gen_range(-amplitude..=amplitude)).collect();
            let sin = (0..components).map(|_| rng.gen_range(-amplitude..=amplitude)).collect();
            modes.push(FourierMode { wavevector, cos, sin });
        }
        let constant = (0..components).map(|_| rng.gen_range(-amplitude..=amplitude)).collect();
        Self { dim: components, constant, modes }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            constant: self.constant.iter().map(|c| c * s).collect(),
            modes: self
                .modes
                .iter()
                .map(|m| FourierMode {
                    wavevector: m.wavevector.clone(),
                    cos: m.cos.iter().map(|c| c * s).collect(),
                    sin: m.sin.iter().map(|c| c * s).collect(),
                })
                .collect(),
        }
    }

    fn constant_part(&self, a: usize) -> f64 {
        self.constant.get(a).copied().unwrap_or(0.0)
    }

    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.dim).map(|a| self.constant_part(a)).collect();
        for m in &self.modes {
            let phase: f64 = m.wavevector.iter().zip(x).map(|(k, x)| k * x).sum();
            let (s, c) = phase.sin_cos();
            for (a, o) in out.iter_mut().enumerate() {
                *o += m.cos[a] * c + m.sin[a] * s;
            }
        }
        out
    }

    /// `(a, b) = ∂_b v^a`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(self.dim, n);
        for m in &self.modes {
            let phase: f64 = m.wavevector.iter().zip(x).map(|(k, x)| k * x).sum();
            let (s, c) = phase.sin_cos();
            for a in 0..self.dim {
                let amp = -m.cos[a] * s + m.sin[a] * c;
                for b in 0..n {
                    j[(a, b)] += amp * m.wavevector[b];
                }
            }
        }
        j
    }

    /// `(a, b, c) = ∂_b ∂_c v^a`; the field must have as many components as
    /// the domain has coordinates.
    pub fn hessian(&self, x: &[f64]) -> Tensor3 {
        let n = x.len();
        assert_eq!(n, self.dim, "hessian needs a tangent field");
        let mut h = Tensor3::zeros(n);
        for m in &self.modes {
            let phase: f64 = m.wavevector.iter().zip(x).map(|(k, x)| k * x).sum();
            let (s, c) = phase.sin_cos();
            for a in 0..self.dim {
                let amp = -(m.cos[a] * c + m.sin[a] * s);
                for b in 0..n {
                    for cc in 0..n {
                        h[(a, b, cc)] += amp * m.wavevector[b] * m.wavevector[cc];
                    }
                }
            }
        }
        h
    }

    /// Third partials `∂_b ∂_c ∂_e v^a`, returned flat as `[a][b][c][e]`.
    pub fn third(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut t = vec![0.0; self.dim * n * n * n];
        for m in &self.modes {
            let phase: f64 = m.wavevector.iter().zip(x).map(|(k, x)| k * x).sum();
            let (s, c) = phase.sin_cos();
            for a in 0..self.dim {
                let amp = m.cos[a] * s - m.sin[a] * c;
                for b in 0..n {
                    for cc in 0..n {
                        for e in 0..n {
                            t[((a * n + b) * n + cc) * n + e] +=
                                amp * m.wavevector[b] * m.wavevector[cc] * m.wavevector[e];
                        }
                    }
                }
            }
        }
        t
    }

    /// Chart vector field on a manifold of the same dimension.
    pub fn to_vector_field(&self) -> VectorField {
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        VectorField::analytic(self.dim, move |x| a.value(x), move |x| b.jacobian(x), move |x| c.hessian(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample() -> FourierField {
        FourierField::random(2, 2, &[1.0, 2.0], 1, 0.3, 7)
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let f = sample();
        let x = [0.3, -0.2];
        let fd = VectorField::from_fn(2, {
            let f = f.clone();
            move |p| f.value(p)
        });
        let ja = f.jacobian(&x);
        let jf = fd.jacobian_at(&x);
        assert_relative_eq!(ja, jf, epsilon = 1e-9);
        let ha = f.hessian(&x);
        let hf = fd.hessian_at(&x);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    assert_relative_eq!(ha[(a, b, c)], hf[(a, b, c)], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn random_fields_are_reproducible() {
        assert_eq!(sample(), sample());
        assert_ne!(sample(), FourierField::random(2, 2, &[1.0, 2.0], 1, 0.3, 8));
    }

    #[test]
    fn scaling_is_linear() {
        let f = sample();
        let x = [0.1, 0.7];
        let v = f.value(&x);
        let w = f.scaled(-2.5).value(&x);
        for (a, b) in v.iter().zip(&w) {
            assert_relative_eq!(*b, -2.5 * a, epsilon = 1e-14);
        }
        let vf = f.to_vector_field().scaled(3.0);
        assert_relative_eq!(vf.jacobian_at(&x), f.jacobian(&x) * 3.0, epsilon = 1e-14);
    }
}
