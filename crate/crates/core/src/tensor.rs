//! Dense rank-3 and rank-4 arrays over a fixed dimension.
//!
//! Index order is exactly the order of the arguments to `get`/`set`; the
//! meaning of each slot is documented at the construction site.

use std::ops::{Index, IndexMut};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n * n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    t[(i, j, k)] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;
    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        &self.data[(i * self.n + j) * self.n + k]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (i, j, k): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(i * self.n + j) * self.n + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n * n * n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        t[(i, j, k, l)] = f(i, j, k, l);
                    }
                }
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Index<(usize, usize, usize, usize)> for Tensor4 {
    type Output = f64;
    fn index(&self, (i, j, k, l): (usize, usize, usize, usize)) -> &f64 {
        &self.data[((i * self.n + j) * self.n + k) * self.n + l]
    }
}

impl IndexMut<(usize, usize, usize, usize)> for Tensor4 {
    fn index_mut(&mut self, (i, j, k, l): (usize, usize, usize, usize)) -> &mut f64 {
        &mut self.data[((i * self.n + j) * self.n + k) * self.n + l]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_follows_argument_order() {
        let t = Tensor3::from_fn(3, |i, j, k| (100 * i + 10 * j + k) as f64);
        assert_eq!(t[(2, 0, 1)], 201.0);
        assert_eq!(t[(0, 2, 1)], 21.0);
        let r = Tensor4::from_fn(2, |i, j, k, l| (1000 * i + 100 * j + 10 * k + l) as f64);
        assert_eq!(r[(1, 0, 1, 1)], 1011.0);
        assert_eq!(r.dim(), 2);
    }

    #[test]
    fn scale_and_max_abs() {
        let mut t = Tensor3::from_fn(2, |i, j, k| if (i, j, k) == (1, 1, 0) { -3.0 } else { 1.0 });
        assert_eq!(t.max_abs(), 3.0);
        t.scale(-2.0);
        assert_eq!(t[(1, 1, 0)], 6.0);
        assert_eq!(Tensor4::zeros(3).max_abs(), 0.0);
    }
}
