//! Symmetric tridiagonal systems.

use crate::error::{Error, Result};

/// Symmetric tridiagonal matrix stored by its diagonal and first off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiag {
    pub fn zeros(n: usize) -> Self {
        SymTridiag {
            diag: vec![0.0; n],
            off: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Adds a symmetric 2x2 block `[[a, b], [b, c]]` at rows/cols `(i, i + 1)`.
    pub fn add_block(&mut self, i: usize, a: f64, b: f64, c: f64) {
        self.diag[i] += a;
        self.off[i] += b;
        self.diag[i + 1] += c;
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * v[i];
            if i > 0 {
                acc += self.off[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                acc += self.off[i] * v[i + 1];
            }
            out[i] = acc;
        }
        out
    }

    /// LDLᵀ factorization; fails unless every pivot is strictly positive.
    pub fn factor(&self) -> Result<LdlFactor> {
        let n = self.dim();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        for i in 0..n {
            let mut piv = self.diag[i];
            if i > 0 {
                piv -= l[i - 1] * l[i - 1] * d[i - 1];
            }
            if !(piv > 0.0) || !piv.is_finite() {
                return Err(Error::SingularSystem { row: i, pivot: piv });
            }
            d[i] = piv;
            if i + 1 < n {
                l[i] = self.off[i] / piv;
            }
        }
        Ok(LdlFactor { d, l })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.factor()?.solve(rhs))
    }
}

#[derive(Debug, Clone)]
pub struct LdlFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl LdlFactor {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut z = rhs.to_vec();
        for i in 1..n {
            z[i] -= self.l[i - 1] * z[i - 1];
        }
        for i in 0..n {
            z[i] /= self.d[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            z[i] -= self.l[i] * z[i + 1];
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_laplacian() {
        let n = 7;
        let m = SymTridiag {
            diag: vec![2.0; n],
            off: vec![-1.0; n - 1],
        };
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = m.mul_vec(&x);
        let y = m.solve(&b).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = SymTridiag {
            diag: vec![1.0, -1.0],
            off: vec![0.0],
        };
        assert!(matches!(
            m.factor(),
            Err(Error::SingularSystem { row: 1, .. })
        ));
    }
}
