//! Nodal functions on uniform meshes of [0, 1] and the discrete inner products.

use crate::error::{Error, Result};
use crate::linalg::SymTridiag;

/// Piecewise-linear function on `n_cells` uniform cells of [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    n_cells: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "grid function needs at least 2 nodal values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(format!(
                "non-finite nodal value at index {i}"
            )));
        }
        Ok(GridFunction {
            n_cells: values.len() - 1,
            values,
        })
    }

    pub fn zeros(n_cells: usize) -> Self {
        Self::constant(n_cells, 0.0)
    }

    pub fn constant(n_cells: usize, c: f64) -> Self {
        assert!(n_cells >= 1, "mesh needs at least one cell");
        GridFunction {
            n_cells,
            values: vec![c; n_cells + 1],
        }
    }

    /// Samples `f` at the mesh nodes.
    pub fn from_fn(n_cells: usize, mut f: impl FnMut(f64) -> f64) -> Self {
        assert!(n_cells >= 1, "mesh needs at least one cell");
        let h = 1.0 / n_cells as f64;
        let values = (0..=n_cells).map(|i| f(i as f64 * h)).collect();
        GridFunction { n_cells, values }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_cells as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.n_cells as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Linear interpolation; `s` is clamped to [0, 1].
    pub fn eval(&self, s: f64) -> f64 {
        let n = self.n_cells;
        let pos = s.clamp(0.0, 1.0) * n as f64;
        let i = (pos.floor() as usize).min(n - 1);
        let t = pos - i as f64;
        (1.0 - t) * self.values[i] + t * self.values[i + 1]
    }

    pub fn resample(&self, n_cells: usize) -> GridFunction {
        if n_cells == self.n_cells {
            return self.clone();
        }
        GridFunction::from_fn(n_cells, |s| self.eval(s))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            n_cells: self.n_cells,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> GridFunction {
        self.map(|v| a * v)
    }

    pub fn same_mesh(&self, other: &GridFunction) -> Result<()> {
        if self.n_cells != other.n_cells {
            return Err(Error::DimensionMismatch(format!(
                "mesh mismatch: {} vs {} cells",
                self.n_cells, other.n_cells
            )));
        }
        Ok(())
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &GridFunction) -> Result<GridFunction> {
        self.same_mesh(other)?;
        Ok(GridFunction {
            n_cells: self.n_cells,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        })
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.same_mesh(other)?;
        Ok(GridFunction {
            n_cells: self.n_cells,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x - y)
                .collect(),
        })
    }

    /// Nodal clamp from below.
    pub fn clamp_min(&self, lo: f64) -> GridFunction {
        self.map(|v| v.max(lo))
    }

    /// Continuous L² distance between the interpolant and `exact`, by
    /// 3-point Gauss quadrature on every cell.
    pub fn l2_error_against(&self, exact: impl Fn(f64) -> f64) -> f64 {
        const GP: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const GW: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let h = self.h();
        let mut acc = 0.0;
        for i in 0..self.n_cells {
            let a = i as f64 * h;
            for (p, w) in GP.iter().zip(GW) {
                let t = 0.5 * (1.0 + p);
                let s = a + t * h;
                let yh = (1.0 - t) * self.values[i] + t * self.values[i + 1];
                let e = yh - exact(s);
                acc += 0.5 * h * w * e * e;
            }
        }
        acc.sqrt()
    }
}

/// Adjoint of `resample`: pulls a nodal vector on the `g.len() - 1` cell mesh
/// back to nodal weights on an `n_from` cell mesh.
pub fn resample_adjoint(n_from: usize, g: &[f64]) -> Vec<f64> {
    let n_to = g.len() - 1;
    if n_to == n_from {
        return g.to_vec();
    }
    let mut out = vec![0.0; n_from + 1];
    for (i, gi) in g.iter().enumerate() {
        let pos = (i as f64 / n_to as f64) * n_from as f64;
        let j = (pos.floor() as usize).min(n_from - 1);
        let t = pos - j as f64;
        out[j] += (1.0 - t) * gi;
        out[j + 1] += t * gi;
    }
    out
}

/// Trapezoid weights `h/2, h, …, h, h/2` for `n_cells` cells.
pub fn trapezoid_weights(n_cells: usize) -> Vec<f64> {
    let h = 1.0 / n_cells as f64;
    let mut w = vec![h; n_cells + 1];
    w[0] = 0.5 * h;
    w[n_cells] = 0.5 * h;
    w
}

/// Composite trapezoid rule of nodal values on a uniform mesh.
pub fn trapezoid(values: &[f64]) -> f64 {
    let n = values.len() - 1;
    let h = 1.0 / n as f64;
    let inner: f64 = values.iter().sum();
    h * (inner - 0.5 * (values[0] + values[n]))
}

/// Which discrete inner product a function space carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    L2,
    H1,
}

impl SpaceKind {
    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::L2 => "L2",
            SpaceKind::H1 => "H1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L2" => Ok(SpaceKind::L2),
            "H1" => Ok(SpaceKind::H1),
            other => Err(Error::Parse(format!("unknown space kind '{other}'"))),
        }
    }

    pub fn inner(self, a: &GridFunction, b: &GridFunction) -> Result<f64> {
        a.same_mesh(b)?;
        Ok(self.inner_raw(a.values(), b.values()))
    }

    /// Inner product of raw nodal vectors of equal length.
    pub fn inner_raw(self, a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() - 1;
        let h = 1.0 / n as f64;
        let mut l2 = 0.0;
        for i in 0..=n {
            l2 += a[i] * b[i];
        }
        l2 = h * (l2 - 0.5 * (a[0] * b[0] + a[n] * b[n]));
        match self {
            SpaceKind::L2 => l2,
            SpaceKind::H1 => {
                let mut d = 0.0;
                for i in 0..n {
                    d += (a[i + 1] - a[i]) * (b[i + 1] - b[i]);
                }
                l2 + d / h
            }
        }
    }

    pub fn norm(self, a: &GridFunction) -> f64 {
        self.inner_raw(a.values(), a.values()).max(0.0).sqrt()
    }

    /// Gram matrix `G` with `⟨a, b⟩ = aᵀ G b`.
    pub fn gram(self, n_cells: usize) -> SymTridiag {
        let h = 1.0 / n_cells as f64;
        let mut g = SymTridiag::zeros(n_cells + 1);
        for i in 0..n_cells {
            match self {
                SpaceKind::L2 => g.add_block(i, 0.5 * h, 0.0, 0.5 * h),
                SpaceKind::H1 => g.add_block(i, 0.5 * h + 1.0 / h, -1.0 / h, 0.5 * h + 1.0 / h),
            }
        }
        g
    }

    /// Riesz representer of the functional `v ↦ Σ e_i v_i`: solves `G g = e`.
    pub fn riesz(self, euclidean: &[f64]) -> Vec<f64> {
        let n = euclidean.len() - 1;
        match self {
            SpaceKind::L2 => {
                let w = trapezoid_weights(n);
                euclidean.iter().zip(&w).map(|(e, w)| e / w).collect()
            }
            SpaceKind::H1 => self
                .gram(n)
                .solve(euclidean)
                .expect("H1 Gram matrix is positive definite"),
        }
    }
}
