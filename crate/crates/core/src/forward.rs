//! Linear finite element forward operators for the two model problems.
//!
//! * a-example: `-(x y')' = f`, `y(0) = y(1) = 0`, unknown diffusion `x >= nu`.
//! * c-example: `-y'' + x y = f`, `y(0) = y(1) = 0`, unknown reaction `x >= 0`.

use crate::error::{Error, Result};
use crate::grid::{GridFunction, SpaceKind};
use crate::linalg::SymTridiag;

/// Mesh size of the reference operator standing in for the exact solution map.
pub const N_REF: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemTag {
    AExample,
    CExample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemKind {
    pub tag: ProblemTag,
    pub nu: f64,
}

impl ProblemKind {
    pub fn new(tag: ProblemTag, nu: f64) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "nu must be positive, got {nu}"
            )));
        }
        Ok(ProblemKind { tag, nu })
    }

    pub fn a_example(nu: f64) -> Self {
        Self::new(ProblemTag::AExample, nu).expect("nu > 0")
    }

    pub fn c_example(nu: f64) -> Self {
        Self::new(ProblemTag::CExample, nu).expect("nu > 0")
    }

    /// Parameter space norm: H1 for the diffusion problem, L2 for the reaction problem.
    pub fn space(&self) -> SpaceKind {
        match self.tag {
            ProblemTag::AExample => SpaceKind::H1,
            ProblemTag::CExample => SpaceKind::L2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.tag {
            ProblemTag::AExample => "a-example",
            ProblemTag::CExample => "c-example",
        }
    }

    pub fn parse_tag(s: &str) -> Result<ProblemTag> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "a-example" | "aexample" => Ok(ProblemTag::AExample),
            "c" | "c-example" | "cexample" => Ok(ProblemTag::CExample),
            other => Err(Error::Parse(format!("unknown problem '{other}'"))),
        }
    }

    /// Lower bound the FEM solver enforces on nodal values of `x`.
    pub fn solver_bound(&self) -> f64 {
        match self.tag {
            ProblemTag::AExample => self.nu,
            ProblemTag::CExample => 0.0,
        }
    }

    pub fn check_admissible(&self, x: &GridFunction) -> Result<()> {
        let min = x.min();
        let bound = self.solver_bound();
        if min < bound {
            return Err(Error::NonAdmissibleCoefficient { min, bound });
        }
        Ok(())
    }

    /// True when `x >= nu` everywhere. For the c-example this is stricter than
    /// what the solver needs and is only reported.
    pub fn strictly_admissible(&self, x: &GridFunction) -> bool {
        x.min() >= self.nu
    }
}

/// Interior Galerkin matrix on `xn` (already on the solve mesh).
fn system_matrix(tag: ProblemTag, xn: &GridFunction) -> SymTridiag {
    let n = xn.n_cells();
    let h = xn.h();
    let x = xn.values();
    let mut full = SymTridiag::zeros(n + 1);
    for e in 0..n {
        let (x0, x1) = (x[e], x[e + 1]);
        match tag {
            ProblemTag::AExample => {
                let k = 0.5 * (x0 + x1) / h;
                full.add_block(e, k, -k, k);
            }
            ProblemTag::CExample => {
                let k = 1.0 / h;
                let m = h / 12.0;
                full.add_block(
                    e,
                    k + m * (3.0 * x0 + x1),
                    -k + m * (x0 + x1),
                    k + m * (x0 + 3.0 * x1),
                );
            }
        }
    }
    interior(&full)
}

fn interior(full: &SymTridiag) -> SymTridiag {
    let n = full.dim() - 1;
    SymTridiag {
        diag: full.diag[1..n].to_vec(),
        off: full.off[1..n - 1].to_vec(),
    }
}

/// Interior load vector of a piecewise-linear `f`.
fn load_vector(fn_: &GridFunction) -> Vec<f64> {
    let n = fn_.n_cells();
    let h = fn_.h();
    let f = fn_.values();
    (1..n)
        .map(|j| h / 6.0 * (f[j - 1] + 4.0 * f[j] + f[j + 1]))
        .collect()
}

fn with_boundary(interior: Vec<f64>) -> GridFunction {
    let mut v = Vec::with_capacity(interior.len() + 2);
    v.push(0.0);
    v.extend(interior);
    v.push(0.0);
    GridFunction::new(v).expect("finite solve output")
}

fn check_mesh(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need n >= 2 cells, got {n}"
        )));
    }
    Ok(())
}

/// Galerkin solution `y_n` on the `n`-cell mesh.
pub fn solve_forward_fem(
    kind: ProblemKind,
    x: &GridFunction,
    f: &GridFunction,
    n: usize,
) -> Result<GridFunction> {
    check_mesh(n)?;
    kind.check_admissible(x)?;
    let xn = x.resample(n);
    let a = system_matrix(kind.tag, &xn);
    let b = load_vector(&f.resample(n));
    Ok(with_boundary(a.solve(&b)?))
}

/// High-resolution FEM solution resampled to the mesh of `x`.
pub fn solve_forward_reference(
    kind: ProblemKind,
    x: &GridFunction,
    f: &GridFunction,
) -> Result<GridFunction> {
    solve_forward_reference_at(kind, x, f, N_REF)
}

pub fn solve_forward_reference_at(
    kind: ProblemKind,
    x: &GridFunction,
    f: &GridFunction,
    n_ref: usize,
) -> Result<GridFunction> {
    Ok(solve_forward_fem(kind, x, f, n_ref)?.resample(x.n_cells()))
}

/// Operator that surrogate diagnostics compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceMap {
    /// The reference solution `F[x]`.
    #[default]
    Forward,
    /// `F_n[c] + F_n'[c] (x - c)` around a center `c` on its own mesh.
    Linearized,
}

impl ReferenceMap {
    /// Image of `x` on the mesh of `center`.
    pub fn apply(
        self,
        kind: ProblemKind,
        f: &GridFunction,
        center: &GridFunction,
        x: &GridFunction,
    ) -> Result<GridFunction> {
        let n = center.n_cells();
        match self {
            ReferenceMap::Forward => Ok(solve_forward_reference(kind, x, f)?.resample(n)),
            ReferenceMap::Linearized => {
                let h = x.resample(n).sub(center)?;
                solve_forward_fem(kind, center, f, n)?
                    .add(&derivative_apply(kind, center, &h, f, n)?)
            }
        }
    }
}

/// `B(y) h` restricted to interior rows: the bilinear form derivative in `x`
/// applied to direction `h` and state `y`.
fn coefficient_derivative(tag: ProblemTag, hn: &GridFunction, y: &GridFunction) -> Vec<f64> {
    let n = hn.n_cells();
    let mesh = hn.h();
    let d = hn.values();
    let y = y.values();
    let mut full = vec![0.0; n + 1];
    for e in 0..n {
        let (d0, d1) = (d[e], d[e + 1]);
        let (y0, y1) = (y[e], y[e + 1]);
        match tag {
            ProblemTag::AExample => {
                let k = 0.5 * (d0 + d1) / mesh * (y1 - y0);
                full[e] -= k;
                full[e + 1] += k;
            }
            ProblemTag::CExample => {
                let m = mesh / 12.0;
                full[e] += m * ((3.0 * d0 + d1) * y0 + (d0 + d1) * y1);
                full[e + 1] += m * ((d0 + d1) * y0 + (d0 + 3.0 * d1) * y1);
            }
        }
    }
    full[1..n].to_vec()
}

/// `u = F_n'[x] h` on the `n`-cell mesh.
pub fn derivative_apply(
    kind: ProblemKind,
    x: &GridFunction,
    h: &GridFunction,
    f: &GridFunction,
    n: usize,
) -> Result<GridFunction> {
    x.same_mesh(h)?;
    let y = solve_forward_fem(kind, x, f, n)?;
    let a = system_matrix(kind.tag, &x.resample(n));
    let rhs: Vec<f64> = coefficient_derivative(kind.tag, &h.resample(n), &y)
        .into_iter()
        .map(|v| -v)
        .collect();
    Ok(with_boundary(a.solve(&rhs)?))
}

/// Adjoint of [`derivative_apply`] from `(Y, L2)` to `(X, kind.space())`.
pub fn adjoint_apply(
    kind: ProblemKind,
    x: &GridFunction,
    r: &GridFunction,
    f: &GridFunction,
    n: usize,
) -> Result<GridFunction> {
    adjoint_apply_in(kind, kind.space(), x, r, f, n)
}

/// Same as [`adjoint_apply`] with an explicit parameter-space inner product.
/// The identity `<F'h, r>_L2 = <h, g>_X` is exact when `x` lives on the
/// `n`-cell mesh; the result is returned on that mesh.
pub fn adjoint_apply_in(
    kind: ProblemKind,
    space: SpaceKind,
    x: &GridFunction,
    r: &GridFunction,
    f: &GridFunction,
    n: usize,
) -> Result<GridFunction> {
    let e = adjoint_euclidean(kind, x, r, f, n)?;
    GridFunction::new(space.riesz(&e))
}

/// Euclidean gradient of `h -> <F_n'[x] h, r>_L2` with respect to nodal values
/// of `h` on the `n`-cell mesh.
pub fn adjoint_euclidean(
    kind: ProblemKind,
    x: &GridFunction,
    r: &GridFunction,
    f: &GridFunction,
    n: usize,
) -> Result<Vec<f64>> {
    let y = solve_forward_fem(kind, x, f, n)?;
    adjoint_euclidean_with_state(kind, &x.resample(n), &y, &r.resample(n))
}

/// As [`adjoint_euclidean`] when the state `y = F_n[x]` is already known and
/// `xn`, `y`, `rn` share one mesh.
pub fn adjoint_euclidean_with_state(
    kind: ProblemKind,
    xn: &GridFunction,
    y: &GridFunction,
    rn: &GridFunction,
) -> Result<Vec<f64>> {
    xn.same_mesh(y)?;
    xn.same_mesh(rn)?;
    let n = xn.n_cells();
    let mesh = xn.h();
    let a = system_matrix(kind.tag, xn);
    let w = crate::grid::trapezoid_weights(n);
    let wr: Vec<f64> = (1..n).map(|i| w[i] * rn.values()[i]).collect();
    let z_int = a.solve(&wr)?;
    let mut z = vec![0.0; n + 1];
    z[1..n].copy_from_slice(&z_int);
    let y = y.values();
    let mut e = vec![0.0; n + 1];
    for c in 0..n {
        let (y0, y1, z0, z1) = (y[c], y[c + 1], z[c], z[c + 1]);
        match kind.tag {
            ProblemTag::AExample => {
                let k = 0.5 / mesh * (y1 - y0) * (z1 - z0);
                e[c] -= k;
                e[c + 1] -= k;
            }
            ProblemTag::CExample => {
                let m = mesh / 12.0;
                e[c] -= m * (3.0 * z0 * y0 + z0 * y1 + z1 * y0 + z1 * y1);
                e[c + 1] -= m * (z0 * y0 + z0 * y1 + z1 * y0 + 3.0 * z1 * y1);
            }
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sine_load(scale: f64, n: usize) -> GridFunction {
        GridFunction::from_fn(n, |s| scale * (PI * s).sin())
    }

    #[test]
    fn a_example_sine() {
        let n = 128;
        let y = solve_forward_fem(
            ProblemKind::a_example(0.5),
            &GridFunction::constant(n, 1.0),
            &sine_load(PI * PI, n),
            n,
        )
        .unwrap();
        let dev = y
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - (PI * y.node(i)).sin()).abs())
            .fold(0.0, f64::max);
        assert!(dev < 5e-4, "{dev}");
    }

    #[test]
    fn a_example_variable_coefficient() {
        let n = 64;
        let x = GridFunction::from_fn(n, |s| 1.0 + s);
        let f = GridFunction::from_fn(n, |s| 1.0 + 4.0 * s);
        let y = solve_forward_fem(ProblemKind::a_example(0.5), &x, &f, n).unwrap();
        for (i, v) in y.values().iter().enumerate() {
            let s = y.node(i);
            assert!((v - s * (1.0 - s)).abs() < 1e-4);
        }
    }

    #[test]
    fn c_example_sine() {
        let n = 128;
        let y = solve_forward_fem(
            ProblemKind::c_example(0.5),
            &GridFunction::constant(n, 1.0),
            &sine_load(PI * PI + 1.0, n),
            n,
        )
        .unwrap();
        for (i, v) in y.values().iter().enumerate() {
            assert!((v - (PI * y.node(i)).sin()).abs() < 5e-4);
        }
    }

    #[test]
    fn admissibility_enforced() {
        let x = GridFunction::constant(8, 0.1);
        let f = GridFunction::constant(8, 1.0);
        assert!(matches!(
            solve_forward_fem(ProblemKind::a_example(0.5), &x, &f, 8),
            Err(Error::NonAdmissibleCoefficient { .. })
        ));
        // c-example only needs x >= 0
        assert!(solve_forward_fem(ProblemKind::c_example(0.5), &x, &f, 8).is_ok());
        assert!(!ProblemKind::c_example(0.5).strictly_admissible(&x));
        let neg = GridFunction::constant(8, -0.1);
        assert!(solve_forward_fem(ProblemKind::c_example(0.5), &neg, &f, 8).is_err());
    }

    #[test]
    fn reference_matches_analytic() {
        let x = GridFunction::constant(64, 1.0);
        let y = solve_forward_reference(ProblemKind::a_example(0.5), &x, &sine_load(PI * PI, 64))
            .unwrap();
        assert!(y.l2_error_against(|s| (PI * s).sin()) < 1e-3);
        let z = solve_forward_reference(ProblemKind::c_example(0.5), &x, &GridFunction::zeros(64))
            .unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn matrices_are_symmetric_positive() {
        let x = GridFunction::from_fn(32, |s| 1.0 + 0.5 * (3.0 * s).sin());
        for tag in [ProblemTag::AExample, ProblemTag::CExample] {
            let a = system_matrix(tag, &x);
            assert!(a.factor().is_ok());
        }
    }

    #[test]
    fn derivative_zero_direction() {
        let n = 16;
        let x = GridFunction::constant(n, 1.0);
        let f = sine_load(1.0, n);
        for kind in [ProblemKind::a_example(0.5), ProblemKind::c_example(0.5)] {
            let u = derivative_apply(kind, &x, &GridFunction::zeros(n), &f, n).unwrap();
            assert_eq!(u.max_abs(), 0.0);
        }
    }

    fn fd_residual(kind: ProblemKind, eps: f64) -> f64 {
        let n = 64;
        let x = GridFunction::constant(n, 1.0);
        let h = GridFunction::from_fn(n, |s| (2.0 * PI * s).cos() + s);
        let f = sine_load(10.0, n);
        let y0 = solve_forward_fem(kind, &x, &f, n).unwrap();
        let y1 = solve_forward_fem(kind, &x.axpy(eps, &h).unwrap(), &f, n).unwrap();
        let u = derivative_apply(kind, &x, &h, &f, n).unwrap();
        let fd = y1.sub(&y0).unwrap().scale(1.0 / eps);
        SpaceKind::L2.norm(&fd.sub(&u).unwrap())
    }

    #[test]
    fn derivative_matches_finite_differences() {
        for kind in [ProblemKind::a_example(0.5), ProblemKind::c_example(0.5)] {
            let r3 = fd_residual(kind, 1e-3);
            let r4 = fd_residual(kind, 1e-4);
            let ratio = r3 / r4;
            assert!((8.0..12.0).contains(&ratio), "{:?} ratio {ratio}", kind.tag);
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (kind, n) in [
            (ProblemKind::a_example(0.5), 32),
            (ProblemKind::c_example(0.5), 32),
            (ProblemKind::a_example(0.5), 100),
        ] {
            let x = GridFunction::from_fn(n, |s| 1.0 + 0.3 * s * s);
            let f = sine_load(5.0, n);
            for _ in 0..20 {
                let h = GridFunction::from_fn(n, |_| rng.gen_range(-1.0..1.0));
                let r = GridFunction::from_fn(n, |_| rng.gen_range(-1.0..1.0));
                let u = derivative_apply(kind, &x, &h, &f, n).unwrap();
                let g = adjoint_apply(kind, &x, &r, &f, n).unwrap();
                let lhs = SpaceKind::L2.inner(&u, &r).unwrap();
                let rhs = kind.space().inner(&h, &g).unwrap();
                let scale = kind.space().norm(&h) * SpaceKind::L2.norm(&r);
                assert!((lhs - rhs).abs() <= 1e-10 * scale, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn maximum_principle() {
        let n = 50;
        let x = GridFunction::from_fn(n, |s| 0.6 + s * s);
        let f = GridFunction::from_fn(n, |s| (s - 0.3).max(0.0));
        let y = solve_forward_fem(ProblemKind::a_example(0.5), &x, &f, n).unwrap();
        assert!(y.min() >= -1e-12);
    }
}
