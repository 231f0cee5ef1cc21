//! Standard mollification of grid functions on [0, 1], with zero extension
//! outside the domain.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, SpaceKind};

/// Trapezoid subintervals per kernel support `[-xi, xi]`.
const KERNEL_INTERVALS: usize = 256;

fn bump(u: f64) -> f64 {
    if u.abs() < 1.0 {
        (1.0 / (u * u - 1.0)).exp()
    } else {
        0.0
    }
}

/// `C` with `C * integral of exp(1/(s^2 - 1))` over (-1, 1) equal to 1.
pub fn normalization_constant() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let m = 1 << 14;
        let du = 2.0 / m as f64;
        let sum: f64 = (1..m).map(|i| bump(-1.0 + i as f64 * du)).sum();
        1.0 / (sum * du)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifierParams {
    pub xi: f64,
    pub normalization: f64,
}

impl MollifierParams {
    pub fn new(xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi < 0.5) {
            return Err(Error::WidthTooLarge(xi));
        }
        Ok(MollifierParams {
            xi,
            normalization: normalization_constant(),
        })
    }
}

/// `phi_xi(s) = C / xi * exp(1 / ((s/xi)^2 - 1))` on `|s| < xi`, else 0.
pub fn mollifier_kernel(p: MollifierParams, s: f64) -> f64 {
    p.normalization / p.xi * bump(s / p.xi)
}

/// The linear map `x -> x_xi` on one mesh, stored as banded rows.
#[derive(Debug, Clone)]
pub struct MollifierMatrix {
    pub xi: f64,
    n_cells: usize,
    rows: Vec<(usize, Vec<f64>)>,
    /// Quadrature steps per kernel support.
    pub resolution: usize,
}

impl MollifierMatrix {
    pub fn new(n_cells: usize, xi: f64) -> Result<Self> {
        let p = MollifierParams::new(xi)?;
        let h = 1.0 / n_cells as f64;
        // refinement of the mesh with at least KERNEL_INTERVALS steps per support
        let r = ((KERNEL_INTERVALS as f64 * h / (2.0 * xi)).ceil() as usize).max(1);
        let dt = h / r as f64;
        let fine = n_cells * r;
        let reach = (xi / dt).ceil() as usize;
        let rows = (0..=n_cells)
            .map(|i| {
                let centre = i * r;
                let q_lo = centre.saturating_sub(reach);
                let q_hi = (centre + reach).min(fine);
                let lo = q_lo / r;
                let hi = (q_hi / r + 1).min(n_cells);
                let mut row = vec![0.0; hi - lo + 1];
                for q in q_lo..=q_hi {
                    let u = (centre as f64 - q as f64) * dt / xi;
                    let mut w = p.normalization * bump(u) * dt / xi;
                    if q == 0 || q == fine {
                        w *= 0.5;
                    }
                    let (j, th) = if q == fine {
                        (n_cells - 1, 1.0)
                    } else {
                        (q / r, (q % r) as f64 / r as f64)
                    };
                    row[j - lo] += w * (1.0 - th);
                    row[j + 1 - lo] += w * th;
                }
                (lo, row)
            })
            .collect();
        Ok(MollifierMatrix {
            xi,
            n_cells,
            rows,
            resolution: (2.0 * xi / dt).round() as usize,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn apply(&self, x: &GridFunction) -> Result<GridFunction> {
        self.check(x.n_cells())?;
        let v = x.values();
        GridFunction::new(
            self.rows
                .iter()
                .map(|(lo, row)| row.iter().zip(&v[*lo..]).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// Transpose applied to a nodal vector.
    pub fn apply_transpose(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check(g.len() - 1)?;
        let mut out = vec![0.0; self.n_cells + 1];
        for ((lo, row), gi) in self.rows.iter().zip(g) {
            for (k, a) in row.iter().enumerate() {
                out[lo + k] += a * gi;
            }
        }
        Ok(out)
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.n_cells {
            return Err(Error::DimensionMismatch(format!(
                "mollifier built for {} cells, got {n}",
                self.n_cells
            )));
        }
        Ok(())
    }
}

/// `x_xi = phi_xi * x` at the nodes of `x`, with `x` extended by zero.
pub fn mollify(x: &GridFunction, xi: f64) -> Result<GridFunction> {
    MollifierMatrix::new(x.n_cells(), xi)?.apply(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifyRow {
    pub xi: f64,
    pub l2_error: f64,
    pub l2_norm_ratio: f64,
}

/// Error and norm ratio per width; checks non-expansiveness and monotone
/// convergence along the (decreasing) ladder.
pub fn mollification_report(x: &GridFunction, xis: &[f64]) -> Result<Vec<MollifyRow>> {
    if xis.iter().any(|&v| !(v > 0.0)) || xis.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::ConfigInvalid(
            "widths must be positive and decreasing".into(),
        ));
    }
    let norm = SpaceKind::L2.norm(x);
    let mut rows: Vec<MollifyRow> = Vec::with_capacity(xis.len());
    for &xi in xis {
        let xm = mollify(x, xi)?;
        let l2_error = SpaceKind::L2.norm(&xm.sub(x)?);
        let l2_norm_ratio = if norm == 0.0 {
            1.0
        } else {
            SpaceKind::L2.norm(&xm) / norm
        };
        if l2_norm_ratio > 1.0 + 1e-8 {
            return Err(Error::PropertyViolation {
                xi,
                what: format!("norm ratio {l2_norm_ratio}"),
            });
        }
        if let Some(prev) = rows.last() {
            if l2_error > prev.l2_error {
                return Err(Error::PropertyViolation {
                    xi,
                    what: format!(
                        "error {l2_error} above {} at xi = {}",
                        prev.l2_error, prev.xi
                    ),
                });
            }
        }
        rows.push(MollifyRow {
            xi,
            l2_error,
            l2_norm_ratio,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn slope(xs: &[f64], ys: &[f64]) -> f64 {
        let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
        let mx = lx.iter().sum::<f64>() / lx.len() as f64;
        let my = ly.iter().sum::<f64>() / ly.len() as f64;
        let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn constant_matches_high_precision_value() {
        // 1 / 0.443993816168079437823...
        assert!((normalization_constant() - 2.252_283_621_043_581).abs() < 1e-12);
    }

    #[test]
    fn kernel_support_and_peak() {
        let p = MollifierParams::new(0.25).unwrap();
        assert_eq!(mollifier_kernel(p, 0.25), 0.0);
        assert_eq!(mollifier_kernel(p, -0.25), 0.0);
        assert_eq!(mollifier_kernel(p, 0.3), 0.0);
        let p1 = MollifierParams {
            xi: 1.0,
            normalization: normalization_constant(),
        };
        assert!(
            (mollifier_kernel(p1, 0.0) - normalization_constant() / std::f64::consts::E).abs()
                < 1e-15
        );
    }

    #[test]
    fn kernel_has_unit_mass() {
        for xi in [0.49, 0.1, 0.02] {
            let p = MollifierParams::new(xi).unwrap();
            let m = KERNEL_INTERVALS;
            let ds = 2.0 * xi / m as f64;
            let mass: f64 = (1..m)
                .map(|k| mollifier_kernel(p, -xi + k as f64 * ds) * ds)
                .sum();
            assert!((mass - 1.0).abs() < 1e-10, "xi={xi} mass={mass}");
        }
    }

    #[test]
    fn width_checked() {
        let x = GridFunction::constant(16, 1.0);
        assert!(matches!(mollify(&x, 0.5), Err(Error::WidthTooLarge(_))));
        assert!(matches!(mollify(&x, 0.0), Err(Error::WidthTooLarge(_))));
    }

    #[test]
    fn reproduces_constants_in_the_interior() {
        let x = GridFunction::constant(200, 1.0);
        let xi = 0.1;
        let y = mollify(&x, xi).unwrap();
        for i in 0..=200 {
            let s = x.node(i);
            if s > xi + 1e-12 && s < 1.0 - xi - 1e-12 {
                assert!((y.values()[i] - 1.0).abs() < 1e-8);
            }
        }
        // zero extension halves the value at the boundary
        assert!((y.values()[0] - 0.5).abs() < 1e-8);
        let z = mollify(&GridFunction::zeros(50), 0.2).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn transpose_is_adjoint() {
        let n = 60;
        let m = MollifierMatrix::new(n, 0.13).unwrap();
        let x = GridFunction::from_fn(n, |s| (3.0 * s).cos() + s);
        let g: Vec<f64> = (0..=n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let lhs: f64 = m
            .apply(&x)
            .unwrap()
            .values()
            .iter()
            .zip(&g)
            .map(|(a, b)| a * b)
            .sum();
        let mt = m.apply_transpose(&g).unwrap();
        let rhs: f64 = mt.iter().zip(x.values()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn second_order_for_smooth_zero_extension() {
        // sin^2 extends by zero as a C1 function, so the full-domain rate is 2
        let x = GridFunction::from_fn(2048, |s| (PI * s).sin().powi(2));
        let xis = [0.2, 0.1, 0.05, 0.025];
        let rows = mollification_report(&x, &xis).unwrap();
        let errs: Vec<f64> = rows.iter().map(|r| r.l2_error).collect();
        let k = slope(&xis, &errs);
        assert!((k - 2.0).abs() <= 0.3, "slope {k}");
    }

    #[test]
    fn second_order_for_sine_away_from_boundary() {
        let n = 2048;
        let x = GridFunction::from_fn(n, |s| (PI * s).sin());
        let xis = [0.2, 0.1, 0.05, 0.025];
        let w = crate::grid::trapezoid_weights(n);
        let errs: Vec<f64> = xis
            .iter()
            .map(|&xi| {
                let d = mollify(&x, xi).unwrap().sub(&x).unwrap();
                (0..=n)
                    .filter(|&i| x.node(i) >= 0.2 && x.node(i) <= 0.8)
                    .map(|i| w[i] * d.values()[i].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let k = slope(&xis, &errs);
        assert!((k - 2.0).abs() <= 0.3, "slope {k}");
        let full = mollification_report(&x, &xis).unwrap();
        assert!(full.windows(2).all(|r| r[1].l2_error < r[0].l2_error));
    }

    #[test]
    fn step_function_converges_slowly() {
        let x = GridFunction::from_fn(4096, |s| if s > 0.5 { 1.0 } else { 0.0 });
        let xis = [0.2, 0.1, 0.05, 0.025];
        let rows = mollification_report(&x, &xis).unwrap();
        let errs: Vec<f64> = rows.iter().map(|r| r.l2_error).collect();
        let k = slope(&xis, &errs);
        assert!(k > 0.3 && k < 0.8, "slope {k}");
    }

    #[test]
    fn zero_input_report() {
        let rows = mollification_report(&GridFunction::zeros(32), &[0.2, 0.1]).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.l2_error == 0.0 && r.l2_norm_ratio == 1.0));
    }

    proptest! {
        #[test]
        fn non_expansive(
            coefs in proptest::collection::vec(-3.0..3.0f64, 5),
            xi in 0.01..0.45f64,
        ) {
            let x = GridFunction::from_fn(256, |s| {
                coefs.iter().enumerate().map(|(k, c)| c * ((k as f64 + 0.5) * 3.0 * s).cos()).sum()
            });
            let y = mollify(&x, xi).unwrap();
            prop_assert!(SpaceKind::L2.norm(&y) <= SpaceKind::L2.norm(&x) * (1.0 + 1e-8));
        }
    }
}
