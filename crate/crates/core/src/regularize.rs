//! Tikhonov functionals with surrogate forward maps, a projected gradient
//! minimizer with eta-certificates, noise injection and parameter choice.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::forward::{adjoint_euclidean, solve_forward_fem, ProblemKind};
use crate::grid::{resample_adjoint, GridFunction, SpaceKind};
use crate::mollify::MollifierMatrix;
use crate::training::linear::LinearSurrogate;
use crate::training::neural::NeuralSurrogate;

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct TikhonovConfig {
    pub alpha: f64,
    pub delta: f64,
    pub eta: f64,
    /// Mollification width; 0 disables it.
    pub xi: f64,
    pub x0: GridFunction,
    pub space: SpaceKind,
    pub nu: f64,
    pub max_iterations: usize,
    /// Exact solution, when known, for error reporting.
    pub x_true: Option<GridFunction>,
    /// Seed the data were generated with; only recorded.
    pub seed: u64,
}

impl TikhonovConfig {
    pub fn new(alpha: f64, eta: f64, x0: GridFunction, space: SpaceKind, nu: f64) -> Self {
        TikhonovConfig {
            alpha,
            delta: 0.0,
            eta,
            xi: 0.0,
            x0,
            space,
            nu,
            max_iterations: 5000,
            x_true: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.eta > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "alpha and eta must be positive (alpha = {}, eta = {})",
                self.alpha, self.eta
            )));
        }
        if !(self.xi >= 0.0) || !(self.delta >= 0.0) || !(self.nu > 0.0) {
            return Err(Error::ConfigInvalid(
                "xi, delta must be >= 0 and nu > 0".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::ConfigInvalid(
                "max_iterations must be positive".into(),
            ));
        }
        if self.x0.min() < self.nu {
            return Err(Error::NonAdmissibleCoefficient {
                min: self.x0.min(),
                bound: self.nu,
            });
        }
        Ok(())
    }
}

/// The forward map `F_n` used inside the functional.
#[derive(Debug, Clone)]
pub enum SurrogateHandle {
    FemForward {
        kind: ProblemKind,
        f: GridFunction,
        n: usize,
    },
    NeuralOperator(Box<NeuralSurrogate>),
    /// Centered rank-N linear map `y_hat_0 + F#(x - x_hat_0)`.
    LinearRankN {
        ls: LinearSurrogate,
        problem: Option<ProblemKind>,
    },
}

impl SurrogateHandle {
    pub fn name(&self) -> &'static str {
        match self {
            SurrogateHandle::FemForward { .. } => "fem",
            SurrogateHandle::NeuralOperator(_) => "neural",
            SurrogateHandle::LinearRankN { .. } => "linear",
        }
    }

    pub fn problem_name(&self) -> &'static str {
        match self {
            SurrogateHandle::FemForward { kind, .. } => kind.name(),
            SurrogateHandle::NeuralOperator(s) => s.problem.name(),
            SurrogateHandle::LinearRankN { problem, .. } => problem.map_or("none", |p| p.name()),
        }
    }

    /// Output mesh size.
    pub fn n(&self) -> usize {
        match self {
            SurrogateHandle::FemForward { n, .. } => *n,
            SurrogateHandle::NeuralOperator(s) => s.y_cells(),
            SurrogateHandle::LinearRankN { ls, .. } => ls.y_cells(),
        }
    }

    /// Rank `N`; 0 for the FEM operator.
    pub fn rank(&self) -> usize {
        match self {
            SurrogateHandle::FemForward { .. } => 0,
            SurrogateHandle::NeuralOperator(s) => s.rank(),
            SurrogateHandle::LinearRankN { ls, .. } => ls.rank(),
        }
    }

    /// `rho_bound` of a neural surrogate.
    pub fn rho_bound(&self) -> Option<f64> {
        match self {
            SurrogateHandle::NeuralOperator(s) => Some(s.diagnostics.rho_bound),
            _ => None,
        }
    }

    pub fn forward(&self, x: &GridFunction) -> Result<GridFunction> {
        match self {
            SurrogateHandle::FemForward { kind, f, n } => solve_forward_fem(*kind, x, f, *n),
            SurrogateHandle::NeuralOperator(s) => s.forward(x),
            SurrogateHandle::LinearRankN { ls, .. } => ls.apply_centered(x),
        }
    }

    /// Euclidean gradient of `x -> <F_n[x], r>_L2` on the mesh of `x`.
    pub fn vjp(&self, x: &GridFunction, r: &GridFunction) -> Result<Vec<f64>> {
        match self {
            SurrogateHandle::FemForward { kind, f, n } => {
                let e = adjoint_euclidean(*kind, x, r, f, *n)?;
                Ok(resample_adjoint(x.n_cells(), &e))
            }
            SurrogateHandle::NeuralOperator(s) => s.vjp(x, r),
            SurrogateHandle::LinearRankN { ls, .. } => {
                r.same_mesh(&ls.induced[0])?;
                let g = ls.space.gram(ls.x_cells());
                let mut e = vec![0.0; ls.x_cells() + 1];
                for (b, y) in ls.basis.iter().zip(&ls.induced) {
                    let c = SpaceKind::L2.inner_raw(y.values(), r.values());
                    for (ei, gi) in e.iter_mut().zip(g.mul_vec(b.values())) {
                        *ei += c * gi;
                    }
                }
                Ok(resample_adjoint(x.n_cells(), &e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub gradient_norm: f64,
    /// `gradient_norm^2 / (4 alpha)`.
    pub eta_bound: f64,
    pub iterations: usize,
    /// Gap to the best value found over several starts, when computed.
    pub reference_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ApproximateMinimizer {
    pub x: GridFunction,
    pub functional_value: f64,
    pub certificate: Certificate,
    pub config: TikhonovConfig,
    /// Functional value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// `y + e` with a seeded Gaussian nodal vector `e` scaled to `||e||_L2 = delta`.
pub fn add_noise(y: &GridFunction, delta: f64, seed: u64) -> GridFunction {
    if delta == 0.0 {
        return y.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = GridFunction::new(
        (0..=y.n_cells())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )
    .expect("finite noise");
    let norm = SpaceKind::L2.norm(&e);
    y.axpy(delta / norm, &e).expect("same mesh")
}

struct Functional<'a> {
    h: &'a SurrogateHandle,
    y: &'a GridFunction,
    cfg: &'a TikhonovConfig,
    mollifier: Option<MollifierMatrix>,
}

impl<'a> Functional<'a> {
    fn new(h: &'a SurrogateHandle, y: &'a GridFunction, cfg: &'a TikhonovConfig) -> Result<Self> {
        cfg.validate()?;
        if y.n_cells() != h.n() {
            return Err(Error::DimensionMismatch(format!(
                "data on {} cells, surrogate output on {}",
                y.n_cells(),
                h.n()
            )));
        }
        let mollifier = if cfg.xi > 0.0 {
            Some(MollifierMatrix::new(cfg.x0.n_cells(), cfg.xi)?)
        } else {
            None
        };
        Ok(Functional {
            h,
            y,
            cfg,
            mollifier,
        })
    }

    fn smoothed(&self, x: &GridFunction) -> Result<GridFunction> {
        match &self.mollifier {
            Some(m) => m.apply(x),
            None => Ok(x.clone()),
        }
    }

    fn value(&self, x: &GridFunction) -> Result<f64> {
        x.same_mesh(&self.cfg.x0)?;
        let r = self.h.forward(&self.smoothed(x)?)?.sub(self.y)?;
        let d = x.sub(&self.cfg.x0)?;
        Ok(SpaceKind::L2.norm(&r).powi(2)
            + self.cfg.alpha * self.cfg.space.inner_raw(d.values(), d.values()))
    }

    /// Value and Euclidean gradient with respect to the nodal values of `x`.
    fn value_and_gradient(&self, x: &GridFunction) -> Result<(f64, Vec<f64>)> {
        x.same_mesh(&self.cfg.x0)?;
        let xs = self.smoothed(x)?;
        let r = self.h.forward(&xs)?.sub(self.y)?;
        let d = x.sub(&self.cfg.x0)?;
        let value = SpaceKind::L2.norm(&r).powi(2)
            + self.cfg.alpha * self.cfg.space.inner_raw(d.values(), d.values());
        let mut e = self.h.vjp(&xs, &r)?;
        if let Some(m) = &self.mollifier {
            e = m.apply_transpose(&e)?;
        }
        let gd = self.cfg.space.gram(x.n_cells()).mul_vec(d.values());
        for (ei, gi) in e.iter_mut().zip(gd) {
            *ei = 2.0 * *ei + 2.0 * self.cfg.alpha * gi;
        }
        Ok((value, e))
    }
}

/// `||F_n[x_xi] - y_delta||^2_L2 + alpha ||x - x0||^2_space`.
pub fn tikhonov_value(
    h: &SurrogateHandle,
    x: &GridFunction,
    y_delta: &GridFunction,
    cfg: &TikhonovConfig,
) -> Result<f64> {
    if x.min() < cfg.nu {
        return Err(Error::NonAdmissibleCoefficient {
            min: x.min(),
            bound: cfg.nu,
        });
    }
    Functional::new(h, y_delta, cfg)?.value(x)
}

/// Gradient of [`tikhonov_value`] in the parameter space (Riesz representer).
pub fn tikhonov_gradient(
    h: &SurrogateHandle,
    x: &GridFunction,
    y_delta: &GridFunction,
    cfg: &TikhonovConfig,
) -> Result<GridFunction> {
    let (_, e) = Functional::new(h, y_delta, cfg)?.value_and_gradient(x)?;
    GridFunction::new(cfg.space.riesz(&e))
}

fn project(x: &GridFunction, nu: f64) -> GridFunction {
    x.clamp_min(nu)
}

/// Drops gradient components that would push active nodes below the bound.
fn projected(e: &[f64], x: &GridFunction, nu: f64) -> Vec<f64> {
    e.iter()
        .zip(x.values())
        .map(|(&ei, &xi)| if xi <= nu && ei > 0.0 { 0.0 } else { ei })
        .collect()
}

/// Projected gradient descent with Barzilai-Borwein steps and Armijo
/// backtracking. Stops once `|g|^2 / (4 alpha) <= eta`, where `g` is the
/// projected gradient in the parameter space.
pub fn minimize_tikhonov(
    h: &SurrogateHandle,
    y_delta: &GridFunction,
    cfg: &TikhonovConfig,
    x_init: &GridFunction,
) -> Result<ApproximateMinimizer> {
    let fun = Functional::new(h, y_delta, cfg)?;
    x_init.same_mesh(&cfg.x0)?;
    if x_init.min() < cfg.nu {
        return Err(Error::NonAdmissibleCoefficient {
            min: x_init.min(),
            bound: cfg.nu,
        });
    }
    let space = cfg.space;
    let mut x = x_init.clone();
    let (mut value, mut e) = fun.value_and_gradient(&x)?;
    let mut tau: f64 = 1.0;
    let mut iterations = 0;
    let mut prev: Option<(GridFunction, Vec<f64>)> = None;
    let mut trace = vec![value];
    loop {
        let ep = projected(&e, &x, cfg.nu);
        let g = space.riesz(&ep);
        let gnorm = ep
            .iter()
            .zip(&g)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .max(0.0)
            .sqrt();
        let make = |x: GridFunction, value: f64, iterations: usize, trace: Vec<f64>| {
            ApproximateMinimizer {
                x,
                functional_value: value,
                certificate: Certificate {
                    gradient_norm: gnorm,
                    eta_bound: gnorm * gnorm / (4.0 * cfg.alpha),
                    iterations,
                    reference_gap: None,
                },
                config: cfg.clone(),
                trace,
            }
        };
        if gnorm * gnorm / (4.0 * cfg.alpha) <= cfg.eta {
            return Ok(make(x, value, iterations, trace));
        }
        if iterations >= cfg.max_iterations {
            return Err(Error::MaxIterations {
                best: Box::new(make(x, value, iterations, trace)),
            });
        }

        if let Some((px, pe)) = &prev {
            let s: Vec<f64> = x
                .values()
                .iter()
                .zip(px.values())
                .map(|(a, b)| a - b)
                .collect();
            let sy: f64 = s
                .iter()
                .zip(e.iter().zip(pe))
                .map(|(si, (a, b))| si * (a - b))
                .sum();
            let ss = space.inner_raw(&s, &s);
            if sy > 0.0 && ss > 0.0 {
                tau = (ss / sy).clamp(1e-12, 1e12);
            } else {
                tau = (2.0 * tau).min(1e12);
            }
        }

        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let step: Vec<f64> = x
                .values()
                .iter()
                .zip(&g)
                .map(|(a, b)| a - tau * b)
                .collect();
            let xt = project(&GridFunction::new(step)?, cfg.nu);
            let decrease: f64 = e
                .iter()
                .zip(x.values().iter().zip(xt.values()))
                .map(|(ei, (a, b))| ei * (a - b))
                .sum();
            match fun.value(&xt) {
                Ok(vt) if decrease > 0.0 && vt <= value - ARMIJO * decrease => {
                    accepted = Some(xt);
                    break;
                }
                Ok(_)
                | Err(Error::RangeViolation { .. })
                | Err(Error::NonAdmissibleCoefficient { .. })
                | Err(Error::SingularSystem { .. }) => tau *= 0.5,
                Err(other) => return Err(other),
            }
        }
        let Some(xn) = accepted else {
            return Err(Error::Stalled {
                halvings: MAX_HALVINGS,
                best: Box::new(make(x, value, iterations, trace)),
            });
        };
        let (vn, en) = fun.value_and_gradient(&xn)?;
        prev = Some((std::mem::replace(&mut x, xn), std::mem::replace(&mut e, en)));
        value = vn;
        trace.push(vn);
        iterations += 1;
    }
}

/// Runs [`minimize_tikhonov`] from several starts and records each result's
/// gap to the best value found. Iteration-limited runs keep their best iterate.
pub fn minimize_multistart(
    h: &SurrogateHandle,
    y_delta: &GridFunction,
    cfg: &TikhonovConfig,
    inits: &[GridFunction],
) -> Result<Vec<ApproximateMinimizer>> {
    let mut out = Vec::with_capacity(inits.len());
    for x in inits {
        out.push(match minimize_tikhonov(h, y_delta, cfg, x) {
            Ok(m) => m,
            Err(Error::MaxIterations { best }) => *best,
            Err(e) => return Err(e),
        });
    }
    let best = out
        .iter()
        .map(|m| m.functional_value)
        .fold(f64::INFINITY, f64::min);
    for m in &mut out {
        m.certificate.reference_gap = Some(m.functional_value - best);
    }
    Ok(out)
}

/// `alpha = constant * max(delta, rho)`, `eta = alpha^2`.
pub fn choose_parameters(delta: f64, rho: f64, constant: f64) -> Result<(f64, f64)> {
    if !(delta >= 0.0 && rho >= 0.0 && constant > 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "need delta, rho >= 0 and constant > 0 (got {delta}, {rho}, {constant})"
        )));
    }
    let m = delta.max(rho);
    if m == 0.0 {
        return Err(Error::DegenerateScale);
    }
    let alpha = constant * m;
    Ok((alpha, alpha * alpha))
}

#[derive(Debug, Clone)]
pub struct RegularizationRun {
    pub problem: String,
    pub surrogate: String,
    pub n: usize,
    pub rank: usize,
    pub delta: f64,
    pub alpha: f64,
    pub eta: f64,
    pub xi: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub error_x: Option<f64>,
    pub runtime_ms: f64,
    pub seed: u64,
    /// False when the iteration limit was hit; the row then holds the last iterate.
    pub converged: bool,
    /// `rho` reported by the surrogate, if any.
    pub rho: Option<f64>,
    pub minimizer: ApproximateMinimizer,
}

pub const RUN_CSV_HEADER: [&str; 13] = [
    "problem",
    "surrogate",
    "n",
    "N",
    "delta",
    "alpha",
    "eta",
    "xi",
    "iterations",
    "gradient_norm",
    "error_X",
    "runtime_ms",
    "seed",
];

impl RegularizationRun {
    pub fn from_minimizer(
        h: &SurrogateHandle,
        m: ApproximateMinimizer,
        converged: bool,
        runtime_ms: f64,
    ) -> Self {
        let cfg = &m.config;
        let error_x = cfg.x_true.as_ref().map(|xt| {
            cfg.space
                .norm(&m.x.sub(&xt.resample(m.x.n_cells())).expect("same mesh"))
        });
        RegularizationRun {
            problem: h.problem_name().to_string(),
            surrogate: h.name().to_string(),
            n: h.n(),
            rank: h.rank(),
            delta: cfg.delta,
            alpha: cfg.alpha,
            eta: cfg.eta,
            xi: cfg.xi,
            iterations: m.certificate.iterations,
            gradient_norm: m.certificate.gradient_norm,
            error_x,
            runtime_ms,
            seed: cfg.seed,
            converged,
            rho: h.rho_bound(),
            minimizer: m,
        }
    }

    /// Fields in [`RUN_CSV_HEADER`] order; `error_X` is empty when unknown.
    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.problem.clone(),
            self.surrogate.clone(),
            self.n.to_string(),
            self.rank.to_string(),
            format!("{:e}", self.delta),
            format!("{:e}", self.alpha),
            format!("{:e}", self.eta),
            format!("{:e}", self.xi),
            self.iterations.to_string(),
            format!("{:e}", self.gradient_norm),
            self.error_x.map(|v| format!("{v:e}")).unwrap_or_default(),
            format!("{:.3}", self.runtime_ms),
            self.seed.to_string(),
        ]
    }
}

/// Minimizes and reports; `cfg.x_true` enables the error column.
pub fn solve_inverse_problem(
    h: &SurrogateHandle,
    y_delta: &GridFunction,
    cfg: &TikhonovConfig,
    x_init: &GridFunction,
) -> Result<RegularizationRun> {
    let start = Instant::now();
    let m = minimize_tikhonov(h, y_delta, cfg, x_init)?;
    Ok(RegularizationRun::from_minimizer(
        h,
        m,
        true,
        start.elapsed().as_secs_f64() * 1e3,
    ))
}

/// Linear map with `F#(x - x_hat_0) = x - x_hat_0` on the span of `basis`;
/// used as a quadratic proxy.
pub fn identity_proxy(
    basis: Vec<GridFunction>,
    space: SpaceKind,
    center: GridFunction,
) -> LinearSurrogate {
    let n = basis.len();
    LinearSurrogate {
        induced: basis.clone(),
        basis,
        transform: nalgebra::DMatrix::identity(n, n),
        space,
        center: (center.clone(), center),
    }
}

/// Full-rank L2 identity proxy `F(x) = x` on the `n`-cell mesh, as a handle.
pub fn identity_handle(n: usize, center: f64) -> SurrogateHandle {
    let vecs: Vec<GridFunction> = (0..=n)
        .map(|i| {
            let mut v = vec![0.0; n + 1];
            v[i] = 1.0;
            GridFunction::new(v).expect("non-empty")
        })
        .collect();
    let (basis, _) =
        crate::training::gram_schmidt(&vecs, SpaceKind::L2).expect("unit vectors are independent");
    SurrogateHandle::LinearRankN {
        ls: identity_proxy(basis, SpaceKind::L2, GridFunction::constant(n, center)),
        problem: None,
    }
}

/// Relative mismatch between a central difference of [`tikhonov_value`] along
/// `d` (step `eps`) and `<grad, d>_X`.
pub fn gradient_fd_error(
    h: &SurrogateHandle,
    x: &GridFunction,
    d: &GridFunction,
    y_delta: &GridFunction,
    cfg: &TikhonovConfig,
    eps: f64,
) -> Result<f64> {
    let g = tikhonov_gradient(h, x, y_delta, cfg)?;
    let analytic = cfg.space.inner(&g, d)?;
    let jp = tikhonov_value(h, &x.axpy(eps, d)?, y_delta, cfg)?;
    let jm = tikhonov_value(h, &x.axpy(-eps, d)?, y_delta, cfg)?;
    let fd = (jp - jm) / (2.0 * eps);
    Ok((fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-300))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cfg(alpha: f64, x0: GridFunction, space: SpaceKind) -> TikhonovConfig {
        let mut c = TikhonovConfig::new(alpha, 1e-20, x0, space, 1e-3);
        c.max_iterations = 20000;
        c
    }

    #[test]
    fn noise_has_exact_norm() {
        let y = GridFunction::from_fn(100, |s| s * (1.0 - s));
        assert_eq!(add_noise(&y, 0.0, 3), y);
        let yd = add_noise(&y, 1e-2, 3);
        let err = SpaceKind::L2.norm(&yd.sub(&y).unwrap());
        assert!((err - 1e-2).abs() <= 1e-14 * 1e-2 * 10.0);
        assert_eq!(add_noise(&y, 1e-2, 3), yd);
        assert_ne!(add_noise(&y, 1e-2, 4), yd);
    }

    #[test]
    fn parameter_choice() {
        assert_eq!(choose_parameters(1e-2, 1e-3, 1.0).unwrap(), (1e-2, 1e-4));
        assert_eq!(choose_parameters(0.0, 1e-3, 1.0).unwrap().0, 1e-3);
        assert!(matches!(
            choose_parameters(0.0, 0.0, 1.0),
            Err(Error::DegenerateScale)
        ));
    }

    /// Full-rank identity proxy on an L2 mesh: the functional is
    /// `||x - y||^2 + alpha ||x - x0||^2` exactly.

    #[test]
    fn identity_proxy_value_is_the_quadratic() {
        let n = 20;
        let h = identity_handle(n, 1.0);
        let x = GridFunction::from_fn(n, |s| 1.0 + s);
        let y = GridFunction::from_fn(n, |s| 2.0 - s * s);
        let x0 = GridFunction::constant(n, 1.5);
        let c = cfg(0.3, x0.clone(), SpaceKind::L2);
        let v = tikhonov_value(&h, &x, &y, &c).unwrap();
        let expect = SpaceKind::L2.norm(&x.sub(&y).unwrap()).powi(2)
            + 0.3 * SpaceKind::L2.norm(&x.sub(&x0).unwrap()).powi(2);
        assert!((v - expect).abs() < 1e-12 * expect);
        let zero = tikhonov_value(&h, &x0, &x0, &c).unwrap();
        assert!(zero.abs() < 1e-24);
    }

    #[test]
    fn closed_form_quadratic_minimizer() {
        let n = 40;
        let h = identity_handle(n, 1.0);
        let y = GridFunction::from_fn(n, |s| 2.0 + (3.0 * s).sin());
        let x0 = GridFunction::from_fn(n, |s| 1.0 + s);
        for alpha in [0.1, 1.0, 5.0] {
            let c = cfg(alpha, x0.clone(), SpaceKind::L2);
            let m = minimize_tikhonov(&h, &y, &c, &x0).unwrap();
            let exact = y.axpy(alpha, &x0).unwrap().scale(1.0 / (1.0 + alpha));
            let diff = m.x.sub(&exact).unwrap().max_abs();
            assert!(diff < 1e-8, "alpha={alpha} diff={diff}");
            // certificate is a true bound on the gap for this quadratic
            let jmin = tikhonov_value(&h, &exact, &y, &c).unwrap();
            assert!(m.functional_value - jmin <= m.certificate.eta_bound + 1e-15);
            assert_eq!(
                m.certificate.eta_bound,
                m.certificate.gradient_norm.powi(2) / (4.0 * alpha)
            );
            assert_eq!(
                m.functional_value,
                tikhonov_value(&h, &m.x, &y, &c).unwrap()
            );
        }
    }

    #[test]
    fn large_alpha_returns_prior() {
        let n = 16;
        let h = identity_handle(n, 1.0);
        let y = GridFunction::from_fn(n, |s| 3.0 + s);
        let x0 = GridFunction::constant(n, 1.2);
        let mut c = cfg(1e8, x0.clone(), SpaceKind::L2);
        c.eta = 1e-12;
        let m = minimize_tikhonov(&h, &y, &c, &GridFunction::constant(n, 2.0)).unwrap();
        assert!(m.x.sub(&x0).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn projection_keeps_bound() {
        let n = 16;
        let h = identity_handle(n, 1.0);
        // data pull the minimizer below nu on part of the domain
        let y = GridFunction::from_fn(n, |s| 1.0 - 2.0 * s);
        let x0 = GridFunction::constant(n, 1.0);
        let mut c = cfg(0.1, x0.clone(), SpaceKind::L2);
        c.nu = 0.2;
        let m = minimize_tikhonov(&h, &y, &c, &x0).unwrap();
        assert!(m.x.min() >= 0.2);
        let exact = y.axpy(0.1, &x0).unwrap().scale(1.0 / 1.1).clamp_min(0.2);
        assert!(m.x.sub(&exact).unwrap().max_abs() < 1e-7);
    }

    #[test]
    fn fem_exact_data_residual_bound() {
        let kind = ProblemKind::a_example(0.5);
        let n = 64;
        let f = GridFunction::constant(n, 1.0);
        let xt = GridFunction::from_fn(n, |s| 1.0 + 0.3 * (PI * s).sin());
        let x0 = GridFunction::constant(n, 1.0);
        let h = SurrogateHandle::FemForward {
            kind,
            f: f.clone(),
            n,
        };
        let y = h.forward(&xt).unwrap();
        let alpha = 1e-6;
        let mut c = TikhonovConfig::new(alpha, 1e-14, x0.clone(), SpaceKind::H1, 0.5);
        c.max_iterations = 20000;
        let m = match minimize_tikhonov(&h, &y, &c, &x0) {
            Ok(m) => m,
            Err(Error::MaxIterations { best }) => *best,
            Err(e) => panic!("{e}"),
        };
        let r = SpaceKind::L2
            .norm(&h.forward(&m.x).unwrap().sub(&y).unwrap())
            .powi(2);
        let bound = alpha * SpaceKind::H1.norm(&xt.sub(&x0).unwrap()).powi(2) + c.eta;
        assert!(r <= bound, "{r} > {bound}");
    }

    #[test]
    fn mollified_constant_close_to_plain() {
        let n = 64;
        let h = identity_handle(n, 1.0);
        let x = GridFunction::constant(n, 1.0);
        let y = GridFunction::constant(n, 0.8);
        let mut c = cfg(0.5, GridFunction::constant(n, 1.0), SpaceKind::L2);
        let plain = tikhonov_value(&h, &x, &y, &c).unwrap();
        for xi in [0.1, 0.05, 0.025] {
            c.xi = xi;
            let v = tikhonov_value(&h, &x, &y, &c).unwrap();
            // boundary layer of width xi
            assert!((v - plain).abs() <= 4.0 * xi, "xi={xi}");
        }
    }

    #[test]
    fn multistart_records_gaps() {
        let n = 10;
        let h = identity_handle(n, 1.0);
        let y = GridFunction::constant(n, 2.0);
        let x0 = GridFunction::constant(n, 1.0);
        let mut c = cfg(1.0, x0.clone(), SpaceKind::L2);
        c.eta = 1e-16;
        let ms =
            minimize_multistart(&h, &y, &c, &[x0.clone(), GridFunction::constant(n, 3.0)]).unwrap();
        assert!(ms
            .iter()
            .all(|m| m.certificate.reference_gap.unwrap() >= 0.0));
        assert!(ms.iter().any(|m| m.certificate.reference_gap == Some(0.0)));
    }

    #[test]
    fn csv_record_matches_header() {
        let n = 8;
        let h = identity_handle(n, 1.0);
        let y = GridFunction::constant(n, 1.5);
        let x0 = GridFunction::constant(n, 1.0);
        let mut c = cfg(1.0, x0.clone(), SpaceKind::L2);
        c.x_true = Some(GridFunction::constant(n, 1.5));
        let run = solve_inverse_problem(&h, &y, &c, &x0).unwrap();
        assert_eq!(run.csv_record().len(), RUN_CSV_HEADER.len());
        assert!(run.error_x.unwrap() > 0.0);
    }
}
