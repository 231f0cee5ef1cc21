//! Invariant suite behind the `verify` subcommand, plus the measurement
//! helpers it shares with the test suites.

use std::f64::consts::{E, PI};

use crate::activation::ActivationKind;
use crate::error::Result;
use crate::experiments::{fit_slope, runs_to_csv, AnalyticCase, RATE_CSV_HEADER};
use crate::forward::{derivative_apply, solve_forward_fem, ProblemKind, ReferenceMap};
use crate::grid::{GridFunction, SpaceKind};
use crate::mollify::{mollification_report, mollify};
use crate::regularize::{
    add_noise, gradient_fd_error, identity_handle, minimize_tikhonov, tikhonov_value,
    SurrogateHandle, TikhonovConfig, RUN_CSV_HEADER,
};
use crate::training::{
    apply_linear_surrogate, assemble_neural_surrogate, branch_nodes, build_linear_surrogate,
    center_pairs, center_training_set, eval_branch_adaptive, generate_training_set,
    perturbation_shapes, quadrature_weights, random_span_probes, AssembleOptions, BranchMode,
    LinearSurrogate, NeuralSurrogate, PerturbationMode, PerturbationSpec, Projector, Rescale,
};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub group: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.group,
            self.detail
        )
    }
}

fn outcome(group: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome {
            group,
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            group,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// FEM error slopes for the analytic cases over `ns`.
pub fn fem_case_slopes(ns: &[usize]) -> Result<Vec<(AnalyticCase, f64)>> {
    AnalyticCase::ALL
        .iter()
        .map(|&c| {
            let pts = ns
                .iter()
                .map(|&n| Ok((n as f64, c.fem_error(n)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((c, fit_slope(&pts)?.0))
        })
        .collect()
}

/// Linearized c-example around `x = 1`: training pairs
/// `(1 + phi_l, y0 + F'[1] phi_l)` on `n` cells with L2 geometry.
pub fn linearized_c_surrogate(
    n: usize,
    rank: usize,
) -> Result<(LinearSurrogate, GridFunction, GridFunction)> {
    let spec = PerturbationSpec {
        mode: PerturbationMode::SineModes,
        amplitude: 0.1,
        count: rank,
        seed: 1,
    };
    linearized_c_surrogate_with(n, spec)
}

pub fn linearized_c_surrogate_with(
    n: usize,
    spec: PerturbationSpec,
) -> Result<(LinearSurrogate, GridFunction, GridFunction)> {
    let kind = ProblemKind::c_example(0.5);
    let f = GridFunction::from_fn(n, |s| (PI * PI + 1.0) * (PI * s).sin());
    let x0 = GridFunction::constant(n, 1.0);
    let mut pairs = vec![(x0.clone(), x0.clone())];
    for phi in perturbation_shapes(&spec, n) {
        let x = x0.axpy(spec.amplitude, &phi)?;
        let y = ReferenceMap::Linearized.apply(kind, &f, &x0, &x)?;
        pairs.push((x, y));
    }
    pairs[0].1 = ReferenceMap::Linearized.apply(kind, &f, &x0, &x0)?;
    let ls = build_linear_surrogate(&center_pairs(&pairs)?, SpaceKind::L2)?;
    Ok((ls, x0, f))
}

/// Neural surrogate of the linearized c-example with seeded bump perturbations,
/// its diagnostics measured against the linearized operator.
pub fn linearized_c_neural(
    seed: u64,
    n: usize,
    rank: usize,
) -> Result<(NeuralSurrogate, LinearSurrogate, GridFunction)> {
    let spec = PerturbationSpec {
        mode: PerturbationMode::SmoothBumps,
        amplitude: 0.1,
        count: rank,
        seed,
    };
    let (ls, x0, f) = linearized_c_surrogate_with(n, spec)?;
    let family = perturbation_shapes(&spec, n)
        .iter()
        .map(|phi| x0.axpy(spec.amplitude, phi))
        .collect::<Result<Vec<_>>>()?;
    let opts = AssembleOptions {
        n_k: n,
        n_j: 24,
        activation: ActivationKind::Logistic,
        mode: BranchMode::Adaptive,
        rescale_pad: 2.0,
        seed,
        problem: ProblemKind::c_example(0.5),
        f: f.clone(),
        family,
        probes: random_span_probes(&ls, 8, 0.1, seed ^ 0x9e37),
        mismatch_step: 0.2,
        reference: ReferenceMap::Linearized,
    };
    Ok((assemble_neural_surrogate(&ls, &opts)?, ls, f))
}

/// Worst relative mismatch of the linear surrogate against `F'[1]` on random
/// span elements, and worst output norm on probes L2-orthogonal to the span.
pub fn linear_exactness(n: usize, rank: usize, seed: u64) -> Result<(f64, f64)> {
    use rand::{Rng, SeedableRng};
    let kind = ProblemKind::c_example(0.5);
    let (ls, x0, f) = linearized_c_surrogate(n, rank)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let proj = Projector::onto(&ls.basis);
    let (mut span_err, mut orth_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..5 {
        let c: Vec<f64> = (0..rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut h = GridFunction::zeros(n);
        for (cl, b) in c.iter().zip(&ls.basis) {
            h = h.axpy(*cl, b)?;
        }
        let exact = derivative_apply(kind, &x0, &h, &f, n)?;
        let got = apply_linear_surrogate(&ls, &h);
        let rel = SpaceKind::L2.norm(&got.sub(&exact)?) / SpaceKind::L2.norm(&exact);
        span_err = span_err.max(rel);

        let v = GridFunction::from_fn(n, |s| {
            let a: f64 = rng.gen_range(-1.0..1.0);
            a + (7.0 * s).sin()
        });
        let w = proj.residual(&v);
        let out = apply_linear_surrogate(&ls, &w);
        let scale = SpaceKind::L2.norm(&w)
            * ls.induced
                .iter()
                .map(|y| SpaceKind::L2.norm(y))
                .fold(0.0, f64::max);
        orth_err = orth_err.max(SpaceKind::L2.norm(&out) / scale);
    }
    Ok((span_err, orth_err))
}

/// `|decoded adaptive branch - int_0^1 (1 + s) e^s ds|` on `n_k` nodes.
pub fn branch_quadrature_error(n_k: usize, activation: ActivationKind) -> Result<f64> {
    let nodes = branch_nodes(n_k);
    let x: Vec<f64> = nodes.iter().map(|&t| t.exp()).collect();
    let r: Vec<f64> = nodes.iter().map(|&t| 1.0 + t).collect();
    let prods: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a * b).collect();
    let lo = prods.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = prods.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rescale = Rescale::from_range(lo, hi, 0.5)?;
    let c = quadrature_weights(n_k);
    let (v, _) = eval_branch_adaptive(&c, &r, &x, activation, rescale)?;
    // the weights sum to one, so the affine decode commutes with the sum
    Ok((rescale.decode(v) - E).abs())
}

/// c-example neural surrogate used by the decomposition checks.
pub fn c_example_neural(
    seed: u64,
    n: usize,
    rank: usize,
) -> Result<(NeuralSurrogate, LinearSurrogate, GridFunction)> {
    let kind = ProblemKind::c_example(0.1);
    let f = GridFunction::constant(n, 200.0);
    let x0 = GridFunction::constant(n, 1.0);
    let spec = PerturbationSpec {
        mode: PerturbationMode::SineModes,
        amplitude: 0.05,
        count: rank,
        seed,
    };
    let ts = generate_training_set(kind, &f, &x0, spec)?;
    let ls = build_linear_surrogate(&center_training_set(&ts)?, SpaceKind::L2)?;
    let probes = random_span_probes(&ls, 8, 0.1, seed ^ 0x9e37);
    let opts = AssembleOptions {
        n_k: n,
        n_j: 24,
        activation: ActivationKind::Logistic,
        mode: BranchMode::Adaptive,
        rescale_pad: 2.0,
        seed,
        problem: kind,
        f: f.clone(),
        family: ts.pairs[1..].iter().map(|p| p.0.clone()).collect(),
        probes,
        mismatch_step: 0.1,
        reference: ReferenceMap::Forward,
    };
    Ok((assemble_neural_surrogate(&ls, &opts)?, ls, f))
}

fn check_schema() -> Result<(bool, String)> {
    let run_ok = RUN_CSV_HEADER
        == [
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
    let rate_ok = RATE_CSV_HEADER
        == [
            "study",
            "problem",
            "parameter",
            "value",
            "error",
            "secondary",
            "status",
        ];
    let emitted = runs_to_csv(&[])?;
    let line_ok = emitted.trim_end() == RUN_CSV_HEADER.join(",");
    Ok((
        run_ok && rate_ok && line_ok,
        "run and rate CSV headers".into(),
    ))
}

fn check_slope_fit() -> Result<(bool, String)> {
    let pts: Vec<(f64, f64)> = [16.0, 32.0, 64.0, 128.0, 256.0]
        .iter()
        .map(|&n: &f64| (n, 3.0 * n.powi(-2)))
        .collect();
    let (s, _) = fit_slope(&pts)?;
    Ok((
        (s + 2.0).abs() <= 1e-12,
        format!("synthetic 3 n^-2 slope {s:.15}"),
    ))
}

fn check_fem() -> Result<(bool, String)> {
    let slopes = fem_case_slopes(&[16, 32, 64, 128, 256])?;
    let ok = slopes.iter().all(|(_, s)| (-2.3..=-1.7).contains(s));
    let d = slopes
        .iter()
        .map(|(c, s)| format!("{} {s:.3}", c.name()))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, d))
}

fn check_noise() -> Result<(bool, String)> {
    // zero data, so the measured norm is the norm of the noise itself and
    // not of a difference with cancellation
    let y = GridFunction::zeros(200);
    let mut worst: f64 = 0.0;
    for (i, delta) in [1e-1, 1e-3, 1e-6].into_iter().enumerate() {
        let e = SpaceKind::L2.norm(&add_noise(&y, delta, i as u64));
        worst = worst.max((e - delta).abs() / delta);
    }
    Ok((worst <= 1e-14, format!("relative norm error {worst:.2e}")))
}

fn check_linear_surrogate() -> Result<(bool, String)> {
    let mut worst = (0.0f64, 0.0f64);
    for rank in [1, 2, 4, 8] {
        let (a, b) = linear_exactness(64, rank, rank as u64)?;
        worst = (worst.0.max(a), worst.1.max(b));
    }
    Ok((
        worst.0 <= 1e-9 && worst.1 <= 1e-9,
        format!(
            "span error {:.1e}, orthogonal response {:.1e}",
            worst.0, worst.1
        ),
    ))
}

fn check_quadrature() -> Result<(bool, String)> {
    let pts = [8, 16, 32, 64, 128]
        .into_iter()
        .map(|k| {
            Ok((
                k as f64,
                branch_quadrature_error(k, ActivationKind::Logistic)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (s, _) = fit_slope(&pts)?;
    Ok((
        (s + 2.0).abs() <= 0.3,
        format!("branch quadrature slope {s:.3}"),
    ))
}

fn check_mollifier() -> Result<(bool, String)> {
    let x = GridFunction::from_fn(2048, |s| (PI * s).sin().powi(2));
    let xis = [0.2, 0.1, 0.05, 0.025, 0.0125];
    let rows = mollification_report(&x, &xis)?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.xi, r.l2_error)).collect();
    let (s, _) = fit_slope(&pts)?;
    let rough = GridFunction::from_fn(512, |s| if s < 0.3 { -1.0 } else { (9.0 * s).cos() });
    let ratio = SpaceKind::L2.norm(&mollify(&rough, 0.07)?) / SpaceKind::L2.norm(&rough);
    Ok((
        (s - 2.0).abs() <= 0.3 && ratio <= 1.0 + 1e-8,
        format!("slope {s:.3}, norm ratio {ratio:.6}"),
    ))
}

fn check_certificate() -> Result<(bool, String)> {
    let n = 40;
    let h = identity_handle(n, 1.0);
    let y = GridFunction::from_fn(n, |s| 2.0 + (3.0 * s).sin());
    let x0 = GridFunction::from_fn(n, |s| 1.0 + s);
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for alpha in [0.1, 1.0, 5.0] {
        let mut c = TikhonovConfig::new(alpha, 1e-20, x0.clone(), SpaceKind::L2, 1e-3);
        c.max_iterations = 20000;
        let m = minimize_tikhonov(&h, &y, &c, &x0)?;
        let exact = y.axpy(alpha, &x0)?.scale(1.0 / (1.0 + alpha));
        let diff = m.x.sub(&exact)?.max_abs();
        worst = worst.max(diff);
        let gap = m.functional_value - tikhonov_value(&h, &exact, &y, &c)?;
        ok &= diff <= 1e-8 && gap <= m.certificate.eta_bound + 1e-15;
    }
    Ok((ok, format!("closed-form distance {worst:.1e}")))
}

fn check_gradients() -> Result<(bool, String)> {
    let n = 32;
    let akind = ProblemKind::a_example(0.5);
    let f = GridFunction::constant(n, 10.0);
    let x = GridFunction::from_fn(n, |s| 1.2 + 0.3 * (2.0 * PI * s).sin());
    let d = GridFunction::from_fn(n, |s| (PI * s).cos() + s);
    let fem = SurrogateHandle::FemForward {
        kind: akind,
        f: f.clone(),
        n,
    };
    let y = fem.forward(&GridFunction::constant(n, 1.1))?;
    let mut c = TikhonovConfig::new(
        0.3,
        1e-8,
        GridFunction::constant(n, 1.0),
        SpaceKind::H1,
        0.5,
    );
    let e_fem = gradient_fd_error(&fem, &x, &d, &y, &c, 1e-6)?;

    let (ls, _, lf) = linearized_c_surrogate(n, 4)?;
    let lin = SurrogateHandle::LinearRankN {
        ls,
        problem: Some(ProblemKind::c_example(0.5)),
    };
    let yl = solve_forward_fem(
        ProblemKind::c_example(0.5),
        &GridFunction::constant(n, 1.05),
        &lf,
        n,
    )?;
    c.space = SpaceKind::L2;
    let e_lin = gradient_fd_error(&lin, &x, &d, &yl, &c, 1e-6)?;

    let (s, _, nf) = c_example_neural(3, n, 4)?;
    let yn = solve_forward_fem(
        ProblemKind::c_example(0.1),
        &GridFunction::constant(n, 1.02),
        &nf,
        n,
    )?;
    let xn = GridFunction::from_fn(n, |s| 1.0 + 0.01 * (2.0 * PI * s).sin());
    let dn = GridFunction::from_fn(n, |s| (PI * s).sin() + 0.3 * s);
    c.nu = 0.1;
    let e_nn = gradient_fd_error(
        &SurrogateHandle::NeuralOperator(Box::new(s)),
        &xn,
        &dn,
        &yn,
        &c,
        1e-6,
    )?;
    let worst = e_fem.max(e_lin).max(e_nn);
    Ok((
        worst <= 1e-4,
        format!("fem {e_fem:.1e}, linear {e_lin:.1e}, neural {e_nn:.1e}"),
    ))
}

fn check_decomposition() -> Result<(bool, String)> {
    let (s, _, _) = c_example_neural(7, 64, 4)?;
    let d = s.diagnostics;
    let ok = d.rho_bound == crate::training::rho_bound(d.rank, d.nu_n, d.q_n, d.r_n);
    Ok((
        ok,
        format!("rho_bound {:.3e} = nu_N + N q_N r_N", d.rho_bound),
    ))
}

/// Runs every invariant group; each outcome renders as one line.
pub fn run_invariant_suite() -> Vec<CheckOutcome> {
    vec![
        outcome("schema", check_schema()),
        outcome("slope-fit", check_slope_fit()),
        outcome("fem-rate", check_fem()),
        outcome("noise", check_noise()),
        outcome("linear-surrogate", check_linear_surrogate()),
        outcome("branch-quadrature", check_quadrature()),
        outcome("error-decomposition", check_decomposition()),
        outcome("mollifier", check_mollifier()),
        outcome("certificate", check_certificate()),
        outcome("gradient", check_gradients()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_group_passes() {
        for o in run_invariant_suite() {
            println!("{}", o.line());
            assert!(o.passed, "{}", o.line());
        }
    }
}
