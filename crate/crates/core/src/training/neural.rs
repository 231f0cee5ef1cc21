//! Neural-operator realization of the linear surrogate: quadrature branch
//! priors, least-squares trunk fits and the assembled surrogate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::forward::{ProblemKind, ReferenceMap};
use crate::grid::{trapezoid_weights, GridFunction, SpaceKind};
use crate::operator::{
    eval_branch, flatten_structured, BranchCoeffs, NeuralOperatorCoeffs, StructuredSurrogateCoeffs,
    SurrogateBlock, TrunkCoeffs,
};
use crate::textfmt::TextDoc;

use super::linear::{estimate_nu_n_for, LinearSurrogate};

const CONDITION_LIMIT: f64 = 1e12;

/// Affine map `u -> 0.05 + 0.9 (u - lo) / (hi - lo)` onto (0.05, 0.95).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescale {
    pub lo: f64,
    pub hi: f64,
}

impl Rescale {
    /// Range `[lo, hi]` widened by `pad * (hi - lo)` on both sides. A
    /// degenerate range is widened to a unit-scale interval.
    pub fn from_range(lo: f64, hi: f64, pad: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::ConfigInvalid(format!(
                "bad rescale range [{lo}, {hi}]"
            )));
        }
        let mut width = hi - lo;
        if width <= 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
            width = 1e-6 * (1.0 + lo.abs().max(hi.abs()));
        }
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * width * (1.0 + 2.0 * pad.max(0.0));
        Ok(Rescale {
            lo: mid - half,
            hi: mid + half,
        })
    }

    pub fn encode(&self, u: f64) -> f64 {
        0.05 + 0.9 * (u - self.lo) / (self.hi - self.lo)
    }

    pub fn decode(&self, v: f64) -> f64 {
        self.lo + (v - 0.05) * (self.hi - self.lo) / 0.9
    }

    /// Derivative of `encode`.
    pub fn slope(&self) -> f64 {
        0.9 / (self.hi - self.lo)
    }

    /// Inverse slope `(hi - lo) / 0.9`.
    pub fn span(&self) -> f64 {
        (self.hi - self.lo) / 0.9
    }
}

/// Branch nodes `t_k = k / N_k`, k = 0..N_k.
pub fn branch_nodes(n_k: usize) -> Vec<f64> {
    (0..=n_k).map(|k| k as f64 / n_k as f64).collect()
}

/// Trapezoid weights `1/(2 N_k)` at the ends and `1/N_k` inside.
pub fn quadrature_weights(n_k: usize) -> Vec<f64> {
    trapezoid_weights(n_k)
}

/// Function `r` on the `N_k` mesh with `trapezoid(x r) = <x, x_underline>_space`
/// for `x` on that mesh: `r = x_underline` for L2 and `W^-1 G x_underline` for H1.
pub fn representer(x_underline: &GridFunction, n_k: usize, space: SpaceKind) -> GridFunction {
    let xu = x_underline.resample(n_k);
    match space {
        SpaceKind::L2 => xu,
        SpaceKind::H1 => {
            let g = space.gram(n_k).mul_vec(xu.values());
            let w = trapezoid_weights(n_k);
            GridFunction::new(g.iter().zip(&w).map(|(a, b)| a / b).collect()).expect("finite")
        }
    }
}

/// Quadrature prior for the functional `x -> trapezoid(x r)`, anchored at `x_ref`.
///
/// With `v_k = rescale(x_ref(t_k) r(t_k))` and `g_k = sigma^-1(v_k)`, each node
/// gets the minimum-norm `(w_k, theta_k)` solving `w_k x_ref(t_k) + theta_k = g_k`.
/// The weight matrix is diagonal: node k only reads `x(t_k)`.
pub fn build_branch_prior(
    representer: &GridFunction,
    x_ref: &GridFunction,
    n_k: usize,
    activation: ActivationKind,
    rescale: Rescale,
) -> Result<BranchCoeffs> {
    let nodes = branch_nodes(n_k);
    let m = nodes.len();
    let mut w = vec![0.0; m * m];
    let mut theta = vec![0.0; m];
    for (k, &t) in nodes.iter().enumerate() {
        let a = x_ref.eval(t);
        let v = rescale.encode(a * representer.eval(t));
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::RangeViolation { node: k, value: v });
        }
        let g = activation.inverse(v)?;
        let d = a * a + 1.0;
        w[k * m + k] = g * a / d;
        theta[k] = g / d;
    }
    Ok(BranchCoeffs {
        c: quadrature_weights(n_k),
        w,
        theta,
        s_points: nodes,
        activation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BranchMode {
    /// Fixed `(w_k, theta_k)` anchored at the center image.
    Anchored,
    /// `(w_k, theta_k)` re-solved for every input, so the branch equals the
    /// quadrature rule exactly.
    #[default]
    Adaptive,
}

impl BranchMode {
    pub fn name(self) -> &'static str {
        match self {
            BranchMode::Anchored => "anchored",
            BranchMode::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "anchored" => Ok(BranchMode::Anchored),
            "adaptive" => Ok(BranchMode::Adaptive),
            other => Err(Error::Parse(format!("unknown branch mode '{other}'"))),
        }
    }
}

/// Input-dependent branch: node weights solved at the sampled input itself.
/// Returns the value and the derivative with respect to each sample.
pub fn eval_branch_adaptive(
    c: &[f64],
    r_nodes: &[f64],
    x_samples: &[f64],
    activation: ActivationKind,
    rescale: Rescale,
) -> Result<(f64, Vec<f64>)> {
    if c.len() != x_samples.len() || r_nodes.len() != x_samples.len() {
        return Err(Error::DimensionMismatch(format!(
            "adaptive branch expects {} samples, got {}",
            c.len(),
            x_samples.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(c.len());
    for k in 0..c.len() {
        let a = x_samples[k];
        let v = rescale.encode(a * r_nodes[k]);
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::RangeViolation { node: k, value: v });
        }
        let g = activation.inverse(v)?;
        let d = a * a + 1.0;
        let (w, theta) = (g * a / d, g / d);
        value += c[k] * activation.eval(w * a + theta);
        grad.push(c[k] * rescale.slope() * r_nodes[k]);
    }
    Ok((value, grad))
}

/// Inner trunk parameters. Unit 0 is the constant unit `w = 0`. Unit `j`
/// has a random sign, `|w|` uniform in [10, 20] and transition point
/// `t*` = the `j`-th van der Corput point, with `zeta = -w t*`. Draws are
/// sequential, so a smaller `N_j` with the same seed yields a prefix of a
/// larger one.
const W_MIN: f64 = 10.0;
const W_MAX: f64 = 20.0;

fn van_der_corput(mut k: usize) -> f64 {
    let mut x = 0.0;
    let mut b = 0.5;
    while k > 0 {
        if k & 1 == 1 {
            x += b;
        }
        b *= 0.5;
        k >>= 1;
    }
    x
}

pub fn draw_trunk_inner(n_j: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity(n_j);
    let mut zeta = Vec::with_capacity(n_j);
    for j in 0..n_j {
        if j == 0 {
            w.push(0.0);
            zeta.push(0.0);
            continue;
        }
        let mag: f64 = rng.gen_range(W_MIN..=W_MAX);
        let wj = if rng.gen::<bool>() { mag } else { -mag };
        let ts = van_der_corput(j);
        w.push(wj);
        zeta.push(-wj * ts);
    }
    (w, zeta)
}

fn fit_outer(
    y: &GridFunction,
    w: &[f64],
    zeta: &[f64],
    activation: ActivationKind,
) -> (Vec<f64>, f64, f64) {
    let m = y.n_cells() + 1;
    let nj = w.len();
    let sw: Vec<f64> = trapezoid_weights(y.n_cells())
        .iter()
        .map(|v| v.sqrt())
        .collect();
    let a = DMatrix::from_fn(m, nj, |i, j| {
        sw[i] * activation.eval(w[j] * y.node(i) + zeta[j])
    });
    let b = DVector::from_fn(m, |i, _| sw[i] * y.values()[i]);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    let c = svd.solve(&b, 0.0).expect("u and v were computed");
    let res = (&a * &c - &b).norm();
    (c.iter().copied().collect(), res, cond)
}

/// Least-squares trunk fit of `y_underline` at its mesh nodes. Returns the
/// trunk and the achieved discrete L2 residual.
pub fn fit_trunk(
    y_underline: &GridFunction,
    n_j: usize,
    activation: ActivationKind,
    seed: u64,
) -> Result<(TrunkCoeffs, f64)> {
    if n_j == 0 {
        return Err(Error::ConfigInvalid("trunk needs N_j >= 1".into()));
    }
    let mut last_cond = 0.0;
    for attempt in 0..2u64 {
        let s = if attempt == 0 {
            seed
        } else {
            seed ^ 0x9e37_79b9_7f4a_7c15
        };
        let (w, zeta) = draw_trunk_inner(n_j, s);
        let (c, res, cond) = fit_outer(y_underline, &w, &zeta, activation);
        if cond <= CONDITION_LIMIT {
            return Ok((
                TrunkCoeffs {
                    c,
                    w,
                    zeta,
                    activation,
                },
                res,
            ));
        }
        last_cond = cond;
    }
    Err(Error::IllConditionedFit(last_cond))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateDiagnostics {
    pub rank: usize,
    pub nu_n: f64,
    pub q_n: f64,
    pub r_n: f64,
    pub rho_bound: f64,
    /// Largest `||p - x_hat_0||_X` over the probe set.
    pub probe_radius: f64,
    /// `max_l ||y_hat_0 + e y_l - F[x_hat_0 + e x_l]|| / e` at the training
    /// perturbation size `e`; zero for linear operators.
    pub linearization_mismatch: f64,
}

impl SurrogateDiagnostics {
    pub fn new(rank: usize, nu_n: f64, q_n: f64, r_n: f64) -> Self {
        SurrogateDiagnostics {
            rank,
            nu_n,
            q_n,
            r_n,
            rho_bound: rho_bound(rank, nu_n, q_n, r_n),
            probe_radius: 0.0,
            linearization_mismatch: 0.0,
        }
    }
}

/// `nu_N + N q_N r_N`.
pub fn rho_bound(rank: usize, nu_n: f64, q_n: f64, r_n: f64) -> f64 {
    nu_n + rank as f64 * q_n * r_n
}

/// Rank-N neural surrogate
/// `F~[x] = offset + sum_l B_l(x) * span_l * T_l`, where `B_l` is the
/// rescaled branch functional and `T_l` the trunk fit of `y_underline_l`.
#[derive(Debug, Clone)]
pub struct NeuralSurrogate {
    pub problem: ProblemKind,
    pub space: SpaceKind,
    pub mode: BranchMode,
    pub n_k: usize,
    /// Branch priors and trunks with the rescale span folded into `c_j`.
    pub structured: StructuredSurrogateCoeffs,
    /// Per-block representer sampled at the branch nodes.
    pub r_nodes: Vec<Vec<f64>>,
    pub rescales: Vec<Rescale>,
    pub offset: GridFunction,
    pub center_x: GridFunction,
    pub diagnostics: SurrogateDiagnostics,
    trunk_values: Vec<Vec<f64>>,
}

impl NeuralSurrogate {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        problem: ProblemKind,
        space: SpaceKind,
        mode: BranchMode,
        n_k: usize,
        structured: StructuredSurrogateCoeffs,
        r_nodes: Vec<Vec<f64>>,
        rescales: Vec<Rescale>,
        offset: GridFunction,
        center_x: GridFunction,
        diagnostics: SurrogateDiagnostics,
    ) -> Result<Self> {
        structured.validate()?;
        let n = structured.rank();
        if r_nodes.len() != n || rescales.len() != n {
            return Err(Error::DimensionMismatch(
                "per-block data has wrong length".into(),
            ));
        }
        for (b, r) in structured.blocks.iter().zip(&r_nodes) {
            if b.branch.n_k() != n_k + 1 || r.len() != n_k + 1 {
                return Err(Error::DimensionMismatch(format!(
                    "branch expects {} nodes",
                    n_k + 1
                )));
            }
        }
        let trunk_values = structured
            .blocks
            .iter()
            .map(|b| {
                (0..=offset.n_cells())
                    .map(|i| crate::operator::eval_trunk(&b.trunk, offset.node(i)))
                    .collect()
            })
            .collect();
        Ok(NeuralSurrogate {
            problem,
            space,
            mode,
            n_k,
            structured,
            r_nodes,
            rescales,
            offset,
            center_x,
            diagnostics,
            trunk_values,
        })
    }

    pub fn rank(&self) -> usize {
        self.structured.rank()
    }

    pub fn with_mode(mut self, mode: BranchMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn y_cells(&self) -> usize {
        self.offset.n_cells()
    }

    /// Branch values `B_l(x)` and their derivatives with respect to the
    /// samples `x(t_k)`.
    pub fn branch_values(&self, x: &GridFunction) -> Result<Vec<(f64, Vec<f64>)>> {
        let nodes = branch_nodes(self.n_k);
        let xs: Vec<f64> = nodes.iter().map(|&t| x.eval(t)).collect();
        self.structured
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| match self.mode {
                BranchMode::Adaptive => eval_branch_adaptive(
                    &b.branch.c,
                    &self.r_nodes[l],
                    &xs,
                    b.branch.activation,
                    self.rescales[l],
                ),
                BranchMode::Anchored => {
                    let v = eval_branch(&b.branch, &xs)?;
                    let m = xs.len();
                    let g = (0..m)
                        .map(|k| {
                            let wk = b.branch.w[k * m + k];
                            let z = wk * xs[k] + b.branch.theta[k];
                            b.branch.c[k] * b.branch.activation.derivative(z) * wk
                        })
                        .collect();
                    Ok((v, g))
                }
            })
            .collect()
    }

    /// `F~[x]` on the output mesh.
    pub fn forward(&self, x: &GridFunction) -> Result<GridFunction> {
        let bs = self.branch_values(x)?;
        let mut out = self.offset.values().to_vec();
        for ((b, _), tv) in bs.iter().zip(&self.trunk_values) {
            for (o, t) in out.iter_mut().zip(tv) {
                *o += b * t;
            }
        }
        GridFunction::new(out)
    }

    /// Euclidean gradient, with respect to the nodal values of `x`, of
    /// `x -> <F~[x], r>_L2`.
    pub fn vjp(&self, x: &GridFunction, r: &GridFunction) -> Result<Vec<f64>> {
        self.offset.same_mesh(r)?;
        let bs = self.branch_values(x)?;
        let w = trapezoid_weights(self.y_cells());
        let wr: Vec<f64> = w.iter().zip(r.values()).map(|(a, b)| a * b).collect();
        let nodes = branch_nodes(self.n_k);
        let mut sample_grad = vec![0.0; nodes.len()];
        for ((_, g), tv) in bs.iter().zip(&self.trunk_values) {
            let coef: f64 = tv.iter().zip(&wr).map(|(a, b)| a * b).sum();
            for (s, gk) in sample_grad.iter_mut().zip(g) {
                *s += coef * gk;
            }
        }
        // adjoint of linear interpolation at the branch nodes
        let n = x.n_cells();
        let mut out = vec![0.0; n + 1];
        for (&t, gs) in nodes.iter().zip(&sample_grad) {
            let pos = t.clamp(0.0, 1.0) * n as f64;
            let i = (pos.floor() as usize).min(n - 1);
            let th = pos - i as f64;
            out[i] += (1.0 - th) * gs;
            out[i + 1] += th * gs;
        }
        Ok(out)
    }

    /// Flat coefficient tensor; `eval_neural_operator(flat) + offset` equals
    /// the anchored forward map.
    pub fn flat(&self) -> Result<NeuralOperatorCoeffs> {
        flatten_structured(&self.structured)
    }

    pub fn to_doc(&self) -> TextDoc {
        let mut d = self.structured.to_doc();
        d.set("kind", "neural_surrogate");
        d.set("problem", self.problem.name());
        d.set_f64("nu", self.problem.nu);
        d.set("space", self.space.name());
        d.set("mode", self.mode.name());
        d.set("n_k", self.n_k);
        let g = &self.diagnostics;
        d.set_f64("nu_n", g.nu_n);
        d.set_f64("q_n", g.q_n);
        d.set_f64("r_n", g.r_n);
        d.set_f64("rho_bound", g.rho_bound);
        d.set_f64("probe_radius", g.probe_radius);
        d.set_f64("linearization_mismatch", g.linearization_mismatch);
        let n = self.rank();
        d.push_array("r_nodes", &[n, self.n_k + 1], self.r_nodes.concat());
        d.push_array(
            "rescale",
            &[n, 2],
            self.rescales.iter().flat_map(|r| [r.lo, r.hi]).collect(),
        );
        d.push_array(
            "offset",
            &[self.y_cells() + 1],
            self.offset.values().to_vec(),
        );
        d.push_array(
            "center_x",
            &[self.center_x.n_cells() + 1],
            self.center_x.values().to_vec(),
        );
        d
    }

    pub fn from_doc(d: &TextDoc) -> Result<Self> {
        d.expect_kind("neural_surrogate")?;
        let mut inner = d.clone();
        inner.set("kind", "structured_surrogate");
        let structured = StructuredSurrogateCoeffs::from_doc(&inner)?;
        let n = structured.rank();
        let n_k: usize = d.get_parsed("n_k")?;
        let tag = ProblemKind::parse_tag(d.get("problem")?)?;
        let problem = ProblemKind::new(tag, d.get_parsed("nu")?)?;
        let r_nodes = d
            .array_dims("r_nodes", &[n, n_k + 1])?
            .chunks(n_k + 1)
            .map(|c| c.to_vec())
            .collect();
        let rescales = d
            .array_dims("rescale", &[n, 2])?
            .chunks(2)
            .map(|c| Rescale { lo: c[0], hi: c[1] })
            .collect();
        let mut diagnostics = SurrogateDiagnostics::new(
            n,
            d.get_parsed("nu_n")?,
            d.get_parsed("q_n")?,
            d.get_parsed("r_n")?,
        );
        diagnostics.rho_bound = d.get_parsed("rho_bound")?;
        diagnostics.probe_radius = d.get_parsed("probe_radius")?;
        diagnostics.linearization_mismatch = d.get_parsed("linearization_mismatch")?;
        Self::from_parts(
            problem,
            SpaceKind::parse(d.get("space")?)?,
            BranchMode::parse(d.get("mode")?)?,
            n_k,
            structured,
            r_nodes,
            rescales,
            GridFunction::new(d.array("offset")?.data.clone())?,
            GridFunction::new(d.array("center_x")?.data.clone())?,
            diagnostics,
        )
    }
}

#[derive(Debug, Clone)]
pub struct AssembleOptions {
    pub n_k: usize,
    pub n_j: usize,
    pub activation: ActivationKind,
    pub mode: BranchMode,
    /// Relative widening of each rescale range beyond the training family.
    pub rescale_pad: f64,
    pub seed: u64,
    pub problem: ProblemKind,
    pub f: GridFunction,
    /// Inputs defining the rescale ranges (the training images).
    pub family: Vec<GridFunction>,
    /// Probes for `q_N` and `nu_N`.
    pub probes: Vec<GridFunction>,
    /// Size `e` used for the linearization-mismatch diagnostic; 0 skips it.
    pub mismatch_step: f64,
    /// Operator behind `nu_N` and the mismatch diagnostic.
    pub reference: ReferenceMap,
}

/// Per-block branch priors and trunk fits for `ls`, with diagnostics.
pub fn assemble_neural_surrogate(
    ls: &LinearSurrogate,
    opts: &AssembleOptions,
) -> Result<NeuralSurrogate> {
    let n = ls.rank();
    let n_k = opts.n_k;
    if n_k < 1 {
        return Err(Error::ConfigInvalid("N_k must be positive".into()));
    }
    let nodes = branch_nodes(n_k);
    let x0 = &ls.center.0;
    let family: Vec<&GridFunction> = std::iter::once(x0).chain(opts.family.iter()).collect();

    struct Built {
        block: SurrogateBlock,
        r_nodes: Vec<f64>,
        rescale: Rescale,
        residual: f64,
    }

    let built = (0..n)
        .into_par_iter()
        .map(|l| -> Result<Built> {
            let rep = representer(&ls.basis[l], n_k, ls.space);
            let r_nodes: Vec<f64> = nodes.iter().map(|&t| rep.eval(t)).collect();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for x in &family {
                for (&t, r) in nodes.iter().zip(&r_nodes) {
                    let u = x.eval(t) * r;
                    lo = lo.min(u);
                    hi = hi.max(u);
                }
            }
            let rescale = Rescale::from_range(lo, hi, opts.rescale_pad)?;
            let branch = build_branch_prior(&rep, x0, n_k, opts.activation, rescale)?;
            let seed = opts.seed.wrapping_add(0x1000 * l as u64);
            let (mut trunk, residual) = fit_trunk(&ls.induced[l], opts.n_j, opts.activation, seed)?;
            for c in trunk.c.iter_mut() {
                *c *= rescale.span();
            }
            Ok(Built {
                block: SurrogateBlock { branch, trunk },
                r_nodes,
                rescale,
                residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let structured = StructuredSurrogateCoeffs::new(
        built.iter().map(|b| b.block.clone()).collect(),
        opts.activation,
    )?;
    let r_n = built.iter().map(|b| b.residual).fold(0.0, f64::max);
    let r_nodes: Vec<Vec<f64>> = built.iter().map(|b| b.r_nodes.clone()).collect();
    let rescales: Vec<Rescale> = built.iter().map(|b| b.rescale).collect();

    // offset = y_hat_0 - sum_l B_l(x_hat_0) T~_l, with the anchored branch
    let zero_offset = GridFunction::zeros(ls.y_cells());
    let provisional = NeuralSurrogate::from_parts(
        opts.problem,
        ls.space,
        BranchMode::Anchored,
        n_k,
        structured.clone(),
        r_nodes.clone(),
        rescales.clone(),
        zero_offset,
        x0.clone(),
        SurrogateDiagnostics::new(n, 0.0, 0.0, 0.0),
    )?;
    let offset = ls.center.1.sub(&provisional.forward(x0)?)?;
    let mut surrogate = NeuralSurrogate::from_parts(
        opts.problem,
        ls.space,
        opts.mode,
        n_k,
        structured,
        r_nodes,
        rescales,
        offset,
        x0.clone(),
        SurrogateDiagnostics::new(n, 0.0, 0.0, 0.0),
    )?;

    // functional error of the branches on the probes
    let b0 = surrogate.branch_values(x0)?;
    let mut q_n: f64 = 0.0;
    let mut radius: f64 = 0.0;
    for p in &opts.probes {
        let d = p.resample(ls.x_cells()).sub(x0)?;
        radius = radius.max(ls.space.norm(&d));
        let bp = surrogate.branch_values(p)?;
        let exact = ls.coordinates(&d);
        for l in 0..n {
            let approx = surrogate.rescales[l].span() * (bp[l].0 - b0[l].0);
            q_n = q_n.max((approx - exact[l]).abs());
        }
    }
    let nu_n = if opts.probes.is_empty() {
        0.0
    } else {
        estimate_nu_n_for(ls, opts.reference, opts.problem, &opts.f, &opts.probes)?
    };
    let mut diag = SurrogateDiagnostics::new(n, nu_n, q_n, r_n);
    diag.probe_radius = radius;
    if opts.mismatch_step > 0.0 {
        diag.linearization_mismatch = linearization_mismatch_for(
            ls,
            opts.reference,
            opts.problem,
            &opts.f,
            opts.mismatch_step,
        )?;
    }
    surrogate.diagnostics = diag;
    Ok(surrogate)
}

/// `max_l ||y_hat_0 + e y_l - F[x_hat_0 + e x_l]||_L2 / e`.
pub fn linearization_mismatch(
    ls: &LinearSurrogate,
    problem: ProblemKind,
    f: &GridFunction,
    e: f64,
) -> Result<f64> {
    linearization_mismatch_for(ls, ReferenceMap::Forward, problem, f, e)
}

/// [`linearization_mismatch`] against the given reference map.
pub fn linearization_mismatch_for(
    ls: &LinearSurrogate,
    map: ReferenceMap,
    problem: ProblemKind,
    f: &GridFunction,
    e: f64,
) -> Result<f64> {
    let (x0, y0) = &ls.center;
    (0..ls.rank())
        .into_par_iter()
        .map(|l| {
            let x = x0.axpy(e, &ls.basis[l])?;
            let y = map.apply(problem, f, x0, &x)?.resample(ls.y_cells());
            let lin = y0.axpy(e, &ls.induced[l])?;
            Ok(SpaceKind::L2.norm(&lin.sub(&y)?) / e)
        })
        .collect::<Result<Vec<f64>>>()
        .map(|v| v.into_iter().fold(0.0, f64::max))
}

/// Random points `x_hat_0 + d` with `d` in the span of the basis and
/// `||d||_X` uniform in `[radius / 2, radius]`.
pub fn random_span_probes(
    ls: &LinearSurrogate,
    count: usize,
    radius: f64,
    seed: u64,
) -> Vec<GridFunction> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c: Vec<f64> = (0..ls.rank())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let size = rng.gen_range(0.5 * radius..=radius);
            let mut p = ls.center.0.clone();
            for (cl, b) in c.iter().zip(&ls.basis) {
                p = p.axpy(size * cl / norm, b).expect("same mesh");
            }
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::trapezoid;
    use crate::operator::eval_neural_operator;
    use crate::training::linear::{apply_linear_surrogate, build_linear_surrogate};
    use crate::training::set::{
        center_training_set, generate_training_set, PerturbationMode, PerturbationSpec,
    };
    use std::f64::consts::PI;

    #[test]
    fn rescale_round_trip() {
        let r = Rescale::from_range(-2.0, 3.0, 0.0).unwrap();
        assert!((r.encode(-2.0) - 0.05).abs() < 1e-15);
        assert!((r.encode(3.0) - 0.95).abs() < 1e-15);
        assert!((r.decode(r.encode(1.234)) - 1.234).abs() < 1e-14);
        let flat = Rescale::from_range(1.0, 1.0, 0.0).unwrap();
        assert!(flat.hi > flat.lo);
    }

    #[test]
    fn weights_match_trapezoid_rule() {
        let c = quadrature_weights(4);
        assert_eq!(c, vec![0.125, 0.25, 0.25, 0.25, 0.125]);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_maps_to_zero_preactivation() {
        // rescale chosen so that x_ref * r = 1 encodes to exactly 0.5
        let resc = Rescale { lo: 0.0, hi: 2.0 };
        assert_eq!(resc.encode(1.0), 0.5);
        let r = GridFunction::constant(4, 1.0);
        let x = GridFunction::constant(4, 1.0);
        let b = build_branch_prior(&r, &x, 4, ActivationKind::Logistic, resc).unwrap();
        for k in 0..5 {
            assert_eq!(b.w[k * 5 + k] * 1.0 + b.theta[k], 0.0);
        }
    }

    #[test]
    fn anchored_branch_reproduces_trapezoid_at_anchor() {
        let n_k = 32;
        let x = GridFunction::from_fn(200, |s| 1.0 + 0.3 * s * s);
        let r = GridFunction::from_fn(200, |s| (2.0 * s).cos());
        let nodes = branch_nodes(n_k);
        let prods: Vec<f64> = nodes.iter().map(|&t| x.eval(t) * r.eval(t)).collect();
        let lo = prods.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = prods.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let resc = Rescale::from_range(lo, hi, 0.0).unwrap();
        let b = build_branch_prior(&r, &x, n_k, ActivationKind::Logistic, resc).unwrap();
        let v = eval_branch(&b, &b.sample(&x)).unwrap();
        let direct = trapezoid(&prods);
        assert!((resc.decode(v) - direct).abs() < 1e-12);
    }

    #[test]
    fn range_violation_reported() {
        let r = GridFunction::constant(4, 10.0);
        let x = GridFunction::constant(4, 1.0);
        let resc = Rescale { lo: 0.0, hi: 1.0 };
        assert!(matches!(
            build_branch_prior(&r, &x, 4, ActivationKind::Logistic, resc),
            Err(Error::RangeViolation { .. })
        ));
    }

    #[test]
    fn adaptive_branch_is_trapezoid_for_any_input() {
        let n_k = 16;
        let r: Vec<f64> = branch_nodes(n_k).iter().map(|t| 1.0 + t).collect();
        let x: Vec<f64> = branch_nodes(n_k)
            .iter()
            .map(|t| 0.8 + 0.1 * (5.0 * t).sin())
            .collect();
        let resc = Rescale { lo: 0.0, hi: 3.0 };
        let c = quadrature_weights(n_k);
        let (v, g) = eval_branch_adaptive(&c, &r, &x, ActivationKind::Logistic, resc).unwrap();
        let prods: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a * b).collect();
        assert!((resc.decode(v) - trapezoid(&prods)).abs() < 1e-13);
        for k in 0..=n_k {
            assert!((g[k] - c[k] * resc.slope() * r[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn h1_representer() {
        let n_k = 40;
        let xu = GridFunction::from_fn(n_k, |s| (3.0 * s).sin());
        let x = GridFunction::from_fn(n_k, |s| 1.0 + s * s);
        let r = representer(&xu, n_k, SpaceKind::H1);
        let prods: Vec<f64> = x
            .values()
            .iter()
            .zip(r.values())
            .map(|(a, b)| a * b)
            .collect();
        let ip = SpaceKind::H1.inner(&x, &xu).unwrap();
        assert!((trapezoid(&prods) - ip).abs() < 1e-12 * ip.abs().max(1.0));
    }

    #[test]
    fn trunk_trivial_targets() {
        let (t, r) = fit_trunk(&GridFunction::zeros(50), 5, ActivationKind::Logistic, 1).unwrap();
        assert!(t.c.iter().all(|&c| c == 0.0));
        assert_eq!(r, 0.0);
        let (_, r) = fit_trunk(
            &GridFunction::constant(50, 3.0),
            2,
            ActivationKind::Logistic,
            1,
        )
        .unwrap();
        assert!(r <= 1e-8);
    }

    #[test]
    fn trunk_residual_decreases() {
        let y = GridFunction::from_fn(128, |s| (PI * s).sin());
        let mut prev = f64::INFINITY;
        for nj in [4, 8, 16, 32] {
            let (t, r) = fit_trunk(&y, nj, ActivationKind::Logistic, 7).unwrap();
            assert!(r <= prev, "N_j={nj}: {r} > {prev}");
            // residual recomputed from the returned coefficients
            let fit = GridFunction::from_fn(128, |s| crate::operator::eval_trunk(&t, s));
            let again = SpaceKind::L2.norm(&fit.sub(&y).unwrap());
            assert!((again - r).abs() <= 1e-10 + 1e-8 * r);
            prev = r;
        }
    }

    #[test]
    fn prefix_property() {
        let (w8, z8) = draw_trunk_inner(8, 3);
        let (w4, z4) = draw_trunk_inner(4, 3);
        assert_eq!(&w8[..4], &w4[..]);
        assert_eq!(&z8[..4], &z4[..]);
        assert_eq!((w8[0], z8[0]), (0.0, 0.0));
    }

    fn c_family(n: usize, count: usize, amp: f64) -> (LinearSurrogate, AssembleOptions) {
        let problem = ProblemKind::c_example(0.5);
        let f = GridFunction::from_fn(n, |s| 10.0 * (PI * PI + 1.0) * (PI * s).sin());
        let center = GridFunction::constant(n, 1.0);
        let spec = PerturbationSpec {
            mode: PerturbationMode::SineModes,
            amplitude: amp,
            count,
            seed: 1,
        };
        let ts = generate_training_set(problem, &f, &center, spec).unwrap();
        let ls = build_linear_surrogate(&center_training_set(&ts).unwrap(), ts.space).unwrap();
        let probes = random_span_probes(&ls, 8, amp, 99);
        let opts = AssembleOptions {
            n_k: n,
            n_j: 24,
            activation: ActivationKind::Logistic,
            mode: BranchMode::Adaptive,
            rescale_pad: 0.5,
            seed: 5,
            problem,
            f,
            family: ts.pairs.iter().map(|p| p.0.clone()).collect(),
            probes,
            mismatch_step: amp,
            reference: ReferenceMap::Forward,
        };
        (ls, opts)
    }

    #[test]
    fn assembled_surrogate_tracks_linear_surrogate() {
        let (ls, opts) = c_family(64, 3, 0.05);
        let s = assemble_neural_surrogate(&ls, &opts).unwrap();
        let d = s.diagnostics;
        assert_eq!(d.rho_bound, d.nu_n + 3.0 * d.q_n * d.r_n);
        // the center is reproduced up to round-off
        let y0 = s.forward(&ls.center.0).unwrap();
        assert!(y0.sub(&ls.center.1).unwrap().max_abs() < 1e-12 * ls.center.1.max_abs());
        // F~ - F# = sum_l e_l T_l + sum_l c_l (T_l - y_l) with |e_l| <= q_N
        let t_max = ls
            .induced
            .iter()
            .map(|y| SpaceKind::L2.norm(y))
            .fold(0.0, f64::max)
            + d.r_n;
        for p in &opts.probes {
            let lin = ls.apply_centered(p).unwrap();
            let neu = s.forward(p).unwrap();
            let gap = SpaceKind::L2.norm(&lin.sub(&neu).unwrap());
            let dist = SpaceKind::L2.norm(&p.sub(&ls.center.0).unwrap());
            let bound = 3.0 * d.q_n * t_max + 3f64.sqrt() * dist * d.r_n;
            assert!(
                gap <= bound * (1.0 + 1e-9) + 1e-14,
                "gap {gap} bound {bound}"
            );
        }
    }

    #[test]
    fn anchored_surrogate_matches_flat_evaluation() {
        let (ls, opts) = c_family(16, 2, 0.05);
        let s = assemble_neural_surrogate(&ls, &opts)
            .unwrap()
            .with_mode(BranchMode::Anchored);
        let flat = s.flat().unwrap();
        let ts: Vec<f64> = (0..=16).map(|i| i as f64 / 16.0).collect();
        for p in &opts.probes {
            let direct = s.forward(p).unwrap();
            let via = eval_neural_operator(&flat, p, &ts).unwrap();
            for (i, v) in via.iter().enumerate() {
                let a = v + s.offset.values()[i];
                assert!((a - direct.values()[i]).abs() <= 1e-12 * direct.max_abs());
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let (ls, opts) = c_family(32, 3, 0.05);
        for mode in [BranchMode::Adaptive, BranchMode::Anchored] {
            let s = assemble_neural_surrogate(&ls, &opts)
                .unwrap()
                .with_mode(mode);
            let x = opts.probes[0].clone();
            let r = GridFunction::from_fn(32, |t| (4.0 * t).cos());
            let h = GridFunction::from_fn(32, |t| t * (1.0 - t));
            let g = s.vjp(&x, &r).unwrap();
            let e = 1e-6;
            let f = |z: &GridFunction| SpaceKind::L2.inner(&s.forward(z).unwrap(), &r).unwrap();
            let fd = (f(&x.axpy(e, &h).unwrap()) - f(&x.axpy(-e, &h).unwrap())) / (2.0 * e);
            let an: f64 = g.iter().zip(h.values()).map(|(a, b)| a * b).sum();
            assert!(
                (fd - an).abs() <= 1e-6 * an.abs().max(1e-8),
                "{mode:?}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn serialization_round_trip() {
        let (ls, opts) = c_family(16, 2, 0.05);
        let s = assemble_neural_surrogate(&ls, &opts).unwrap();
        let back =
            NeuralSurrogate::from_doc(&TextDoc::parse(&s.to_doc().to_text()).unwrap()).unwrap();
        assert_eq!(back.to_doc().to_text(), s.to_doc().to_text());
        let p = &opts.probes[0];
        assert_eq!(back.forward(p).unwrap(), s.forward(p).unwrap());
        let _ = apply_linear_surrogate(&ls, p);
    }
}
