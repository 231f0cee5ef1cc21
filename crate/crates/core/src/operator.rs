//! Neural operators in branch/trunk form and the structured-to-flat mapping.
//!
//! A flat operator evaluates
//!
//! ```text
//! F[x](t) = sum_j sum_k alpha[j,k] * sigma(sum_l w[j,k,l] x(s_l) + theta[j,k]) * sigma(w_vec[j] t + zeta[j])
//! ```
//!
//! on `Omega_X = Omega_Y = (0, 1)`.

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::textfmt::TextDoc;

/// Spatial dimension of input and output domains.
pub const DIM_T: usize = 1;
pub const DIM_S: usize = 1;

/// Scalar functional `x -> sum_k C_k sigma(sum_l w[k,l] x(s_l) + theta_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchCoeffs {
    pub c: Vec<f64>,
    /// Row-major `[N_k x N_l]`.
    pub w: Vec<f64>,
    pub theta: Vec<f64>,
    pub s_points: Vec<f64>,
    pub activation: ActivationKind,
}

impl BranchCoeffs {
    pub fn n_k(&self) -> usize {
        self.c.len()
    }

    pub fn n_l(&self) -> usize {
        self.s_points.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (nk, nl) = (self.n_k(), self.n_l());
        if self.theta.len() != nk || self.w.len() != nk * nl {
            return Err(Error::DimensionMismatch(format!(
                "branch: C has {nk} entries, theta {}, w {} (expected {})",
                self.theta.len(),
                self.w.len(),
                nk * nl
            )));
        }
        check_finite("branch", [&self.c, &self.w, &self.theta, &self.s_points])?;
        check_points("branch s_points", &self.s_points)
    }

    /// Samples `x` at the branch sample points.
    pub fn sample(&self, x: &GridFunction) -> Vec<f64> {
        self.s_points.iter().map(|&s| x.eval(s)).collect()
    }
}

/// Scalar function `t -> sum_j c_j sigma(w_j t + zeta_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkCoeffs {
    pub c: Vec<f64>,
    pub w: Vec<f64>,
    pub zeta: Vec<f64>,
    pub activation: ActivationKind,
}

impl TrunkCoeffs {
    pub fn n_j(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nj = self.n_j();
        if self.w.len() != nj || self.zeta.len() != nj {
            return Err(Error::DimensionMismatch(format!(
                "trunk: c has {nj} entries, w {}, zeta {}",
                self.w.len(),
                self.zeta.len()
            )));
        }
        check_finite("trunk", [&self.c, &self.w, &self.zeta, &[][..]])
    }
}

fn check_finite<const N: usize>(what: &str, parts: [&[f64]; N]) -> Result<()> {
    if parts.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: non-finite coefficient"
        )));
    }
    Ok(())
}

fn check_points(what: &str, pts: &[f64]) -> Result<()> {
    if let Some(p) = pts.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {p} outside [0, 1]"
        )));
    }
    Ok(())
}

pub fn eval_branch(branch: &BranchCoeffs, x_samples: &[f64]) -> Result<f64> {
    let nl = branch.n_l();
    if x_samples.len() != nl || branch.w.len() != branch.n_k() * nl {
        return Err(Error::DimensionMismatch(format!(
            "branch expects {nl} samples, got {}",
            x_samples.len()
        )));
    }
    let mut acc = 0.0;
    for k in 0..branch.n_k() {
        let row = &branch.w[k * nl..(k + 1) * nl];
        let z: f64 = row.iter().zip(x_samples).map(|(w, x)| w * x).sum::<f64>() + branch.theta[k];
        acc += branch.c[k] * branch.activation.eval(z);
    }
    Ok(acc)
}

pub fn eval_trunk(trunk: &TrunkCoeffs, t: f64) -> f64 {
    trunk
        .c
        .iter()
        .zip(&trunk.w)
        .zip(&trunk.zeta)
        .map(|((c, w), z)| c * trunk.activation.eval(w * t + z))
        .sum()
}

/// Flat coefficient tensor of a neural operator.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOperatorCoeffs {
    pub n_j: usize,
    pub n_k: usize,
    pub n_l: usize,
    /// Row-major `[N_j x N_k]`.
    pub alpha: Vec<f64>,
    /// Row-major `[N_j x N_k x N_l]`.
    pub w: Vec<f64>,
    /// `[N_j x DIM_T]`.
    pub w_vec: Vec<f64>,
    /// Row-major `[N_j x N_k]`.
    pub theta: Vec<f64>,
    pub s_points: Vec<f64>,
    pub zeta: Vec<f64>,
    pub activation: ActivationKind,
}

impl NeuralOperatorCoeffs {
    pub fn zeros(n_j: usize, n_k: usize, n_l: usize, activation: ActivationKind) -> Self {
        NeuralOperatorCoeffs {
            n_j,
            n_k,
            n_l,
            alpha: vec![0.0; n_j * n_k],
            w: vec![0.0; n_j * n_k * n_l],
            w_vec: vec![0.0; n_j * DIM_T],
            theta: vec![0.0; n_j * n_k],
            s_points: (0..n_l)
                .map(|l| {
                    if n_l > 1 {
                        l as f64 / (n_l - 1) as f64
                    } else {
                        0.5
                    }
                })
                .collect(),
            zeta: vec![0.0; n_j],
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (j, k, l) = (self.n_j, self.n_k, self.n_l);
        let checks = [
            ("alpha", self.alpha.len(), j * k),
            ("w", self.w.len(), j * k * l),
            ("w_vec", self.w_vec.len(), j * DIM_T),
            ("theta", self.theta.len(), j * k),
            ("s_points", self.s_points.len(), l),
            ("zeta", self.zeta.len(), j),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        check_finite(
            "coefficients",
            [
                &self.alpha,
                &self.w,
                &self.w_vec,
                &self.theta,
                &self.zeta,
                &self.s_points,
            ],
        )?;
        check_points("s_points", &self.s_points)
    }

    /// `n = N_j (N_k (N_l + 2) + dim_t + dim_s + 1)`.
    pub fn coefficient_count(&self) -> usize {
        coefficient_count(self.n_j, self.n_k, self.n_l)
    }

    pub fn to_doc(&self) -> TextDoc {
        let mut d = TextDoc::new("neural_operator");
        d.set("activation", self.activation.name());
        d.set("n_j", self.n_j);
        d.set("n_k", self.n_k);
        d.set("n_l", self.n_l);
        d.set("coefficient_count", self.coefficient_count());
        d.push_array("alpha", &[self.n_j, self.n_k], self.alpha.clone());
        d.push_array("w", &[self.n_j, self.n_k, self.n_l], self.w.clone());
        d.push_array("w_vec", &[self.n_j, DIM_T], self.w_vec.clone());
        d.push_array("theta", &[self.n_j, self.n_k], self.theta.clone());
        d.push_array("s_points", &[self.n_l], self.s_points.clone());
        d.push_array("zeta", &[self.n_j], self.zeta.clone());
        d
    }

    pub fn from_doc(d: &TextDoc) -> Result<Self> {
        d.expect_kind("neural_operator")?;
        let n_j: usize = d.get_parsed("n_j")?;
        let n_k: usize = d.get_parsed("n_k")?;
        let n_l: usize = d.get_parsed("n_l")?;
        let c = NeuralOperatorCoeffs {
            n_j,
            n_k,
            n_l,
            alpha: d.array_dims("alpha", &[n_j, n_k])?.to_vec(),
            w: d.array_dims("w", &[n_j, n_k, n_l])?.to_vec(),
            w_vec: d.array_dims("w_vec", &[n_j, DIM_T])?.to_vec(),
            theta: d.array_dims("theta", &[n_j, n_k])?.to_vec(),
            s_points: d.array_dims("s_points", &[n_l])?.to_vec(),
            zeta: d.array_dims("zeta", &[n_j])?.to_vec(),
            activation: ActivationKind::parse(d.get("activation")?)?,
        };
        c.validate()?;
        Ok(c)
    }
}

pub fn coefficient_count(n_j: usize, n_k: usize, n_l: usize) -> usize {
    n_j * (n_k * (n_l + 2) + DIM_T + DIM_S + 1)
}

/// Evaluates the flat operator at `t_points`, sampling `x` by linear
/// interpolation. Terms with `alpha = 0` are skipped; they contribute an
/// exact zero.
pub fn eval_neural_operator(
    coeffs: &NeuralOperatorCoeffs,
    x: &GridFunction,
    t_points: &[f64],
) -> Result<Vec<f64>> {
    coeffs.validate()?;
    check_points("t_points", t_points)?;
    let (nj, nk, nl) = (coeffs.n_j, coeffs.n_k, coeffs.n_l);
    let xs: Vec<f64> = coeffs.s_points.iter().map(|&s| x.eval(s)).collect();
    let act = coeffs.activation;
    // branch part: b[j] = sum_k alpha[j,k] sigma(...)
    let mut b = vec![0.0; nj];
    for j in 0..nj {
        let mut acc = 0.0;
        for k in 0..nk {
            let a = coeffs.alpha[j * nk + k];
            if a == 0.0 {
                continue;
            }
            let row = &coeffs.w[(j * nk + k) * nl..(j * nk + k + 1) * nl];
            let z: f64 =
                row.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() + coeffs.theta[j * nk + k];
            acc += a * act.eval(z);
        }
        b[j] = acc;
    }
    Ok(t_points
        .iter()
        .map(|&t| {
            (0..nj)
                .filter(|&j| b[j] != 0.0)
                .map(|j| b[j] * act.eval(coeffs.w_vec[j] * t + coeffs.zeta[j]))
                .sum()
        })
        .collect())
}

/// One training index: branch functional paired with trunk function.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBlock {
    pub branch: BranchCoeffs,
    pub trunk: TrunkCoeffs,
}

/// Per-index branch and trunk coefficients of a rank-N neural operator.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredSurrogateCoeffs {
    pub blocks: Vec<SurrogateBlock>,
    pub activation: ActivationKind,
}

impl StructuredSurrogateCoeffs {
    pub fn new(blocks: Vec<SurrogateBlock>, activation: ActivationKind) -> Result<Self> {
        let s = StructuredSurrogateCoeffs { blocks, activation };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            b.branch.validate()?;
            b.trunk.validate()?;
            if b.branch.activation != self.activation || b.trunk.activation != self.activation {
                return Err(Error::DimensionMismatch(format!(
                    "block {i} uses a different activation"
                )));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.blocks.len()
    }

    /// Nested evaluation `sum_l branch_l(x) * trunk_l(t)`.
    pub fn eval_nested(&self, x: &GridFunction, t_points: &[f64]) -> Result<Vec<f64>> {
        let bs = self
            .blocks
            .iter()
            .map(|b| eval_branch(&b.branch, &b.branch.sample(x)))
            .collect::<Result<Vec<_>>>()?;
        Ok(t_points
            .iter()
            .map(|&t| {
                self.blocks
                    .iter()
                    .zip(&bs)
                    .map(|(b, v)| v * eval_trunk(&b.trunk, t))
                    .sum()
            })
            .collect())
    }

    pub fn to_doc(&self) -> TextDoc {
        let mut d = TextDoc::new("structured_surrogate");
        d.set("activation", self.activation.name());
        d.set("rank", self.rank());
        for (i, b) in self.blocks.iter().enumerate() {
            let (nk, nl, nj) = (b.branch.n_k(), b.branch.n_l(), b.trunk.n_j());
            d.push_array(&format!("branch{i}_c"), &[nk], b.branch.c.clone());
            d.push_array(&format!("branch{i}_w"), &[nk, nl], b.branch.w.clone());
            d.push_array(&format!("branch{i}_theta"), &[nk], b.branch.theta.clone());
            d.push_array(&format!("branch{i}_s"), &[nl], b.branch.s_points.clone());
            d.push_array(&format!("trunk{i}_c"), &[nj], b.trunk.c.clone());
            d.push_array(&format!("trunk{i}_w"), &[nj], b.trunk.w.clone());
            d.push_array(&format!("trunk{i}_zeta"), &[nj], b.trunk.zeta.clone());
        }
        d
    }

    pub fn from_doc(d: &TextDoc) -> Result<Self> {
        d.expect_kind("structured_surrogate")?;
        let activation = ActivationKind::parse(d.get("activation")?)?;
        let rank: usize = d.get_parsed("rank")?;
        let mut blocks = Vec::with_capacity(rank);
        for i in 0..rank {
            let arr = |n: &str| -> Result<Vec<f64>> { Ok(d.array(n)?.data.clone()) };
            blocks.push(SurrogateBlock {
                branch: BranchCoeffs {
                    c: arr(&format!("branch{i}_c"))?,
                    w: arr(&format!("branch{i}_w"))?,
                    theta: arr(&format!("branch{i}_theta"))?,
                    s_points: arr(&format!("branch{i}_s"))?,
                    activation,
                },
                trunk: TrunkCoeffs {
                    c: arr(&format!("trunk{i}_c"))?,
                    w: arr(&format!("trunk{i}_w"))?,
                    zeta: arr(&format!("trunk{i}_zeta"))?,
                    activation,
                },
            });
        }
        Self::new(blocks, activation)
    }
}

/// Block-diagonal embedding of a structured surrogate into one flat tensor.
/// Ragged blocks are zero-padded to the largest `N_j`, `N_k`, `N_l` first.
pub fn flatten_structured(s: &StructuredSurrogateCoeffs) -> Result<NeuralOperatorCoeffs> {
    s.validate()?;
    let n = s.rank();
    let pj = s.blocks.iter().map(|b| b.trunk.n_j()).max().unwrap_or(0);
    let pk = s.blocks.iter().map(|b| b.branch.n_k()).max().unwrap_or(0);
    let pl = s.blocks.iter().map(|b| b.branch.n_l()).max().unwrap_or(0);
    let (nj, nk, nl) = (n * pj, n * pk, n * pl);
    let mut out = NeuralOperatorCoeffs::zeros(nj, nk, nl, s.activation);
    out.s_points = vec![0.0; nl];
    for (blk, b) in s.blocks.iter().enumerate() {
        let br = &b.branch;
        let tr = &b.trunk;
        for (l, &p) in br.s_points.iter().enumerate() {
            out.s_points[blk * pl + l] = p;
        }
        for j in 0..tr.n_j() {
            let gj = blk * pj + j;
            out.w_vec[gj] = tr.w[j];
            out.zeta[gj] = tr.zeta[j];
            for k in 0..br.n_k() {
                let gk = blk * pk + k;
                out.alpha[gj * nk + gk] = tr.c[j] * br.c[k];
                out.theta[gj * nk + gk] = br.theta[k];
                for l in 0..br.n_l() {
                    out.w[(gj * nk + gk) * nl + blk * pl + l] = br.w[k * br.n_l() + l];
                }
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let den: f64 = b.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1e-300);
        num / den
    }

    fn random_block(rng: &mut ChaCha8Rng, nk: usize, nl: usize, nj: usize) -> SurrogateBlock {
        let act = ActivationKind::Logistic;
        SurrogateBlock {
            branch: BranchCoeffs {
                c: (0..nk).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                w: (0..nk * nl).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                theta: (0..nk).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                s_points: (0..nl).map(|_| rng.gen_range(0.0..1.0)).collect(),
                activation: act,
            },
            trunk: TrunkCoeffs {
                c: (0..nj).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                w: (0..nj).map(|_| rng.gen_range(-10.0..10.0)).collect(),
                zeta: (0..nj).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                activation: act,
            },
        }
    }

    fn probe(rng: &mut ChaCha8Rng) -> GridFunction {
        let a = rng.gen_range(-1.0..1.0);
        let b = rng.gen_range(0.5..3.0);
        GridFunction::from_fn(40, move |s| 1.0 + a * (b * s).sin())
    }

    const TS: [f64; 6] = [0.0, 0.1, 0.33, 0.5, 0.77, 1.0];

    #[test]
    fn trivial_nets() {
        let act = ActivationKind::Logistic;
        let b = BranchCoeffs {
            c: vec![1.0],
            w: vec![0.0],
            theta: vec![0.0],
            s_points: vec![0.5],
            activation: act,
        };
        assert_eq!(eval_branch(&b, &[3.0]).unwrap(), 0.5);
        assert!(eval_branch(&b, &[3.0, 1.0]).is_err());
        let zero = BranchCoeffs {
            c: vec![0.0; 3],
            ..b.clone()
        };
        let zero = BranchCoeffs {
            w: vec![0.5; 3],
            theta: vec![0.1; 3],
            ..zero
        };
        assert_eq!(eval_branch(&zero, &[2.0]).unwrap(), 0.0);
        let t = TrunkCoeffs {
            c: vec![2.0],
            w: vec![0.0],
            zeta: vec![0.0],
            activation: act,
        };
        assert_eq!(eval_trunk(&t, 0.3), 1.0);
        let tz = TrunkCoeffs { c: vec![0.0], ..t };
        assert_eq!(eval_trunk(&tz, 0.3), 0.0);
    }

    #[test]
    fn single_term_is_quarter() {
        let mut c = NeuralOperatorCoeffs::zeros(1, 1, 1, ActivationKind::Logistic);
        c.alpha[0] = 1.0;
        let x = GridFunction::constant(4, 2.0);
        let v = eval_neural_operator(&c, &x, &TS).unwrap();
        assert!(v.iter().all(|&y| y == 0.25));
        c.alpha[0] = 0.0;
        let v = eval_neural_operator(&c, &x, &TS).unwrap();
        assert!(v.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn count_formula() {
        let c = NeuralOperatorCoeffs::zeros(3, 4, 5, ActivationKind::Logistic);
        assert_eq!(c.coefficient_count(), 3 * (4 * 7 + 3));
    }

    #[test]
    fn bad_dimensions_rejected() {
        let mut c = NeuralOperatorCoeffs::zeros(2, 2, 2, ActivationKind::Logistic);
        c.alpha.pop();
        let x = GridFunction::zeros(4);
        assert!(matches!(
            eval_neural_operator(&c, &x, &TS),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn flatten_single_block_is_reindexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = StructuredSurrogateCoeffs::new(
            vec![random_block(&mut rng, 3, 4, 5)],
            ActivationKind::Logistic,
        )
        .unwrap();
        let f = flatten_structured(&s).unwrap();
        assert_eq!((f.n_j, f.n_k, f.n_l), (5, 3, 4));
        let b = &s.blocks[0];
        for j in 0..5 {
            for k in 0..3 {
                assert_eq!(f.alpha[j * 3 + k], b.trunk.c[j] * b.branch.c[k]);
                assert_eq!(f.theta[j * 3 + k], b.branch.theta[k]);
            }
        }
    }

    #[test]
    fn flatten_matches_nested() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..=3 {
            let blocks = (0..n).map(|_| random_block(&mut rng, 4, 5, 6)).collect();
            let s = StructuredSurrogateCoeffs::new(blocks, ActivationKind::Logistic).unwrap();
            let f = flatten_structured(&s).unwrap();
            for _ in 0..5 {
                let x = probe(&mut rng);
                let nested = s.eval_nested(&x, &TS).unwrap();
                let flat = eval_neural_operator(&f, &x, &TS).unwrap();
                assert!(rel(&flat, &nested) <= 1e-12);
            }
        }
    }

    #[test]
    fn ragged_blocks_are_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blocks = vec![
            random_block(&mut rng, 2, 3, 4),
            random_block(&mut rng, 5, 2, 7),
        ];
        let s = StructuredSurrogateCoeffs::new(blocks, ActivationKind::Logistic).unwrap();
        let f = flatten_structured(&s).unwrap();
        assert_eq!((f.n_j, f.n_k, f.n_l), (14, 10, 6));
        let x = probe(&mut rng);
        let nested = s.eval_nested(&x, &TS).unwrap();
        let flat = eval_neural_operator(&f, &x, &TS).unwrap();
        assert!(rel(&flat, &nested) <= 1e-12);
    }

    #[test]
    fn linear_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = StructuredSurrogateCoeffs::new(
            vec![
                random_block(&mut rng, 3, 3, 3),
                random_block(&mut rng, 3, 3, 3),
            ],
            ActivationKind::Logistic,
        )
        .unwrap();
        let f1 = flatten_structured(&s).unwrap();
        let mut f2 = f1.clone();
        for a in f2.alpha.iter_mut() {
            *a = rng.gen_range(-1.0..1.0);
        }
        let (a, b) = (0.7, -1.3);
        let mut f3 = f1.clone();
        for i in 0..f3.alpha.len() {
            f3.alpha[i] = a * f1.alpha[i] + b * f2.alpha[i];
        }
        let x = probe(&mut rng);
        let y1 = eval_neural_operator(&f1, &x, &TS).unwrap();
        let y2 = eval_neural_operator(&f2, &x, &TS).unwrap();
        let y3 = eval_neural_operator(&f3, &x, &TS).unwrap();
        let comb: Vec<f64> = y1.iter().zip(&y2).map(|(p, q)| a * p + b * q).collect();
        assert!(rel(&y3, &comb) <= 1e-12);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = StructuredSurrogateCoeffs::new(
            vec![
                random_block(&mut rng, 2, 3, 2),
                random_block(&mut rng, 3, 3, 4),
            ],
            ActivationKind::Logistic,
        )
        .unwrap();
        let f = flatten_structured(&s).unwrap();
        let text = f.to_doc().to_text();
        let back = NeuralOperatorCoeffs::from_doc(&TextDoc::parse(&text).unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_doc().to_text(), text);
        let st =
            StructuredSurrogateCoeffs::from_doc(&TextDoc::parse(&s.to_doc().to_text()).unwrap())
                .unwrap();
        assert_eq!(st, s);
    }
}
