//! Supervised training pairs and their centered form.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{solve_forward_reference, ProblemKind};
use crate::grid::{GridFunction, SpaceKind};
use crate::textfmt::TextDoc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbationMode {
    /// `sqrt(2) sin(l pi s)`, l = 1..N.
    SineModes,
    /// `(1 - r^2)^3` bumps, `r = (s - c_l) / width`, with seeded centers.
    SmoothBumps,
}

impl PerturbationMode {
    pub fn name(self) -> &'static str {
        match self {
            PerturbationMode::SineModes => "sine",
            PerturbationMode::SmoothBumps => "bumps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sine" | "sinemodes" => Ok(PerturbationMode::SineModes),
            "bumps" | "smoothbumps" => Ok(PerturbationMode::SmoothBumps),
            other => Err(Error::Parse(format!("unknown perturbation mode '{other}'"))),
        }
    }

    /// Upper bound of `|phi_l|` over [0, 1].
    pub fn sup_norm(self) -> f64 {
        match self {
            PerturbationMode::SineModes => std::f64::consts::SQRT_2,
            PerturbationMode::SmoothBumps => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub mode: PerturbationMode,
    pub amplitude: f64,
    pub count: usize,
    pub seed: u64,
}

/// The perturbation shapes `phi_1..phi_N` sampled on `n_cells`.
pub fn perturbation_shapes(spec: &PerturbationSpec, n_cells: usize) -> Vec<GridFunction> {
    let n = spec.count;
    match spec.mode {
        PerturbationMode::SineModes => (1..=n)
            .map(|l| {
                GridFunction::from_fn(n_cells, |s| {
                    std::f64::consts::SQRT_2 * (l as f64 * std::f64::consts::PI * s).sin()
                })
            })
            .collect(),
        PerturbationMode::SmoothBumps => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let width = 1.5 / n as f64;
            (0..n)
                .map(|l| {
                    let jitter: f64 = rng.gen_range(-0.25..0.25);
                    let c = (l as f64 + 0.5 + jitter) / n as f64;
                    GridFunction::from_fn(n_cells, |s| {
                        let r = (s - c) / width;
                        if r.abs() < 1.0 {
                            (1.0 - r * r).powi(3)
                        } else {
                            0.0
                        }
                    })
                })
                .collect()
        }
    }
}

/// Determinant of the Gram matrix of the normalized `images`; scale free and
/// in `[0, 1]`, with 0 meaning linear dependence.
pub fn normalized_gram_determinant(images: &[GridFunction], space: SpaceKind) -> Result<f64> {
    let n = images.len();
    let norms: Vec<f64> = images.iter().map(|x| space.norm(x)).collect();
    if norms.contains(&0.0) {
        return Ok(0.0);
    }
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = space.inner(&images[i], &images[j])? / (norms[i] * norms[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g.determinant())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// `(x_hat_l, y_hat_l)` for l = 0..N; index 0 is the center.
    pub pairs: Vec<(GridFunction, GridFunction)>,
    pub problem: ProblemKind,
    pub space: SpaceKind,
    pub seed: u64,
    pub perturbation: PerturbationSpec,
    pub f: GridFunction,
}

impl TrainingSet {
    pub fn rank(&self) -> usize {
        self.pairs.len() - 1
    }

    pub fn to_doc(&self) -> TextDoc {
        let mut d = TextDoc::new("training_set");
        d.set("problem", self.problem.name());
        d.set_f64("nu", self.problem.nu);
        d.set("space", self.space.name());
        d.set("seed", self.seed);
        d.set("perturbation", self.perturbation.mode.name());
        d.set_f64("amplitude", self.perturbation.amplitude);
        d.set("count", self.perturbation.count);
        d.set("perturbation_seed", self.perturbation.seed);
        d.set("x_normalization", "sqrt2");
        let n = self.pairs[0].0.n_cells();
        d.push_array("f", &[self.f.n_cells() + 1], self.f.values().to_vec());
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, y) in &self.pairs {
            xs.extend_from_slice(x.values());
            ys.extend_from_slice(y.values());
        }
        d.push_array("x_hat", &[self.pairs.len(), n + 1], xs);
        d.push_array("y_hat", &[self.pairs.len(), n + 1], ys);
        d
    }

    pub fn from_doc(d: &TextDoc) -> Result<Self> {
        d.expect_kind("training_set")?;
        let tag = ProblemKind::parse_tag(d.get("problem")?)?;
        let problem = ProblemKind::new(tag, d.get_parsed("nu")?)?;
        let x = d.array("x_hat")?;
        let y = d.array("y_hat")?;
        if x.dims.len() != 2 || x.dims != y.dims {
            return Err(Error::Parse("x_hat/y_hat dimensions disagree".into()));
        }
        let width = x.dims[1];
        let pairs = x
            .data
            .chunks(width)
            .zip(y.data.chunks(width))
            .map(|(a, b)| {
                Ok((
                    GridFunction::new(a.to_vec())?,
                    GridFunction::new(b.to_vec())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        if pairs.len() < 2 {
            return Err(Error::Parse(
                "training set needs a center and at least one pair".into(),
            ));
        }
        Ok(TrainingSet {
            pairs,
            problem,
            space: SpaceKind::parse(d.get("space")?)?,
            seed: d.get_parsed("seed")?,
            perturbation: PerturbationSpec {
                mode: PerturbationMode::parse(d.get("perturbation")?)?,
                amplitude: d.get_parsed("amplitude")?,
                count: d.get_parsed("count")?,
                seed: d.get_parsed("perturbation_seed")?,
            },
            f: GridFunction::new(d.array("f")?.data.clone())?,
        })
    }
}

/// `x_hat_0 = center_x`, `x_hat_l = center_x + amplitude * phi_l`, with
/// `y_hat_l` from the reference operator.
pub fn generate_training_set(
    problem: ProblemKind,
    f: &GridFunction,
    center_x: &GridFunction,
    perturbation: PerturbationSpec,
) -> Result<TrainingSet> {
    if perturbation.count == 0 {
        return Err(Error::ConfigInvalid("training set needs count >= 1".into()));
    }
    let margin = center_x.min() - problem.nu;
    let reach = perturbation.amplitude.abs() * perturbation.mode.sup_norm();
    if reach > margin {
        return Err(Error::NonAdmissiblePerturbation {
            amplitude: reach,
            margin,
        });
    }
    let space = problem.space();
    let shapes = perturbation_shapes(&perturbation, center_x.n_cells());
    let mut xs = vec![center_x.clone()];
    for phi in &shapes {
        xs.push(center_x.axpy(perturbation.amplitude, phi)?);
    }
    let centered = xs[1..]
        .iter()
        .map(|x| x.sub(center_x))
        .collect::<Result<Vec<_>>>()?;
    let det = normalized_gram_determinant(&centered, space)?;
    if !(det > 1e-12) {
        return Err(Error::DependentImages(format!(
            "normalized Gram determinant {det:e}"
        )));
    }
    let ys = xs
        .par_iter()
        .map(|x| solve_forward_reference(problem, x, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        pairs: xs.into_iter().zip(ys).collect(),
        problem,
        space,
        seed: perturbation.seed,
        perturbation,
        f: f.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenteredTrainingSet {
    /// `(x_l, y_l)` for l = 1..N.
    pub pairs: Vec<(GridFunction, GridFunction)>,
    pub center: (GridFunction, GridFunction),
}

impl CenteredTrainingSet {
    pub fn images(&self) -> Vec<GridFunction> {
        self.pairs.iter().map(|p| p.0.clone()).collect()
    }

    pub fn data(&self) -> Vec<GridFunction> {
        self.pairs.iter().map(|p| p.1.clone()).collect()
    }

    /// Adds the center back.
    pub fn uncenter(&self) -> Result<Vec<(GridFunction, GridFunction)>> {
        let mut out = vec![self.center.clone()];
        for (x, y) in &self.pairs {
            out.push((x.add(&self.center.0)?, y.add(&self.center.1)?));
        }
        Ok(out)
    }
}

pub fn center_training_set(s: &TrainingSet) -> Result<CenteredTrainingSet> {
    center_pairs(&s.pairs)
}

pub fn center_pairs(pairs: &[(GridFunction, GridFunction)]) -> Result<CenteredTrainingSet> {
    if pairs.len() < 2 {
        return Err(Error::ConfigInvalid(
            "need at least one pair besides the center".into(),
        ));
    }
    let (x0, y0) = &pairs[0];
    let centered = pairs[1..]
        .iter()
        .map(|(x, y)| Ok((x.sub(x0)?, y.sub(y0)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CenteredTrainingSet {
        pairs: centered,
        center: (x0.clone(), y0.clone()),
    })
}
