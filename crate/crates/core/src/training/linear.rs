//! Orthonormalization of training images and the rank-N linear surrogate.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{ProblemKind, ReferenceMap};
use crate::grid::{GridFunction, SpaceKind};
use crate::textfmt::TextDoc;

use super::set::CenteredTrainingSet;

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Returns the orthonormal basis and the lower-triangular `T` with
/// `basis_i = sum_j T[i, j] images_j`.
pub fn gram_schmidt(
    images: &[GridFunction],
    space: SpaceKind,
) -> Result<(Vec<GridFunction>, DMatrix<f64>)> {
    let n = images.len();
    let mut basis: Vec<GridFunction> = Vec::with_capacity(n);
    let mut t = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        if i > 0 {
            images[i].same_mesh(&images[0])?;
        }
        let input_norm = space.norm(&images[i]);
        let mut v = images[i].values().to_vec();
        let mut coef = vec![0.0; n];
        coef[i] = 1.0;
        for _pass in 0..2 {
            for j in 0..i {
                let c = space.inner_raw(&v, basis[j].values());
                for (vi, bj) in v.iter_mut().zip(basis[j].values()) {
                    *vi -= c * bj;
                }
                for m in 0..=j {
                    coef[m] -= c * t[(j, m)];
                }
            }
        }
        let norm = space.inner_raw(&v, &v).max(0.0).sqrt();
        if !(norm >= 1e-10 * input_norm) || norm == 0.0 {
            return Err(Error::DependentImages(format!(
                "image {i}: residual norm {norm:e} against input norm {input_norm:e}"
            )));
        }
        for m in 0..=i {
            t[(i, m)] = coef[m] / norm;
        }
        basis.push(GridFunction::new(
            v.into_iter().map(|x| x / norm).collect(),
        )?);
    }
    Ok((basis, t))
}

/// `x -> sum_l <x, basis_l> induced_l`, optionally shifted by a center pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub basis: Vec<GridFunction>,
    pub induced: Vec<GridFunction>,
    pub transform: DMatrix<f64>,
    pub space: SpaceKind,
    /// `(x_hat_0, y_hat_0)` of the training set.
    pub center: (GridFunction, GridFunction),
}

impl LinearSurrogate {
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn x_cells(&self) -> usize {
        self.basis[0].n_cells()
    }

    pub fn y_cells(&self) -> usize {
        self.induced[0].n_cells()
    }

    /// Coordinates `<x, basis_l>_space`, resampling `x` if needed.
    pub fn coordinates(&self, x: &GridFunction) -> Vec<f64> {
        let x = x.resample(self.x_cells());
        self.basis
            .iter()
            .map(|b| self.space.inner_raw(x.values(), b.values()))
            .collect()
    }

    /// `sum_l c_l induced_l`.
    pub fn combine(&self, c: &[f64]) -> GridFunction {
        let mut out = vec![0.0; self.y_cells() + 1];
        for (cl, y) in c.iter().zip(&self.induced) {
            for (o, v) in out.iter_mut().zip(y.values()) {
                *o += cl * v;
            }
        }
        GridFunction::new(out).expect("finite combination")
    }

    /// `y_hat_0 + F#(x - x_hat_0)`.
    pub fn apply_centered(&self, x: &GridFunction) -> Result<GridFunction> {
        let d = x.resample(self.x_cells()).sub(&self.center.0)?;
        self.center.1.add(&apply_linear_surrogate(self, &d))
    }

    pub fn to_doc(&self) -> TextDoc {
        let mut d = TextDoc::new("linear_surrogate");
        d.set("space", self.space.name());
        d.set("rank", self.rank());
        let n = self.rank();
        let flat = |v: &[GridFunction]| {
            v.iter()
                .flat_map(|g| g.values().to_vec())
                .collect::<Vec<_>>()
        };
        d.push_array("basis", &[n, self.x_cells() + 1], flat(&self.basis));
        d.push_array("induced", &[n, self.y_cells() + 1], flat(&self.induced));
        let t: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| self.transform[(i, j)])
            .collect();
        d.push_array("transform", &[n, n], t);
        d.push_array(
            "center_x",
            &[self.x_cells() + 1],
            self.center.0.values().to_vec(),
        );
        d.push_array(
            "center_y",
            &[self.y_cells() + 1],
            self.center.1.values().to_vec(),
        );
        d
    }

    pub fn from_doc(d: &TextDoc) -> Result<Self> {
        d.expect_kind("linear_surrogate")?;
        let rows = |name: &str| -> Result<Vec<GridFunction>> {
            let a = d.array(name)?;
            if a.dims.len() != 2 {
                return Err(Error::Parse(format!("'{name}' must be two-dimensional")));
            }
            a.data
                .chunks(a.dims[1])
                .map(|c| GridFunction::new(c.to_vec()))
                .collect()
        };
        let basis = rows("basis")?;
        let induced = rows("induced")?;
        let n = basis.len();
        let t = d.array_dims("transform", &[n, n])?;
        Ok(LinearSurrogate {
            basis,
            induced,
            transform: DMatrix::from_row_slice(n, n, t),
            space: SpaceKind::parse(d.get("space")?)?,
            center: (
                GridFunction::new(d.array("center_x")?.data.clone())?,
                GridFunction::new(d.array("center_y")?.data.clone())?,
            ),
        })
    }
}

/// Orthonormalizes the centered images and applies the same transform rows
/// to the centered data.
pub fn build_linear_surrogate(
    c: &CenteredTrainingSet,
    space: SpaceKind,
) -> Result<LinearSurrogate> {
    let images = c.images();
    let (basis, transform) = gram_schmidt(&images, space)?;
    let data = c.data();
    let induced = (0..basis.len())
        .map(|i| {
            let mut out = vec![0.0; data[0].n_cells() + 1];
            for j in 0..=i {
                let w = transform[(i, j)];
                for (o, v) in out.iter_mut().zip(data[j].values()) {
                    *o += w * v;
                }
            }
            GridFunction::new(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearSurrogate {
        basis,
        induced,
        transform,
        space,
        center: c.center.clone(),
    })
}

pub fn apply_linear_surrogate(s: &LinearSurrogate, x: &GridFunction) -> GridFunction {
    s.combine(&s.coordinates(x))
}

/// Orthogonal L2 projector onto the span of a set of functions.
#[derive(Debug, Clone)]
pub struct Projector {
    onb: Vec<GridFunction>,
}

impl Projector {
    /// Directions whose residual falls below `1e-12` of their norm are
    /// skipped, so nearly dependent spans are handled.
    pub fn onto(span: &[GridFunction]) -> Self {
        let mut onb: Vec<GridFunction> = Vec::new();
        for g in span {
            let n0 = SpaceKind::L2.norm(g);
            if n0 == 0.0 {
                continue;
            }
            let mut v = g.values().to_vec();
            for _ in 0..2 {
                for b in &onb {
                    let c = SpaceKind::L2.inner_raw(&v, b.values());
                    for (vi, bi) in v.iter_mut().zip(b.values()) {
                        *vi -= c * bi;
                    }
                }
            }
            let nv = SpaceKind::L2.inner_raw(&v, &v).sqrt();
            if nv > 1e-12 * n0 {
                onb.push(
                    GridFunction::new(v.into_iter().map(|x| x / nv).collect()).expect("finite"),
                );
            }
        }
        Projector { onb }
    }

    pub fn rank(&self) -> usize {
        self.onb.len()
    }

    pub fn apply(&self, y: &GridFunction) -> GridFunction {
        let mut out = vec![0.0; y.n_cells() + 1];
        for b in &self.onb {
            let c = SpaceKind::L2.inner_raw(y.values(), b.values());
            for (o, v) in out.iter_mut().zip(b.values()) {
                *o += c * v;
            }
        }
        GridFunction::new(out).expect("finite")
    }

    /// `(I - P) y`.
    pub fn residual(&self, y: &GridFunction) -> GridFunction {
        y.sub(&self.apply(y)).expect("same mesh")
    }
}

/// Sampled estimate of the rank-N projection error
/// `max_p ||(I - P_N)(F[p] - F[x_hat_0])||_L2 / ||p - x_hat_0||_X`.
pub fn estimate_nu_n(
    ls: &LinearSurrogate,
    problem: ProblemKind,
    f: &GridFunction,
    probes: &[GridFunction],
) -> Result<f64> {
    estimate_nu_n_for(ls, ReferenceMap::Forward, problem, f, probes)
}

/// [`estimate_nu_n`] with `F` replaced by the given reference map.
pub fn estimate_nu_n_for(
    ls: &LinearSurrogate,
    map: ReferenceMap,
    problem: ProblemKind,
    f: &GridFunction,
    probes: &[GridFunction],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    let proj = Projector::onto(&ls.induced);
    let x0 = &ls.center.0;
    let y0 = map.apply(problem, f, x0, x0)?.resample(ls.y_cells());
    let ratios = probes
        .par_iter()
        .map(|p| {
            let p = p.resample(ls.x_cells());
            let dx = ls.space.norm(&p.sub(x0)?);
            if dx == 0.0 {
                return Ok(0.0);
            }
            let dy = map
                .apply(problem, f, x0, &p)?
                .resample(ls.y_cells())
                .sub(&y0)?;
            Ok(SpaceKind::L2.norm(&proj.residual(&dy)) / dx)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}
