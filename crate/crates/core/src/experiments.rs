//! Rate studies: FEM convergence, surrogate error, regularization rates and
//! mollification, driven by INI-style configs and written as CSV.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ini::Ini;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::forward::{
    adjoint_apply, solve_forward_fem, solve_forward_reference, ProblemKind, ProblemTag,
    ReferenceMap, N_REF,
};
use crate::grid::{GridFunction, SpaceKind};
use crate::mollify::mollification_report;
use crate::regularize::{
    add_noise, choose_parameters, minimize_tikhonov, RegularizationRun, SurrogateHandle,
    TikhonovConfig, RUN_CSV_HEADER,
};
use crate::textfmt::TextDoc;
use crate::training::{
    assemble_neural_surrogate, build_linear_surrogate, center_training_set, generate_training_set,
    random_span_probes, AssembleOptions, BranchMode, LinearSurrogate, NeuralSurrogate,
    PerturbationMode, PerturbationSpec, Projector, TrainingSet,
};

pub const RATE_CSV_HEADER: [&str; 7] = [
    "study",
    "problem",
    "parameter",
    "value",
    "error",
    "secondary",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    FemRate,
    SurrogateError,
    RegRate,
    MollifyRate,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::FemRate => "fem_rate",
            StudyKind::SurrogateError => "surrogate_error",
            StudyKind::RegRate => "reg_rate",
            StudyKind::MollifyRate => "mollify_rate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fem_rate" | "femrate" => Ok(StudyKind::FemRate),
            "surrogate_error" | "surrogateerror" => Ok(StudyKind::SurrogateError),
            "reg_rate" | "regrate" => Ok(StudyKind::RegRate),
            "mollify_rate" | "mollifyrate" => Ok(StudyKind::MollifyRate),
            other => Err(Error::ConfigInvalid(format!("unknown study '{other}'"))),
        }
    }
}

/// Forward problems with closed-form solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticCase {
    /// `x = 1`, `f = pi^2 sin(pi s)`, `y = sin(pi s)`.
    SineDiffusion,
    /// `x = 1 + s`, `f = 1 + 4 s`, `y = s (1 - s)`.
    VariableDiffusion,
    /// `x = 1`, `f = (pi^2 + 1) sin(pi s)`, `y = sin(pi s)`.
    SineReaction,
}

impl AnalyticCase {
    pub const ALL: [AnalyticCase; 3] = [
        AnalyticCase::SineDiffusion,
        AnalyticCase::VariableDiffusion,
        AnalyticCase::SineReaction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalyticCase::SineDiffusion => "sine-a",
            AnalyticCase::VariableDiffusion => "variable-a",
            AnalyticCase::SineReaction => "sine-c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown analytic case '{s}'")))
    }

    pub fn problem(self) -> ProblemKind {
        match self {
            AnalyticCase::SineReaction => ProblemKind::c_example(0.5),
            _ => ProblemKind::a_example(0.5),
        }
    }

    pub fn coefficient(self, s: f64) -> f64 {
        match self {
            AnalyticCase::VariableDiffusion => 1.0 + s,
            _ => 1.0,
        }
    }

    pub fn load(self, s: f64) -> f64 {
        match self {
            AnalyticCase::SineDiffusion => PI * PI * (PI * s).sin(),
            AnalyticCase::VariableDiffusion => 1.0 + 4.0 * s,
            AnalyticCase::SineReaction => (PI * PI + 1.0) * (PI * s).sin(),
        }
    }

    pub fn solution(self, s: f64) -> f64 {
        match self {
            AnalyticCase::VariableDiffusion => s * (1.0 - s),
            _ => (PI * s).sin(),
        }
    }

    /// `||y_n - y||_L2` on the `n`-cell mesh.
    pub fn fem_error(self, n: usize) -> Result<f64> {
        let x = GridFunction::from_fn(n, |s| self.coefficient(s));
        let f = GridFunction::from_fn(n, |s| self.load(s));
        let y = solve_forward_fem(self.problem(), &x, &f, n)?;
        Ok(y.l2_error_against(|s| self.solution(s)))
    }
}

/// Shape of the source element `omega` in `x_true - x0 = F'(x0)* omega`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceShape {
    Step,
    Kink,
    Sine,
}

impl SourceShape {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "step" => Ok(SourceShape::Step),
            "kink" => Ok(SourceShape::Kink),
            "sine" => Ok(SourceShape::Sine),
            other => Err(Error::ConfigInvalid(format!(
                "unknown source shape '{other}'"
            ))),
        }
    }

    pub fn eval(self, s: f64) -> f64 {
        match self {
            SourceShape::Step => {
                if s < 0.4 {
                    1.0
                } else {
                    -1.0
                }
            }
            SourceShape::Kink => (s - 0.4).abs(),
            SourceShape::Sine => (PI * s).sin() + 0.5 * (2.0 * PI * s).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    Fem,
    Neural,
    Linear,
}

impl SurrogateKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "fem" => Ok(SurrogateKind::Fem),
            "neural" => Ok(SurrogateKind::Neural),
            "linear" => Ok(SurrogateKind::Linear),
            other => Err(Error::ConfigInvalid(format!("unknown surrogate '{other}'"))),
        }
    }
}

/// Inputs for the mollification study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MollifyInput {
    SineSquared,
    Sine,
    Step,
}

impl MollifyInput {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "sin2" => Ok(MollifyInput::SineSquared),
            "sine" => Ok(MollifyInput::Sine),
            "step" => Ok(MollifyInput::Step),
            other => Err(Error::ConfigInvalid(format!(
                "unknown mollify input '{other}'"
            ))),
        }
    }

    pub fn eval(self, s: f64) -> f64 {
        match self {
            MollifyInput::SineSquared => (PI * s).sin().powi(2),
            MollifyInput::Sine => (PI * s).sin(),
            MollifyInput::Step => {
                if s > 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSection {
    pub problem: ProblemKind,
    pub n: usize,
    /// Constant load `f`.
    pub load: f64,
    /// Constant prior `x0`.
    pub center: f64,
    /// Sup norm of `x_true - x0`.
    pub truth_amplitude: f64,
    pub source: SourceShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSection {
    pub kind: SurrogateKind,
    pub rank: usize,
    /// Defaults to the problem mesh size.
    pub n_k: Option<usize>,
    pub n_j: usize,
    pub activation: ActivationKind,
    pub mode: BranchMode,
    pub training_amplitude: f64,
    pub perturbation: PerturbationMode,
    pub rescale_pad: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationSection {
    pub constant: f64,
    pub xi: f64,
    pub max_iterations: usize,
    /// Noise level for single solves.
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ladders {
    pub n: Vec<usize>,
    pub rank: Vec<usize>,
    pub n_k: Vec<usize>,
    pub n_j: Vec<usize>,
    pub delta: Vec<f64>,
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub jobs: Option<usize>,
    /// FEM study case; `None` compares against the reference solver.
    pub case: Option<AnalyticCase>,
    pub mollify_input: MollifyInput,
    pub problem: ProblemSection,
    pub surrogate: SurrogateSection,
    pub regularization: RegularizationSection,
    pub ladders: Ladders,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            study: StudyKind::FemRate,
            seed: 1,
            output: None,
            jobs: None,
            case: Some(AnalyticCase::SineDiffusion),
            mollify_input: MollifyInput::SineSquared,
            problem: ProblemSection {
                problem: ProblemKind::a_example(0.5),
                n: 128,
                load: 1.0,
                center: 1.0,
                truth_amplitude: 0.3,
                source: SourceShape::Step,
            },
            surrogate: SurrogateSection {
                kind: SurrogateKind::Fem,
                rank: 8,
                n_k: None,
                n_j: 24,
                activation: ActivationKind::Logistic,
                mode: BranchMode::Adaptive,
                training_amplitude: 0.05,
                perturbation: PerturbationMode::SineModes,
                rescale_pad: 2.0,
                probes: 8,
            },
            regularization: RegularizationSection {
                constant: 1.0,
                xi: 0.0,
                max_iterations: 100_000,
                delta: 1e-3,
            },
            ladders: Ladders::default(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::ConfigInvalid(format!("{key}: cannot parse '{s}'")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::ConfigInvalid(format!("{key}: cannot parse '{v}'")))
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0]) || v.windows(2).all(|w| w[1] < w[0])
}

impl StudyConfig {
    /// Parses `key = value` lines grouped in `[section]`s; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        let mut entries: BTreeMap<(String, String), String> = BTreeMap::new();
        for (sec, props) in ini.iter() {
            let sec = sec.unwrap_or("").to_string();
            for (k, v) in props.iter() {
                entries.insert((sec.clone(), k.trim().to_string()), v.trim().to_string());
            }
        }
        let mut cfg = StudyConfig::default();
        let mut tag = ProblemTag::AExample;
        let mut nu = 0.5;
        for ((sec, key), v) in &entries {
            let k = format!("{sec}.{key}");
            match (sec.as_str(), key.as_str()) {
                ("study", "kind") => cfg.study = StudyKind::parse(v)?,
                ("study", "seed") => cfg.seed = parse_one(&k, v)?,
                ("study", "output") => cfg.output = Some(PathBuf::from(v)),
                ("study", "jobs") => cfg.jobs = Some(parse_one(&k, v)?),
                ("study", "case") => {
                    cfg.case = if v == "reference" {
                        None
                    } else {
                        Some(AnalyticCase::parse(v)?)
                    }
                }
                ("study", "input") => cfg.mollify_input = MollifyInput::parse(v)?,
                ("problem", "kind") => {
                    tag = ProblemKind::parse_tag(v)
                        .map_err(|e| Error::ConfigInvalid(e.to_string()))?
                }
                ("problem", "nu") => nu = parse_one(&k, v)?,
                ("problem", "n") => cfg.problem.n = parse_one(&k, v)?,
                ("problem", "load") => cfg.problem.load = parse_one(&k, v)?,
                ("problem", "center") => cfg.problem.center = parse_one(&k, v)?,
                ("problem", "truth_amplitude") => cfg.problem.truth_amplitude = parse_one(&k, v)?,
                ("problem", "source") => cfg.problem.source = SourceShape::parse(v)?,
                ("surrogate", "kind") => cfg.surrogate.kind = SurrogateKind::parse(v)?,
                ("surrogate", "rank") => cfg.surrogate.rank = parse_one(&k, v)?,
                ("surrogate", "n_k") => cfg.surrogate.n_k = Some(parse_one(&k, v)?),
                ("surrogate", "n_j") => cfg.surrogate.n_j = parse_one(&k, v)?,
                ("surrogate", "activation") => {
                    cfg.surrogate.activation =
                        ActivationKind::parse(v).map_err(|e| Error::ConfigInvalid(e.to_string()))?
                }
                ("surrogate", "mode") => {
                    cfg.surrogate.mode =
                        BranchMode::parse(v).map_err(|e| Error::ConfigInvalid(e.to_string()))?
                }
                ("surrogate", "training_amplitude") => {
                    cfg.surrogate.training_amplitude = parse_one(&k, v)?
                }
                ("surrogate", "perturbation") => {
                    cfg.surrogate.perturbation = PerturbationMode::parse(v)
                        .map_err(|e| Error::ConfigInvalid(e.to_string()))?
                }
                ("surrogate", "rescale_pad") => cfg.surrogate.rescale_pad = parse_one(&k, v)?,
                ("surrogate", "probes") => cfg.surrogate.probes = parse_one(&k, v)?,
                ("regularization", "constant") => cfg.regularization.constant = parse_one(&k, v)?,
                ("regularization", "xi") => cfg.regularization.xi = parse_one(&k, v)?,
                ("regularization", "max_iterations") => {
                    cfg.regularization.max_iterations = parse_one(&k, v)?
                }
                ("regularization", "delta") => cfg.regularization.delta = parse_one(&k, v)?,
                ("ladder", "n") => cfg.ladders.n = parse_list(&k, v)?,
                ("ladder", "rank") => cfg.ladders.rank = parse_list(&k, v)?,
                ("ladder", "n_k") => cfg.ladders.n_k = parse_list(&k, v)?,
                ("ladder", "n_j") => cfg.ladders.n_j = parse_list(&k, v)?,
                ("ladder", "delta") => cfg.ladders.delta = parse_list(&k, v)?,
                ("ladder", "xi") => cfg.ladders.xi = parse_list(&k, v)?,
                _ => return Err(Error::ConfigInvalid(format!("unknown key '{k}'"))),
            }
        }
        cfg.problem.problem =
            ProblemKind::new(tag, nu).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate_common()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks that do not depend on the study kind.
    pub fn validate_common(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        let l = &self.ladders;
        let as_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        for (name, v) in [
            ("n", as_f(&l.n)),
            ("rank", as_f(&l.rank)),
            ("n_k", as_f(&l.n_k)),
            ("n_j", as_f(&l.n_j)),
            ("delta", l.delta.clone()),
            ("xi", l.xi.clone()),
        ] {
            if !strictly_monotone(&v) {
                return bad(format!("ladder '{name}' is not strictly monotone"));
            }
            if v.iter().any(|&x| !(x > 0.0)) {
                return bad(format!("ladder '{name}' has non-positive entries"));
            }
        }
        if l.n_k.len() != l.n_j.len() {
            return bad("ladders n_k and n_j must have equal length".into());
        }
        if self.problem.n < 2 || self.surrogate.rank == 0 || self.surrogate.n_j == 0 {
            return bad("n >= 2, rank >= 1 and n_j >= 1 required".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive".into());
        }
        Ok(())
    }

    /// Common checks plus the ladder requirements of the selected study.
    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        let l = &self.ladders;
        let need = |name: &str, len: usize| {
            if len < 4 {
                Err(Error::ConfigInvalid(format!(
                    "study {} needs at least 4 points in ladder '{name}'",
                    self.study.name()
                )))
            } else {
                Ok(())
            }
        };
        match self.study {
            StudyKind::FemRate => need("n", l.n.len())?,
            StudyKind::SurrogateError => {
                if l.rank.len() < 4 && l.n_k.len() < 4 {
                    return bad("surrogate_error needs 4 points in 'rank' or in 'n_k'/'n_j'".into());
                }
                if self.surrogate.kind != SurrogateKind::Neural {
                    return bad("surrogate_error needs surrogate.kind = neural".into());
                }
            }
            StudyKind::RegRate => need("delta", l.delta.len())?,
            StudyKind::MollifyRate => {
                need("xi", l.xi.len())?;
                if l.xi.windows(2).any(|w| w[1] >= w[0]) {
                    return bad("mollify_rate needs a decreasing xi ladder".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    Flagged(String),
}

impl RowStatus {
    pub fn label(&self) -> String {
        match self {
            RowStatus::Ok => "ok".into(),
            RowStatus::Flagged(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub parameter: String,
    pub value: f64,
    pub error: f64,
    pub secondary: Vec<(String, f64)>,
    pub status: RowStatus,
}

impl RateRow {
    fn new(parameter: &str, value: f64, error: f64) -> Self {
        RateRow {
            parameter: parameter.into(),
            value,
            error,
            secondary: Vec::new(),
            status: RowStatus::Ok,
        }
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.secondary.push((key.into(), v));
        self
    }
}

#[derive(Debug, Clone)]
pub struct RateTable {
    pub study: StudyKind,
    pub problem: String,
    pub rows: Vec<RateRow>,
    /// Rows with this parameter and status ok enter the slope fit.
    pub fit_parameter: String,
    pub fitted_slope: f64,
    pub slope_stderr: f64,
    /// Individual solves of a regularization study.
    pub runs: Vec<RegularizationRun>,
    /// Header lines (pinning rule, resolution notes).
    pub notes: Vec<String>,
}

impl RateTable {
    fn finish(
        study: StudyKind,
        problem: &str,
        rows: Vec<RateRow>,
        fit_parameter: &str,
        notes: Vec<String>,
    ) -> Result<Self> {
        let mut t = RateTable {
            study,
            problem: problem.into(),
            rows,
            fit_parameter: fit_parameter.into(),
            fitted_slope: f64::NAN,
            slope_stderr: f64::NAN,
            runs: Vec::new(),
            notes,
        };
        let (s, e) = fit_slope(&t.fit_points())?;
        t.fitted_slope = s;
        t.slope_stderr = e;
        Ok(t)
    }

    pub fn fit_points(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.parameter == self.fit_parameter && r.status == RowStatus::Ok)
            .map(|r| (r.value, r.error))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RATE_CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let secondary = r
                .secondary
                .iter()
                .map(|(k, v)| format!("{k}={v:e}"))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                self.study.name().to_string(),
                self.problem.clone(),
                r.parameter.clone(),
                format!("{:e}", r.value),
                format!("{:e}", r.error),
                secondary,
                r.status.label(),
            ])
            .map_err(csv_err)?;
        }
        into_string(w)
    }

    /// Regularization runs in the documented run schema.
    pub fn runs_csv(&self) -> Result<String> {
        runs_to_csv(&self.runs)
    }

    /// Writes the study output. Regularization studies put the runs at `path`
    /// and the rate rows next to it with a `.rate.csv` suffix.
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.study == StudyKind::RegRate {
            std::fs::write(path, self.runs_csv()?)?;
            std::fs::write(rate_sibling(path), self.to_csv()?)?;
        } else {
            std::fs::write(path, self.to_csv()?)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            s.push_str(&format!("# {n}\n"));
        }
        s.push_str(&format!(
            "{} {}: slope {:.4} +- {:.4} over {} points ({})\n",
            self.study.name(),
            self.problem,
            self.fitted_slope,
            self.slope_stderr,
            self.fit_points().len(),
            self.fit_parameter
        ));
        s
    }
}

pub fn rate_sibling(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".rate.csv");
    PathBuf::from(p)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn runs_to_csv(runs: &[RegularizationRun]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RUN_CSV_HEADER).map_err(csv_err)?;
    for r in runs {
        w.write_record(r.csv_record()).map_err(csv_err)?;
    }
    into_string(w)
}

/// Least-squares slope of `log y` against `log x` and its standard error.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "need 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::DegenerateFit("points must be positive".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all abscissae equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - icpt - slope * x).powi(2))
        .sum();
    let stderr = if points.len() > 2 {
        (rss / (m - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok((slope, stderr))
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Keeps rows up to the first failure, flags that one and returns its error.
fn collect_rows(results: Vec<(RateRow, Result<()>)>) -> (Vec<RateRow>, Option<Error>) {
    let mut rows = Vec::new();
    for (mut row, res) in results {
        if let Err(e) = res {
            row.status = RowStatus::Flagged(format!("error: {e}"));
            rows.push(row);
            return (rows, Some(e));
        }
        rows.push(row);
    }
    (rows, None)
}

/// `c n^-2` with `c` calibrated from the mismatch to the reference solver at
/// 32 cells, evaluated at `x`.
pub fn fem_rho_model(
    kind: ProblemKind,
    x: &GridFunction,
    f: &GridFunction,
    n: usize,
) -> Result<f64> {
    let nc = 32;
    let coarse = solve_forward_fem(kind, x, f, nc)?.resample(N_REF);
    let fine = solve_forward_fem(kind, x, f, N_REF)?;
    let c = SpaceKind::L2.norm(&coarse.sub(&fine)?) * (nc * nc) as f64;
    Ok(c / (n * n) as f64)
}

/// Everything a regularization run needs besides the noise.
#[derive(Debug, Clone)]
pub struct ProblemSetup {
    pub kind: ProblemKind,
    pub f: GridFunction,
    pub x0: GridFunction,
    pub x_true: GridFunction,
    pub y_exact: GridFunction,
    pub handle: SurrogateHandle,
    /// Surrogate accuracy used in the parameter choice.
    pub rho: f64,
    pub linear: Option<LinearSurrogate>,
}

/// Rank-`rank` linear surrogate around `x0` from the configured training family.
pub fn build_linear(
    cfg: &StudyConfig,
    f: &GridFunction,
    x0: &GridFunction,
    rank: usize,
) -> Result<LinearSurrogate> {
    let spec = PerturbationSpec {
        mode: cfg.surrogate.perturbation,
        amplitude: cfg.surrogate.training_amplitude,
        count: rank,
        seed: cfg.seed,
    };
    let ts = generate_training_set(cfg.problem.problem, f, x0, spec)?;
    build_linear_surrogate(&center_training_set(&ts)?, ts.space)
}

/// Training set of the configured problem, rank and perturbation family.
pub fn training_set(cfg: &StudyConfig) -> Result<TrainingSet> {
    let p = &cfg.problem;
    let spec = PerturbationSpec {
        mode: cfg.surrogate.perturbation,
        amplitude: cfg.surrogate.training_amplitude,
        count: cfg.surrogate.rank,
        seed: cfg.seed,
    };
    generate_training_set(
        p.problem,
        &GridFunction::constant(p.n, p.load),
        &GridFunction::constant(p.n, p.center),
        spec,
    )
}

#[derive(Debug, Clone)]
pub enum BuiltSurrogate {
    Linear(LinearSurrogate),
    Neural(Box<NeuralSurrogate>),
}

impl BuiltSurrogate {
    pub fn to_doc(&self) -> TextDoc {
        match self {
            BuiltSurrogate::Linear(s) => s.to_doc(),
            BuiltSurrogate::Neural(s) => s.to_doc(),
        }
    }
}

/// Linear surrogate of `ts`, or the neural surrogate assembled on it when the
/// config asks for one. Neural probes lie in the input span at radius up to
/// `truth_amplitude` in the parameter norm.
pub fn build_from_training(cfg: &StudyConfig, ts: &TrainingSet) -> Result<BuiltSurrogate> {
    let ls = build_linear_surrogate(&center_training_set(ts)?, ts.space)?;
    if cfg.surrogate.kind != SurrogateKind::Neural {
        return Ok(BuiltSurrogate::Linear(ls));
    }
    let probes = random_span_probes(
        &ls,
        cfg.surrogate.probes,
        cfg.problem.truth_amplitude,
        cfg.seed ^ 0x5eed,
    );
    let n_k = cfg.surrogate.n_k.unwrap_or(ls.x_cells());
    let mut opts = neural_options(cfg, &ls, &ts.f, n_k, cfg.surrogate.n_j, probes);
    opts.problem = ts.problem;
    opts.family = ts.pairs[1..].iter().map(|p| p.0.clone()).collect();
    opts.mismatch_step = 2.0 * ts.perturbation.amplitude;
    Ok(BuiltSurrogate::Neural(Box::new(assemble_neural_surrogate(
        &ls, &opts,
    )?)))
}

/// One inverse solve at `regularization.delta` on the configured problem.
pub fn solve_once(cfg: &StudyConfig) -> Result<RegularizationRun> {
    let setup = problem_setup(cfg)?;
    regularization_run(cfg, &setup, cfg.regularization.delta, cfg.regularization.xi)
}

/// Admissible probes `x0 + a d` with `d` a seeded smooth random profile
/// (sine series with `1/l^2` decay) normalized to sup norm 1.
pub fn smooth_probes(
    x0: &GridFunction,
    amplitude: f64,
    count: usize,
    seed: u64,
) -> Vec<GridFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c: Vec<f64> = (1..=32)
                .map(|l| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z / (l * l) as f64
                })
                .collect();
            let d = GridFunction::from_fn(x0.n_cells(), |s| {
                c.iter()
                    .enumerate()
                    .map(|(l, cl)| cl * ((l + 1) as f64 * PI * s).sin())
                    .sum()
            });
            let m = d.max_abs().max(1e-300);
            x0.axpy(amplitude / m, &d).expect("same mesh")
        })
        .collect()
}

pub fn neural_options(
    cfg: &StudyConfig,
    ls: &LinearSurrogate,
    f: &GridFunction,
    n_k: usize,
    n_j: usize,
    probes: Vec<GridFunction>,
) -> AssembleOptions {
    let x0 = &ls.center.0;
    let family = crate::training::perturbation_shapes(
        &PerturbationSpec {
            mode: cfg.surrogate.perturbation,
            amplitude: cfg.surrogate.training_amplitude,
            count: ls.rank(),
            seed: cfg.seed,
        },
        x0.n_cells(),
    )
    .iter()
    .map(|phi| {
        x0.axpy(cfg.surrogate.training_amplitude, phi)
            .expect("same mesh")
    })
    .collect();
    AssembleOptions {
        n_k,
        n_j,
        activation: cfg.surrogate.activation,
        mode: cfg.surrogate.mode,
        rescale_pad: cfg.surrogate.rescale_pad,
        seed: cfg.seed,
        problem: cfg.problem.problem,
        f: f.clone(),
        family,
        probes,
        mismatch_step: 2.0 * cfg.surrogate.training_amplitude,
        reference: ReferenceMap::Forward,
    }
}

/// Builds the configured surrogate and a test problem around it:
/// `x_true = x0 + a P F'(x0)* omega / |P F'(x0)* omega|_inf`, where `P` is the
/// projector onto the surrogate's input span (identity for FEM).
pub fn problem_setup(cfg: &StudyConfig) -> Result<ProblemSetup> {
    let p = &cfg.problem;
    let kind = p.problem;
    let n = p.n;
    let f = GridFunction::constant(n, p.load);
    let x0 = GridFunction::constant(n, p.center);
    let omega = GridFunction::from_fn(n, |s| p.source.eval(s));
    let dir = adjoint_apply(kind, &x0, &omega, &f, n)?;
    let (handle, rho, linear, dir) = match cfg.surrogate.kind {
        SurrogateKind::Fem => {
            let rho = fem_rho_model(kind, &x0, &f, n)?;
            (
                SurrogateHandle::FemForward {
                    kind,
                    f: f.clone(),
                    n,
                },
                rho,
                None,
                dir,
            )
        }
        SurrogateKind::Linear | SurrogateKind::Neural => {
            let ls = build_linear(cfg, &f, &x0, cfg.surrogate.rank)?;
            let dir = Projector::onto(&ls.basis).apply(&dir);
            if cfg.surrogate.kind == SurrogateKind::Linear {
                (
                    SurrogateHandle::LinearRankN {
                        ls: ls.clone(),
                        problem: Some(kind),
                    },
                    0.0,
                    Some(ls),
                    dir,
                )
            } else {
                // probes in the input span, out to 1.5x the distance of x_true
                let radius =
                    1.5 * p.truth_amplitude * kind.space().norm(&dir) / dir.max_abs().max(1e-300);
                let probes =
                    random_span_probes(&ls, cfg.surrogate.probes, radius, cfg.seed ^ 0x5eed);
                let opts = neural_options(
                    cfg,
                    &ls,
                    &f,
                    cfg.surrogate.n_k.unwrap_or(n),
                    cfg.surrogate.n_j,
                    probes,
                );
                let s = assemble_neural_surrogate(&ls, &opts)?;
                let rho = s.diagnostics.rho_bound;
                (
                    SurrogateHandle::NeuralOperator(Box::new(s)),
                    rho,
                    Some(ls),
                    dir,
                )
            }
        }
    };
    let scale = dir.max_abs();
    if !(scale > 0.0) {
        return Err(Error::ConfigInvalid("source direction vanishes".into()));
    }
    let x_true = x0.axpy(p.truth_amplitude / scale, &dir)?;
    kind.check_admissible(&x_true)?;
    let y_exact = solve_forward_reference(kind, &x_true, &f)?;
    Ok(ProblemSetup {
        kind,
        f,
        x0,
        x_true,
        y_exact,
        handle,
        rho,
        linear,
    })
}

/// One Tikhonov solve on `setup` at noise level `delta` and width `xi`.
/// An iteration-limited solve keeps its last iterate with `converged = false`.
pub fn regularization_run(
    cfg: &StudyConfig,
    setup: &ProblemSetup,
    delta: f64,
    xi: f64,
) -> Result<RegularizationRun> {
    let start = Instant::now();
    let y_delta = add_noise(&setup.y_exact, delta, cfg.seed);
    let (alpha, eta) = choose_parameters(delta, setup.rho, cfg.regularization.constant)?;
    let space = setup.kind.space();
    let mut tc = TikhonovConfig::new(alpha, eta, setup.x0.clone(), space, setup.kind.nu);
    tc.delta = delta;
    tc.xi = xi;
    tc.max_iterations = cfg.regularization.max_iterations;
    tc.x_true = Some(setup.x_true.clone());
    tc.seed = cfg.seed;
    let (m, converged) = match minimize_tikhonov(&setup.handle, &y_delta, &tc, &setup.x0) {
        Ok(m) => (m, true),
        Err(Error::MaxIterations { best }) => (*best, false),
        Err(e) => return Err(e),
    };
    let mut run = RegularizationRun::from_minimizer(
        &setup.handle,
        m,
        converged,
        start.elapsed().as_secs_f64() * 1e3,
    );
    run.rho = Some(setup.rho);
    Ok(run)
}

fn fem_rate(cfg: &StudyConfig) -> Result<RateTable> {
    let ns = &cfg.ladders.n;
    let (name, results): (String, Vec<(RateRow, Result<()>)>) = match cfg.case {
        Some(case) => (
            format!("{}:{}", case.problem().name(), case.name()),
            ns.par_iter()
                .map(|&n| match case.fem_error(n) {
                    Ok(e) => (RateRow::new("n", n as f64, e), Ok(())),
                    Err(err) => (RateRow::new("n", n as f64, f64::NAN), Err(err)),
                })
                .collect(),
        ),
        None => {
            let p = &cfg.problem;
            let x = GridFunction::from_fn(N_REF, |s| {
                p.center + p.truth_amplitude * (PI * s).sin().powi(2)
            });
            let f = GridFunction::constant(N_REF, p.load);
            let fine = solve_forward_fem(p.problem, &x, &f, N_REF)?;
            (
                format!("{}:reference", p.problem.name()),
                ns.par_iter()
                    .map(|&n| {
                        let r = solve_forward_fem(p.problem, &x, &f, n)
                            .and_then(|y| Ok(SpaceKind::L2.norm(&y.resample(N_REF).sub(&fine)?)));
                        match r {
                            Ok(e) => (RateRow::new("n", n as f64, e), Ok(())),
                            Err(err) => (RateRow::new("n", n as f64, f64::NAN), Err(err)),
                        }
                    })
                    .collect(),
            )
        }
    };
    let (rows, err) = collect_rows(results);
    finish_or_abort(
        cfg,
        StudyKind::FemRate,
        &name,
        rows,
        "n",
        Vec::new(),
        Vec::new(),
        err,
    )
}

fn surrogate_error(cfg: &StudyConfig) -> Result<RateTable> {
    let p = &cfg.problem;
    let n = p.n;
    let f = GridFunction::constant(n, p.load);
    let x0 = GridFunction::constant(n, p.center);
    let probes = smooth_probes(
        &x0,
        p.truth_amplitude,
        cfg.surrogate.probes,
        cfg.seed ^ 0x5eed,
    );
    let exact: Vec<GridFunction> = probes
        .par_iter()
        .map(|q| solve_forward_reference(p.problem, q, &f))
        .collect::<Result<_>>()?;
    let n_k0 = cfg.surrogate.n_k.unwrap_or(n);
    let mut points: Vec<(&str, usize, usize, usize)> = cfg
        .ladders
        .rank
        .iter()
        .map(|&r| ("N", r, n_k0, cfg.surrogate.n_j))
        .collect();
    points.extend(
        cfg.ladders
            .n_k
            .iter()
            .zip(&cfg.ladders.n_j)
            .map(|(&k, &j)| ("N_k", cfg.surrogate.rank, k, j)),
    );
    let results: Vec<(RateRow, Result<()>)> = points
        .par_iter()
        .map(|&(param, rank, n_k, n_j)| {
            let value = if param == "N" {
                rank as f64
            } else {
                n_k as f64
            };
            let r = (|| -> Result<RateRow> {
                let ls = build_linear(cfg, &f, &x0, rank)?;
                let s = assemble_neural_surrogate(
                    &ls,
                    &neural_options(cfg, &ls, &f, n_k, n_j, probes.clone()),
                )?;
                let mut worst: f64 = 0.0;
                for (q, y) in probes.iter().zip(&exact) {
                    worst = worst.max(SpaceKind::L2.norm(&s.forward(q)?.sub(y)?));
                }
                let d = s.diagnostics;
                Ok(RateRow::new(param, value, worst)
                    .with("N", rank as f64)
                    .with("N_k", n_k as f64)
                    .with("N_j", n_j as f64)
                    .with("rho_bound", d.rho_bound)
                    .with("nu_N", d.nu_n)
                    .with("q_N", d.q_n)
                    .with("r_N", d.r_n))
            })();
            match r {
                Ok(row) => (row, Ok(())),
                Err(e) => (RateRow::new(param, value, f64::NAN), Err(e)),
            }
        })
        .collect();
    let (rows, err) = collect_rows(results);
    let fit = if cfg.ladders.rank.len() >= 4 {
        "N"
    } else {
        "N_k"
    };
    finish_or_abort(
        cfg,
        StudyKind::SurrogateError,
        p.problem.name(),
        rows,
        fit,
        Vec::new(),
        Vec::new(),
        err,
    )
}

fn reg_rate(cfg: &StudyConfig) -> Result<RateTable> {
    let setup = problem_setup(cfg)?;
    let deltas = &cfg.ladders.delta;
    let dmin = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    let xi = cfg.regularization.xi;
    let mut notes = vec![format!(
        "pinning: rho = {:e} {} min delta = {:e}; alpha = {} * max(delta, rho), eta = alpha^2",
        setup.rho,
        if setup.rho <= dmin { "<=" } else { ">" },
        dmin,
        cfg.regularization.constant
    )];
    if setup.rho > dmin {
        notes.push("warning: surrogate accuracy binds on part of the delta ladder".into());
    }
    let mut jobs: Vec<(f64, f64)> = deltas.iter().map(|&d| (d, xi)).collect();
    // the additive xi term, logged at the smallest noise level
    jobs.extend(
        cfg.ladders
            .xi
            .iter()
            .filter(|&&x| x != xi)
            .map(|&x| (dmin, x)),
    );
    let results: Vec<Result<RegularizationRun>> = jobs
        .par_iter()
        .map(|&(d, x)| regularization_run(cfg, &setup, d, x))
        .collect();
    let mut runs = Vec::new();
    let mut pairs = Vec::new();
    for (&(d, x), r) in jobs.iter().zip(results) {
        let param = if x == xi { "delta" } else { "xi" };
        let value = if x == xi { d } else { x };
        match r {
            Ok(run) => {
                let mut row = RateRow::new(param, value, run.error_x.unwrap_or(f64::NAN))
                    .with("delta", d)
                    .with("xi", x)
                    .with("alpha", run.alpha)
                    .with("eta", run.eta)
                    .with("iterations", run.iterations as f64)
                    .with("gradient_norm", run.gradient_norm);
                if !run.converged {
                    row.status = RowStatus::Flagged("max_iterations".into());
                }
                runs.push(run);
                pairs.push((row, Ok(())));
            }
            Err(e) => pairs.push((RateRow::new(param, value, f64::NAN), Err(e))),
        }
    }
    let (rows, err) = collect_rows(pairs);
    let problem = setup.kind.name();
    finish_or_abort(
        cfg,
        StudyKind::RegRate,
        problem,
        rows,
        "delta",
        runs,
        notes,
        err,
    )
}

fn mollify_rate(cfg: &StudyConfig) -> Result<RateTable> {
    let n = cfg.problem.n;
    let input = cfg.mollify_input;
    let x = GridFunction::from_fn(n, |s| input.eval(s));
    let report = mollification_report(&x, &cfg.ladders.xi)?;
    let rows = report
        .iter()
        .map(|r| RateRow::new("xi", r.xi, r.l2_error).with("norm_ratio", r.l2_norm_ratio))
        .collect();
    let notes = vec![format!("mesh n = {n}, zero extension outside [0, 1]")];
    RateTable::finish(StudyKind::MollifyRate, "mollify", rows, "xi", notes)
}

#[allow(clippy::too_many_arguments)]
fn finish_or_abort(
    cfg: &StudyConfig,
    study: StudyKind,
    problem: &str,
    rows: Vec<RateRow>,
    fit: &str,
    runs: Vec<RegularizationRun>,
    notes: Vec<String>,
    err: Option<Error>,
) -> Result<RateTable> {
    if let Some(e) = err {
        let partial = RateTable {
            study,
            problem: problem.into(),
            rows,
            fit_parameter: fit.into(),
            fitted_slope: f64::NAN,
            slope_stderr: f64::NAN,
            runs,
            notes,
        };
        if let Some(path) = &cfg.output {
            partial.write(path)?;
        }
        return Err(e);
    }
    let mut t = RateTable::finish(study, problem, rows, fit, notes)?;
    t.runs = runs;
    Ok(t)
}

/// Runs the configured study, writing CSV to `cfg.output` when set.
pub fn run_study(cfg: &StudyConfig) -> Result<RateTable> {
    cfg.validate()?;
    let table = in_pool(cfg.jobs, || match cfg.study {
        StudyKind::FemRate => fem_rate(cfg),
        StudyKind::SurrogateError => surrogate_error(cfg),
        StudyKind::RegRate => reg_rate(cfg),
        StudyKind::MollifyRate => mollify_rate(cfg),
    })??;
    if let Some(path) = &cfg.output {
        table.write(path)?;
    }
    Ok(table)
}

/// Reads `(value, error)` pairs of `parameter` rows with status ok from a
/// rate CSV, for recomputing the slope.
pub fn read_rate_points(text: &str, parameter: &str) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    if header != RATE_CSV_HEADER {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if &rec[2] == parameter && &rec[6] == "ok" {
            out.push((parse_one("value", &rec[3])?, parse_one("error", &rec[4])?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let (s, e) = fit_slope(&[(1.0, 1.0), (2.0, 4.0), (4.0, 16.0)]).unwrap();
        assert!((s - 2.0).abs() < 1e-14 && e.abs() < 1e-7);
        let (s, _) = fit_slope(&[(1.0, 1.0), (2.0, 1.0), (4.0, 1.0)]).unwrap();
        assert_eq!(s, 0.0);
        let pts: Vec<(f64, f64)> = [16.0, 32.0, 64.0, 128.0]
            .iter()
            .map(|&n: &f64| (n, 3.0 * n.powi(-2)))
            .collect();
        assert!((fit_slope(&pts).unwrap().0 + 2.0).abs() < 1e-12);
        assert!(matches!(
            fit_slope(&[(2.0, 1.0), (2.0, 3.0), (2.0, 5.0)]),
            Err(Error::DegenerateFit(_))
        ));
        assert!(matches!(
            fit_slope(&[(1.0, 1.0), (2.0, 2.0)]),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn config_round_trip_of_keys() {
        let text = "\
# FEM rate for one case
[study]
kind = fem_rate
case = variable-a
seed = 4

[ladder]
n = 16, 32, 64, 128
";
        let c = StudyConfig::parse(text).unwrap();
        assert_eq!(c.study, StudyKind::FemRate);
        assert_eq!(c.case, Some(AnalyticCase::VariableDiffusion));
        assert_eq!(c.seed, 4);
        assert_eq!(c.ladders.n, vec![16, 32, 64, 128]);
    }

    #[test]
    fn config_errors() {
        let short =
            StudyConfig::parse("[study]\nkind = fem_rate\n[ladder]\nn = 16, 32, 64\n").unwrap();
        assert!(matches!(short.validate(), Err(Error::ConfigInvalid(_))));
        assert!(matches!(run_study(&short), Err(Error::ConfigInvalid(_))));
        assert!(matches!(
            StudyConfig::parse("[study]\nkind = fem_rate\n[ladder]\nn = 16, 64, 32, 128\n"),
            Err(Error::ConfigInvalid(_))
        ));
        assert!(matches!(
            StudyConfig::parse(
                "[study]\nkind = fem_rate\nbogus = 1\n[ladder]\nn = 16, 32, 64, 128\n"
            ),
            Err(Error::ConfigInvalid(_))
        ));
        assert!(matches!(
            StudyConfig::parse("[study]\nkind = nope\n"),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn fem_rate_slope_recomputable() {
        let c = StudyConfig {
            case: Some(AnalyticCase::SineDiffusion),
            ladders: Ladders {
                n: vec![16, 32, 64, 128],
                ..Ladders::default()
            },
            ..StudyConfig::default()
        };
        let t = run_study(&c).unwrap();
        assert!(
            t.fitted_slope > -2.3 && t.fitted_slope < -1.7,
            "{}",
            t.fitted_slope
        );
        let pts = read_rate_points(&t.to_csv().unwrap(), "n").unwrap();
        assert!((fit_slope(&pts).unwrap().0 - t.fitted_slope).abs() < 1e-12);
    }

    #[test]
    fn rho_model_decreases_quadratically() {
        let kind = ProblemKind::a_example(0.5);
        let x = GridFunction::constant(64, 1.0);
        let f = GridFunction::constant(64, 1.0);
        let a = fem_rho_model(kind, &x, &f, 64).unwrap();
        let b = fem_rho_model(kind, &x, &f, 128).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
    }
}
