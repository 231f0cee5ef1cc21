use std::path::PathBuf;

use tikreg::error::Error;
use tikreg::experiments::{
    fit_slope, rate_sibling, read_rate_points, run_study, StudyConfig, StudyKind, RATE_CSV_HEADER,
};
use tikreg::regularize::RUN_CSV_HEADER;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn without_runtime(csv: &str) -> Vec<Vec<String>> {
    let col = RUN_CSV_HEADER
        .iter()
        .position(|h| *h == "runtime_ms")
        .unwrap();
    csv.lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != col)
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn shipped_configs_parse() {
    for name in [
        "fem_rate.cfg",
        "reg_rate_a.cfg",
        "reg_rate_c.cfg",
        "surrogate_error.cfg",
        "mollify_rate.cfg",
    ] {
        let c = StudyConfig::load(&config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn regularization_study_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = StudyConfig::load(&config_path("reg_rate_c.cfg")).unwrap();
    let mut outputs = Vec::new();
    for (i, jobs) in [Some(1), Some(3)].into_iter().enumerate() {
        let out = dir.path().join(format!("runs{i}.csv"));
        cfg.output = Some(out.clone());
        cfg.jobs = jobs;
        run_study(&cfg).unwrap();
        let runs = std::fs::read_to_string(&out).unwrap();
        let rates = std::fs::read_to_string(rate_sibling(&out)).unwrap();
        assert_eq!(runs.lines().next().unwrap(), RUN_CSV_HEADER.join(","));
        assert_eq!(rates.lines().next().unwrap(), RATE_CSV_HEADER.join(","));
        outputs.push((without_runtime(&runs), rates));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn reported_slope_is_recomputable_from_rows() {
    for name in ["fem_rate.cfg", "mollify_rate.cfg", "reg_rate_a.cfg"] {
        let mut cfg = StudyConfig::load(&config_path(name)).unwrap();
        cfg.output = None;
        let t = run_study(&cfg).unwrap();
        let pts = read_rate_points(&t.to_csv().unwrap(), &t.fit_parameter).unwrap();
        let (s, _) = fit_slope(&pts).unwrap();
        assert!(
            (s - t.fitted_slope).abs() <= 1e-12,
            "{name}: {s} vs {}",
            t.fitted_slope
        );
    }
}

#[test]
fn failing_point_keeps_earlier_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("partial.csv");
    let text = format!(
        "[study]\nkind = surrogate_error\noutput = {}\n\
         [problem]\nkind = c\nnu = 0.1\nn = 64\nload = 200\ntruth_amplitude = 0.05\n\
         [surrogate]\nkind = neural\nrank = 4\nprobes = 4\n\
         [ladder]\nn_k = 8, 16, 32, 64\nn_j = 8, 16, 24, 64\n",
        out.display()
    );
    let cfg = StudyConfig::parse(&text).unwrap();
    assert_eq!(cfg.study, StudyKind::SurrogateError);
    let err = run_study(&cfg).unwrap_err();
    assert!(
        matches!(
            err,
            Error::IllConditionedFit(_) | Error::SingularSystem { .. }
        ),
        "{err}"
    );
    let written = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = written.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1..4].iter().all(|l| l.ends_with(",ok")));
    assert!(lines[4].contains("error:"));
}
