use std::path::Path;

use difflab_core::harness::{run_sweep, SWEEP_HEADER};
use difflab_core::{ExperimentConfig, SamplerKind};

fn write_target(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("target.json");
    std::fs::write(
        &path,
        r#"{ "d": 2, "components": [ { "weight": 1.0, "mean": [0.5, -0.5], "cov": [[0.5, 0.1], [0.1, 1.5]] } ] }"#,
    )
    .unwrap();
    path
}

fn config(dir: &Path, out: &str, extra: &str) -> ExperimentConfig {
    let target = write_target(dir);
    let json = format!(
        r#"{{ "target": {target:?}, "T_grid": [16, 32, 64], "samplers": ["accelerated", "ddpm", "ode"],
             "n": 1200, "n_dirs": 4, "seed": 9, "out": {out:?} {extra} }}"#,
        out = dir.join(out),
    );
    ExperimentConfig::from_json_str(&json).unwrap()
}

fn data_lines(text: &str) -> Vec<String> {
    // drop wallclock_ms, the only column that varies between runs
    text.lines()
        .skip(1)
        .map(|l| match l.starts_with('#') {
            true => l.to_string(),
            false => l.rsplit_once(',').unwrap().0.to_string(),
        })
        .collect()
}

#[test]
fn rows_follow_grid_order_and_are_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "out.csv", "");
    let report = run_sweep(&cfg, 3).unwrap();
    let order: Vec<(SamplerKind, usize)> =
        report.rows.iter().map(|r| (r.sampler, r.horizon)).collect();
    let expected: Vec<(SamplerKind, usize)> = [
        SamplerKind::Accelerated,
        SamplerKind::Ddpm,
        SamplerKind::Ode,
    ]
    .iter()
    .flat_map(|&k| [16, 32, 64].map(|t| (k, t)))
    .collect();
    assert_eq!(order, expected);

    let text = std::fs::read_to_string(&cfg.out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(SWEEP_HEADER));
    let rows: Vec<&str> = lines.clone().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 9);
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 11, "{row}");
        // Gaussian target: analytic columns and both Monte Carlo metrics present
        for field in &fields[3..10] {
            assert!(
                !field.is_empty() && field.parse::<f64>().unwrap().is_finite(),
                "{row}"
            );
        }
    }
    let slopes: Vec<&str> = lines.filter(|l| l.starts_with("# slope,")).collect();
    assert_eq!(slopes.len(), 3);
    assert_eq!(report.fitted_slopes.len(), 3);
    for (kind, fit) in &report.fitted_slopes {
        assert!(fit.slope.is_finite() && fit.stderr.is_finite(), "{kind}");
    }
}

#[test]
fn output_does_not_depend_on_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let one = config(dir.path(), "one.csv", "");
    let four = config(dir.path(), "four.csv", "");
    run_sweep(&one, 1).unwrap();
    run_sweep(&four, 4).unwrap();
    let a = std::fs::read_to_string(&one.out).unwrap();
    let b = std::fs::read_to_string(&four.out).unwrap();
    assert_eq!(data_lines(&a), data_lines(&b));
}

#[test]
fn failing_cells_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    // c1 = 8 makes the T = 16 schedule degenerate but leaves T = 32, 64 valid
    let cfg = config(
        dir.path(),
        "out.csv",
        r#", "schedule": { "c0": 4, "c1": 8, "cclip": 2 }"#,
    );
    let report = run_sweep(&cfg, 2).unwrap();
    let failed: Vec<_> = report.rows.iter().filter(|r| r.failure.is_some()).collect();
    assert_eq!(failed.len(), 3);
    assert!(failed
        .iter()
        .all(|r| r.horizon == 16 && r.kl_analytic.is_none()));
    assert_eq!(report.rows.len(), 9);

    let text = std::fs::read_to_string(&cfg.out).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.starts_with("# failed,")).count(),
        3
    );
    // two surviving horizons per sampler are too few for a slope
    assert!(report.fitted_slopes.is_empty());
}

#[test]
fn offset_grid_raises_measured_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(
        dir.path(),
        "out.csv",
        r#", "score": { "mode": "offset", "grid": [0.0, 0.5] }"#,
    );
    cfg.t_grid = vec![32];
    cfg.samplers = vec![SamplerKind::AcceleratedNoclip];
    cfg.n = 20_000;
    let report = run_sweep(&cfg, 2).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].eps_score, 0.0);
    assert_eq!(report.rows[1].eps_score, 0.5);
    assert!(report.rows[1].kl_analytic.unwrap() > report.rows[0].kl_analytic.unwrap());
    assert!(report.rows[1].moment_kl.unwrap() > report.rows[0].moment_kl.unwrap());
}
