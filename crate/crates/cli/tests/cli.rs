use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvot::geometry::GroundGrid;
use mvot::io;
use mvot::localization::DensityMap;
use tempfile::TempDir;

/// Loss of the checked-in 16x16 fixture at eps = 1, tau = 1, default cost.
/// Frozen after the log-domain and plain scaling paths agreed to 1e-15.
const FIXTURE_LOSS: f64 = -1.1163123826387813;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvot"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("no `{key}` in {out}"))
        .to_string()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SMALL_CONFIG: &str = r#"{
  "scene": {
    "grid": { "rows": 20, "cols": 20 },
    "cameras": [{ "id": 0, "position": [-1.0, -1.0, 3.0] }, { "id": 1, "position": [3.0, 1.0, 3.0] }],
    "num_people": 3,
    "seed": 5
  },
  "streaks": { "noise_std": 0.001, "clutter_rate": 1.0 },
  "uot": { "epsilon": 1.0 },
  "fit": { "step_size": 0.5, "iterations": 20 },
  "eval": { "nms_radius": 2 },
  "variants": ["mse"],
  "trials": 1
}"#;

#[test]
fn invalid_config_value_exits_with_validation_code() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "bad.json", &SMALL_CONFIG.replace(r#""epsilon": 1.0"#, r#""epsilon": -1"#));
    let o = run(&["compare", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("uot.epsilon"), "{}", stderr(&o));
}

#[test]
fn malformed_config_reports_file_and_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "broken.json", "{\n  \"scene\": {\n    \"grid\": ,\n}");
    let o = run(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("broken.json:3"), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_with_io_code() {
    let o = run(&[
        "solve",
        "--density",
        "/nonexistent/density.csv",
        "--dots",
        &fixture("dots.csv"),
        "--scene",
        &fixture("scene.json"),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("/nonexistent/density.csv"));
}

#[test]
fn fixture_loss_matches_the_frozen_value() {
    let o = run(&[
        "solve",
        "--density",
        &fixture("density.csv"),
        "--dots",
        &fixture("dots.csv"),
        "--scene",
        &fixture("scene.json"),
        "--epsilon",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let loss: f64 = field(&out, "loss").parse().unwrap();
    assert!((loss - FIXTURE_LOSS).abs() <= 1e-9, "{loss}");
    assert_eq!(field(&out, "converged"), "true");
}

#[test]
fn log_and_plain_paths_agree_on_the_fixture() {
    let losses: Vec<f64> = ["solve_log.json", "solve_plain.json"]
        .iter()
        .map(|cfg| {
            let o = run(&[
                "solve",
                "--density",
                &fixture("density.csv"),
                "--dots",
                &fixture("dots.csv"),
                "--scene",
                &fixture("scene.json"),
                "--config",
                &fixture(cfg),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            assert_eq!(field(&stdout(&o), "converged"), "true");
            field(&stdout(&o), "loss").parse().unwrap()
        })
        .collect();
    assert!((losses[0] - losses[1]).abs() <= 1e-12 * losses[0].abs(), "{losses:?}");
    assert!((losses[0] - FIXTURE_LOSS).abs() <= 1e-9);
}

#[test]
fn zero_density_costs_tau_per_annotation() {
    let dir = TempDir::new().unwrap();
    let scene = io::read_scene(Path::new(&fixture("scene.json"))).unwrap();
    let zero = DensityMap::zeros(scene.grid);
    let density = dir.path().join("zero.csv");
    io::write_density(&density, &zero).unwrap();
    let grad = dir.path().join("grad.csv");
    // Costs are at least 1, so for tau <= 1 no transport beats paying tau
    // per unmatched annotation.
    for tau in [0.5, 1.0] {
        let o = run(&[
            "solve",
            "--density",
            density.to_str().unwrap(),
            "--dots",
            &fixture("dots.csv"),
            "--scene",
            &fixture("scene.json"),
            "--epsilon",
            "0.01",
            "--tau",
            &tau.to_string(),
            "--grad-out",
            grad.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let loss: f64 = field(&stdout(&o), "loss").parse().unwrap();
        let m = 3.0;
        assert!((loss - tau * m).abs() <= 0.05 * tau * m, "tau {tau}: {loss}");
        let (g_grid, g) = io::read_grid_values(&grad).unwrap();
        assert_eq!(g_grid, scene.grid);
        assert!(g.iter().all(|v| v.is_finite() && *v <= 0.0));
    }
}

#[test]
fn mismatched_grids_are_rejected() {
    let dir = TempDir::new().unwrap();
    let other = DensityMap::zeros(GroundGrid::new(8, 16, 0.1, [0.0, 0.0]).unwrap());
    let density = dir.path().join("small.csv");
    io::write_density(&density, &other).unwrap();
    let o = run(&[
        "solve",
        "--density",
        density.to_str().unwrap(),
        "--dots",
        &fixture("dots.csv"),
        "--scene",
        &fixture("scene.json"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}

#[test]
fn plan_dump_has_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let plan = dir.path().join("plan.csv");
    let o = run(&[
        "solve",
        "--density",
        &fixture("density.csv"),
        "--dots",
        &fixture("dots.csv"),
        "--scene",
        &fixture("scene.json"),
        "--epsilon",
        "1",
        "--plan-out",
        plan.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(plan).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 256);
    assert!(rows.iter().all(|r| r.len() == 3 && r.iter().all(|v| *v >= 0.0)));
}

#[test]
fn single_mse_trial_writes_a_data_and_an_aggregate_row() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", SMALL_CONFIG);
    let out = dir.path().join("out");
    let o = run(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = io::read_results(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(matches!(rows[0], io::ResultsLine::Trial(_)));
    assert!(matches!(rows[1], io::ResultsLine::Mean { .. }));
    assert!(out.join("mse_seed5.pgm").exists());
    assert!(out.join("summary.csv").exists());
    assert!(stdout(&o).contains("mse"));
}

#[test]
fn compare_is_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "cfg.json",
        &SMALL_CONFIG
            .replace(r#""variants": ["mse"]"#, r#""variants": ["mse", "e-mvot", {"loss": "m-mvot", "alpha": 0.2}]"#)
            .replace(r#""trials": 1"#, r#""trials": 3"#),
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["compare", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(run(&["--threads", "1", "compare", "--config", &cfg, "--out", b.to_str().unwrap()])
        .status
        .success());
    for name in ["results.csv", "summary.csv", "m-mvot_alpha_0.2_seed5.pgm"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn simulate_outputs_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", SMALL_CONFIG);
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scene = io::read_scene(&out.join("scene.json")).unwrap();
    assert_eq!(scene.seed, 9);
    let dots = io::read_dots(&out.join("gt_dots.csv")).unwrap();
    assert_eq!(dots.len(), 3);
    let density = io::read_density(&out.join("streaked_density.csv")).unwrap();
    assert_eq!(density.grid, scene.grid);
    let again = dir.path().join("again.csv");
    io::write_density(&again, &density).unwrap();
    assert_eq!(
        fs::read(out.join("streaked_density.csv")).unwrap(),
        fs::read(&again).unwrap()
    );
    let pixels = io::read_pgm(&out.join("streaked_density.pgm")).unwrap();
    assert_eq!(pixels.dim(), (20, 20));
    assert_eq!(pixels.iter().copied().max(), Some(255));
}

#[test]
fn fit_then_eval_agree() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", SMALL_CONFIG);
    let out = dir.path().join("fit");
    let o = run(&["fit", "--config", &cfg, "--out", out.to_str().unwrap(), "--loss", "m-mvot"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 21);
    let fit_line = stdout(&o);
    let moda_fit: f64 = fit_line.split("moda ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();

    let o = run(&[
        "eval",
        "--gt",
        out.join("gt_dots.csv").to_str().unwrap(),
        "--density",
        out.join("fitted_density.csv").to_str().unwrap(),
        "--nms-radius",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let moda_eval: f64 = line.split("moda ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!((moda_fit - moda_eval).abs() < 1e-4, "{moda_fit} vs {moda_eval}");

    let o = run(&[
        "eval",
        "--gt",
        out.join("gt_dots.csv").to_str().unwrap(),
        "--pred",
        out.join("gt_dots.csv").to_str().unwrap(),
    ]);
    assert!(stdout(&o).contains("tp 3 fp 0 fn 0"), "{}", stdout(&o));
    assert!(stdout(&o).contains("moda 1.000000 modp 1.000000"));
}

#[test]
fn cost_viz_writes_heatmap_distance_and_metadata() {
    let dir = TempDir::new().unwrap();
    let pgm = dir.path().join("col.pgm");
    let o = run(&[
        "cost-viz",
        "--scene",
        &fixture("scene.json"),
        "--dots",
        &fixture("dots.csv"),
        "--point",
        "2",
        "--loss",
        "m-mvot",
        "--out",
        pgm.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("point 2: camera Some("));
    let px = io::read_pgm(&pgm).unwrap();
    assert_eq!(px.dim(), (16, 16));
    let (grid, dist) = io::read_grid_values(&dir.path().join("col.csv")).unwrap();
    assert_eq!((grid.rows, grid.cols), (16, 16));
    // The annotation sits inside the cell with the smallest distance.
    let dots = io::read_dots(Path::new(&fixture("dots.csv"))).unwrap();
    let idx = grid.cell_of(&dots.points[2]).unwrap();
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(dist[[idx / grid.cols, idx % grid.cols]], min);
    assert!(dir.path().join("col_meta.csv").exists());

    let o = run(&[
        "cost-viz",
        "--scene",
        &fixture("scene.json"),
        "--dots",
        &fixture("dots.csv"),
        "--point",
        "7",
        "--out",
        pgm.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
