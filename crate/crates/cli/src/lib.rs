//! Subcommands of the `mvot` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mvot::config::{parse_config, ExperimentConfig};
use mvot::cost::{build_cost_matrix, CostKind};
use mvot::error::Error;
use mvot::geometry::GroundGrid;
use mvot::io;
use mvot::localization::{extract_points_nms, relative_threshold, splat_gaussian, DensityMap, DotMap};
use mvot::metrics::{evaluate, DEFAULT_MATCH_THRESHOLD};
use mvot::simulator::{fit_density, run_comparison, trial_inputs, uniform_density, FitInit, FitTarget};
use mvot::uot::{solve_uot, UotParams};
use ndarray::Array2;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mvot", version, about = "Geometry-aware transport losses on ground-plane density maps")]
pub struct Cli {
    /// Worker threads for trial and cost-column parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a scene and render its streaked density.
    Simulate(RunArgs),
    /// Solve one transport problem between a density map and a dot map.
    Solve(SolveArgs),
    /// Fit a density map to one simulated scene.
    Fit(FitArgs),
    /// Compare losses over several simulated scenes.
    Compare(RunArgs),
    /// Score predicted points against annotations.
    Eval(EvalArgs),
    /// Write one cost column as a heatmap.
    CostViz(CostVizArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub density: PathBuf,
    #[arg(long)]
    pub dots: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Supplies `uot` and `cost` settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cost family by loss name, e.g. `e-mvot` or `m-mvot`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Write the loss gradient with respect to the density as a grid CSV.
    #[arg(long)]
    pub grad_out: Option<PathBuf>,
    /// Write the transport plan as an n x m CSV.
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `mse` or a transport loss name; defaults to the config's cost kind.
    #[arg(long)]
    pub loss: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted points as a dots CSV.
    #[arg(long, conflicts_with = "density", required_unless_present = "density")]
    pub pred: Option<PathBuf>,
    /// Predicted density map; points are extracted with NMS.
    #[arg(long)]
    pub density: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = mvot::localization::DEFAULT_NMS_REL_THRESHOLD)]
    pub nms_rel_threshold: f64,
    #[arg(long, default_value_t = mvot::localization::DEFAULT_NMS_RADIUS)]
    pub nms_radius: usize,
}

#[derive(Debug, Args)]
pub struct CostVizArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub dots: PathBuf,
    /// Index of the annotation whose column is drawn.
    #[arg(long, default_value_t = 0)]
    pub point: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Numerical { .. } => EXIT_NUMERICAL,
            Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn validation_error(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(validation_error("--threads must be at least 1"));
        }
        // Ignored if a pool already exists (e.g. run called twice in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Solve(a) => cmd_solve(&a, out),
        Command::Fit(a) => cmd_fit(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::CostViz(a) => cmd_cost_viz(&a, out),
    }
}

fn say(out: &mut dyn std::io::Write, text: std::fmt::Arguments<'_>) -> CliResult<()> {
    writeln!(out, "{text}").map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("stdout: {e}"),
    })
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = io::read_text(path)?;
    Ok(parse_config(&text, &path.display().to_string())?)
}

fn load_run(a: &RunArgs) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.scene.seed = seed;
    }
    let dir = a.out.clone().unwrap_or_else(|| config.output.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok((config, dir))
}

fn kind_from_name(name: &str) -> CliResult<CostKind> {
    CostKind::from_loss_name(name).ok_or_else(|| validation_error(format!("unknown loss `{name}`")))
}

/// Keeps labels usable as file names.
fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn cmd_simulate(a: &RunArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let (config, dir) = load_run(a)?;
    let setup = config.comparison_setup();
    let seed = config.scene.seed;
    let (gt, render) = trial_inputs(&setup, seed)?;
    io::write_scene(&dir.join("scene.json"), &config.scene)?;
    io::write_dots(&dir.join("gt_dots.csv"), &gt)?;
    io::write_density(&dir.join("streaked_density.csv"), &render)?;
    io::write_pgm(&dir.join("streaked_density.pgm"), &render.values)?;
    say(out, format_args!("seed {seed}: {} people, rendered mass {:.6}", gt.len(), render.total_mass()))?;
    say(out, format_args!("wrote {}", dir.display()))
}

fn grid_matches(density: &GroundGrid, scene: &GroundGrid) -> bool {
    density.rows == scene.rows
        && density.cols == scene.cols
        && density.cell_size == scene.cell_size
        && density.origin == scene.origin
}

fn cmd_solve(a: &SolveArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let scene = io::read_scene(&a.scene)?;
    let density = io::read_density(&a.density)?;
    let dots = io::read_dots(&a.dots)?;
    if !grid_matches(&density.grid, &scene.grid) {
        return Err(validation_error(format!(
            "density grid {}x{} (cell {}) does not match scene grid {}x{} (cell {})",
            density.grid.rows,
            density.grid.cols,
            density.grid.cell_size,
            scene.grid.rows,
            scene.grid.cols,
            scene.grid.cell_size
        )));
    }
    let (mut params, cost_config) = match &a.config {
        Some(p) => {
            let c = load_config(p)?;
            (c.uot, c.cost)
        }
        None => (UotParams::default(), Default::default()),
    };
    if let Some(e) = a.epsilon {
        params.epsilon = e;
    }
    if let Some(t) = a.tau {
        params.tau = t;
    }
    let kind = match &a.loss {
        Some(name) => kind_from_name(name)?,
        None => cost_config.kind,
    };
    let variant = cost_config.variant_of(kind);
    let cost = build_cost_matrix(&scene.grid, &dots, &scene.cameras, &variant)?;
    let density_flat = density.to_flat();
    let result = solve_uot(&density_flat, &dots.weights(), &cost.values.view(), &params)?;
    if !result.loss.is_finite() {
        return Err(Error::Numerical {
            iteration: result.iterations,
            message: "loss is not finite".into(),
        }
        .into());
    }
    say(out, format_args!("loss {}", result.loss))?;
    say(out, format_args!("iterations {}", result.iterations))?;
    say(out, format_args!("converged {}", result.converged))?;
    if let Some(p) = &a.grad_out {
        let grad = Array2::from_shape_vec((scene.grid.rows, scene.grid.cols), result.grad_density.clone())
            .expect("gradient has one entry per cell");
        io::write_grid_values(p, &scene.grid, &grad)?;
    }
    if let Some(p) = &a.plan_out {
        let mut text = String::new();
        for row in result.plan.values.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        io::write_text(p, &text)?;
    }
    Ok(())
}

fn cmd_fit(a: &FitArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let (config, dir) = load_run(&a.run)?;
    let setup = config.comparison_setup();
    let grid = config.scene.grid;
    let (gt, render) = trial_inputs(&setup, config.scene.seed)?;
    let init = match config.fit.init {
        FitInit::StreakedRender => render,
        FitInit::Uniform => uniform_density(&grid, gt.len() as f64),
    };
    let loss = a.loss.clone().unwrap_or_else(|| config.cost.kind.loss_name().to_string());
    let outcome = if loss == "mse" {
        let target = splat_gaussian(&gt, &grid, config.gaussian_sigma)?;
        fit_density(&gt, FitTarget::Mse { target: &target }, &config.fit, &init)?
    } else {
        let variant = config.cost.variant_of(kind_from_name(&loss)?);
        let cost = build_cost_matrix(&grid, &gt, &config.scene.cameras, &variant)?;
        let target = FitTarget::Uot {
            cost: &cost,
            params: &config.uot,
        };
        fit_density(&gt, target, &config.fit, &init)?
    };
    let threshold = relative_threshold(&outcome.density, config.eval.nms_rel_threshold);
    let pred = extract_points_nms(&outcome.density, threshold, config.eval.nms_radius);
    let (_, report) = evaluate(&pred, &gt, config.eval.threshold)?;

    io::write_density(&dir.join("fitted_density.csv"), &outcome.density)?;
    io::write_pgm(&dir.join("fitted_density.pgm"), &outcome.density.values)?;
    io::write_dots(&dir.join("gt_dots.csv"), &gt)?;
    io::write_dots(&dir.join("pred_dots.csv"), &pred)?;
    let mut trace = String::from("iteration,loss\n");
    for (k, l) in outcome.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{k},{l}\n"));
    }
    io::write_text(&dir.join("loss_trace.csv"), &trace)?;
    say(
        out,
        format_args!(
            "{loss}: loss {} mass {:.6} detections {} moda {:.4} modp {:.4} precision {:.4} recall {:.4} f1 {:.4}",
            outcome.loss_final(),
            outcome.density.total_mass(),
            pred.len(),
            report.moda,
            report.modp,
            report.precision,
            report.recall,
            report.f1
        ),
    )
}

fn cmd_compare(a: &RunArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let (config, dir) = load_run(a)?;
    let variants = config.labeled_variants()?;
    let setup = config.comparison_setup();
    let table = run_comparison(&setup, &variants)?;
    io::write_results(&dir.join("results.csv"), &table)?;
    io::write_summary(&dir.join("summary.csv"), &table.aggregates)?;
    for (label, map) in &table.first_seed_maps {
        let name = format!("{}_seed{}.pgm", file_stem(label), config.scene.seed);
        io::write_pgm(&dir.join(name), &map.values)?;
    }
    say(out, format_args!("{:<28} {:>8} {:>8} {:>8} {:>8} {:>8}", "variant", "moda", "modp", "prec", "recall", "f1"))?;
    for agg in &table.aggregates {
        say(
            out,
            format_args!(
                "{:<28} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  (moda std {:.4}, {} trials)",
                agg.variant,
                agg.mean.moda,
                agg.mean.modp,
                agg.mean.precision,
                agg.mean.recall,
                agg.mean.f1,
                agg.std.moda,
                agg.trials
            ),
        )?;
    }
    say(out, format_args!("wrote {}", dir.join("results.csv").display()))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let gt = io::read_dots(&a.gt)?;
    let pred: DotMap = match (&a.pred, &a.density) {
        (Some(p), _) => io::read_dots(p)?,
        (None, Some(d)) => {
            if !(a.nms_rel_threshold > 0.0 && a.nms_rel_threshold <= 1.0) || a.nms_radius == 0 {
                return Err(validation_error("NMS threshold must lie in (0, 1] and radius be at least 1"));
            }
            let density: DensityMap = io::read_density(d)?;
            let t = relative_threshold(&density, a.nms_rel_threshold);
            extract_points_nms(&density, t, a.nms_radius)
        }
        (None, None) => return Err(validation_error("either --pred or --density is required")),
    };
    let (outcome, r) = evaluate(&pred, &gt, a.threshold)?;
    say(out, format_args!("tp {} fp {} fn {}", outcome.tp, outcome.fp, outcome.fn_))?;
    say(
        out,
        format_args!(
            "moda {:.6} modp {:.6} precision {:.6} recall {:.6} f1 {:.6}",
            r.moda, r.modp, r.precision, r.recall, r.f1
        ),
    )
}

fn cmd_cost_viz(a: &CostVizArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let scene = io::read_scene(&a.scene)?;
    let dots = io::read_dots(&a.dots)?;
    if a.point >= dots.len() {
        return Err(validation_error(format!("--point {} but only {} points", a.point, dots.len())));
    }
    let cost_config = match &a.config {
        Some(p) => load_config(p)?.cost,
        None => Default::default(),
    };
    let kind = match &a.loss {
        Some(name) => kind_from_name(name)?,
        None => cost_config.kind,
    };
    let cost = build_cost_matrix(&scene.grid, &dots, &scene.cameras, &cost_config.variant_of(kind))?;
    let grid = scene.grid;
    let column = cost.values.column(a.point);
    // The exponent, not the cost, so iso-contours stay visible far out.
    let distance = Array2::from_shape_fn((grid.rows, grid.cols), |(r, c)| column[r * grid.cols + c].ln());
    let inverted = distance.mapv(|d| (-d).exp());
    io::write_pgm(&a.out, &inverted)?;
    let stem = a.out.with_extension("");
    io::write_grid_values(&stem.with_extension("csv"), &grid, &distance)?;
    io::write_column_meta(&PathBuf::from(format!("{}_meta.csv", stem.display())), &cost.column_meta)?;
    let m = &cost.column_meta[a.point];
    say(
        out,
        format_args!(
            "point {}: camera {:?} beta {:.6} sigma1_sq {:.6} sigma2_sq {:.6}",
            a.point, m.camera_id, m.beta, m.sigma1_sq, m.sigma2_sq
        ),
    )
}
