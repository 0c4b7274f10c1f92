//! File formats: scene JSON, density and dot CSVs, results CSV, column
//! metadata CSV and plain-text PGM heatmaps.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! reader returns exactly what the writer was given.

use std::fs;
use std::path::Path;

use nalgebra::Point2;
use ndarray::Array2;

use crate::cost::ColumnMeta;
use crate::error::{Error, Result};
use crate::geometry::GroundGrid;
use crate::localization::{DensityMap, DotMap};
use crate::metrics::MetricsReport;
use crate::simulator::{AggregateRow, ComparisonRow, ComparisonTable, SceneSpec};

pub const DENSITY_HEADER: [&str; 3] = ["rows", "cols", "cell_size_m"];
pub const DENSITY_HEADER_WITH_ORIGIN: [&str; 5] = ["rows", "cols", "cell_size_m", "origin_x_m", "origin_y_m"];
pub const DOTS_HEADER: [&str; 2] = ["x_m", "y_m"];
pub const RESULTS_HEADER: [&str; 10] = [
    "variant",
    "seed",
    "moda",
    "modp",
    "precision",
    "recall",
    "f1",
    "loss_final",
    "iterations",
    "converged",
];
pub const SUMMARY_HEADER: [&str; 15] = [
    "variant",
    "trials",
    "moda_mean",
    "moda_std",
    "modp_mean",
    "modp_std",
    "precision_mean",
    "precision_std",
    "recall_mean",
    "recall_std",
    "f1_mean",
    "f1_std",
    "loss_final_mean",
    "converged",
    "total",
];
pub const COLUMN_META_HEADER: [&str; 8] = [
    "column",
    "camera_id",
    "beta",
    "sigma1_sq",
    "sigma2_sq",
    "d_cam_m",
    "d_norm",
    "degenerate_ray",
];
/// Value of the `seed` column on aggregate rows of the results CSV.
pub const MEAN_ROW_SEED: &str = "mean";
const PGM_VALUES_PER_LINE: usize = 16;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path_str(path),
        source,
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path_str(path),
        line,
        message: message.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_error(path, source),
        other => parse_error(path, line, format!("{other:?}")),
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().flexible(true).from_writer(Vec::new())
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w
        .into_inner()
        .map_err(|e| io_error(path, std::io::Error::other(e.to_string())))?;
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

/// All records of a CSV file with their 1-based line numbers. Records are
/// not required to have equal lengths.
fn read_records(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((line, rec));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, rec: &csv::StringRecord, k: usize, name: &str) -> Result<T> {
    let raw = rec
        .get(k)
        .ok_or_else(|| parse_error(path, line, format!("missing field `{name}`")))?;
    raw.parse()
        .map_err(|_| parse_error(path, line, format!("cannot parse `{raw}` as {name}")))
}

fn expect_header(path: &Path, records: &[(usize, csv::StringRecord)], header: &[&str]) -> Result<()> {
    match records.first() {
        Some((_, rec)) if rec.iter().eq(header.iter().copied()) => Ok(()),
        Some((line, rec)) => Err(parse_error(
            path,
            *line,
            format!("expected header `{}`, found `{}`", header.join(","), rec.iter().collect::<Vec<_>>().join(",")),
        )),
        None => Err(parse_error(path, 1, "empty file")),
    }
}

pub fn read_scene(path: &Path) -> Result<SceneSpec> {
    let text = read_text(path)?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let scene: SceneSpec = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        parse_error(path, inner.line(), format!("at `{key}`: {inner}"))
    })?;
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &SceneSpec) -> Result<()> {
    let text = serde_json::to_string_pretty(scene).expect("scene serializes");
    write_text(path, &(text + "\n"))
}

/// Writes a grid of values (density or gradient): a header line, the grid
/// line, then one line per grid row.
pub fn write_grid_values(path: &Path, grid: &GroundGrid, values: &Array2<f64>) -> Result<()> {
    let mut w = csv_writer();
    let res: std::result::Result<(), csv::Error> = (|| {
        if grid.origin == [0.0, 0.0] {
            w.write_record(DENSITY_HEADER)?;
            w.write_record([grid.rows.to_string(), grid.cols.to_string(), grid.cell_size.to_string()])?;
        } else {
            w.write_record(DENSITY_HEADER_WITH_ORIGIN)?;
            w.write_record([
                grid.rows.to_string(),
                grid.cols.to_string(),
                grid.cell_size.to_string(),
                grid.origin[0].to_string(),
                grid.origin[1].to_string(),
            ])?;
        }
        for row in values.outer_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        Ok(())
    })();
    res.map_err(|e| csv_error(path, e))?;
    finish_csv(path, w)
}

pub fn write_density(path: &Path, density: &DensityMap) -> Result<()> {
    write_grid_values(path, &density.grid, &density.values)
}

/// Reads a grid of finite values without a sign check.
pub fn read_grid_values(path: &Path) -> Result<(GroundGrid, Array2<f64>)> {
    let records = read_records(path)?;
    let with_origin = matches!(records.first(), Some((_, r)) if r.len() == DENSITY_HEADER_WITH_ORIGIN.len());
    if with_origin {
        expect_header(path, &records, &DENSITY_HEADER_WITH_ORIGIN)?;
    } else {
        expect_header(path, &records, &DENSITY_HEADER)?;
    }
    let (line, dims) = records
        .get(1)
        .ok_or_else(|| parse_error(path, 2, "missing grid line"))?;
    let rows: usize = field(path, *line, dims, 0, "rows")?;
    let cols: usize = field(path, *line, dims, 1, "cols")?;
    let cell: f64 = field(path, *line, dims, 2, "cell_size_m")?;
    let origin = if with_origin {
        [field(path, *line, dims, 3, "origin_x_m")?, field(path, *line, dims, 4, "origin_y_m")?]
    } else {
        [0.0, 0.0]
    };
    let grid = GroundGrid::new(rows, cols, cell, origin).map_err(|e| parse_error(path, *line, e.to_string()))?;
    let body = &records[2..];
    if body.len() != rows {
        let line = body.last().map_or(*line, |(l, _)| *l);
        return Err(parse_error(path, line, format!("expected {rows} value rows, found {}", body.len())));
    }
    let mut values = Array2::zeros((rows, cols));
    for (r, (line, rec)) in body.iter().enumerate() {
        if rec.len() != cols {
            return Err(parse_error(path, *line, format!("expected {cols} values, found {}", rec.len())));
        }
        for c in 0..cols {
            let v: f64 = field(path, *line, rec, c, "value")?;
            if !v.is_finite() {
                return Err(parse_error(path, *line, format!("non-finite value {v}")));
            }
            values[[r, c]] = v;
        }
    }
    Ok((grid, values))
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    let (grid, values) = read_grid_values(path)?;
    DensityMap::from_values(grid, values).map_err(|e| parse_error(path, 0, e.to_string()))
}

pub fn write_dots(path: &Path, dots: &DotMap) -> Result<()> {
    let mut w = csv_writer();
    let res: std::result::Result<(), csv::Error> = (|| {
        w.write_record(DOTS_HEADER)?;
        for p in &dots.points {
            w.write_record([p.x.to_string(), p.y.to_string()])?;
        }
        Ok(())
    })();
    res.map_err(|e| csv_error(path, e))?;
    finish_csv(path, w)
}

pub fn read_dots(path: &Path) -> Result<DotMap> {
    let records = read_records(path)?;
    expect_header(path, &records, &DOTS_HEADER)?;
    let mut points = Vec::with_capacity(records.len() - 1);
    for (line, rec) in &records[1..] {
        if rec.len() != 2 {
            return Err(parse_error(path, *line, format!("expected 2 fields, found {}", rec.len())));
        }
        let x: f64 = field(path, *line, rec, 0, "x_m")?;
        let y: f64 = field(path, *line, rec, 1, "y_m")?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(parse_error(path, *line, "non-finite coordinate"));
        }
        points.push(Point2::new(x, y));
    }
    Ok(DotMap::new(points))
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub enum ResultsLine {
    Trial(ComparisonRow),
    /// Per-variant means; `converged` of `trials` runs converged.
    Mean {
        variant: String,
        mean: MetricsReport,
        loss_final_mean: f64,
        converged: usize,
        trials: usize,
    },
}

fn metric_fields(m: &MetricsReport) -> [String; 5] {
    [m.moda, m.modp, m.precision, m.recall, m.f1].map(|v| v.to_string())
}

/// Data rows (variant-major) followed by one mean row per variant.
pub fn results_csv(table: &ComparisonTable) -> Result<String> {
    let mut w = csv_writer();
    let res: std::result::Result<(), csv::Error> = (|| {
        w.write_record(RESULTS_HEADER)?;
        for r in &table.rows {
            let mut rec = vec![r.variant.clone(), r.seed.to_string()];
            rec.extend(metric_fields(&r.metrics));
            rec.extend([r.loss_final.to_string(), r.iterations.to_string(), r.converged.to_string()]);
            w.write_record(rec)?;
        }
        for a in &table.aggregates {
            let mut rec = vec![a.variant.clone(), MEAN_ROW_SEED.to_string()];
            rec.extend(metric_fields(&a.mean));
            rec.extend([
                a.loss_final_mean.to_string(),
                String::new(),
                format!("{}/{}", a.converged_count, a.trials),
            ]);
            w.write_record(rec)?;
        }
        Ok(())
    })();
    res.map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_results(path: &Path, table: &ComparisonTable) -> Result<()> {
    write_text(path, &results_csv(table)?)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultsLine>> {
    let records = read_records(path)?;
    expect_header(path, &records, &RESULTS_HEADER)?;
    let mut out = Vec::new();
    for (line, rec) in &records[1..] {
        let line = *line;
        if rec.len() != RESULTS_HEADER.len() {
            return Err(parse_error(path, line, format!("expected {} fields, found {}", RESULTS_HEADER.len(), rec.len())));
        }
        let variant = rec[0].to_string();
        let metrics = MetricsReport {
            moda: field(path, line, rec, 2, "moda")?,
            modp: field(path, line, rec, 3, "modp")?,
            precision: field(path, line, rec, 4, "precision")?,
            recall: field(path, line, rec, 5, "recall")?,
            f1: field(path, line, rec, 6, "f1")?,
        };
        let loss_final: f64 = field(path, line, rec, 7, "loss_final")?;
        if &rec[1] == MEAN_ROW_SEED {
            let (conv, total) = rec[9]
                .split_once('/')
                .ok_or_else(|| parse_error(path, line, "mean row needs converged as k/n"))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| parse_error(path, line, format!("cannot parse `{s}` as a count")))
            };
            out.push(ResultsLine::Mean {
                variant,
                mean: metrics,
                loss_final_mean: loss_final,
                converged: parse(conv)?,
                trials: parse(total)?,
            });
        } else {
            out.push(ResultsLine::Trial(ComparisonRow {
                variant,
                seed: field(path, line, rec, 1, "seed")?,
                metrics,
                loss_final,
                iterations: field(path, line, rec, 8, "iterations")?,
                converged: field(path, line, rec, 9, "converged")?,
            }));
        }
    }
    Ok(out)
}

/// Per-variant means and standard deviations.
pub fn write_summary(path: &Path, aggregates: &[AggregateRow]) -> Result<()> {
    let mut w = csv_writer();
    let res: std::result::Result<(), csv::Error> = (|| {
        w.write_record(SUMMARY_HEADER)?;
        for a in aggregates {
            let mut rec = vec![a.variant.clone(), a.trials.to_string()];
            for (m, s) in [
                (a.mean.moda, a.std.moda),
                (a.mean.modp, a.std.modp),
                (a.mean.precision, a.std.precision),
                (a.mean.recall, a.std.recall),
                (a.mean.f1, a.std.f1),
            ] {
                rec.push(m.to_string());
                rec.push(s.to_string());
            }
            rec.push(a.loss_final_mean.to_string());
            rec.push(a.converged_count.to_string());
            rec.push(a.trials.to_string());
            w.write_record(rec)?;
        }
        Ok(())
    })();
    res.map_err(|e| csv_error(path, e))?;
    finish_csv(path, w)
}

pub fn write_column_meta(path: &Path, meta: &[ColumnMeta]) -> Result<()> {
    let mut w = csv_writer();
    let opt = |v: Option<String>| v.unwrap_or_default();
    let res: std::result::Result<(), csv::Error> = (|| {
        w.write_record(COLUMN_META_HEADER)?;
        for (j, m) in meta.iter().enumerate() {
            w.write_record([
                j.to_string(),
                opt(m.camera_id.map(|c| c.to_string())),
                m.beta.to_string(),
                m.sigma1_sq.to_string(),
                m.sigma2_sq.to_string(),
                opt(m.d_cam.map(|d| d.to_string())),
                m.d_norm.to_string(),
                m.degenerate_ray.to_string(),
            ])?;
        }
        Ok(())
    })();
    res.map_err(|e| csv_error(path, e))?;
    finish_csv(path, w)
}

/// Plain-text 8-bit PGM, scaled so the largest value maps to 255. Grid row 0
/// is the first image row.
pub fn pgm_string(values: &Array2<f64>) -> String {
    let (rows, cols) = values.dim();
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for row in values.outer_iter() {
        let pixels: Vec<String> = row
            .iter()
            .map(|v| {
                let p = if max > 0.0 && v.is_finite() {
                    (255.0 * v.max(0.0) / max).round()
                } else {
                    0.0
                };
                (p as u8).to_string()
            })
            .collect();
        for chunk in pixels.chunks(PGM_VALUES_PER_LINE) {
            out.push_str(&chunk.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn write_pgm(path: &Path, values: &Array2<f64>) -> Result<()> {
    write_text(path, &pgm_string(values))
}

/// Parses a P2 image back into pixel values.
pub fn read_pgm(path: &Path) -> Result<Array2<u8>> {
    let text = read_text(path)?;
    let mut tokens = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(|t| (k + 1, t)));
    }
    let mut it = tokens.into_iter();
    match it.next() {
        Some((_, "P2")) => {}
        Some((line, other)) => return Err(parse_error(path, line, format!("expected P2, found `{other}`"))),
        None => return Err(parse_error(path, 1, "empty file")),
    }
    let mut next_num = |name: &str| -> Result<usize> {
        let (line, t) = it
            .next()
            .ok_or_else(|| parse_error(path, 0, format!("missing {name}")))?;
        t.parse()
            .map_err(|_| parse_error(path, line, format!("cannot parse `{t}` as {name}")))
    };
    let cols = next_num("width")?;
    let rows = next_num("height")?;
    let maxval = next_num("maxval")?;
    let mut values = Array2::zeros((rows, cols));
    for v in values.iter_mut() {
        let p = next_num("pixel")?;
        if p > maxval || p > 255 {
            return Err(parse_error(path, 0, format!("pixel {p} exceeds maxval {maxval}")));
        }
        *v = p as u8;
    }
    Ok(values)
}
