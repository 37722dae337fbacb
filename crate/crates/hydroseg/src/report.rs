//! Text tables and SVG curves built from run logs alone.

use std::path::{Path, PathBuf};

use hydroseg_core::metrics::{EvalReport, RunStats};
use hydroseg_core::trainer::LogRecord;
use plotters::prelude::*;

use crate::error::{format_err, io_err, Error, Result};
use crate::logs::read_log;

pub const LOG_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.json";

/// A markdown table with an optional title line.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTable {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Self { title: title.into(), headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = (0..cols)
                .map(|i| {
                    let c = cells.get(i).map(String::as_str).unwrap_or("");
                    format!("{c}{}", " ".repeat(width[i] - c.chars().count()))
                })
                .collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            out.push_str(&format!("{}\n\n", self.title));
        }
        out.push_str(&line(&self.headers));
        let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        for row in &self.rows {
            out.push_str(&line(row));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(io_err(path))
    }
}

pub fn mean_var(stats: &RunStats) -> String {
    format!("{:.4} ± {:.1e}", stats.mean, stats.variance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One line per series, one colour each.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x0 > x1 {
        return Err(format_err(path, "nothing to plot"));
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let plot_err = |e: &dyn std::fmt::Display| format_err(path, e.to_string());
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// A run directory's log and final evaluation.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub name: String,
    pub dir: PathBuf,
    pub records: Vec<LogRecord>,
    pub eval: Option<EvalReport>,
}

impl RunLog {
    pub fn load(dir: &Path, name: String) -> Result<Self> {
        let records = read_log(&dir.join(LOG_FILE))?;
        let eval_path = dir.join(EVAL_FILE);
        let eval = if eval_path.exists() {
            let text = std::fs::read_to_string(&eval_path).map_err(io_err(&eval_path))?;
            Some(serde_json::from_str(&text).map_err(|e| format_err(&eval_path, e.to_string()))?)
        } else {
            None
        };
        Ok(Self { name, dir: dir.to_path_buf(), records, eval })
    }

    fn epoch_series(&self, f: impl Fn(&LogRecord) -> Option<(usize, f64)>) -> Series {
        Series {
            name: self.name.clone(),
            points: self.records.iter().filter_map(&f).map(|(e, v)| (e as f64 + 1.0, v)).collect(),
        }
    }
}

/// Expands each directory into run logs: the directory itself when it holds
/// a log, otherwise its immediate and second-level subdirectories that do.
pub fn collect_runs(dirs: &[PathBuf]) -> Result<Vec<RunLog>> {
    if dirs.is_empty() {
        return Err(Error::Run("no run directories given".into()));
    }
    let mut out = Vec::new();
    for dir in dirs {
        let found = find_runs(dir, 2)?;
        if found.is_empty() {
            return Err(format_err(dir, format!("no {LOG_FILE} found")));
        }
        for run in found {
            let rel = run.strip_prefix(dir).unwrap_or(&run);
            let base = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
            let name = if rel.as_os_str().is_empty() { base } else { format!("{base}/{}", rel.display()) };
            out.push(RunLog::load(&run, name)?);
        }
    }
    Ok(out)
}

fn find_runs(dir: &Path, depth: usize) -> Result<Vec<PathBuf>> {
    if dir.join(LOG_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    if depth == 0 || !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut out = Vec::new();
    for d in subdirs {
        out.extend(find_runs(&d, depth - 1)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub plots: Vec<PathBuf>,
    pub table: PathBuf,
}

/// Curves of validation IOU, held-out IOU, loss and class occupancy per
/// epoch, plus a summary table. Plots with no data are skipped.
pub fn render_report(runs: &[RunLog], out: &Path) -> Result<ReportFiles> {
    if runs.is_empty() {
        return Err(Error::Run("no runs to report".into()));
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    type Pick = fn(&LogRecord) -> Option<(usize, f64)>;
    let plots: [(&str, &str, &str, Pick); 4] = [
        ("val_iou.svg", "Validation IOU", "IOU", |r| match r {
            LogRecord::Epoch(e) => e.val_iou.map(|v| (e.epoch, v)),
            _ => None,
        }),
        ("test_iou.svg", "Held-out IOU", "IOU", |r| match r {
            LogRecord::Evaluation(e) => Some((e.epoch, e.dataset_iou)),
            _ => None,
        }),
        ("loss.svg", "Training loss", "mean loss", |r| match r {
            LogRecord::Epoch(e) => Some((e.epoch, e.mean_loss)),
            _ => None,
        }),
        ("occupancy.svg", "Occupied pseudo-label classes per batch", "classes", |r| match r {
            LogRecord::Epoch(e) if e.mean_occupied_classes > 0.0 => Some((e.epoch, e.mean_occupied_classes)),
            _ => None,
        }),
    ];
    let mut written = Vec::new();
    for (file, title, y_label, pick) in plots {
        let series: Vec<Series> = runs.iter().map(|r| r.epoch_series(pick)).filter(|s| !s.points.is_empty()).collect();
        if series.is_empty() {
            continue;
        }
        let path = out.join(file);
        line_plot(&path, title, "epoch", y_label, &series)?;
        written.push(path);
    }

    let mut table = TextTable::new(
        "Run summary",
        &["run", "epochs", "final loss", "final val IOU", "best val IOU", "test IOU"],
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for run in runs {
        let epochs: Vec<_> = crate::logs::epochs(&run.records);
        let best = epochs.iter().filter_map(|e| e.val_iou).fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.max(v))));
        table.push(vec![
            run.name.clone(),
            epochs.len().to_string(),
            fmt(epochs.last().map(|e| e.mean_loss)),
            fmt(epochs.last().and_then(|e| e.val_iou)),
            fmt(best),
            fmt(run.eval.as_ref().map(|e| e.dataset_iou)),
        ]);
    }
    let table_path = out.join("summary.md");
    table.write(&table_path)?;
    Ok(ReportFiles { plots: written, table: table_path })
}
