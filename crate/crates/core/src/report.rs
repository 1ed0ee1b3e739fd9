//! Static SVG charts for a run directory or a sweep directory.

use std::fs::File;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::read_metrics;
use crate::runner::{read_sweep_summary, sweep_runs, METRICS_FILE, SWEEP_SUMMARY_FILE};
use crate::types::MetricsRecord;

type Series = (String, Vec<(f64, f64)>);
type Metric = fn(&MetricsRecord) -> f64;

/// Loads a run's metrics, rejecting files without any rows.
pub fn load_run(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = dir.join(METRICS_FILE);
    let file = File::open(&path).map_err(|e| Error::Sink(format!("{}: {e}", path.display())))?;
    let rows = read_metrics(file)?;
    if rows.is_empty() {
        return Err(Error::Sink(format!(
            "{} has no metric rows",
            path.display()
        )));
    }
    Ok(rows)
}

fn series(history: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> f64) -> Vec<(f64, f64)> {
    history.iter().map(|r| (r.step as f64, f(r))).collect()
}

fn line_chart(path: &Path, title: &str, y_label: &str, lines: &[Series]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let points = lines.iter().flat_map(|(_, pts)| pts.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-3);

    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (name, pts)) in lines.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Renders `entropy.svg`, `pass_at_1.svg` and `zero_adv_fraction.svg` for
/// a single run.
pub fn render_run(dir: &Path) -> Result<Vec<PathBuf>> {
    let h = load_run(dir)?;
    let charts: [(&str, &str, &str, Vec<Series>); 3] = [
        (
            "entropy.svg",
            "Policy entropy",
            "entropy (nats)",
            vec![
                ("total".into(), series(&h, |r| r.entropy_total)),
                (
                    "positive advantage".into(),
                    series(&h, |r| r.entropy_pos_adv),
                ),
                (
                    "negative advantage".into(),
                    series(&h, |r| r.entropy_neg_adv),
                ),
            ],
        ),
        (
            "pass_at_1.svg",
            "pass@1",
            "pass@1",
            vec![("pass@1".into(), series(&h, |r| r.pass_at_1))],
        ),
        (
            "zero_adv_fraction.svg",
            "Zero-advantage fraction",
            "fraction",
            vec![("zero advantage".into(), series(&h, |r| r.zero_adv_fraction))],
        ),
    ];
    let mut written = Vec::new();
    for (file, title, y, lines) in charts {
        let path = dir.join(file);
        line_chart(&path, title, y, &lines)?;
        written.push(path);
    }
    Ok(written)
}

// Step-wise mean over the runs of one axis value, truncated to the shortest.
fn seed_average(runs: &[Vec<MetricsRecord>], f: Metric) -> Vec<(f64, f64)> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|t| {
            let mean = runs.iter().map(|r| f(&r[t])).sum::<f64>() / runs.len() as f64;
            (runs[0][t].step as f64, mean)
        })
        .collect()
}

/// Renders one overlay chart per metric with one seed-averaged series per
/// axis value.
pub fn render_sweep(dir: &Path) -> Result<Vec<PathBuf>> {
    let groups = sweep_runs(dir)?;
    let axis = read_sweep_summary(&dir.join(SWEEP_SUMMARY_FILE))?
        .first()
        .map_or("value", |r| r.axis.name());
    if groups.is_empty() {
        return Err(Error::Sink("sweep has no successful runs".into()));
    }
    let mut loaded = Vec::new();
    for (value, paths) in &groups {
        let runs = paths
            .iter()
            .map(|p| load_run(p))
            .collect::<Result<Vec<_>>>()?;
        loaded.push((*value, runs));
    }
    let metrics: [(&str, &str, Metric); 3] = [
        ("entropy_overlay.svg", "Policy entropy", |r| r.entropy_total),
        ("pass_at_1_overlay.svg", "pass@1", |r| r.pass_at_1),
        (
            "zero_adv_fraction_overlay.svg",
            "Zero-advantage fraction",
            |r| r.zero_adv_fraction,
        ),
    ];
    let mut written = Vec::new();
    for (file, title, f) in metrics {
        let lines: Vec<Series> = loaded
            .iter()
            .map(|(v, runs)| (format!("{axis}={v}"), seed_average(runs, f)))
            .collect();
        let path = dir.join(file);
        line_chart(&path, title, title, &lines)?;
        written.push(path);
    }
    Ok(written)
}

/// Renders a sweep directory if it has a summary, otherwise a run.
pub fn render(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(SWEEP_SUMMARY_FILE).exists() {
        render_sweep(dir)
    } else {
        render_run(dir)
    }
}
