//! SVG figures: return curves with 95% bands, and convergence box plots.

use super::stats::{best_fraction, box_stats, BoxStats};
use super::{summarize_curves, HarnessError, MetricsRow, SummaryRow};
use plotters::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const RETURNS_FIGURE: &str = "returns.svg";
pub const CONVERGENCE_FIGURE: &str = "convergence.svg";

const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];
const MEDIAN_COLOR: RGBColor = RGBColor(255, 127, 14);
const MEAN_COLOR: RGBColor = RGBColor(44, 160, 44);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotOptions {
    pub bucket: u64,
    /// Keep only the fastest-converging 80% of runs in the box plot.
    pub best_80: bool,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            bucket: 1_000,
            best_80: false,
        }
    }
}

/// Per algorithm: run count and each converged run's steps.
pub fn convergence_samples(rows: &[MetricsRow]) -> BTreeMap<String, (usize, Vec<f64>)> {
    let mut runs: BTreeMap<&str, BTreeMap<usize, Option<u64>>> = BTreeMap::new();
    for r in rows {
        runs.entry(&r.algorithm)
            .or_default()
            .insert(r.run_id, r.steps_to_convergence);
    }
    runs.into_iter()
        .map(|(a, m)| {
            let steps = m.values().filter_map(|s| s.map(|v| v as f64)).collect();
            (a.to_string(), (m.len(), steps))
        })
        .collect()
}

/// Box statistics per algorithm, after the optional best-80% filter.
pub fn box_series(rows: &[MetricsRow], best_80: bool) -> Vec<(String, usize, Option<BoxStats>)> {
    convergence_samples(rows)
        .into_iter()
        .map(|(algo, (n_runs, steps))| {
            let kept = if best_80 {
                best_fraction(&steps, n_runs, 0.8)
            } else {
                steps
            };
            (algo, n_runs, box_stats(&kept))
        })
        .collect()
}

fn draw_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_path_buf(),
        msg: format!("{e:?}"),
    }
}

fn line_chart(path: &Path, curves: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut by_algo: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for s in curves {
        by_algo.entry(&s.algorithm).or_default().push(s);
    }
    let x_max = curves.iter().map(|s| s.step).max().unwrap_or(1) as f64;
    let lo = curves
        .iter()
        .map(|s| s.mean_return - s.ci95)
        .fold(f64::INFINITY, f64::min);
    let hi = curves
        .iter()
        .map(|s| s.mean_return + s.ci95)
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1.0);
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err(path))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .caption("Mean return on the target task", ("sans-serif", 20))
        .build_cartesian_2d(0.0..x_max, (lo - pad)..(hi + pad))
        .map_err(draw_err(path))?;
    chart
        .configure_mesh()
        .x_desc("environment steps (including generation overhead)")
        .y_desc("return")
        .draw()
        .map_err(draw_err(path))?;
    for (i, (algo, pts)) in by_algo.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut band: Vec<(f64, f64)> = pts
            .iter()
            .map(|s| (s.step as f64, s.mean_return + s.ci95))
            .collect();
        band.extend(pts.iter().rev().map(|s| (s.step as f64, s.mean_return - s.ci95)));
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
            .map_err(draw_err(path))?;
        chart
            .draw_series(LineSeries::new(
                pts.iter().map(|s| (s.step as f64, s.mean_return)),
                color.stroke_width(2),
            ))
            .map_err(draw_err(path))?
            .label(*algo)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(draw_err(path))?;
    root.present().map_err(draw_err(path))
}

fn box_chart(
    path: &Path,
    series: &[(String, usize, Option<BoxStats>)],
    best_80: bool,
) -> Result<(), HarnessError> {
    let y_max = series
        .iter()
        .filter_map(|(_, _, b)| b.map(|b| b.whisker_hi.max(b.mean)))
        .fold(1.0, f64::max)
        * 1.15;
    let n = series.len().max(1) as f64;
    let title = if best_80 {
        "Steps to convergence (fastest 80% of runs)"
    } else {
        "Steps to convergence"
    };
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err(path))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .caption(title, ("sans-serif", 20))
        .build_cartesian_2d(0.0..n, 0.0..y_max)
        .map_err(draw_err(path))?;
    let names: Vec<String> = series.iter().map(|(a, _, _)| a.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(series.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = (x - 0.5).round();
            if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < names.len() {
                names[i as usize].clone()
            } else {
                String::new()
            }
        })
        .y_desc("steps")
        .draw()
        .map_err(draw_err(path))?;
    for (i, (_, n_runs, stats)) in series.iter().enumerate() {
        let c = i as f64 + 0.5;
        let converged = stats.map_or(0, |b| b.n);
        let rate = if best_80 {
            format!("{converged} of {n_runs} runs")
        } else {
            format!("{:.0}% converged", 100.0 * converged as f64 / *n_runs as f64)
        };
        let label_y = stats.map_or(y_max * 0.05, |b| b.whisker_hi + y_max * 0.03);
        chart
            .draw_series(std::iter::once(Text::new(
                rate,
                (c - 0.25, label_y),
                ("sans-serif", 14).into_font(),
            )))
            .map_err(draw_err(path))?;
        let Some(b) = stats else { continue };
        let w = 0.3;
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(c - w, b.q1), (c + w, b.q3)],
                BLACK.stroke_width(1),
            )))
            .map_err(draw_err(path))?;
        let whiskers = [
            vec![(c, b.q3), (c, b.whisker_hi)],
            vec![(c, b.q1), (c, b.whisker_lo)],
            vec![(c - w / 2.0, b.whisker_hi), (c + w / 2.0, b.whisker_hi)],
            vec![(c - w / 2.0, b.whisker_lo), (c + w / 2.0, b.whisker_lo)],
        ];
        chart
            .draw_series(whiskers.into_iter().map(|p| PathElement::new(p, BLACK)))
            .map_err(draw_err(path))?;
        chart
            .draw_series(std::iter::once(PathElement::new(
                vec![(c - w, b.median), (c + w, b.median)],
                MEDIAN_COLOR.stroke_width(2),
            )))
            .map_err(draw_err(path))?;
        // dotted mean line as short dashes
        let dashes = (0..12).map(|k| {
            let x0 = c - w + 2.0 * w * k as f64 / 12.0;
            PathElement::new(
                vec![(x0, b.mean), (x0 + w / 12.0, b.mean)],
                MEAN_COLOR.stroke_width(2),
            )
        });
        chart.draw_series(dashes).map_err(draw_err(path))?;
    }
    root.present().map_err(draw_err(path))
}

/// Writes the return curve and the convergence box plot into `dir`.
/// Returns no paths, after a warning, when there are no rows.
pub fn emit_plots(
    rows: &[MetricsRow],
    dir: &Path,
    options: PlotOptions,
) -> Result<Vec<PathBuf>, HarnessError> {
    if rows.is_empty() {
        log::warn!("no metrics rows; nothing to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let curves = summarize_curves(rows, options.bucket);
    let returns = dir.join(RETURNS_FIGURE);
    line_chart(&returns, &curves)?;
    let conv = dir.join(CONVERGENCE_FIGURE);
    box_chart(&conv, &box_series(rows, options.best_80), options.best_80)?;
    Ok(vec![returns, conv])
}
