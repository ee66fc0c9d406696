//! Static SVG charts: score against step for every task, and per-task
//! forgetting as bars.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{Aggregate, ScoreMatrix};

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// One line per task, from the step it was trained onward.
pub fn score_lines(matrix: &ScoreMatrix, title: &str, path: &Path) -> Result<()> {
    let t = matrix.n_tasks();
    if t == 0 {
        return Err(Error::IncompleteMatrix("no tasks".into()));
    }
    let ymax = matrix.entries().map(|(_, s)| s).fold(1.0f64, f64::max) * 1.1;
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0.5f64..t as f64 + 0.5, 0f64..ymax)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("score")
        .x_labels(t)
        .draw()
        .map_err(plot_err)?;
    for (k, meta) in matrix.tasks.iter().enumerate() {
        let i = k + 1;
        let color = Palette99::pick(k).to_rgba();
        let pts: Vec<(f64, f64)> = (i..=t)
            .filter_map(|j| matrix.get(i, j).map(|s| (j as f64, s)))
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(meta.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Forgetting ratio per task as vertical bars; negative bars go below zero.
pub fn forgetting_bars(matrix: &ScoreMatrix, agg: &Aggregate, title: &str, path: &Path) -> Result<()> {
    let n = agg.per_task_forget.len();
    if n == 0 || n != matrix.n_tasks() {
        return Err(Error::LengthMismatch(n, matrix.n_tasks()));
    }
    let hi = agg.per_task_forget.iter().cloned().fold(10.0f64, f64::max) * 1.1;
    let lo = agg.per_task_forget.iter().cloned().fold(0.0f64, f64::min) * 1.1;
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..n as f64, lo..hi)
        .map_err(plot_err)?;
    let names: Vec<String> = matrix.tasks.iter().map(|m| m.name.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n * 2 + 1)
        .x_label_formatter(&|x| {
            let k = x.floor() as usize;
            if (x - k as f64 - 0.5).abs() < 1e-6 && k < names.len() {
                names[k].clone()
            } else {
                String::new()
            }
        })
        .y_desc("forgetting %")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(agg.per_task_forget.iter().enumerate().map(|(k, &f)| {
            let x = k as f64;
            Rectangle::new([(x + 0.15, 0.0), (x + 0.85, f)], Palette99::pick(k).filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
