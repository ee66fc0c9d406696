//! Plain-text and CSV renderings of score matrices and aggregates.

use std::fmt::Write;

use crate::metrics::{Aggregate, ScoreMatrix};
use crate::replay::{ReplayReport, StepScoreRow};

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width = vec![0; cols];
    for r in std::iter::once(header).chain(rows.iter().map(|r| r.as_slice())) {
        for (k, c) in r.iter().enumerate() {
            width[k] = width[k].max(c.chars().count());
        }
    }
    let line = |r: &[String]| {
        r.iter()
            .enumerate()
            .map(|(k, c)| {
                if k == 0 {
                    format!("{c:<w$}", w = width[k])
                } else {
                    format!("{c:>w$}", w = width[k])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Step-by-task table: one row per step, one column per task.
pub fn render_matrix(matrix: &ScoreMatrix) -> String {
    let t = matrix.n_tasks();
    let mut header = vec![String::new()];
    header.extend(matrix.tasks.iter().map(|m| m.name.clone()));
    let rows: Vec<Vec<String>> = (1..=t)
        .map(|j| {
            let mut r = vec![format!("Step {j}")];
            r.extend((1..=t).map(|i| fmt_opt(matrix.get(i, j))));
            r
        })
        .collect();
    table(&header, &rows)
}

pub fn render_aggregate(matrix: &ScoreMatrix, agg: &Aggregate) -> String {
    let mut header = vec!["Forget.".to_string()];
    header.extend(matrix.tasks.iter().map(|m| m.name.clone()));
    let mut row = vec![String::new()];
    row.extend(agg.per_task_forget.iter().map(|f| format!("{f:.2}%")));
    let mut out = table(&header, &[row]);
    let _ = writeln!(
        out,
        "Avg. CIDEr {}  Avg. Acc. {}  Avg. Forget. {:.2}%",
        fmt_opt(agg.avg_cider),
        fmt_opt(agg.avg_acc),
        agg.avg_forget
    );
    out
}

/// Aggregate table plus one forgetting table per order.
pub fn render_replay(report: &ReplayReport) -> String {
    let mut out = String::new();
    let mut orders: Vec<&str> = report.blocks.iter().map(|b| b.order.as_str()).collect();
    orders.dedup();
    for order in orders {
        let blocks: Vec<_> = report.blocks.iter().filter(|b| b.order == order).collect();
        let _ = writeln!(out, "Order {order}");
        let header: Vec<String> = ["Method", "Avg. CIDEr", "Avg. Acc.", "Avg. Forget."]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = blocks
            .iter()
            .map(|b| {
                vec![
                    b.method.clone(),
                    fmt_opt(b.aggregate.avg_cider),
                    fmt_opt(b.aggregate.avg_acc),
                    format!("{:.2}%", b.aggregate.avg_forget),
                ]
            })
            .collect();
        out.push_str(&table(&header, &rows));
        out.push('\n');
        let mut header = vec!["Forget.".to_string()];
        header.extend(blocks[0].matrix.tasks.iter().map(|m| m.name.clone()));
        let rows: Vec<Vec<String>> = blocks
            .iter()
            .map(|b| {
                let mut r = vec![b.method.clone()];
                r.extend(b.aggregate.per_task_forget.iter().map(|f| format!("{f:.2}%")));
                r
            })
            .collect();
        out.push_str(&table(&header, &rows));
        out.push('\n');
    }
    out
}

/// Flatten a matrix into replay rows.
pub fn matrix_rows(matrix: &ScoreMatrix, method: &str, order: &str) -> Vec<StepScoreRow> {
    let mut rows: Vec<StepScoreRow> = matrix
        .entries()
        .map(|((i, j), score)| {
            let meta = &matrix.tasks[i - 1];
            StepScoreRow {
                method: method.to_string(),
                order: order.to_string(),
                task: i,
                name: meta.name.clone(),
                task_type: meta.task_type.short().to_string(),
                step: j,
                score,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.step, r.task));
    rows
}

pub fn rows_to_csv(rows: &[StepScoreRow]) -> crate::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
