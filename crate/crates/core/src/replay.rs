//! Recompute forgetting ratios and final-column averages from a flat table
//! of step scores, one block per (method, order).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ForgetAveraging;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, Aggregate, ScoreMatrix, TaskMeta};
use crate::types::TaskType;

/// Step scores of six methods on two six-task orders, as published.
pub const PUBLISHED_STEP_SCORES: &str = include_str!("../fixtures/published_step_scores.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScoreRow {
    pub method: String,
    pub order: String,
    pub task: usize,
    pub name: String,
    #[serde(rename = "type")]
    pub task_type: String,
    pub step: usize,
    pub score: f64,
}

pub fn read_rows<R: Read>(reader: R) -> Result<Vec<StepScoreRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

pub fn load_rows(path: &Path) -> Result<Vec<StepScoreRow>> {
    read_rows(std::fs::File::open(path)?)
}

pub fn bundled_rows() -> Vec<StepScoreRow> {
    read_rows(PUBLISHED_STEP_SCORES.as_bytes()).expect("bundled fixture parses")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBlock {
    pub method: String,
    pub order: String,
    pub matrix: ScoreMatrix,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub blocks: Vec<ReplayBlock>,
}

impl ReplayReport {
    pub fn find(&self, method: &str, order: &str) -> Option<&ReplayBlock> {
        self.blocks
            .iter()
            .find(|b| b.method.eq_ignore_ascii_case(method) && b.order == order)
    }
}

/// Build one matrix per (method, order). With `through = Some(k)` only
/// tasks and steps up to `k` are kept, treating step `k` as the end.
pub fn build_matrices(rows: &[StepScoreRow], through: Option<usize>) -> Result<Vec<(String, String, ScoreMatrix)>> {
    let mut groups: BTreeMap<(String, String), Vec<&StepScoreRow>> = BTreeMap::new();
    for r in rows {
        if through.is_some_and(|k| r.step > k || r.task > k) {
            continue;
        }
        groups.entry((r.method.clone(), r.order.clone())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((method, order), rows) in groups {
        let n = rows.iter().map(|r| r.task.max(r.step)).max().unwrap_or(0);
        let mut names: BTreeMap<usize, (String, TaskType)> = BTreeMap::new();
        for r in &rows {
            let ty: TaskType = r.task_type.parse()?;
            if let Some((name, t)) = names.get(&r.task) {
                if *name != r.name || *t != ty {
                    return Err(Error::Malformed(format!(
                        "task {} of {method}/order {order} is both '{name}' and '{}'",
                        r.task, r.name
                    )));
                }
            } else {
                names.insert(r.task, (r.name.clone(), ty));
            }
        }
        for i in 1..=n {
            if !rows.iter().any(|r| r.task == i && r.step == i) {
                return Err(Error::MissingDiagonal {
                    method,
                    order,
                    task: i,
                });
            }
        }
        let tasks = (1..=n)
            .map(|i| {
                let (name, task_type) = names[&i].clone();
                TaskMeta {
                    index: i,
                    name,
                    task_type,
                }
            })
            .collect();
        let mut m = ScoreMatrix::new(tasks);
        m.meta.insert("method".into(), method.clone());
        m.meta.insert("order".into(), order.clone());
        for r in &rows {
            m.set(r.task, r.step, r.score)?;
        }
        out.push((method, order, m));
    }
    Ok(out)
}

pub fn replay_metrics(rows: &[StepScoreRow], through: Option<usize>, averaging: ForgetAveraging) -> Result<ReplayReport> {
    let blocks = build_matrices(rows, through)?
        .into_iter()
        .map(|(method, order, matrix)| {
            let aggregate = aggregate(&matrix, averaging)?;
            Ok(ReplayBlock {
                method,
                order,
                matrix,
                aggregate,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReplayReport { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixture_shape() {
        let rows = bundled_rows();
        assert_eq!(rows.len(), 2 * 6 * 21);
        let report = replay_metrics(&rows, None, ForgetAveraging::ExcludeLast).unwrap();
        assert_eq!(report.blocks.len(), 12);
        let b = report.find("MOINCL", "2").unwrap();
        assert!((b.aggregate.avg_forget - 8.93).abs() < 0.01);
        let lwf = report.find("LWF", "2").unwrap();
        assert!((lwf.aggregate.per_task_forget[0] - 91.20).abs() < 0.01);
    }

    #[test]
    fn constant_scores_give_zero_forgetting() {
        let mut rows = Vec::new();
        for i in 1..=3 {
            for j in i..=3 {
                rows.push(StepScoreRow {
                    method: "X".into(),
                    order: "1".into(),
                    task: i,
                    name: format!("t{i}"),
                    task_type: "CAP".into(),
                    step: j,
                    score: 10.0 * i as f64,
                });
            }
        }
        let r = replay_metrics(&rows, None, ForgetAveraging::ExcludeLast).unwrap();
        assert_eq!(r.blocks[0].aggregate.avg_forget, 0.0);
    }

    #[test]
    fn missing_diagonal_names_the_task() {
        let rows: Vec<_> = bundled_rows()
            .into_iter()
            .filter(|r| !(r.method == "EWC" && r.order == "1" && r.task == 3 && r.step == 3))
            .collect();
        let err = replay_metrics(&rows, None, ForgetAveraging::ExcludeLast).unwrap_err();
        match err {
            Error::MissingDiagonal { method, task, .. } => {
                assert_eq!(method, "EWC");
                assert_eq!(task, 3);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn truncation_treats_step_k_as_end() {
        let r = replay_metrics(&bundled_rows(), Some(3), ForgetAveraging::ExcludeLast).unwrap();
        let b = r.find("FINETUNE", "2").unwrap();
        assert_eq!(b.matrix.n_tasks(), 3);
        let want = 100.0 * (77.50 - 12.12) / 77.50;
        assert!((b.aggregate.per_task_forget[0] - want).abs() < 1e-9);
    }
}
