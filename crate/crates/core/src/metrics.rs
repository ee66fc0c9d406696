//! CIDEr, QA accuracy, the task × step score matrix, forgetting ratios and
//! the end-of-run aggregates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ForgetAveraging;
use crate::error::{Error, Result};
use crate::types::TaskType;
use crate::vocab::normalize;

pub const CIDER_MAX_N: usize = 4;
const CIDER_D_SIGMA: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CiderVariant {
    /// Consensus cosine similarity of TF-IDF n-gram vectors.
    #[default]
    Plain,
    /// Clipped counts and a gaussian length penalty.
    D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    /// One score per candidate, on the 0–10 scale.
    pub per_item: Vec<f64>,
    pub corpus: f64,
}

type Counts = BTreeMap<Vec<String>, f64>;

fn ngram_counts(words: &[String], n: usize) -> Counts {
    let mut c = Counts::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *c.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    c
}

fn tokens(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(String::from).collect()
}

/// CIDEr over `(id, candidate)` pairs. Document frequencies come from the
/// references of all items in `references`.
pub fn cider(
    candidates: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
    variant: CiderVariant,
) -> Result<CiderScores> {
    for (id, _) in candidates {
        if references.get(id).map_or(true, |r| r.is_empty()) {
            return Err(Error::MissingReference(id.clone()));
        }
    }
    let n_docs = references.len() as f64;
    let ref_tokens: BTreeMap<&String, Vec<Vec<String>>> = references
        .iter()
        .map(|(id, refs)| (id, refs.iter().map(|r| tokens(r)).collect()))
        .collect();
    // document frequency per n-gram: number of items whose references contain it
    let mut df: Vec<Counts> = vec![Counts::new(); CIDER_MAX_N];
    for refs in ref_tokens.values() {
        for n in 1..=CIDER_MAX_N {
            let mut seen: Vec<Vec<String>> = Vec::new();
            for r in refs {
                for g in ngram_counts(r, n).into_keys() {
                    if !seen.contains(&g) {
                        seen.push(g);
                    }
                }
            }
            for g in seen {
                *df[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let tfidf = |counts: Counts, n: usize| -> Counts {
        counts
            .into_iter()
            .map(|(g, tf)| {
                let d = df[n - 1].get(&g).copied().unwrap_or(0.0).max(1.0);
                let w = tf * (n_docs.ln() - d.ln());
                (g, w)
            })
            .collect()
    };
    let norm = |v: &Counts| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let mut per_item = Vec::with_capacity(candidates.len());
    for (id, cand) in candidates {
        let c_tok = tokens(cand);
        if c_tok.is_empty() {
            per_item.push(0.0);
            continue;
        }
        let refs = &ref_tokens[id];
        let mut total = 0.0;
        for n in 1..=CIDER_MAX_N {
            let cv = tfidf(ngram_counts(&c_tok, n), n);
            let cn = norm(&cv);
            let mut sum = 0.0;
            for r in refs {
                let rv = tfidf(ngram_counts(r, n), n);
                let rn = norm(&rv);
                if cn == 0.0 || rn == 0.0 {
                    continue;
                }
                let dot: f64 = cv
                    .iter()
                    .filter_map(|(g, &a)| {
                        rv.get(g).map(|&b| match variant {
                            CiderVariant::Plain => a * b,
                            CiderVariant::D => a.min(b) * b,
                        })
                    })
                    .sum();
                let mut s = dot / (cn * rn);
                if variant == CiderVariant::D {
                    let delta = c_tok.len() as f64 - r.len() as f64;
                    s *= (-(delta * delta) / (2.0 * CIDER_D_SIGMA * CIDER_D_SIGMA)).exp();
                }
                sum += s;
            }
            total += sum / refs.len() as f64;
        }
        per_item.push(10.0 * total / CIDER_MAX_N as f64);
    }
    let corpus = if per_item.is_empty() {
        0.0
    } else {
        per_item.iter().sum::<f64>() / per_item.len() as f64
    };
    Ok(CiderScores { per_item, corpus })
}

/// Percentage of normalized exact matches.
pub fn qa_accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], answers: &[T]) -> Result<f64> {
    if predictions.len() != answers.len() {
        return Err(Error::LengthMismatch(predictions.len(), answers.len()));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(answers)
        .filter(|(p, a)| normalize(p.as_ref()) == normalize(a.as_ref()))
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// `100 · (s_ii − s_iT) / s_ii`; negative values are kept.
pub fn forgetting_ratio(s_ii: f64, s_it: f64) -> Result<f64> {
    forgetting_ratio_for(0, s_ii, s_it)
}

fn forgetting_ratio_for(task: usize, s_ii: f64, s_it: f64) -> Result<f64> {
    if s_ii == 0.0 {
        return Err(Error::UndefinedRatio(task));
    }
    Ok(100.0 * (s_ii - s_it) / s_ii)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub index: usize,
    pub name: String,
    pub task_type: TaskType,
}

/// `s_i^j` for `1 ≤ i ≤ j ≤ T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreMatrix {
    pub tasks: Vec<TaskMeta>,
    pub meta: BTreeMap<String, String>,
    entries: BTreeMap<(usize, usize), f64>,
}

#[derive(Serialize, Deserialize)]
struct ScoreMatrixFile {
    meta: BTreeMap<String, String>,
    tasks: Vec<TaskMeta>,
    scores: BTreeMap<String, f64>,
}

impl ScoreMatrix {
    pub fn new(tasks: Vec<TaskMeta>) -> Self {
        Self {
            tasks,
            meta: BTreeMap::new(),
            entries: BTreeMap::new(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Record the score of task `task` after training step `step`.
    pub fn set(&mut self, task: usize, step: usize, score: f64) -> Result<()> {
        if task == 0 || task > step || step > self.tasks.len() {
            return Err(Error::UntrainedTask { task, step });
        }
        self.entries.insert((task, step), score);
        Ok(())
    }

    pub fn get(&self, task: usize, step: usize) -> Option<f64> {
        self.entries.get(&(task, step)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    /// Missing cells of the triangle through step `through`, as "s/i/j".
    pub fn missing(&self, through: usize) -> Vec<String> {
        let mut out = Vec::new();
        for j in 1..=through {
            for i in 1..=j {
                if !self.entries.contains_key(&(i, j)) {
                    out.push(format!("s/{i}/{j}"));
                }
            }
        }
        out
    }

    pub fn to_canonical_json(&self) -> String {
        let file = ScoreMatrixFile {
            meta: self.meta.clone(),
            tasks: self.tasks.clone(),
            scores: self
                .entries
                .iter()
                .map(|((i, j), v)| (format!("s/{i}/{j}"), *v))
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("score matrix serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScoreMatrixFile = serde_json::from_str(text)?;
        let mut m = ScoreMatrix::new(file.tasks);
        m.meta = file.meta;
        for (k, v) in file.scores {
            let parts: Vec<&str> = k.split('/').collect();
            let parsed = match parts.as_slice() {
                ["s", i, j] => i.parse::<usize>().ok().zip(j.parse::<usize>().ok()),
                _ => None,
            };
            let (i, j) = parsed.ok_or_else(|| Error::Malformed(format!("score key '{k}'")))?;
            m.set(i, j, v)?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean final CIDEr over captioning tasks, if any.
    pub avg_cider: Option<f64>,
    /// Mean final accuracy over QA tasks, if any.
    pub avg_acc: Option<f64>,
    pub avg_forget: f64,
    pub per_task_forget: Vec<f64>,
}

/// Final-column averages and forgetting ratios for a complete matrix.
pub fn aggregate(matrix: &ScoreMatrix, averaging: ForgetAveraging) -> Result<Aggregate> {
    let t = matrix.n_tasks();
    if t == 0 {
        return Err(Error::IncompleteMatrix("no tasks".into()));
    }
    let missing = matrix.missing(t);
    if !missing.is_empty() {
        return Err(Error::IncompleteMatrix(missing.join(", ")));
    }
    let mut caps = Vec::new();
    let mut accs = Vec::new();
    let mut per_task_forget = Vec::with_capacity(t);
    for (k, meta) in matrix.tasks.iter().enumerate() {
        let i = k + 1;
        let last = matrix.get(i, t).unwrap();
        match meta.task_type {
            TaskType::Captioning => caps.push(last),
            TaskType::Qa => accs.push(last),
        }
        per_task_forget.push(forgetting_ratio_for(i, matrix.get(i, i).unwrap(), last)?);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let counted = match averaging {
        ForgetAveraging::ExcludeLast if t > 1 => &per_task_forget[..t - 1],
        _ => &per_task_forget[..],
    };
    Ok(Aggregate {
        avg_cider: mean(&caps),
        avg_acc: mean(&accs),
        avg_forget: mean(counted).unwrap_or(0.0),
        per_task_forget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(pairs: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn cider_zero_overlap_and_missing_reference() {
        let r = refs(&[("a", &["a red circle"]), ("b", &["a blue square"])]);
        let s = cider(&[("a".into(), "green star moves".into())], &r, CiderVariant::Plain).unwrap();
        assert_eq!(s.per_item, vec![0.0]);
        assert!(matches!(
            cider(&[("z".into(), "x".into())], &r, CiderVariant::Plain),
            Err(Error::MissingReference(_))
        ));
        let e = cider(&[("a".into(), "".into())], &r, CiderVariant::Plain).unwrap();
        assert_eq!(e.per_item, vec![0.0]);
    }

    #[test]
    fn cider_reference_order_invariant() {
        let r1 = refs(&[("a", &["a red circle above a blue square", "a red circle"]), ("b", &["a loud bark"])]);
        let r2 = refs(&[("a", &["a red circle", "a red circle above a blue square"]), ("b", &["a loud bark"])]);
        let c = vec![("a".to_string(), "a red circle above a square".to_string())];
        let a = cider(&c, &r1, CiderVariant::Plain).unwrap().per_item[0];
        let b = cider(&c, &r2, CiderVariant::Plain).unwrap().per_item[0];
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0);
    }

    #[test]
    fn cider_d_penalizes_length_gap() {
        let r = refs(&[("a", &["a red circle above a blue square"]), ("b", &["a loud bark then a soft horn"])]);
        let c = vec![("a".to_string(), "a red circle above a blue square and a red circle".to_string())];
        let plain = cider(&c, &r, CiderVariant::Plain).unwrap().corpus;
        let d = cider(&c, &r, CiderVariant::D).unwrap().corpus;
        assert!(d < plain);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(qa_accuracy(&["red", "up"], &["red", "up"]).unwrap(), 100.0);
        assert_eq!(qa_accuracy(&["Red"], &["red"]).unwrap(), 100.0);
        assert_eq!(qa_accuracy(&["a", "b", "c", "d"], &["a", "x", "y", "z"]).unwrap(), 25.0);
        assert!(matches!(qa_accuracy(&["a"], &["a", "b"]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn forgetting_cases() {
        assert!((forgetting_ratio(77.50, 5.41).unwrap() - 93.02).abs() < 0.005);
        assert!((forgetting_ratio(40.75, 41.68).unwrap() + 2.28).abs() < 0.005);
        assert_eq!(forgetting_ratio(3.3, 3.3).unwrap(), 0.0);
        assert!(matches!(forgetting_ratio(0.0, 1.0), Err(Error::UndefinedRatio(_))));
    }

    fn meta(types: &[TaskType]) -> Vec<TaskMeta> {
        types
            .iter()
            .enumerate()
            .map(|(i, &t)| TaskMeta { index: i + 1, name: format!("t{}", i + 1), task_type: t })
            .collect()
    }

    #[test]
    fn triangle_and_json_round_trip() {
        let mut m = ScoreMatrix::new(meta(&[TaskType::Captioning, TaskType::Qa]));
        m.set(1, 1, 50.0).unwrap();
        m.set(1, 2, 40.0).unwrap();
        assert!(matches!(m.set(2, 1, 1.0), Err(Error::UntrainedTask { task: 2, step: 1 })));
        assert!(matches!(aggregate(&m, ForgetAveraging::ExcludeLast), Err(Error::IncompleteMatrix(s)) if s == "s/2/2"));
        m.set(2, 2, 80.0).unwrap();
        m.meta.insert("method".into(), "FINETUNE".into());
        let text = m.to_canonical_json();
        let back = ScoreMatrix::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_canonical_json(), text);
        let agg = aggregate(&m, ForgetAveraging::ExcludeLast).unwrap();
        assert_eq!(agg.avg_cider, Some(40.0));
        assert_eq!(agg.avg_acc, Some(80.0));
        assert!((agg.avg_forget - 20.0).abs() < 1e-12);
        let all = aggregate(&m, ForgetAveraging::AllTasks).unwrap();
        assert!((all.avg_forget - 10.0).abs() < 1e-12);
    }
}
