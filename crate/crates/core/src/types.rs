//! Domain types shared by every stage of a run: task descriptors, samples,
//! pseudo samples and the learned-modality / learned-task-type state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::syndata::Payload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "IMG")]
    Image,
    #[serde(rename = "AUD")]
    Audio,
    #[serde(rename = "VID")]
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Audio, Modality::Video];

    pub fn code(self) -> &'static str {
        match self {
            Modality::Image => "IMG",
            Modality::Audio => "AUD",
            Modality::Video => "VID",
        }
    }

    /// Word used in instructions and prompts ("describe the image").
    pub fn word(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "img" | "image" => Ok(Modality::Image),
            "aud" | "audio" => Ok(Modality::Audio),
            "vid" | "video" => Ok(Modality::Video),
            other => Err(Error::UnknownModality(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "CAPTIONING")]
    Captioning,
    #[serde(rename = "QA")]
    Qa,
}

impl TaskType {
    pub fn code(self) -> &'static str {
        match self {
            TaskType::Captioning => "CAPTIONING",
            TaskType::Qa => "QA",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            TaskType::Captioning => "CAP",
            TaskType::Qa => "QA",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cap" | "captioning" | "caption" => Ok(TaskType::Captioning),
            "qa" => Ok(TaskType::Qa),
            other => Err(Error::UnknownTaskType(other.to_string())),
        }
    }
}

/// One incremental task of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    /// 1-based position in the task order.
    pub index: usize,
    pub modality: Modality,
    pub task_type: TaskType,
    pub dataset_id: String,
    pub n_samples: usize,
}

impl TaskDescriptor {
    pub fn new(index: usize, modality: Modality, task_type: TaskType, n_samples: usize) -> Self {
        let dataset_id = format!(
            "{}-{}",
            modality.code().to_ascii_lowercase(),
            task_type.short().to_ascii_lowercase()
        );
        Self {
            index,
            modality,
            task_type,
            dataset_id,
            n_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.index == 0 {
            return Err(Error::InvalidConfig("task index must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig(format!(
                "task {} has n_samples = 0",
                self.index
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.modality.code(), self.task_type.short())
    }
}

/// A training or test record `(x, t, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub modality_input: Payload,
    pub input_text: String,
    pub target_text: String,
}

/// A generated rehearsal record `(x, t̃, ỹ)` for a previously learned task type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSample {
    pub modality_input: Payload,
    pub pseudo_input_text: String,
    pub pseudo_target_text: String,
    pub source_task_type: TaskType,
}

/// Learned modalities `LM` and per-modality learned task types `LT_M`.
///
/// Values are immutable; updates return a new state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnedState {
    pub learned_modalities: BTreeSet<Modality>,
    pub learned_types: BTreeMap<Modality, BTreeSet<TaskType>>,
}

impl LearnedState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Task-start update: an unseen modality gets an empty `LT` entry.
    pub fn begin_task(&self, task: &TaskDescriptor) -> LearnedState {
        let mut next = self.clone();
        if !next.learned_modalities.contains(&task.modality) {
            next.learned_types.insert(task.modality, BTreeSet::new());
        }
        next
    }

    /// Task-end commit of `(M_i, P_i)`.
    pub fn commit_task(&self, task: &TaskDescriptor) -> LearnedState {
        let mut next = self.clone();
        next.learned_modalities.insert(task.modality);
        next.learned_types
            .entry(task.modality)
            .or_default()
            .insert(task.task_type);
        next
    }

    pub fn has_modality(&self, m: Modality) -> bool {
        self.learned_modalities.contains(&m)
    }

    pub fn types_of(&self, m: Modality) -> BTreeSet<TaskType> {
        self.learned_types.get(&m).cloned().unwrap_or_default()
    }

    /// `LT_{M_i} \ {P_i}` when `M_i ∈ LM`, otherwise empty.
    pub fn rehearsable_types(&self, task: &TaskDescriptor) -> Vec<TaskType> {
        if !self.has_modality(task.modality) {
            return Vec::new();
        }
        self.types_of(task.modality)
            .into_iter()
            .filter(|p| *p != task.task_type)
            .collect()
    }

    /// Component-wise superset test.
    pub fn is_superset_of(&self, other: &LearnedState) -> bool {
        other.learned_modalities.is_subset(&self.learned_modalities)
            && other.learned_types.iter().all(|(m, types)| {
                self.learned_types
                    .get(m)
                    .map(|mine| types.is_subset(mine))
                    .unwrap_or(false)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(i: usize, m: Modality, p: TaskType) -> TaskDescriptor {
        TaskDescriptor::new(i, m, p, 10)
    }

    #[test]
    fn first_task_commit() {
        let s = LearnedState::new();
        let t = task(1, Modality::Audio, TaskType::Captioning);
        let started = s.begin_task(&t);
        assert!(started.learned_modalities.is_empty());
        assert_eq!(started.types_of(Modality::Audio).len(), 0);
        let done = started.commit_task(&t);
        assert_eq!(done.learned_modalities, BTreeSet::from([Modality::Audio]));
        assert_eq!(
            done.types_of(Modality::Audio),
            BTreeSet::from([TaskType::Captioning])
        );
    }

    #[test]
    fn same_modality_union() {
        let s = LearnedState::new().commit_task(&task(1, Modality::Audio, TaskType::Captioning));
        let t = task(2, Modality::Audio, TaskType::Qa);
        let s2 = s.begin_task(&t);
        assert_eq!(s2, s);
        assert_eq!(s2.rehearsable_types(&t), vec![TaskType::Captioning]);
        let s3 = s2.commit_task(&t);
        assert_eq!(
            s3.types_of(Modality::Audio),
            BTreeSet::from([TaskType::Captioning, TaskType::Qa])
        );
    }

    #[test]
    fn commit_is_idempotent() {
        let t = task(1, Modality::Image, TaskType::Qa);
        let once = LearnedState::new().commit_task(&t);
        let twice = once.commit_task(&t);
        assert_eq!(once, twice);
    }

    #[test]
    fn monotone_over_a_run() {
        let order = [
            (Modality::Image, TaskType::Captioning),
            (Modality::Video, TaskType::Captioning),
            (Modality::Video, TaskType::Qa),
            (Modality::Image, TaskType::Qa),
            (Modality::Audio, TaskType::Captioning),
            (Modality::Audio, TaskType::Qa),
        ];
        let mut state = LearnedState::new();
        for (i, (m, p)) in order.iter().enumerate() {
            let t = task(i + 1, *m, *p);
            let next = state.begin_task(&t).commit_task(&t);
            assert!(next.is_superset_of(&state));
            for m in next.learned_types.keys() {
                assert!(next.learned_modalities.contains(m));
            }
            state = next;
        }
    }

    #[test]
    fn parse_codes() {
        assert_eq!("IMG".parse::<Modality>().unwrap(), Modality::Image);
        assert_eq!("audio".parse::<Modality>().unwrap(), Modality::Audio);
        assert!("depth".parse::<Modality>().is_err());
        assert_eq!("CAP".parse::<TaskType>().unwrap(), TaskType::Captioning);
    }
}
