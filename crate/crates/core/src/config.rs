//! Run configuration: task order, strategy, loss weights, optimizer and
//! model dimensions. Read from TOML, echoed as canonical JSON.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::syndata::SplitSizes;
use crate::types::{Modality, TaskDescriptor, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Finetune,
    Lwf,
    Ewc,
    Ewf,
    Moincl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Finetune,
        Method::Lwf,
        Method::Ewc,
        Method::Ewf,
        Method::Moincl,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Method::Finetune => "FINETUNE",
            Method::Lwf => "LWF",
            Method::Ewc => "EWC",
            Method::Ewf => "EWF",
            Method::Moincl => "MOINCL",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "FINETUNE" | "FT" => Ok(Method::Finetune),
            "LWF" => Ok(Method::Lwf),
            "EWC" => Ok(Method::Ewc),
            "EWF" => Ok(Method::Ewf),
            "MOINCL" => Ok(Method::Moincl),
            _ => Err(Error::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FusionMode {
    PerStep,
    EndOfTask,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QaBackendKind {
    GrammarOracle,
    LmPrompted,
}

/// How the average forgetting ratio is taken over tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ForgetAveraging {
    /// Mean over tasks `1..T−1`; the final task is excluded.
    #[default]
    ExcludeLast,
    /// Mean over all `T` tasks.
    AllTasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub rank: usize,
    pub feat_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            context: 64,
            rank: 8,
            feat_dim: 32,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("model dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_ff == 0 || self.rank == 0 || self.feat_dim == 0 {
            return bad("d_ff, rank and feat_dim must be positive");
        }
        if self.context < 8 {
            return bad("context must be at least 8");
        }
        Ok(())
    }
}

/// Per-task overrides of the loss weights and the fusion coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOverride {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_p_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

// Scalars come before nested tables so the TOML emitter can write them.
// Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    /// Weight of the pseudo-target loss.
    pub lambda_p: f64,
    /// Weight of the instruction distillation loss.
    pub lambda_p_prime: f64,
    /// Fusion coefficient; `None` picks the mode's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub fusion_mode: FusionMode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub ewc_lambda: f64,
    pub lwf_weight: f64,
    /// EWF's end-of-task fusion coefficient.
    pub ewf_alpha: f64,
    pub grad_clip: f64,
    pub fisher_batches: usize,
    pub max_gen_len: usize,
    pub qa_backend: QaBackendKind,
    pub forget_averaging: ForgetAveraging,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Text lines of the form "<caption> <question> <answer>" mixed into
    /// base pretraining; 0 pretrains on instructions alone.
    pub pretrain_context_lines: usize,
    /// Optional instruction corpus file; the bundled set is used otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions_path: Option<String>,
    pub model: ModelDims,
    pub splits: SplitSizes,
    pub task_order: Vec<TaskDescriptor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub task_overrides: Vec<TaskOverride>,
}

/// Build a task order from `(modality, type)` pairs.
pub fn task_order(pairs: &[(Modality, TaskType)], sizes: SplitSizes) -> Vec<TaskDescriptor> {
    let n = sizes.train + sizes.val + sizes.test;
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(m, p))| TaskDescriptor::new(i + 1, m, p, n))
        .collect()
}

/// The default six-task order: IMG-CAP → VID-CAP → VID-QA → IMG-QA → AUD-CAP → AUD-QA.
pub fn default_order_pairs() -> Vec<(Modality, TaskType)> {
    use Modality::*;
    use TaskType::*;
    vec![
        (Image, Captioning),
        (Video, Captioning),
        (Video, Qa),
        (Image, Qa),
        (Audio, Captioning),
        (Audio, Qa),
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        let splits = SplitSizes {
            train: 600,
            ..SplitSizes::default()
        };
        Self {
            method: Method::Moincl,
            seed: 0,
            lambda_p: 1.0,
            lambda_p_prime: 1.0,
            alpha: None,
            fusion_mode: FusionMode::PerStep,
            learning_rate: 2e-3,
            weight_decay: 0.05,
            epochs_per_task: 3,
            batch_size: 8,
            ewc_lambda: 100.0,
            lwf_weight: 1.0,
            ewf_alpha: 0.5,
            grad_clip: 1.0,
            fisher_batches: 8,
            max_gen_len: 24,
            qa_backend: QaBackendKind::GrammarOracle,
            forget_averaging: ForgetAveraging::ExcludeLast,
            pretrain_steps: 300,
            pretrain_lr: 3e-3,
            pretrain_context_lines: 2000,
            instructions_path: None,
            model: ModelDims::default(),
            splits,
            task_order: task_order(&default_order_pairs(), splits),
            task_overrides: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.task_order.is_empty() {
            return bad("task_order is empty".into());
        }
        for (i, t) in self.task_order.iter().enumerate() {
            t.validate()?;
            if t.index != i + 1 {
                return bad(format!("task {} listed at position {}", t.index, i + 1));
            }
        }
        for (j, a) in self.task_order.iter().enumerate() {
            for b in &self.task_order[..j] {
                if a.modality == b.modality && a.task_type == b.task_type && a.dataset_id == b.dataset_id {
                    return bad(format!("task {} repeats {} with the same dataset_id", a.index, a.label()));
                }
            }
        }
        let nonneg = [
            ("lambda_p", self.lambda_p),
            ("lambda_p_prime", self.lambda_p_prime),
            ("weight_decay", self.weight_decay),
            ("ewc_lambda", self.ewc_lambda),
            ("lwf_weight", self.lwf_weight),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.pretrain_lr > 0.0) {
            return bad("pretrain_lr must be > 0".into());
        }
        let unit = |name: &str, a: f64| -> Result<()> {
            if (0.0..=1.0).contains(&a) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {a}")))
            }
        };
        if let Some(a) = self.alpha {
            unit("alpha", a)?;
        }
        unit("ewf_alpha", self.ewf_alpha)?;
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return bad("epochs_per_task and batch_size must be >= 1".into());
        }
        if self.fisher_batches == 0 {
            return bad("fisher_batches must be >= 1".into());
        }
        for o in &self.task_overrides {
            if o.index == 0 || o.index > self.task_order.len() {
                return bad(format!("override for unknown task {}", o.index));
            }
            for (name, v) in [("lambda_p", o.lambda_p), ("lambda_p_prime", o.lambda_p_prime)] {
                if let Some(v) = v {
                    if !(v >= 0.0) {
                        return bad(format!("task {} {name} must be >= 0", o.index));
                    }
                }
            }
            if let Some(a) = o.alpha {
                unit("alpha", a)?;
            }
        }
        self.model.validate()
    }

    fn override_for(&self, task: usize) -> Option<&TaskOverride> {
        self.task_overrides.iter().find(|o| o.index == task)
    }

    pub fn lambda_p_for(&self, task: usize) -> f64 {
        self.override_for(task)
            .and_then(|o| o.lambda_p)
            .unwrap_or(self.lambda_p)
    }

    pub fn lambda_p_prime_for(&self, task: usize) -> f64 {
        self.override_for(task)
            .and_then(|o| o.lambda_p_prime)
            .unwrap_or(self.lambda_p_prime)
    }

    /// `α_i`, or `None` when fusion is off.
    pub fn alpha_for(&self, task: usize) -> Option<f64> {
        let default = match self.fusion_mode {
            FusionMode::Off => return None,
            FusionMode::PerStep => 0.999,
            FusionMode::EndOfTask => 0.5,
        };
        Some(
            self.override_for(task)
                .and_then(|o| o.alpha)
                .or(self.alpha)
                .unwrap_or(default),
        )
    }

    /// Parse and validate. Without a `task_order` the default six-task
    /// order is built from the configured split sizes.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        let has_order = table.contains_key("task_order");
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        if !has_order {
            cfg.task_order = task_order(&default_order_pairs(), cfg.splits);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Canonical JSON: fixed field order, pretty-printed.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_six_tasks() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.task_order.len(), 6);
        assert_eq!(c.task_order[2].label(), "VID-QA");
    }

    #[test]
    fn partial_toml_takes_defaults() {
        let c = RunConfig::from_toml_str("method = \"EWC\"\nseed = 4\n[splits]\ntrain = 40\nval = 10\ntest = 10\n").unwrap();
        assert_eq!(c.method, Method::Ewc);
        assert_eq!(c.learning_rate, RunConfig::default().learning_rate);
        assert_eq!(c.task_order.len(), 6);
        assert_eq!(c.task_order[0].n_samples, 60);
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip_is_byte_identical() {
        let mut c = RunConfig::default();
        c.task_overrides.push(TaskOverride {
            index: 2,
            lambda_p: Some(0.5),
            lambda_p_prime: None,
            alpha: Some(0.9),
        });
        let text = c.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string().unwrap(), text);
        assert_eq!(back.to_canonical_json(), c.to_canonical_json());
    }

    #[test]
    fn alpha_defaults_follow_fusion_mode() {
        let mut c = RunConfig::default();
        assert_eq!(c.alpha_for(1), Some(0.999));
        c.fusion_mode = FusionMode::EndOfTask;
        assert_eq!(c.alpha_for(1), Some(0.5));
        c.fusion_mode = FusionMode::Off;
        c.alpha = Some(0.3);
        assert_eq!(c.alpha_for(1), None);
    }

    #[test]
    fn per_task_overrides() {
        let mut c = RunConfig::default();
        c.task_overrides.push(TaskOverride {
            index: 3,
            lambda_p: Some(2.0),
            lambda_p_prime: Some(0.0),
            alpha: None,
        });
        assert_eq!(c.lambda_p_for(3), 2.0);
        assert_eq!(c.lambda_p_for(2), 1.0);
        assert_eq!(c.lambda_p_prime_for(3), 0.0);
    }

    #[test]
    fn bounds_are_enforced() {
        let mut c = RunConfig::default();
        c.alpha = Some(1.5);
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.lambda_p = -1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.task_order[0].n_samples = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml_string().unwrap();
        text.insert_str(0, "bogus = 1\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("moincl".parse::<Method>().unwrap(), Method::Moincl);
        assert_eq!("fine-tune".parse::<Method>().unwrap(), Method::Finetune);
        assert!("pathweave".parse::<Method>().is_err());
    }
}
