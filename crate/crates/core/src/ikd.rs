//! Pure-text instruction set and the distillation loss between the current
//! and previous language model on it.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{kl_var, teacher_log_probs};
use crate::model::{ModelState, SeqInput};
use crate::syndata::{Color, Direction, Event, Loudness, Shape, TaskDataset, ORDINALS, RELATIONS};
use crate::vocab::{TokenId, Vocabulary, SPECIAL_TOKENS};

pub const BUNDLED_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSet {
    pub instructions: Vec<String>,
    pub seed: u64,
}

fn words<T: Copy>(all: &[T], f: fn(T) -> &'static str) -> Vec<&'static str> {
    all.iter().map(|&v| f(v)).collect()
}

/// Every sentence the instruction templates can produce, in a fixed order.
pub fn instruction_templates() -> Vec<String> {
    let colors = words(Color::ALL, Color::word);
    let shapes = words(Shape::ALL, Shape::word);
    let events = words(Event::ALL, Event::word);
    let louds = words(Loudness::ALL, Loudness::word);
    let dirs = words(Direction::ALL, Direction::word);
    let mut out = Vec::new();
    for s in &shapes {
        out.push(format!("name the color of the {s}"));
        out.push(format!("draw one {s} and stop"));
        for c in &colors {
            out.push(format!("write a short sentence about a {c} {s}"));
            out.push(format!("tell me if a {c} {s} is big or small"));
            for d in &dirs {
                out.push(format!("move the {c} {s} one step {d}"));
                for d2 in dirs.iter().filter(|d2| *d2 != d) {
                    out.push(format!("move the {c} {s} {d} then {d2}"));
                }
            }
            for r in RELATIONS {
                out.push(format!("place a {c} {s} {r} the middle"));
                for s2 in shapes.iter().filter(|s2| *s2 != s) {
                    out.push(format!("put the {c} {s} {r} the {s2}"));
                }
            }
        }
    }
    for c in &colors {
        out.push(format!("name the shape that is {c}"));
        out.push(format!("list things that are {c}"));
    }
    for (i, ord) in ORDINALS.iter().enumerate() {
        out.push(format!("give one word for the {ord} sound"));
        for e in &events {
            out.push(format!("say when the {ord} {e} starts"));
            if i == 0 {
                for l in &louds {
                    out.push(format!("play a {l} {e} twice"));
                    for e2 in &events {
                        if e2 != e {
                            out.push(format!("play a {l} {e} and then a {e2}"));
                        }
                    }
                }
            }
        }
    }
    for d in &dirs {
        out.push(format!("point {d} and count to four"));
        out.push(format!("explain what {d} means"));
    }
    for r in RELATIONS {
        out.push(format!("explain what {r} means"));
    }
    out.push("answer with just one word".into());
    out.push("summarize the scene in a few words".into());
    out.push("count the objects and say the number".into());
    out.push("list four colors in order".into());
    out
}

impl InstructionSet {
    /// The bundled set: [`BUNDLED_SIZE`] distinct template instructions
    /// chosen by `seed`.
    pub fn bundled(seed: u64) -> Self {
        let mut all = instruction_templates();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(BUNDLED_SIZE);
        Self {
            instructions: all,
            seed,
        }
    }

    pub fn from_lines(text: &str, seed: u64) -> Result<Self> {
        let instructions: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let set = Self { instructions, seed };
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        Self::from_lines(&std::fs::read_to_string(path)?, seed)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.instructions.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Non-empty and free of special tokens.
    pub fn validate(&self) -> Result<()> {
        if self.instructions.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for ins in &self.instructions {
            if let Some(tok) = SPECIAL_TOKENS.iter().find(|t| ins.contains(*t)) {
                return Err(Error::Malformed(format!("instruction contains special token {tok}: '{ins}'")));
            }
        }
        Ok(())
    }

    /// No instruction equals any text of the given datasets.
    pub fn check_disjoint<'a>(&self, datasets: impl IntoIterator<Item = &'a TaskDataset>) -> Result<()> {
        let mine: BTreeSet<String> = self.instructions.iter().map(|s| crate::vocab::normalize(s)).collect();
        for ds in datasets {
            for s in ds.all_samples() {
                for text in [&s.input_text, &s.target_text] {
                    if mine.contains(&crate::vocab::normalize(text)) {
                        return Err(Error::Malformed(format!(
                            "instruction set contains dataset text '{text}' ({})",
                            ds.descriptor.label()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
        self.instructions.iter().map(|s| vocab.encode(s)).collect()
    }
}

/// Draw `n` instructions uniformly with replacement.
pub fn sample_batch<'a, R: Rng>(encoded: &'a [Vec<TokenId>], n: usize, rng: &mut R) -> Vec<&'a [TokenId]> {
    (0..n)
        .map(|_| encoded[rng.gen_range(0..encoded.len())].as_slice())
        .collect()
}

fn text_inputs<'a>(batch: &[&[TokenId]]) -> Vec<SeqInput<'a>> {
    batch
        .iter()
        .map(|t| SeqInput {
            payload: None,
            prompt: Vec::new(),
            target: t.to_vec(),
        })
        .collect()
}

/// Differentiable `mean_t' KL(f_cur(t') ‖ f_old(t'))`, teacher-forced over
/// each instruction's own tokens. Only text is fed, so encoders and
/// projections are never touched.
pub fn ikd_var(
    g: &mut Graph,
    current: &ModelState,
    trainable: &[bool],
    old: &ModelState,
    batch: &[&[TokenId]],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inputs = text_inputs(batch);
    let log_q = teacher_log_probs(old, &inputs)?;
    let fwd = current.forward(g, &inputs, trainable)?;
    kl_var(g, &fwd, log_q)
}

pub fn ikd_loss(current: &ModelState, old: &ModelState, batch: &[&[TokenId]]) -> Result<f64> {
    let mut g = Graph::new();
    let v = ikd_var(&mut g, current, &[], old, batch)?;
    Ok(g.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelDims;
    use crate::syndata::{generate_task_dataset, grammar_corpus, SplitSizes};
    use crate::types::{Modality, TaskDescriptor, TaskType};

    #[test]
    fn bundled_set_has_512_distinct_text_only_instructions() {
        let set = InstructionSet::bundled(0);
        assert_eq!(set.len(), BUNDLED_SIZE);
        let distinct: BTreeSet<_> = set.instructions.iter().collect();
        assert_eq!(distinct.len(), BUNDLED_SIZE);
        set.validate().unwrap();
        assert_eq!(set, InstructionSet::bundled(0));
    }

    #[test]
    fn disjoint_from_generated_datasets() {
        let set = InstructionSet::bundled(1);
        let mut datasets = Vec::new();
        for m in Modality::ALL {
            for p in [TaskType::Captioning, TaskType::Qa] {
                let d = TaskDescriptor::new(1, m, p, 300);
                datasets.push(generate_task_dataset(&d, SplitSizes::default(), 9).unwrap());
            }
        }
        set.check_disjoint(&datasets).unwrap();
    }

    #[test]
    fn file_round_trip_and_rejects_placeholders() {
        let set = InstructionSet::bundled(2);
        assert_eq!(InstructionSet::from_lines(&set.to_text(), 2).unwrap(), set);
        assert!(InstructionSet::from_lines("describe the <img>\n", 0).is_err());
        assert!(InstructionSet::from_lines("\n\n", 0).is_err());
    }

    #[test]
    fn ikd_identity_and_order_invariance() {
        let set = InstructionSet::bundled(3);
        let mut corpus = grammar_corpus();
        corpus.extend(set.instructions.iter().cloned());
        let vocab = Vocabulary::build(&corpus).unwrap();
        let enc = set.encode(&vocab).unwrap();
        let dims = ModelDims { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, context: 32, rank: 2, feat_dim: 8 };
        let old = ModelState::new(dims, vocab.len(), 1).unwrap();
        let batch: Vec<&[TokenId]> = enc[..4].iter().map(|v| v.as_slice()).collect();
        assert_eq!(ikd_loss(&old, &old, &batch).unwrap(), 0.0);
        let mut cur = old.snapshot();
        for id in cur.adapter_ids() {
            cur.value_mut(id).mapv_inplace(|v| v + 0.05);
        }
        let a = ikd_loss(&cur, &old, &batch).unwrap();
        let mut rev = batch.clone();
        rev.reverse();
        let b = ikd_loss(&cur, &old, &rev).unwrap();
        assert!(a > 0.0, "{a}");
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(ikd_loss(&cur, &old, &[]), Err(Error::EmptyBatch)));
    }
}
