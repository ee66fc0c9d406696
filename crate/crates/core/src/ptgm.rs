//! Pseudo targets for previously learned task types of the current
//! modality: a fixed captioning instruction, and a three-round
//! answer → question → answer pipeline run on caption text.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::QaBackendKind;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::syndata::{answer_question, caption_instruction, qa_kinds, render_caption, render_qa_kind, Payload, QaKind};
use crate::types::{LearnedState, Modality, PseudoSample, Sample, TaskDescriptor, TaskType};
use crate::vocab::{normalize, Vocabulary};

/// Captioning instruction for a modality given by name.
pub fn pseudo_caption_instruction(modality: &str) -> Result<String> {
    let m: Modality = modality.parse()?;
    Ok(caption_instruction(m))
}

pub fn round1_prompt(m: Modality, caption: &str) -> String {
    format!(
        "Given the {} context: '{caption}', generate a potential short answer from it. \
         Provide just one or two words. The answer words should be strictly selected from the context. \
         Provide only the answer, nothing else. Answer:",
        m.word()
    )
}

pub fn round2_prompt(m: Modality, caption: &str, answer: &str) -> String {
    format!(
        "Given the {} context: '{caption}' and the answer: '{answer}', generate a question for the answer \
         that can be inferred from the context. Provide only one question and nothing else. Question:",
        m.word()
    )
}

pub fn round3_prompt(caption: &str, question: &str) -> String {
    format!(
        "Answer the question using the given context. The answer should be only one or two words. \
         Context: '{caption}'. Question: '{question}'. Answer:"
    )
}

/// Text completion used by the prompted backend.
pub trait TextGenerator {
    fn complete(&self, prompt: &str, max_words: usize) -> Result<String>;
}

/// Greedy completion with a frozen language model. Prompts are normalized,
/// out-of-vocabulary words are dropped and the oldest tokens are cut when
/// the prompt does not fit the context.
pub struct LmGenerator<'a> {
    pub model: &'a ModelState,
    pub vocab: &'a Vocabulary,
}

impl TextGenerator for LmGenerator<'_> {
    fn complete(&self, prompt: &str, max_words: usize) -> Result<String> {
        let mut ids: Vec<usize> = normalize(prompt)
            .split_whitespace()
            .filter_map(|w| self.vocab.id(w))
            .collect();
        let room = self.model.dims.context.saturating_sub(max_words + 2);
        if ids.len() > room {
            ids.drain(..ids.len() - room);
        }
        let out = self.model.generate_greedy(None, &ids, max_words)?;
        Ok(self.vocab.decode_words(&out))
    }
}

pub enum QaBackend<'a> {
    /// Template rules over the scene record; `seed` picks among the
    /// answerable question kinds.
    GrammarOracle { scene: &'a Payload, seed: u64 },
    LmPrompted(&'a dyn TextGenerator),
}

impl QaBackend<'_> {
    pub fn kind(&self) -> QaBackendKind {
        match self {
            QaBackend::GrammarOracle { .. } => QaBackendKind::GrammarOracle,
            QaBackend::LmPrompted(_) => QaBackendKind::LmPrompted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaTrace {
    pub prompts: Vec<String>,
    pub outputs: Vec<String>,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub trace: Option<QaTrace>,
}

fn first_words(text: &str, n: usize) -> String {
    normalize(text)
        .split_whitespace()
        .filter(|w| *w != "?")
        .take(n)
        .collect::<Vec<_>>()
        .join(" ")
}

fn first_question(text: &str) -> String {
    let norm = normalize(text);
    let body = match norm.find('?') {
        Some(i) => &norm[..i],
        None => norm.as_str(),
    };
    let body = body.trim();
    if body.is_empty() {
        String::new()
    } else {
        format!("{body} ?")
    }
}

/// Relation questions first (subject before anchor), then the rest in
/// listing order.
fn oracle_candidates(scene: &Payload) -> Vec<QaKind> {
    let mut kinds = qa_kinds(scene);
    kinds.sort_by_key(|k| match k {
        QaKind::Relation { subject, anchor } => (0, *subject, *anchor),
        _ => (1, 0, 0),
    });
    kinds
}

/// Three-round QA from a caption. Round 1 picks a short answer from the
/// caption, round 2 asks for it, round 3 answers the question again from
/// the context; the round-3 answer is the pseudo target.
pub fn three_round_qa(caption: &str, modality: Modality, backend: &QaBackend) -> Result<QaPair> {
    let caption = normalize(caption);
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    match backend {
        QaBackend::GrammarOracle { scene, seed } => {
            let words: Vec<&str> = caption.split_whitespace().collect();
            let candidates: Vec<(String, String)> = oracle_candidates(scene)
                .into_iter()
                .filter_map(|k| render_qa_kind(scene, k))
                .filter(|(_, a)| a.split_whitespace().all(|w| words.contains(&w)))
                .collect();
            if candidates.is_empty() {
                return Err(Error::EmptyQuestion(caption));
            }
            let n = candidates.len();
            let start = (*seed % n as u64) as usize;
            for k in 0..n {
                let (question, answer) = &candidates[(start + k) % n];
                // round 3: re-answer the question independently
                if answer_question(scene, question).as_deref() == Some(answer.as_str()) {
                    return Ok(QaPair {
                        question: question.clone(),
                        answer: answer.clone(),
                        trace: None,
                    });
                }
            }
            Err(Error::EmptyQuestion(caption))
        }
        QaBackend::LmPrompted(gen) => {
            let p1 = round1_prompt(modality, &caption);
            let raw1 = gen.complete(&p1, 2)?;
            let short = first_words(&raw1, 2);
            let p2 = round2_prompt(modality, &caption, &short);
            let raw2 = gen.complete(&p2, 16)?;
            let question = first_question(&raw2);
            if question.is_empty() {
                return Err(Error::EmptyQuestion(caption));
            }
            let p3 = round3_prompt(&caption, &question);
            let raw3 = gen.complete(&p3, 2)?;
            let mut answer = first_words(&raw3, 2);
            let fell_back = answer.is_empty();
            if fell_back {
                log::warn!("empty round-3 answer for '{question}', using round-1 answer '{short}'");
                answer = short;
            }
            if answer.is_empty() {
                return Err(Error::EmptyTarget);
            }
            Ok(QaPair {
                question,
                answer,
                trace: Some(QaTrace {
                    prompts: vec![p1, p2, p3],
                    outputs: vec![raw1, raw2, raw3],
                    fell_back,
                }),
            })
        }
    }
}

/// Backend selection for a batch.
pub enum BackendChoice<'a> {
    GrammarOracle { seed: u64 },
    LmPrompted(&'a dyn TextGenerator),
}

/// One pseudo sample per (sample, previously learned type of the current
/// modality other than the current type). Empty when the modality is new.
pub fn generate_pseudo_batch(
    batch: &[&Sample],
    state: &LearnedState,
    task: &TaskDescriptor,
    backend: &BackendChoice,
) -> Result<Vec<PseudoSample>> {
    let types = state.rehearsable_types(task);
    let mut out = Vec::with_capacity(batch.len() * types.len());
    for (i, s) in batch.iter().enumerate() {
        for &p in &types {
            match p {
                TaskType::Captioning => out.push(PseudoSample {
                    modality_input: s.modality_input.clone(),
                    pseudo_input_text: caption_instruction(task.modality),
                    pseudo_target_text: render_caption(&s.modality_input),
                    source_task_type: p,
                }),
                TaskType::Qa => {
                    let caption = if task.task_type == TaskType::Captioning {
                        s.target_text.clone()
                    } else {
                        render_caption(&s.modality_input)
                    };
                    let qa = match backend {
                        BackendChoice::GrammarOracle { seed } => three_round_qa(
                            &caption,
                            task.modality,
                            &QaBackend::GrammarOracle {
                                scene: &s.modality_input,
                                seed: seed.wrapping_add(i as u64),
                            },
                        )?,
                        BackendChoice::LmPrompted(g) => {
                            three_round_qa(&caption, task.modality, &QaBackend::LmPrompted(*g))?
                        }
                    };
                    out.push(PseudoSample {
                        modality_input: s.modality_input.clone(),
                        pseudo_input_text: qa.question,
                        pseudo_target_text: qa.answer,
                        source_task_type: p,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub task: usize,
    pub question: String,
    pub answer: String,
    pub source_caption: String,
    pub backend: QaBackendKind,
}

pub fn write_audit(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Every word of the three prompt templates, for vocabulary building.
pub fn prompt_corpus() -> Vec<String> {
    vec![
        round1_prompt(Modality::Image, ""),
        round2_prompt(Modality::Image, "", ""),
        round3_prompt("", ""),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syndata::{Color, ImageScene, Object, Shape};
    use std::cell::RefCell;

    fn two_objects() -> Payload {
        Payload::Image(ImageScene {
            objects: vec![
                Object { color: Color::Red, shape: Shape::Circle, row: 0, col: 1 },
                Object { color: Color::Blue, shape: Shape::Square, row: 2, col: 1 },
            ],
        })
    }

    #[test]
    fn caption_templates() {
        assert_eq!(pseudo_caption_instruction("IMG").unwrap(), "describe the image");
        assert_eq!(pseudo_caption_instruction("AUD").unwrap(), "describe the audio");
        assert_eq!(pseudo_caption_instruction("video").unwrap(), "describe the video");
        assert!(matches!(pseudo_caption_instruction("depth"), Err(Error::UnknownModality(_))));
    }

    #[test]
    fn oracle_relation_question() {
        let scene = two_objects();
        let cap = render_caption(&scene);
        assert_eq!(cap, "a red circle above a blue square");
        let qa = three_round_qa(&cap, Modality::Image, &QaBackend::GrammarOracle { scene: &scene, seed: 0 }).unwrap();
        assert_eq!(qa.question, "what is above a blue square ?");
        assert_eq!(qa.answer, "red circle");
    }

    #[test]
    fn empty_caption_is_an_error() {
        let scene = two_objects();
        let r = three_round_qa("  ", Modality::Image, &QaBackend::GrammarOracle { scene: &scene, seed: 0 });
        assert!(matches!(r, Err(Error::EmptyCaption)));
    }

    struct Scripted {
        replies: Vec<&'static str>,
        seen: RefCell<Vec<String>>,
    }

    impl TextGenerator for Scripted {
        fn complete(&self, prompt: &str, _max: usize) -> Result<String> {
            let mut seen = self.seen.borrow_mut();
            let reply = self.replies[seen.len()];
            seen.push(prompt.to_string());
            Ok(reply.to_string())
        }
    }

    #[test]
    fn prompted_rounds_are_sequenced_and_verbatim() {
        let gen = Scripted { replies: vec!["red circle", "what is above a blue square? more", "red circle"], seen: RefCell::new(vec![]) };
        let qa = three_round_qa("a red circle above a blue square", Modality::Image, &QaBackend::LmPrompted(&gen)).unwrap();
        assert_eq!(qa.question, "what is above a blue square ?");
        assert_eq!(qa.answer, "red circle");
        let seen = gen.seen.borrow();
        assert!(seen[0].contains("Provide just one or two words"));
        assert!(seen[0].starts_with("Given the image context: 'a red circle above a blue square'"));
        assert!(seen[1].contains("Provide only one question"));
        assert!(seen[1].contains("the answer: 'red circle'"));
        assert!(seen[2].contains("The answer should be only one or two words"));
        assert!(seen[2].contains("Question: 'what is above a blue square ?'"));
    }

    #[test]
    fn prompted_fallback_and_empty_question() {
        let gen = Scripted { replies: vec!["blue square now", "which one?", ""], seen: RefCell::new(vec![]) };
        let qa = three_round_qa("a red circle above a blue square", Modality::Image, &QaBackend::LmPrompted(&gen)).unwrap();
        assert_eq!(qa.answer, "blue square");
        assert!(qa.trace.unwrap().fell_back);
        let gen = Scripted { replies: vec!["red", "?", "red"], seen: RefCell::new(vec![]) };
        let r = three_round_qa("a red circle", Modality::Image, &QaBackend::LmPrompted(&gen));
        assert!(matches!(r, Err(Error::EmptyQuestion(_))));
    }
}
