//! Task-sequential training for every strategy, evaluation into the score
//! matrix, and base-model pretraining.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{FusionMode, Method, QaBackendKind, RunConfig};
use crate::error::{Error, Result};
use crate::ikd::{ikd_var, sample_batch, InstructionSet};
use crate::losses::{ce_var, estimate_fisher, ewc_var, fuse_model, kl_var, teacher_log_probs, FisherDiag};
use crate::metrics::{cider, qa_accuracy, CiderVariant, ScoreMatrix, TaskMeta};
use crate::model::{ModelState, SeqInput};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW};
use crate::ptgm::{generate_pseudo_batch, BackendChoice, LmGenerator};
use crate::syndata::{
    derive_seed, generate_scene, generate_task_dataset, qa_kinds, render_caption, render_qa_kind, Split, TaskDataset,
};
use crate::types::{LearnedState, Modality, PseudoSample, Sample, TaskDescriptor, TaskType};
use crate::vocab::{TokenId, Vocabulary};

/// One optimizer step. `l_p`, `l_ins` and `aux` are the weighted
/// contributions, so `total` is their sum with `l_main`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub step: usize,
    pub l_main: f64,
    pub l_p: f64,
    pub l_ins: f64,
    pub aux: f64,
    pub total: f64,
    pub lr: f64,
    pub n_pseudo: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub label: String,
    pub steps: usize,
    pub wall_secs: f64,
    /// Data read while training this task.
    pub data_sources: Vec<String>,
    pub pseudo_samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Task(&'a TaskSummary),
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.steps.extend(other.steps);
        self.tasks.extend(other.tasks);
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, &LogLine::Step(s))?;
            out.write_all(b"\n")?;
        }
        for t in &self.tasks {
            serde_json::to_writer(&mut out, &LogLine::Task(t))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Encoded `(x, t, y)` ready for the model.
struct Encoded<'a> {
    payload: &'a crate::syndata::Payload,
    prompt: Vec<TokenId>,
    target: Vec<TokenId>,
}

impl<'a> Encoded<'a> {
    fn input(&self) -> SeqInput<'a> {
        SeqInput {
            payload: Some(self.payload),
            prompt: self.prompt.clone(),
            target: self.target.clone(),
        }
    }
}

fn encode_sample<'a>(vocab: &Vocabulary, s: &'a Sample) -> Result<Encoded<'a>> {
    let target = vocab.encode(&s.target_text)?;
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    Ok(Encoded {
        payload: &s.modality_input,
        prompt: vocab.encode(&s.input_text)?,
        target,
    })
}

/// Teacher-forced model input for a task sample.
pub fn sample_input<'a>(vocab: &Vocabulary, s: &'a Sample) -> Result<SeqInput<'a>> {
    Ok(encode_sample(vocab, s)?.input())
}

pub fn encode_pseudo<'a>(vocab: &Vocabulary, p: &'a PseudoSample) -> Result<SeqInput<'a>> {
    Ok(SeqInput {
        payload: Some(&p.modality_input),
        prompt: vocab.encode(&p.pseudo_input_text)?,
        target: vocab.encode(&p.pseudo_target_text)?,
    })
}

/// Everything a strategy may look at during one step.
pub struct StepCtx<'a, 'g> {
    pub g: &'g mut Graph,
    pub model: &'a ModelState,
    pub trainable: &'a [bool],
    pub old: Option<&'a ModelState>,
    pub task: &'a TaskDescriptor,
    pub state: &'a LearnedState,
    pub config: &'a RunConfig,
    pub batch: &'a [&'a Sample],
    pub inputs: &'a [SeqInput<'a>],
    pub main_logits: &'a crate::model::Forward,
    pub instructions: &'a [Vec<TokenId>],
    pub vocab: &'a Vocabulary,
    pub rng: &'a mut ChaCha8Rng,
    pub step: usize,
}

/// Extra loss terms a strategy adds to a step.
#[derive(Default)]
pub struct ExtraTerms {
    pub l_p: Option<(Var, f64)>,
    pub l_ins: Option<(Var, f64)>,
    pub aux: Option<(Var, f64)>,
    pub n_pseudo: usize,
}

/// Per-method behaviour plugged into the shared training loop.
pub trait StrategyHooks {
    fn extra_loss(&mut self, ctx: &mut StepCtx) -> Result<ExtraTerms>;
    fn post_update(&mut self, _model: &mut ModelState, _old: Option<&ModelState>, _task: &TaskDescriptor) -> Result<()> {
        Ok(())
    }
    fn end_of_task(
        &mut self,
        _model: &mut ModelState,
        _old: Option<&ModelState>,
        _task: &TaskDescriptor,
        _train: &[SeqInput],
    ) -> Result<()> {
        Ok(())
    }
    fn needs_snapshot(&self) -> bool {
        false
    }
}

pub struct Finetune;

impl StrategyHooks for Finetune {
    fn extra_loss(&mut self, _ctx: &mut StepCtx) -> Result<ExtraTerms> {
        Ok(ExtraTerms::default())
    }
}

pub struct Lwf {
    pub weight: f64,
}

impl StrategyHooks for Lwf {
    fn extra_loss(&mut self, ctx: &mut StepCtx) -> Result<ExtraTerms> {
        if ctx.task.index == 1 {
            return Ok(ExtraTerms::default());
        }
        let old = ctx.old.ok_or(Error::MissingSnapshot(ctx.task.index))?;
        let log_q = teacher_log_probs(old, ctx.inputs)?;
        let kl = kl_var(ctx.g, ctx.main_logits, log_q)?;
        Ok(ExtraTerms {
            aux: Some((kl, self.weight)),
            ..Default::default()
        })
    }

    fn needs_snapshot(&self) -> bool {
        true
    }
}

pub struct Ewc {
    pub lambda: f64,
    pub batches: usize,
    pub batch_size: usize,
    pub fisher: Option<FisherDiag>,
}

impl StrategyHooks for Ewc {
    fn extra_loss(&mut self, ctx: &mut StepCtx) -> Result<ExtraTerms> {
        let Some(f) = &self.fisher else {
            return Ok(ExtraTerms::default());
        };
        // only tensors trainable in this task take part
        let keep: Vec<usize> = (0..f.ids.len()).filter(|&k| ctx.trainable[f.ids[k]]).collect();
        let active = FisherDiag {
            ids: keep.iter().map(|&k| f.ids[k]).collect(),
            values: keep.iter().map(|&k| f.values[k].clone()).collect(),
            anchor: keep.iter().map(|&k| f.anchor[k].clone()).collect(),
        };
        let pen = ewc_var(ctx.g, ctx.model, &active, self.lambda)?;
        Ok(ExtraTerms {
            aux: Some((pen, 1.0)),
            ..Default::default()
        })
    }

    fn end_of_task(
        &mut self,
        model: &mut ModelState,
        _old: Option<&ModelState>,
        task: &TaskDescriptor,
        train: &[SeqInput],
    ) -> Result<()> {
        let batches: Vec<Vec<SeqInput>> = train
            .chunks(self.batch_size)
            .take(self.batches)
            .map(|c| c.to_vec())
            .collect();
        let est = estimate_fisher(model, &batches, &model.task_trainable_ids(task.modality))?;
        self.fisher = Some(match &self.fisher {
            Some(f) => f.accumulate(&est)?,
            None => est,
        });
        Ok(())
    }
}

pub struct Ewf {
    pub alpha: f64,
}

impl StrategyHooks for Ewf {
    fn extra_loss(&mut self, _ctx: &mut StepCtx) -> Result<ExtraTerms> {
        Ok(ExtraTerms::default())
    }

    fn end_of_task(
        &mut self,
        model: &mut ModelState,
        old: Option<&ModelState>,
        task: &TaskDescriptor,
        _train: &[SeqInput],
    ) -> Result<()> {
        if task.index == 1 {
            return Ok(());
        }
        let old = old.ok_or(Error::MissingSnapshot(task.index))?;
        let ids = model.adapter_ids();
        fuse_model(model, old, &ids, self.alpha)
    }

    fn needs_snapshot(&self) -> bool {
        true
    }
}

/// Pseudo-target loss: CE against the pseudo targets plus KL to the
/// previous model on the same inputs.
pub fn pseudo_loss_var(
    g: &mut Graph,
    model: &ModelState,
    trainable: &[bool],
    old: &ModelState,
    inputs: &[SeqInput],
) -> Result<Var> {
    let log_q = teacher_log_probs(old, inputs)?;
    let fwd = model.forward(g, inputs, trainable)?;
    let ce = ce_var(g, &fwd);
    let kl = kl_var(g, &fwd, log_q)?;
    Ok(g.weighted_sum(&[(ce, 1.0), (kl, 1.0)]))
}

pub struct MoinclHooks<'a> {
    pub config: &'a RunConfig,
    /// Frozen pretrained model used by the prompted QA backend.
    pub prompter: Option<(&'a ModelState, &'a Vocabulary)>,
    pub backend: QaBackendKind,
    pub pseudo_seed: u64,
}

impl StrategyHooks for MoinclHooks<'_> {
    fn extra_loss(&mut self, ctx: &mut StepCtx) -> Result<ExtraTerms> {
        let i = ctx.task.index;
        if i == 1 {
            return Ok(ExtraTerms::default());
        }
        let old = ctx.old.ok_or(Error::MissingSnapshot(i))?;
        let mut terms = ExtraTerms::default();
        // pseudo targets for earlier task types of this modality
        let seed = self.pseudo_seed.wrapping_add((ctx.step as u64) << 16);
        let pseudo = match (self.backend, self.prompter) {
            (QaBackendKind::LmPrompted, Some((m, v))) => {
                let gen = LmGenerator { model: m, vocab: v };
                generate_pseudo_batch(ctx.batch, ctx.state, ctx.task, &BackendChoice::LmPrompted(&gen))?
            }
            _ => generate_pseudo_batch(ctx.batch, ctx.state, ctx.task, &BackendChoice::GrammarOracle { seed })?,
        };
        if !pseudo.is_empty() {
            let inputs = pseudo
                .iter()
                .map(|p| encode_pseudo(ctx.vocab, p))
                .collect::<Result<Vec<_>>>()?;
            let lp = pseudo_loss_var(ctx.g, ctx.model, ctx.trainable, old, &inputs)?;
            terms.l_p = Some((lp, ctx.config.lambda_p_for(i)));
            terms.n_pseudo = pseudo.len();
        }
        let batch = sample_batch(ctx.instructions, ctx.config.batch_size, ctx.rng);
        let ins = ikd_var(ctx.g, ctx.model, ctx.trainable, old, &batch)?;
        terms.l_ins = Some((ins, ctx.config.lambda_p_prime_for(i)));
        Ok(terms)
    }

    fn post_update(&mut self, model: &mut ModelState, old: Option<&ModelState>, task: &TaskDescriptor) -> Result<()> {
        if self.config.fusion_mode != FusionMode::PerStep || task.index == 1 {
            return Ok(());
        }
        let (Some(alpha), Some(old)) = (self.config.alpha_for(task.index), old) else {
            return Ok(());
        };
        let ids = model.adapter_ids();
        fuse_model(model, old, &ids, alpha)
    }

    fn end_of_task(
        &mut self,
        model: &mut ModelState,
        old: Option<&ModelState>,
        task: &TaskDescriptor,
        _train: &[SeqInput],
    ) -> Result<()> {
        if self.config.fusion_mode != FusionMode::EndOfTask || task.index == 1 {
            return Ok(());
        }
        let (Some(alpha), Some(old)) = (self.config.alpha_for(task.index), old) else {
            return Ok(());
        };
        let ids = model.adapter_ids();
        fuse_model(model, old, &ids, alpha)
    }

    fn needs_snapshot(&self) -> bool {
        true
    }
}

/// Inputs shared by every task of a run.
pub struct RunContext<'a> {
    pub config: &'a RunConfig,
    pub vocab: &'a Vocabulary,
    pub instructions: &'a [Vec<TokenId>],
    /// Pretrained model before any task, used by the prompted QA backend.
    pub base: &'a ModelState,
}

/// Train one task. Reads only `dataset` (the current task's data) and the
/// instruction set.
pub fn train_task(
    model: &mut ModelState,
    old: Option<&ModelState>,
    task: &TaskDescriptor,
    dataset: &TaskDataset,
    state: &LearnedState,
    hooks: &mut dyn StrategyHooks,
    ctx: &RunContext,
) -> Result<TrainLog> {
    let cfg = ctx.config;
    if dataset.descriptor.modality != task.modality || dataset.descriptor.task_type != task.task_type {
        return Err(Error::InvalidConfig(format!(
            "dataset {} does not match task {}",
            dataset.descriptor.label(),
            task.label()
        )));
    }
    if task.index > 1 && hooks.needs_snapshot() && old.is_none() {
        return Err(Error::MissingSnapshot(task.index));
    }
    let started = Instant::now();
    let trainable_ids = model.task_trainable_ids(task.modality);
    let mask = model.mask(&trainable_ids);
    let train = &dataset.train;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let encoded = train
        .iter()
        .map(|s| encode_sample(ctx.vocab, s))
        .collect::<Result<Vec<_>>>()?;
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs_per_task;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle/{}", task.index)));
    let mut ikd_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("ikd/{}", task.index)));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut n_pseudo_total = 0;
    let mut used_instructions = false;
    for _epoch in 0..cfg.epochs_per_task {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.learning_rate, step, total);
            let batch: Vec<&Sample> = chunk.iter().map(|&k| &train[k]).collect();
            let inputs: Vec<SeqInput> = chunk.iter().map(|&k| encoded[k].input()).collect();
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &inputs, &mask)?;
            let main = ce_var(&mut g, &fwd);
            let extra = {
                let mut sctx = StepCtx {
                    g: &mut g,
                    model,
                    trainable: &mask,
                    old,
                    task,
                    state,
                    config: cfg,
                    batch: &batch,
                    inputs: &inputs,
                    main_logits: &fwd,
                    instructions: ctx.instructions,
                    vocab: ctx.vocab,
                    rng: &mut ikd_rng,
                    step,
                };
                hooks.extra_loss(&mut sctx)?
            };
            let mut terms = vec![(main, 1.0)];
            let mut part = |t: Option<(Var, f64)>, g: &Graph| -> f64 {
                match t {
                    Some((v, w)) => {
                        terms.push((v, w));
                        g.scalar(v) * w
                    }
                    None => 0.0,
                }
            };
            let l_p = part(extra.l_p, &g);
            let l_ins = part(extra.l_ins, &g);
            used_instructions |= extra.l_ins.is_some();
            let aux = part(extra.aux, &g);
            let total_var = g.weighted_sum(&terms);
            let l_main = g.scalar(main);
            let total_loss = g.scalar(total_var);
            if !total_loss.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "non-finite loss at task {} step {step}",
                    task.index
                )));
            }
            let mut grads = g.backward(total_var);
            drop(g);
            grads.by_param.retain(|id, _| mask[*id]);
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(model, &grads, lr);
            hooks.post_update(model, old, task)?;
            n_pseudo_total += extra.n_pseudo;
            log.steps.push(StepRecord {
                task: task.index,
                step,
                l_main,
                l_p,
                l_ins,
                aux,
                total: total_loss,
                lr,
                n_pseudo: extra.n_pseudo,
            });
            step += 1;
        }
    }
    let all_inputs: Vec<SeqInput> = encoded.iter().map(|e| e.input()).collect();
    hooks.end_of_task(model, old, task, &all_inputs)?;
    let mut sources = vec![format!("dataset:{}:{}", task.index, dataset.descriptor.dataset_id)];
    if used_instructions {
        sources.push("instructions".into());
    }
    log.tasks.push(TaskSummary {
        task: task.index,
        label: task.label(),
        steps: step,
        wall_secs: started.elapsed().as_secs_f64(),
        data_sources: sources,
        pseudo_samples: n_pseudo_total,
    });
    Ok(log)
}

/// Test-split score: CIDEr ×100 for captioning, accuracy % for QA.
pub fn evaluate_task(
    model: &ModelState,
    vocab: &Vocabulary,
    dataset: &TaskDataset,
    split: Split,
    max_len: usize,
) -> Result<f64> {
    let samples = dataset.split(split);
    let items = samples
        .iter()
        .map(|s| Ok((Some(&s.modality_input), vocab.encode(&s.input_text)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut outputs = Vec::with_capacity(items.len());
    for chunk in items.chunks(64) {
        outputs.extend(model.generate_batch(chunk, max_len)?);
    }
    let preds: Vec<String> = outputs.iter().map(|o| vocab.decode_words(o)).collect();
    match dataset.descriptor.task_type {
        TaskType::Qa => {
            let answers: Vec<&str> = samples.iter().map(|s| s.target_text.as_str()).collect();
            qa_accuracy(&preds, &answers)
        }
        TaskType::Captioning => {
            let refs: BTreeMap<String, Vec<String>> = samples
                .iter()
                .enumerate()
                .map(|(k, s)| (k.to_string(), vec![s.target_text.clone()]))
                .collect();
            let cands: Vec<(String, String)> = preds
                .into_iter()
                .enumerate()
                .map(|(k, p)| (k.to_string(), p))
                .collect();
            Ok(100.0 * cider(&cands, &refs, CiderVariant::Plain)?.corpus)
        }
    }
}

/// Datasets for every task of the order, each from its own seed stream.
pub fn prepare_datasets(config: &RunConfig) -> Result<Vec<TaskDataset>> {
    config
        .task_order
        .iter()
        .map(|t| {
            let seed = derive_seed(config.seed, &format!("data/{}", t.dataset_id));
            generate_task_dataset(t, config.splits, seed)
        })
        .collect()
}

/// Vocabulary covering the data grammar, the instruction templates, the
/// QA prompts and any extra lines.
pub fn build_vocabulary(extra: &[String]) -> Result<Vocabulary> {
    let mut corpus = crate::syndata::grammar_corpus();
    corpus.extend(crate::ikd::instruction_templates());
    corpus.extend(crate::ptgm::prompt_corpus());
    corpus.extend(extra.iter().cloned());
    Vocabulary::build(&corpus)
}

/// Text-only `("<caption> <question>", "<answer>")` pairs over random
/// scenes, drawn from their own seed stream.
pub fn context_qa_pairs(seed: u64, n: usize) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let m = Modality::ALL[k % Modality::ALL.len()];
            let scene = generate_scene(m, rng.gen());
            let kinds: Vec<_> = qa_kinds(&scene)
                .into_iter()
                .filter_map(|q| render_qa_kind(&scene, q))
                .collect();
            let (q, a) = kinds[rng.gen_range(0..kinds.len())].clone();
            (format!("{} {q}", render_caption(&scene)), a)
        })
        .collect()
}

/// Fresh model whose base LM is trained on text only: the instruction
/// corpus plus caption-context QA pairs. Adapters stay at their no-op start.
pub fn pretrain_base(config: &RunConfig, vocab: &Vocabulary, instructions: &[Vec<TokenId>]) -> Result<ModelState> {
    let mut model = ModelState::new(config.model, vocab.len(), derive_seed(config.seed, "init"))?;
    let context = context_qa_pairs(derive_seed(config.seed, "context"), config.pretrain_context_lines)
        .iter()
        .map(|(p, a)| Ok((vocab.encode(p)?, vocab.encode(a)?)))
        .collect::<Result<Vec<_>>>()?;
    let ids = model.base_ids();
    let mask = model.mask(&ids);
    let mut opt = AdamW::new(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pretrain"));
    let bs = config.batch_size.max(8) * 2;
    for step in 0..config.pretrain_steps {
        let lr = cosine_lr(config.pretrain_lr, step, config.pretrain_steps);
        let n_ctx = if context.is_empty() { 0 } else { bs / 2 };
        let mut inputs: Vec<SeqInput> = sample_batch(instructions, bs - n_ctx, &mut rng)
            .into_iter()
            .map(|t| SeqInput {
                payload: None,
                prompt: Vec::new(),
                target: t.to_vec(),
            })
            .collect();
        for _ in 0..n_ctx {
            let (p, a) = &context[rng.gen_range(0..context.len())];
            inputs.push(SeqInput {
                payload: None,
                prompt: p.clone(),
                target: a.clone(),
            });
        }
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &inputs, &mask)?;
        let loss = ce_var(&mut g, &fwd);
        let mut grads = g.backward(loss);
        clip_grad_norm(&mut grads, config.grad_clip);
        opt.step(&mut model, &grads, lr);
    }
    Ok(model)
}

/// Instruction set for a run: the configured file or the bundled set.
pub fn load_instructions(config: &RunConfig) -> Result<InstructionSet> {
    let seed = derive_seed(config.seed, "instructions");
    match &config.instructions_path {
        Some(p) => InstructionSet::load(Path::new(p), seed),
        None => Ok(InstructionSet::bundled(seed)),
    }
}

pub fn make_hooks<'a>(config: &'a RunConfig, base: &'a ModelState, vocab: &'a Vocabulary) -> Box<dyn StrategyHooks + 'a> {
    match config.method {
        Method::Finetune => Box::new(Finetune),
        Method::Lwf => Box::new(Lwf {
            weight: config.lwf_weight,
        }),
        Method::Ewc => Box::new(Ewc {
            lambda: config.ewc_lambda,
            batches: config.fisher_batches,
            batch_size: config.batch_size,
            fisher: None,
        }),
        Method::Ewf => Box::new(Ewf {
            alpha: config.ewf_alpha,
        }),
        Method::Moincl => Box::new(MoinclHooks {
            config,
            prompter: Some((base, vocab)),
            backend: config.qa_backend,
            pseudo_seed: derive_seed(config.seed, "pseudo"),
        }),
    }
}

pub struct RunResult {
    pub model: ModelState,
    pub matrix: ScoreMatrix,
    pub log: TrainLog,
    pub state: LearnedState,
    /// Model after each task, if requested.
    pub checkpoints: Vec<ModelState>,
}

/// Snapshot → train → commit → evaluate tasks `1..=i`, for every task.
pub fn run_order(
    config: &RunConfig,
    datasets: &[TaskDataset],
    base: &ModelState,
    vocab: &Vocabulary,
    instructions: &[Vec<TokenId>],
    keep_checkpoints: bool,
) -> Result<RunResult> {
    config.validate()?;
    if datasets.len() != config.task_order.len() {
        return Err(Error::InvalidConfig(format!(
            "{} datasets for {} tasks",
            datasets.len(),
            config.task_order.len()
        )));
    }
    let ctx = RunContext {
        config,
        vocab,
        instructions,
        base,
    };
    let mut hooks = make_hooks(config, base, vocab);
    let mut model = base.snapshot();
    let mut state = LearnedState::new();
    let mut log = TrainLog::default();
    let mut matrix = ScoreMatrix::new(
        config
            .task_order
            .iter()
            .map(|t| TaskMeta {
                index: t.index,
                name: t.label(),
                task_type: t.task_type,
            })
            .collect(),
    );
    matrix.meta.insert("method".into(), config.method.code().into());
    matrix.meta.insert("seed".into(), config.seed.to_string());
    let mut checkpoints = Vec::new();
    for (k, task) in config.task_order.iter().enumerate() {
        let old = model.snapshot();
        let old_hash = old.content_hash();
        let started = state.begin_task(task);
        let task_log = train_task(&mut model, Some(&old), task, &datasets[k], &started, hooks.as_mut(), &ctx)?;
        debug_assert_eq!(old.content_hash(), old_hash);
        log.extend(task_log);
        state = started.commit_task(task);
        for j in 0..=k {
            let score = evaluate_task(&model, vocab, &datasets[j], Split::Test, config.max_gen_len)?;
            matrix.set(j + 1, k + 1, score)?;
        }
        log::info!(
            "{} task {} ({}) done: {}",
            config.method,
            task.index,
            task.label(),
            (1..=k + 1)
                .map(|j| format!("{:.2}", matrix.get(j, k + 1).unwrap()))
                .collect::<Vec<_>>()
                .join(" ")
        );
        if keep_checkpoints {
            checkpoints.push(model.snapshot());
        }
    }
    Ok(RunResult {
        model,
        matrix,
        log,
        state,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelDims;
    use crate::syndata::SplitSizes;
    use TaskType::{Captioning as Cap, Qa};

    pub(crate) fn tiny_config(method: Method, pairs: &[(Modality, TaskType)]) -> RunConfig {
        let splits = SplitSizes { train: 16, val: 4, test: 8 };
        RunConfig {
            method,
            epochs_per_task: 1,
            batch_size: 4,
            pretrain_steps: 5,
            pretrain_context_lines: 20,
            fisher_batches: 2,
            max_gen_len: 6,
            model: ModelDims { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, context: 48, rank: 2, feat_dim: 8 },
            splits,
            task_order: crate::config::task_order(pairs, splits),
            ..RunConfig::default()
        }
    }

    fn run(cfg: &RunConfig) -> RunResult {
        let ins = load_instructions(cfg).unwrap();
        let vocab = build_vocabulary(&ins.instructions).unwrap();
        let enc = ins.encode(&vocab).unwrap();
        let base = pretrain_base(cfg, &vocab, &enc).unwrap();
        let ds = prepare_datasets(cfg).unwrap();
        run_order(cfg, &ds, &base, &vocab, &enc, false).unwrap()
    }

    #[test]
    fn first_task_skips_extra_losses_and_totals_add_up() {
        let cfg = tiny_config(Method::Moincl, &[(Modality::Audio, Cap), (Modality::Audio, Qa)]);
        let r = run(&cfg);
        for s in &r.log.steps {
            assert!((s.total - (s.l_main + s.l_p + s.l_ins + s.aux)).abs() < 1e-6);
            if s.task == 1 {
                assert_eq!((s.l_p, s.l_ins, s.n_pseudo), (0.0, 0.0, 0));
            } else {
                assert!(s.n_pseudo > 0 && s.l_p > 0.0);
            }
        }
        assert_eq!(r.log.tasks.len(), 2);
        assert_eq!(r.matrix.missing(2), Vec::<String>::new());
    }

    #[test]
    fn new_modality_has_no_pseudo_loss_but_distills() {
        let cfg = tiny_config(Method::Moincl, &[(Modality::Audio, Cap), (Modality::Image, Cap)]);
        let r = run(&cfg);
        let second: Vec<_> = r.log.steps.iter().filter(|s| s.task == 2).collect();
        assert!(second.iter().all(|s| s.l_p == 0.0 && s.n_pseudo == 0));
        assert!(second.iter().skip(1).any(|s| s.l_ins > 0.0));
    }

    #[test]
    fn each_task_reads_only_its_own_dataset() {
        let cfg = tiny_config(Method::Moincl, &[(Modality::Image, Cap), (Modality::Image, Qa)]);
        let r = run(&cfg);
        assert_eq!(r.log.tasks[0].data_sources, vec!["dataset:1:img-cap".to_string()]);
        assert_eq!(
            r.log.tasks[1].data_sources,
            vec!["dataset:2:img-qa".to_string(), "instructions".to_string()]
        );
    }

    #[test]
    fn jsonl_log_has_one_line_per_record() {
        let cfg = tiny_config(Method::Ewc, &[(Modality::Image, Cap), (Modality::Image, Qa)]);
        let r = run(&cfg);
        assert!(r.log.steps.iter().filter(|s| s.task == 2).all(|s| s.aux >= 0.0));
        let mut buf = Vec::new();
        r.log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), r.log.steps.len() + r.log.tasks.len());
        assert!(text.lines().next().unwrap().starts_with("{\"kind\":\"step\""));
    }

    #[test]
    fn mismatched_dataset_and_missing_snapshot_are_errors() {
        let cfg = tiny_config(Method::Lwf, &[(Modality::Image, Cap), (Modality::Image, Qa)]);
        let ins = load_instructions(&cfg).unwrap();
        let vocab = build_vocabulary(&ins.instructions).unwrap();
        let enc = ins.encode(&vocab).unwrap();
        let mut model = ModelState::new(cfg.model, vocab.len(), 0).unwrap();
        let ds = prepare_datasets(&cfg).unwrap();
        let ctx = RunContext { config: &cfg, vocab: &vocab, instructions: &enc, base: &model.snapshot() };
        let state = LearnedState::new();
        let mut hooks = Lwf { weight: 1.0 };
        let err = train_task(&mut model, None, &cfg.task_order[0], &ds[1], &state, &mut hooks, &ctx);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
        let err = train_task(&mut model, None, &cfg.task_order[1], &ds[1], &state, &mut hooks, &ctx);
        assert!(matches!(err, Err(Error::MissingSnapshot(2))));
    }
}
