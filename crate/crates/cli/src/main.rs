use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use micl_core::checkpoint::{load_checkpoint, save_checkpoint};
use micl_core::config::{ForgetAveraging, RunConfig};
use micl_core::metrics::{aggregate, ScoreMatrix};
use micl_core::replay::{bundled_rows, load_rows, replay_metrics};
use micl_core::report::{matrix_rows, render_aggregate, render_matrix, render_replay, rows_to_csv};
use micl_core::syndata::{load_dataset, save_dataset, Split, TaskDataset};
use micl_core::trainer::{build_vocabulary, evaluate_task, load_instructions, prepare_datasets, pretrain_base, run_order};
use micl_core::{LearnedState, Method};

#[derive(Parser)]
#[command(name = "micl", version, about = "Continual learning across modalities and task types on a toy multimodal LM")]
struct Cli {
    /// Default parent directory for outputs when --out is not given.
    #[arg(long, env = "MICL_OUT_ROOT", default_value = "micl-out", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets of a task order.
    GenData(RunArgs),
    /// Train a task sequence and write the score matrix.
    Train(TrainArgs),
    /// Score one task of a checkpoint on its test split.
    Eval(EvalArgs),
    /// Render tables from a score matrix.
    Report(ReportArgs),
    /// Recompute forgetting and averages from a step-score table.
    ReplayMetrics(ReplayArgs),
    /// Render score and forgetting charts from a score matrix.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    method: Option<Method>,
    /// Directory written by gen-data; datasets are regenerated otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write a checkpoint after every task.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 1-based position of the task in the checkpoint's order.
    #[arg(long)]
    task_index: usize,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Averaging::ExcludeLast)]
    averaging: Averaging,
}

#[derive(Args)]
struct ReplayArgs {
    /// CSV with columns method,order,task,name,type,step,score; the bundled
    /// published step scores are used when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Keep only tasks and steps up to this step.
    #[arg(long)]
    through: Option<usize>,
    #[arg(long, value_enum, default_value_t = Averaging::ExcludeLast)]
    averaging: Averaging,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Averaging {
    ExcludeLast,
    AllTasks,
}

impl From<Averaging> for ForgetAveraging {
    fn from(a: Averaging) -> Self {
        match a {
            Averaging::ExcludeLast => ForgetAveraging::ExcludeLast,
            Averaging::AllTasks => ForgetAveraging::AllTasks,
        }
    }
}

fn out_dir(given: &Option<PathBuf>, root: &Path, verb: &str) -> Result<PathBuf> {
    let dir = given.clone().unwrap_or_else(|| root.join(verb));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_file(dir: &Path, ds_index: usize, label: &str) -> PathBuf {
    dir.join(format!("task{ds_index}-{label}.jsonl"))
}

fn load_or_generate(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Vec<TaskDataset>> {
    match data {
        None => Ok(prepare_datasets(cfg)?),
        Some(dir) => cfg
            .task_order
            .iter()
            .map(|t| {
                let path = dataset_file(dir, t.index, &t.label());
                load_dataset(t, &path, cfg.seed).with_context(|| format!("reading {}", path.display()))
            })
            .collect(),
    }
}

fn gen_data(args: RunArgs, root: &Path) -> Result<()> {
    let cfg = load_config(&args)?;
    let dir = out_dir(&args.out, root, "data")?;
    for ds in prepare_datasets(&cfg)? {
        let d = &ds.descriptor;
        save_dataset(&ds, &dataset_file(&dir, d.index, &d.label()))?;
    }
    load_instructions(&cfg)?.save(&dir.join("instructions.txt"))?;
    cfg.save(&dir.join("config.toml"))?;
    println!("{}", dir.display());
    Ok(())
}

fn train(args: TrainArgs, root: &Path) -> Result<()> {
    let mut cfg = load_config(&args.run)?;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    let dir = out_dir(&args.run.out, root, "train")?;
    let datasets = load_or_generate(&cfg, &args.data)?;
    let instructions = load_instructions(&cfg)?;
    instructions.check_disjoint(&datasets)?;
    let vocab = build_vocabulary(&instructions.instructions)?;
    let encoded = instructions.encode(&vocab)?;
    log::info!("pretraining base ({} steps)", cfg.pretrain_steps);
    let base = pretrain_base(&cfg, &vocab, &encoded)?;
    let result = run_order(&cfg, &datasets, &base, &vocab, &encoded, args.checkpoints)?;
    std::fs::write(dir.join("config.json"), cfg.to_canonical_json())?;
    result.log.save(&dir.join("train_log.jsonl"))?;
    let method = cfg.method.code();
    std::fs::write(
        dir.join("step_scores.csv"),
        rows_to_csv(&matrix_rows(&result.matrix, method, "run"))?,
    )?;
    // forgetting is undefined when a task scored zero right after training
    let summary = match aggregate(&result.matrix, cfg.forget_averaging) {
        Ok(agg) => render_aggregate(&result.matrix, &agg),
        Err(e) => format!("aggregates unavailable: {e}\n"),
    };
    std::fs::write(
        dir.join("report.txt"),
        format!("{}\n{}", render_matrix(&result.matrix), summary),
    )?;
    if args.checkpoints {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck)?;
        let mut state = LearnedState::new();
        for (task, model) in cfg.task_order.iter().zip(&result.checkpoints) {
            state = state.commit_task(task);
            save_checkpoint(&ck.join(format!("task{}.ckpt", task.index)), model, &vocab, &cfg, task.index, &state)?;
        }
    }
    save_checkpoint(
        &dir.join("model.ckpt"),
        &result.model,
        &vocab,
        &cfg,
        cfg.task_order.len(),
        &result.state,
    )?;
    // written last: its presence marks a complete run
    result.matrix.save(&dir.join("score_matrix.json"))?;
    print!("{summary}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let cfg = &ck.manifest.config;
    let k = args.task_index;
    if k == 0 || k > cfg.task_order.len() {
        bail!("task index {k} outside 1..={}", cfg.task_order.len());
    }
    if k > ck.manifest.task_index {
        return Err(micl_core::Error::UntrainedTask {
            task: k,
            step: ck.manifest.task_index,
        }
        .into());
    }
    let task = &cfg.task_order[k - 1];
    let ds = match &args.data {
        None => prepare_datasets(cfg)?.swap_remove(k - 1),
        Some(dir) => load_dataset(task, &dataset_file(dir, k, &task.label()), cfg.seed)?,
    };
    let score = evaluate_task(&ck.model, &ck.vocab, &ds, Split::Test, cfg.max_gen_len)?;
    println!("{score:.4}");
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let m = ScoreMatrix::load(&args.matrix)?;
    let mut text = render_matrix(&m);
    if m.missing(m.n_tasks()).is_empty() {
        let agg = aggregate(&m, args.averaging.into())?;
        text.push('\n');
        text.push_str(&render_aggregate(&m, &agg));
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let rows = match &args.input {
        Some(p) => load_rows(p)?,
        None => bundled_rows(),
    };
    let report = replay_metrics(&rows, args.through, args.averaging.into())?;
    let text = render_replay(&report);
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("replay.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn plot(args: PlotArgs, root: &Path) -> Result<()> {
    let m = ScoreMatrix::load(&args.matrix)?;
    let dir = out_dir(&args.out, root, "plots")?;
    let name = m.meta.get("method").cloned().unwrap_or_default();
    micl_core::plot::score_lines(&m, &format!("{name} scores by step"), &dir.join("scores.svg"))?;
    let agg = aggregate(&m, ForgetAveraging::ExcludeLast)?;
    micl_core::plot::forgetting_bars(&m, &agg, &format!("{name} forgetting"), &dir.join("forgetting.svg"))?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let root = cli.out_root;
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, &root),
        Command::Train(a) => train(a, &root),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::ReplayMetrics(a) => replay(a),
        Command::Plot(a) => plot(a, &root),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
