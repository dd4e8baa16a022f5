use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use uniact_core::agent::{run_episode, EpisodeConfig, DEFAULT_BUDGET, DEFAULT_WINDOW};
use uniact_core::augment::{actre_annotate, bootstrap_trace_detailed, BootstrapConfig, Language};
use uniact_core::bootstrap::{LoopConfig, MemorizingLearner, Orchestrator, SolvedDropRefiner};
use uniact_core::dpo::{pairs_from_records, train_toy_policy, DpoConfig};
use uniact_core::eval::{best_of_n_report, run_benchmark, BenchConfig, BenchReport};
use uniact_core::filter::{report_jsonl, run_pipeline, task_for, PipelineConfig, ReviewAnnotation};
use uniact_core::reflection::{
    build_pair, corrected_trace, emit_dpo_dataset, read_dpo_dataset, scripted_correction,
    Correction, CorrectionKind,
};
use uniact_core::store::{
    adapter_by_id, adapter_ids, export_sft, write_trace_file, SftOptions, TraceStore,
};
use uniact_core::{SimEnv, TaskRegistry, Trace};

use crate::clients::{annotator, policy_provider, scorer};

#[derive(Debug, Parser)]
#[command(
    name = "uniact",
    version,
    about = "GUI agent episodes, trace pipelines, training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct TasksArg {
    /// Task registry file; the bundled suite when omitted.
    #[arg(long = "tasks", value_name = "FILE")]
    pub tasks: Option<PathBuf>,
}

impl TasksArg {
    fn registry(&self) -> Result<TaskRegistry> {
        load_registry(self.tasks.as_deref())
    }
}

fn load_registry(path: Option<&Path>) -> Result<TaskRegistry> {
    match path {
        Some(p) => {
            TaskRegistry::load(p).with_context(|| format!("loading tasks from {}", p.display()))
        }
        None => Ok(TaskRegistry::bundled()),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode and write its trace.
    Run {
        #[arg(long)]
        task: String,
        /// http(s) endpoint or scripted:oracle|oracle-bare|wait|noisy:<p>
        #[arg(long, default_value = "scripted:oracle")]
        policy: String,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tasks: TasksArg,
    },
    /// Task registry commands.
    Tasks {
        #[command(subcommand)]
        command: TasksCommand,
    },
    /// Convert an external trace document into the store.
    Convert {
        #[arg(long)]
        adapter: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export supervised samples from a store.
    ExportSft {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        /// Corrections (JSON lines) to apply before export.
        #[arg(long)]
        corrections: Option<PathBuf>,
        /// Also emit a thought-free copy of each step.
        #[arg(long)]
        vanilla: bool,
    },
    /// Write thoughts into stored traces.
    Augment {
        #[arg(long, value_enum)]
        mode: AugmentMode,
        #[arg(long)]
        store: PathBuf,
        /// http(s) endpoint, scripted or scripted:<seed> (actre mode)
        #[arg(long, default_value = "scripted")]
        annotator: String,
        /// Candidate sampler for bootstrap mode.
        #[arg(long, default_value = "scripted:oracle")]
        policy: String,
        /// Retries per step in actre mode; samples per step in bootstrap mode.
        #[arg(long = "max-try", default_value_t = 16)]
        max_try: usize,
        #[arg(long, default_value = "en")]
        language: String,
        #[command(flatten)]
        tasks: TasksArg,
    },
    /// Run the rule, score and review filters over a store.
    Filter {
        #[arg(long)]
        store: PathBuf,
        /// http(s) endpoint or scripted
        #[arg(long, default_value = "scripted")]
        scorer: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Review annotations (JSON lines); the store's own log when omitted.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Store that receives the surviving traces.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        tasks: TasksArg,
    },
    /// Build a preference file from corrections.
    BuildPairs {
        #[arg(long)]
        store: PathBuf,
        /// Corrections (JSON lines). Without it the scripted corrector runs.
        #[arg(long)]
        corrections: Option<PathBuf>,
        /// Kind used by the scripted corrector.
        #[arg(long, value_enum, default_value_t = KindArg::Both)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[command(flatten)]
        tasks: TasksArg,
    },
    /// Train the tabular policy on a preference file.
    Dpo {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a policy on a task suite.
    Eval {
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value = "scripted:oracle")]
        policy: String,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Also report best-of-N success.
        #[arg(long)]
        bon: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the collect, filter, learn and refine loop.
    Bootstrap {
        #[command(flatten)]
        tasks: TasksArg,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Base policy the learner falls back to.
        #[arg(long, default_value = "scripted:noisy:0.4")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from the checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Serve the review API over a store.
    ServeReview {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[command(flatten)]
        tasks: TasksArg,
    },
    /// Write the store's reviews and corrections as JSON lines.
    ExportAnnotations {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        reviews: Option<PathBuf>,
        #[arg(long)]
        corrections: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TasksCommand {
    /// List task ids, apps and instructions.
    List {
        #[command(flatten)]
        tasks: TasksArg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugmentMode {
    Actre,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    ErrorCorrection,
    PostReflection,
    Both,
}

impl KindArg {
    fn kinds(self) -> Vec<CorrectionKind> {
        match self {
            KindArg::ErrorCorrection => vec![CorrectionKind::ErrorCorrection],
            KindArg::PostReflection => vec![CorrectionKind::PostReflection],
            KindArg::Both => vec![
                CorrectionKind::ErrorCorrection,
                CorrectionKind::PostReflection,
            ],
        }
    }
}

/// Structured report written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub protocol: BenchReport,
    pub best_of_n: Option<BenchReport>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn open_store(path: &Path) -> Result<TraceStore> {
    TraceStore::open(path).with_context(|| format!("opening store {}", path.display()))
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Run {
            task,
            policy,
            budget,
            window,
            seed,
            out: path,
            tasks,
        } => {
            if budget == 0 || window == 0 {
                bail!("budget and window must be at least 1");
            }
            let registry = tasks.registry()?;
            let task = registry.get(&task)?.clone();
            let provider = policy_provider(&policy)?;
            let mut client = provider.policy_for(&task, seed);
            let mut env = SimEnv::new();
            let cfg = EpisodeConfig::new(budget, window).with_meta("policy_seed", seed);
            let trace = run_episode(&task, &mut env, client.as_mut(), &cfg);
            write_trace_file(&path, &trace)?;
            writeln!(
                out,
                "{} {} steps, {}",
                trace.trace_id,
                trace.len(),
                trace.termination.as_str()
            )?;
        }
        Command::Tasks {
            command: TasksCommand::List { tasks },
        } => {
            for t in tasks.registry()?.tasks() {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    t.task_id,
                    t.app,
                    t.platform.as_str(),
                    t.instruction
                )?;
            }
        }
        Command::Convert {
            adapter,
            input,
            out: dir,
        } => {
            let adapter = adapter_by_id(&adapter)
                .map_err(|e| anyhow!("{e} (known: {})", adapter_ids().join(", ")))?;
            let text = fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let doc: serde_json::Value =
                serde_json::from_str(&text).context("parsing source document")?;
            let docs = match doc {
                serde_json::Value::Array(items) => items,
                single => vec![single],
            };
            let store = open_store(&dir)?;
            for (i, d) in docs.iter().enumerate() {
                let trace = uniact_core::store::adapters::convert_to_trace(d, adapter)
                    .with_context(|| format!("document {i}"))?;
                writeln!(out, "{}", store.save_trace(&trace)?)?;
            }
            store.rebuild_index()?;
        }
        Command::ExportSft {
            store,
            out: path,
            window,
            corrections,
            vanilla,
        } => {
            if window == 0 {
                bail!("window must be at least 1");
            }
            let store = open_store(&store)?;
            let mut traces = store.load_all()?;
            let mut marks = Vec::new();
            if let Some(file) = corrections {
                let corrections: Vec<Correction> = read_jsonl(&file)?;
                for c in &corrections {
                    let Some(pos) = traces.iter().position(|t| t.trace_id == c.trace_id) else {
                        bail!("correction for unknown trace `{}`", c.trace_id);
                    };
                    let (fixed, m) = corrected_trace(&traces[pos], c)?;
                    traces[pos] = fixed;
                    marks.extend(m);
                }
            }
            let samples = export_sft(
                &traces,
                &marks,
                &SftOptions {
                    window,
                    include_vanilla: vanilla,
                },
            )?;
            write(&path, to_jsonl(&samples))?;
            writeln!(
                out,
                "{} samples from {} traces",
                samples.len(),
                traces.len()
            )?;
        }
        Command::Augment {
            mode,
            store,
            annotator: spec,
            policy,
            max_try,
            language,
            tasks,
        } => {
            let language: Language = language.parse().map_err(|e: String| anyhow!(e))?;
            let cfg = BootstrapConfig::new(max_try, language)?;
            let registry = tasks.registry()?;
            let store = open_store(&store)?;
            match mode {
                AugmentMode::Actre => {
                    let mut client = annotator(&spec)?;
                    for t in store.load_all()? {
                        let done = actre_annotate(&t, client.as_mut(), max_try - 1, language)
                            .with_context(|| format!("trace {}", t.trace_id))?;
                        writeln!(out, "{} -> {}", t.trace_id, store.save_trace(&done)?)?;
                    }
                }
                AugmentMode::Bootstrap => {
                    let provider = policy_provider(&policy)?;
                    for t in store.load_all()? {
                        let Some(task) = task_for(&t, &registry) else {
                            writeln!(out, "{} skipped: unknown task", t.trace_id)?;
                            continue;
                        };
                        let mut client = provider.policy_for(&task, 0);
                        let res = bootstrap_trace_detailed(&t, client.as_mut(), &cfg);
                        let id = store.save_trace(&res.trace)?;
                        writeln!(
                            out,
                            "{} -> {} ({} unmatched)",
                            t.trace_id,
                            id,
                            res.unmatched.len()
                        )?;
                    }
                }
            }
            store.rebuild_index()?;
        }
        Command::Filter {
            store,
            scorer: spec,
            threshold,
            annotations,
            report,
            out: dest,
            workers,
            tasks,
        } => {
            let registry = tasks.registry()?;
            let store = open_store(&store)?;
            let reviews: Vec<ReviewAnnotation> = match annotations {
                Some(file) => read_jsonl(&file)?,
                None => store.annotations().reviews()?,
            };
            let scorer = scorer(&spec, &registry)?;
            let cfg = PipelineConfig {
                threshold,
                workers,
                ..PipelineConfig::default()
            };
            let raw = store.load_all()?;
            let (kept, chains) = run_pipeline(&raw, &registry, scorer.as_ref(), &reviews, &cfg)?;
            write(&report, report_jsonl(&chains))?;
            if let Some(dest) = dest {
                let dest = open_store(&dest)?;
                for t in &kept {
                    dest.save_trace(t)?;
                }
                dest.rebuild_index()?;
            }
            writeln!(out, "{} of {} traces kept", kept.len(), raw.len())?;
        }
        Command::BuildPairs {
            store,
            corrections,
            kind,
            out: path,
            window,
            tasks,
        } => {
            if window == 0 {
                bail!("window must be at least 1");
            }
            let registry = tasks.registry()?;
            let store = open_store(&store)?;
            let traces: BTreeMap<String, Trace> = store
                .load_all()?
                .into_iter()
                .map(|t| (t.trace_id.clone(), t))
                .collect();
            let corrections: Vec<Correction> = match corrections {
                Some(file) => read_jsonl(&file)?,
                None => {
                    let mut found = Vec::new();
                    for t in traces.values() {
                        for k in kind.kinds() {
                            found.extend(scripted_correction(t, &registry, k)?);
                        }
                    }
                    found
                }
            };
            let mut pairs = Vec::new();
            for c in &corrections {
                let trace = traces
                    .get(&c.trace_id)
                    .ok_or_else(|| anyhow!("correction for unknown trace `{}`", c.trace_id))?;
                pairs.push(build_pair(trace, c).with_context(|| format!("trace {}", c.trace_id))?);
            }
            write(&path, emit_dpo_dataset(&pairs, window))?;
            writeln!(out, "{} pairs", pairs.len())?;
        }
        Command::Dpo {
            pairs,
            beta,
            lr,
            steps,
            out: path,
        } => {
            let text = fs::read_to_string(&pairs)
                .with_context(|| format!("reading {}", pairs.display()))?;
            let (_, records) = read_dpo_dataset(&text)?;
            let (sft, pairs) = pairs_from_records(&records)?;
            let cfg = DpoConfig {
                beta,
                learning_rate: lr,
                steps,
            };
            let trained = train_toy_policy(&pairs, &sft, &cfg)?;
            write(&path, trained.policy.to_json())?;
            writeln!(
                out,
                "loss {:.6} -> {:.6} over {} accepted steps",
                trained.losses[0],
                trained.losses[trained.losses.len() - 1],
                trained.losses.len() - 1
            )?;
        }
        Command::Eval {
            suite,
            policy,
            budget,
            window,
            runs,
            bon,
            seed,
            workers,
            report,
        } => {
            let registry = load_registry(suite.as_deref())?;
            let provider = policy_provider(&policy)?;
            let cfg = BenchConfig {
                budget,
                window,
                runs,
                seed,
                workers,
                ..BenchConfig::default()
            };
            let protocol = run_benchmark(registry.tasks(), provider.as_ref(), &cfg)?;
            let best_of_n = bon
                .map(|n| best_of_n_report(registry.tasks(), provider.as_ref(), n, &cfg))
                .transpose()?;
            writeln!(
                out,
                "success rate {:.4} ({} runs per task)",
                protocol.success_rate, runs
            )?;
            if let Some(b) = &best_of_n {
                writeln!(
                    out,
                    "best-of-{} {:.4}",
                    b.n_bon.unwrap_or(0),
                    b.success_rate
                )?;
            }
            let doc = EvalReport {
                format: "uniact-eval".into(),
                version: 1,
                protocol,
                best_of_n,
            };
            write(&report, serde_json::to_string_pretty(&doc)? + "\n")?;
        }
        Command::Bootstrap {
            tasks,
            rounds,
            workers,
            budget,
            store,
            checkpoint,
            policy,
            seed,
            resume,
        } => {
            let registry = tasks.registry()?;
            let mut orch = Orchestrator {
                base: policy_provider(&policy)?,
                learner: Box::new(MemorizingLearner::new()),
                refiner: Box::new(SolvedDropRefiner::new(registry.clone(), 0.5)),
                store: open_store(&store)?,
                registry: registry.clone(),
                cfg: LoopConfig {
                    workers,
                    budget,
                    seed,
                    pipeline: PipelineConfig {
                        workers,
                        ..PipelineConfig::default()
                    },
                    ..LoopConfig::default()
                },
            };
            let state = if resume {
                orch.resume(&checkpoint)?
            } else {
                orch.init(registry.tasks().to_vec())?
            };
            let done = orch.run_until(state, rounds, Some(&checkpoint))?;
            if done.round == 0 {
                orch.save_checkpoint(&checkpoint, &done)?;
            }
            for r in &done.history {
                writeln!(
                    out,
                    "round {}: {} tasks, {} raw, {} kept, held-out {:.3} -> {:.3}",
                    r.round + 1,
                    r.tasks,
                    r.raw_count,
                    r.filtered_count,
                    r.heldout_before,
                    r.heldout_after
                )?;
            }
        }
        Command::ServeReview { store, addr, tasks } => {
            let state = uniact_review_api::AppState::new(open_store(&store)?, tasks.registry()?);
            let rt = tokio::runtime::Runtime::new()?;
            writeln!(out, "serving review API on http://{addr}")?;
            out.flush()?;
            rt.block_on(uniact_review_api::serve(addr, state))?;
        }
        Command::ExportAnnotations {
            store,
            reviews,
            corrections,
        } => {
            let log = open_store(&store)?.annotations();
            if let Some(path) = reviews {
                let r = log.reviews()?;
                write(&path, to_jsonl(&r))?;
                writeln!(out, "{} reviews", r.len())?;
            }
            if let Some(path) = corrections {
                let c = log.corrections()?;
                write(&path, to_jsonl(&c))?;
                writeln!(out, "{} corrections", c.len())?;
            }
        }
    }
    Ok(())
}

/// Runs the tool with `args` (including the program name), writing normal
/// output to `out`.
pub fn run_args<I, T>(args: I, out: &mut dyn std::io::Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| anyhow!(e.to_string()))?;
    run(cli, out)
}
