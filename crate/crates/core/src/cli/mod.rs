//! The `mll` command line.
//!
//! Exit codes: 0 success, 1 environment or I/O failure, 2 invalid usage or
//! input. Data goes to files; tables go to stdout; diagnostics and timings
//! go to stderr.

pub mod captions;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::error::MllError;
use crate::fsio;
use crate::graph::{self, SemanticGraph};
use crate::harness::{self, synth, Benchmark};
use crate::labeling::{self, ModelRecord};
use crate::reuse::PredictionSet;
use crate::selection::{self, SelectionMethod, SelectionResult};
use crate::store;
use crate::workspace::{Layout, Truth};

use captions::{CaptionClient, FixtureCaptions, LiveCaptions};
use config::{CaptionMode, EngineConfig, FileConfig};

type CmdResult = anyhow::Result<()>;

#[derive(Debug, Parser)]
#[command(name = "mll", version, about = "Label, select and reuse vision-language models from a model hub")]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML file with default values for any of these flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for the default layout.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Semantic graph file.
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    /// Directory of labeled models.
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    /// Directory of shared embedding stores.
    #[arg(long, global = true)]
    stores: Option<PathBuf>,
    /// Directory of task files.
    #[arg(long, global = true)]
    tasks: Option<PathBuf>,
    /// Directory for selections, predictions and reports.
    #[arg(long, global = true)]
    reports: Option<PathBuf>,
    /// Weight of per-class precision in the reuse metric [default: 0.7].
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Models per class ensemble [default: 1].
    #[arg(long, global = true)]
    k_reuse: Option<usize>,
    /// Graph nodes matched per class [default: 5].
    #[arg(long, global = true)]
    k_match: Option<usize>,
    /// Softmax temperature for ensemble outputs [default: 1].
    #[arg(long, global = true)]
    reuse_temperature: Option<f64>,
    /// Use raw top-k similarities as transfer weights.
    #[arg(long, global = true)]
    raw_z: bool,
    /// Score each class only against its own matched nodes.
    #[arg(long, global = true)]
    per_class_nodes: bool,
    /// Accept labels computed on an older graph.
    #[arg(long, global = true)]
    allow_stale: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for random permutations and synthetic data [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where class captions come from [default: fixture].
    #[arg(long, global = true, value_enum)]
    captions: Option<CaptionMode>,
    /// JSON object of class name to caption, for fixture mode.
    #[arg(long, global = true)]
    caption_fixture: Option<PathBuf>,
}

impl GlobalArgs {
    fn as_config(&self) -> FileConfig {
        FileConfig {
            workspace: self.workspace.clone(),
            graph: self.graph.clone(),
            labels: self.labels.clone(),
            stores: self.stores.clone(),
            tasks: self.tasks.clone(),
            reports: self.reports.clone(),
            alpha: self.alpha,
            k_reuse: self.k_reuse,
            k_match: self.k_match,
            reuse_temperature: self.reuse_temperature,
            raw_z: self.raw_z.then_some(true),
            per_class_nodes: self.per_class_nodes.then_some(true),
            allow_stale: self.allow_stale.then_some(true),
            seed: self.seed,
            threads: self.threads,
            captions: self.captions,
            caption_fixture: self.caption_fixture.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build, extend or validate the semantic graph.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Compute or extend a model's label.
    #[command(subcommand)]
    Label(LabelCmd),
    /// Fill in a task's class captions.
    Captions(CaptionsArgs),
    /// Pick per-class models for a task.
    Select(SelectArgs),
    /// Run a selection's ensembles on a task's samples.
    Predict(PredictArgs),
    /// Score prediction files against ground truth.
    Eval(EvalArgs),
    /// Benchmark experiments.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Write a synthetic specialist workspace.
    Synth(SynthArgs),
}

#[derive(Debug, Subcommand)]
enum GraphCmd {
    Build {
        #[arg(long)]
        synsets: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Extend {
        #[arg(long)]
        synsets: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Validate {
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum LabelCmd {
    Compute {
        /// JSON model record.
        #[arg(long)]
        model: PathBuf,
        /// Store of the model's sample-image embeddings.
        #[arg(long)]
        images: PathBuf,
        /// Store of the model's node-caption embeddings.
        #[arg(long = "caption-store")]
        caption_store: PathBuf,
        #[arg(long)]
        force: bool,
    },
    Extend {
        #[arg(long)]
        model_id: String,
        /// Embeddings of the samples added since the label was computed.
        #[arg(long)]
        images: PathBuf,
        /// Embeddings of the nodes added since the label was computed.
        #[arg(long = "caption-store")]
        caption_store: PathBuf,
    },
}

#[derive(Debug, Args)]
struct CaptionsArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = selection::DEFAULT_WORD_LIMIT)]
    word_limit: usize,
    /// Regenerate captions the task already has.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    task: String,
    /// Select by ImageNet accuracy instead.
    #[arg(long)]
    inb: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// METHOD=FILE; repeat for each method and task.
    #[arg(long = "pred", required = true, value_parser = parse_named_path)]
    preds: Vec<(String, PathBuf)>,
    /// Ground truth for a single task; defaults to the task's truth file.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output path stem; writes `<stem>.txt` and `<stem>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum BenchCmd {
    /// Accuracy against hub size over random hub growth orders.
    Scaling {
        #[arg(long, default_value_t = 30)]
        permutations: usize,
        /// Tasks to include; all tasks by default.
        #[arg(long = "task")]
        task_ids: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy over an alpha grid and a k grid.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.6, 0.7, 0.8, 0.9])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5, 6])]
        ks: Vec<usize>,
        #[arg(long = "task")]
        task_ids: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reuse-metric selection against the ImageNet baseline on every task.
    Compare {
        #[arg(long = "task")]
        task_ids: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 0.6)]
    generalist_acc: f64,
    /// JSON fixture spec; overrides `--classes` and `--generalist-acc`.
    #[arg(long)]
    spec: Option<PathBuf>,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected METHOD=FILE, got {s:?}")),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<MllError>() {
            return if err.is_environmental() { 1 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn execute(cli: Cli) -> CmdResult {
    let file = match &cli.global.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let cfg = EngineConfig::resolve(file.overlay(cli.global.as_config()))?;
    if let Some(n) = cfg.threads {
        // a pool may already exist when called in-process more than once
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let started = Instant::now();
    match cli.command {
        Command::Graph(cmd) => graph_cmd(&cfg, cmd),
        Command::Label(cmd) => label_cmd(&cfg, cmd),
        Command::Captions(args) => captions_cmd(&cfg, args),
        Command::Select(args) => select_cmd(&cfg, args),
        Command::Predict(args) => predict_cmd(&cfg, args),
        Command::Eval(args) => eval_cmd(&cfg, args),
        Command::Bench(cmd) => bench_cmd(&cfg, cmd),
        Command::Synth(args) => synth_cmd(&cfg, args),
    }?;
    eprintln!("done in {:.3}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn graph_cmd(cfg: &EngineConfig, cmd: GraphCmd) -> CmdResult {
    match cmd {
        GraphCmd::Build { synsets, samples, out } => {
            let records = graph::read_synsets_tsv(&synsets)?;
            let samples = graph::read_samples_tsv(&samples)?;
            let g = SemanticGraph::build(&records, &samples)?;
            let out = out.unwrap_or_else(|| cfg.layout.graph.clone());
            g.save(&out)?;
            eprintln!("graph version {} with {} nodes -> {}", g.version(), g.len(), out.display());
        }
        GraphCmd::Extend { synsets, samples, out } => {
            let g = SemanticGraph::load(&cfg.layout.graph)?;
            let records = graph::read_synsets_tsv(&synsets)?;
            let samples = graph::read_samples_tsv(&samples)?;
            let g = g.extend(&records, &samples)?;
            let out = out.unwrap_or_else(|| cfg.layout.graph.clone());
            g.save(&out)?;
            eprintln!("graph version {} with {} nodes -> {}", g.version(), g.len(), out.display());
        }
        GraphCmd::Validate { out } => {
            let g = SemanticGraph::load(&cfg.layout.graph)?;
            let report = g.validate();
            if let Some(out) = out {
                fsio::write_json(&out, &report)?;
            }
            for (from, to) in &report.unresolved_edges {
                eprintln!("unresolved edge {from} -> {to}");
            }
            for id in &report.self_loops {
                eprintln!("self loop on {id}");
            }
            for dup in &report.duplicate_samples {
                eprintln!("sample {} shared by {}", dup.sample_id, dup.node_ids.join(", "));
            }
            if !report.unsampled.is_empty() {
                eprintln!("{} node(s) without samples", report.unsampled.len());
            }
            if report.has_errors() {
                bail!(MllError::InvalidInput("graph failed validation".into()));
            }
        }
    }
    Ok(())
}

fn label_cmd(cfg: &EngineConfig, cmd: LabelCmd) -> CmdResult {
    let g = SemanticGraph::load(&cfg.layout.graph)?;
    match cmd {
        LabelCmd::Compute {
            model,
            images,
            caption_store,
            force,
        } => {
            let record: ModelRecord = fsio::read_json(&model)?;
            record.validate()?;
            let dest = cfg.layout.labels.join(&record.model_id);
            if dest.exists() && !force {
                bail!(MllError::AlreadyExists(dest));
            }
            let images = store::read_store(&images)?;
            let captions = store::read_store(&caption_store)?;
            let label = labeling::compute_label(&record, Arc::new(images), Arc::new(captions), &g)?;
            let path = labeling::save_labeled_model(&cfg.layout.labels, &record, &label, force)?;
            eprintln!("labeled {} on graph version {} -> {}", record.model_id, g.version(), path.display());
        }
        LabelCmd::Extend {
            model_id,
            images,
            caption_store,
        } => {
            let (record, label) = labeling::load_labeled_model(&cfg.layout.labels.join(&model_id))?;
            let images = store::read_store(&images)?;
            let captions = store::read_store(&caption_store)?;
            let label = labeling::extend_label(&label, &g, &captions, &images)?;
            let path = labeling::save_labeled_model(&cfg.layout.labels, &record, &label, true)?;
            eprintln!("extended {model_id} to graph version {} -> {}", g.version(), path.display());
        }
    }
    Ok(())
}

fn caption_client(cfg: &EngineConfig) -> anyhow::Result<Box<dyn CaptionClient>> {
    Ok(match cfg.captions {
        CaptionMode::Live => Box::new(LiveCaptions::from_env()?),
        CaptionMode::Fixture => {
            let path = cfg
                .caption_fixture
                .as_ref()
                .ok_or_else(|| anyhow!(MllError::InvalidInput("fixture captions need --caption-fixture".into())))?;
            Box::new(FixtureCaptions::load(path)?)
        }
    })
}

fn captions_cmd(cfg: &EngineConfig, args: CaptionsArgs) -> CmdResult {
    let mut task = harness::load_task_spec(&cfg.layout, &args.task)?;
    if task.class_captions.is_some() && !args.force {
        eprintln!("task {} already has captions", task.task_id);
        return Ok(());
    }
    let client = caption_client(cfg)?;
    task.class_captions = Some(captions::generate_captions(&task, client.as_ref(), args.word_limit)?);
    fsio::write_json(&cfg.layout.task_spec(&args.task), &task)?;
    eprintln!("wrote {} captions", task.classes.len());
    Ok(())
}

fn selection_table(result: &SelectionResult) -> String {
    let mut out = String::from("class");
    for rank in 1..=result.k_reuse {
        write!(out, " | rank {rank}").unwrap();
    }
    out.push('\n');
    for ranking in &result.rankings {
        out.push_str(&ranking.class);
        for member in ranking.ranked.iter().take(result.k_reuse) {
            write!(out, " | {} ({:.4})", member.model_id, member.score).unwrap();
        }
        out.push('\n');
    }
    out
}

fn select_cmd(cfg: &EngineConfig, args: SelectArgs) -> CmdResult {
    let layout = &cfg.layout;
    let mut task = harness::load_task_spec(layout, &args.task)?;
    let hub = labeling::load_hub(&layout.labels)?;
    let result = if args.inb {
        let ranked = harness::inb_ranking(&hub)?;
        SelectionResult::uniform(SelectionMethod::Inb, &task, &ranked, cfg.select.k_reuse)?
    } else {
        if task.class_captions.is_none() {
            let client = caption_client(cfg)?;
            task.class_captions = Some(captions::generate_captions(
                &task,
                client.as_ref(),
                selection::DEFAULT_WORD_LIMIT,
            )?);
            fsio::write_json(&layout.task_spec(&args.task), &task)?;
        }
        let g = SemanticGraph::load(&layout.graph)?;
        let node_captions = store::read_store(&layout.node_captions())?;
        let task_captions = store::read_store(&layout.task_captions(&args.task)).with_context(|| {
            format!("class-caption embeddings for task {} are missing; embed the task's captions first", args.task)
        })?;
        selection::select(&task, &hub, &g, &node_captions, &task_captions, &cfg.select)?
    };
    let out = args
        .out
        .unwrap_or_else(|| default_report(layout, &format!("{}.{}.selection.json", args.task, method_tag(result.method))));
    fsio::write_json(&out, &result)?;
    print!("{}", selection_table(&result));
    Ok(())
}

fn method_tag(method: SelectionMethod) -> &'static str {
    match method {
        SelectionMethod::Mll => "mll",
        SelectionMethod::Inb => "inb",
    }
}

fn default_report(layout: &Layout, name: &str) -> PathBuf {
    layout.reports.join(name)
}

fn predict_cmd(cfg: &EngineConfig, args: PredictArgs) -> CmdResult {
    let selection: SelectionResult = fsio::read_json(&args.selection)?;
    if selection.task_id != args.task {
        bail!(MllError::InvalidInput(format!(
            "selection is for task {}, not {}",
            selection.task_id, args.task
        )));
    }
    let members: Vec<String> = {
        let mut m: Vec<String> = selection.rankings.iter().flat_map(|r| r.members.clone()).collect();
        m.sort();
        m.dedup();
        m
    };
    let bundle = harness::load_task(&cfg.layout, &args.task, &members, false)?;
    let predictions = Benchmark::predict(&bundle, &selection, cfg.reuse_temperature)?;
    let out = args.out.unwrap_or_else(|| {
        default_report(
            &cfg.layout,
            &format!("{}.{}.predictions.json", args.task, method_tag(selection.method)),
        )
    });
    fsio::write_json(&out, &predictions)?;
    eprintln!("{} predictions -> {}", predictions.records.len(), out.display());
    Ok(())
}

fn with_extension(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_report<T: serde::Serialize>(stem: &Path, text: &str, value: &T) -> anyhow::Result<()> {
    fsio::write_atomic(&with_extension(stem, "txt"), text.as_bytes())?;
    fsio::write_json(&with_extension(stem, "json"), value)?;
    Ok(())
}

fn eval_cmd(cfg: &EngineConfig, args: EvalArgs) -> CmdResult {
    if args.truth.is_some() {
        let tasks: std::collections::BTreeSet<String> = args
            .preds
            .iter()
            .map(|(_, p)| fsio::read_json::<PredictionSet>(p).map(|s| s.task_id))
            .collect::<Result<_, _>>()?;
        if tasks.len() > 1 {
            bail!(MllError::InvalidInput("--truth applies to a single task".into()));
        }
    }
    let mut rows: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut reports = Vec::new();
    for (method, path) in &args.preds {
        let predictions: PredictionSet = fsio::read_json(path)?;
        let truth_path = args
            .truth
            .clone()
            .unwrap_or_else(|| cfg.layout.truth(&predictions.task_id));
        let truth: Truth = fsio::read_json(&truth_path)?;
        let report = harness::evaluate(&predictions, &truth)
            .with_context(|| format!("evaluating {}", path.display()))?;
        let row = rows.entry(method.clone()).or_default();
        if row.insert(report.task_id.clone(), report.accuracy).is_some() {
            bail!(MllError::InvalidInput(format!(
                "method {method} has two prediction files for task {}",
                report.task_id
            )));
        }
        reports.push((method.clone(), report));
    }
    let ordered: Vec<(String, BTreeMap<String, f64>)> = rows.into_iter().collect();
    let mut text = harness::accuracy_table(&ordered)?;
    for (method, report) in &reports {
        text.push('\n');
        text.push_str(&format!("[{method}] "));
        text.push_str(&harness::f1_table(report));
    }
    let json: Vec<serde_json::Value> = reports
        .iter()
        .map(|(method, report)| serde_json::json!({ "name": method, "report": report }))
        .collect();
    let stem = args.out.unwrap_or_else(|| default_report(&cfg.layout, "eval"));
    write_report(&stem, &text, &json)?;
    print!("{text}");
    Ok(())
}

fn load_bench(cfg: &EngineConfig, task_ids: &[String]) -> anyhow::Result<Benchmark> {
    let ids = (!task_ids.is_empty()).then_some(task_ids);
    let bench = Benchmark::load(&cfg.layout, ids)?;
    if bench.tasks.is_empty() {
        bail!(MllError::InvalidInput(format!(
            "no tasks found in {}",
            cfg.layout.tasks.display()
        )));
    }
    Ok(bench)
}

fn bench_cmd(cfg: &EngineConfig, cmd: BenchCmd) -> CmdResult {
    match cmd {
        BenchCmd::Scaling {
            permutations,
            task_ids,
            out,
        } => {
            let bench = load_bench(cfg, &task_ids)?;
            let curve = harness::scaling_experiment(
                &bench,
                permutations,
                cfg.seed,
                &cfg.select,
                cfg.reuse_temperature,
            )?;
            let text = curve.to_table();
            write_report(&out.unwrap_or_else(|| default_report(&cfg.layout, "scaling")), &text, &curve)?;
            print!("{text}");
        }
        BenchCmd::Ablate {
            alphas,
            ks,
            task_ids,
            out,
        } => {
            let bench = load_bench(cfg, &task_ids)?;
            let report = harness::ablate(&bench, &alphas, &ks, &cfg.select, cfg.reuse_temperature)?;
            let text = format!("{}\n{}", report.alpha_table(), report.k_table());
            write_report(&out.unwrap_or_else(|| default_report(&cfg.layout, "ablation")), &text, &report)?;
            print!("{text}");
        }
        BenchCmd::Compare { task_ids, out } => {
            let bench = load_bench(cfg, &task_ids)?;
            let inb = bench.run_inb(cfg.select.k_reuse, cfg.reuse_temperature)?;
            let mll = bench.run(&cfg.select, cfg.reuse_temperature)?;
            let row = |reports: &[harness::EvalReport]| -> BTreeMap<String, f64> {
                reports.iter().map(|r| (r.task_id.clone(), r.accuracy)).collect()
            };
            let rows = vec![
                (harness::method_name(SelectionMethod::Inb).to_string(), row(&inb)),
                (harness::method_name(SelectionMethod::Mll).to_string(), row(&mll)),
            ];
            let text = harness::accuracy_table(&rows)?;
            let json = serde_json::json!({ "k_reuse": cfg.select.k_reuse, "inb": inb, "mll": mll });
            write_report(&out.unwrap_or_else(|| default_report(&cfg.layout, "compare")), &text, &json)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn synth_cmd(cfg: &EngineConfig, args: SynthArgs) -> CmdResult {
    let spec = match &args.spec {
        Some(path) => fsio::read_json(path)?,
        None => synth::specialist_spec(args.classes, args.generalist_acc),
    };
    let non_empty = fs::read_dir(&args.out)
        .map(|mut entries| entries.next().is_some())
        .unwrap_or(false);
    if non_empty {
        bail!(MllError::AlreadyExists(args.out));
    }
    let bench = synth::synth_hub(&spec, cfg.seed)?;
    bench.save(&Layout::under(&args.out))?;
    eprintln!(
        "wrote {} models, {} nodes and {} task(s) to {}",
        bench.hub.len(),
        bench.graph.len(),
        bench.tasks.len(),
        args.out.display()
    );
    Ok(())
}
