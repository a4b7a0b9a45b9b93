use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use detagnostic_core::anchors::{self, Distance, KMeansConfig};
use detagnostic_core::corpus::{self, CorpusManifest};
use detagnostic_core::dataset::{self, DatasetIndex, RegimeThresholds, SizeSource, Split};
use detagnostic_core::eval::{self, ApMode, EvalConfig};
use detagnostic_core::sidecar::{self, ServeOptions};
use detagnostic_core::templates;

/// Dataset-agnostic object detection training tools.
#[derive(Parser)]
#[command(name = "detagnostic", version, about)]
struct Cli {
    /// Machine-readable JSON output where a table would be printed.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset statistics and regime label.
    Stats(StatsArgs),
    /// COCO AP@[0.5:0.95] of a detections file.
    Eval(EvalArgs),
    /// Corpus averages and leaderboard.
    Corpus(CorpusArgs),
    /// Re-cluster anchor boxes from annotations.
    Anchors(AnchorArgs),
    /// Show a model template or instantiate a training plan.
    Template(TemplateArgs),
    /// Run the training controller sidecar.
    Serve(ServeArgs),
}

#[derive(Args)]
struct StatsArgs {
    /// COCO annotation file, or a directory with {train,val,test}.json.
    annotations: PathBuf,
    /// Split the file belongs to (ignored for directories).
    #[arg(long, default_value = "train")]
    split: Split,
    /// Extra validation annotation file merged into the dataset.
    #[arg(long)]
    val: Option<PathBuf>,
    /// JSON file with regime thresholds.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Which annotations feed the object size averages.
    #[arg(long, default_value = "train", value_parser = parse_size_source)]
    size_source: SizeSource,
    /// Print a table row (the default unless --json).
    #[arg(long, conflicts_with = "json")]
    table: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    dets: PathBuf,
    #[arg(long, default_value = "coco101")]
    mode: ApMode,
    /// Split tag of the ground-truth file.
    #[arg(long, default_value = "val")]
    split: Split,
    /// Keep per-class AP in the output.
    #[arg(long)]
    per_class: bool,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of evaluator outputs, `<model>/<dataset>.json`.
    #[arg(long, required_unless_present = "records", conflicts_with = "records")]
    results: Option<PathBuf>,
    /// JSON list of `{model_name, group, ap_pct}` records.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

#[derive(Args)]
struct AnchorArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Network input size, e.g. 864x864.
    #[arg(long, value_parser = parse_resolution)]
    resolution: (u32, u32),
    #[arg(long)]
    k: usize,
    #[arg(long, default_value = "euclidean")]
    distance: Distance,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Split anchors across this many detection heads.
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value = "train")]
    split: Split,
}

#[derive(Args)]
struct TemplateArgs {
    /// Template name; omit to list the builtin templates.
    #[arg(long)]
    name: Option<String>,
    /// Dataset to instantiate the template against (file or split directory).
    #[arg(long, requires = "name")]
    annotations: Option<PathBuf>,
    /// Write the plan here instead of stdout.
    #[arg(short, long, requires = "annotations")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, conflicts_with = "port")]
    stdio: bool,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
}

fn parse_resolution(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u32>().ok().filter(|&n| n > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("expected positive WxH, got `{s}`")),
    }
}

fn parse_size_source(s: &str) -> Result<SizeSource, String> {
    match s {
        "train" => Ok(SizeSource::Train),
        "all" => Ok(SizeSource::All),
        _ => Err(format!("expected train or all, got `{s}`")),
    }
}

fn load_index(path: &Path, split: Split) -> Result<DatasetIndex> {
    let index = if path.is_dir() { dataset::load_dataset_dir(path)? } else { dataset::load_coco(path, split)? };
    Ok(index)
}

fn load_thresholds(path: Option<&Path>) -> Result<RegimeThresholds> {
    match path {
        None => Ok(RegimeThresholds::default()),
        Some(p) => {
            let raw = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&raw).with_context(|| format!("parsing thresholds {}", p.display()))
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn stats(args: StatsArgs, as_json: bool) -> Result<()> {
    let mut index = load_index(&args.annotations, args.split)?;
    if let Some(val) = &args.val {
        index = index.merge(dataset::load_coco(val, Split::Val)?)?;
    }
    let stats = dataset::compute_stats_with(&index, args.size_source);
    let regime = dataset::classify_regime(&stats, &load_thresholds(args.thresholds.as_deref())?);
    if as_json {
        return print_json(&json!({"dataset": index.name(), "stats": stats, "regime": regime}));
    }
    println!("{:<16} {:>7} {:>10} {:>7} {:>7} {:>7}  regime", "dataset", "classes", "size %", "train", "val", "test");
    println!(
        "{:<16} {:>7} {:>10} {:>7} {:>7} {:>7}  {}",
        index.name(),
        stats.num_classes,
        stats.size_label(),
        stats.num_train_images,
        stats.num_val_images,
        stats.num_test_images,
        regime.describe()
    );
    Ok(())
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let index = dataset::load_coco(&args.gt, args.split)?;
    let dets = eval::load_detections(&args.dets)?;
    let config = EvalConfig { mode: args.mode, ..EvalConfig::default() };
    let mut result = eval::coco_map_with(&dets, &index, args.split, &config)?;
    if !args.per_class {
        result.per_class.clear();
        result.per_threshold.iter_mut().for_each(|t| t.per_class.clear());
    }
    print_json(&result)
}

fn corpus_cmd(args: CorpusArgs, as_json: bool) -> Result<()> {
    let manifest = CorpusManifest::load(&args.manifest)?;
    let regimes = manifest.regimes(&load_thresholds(args.thresholds.as_deref())?)?;
    let models = match (&args.results, &args.records) {
        (Some(dir), _) => corpus::load_results_dir(dir)?,
        (None, Some(file)) => {
            let raw = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
            corpus::parse_model_results(&raw)?
        }
        (None, None) => bail!("one of --results or --records is required"),
    };
    let records = models.into_iter().map(|m| m.into_record(&regimes)).collect::<Result<Vec<_>, _>>()?;
    let board = corpus::render_leaderboard(&records)?;
    if as_json {
        print_json(&board)
    } else {
        print!("{}", board.to_text());
        Ok(())
    }
}

fn anchors_cmd(args: AnchorArgs) -> Result<()> {
    let index = load_index(&args.annotations, args.split)?;
    let (w, h) = args.resolution;
    let dims = anchors::collect_box_dims(&index, (w as f64, h as f64), args.split);
    let config = KMeansConfig { distance: args.distance, seed: args.seed, ..KMeansConfig::new(args.k) };
    let (mut set, _) = anchors::kmeans_cluster_traced(&dims, &config)?;
    if let Some(heads) = args.heads {
        set = anchors::assign_to_heads(&set, heads)?;
    }
    print_json(&set)
}

fn template_cmd(args: TemplateArgs, as_json: bool) -> Result<()> {
    let Some(name) = args.name else {
        let all = templates::builtin_templates();
        if as_json {
            return print_json(&all);
        }
        for t in all {
            let (w, h) = t.input_resolution;
            println!("{:<18} {:<8} {w}x{h}  {} GFLOPs", t.name, t.regime.as_str(), t.gflops);
        }
        return Ok(());
    };
    let template = templates::lookup(&name)?;
    let Some(path) = args.annotations else {
        println!("{}", template.to_json());
        return Ok(());
    };
    let plan = templates::instantiate(&template, &load_index(&path, Split::Train)?)?;
    match args.output {
        Some(out) => std::fs::write(&out, plan.to_json() + "\n").with_context(|| format!("writing {}", out.display()))?,
        None => println!("{}", plan.to_json()),
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let options = ServeOptions { snapshot_dir: args.snapshot_dir };
    match args.port {
        Some(port) => {
            let listener = sidecar::bind(port)?;
            eprintln!("listening on {}", listener.local_addr()?);
            sidecar::serve_listener(listener, options)?;
        }
        None => {
            sidecar::serve_stdio(&options)?;
        }
    }
    Ok(())
}

// Library errors already embed their cause in the message; skip causes
// that would repeat it.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats(a) => stats(a, cli.json),
        Command::Eval(a) => evaluate(a),
        Command::Corpus(a) => corpus_cmd(a, cli.json),
        Command::Anchors(a) => anchors_cmd(a),
        Command::Template(a) => template_cmd(a, cli.json),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::from(3)
        }
    }
}
