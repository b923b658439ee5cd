//! The `ovseg` command line: fixture generation, template selection,
//! training, evaluation and report emission.
//!
//! Every subcommand writes `manifest.json` into its output directory. The
//! manifest holds the parsed arguments, the effective configuration, the seed,
//! the tool version and the size and SHA-256 of every other file in the
//! directory. It carries no timestamps, so repeated runs with equal inputs
//! produce byte-identical directories.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{load_annotations, make_task_config, synth_fixture, ClassSplit, SynthSpec, TaskMode, ANNOTATION_FILE};
use crate::encoders::EncoderSet;
use crate::error::Error;
use crate::eval::{per_class_report, predictions_to_json, write_ranking_svg, ClassRanking, EvalReport, RankEntry};
use crate::params::hex_digest;
use crate::pipeline::{class_embeddings, evaluate_checkpoint, sweep_table, topn_sweep, TOPN_GRID};
use crate::saim::{build_prompt_bank, SelectionConfig, Strategy};
use crate::trainer::{train, Checkpoint, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "ovseg-manifest";
pub const MANIFEST_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Open-vocabulary instance segmentation toolkit.
#[derive(Debug, Parser)]
#[command(name = "ovseg", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset with COCO-style annotations.
    Synth(SynthArgs),
    /// Report the prompt templates chosen for each class.
    SelectTemplates(SelectArgs),
    /// Train the trainable modules and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a vocabulary and write a mask-AP report.
    Eval(EvalArgs),
    /// Rank classes by AP and draw bar charts from one or two reports.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Seed for shape placement and class draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of images.
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    /// Number of classes (at most 12).
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    /// Shapes per image; each shape in an image has a distinct class.
    #[arg(long, default_value_t = 2)]
    pub shapes: usize,
    /// Side length of the square images in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory; receives images/ and annotations.json.
    #[arg(long)]
    pub out: PathBuf,
}

/// Selection flags shared by `select-templates` and `eval`.
#[derive(Debug, Args, Serialize)]
pub struct SelectionFlags {
    /// Template aggregation strategy.
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    /// Number of top-ranked templates kept per class.
    #[arg(long)]
    pub topn: Option<usize>,
    /// Blend weight of the top-N mean against the all-template mean (mixed).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of top-N templates relative to the rest (weighted).
    #[arg(long = "alpha-enh")]
    pub alpha_enh: Option<f64>,
}

impl SelectionFlags {
    fn apply(&self, cfg: &mut SelectionConfig) {
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(n) = self.topn {
            cfg.top_n = n;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(a) = self.alpha_enh {
            cfg.alpha_enh = a;
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    /// Annotation file of the dataset the sampled images come from.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub selection: SelectionFlags,
    /// Seed for the per-class image draw and the stub encoders.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run configuration supplying encoder and selection settings; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated class names, or @FILE with one name per line.
    /// Defaults to every category in the dataset.
    #[arg(long)]
    pub vocab: Option<String>,
    /// Output directory; receives templates.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Run configuration (TOML). Without it the desk-scale defaults are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Annotation file of the training dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Task protocol; cross-domain requires --eval-data with no shared class.
    #[arg(long, value_enum)]
    pub mode: Option<TaskMode>,
    /// Annotation file of the evaluation dataset, used to check the task split.
    #[arg(long = "eval-data")]
    pub eval_data: Option<PathBuf>,
    /// Seed for every random choice in the run; overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimisation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Optimiser step size.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Images per step.
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Comma-separated class names to supervise, or @FILE; others are ignored.
    #[arg(long = "train-classes")]
    pub train_classes: Option<String>,
    /// Output directory; receives the checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotation file of the evaluation dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Class split file (JSON). Defaults to the checkpoint's training classes
    /// against the vocabulary.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Comma-separated class names, or @FILE with one name per line.
    /// Defaults to the split's evaluation classes, then to every category.
    #[arg(long)]
    pub vocab: Option<String>,
    #[command(flatten)]
    pub selection: SelectionFlags,
    /// Seed for the per-class image draw; defaults to the checkpoint's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Minimum score a prediction needs to be kept.
    #[arg(long = "score-floor")]
    pub score_floor: Option<f64>,
    /// Also evaluate every top-N in 1, 2, 5, 10, 20, 50, 80 and write sweep.tsv.
    #[arg(long = "topn-sweep")]
    pub topn_sweep: bool,
    /// Output directory; receives report.json, report.txt and predictions.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Evaluation report (report.json) to rank.
    #[arg(long)]
    pub report: PathBuf,
    /// Second report whose per-class AP is drawn beside the first.
    #[arg(long)]
    pub report2: Option<PathBuf>,
    /// Number of best and worst classes listed.
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    /// Legend labels for the two reports, comma-separated.
    #[arg(long, default_value = "in-domain,cross-domain")]
    pub labels: String,
    /// Output directory; receives ranking.json, ranking.txt and SVG charts.
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, kind: "usage", message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Divergence { .. } => (EXIT_DIVERGENCE, "divergence"),
            Error::Config(_) | Error::Toml { .. } => (EXIT_USAGE, "config"),
            _ => (EXIT_DATA, "data"),
        };
        Self { code, kind, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Errors are printed to stderr as `error[<kind>]: <message>`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind, e.message);
            e.code
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::SelectTemplates(a) => cmd_select_templates(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let spec = SynthSpec { n_images: a.images, n_classes: a.classes, shapes_per_image: a.shapes, image_size: a.size };
    let fixture = synth_fixture(a.seed, &spec)?;
    fixture.write(&a.out)?;
    write_manifest(&a.out, "synth", Some(a.seed), a, json!(spec))?;
    println!("wrote {} images and {} to {}", a.images, ANNOTATION_FILE, a.out.display());
    Ok(())
}

pub fn cmd_select_templates(a: &SelectArgs) -> CliResult<()> {
    let dataset = load_annotations(&a.data)?;
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(a.seed),
    };
    config.encoder.seed = a.seed;
    config.selection.seed = a.seed;
    a.selection.apply(&mut config.selection);
    let vocab = match &a.vocab {
        Some(v) => parse_names(v)?,
        None => dataset.category_names(),
    };
    let bank = build_prompt_bank();
    let encoders = EncoderSet::from_config(&config.encoder)?;
    let sel = class_embeddings(&dataset, &vocab, &encoders, &config.selection)?;
    let templates = bank.templates();
    let ids = bank.ids();
    let classes: Vec<Value> = vocab
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let chosen = &sel.embeddings.selected[k][0];
            json!({
                "class": name,
                "image_id": sel.sampled[k],
                "fallback": sel.sampled[k].is_none(),
                "template_ids": chosen.iter().map(|&t| ids[t].clone()).collect::<Vec<_>>(),
                "templates": chosen.iter().map(|&t| templates[t].clone()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let report = json!({
        "strategy": config.selection.strategy,
        "top_n": config.selection.top_n,
        "num_templates": bank.len(),
        "classes": classes,
        "warnings": sel.warnings,
    });
    create_dir(&a.out)?;
    write_text(&a.out.join("templates.json"), &pretty(&report))?;
    write_manifest(&a.out, "select-templates", Some(a.seed), a, json!(config.selection))?;
    for w in &sel.warnings {
        eprintln!("warning: {w}");
    }
    println!("selected templates for {} classes into {}", vocab.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut config = match (&a.config, a.seed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(seed)) => RunConfig::desk(seed),
        (None, None) => return Err(CliError::usage("train needs --seed or a --config with a seed")),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
        config.encoder.seed = seed;
        config.selection.seed = seed;
        config.matcher.seed = seed;
    }
    if let Some(m) = a.mode {
        config.mode = m;
    }
    if let Some(s) = a.steps {
        config.optim.steps = s;
    }
    if let Some(lr) = a.lr {
        config.optim.lr = lr;
    }
    if let Some(b) = a.batch_size {
        config.optim.batch_size = b;
    }
    if let Some(c) = &a.train_classes {
        config.task.train_classes = Some(parse_names(c)?);
    }
    config.validate()?;

    let dataset = load_annotations(&a.data)?;
    let train_names = config.task.train_classes.clone().unwrap_or_else(|| dataset.category_names());
    let task = match &a.eval_data {
        Some(p) => {
            let target = load_annotations(p)?;
            let split = ClassSplit::from_names(&train_names, &target.category_names());
            Some(make_task_config(config.mode, &a.data.display().to_string(), &p.display().to_string(), &split)?)
        }
        None if config.mode == TaskMode::CrossDomain => {
            return Err(CliError::usage("cross-domain training needs --eval-data to check the class split"))
        }
        None => None,
    };

    let ck = train(&config, &dataset)?;
    ck.save(&a.out)?;
    if let Some(task) = &task {
        write_text(&a.out.join("task.json"), &pretty(&json!(task)))?;
    }
    write_manifest(&a.out, "train", Some(config.seed), a, json!(config))?;
    println!(
        "trained {} steps on {} classes: loss {:.4} -> {:.4}; checkpoint in {}",
        ck.step,
        ck.vocabulary.len(),
        ck.initial_loss,
        ck.final_loss,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let dataset = load_annotations(&a.data)?;
    let split_file = a.split.as_deref().map(ClassSplit::load).transpose()?;
    let vocab = match (&a.vocab, &split_file) {
        (Some(v), _) => parse_names(v)?,
        (None, Some(s)) => s.val(),
        (None, None) => dataset.category_names(),
    };
    if vocab.is_empty() {
        return Err(CliError::usage("the evaluation vocabulary is empty"));
    }
    let split = split_file.unwrap_or_else(|| ClassSplit::from_names(&ck.vocabulary, &vocab));

    let mut ck = ck;
    if let Some(seed) = a.seed {
        ck.config.selection.seed = seed;
    }
    a.selection.apply(&mut ck.config.selection);
    if let Some(f) = a.score_floor {
        ck.config.infer.score_floor = f;
    }
    ck.config.validate()?;
    let selection = ck.config.selection.clone();

    let ev = evaluate_checkpoint(&ck, &dataset, &vocab, &split, &selection)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("report.json"), &ev.report.to_json_string())?;
    write_text(&a.out.join("report.txt"), &ev.report.table())?;
    write_text(&a.out.join("predictions.json"), &predictions_to_json(&ev.predictions))?;
    write_text(&a.out.join("split.json"), &split.to_json_string())?;
    if a.topn_sweep {
        let rows = topn_sweep(&ck, &dataset, &vocab, &split, &selection, &TOPN_GRID)?;
        write_text(&a.out.join("sweep.tsv"), &sweep_table(&rows))?;
        write_text(&a.out.join("sweep.json"), &pretty(&json!(rows)))?;
    }
    let config = json!({ "selection": selection, "infer": ck.config.infer, "vocabulary": vocab });
    write_manifest(&a.out, "eval", Some(selection.seed), a, config)?;
    for w in &ev.selection.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", ev.report.table());
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let first = EvalReport::load(&a.report)?;
    let second = a.report2.as_deref().map(EvalReport::load).transpose()?;
    let labels: Vec<&str> = a.labels.split(',').map(str::trim).collect();
    if labels.len() != 2 {
        return Err(CliError::usage(format!("--labels needs two comma-separated names, got {:?}", a.labels)));
    }
    let ranking = per_class_report(&first, a.topk, second.as_ref());
    create_dir(&a.out)?;
    write_text(&a.out.join("ranking.json"), &pretty(&json!(ranking)))?;
    write_text(&a.out.join("ranking.txt"), &ranking_table(&ranking))?;
    let pair = (labels[0], labels[1]);
    write_ranking_svg(&ranking.best, &format!("Top {} classes", ranking.best.len()), pair, &a.out.join("best.svg"))?;
    write_ranking_svg(&ranking.worst, &format!("Bottom {} classes", ranking.worst.len()), pair, &a.out.join("worst.svg"))?;
    write_manifest(&a.out, "report", None, a, json!({ "topk": a.topk }))?;
    if let Some(n) = &ranking.notice {
        eprintln!("warning: {n}");
    }
    print!("{}", ranking_table(&ranking));
    Ok(())
}

pub fn ranking_table(r: &ClassRanking) -> String {
    let paired = r.best.iter().chain(&r.worst).any(|e| e.paired_ap.is_some());
    let rows = |title: &str, entries: &[RankEntry]| {
        let mut s = format!("{title}\nrank\tclass\tAP{}\n", if paired { "\tpaired_AP" } else { "" });
        for (i, e) in entries.iter().enumerate() {
            s += &format!("{}\t{}\t{:.2}", i + 1, e.class, e.ap);
            if paired {
                s += &e.paired_ap.map_or("\t-".into(), |v| format!("\t{v:.2}"));
            }
            s.push('\n');
        }
        s
    };
    format!("{}\n{}", rows("best", &r.best), rows("worst", &r.worst))
}

/// `a,b,c` or `@path` with one name per line; blank lines are skipped.
pub fn parse_names(spec: &str) -> CliResult<Vec<String>> {
    let names: Vec<String> = match spec.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
    };
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(CliError::usage(format!("class {dup:?} is listed twice")));
    }
    Ok(names)
}

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

fn write_manifest<A: Serialize>(out: &Path, command: &str, seed: Option<u64>, args: &A, config: Value) -> CliResult<()> {
    let outputs = list_outputs(out)?;
    let manifest = json!({
        "format": MANIFEST_FORMAT,
        "manifest_version": MANIFEST_VERSION,
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "args": args,
        "config": config,
        "outputs": outputs,
    });
    write_text(&out.join(MANIFEST_FILE), &pretty(&manifest))
}

/// Every file below `root` except the manifest, sorted by relative path.
pub fn list_outputs(root: &Path) -> CliResult<Vec<OutputEntry>> {
    fn walk(dir: &Path, root: &Path, acc: &mut Vec<OutputEntry>) -> crate::Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, root, acc)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("walk stays below root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            acc.push(OutputEntry { path: rel, bytes: bytes.len() as u64, sha256: hex_digest(&Sha256::digest(&bytes)) });
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc)?;
    acc.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(acc)
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialise");
    s.push('\n');
    s
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn names_from_list_and_file() {
        assert_eq!(parse_names(" red disc, blue square ,").unwrap(), vec!["red disc", "blue square"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        std::fs::write(&p, "a\n\nb c\n").unwrap();
        assert_eq!(parse_names(&format!("@{}", p.display())).unwrap(), vec!["a", "b c"]);
        assert_eq!(parse_names("a,a").unwrap_err().code, EXIT_USAGE);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Divergence { step: 3 }).code, EXIT_DIVERGENCE);
        assert_eq!(CliError::from(Error::Config("x".into())).code, EXIT_USAGE);
        let io = Error::io("missing.json", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(CliError::from(io).code, EXIT_DATA);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["ovseg", "synth", "--out", "x", "--colour", "red"]), EXIT_USAGE);
        assert_eq!(run(["ovseg", "train", "--data", "d.json", "--out", "o"]), EXIT_USAGE);
    }

    #[test]
    fn ranking_table_marks_missing_pairs() {
        let e = |c: &str, ap, p| RankEntry { class: c.into(), ap, paired_ap: p };
        let r = ClassRanking { best: vec![e("a", 90.0, Some(80.0))], worst: vec![e("b", 10.0, None)], notice: None };
        let t = ranking_table(&r);
        assert!(t.contains("1\ta\t90.00\t80.00\n"));
        assert!(t.contains("1\tb\t10.00\t-\n"));
    }
}
