//! Command-line front end: `gen`, `train`, `eval`, `pareto` and `extbench`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charset::CharSet;
use crate::error::{Error, Result};
use crate::extocr::{bench_external, preprocess, EngineSpec, PreprocessOp};
use crate::imaging::load_png;
use crate::lprnet::{LprNet, LprNetConfig, Widths, INPUT_WIDTH};
use crate::metrics::{evaluate, length_split_table, write_records, write_summary, read_records, PredictionRecord};
use crate::optim::{train, TrainSchedule, TrainingSet};
use crate::pareto::{build_pareto, emit_pareto_chart, tally_same_length_errors};
use crate::platesynth::{generate_dataset, Manifest, PlateGrammar, RenderParams, DEFAULT_PATTERN, MANIFEST_FILE};
use crate::tensor::Tensor4;

pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.lprb";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SPLIT_CSV: &str = "length_split.csv";
pub const RECORDS_CSV: &str = "records.csv";
pub const EXHIBIT_DIR: &str = "exhibits";
pub const FP_CHART: &str = "pareto_fp.svg";
pub const FN_CHART: &str = "pareto_fn.svg";

const EVAL_BATCH: usize = 50;

fn default_grammar() -> String {
    DEFAULT_PATTERN.to_string()
}

fn default_widths() -> String {
    "full".into()
}

fn default_dropout() -> f64 {
    0.5
}

/// Columns averaged per CTC timestep in trained models (94 / 4 = 23 steps).
/// With all 94 steps the network stays on the label-prior plateau for
/// thousands of iterations.
pub const DESK_WIDTH_POOL: usize = 4;

fn default_width_pool() -> usize {
    DESK_WIDTH_POOL
}

fn default_pipeline() -> Vec<String> {
    vec!["crop".into(), "resize".into(), "bgr".into()]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_count() -> usize {
    1000
}

fn default_exhibits() -> usize {
    5
}

fn default_schedule() -> TrainSchedule {
    TrainSchedule::desk()
}

/// Everything a run needs. Loaded from JSON, then command-line flags are
/// applied on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub charset: CharSet,
    #[serde(default = "default_grammar")]
    pub grammar: String,
    /// `full` or `tiny`.
    #[serde(default = "default_widths")]
    pub widths: String,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Columns averaged per output timestep; 1 keeps all 94.
    #[serde(default = "default_width_pool")]
    pub width_pool: usize,
    #[serde(default = "default_schedule")]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub records: Option<PathBuf>,
    /// Steps turning a source image into network input.
    #[serde(default = "default_pipeline")]
    pub preprocess: Vec<String>,
    /// Steps applied before an external engine sees an image.
    #[serde(default)]
    pub engine_preprocess: Vec<String>,
    #[serde(default)]
    pub engine: Option<EngineSpec>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_exhibits")]
    pub exhibits: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Canonical JSON; parsing it gives back an equal config.
    pub fn normalized(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.plate_grammar()?;
        self.model_config()?;
        self.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pipeline()?;
        self.engine_pipeline()?;
        if let Some(engine) = &self.engine {
            engine.validate()?;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(1..=INPUT_WIDTH).contains(&self.width_pool) {
            return Err(Error::Config(format!("width_pool {} outside 1..={INPUT_WIDTH}", self.width_pool)));
        }
        Ok(())
    }

    pub fn plate_grammar(&self) -> Result<PlateGrammar> {
        PlateGrammar::new(&self.grammar, self.charset.clone())
    }

    pub fn model_config(&self) -> Result<LprNetConfig> {
        let mut cfg = LprNetConfig::new(self.charset.clone(), self.seed);
        cfg.widths = Widths::by_name(&self.widths)?;
        cfg.dropout_ratio = self.dropout;
        cfg.width_pool = self.width_pool;
        Ok(cfg)
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seed,
            ..self.schedule.clone()
        }
    }

    pub fn pipeline(&self) -> Result<Vec<PreprocessOp>> {
        self.preprocess.iter().map(|s| PreprocessOp::parse(s)).collect()
    }

    pub fn engine_pipeline(&self) -> Result<Vec<PreprocessOp>> {
        self.engine_preprocess.iter().map(|s| PreprocessOp::parse(s)).collect()
    }
}

#[derive(Debug, Parser)]
#[command(name = "lprkit", version, about = "License plate recognition toolkit")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic plate dataset.
    Gen(GenArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Build false-positive and false-negative Pareto charts from records.
    Pareto(ParetoArgs),
    /// Benchmark an external OCR command on a dataset.
    Extbench(ExtbenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// Plate pattern, D for a digit and L for a letter.
    #[arg(long)]
    pub grammar: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory holding manifest.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `full` or `tiny`.
    #[arg(long)]
    pub widths: Option<String>,
    /// Columns averaged per output timestep.
    #[arg(long)]
    pub width_pool: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of misclassified images to copy out.
    #[arg(long)]
    pub exhibits: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ParetoArgs {
    /// records.csv written by eval or extbench.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtbenchArgs {
    /// Command line with a single `{input}` placeholder.
    #[arg(long)]
    pub engine: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Preprocessing steps: crop[:l,t,r,b], resize[:WxH], bgr, binarize.
    #[arg(long = "preprocess", value_delimiter = ',')]
    pub preprocess: Option<Vec<String>>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub postprocess: bool,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Name of the report subdirectory.
    #[arg(long)]
    pub label: Option<String>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Gen(a) => {
            set(&mut cfg.count, a.count);
            set(&mut cfg.grammar, a.grammar.clone());
        }
        Command::Train(a) => {
            set_opt(&mut cfg.train_data, a.data.clone());
            set(&mut cfg.schedule.total_iters, a.iters);
            set(&mut cfg.schedule.batch_size, a.batch);
            set(&mut cfg.schedule.base_lr, a.lr);
            set(&mut cfg.widths, a.widths.clone());
            set(&mut cfg.width_pool, a.width_pool);
        }
        Command::Eval(a) => {
            set_opt(&mut cfg.checkpoint, a.checkpoint.clone());
            set_opt(&mut cfg.test_data, a.data.clone());
            set(&mut cfg.exhibits, a.exhibits);
        }
        Command::Pareto(a) => set_opt(&mut cfg.records, a.records.clone()),
        Command::Extbench(a) => {
            set_opt(&mut cfg.test_data, a.data.clone());
            set(&mut cfg.engine_preprocess, a.preprocess.clone());
            set_opt(&mut cfg.label, a.label.clone());
            if let Some(t) = &a.engine {
                let mut spec = EngineSpec::new(t.clone())?;
                if let Some(old) = &cfg.engine {
                    spec.timeout_ms = old.timeout_ms;
                    spec.postprocess = old.postprocess;
                    spec.concurrency = old.concurrency;
                }
                spec.charset = cfg.charset.clone();
                cfg.engine = Some(spec);
            }
            if let Some(spec) = cfg.engine.as_mut() {
                set(&mut spec.timeout_ms, a.timeout_ms);
                set(&mut spec.concurrency, a.concurrency);
                spec.postprocess |= a.postprocess;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given")))?;
    if !p.exists() {
        return Err(Error::MissingPath(p.to_path_buf()));
    }
    Ok(p)
}

fn require_dataset<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let dir = require(path, what)?;
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::MissingPath(manifest));
    }
    Ok(dir)
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Gen(_) => cmd_gen(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Pareto(_) => cmd_pareto(&cfg),
        Command::Extbench(_) => cmd_extbench(&cfg),
    }
}

/// Writes `run.json`: the command, the seed and the resolved config. The
/// output directory is left out so identical runs in different places
/// produce identical files.
fn write_run_record(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let mut config = serde_json::to_value(cfg)?;
    if let Some(map) = config.as_object_mut() {
        map.remove("out");
    }
    let rec = serde_json::json!({ "command": command, "seed": cfg.seed, "config": config });
    std::fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    if cfg.count == 0 {
        return Err(Error::Parameter("--count must be at least 1".into()));
    }
    let grammar = cfg.plate_grammar()?;
    let manifest = generate_dataset(cfg.count, &grammar, &RenderParams::default(), &cfg.out, cfg.seed)?;
    write_run_record(&cfg.out, "gen", cfg)?;
    let mut freq: BTreeMap<char, usize> = BTreeMap::new();
    for row in &manifest.rows {
        for c in row.label.chars() {
            *freq.entry(c).or_default() += 1;
        }
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "manifest: {}", cfg.out.join(MANIFEST_FILE).display())?;
    writeln!(stdout, "{} plates, grammar {}", manifest.rows.len(), grammar.pattern())?;
    let summary: Vec<String> = freq.iter().map(|(c, n)| format!("{c}:{n}")).collect();
    writeln!(stdout, "character counts: {}", summary.join(" "))?;
    Ok(())
}

/// Network inputs for every manifest entry, in manifest order.
pub fn load_network_inputs(dir: &Path, ops: &[PreprocessOp]) -> Result<Vec<(PathBuf, Tensor4, String)>> {
    Manifest::load_dir(dir)?
        .into_par_iter()
        .map(|(path, label)| {
            let img = preprocess(&load_png(&path)?, ops)?;
            Ok((path, img.into_tensor(), label))
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data_dir = require_dataset(&cfg.train_data, "training dataset (--data)")?;
    let model_cfg = cfg.model_config()?;
    let schedule = cfg.train_schedule();
    let samples = load_network_inputs(data_dir, &cfg.pipeline()?)?;
    let set = TrainingSet::new(&cfg.charset, samples.into_iter().map(|(_, t, l)| (t, l)).collect())?;
    let mut net = LprNet::new(model_cfg)?;
    log::info!(
        "training on {} samples for {} iterations, {} parameters",
        set.len(),
        schedule.total_iters,
        net.parameter_count()
    );
    std::fs::create_dir_all(&cfg.out)?;
    write_run_record(&cfg.out, "train", cfg)?;
    let log = train(&mut net, &set, &schedule, Some(&cfg.out))?;
    net.save(&cfg.out.join(MODEL_FILE))?;
    let mut stdout = std::io::stdout().lock();
    if let Some(last) = log.records.last() {
        writeln!(stdout, "final loss {:.4} after {} iterations", last.loss, last.iteration + 1)?;
    }
    writeln!(stdout, "model: {}", cfg.out.join(MODEL_FILE).display())?;
    Ok(())
}

fn write_reports(dir: &Path, label: &str, records: &[PredictionRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let report = evaluate(records)?;
    let split = length_split_table(records);
    report.write_json(&dir.join(REPORT_JSON))?;
    report.write_csv(&dir.join(REPORT_CSV))?;
    split.write_csv(&dir.join(SPLIT_CSV))?;
    write_records(&dir.join(RECORDS_CSV), records)?;
    write_summary(std::io::stdout().lock(), label, &report, &split)?;
    Ok(())
}

/// Writes both charts and returns false when there is nothing to chart.
pub fn emit_pareto_pair(dir: &Path, records: &[PredictionRecord]) -> Result<bool> {
    let tally = tally_same_length_errors(records);
    if tally.is_empty() {
        return Ok(false);
    }
    std::fs::create_dir_all(dir)?;
    emit_pareto_chart(&build_pareto(&tally.fp_counts)?, "False positive characters", &dir.join(FP_CHART))?;
    emit_pareto_chart(&build_pareto(&tally.fn_counts)?, "False negative characters", &dir.join(FN_CHART))?;
    Ok(true)
}

fn file_safe(s: &str) -> String {
    if s.is_empty() {
        return "-".into();
    }
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

#[derive(Serialize)]
struct ExhibitRow<'a> {
    file: String,
    ground_truth: &'a str,
    predicted: &'a str,
    source: &'a str,
}

fn write_exhibits(dir: &Path, k: usize, items: &[(PathBuf, &PredictionRecord)]) -> Result<()> {
    let ex = dir.join(EXHIBIT_DIR);
    if ex.exists() {
        std::fs::remove_dir_all(&ex)?;
    }
    std::fs::create_dir_all(&ex)?;
    let mut w = csv::Writer::from_path(ex.join("exhibits.csv"))?;
    for (i, (src, rec)) in items.iter().filter(|(_, r)| r.ground_truth != r.predicted).take(k).enumerate() {
        let file = format!("{:02}_{}_as_{}.png", i + 1, file_safe(&rec.ground_truth), file_safe(&rec.predicted));
        std::fs::copy(src, ex.join(&file))?;
        w.serialize(ExhibitRow {
            file,
            ground_truth: &rec.ground_truth,
            predicted: &rec.predicted,
            source: &rec.sample_id,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let ckpt = require(&cfg.checkpoint, "checkpoint (--checkpoint)")?;
    let data_dir = require_dataset(&cfg.test_data, "test dataset (--data)")?;
    let net = LprNet::load(ckpt)?;
    let samples = load_network_inputs(data_dir, &cfg.pipeline()?)?;
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Tensor4::stack(&chunk.iter().map(|(_, t, _)| t.clone()).collect::<Vec<_>>())?;
        for (pred, (path, _, label)) in net.recognize(&batch)?.into_iter().zip(chunk) {
            let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            records.push(PredictionRecord::new(label.clone(), pred, id));
        }
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_run_record(&cfg.out, "eval", cfg)?;
    write_reports(&cfg.out, cfg.label.as_deref().unwrap_or("lprnet"), &records)?;
    let items: Vec<(PathBuf, &PredictionRecord)> = samples.iter().map(|(p, _, _)| p.clone()).zip(&records).collect();
    write_exhibits(&cfg.out, cfg.exhibits, &items)?;
    Ok(())
}

pub fn cmd_pareto(cfg: &RunConfig) -> Result<()> {
    let path = require(&cfg.records, "records file (--records)")?;
    let records = read_records(path)?;
    if !emit_pareto_pair(&cfg.out, &records)? {
        println!("no TN2 errors: nothing to chart");
        return Ok(());
    }
    println!("charts: {} {}", cfg.out.join(FP_CHART).display(), cfg.out.join(FN_CHART).display());
    Ok(())
}

pub fn cmd_extbench(cfg: &RunConfig) -> Result<()> {
    let spec = cfg
        .engine
        .as_ref()
        .ok_or_else(|| Error::Config("no engine given (--engine)".into()))?;
    if !spec.program_available() {
        let argv = spec.argv(Path::new(""))?;
        return Err(Error::Config(format!("engine program {:?} not found", argv[0])));
    }
    let data_dir = require_dataset(&cfg.test_data, "test dataset (--data)")?;
    let ops = cfg.engine_pipeline()?;
    let label = match &cfg.label {
        Some(l) => l.clone(),
        None if cfg.engine_preprocess.is_empty() => "raw".into(),
        None => cfg.engine_preprocess.join("+"),
    };
    let samples = Manifest::load_dir(data_dir)?;
    let bench = bench_external(spec, &samples, &ops)?;
    let dir = cfg.out.join(file_safe(&label));
    std::fs::create_dir_all(&dir)?;
    write_run_record(&dir, "extbench", cfg)?;
    write_reports(&dir, &label, &bench.records)?;
    if !bench.failures.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
        w.write_record(["sample_id", "error"])?;
        for (id, e) in &bench.failures {
            w.write_record([id, e])?;
        }
        w.flush()?;
    }
    emit_pareto_pair(&dir, &bench.records)?;
    Ok(())
}
