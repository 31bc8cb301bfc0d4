//! Subcommands of the `agrg` binary.
//!
//! Every command reads a [`RunConfig`] (a JSON file or the defaults), applies
//! flag overrides and works inside the configured output directory:
//!
//! ```text
//! <out_dir>/data/{train,val,test}.agds, manifest.json
//! <out_dir>/ckpt/<pretrain|heads|variant>.agrg
//! <out_dir>/logs/<name>.csv
//! <out_dir>/generations/<variant>-<split>.jsonl
//! <out_dir>/metrics/<name>.json, <name>.txt
//! <out_dir>/ablation/...
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use agrg::checkpoint::Checkpoint;
use agrg::config::RunConfig;
use agrg::data::{split_dataset, Dataset, Splits};
use agrg::metrics::{aggregate, evaluate_corpus, render_table, AggregateReport, MetricsReport, RunMeta};
use agrg::pipeline::{generate_split, run_ablation, run_stage, AblationRun, GeneratedReport, Model, Stage, Variant};
use agrg::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "agrg", version, about = "Anomaly-guided report generation on synthetic CT volumes")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Global {
    /// JSON run configuration; defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "AGRG_SEED")]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the train/val/test splits and a manifest.
    Synth,
    /// Run one training stage.
    Train(TrainArgs),
    /// Generate reports for a split.
    Generate(GenerateArgs),
    /// Score generations against reference reports.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every ablation variant over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// pretrain, heads, decoder or baseline.
    #[arg(long)]
    pub stage: String,
    /// Checkpoint of the preceding stage; defaults to the one under the output directory.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Continue training this stage from its own checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Accept a prior checkpoint produced by different upstream settings.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Slot-expanded conditioning for the text stages.
    #[arg(long)]
    pub expand: Option<bool>,
    /// Where to write the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Variant whose default checkpoint is used when `--checkpoint` is absent.
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// One JSON-lines file per run; several runs are summarized as mean ± std.
    #[arg(long, required = true, num_args = 1..)]
    pub generations: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Row label and file stem of the outputs.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Number of seeds, counted up from the configured seed.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Subset of variants, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::MissingPrerequisite(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

/// Configuration after applying global flags.
pub fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("thread pool already initialized: {e}");
        }
    }
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg).map(|_| ()),
        Command::Train(a) => cmd_train(&cfg, &a).map(|_| ()),
        Command::Generate(a) => cmd_generate(&cfg, &a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&cfg, &a).map(|t| print!("{t}")),
        Command::Ablate(a) => cmd_ablate(&cfg, &a).map(|t| print!("{t}")),
    }
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

pub fn checkpoint_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join("ckpt").join(format!("{name}.agrg"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    create_parent(path)?;
    fs::write(path, contents)?;
    Ok(())
}

/// Synthesizes the three splits and writes them with a manifest. Returns the
/// directory holding them.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let d = &cfg.data;
    let splits = split_dataset(d.n_train, d.n_val, d.n_test, d.base_seed, &d.registry()?, &d.synth_params())?;
    let dir = data_dir(cfg);
    fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    for (name, ds) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        ds.save(&dir.join(format!("{name}.agds")))?;
        entries.push(json!({
            "split": name,
            "cases": ds.len(),
            "first_seed": ds.cases.first().map(|c| c.id),
            "label_rates": ds.label_rates(),
        }));
        info!("wrote {} {name} cases", ds.len());
    }
    let manifest = json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash()?,
        "data": serde_json::to_value(&cfg.data)?,
        "labels": (0..d.k).map(|i| d.registry().map(|r| r.name(i).to_string())).collect::<Result<Vec<_>>>()?,
        "splits": entries,
    });
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(dir)
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<Dataset> {
    let dir = data_dir(cfg);
    let manifest = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest)
        .map_err(|_| Error::MissingPrerequisite(format!("no dataset under {}; run `agrg synth` first", dir.display())))?;
    let m: serde_json::Value = serde_json::from_str(&text)?;
    if m.get("data") != Some(&serde_json::to_value(&cfg.data)?) {
        return Err(Error::Config(format!("dataset under {} was synthesized with other data settings", dir.display())));
    }
    let path = dir.join(format!("{name}.agds"));
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("missing split file {}", path.display())));
    }
    Dataset::load(&path, &cfg.data.registry()?, cfg.data.prevalence)
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    Ok(Splits { train: load_split(cfg, "train")?, val: load_split(cfg, "val")?, test: load_split(cfg, "test")? })
}

fn split_by_name(splits: Splits, name: &str) -> Result<Dataset> {
    match name {
        "train" => Ok(splits.train),
        "val" => Ok(splits.val),
        "test" => Ok(splits.test),
        _ => Err(Error::Config(format!("unknown split `{name}`"))),
    }
}

/// Name of the checkpoint a stage writes.
fn stage_checkpoint_name(stage: Stage, expand: bool) -> &'static str {
    match stage {
        Stage::Pretrain | Stage::Heads => stage.name(),
        Stage::Decoder => Variant::new(true, expand).name(),
        Stage::Baseline => Variant::new(false, expand).name(),
    }
}

fn write_loss_log(path: &Path, cfg: &RunConfig, name: &str, losses: &[(usize, f64)], append: bool) -> Result<()> {
    create_parent(path)?;
    let fresh = !append || !path.exists();
    let mut f = fs::OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(path)?;
    if fresh {
        writeln!(f, "seed,config_hash,stage,epoch,loss")?;
    }
    let hash = cfg.hash()?;
    for (epoch, loss) in losses {
        writeln!(f, "{},{hash},{name},{epoch},{loss:.8}", cfg.seed)?;
    }
    Ok(())
}

/// Trains one stage and writes its checkpoint and loss log. Returns the
/// checkpoint path.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<PathBuf> {
    let stage = Stage::parse(&args.stage)?;
    let mut cfg = cfg.clone();
    if let Some(e) = args.expand {
        cfg.expand = e;
    }
    let s = match stage {
        Stage::Pretrain => &mut cfg.train.pretrain,
        Stage::Heads => &mut cfg.train.heads,
        Stage::Decoder | Stage::Baseline => &mut cfg.train.decoder,
    };
    if let Some(lr) = args.lr {
        s.lr = lr;
    }
    if let Some(e) = args.epochs {
        s.epochs = e;
    }
    if stage == Stage::Heads {
        if let Some(lr) = args.lr {
            cfg.train.head_lr = lr;
        }
    }
    cfg.validate()?;
    let name = stage_checkpoint_name(stage, cfg.expand);
    let out = args.out.clone().unwrap_or_else(|| checkpoint_path(&cfg, name));
    let prior_path = match (&args.prior, args.resume, stage) {
        (Some(p), _, _) => Some(p.clone()),
        (None, true, _) => Some(out.clone()),
        (None, false, Stage::Pretrain) => None,
        (None, false, Stage::Heads | Stage::Baseline) => Some(checkpoint_path(&cfg, "pretrain")),
        (None, false, Stage::Decoder) => Some(checkpoint_path(&cfg, "heads")),
    };
    let prior = prior_path.as_deref().map(Checkpoint::load).transpose()?;
    let splits = load_splits(&cfg)?;
    let report = run_stage(stage, &cfg, &splits, prior.as_ref(), args.force)?;
    report.checkpoint()?.save(&out)?;
    let log = cfg.out_dir.join("logs").join(format!("{name}.csv"));
    write_loss_log(&log, &cfg, stage.name(), &report.losses, args.resume)?;
    info!("saved {}", out.display());
    Ok(out)
}

fn write_jsonl(path: &Path, reports: &[GeneratedReport]) -> Result<()> {
    let mut buf = String::new();
    for r in reports {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    write_file(path, buf)
}

pub fn read_generations(path: &Path) -> Result<Vec<GeneratedReport>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingPrerequisite(format!("generations {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Generates reports for a split and writes them as JSON lines. Returns the
/// output path.
pub fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<PathBuf> {
    let variant = Variant::parse(&args.variant)?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| checkpoint_path(cfg, variant.name()));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = Model::restore(&ckpt)?;
    let data = split_by_name(load_splits(cfg)?, &args.split)?;
    let reports = generate_split(&model, &data)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("generations").join(format!("{}-{}.jsonl", model.variant.name(), args.split)));
    write_jsonl(&out, &reports)?;
    info!("wrote {} reports to {}", reports.len(), out.display());
    Ok(out)
}

/// Scores one generations file.
pub fn evaluate_file(path: &Path, reference: &Dataset) -> Result<MetricsReport> {
    let gens = read_generations(path)?;
    let first = gens.first().ok_or_else(|| Error::Empty(format!("{} has no generations", path.display())))?;
    let meta = RunMeta { seed: first.seed, config_hash: first.config_hash.clone() };
    let pairs: Vec<(u64, String)> = gens.iter().map(|g| (g.case_id, g.report.clone())).collect();
    evaluate_corpus(&pairs, reference, meta)
}

/// Scores every generations file, writes per-run JSON plus a summary, and
/// returns the rendered table.
pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<String> {
    let data = split_by_name(load_splits(cfg)?, &args.split)?;
    let name = args.name.clone().unwrap_or_else(|| {
        args.generations[0].file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned())
    });
    let dir = cfg.out_dir.join("metrics");
    let mut runs = Vec::with_capacity(args.generations.len());
    for (n, path) in args.generations.iter().enumerate() {
        let report = evaluate_file(path, &data)?;
        let file = if args.generations.len() == 1 { format!("{name}.json") } else { format!("{name}.run{n}.json") };
        write_file(&dir.join(file), report.to_json()? + "\n")?;
        runs.push(report);
    }
    let summary = aggregate(&name, &runs)?;
    let table = render_table(std::slice::from_ref(&summary));
    if runs.len() > 1 {
        write_file(&dir.join(format!("{name}.summary.json")), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    write_file(&dir.join(format!("{name}.txt")), &table)?;
    Ok(table)
}

fn ablation_rows(variants: &[Variant], runs: &[MetricsReport], kinds: &[Variant]) -> Result<Vec<AggregateReport>> {
    variants
        .iter()
        .filter_map(|v| {
            let mine: Vec<MetricsReport> =
                runs.iter().zip(kinds).filter(|(_, k)| *k == v).map(|(r, _)| r.clone()).collect();
            (!mine.is_empty()).then(|| aggregate(v.name(), &mine))
        })
        .collect()
}

/// Runs the ablation and returns the comparison table. Each finished run is
/// written immediately, so a failure leaves the completed runs and a partial
/// table behind.
pub fn cmd_ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<String> {
    let variants = match &args.variants {
        Some(names) => names.iter().map(|n| Variant::parse(n.trim())).collect::<Result<Vec<_>>>()?,
        None => Variant::ALL.to_vec(),
    };
    if variants.is_empty() {
        return Err(Error::Config("no variants selected".into()));
    }
    let n = args.seeds.unwrap_or(cfg.ablation_seeds);
    if n == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.seed + i).collect();
    let splits = load_splits(cfg)?;
    let dir = cfg.out_dir.join("ablation");
    fs::create_dir_all(&dir)?;
    let mut done: Vec<MetricsReport> = Vec::new();
    let mut kinds: Vec<Variant> = Vec::new();
    let result = run_ablation(cfg, &splits, &variants, &seeds, |run: &AblationRun| {
        let stem = format!("{}-seed{}", run.variant.name(), run.seed);
        write_jsonl(&dir.join(format!("{stem}.jsonl")), &run.generations)?;
        write_file(&dir.join(format!("{stem}.json")), run.metrics.to_json()? + "\n")?;
        write_loss_log(&dir.join(format!("{stem}.csv")), cfg, run.variant.stage().name(), &run.losses, false)?;
        done.push(run.metrics.clone());
        kinds.push(run.variant);
        let partial = render_table(&ablation_rows(&variants, &done, &kinds)?);
        write_file(&dir.join("table.partial.txt"), partial)
    });
    if let Err(e) = result {
        warn!("ablation stopped after {} runs; partial table in {}", done.len(), dir.display());
        return Err(e);
    }
    let rows = ablation_rows(&variants, &done, &kinds)?;
    let table = render_table(&rows);
    write_file(&dir.join("table.txt"), &table)?;
    write_file(&dir.join("table.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    let _ = fs::remove_file(dir.join("table.partial.txt"));
    Ok(table)
}
