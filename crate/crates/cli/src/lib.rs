//! `likra`: experiment runner for the likelihood-ratio toy lab.
//!
//! Every command writes one run directory holding `manifest.json`,
//! `metrics.csv` and `checkpoints/`. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or configuration error.

pub mod run;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use likra_core::data::{load_mcq_jsonl, NegativeKind};
use likra_core::eval::{read_table_jsonl, score_from_table, write_table_jsonl, AnswerType, EvalError, EvalReport, MassRow};
use likra_core::experiment::{
    dedup_weights, mean_rows, pretrain_base, run_curves, CurveRow, ExperimentConfig, ExperimentError, HeadId, Lab,
};
use likra_core::lm::checkpoint::{load_adapter, load_base, save_adapter, save_base};
use likra_core::lm::{BaseWeights, LmError, LoraAdapter};
use likra_core::train::{write_log_jsonl, TrainError};

use run::RunDir;

pub const RUN_ROOT_ENV: &str = "LIKRA_RUN_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::MissingCheckpoints(_) => CliError::Config(e.to_string()),
            ExperimentError::Eval(EvalError::MissingEntries(_) | EvalError::Table { .. }) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        ExperimentError::from(e).into()
    }
}

#[derive(Debug, Parser)]
#[command(name = "likra", version, about = "Likelihood-ratio head experiments on a tiny byte-level transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Run directory to create. Defaults to a fresh directory under the run root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parent of generated run directories.
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Pos,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Incorrect,
    Irrelevant,
    Unrelated,
}

impl From<StrategyArg> for NegativeKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Incorrect => NegativeKind::Incorrect,
            StrategyArg::Irrelevant => NegativeKind::Irrelevant,
            StrategyArg::Unrelated => NegativeKind::Unrelated,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain base models, one per seed.
    Pretrain(Common),
    /// Train one head on the first n examples of its pool.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        head: HeadArg,
        #[arg(long)]
        n: usize,
        /// Negative strategy; the configured one when omitted.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Earlier run whose base checkpoints to reuse.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Learning curves over the size grid.
    Curve {
        #[command(flatten)]
        common: Common,
        /// Earlier run whose base checkpoints to reuse.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Accuracy over the negative-head weight grid.
    SweepWeight {
        #[command(flatten)]
        common: Common,
        /// Curve run whose heads to reuse; heads are trained when omitted.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Mean per-character log-likelihood change by answer type.
    ProbeMass {
        #[command(flatten)]
        common: Common,
        /// Curve run holding the checkpoints.
        #[arg(long)]
        from: PathBuf,
    },
    /// Decisions from a likelihood table supplied from elsewhere.
    EvalTable {
        /// JSONL rows of per-choice likelihoods.
        #[arg(long)]
        table: PathBuf,
        /// JSONL multiple-choice items the table covers.
        #[arg(long)]
        items: PathBuf,
        /// Negative-head weight; the configured weight, or 1, when omitted.
        #[arg(long)]
        weight: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let printable: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, printable) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Reads, resolves and validates a configuration file. Relative paths in
/// it are taken relative to the file.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Config(format!("config file not found: {}", path.display()))
        } else {
            CliError::Config(format!("cannot read config file {}: {e}", path.display()))
        }
    })?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    cfg.dataset.rebase(dir);
    if let Some(p) = cfg.base_checkpoint.as_mut() {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir_path(output: &Output, command: &str) -> PathBuf {
    output.out.clone().unwrap_or_else(|| {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        output.run_root.join(format!("{command}-{stamp}-{}", std::process::id()))
    })
}

fn open_run(common: &Common, command: &str, cfg: &ExperimentConfig, args: Vec<String>) -> Result<RunDir, CliError> {
    let config = serde_json::to_value(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut inputs = cfg.dataset.input_files();
    inputs.extend(cfg.base_checkpoint.iter().filter(|p| !p.to_string_lossy().contains("{seed}")).cloned());
    RunDir::create(
        &run_dir_path(&common.output, command),
        command,
        args,
        config,
        cfg.seeds.clone(),
        &inputs,
    )
}

fn seed_dir(seed: u64) -> String {
    format!("checkpoints/seed{seed}")
}

fn rel_checkpoint(seed: u64, name: &str) -> String {
    format!("{}/{name}", seed_dir(seed))
}

/// Base for one seed: the `from` run's checkpoint, then the configured
/// checkpoint, then fresh pretraining. The result is always saved into the
/// run so later commands can point at it.
fn obtain_base(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &likra_core::experiment::Dataset,
    from: Option<&Path>,
    run: &RunDir,
) -> Result<BaseWeights, CliError> {
    let base = if let Some(dir) = from {
        let p = dir.join(rel_checkpoint(seed, "base.lkb"));
        if !p.exists() {
            return Err(CliError::Config(format!("no base checkpoint for seed {seed} at {}", p.display())));
        }
        load_base(&p)?
    } else if let Some(p) = &cfg.base_checkpoint {
        let p = PathBuf::from(p.to_string_lossy().replace("{seed}", &seed.to_string()));
        if !p.exists() {
            return Err(CliError::Config(format!("base checkpoint not found: {}", p.display())));
        }
        load_base(&p)?
    } else {
        match pretrain_base(cfg, data, seed) {
            Ok(out) => out.weights,
            Err(ExperimentError::Train(TrainError::Diverged { step, reason, last_good })) => {
                save_base(&run.file(&rel_checkpoint(seed, "base-last-good.lkb"))?, &last_good)?;
                return Err(CliError::Runtime(format!(
                    "pretraining diverged at step {step}: {reason}; last good weights saved"
                )));
            }
            Err(e) => return Err(e.into()),
        }
    };
    if base.config != cfg.model {
        return Err(CliError::Config(
            "base checkpoint was built with a different model config".into(),
        ));
    }
    save_base(&run.file(&rel_checkpoint(seed, "base.lkb"))?, &base)?;
    Ok(base)
}

fn load_head(dir: &Path, seed: u64, head: HeadId, n: usize, base: &BaseWeights) -> Result<LoraAdapter, CliError> {
    let p = dir.join(rel_checkpoint(seed, &head.checkpoint_name(n)));
    let ckpt = load_adapter(&p)?;
    ckpt.check_base(base)
        .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    Ok(ckpt.adapter)
}

fn lab_for(
    cfg: &ExperimentConfig,
    seed: u64,
    jobs: usize,
    from: Option<&Path>,
    run: &RunDir,
) -> Result<Lab, CliError> {
    let data = cfg.dataset.load(seed)?;
    let base = obtain_base(cfg, seed, &data, from, run)?;
    Ok(Lab::new(cfg, seed, data, base, jobs)?)
}

fn csv<T>(header: &str, rows: &[T], line: impl Fn(&T) -> String) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(header);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", line(r));
    }
    s
}

/// `metrics.csv` holds the mean over seeds; with several seeds each one
/// also gets `metrics-seed<s>.csv`.
fn write_metrics<T>(
    run: &RunDir,
    seeds: &[u64],
    per_seed: &[Vec<T>],
    mean: &[T],
    header: &str,
    line: impl Fn(&T) -> String + Copy,
) -> Result<(), CliError> {
    if seeds.len() > 1 {
        for (s, rows) in seeds.iter().zip(per_seed) {
            run.write(&format!("metrics-seed{s}.csv"), &csv(header, rows, line))?;
        }
    }
    run.write("metrics.csv", &csv(header, mean, line))
}

fn execute(command: Command, args: Vec<String>) -> Result<PathBuf, CliError> {
    match command {
        Command::Pretrain(common) => cmd_pretrain(&common, args),
        Command::Finetune {
            common,
            head,
            n,
            strategy,
            from,
        } => cmd_finetune(&common, head, n, strategy, from.as_deref(), args),
        Command::Curve { common, from } => cmd_curve(&common, from.as_deref(), args),
        Command::SweepWeight { common, from } => cmd_sweep(&common, from.as_deref(), args),
        Command::ProbeMass { common, from } => cmd_probe(&common, &from, args),
        Command::EvalTable {
            table,
            items,
            weight,
            config,
            output,
        } => cmd_eval_table(&table, &items, weight, config.as_deref(), &output, args),
    }
}

fn cmd_pretrain(common: &Common, args: Vec<String>) -> Result<PathBuf, CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    let run = open_run(common, "pretrain", &cfg, args)?;
    let root = run.root().to_path_buf();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = cfg.dataset.load(seed)?;
        let out = match pretrain_base(&cfg, &data, seed) {
            Ok(out) => out,
            Err(ExperimentError::Train(TrainError::Diverged { step, reason, last_good })) => {
                save_base(&run.file(&rel_checkpoint(seed, "base-last-good.lkb"))?, &last_good)?;
                return Err(CliError::Runtime(format!(
                    "pretraining diverged at step {step}: {reason}; last good weights saved"
                )));
            }
            Err(e) => return Err(e.into()),
        };
        save_base(&run.file(&rel_checkpoint(seed, "base.lkb"))?, &out.weights)?;
        rows.extend(out.log.iter().map(|l| (seed, l.step, l.loss)));
    }
    run.write("metrics.csv", &csv("seed,step,loss", &rows, |(s, k, l)| format!("{s},{k},{l}")))?;
    run.finish()?;
    Ok(root)
}

fn cmd_finetune(
    common: &Common,
    head: HeadArg,
    n: usize,
    strategy: Option<StrategyArg>,
    from: Option<&Path>,
    args: Vec<String>,
) -> Result<PathBuf, CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    let run = open_run(common, "finetune", &cfg, args)?;
    let root = run.root().to_path_buf();
    let head = match head {
        HeadArg::Pos => HeadId::Positive,
        HeadArg::Neg => HeadId::Negative(strategy.map(Into::into).unwrap_or(cfg.negative_strategy)),
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let lab = lab_for(&cfg, seed, common.jobs, from, &run)?;
        let pool = lab.pool(head)?.len();
        if n > pool {
            return Err(CliError::Config(format!("n = {n} exceeds the training pool of {pool}")));
        }
        let out = lab.train_head_logged(head, n)?;
        save_adapter(&run.file(&rel_checkpoint(seed, &head.checkpoint_name(n)))?, &out.adapter, &lab.base)?;
        let log = run.file(&format!("logs/{}-n{n:04}-seed{seed}.jsonl", head.stem()))?;
        write_log_jsonl(&log, &out.log).map_err(|e| CliError::Runtime(format!("{}: {e}", log.display())))?;
        rows.extend(out.log.iter().map(|l| (seed, l.step, l.loss)));
    }
    run.write("metrics.csv", &csv("seed,step,loss", &rows, |(s, k, l)| format!("{s},{k},{l}")))?;
    run.finish()?;
    Ok(root)
}

fn cmd_curve(common: &Common, from: Option<&Path>, args: Vec<String>) -> Result<PathBuf, CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    let run = open_run(common, "curve", &cfg, args)?;
    let root = run.root().to_path_buf();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let lab = lab_for(&cfg, seed, common.jobs, from, &run)?;
        // obtain_base already created the seed's checkpoint directory.
        let ckpt_dir = root.join(seed_dir(seed));
        let result = run_curves(&lab, |head, n, adapter| {
            save_adapter(&ckpt_dir.join(head.checkpoint_name(n)), adapter, &lab.base)?;
            Ok(())
        })?;
        for t in &result.tables {
            let p = run.file(&format!("tables/seed{seed}/likra-{}-n{:04}.jsonl", t.strategy.name(), t.n_examples))?;
            write_table_jsonl(&p, &t.table)?;
        }
        per_seed.push(result.rows);
    }
    let mean = mean_rows(&per_seed)?;
    write_metrics(&run, &cfg.seeds, &per_seed, &mean, CurveRow::CSV_HEADER, CurveRow::csv_row)?;
    run.finish()?;
    Ok(root)
}

#[derive(Debug, Clone, PartialEq)]
struct SweepRow {
    w: f64,
    acc_norm: f64,
}

fn cmd_sweep(common: &Common, from: Option<&Path>, args: Vec<String>) -> Result<PathBuf, CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    let (weights, dropped) = dedup_weights(&cfg.weights);
    if !dropped.is_empty() {
        let list: Vec<String> = dropped.iter().map(|w| w.to_string()).collect();
        eprintln!("warning: duplicate weights removed from the sweep grid: {}", list.join(", "));
    }
    let run = open_run(common, "sweep-weight", &cfg, args)?;
    let root = run.root().to_path_buf();
    let neg_id = HeadId::Negative(cfg.negative_strategy);
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let lab = lab_for(&cfg, seed, common.jobs, from, &run)?;
        let grid = lab.size_grid();
        let n = match cfg.sweep_n {
            Some(n) if grid.contains(&n) || from.is_none() => n,
            Some(n) => return Err(CliError::Config(format!("sweep_n = {n} is not on the size grid"))),
            None => *grid.last().ok_or_else(|| CliError::Config("the size grid is empty".into()))?,
        };
        let (pos, neg) = match from {
            Some(dir) => {
                if [HeadId::Positive, neg_id]
                    .iter()
                    .any(|h| !dir.join(rel_checkpoint(seed, &h.checkpoint_name(n))).exists())
                {
                    return Err(ExperimentError::MissingCheckpoints(vec![n]).into());
                }
                (
                    load_head(dir, seed, HeadId::Positive, n, &lab.base)?,
                    load_head(dir, seed, neg_id, n, &lab.base)?,
                )
            }
            None => {
                let pos = lab.train_head(HeadId::Positive, n)?;
                let neg = lab.train_head(neg_id, n)?;
                save_adapter(&run.file(&rel_checkpoint(seed, &HeadId::Positive.checkpoint_name(n)))?, &pos, &lab.base)?;
                save_adapter(&run.file(&rel_checkpoint(seed, &neg_id.checkpoint_name(n)))?, &neg, &lab.base)?;
                (pos, neg)
            }
        };
        let points = lab.sweep(&pos, &neg, &weights)?;
        per_seed.push(
            points
                .iter()
                .map(|p| SweepRow {
                    w: p.weight,
                    acc_norm: p.acc_norm,
                })
                .collect::<Vec<_>>(),
        );
    }
    let mut mean = per_seed[0].clone();
    for rows in &per_seed[1..] {
        for (m, r) in mean.iter_mut().zip(rows) {
            m.acc_norm += r.acc_norm;
        }
    }
    for m in &mut mean {
        m.acc_norm /= per_seed.len() as f64;
    }
    write_metrics(&run, &cfg.seeds, &per_seed, &mean, "w,acc_norm", |r| format!("{},{}", r.w, r.acc_norm))?;
    run.finish()?;
    Ok(root)
}

fn cmd_probe(common: &Common, from: &Path, args: Vec<String>) -> Result<PathBuf, CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    let run = open_run(common, "probe-mass", &cfg, args)?;
    let root = run.root().to_path_buf();
    let heads = [HeadId::Positive, HeadId::Negative(cfg.negative_strategy)];
    let mut per_seed: Vec<Vec<MassRow>> = Vec::new();
    for &seed in &cfg.seeds {
        let lab = lab_for(&cfg, seed, common.jobs, Some(from), &run)?;
        let grid = lab.size_grid();
        let mut missing: Vec<usize> = grid
            .iter()
            .copied()
            .filter(|&n| heads.iter().any(|h| !from.join(rel_checkpoint(seed, &h.checkpoint_name(n))).exists()))
            .collect();
        missing.dedup();
        if !missing.is_empty() {
            return Err(ExperimentError::MissingCheckpoints(missing).into());
        }
        let mut checkpoints = Vec::new();
        for h in heads {
            for &n in &grid {
                checkpoints.push((h.stem(), n, Some(load_head(from, seed, h, n, &lab.base)?)));
            }
        }
        per_seed.push(lab.probe_rows(&checkpoints)?);
    }
    let mut mean = per_seed[0].clone();
    for rows in &per_seed[1..] {
        for (m, r) in mean.iter_mut().zip(rows) {
            m.mean_delta_per_char += r.mean_delta_per_char;
        }
    }
    for m in &mut mean {
        m.mean_delta_per_char /= per_seed.len() as f64;
    }
    let line = |r: &MassRow| {
        format!(
            "{},{},{},{}",
            r.head,
            r.n_examples,
            r.answer_type.name(),
            r.mean_delta_per_char
        )
    };
    write_metrics(&run, &cfg.seeds, &per_seed, &mean, "head,n_examples,answer_type,mean_delta_per_char", line)?;
    run.finish()?;
    Ok(root)
}

fn cmd_eval_table(
    table: &Path,
    items: &Path,
    weight: Option<f64>,
    config: Option<&Path>,
    output: &Output,
    args: Vec<String>,
) -> Result<PathBuf, CliError> {
    let cfg = config.map(|p| load_config(p, None)).transpose()?;
    let weight = weight.or(cfg.as_ref().map(|c| c.weight)).unwrap_or(1.0);
    if !(weight.is_finite() && weight >= 0.0) {
        return Err(CliError::Usage(format!("weight {weight} must be finite and non-negative")));
    }
    for p in [table, items] {
        if !p.exists() {
            return Err(CliError::Config(format!("input file not found: {}", p.display())));
        }
    }
    let config_value = serde_json::json!({ "weight": weight, "table": table, "items": items, "config": cfg });
    let run = RunDir::create(
        &run_dir_path(output, "eval-table"),
        "eval-table",
        args,
        config_value,
        Vec::new(),
        &[table.to_path_buf(), items.to_path_buf()],
    )?;
    let root = run.root().to_path_buf();
    let test = load_mcq_jsonl(items).map_err(|e| CliError::Config(format!("{}: {e}", items.display())))?;
    let lik = read_table_jsonl(table)?;
    let report = score_from_table(&test, &lik, weight)?;
    run.write("metrics.csv", &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    let mut records = String::new();
    for r in &report.items {
        let _ = writeln!(records, "{}", serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?);
    }
    run.write("items.jsonl", &records)?;
    run.finish()?;
    Ok(root)
}

/// Parses a probe `metrics.csv` answer type name.
pub fn parse_answer_type(s: &str) -> Option<AnswerType> {
    AnswerType::ALL.into_iter().find(|t| t.name() == s)
}
