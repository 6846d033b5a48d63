//! `cf-effects` command line: data generation, training, evaluation, the
//! c sweep and the strategy/assumption comparison grid.
//!
//! Exit codes: 0 on success, 2 for usage errors and invalid configs or
//! specs, 1 for everything else (I/O, divergence, refusing to overwrite).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{self, prior_shift_report, Dataset, Split, SyntheticTaskSpec};
use crate::effects::{CfMode, FusionKind, GraphMode, InferenceMode};
use crate::error::Error;
use crate::eval;
use crate::model::{EnsembleModel, FeatureDims, ModelCheckpoint, ModelConfig};
use crate::train::TrainConfig;

/// One experiment: task, model and optimizer settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> crate::Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Sets every seed (task, model init, batch order).
    pub fn set_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn dims(&self) -> FeatureDims {
        task_dims(&self.task)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("serializable")
                .as_bytes(),
        )
    }
}

pub fn task_dims(task: &SyntheticTaskSpec) -> FeatureDims {
    FeatureDims {
        v: task.v_dim(),
        q: task.q_dim(),
        answers: task.num_answers,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Parser)]
#[command(
    name = "cf-effects",
    version,
    about = "Counterfactual debiasing of multi-branch ensembles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test splits from a task spec
    GenData(GenDataArgs),
    /// Train an ensemble and write a checkpoint with reports
    Train(TrainArgs),
    /// Evaluate a checkpoint under one or more inference modes
    Eval(EvalArgs),
    /// Re-evaluate TIE with the counterfactual value forced to each c
    SweepC(SweepArgs),
    /// Fusion strategy x inference mode grid plus the counterfactual ablation
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Task spec (JSON); defaults to the built-in spec
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (JSON); missing fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by gen-data; otherwise splits are generated in memory
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated inference modes
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "posterior,te,tie,nie,branch_k"
    )]
    pub modes: Vec<String>,
    /// Split to evaluate
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated counterfactual values
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-30,-10,-3,-1,0,1,3,10,30"
    )]
    pub c_values: Vec<f64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// A failed command: message for stderr plus exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidSpec(_) | Error::InvalidConfig(_) | Error::Json(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> CliError {
    CliError {
        code,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SweepC(args) => cmd_sweep_c(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| fail(1, format!("cannot read {}: {e}", path.display())))
}

fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| fail(1, format!("cannot write {}: {e}", path.display())))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(dir, name, &(text + "\n"))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(fail(
                1,
                format!("{} is not empty; pass --force to overwrite", dir.display()),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| fail(1, format!("cannot create {}: {e}", dir.display())))
}

fn out_dir(output: &OutputArgs, from_config: Option<&PathBuf>) -> CliResult<PathBuf> {
    output
        .out
        .clone()
        .or_else(|| from_config.cloned())
        .ok_or_else(|| fail(2, "no output directory: pass --out"))
}

fn provenance_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

fn parse_split(name: &str) -> CliResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| fail(2, format!("unknown split `{name}` (train, val, test)")))
}

fn parse_modes(names: &[String]) -> CliResult<Vec<InferenceMode>> {
    names
        .iter()
        .map(|n| n.parse::<InferenceMode>().map_err(CliError::from))
        .collect()
}

/// What gen-data records next to the splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticTaskSpec,
    pub spec_hash: String,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: String,
    pub file: String,
    pub samples: usize,
    pub sha256: String,
}

fn cmd_gen_data(args: GenDataArgs) -> CliResult<()> {
    let mut spec = match &args.config {
        Some(path) => SyntheticTaskSpec::from_json(&read_text(path)?)?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let out = out_dir(&args.output, None)?;
    prepare_out(&out, args.output.force)?;

    let dataset = data::generate(&spec)?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let file = format!("{}.jsonl", split.name());
        let path = out.join(&file);
        data::save(dataset.split(split), &path)?;
        let bytes = fs::read(&path)
            .map_err(|e| fail(1, format!("cannot read back {}: {e}", path.display())))?;
        splits.push(SplitEntry {
            split: split.name().into(),
            file,
            samples: dataset.split(split).len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let spec_hash = sha256_hex(
        serde_json::to_string(&spec)
            .map_err(Error::from)?
            .as_bytes(),
    );
    let shift = prior_shift_report(&dataset.train, &dataset.test);
    let header = provenance_line(&spec_hash, spec.seed);
    write_text(&out, "prior_shift.csv", &(header.clone() + &shift.tv_csv()))?;
    write_text(
        &out,
        "answer_histogram.csv",
        &(header + &shift.histogram_csv()),
    )?;
    write_json(
        &out,
        "manifest.json",
        &Manifest {
            spec,
            spec_hash,
            splits,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Loads the splits and spec written by gen-data.
pub fn load_data_dir(dir: &Path) -> CliResult<(SyntheticTaskSpec, Dataset)> {
    let manifest: Manifest = serde_json::from_str(&read_text(&dir.join("manifest.json"))?)
        .map_err(|e| fail(2, format!("{}: {e}", dir.join("manifest.json").display())))?;
    manifest.spec.validate()?;
    let load = |split: Split| -> CliResult<Vec<data::Sample>> {
        let samples = data::load(&dir.join(format!("{}.jsonl", split.name())))?;
        data::check_split(&manifest.spec, &samples)?;
        Ok(samples)
    };
    let dataset = Dataset {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    };
    Ok((manifest.spec, dataset))
}

fn load_experiment(path: Option<&PathBuf>) -> CliResult<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::from_json(&read_text(p)?)?),
        None => Ok(ExperimentConfig::default()),
    }
}

const REPORT_MODES: [InferenceMode; 5] = InferenceMode::ALL;

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = load_experiment(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    let dataset = match &args.data {
        Some(dir) => {
            let (spec, dataset) = load_data_dir(dir)?;
            cfg.task = spec;
            dataset
        }
        None => data::generate(&cfg.task)?,
    };
    cfg.validate()?;
    let out = out_dir(&args.output, cfg.out_dir.as_ref())?;
    prepare_out(&out, args.output.force)?;

    let hash = cfg.hash();
    let (model, report) = eval::train_model(
        &cfg.model,
        cfg.model.cf_mode,
        &dataset,
        cfg.dims(),
        &cfg.train,
    )?;
    let header = provenance_line(&hash, cfg.train.seed);

    write_text(&out, "checkpoint.json", &model.to_checkpoint().to_json()?)?;
    write_text(&out, "train_log.csv", &(header.clone() + &report.to_csv()))?;
    let test = eval::evaluate(&model, &dataset.test, &REPORT_MODES)?;
    let val = eval::evaluate(&model, &dataset.val, &REPORT_MODES)?;
    write_text(
        &out,
        "eval_test.csv",
        &(header.clone() + &test.accuracy_csv()),
    )?;
    write_text(&out, "eval_val.csv", &(header + &val.accuracy_csv()))?;
    let accuracies = |r: &eval::EvalReport| {
        r.modes
            .iter()
            .map(|m| (m.mode.name().to_string(), m.accuracy))
            .collect::<std::collections::BTreeMap<_, _>>()
    };
    write_json(
        &out,
        "summary.json",
        &json!({
            "config_hash": hash,
            "seed": cfg.train.seed,
            "config": cfg,
            "c": model.cf_config().values(),
            "test_accuracy": accuracies(&test),
            "val_accuracy": accuracies(&val),
            "chance_test_accuracy": cfg.task.max_prior_accuracy(Split::Test),
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<(EnsembleModel, String)> {
    let text = read_text(path)?;
    let ckpt = ModelCheckpoint::from_json(&text)
        .map_err(|e| fail(2, format!("{}: {e}", path.display())))?;
    let hash = sha256_hex(
        serde_json::to_string(&ckpt.header)
            .map_err(Error::from)?
            .as_bytes(),
    );
    Ok((EnsembleModel::from_checkpoint(&ckpt)?, hash))
}

fn check_dims(model: &EnsembleModel, spec: &SyntheticTaskSpec) -> CliResult<()> {
    if model.dims() != task_dims(spec) {
        return Err(fail(
            2,
            format!(
                "checkpoint expects {:?} but the data has {:?}",
                model.dims(),
                task_dims(spec)
            ),
        ));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let modes = parse_modes(&args.modes)?;
    let split = parse_split(&args.split)?;
    let (model, hash) = load_checkpoint(&args.checkpoint)?;
    let (spec, dataset) = load_data_dir(&args.data)?;
    check_dims(&model, &spec)?;
    let out = out_dir(&args.output, None)?;
    prepare_out(&out, args.output.force)?;

    let seed = model.config().seed;
    let header = provenance_line(&hash, seed);
    let report = eval::evaluate(&model, dataset.split(split), &modes)?;
    write_text(&out, "eval.csv", &(header.clone() + &report.accuracy_csv()))?;
    for m in &modes {
        let dist = eval::distribution_report(&model, dataset.split(split), *m)?;
        write_text(
            &out,
            &format!("distribution_{}.csv", m.name()),
            &(header.clone() + &dist.to_csv()),
        )?;
    }
    write_json(
        &out,
        "eval.json",
        &json!({
            "config_hash": hash,
            "seed": seed,
            "split": split.name(),
            "chance_accuracy": spec.max_prior_accuracy(split),
            "report": report,
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep_c(args: SweepArgs) -> CliResult<()> {
    let split = parse_split(&args.split)?;
    let (model, hash) = load_checkpoint(&args.checkpoint)?;
    if model.config().cf_mode != CfMode::Uniform {
        return Err(fail(
            2,
            "sweep-c needs a checkpoint with UNIFORM counterfactuals",
        ));
    }
    let (spec, dataset) = load_data_dir(&args.data)?;
    check_dims(&model, &spec)?;
    let out = out_dir(&args.output, None)?;
    prepare_out(&out, args.output.force)?;

    let mut c_values = args.c_values.clone();
    let learned = model.cf_config().values()[0];
    c_values.push(learned);
    let points = eval::sweep_c(&model, dataset.split(split), &c_values)?;
    let seed = model.config().seed;
    write_text(
        &out,
        "sweep.csv",
        &(provenance_line(&hash, seed) + &eval::sweep_csv(&points)),
    )?;
    write_json(
        &out,
        "sweep.json",
        &json!({
            "config_hash": hash,
            "seed": seed,
            "split": split.name(),
            "learned_c": learned,
            "points": points,
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Fusion strategies with the graph each is defined on.
pub const GRID: [(FusionKind, GraphMode); 4] = [
    (FusionKind::Harmonic, GraphMode::Full),
    (FusionKind::Sum, GraphMode::Full),
    (FusionKind::Rubi, GraphMode::Simplified),
    (FusionKind::LearnedMixin, GraphMode::Simplified),
];

const GRID_MODES: [InferenceMode; 5] = [
    InferenceMode::Posterior,
    InferenceMode::Nie,
    InferenceMode::Tie,
    InferenceMode::Te,
    InferenceMode::BranchK,
];

fn cmd_compare(args: CompareArgs) -> CliResult<()> {
    let mut cfg = load_experiment(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;
    let out = out_dir(&args.output, cfg.out_dir.as_ref())?;
    prepare_out(&out, args.output.force)?;

    let hash = cfg.hash();
    let header = provenance_line(&hash, cfg.train.seed);
    let dataset = data::generate(&cfg.task)?;
    let dims = cfg.dims();

    let mut grid = String::from("strategy,graph,split,posterior,nie,tie,te,branch_k\n");
    for (strategy, mode) in GRID {
        let model_cfg = ModelConfig {
            strategy,
            mode,
            ..cfg.model.clone()
        };
        let (model, _) =
            eval::train_model(&model_cfg, CfMode::Uniform, &dataset, dims, &cfg.train)?;
        for split in [Split::Test, Split::Val] {
            let acc = eval::accuracies(&model, dataset.split(split), &GRID_MODES)?;
            let mode_name = match mode {
                GraphMode::Full => "FULL",
                GraphMode::Simplified => "SIMPLIFIED",
            };
            grid.push_str(&format!("{strategy},{mode_name},{}", split.name()));
            for a in acc {
                grid.push_str(&format!(",{a}"));
            }
            grid.push('\n');
        }
    }
    write_text(&out, "grid.csv", &(header.clone() + &grid))?;

    let rows = eval::assumption_ablation(&cfg.model, &dataset, dims, &cfg.train, &CfMode::ALL)?;
    let mut ablation = String::from("cf_mode,tie_accuracy\n");
    for r in &rows {
        ablation.push_str(&format!("{},{}\n", r.cf_mode, r.tie_accuracy));
    }
    write_text(&out, "ablation.csv", &(header + &ablation))?;
    write_json(
        &out,
        "summary.json",
        &json!({
            "config_hash": hash,
            "seed": cfg.train.seed,
            "config": cfg,
            "ablation": rows,
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}
