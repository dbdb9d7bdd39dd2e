//! The `dalign` command line.
//!
//! Every command accepts `--config FILE` (flat `key = value` lines, keys
//! named like the long flags; a previous run's `manifest.json` also works).
//! Config entries are spliced in ahead of the real flags, so flags win.
//! Each run writes `effective.cfg` and `manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AnyPolicy, Checkpoint};
use crate::data::{self, DatasetManifest, DatasetSpec, Labeling};
use crate::error::{Error, Result};
use crate::evalsuite::{self, EvalRecord};
use crate::losses::{LossConfig, PreferenceExample};
use crate::operators;
use crate::policy::{ContextFreePolicy, NeuralPolicy, Policy, Sequence, SequenceSpace, TokenId, TransformerConfig};
use crate::reward::{GroundTruthReward, RewardFunction, RewardModel};
use crate::trainer::{self, AlignOptions, Schedule, StepLog, SweepSpec, TrainConfig, TrainState};

#[derive(Parser, Debug)]
#[command(name = "dalign", version, about = "Length-normalized direct alignment on synthetic preferences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample preference pairs from a reference policy and label them.
    GenData(GenDataArgs),
    /// Fine-tune a transformer policy on the chosen completions.
    Sft(SftArgs),
    /// Train a Bradley-Terry reward model.
    TrainRm(TrainRmArgs),
    /// Direct alignment (dpo, ipo, slic and their averaged variants).
    Align(AlignArgs),
    /// One alignment run per beta.
    Sweep(SweepArgs),
    /// Score a policy's generations, or analyze an existing metrics.csv.
    Eval(EvalArgs),
    /// Exact-enumeration checks of the policy operators.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key = value file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SpaceArgs {
    /// Content tokens (eos is added on top).
    #[arg(long, default_value_t = 6)]
    vocab: u32,
    #[arg(long, default_value_t = 10)]
    l_max: usize,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 1)]
    n_blocks: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 32)]
    context: usize,
    #[arg(long, default_value_t = 2)]
    ffn_mult: usize,
    #[arg(long, default_value_t = 0.1)]
    init_std: f64,
}

impl ModelArgs {
    fn config(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            context: self.context,
            ffn_mult: self.ffn_mult,
            init_std: self.init_std,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,
    /// constant | cosine
    #[arg(long, default_value = "constant", value_parser = parse_schedule)]
    schedule: Schedule,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value_t = 256)]
    generations: usize,
}

impl TrainArgs {
    fn config(&self, seed: u64, loss: LossConfig) -> Result<TrainConfig> {
        let c = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.lr,
            warmup_fraction: self.warmup,
            schedule: self.schedule,
            loss,
            eval_every_steps: self.eval_every,
            generations_per_eval: self.generations,
            seed,
            max_steps: self.max_steps,
            ..TrainConfig::desk()
        };
        c.validate()?;
        Ok(c)
    }
}

fn parse_schedule(s: &str) -> std::result::Result<Schedule, String> {
    match s {
        "constant" => Ok(Schedule::ConstantAfterWarmup),
        "cosine" => Ok(Schedule::CosineDecay),
        _ => Err(format!("unknown schedule `{s}` (constant | cosine)")),
    }
}

fn parse_labeling(s: &str) -> std::result::Result<Labeling, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct RewardArgs {
    #[arg(long, default_value_t = 1.0)]
    key_token_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    length_penalty: f64,
    #[arg(long, default_value_t = 6)]
    target_length: usize,
    /// Per-token reward bonus; > 0 plants a length confound.
    #[arg(long, default_value_t = 0.0)]
    length_bias: f64,
}

impl RewardArgs {
    fn reward(&self) -> GroundTruthReward {
        GroundTruthReward {
            key_token_weight: self.key_token_weight,
            length_penalty: self.length_penalty,
            target_length: self.target_length,
            length_bias: self.length_bias,
        }
    }
}

#[derive(Args, Debug)]
struct ScoringArgs {
    #[command(flatten)]
    reward: RewardArgs,
    /// Score generations with a trained reward model instead of the
    /// ground-truth reward.
    #[arg(long)]
    reward_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    space: SpaceArgs,
    #[arg(long, default_value_t = 64)]
    n_prompts: usize,
    #[arg(long, default_value_t = 3)]
    prompt_length: usize,
    #[arg(long, default_value_t = 16)]
    pairs_per_prompt: usize,
    /// argmax | bt
    #[arg(long, default_value = "bt", value_parser = parse_labeling)]
    labeling: Labeling,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    skip_ties: bool,
    #[command(flatten)]
    reward: RewardArgs,
    /// Policy checkpoint to sample from; a context-free policy otherwise.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Stop probability of the context-free sampler.
    #[arg(long, default_value_t = 0.2)]
    eos_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
}

#[derive(Args, Debug)]
struct SftArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    space: SpaceArgs,
    /// Preference JSONL; the chosen completions form the corpus.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct TrainRmArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    space: SpaceArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Policy checkpoint; both the starting point and the frozen reference.
    #[arg(long)]
    reference: PathBuf,
    /// dpo | dpo_avg | ipo | ipo_avg | slic | slic_avg
    #[arg(long, default_value = "dpo")]
    algo: String,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Keep a checkpoint at every evaluation.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    checkpoints: bool,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    svg: bool,
    #[arg(long, default_value_t = 2)]
    fit_degree: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// paper-dpo | paper-dpo-avg | paper-ipo | paper-ipo-avg
    #[arg(long, conflicts_with_all = ["algo", "betas"])]
    preset: Option<String>,
    #[arg(long, requires = "betas")]
    algo: Option<String>,
    #[arg(long, value_delimiter = ',', requires = "algo")]
    betas: Vec<f64>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Policy checkpoint to sample from.
    #[arg(long, required_unless_present = "metrics", conflicts_with = "metrics")]
    policy: Option<PathBuf>,
    /// Preference JSONL whose prompts are used for generation.
    #[arg(long, requires = "policy")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n_samples: usize,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Analyze an existing metrics.csv instead: Pareto front and fit.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Keep records up to this fraction of the last step.
    #[arg(long, default_value_t = 0.75)]
    cutoff: f64,
    #[arg(long, default_value_t = 2)]
    fit_degree: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    svg: bool,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 3)]
    vocab: u32,
    #[arg(long, default_value_t = 4)]
    l_max: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 20)]
    draws: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// The merged configuration; `--config manifest.json` replays it.
    pub config: BTreeMap<String, String>,
    /// sha256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every output file, relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

const ORACLE_BIJECTION_TOL: f64 = 1e-12;
const ORACLE_RESIDUAL_TOL: f64 = 1e-9;

/// Exit status: 0 success, 1 invalid input or configuration, 2 failure
/// while running.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Parse { .. } | Error::Io { .. } | Error::EnumerationCap { .. } => 1,
        Error::NonFinite { .. } | Error::Shape(_) | Error::Diverged { .. } | Error::Numerical(_) => 2,
    }
}

fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        return Ok(m.config.into_iter().collect());
    }
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, got `{raw}`"),
            });
        };
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Value of `--config` if present among the raw arguments.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn clap_command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

/// Every explicitly given or defaulted argument of the subcommand, keyed
/// by long flag name.
fn effective_config(cmd: &clap::Command, m: &ArgMatches) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if long == "config" {
            continue;
        }
        if let Some(raw) = m.get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            if !vals.is_empty() {
                out.insert(long.to_string(), vals.join(","));
            }
        }
    }
    out
}

fn write_cfg(path: &Path, cfg: &BTreeMap<String, String>) -> Result<()> {
    let text: String = cfg.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Run {
    out_dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn start(command: &str, common: &Common, config: BTreeMap<String, String>) -> Result<Self> {
        fs::create_dir_all(&common.out_dir).map_err(|e| Error::io(&common.out_dir, e))?;
        Ok(Self {
            out_dir: common.out_dir.clone(),
            manifest: Manifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed: common.seed,
                config,
                ..Default::default()
            },
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let h = data::sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn finish(mut self, outputs: &[&str]) -> Result<()> {
        for name in outputs {
            let h = data::sha256_file(&self.path(name))?;
            self.manifest.outputs.insert((*name).into(), h);
        }
        write_cfg(&self.path("effective.cfg"), &self.manifest.config)?;
        let p = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Numerical(e.to_string()))?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for row in log {
        w.serialize(row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_policy(path: &Path) -> Result<AnyPolicy> {
    if !path.exists() {
        return Err(Error::Config(format!("policy checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)?.into_policy()
}

fn load_data(path: &Path, space: &SequenceSpace) -> Result<Vec<PreferenceExample>> {
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    let d = data::read_jsonl(path, space)?;
    if d.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", path.display())));
    }
    Ok(d)
}

fn unique_prompts(data: &[PreferenceExample]) -> Vec<Vec<TokenId>> {
    let mut p: Vec<Vec<TokenId>> = data.iter().map(|e| e.prompt.clone()).collect();
    p.sort();
    p.dedup();
    p
}

/// Ground truth or a trained reward model, chosen at run time.
enum Scorer {
    Truth(GroundTruthReward),
    Model(Box<RewardModel>),
}

impl RewardFunction for Scorer {
    fn reward(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64> {
        match self {
            Scorer::Truth(r) => r.reward(prompt, completion),
            Scorer::Model(m) => m.reward(prompt, completion),
        }
    }
}

fn scorer(args: &ScoringArgs, run: &mut Run) -> Result<Scorer> {
    match &args.reward_model {
        None => Ok(Scorer::Truth(args.reward.reward())),
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("reward model {} does not exist", p.display())));
            }
            run.input(p)?;
            Ok(Scorer::Model(Box::new(Checkpoint::load(p)?.into_reward_model()?)))
        }
    }
}

fn gen_data(a: &GenDataArgs, mut run: Run) -> Result<()> {
    let spec = DatasetSpec {
        n_tokens: a.space.vocab,
        l_max: a.space.l_max,
        n_prompts: a.n_prompts,
        prompt_length: a.prompt_length,
        pairs_per_prompt: a.pairs_per_prompt,
        labeling: a.labeling,
        reward: a.reward.reward(),
        skip_ties: a.skip_ties,
        seed: a.common.seed,
    };
    spec.validate()?;
    if !(0.0..1.0).contains(&a.validation_fraction) {
        return Err(Error::Config("validation-fraction must be in [0, 1)".into()));
    }
    let space = spec.space()?;
    let reference = match &a.reference {
        Some(p) => {
            let pol = load_policy(p)?;
            run.input(p)?;
            pol
        }
        None => AnyPolicy::ContextFree(ContextFreePolicy::with_eos_prob(space, a.eos_prob)?),
    };
    let generated = data::generate_preferences(&spec, &reference)?;
    let (train, validation) = data::split(&generated.examples, 1.0 - a.validation_fraction, a.common.seed)?;
    let mut outputs = vec!["train.jsonl"];
    data::write_jsonl(&run.path("train.jsonl"), &train)?;
    if !validation.is_empty() {
        data::write_jsonl(&run.path("validation.jsonl"), &validation)?;
        outputs.push("validation.jsonl");
    }
    let files = outputs
        .iter()
        .map(|f| Ok((f.to_string(), data::sha256_file(&run.path(f))?)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        spec,
        n_examples: generated.examples.len(),
        skipped: generated.skipped,
        files,
    };
    write_json(&run.path("dataset.json"), &manifest)?;
    outputs.push("dataset.json");
    println!(
        "{} pairs ({} train, {} validation, {} skipped); mean length gap {:.3}",
        generated.examples.len(),
        train.len(),
        validation.len(),
        generated.skipped,
        data::mean_length_gap(&generated.examples)
    );
    run.finish(&outputs)
}

fn sft(a: &SftArgs, mut run: Run) -> Result<()> {
    let space = SequenceSpace::new(a.space.vocab, a.space.l_max)?;
    let data = load_data(&a.data, &space)?;
    run.input(&a.data)?;
    let corpus: Vec<Sequence> = data.iter().map(PreferenceExample::chosen_seq).collect();
    let config = a.train.config(a.common.seed, TrainConfig::desk().loss)?;
    let mut policy = NeuralPolicy::new(space, a.model.config(), a.common.seed)?;
    let mut state = TrainState::new(policy.params().len());
    let total = config.total_steps(corpus.len());
    let result = trainer::train_sft_from(&config, &mut policy, &corpus, &mut state, total);
    let ck = Checkpoint::of_policy(&AnyPolicy::Neural(policy)).with_state(state);
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            ck.save(&run.path("policy.last_good.json"))?;
            return Err(e);
        }
    };
    ck.save(&run.path("policy.json"))?;
    write_log(&run.path("log.csv"), &log)?;
    if let Some(last) = log.last() {
        println!("{} steps, final loss {:.4}", log.len(), last.loss);
    }
    run.finish(&["policy.json", "log.csv"])
}

fn train_rm(a: &TrainRmArgs, mut run: Run) -> Result<()> {
    let space = SequenceSpace::new(a.space.vocab, a.space.l_max)?;
    let train = load_data(&a.data, &space)?;
    run.input(&a.data)?;
    let validation = match &a.validation {
        Some(p) => {
            let v = load_data(p, &space)?;
            run.input(p)?;
            v
        }
        None => Vec::new(),
    };
    let config = a.train.config(a.common.seed, TrainConfig::desk().loss)?;
    let mut rm = RewardModel::new(space, a.model.config(), a.common.seed)?;
    let report = trainer::train_rm(&config, &mut rm, &train, &validation)?;
    Checkpoint::of_reward_model(&rm).save(&run.path("reward_model.json"))?;
    write_log(&run.path("log.csv"), &report.log)?;
    #[derive(Serialize)]
    struct Summary {
        train_accuracy: f64,
        validation_accuracy: Option<f64>,
        steps: usize,
    }
    write_json(
        &run.path("rm_report.json"),
        &Summary {
            train_accuracy: report.train_accuracy,
            validation_accuracy: report.validation_accuracy,
            steps: report.log.len(),
        },
    )?;
    match report.validation_accuracy {
        Some(v) => println!("train accuracy {:.4}, validation accuracy {v:.4}", report.train_accuracy),
        None => println!("train accuracy {:.4}", report.train_accuracy),
    }
    run.finish(&["reward_model.json", "log.csv", "rm_report.json"])
}

fn align(a: &AlignArgs, mut run: Run) -> Result<()> {
    let reference = load_policy(&a.reference)?;
    run.input(&a.reference)?;
    let data = load_data(&a.data, reference.space())?;
    run.input(&a.data)?;
    let loss = LossConfig::from_algorithm(&a.algo, a.beta)?;
    let config = a.train.config(a.common.seed, loss)?;
    let scorer = scorer(&a.scoring, &mut run)?;
    let options = AlignOptions {
        algorithm: None,
        eval_prompts: unique_prompts(&data),
        checkpoint_dir: a.checkpoints.then(|| run.path("checkpoints")),
    };
    let mut policy = reference.clone();
    let mut state = TrainState::new(policy.params().len());
    let total = config.total_steps(data.len());
    let report = match trainer::train_align_from(&config, &mut policy, &reference, &data, &scorer, &options, &mut state, total) {
        Ok(r) => r,
        Err(e) => {
            Checkpoint::of_policy(&policy)
                .with_state(state)
                .save(&run.path("policy.last_good.json"))?;
            return Err(e);
        }
    };
    Checkpoint::of_policy(&policy).with_state(state).save(&run.path("policy.json"))?;
    write_log(&run.path("log.csv"), &report.log)?;
    evalsuite::export(&report.records, &run.out_dir, a.svg, a.fit_degree)?;
    if let Some(last) = report.records.last() {
        println!(
            "{} beta {}: {} steps, final mean reward {:.4}, mean length {:.3}",
            last.algorithm, last.beta, report.total_steps, last.mean_reward, last.mean_length
        );
    }
    let mut outputs = vec!["policy.json", "log.csv", "metrics.csv"];
    if a.svg {
        outputs.push("scatter.svg");
    }
    run.finish(&outputs)
}

fn sweep(a: &SweepArgs, mut run: Run) -> Result<()> {
    let spec = match (&a.preset, &a.algo) {
        (Some(p), _) => SweepSpec::preset(p)?,
        (None, Some(algo)) => SweepSpec::new(algo, a.betas.clone())?,
        (None, None) => return Err(Error::Config("sweep needs --preset or --algo with --betas".into())),
    };
    let reference = load_policy(&a.reference)?;
    run.input(&a.reference)?;
    let data = load_data(&a.data, reference.space())?;
    run.input(&a.data)?;
    let config = a.train.config(a.common.seed, LossConfig::from_algorithm(&spec.algorithm, spec.betas[0])?)?;
    let scorer = scorer(&a.scoring, &mut run)?;
    let options = AlignOptions {
        eval_prompts: unique_prompts(&data),
        ..Default::default()
    };
    let rows = trainer::beta_sweep(&spec, &config, &reference, &data, &scorer, &options)?;
    let records: Vec<EvalRecord> = rows.iter().flat_map(|r| r.records.iter().cloned()).collect();
    evalsuite::write_metrics_csv(&run.path("metrics.csv"), &records)?;
    #[derive(Serialize)]
    struct Row<'a> {
        algorithm: &'a str,
        beta: f64,
        final_mean_reward: Option<f64>,
        error: Option<&'a str>,
    }
    let summary: Vec<Row> = rows
        .iter()
        .map(|r| Row {
            algorithm: &r.algorithm,
            beta: r.beta,
            final_mean_reward: r.final_mean_reward,
            error: r.error.as_deref(),
        })
        .collect();
    write_json(&run.path("sweep.json"), &summary)?;
    for r in &rows {
        match (&r.final_mean_reward, &r.error) {
            (Some(v), _) => println!("{} beta {}: final mean reward {v:.4}", r.algorithm, r.beta),
            (None, Some(e)) => println!("{} beta {}: failed: {e}", r.algorithm, r.beta),
            _ => {}
        }
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    run.finish(&["metrics.csv", "sweep.json"])?;
    if failed == rows.len() {
        return Err(Error::Numerical("every run of the sweep failed".into()));
    }
    Ok(())
}

fn eval(a: &EvalArgs, mut run: Run) -> Result<()> {
    if let Some(metrics) = &a.metrics {
        if !metrics.exists() {
            return Err(Error::Config(format!("metrics file {} does not exist", metrics.display())));
        }
        run.input(metrics)?;
        let records = evalsuite::read_metrics_csv(metrics)?;
        let last = records.iter().map(|r| r.step).max().unwrap_or(0);
        let kept = evalsuite::within_cutoff(&records, last, a.cutoff);
        if kept.is_empty() {
            return Err(Error::Config("no records within the cutoff".into()));
        }
        evalsuite::export(&kept, &run.out_dir, a.svg, a.fit_degree)?;
        let pts: Vec<(f64, f64)> = kept.iter().map(|r| (r.mean_length, r.mean_reward)).collect();
        let front = evalsuite::pareto_front(&pts)?;
        let path = run.path("front.csv");
        let wrap = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
        w.write_record(["length", "reward", "step", "algorithm", "beta"]).map_err(wrap)?;
        for p in &front {
            let r = &kept[p.source];
            w.write_record([p.length.to_string(), p.reward.to_string(), r.step.to_string(), r.algorithm.clone(), r.beta.to_string()])
                .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        println!("{} records kept, {} on the Pareto front", kept.len(), front.len());
        let mut outputs = vec!["metrics.csv", "front.csv"];
        if a.svg {
            outputs.push("scatter.svg");
        }
        return run.finish(&outputs);
    }
    let policy_path = a.policy.as_ref().expect("clap requires --policy without --metrics");
    let policy = load_policy(policy_path)?;
    run.input(policy_path)?;
    let prompts = match &a.data {
        Some(p) => {
            let d = load_data(p, policy.space())?;
            run.input(p)?;
            unique_prompts(&d)
        }
        None => vec![Vec::new()],
    };
    let scorer = scorer(&a.scoring, &mut run)?;
    let mut rec = evalsuite::evaluate_generations(&policy, &prompts, &scorer, a.n_samples, a.common.seed)?;
    rec.algorithm = "eval".into();
    evalsuite::write_metrics_csv(&run.path("metrics.csv"), std::slice::from_ref(&rec))?;
    println!(
        "mean reward {:.4}, mean length {:.3}, repetition ratio {:.3} over {} samples",
        rec.mean_reward, rec.mean_length, rec.repetition_ratio, rec.n_samples
    );
    run.finish(&["metrics.csv"])
}

fn oracle_check(a: &OracleArgs, run: Run) -> Result<()> {
    let space = SequenceSpace::new(a.vocab, a.l_max)?;
    if space.cardinality() > 1_000_000 {
        return Err(Error::EnumerationCap {
            required: space.cardinality(),
            cap: 1_000_000,
        });
    }
    let report = operators::oracle_check(space, a.beta, a.common.seed, a.draws)?;
    write_json(&run.path("oracle.json"), &report)?;
    let (pi_ref, reward) = operators::random_instance(space, &[], a.common.seed)?;
    operators::write_diagnostics(&run.path("diagnostics.csv"), &operators::diagnostic_rows(&pi_ref, &reward, a.beta)?)?;
    println!("sequences: {}, draws: {}", report.n_sequences, report.draws);
    println!("F bijection max error: {:.3e}", report.bijection_error);
    println!("T_R residual std: {:.3e}", report.t_r_residual_std);
    println!("averaged residual std: {:.3e}", report.avg_residual_std);
    println!("|mean residual - beta ln Z|: {:.3e}", report.partition_error);
    run.finish(&["oracle.json", "diagnostics.csv"])?;
    let ok = report.bijection_error < ORACLE_BIJECTION_TOL
        && report.t_r_residual_std < ORACLE_RESIDUAL_TOL
        && report.avg_residual_std < ORACLE_RESIDUAL_TOL
        && report.partition_error < ORACLE_RESIDUAL_TOL;
    if !ok {
        return Err(Error::Numerical("oracle check exceeded its tolerances".into()));
    }
    Ok(())
}

fn set_threads() -> Result<()> {
    let Ok(v) = std::env::var("DALIGN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DALIGN_THREADS must be a positive integer, got `{v}`")))?;
    // a pool may already exist when run() is called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

enum Failure {
    /// clap's own error, or a help/version request.
    Usage(clap::Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn dispatch(args: Vec<OsString>) -> std::result::Result<(), Failure> {
    set_threads()?;
    let mut argv = args;
    if let Some(path) = config_path(&argv[1.min(argv.len())..]) {
        let entries = read_config(&path)?;
        // config entries go right after the subcommand name so that later
        // (real) flags override them
        let at = 2.min(argv.len());
        let spliced: Vec<OsString> = entries.into_iter().map(|(k, v)| format!("--{k}={v}").into()).collect();
        argv.splice(at..at, spliced);
    }
    let cmd = clap_command();
    let matches = cmd.clone().try_get_matches_from(argv).map_err(Failure::Usage)?;
    let cli = Cli::from_arg_matches(&matches).map_err(Failure::Usage)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let config = effective_config(cmd.find_subcommand(name).expect("known subcommand"), sub);
    let common = match &cli.command {
        Command::GenData(a) => &a.common,
        Command::Sft(a) => &a.common,
        Command::TrainRm(a) => &a.common,
        Command::Align(a) => &a.common,
        Command::Sweep(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::OracleCheck(a) => &a.common,
    };
    let run = Run::start(name, common, config)?;
    match &cli.command {
        Command::GenData(a) => gen_data(a, run),
        Command::Sft(a) => sft(a, run),
        Command::TrainRm(a) => train_rm(a, run),
        Command::Align(a) => align(a, run),
        Command::Sweep(a) => sweep(a, run),
        Command::Eval(a) => eval(a, run),
        Command::OracleCheck(a) => oracle_check(a, run),
    }?;
    Ok(())
}

/// Run the command line; returns the exit status (0, 1 or 2).
pub fn status<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match dispatch(args) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            u8::from(e.use_stderr())
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    ExitCode::from(status(args))
}
