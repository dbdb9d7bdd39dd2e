//! Optimization loops: SFT, reward-model training, direct alignment with
//! periodic generation scoring, exact population training on tabular
//! policies, and the beta sweep.
//!
//! Batches are a pure function of `(seed, step)`: epoch `e` uses a
//! permutation drawn from stream `e` of the run seed. A run can therefore
//! resume from nothing but its parameters and a [`TrainState`].

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffcore::{self, Evaluation, ParamVector};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate_generations, EvalRecord};
use crate::losses::{
    bt_loss_var, direct_loss_var, population_direct_loss_var, xe_loss_var, HSpec, LossConfig, PopulationPrompt, PreferenceExample,
    ReferenceLogProbs,
};
use crate::policy::{Policy, Sequence, TabularPolicy, TokenId};
use crate::reward::{pairwise_accuracy, RewardFunction, TrainableReward};

/// Examples per gradient shard. Shards are evaluated in parallel and
/// reduced in index order, so results do not depend on the thread count.
pub const SHARD: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    ConstantAfterWarmup,
    CosineDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            adam: AdamState::new(n_params),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub eval_every_steps: usize,
    pub generations_per_eval: usize,
    pub seed: u64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Scaled-down defaults for minutes-long runs on synthetic data.
    pub fn desk() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            schedule: Schedule::ConstantAfterWarmup,
            adam: AdamConfig::default(),
            loss: LossConfig {
                h: HSpec::Dpo,
                beta: 0.1,
                averaging: false,
            },
            eval_every_steps: 50,
            generations_per_eval: 256,
            seed: 0,
            max_steps: None,
        }
    }

    /// Alignment and reward-model hyperparameters at full scale.
    pub fn paper() -> Self {
        Self {
            peak_lr: 1e-6,
            batch_size: 128,
            eval_every_steps: 100,
            generations_per_eval: 128,
            ..Self::desk()
        }
    }

    /// SFT at full scale: cosine decay from 2e-5.
    pub fn paper_sft() -> Self {
        Self {
            peak_lr: 2e-5,
            schedule: Schedule::CosineDecay,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps positive".into()));
        }
        if !(self.loss.beta > 0.0 && self.loss.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.loss.beta)));
        }
        if self.eval_every_steps == 0 || self.generations_per_eval == 0 {
            return Err(Error::Config("eval_every_steps and generations_per_eval must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n_examples);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64).ceil() as usize
    }
}

/// Linear warmup from 0 to the peak, then constant or cosine to 0.
pub fn lr_at(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let w = config.warmup_steps(total_steps);
    let peak = config.peak_lr;
    if step < w {
        return peak * step as f64 / w as f64;
    }
    match config.schedule {
        Schedule::ConstantAfterWarmup => peak,
        Schedule::CosineDecay => {
            if total_steps <= w {
                return peak;
            }
            let frac = ((step - w) as f64 / (total_steps - w) as f64).min(1.0);
            0.5 * peak * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Example indices of the batch taken at `step`.
pub fn batch_indices(config: &TrainConfig, n_examples: usize, step: usize) -> Vec<usize> {
    let spe = config.steps_per_epoch(n_examples);
    let (epoch, b) = (step / spe, step % spe);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..n_examples).collect();
    perm.shuffle(&mut rng);
    let end = ((b + 1) * config.batch_size).min(n_examples);
    perm[b * config.batch_size..end].to_vec()
}

/// Mean loss and gradient over `batch`, sharded for parallel evaluation.
fn sharded_grad<F>(params: &ParamVector, batch: &[usize], f: F) -> Result<Evaluation>
where
    F: Fn(&mut diffcore::Graph<'_>, &[usize]) -> Result<diffcore::Var> + Sync,
{
    let parts: Vec<Result<(usize, Evaluation)>> = batch
        .par_chunks(SHARD)
        .map(|chunk| Ok((chunk.len(), diffcore::grad(|g| f(g, chunk), params)?)))
        .collect();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut gradient = vec![0.0; params.len()];
    for part in parts {
        let (k, ev) = part?;
        let w = k as f64 / n;
        loss += w * ev.loss;
        for (g, e) in gradient.iter_mut().zip(&ev.gradient) {
            *g += w * e;
        }
    }
    Ok(Evaluation { loss, gradient })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Apply one update, keeping the previous parameters if anything turns
/// non-finite.
fn apply_update(
    config: &TrainConfig,
    params: &mut ParamVector,
    state: &mut TrainState,
    ev: &Evaluation,
    lr: f64,
) -> Result<()> {
    if !ev.loss.is_finite() || ev.gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step: state.step,
            reason: format!("loss {} or gradient non-finite", ev.loss),
        });
    }
    let backup_params = params.values().to_vec();
    let backup_adam = state.adam.clone();
    state.adam.step(&config.adam, params.values_mut(), &ev.gradient, lr);
    if !params.is_finite() {
        params.assign(&backup_params);
        state.adam = backup_adam;
        return Err(Error::Diverged {
            step: state.step,
            reason: "parameters became non-finite".into(),
        });
    }
    state.step += 1;
    Ok(())
}

fn check_state(state: &TrainState, params: &ParamVector) -> Result<()> {
    if state.adam.m.len() != params.len() || state.adam.v.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match the parameters".into()));
    }
    Ok(())
}

/// Token-averaged cross-entropy training.
pub fn train_sft<P: Policy>(config: &TrainConfig, policy: &mut P, corpus: &[Sequence]) -> Result<Vec<StepLog>> {
    let mut state = TrainState::new(policy.params().len());
    let total = config.total_steps(corpus.len());
    train_sft_from(config, policy, corpus, &mut state, total)
}

/// Continue an SFT run from `state` up to step `stop_at`.
pub fn train_sft_from<P: Policy>(
    config: &TrainConfig,
    policy: &mut P,
    corpus: &[Sequence],
    state: &mut TrainState,
    stop_at: usize,
) -> Result<Vec<StepLog>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::domain("empty SFT corpus"));
    }
    check_state(state, policy.params())?;
    let total = config.total_steps(corpus.len());
    let mut log = Vec::new();
    while state.step < stop_at.min(total) {
        let idx = batch_indices(config, corpus.len(), state.step);
        let ev = {
            let p = &*policy;
            sharded_grad(p.params(), &idx, |g, chunk| {
                let b = p.bind(g)?;
                let batch: Vec<Sequence> = chunk.iter().map(|&i| corpus[i].clone()).collect();
                xe_loss_var(g, p, &b, &batch)
            })?
        };
        let lr = lr_at(config, state.step, total);
        log.push(StepLog {
            step: state.step,
            loss: ev.loss,
            lr,
        });
        apply_update(config, policy.params_mut(), state, &ev, lr)?;
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RmReport {
    pub log: Vec<StepLog>,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

/// Bradley-Terry training of a reward model.
pub fn train_rm<R>(config: &TrainConfig, rm: &mut R, train: &[PreferenceExample], validation: &[PreferenceExample]) -> Result<RmReport>
where
    R: TrainableReward + RewardFunction,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::domain("empty reward-model training set"));
    }
    let mut state = TrainState::new(rm.params().len());
    let total = config.total_steps(train.len());
    let mut log = Vec::new();
    while state.step < total {
        let idx = batch_indices(config, train.len(), state.step);
        let ev = {
            let m = &*rm;
            sharded_grad(m.params(), &idx, |g, chunk| {
                let b = m.bind(g)?;
                let batch: Vec<PreferenceExample> = chunk.iter().map(|&i| train[i].clone()).collect();
                bt_loss_var(g, m, &b, &batch)
            })?
        };
        let lr = lr_at(config, state.step, total);
        log.push(StepLog {
            step: state.step,
            loss: ev.loss,
            lr,
        });
        apply_update(config, rm.params_mut(), &mut state, &ev, lr)?;
    }
    Ok(RmReport {
        log,
        train_accuracy: pairwise_accuracy(&*rm, train)?,
        validation_accuracy: if validation.is_empty() {
            None
        } else {
            Some(pairwise_accuracy(&*rm, validation)?)
        },
    })
}

/// Where and how an alignment run reports.
#[derive(Clone, Debug, Default)]
pub struct AlignOptions {
    /// Label written into every [`EvalRecord`]; defaults to the loss name.
    pub algorithm: Option<String>,
    /// Prompts used for generation scoring.
    pub eval_prompts: Vec<Vec<TokenId>>,
    /// Save a checkpoint (parameters + train state) at every evaluation.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignReport {
    pub log: Vec<StepLog>,
    pub records: Vec<EvalRecord>,
    pub total_steps: usize,
}

/// Reference log-probabilities of a whole dataset, evaluated in parallel.
pub fn reference_log_probs<P: Policy>(reference: &P, dataset: &[PreferenceExample]) -> Result<ReferenceLogProbs> {
    let parts: Vec<Result<ReferenceLogProbs>> = dataset
        .par_chunks(SHARD)
        .map(|c| ReferenceLogProbs::compute(reference, c))
        .collect();
    let mut out = ReferenceLogProbs {
        chosen: Vec::with_capacity(dataset.len()),
        rejected: Vec::with_capacity(dataset.len()),
    };
    for p in parts {
        let p = p?;
        out.chosen.extend(p.chosen);
        out.rejected.extend(p.rejected);
    }
    Ok(out)
}

/// Direct alignment against a frozen reference, scoring generations every
/// `eval_every_steps` (and at the first and last step).
pub fn train_align<P, S>(
    config: &TrainConfig,
    policy: &mut P,
    reference: &P,
    dataset: &[PreferenceExample],
    scorer: &S,
    options: &AlignOptions,
) -> Result<AlignReport>
where
    P: Policy + Clone + AsAnyPolicy,
    S: RewardFunction + ?Sized,
{
    let mut state = TrainState::new(policy.params().len());
    let total = config.total_steps(dataset.len());
    train_align_from(config, policy, reference, dataset, scorer, options, &mut state, total)
}

/// Lets generic training code write checkpoints for concrete backends.
pub trait AsAnyPolicy {
    fn to_any(&self) -> crate::checkpoint::AnyPolicy;
}

impl AsAnyPolicy for crate::checkpoint::AnyPolicy {
    fn to_any(&self) -> crate::checkpoint::AnyPolicy {
        self.clone()
    }
}

impl AsAnyPolicy for crate::policy::NeuralPolicy {
    fn to_any(&self) -> crate::checkpoint::AnyPolicy {
        crate::checkpoint::AnyPolicy::Neural(self.clone())
    }
}

impl AsAnyPolicy for crate::policy::ContextFreePolicy {
    fn to_any(&self) -> crate::checkpoint::AnyPolicy {
        crate::checkpoint::AnyPolicy::ContextFree(self.clone())
    }
}

impl AsAnyPolicy for TabularPolicy {
    fn to_any(&self) -> crate::checkpoint::AnyPolicy {
        crate::checkpoint::AnyPolicy::Tabular(self.clone())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn train_align_from<P, S>(
    config: &TrainConfig,
    policy: &mut P,
    reference: &P,
    dataset: &[PreferenceExample],
    scorer: &S,
    options: &AlignOptions,
    state: &mut TrainState,
    stop_at: usize,
) -> Result<AlignReport>
where
    P: Policy + Clone + AsAnyPolicy,
    S: RewardFunction + ?Sized,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::domain("empty preference dataset"));
    }
    check_state(state, policy.params())?;
    let total = config.total_steps(dataset.len());
    let refs = reference_log_probs(reference, dataset)?;
    let algorithm = options.algorithm.clone().unwrap_or_else(|| config.loss.algorithm());
    let eval_prompts: Vec<Vec<TokenId>> = if options.eval_prompts.is_empty() {
        let mut p: Vec<Vec<TokenId>> = dataset.iter().map(|e| e.prompt.clone()).collect();
        p.sort();
        p.dedup();
        p
    } else {
        options.eval_prompts.clone()
    };
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let evaluate = |p: &P, step: usize, state: &TrainState| -> Result<EvalRecord> {
        let mut rec = evaluate_generations(p, &eval_prompts, scorer, config.generations_per_eval, config.seed)?;
        rec.step = step;
        rec.algorithm = algorithm.clone();
        rec.beta = config.loss.beta;
        if let Some(dir) = &options.checkpoint_dir {
            Checkpoint::of_policy(&p.to_any())
                .with_state(state.clone())
                .save(&dir.join(format!("step{step:06}.json")))?;
        }
        Ok(rec)
    };
    let stop = stop_at.min(total);
    let mut log = Vec::new();
    let mut records = Vec::new();
    if state.step == 0 && stop > 0 {
        records.push(evaluate(policy, 0, state)?);
    }
    while state.step < stop {
        let idx = batch_indices(config, dataset.len(), state.step);
        let ev = {
            let p = &*policy;
            sharded_grad(p.params(), &idx, |g, chunk| {
                let b = p.bind(g)?;
                let batch: Vec<PreferenceExample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
                direct_loss_var(g, &config.loss, p, &b, &batch, &refs.subset(chunk))
            })?
        };
        let lr = lr_at(config, state.step, total);
        log.push(StepLog {
            step: state.step,
            loss: ev.loss,
            lr,
        });
        apply_update(config, policy.params_mut(), state, &ev, lr)?;
        if state.step.is_multiple_of(config.eval_every_steps) || state.step == total {
            records.push(evaluate(policy, state.step, state)?);
        }
    }
    Ok(AlignReport {
        log,
        records,
        total_steps: total,
    })
}

/// Full-batch training of a tabular policy on the exact Bradley-Terry
/// population loss for `steps` steps (schedule and Adam from `config`).
pub fn train_population(
    config: &TrainConfig,
    policy: &mut TabularPolicy,
    population: &[PopulationPrompt],
    steps: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    let mut state = TrainState::new(policy.params().len());
    let mut losses = Vec::with_capacity(steps);
    while state.step < steps {
        let ev = {
            let p = &*policy;
            diffcore::grad(
                |g| {
                    let b = p.bind(g)?;
                    population_direct_loss_var(g, &config.loss, p, &b, population)
                },
                p.params(),
            )?
        };
        losses.push(ev.loss);
        let lr = lr_at(config, state.step, steps);
        apply_update(config, policy.params_mut(), &mut state, &ev, lr)?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub algorithm: String,
    pub betas: Vec<f64>,
}

impl SweepSpec {
    pub fn new(algorithm: &str, betas: Vec<f64>) -> Result<Self> {
        LossConfig::from_algorithm(algorithm, 1.0)?;
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config("sweep needs a non-empty list of positive betas".into()));
        }
        Ok(Self {
            algorithm: algorithm.into(),
            betas,
        })
    }

    /// The published grids: `paper-dpo`, `paper-dpo-avg`, `paper-ipo`,
    /// `paper-ipo-avg`.
    pub fn preset(name: &str) -> Result<Self> {
        let (algo, betas): (&str, &[f64]) = match name {
            "paper-dpo" => ("dpo", &[0.01, 0.03, 0.1, 0.3, 1.0]),
            "paper-dpo-avg" => ("dpo_avg", &[0.1, 0.3, 1.0, 3.0, 10.0]),
            "paper-ipo" => ("ipo", &[0.003, 0.01, 0.03, 0.1, 0.3]),
            "paper-ipo-avg" => ("ipo_avg", &[0.01, 0.03, 0.1, 0.3, 1.0]),
            _ => return Err(Error::Config(format!("unknown sweep preset `{name}`"))),
        };
        Self::new(algo, betas.to_vec())
    }
}

/// Best beta per algorithm reported for the full-scale runs (reference
/// metadata only).
pub fn paper_best_beta(algorithm: &str) -> Option<f64> {
    match algorithm {
        "dpo" => Some(0.1),
        "dpo_avg" => Some(3.0),
        "ipo" => Some(0.01),
        "ipo_avg" => Some(0.3),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub algorithm: String,
    pub beta: f64,
    pub final_mean_reward: Option<f64>,
    pub records: Vec<EvalRecord>,
    pub error: Option<String>,
}

/// One alignment run per beta from the same initialization and seeds.
/// A failing run is recorded in its row and the sweep continues.
pub fn beta_sweep<P, S>(
    spec: &SweepSpec,
    config: &TrainConfig,
    reference: &P,
    dataset: &[PreferenceExample],
    scorer: &S,
    options: &AlignOptions,
) -> Result<Vec<SweepRow>>
where
    P: Policy + Clone + AsAnyPolicy,
    S: RewardFunction + ?Sized,
{
    let base = LossConfig::from_algorithm(&spec.algorithm, 1.0)?;
    Ok(spec
        .betas
        .par_iter()
        .map(|&beta| {
            let cfg = TrainConfig {
                loss: LossConfig { beta, ..base.clone() },
                ..config.clone()
            };
            let mut opts = options.clone();
            opts.algorithm = Some(spec.algorithm.clone());
            if let Some(dir) = &options.checkpoint_dir {
                opts.checkpoint_dir = Some(dir.join(format!("{}_beta{beta}", spec.algorithm)));
            }
            let mut policy = reference.clone();
            match train_align(&cfg, &mut policy, reference, dataset, scorer, &opts) {
                Ok(rep) => SweepRow {
                    algorithm: spec.algorithm.clone(),
                    beta,
                    final_mean_reward: rep.records.last().map(|r| r.mean_reward),
                    records: rep.records,
                    error: None,
                },
                Err(e) => SweepRow {
                    algorithm: spec.algorithm.clone(),
                    beta,
                    final_mean_reward: None,
                    records: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}
