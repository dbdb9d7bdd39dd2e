//! Seeded desk-scale experiments: reward-model separability and the
//! length/reward trade-off of averaged vs. plain alignment losses.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{generate_preferences, split, DatasetSpec, Labeling};
use crate::error::Result;
use crate::evalsuite::{dominance_by_length_bins, pareto_front, within_cutoff, BinComparison, EvalRecord};
use crate::losses::PreferenceExample;
use crate::policy::{ContextFreePolicy, NeuralPolicy, Sequence, SequenceSpace, TransformerConfig};
use crate::reward::{pairwise_accuracy, GroundTruthReward, RewardModel};
use crate::trainer::{self, AlignOptions, Schedule, SweepSpec, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct RmStudyReport {
    pub n_train: usize,
    pub n_validation: usize,
    pub untrained_accuracy: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    /// Model trained on label-flipped pairs, scored against the true labels.
    pub flipped_validation_accuracy: f64,
}

pub fn rm_dataset_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_tokens: 6,
        l_max: 8,
        n_prompts: 512,
        prompt_length: 3,
        pairs_per_prompt: 16,
        labeling: Labeling::Argmax,
        reward: GroundTruthReward {
            key_token_weight: 1.0,
            length_penalty: 0.5,
            target_length: 6,
            length_bias: 0.0,
        },
        skip_ties: true,
        seed,
    }
}

pub fn rm_transformer() -> TransformerConfig {
    TransformerConfig {
        d_model: 24,
        n_blocks: 2,
        n_heads: 2,
        context: 12,
        ffn_mult: 2,
        init_std: 0.1,
    }
}

pub fn rm_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 32,
        peak_lr: 3e-3,
        warmup_fraction: 0.05,
        schedule: Schedule::CosineDecay,
        seed,
        ..TrainConfig::desk()
    }
}

/// Argmax-labeled pairs with ties dropped are separable by the true
/// reward; a small transformer should rank held-out pairs almost perfectly.
pub fn rm_accuracy_study(seed: u64) -> Result<RmStudyReport> {
    let spec = rm_dataset_spec(seed);
    let space = spec.space()?;
    let reference = ContextFreePolicy::with_eos_prob(space, 0.15)?;
    let data = generate_preferences(&spec, &reference)?.examples;
    let (train, validation) = split(&data, 0.8, seed)?;
    let flipped: Vec<PreferenceExample> = train.iter().map(PreferenceExample::flipped).collect();
    let config = rm_train_config(seed);

    let untrained = RewardModel::new(space, rm_transformer(), seed)?;
    let untrained_accuracy = pairwise_accuracy(&untrained, &validation)?;
    let runs: Vec<Result<(f64, f64)>> = [&train, &flipped]
        .into_par_iter()
        .map(|set| {
            let mut rm = RewardModel::new(space, rm_transformer(), seed)?;
            let rep = trainer::train_rm(&config, &mut rm, set, &[])?;
            Ok((rep.train_accuracy, pairwise_accuracy(&rm, &validation)?))
        })
        .collect();
    let mut runs = runs.into_iter();
    let (train_accuracy, validation_accuracy) = runs.next().unwrap()?;
    let (_, flipped_validation_accuracy) = runs.next().unwrap()?;
    Ok(RmStudyReport {
        n_train: train.len(),
        n_validation: validation.len(),
        untrained_accuracy,
        train_accuracy,
        validation_accuracy,
        flipped_validation_accuracy,
    })
}

/// Knobs of the length/reward study. `dataset.reward` carries the planted
/// length bias used for labeling; generations are scored with `scoring`.
#[derive(Clone, Debug, Serialize)]
pub struct LengthStudySpec {
    pub dataset: DatasetSpec,
    pub scoring: GroundTruthReward,
    pub policy: TransformerConfig,
    /// Content-token stop probability of the corpus the reference is
    /// fine-tuned on.
    pub sft_eos_prob: f64,
    pub sft_corpus: usize,
    #[serde(skip)]
    pub sft: TrainConfig,
    #[serde(skip)]
    pub align: TrainConfig,
    /// (averaged preset, plain preset) pairs to compare.
    pub comparisons: Vec<(String, String)>,
    pub cutoff: f64,
    pub n_bins: usize,
}

impl LengthStudySpec {
    pub fn desk() -> Self {
        let reward = GroundTruthReward {
            key_token_weight: 1.0,
            length_penalty: 0.5,
            target_length: 5,
            length_bias: 0.0,
        };
        Self {
            dataset: DatasetSpec {
                n_tokens: 6,
                l_max: 10,
                n_prompts: 256,
                prompt_length: 3,
                pairs_per_prompt: 16,
                labeling: Labeling::BradleyTerrySample,
                reward: GroundTruthReward { length_bias: 0.3, ..reward },
                skip_ties: false,
                seed: 0,
            },
            scoring: reward,
            policy: TransformerConfig {
                d_model: 16,
                n_blocks: 1,
                n_heads: 2,
                context: 16,
                ffn_mult: 2,
                init_std: 0.1,
            },
            sft_eos_prob: 0.2,
            sft_corpus: 1024,
            sft: TrainConfig {
                epochs: 1,
                batch_size: 32,
                peak_lr: 3e-3,
                ..TrainConfig::desk()
            },
            align: TrainConfig {
                peak_lr: 1e-2,
                eval_every_steps: 8,
                generations_per_eval: 256,
                ..TrainConfig::desk()
            },
            comparisons: vec![
                ("paper-dpo-avg".into(), "paper-dpo".into()),
                ("paper-ipo-avg".into(), "paper-ipo".into()),
            ],
            cutoff: 0.75,
            n_bins: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonResult {
    pub averaged: String,
    pub plain: String,
    pub averaged_beta: f64,
    pub plain_beta: f64,
    pub bins: BinComparison,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Mean |y+| - |y-| of the generated preference data.
    pub length_gap: f64,
    pub comparisons: Vec<ComparisonResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LengthStudyReport {
    pub seeds: Vec<SeedResult>,
    /// Per comparison: (averaged, plain, bins won by averaged, comparable bins).
    pub totals: Vec<(String, String, usize, usize)>,
    /// Every comparison won in a strict majority of comparable bins,
    /// pooled over seeds.
    pub passed: bool,
}

impl LengthStudyReport {
    pub fn summary(&self) -> String {
        let mut parts: Vec<String> = self
            .totals
            .iter()
            .map(|(a, b, w, c)| format!("{a} vs {b}: {w}/{c} bins"))
            .collect();
        for s in &self.seeds {
            let per: Vec<String> = s
                .comparisons
                .iter()
                .map(|c| {
                    format!(
                        "{}@{}/{}@{} {}/{}",
                        c.averaged, c.averaged_beta, c.plain, c.plain_beta, c.bins.a_wins, c.bins.comparable
                    )
                })
                .collect();
            parts.push(format!("seed {} (gap {:.2}): {}", s.seed, s.length_gap, per.join(", ")));
        }
        parts.join("; ")
    }
}

/// The successful run with the highest final reward.
fn best_run(rows: &[trainer::SweepRow]) -> Option<&trainer::SweepRow> {
    rows.iter()
        .filter(|r| r.final_mean_reward.is_some())
        .max_by(|a, b| a.final_mean_reward.unwrap().total_cmp(&b.final_mean_reward.unwrap()))
}

pub fn length_study_seed(spec: &LengthStudySpec, seed: u64) -> Result<SeedResult> {
    let dataset_spec = DatasetSpec { seed, ..spec.dataset.clone() };
    let space: SequenceSpace = dataset_spec.space()?;

    let teacher = ContextFreePolicy::with_eos_prob(space, spec.sft_eos_prob)?;
    let prompts = dataset_spec.prompts();
    let corpus: Vec<Sequence> = (0..spec.sft_corpus)
        .map(|i| crate::policy::sample(&teacher, &prompts[i % prompts.len()], seed ^ ((i as u64) << 20), 1.0))
        .collect::<Result<_>>()?;
    let mut reference = NeuralPolicy::new(space, spec.policy, seed)?;
    trainer::train_sft(&TrainConfig { seed, ..spec.sft.clone() }, &mut reference, &corpus)?;

    let data = generate_preferences(&dataset_spec, &reference)?.examples;
    let align = TrainConfig { seed, ..spec.align.clone() };
    let total = align.total_steps(data.len());
    let options = AlignOptions {
        eval_prompts: prompts,
        ..Default::default()
    };

    let mut comparisons = Vec::new();
    for (avg_name, plain_name) in &spec.comparisons {
        let mut fronts = Vec::new();
        let mut betas = Vec::new();
        for name in [avg_name, plain_name] {
            let rows = trainer::beta_sweep(&SweepSpec::preset(name)?, &align, &reference, &data, &spec.scoring, &options)?;
            let best = best_run(&rows).ok_or_else(|| crate::Error::Numerical(format!("every {name} run failed")))?;
            let kept: Vec<EvalRecord> = within_cutoff(&best.records, total, spec.cutoff);
            let points: Vec<(f64, f64)> = kept.iter().map(|r| (r.mean_length, r.mean_reward)).collect();
            fronts.push(pareto_front(&points)?);
            betas.push(best.beta);
        }
        comparisons.push(ComparisonResult {
            averaged: avg_name.clone(),
            plain: plain_name.clone(),
            averaged_beta: betas[0],
            plain_beta: betas[1],
            bins: dominance_by_length_bins(&fronts[0], &fronts[1], spec.n_bins)?,
        });
    }
    Ok(SeedResult {
        seed,
        length_gap: crate::data::mean_length_gap(&data),
        comparisons,
    })
}

pub fn length_study(spec: &LengthStudySpec, seeds: &[u64]) -> Result<LengthStudyReport> {
    let seeds = seeds.iter().map(|&s| length_study_seed(spec, s)).collect::<Result<Vec<_>>>()?;
    let totals: Vec<(String, String, usize, usize)> = spec
        .comparisons
        .iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let wins = seeds.iter().map(|s| s.comparisons[k].bins.a_wins).sum();
            let comparable = seeds.iter().map(|s| s.comparisons[k].bins.comparable).sum();
            (a.clone(), b.clone(), wins, comparable)
        })
        .collect();
    let passed = totals.iter().all(|&(_, _, w, c)| c > 0 && 2 * w > c);
    Ok(LengthStudyReport { seeds, totals, passed })
}
