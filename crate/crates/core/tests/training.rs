use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dalign_core::checkpoint::{AnyPolicy, Checkpoint};
use dalign_core::data::{generate_preferences, DatasetSpec, Labeling};
use dalign_core::losses::{xe_loss, LossConfig};
use dalign_core::operators::{total_variation, ExplicitDistribution};
use dalign_core::policy::{sample, ContextFreePolicy, NeuralPolicy, Policy, Sequence, SequenceSpace, TransformerConfig};
use dalign_core::reward::{pairwise_accuracy, GroundTruthReward, RewardModel, TrainableReward};
use dalign_core::trainer::{train_align, train_sft, train_sft_from, AlignOptions, TrainConfig, TrainState};

fn tiny() -> TransformerConfig {
    TransformerConfig {
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        context: 12,
        ffn_mult: 2,
        init_std: 0.1,
    }
}

fn corpus(space: SequenceSpace, n: u64) -> Vec<Sequence> {
    let teacher = ContextFreePolicy::with_eos_prob(space, 0.3).unwrap();
    (0..n).map(|i| sample(&teacher, &[1, 2], i, 1.0).unwrap()).collect()
}

#[test]
fn resume_matches_uninterrupted_run() {
    let space = SequenceSpace::new(4, 6).unwrap();
    let data = corpus(space, 48);
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 8;
    cfg.peak_lr = 1e-2;
    let total = cfg.total_steps(data.len());
    let half = total / 2;

    let mut straight = NeuralPolicy::new(space, tiny(), 3).unwrap();
    train_sft(&cfg, &mut straight, &data).unwrap();

    let mut first = NeuralPolicy::new(space, tiny(), 3).unwrap();
    let mut state = TrainState::new(first.params().len());
    train_sft_from(&cfg, &mut first, &data, &mut state, half).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.json");
    Checkpoint::of_policy(&AnyPolicy::Neural(first)).with_state(state).save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    let mut state = ck.train_state.clone().unwrap();
    assert_eq!(state.step, half);
    let mut resumed = ck.into_policy().unwrap();
    train_sft_from(&cfg, &mut resumed, &data, &mut state, total).unwrap();

    let worst = straight
        .params()
        .values()
        .iter()
        .zip(resumed.params().values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-12, "max parameter difference {worst:e}");
}

#[test]
fn sft_overfits_a_single_batch() {
    let space = SequenceSpace::new(4, 6).unwrap();
    // distinct prompts, so the batch is memorizable (xe can approach 0)
    let teacher = ContextFreePolicy::with_eos_prob(space, 0.3).unwrap();
    let batch: Vec<Sequence> = (0..4).map(|i| sample(&teacher, &[i as u32, 1], i, 1.0).unwrap()).collect();
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = batch.len();
    cfg.epochs = 500;
    cfg.peak_lr = 1e-2;
    cfg.warmup_fraction = 0.0;
    let mut p = NeuralPolicy::new(space, tiny(), 0).unwrap();
    let log = train_sft(&cfg, &mut p, &batch).unwrap();
    assert_eq!(log.len(), 500);
    let end = xe_loss(&p, &batch).unwrap();
    assert!(end < 0.1, "xe loss after 500 steps: {end}");
}

#[test]
fn untrained_reward_model_is_near_chance() {
    let spec = DatasetSpec {
        n_tokens: 6,
        l_max: 8,
        n_prompts: 64,
        labeling: Labeling::Argmax,
        ..DatasetSpec::default()
    };
    let space = spec.space().unwrap();
    let reference = ContextFreePolicy::with_eos_prob(space, 0.15).unwrap();
    let data = generate_preferences(&spec, &reference).unwrap().examples;
    let n = data.len() as f64;
    // the fresh head is zero: every pair ties and scores half
    let fresh = RewardModel::new(space, tiny(), 0).unwrap();
    assert_eq!(pairwise_accuracy(&fresh, &data).unwrap(), 0.5);

    // one random network has systematic biases (e.g. towards length), so
    // average over independent draws of all weights
    let draws = 32;
    let mut total = 0.0;
    for seed in 0..draws {
        let mut rm = RewardModel::new(space, tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in rm.params_mut().values_mut() {
            *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        total += pairwise_accuracy(&rm, &data).unwrap();
    }
    let acc = total / draws as f64;
    assert!((acc - 0.5).abs() <= 0.05, "mean accuracy {acc} over {draws} random models, {n} pairs");
}

#[test]
fn huge_beta_keeps_policy_at_reference() {
    let spec = DatasetSpec {
        n_tokens: 3,
        l_max: 4,
        n_prompts: 4,
        prompt_length: 2,
        pairs_per_prompt: 16,
        ..DatasetSpec::default()
    };
    let space = spec.space().unwrap();
    let reference = NeuralPolicy::new(space, tiny(), 1).unwrap();
    let data = generate_preferences(&spec, &reference).unwrap().examples;
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 16;
    cfg.generations_per_eval = 8;
    cfg.eval_every_steps = 1000;
    cfg.loss = LossConfig::from_algorithm("dpo", 1e6).unwrap();
    let mut policy = reference.clone();
    let scorer = GroundTruthReward::default();
    train_align(&cfg, &mut policy, &reference, &data, &scorer, &AlignOptions::default()).unwrap();
    for prompt in spec.prompts() {
        let a = ExplicitDistribution::from_policy(&policy, &prompt).unwrap();
        let b = ExplicitDistribution::from_policy(&reference, &prompt).unwrap();
        let tv = total_variation(&a, &b).unwrap();
        assert!(tv <= 0.05, "TV {tv} on prompt {prompt:?}");
    }
}
