//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report reads top to bottom;
//! the process exits non-zero if any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use dalign_core::checkpoint::AnyPolicy;
use dalign_core::diffcore::{finite_diff_check, rel_err, Graph, ParamVector};
use dalign_core::losses::{
    bt_loss_var, direct_loss, direct_loss_var, population_direct_loss_var, xe_loss_var, HSpec, LossConfig, PopulationPrompt,
    PreferenceExample, ReferenceLogProbs,
};
use dalign_core::operators::{self, apply_t_r, avg_optimal_policy, exact_objective, ExplicitDistribution};
use dalign_core::policy::{NeuralPolicy, Policy, Sequence, SequenceSpace, TabularPolicy, TransformerConfig};
use dalign_core::reward::{RewardModel, TabularReward, TrainableReward};
use dalign_core::{study, trainer};

// criterion 1
const BIJECTION_TOL: f64 = 1e-12;
const RESIDUAL_STD_TOL: f64 = 1e-9;
const PARTITION_TOL: f64 = 1e-9;
const ORACLE_DRAWS: usize = 20;
// criterion 2
const FD_EPS: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 100;
/// Reporting only: coordinates whose analytic gradient is below this are
/// treated as structural zeros in the failure breakdown.
const STRUCTURAL_ZERO: f64 = 1e-15;
// criterion 3
const RESCALE_TOL: f64 = 1e-12;
// criterion 4
const POPULATION_TV_TOL: f64 = 1e-3;
// criterion 5
const OPTIMALITY_MARGIN: f64 = -1e-10;
const PERTURBATIONS: usize = 1000;
// criterion 6
const RM_MIN_ACCURACY: f64 = 0.95;
const RM_MAX_FLIPPED_ACCURACY: f64 = 0.05;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn operator_oracle() -> Outcome {
    let space = SequenceSpace::new(3, 4).unwrap();
    let mut worst = operators::OracleReport::default();
    for (k, beta) in [0.3, 1.0, 3.0].into_iter().enumerate() {
        let r = operators::oracle_check(space, beta, 1000 * k as u64, ORACLE_DRAWS).unwrap();
        worst.draws += r.draws;
        worst.n_sequences = r.n_sequences;
        worst.bijection_error = worst.bijection_error.max(r.bijection_error);
        worst.t_r_residual_std = worst.t_r_residual_std.max(r.t_r_residual_std);
        worst.avg_residual_std = worst.avg_residual_std.max(r.avg_residual_std);
        worst.partition_error = worst.partition_error.max(r.partition_error);
    }
    outcome(
        worst.n_sequences == 40
            && worst.bijection_error < BIJECTION_TOL
            && worst.t_r_residual_std < RESIDUAL_STD_TOL
            && worst.avg_residual_std < RESIDUAL_STD_TOL
            && worst.partition_error < PARTITION_TOL,
        format!(
            "{} draws over {} sequences: bijection {:.1e}, T_R residual std {:.1e}, averaged residual std {:.1e}, |const - beta ln Z| {:.1e}",
            worst.draws,
            worst.n_sequences,
            worst.bijection_error,
            worst.t_r_residual_std,
            worst.avg_residual_std,
            worst.partition_error
        ),
    )
}

fn grad_config() -> TransformerConfig {
    TransformerConfig {
        d_model: 4,
        n_blocks: 1,
        n_heads: 2,
        context: 8,
        ffn_mult: 2,
        init_std: 0.5,
    }
}

fn random_pairs(space: &SequenceSpace, prompts: &[Vec<u32>], n: usize, rng: &mut ChaCha8Rng) -> Vec<PreferenceExample> {
    let all = space.enumerate(&[]).unwrap();
    (0..n)
        .map(|_| loop {
            let a = all.choose(rng).unwrap();
            let b = all.choose(rng).unwrap();
            if a != b {
                let prompt = prompts.choose(rng).unwrap().clone();
                break PreferenceExample {
                    prompt,
                    chosen: a.completion.clone(),
                    rejected: b.completion.clone(),
                };
            }
        })
        .collect()
}

fn randomize(params: &mut ParamVector, std: f64, rng: &mut ChaCha8Rng) {
    for v in params.values_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v = std * e;
    }
}

#[derive(Default)]
struct GradTally {
    checks: usize,
    failures: Vec<String>,
    /// Failures in which every offending coordinate has a zero analytic
    /// gradient (central differences there are pure round-off).
    zero_only: usize,
    worst_nonzero: f64,
}

/// Every (loss, backend) combination for one seed.
fn gradient_checks_for_seed(seed: u64) -> GradTally {
    let space = SequenceSpace::new(3, 4).unwrap();
    let prompts = vec![vec![0], vec![1, 2]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = random_pairs(&space, &prompts, 4, &mut rng);
    let seqs: Vec<Sequence> = pairs.iter().map(|p| p.chosen_seq()).collect();

    let tab = TabularPolicy::random(space, prompts.clone(), 1.0, seed).unwrap();
    let tab_ref = TabularPolicy::random(space, prompts.clone(), 1.0, seed + 10_000).unwrap();
    let neu = NeuralPolicy::new(space, grad_config(), seed).unwrap();
    let neu_ref = NeuralPolicy::new(space, grad_config(), seed + 10_000).unwrap();
    let backends = [
        ("tabular", AnyPolicy::Tabular(tab), AnyPolicy::Tabular(tab_ref)),
        ("neural", AnyPolicy::Neural(neu), AnyPolicy::Neural(neu_ref)),
    ];

    let mut tally = GradTally::default();
    let mut record = |name: String, report: dalign_core::Result<dalign_core::diffcore::GradReport>| {
        tally.checks += 1;
        let r = match report {
            Ok(r) => r,
            Err(e) => return tally.failures.push(format!("{name} seed {seed}: {e}")),
        };
        let mut zero_only = true;
        for (a, n) in r.analytic.iter().zip(&r.numeric) {
            let e = rel_err(*a, *n);
            if a.abs() > STRUCTURAL_ZERO {
                tally.worst_nonzero = tally.worst_nonzero.max(e);
                zero_only &= e <= FD_REL_TOL;
            }
        }
        if !r.passed {
            tally.zero_only += zero_only as usize;
            tally.failures.push(format!(
                "{name} seed {seed}: rel err {:.2e} in {:?} (analytic {:e}, numeric {:e})",
                r.max_rel_err, r.worst_block, r.analytic[r.worst_index], r.numeric[r.worst_index]
            ));
        }
    };

    for (label, pol, reference) in &backends {
        record(
            format!("xe/{label}"),
            finite_diff_check(
                |g: &mut Graph<'_>| {
                    let b = pol.bind(g)?;
                    xe_loss_var(g, pol, &b, &seqs)
                },
                pol.params(),
                FD_EPS,
                FD_REL_TOL,
            ),
        );
        let refs = ReferenceLogProbs::compute(reference, &pairs).unwrap();
        for h in [HSpec::Dpo, HSpec::Ipo, HSpec::Slic] {
            for averaging in [false, true] {
                let cfg = LossConfig::new(h.clone(), 0.5, averaging).unwrap();
                record(
                    format!("{}/{label}", cfg.algorithm()),
                    finite_diff_check(
                        |g: &mut Graph<'_>| {
                            let b = pol.bind(g)?;
                            direct_loss_var(g, &cfg, pol, &b, &pairs, &refs)
                        },
                        pol.params(),
                        FD_EPS,
                        FD_REL_TOL,
                    ),
                );
            }
        }
    }

    let n_table = space.cardinality() as usize * prompts.len();
    let table = TabularReward::new(space, prompts.clone(), (0..n_table).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    record(
        "bt/tabular".into(),
        finite_diff_check(
            |g: &mut Graph<'_>| {
                let b = table.bind(g)?;
                bt_loss_var(g, &table, &b, &pairs)
            },
            table.params(),
            FD_EPS,
            FD_REL_TOL,
        ),
    );
    // the fresh head is zero, which would make encoder gradients vanish
    let mut rm = RewardModel::new(space, grad_config(), seed).unwrap();
    randomize(rm.params_mut(), 0.5, &mut rng);
    record(
        "bt/neural".into(),
        finite_diff_check(
            |g: &mut Graph<'_>| {
                let b = rm.bind(g)?;
                bt_loss_var(g, &rm, &b, &pairs)
            },
            rm.params(),
            FD_EPS,
            FD_REL_TOL,
        ),
    );
    tally
}

fn gradient_suite() -> Outcome {
    let tallies: Vec<GradTally> = (0..FD_SEEDS).into_par_iter().map(gradient_checks_for_seed).collect();
    let total: usize = tallies.iter().map(|t| t.checks).sum();
    let zero_only: usize = tallies.iter().map(|t| t.zero_only).sum();
    let worst_nonzero = tallies.iter().map(|t| t.worst_nonzero).fold(0.0, f64::max);
    let failures: Vec<String> = tallies.into_iter().flat_map(|t| t.failures).collect();
    let mut detail = format!(
        "{total} checks (xe, bt, dpo/ipo/slic x avg on/off; tabular + neural; {FD_SEEDS} seeds; eps {FD_EPS:e}, rel tol {FD_REL_TOL:e}), {} failed",
        failures.len()
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!(
            " ({zero_only} of them only at coordinates with |analytic| <= {STRUCTURAL_ZERO:e}; worst rel err elsewhere {worst_nonzero:.1e}); first: {f}"
        ));
    }
    outcome(failures.is_empty(), detail)
}

fn equal_length_identity() -> Outcome {
    let space = SequenceSpace::new(3, 8).unwrap();
    let prompts = vec![vec![0, 1], vec![2]];
    let policy = TabularPolicy::random(space, prompts.clone(), 1.0, 5).unwrap();
    let reference = TabularPolicy::random(space, prompts.clone(), 1.0, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for l in [1usize, 2, 4, 8] {
        let pool: Vec<Sequence> = space.enumerate(&[]).unwrap().into_iter().filter(|s| s.len() == l).collect();
        let batch: Vec<PreferenceExample> = (0..12)
            .map(|_| {
                let a = pool.choose(&mut rng).unwrap();
                // only [eos] has length 1, so the L = 1 batch is necessarily
                // made of identical pairs (z = 0 on both sides)
                let b = if pool.len() == 1 {
                    a
                } else {
                    loop {
                        let b = pool.choose(&mut rng).unwrap();
                        if b != a {
                            break b;
                        }
                    }
                };
                PreferenceExample {
                    prompt: prompts.choose(&mut rng).unwrap().clone(),
                    chosen: a.completion.clone(),
                    rejected: b.completion.clone(),
                }
            })
            .collect();
        for h in [HSpec::Dpo, HSpec::Ipo, HSpec::Slic] {
            for beta in [0.1, 1.0, 3.0] {
                let on = direct_loss(&LossConfig::new(h.clone(), beta, true).unwrap(), &policy, &reference, &batch).unwrap();
                let off = direct_loss(&LossConfig::new(h.clone(), beta / l as f64, false).unwrap(), &policy, &reference, &batch).unwrap();
                worst = worst.max((on - off).abs());
                cases += 1;
            }
        }
    }
    outcome(
        worst <= RESCALE_TOL,
        format!("{cases} (L, h, beta) cases, L in {{1,2,4,8}}: max |avg(beta) - plain(beta/L)| = {worst:.1e}"),
    )
}

fn population_recovery() -> Outcome {
    let space = SequenceSpace::new(2, 4).unwrap();
    let prompts = vec![vec![0], vec![1, 1]];
    let beta = 0.7;
    let ref_policy = TabularPolicy::random(space, prompts.clone(), 0.8, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = space.cardinality() as usize * prompts.len();
    let reward = TabularReward::new(space, prompts.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let refs: Vec<ExplicitDistribution> = prompts.iter().map(|p| ExplicitDistribution::from_policy(&ref_policy, p).unwrap()).collect();
    let population: Vec<PopulationPrompt> = refs.iter().map(|d| PopulationPrompt::new(d, &reward, 0.5).unwrap()).collect();

    let mut details = Vec::new();
    let mut passed = true;
    for averaging in [false, true] {
        let targets: Vec<ExplicitDistribution> = refs
            .iter()
            .map(|d| {
                if averaging {
                    avg_optimal_policy(d, &reward, beta).unwrap().policy
                } else {
                    apply_t_r(d, &reward, beta).unwrap()
                }
            })
            .collect();
        let loss = LossConfig::new(HSpec::Dpo, beta, averaging).unwrap();
        // stationarity of the population loss at the analytic optimum
        let opt = operators::to_tabular(&targets).unwrap();
        let g = dalign_core::diffcore::grad(
            |g| {
                let b = opt.bind(g)?;
                population_direct_loss_var(g, &loss, &opt, &b, &population)
            },
            opt.params(),
        )
        .unwrap();
        let grad_norm = g.gradient.iter().map(|x| x * x).sum::<f64>().sqrt();

        let mut config = trainer::TrainConfig::desk();
        config.loss = loss.clone();
        config.peak_lr = 0.05;
        config.warmup_fraction = 0.0;
        config.schedule = trainer::Schedule::CosineDecay;
        let mut policy = ref_policy.clone();
        trainer::train_population(&config, &mut policy, &population, 4000).unwrap();
        let tv = prompts
            .iter()
            .zip(&targets)
            .map(|(p, t)| operators::total_variation(&ExplicitDistribution::from_policy(&policy, p).unwrap(), t).unwrap())
            .fold(0.0, f64::max);
        passed &= tv < POPULATION_TV_TOL;
        details.push(format!(
            "{}: TV to {} = {tv:.1e} (grad norm at optimum {grad_norm:.1e})",
            loss.algorithm(),
            if averaging { "F^-1 T_R F pi_ref" } else { "T_R pi_ref" }
        ));
    }
    outcome(passed, details.join("; "))
}

fn optimality() -> Outcome {
    let space = SequenceSpace::new(3, 4).unwrap();
    let prompts = [vec![0u32], vec![2, 1]];
    let beta = 0.6;
    let ref_policy = TabularPolicy::random(space, prompts.to_vec(), 1.0, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let n = space.cardinality() as usize * prompts.len();
    let reward = TabularReward::new(space, prompts.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let refs: Vec<ExplicitDistribution> = prompts.iter().map(|p| ExplicitDistribution::from_policy(&ref_policy, p).unwrap()).collect();
    let best: Vec<ExplicitDistribution> = refs.iter().map(|d| apply_t_r(d, &reward, beta).unwrap()).collect();
    let rho = [0.3, 0.7];
    let j_best = exact_objective(&best, &refs, &reward, beta, &rho).unwrap();
    let mut min_margin = f64::INFINITY;
    for i in 0..PERTURBATIONS {
        let scale = 10f64.powf(-3.0 + 3.0 * (i % 10) as f64 / 9.0);
        let cand: Vec<ExplicitDistribution> = best.iter().map(|d| operators::perturb(d, scale, &mut rng).unwrap()).collect();
        let j = exact_objective(&cand, &refs, &reward, beta, &rho).unwrap();
        min_margin = min_margin.min(j_best - j);
    }
    outcome(
        min_margin >= OPTIMALITY_MARGIN,
        format!("J(T_R pi_ref) = {j_best:.6}; min margin over {PERTURBATIONS} perturbations = {min_margin:.3e}"),
    )
}

fn reward_model() -> Outcome {
    let r = study::rm_accuracy_study(0).unwrap();
    outcome(
        r.validation_accuracy >= RM_MIN_ACCURACY && r.flipped_validation_accuracy <= RM_MAX_FLIPPED_ACCURACY,
        format!(
            "held-out accuracy {:.4} (train {:.4}, {} train / {} held-out pairs); label-flipped {:.4}",
            r.validation_accuracy, r.train_accuracy, r.n_train, r.n_validation, r.flipped_validation_accuracy
        ),
    )
}

fn length_study() -> Outcome {
    let r = study::length_study(&study::LengthStudySpec::desk(), &[0, 1, 2]).unwrap();
    outcome(r.passed, r.summary())
}

fn dalign(dir: &Path, threads: &str, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dalign"))
        .current_dir(dir)
        .env("DALIGN_THREADS", threads)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`dalign {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn output_hashes(dir: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let m: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(m["outputs"].clone())
}

/// Run every command, replay each from its manifest into a fresh
/// directory with a different thread count, and compare output hashes.
fn replay_all(dir: &Path) -> Result<Vec<String>, String> {
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("data", vec!["gen-data", "--n-prompts", "24", "--length-bias", "0.3", "--seed", "7"]),
        ("sft", vec!["sft", "--data", "data/train.jsonl", "--max-steps", "12", "--seed", "7"]),
        ("rm", vec!["train-rm", "--data", "data/train.jsonl", "--validation", "data/validation.jsonl", "--max-steps", "8"]),
        (
            "align",
            vec![
                "align", "--algo", "dpo_avg", "--beta", "3", "--data", "data/train.jsonl", "--reference", "sft/policy.json",
                "--lr", "1e-2", "--eval-every", "8", "--seed", "7",
            ],
        ),
        (
            "sweep",
            vec!["sweep", "--preset", "paper-ipo", "--data", "data/train.jsonl", "--reference", "sft/policy.json", "--max-steps", "6"],
        ),
        ("eval", vec!["eval", "--policy", "align/policy.json", "--data", "data/validation.jsonl", "--reward-model", "rm/reward_model.json"]),
        ("front", vec!["eval", "--metrics", "align/metrics.csv"]),
        ("oracle", vec!["oracle-check", "--vocab", "3", "--l-max", "4", "--beta", "1"]),
    ];
    let mut checked = Vec::new();
    for (out, args) in runs {
        let mut first = args.clone();
        first.extend(["--out-dir", out]);
        dalign(dir, "2", &first)?;
        let replay = format!("{out}_replay");
        let manifest = format!("{out}/manifest.json");
        dalign(dir, "1", &[args[0], "--config", &manifest, "--out-dir", &replay])?;
        let (a, b) = (output_hashes(&dir.join(out))?, output_hashes(&dir.join(&replay))?);
        if a != b {
            return Err(format!("{} outputs differ after replay: {a} vs {b}", args[0]));
        }
        if dir.join(out).join("metrics.csv").exists() {
            let x = std::fs::read(dir.join(out).join("metrics.csv")).map_err(|e| e.to_string())?;
            let y = std::fs::read(dir.join(&replay).join("metrics.csv")).map_err(|e| e.to_string())?;
            if x != y {
                return Err(format!("{out}/metrics.csv differs byte-wise after replay"));
            }
        }
        checked.push(args[0].to_string());
    }
    Ok(checked)
}

fn determinism() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, e.to_string()),
    };
    match replay_all(dir.path()) {
        Ok(c) => outcome(
            true,
            format!("{} runs replayed from manifest.json (2 threads, then 1): identical outputs, metrics.csv bitwise equal ({})", c.len(), c.join(", ")),
        ),
        Err(e) => outcome(false, e),
    }
}

fn main() -> ExitCode {
    type Criterion = (u32, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        (1, "operator oracle", operator_oracle),
        (2, "gradient suite", gradient_suite),
        (3, "equal-length identity", equal_length_identity),
        (4, "population recovery", population_recovery),
        (5, "optimality of T_R", optimality),
        (6, "reward-model training", reward_model),
        (7, "length/reward Pareto analog", length_study),
        (8, "determinism from manifest", determinism),
    ];
    // `cargo test --test acceptance -- 2 7` runs only criteria 2 and 7
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut all = true;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        all &= o.passed;
        println!(
            "criterion {id} [{}] {name} ({:.1}s): {}",
            if o.passed { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
