//! Synthetic preference datasets and their JSONL interchange format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::sigmoid;
use crate::error::{Error, Result};
use crate::losses::PreferenceExample;
use crate::policy::{sample_with_rng, Policy, SequenceSpace, TokenId};
use crate::reward::GroundTruthReward;

/// Resamples of the second completion before a pair is given up.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    /// The higher true reward is chosen.
    Argmax,
    /// The first completion is chosen with probability sigma(R1 - R2).
    BradleyTerrySample,
}

impl std::str::FromStr for Labeling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Labeling::Argmax),
            "bradley_terry_sample" | "bt" => Ok(Labeling::BradleyTerrySample),
            _ => Err(Error::Config(format!("unknown labeling `{s}` (argmax | bradley_terry_sample)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_tokens: u32,
    pub l_max: usize,
    pub n_prompts: usize,
    pub prompt_length: usize,
    pub pairs_per_prompt: usize,
    pub labeling: Labeling,
    pub reward: GroundTruthReward,
    /// Under argmax labeling, drop pairs whose rewards tie (they carry no
    /// preference signal). Counted as skipped.
    pub skip_ties: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_tokens: 8,
            l_max: 10,
            n_prompts: 64,
            prompt_length: 3,
            pairs_per_prompt: 16,
            labeling: Labeling::BradleyTerrySample,
            reward: GroundTruthReward::default(),
            skip_ties: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 || self.prompt_length == 0 || self.pairs_per_prompt == 0 {
            return Err(Error::Config("n_prompts, prompt_length and pairs_per_prompt must be positive".into()));
        }
        if self.l_max < 2 {
            return Err(Error::Config("l_max must be at least 2 to form distinct pairs".into()));
        }
        SequenceSpace::new(self.n_tokens, self.l_max)?;
        Ok(())
    }

    pub fn space(&self) -> Result<SequenceSpace> {
        SequenceSpace::new(self.n_tokens, self.l_max)
    }

    /// Deterministic prompt set, tokens drawn uniformly with replacement.
    pub fn prompts(&self) -> Vec<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        (0..self.n_prompts)
            .map(|_| (0..self.prompt_length).map(|_| rng.random_range(0..self.n_tokens)).collect())
            .collect()
    }
}

/// Returns true when the first completion is the chosen one.
pub fn label_pair<R: Rng>(labeling: Labeling, r1: f64, r2: f64, rng: &mut R) -> bool {
    match labeling {
        Labeling::Argmax => r1 >= r2,
        Labeling::BradleyTerrySample => rng.random::<f64>() < sigmoid(r1 - r2),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub examples: Vec<PreferenceExample>,
    /// Pairs dropped because no distinct (or, with `skip_ties`, no
    /// reward-distinct) second completion turned up.
    pub skipped: usize,
}

/// Sample pairs of distinct completions from `reference` for every prompt
/// and label them. Prompt `i` uses stream `i` of the dataset seed, so the
/// output is independent of thread count.
pub fn generate_preferences<P: Policy + ?Sized>(spec: &DatasetSpec, reference: &P) -> Result<Generated> {
    spec.validate()?;
    if *reference.space() != spec.space()? {
        return Err(Error::domain("reference policy is defined on a different sequence space"));
    }
    let prompts = spec.prompts();
    let per_prompt: Vec<Result<(Vec<PreferenceExample>, usize)>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let mut out = Vec::with_capacity(spec.pairs_per_prompt);
            let mut skipped = 0;
            for _ in 0..spec.pairs_per_prompt {
                let a = sample_with_rng(reference, prompt, &mut rng, 1.0)?.completion;
                let ra = spec.reward.true_reward(prompt, &a);
                let mut second = None;
                for _ in 0..MAX_RESAMPLES {
                    let b = sample_with_rng(reference, prompt, &mut rng, 1.0)?.completion;
                    let rb = spec.reward.true_reward(prompt, &b);
                    let tie = spec.skip_ties && spec.labeling == Labeling::Argmax && ra == rb;
                    if b != a && !tie {
                        second = Some((b, rb));
                        break;
                    }
                }
                let Some((b, rb)) = second else {
                    skipped += 1;
                    continue;
                };
                let (chosen, rejected) = if label_pair(spec.labeling, ra, rb, &mut rng) { (a, b) } else { (b, a) };
                out.push(PreferenceExample {
                    prompt: prompt.clone(),
                    chosen,
                    rejected,
                });
            }
            Ok((out, skipped))
        })
        .collect();
    let mut examples = Vec::new();
    let mut skipped = 0;
    for r in per_prompt {
        let (ex, s) = r?;
        examples.extend(ex);
        skipped += s;
    }
    Ok(Generated { examples, skipped })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    prompt: Vec<TokenId>,
    chosen: Vec<TokenId>,
    rejected: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

/// One JSON object per line; returns the number written.
pub fn write_jsonl(path: &Path, examples: &[PreferenceExample]) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let rec = Record {
            prompt: ex.prompt.clone(),
            chosen: ex.chosen.clone(),
            rejected: ex.rejected.clone(),
            meta: None,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Numerical(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(examples.len())
}

/// Parse and validate against `space`; errors carry the 1-based line.
/// Blank lines are ignored.
pub fn read_jsonl(path: &Path, space: &SequenceSpace) -> Result<Vec<PreferenceExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let ex = PreferenceExample {
            prompt: rec.prompt,
            chosen: rec.chosen,
            rejected: rec.rejected,
        };
        ex.validate(space).map_err(|e| parse_err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

/// Deterministic shuffled split; `round(n * train_fraction)` go to train.
pub fn split<T: Clone>(examples: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (examples.len() as f64 * train_fraction).round() as usize;
    let pick = |ix: &[usize]| ix.iter().map(|&i| examples[i].clone()).collect();
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&buf))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub n_examples: usize,
    pub skipped: usize,
    pub files: Vec<(String, String)>,
}

/// Length difference between chosen and rejected, averaged.
pub fn mean_length_gap(examples: &[PreferenceExample]) -> f64 {
    let n = examples.len().max(1) as f64;
    examples.iter().map(|e| e.chosen.len() as f64 - e.rejected.len() as f64).sum::<f64>() / n
}
