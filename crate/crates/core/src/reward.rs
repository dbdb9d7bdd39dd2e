//! Programmable ground-truth rewards and a learnable transformer reward
//! model.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Init, ParamVector, Var};
use crate::error::{Error, Result};
use crate::losses::PreferenceExample;
use crate::policy::{BoundTransformer, SequenceSpace, TokenId, Transformer, TransformerConfig};

/// Anything that scores a (prompt, completion) pair.
pub trait RewardFunction: Send + Sync {
    fn reward(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64>;
}

impl<F> RewardFunction for F
where
    F: Fn(&[TokenId], &[TokenId]) -> f64 + Send + Sync,
{
    fn reward(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64> {
        Ok(self(prompt, completion))
    }
}

/// A reward whose value is recorded on a graph, so it can be trained.
pub trait TrainableReward: Send + Sync {
    type Bound;

    fn params(&self) -> &ParamVector;
    fn params_mut(&mut self) -> &mut ParamVector;
    fn bind(&self, g: &mut Graph<'_>) -> Result<Self::Bound>;
    fn reward_var(&self, g: &mut Graph<'_>, bound: &Self::Bound, prompt: &[TokenId], completion: &[TokenId]) -> Result<Var>;
}

/// Synthetic reward: coverage of the prompt's tokens, minus a penalty for
/// running past a target length, plus a per-token length bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthReward {
    pub key_token_weight: f64,
    /// Per token beyond `target_length`.
    pub length_penalty: f64,
    pub target_length: usize,
    /// Per token of `|y|`; a positive value plants a length confound.
    pub length_bias: f64,
}

impl Default for GroundTruthReward {
    fn default() -> Self {
        Self {
            key_token_weight: 1.0,
            length_penalty: 0.5,
            target_length: 6,
            length_bias: 0.0,
        }
    }
}

impl GroundTruthReward {
    /// Distinct prompt tokens that also occur in the completion.
    pub fn coverage(prompt: &[TokenId], completion: &[TokenId]) -> usize {
        let keys: BTreeSet<TokenId> = prompt.iter().copied().collect();
        let seen: BTreeSet<TokenId> = completion.iter().copied().collect();
        keys.intersection(&seen).count()
    }

    pub fn true_reward(&self, prompt: &[TokenId], completion: &[TokenId]) -> f64 {
        let len = completion.len();
        self.key_token_weight * Self::coverage(prompt, completion) as f64
            - self.length_penalty * len.saturating_sub(self.target_length) as f64
            + self.length_bias * len as f64
    }
}

impl RewardFunction for GroundTruthReward {
    fn reward(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64> {
        Ok(self.true_reward(prompt, completion))
    }
}

/// Transformer encoder with a scalar head on the final position.
///
/// The head starts at zero, so an untrained model scores everything 0.
#[derive(Clone, Debug)]
pub struct RewardModel {
    space: SequenceSpace,
    encoder: Transformer,
    head_w: usize,
    head_b: usize,
    params: ParamVector,
}

pub struct RewardBound {
    encoder: BoundTransformer,
    head_w: Var,
    head_b: Var,
}

impl RewardModel {
    pub fn new(space: SequenceSpace, config: TransformerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamVector::builder();
        let encoder = Transformer::build(config, space.vocab.n_symbols() + 1, &mut b, &mut rng)?;
        let head_w = b.push("rm_head_w", config.d_model, Init::Zeros, &mut rng);
        let head_b = b.push("rm_head_b", 1, Init::Zeros, &mut rng);
        Ok(Self {
            space,
            encoder,
            head_w,
            head_b,
            params: b.build(),
        })
    }

    pub fn from_params(space: SequenceSpace, config: TransformerConfig, params: ParamVector) -> Result<Self> {
        let mut rm = Self::new(space, config, 0)?;
        if rm.params.blocks() != params.blocks() {
            return Err(Error::Shape("parameter layout does not match the reward model".into()));
        }
        rm.params = params;
        Ok(rm)
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn config(&self) -> &TransformerConfig {
        self.encoder.config()
    }

    /// Add `c` to every score (through the head bias).
    pub fn shift(&mut self, c: f64) {
        let off = self.head_b;
        self.params.values_mut()[off] += c;
    }

    pub fn rm_score(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new(self.params.values());
        let bound = self.bind(&mut g)?;
        let v = self.reward_var(&mut g, &bound, prompt, completion)?;
        Ok(g.scalar_value(v))
    }
}

impl TrainableReward for RewardModel {
    type Bound = RewardBound;

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn bind(&self, g: &mut Graph<'_>) -> Result<RewardBound> {
        if g.n_params() != self.params.len() {
            return Err(Error::Shape(format!(
                "graph has {} parameters, reward model needs {}",
                g.n_params(),
                self.params.len()
            )));
        }
        Ok(RewardBound {
            encoder: self.encoder.bind(g)?,
            head_w: g.param(self.head_w, self.config().d_model, 1)?,
            head_b: g.param(self.head_b, 1, 1)?,
        })
    }

    fn reward_var(&self, g: &mut Graph<'_>, bound: &RewardBound, prompt: &[TokenId], completion: &[TokenId]) -> Result<Var> {
        self.space.validate_prompt(prompt)?;
        self.space.validate_completion(completion)?;
        let sep = self.space.vocab.n_symbols();
        let inputs: Vec<usize> = prompt
            .iter()
            .map(|&t| t as usize)
            .chain(std::iter::once(sep))
            .chain(completion.iter().map(|&t| t as usize))
            .collect();
        let hidden = self.encoder.forward(g, &bound.encoder, &inputs)?;
        let last = g.slice_rows(hidden, inputs.len() - 1, 1)?;
        let s = g.matmul(last, bound.head_w)?;
        g.add(s, bound.head_b)
    }
}

impl RewardFunction for RewardModel {
    fn reward(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64> {
        self.rm_score(prompt, completion)
    }
}

/// One free reward value per (prompt, completion) of an enumerable space.
#[derive(Clone, Debug)]
pub struct TabularReward {
    space: SequenceSpace,
    prompts: Vec<Vec<TokenId>>,
    params: ParamVector,
}

impl TabularReward {
    pub fn new(space: SequenceSpace, prompts: Vec<Vec<TokenId>>, values: Vec<f64>) -> Result<Self> {
        let n = space.cardinality() as usize * prompts.len();
        if values.len() != n {
            return Err(Error::Shape(format!("expected {n} reward values, got {}", values.len())));
        }
        Ok(Self {
            space,
            prompts,
            params: ParamVector::new(values),
        })
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn prompts(&self) -> &[Vec<TokenId>] {
        &self.prompts
    }

    fn index(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<usize> {
        let pi = self
            .prompts
            .iter()
            .position(|p| p == prompt)
            .ok_or_else(|| Error::domain(format!("prompt {prompt:?} not in reward table")))?;
        Ok(pi * self.space.cardinality() as usize + self.space.index_of(completion)?)
    }
}

impl TrainableReward for TabularReward {
    type Bound = Var;

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn bind(&self, g: &mut Graph<'_>) -> Result<Var> {
        g.param(0, self.params.len(), 1)
    }

    fn reward_var(&self, g: &mut Graph<'_>, bound: &Var, prompt: &[TokenId], completion: &[TokenId]) -> Result<Var> {
        let i = self.index(prompt, completion)?;
        g.gather(*bound, vec![(i, 0)])
    }
}

impl RewardFunction for TabularReward {
    fn reward(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64> {
        Ok(self.params.values()[self.index(prompt, completion)?])
    }
}

/// Fraction of examples whose chosen completion scores strictly higher;
/// ties count one half.
pub fn pairwise_accuracy<R: RewardFunction + ?Sized>(scorer: &R, examples: &[PreferenceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::domain("accuracy of an empty set"));
    }
    let mut hits = 0.0;
    for ex in examples {
        let a = scorer.reward(&ex.prompt, &ex.chosen)?;
        let b = scorer.reward(&ex.prompt, &ex.rejected)?;
        hits += if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
    }
    Ok(hits / examples.len() as f64)
}
