//! Vocabularies, terminated sequences and autoregressive policies.
//!
//! A completion always ends with the reserved `eos` symbol and its length
//! `|y|` counts that symbol, so every completion has length at least one.
//! Policies are forced to emit `eos` once a completion prefix reaches
//! `l_max - 1` tokens, which makes each policy a proper distribution over
//! the finite set of completions of a [`SequenceSpace`].

mod context_free;
mod neural;
mod tabular;

pub use context_free::ContextFreePolicy;
pub use neural::{BoundTransformer, NeuralBound, NeuralPolicy, Transformer, TransformerConfig};
pub use tabular::{TabularBound, TabularPolicy};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamVector, Var};
use crate::error::{Error, Result};

/// Default ceiling on the number of sequences [`SequenceSpace::enumerate`]
/// will materialize.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Number of content tokens `V`; ids `0..V`.
    pub n_tokens: u32,
}

impl Vocab {
    pub fn new(n_tokens: u32) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::domain("vocabulary needs at least one content token"));
        }
        Ok(Self { n_tokens })
    }

    pub fn eos(&self) -> TokenId {
        self.n_tokens
    }

    /// Content tokens plus `eos`.
    pub fn n_symbols(&self) -> usize {
        self.n_tokens as usize + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpace {
    pub vocab: Vocab,
    /// Maximum completion length, `eos` included.
    pub l_max: usize,
}

impl SequenceSpace {
    pub fn new(n_tokens: u32, l_max: usize) -> Result<Self> {
        if l_max == 0 {
            return Err(Error::domain("l_max must be at least 1"));
        }
        Ok(Self {
            vocab: Vocab::new(n_tokens)?,
            l_max,
        })
    }

    pub fn eos(&self) -> TokenId {
        self.vocab.eos()
    }

    /// Number of completions: sum over k < l_max of V^k.
    pub fn cardinality(&self) -> u128 {
        let v = self.vocab.n_tokens as u128;
        let mut total: u128 = 0;
        let mut pow: u128 = 1;
        for _ in 0..self.l_max {
            total = total.saturating_add(pow);
            pow = pow.saturating_mul(v);
        }
        total
    }

    /// Check a prompt: content tokens only.
    pub fn validate_prompt(&self, prompt: &[TokenId]) -> Result<()> {
        if let Some(t) = prompt.iter().find(|&&t| t >= self.vocab.n_tokens) {
            return Err(Error::domain(format!(
                "prompt token {t} is not a content token (V = {})",
                self.vocab.n_tokens
            )));
        }
        Ok(())
    }

    pub fn validate_completion(&self, completion: &[TokenId]) -> Result<()> {
        let eos = self.eos();
        match completion.split_last() {
            None => Err(Error::domain("empty completion (must end with eos)")),
            Some((&last, _)) if last != eos => Err(Error::domain(format!(
                "completion {completion:?} does not end with eos ({eos})"
            ))),
            Some((_, body)) => {
                if let Some(pos) = body.iter().position(|&t| t >= eos) {
                    let what = if body[pos] == eos { "eos" } else { "out-of-vocabulary token" };
                    return Err(Error::domain(format!(
                        "{what} {} at position {pos} of completion {completion:?}",
                        body[pos]
                    )));
                }
                if completion.len() > self.l_max {
                    return Err(Error::domain(format!(
                        "completion length {} exceeds l_max {}",
                        completion.len(),
                        self.l_max
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn validate(&self, seq: &Sequence) -> Result<()> {
        self.validate_prompt(&seq.prompt)?;
        self.validate_completion(&seq.completion)
    }

    /// All completions for `prompt`, in lexicographic order of token ids
    /// (`eos` sorts last).
    pub fn enumerate(&self, prompt: &[TokenId]) -> Result<Vec<Sequence>> {
        self.enumerate_with_cap(prompt, DEFAULT_ENUMERATION_CAP)
    }

    pub fn enumerate_with_cap(&self, prompt: &[TokenId], cap: u128) -> Result<Vec<Sequence>> {
        self.validate_prompt(prompt)?;
        let required = self.cardinality();
        if required > cap {
            return Err(Error::EnumerationCap { required, cap });
        }
        let mut out = Vec::with_capacity(required as usize);
        let mut prefix = Vec::with_capacity(self.l_max);
        self.dfs(prompt, &mut prefix, &mut out);
        Ok(out)
    }

    fn dfs(&self, prompt: &[TokenId], prefix: &mut Vec<TokenId>, out: &mut Vec<Sequence>) {
        if prefix.len() + 1 < self.l_max {
            for t in 0..self.vocab.n_tokens {
                prefix.push(t);
                self.dfs(prompt, prefix, out);
                prefix.pop();
            }
        }
        let mut completion = prefix.clone();
        completion.push(self.eos());
        out.push(Sequence {
            prompt: prompt.to_vec(),
            completion,
        });
    }

    /// Position of a valid completion in [`SequenceSpace::enumerate`] order.
    pub fn index_of(&self, completion: &[TokenId]) -> Result<usize> {
        self.validate_completion(completion)?;
        let v = self.vocab.n_tokens as usize;
        // size of the subtree rooted at a prefix of length k
        let subtree = |k: usize| -> usize {
            let mut total = 0usize;
            let mut pow = 1usize;
            for _ in k..self.l_max {
                total += pow;
                pow *= v;
            }
            total
        };
        let mut idx = 0;
        for (k, &t) in completion[..completion.len() - 1].iter().enumerate() {
            idx += t as usize * subtree(k + 1);
        }
        // within the final subtree, the bare-eos completion sorts after all
        // continuations
        idx += subtree(completion.len() - 1) - 1;
        Ok(idx)
    }
}

/// A prompt together with a terminated completion.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence {
    pub prompt: Vec<TokenId>,
    pub completion: Vec<TokenId>,
}

impl Sequence {
    pub fn new(prompt: Vec<TokenId>, completion: Vec<TokenId>, space: &SequenceSpace) -> Result<Self> {
        let seq = Self { prompt, completion };
        space.validate(&seq)?;
        Ok(seq)
    }

    /// `|y|`, eos included.
    pub fn len(&self) -> usize {
        self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completion.is_empty()
    }
}

/// An autoregressive distribution over the completions of a space.
///
/// Graph methods read weights from the graph's parameter slice rather than
/// from `self.params()`, so a loss built from them can be re-evaluated at
/// perturbed parameters.
pub trait Policy: Send + Sync {
    /// Per-graph handles to the model's weights.
    type Bound;

    fn space(&self) -> &SequenceSpace;
    fn params(&self) -> &ParamVector;
    fn params_mut(&mut self) -> &mut ParamVector;

    fn bind(&self, g: &mut Graph<'_>) -> Result<Self::Bound>;

    /// ln pi(y | x) recorded on `g` as a 1x1 node.
    fn log_prob_var(&self, g: &mut Graph<'_>, bound: &Self::Bound, seq: &Sequence) -> Result<Var>;

    /// Distribution over the `V + 1` symbols after `prefix` (content tokens
    /// only). Deterministic `eos` once the prefix has `l_max - 1` tokens.
    fn next_token_probs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>>;

    /// ln pi(y | x).
    fn log_prob(&self, seq: &Sequence) -> Result<f64> {
        self.space().validate(seq)?;
        let mut g = Graph::new(self.params().values());
        let bound = self.bind(&mut g)?;
        let v = self.log_prob_var(&mut g, &bound, seq)?;
        Ok(g.scalar_value(v))
    }
}

/// ln pi(y | x) / |y|.
pub fn avg_log_prob<P: Policy + ?Sized>(policy: &P, seq: &Sequence) -> Result<f64> {
    Ok(policy.log_prob(seq)? / seq.len() as f64)
}

/// Ancestral sampling with a fresh generator seeded from `seed`.
pub fn sample<P: Policy + ?Sized>(policy: &P, prompt: &[TokenId], seed: u64, temperature: f64) -> Result<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(policy, prompt, &mut rng, temperature)
}

/// Ancestral sampling from temperature-scaled per-step distributions.
pub fn sample_with_rng<P: Policy + ?Sized, R: Rng>(
    policy: &P,
    prompt: &[TokenId],
    rng: &mut R,
    temperature: f64,
) -> Result<Sequence> {
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {temperature}")));
    }
    let space = *policy.space();
    space.validate_prompt(prompt)?;
    let eos = space.eos();
    let mut prefix = Vec::new();
    loop {
        if prefix.len() + 1 >= space.l_max {
            break;
        }
        let mut probs = policy.next_token_probs(prompt, &prefix)?;
        if temperature != 1.0 {
            let inv = 1.0 / temperature;
            probs.iter_mut().for_each(|p| *p = p.powf(inv));
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
        }
        let tok = draw(&probs, rng) as TokenId;
        if tok == eos {
            break;
        }
        prefix.push(tok);
    }
    prefix.push(eos);
    Ok(Sequence {
        prompt: prompt.to_vec(),
        completion: prefix,
    })
}

/// Inverse-CDF draw from a normalized probability vector.
pub(crate) fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // rounding left u above the total; fall back to the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Softmax of a logit row.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub(crate) fn forced_eos(space: &SequenceSpace) -> Vec<f64> {
    let mut p = vec![0.0; space.vocab.n_symbols()];
    p[space.eos() as usize] = 1.0;
    p
}

/// Exact sequence probabilities over the whole space, in enumeration order.
pub fn sequence_probs<P: Policy + ?Sized>(policy: &P, prompt: &[TokenId]) -> Result<Vec<f64>> {
    policy
        .space()
        .enumerate(prompt)?
        .iter()
        .map(|s| policy.log_prob(s).map(f64::exp))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(v: u32, l: usize) -> SequenceSpace {
        SequenceSpace::new(v, l).unwrap()
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(space(2, 3).enumerate(&[]).unwrap().len(), 7);
        assert_eq!(space(3, 4).enumerate(&[0]).unwrap().len(), 40);
        let single = space(1, 1).enumerate(&[]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].completion, vec![1]);
    }

    #[test]
    fn enumeration_is_lexicographic_and_indexable() {
        let sp = space(3, 4);
        let all = sp.enumerate(&[]).unwrap();
        for w in all.windows(2) {
            assert!(w[0].completion < w[1].completion);
        }
        for (i, s) in all.iter().enumerate() {
            assert_eq!(sp.index_of(&s.completion).unwrap(), i);
            assert_eq!(sp.cardinality(), 40);
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let err = space(10, 8).enumerate_with_cap(&[], 1000).unwrap_err();
        match err {
            Error::EnumerationCap { required, cap } => {
                assert_eq!(required, 11_111_111);
                assert_eq!(cap, 1000);
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn sequence_validation() {
        let sp = space(3, 4);
        assert!(Sequence::new(vec![0, 1], vec![2, 3], &sp).is_ok());
        assert!(Sequence::new(vec![], vec![], &sp).is_err());
        assert!(Sequence::new(vec![], vec![0, 1], &sp).is_err());
        assert!(Sequence::new(vec![], vec![3, 0, 3], &sp).is_err());
        assert!(Sequence::new(vec![], vec![0, 0, 0, 0, 3], &sp).is_err());
        assert!(Sequence::new(vec![3], vec![3], &sp).is_err());
        assert!(Sequence::new(vec![], vec![4, 3], &sp).is_err());
    }

    #[test]
    fn draw_handles_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let i = draw(&[0.5, 0.5, 0.0], &mut rng);
            assert!(i < 2);
        }
    }
}
