use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forced_eos, softmax, Policy, Sequence, SequenceSpace, TokenId};
use crate::diffcore::{Graph, Init, ParamVector, Var};
use crate::error::{Error, Result};

/// One logit row per (prompt, completion prefix) context.
///
/// Contexts whose prefix already has `l_max - 1` tokens are forced to `eos`
/// and carry no parameters. Because every prefix has its own row, the
/// policy can represent any positive distribution over the space.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    space: SequenceSpace,
    prompts: Vec<Vec<TokenId>>,
    params: ParamVector,
}

/// Handle to the row-normalized log-probability table.
pub struct TabularBound {
    log_probs: Option<Var>,
}

impl TabularPolicy {
    /// Number of free contexts per prompt: prefixes of length `< l_max - 1`.
    pub fn contexts_per_prompt(space: &SequenceSpace) -> usize {
        let v = space.vocab.n_tokens as usize;
        let mut total = 0;
        let mut pow = 1;
        for _ in 0..space.l_max.saturating_sub(1) {
            total += pow;
            pow *= v;
        }
        total
    }

    fn with_init(space: SequenceSpace, prompts: Vec<Vec<TokenId>>, init: Init, seed: u64) -> Result<Self> {
        for p in &prompts {
            space.validate_prompt(p)?;
        }
        let mut sorted = prompts.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != prompts.len() {
            return Err(Error::domain("duplicate prompt in tabular policy"));
        }
        let width = Self::contexts_per_prompt(&space) * space.vocab.n_symbols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamVector::builder();
        for i in 0..prompts.len() {
            b.push(format!("prompt{i}"), width, init, &mut rng);
        }
        Ok(Self {
            space,
            prompts,
            params: b.build(),
        })
    }

    /// All logits zero: every symbol equiprobable at every free step.
    pub fn uniform(space: SequenceSpace, prompts: Vec<Vec<TokenId>>) -> Result<Self> {
        Self::with_init(space, prompts, Init::Zeros, 0)
    }

    /// Logits drawn i.i.d. from N(0, std^2).
    pub fn random(space: SequenceSpace, prompts: Vec<Vec<TokenId>>, std: f64, seed: u64) -> Result<Self> {
        Self::with_init(space, prompts, Init::Normal(std), seed)
    }

    /// Exact chain-rule factorization of a positive distribution per prompt.
    ///
    /// `probs[i]` lists sequence probabilities for `prompts[i]` in
    /// enumeration order. The logit of symbol `s` after prefix `p` is the log
    /// of the probability mass below `p·s`, relative to the mass below `p`.
    pub fn from_sequence_probs(space: SequenceSpace, prompts: Vec<Vec<TokenId>>, probs: &[Vec<f64>]) -> Result<Self> {
        if probs.len() != prompts.len() {
            return Err(Error::domain("one probability vector per prompt required"));
        }
        let mut policy = Self::uniform(space, prompts)?;
        let n_seq = space.cardinality() as usize;
        let v = space.vocab.n_tokens as usize;
        let ns = space.vocab.n_symbols();
        let width = Self::contexts_per_prompt(&space) * ns;
        let seqs = space.enumerate(&[])?;
        for (pi, dist) in probs.iter().enumerate() {
            if dist.len() != n_seq {
                return Err(Error::domain(format!(
                    "prompt {pi}: expected {n_seq} probabilities, got {}",
                    dist.len()
                )));
            }
            if dist.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                return Err(Error::domain(format!("prompt {pi}: probabilities must be strictly positive")));
            }
            // mass of every prefix, accumulated over its completions
            let mut mass = vec![0.0; Self::contexts_per_prompt(&space)];
            let mut eos_mass = vec![0.0; mass.len()];
            let mut child_mass = vec![0.0; mass.len() * v];
            for (s, &p) in seqs.iter().zip(dist) {
                let content = &s.completion[..s.len() - 1];
                for k in 0..content.len().min(space.l_max - 1) {
                    let ctx = context_index(&space, &content[..k]);
                    mass[ctx] += p;
                    child_mass[ctx * v + content[k] as usize] += p;
                }
                if content.len() < space.l_max - 1 {
                    let ctx = context_index(&space, content);
                    mass[ctx] += p;
                    eos_mass[ctx] += p;
                }
            }
            let row = &mut policy.params.values_mut()[pi * width..(pi + 1) * width];
            for ctx in 0..mass.len() {
                let lz = mass[ctx].ln();
                for t in 0..v {
                    row[ctx * ns + t] = child_mass[ctx * v + t].ln() - lz;
                }
                row[ctx * ns + v] = eos_mass[ctx].ln() - lz;
            }
        }
        Ok(policy)
    }

    /// Load saved logits into the layout for `prompts`.
    pub fn from_params(space: SequenceSpace, prompts: Vec<Vec<TokenId>>, params: ParamVector) -> Result<Self> {
        let mut policy = Self::uniform(space, prompts)?;
        if policy.params.blocks() != params.blocks() {
            return Err(Error::Shape("parameter layout does not match the tabular policy".into()));
        }
        policy.params = params;
        Ok(policy)
    }

    pub fn prompts(&self) -> &[Vec<TokenId>] {
        &self.prompts
    }

    pub fn prompt_index(&self, prompt: &[TokenId]) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p == prompt)
            .ok_or_else(|| Error::domain(format!("prompt {prompt:?} is not covered by this tabular policy")))
    }

    /// Offset of the logit row for `prefix` under `prompt`.
    fn row_offset(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<usize> {
        let pi = self.prompt_index(prompt)?;
        let ns = self.space.vocab.n_symbols();
        let per_prompt = Self::contexts_per_prompt(&self.space);
        Ok((pi * per_prompt + context_index(&self.space, prefix)) * ns)
    }
}

/// Index of a content prefix among the free contexts of one prompt:
/// shorter prefixes first, then base-V order.
fn context_index(space: &SequenceSpace, prefix: &[TokenId]) -> usize {
    let v = space.vocab.n_tokens as usize;
    let mut offset = 0;
    let mut pow = 1;
    for _ in 0..prefix.len() {
        offset += pow;
        pow *= v;
    }
    offset + prefix.iter().fold(0usize, |acc, &t| acc * v + t as usize)
}

impl Policy for TabularPolicy {
    type Bound = TabularBound;

    fn space(&self) -> &SequenceSpace {
        &self.space
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn bind(&self, g: &mut Graph<'_>) -> Result<TabularBound> {
        if g.n_params() != self.params.len() {
            return Err(Error::Shape(format!(
                "graph has {} parameters, tabular policy needs {}",
                g.n_params(),
                self.params.len()
            )));
        }
        if self.params.is_empty() {
            return Ok(TabularBound { log_probs: None });
        }
        let ns = self.space.vocab.n_symbols();
        let logits = g.param(0, self.params.len() / ns, ns)?;
        Ok(TabularBound {
            log_probs: Some(g.log_softmax(logits)),
        })
    }

    fn log_prob_var(&self, g: &mut Graph<'_>, bound: &TabularBound, seq: &Sequence) -> Result<Var> {
        self.space.validate(seq)?;
        let ns = self.space.vocab.n_symbols();
        let steps = seq.len().min(self.space.l_max - 1);
        let Some(table) = bound.log_probs.filter(|_| steps > 0) else {
            return Ok(g.scalar(0.0));
        };
        let content = &seq.completion;
        let mut idx = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = self.row_offset(&seq.prompt, &content[..t])? / ns;
            idx.push((row, content[t] as usize));
        }
        let picked = g.gather(table, idx)?;
        Ok(g.sum(picked))
    }

    fn next_token_probs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        if prefix.len() + 1 >= self.space.l_max {
            self.prompt_index(prompt)?;
            return Ok(forced_eos(&self.space));
        }
        let ns = self.space.vocab.n_symbols();
        let off = self.row_offset(prompt, prefix)?;
        Ok(softmax(&self.params.values()[off..off + ns]))
    }

    fn log_prob(&self, seq: &Sequence) -> Result<f64> {
        self.space.validate(seq)?;
        let mut lp = 0.0;
        for t in 0..seq.len().min(self.space.l_max - 1) {
            let probs = self.next_token_probs(&seq.prompt, &seq.completion[..t])?;
            lp += probs[seq.completion[t] as usize].ln();
        }
        Ok(lp)
    }
}
