use super::{forced_eos, softmax, Policy, Sequence, SequenceSpace, TokenId};
use crate::diffcore::{Graph, ParamVector, Var};
use crate::error::{Error, Result};

/// The same next-symbol distribution at every step, whatever the context.
///
/// Used as a cheap base generator for synthetic corpora on spaces far too
/// large for a tabular policy.
#[derive(Clone, Debug)]
pub struct ContextFreePolicy {
    space: SequenceSpace,
    params: ParamVector,
}

impl ContextFreePolicy {
    pub fn from_logits(space: SequenceSpace, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != space.vocab.n_symbols() {
            return Err(Error::Shape(format!(
                "expected {} logits, got {}",
                space.vocab.n_symbols(),
                logits.len()
            )));
        }
        Ok(Self {
            space,
            params: ParamVector::new(logits),
        })
    }

    /// Uniform over content tokens, `eos` with probability `eos_prob`.
    pub fn with_eos_prob(space: SequenceSpace, eos_prob: f64) -> Result<Self> {
        if !(eos_prob > 0.0 && eos_prob < 1.0) {
            return Err(Error::domain(format!("eos probability must be in (0, 1), got {eos_prob}")));
        }
        let v = space.vocab.n_tokens as f64;
        let mut logits = vec![0.0; space.vocab.n_symbols()];
        logits[space.eos() as usize] = (eos_prob * v / (1.0 - eos_prob)).ln();
        Self::from_logits(space, logits)
    }

    /// Every symbol (eos included) equiprobable.
    pub fn token_uniform(space: SequenceSpace) -> Self {
        Self {
            space,
            params: ParamVector::new(vec![0.0; space.vocab.n_symbols()]),
        }
    }
}

impl Policy for ContextFreePolicy {
    type Bound = Var;

    fn space(&self) -> &SequenceSpace {
        &self.space
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn bind(&self, g: &mut Graph<'_>) -> Result<Var> {
        let logits = g.param(0, 1, self.space.vocab.n_symbols())?;
        Ok(g.log_softmax(logits))
    }

    fn log_prob_var(&self, g: &mut Graph<'_>, bound: &Var, seq: &Sequence) -> Result<Var> {
        self.space.validate(seq)?;
        let steps = seq.len().min(self.space.l_max - 1);
        if steps == 0 {
            return Ok(g.scalar(0.0));
        }
        let idx = seq.completion[..steps].iter().map(|&t| (0, t as usize)).collect();
        let picked = g.gather(*bound, idx)?;
        Ok(g.sum(picked))
    }

    fn next_token_probs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.space.validate_prompt(prompt)?;
        if prefix.len() + 1 >= self.space.l_max {
            return Ok(forced_eos(&self.space));
        }
        Ok(softmax(self.params.values()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::sequence_probs;

    #[test]
    fn eos_probability_is_respected() {
        let space = SequenceSpace::new(4, 10).unwrap();
        let p = ContextFreePolicy::with_eos_prob(space, 0.2).unwrap();
        let probs = p.next_token_probs(&[], &[]).unwrap();
        assert!((probs[4] - 0.2).abs() < 1e-12);
        assert!((probs[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn normalized_over_space() {
        let space = SequenceSpace::new(3, 5).unwrap();
        let p = ContextFreePolicy::with_eos_prob(space, 0.3).unwrap();
        let total: f64 = sequence_probs(&p, &[0]).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
