use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forced_eos, softmax, Policy, Sequence, SequenceSpace, TokenId};
use crate::diffcore::{Graph, Init, ParamBuilder, ParamVector, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Maximum number of input positions (prompt + separator + completion).
    pub context: usize,
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_blocks: 2,
            n_heads: 2,
            context: 64,
            ffn_mult: 4,
            init_std: 0.02,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.context == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Pre-norm causal transformer encoder. Owns only offsets into a shared
/// [`ParamVector`]; heads are added by the models that embed it.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: TransformerConfig,
    n_inputs: usize,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
}

pub struct BoundBlock {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub struct BoundTransformer {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BoundBlock>,
    lnf_g: Var,
    lnf_b: Var,
}

impl Transformer {
    /// Append the encoder's parameters to `b`.
    pub fn build(config: TransformerConfig, n_inputs: usize, b: &mut ParamBuilder, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let w = Init::Normal(config.init_std);
        let tok_emb = b.push("tok_emb", n_inputs * d, w, rng);
        let pos_emb = b.push("pos_emb", config.context * d, w, rng);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let mut p = |name: &str, len, init| b.push(format!("block{i}.{name}"), len, init, rng);
            blocks.push(BlockLayout {
                ln1_g: p("ln1_g", d, Init::Ones),
                ln1_b: p("ln1_b", d, Init::Zeros),
                wq: p("wq", d * d, w),
                wk: p("wk", d * d, w),
                wv: p("wv", d * d, w),
                wo: p("wo", d * d, w),
                ln2_g: p("ln2_g", d, Init::Ones),
                ln2_b: p("ln2_b", d, Init::Zeros),
                w1: p("w1", d * f, w),
                b1: p("b1", f, Init::Zeros),
                w2: p("w2", f * d, w),
                b2: p("b2", d, Init::Zeros),
            });
        }
        let lnf_g = b.push("lnf_g", d, Init::Ones, rng);
        let lnf_b = b.push("lnf_b", d, Init::Zeros, rng);
        Ok(Self {
            config,
            n_inputs,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> Result<BoundTransformer> {
        let d = self.config.d_model;
        let f = d * self.config.ffn_mult;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for bl in &self.blocks {
            blocks.push(BoundBlock {
                ln1_g: g.param(bl.ln1_g, 1, d)?,
                ln1_b: g.param(bl.ln1_b, 1, d)?,
                wq: g.param(bl.wq, d, d)?,
                wk: g.param(bl.wk, d, d)?,
                wv: g.param(bl.wv, d, d)?,
                wo: g.param(bl.wo, d, d)?,
                ln2_g: g.param(bl.ln2_g, 1, d)?,
                ln2_b: g.param(bl.ln2_b, 1, d)?,
                w1: g.param(bl.w1, d, f)?,
                b1: g.param(bl.b1, 1, f)?,
                w2: g.param(bl.w2, f, d)?,
                b2: g.param(bl.b2, 1, d)?,
            });
        }
        Ok(BoundTransformer {
            tok_emb: g.param(self.tok_emb, self.n_inputs, d)?,
            pos_emb: g.param(self.pos_emb, self.config.context, d)?,
            blocks,
            lnf_g: g.param(self.lnf_g, 1, d)?,
            lnf_b: g.param(self.lnf_b, 1, d)?,
        })
    }

    fn norm(g: &mut Graph<'_>, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let s = g.mul_row(n, gain)?;
        g.add_row(s, bias)
    }

    /// Final hidden states, one row per input position.
    pub fn forward(&self, g: &mut Graph<'_>, bound: &BoundTransformer, tokens: &[usize]) -> Result<Var> {
        let t = tokens.len();
        if t == 0 || t > self.config.context {
            return Err(Error::domain(format!(
                "input of {t} positions does not fit context {}",
                self.config.context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x >= self.n_inputs) {
            return Err(Error::domain(format!("input id {bad} outside embedding table")));
        }
        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tok = g.gather_rows(bound.tok_emb, tokens.to_vec())?;
        let pos = g.slice_rows(bound.pos_emb, 0, t)?;
        let mut x = g.add(tok, pos)?;
        for bl in &bound.blocks {
            let h = Self::norm(g, x, bl.ln1_g, bl.ln1_b)?;
            let q = g.matmul(h, bl.wq)?;
            let k = g.matmul(h, bl.wk)?;
            let v = g.matmul(h, bl.wv)?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for hd in 0..self.config.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale);
                let att = g.causal_softmax(scores)?;
                heads.push(g.matmul(att, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn = g.matmul(cat, bl.wo)?;
            x = g.add(x, attn)?;
            let h2 = Self::norm(g, x, bl.ln2_g, bl.ln2_b)?;
            let up = g.matmul(h2, bl.w1)?;
            let up = g.add_row(up, bl.b1)?;
            let act = g.gelu(up);
            let down = g.matmul(act, bl.w2)?;
            let down = g.add_row(down, bl.b2)?;
            x = g.add(x, down)?;
        }
        Self::norm(g, x, bound.lnf_g, bound.lnf_b)
    }
}

/// Causal transformer language model over `V + 1` output symbols.
///
/// Inputs are the prompt, a separator id `V + 1`, then the completion prefix;
/// the hidden state at each position predicts the next completion symbol.
#[derive(Clone, Debug)]
pub struct NeuralPolicy {
    space: SequenceSpace,
    encoder: Transformer,
    head_w: usize,
    head_b: usize,
    params: ParamVector,
}

pub struct NeuralBound {
    encoder: BoundTransformer,
    head_w: Var,
    head_b: Var,
}

impl NeuralPolicy {
    pub fn new(space: SequenceSpace, config: TransformerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamVector::builder();
        let n_inputs = space.vocab.n_symbols() + 1;
        let encoder = Transformer::build(config, n_inputs, &mut b, &mut rng)?;
        let d = config.d_model;
        let ns = space.vocab.n_symbols();
        let head_w = b.push("head_w", d * ns, Init::Normal(config.init_std), &mut rng);
        let head_b = b.push("head_b", ns, Init::Zeros, &mut rng);
        Ok(Self {
            space,
            encoder,
            head_w,
            head_b,
            params: b.build(),
        })
    }

    /// Rebuild the layout for `config` and load `params` into it.
    pub fn from_params(space: SequenceSpace, config: TransformerConfig, params: ParamVector) -> Result<Self> {
        let mut policy = Self::new(space, config, 0)?;
        if policy.params.blocks() != params.blocks() {
            return Err(Error::Shape("parameter layout does not match the architecture".into()));
        }
        policy.params = params;
        Ok(policy)
    }

    pub fn config(&self) -> &TransformerConfig {
        self.encoder.config()
    }

    fn separator(&self) -> usize {
        self.space.vocab.n_symbols()
    }

    fn inputs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<usize> {
        prompt
            .iter()
            .map(|&t| t as usize)
            .chain(std::iter::once(self.separator()))
            .chain(prefix.iter().map(|&t| t as usize))
            .collect()
    }

    fn logits(&self, g: &mut Graph<'_>, bound: &NeuralBound, hidden: Var) -> Result<Var> {
        let l = g.matmul(hidden, bound.head_w)?;
        g.add_row(l, bound.head_b)
    }
}

impl Policy for NeuralPolicy {
    type Bound = NeuralBound;

    fn space(&self) -> &SequenceSpace {
        &self.space
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn bind(&self, g: &mut Graph<'_>) -> Result<NeuralBound> {
        if g.n_params() != self.params.len() {
            return Err(Error::Shape(format!(
                "graph has {} parameters, neural policy needs {}",
                g.n_params(),
                self.params.len()
            )));
        }
        let d = self.config().d_model;
        let ns = self.space.vocab.n_symbols();
        Ok(NeuralBound {
            encoder: self.encoder.bind(g)?,
            head_w: g.param(self.head_w, d, ns)?,
            head_b: g.param(self.head_b, 1, ns)?,
        })
    }

    fn log_prob_var(&self, g: &mut Graph<'_>, bound: &NeuralBound, seq: &Sequence) -> Result<Var> {
        self.space.validate(seq)?;
        let steps = seq.len().min(self.space.l_max - 1);
        if steps == 0 {
            return Ok(g.scalar(0.0));
        }
        let inputs = self.inputs(&seq.prompt, &seq.completion[..steps]);
        let hidden = self.encoder.forward(g, &bound.encoder, &inputs[..inputs.len() - 1])?;
        let tail = g.slice_rows(hidden, seq.prompt.len(), steps)?;
        let logits = self.logits(g, bound, tail)?;
        let lsm = g.log_softmax(logits);
        let idx = (0..steps).map(|i| (i, seq.completion[i] as usize)).collect();
        let picked = g.gather(lsm, idx)?;
        Ok(g.sum(picked))
    }

    fn next_token_probs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.space.validate_prompt(prompt)?;
        if prefix.len() + 1 >= self.space.l_max {
            return Ok(forced_eos(&self.space));
        }
        let mut g = Graph::new(self.params.values());
        let bound = self.bind(&mut g)?;
        let inputs = self.inputs(prompt, prefix);
        let hidden = self.encoder.forward(&mut g, &bound.encoder, &inputs)?;
        let last = g.slice_rows(hidden, inputs.len() - 1, 1)?;
        let logits = self.logits(&mut g, &bound, last)?;
        Ok(softmax(&g.value(logits).data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::sequence_probs;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            context: 12,
            ffn_mult: 2,
            init_std: 0.5,
        }
    }

    #[test]
    fn step_distributions_are_normalized() {
        let space = SequenceSpace::new(3, 5).unwrap();
        let pol = NeuralPolicy::new(space, tiny(), 1).unwrap();
        for prefix in [vec![], vec![0], vec![2, 1, 0]] {
            let p = pol.next_token_probs(&[1, 2], &prefix).unwrap();
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(pol.next_token_probs(&[1], &[0, 0, 0, 0]).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sequence_probabilities_sum_to_one() {
        let space = SequenceSpace::new(2, 4).unwrap();
        let pol = NeuralPolicy::new(space, tiny(), 5).unwrap();
        let total: f64 = sequence_probs(&pol, &[0, 1]).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_prob_matches_step_probabilities() {
        let space = SequenceSpace::new(3, 5).unwrap();
        let pol = NeuralPolicy::new(space, tiny(), 2).unwrap();
        let s = Sequence::new(vec![2], vec![0, 1, 2, 3], &space).unwrap();
        let mut expected = 0.0;
        for t in 0..s.len() {
            expected += pol.next_token_probs(&s.prompt, &s.completion[..t]).unwrap()[s.completion[t] as usize].ln();
        }
        assert!((pol.log_prob(&s).unwrap() - expected).abs() < 1e-10);
    }

    /// Changing the token at position t leaves the distributions at
    /// positions <= t untouched.
    #[test]
    fn causality() {
        let space = SequenceSpace::new(4, 8).unwrap();
        let pol = NeuralPolicy::new(space, tiny(), 3).unwrap();
        let prompt = [1u32, 3];
        let a = [0u32, 1, 2, 3, 0, 1];
        for t in 0..a.len() {
            let mut b = a;
            b[t] = (a[t] + 1) % 4;
            for pos in 0..=t {
                let pa = pol.next_token_probs(&prompt, &a[..pos]).unwrap();
                let pb = pol.next_token_probs(&prompt, &b[..pos]).unwrap();
                assert_eq!(pa, pb, "position {pos} saw a change at {t}");
            }
            // inside a single forward pass as well
            let mut g = Graph::new(pol.params().values());
            let bound = pol.bind(&mut g).unwrap();
            let ia = pol.inputs(&prompt, &a);
            let ib = pol.inputs(&prompt, &b);
            let ha = pol.encoder.forward(&mut g, &bound.encoder, &ia).unwrap();
            let hb = pol.encoder.forward(&mut g, &bound.encoder, &ib).unwrap();
            let (va, vb) = (g.value(ha).clone(), g.value(hb).clone());
            let cut = prompt.len() + 1 + t; // first row that may see the change
            assert_eq!(va.data[..cut * 8], vb.data[..cut * 8]);
            assert_ne!(va.data[cut * 8..], vb.data[cut * 8..]);
        }
    }

    #[test]
    fn context_overflow_is_a_domain_error() {
        let space = SequenceSpace::new(3, 20).unwrap();
        let pol = NeuralPolicy::new(space, tiny(), 0).unwrap();
        let s = Sequence::new(vec![0; 5], vec![1; 10].into_iter().chain([3]).collect(), &space).unwrap();
        assert!(matches!(pol.log_prob(&s), Err(Error::Domain(_))));
    }

    #[test]
    fn rejects_bad_head_split() {
        let space = SequenceSpace::new(3, 5).unwrap();
        let cfg = TransformerConfig { n_heads: 3, ..tiny() };
        assert!(NeuralPolicy::new(space, cfg, 0).is_err());
    }
}
