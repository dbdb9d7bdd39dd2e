//! Token-averaged cross-entropy, Bradley-Terry, and the contrastive direct
//! alignment loss `h(beta * (r+ - r-))`, with `r` either the sequence
//! log-ratio against the reference or that log-ratio divided by `|y|`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{self, sigmoid, softplus, Graph, ScalarFn, Tensor, Var};
use crate::error::{Error, Result};
use crate::operators::ExplicitDistribution;
use crate::policy::{Policy, Sequence, SequenceSpace, TokenId};
use crate::reward::{RewardFunction, TrainableReward};

/// Convex classifier `h` of the contrastive loss.
#[derive(Clone)]
pub enum HSpec {
    /// -ln sigma(z)
    Dpo,
    /// (1/2 - z)^2
    Ipo,
    /// max(0, 1 - z), derivative 0 at the kink
    Slic,
    /// Caller-supplied value and derivative.
    Custom { name: String, f: ScalarFn },
}

impl fmt::Debug for HSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PartialEq for HSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

impl HSpec {
    pub fn custom(name: impl Into<String>, f: impl Fn(f64) -> (f64, f64) + Send + Sync + 'static) -> Self {
        HSpec::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "dpo" => Ok(HSpec::Dpo),
            "ipo" => Ok(HSpec::Ipo),
            "slic" => Ok(HSpec::Slic),
            other => Err(Error::Config(format!("unknown classifier `{other}` (dpo | ipo | slic)"))),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            HSpec::Dpo => "dpo",
            HSpec::Ipo => "ipo",
            HSpec::Slic => "slic",
            HSpec::Custom { name, .. } => name,
        }
    }

    /// `(h(z), h'(z))`.
    pub fn eval(&self, z: f64) -> (f64, f64) {
        match self {
            HSpec::Dpo => (softplus(-z), sigmoid(z) - 1.0),
            HSpec::Ipo => ((0.5 - z).powi(2), 2.0 * (z - 0.5)),
            HSpec::Slic => {
                if z < 1.0 {
                    (1.0 - z, -1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            HSpec::Custom { f, .. } => f(z),
        }
    }

    /// Record `h` elementwise on `z`.
    pub fn apply(&self, g: &mut Graph<'_>, z: Var) -> Var {
        match self {
            HSpec::Dpo => {
                let nz = g.neg(z);
                g.softplus(nz)
            }
            HSpec::Ipo => {
                let nz = g.neg(z);
                let d = g.shift(nz, 0.5);
                g.square(d)
            }
            HSpec::Slic => {
                let nz = g.neg(z);
                let d = g.shift(nz, 1.0);
                g.relu(d)
            }
            HSpec::Custom { f, .. } => g.custom(z, "custom_h", f.clone()),
        }
    }

    /// Midpoint convexity on the given pairs: `h((a+b)/2) <= (h(a)+h(b))/2`.
    pub fn midpoint_convex_on(&self, pairs: &[(f64, f64)]) -> bool {
        pairs.iter().all(|&(a, b)| {
            let mid = self.eval(0.5 * (a + b)).0;
            mid <= 0.5 * (self.eval(a).0 + self.eval(b).0) + 1e-12
        })
    }
}

/// `h(z)` and `h'(z)`.
pub fn h_eval(spec: &HSpec, z: f64) -> (f64, f64) {
    spec.eval(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub h: HSpec,
    pub beta: f64,
    /// Divide each log-ratio by its completion length.
    pub averaging: bool,
}

impl LossConfig {
    pub fn new(h: HSpec, beta: f64, averaging: bool) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::domain(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { h, beta, averaging })
    }

    /// `dpo`, `dpo_avg`, `ipo`, `ipo_avg`, `slic`, `slic_avg`.
    pub fn from_algorithm(algo: &str, beta: f64) -> Result<Self> {
        let (name, avg) = match algo.strip_suffix("_avg") {
            Some(base) => (base, true),
            None => (algo, false),
        };
        Self::new(HSpec::from_name(name)?, beta, avg)
    }

    pub fn algorithm(&self) -> String {
        if self.averaging {
            format!("{}_avg", self.h.name())
        } else {
            self.h.name().to_string()
        }
    }
}

/// `(x, y+, y-)` with `y+` preferred.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl PreferenceExample {
    pub fn new(prompt: Vec<TokenId>, chosen: Vec<TokenId>, rejected: Vec<TokenId>, space: &SequenceSpace) -> Result<Self> {
        let ex = Self {
            prompt,
            chosen,
            rejected,
        };
        ex.validate(space)?;
        Ok(ex)
    }

    pub fn validate(&self, space: &SequenceSpace) -> Result<()> {
        space.validate_prompt(&self.prompt)?;
        space.validate_completion(&self.chosen)?;
        space.validate_completion(&self.rejected)?;
        if self.chosen == self.rejected {
            return Err(Error::domain("chosen and rejected completions are identical"));
        }
        Ok(())
    }

    pub fn chosen_seq(&self) -> Sequence {
        Sequence {
            prompt: self.prompt.clone(),
            completion: self.chosen.clone(),
        }
    }

    pub fn rejected_seq(&self) -> Sequence {
        Sequence {
            prompt: self.prompt.clone(),
            completion: self.rejected.clone(),
        }
    }

    /// Swap chosen and rejected.
    pub fn flipped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
        }
    }
}

fn non_empty<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    Ok(())
}

fn column(g: &mut Graph<'_>, values: Vec<f64>) -> Var {
    let n = values.len();
    g.constant(Tensor::new(n, 1, values))
}

/// Mean over the batch of `-(1/|y|) ln pi(y | x)`.
pub fn xe_loss_var<P: Policy>(g: &mut Graph<'_>, policy: &P, bound: &P::Bound, batch: &[Sequence]) -> Result<Var> {
    non_empty(batch)?;
    g.enter_scope("xe_loss");
    let mut terms = Vec::with_capacity(batch.len());
    for seq in batch {
        let lp = policy.log_prob_var(g, bound, seq)?;
        terms.push(g.scale(lp, -1.0 / seq.len() as f64));
    }
    let col = g.concat_rows(&terms)?;
    let out = g.mean(col);
    g.exit_scope();
    Ok(out)
}

pub fn xe_loss<P: Policy>(policy: &P, batch: &[Sequence]) -> Result<f64> {
    diffcore::value(
        |g| {
            let b = policy.bind(g)?;
            xe_loss_var(g, policy, &b, batch)
        },
        policy.params(),
    )
}

/// Mean of `-ln sigma(R(x, y+) - R(x, y-))`, computed as a softplus.
pub fn bt_loss_var<R: TrainableReward>(g: &mut Graph<'_>, rm: &R, bound: &R::Bound, batch: &[PreferenceExample]) -> Result<Var> {
    non_empty(batch)?;
    g.enter_scope("bt_loss");
    let mut margins = Vec::with_capacity(batch.len());
    for ex in batch {
        let a = rm.reward_var(g, bound, &ex.prompt, &ex.chosen)?;
        let b = rm.reward_var(g, bound, &ex.prompt, &ex.rejected)?;
        margins.push(g.sub(a, b)?);
    }
    let m = g.concat_rows(&margins)?;
    let h = HSpec::Dpo.apply(g, m);
    let out = g.mean(h);
    g.exit_scope();
    Ok(out)
}

pub fn bt_loss<R: TrainableReward>(rm: &R, batch: &[PreferenceExample]) -> Result<f64> {
    diffcore::value(
        |g| {
            let b = rm.bind(g)?;
            bt_loss_var(g, rm, &b, batch)
        },
        rm.params(),
    )
}

/// Frozen reference log-probabilities for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceLogProbs {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

impl ReferenceLogProbs {
    pub fn compute<P: Policy>(reference: &P, batch: &[PreferenceExample]) -> Result<Self> {
        let mut chosen = Vec::with_capacity(batch.len());
        let mut rejected = Vec::with_capacity(batch.len());
        for ex in batch {
            for (seq, out) in [(ex.chosen_seq(), &mut chosen), (ex.rejected_seq(), &mut rejected)] {
                let lp = reference.log_prob(&seq)?;
                if !lp.is_finite() {
                    return Err(Error::domain(format!(
                        "reference log-probability of prompt {:?} completion {:?} is {lp}",
                        seq.prompt, seq.completion
                    )));
                }
                out.push(lp);
            }
        }
        Ok(Self { chosen, rejected })
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            chosen: idx.iter().map(|&i| self.chosen[i]).collect(),
            rejected: idx.iter().map(|&i| self.rejected[i]).collect(),
        }
    }
}

/// Mean of `h(beta * (r+ - r-))` with `r = ln(pi / pi_ref)`, divided by
/// `|y|` when averaging. The reference enters as constants.
pub fn direct_loss_var<P: Policy>(
    g: &mut Graph<'_>,
    config: &LossConfig,
    policy: &P,
    bound: &P::Bound,
    batch: &[PreferenceExample],
    reference: &ReferenceLogProbs,
) -> Result<Var> {
    non_empty(batch)?;
    if reference.chosen.len() != batch.len() || reference.rejected.len() != batch.len() {
        return Err(Error::Shape("reference log-probs do not match the batch".into()));
    }
    g.enter_scope(format!("direct_loss[{}]", config.algorithm()));
    let mut lp_c = Vec::with_capacity(batch.len());
    let mut lp_r = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        g.enter_scope(format!("example{i}"));
        lp_c.push(policy.log_prob_var(g, bound, &ex.chosen_seq())?);
        lp_r.push(policy.log_prob_var(g, bound, &ex.rejected_seq())?);
        g.exit_scope();
    }
    let scale = |len: usize| {
        if config.averaging {
            config.beta / len as f64
        } else {
            config.beta
        }
    };
    let lp_c = g.concat_rows(&lp_c)?;
    let lp_r = g.concat_rows(&lp_r)?;
    let ref_c = column(g, reference.chosen.clone());
    let ref_r = column(g, reference.rejected.clone());
    let s_c = column(g, batch.iter().map(|e| scale(e.chosen.len())).collect());
    let s_r = column(g, batch.iter().map(|e| scale(e.rejected.len())).collect());
    let d_c = g.sub(lp_c, ref_c)?;
    let d_r = g.sub(lp_r, ref_r)?;
    let r_c = g.mul(d_c, s_c)?;
    let r_r = g.mul(d_r, s_r)?;
    let z = g.sub(r_c, r_r)?;
    let h = config.h.apply(g, z);
    let out = g.mean(h);
    g.exit_scope();
    Ok(out)
}

pub fn direct_loss<P: Policy, Q: Policy>(config: &LossConfig, policy: &P, reference: &Q, batch: &[PreferenceExample]) -> Result<f64> {
    non_empty(batch)?;
    let refs = ReferenceLogProbs::compute(reference, batch)?;
    diffcore::value(
        |g| {
            let b = policy.bind(g)?;
            direct_loss_var(g, config, policy, &b, batch, &refs)
        },
        policy.params(),
    )
}

/// Per-prompt data for the population loss: the reference distribution
/// and the true reward of every completion in enumeration order.
#[derive(Clone, Debug)]
pub struct PopulationPrompt {
    pub prompt: Vec<TokenId>,
    pub weight: f64,
    pub completions: Vec<Sequence>,
    pub reference_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl PopulationPrompt {
    pub fn new<R: RewardFunction + ?Sized>(reference: &ExplicitDistribution, reward: &R, weight: f64) -> Result<Self> {
        let completions = reference.sequences();
        let rewards = completions
            .iter()
            .map(|s| reward.reward(&s.prompt, &s.completion))
            .collect::<Result<Vec<_>>>()?;
        if reference.log_probs().iter().any(|lp| !lp.is_finite()) {
            return Err(Error::domain("population reference must be strictly positive"));
        }
        Ok(Self {
            prompt: reference.prompt().to_vec(),
            weight,
            completions,
            reference_log_probs: reference.log_probs().to_vec(),
            rewards,
        })
    }
}

/// Expected loss when pairs of distinct completions are drawn uniformly and
/// labeled by the Bradley-Terry probability `sigma(R(y) - R(y'))`:
/// the mean over ordered pairs `(y, y')` of
/// `sigma(R(y) - R(y')) * h(beta * (r(y) - r(y')))`, weighted over prompts.
pub fn population_direct_loss_var<P: Policy>(
    g: &mut Graph<'_>,
    config: &LossConfig,
    policy: &P,
    bound: &P::Bound,
    population: &[PopulationPrompt],
) -> Result<Var> {
    non_empty(population)?;
    let mut per_prompt = Vec::with_capacity(population.len());
    for pp in population {
        let n = pp.completions.len();
        if n < 2 {
            return Err(Error::domain("population loss needs at least two completions per prompt"));
        }
        let mut lps = Vec::with_capacity(n);
        for s in &pp.completions {
            lps.push(policy.log_prob_var(g, bound, s)?);
        }
        let lp = g.concat_rows(&lps)?;
        let reference = column(g, pp.reference_log_probs.clone());
        let d = g.sub(lp, reference)?;
        let scales = column(
            g,
            pp.completions
                .iter()
                .map(|s| if config.averaging { config.beta / s.len() as f64 } else { config.beta })
                .collect(),
        );
        let r = g.mul(d, scales)?;
        let mut left = Vec::with_capacity(n * (n - 1));
        let mut right = Vec::with_capacity(n * (n - 1));
        let mut w = Vec::with_capacity(n * (n - 1));
        let norm = pp.weight / (n * (n - 1)) as f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    left.push((i, 0));
                    right.push((j, 0));
                    w.push(norm * sigmoid(pp.rewards[i] - pp.rewards[j]));
                }
            }
        }
        let a = g.gather(r, left)?;
        let b = g.gather(r, right)?;
        let z = g.sub(a, b)?;
        let h = config.h.apply(g, z);
        let wv = column(g, w);
        let weighted = g.mul(h, wv)?;
        per_prompt.push(g.sum(weighted));
    }
    let all = g.concat_rows(&per_prompt)?;
    Ok(g.sum(all))
}
