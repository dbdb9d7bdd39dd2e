//! Versioned JSON checkpoints for policies and reward models.
//!
//! Floats are written with shortest round-trip formatting, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamVector, Var};
use crate::error::{Error, Result};
use crate::policy::{
    ContextFreePolicy, NeuralBound, NeuralPolicy, Policy, Sequence, SequenceSpace, TabularBound, TabularPolicy, TokenId,
    TransformerConfig,
};
use crate::reward::{RewardModel, TabularReward};
use crate::trainer::TrainState;

pub const FORMAT: &str = "dalign-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Tabular { prompts: Vec<Vec<TokenId>> },
    ContextFree,
    Transformer { config: TransformerConfig },
    RewardTransformer { config: TransformerConfig },
    RewardTable { prompts: Vec<Vec<TokenId>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// `policy` or `reward_model`.
    pub kind: String,
    pub space: SequenceSpace,
    pub architecture: Architecture,
    pub params: ParamVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    fn new(kind: &str, space: SequenceSpace, architecture: Architecture, params: ParamVector) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            space,
            architecture,
            params,
            train_state: None,
        }
    }

    pub fn of_policy(policy: &AnyPolicy) -> Self {
        let arch = match policy {
            AnyPolicy::Tabular(p) => Architecture::Tabular {
                prompts: p.prompts().to_vec(),
            },
            AnyPolicy::Neural(p) => Architecture::Transformer { config: *p.config() },
            AnyPolicy::ContextFree(_) => Architecture::ContextFree,
        };
        Self::new("policy", *policy.space(), arch, policy.params().clone())
    }

    pub fn of_reward_model(rm: &RewardModel) -> Self {
        use crate::reward::TrainableReward;
        Self::new(
            "reward_model",
            *rm.space(),
            Architecture::RewardTransformer { config: *rm.config() },
            rm.params().clone(),
        )
    }

    pub fn of_reward_table(rm: &TabularReward) -> Self {
        use crate::reward::TrainableReward;
        Self::new(
            "reward_model",
            *rm.space(),
            Architecture::RewardTable {
                prompts: rm.prompts().to_vec(),
            },
            rm.params().clone(),
        )
    }

    pub fn with_state(mut self, state: TrainState) -> Self {
        self.train_state = Some(state);
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.params.is_finite() {
            return Err(Error::Numerical("refusing to save non-finite parameters".into()));
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Numerical(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        Ok(ck)
    }

    pub fn into_policy(self) -> Result<AnyPolicy> {
        if self.kind != "policy" {
            return Err(Error::Config(format!("checkpoint holds a {}, not a policy", self.kind)));
        }
        Ok(match self.architecture {
            Architecture::Tabular { prompts } => AnyPolicy::Tabular(TabularPolicy::from_params(self.space, prompts, self.params)?),
            Architecture::Transformer { config } => AnyPolicy::Neural(NeuralPolicy::from_params(self.space, config, self.params)?),
            Architecture::ContextFree => AnyPolicy::ContextFree(ContextFreePolicy::from_logits(self.space, self.params.values().to_vec())?),
            _ => return Err(Error::Config("checkpoint architecture is not a policy".into())),
        })
    }

    pub fn into_reward_model(self) -> Result<RewardModel> {
        match self.architecture {
            Architecture::RewardTransformer { config } if self.kind == "reward_model" => {
                RewardModel::from_params(self.space, config, self.params)
            }
            _ => Err(Error::Config("checkpoint does not hold a transformer reward model".into())),
        }
    }
}

/// Any policy backend behind one type, for code that picks the backend at
/// run time (checkpoints, the command line).
#[derive(Clone, Debug)]
pub enum AnyPolicy {
    Tabular(TabularPolicy),
    Neural(NeuralPolicy),
    ContextFree(ContextFreePolicy),
}

pub enum AnyBound {
    Tabular(TabularBound),
    Neural(NeuralBound),
    ContextFree(Var),
}

impl Policy for AnyPolicy {
    type Bound = AnyBound;

    fn space(&self) -> &SequenceSpace {
        match self {
            AnyPolicy::Tabular(p) => p.space(),
            AnyPolicy::Neural(p) => p.space(),
            AnyPolicy::ContextFree(p) => p.space(),
        }
    }

    fn params(&self) -> &ParamVector {
        match self {
            AnyPolicy::Tabular(p) => p.params(),
            AnyPolicy::Neural(p) => p.params(),
            AnyPolicy::ContextFree(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        match self {
            AnyPolicy::Tabular(p) => p.params_mut(),
            AnyPolicy::Neural(p) => p.params_mut(),
            AnyPolicy::ContextFree(p) => p.params_mut(),
        }
    }

    fn bind(&self, g: &mut Graph<'_>) -> Result<AnyBound> {
        Ok(match self {
            AnyPolicy::Tabular(p) => AnyBound::Tabular(p.bind(g)?),
            AnyPolicy::Neural(p) => AnyBound::Neural(p.bind(g)?),
            AnyPolicy::ContextFree(p) => AnyBound::ContextFree(p.bind(g)?),
        })
    }

    fn log_prob_var(&self, g: &mut Graph<'_>, bound: &AnyBound, seq: &Sequence) -> Result<Var> {
        match (self, bound) {
            (AnyPolicy::Tabular(p), AnyBound::Tabular(b)) => p.log_prob_var(g, b, seq),
            (AnyPolicy::Neural(p), AnyBound::Neural(b)) => p.log_prob_var(g, b, seq),
            (AnyPolicy::ContextFree(p), AnyBound::ContextFree(b)) => p.log_prob_var(g, b, seq),
            _ => Err(Error::Shape("bound does not belong to this policy".into())),
        }
    }

    fn next_token_probs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        match self {
            AnyPolicy::Tabular(p) => p.next_token_probs(prompt, prefix),
            AnyPolicy::Neural(p) => p.next_token_probs(prompt, prefix),
            AnyPolicy::ContextFree(p) => p.next_token_probs(prompt, prefix),
        }
    }

    fn log_prob(&self, seq: &Sequence) -> Result<f64> {
        match self {
            AnyPolicy::Tabular(p) => p.log_prob(seq),
            AnyPolicy::Neural(p) => p.log_prob(seq),
            AnyPolicy::ContextFree(p) => p.log_prob(seq),
        }
    }
}
