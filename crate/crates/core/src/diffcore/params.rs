use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// A named contiguous run of parameters inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamBlock {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat storage for every trainable parameter of a model.
///
/// The length is fixed at construction; only values change afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    blocks: Vec<ParamBlock>,
}

impl ParamVector {
    /// An unlabeled vector (a single block named `params`).
    pub fn new(values: Vec<f64>) -> Self {
        let len = values.len();
        Self {
            values,
            blocks: vec![ParamBlock {
                name: "params".into(),
                offset: 0,
                len,
            }],
        }
    }

    pub fn builder() -> ParamBuilder {
        ParamBuilder::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// The block containing parameter `index`.
    pub fn block_of(&self, index: usize) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.range().contains(&index))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copy values from `other`, which must have the same length.
    pub fn assign(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.values.len(), "parameter length is immutable");
        self.values.copy_from_slice(values);
    }

    /// Rebuild from serialized parts; fails unless blocks tile the vector.
    pub fn from_parts(values: Vec<f64>, blocks: Vec<ParamBlock>) -> Option<Self> {
        let mut next = 0;
        for b in &blocks {
            if b.offset != next {
                return None;
            }
            next += b.len;
        }
        (next == values.len()).then_some(Self { values, blocks })
    }
}

/// Initialization scheme for a block.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Default)]
pub struct ParamBuilder {
    values: Vec<f64>,
    blocks: Vec<ParamBlock>,
}

impl ParamBuilder {
    /// Append a block and return its offset.
    pub fn push<R: Rng>(&mut self, name: impl Into<String>, len: usize, init: Init, rng: &mut R) -> usize {
        let offset = self.values.len();
        match init {
            Init::Zeros => self.values.resize(offset + len, 0.0),
            Init::Ones => self.values.resize(offset + len, 1.0),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
                self.values.extend((0..len).map(|_| normal.sample(rng)));
            }
        }
        self.blocks.push(ParamBlock {
            name: name.into(),
            offset,
            len,
        });
        offset
    }

    pub fn build(self) -> ParamVector {
        ParamVector {
            values: self.values,
            blocks: self.blocks,
        }
    }
}
