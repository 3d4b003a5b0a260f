//! Bounded FIFO of historical mask features and mask tokens.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_CAPACITY: usize = 7;
pub const TOKEN_CAPACITY: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    feature_capacity: usize,
    token_capacity: usize,
    /// `[N_f, C]` of every stored feature.
    feature_shape: Vec<usize>,
    channels: usize,
    features: VecDeque<Tensor>,
    tokens: VecDeque<Tensor>,
}

/// Stacked, age-ordered copy of a bank's contents (oldest first).
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySnapshot {
    /// `[k, N_f, C]`
    pub features: Tensor,
    /// `[m, C]`
    pub tokens: Tensor,
}

impl MemorySnapshot {
    pub fn feature_count(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.feature_count() == 0 && self.token_count() == 0
    }
}

impl MemoryBank {
    /// Bank with the default capacities (7 features, 16 tokens).
    pub fn new(feature_rows: usize, channels: usize) -> Self {
        Self::with_capacity(feature_rows, channels, FEATURE_CAPACITY, TOKEN_CAPACITY)
    }

    pub fn with_capacity(
        feature_rows: usize,
        channels: usize,
        feature_capacity: usize,
        token_capacity: usize,
    ) -> Self {
        Self {
            feature_capacity,
            token_capacity,
            feature_shape: vec![feature_rows, channels],
            channels,
            features: VecDeque::with_capacity(feature_capacity + 1),
            tokens: VecDeque::with_capacity(token_capacity + 1),
        }
    }

    pub fn feature_capacity(&self) -> usize {
        self.feature_capacity
    }

    pub fn token_capacity(&self) -> usize {
        self.token_capacity
    }

    /// `(stored features, stored tokens)`.
    pub fn sizes(&self) -> (usize, usize) {
        (self.features.len(), self.tokens.len())
    }

    pub fn clear(&mut self) {
        self.features.clear();
        self.tokens.clear();
    }

    /// Append one frame's entries, evicting the oldest past capacity.
    pub fn push_frame(&mut self, mask_feature: Tensor, mask_token: Tensor) -> Result<()> {
        if mask_feature.shape() != self.feature_shape.as_slice() {
            return Err(Error::Contract(format!(
                "mask feature shape {:?}, bank stores {:?}",
                mask_feature.shape(),
                self.feature_shape
            )));
        }
        if mask_token.shape() != [1, self.channels] {
            return Err(Error::Contract(format!(
                "mask token shape {:?}, bank stores [1, {}]",
                mask_token.shape(),
                self.channels
            )));
        }
        self.features.push_back(mask_feature);
        self.tokens.push_back(mask_token);
        while self.features.len() > self.feature_capacity {
            self.features.pop_front();
        }
        while self.tokens.len() > self.token_capacity {
            self.tokens.pop_front();
        }
        Ok(())
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        let (rows, c) = (self.feature_shape[0], self.channels);
        let mut fdata = Vec::with_capacity(self.features.len() * rows * c);
        for f in &self.features {
            fdata.extend_from_slice(f.data());
        }
        let mut tdata = Vec::with_capacity(self.tokens.len() * c);
        for t in &self.tokens {
            tdata.extend_from_slice(t.data());
        }
        MemorySnapshot {
            features: Tensor::new(&[self.features.len(), rows, c], fdata).expect("consistent shapes"),
            tokens: Tensor::new(&[self.tokens.len(), c], tdata).expect("consistent shapes"),
        }
    }
}
