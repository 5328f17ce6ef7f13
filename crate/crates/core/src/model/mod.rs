//! Token sequences, cross-modal attention records and the two attention
//! sources: a tiny trainable decoder and a planted oracle.
//!
//! Layers are numbered from 1, matching how reference layers are reported.
//! Token, frame and query positions are 0-based.

mod planted;
mod record;
mod reference;

pub use planted::{planted_forward, ConcentrationProfile, PlantedSpec};
pub use record::{relevance_scores, AttentionRecord, RelevanceScores};
pub use reference::{
    forward_layers, forward_with_attention, train_reference, ForwardOutput, ModelConfig,
    ModelWeights, ReferenceTraining,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Position of one visual token in the video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualToken {
    pub frame: usize,
    /// Index within its frame.
    pub slot: usize,
    /// Index in the full, unpartitioned sequence.
    pub global: usize,
}

/// Visual tokens (features plus positions) followed by query token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    features: Tensor,
    tokens: Vec<VisualToken>,
    query: Vec<usize>,
}

impl TokenSequence {
    pub fn new(features: Tensor, tokens: Vec<VisualToken>, query: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != tokens.len() {
            return Err(Error::Dimension(format!(
                "features {:?} for {} visual tokens",
                features.shape(),
                tokens.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "sequence has no visual tokens".into(),
            ));
        }
        if query.is_empty() {
            return Err(Error::InvalidArgument(
                "sequence has no query tokens".into(),
            ));
        }
        if tokens.windows(2).any(|w| w[0].global >= w[1].global) {
            return Err(Error::InvalidArgument(
                "global indices must be strictly increasing".into(),
            ));
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        Ok(Self {
            features,
            tokens,
            query,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn tokens(&self) -> &[VisualToken] {
        &self.tokens
    }

    pub fn query(&self) -> &[usize] {
        &self.query
    }

    pub fn visual_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn query_len(&self) -> usize {
        self.query.len()
    }

    /// Visual plus query tokens.
    pub fn len(&self) -> usize {
        self.tokens.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn global_indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.global).collect()
    }

    /// One past the largest frame index.
    pub fn frame_count(&self) -> usize {
        self.tokens.iter().map(|t| t.frame + 1).max().unwrap_or(0)
    }

    /// Keeps the visual tokens whose position satisfies `keep`, in order.
    pub fn filter(&self, mut keep: impl FnMut(&VisualToken) -> bool) -> Result<TokenSequence> {
        let d = self.feature_dim();
        let mut data = Vec::new();
        let mut tokens = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if keep(t) {
                data.extend_from_slice(self.features.row(i));
                tokens.push(*t);
            }
        }
        let rows = tokens.len();
        TokenSequence::new(
            Tensor::new(vec![rows, d], data)?,
            tokens,
            self.query.clone(),
        )
    }

    /// Sub-sequence made of the given frames.
    pub fn select_frames(&self, frames: &[usize]) -> Result<TokenSequence> {
        let mut wanted = vec![false; self.frame_count()];
        for &f in frames {
            if f < wanted.len() {
                wanted[f] = true;
            }
        }
        self.filter(|t| wanted[t.frame])
    }

    /// Sub-sequence made of the given global indices (ascending).
    pub fn select_globals(&self, globals: &[usize]) -> Result<TokenSequence> {
        let mut it = globals.iter().peekable();
        self.filter(|t| {
            while it.peek().is_some_and(|&&g| g < t.global) {
                it.next();
            }
            it.peek().is_some_and(|&&g| g == t.global)
        })
    }

    /// Same positions with feature rows reordered: row `i` of the result is
    /// row `perm[i]` of `self`.
    pub fn permute_features(&self, perm: &[usize]) -> Result<TokenSequence> {
        if perm.len() != self.visual_len() {
            return Err(Error::Dimension("permutation length".into()));
        }
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(self.features.numel());
        for &p in perm {
            data.extend_from_slice(self.features.row(p));
        }
        TokenSequence::new(
            Tensor::new(vec![perm.len(), d], data)?,
            self.tokens.clone(),
            self.query.clone(),
        )
    }

    /// Replaces the query token ids.
    pub fn with_query(&self, query: Vec<usize>) -> Result<TokenSequence> {
        TokenSequence::new(self.features.clone(), self.tokens.clone(), query)
    }
}
