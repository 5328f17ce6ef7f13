use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Post-softmax attention from every query position, per layer and head.
///
/// Each matrix is `[query_len × (visual_len + query_len)]`: full rows over
/// all positions, visual columns first. Rows sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    globals: Vec<usize>,
    query_len: usize,
    layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn new(globals: Vec<usize>, query_len: usize, layers: Vec<Vec<Tensor>>) -> Result<Self> {
        let width = globals.len() + query_len;
        for (l, heads) in layers.iter().enumerate() {
            if heads.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "layer {} has no heads",
                    l + 1
                )));
            }
            for t in heads {
                if t.shape() != [query_len, width] {
                    return Err(Error::Dimension(format!(
                        "layer {} attention {:?}, expected [{query_len}, {width}]",
                        l + 1,
                        t.shape()
                    )));
                }
            }
        }
        Ok(Self {
            globals,
            query_len,
            layers,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn head_count(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn visual_len(&self) -> usize {
        self.globals.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn globals(&self) -> &[usize] {
        &self.globals
    }

    /// Full attention rows of `head` (0-based) at `layer` (1-based).
    pub fn weights(&self, layer: usize, head: usize) -> Result<&Tensor> {
        self.check_layer(layer)?;
        self.layers[layer - 1]
            .get(head)
            .ok_or_else(|| Error::Index(format!("head {head} of {}", self.head_count())))
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::Index(format!(
                "layer {layer} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Largest deviation of any full row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|t| (0..t.rows()).map(move |i| (t.row(i).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Per-visual-token relevance at one layer, aligned with global indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub globals: Vec<usize>,
    pub values: Vec<f64>,
}

impl RelevanceScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Attention to each visual token averaged over heads and query rows.
pub fn relevance_scores(record: &AttentionRecord, layer: usize) -> Result<RelevanceScores> {
    record.check_layer(layer)?;
    let m = record.visual_len();
    let heads = &record.layers[layer - 1];
    let mut values = vec![0.0; m];
    for t in heads {
        for i in 0..t.rows() {
            for (v, a) in values.iter_mut().zip(&t.row(i)[..m]) {
                *v += a;
            }
        }
    }
    let denom = (heads.len() * record.query_len) as f64;
    for v in &mut values {
        *v /= denom;
    }
    Ok(RelevanceScores {
        globals: record.globals.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_head_single_query_is_identity() {
        let row = Tensor::new(vec![1, 4], vec![0.1, 0.5, 0.2, 0.2]).unwrap();
        let rec = AttentionRecord::new(vec![0, 1, 2], 1, vec![vec![row]]).unwrap();
        let r = relevance_scores(&rec, 1).unwrap();
        assert_eq!(r.values, vec![0.1, 0.5, 0.2]);
        assert_eq!(r.globals, vec![0, 1, 2]);
    }

    #[test]
    fn head_mean() {
        let a = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![0.4, 0.1, 0.5]).unwrap();
        let rec = AttentionRecord::new(vec![7, 9], 1, vec![vec![a, b]]).unwrap();
        let r = relevance_scores(&rec, 1).unwrap();
        assert!((r.values[0] - 0.3).abs() < 1e-15);
        assert!((r.values[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn layer_bounds() {
        let a = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let rec = AttentionRecord::new(vec![0], 1, vec![vec![a]]).unwrap();
        assert!(matches!(relevance_scores(&rec, 0), Err(Error::Index(_))));
        assert!(matches!(relevance_scores(&rec, 2), Err(Error::Index(_))));
    }
}
