//! Analytical prefill cost model.
//!
//! Counts are multiply-accumulates written as `4nd² + 2n²d + 2ndm` per layer,
//! evaluated exactly in `u128`. The per-set attention term `2n²d/K` is
//! floored when `K` does not divide it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsQuery {
    /// Decoder layers `L`.
    pub layers: u64,
    /// Reference layer `M_ref` (1-based).
    pub reference_layer: u64,
    /// Head count; cancels in the formulas and is kept for reporting.
    pub heads: u64,
    pub hidden: u64,
    pub ffn: u64,
    /// Input visual+text tokens `n`.
    pub tokens: u64,
    /// Tokens kept after selection `n′`.
    pub selected: u64,
    /// Frame-set count `K`.
    pub sets: u64,
    pub selector_layers: u64,
    pub selector_hidden: u64,
    pub selector_ffn: u64,
}

impl FlopsQuery {
    pub fn validate(&self) -> Result<()> {
        if self.layers > 0 && (self.reference_layer == 0 || self.reference_layer > self.layers) {
            return Err(Error::Config(format!(
                "reference layer {} outside 1..={}",
                self.reference_layer, self.layers
            )));
        }
        if self.selected > self.tokens {
            return Err(Error::Config(format!(
                "selected tokens {} exceed input tokens {}",
                self.selected, self.tokens
            )));
        }
        if self.sets == 0 {
            return Err(Error::Config("set count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub full: u128,
    pub flexselect: u128,
    /// Dominant-term lite cost `2L′n²d′/K` plus the decoding stage.
    pub lite: u128,
    /// Lite cost with the selector's projection and feed-forward terms.
    pub lite_exact: u128,
    /// Cost of running the full model on the selected tokens only.
    pub stage2: u128,
    pub ratio_exact: f64,
    pub ratio_approx: f64,
}

fn w(x: u64) -> u128 {
    x as u128
}

/// One layer over `n` tokens with attention split across `sets` groups.
fn layer(n: u128, d: u128, m: u128, sets: u128) -> u128 {
    4 * n * d * d + 2 * n * n * d / sets + 2 * n * d * m
}

/// `L·(4nd² + 2n²d + 2ndm)`.
pub fn flops_full(q: &FlopsQuery) -> u128 {
    w(q.layers) * layer(w(q.tokens), w(q.hidden), w(q.ffn), 1)
}

pub fn flops_stage2(q: &FlopsQuery) -> u128 {
    w(q.layers) * layer(w(q.selected), w(q.hidden), w(q.ffn), 1)
}

/// `M_ref·(4nd² + 2n²d/K + 2ndm) + L·(4n′d² + 2n′²d + 2n′dm)`.
pub fn flops_flexselect(q: &FlopsQuery) -> u128 {
    w(q.reference_layer) * layer(w(q.tokens), w(q.hidden), w(q.ffn), w(q.sets)) + flops_stage2(q)
}

/// `2L′n²d′/K + L·(4n′d² + 2n′²d + 2n′dm)`.
pub fn flops_lite(q: &FlopsQuery) -> u128 {
    let n = w(q.tokens);
    2 * w(q.selector_layers) * n * n * w(q.selector_hidden) / w(q.sets) + flops_stage2(q)
}

/// Lite cost with every selector term: `L′·(4nd′² + 2n²d′/K + 2nd′m′)` plus
/// the decoding stage.
pub fn flops_lite_exact(q: &FlopsQuery) -> u128 {
    w(q.selector_layers)
        * layer(
            w(q.tokens),
            w(q.selector_hidden),
            w(q.selector_ffn),
            w(q.sets),
        )
        + flops_stage2(q)
}

/// `(M_ref / L) · (1 / K)`.
pub fn ratio_approx(q: &FlopsQuery) -> f64 {
    if q.layers == 0 {
        return 0.0;
    }
    q.reference_layer as f64 / (q.layers as f64 * q.sets as f64)
}

pub fn flops_report(q: &FlopsQuery) -> Result<FlopsReport> {
    q.validate()?;
    let full = flops_full(q);
    let flexselect = flops_flexselect(q);
    Ok(FlopsReport {
        full,
        flexselect,
        lite: flops_lite(q),
        lite_exact: flops_lite_exact(q),
        stage2: flops_stage2(q),
        ratio_exact: if full == 0 {
            0.0
        } else {
            flexselect as f64 / full as f64
        },
        ratio_approx: ratio_approx(q),
    })
}
