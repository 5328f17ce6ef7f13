//! Deterministic attention oracle with a planted layer-depth relevance curve.
//!
//! At layer `l` every query row puts mass `c(l)` uniformly on the relevant
//! set `R` and `1 − c(l)` uniformly on the remaining visual tokens. Query
//! positions receive no mass. Noise multiplies each visual weight by
//! `exp(σ·z)` before renormalising, where `z = ⟨u, x⟩ / √d` for the token's
//! features `x` and a seeded Gaussian direction `u` per layer and head. For
//! background features drawn from a standard normal, `z` is approximately
//! standard normal, and because it depends only on content the same token
//! receives the same perturbation whichever subsequence it appears in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::AttentionRecord;
use super::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transformer::randn;

/// Mass placed on the relevant set, per layer (index 0 is layer 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConcentrationProfile(pub Vec<f64>);

impl ConcentrationProfile {
    pub fn constant(layers: usize, c: f64) -> Self {
        Self(vec![c; layers])
    }

    /// `peak` at `peak_layer`; elsewhere `floor · (1 − |l − peak_layer| / layers)`,
    /// falling linearly with distance from the peak.
    ///
    /// With `floor` at or below the relevant set's uniform share `|R| / M`,
    /// the relevant tokens are only over-weighted at the peak.
    pub fn tent(layers: usize, peak_layer: usize, peak: f64, floor: f64) -> Self {
        Self(
            (1..=layers)
                .map(|l| {
                    if l == peak_layer {
                        peak
                    } else {
                        let dist = l.abs_diff(peak_layer) as f64;
                        floor * (1.0 - dist / layers as f64)
                    }
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> usize {
        self.0.len()
    }

    /// Layer (1-based) with the largest mass; ties go to the lowest layer.
    pub fn peak_layer(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.0.iter().enumerate() {
            if c > self.0[best] {
                best = i;
            }
        }
        best + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub heads: usize,
    /// Global indices of the relevant visual tokens.
    pub relevant: Vec<usize>,
    pub profile: ConcentrationProfile,
    pub noise: f64,
    pub seed: u64,
}

impl PlantedSpec {
    pub fn new(
        heads: usize,
        relevant: Vec<usize>,
        profile: ConcentrationProfile,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            heads,
            relevant,
            profile,
            noise,
            seed,
        };
        spec.validate()?;
        if spec.relevant.is_empty() {
            return Err(Error::Config("relevant set is empty".into()));
        }
        Ok(spec)
    }

    pub fn layers(&self) -> usize {
        self.profile.layers()
    }

    pub fn peak_layer(&self) -> usize {
        self.profile.peak_layer()
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.profile.layers() == 0 {
            return Err(Error::Config(
                "planted spec needs at least one layer and head".into(),
            ));
        }
        if self.profile.0.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(
                "concentration values must lie in [0, 1]".into(),
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!(
                "noise scale {} is invalid",
                self.noise
            )));
        }
        Ok(())
    }

    /// Copy restricted to relevant tokens present in `globals`. The result
    /// may have an empty relevant set, in which case attention is uniform
    /// before noise.
    pub fn restricted_to(&self, globals: &[usize]) -> PlantedSpec {
        let relevant = self
            .relevant
            .iter()
            .copied()
            .filter(|g| globals.binary_search(g).is_ok())
            .collect();
        PlantedSpec {
            relevant,
            ..self.clone()
        }
    }

    /// Seeded noise direction for one layer (1-based) and head.
    fn direction(&self, layer: usize, head: usize, dim: usize) -> Tensor {
        let key = splitmix(
            splitmix(self.seed ^ 0x706c_616e_7465_6421) ^ ((layer as u64) << 32 | head as u64),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        randn(&mut rng, &[dim], 1.0)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Attention record for `seq` under the planted construction.
pub fn planted_forward(spec: &PlantedSpec, seq: &TokenSequence) -> Result<AttentionRecord> {
    spec.validate()?;
    let globals = seq.global_indices();
    let m = globals.len();
    let q = seq.query_len();
    let mut in_r = vec![false; m];
    for &g in &spec.relevant {
        let pos = globals
            .binary_search(&g)
            .map_err(|_| Error::Index(format!("relevant token {g} is not in the sequence")))?;
        in_r[pos] = true;
    }
    let r_count = in_r.iter().filter(|&&b| b).count();
    let d = seq.feature_dim();
    let features = seq.features();

    let mut layers = Vec::with_capacity(spec.layers());
    for (li, &c) in spec.profile.0.iter().enumerate() {
        let base: Vec<f64> = in_r
            .iter()
            .map(|&r| {
                if r_count == 0 || r_count == m {
                    1.0 / m as f64
                } else if r {
                    c / r_count as f64
                } else {
                    (1.0 - c) / (m - r_count) as f64
                }
            })
            .collect();
        let mut heads = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads {
            let mut w = base.clone();
            if spec.noise > 0.0 {
                let u = spec.direction(li + 1, h, d);
                let scale = spec.noise / (d as f64).sqrt();
                for (i, wi) in w.iter_mut().enumerate() {
                    let z: f64 = features
                        .row(i)
                        .iter()
                        .zip(u.data())
                        .map(|(a, b)| a * b)
                        .sum();
                    *wi *= (scale * z).exp();
                }
            }
            let total: f64 = w.iter().sum();
            let mut row = vec![0.0; m + q];
            for (dst, wi) in row.iter_mut().zip(&w) {
                *dst = wi / total;
            }
            let mut data = Vec::with_capacity(q * (m + q));
            for _ in 0..q {
                data.extend_from_slice(&row);
            }
            heads.push(Tensor::new(vec![q, m + q], data)?);
        }
        layers.push(heads);
    }
    AttentionRecord::new(globals, q, layers)
}
