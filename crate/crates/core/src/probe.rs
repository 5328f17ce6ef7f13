//! Needle-in-haystack sequences, Recall@K layer profiling and a PCA view of
//! token features.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    planted_forward, relevance_scores, AttentionRecord, ConcentrationProfile, PlantedSpec,
    RelevanceScores, TokenSequence, VisualToken,
};
use crate::numerics::Tensor;
use crate::pipeline::select_topk;
use crate::transformer::randn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaystackSpec {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub needle_frames: usize,
    /// 0-based needle frame indices; drawn from the seed when absent.
    pub needle_positions: Option<Vec<usize>>,
    /// Selects the feature axis the needle is shifted along.
    pub payload: usize,
    /// Query id; defaults to the payload.
    pub query: Option<usize>,
    pub feature_dim: usize,
    pub payload_offset: f64,
    pub seed: u64,
}

impl Default for HaystackSpec {
    fn default() -> Self {
        Self {
            frames: 16,
            tokens_per_frame: 8,
            needle_frames: 1,
            needle_positions: None,
            payload: 0,
            query: None,
            feature_dim: 16,
            payload_offset: 4.0,
            seed: 0,
        }
    }
}

impl HaystackSpec {
    pub fn total_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    /// Token ids of the query: a fixed prefix followed by the query id.
    pub fn query_tokens(&self) -> Vec<usize> {
        vec![0, 1 + self.query.unwrap_or(self.payload)]
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.tokens_per_frame == 0 || self.feature_dim == 0 {
            return Err(Error::Config("haystack sizes must be at least 1".into()));
        }
        if self.needle_frames == 0 || self.needle_frames > self.frames {
            return Err(Error::Config(format!(
                "needle count {} outside 1..={}",
                self.needle_frames, self.frames
            )));
        }
        if self.payload >= self.feature_dim {
            return Err(Error::Config(format!(
                "payload {} needs a feature axis below {}",
                self.payload, self.feature_dim
            )));
        }
        if !self.payload_offset.is_finite() {
            return Err(Error::Config("payload offset must be finite".into()));
        }
        if let Some(pos) = &self.needle_positions {
            let mut sorted = pos.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if pos.len() != self.needle_frames
                || sorted.len() != pos.len()
                || sorted.last().is_some_and(|&f| f >= self.frames)
            {
                return Err(Error::Config(format!(
                    "needle positions {pos:?} must be {} distinct frames below {}",
                    self.needle_frames, self.frames
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Haystack {
    pub sequence: TokenSequence,
    /// Global indices of every needle-frame token, ascending.
    pub relevant: Vec<usize>,
    pub needle_frames: Vec<usize>,
    pub payload: usize,
}

/// Background tokens are standard normal; needle-frame tokens are shifted
/// by `payload_offset` along feature axis `payload`.
pub fn build_haystack(spec: &HaystackSpec) -> Result<Haystack> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut needles = match &spec.needle_positions {
        Some(p) => p.clone(),
        None => sample(&mut rng, spec.frames, spec.needle_frames).into_vec(),
    };
    needles.sort_unstable();

    let (n, t, d) = (spec.frames, spec.tokens_per_frame, spec.feature_dim);
    let mut features = randn(&mut rng, &[n * t, d], 1.0);
    let mut relevant = Vec::with_capacity(needles.len() * t);
    for &f in &needles {
        for s in 0..t {
            let g = f * t + s;
            features.data_mut()[g * d + spec.payload] += spec.payload_offset;
            relevant.push(g);
        }
    }
    let tokens = (0..n * t)
        .map(|g| VisualToken {
            frame: g / t,
            slot: g % t,
            global: g,
        })
        .collect();
    Ok(Haystack {
        sequence: TokenSequence::new(features, tokens, spec.query_tokens())?,
        relevant,
        needle_frames: needles,
        payload: spec.payload,
    })
}

/// A family of haystacks sharing one planted teacher. Sample `i` uses seed
/// `haystack.seed + i` and payload `i mod payloads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedTask {
    pub haystack: HaystackSpec,
    pub payloads: usize,
    pub layers: usize,
    pub heads: usize,
    pub peak_layer: usize,
    /// Mass on the needle tokens at the peak layer.
    pub peak: f64,
    pub noise: f64,
    /// Seed of the teacher's noise directions.
    pub teacher_seed: u64,
}

impl Default for PlantedTask {
    fn default() -> Self {
        Self {
            haystack: HaystackSpec::default(),
            payloads: 5,
            layers: 8,
            heads: 4,
            peak_layer: 5,
            peak: 0.9,
            noise: 0.05,
            teacher_seed: 0,
        }
    }
}

impl PlantedTask {
    pub fn haystack_spec(&self, index: u64) -> HaystackSpec {
        HaystackSpec {
            seed: self.haystack.seed.wrapping_add(index),
            payload: index as usize % self.payloads.max(1),
            ..self.haystack.clone()
        }
    }

    pub fn haystack(&self, index: u64) -> Result<Haystack> {
        build_haystack(&self.haystack_spec(index))
    }

    /// Tent profile peaking at `peak_layer`, with off-peak mass at most the
    /// needles' uniform share.
    pub fn profile(&self) -> ConcentrationProfile {
        let h = &self.haystack;
        let share = (h.needle_frames * h.tokens_per_frame) as f64 / h.total_tokens() as f64;
        ConcentrationProfile::tent(self.layers, self.peak_layer, self.peak, share)
    }

    pub fn teacher(&self, relevant: Vec<usize>) -> Result<PlantedSpec> {
        PlantedSpec::new(
            self.heads,
            relevant,
            self.profile(),
            self.noise,
            self.teacher_seed,
        )
    }

    /// Teacher relevance at the peak layer for one haystack.
    pub fn teacher_scores(&self, h: &Haystack) -> Result<Vec<f64>> {
        let spec = self.teacher(h.relevant.clone())?;
        Ok(relevance_scores(&planted_forward(&spec, &h.sequence)?, self.peak_layer)?.values)
    }
}

/// `|TopK(scores) ∩ R| / |R|`, ties to the lower token position.
pub fn recall_at_k(scores: &RelevanceScores, relevant: &[usize], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::InvalidArgument("relevant set is empty".into()));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "K = {k} outside 1..={}",
            scores.len()
        )));
    }
    let top = select_topk(&scores.values, k)?;
    let hits = top
        .iter()
        .filter(|&&i| relevant.contains(&scores.globals[i]))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Fraction of `relevant` present in `selected` (both global indices).
pub fn needle_recall(selected: &[usize], relevant: &[usize]) -> f64 {
    if relevant.is_empty() {
        return 1.0;
    }
    let hits = relevant.iter().filter(|g| selected.contains(g)).count();
    hits as f64 / relevant.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Recall at layers `1..=L`.
    pub recalls: Vec<f64>,
    pub k: usize,
    pub relevant: Vec<usize>,
    /// 1-based argmax of `recalls`, ties to the lowest layer.
    pub reference_layer: usize,
}

impl ProbeResult {
    /// Rows of `layer,recall,K,is_reference` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,recall,K,is_reference\n");
        for (i, r) in self.recalls.iter().enumerate() {
            let layer = i + 1;
            out.push_str(&format!(
                "{layer},{r},{},{}\n",
                self.k,
                u8::from(layer == self.reference_layer)
            ));
        }
        out
    }
}

pub fn profile_layers(
    record: &AttentionRecord,
    relevant: &[usize],
    k: usize,
) -> Result<ProbeResult> {
    if record.layer_count() == 0 {
        return Err(Error::InvalidArgument("record has no layers".into()));
    }
    let recalls = (1..=record.layer_count())
        .map(|l| recall_at_k(&relevance_scores(record, l)?, relevant, k))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, &r) in recalls.iter().enumerate() {
        if r > recalls[best] {
            best = i;
        }
    }
    Ok(ProbeResult {
        recalls,
        k,
        relevant: relevant.to_vec(),
        reference_layer: best + 1,
    })
}

/// Principal-component projection with the variance of each component.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub points: Tensor,
    pub variances: Vec<f64>,
}

/// Projects mean-centred rows onto the leading eigenvectors of the sample
/// covariance. Each component is signed so its largest-magnitude loading
/// is positive.
pub fn pca(tokens: &Tensor, components: usize) -> Result<Pca> {
    if tokens.shape().len() != 2 || tokens.rows() < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two rows".into()));
    }
    let (n, d) = (tokens.rows(), tokens.cols());
    if components == 0 || components > d {
        return Err(Error::InvalidArgument(format!(
            "{components} components requested from {d} dims"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, tokens.data());
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let total_var = cov.trace();
    if total_var <= 1e-12 * (1.0 + mean.norm_squared()) {
        return Err(Error::Degenerate(
            "token features have zero variance".into(),
        ));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut points = vec![0.0; n * components];
    let mut variances = Vec::with_capacity(components);
    for (c, &idx) in order.iter().take(components).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v = -v;
        }
        let proj = &centred * v;
        for i in 0..n {
            points[i * components + c] = proj[i];
        }
        variances.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(Pca {
        points: Tensor::new(vec![n, components], points)?,
        variances,
    })
}

pub fn pca_project(tokens: &Tensor, components: usize) -> Result<Tensor> {
    Ok(pca(tokens, components)?.points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(values: Vec<f64>) -> RelevanceScores {
        RelevanceScores {
            globals: (0..values.len()).collect(),
            values,
        }
    }

    #[test]
    fn haystack_indices() {
        let h = build_haystack(&HaystackSpec {
            frames: 4,
            tokens_per_frame: 2,
            needle_positions: Some(vec![2]),
            ..Default::default()
        })
        .unwrap();
        // frame 3 in 1-based terms holds tokens 5 and 6 (1-based)
        assert_eq!(h.relevant, vec![4, 5]);
        assert_eq!(h.sequence.visual_len(), 8);
        assert_eq!(h.sequence.query(), &[0, 1]);
    }

    #[test]
    fn haystack_is_seed_deterministic() {
        let spec = HaystackSpec {
            needle_frames: 3,
            seed: 11,
            ..Default::default()
        };
        assert_eq!(
            build_haystack(&spec).unwrap(),
            build_haystack(&spec).unwrap()
        );
        let other = build_haystack(&HaystackSpec {
            seed: 12,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(other.sequence, build_haystack(&spec).unwrap().sequence);
    }

    #[test]
    fn payload_offset_in_means() {
        let spec = HaystackSpec {
            frames: 250,
            tokens_per_frame: 8,
            needle_frames: 125,
            payload: 3,
            payload_offset: 2.5,
            feature_dim: 8,
            seed: 1,
            ..Default::default()
        };
        let h = build_haystack(&spec).unwrap();
        let f = h.sequence.features();
        let (mut needle, mut bg) = (Vec::new(), Vec::new());
        for i in 0..f.rows() {
            let v = f.get(i, 3);
            if h.relevant.binary_search(&i).is_ok() {
                needle.push(v)
            } else {
                bg.push(v)
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(needle.len() >= 1000 && bg.len() >= 1000);
        // standard error of the difference is about 0.045
        assert!((mean(&needle) - mean(&bg) - 2.5).abs() < 0.2);
    }

    #[test]
    fn invalid_specs() {
        let too_many = HaystackSpec {
            frames: 2,
            needle_frames: 3,
            ..Default::default()
        };
        assert!(matches!(build_haystack(&too_many), Err(Error::Config(_))));
        let dup = HaystackSpec {
            needle_frames: 2,
            needle_positions: Some(vec![1, 1]),
            ..Default::default()
        };
        assert!(build_haystack(&dup).is_err());
    }

    #[test]
    fn recall_examples() {
        let s = scores(vec![0.9, 0.1, 0.8, 0.2]);
        assert_eq!(recall_at_k(&s, &[0, 2], 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&s, &[1, 3], 2).unwrap(), 0.0);
        assert_eq!(recall_at_k(&s, &[0, 1], 2).unwrap(), 0.5);
        assert!(recall_at_k(&s, &[0], 5).is_err());
        assert!(recall_at_k(&s, &[], 1).is_err());
    }

    fn record(profile: ConcentrationProfile) -> (AttentionRecord, Vec<usize>) {
        let h = build_haystack(&HaystackSpec {
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let spec = PlantedSpec::new(2, h.relevant.clone(), profile, 0.0, 0).unwrap();
        (planted_forward(&spec, &h.sequence).unwrap(), h.relevant)
    }

    #[test]
    fn profile_finds_planted_peak() {
        let (rec, r) = record(ConcentrationProfile::tent(8, 5, 1.0, 8.0 / 128.0));
        let p = profile_layers(&rec, &r, r.len()).unwrap();
        assert_eq!(p.reference_layer, 5);
        assert_eq!(p.recalls[4], 1.0);
        assert!(p.to_csv().contains("5,1,8,1\n"));
    }

    #[test]
    fn uniform_profile_ties_to_layer_one() {
        let (rec, r) = record(ConcentrationProfile::constant(6, 8.0 / 128.0));
        let p = profile_layers(&rec, &r, r.len()).unwrap();
        assert!(p.recalls.iter().all(|&x| x == p.recalls[0]));
        assert_eq!(p.reference_layer, 1);
    }

    #[test]
    fn pca_line_and_centring() {
        let data: Vec<f64> = (0..20)
            .flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)])
            .collect();
        let t = Tensor::new(vec![20, 3], data).unwrap();
        let p = pca(&t, 2).unwrap();
        assert!(p.variances[1] < 1e-9 * p.variances[0]);
        for c in 0..2 {
            let mean: f64 = (0..20).map(|i| p.points.get(i, c)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-9);
        }
        assert!(matches!(
            pca(&Tensor::filled(&[5, 3], 2.0), 2),
            Err(Error::Degenerate(_))
        ));
        assert!(pca(&Tensor::zeros(&[1, 3]), 2).is_err());
    }

    #[test]
    fn pca_isotropic_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = randn(&mut rng, &[10_000, 4], 1.0);
        let p = pca(&t, 2).unwrap();
        assert!(
            (p.variances[0] / p.variances[1] - 1.0).abs() < 0.1,
            "{:?}",
            p.variances
        );
    }
}
