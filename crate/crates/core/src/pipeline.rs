//! Training-free selection: stride-sampled frame sets are scored
//! independently, each keeps its top-k tokens, and the union is re-emitted
//! in temporal order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_layers, planted_forward, relevance_scores, ModelConfig, ModelWeights, PlantedSpec,
    TokenSequence,
};

/// `frames` sampled frames split into sets of at most `max_per_set`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub frames: usize,
    pub max_per_set: usize,
}

impl PartitionSpec {
    pub fn new(frames: usize, max_per_set: usize) -> Result<Self> {
        if frames == 0 || max_per_set == 0 {
            return Err(Error::Config(format!(
                "partition needs frames ≥ 1 and max_per_set ≥ 1, got {frames} and {max_per_set}"
            )));
        }
        Ok(Self {
            frames,
            max_per_set,
        })
    }

    /// `K = ⌈N / S⌉`.
    pub fn set_count(&self) -> usize {
        self.frames.div_ceil(self.max_per_set)
    }
}

/// Set `j` holds frames `i` with `i ≡ j (mod K)`, all 0-based.
pub fn partition_frames(frames: usize, max_per_set: usize) -> Vec<Vec<usize>> {
    if frames == 0 || max_per_set == 0 {
        return Vec::new();
    }
    let k = frames.div_ceil(max_per_set);
    (0..k).map(|j| (j..frames).step_by(k).collect()).collect()
}

/// Global budget, either as a token count or a fraction of the input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Tokens(usize),
    Ratio(f64),
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Ratio(0.0625)
    }
}

impl Budget {
    /// Token count for an input of `total` visual tokens, clamped to
    /// `1..=total`. Ratios are floored.
    pub fn resolve(&self, total: usize) -> Result<usize> {
        let raw = match *self {
            Budget::Tokens(t) => t,
            Budget::Ratio(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::Config(format!("budget ratio {r} outside (0, 1]")));
                }
                (r * total as f64).floor() as usize
            }
        };
        Ok(raw.clamp(1, total.max(1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub budget: Budget,
    /// Largest frame-set size `S`.
    pub max_frames_per_set: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            budget: Budget::default(),
            max_frames_per_set: 64,
        }
    }
}

/// Source of per-token relevance for one frame set.
pub trait Scorer: Sync {
    /// One score per visual token of `seq`, in sequence order.
    fn score(&self, seq: &TokenSequence) -> Result<Vec<f64>>;

    /// Longest sequence (visual + query) the scorer accepts.
    fn context_limit(&self) -> Option<usize> {
        None
    }
}

/// Planted oracle read at one layer, with the relevant set restricted to
/// whatever tokens the frame set contains.
#[derive(Debug, Clone)]
pub struct PlantedScorer {
    pub spec: PlantedSpec,
    pub layer: usize,
}

impl Scorer for PlantedScorer {
    fn score(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let spec = self.spec.restricted_to(&seq.global_indices());
        Ok(relevance_scores(&planted_forward(&spec, seq)?, self.layer)?.values)
    }
}

/// Reference decoder truncated at its reference layer.
#[derive(Debug, Clone)]
pub struct ReferenceScorer {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub layer: usize,
}

impl Scorer for ReferenceScorer {
    fn score(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let out = forward_layers(&self.config, &self.weights, seq, self.layer)?;
        Ok(relevance_scores(&out.record, self.layer)?.values)
    }

    fn context_limit(&self) -> Option<usize> {
        Some(self.config.max_len)
    }
}

/// Scores one frame set after checking it fits the scorer's context.
pub fn score_frame_set(scorer: &dyn Scorer, set: &TokenSequence) -> Result<Vec<f64>> {
    if let Some(limit) = scorer.context_limit() {
        if set.len() > limit {
            return Err(Error::Capacity {
                len: set.len(),
                limit,
            });
        }
    }
    let scores = scorer.score(set)?;
    if scores.len() != set.visual_len() {
        return Err(Error::Invariant(format!(
            "scorer returned {} scores for {} tokens",
            scores.len(),
            set.visual_len()
        )));
    }
    Ok(scores)
}

/// Positions of the `k` largest scores, ties to the lower position, in
/// ascending position order.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Splits `budget` over sets of the given sizes: `⌊budget/K⌋` each, one
/// extra for the first `budget mod K` sets, then any share a set cannot hold
/// moves to the lowest-index sets with room.
pub fn split_budget(budget: usize, set_sizes: &[usize]) -> Result<Vec<usize>> {
    let k = set_sizes.len();
    if k == 0 {
        return Err(Error::Config("no frame sets".into()));
    }
    if budget < k {
        return Err(Error::Config(format!(
            "budget {budget} is smaller than the {k} frame sets"
        )));
    }
    let total: usize = set_sizes.iter().sum();
    let budget = budget.min(total);
    let mut share: Vec<usize> = (0..k)
        .map(|j| budget / k + usize::from(j < budget % k))
        .collect();
    let mut overflow = 0;
    for (s, &cap) in share.iter_mut().zip(set_sizes) {
        if *s > cap {
            overflow += *s - cap;
            *s = cap;
        }
    }
    for (s, &cap) in share.iter_mut().zip(set_sizes) {
        let take = overflow.min(cap - *s);
        *s += take;
        overflow -= take;
    }
    Ok(share)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedToken {
    pub global_index: usize,
    pub score: f64,
    /// 0-based frame-set index.
    pub set: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedTokens {
    pub budget: usize,
    #[serde(rename = "K")]
    pub sets: usize,
    pub per_set_k: Vec<usize>,
    pub selected: Vec<SelectedToken>,
}

impl SelectedTokens {
    pub fn global_indices(&self) -> Vec<usize> {
        self.selected.iter().map(|t| t.global_index).collect()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Union of per-set selections sorted by global index.
pub fn aggregate(per_set: Vec<Vec<SelectedToken>>) -> Result<Vec<SelectedToken>> {
    let mut all: Vec<SelectedToken> = per_set.into_iter().flatten().collect();
    all.sort_by_key(|t| t.global_index);
    if let Some(w) = all
        .windows(2)
        .find(|w| w[0].global_index == w[1].global_index)
    {
        return Err(Error::Invariant(format!(
            "token {} selected by sets {} and {}",
            w[0].global_index, w[0].set, w[1].set
        )));
    }
    Ok(all)
}

struct Plan {
    sets: Vec<TokenSequence>,
    per_set_k: Vec<usize>,
    budget: usize,
}

fn plan(seq: &TokenSequence, spec: &PartitionSpec, cfg: &SelectionConfig) -> Result<Plan> {
    if cfg.max_frames_per_set != spec.max_per_set {
        return Err(Error::Config(format!(
            "selection config uses S = {} but the partition uses S = {}",
            cfg.max_frames_per_set, spec.max_per_set
        )));
    }
    let frames = seq.frame_count();
    if frames != spec.frames {
        return Err(Error::Config(format!(
            "partition expects {} frames, sequence has {frames}",
            spec.frames
        )));
    }
    let sets = partition_frames(spec.frames, spec.max_per_set)
        .iter()
        .map(|f| seq.select_frames(f))
        .collect::<Result<Vec<_>>>()?;
    let budget = cfg.budget.resolve(seq.visual_len())?;
    let sizes: Vec<usize> = sets.iter().map(TokenSequence::visual_len).collect();
    let per_set_k = split_budget(budget, &sizes)?;
    Ok(Plan {
        sets,
        per_set_k,
        budget,
    })
}

fn select_set(
    scorer: &dyn Scorer,
    set: &TokenSequence,
    j: usize,
    k: usize,
) -> Result<Vec<SelectedToken>> {
    let scores = score_frame_set(scorer, set)?;
    let tokens = set.tokens();
    Ok(select_topk(&scores, k)?
        .into_iter()
        .map(|i| SelectedToken {
            global_index: tokens[i].global,
            score: scores[i],
            set: j,
        })
        .collect())
}

/// Full selection with sets scored in parallel and reduced by set index.
pub fn run_training_free(
    seq: &TokenSequence,
    spec: &PartitionSpec,
    cfg: &SelectionConfig,
    scorer: &dyn Scorer,
) -> Result<SelectedTokens> {
    let p = plan(seq, spec, cfg)?;
    let per_set = p
        .sets
        .par_iter()
        .zip(p.per_set_k.par_iter())
        .enumerate()
        .map(|(j, (set, &k))| select_set(scorer, set, j, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectedTokens {
        budget: p.budget,
        sets: p.sets.len(),
        per_set_k: p.per_set_k,
        selected: aggregate(per_set)?,
    })
}

/// Sequential variant visiting the sets in the given order.
pub fn run_in_set_order(
    seq: &TokenSequence,
    spec: &PartitionSpec,
    cfg: &SelectionConfig,
    scorer: &dyn Scorer,
    order: &[usize],
) -> Result<SelectedTokens> {
    let p = plan(seq, spec, cfg)?;
    let mut seen = vec![false; p.sets.len()];
    let mut per_set = Vec::with_capacity(order.len());
    for &j in order {
        if j >= seen.len() || std::mem::replace(&mut seen[j], true) {
            return Err(Error::InvalidArgument(format!(
                "set order {order:?} is not a permutation"
            )));
        }
        per_set.push(select_set(scorer, &p.sets[j], j, p.per_set_k[j])?);
    }
    if seen.contains(&false) {
        return Err(Error::InvalidArgument(format!(
            "set order {order:?} is not a permutation"
        )));
    }
    Ok(SelectedTokens {
        budget: p.budget,
        sets: p.sets.len(),
        per_set_k: p.per_set_k,
        selected: aggregate(per_set)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_based(sets: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
        sets.into_iter()
            .map(|s| s.into_iter().map(|i| i + 1).collect())
            .collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(
            one_based(partition_frames(10, 4)),
            vec![vec![1, 4, 7, 10], vec![2, 5, 8], vec![3, 6, 9]]
        );
        assert_eq!(partition_frames(3, 5), vec![vec![0, 1, 2]]);
        assert_eq!(
            one_based(partition_frames(6, 3)),
            vec![vec![1, 3, 5], vec![2, 4, 6]]
        );
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[0.1, 0.9, 0.9], 1).unwrap(), vec![1]);
        assert_eq!(select_topk(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_topk(&[1.0, 1.0, 1.0], 3).unwrap(), vec![0, 1, 2]);
        assert!(select_topk(&[1.0], 2).is_err());
        assert!(select_topk(&[1.0], 0).is_err());
    }

    fn tok(g: usize, set: usize) -> SelectedToken {
        SelectedToken {
            global_index: g,
            score: 0.0,
            set,
        }
    }

    #[test]
    fn aggregate_examples() {
        let out = aggregate(vec![vec![tok(1, 0), tok(7, 0)], vec![tok(2, 1), tok(5, 1)]]).unwrap();
        assert_eq!(
            out.iter().map(|t| t.global_index).collect::<Vec<_>>(),
            vec![1, 2, 5, 7]
        );
        assert!(matches!(
            aggregate(vec![vec![tok(1, 0)], vec![tok(1, 1)]]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn budget_split() {
        assert_eq!(split_budget(10, &[8, 8, 8]).unwrap(), vec![4, 3, 3]);
        assert_eq!(split_budget(10, &[2, 8, 8]).unwrap(), vec![2, 5, 3]);
        assert_eq!(split_budget(100, &[2, 3]).unwrap(), vec![2, 3]);
        assert!(matches!(split_budget(2, &[4, 4, 4]), Err(Error::Config(_))));
    }

    #[test]
    fn budget_resolution() {
        assert_eq!(Budget::Ratio(0.0625).resolve(1024).unwrap(), 64);
        assert_eq!(Budget::Tokens(5000).resolve(100).unwrap(), 100);
        assert_eq!(Budget::Ratio(0.001).resolve(10).unwrap(), 1);
        assert!(Budget::Ratio(0.0).resolve(10).is_err());
        assert!(Budget::Ratio(1.5).resolve(10).is_err());
    }

    #[test]
    fn json_shape() {
        let s = SelectedTokens {
            budget: 2,
            sets: 1,
            per_set_k: vec![2],
            selected: vec![tok(3, 0)],
        };
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["K"], 1);
        assert_eq!(v["selected"][0]["global_index"], 3);
    }
}
