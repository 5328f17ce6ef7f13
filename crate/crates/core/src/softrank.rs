//! Ranking machinery: hard ranks, isotonic regression, soft ranks as a
//! projection onto the permutahedron, Spearman correlation and the rank loss.
//!
//! Ranks are ascending everywhere: the largest score gets rank `M`.
//!
//! The soft rank of `v` is the Euclidean projection of `v / ε` onto the
//! permutahedron spanned by `(1, …, M)`. Sorting `θ = v / ε` in descending
//! order, the projection reduces to a non-increasing isotonic regression of
//! `θ_sorted − (M, …, 1)`; the solution's block structure also gives the
//! Jacobian, which averages gradients within each pooled block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regularisation strength used when none is configured.
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftRankConfig {
    pub epsilon: f64,
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SoftRankConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "soft-rank epsilon must be finite and positive, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }
}

/// Ascending ranks in `[1, M]`; ties share the average of their positions.
pub fn hard_rank(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean(i+1..=j)
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

/// Pool-adjacent-violators solution of
/// `argmin_{o₁ ≤ … ≤ oₙ} ½‖o − y‖²`.
pub fn isotonic_regression(y: &[f64]) -> Vec<f64> {
    let (fit, _) = isotonic_blocks(y);
    fit
}

/// Isotonic fit plus the block id of every coordinate.
fn isotonic_blocks(y: &[f64]) -> (Vec<f64>, Vec<usize>) {
    // (sum, count) per pooled block
    let mut stack: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        let mut cur = (v, 1usize);
        while let Some(&(s, c)) = stack.last() {
            if s / c as f64 > cur.0 / cur.1 as f64 {
                stack.pop();
                cur = (cur.0 + s, cur.1 + c);
            } else {
                break;
            }
        }
        stack.push(cur);
    }
    let mut fit = Vec::with_capacity(y.len());
    let mut block = Vec::with_capacity(y.len());
    for (b, &(s, c)) in stack.iter().enumerate() {
        let mean = s / c as f64;
        fit.extend(std::iter::repeat_n(mean, c));
        block.extend(std::iter::repeat_n(b, c));
    }
    (fit, block)
}

/// Result of [`soft_rank`], carrying what the backward pass needs.
#[derive(Debug, Clone)]
pub struct SoftRank {
    pub ranks: Vec<f64>,
    block: Vec<usize>,
    block_sizes: Vec<usize>,
    epsilon: f64,
}

impl SoftRank {
    /// Vector-Jacobian product: gradient w.r.t. the input scores given the
    /// gradient w.r.t. the ranks.
    pub fn vjp(&self, grad_ranks: &[f64]) -> Vec<f64> {
        let mut block_sum = vec![0.0; self.block_sizes.len()];
        for (g, &b) in grad_ranks.iter().zip(&self.block) {
            block_sum[b] += g;
        }
        grad_ranks
            .iter()
            .zip(&self.block)
            .map(|(g, &b)| (g - block_sum[b] / self.block_sizes[b] as f64) / self.epsilon)
            .collect()
    }
}

/// Differentiable ascending ranks: the projection of `values / ε` onto the
/// permutahedron of `(1, …, M)`.
pub fn soft_rank(values: &[f64], cfg: SoftRankConfig) -> Result<SoftRank> {
    SoftRankConfig::new(cfg.epsilon)?;
    let n = values.len();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "soft_rank input is not finite".into(),
        ));
    }
    let theta: Vec<f64> = values.iter().map(|v| v / cfg.epsilon).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| theta[b].total_cmp(&theta[a]).then(a.cmp(&b)));

    // Non-increasing isotonic fit of s − w, with w = (n, n−1, …, 1), via
    // the non-decreasing fit of its negation.
    let neg: Vec<f64> = order
        .iter()
        .enumerate()
        .map(|(k, &i)| -(theta[i] - (n - k) as f64))
        .collect();
    let (fit, sorted_block) = isotonic_blocks(&neg);

    let mut ranks = vec![0.0; n];
    let mut block = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        ranks[i] = theta[i] + fit[k];
        block[i] = sorted_block[k];
    }
    let nblocks = sorted_block.last().map_or(0, |b| b + 1);
    let mut block_sizes = vec![0; nblocks];
    for &b in &sorted_block {
        block_sizes[b] += 1;
    }
    Ok(SoftRank {
        ranks,
        block,
        block_sizes,
        epsilon: cfg.epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RankMode {
    Hard,
    /// Reference side hard, predicted side soft-ranked after standardisation.
    Soft {
        epsilon: f64,
    },
}

/// Pearson correlation of rank vectors.
pub fn spearman(reference: &[f64], predicted: &[f64], mode: RankMode) -> Result<f64> {
    check_pair(reference, predicted)?;
    let a = hard_rank(reference);
    let b = match mode {
        RankMode::Hard => hard_rank(predicted),
        RankMode::Soft { epsilon } => {
            let (z, _) = standardize(predicted)?;
            soft_rank(&z, SoftRankConfig::new(epsilon)?)?.ranks
        }
    };
    Ok(pearson_parts(&a, &b)?.rho)
}

/// `1 − ρ` with its gradient w.r.t. the predicted scores.
#[derive(Debug, Clone)]
pub struct RankLoss {
    pub value: f64,
    pub rho: f64,
    pub grad: Vec<f64>,
}

/// Rank loss against a fixed reference. The predicted scores are
/// standardised, soft-ranked with strength `epsilon` and correlated with the
/// reference's hard ranks.
pub fn rank_loss(reference: &[f64], predicted: &[f64], epsilon: f64) -> Result<RankLoss> {
    check_pair(reference, predicted)?;
    let cfg = SoftRankConfig::new(epsilon)?;
    let a = hard_rank(reference);
    let (z, inv_std) = standardize(predicted)?;
    let sr = soft_rank(&z, cfg)?;
    let parts = pearson_parts(&a, &sr.ranks)?;

    // d(1 − ρ)/db for centred a, b
    let denom = parts.norm_a * parts.norm_b;
    let grad_b: Vec<f64> = parts
        .a_c
        .iter()
        .zip(&parts.b_c)
        .map(|(ac, bc)| -(ac / denom - parts.rho * bc / (parts.norm_b * parts.norm_b)))
        .collect();
    let grad_z = sr.vjp(&grad_b);

    let m = z.len() as f64;
    let mean_g = grad_z.iter().sum::<f64>() / m;
    let mean_gz = grad_z.iter().zip(&z).map(|(g, zi)| g * zi).sum::<f64>() / m;
    let grad = grad_z
        .iter()
        .zip(&z)
        .map(|(g, zi)| inv_std * (g - mean_g - zi * mean_gz))
        .collect();
    Ok(RankLoss {
        value: 1.0 - parts.rho,
        rho: parts.rho,
        grad,
    })
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "score vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least two scores".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok(())
}

/// Zero-mean, unit (population) variance copy and `1/std`.
fn standardize(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    if !var.is_finite() || var <= 0.0 {
        return Err(Error::Degenerate("predicted scores are constant".into()));
    }
    let inv_std = 1.0 / var.sqrt();
    Ok((x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std))
}

struct PearsonParts {
    rho: f64,
    a_c: Vec<f64>,
    b_c: Vec<f64>,
    norm_a: f64,
    norm_b: f64,
}

fn pearson_parts(a: &[f64], b: &[f64]) -> Result<PearsonParts> {
    let centre = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| x - mean).collect::<Vec<_>>()
    };
    let (a_c, b_c) = (centre(a), centre(b));
    let norm_a = a_c.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b_c.iter().map(|x| x * x).sum::<f64>().sqrt();
    // relative threshold: soft ranks of near-constant inputs collapse to the
    // centroid up to rounding
    let scale = (a.len() as f64).max(1.0);
    if norm_a <= 1e-12 * scale || norm_b <= 1e-12 * scale {
        return Err(Error::Degenerate("zero rank variance".into()));
    }
    let dot: f64 = a_c.iter().zip(&b_c).map(|(x, y)| x * y).sum();
    Ok(PearsonParts {
        rho: (dot / (norm_a * norm_b)).clamp(-1.0, 1.0),
        a_c,
        b_c,
        norm_a,
        norm_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_rank_examples() {
        assert_eq!(hard_rank(&[10.0, 30.0, 20.0]), vec![1.0, 3.0, 2.0]);
        assert_eq!(hard_rank(&[5.0, 5.0]), vec![1.5, 1.5]);
        assert_eq!(hard_rank(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(hard_rank(&[2.0, 1.0, 2.0, 2.0]), vec![3.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn isotonic_examples() {
        assert_eq!(
            isotonic_regression(&[1.0, 2.0, 2.0, 5.0]),
            vec![1.0, 2.0, 2.0, 5.0]
        );
        assert_eq!(isotonic_regression(&[2.0, 1.0]), vec![1.5, 1.5]);
        assert_eq!(isotonic_regression(&[3.0, 1.0, 2.0]), vec![2.0, 2.0, 2.0]);
        assert!(isotonic_regression(&[]).is_empty());
    }

    #[test]
    fn soft_rank_limits() {
        let v = [3.0, 1.0, 4.0, 2.0, 0.0];
        let hard = hard_rank(&v);
        let sr = soft_rank(&v, SoftRankConfig::new(1e-3).unwrap()).unwrap();
        for (s, h) in sr.ranks.iter().zip(&hard) {
            assert!((s - h).abs() <= 0.01);
        }
        let sr = soft_rank(&v, SoftRankConfig::new(1e9).unwrap()).unwrap();
        for s in &sr.ranks {
            assert!((s - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_rank_rejects_bad_epsilon() {
        assert!(soft_rank(&[1.0, 2.0], SoftRankConfig { epsilon: 0.0 }).is_err());
        assert!(soft_rank(&[1.0, 2.0], SoftRankConfig { epsilon: f64::NAN }).is_err());
    }

    #[test]
    fn spearman_examples() {
        let r = [0.3, 0.9, 0.1, 0.5];
        assert!((spearman(&r, &r, RankMode::Hard).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = r.iter().map(|x| -x).collect();
        assert!((spearman(&r, &neg, RankMode::Hard).unwrap() + 1.0).abs() < 1e-12);
        let rho = spearman(&[3.0, 1.0, 2.0], &[3.0, 2.0, 1.0], RankMode::Hard).unwrap();
        assert!((rho - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], RankMode::Hard),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            spearman(
                &[1.0, 2.0, 3.0],
                &[4.0, 4.0, 4.0],
                RankMode::Soft { epsilon: 0.1 }
            ),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0], RankMode::Hard),
            Err(Error::Dimension(_))
        ));
        assert!(spearman(&[1.0], &[1.0], RankMode::Hard).is_err());
    }

    #[test]
    fn rank_loss_limits() {
        let r: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let rev: Vec<f64> = r.iter().rev().copied().collect();
        assert!(rank_loss(&r, &r, 1e-3).unwrap().value < 1e-9);
        assert!((rank_loss(&r, &rev, 1e-3).unwrap().value - 2.0).abs() < 1e-9);
    }
}
