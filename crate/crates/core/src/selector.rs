//! Lightweight selector trained to reproduce a teacher's token ranking.
//!
//! The selector is a small bidirectional-over-visual transformer. Visual
//! tokens carry no positional signal, so scores are permutation-equivariant.
//! Query tokens get a learned position and attend to every visual token and
//! causally to earlier query tokens. A token's score is the attention it
//! receives from the query rows at the last layer, averaged over heads and
//! rows; an optional linear head can be used instead.
//!
//! Training minimises `1 − ρ` between the teacher's hard ranks and the
//! selector's soft ranks. Per-sample gradients are computed in parallel and
//! summed in sample order, so runs are bit-for-bit reproducible and a run
//! resumed from a saved [`TrainState`] matches the uninterrupted one.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::numerics::{MacCategory, MacCounts, Tape, Var};
use crate::optim::{AdamState, AdamW, LrSchedule};
use crate::pipeline::{run_training_free, PartitionSpec, Scorer, SelectedTokens, SelectionConfig};
use crate::probe::PlantedTask;
use crate::softrank::{rank_loss, spearman, RankMode};
use crate::transformer::{self, Bound};
use crate::weights::{ParamMap, WeightFile};

pub const SELECTOR_KIND: &str = "token-selector";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub visual_dim: usize,
    pub vocab: usize,
    /// Longest query the positional table covers.
    pub max_query: usize,
    /// Score tokens with a linear head on the final hidden states instead
    /// of the final-layer attention.
    pub linear_head: bool,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 32,
            ffn: 64,
            visual_dim: 16,
            vocab: 8,
            max_query: 8,
            linear_head: false,
            seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("selector needs at least one layer".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if [
            self.hidden,
            self.ffn,
            self.visual_dim,
            self.vocab,
            self.max_query,
        ]
        .contains(&0)
        {
            return Err(Error::Config(
                "all selector sizes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorWeights {
    pub params: ParamMap,
}

impl SelectorWeights {
    pub fn init(cfg: &SelectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamMap::new();
        let d = cfg.hidden;
        transformer::init_linear(&mut p, &mut rng, "projector", cfg.visual_dim, d);
        p.insert(
            "query_embed",
            transformer::randn(&mut rng, &[cfg.vocab, d], 1.0),
        );
        p.insert(
            "query_pos",
            transformer::randn(&mut rng, &[cfg.max_query, d], 0.1),
        );
        for l in 0..cfg.layers {
            transformer::init_block(&mut p, &mut rng, &format!("layers.{l}"), d, cfg.ffn);
        }
        if cfg.linear_head {
            transformer::init_norm(&mut p, "final_ln", d);
            transformer::init_linear(&mut p, &mut rng, "head", d, 1);
        }
        Ok(Self { params: p })
    }

    pub fn check(&self, cfg: &SelectorConfig) -> Result<()> {
        cfg.validate()?;
        let p = &self.params;
        let d = cfg.hidden;
        p.expect_shape("projector.w", &[cfg.visual_dim, d])?;
        p.expect_shape("projector.b", &[d])?;
        p.expect_shape("query_embed", &[cfg.vocab, d])?;
        p.expect_shape("query_pos", &[cfg.max_query, d])?;
        for l in 0..cfg.layers {
            transformer::check_block(p, &format!("layers.{l}"), d, cfg.ffn)?;
        }
        if cfg.linear_head {
            p.expect_shape("head.w", &[d, 1])?;
        }
        Ok(())
    }

    pub fn to_file(&self, cfg: &SelectorConfig) -> Result<WeightFile> {
        Ok(WeightFile {
            kind: SELECTOR_KIND.into(),
            config: serde_json::to_value(cfg)?,
            params: self.params.clone(),
        })
    }

    pub fn from_file(file: WeightFile) -> Result<(SelectorConfig, Self)> {
        if file.kind != SELECTOR_KIND {
            return Err(Error::Format(format!(
                "expected a `{SELECTOR_KIND}` file, found `{}`",
                file.kind
            )));
        }
        let cfg: SelectorConfig = serde_json::from_value(file.config)?;
        let w = Self {
            params: file.params,
        };
        w.check(&cfg)?;
        Ok((cfg, w))
    }
}

pub fn save_weights(
    cfg: &SelectorConfig,
    weights: &SelectorWeights,
    path: impl AsRef<Path>,
) -> Result<()> {
    weights.to_file(cfg)?.save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(SelectorConfig, SelectorWeights)> {
    SelectorWeights::from_file(WeightFile::load(path)?)
}

/// Builds the forward graph and returns the `[1 × M]` score row.
fn forward_tape(
    tape: &mut Tape,
    b: &Bound,
    cfg: &SelectorConfig,
    seq: &TokenSequence,
) -> Result<Var> {
    if seq.feature_dim() != cfg.visual_dim {
        return Err(Error::Config(format!(
            "visual features have {} dims, selector expects {}",
            seq.feature_dim(),
            cfg.visual_dim
        )));
    }
    let (m, q) = (seq.visual_len(), seq.query_len());
    if q > cfg.max_query {
        return Err(Error::Capacity {
            len: q,
            limit: cfg.max_query,
        });
    }
    if let Some(&bad) = seq.query().iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Config(format!(
            "query token {bad} outside vocabulary of {}",
            cfg.vocab
        )));
    }
    let n = m + q;

    tape.set_mac_category(Some(MacCategory::Other));
    let feats = tape.leaf(seq.features().clone());
    let xv = transformer::linear(tape, b, "projector", feats)?;
    tape.set_mac_category(None);
    let xq = tape.gather(b.get("query_embed")?, seq.query())?;
    let pos = tape.slice_rows(b.get("query_pos")?, 0, q)?;
    let xq = tape.add(xq, pos)?;
    let mut x = tape.concat_rows(&[xv, xq])?;

    let mask = transformer::selector_mask(m, n);
    let mut last_attention = Vec::new();
    for l in 0..cfg.layers {
        let last = l + 1 == cfg.layers;
        let out = transformer::block(
            tape,
            b,
            &format!("layers.{l}"),
            x,
            cfg.heads,
            &mask,
            last && !cfg.linear_head,
        )?;
        x = out.x;
        last_attention = out.attention;
    }

    if cfg.linear_head {
        let h = transformer::norm(tape, b, "final_ln", x)?;
        let hv = tape.slice_rows(h, 0, m)?;
        tape.set_mac_category(Some(MacCategory::Other));
        let s = transformer::linear(tape, b, "head", hv)?;
        tape.set_mac_category(None);
        return tape.transpose(s);
    }
    let mut total: Option<Var> = None;
    for p in last_attention {
        let rows = tape.slice_rows(p, m, q)?;
        let cols = tape.slice_cols(rows, 0, m)?;
        let mean = tape.mean_rows(cols);
        total = Some(match total {
            None => mean,
            Some(t) => tape.add(t, mean)?,
        });
    }
    let total = total.expect("at least one head");
    Ok(tape.scale(total, 1.0 / cfg.heads as f64))
}

/// Predicted relevance for every visual token of `seq`.
pub fn selector_forward(
    cfg: &SelectorConfig,
    weights: &SelectorWeights,
    seq: &TokenSequence,
) -> Result<Vec<f64>> {
    Ok(selector_forward_counted(cfg, weights, seq)?.0)
}

/// Scores together with the multiply-accumulates spent computing them.
pub fn selector_forward_counted(
    cfg: &SelectorConfig,
    weights: &SelectorWeights,
    seq: &TokenSequence,
) -> Result<(Vec<f64>, MacCounts)> {
    let mut tape = Tape::new();
    let b = transformer::bind(&mut tape, &weights.params);
    let s = forward_tape(&mut tape, &b, cfg, seq)?;
    Ok((tape.value(s).data().to_vec(), tape.mac_counts()))
}

/// One sequence with the teacher's scores for its visual tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub sequence: TokenSequence,
    pub teacher: Vec<f64>,
}

impl TrainingSample {
    pub fn new(sequence: TokenSequence, teacher: Vec<f64>) -> Result<Self> {
        if teacher.len() != sequence.visual_len() {
            return Err(Error::Dimension(format!(
                "{} teacher scores for {} visual tokens",
                teacher.len(),
                sequence.visual_len()
            )));
        }
        Ok(Self { sequence, teacher })
    }

    /// Scores `sequence` with a frozen teacher.
    pub fn from_teacher(sequence: TokenSequence, teacher: &dyn Scorer) -> Result<Self> {
        let scores = teacher.score(&sequence)?;
        Self::new(sequence, scores)
    }
}

/// Samples `range` of a planted task with their teacher scores, built in
/// parallel and returned in index order.
pub fn planted_dataset(
    task: &PlantedTask,
    range: std::ops::Range<u64>,
) -> Result<Vec<TrainingSample>> {
    range
        .into_par_iter()
        .map(|i| {
            let h = task.haystack(i)?;
            let teacher = task.teacher_scores(&h)?;
            TrainingSample::new(h.sequence, teacher)
        })
        .collect()
}

/// Loss and parameter gradients for one sample.
fn sample_gradient(
    cfg: &SelectorConfig,
    params: &ParamMap,
    sample: &TrainingSample,
    epsilon: f64,
) -> Result<(f64, ParamMap)> {
    let mut tape = Tape::new();
    let b = transformer::bind(&mut tape, params);
    let s = forward_tape(&mut tape, &b, cfg, &sample.sequence)?;
    let loss = rank_loss(&sample.teacher, tape.value(s).data(), epsilon)?;
    let grad = crate::numerics::Tensor::new(vec![1, loss.grad.len()], loss.grad)?;
    let out = tape.custom_scalar(s, loss.value, grad)?;
    let grads = tape.backward(out)?;
    Ok((loss.value, transformer::collect_grads(&b, &grads, params)))
}

/// Mean loss and mean gradient over `batch`, reduced in sample order.
pub fn batch_gradient(
    cfg: &SelectorConfig,
    weights: &SelectorWeights,
    batch: &[&TrainingSample],
    epsilon: f64,
) -> Result<(f64, ParamMap)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts = batch
        .par_iter()
        .map(|s| sample_gradient(cfg, &weights.params, s, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = weights.params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (name, t) in grad.iter_mut() {
            t.accumulate(&g.get(name)?.scale(scale));
        }
    }
    Ok((loss * scale, grad))
}

/// One AdamW update on the batch's mean rank loss. Returns the loss before
/// the update.
pub fn train_step(
    cfg: &SelectorConfig,
    opt: &AdamW,
    adam: &mut AdamState,
    weights: &mut SelectorWeights,
    batch: &[&TrainingSample],
    epsilon: f64,
    lr: f64,
) -> Result<f64> {
    let (loss, grad) = batch_gradient(cfg, weights, batch, epsilon)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: adam.step as usize,
            loss,
        });
    }
    opt.step(adam, &mut weights.params, &grad, lr);
    Ok(loss)
}

/// Mean hard-rank Spearman correlation between selector and teacher.
pub fn evaluate(
    cfg: &SelectorConfig,
    weights: &SelectorWeights,
    samples: &[TrainingSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    let rhos = samples
        .par_iter()
        .map(|s| {
            spearman(
                &s.teacher,
                &selector_forward(cfg, weights, &s.sequence)?,
                RankMode::Hard,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rhos.iter().sum::<f64>() / rhos.len() as f64)
}

/// Soft-rank strength interpolated geometrically over training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
}

impl EpsilonSchedule {
    pub fn constant(epsilon: f64) -> Self {
        Self {
            start: epsilon,
            end: epsilon,
        }
    }

    pub fn at(&self, progress: f64) -> f64 {
        let t = progress.clamp(0.0, 1.0);
        self.start * (self.end / self.start).powf(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Warmup length as a fraction of all steps.
    pub warmup: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub epsilon: EpsilonSchedule,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            lr: 3e-4,
            warmup: 0.05,
            lr_floor: 0.1,
            weight_decay: 0.01,
            epsilon: EpsilonSchedule::constant(0.1),
            shuffle: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub holdout_spearman: Option<f64>,
}

/// CSV with header `epoch,step,loss,holdout_spearman`.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,step,loss,holdout_spearman\n");
    for p in curve {
        let rho = p
            .holdout_spearman
            .map(|r| r.to_string())
            .unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", p.epoch, p.step, p.loss, rho));
    }
    out
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub weights: SelectorWeights,
    pub adam: AdamState,
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
    /// Batches completed within the current epoch.
    pub cursor: usize,
    /// Sum of sample-weighted batch losses in the current epoch.
    pub epoch_loss: f64,
    pub curve: Vec<CurvePoint>,
}

pub struct Trainer<'a> {
    cfg: SelectorConfig,
    tcfg: TrainConfig,
    opt: AdamW,
    schedule: LrSchedule,
    train: &'a [TrainingSample],
    holdout: &'a [TrainingSample],
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &SelectorConfig,
        tcfg: &TrainConfig,
        train: &'a [TrainingSample],
        holdout: &'a [TrainingSample],
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if tcfg.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(tcfg.epsilon.start > 0.0 && tcfg.epsilon.end > 0.0) {
            return Err(Error::Config("soft-rank strength must be positive".into()));
        }
        let total = (tcfg.epochs * train.len().div_ceil(tcfg.batch_size)) as u64;
        Ok(Self {
            cfg: cfg.clone(),
            tcfg: tcfg.clone(),
            opt: AdamW {
                weight_decay: tcfg.weight_decay,
                ..AdamW::default()
            },
            schedule: LrSchedule {
                peak: tcfg.lr,
                warmup_steps: (total as f64 * tcfg.warmup).ceil() as u64,
                total_steps: total,
                floor: tcfg.lr_floor,
            },
            train,
            holdout,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    fn holdout_rho(&self, w: &SelectorWeights) -> Result<Option<f64>> {
        if self.holdout.is_empty() {
            Ok(None)
        } else {
            evaluate(&self.cfg, w, self.holdout).map(Some)
        }
    }

    /// Fresh state whose curve starts with the untrained epoch-0 point.
    pub fn init_state(&self, weights: SelectorWeights) -> Result<TrainState> {
        weights.check(&self.cfg)?;
        let eps = self.tcfg.epsilon.at(0.0);
        let all: Vec<&TrainingSample> = self.train.iter().collect();
        let (loss, _) = batch_gradient(&self.cfg, &weights, &all, eps)?;
        let start = CurvePoint {
            epoch: 0,
            step: 0,
            loss,
            holdout_spearman: self.holdout_rho(&weights)?,
        };
        Ok(TrainState {
            adam: AdamState::new(&weights.params),
            weights,
            step: 0,
            epoch: 0,
            cursor: 0,
            epoch_loss: 0.0,
            curve: vec![start],
        })
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        if self.tcfg.shuffle {
            let seed = self.tcfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
    }

    /// Trains until all epochs finish or `max_steps` more updates are done.
    pub fn run(&self, state: &mut TrainState, max_steps: Option<u64>) -> Result<()> {
        let mut budget = max_steps.unwrap_or(u64::MAX);
        let total = self.schedule.total_steps.max(1) as f64;
        while state.epoch < self.tcfg.epochs {
            let order = self.order(state.epoch);
            let batches: Vec<&[usize]> = order.chunks(self.tcfg.batch_size).collect();
            while state.cursor < batches.len() {
                if budget == 0 {
                    return Ok(());
                }
                let batch: Vec<&TrainingSample> = batches[state.cursor]
                    .iter()
                    .map(|&i| &self.train[i])
                    .collect();
                let eps = self.tcfg.epsilon.at(state.step as f64 / total);
                let lr = self.schedule.rate(state.step);
                let loss = train_step(
                    &self.cfg,
                    &self.opt,
                    &mut state.adam,
                    &mut state.weights,
                    &batch,
                    eps,
                    lr,
                )?;
                state.epoch_loss += loss * batch.len() as f64;
                state.step += 1;
                state.cursor += 1;
                budget -= 1;
            }
            state.curve.push(CurvePoint {
                epoch: state.epoch + 1,
                step: state.step,
                loss: state.epoch_loss / self.train.len() as f64,
                holdout_spearman: self.holdout_rho(&state.weights)?,
            });
            state.epoch += 1;
            state.cursor = 0;
            state.epoch_loss = 0.0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: SelectorWeights,
    pub curve: Vec<CurvePoint>,
}

/// Trains a freshly initialised selector.
pub fn train(
    cfg: &SelectorConfig,
    tcfg: &TrainConfig,
    train: &[TrainingSample],
    holdout: &[TrainingSample],
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg, tcfg, train, holdout)?;
    let mut state = trainer.init_state(SelectorWeights::init(cfg)?)?;
    trainer.run(&mut state, None)?;
    Ok(TrainOutcome {
        weights: state.weights,
        curve: state.curve,
    })
}

#[derive(Debug, Clone)]
pub struct SelectorScorer {
    pub config: SelectorConfig,
    pub weights: SelectorWeights,
}

impl Scorer for SelectorScorer {
    fn score(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        selector_forward(&self.config, &self.weights, seq)
    }
}

/// The selection pipeline with the trained selector as scorer.
pub fn run_lite(
    seq: &TokenSequence,
    spec: &PartitionSpec,
    cfg: &SelectionConfig,
    scorer: &SelectorScorer,
) -> Result<SelectedTokens> {
    run_training_free(seq, spec, cfg, scorer)
}
