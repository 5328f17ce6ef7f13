use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use flexsel_core::flops::flops_report;
use flexsel_core::model::{forward_with_attention, planted_forward};
use flexsel_core::pipeline::{run_training_free, PartitionSpec, PlantedScorer, Scorer};
use flexsel_core::probe::{build_haystack, needle_recall, profile_layers, Haystack, HaystackSpec};
use flexsel_core::selector::{
    curve_csv, planted_dataset, run_lite, selector_forward, train, SelectorConfig, SelectorScorer,
    SelectorWeights,
};
use flexsel_core::softrank::{spearman, RankMode};
use flexsel_core::weights::WeightFile;
use flexsel_core::{ModelConfig, ModelWeights, TokenSequence};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{ProfileSource, RunConfig, ScorerKind};

/// Output directory of one run. Every artifact carries the seed and config
/// hash.
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    out: PathBuf,
}

impl Run {
    pub fn create(cfg: RunConfig, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let hash = cfg.hash();
        let run = Self {
            cfg,
            hash,
            out: out.to_path_buf(),
        };
        let mut echo = serde_json::to_string_pretty(&run.cfg)?;
        echo.push('\n');
        run.write("config.json", echo.as_bytes())?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    fn provenance(&self) -> Value {
        json!({ "seed": self.cfg.seed, "config_hash": self.hash })
    }

    fn write_json(&self, name: &str, body: Value) -> Result<()> {
        let mut doc = serde_json::Map::new();
        doc.insert("seed".into(), json!(self.cfg.seed));
        doc.insert("config_hash".into(), json!(self.hash));
        match body {
            Value::Object(m) => doc.extend(m),
            other => {
                doc.insert("data".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// CSV preceded by a `#` comment line with the seed and config hash.
    fn write_csv(&self, name: &str, body: &str) -> Result<()> {
        let text = format!("# seed={} config_hash={}\n{body}", self.cfg.seed, self.hash);
        self.write(name, text.as_bytes())
    }
}

fn sequence_rows(seq: &TokenSequence) -> Vec<Vec<f64>> {
    let f = seq.features();
    (0..f.rows()).map(|i| f.row(i).to_vec()).collect()
}

pub fn gen(run: &Run) -> Result<()> {
    let c = &run.cfg;
    let range = c.gen.start..c.gen.start + c.gen.count;
    let samples = range
        .into_par_iter()
        .map(|i| -> Result<Value> {
            let h = c.task.haystack(i)?;
            let teacher = c.task.teacher_scores(&h)?;
            Ok(json!({
                "index": i,
                "payload": h.payload,
                "needle_frames": h.needle_frames,
                "relevant": h.relevant,
                "query": h.sequence.query(),
                "features": sequence_rows(&h.sequence),
                "teacher": teacher,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    run.write_json(
        "dataset.json",
        json!({
            "frames": c.task.haystack.frames,
            "tokens_per_frame": c.task.haystack.tokens_per_frame,
            "feature_dim": c.task.haystack.feature_dim,
            "samples": samples,
        }),
    )
}

fn reference_model(
    cfg: &ModelConfig,
    weights: Option<&Path>,
) -> Result<(ModelConfig, ModelWeights)> {
    match weights {
        Some(p) => {
            let file = WeightFile::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(ModelWeights::from_file(file)?)
        }
        None => Ok((cfg.clone(), ModelWeights::init(cfg)?)),
    }
}

pub fn profile(run: &Run) -> Result<Value> {
    let c = &run.cfg;
    let h = c.task.haystack(c.profile.haystack_index)?;
    let record = match c.profile.source {
        ProfileSource::Planted => {
            planted_forward(&c.task.teacher(h.relevant.clone())?, &h.sequence)?
        }
        ProfileSource::Reference => {
            let (mc, w) = reference_model(&c.profile.reference, c.profile.weights.as_deref())?;
            forward_with_attention(&mc, &w, &h.sequence)?.record
        }
    };
    let k = c.profile.k.unwrap_or(h.relevant.len());
    let p = profile_layers(&record, &h.relevant, k)?;
    run.write_csv("recall.csv", &p.to_csv())?;
    let summary = json!({
        "source": c.profile.source,
        "reference_layer": p.reference_layer,
        "k": p.k,
        "recalls": p.recalls,
        "relevant": p.relevant,
    });
    run.write_json("profile.json", summary.clone())?;
    Ok(summary)
}

fn load_selector(path: Option<&Path>, what: &str) -> Result<SelectorScorer> {
    let Some(p) = path else {
        bail!("{what} needs selector weights: set the `weights` key or pass --weights");
    };
    let (config, weights) = flexsel_core::selector::load_weights(p)
        .with_context(|| format!("loading selector weights {}", p.display()))?;
    Ok(SelectorScorer { config, weights })
}

fn haystack_with_frames(run: &Run, index: u64, frames: usize) -> Result<Haystack> {
    let spec = HaystackSpec {
        frames,
        ..run.cfg.task.haystack_spec(index)
    };
    Ok(build_haystack(&spec)?)
}

fn planted_scorer(run: &Run, h: &Haystack) -> Result<PlantedScorer> {
    Ok(PlantedScorer {
        spec: run.cfg.task.teacher(h.relevant.clone())?,
        layer: run.cfg.task.peak_layer,
    })
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub fn select(run: &Run, timing: bool) -> Result<Value> {
    let c = &run.cfg;
    let sc = &c.select;
    let h = haystack_with_frames(run, sc.haystack_index, sc.frames)?;
    let scorer: Box<dyn Scorer> = match sc.scorer {
        ScorerKind::Planted => Box::new(planted_scorer(run, &h)?),
        ScorerKind::Selector => Box::new(load_selector(sc.weights.as_deref(), "select")?),
    };
    let spec = PartitionSpec::new(h.sequence.frame_count(), sc.selection.max_frames_per_set)?;
    let selected = run_training_free(&h.sequence, &spec, &sc.selection, scorer.as_ref())?;
    let recall = needle_recall(&selected.global_indices(), &h.relevant);
    let mut body = serde_json::to_value(&selected)?;
    body["scorer"] = json!(sc.scorer);
    body["needle_recall"] = json!(recall);
    body["relevant"] = json!(h.relevant);
    run.write_json("selection.json", body.clone())?;

    if timing {
        let sub = h.sequence.select_globals(&selected.global_indices())?;
        let full_len = h.sequence.len();
        let mc = ModelConfig {
            max_len: full_len,
            ..c.profile.reference.clone()
        };
        let mw = ModelWeights::init(&mc)?;
        let reps = sc.timing_reps;
        let stage1 = median_ms(reps, || {
            run_training_free(&h.sequence, &spec, &sc.selection, scorer.as_ref())?;
            Ok(())
        })?;
        let stage2 = median_ms(reps, || {
            forward_with_attention(&mc, &mw, &sub)?;
            Ok(())
        })?;
        let full = median_ms(reps, || {
            forward_with_attention(&mc, &mw, &h.sequence)?;
            Ok(())
        })?;
        run.write_json(
            "timing.json",
            json!({
                "repetitions": reps,
                "stage1_ms_median": stage1,
                "stage2_ms_median": stage2,
                "full_prefill_ms_median": full,
                "selected_tokens": sub.visual_len(),
                "input_tokens": h.sequence.visual_len(),
            }),
        )?;
    }
    Ok(body)
}

fn selector_file(run: &Run, cfg: &SelectorConfig, w: &SelectorWeights) -> Result<WeightFile> {
    let mut file = w.to_file(cfg)?;
    file.config["provenance"] = run.provenance();
    Ok(file)
}

pub fn train_cmd(run: &Run) -> Result<Value> {
    let c = &run.cfg;
    let n = c.train.samples;
    let train_set = planted_dataset(&c.task, 0..n)?;
    let holdout = planted_dataset(&c.task, n..n + c.train.holdout)?;
    let out = train(&c.selector, &c.train.optimizer, &train_set, &holdout)?;
    run.write(
        "selector.flxs",
        &selector_file(run, &c.selector, &out.weights)?.encode()?,
    )?;
    run.write_csv("curve.csv", &curve_csv(&out.curve))?;
    let last = out.curve.last().expect("curve has an initial point");
    let summary = json!({
        "epochs": c.train.optimizer.epochs,
        "steps": last.step,
        "parameters": out.weights.params.parameter_count(),
        "initial_holdout_spearman": out.curve[0].holdout_spearman,
        "final_holdout_spearman": last.holdout_spearman,
        "final_loss": last.loss,
    });
    run.write_json("train.json", summary.clone())?;
    Ok(summary)
}

pub fn eval(run: &Run) -> Result<Value> {
    let c = &run.cfg;
    let e = &c.eval;
    let lite = load_selector(e.weights.as_deref(), "eval")?;
    let rows = (e.start..e.start + e.count)
        .into_par_iter()
        .map(|i| -> Result<(u64, f64, f64, f64)> {
            let small = c.task.haystack(i)?;
            let teacher = c.task.teacher_scores(&small)?;
            let pred = selector_forward(&lite.config, &lite.weights, &small.sequence)?;
            let rho = spearman(&teacher, &pred, RankMode::Hard)?;

            let h = haystack_with_frames(run, i, e.frames)?;
            let spec =
                PartitionSpec::new(h.sequence.frame_count(), e.selection.max_frames_per_set)?;
            let tf =
                run_training_free(&h.sequence, &spec, &e.selection, &planted_scorer(run, &h)?)?;
            let lt = run_lite(&h.sequence, &spec, &e.selection, &lite)?;
            Ok((
                i,
                rho,
                needle_recall(&tf.global_indices(), &h.relevant),
                needle_recall(&lt.global_indices(), &h.relevant),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("index,spearman,recall_training_free,recall_lite\n");
    for (i, rho, tf, lt) in &rows {
        csv.push_str(&format!("{i},{rho},{tf},{lt}\n"));
    }
    run.write_csv("eval.csv", &csv)?;
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&(u64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let summary = json!({
        "count": rows.len(),
        "mean_spearman": mean(|r| r.1),
        "mean_recall_training_free": mean(|r| r.2),
        "mean_recall_lite": mean(|r| r.3),
    });
    run.write_json("eval.json", summary.clone())?;
    Ok(summary)
}

pub fn flops(run: &Run) -> Result<Value> {
    let report = flops_report(&run.cfg.flops)?;
    let body = json!({ "query": run.cfg.flops, "report": report });
    run.write_json("flops.json", body.clone())?;
    Ok(body)
}
