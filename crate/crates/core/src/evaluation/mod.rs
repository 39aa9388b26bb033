//! Metrics, episodic evaluation, ablations and report files.

mod config;
mod metrics;
mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, EvalConfig, RunConfig};
pub use metrics::{
    binary_iou, class_mean_iou, confusion_counts, episode_iou, fold_mean, iou, positive_iou, ConfusionCounts,
};
pub use report::{emit_report, fold_summary, sweep_svg, FoldSummary, RunManifest};

use crate::data::{sample_episode, DatasetHandle, Partition, SplitConfig};
use crate::error::{Error, Result};
use crate::inference::{predict, predict_deterministic, InferenceConfig};
use crate::model::Model;
use crate::rng;

const EPISODE_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;

/// Scores of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: String,
    pub fold: usize,
    pub k: usize,
    #[serde(rename = "L")]
    pub samples_l: usize,
    #[serde(rename = "M")]
    pub samples_m: usize,
    pub episodes: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub attention_enabled: bool,
    pub per_class_iou: BTreeMap<usize, f64>,
    pub class_mean_iou: f64,
    pub binary_iou: f64,
    pub positive_iou: f64,
    pub wall_clock_s: f64,
}

impl MetricReport {
    /// Equality ignoring wall-clock time.
    pub fn same_scores(&self, other: &MetricReport) -> bool {
        MetricReport {
            wall_clock_s: 0.0,
            ..self.clone()
        } == MetricReport {
            wall_clock_s: 0.0,
            ..other.clone()
        }
    }
}

struct EpisodeOutcome {
    class_id: usize,
    counts: ConfusionCounts,
}

/// Evaluates `model` on `cfg.episodes` held-out episodes. Episode `i` is
/// drawn from its own stream, so runs that differ only in `L`, `M` or mode
/// see the same episodes.
pub fn evaluate(
    model: &Model,
    ds: &DatasetHandle,
    split: &SplitConfig,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if (ds.height, ds.width) != (model.config.image_height, model.config.image_width) {
        return Err(Error::dims(
            "evaluate: dataset vs model image size",
            format!("{}x{}", model.config.image_height, model.config.image_width),
            format!("{}x{}", ds.height, ds.width),
        ));
    }
    let deterministic = cfg.inference.deterministic || model.config.deterministic;
    let inference = InferenceConfig {
        deterministic,
        ..cfg.inference.clone()
    };
    let clock = Instant::now();
    let outcomes: Vec<Result<EpisodeOutcome>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|i| {
            let seed = rng::mix(cfg.seed, i as u64);
            let mut r = rng::stream(seed, EPISODE_STREAM);
            let ep = sample_episode(ds, split, Partition::Test, cfg.k_shot, &mut r)?;
            let pred = if deterministic {
                predict_deterministic(model, &ep.support, &ep.query.image, &inference)?
            } else {
                let mut noise = rng::stream(seed, NOISE_STREAM);
                predict(model, &ep.support, &ep.query.image, &inference, &mut noise)?
            };
            Ok(EpisodeOutcome {
                class_id: ep.class_id,
                counts: confusion_counts(&pred.mask, &ep.query.mask)?,
            })
        })
        .collect();

    let mut per_class: BTreeMap<usize, ConfusionCounts> = BTreeMap::new();
    let mut fg = ConfusionCounts::default();
    let mut episode_ious = Vec::with_capacity(cfg.episodes);
    for o in outcomes {
        let o = o?;
        per_class.entry(o.class_id).or_default().add(&o.counts);
        fg.add(&o.counts);
        episode_ious.push(episode_iou(&o.counts));
    }
    let (class_mean, per_class_iou) = class_mean_iou(&per_class).unwrap_or((1.0, BTreeMap::new()));
    let mode = if deterministic {
        "deterministic"
    } else if !model.config.attention_enabled {
        "no-attention"
    } else {
        "probabilistic"
    };
    Ok(MetricReport {
        mode: mode.into(),
        fold: split.fold_index,
        k: cfg.k_shot,
        samples_l: if deterministic { 1 } else { inference.samples_l },
        samples_m: if deterministic { 1 } else { inference.samples_m },
        episodes: cfg.episodes,
        seed: cfg.seed,
        deterministic,
        attention_enabled: model.config.attention_enabled,
        per_class_iou,
        class_mean_iou: class_mean,
        binary_iou: binary_iou(&fg, &fg.swapped()),
        positive_iou: positive_iou(&episode_ious)?,
        wall_clock_s: clock.elapsed().as_secs_f64(),
    })
}

/// Models to compare. Any entry may be absent.
#[derive(Default)]
pub struct AblationModels<'a> {
    pub probabilistic: Option<&'a Model>,
    pub deterministic: Option<&'a Model>,
    pub no_attention: Option<&'a Model>,
}

/// One report per supplied model, then one `sweep` report per value `v` in
/// `sweep` for the probabilistic model with `L = M = v`.
pub fn ablate(
    models: &AblationModels<'_>,
    sweep: &[usize],
    ds: &DatasetHandle,
    split: &SplitConfig,
    cfg: &EvalConfig,
) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    if let Some(m) = models.probabilistic {
        out.push(evaluate(m, ds, split, cfg)?);
    }
    if let Some(m) = models.deterministic {
        let mut c = cfg.clone();
        c.inference.deterministic = true;
        out.push(evaluate(m, ds, split, &c)?);
    }
    if let Some(m) = models.no_attention {
        if m.config.attention_enabled {
            return Err(Error::InvalidArgument(
                "the no-attention model must be trained with attention disabled".into(),
            ));
        }
        out.push(evaluate(m, ds, split, cfg)?);
    }
    if !sweep.is_empty() {
        let m = models
            .probabilistic
            .ok_or_else(|| Error::InvalidArgument("the L/M sweep needs the probabilistic model".into()))?;
        for &v in sweep {
            let mut c = cfg.clone();
            c.inference.samples_l = v;
            c.inference.samples_m = v;
            let mut r = evaluate(m, ds, split, &c)?;
            r.mode = "sweep".into();
            out.push(r);
        }
    }
    Ok(out)
}
