//! Test-time prediction by Monte-Carlo sampling from the priors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Sample};
use crate::error::{Error, Result};
use crate::math::{BinaryMask, DiagonalGaussian, ProbMap};
use crate::model::{Encoded, Model};
use crate::rng::{NoiseSource, ZeroNoise};
use crate::tensor::Tensor;

/// How per-support prototype priors are combined when `k > 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Precision-weighted mean and precision-weighted average variance.
    #[default]
    PrecisionWeighted,
    /// Normalised product of the Gaussians.
    Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Prototype samples.
    pub samples_l: usize,
    /// Attention samples.
    pub samples_m: usize,
    pub threshold: f64,
    pub deterministic: bool,
    pub aggregation: Aggregation,
    /// Keep every per-sample probability map in the prediction.
    pub keep_samples: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            samples_l: 15,
            samples_m: 15,
            threshold: 0.5,
            deterministic: false,
            aggregation: Aggregation::PrecisionWeighted,
            keep_samples: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_l == 0 || self.samples_m == 0 {
            return Err(Error::InvalidArgument("L and M must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Mean foreground probability.
    pub prob: ProbMap,
    /// `prob >= threshold`.
    pub mask: BinaryMask,
    /// Per-sample maps, prototype index outer, when requested.
    pub samples: Option<Vec<ProbMap>>,
}

/// Combines per-support priors. The result does not depend on their order.
pub fn aggregate_priors(priors: &[DiagonalGaussian], rule: Aggregation) -> Result<DiagonalGaussian> {
    let first = priors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no priors to aggregate".into()))?;
    let d = first.dim();
    if let Some(g) = priors.iter().find(|g| g.dim() != d) {
        return Err(Error::dims("aggregate_priors", d, g.dim()));
    }
    if priors.len() == 1 {
        return Ok(first.clone());
    }
    let mut sorted: Vec<&DiagonalGaussian> = priors.iter().collect();
    sorted.sort_by(|a, b| {
        a.mean()
            .iter()
            .chain(a.log_var())
            .zip(b.mean().iter().chain(b.log_var()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let variances: Vec<Vec<f64>> = sorted.iter().map(|g| g.variance()).collect();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for j in 0..d {
        if variances.iter().all(|v| v[j] == variances[0][j]) {
            mean[j] = sorted.iter().map(|g| g.mean()[j]).sum::<f64>() / sorted.len() as f64;
            var[j] = match rule {
                Aggregation::PrecisionWeighted => variances[0][j],
                Aggregation::Product => variances[0][j] / sorted.len() as f64,
            };
            continue;
        }
        let total_precision: f64 = variances.iter().map(|v| 1.0 / v[j]).sum();
        for (g, v) in sorted.iter().zip(&variances) {
            let w = (1.0 / v[j]) / total_precision;
            mean[j] += w * g.mean()[j];
            if rule == Aggregation::PrecisionWeighted {
                var[j] += w * v[j];
            }
        }
        if rule == Aggregation::Product {
            var[j] = 1.0 / total_precision;
        }
    }
    DiagonalGaussian::from_variance(mean, &var)
}

struct Prepared<'m> {
    session: crate::model::Session<'m>,
    query: Encoded,
    prototype: DiagonalGaussian,
    attention: DiagonalGaussian,
}

fn prepare<'m>(model: &'m Model, support: &[Sample], query: &Image, cfg: &InferenceConfig) -> Result<Prepared<'m>> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::InvalidArgument("prediction needs at least one support sample".into()));
    }
    let mut s = model.session();
    s.bind_all();
    let q = s.encode(query)?;
    let mut priors = Vec::with_capacity(support.len());
    for sample in support {
        let mark = s.tape.len();
        let enc = s.encode(&sample.image)?;
        let g = s.prototype_prior(&[(enc.features, &sample.mask)]);
        priors.push(s.gaussian(g)?);
        s.tape.truncate(mark);
    }
    let prototype = aggregate_priors(&priors, cfg.aggregation)?;
    let g = s.attention_prior(q.features);
    let attention = s.gaussian(g)?;
    Ok(Prepared {
        session: s,
        query: q,
        prototype,
        attention,
    })
}

/// Foreground probabilities of one decode pass.
fn decode_probability(p: &Prepared<'_>, z: &[f64], m: &[f64]) -> Vec<f64> {
    let model = p.session.model();
    let mut s = model.session();
    let features = s.tape.leaf(p.session.tape.value(p.query.features).clone());
    let skips = p
        .query
        .skips
        .iter()
        .map(|v| s.tape.leaf(p.session.tape.value(*v).clone()))
        .collect();
    let enc = Encoded { features, skips };
    let zv = s.tape.leaf(Tensor::vector(z.to_vec()));
    let attention = if model.config.attention_enabled {
        let mv = s.tape.leaf(Tensor::vector(m.to_vec()));
        Some(s.attention_map(features, mv))
    } else {
        None
    };
    let logits = s.decode(&enc, attention, zv);
    crate::autodiff::kernels::foreground_probability(s.tape.value(logits).data())
}

fn sample_latents(g: &DiagonalGaussian, n: usize, noise: &mut dyn NoiseSource) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let eps = noise.draw(g.dim());
            crate::math::reparameterize(g, &eps).expect("noise matches dimension").values
        })
        .collect()
}

fn finish(maps: Vec<Vec<f64>>, cfg: &InferenceConfig, h: usize, w: usize) -> Result<Prediction> {
    for (index, m) in maps.iter().enumerate() {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteMap { index });
        }
    }
    let mut mean = vec![0.0; h * w];
    for m in &maps {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    mean.iter_mut().for_each(|v| *v = (*v / n).clamp(0.0, 1.0));
    let prob = ProbMap::new(h, w, mean)?;
    let mask = prob.threshold(cfg.threshold);
    let samples = if cfg.keep_samples {
        Some(
            maps.into_iter()
                .map(|m| ProbMap::new(h, w, m))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(Prediction { prob, mask, samples })
}

/// Averages the foreground probabilities of `L * M` decodes over prototype
/// and attention samples drawn from the priors. The query mask is never read.
/// Noise is drawn for all prototypes first, then all attention vectors.
pub fn predict(
    model: &Model,
    support: &[Sample],
    query: &Image,
    cfg: &InferenceConfig,
    noise: &mut dyn NoiseSource,
) -> Result<Prediction> {
    if cfg.deterministic {
        return predict_deterministic(model, support, query, cfg);
    }
    let p = prepare(model, support, query, cfg)?;
    let zs = sample_latents(&p.prototype, cfg.samples_l, noise);
    let ms = if model.config.attention_enabled {
        sample_latents(&p.attention, cfg.samples_m, noise)
    } else {
        vec![Vec::new(); cfg.samples_m]
    };
    let pairs: Vec<(usize, usize)> = (0..zs.len())
        .flat_map(|l| (0..ms.len()).map(move |j| (l, j)))
        .collect();
    let maps: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|&(l, j)| decode_probability(&p, &zs[l], &ms[j]))
        .collect();
    finish(maps, cfg, query.height(), query.width())
}

/// One decode from the prior means.
pub fn predict_deterministic(
    model: &Model,
    support: &[Sample],
    query: &Image,
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    let single = InferenceConfig {
        samples_l: 1,
        samples_m: 1,
        deterministic: false,
        ..cfg.clone()
    };
    let p = prepare(model, support, query, &single)?;
    let zs = sample_latents(&p.prototype, 1, &mut ZeroNoise);
    let ms = sample_latents(&p.attention, 1, &mut ZeroNoise);
    let map = decode_probability(&p, &zs[0], &ms[0]);
    finish(vec![map], &single, query.height(), query.width())
}
