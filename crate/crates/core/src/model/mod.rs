//! The segmentation network: a shared convolutional encoder, Gaussian
//! prior/posterior heads for the prototype and attention latents, and a
//! skip-connected decoder.
//!
//! All computation runs on a [`Session`], which binds the parameters of a
//! [`Model`] to an autodiff [`Tape`]. Training differentiates through the same
//! code that inference evaluates.

mod config;
mod params;


use std::collections::BTreeMap;

pub use config::ModelConfig;
pub use params::ParameterSet;

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{Episode, Image, Sample};
use crate::error::{Error, Result};
use crate::math::{pooling_weights, BinaryMask, DiagonalGaussian, FeatureMap, LatentSample, ProbMap};
use crate::tensor::Tensor;

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

/// Which distribution the training forward pass samples latents from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentSource {
    /// Reparameterised draws from the query-aware posteriors.
    #[default]
    Posterior,
    /// Reparameterised draws from the support-only priors.
    Prior,
}

/// Mean and log-variance nodes of a diagonal Gaussian on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

/// Encoder output on a tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[H', W', C]`.
    pub features: Var,
    /// Skip inputs of the decoder, coarsest first; the last is the image.
    pub skips: Vec<Var>,
}

/// Encoder output as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub features: FeatureMap,
    pub skips: Vec<Tensor>,
}

/// Nodes produced by one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainForward {
    /// `[H, W, 2]` query logits.
    pub logits: Var,
    pub prototype_prior: GaussianVars,
    pub prototype_posterior: GaussianVars,
    pub attention_prior: GaussianVars,
    pub attention_posterior: GaussianVars,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterSet::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            tape: Tape::new(),
            model: self,
            bound: BTreeMap::new(),
        }
    }

    pub fn encode(&self, image: &Image) -> Result<Encoding> {
        let mut s = self.session();
        let enc = s.encode(image)?;
        Ok(Encoding {
            features: s.feature_map(enc.features),
            skips: enc.skips.iter().map(|v| s.tape.value(*v).clone()).collect(),
        })
    }

    /// Prototype prior from support `(features, mask)` pairs.
    pub fn prototype_prior(&self, support: &[(&FeatureMap, &BinaryMask)]) -> Result<DiagonalGaussian> {
        let mut s = self.session();
        let pairs = s.feature_pairs(support)?;
        let g = s.prototype_prior(&pairs);
        s.gaussian(g)
    }

    /// Prototype posterior from support pairs plus the annotated query.
    pub fn prototype_posterior(&self, pairs: &[(&FeatureMap, &BinaryMask)]) -> Result<DiagonalGaussian> {
        let mut s = self.session();
        let pairs = s.feature_pairs(pairs)?;
        let g = s.prototype_posterior(&pairs);
        s.gaussian(g)
    }

    pub fn attention_prior(&self, features: &FeatureMap) -> Result<DiagonalGaussian> {
        let mut s = self.session();
        let f = s.feature_leaf(features)?;
        let g = s.attention_prior(f);
        s.gaussian(g)
    }

    pub fn attention_posterior(&self, features: &FeatureMap, mask: &BinaryMask) -> Result<DiagonalGaussian> {
        let mut s = self.session();
        let f = s.feature_leaf(features)?;
        let g = s.attention_posterior(f, mask);
        s.gaussian(g)
    }

    /// `[H, W, 2]` logits for a query encoding, an optional attention map and
    /// a prototype sample.
    pub fn decode(&self, query: &Encoding, attention: Option<&ProbMap>, z: &LatentSample) -> Result<Tensor> {
        if z.values.len() != self.config.prototype_dim {
            return Err(Error::dims("decode", self.config.prototype_dim, z.values.len()));
        }
        let mut s = self.session();
        let features = s.feature_leaf(&query.features)?;
        let skips = query.skips.iter().map(|t| s.tape.leaf(t.clone())).collect();
        let enc = Encoded { features, skips };
        let attn = match attention {
            Some(a) => {
                let (h, w) = self.config.feature_size();
                if a.height() != h || a.width() != w {
                    return Err(Error::dims("decode attention", h * w, a.height() * a.width()));
                }
                Some(s.tape.leaf(Tensor::new(vec![h, w], a.data().to_vec())))
            }
            None => None,
        };
        let zv = s.tape.leaf(Tensor::vector(z.values.clone()));
        let logits = s.decode(&enc, attn, zv);
        Ok(s.tape.value(logits).clone())
    }
}

/// A [`Model`] bound to a fresh [`Tape`]. Parameters become leaves on first
/// use.
pub struct Session<'m> {
    pub tape: Tape,
    model: &'m Model,
    bound: BTreeMap<&'m str, Var>,
}

impl<'m> Session<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    /// Leaf for parameter `name`.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let (key, value) = self
            .model
            .params
            .iter()
            .find(|(k, _)| k.as_str() == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let var = self.tape.leaf(value.clone());
        self.bound.insert(key.as_str(), var);
        var
    }

    /// Binds every parameter so that later [`Tape::truncate`] calls never
    /// drop one.
    pub fn bind_all(&mut self) {
        let names: Vec<&'m str> = self.model.params.iter().map(|(k, _)| k.as_str()).collect();
        for name in names {
            self.param(name);
        }
    }

    /// Gradients of every parameter; unused ones are zero.
    pub fn parameter_gradients(&self, grads: &mut Gradients) -> ParameterSet {
        let mut out = self.model.params.zeros_like();
        for (name, t) in out.iter_mut() {
            if let Some(g) = self.bound.get(name.as_str()).and_then(|v| grads.take(*v)) {
                *t = g;
            }
        }
        out
    }

    pub fn gaussian(&self, g: GaussianVars) -> Result<DiagonalGaussian> {
        DiagonalGaussian::new(
            self.tape.value(g.mean).data().to_vec(),
            self.tape.value(g.log_var).data().to_vec(),
        )
    }

    fn feature_map(&self, v: Var) -> FeatureMap {
        let t = self.tape.value(v);
        let s = t.shape();
        FeatureMap::new(s[0], s[1], s[2], t.data().to_vec()).expect("encoder output is well formed")
    }

    fn feature_leaf(&mut self, f: &FeatureMap) -> Result<Var> {
        let (h, w) = self.config().feature_size();
        let c = self.config().feature_channels();
        if (f.height(), f.width(), f.channels()) != (h, w, c) {
            return Err(Error::dims(
                "feature map",
                h * w * c,
                f.height() * f.width() * f.channels(),
            ));
        }
        Ok(self.tape.leaf(Tensor::new(vec![h, w, c], f.data().to_vec())))
    }

    fn feature_pairs<'a>(&mut self, pairs: &[(&FeatureMap, &'a BinaryMask)]) -> Result<Vec<(Var, &'a BinaryMask)>> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("at least one (features, mask) pair is required".into()));
        }
        pairs.iter().map(|(f, m)| Ok((self.feature_leaf(f)?, *m))).collect()
    }

    /// Runs the encoder on `image`.
    pub fn encode(&mut self, image: &Image) -> Result<Encoded> {
        let cfg = self.config();
        if (image.height(), image.width()) != (cfg.image_height, cfg.image_width) {
            return Err(Error::dims(
                "encode",
                cfg.image_height * cfg.image_width,
                image.height() * image.width(),
            ));
        }
        let centred = image.data().iter().map(|v| 2.0 * v - 1.0).collect();
        let input = self.tape.leaf(Tensor::new(vec![image.height(), image.width(), 3], centred));
        let mut skips = vec![input];
        let mut x = input;
        for i in 0..cfg.encoder_channels.len() {
            let stride = if i < cfg.downsample_layers { 2 } else { 1 };
            let w = self.param(&format!("encoder.{i}.weight"));
            let b = self.param(&format!("encoder.{i}.bias"));
            let y = self.tape.conv2d(x, w, b, stride);
            x = self.tape.silu(y);
            if i + 1 < cfg.downsample_layers {
                skips.push(x);
            }
        }
        skips.reverse();
        Ok(Encoded { features: x, skips })
    }

    /// Element-wise mean of equally shaped nodes, summed in an order fixed by
    /// their values so the result does not depend on the input order.
    pub fn set_mean(&mut self, mut vars: Vec<Var>) -> Var {
        vars.sort_by(|a, b| {
            let (a, b) = (self.tape.value(*a).data(), self.tape.value(*b).data());
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        self.tape.mean(&vars)
    }

    /// Masked average pooling of `[H', W', C]` features.
    pub fn pool(&mut self, features: Var, mask: &BinaryMask) -> Var {
        let s = self.tape.value(features).shape().to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        let flat = self.tape.reshape(features, vec![h * w, c]);
        self.tape.weighted_row_sum(flat, pooling_weights(mask, h, w))
    }

    fn mlp(&mut self, prefix: &str, mut x: Var, layers: usize) -> Var {
        for i in 0..layers {
            let w = self.param(&format!("{prefix}.{i}.weight"));
            let b = self.param(&format!("{prefix}.{i}.bias"));
            x = self.tape.linear(x, w, b);
            if i + 1 < layers {
                x = self.tape.silu(x);
            }
        }
        x
    }

    fn split(&mut self, out: Var, dim: usize) -> GaussianVars {
        GaussianVars {
            mean: self.tape.slice(out, 0, dim),
            log_var: self.tape.slice(out, dim, dim),
        }
    }

    /// Prior over the prototype from the pooled support features.
    pub fn prototype_prior(&mut self, support: &[(Var, &BinaryMask)]) -> GaussianVars {
        let pooled = support.iter().map(|(f, m)| self.pool(*f, m)).collect();
        let pooled = self.set_mean(pooled);
        let out = self.mlp("prototype_prior", pooled, 3);
        self.split(out, self.config().prototype_dim)
    }

    /// Posterior over the prototype from every annotated pair, query included.
    pub fn prototype_posterior(&mut self, pairs: &[(Var, &BinaryMask)]) -> GaussianVars {
        let outs = pairs
            .iter()
            .map(|(f, m)| {
                let pooled = self.pool(*f, m);
                self.mlp("prototype_posterior", pooled, 3)
            })
            .collect();
        let out = self.set_mean(outs);
        self.split(out, self.config().prototype_dim)
    }

    /// Prior over the attention vector from unannotated query features:
    /// one self-attention block, mean pooling and a two-layer perceptron.
    pub fn attention_prior(&mut self, features: Var) -> GaussianVars {
        let s = self.tape.value(features).shape().to_vec();
        let (n, c) = (s[0] * s[1], s[2]);
        let x = self.tape.reshape(features, vec![n, c]);
        let xn = self.tape.layer_norm_rows(x);
        let proj = |s: &mut Self, name: &str, input: Var| {
            let w = s.param(&format!("attention_prior.{name}.weight"));
            let b = s.param(&format!("attention_prior.{name}.bias"));
            s.tape.linear(input, w, b)
        };
        let q = proj(self, "query", xn);
        let k = proj(self, "key", xn);
        let v = proj(self, "value", xn);
        let scores = self.tape.matmul(q, k, true);
        let scores = self.tape.scale(scores, 1.0 / (c as f64).sqrt());
        let weights = self.tape.softmax_rows(scores);
        let mixed = self.tape.matmul(weights, v, false);
        let out = proj(self, "output", mixed);
        let y = self.tape.add(x, out);
        let pooled = self.tape.weighted_row_sum(y, vec![1.0 / n as f64; n]);
        let out = self.mlp("attention_prior.mlp", pooled, 2);
        self.split(out, self.config().attention_dim)
    }

    /// Posterior over the attention vector from the annotated query.
    pub fn attention_posterior(&mut self, features: Var, mask: &BinaryMask) -> GaussianVars {
        let pooled = self.pool(features, mask);
        let out = self.mlp("attention_posterior.mlp", pooled, 2);
        self.split(out, self.config().attention_dim)
    }

    /// `[H', W']` map `sigmoid(cos(e_ij, m))`.
    pub fn attention_map(&mut self, features: Var, m: Var) -> Var {
        self.tape.cosine_sigmoid(features, m)
    }

    /// Query logits `[H, W, 2]`. Without an attention map the features pass
    /// through unweighted. The stem sees the features, the tiled prototype
    /// and their per-pixel similarity.
    pub fn decode(&mut self, query: &Encoded, attention: Option<Var>, z: Var) -> Var {
        let cfg = self.config();
        let mut x = query.features;
        if let Some(a) = attention {
            x = self.tape.scale_rows(x, a);
        }
        let (h, w) = cfg.feature_size();
        let sim = self.tape.cosine_sigmoid(query.features, z);
        let sim = self.tape.reshape(sim, vec![h, w, 1]);
        x = self.tape.concat_tiled(x, z);
        x = self.tape.concat(x, sim);
        x = self.mlp("decoder.stem", x, 2);
        x = self.tape.silu(x);
        let blocks = cfg.downsample_layers;
        for (i, skip) in query.skips.iter().enumerate() {
            let up = self.tape.upsample2x(x);
            let joined = self.tape.concat(up, *skip);
            let w = self.param(&format!("decoder.up.{i}.weight"));
            let b = self.param(&format!("decoder.up.{i}.bias"));
            x = self.tape.conv2d(joined, w, b, 1);
            if i + 1 < blocks {
                x = self.tape.silu(x);
            }
        }
        x
    }

    /// Full training forward pass on one episode. Latents are drawn from the
    /// distributions selected by `source` with the given standard-normal
    /// noise; zero noise selects their means.
    pub fn forward_train(
        &mut self,
        episode: &Episode,
        source: LatentSource,
        noise_z: Vec<f64>,
        noise_m: Vec<f64>,
    ) -> Result<TrainForward> {
        let cfg = self.config();
        if noise_z.len() != cfg.prototype_dim {
            return Err(Error::dims("prototype noise", cfg.prototype_dim, noise_z.len()));
        }
        if noise_m.len() != cfg.attention_dim {
            return Err(Error::dims("attention noise", cfg.attention_dim, noise_m.len()));
        }
        if episode.support.is_empty() {
            return Err(Error::InvalidArgument("episode has no support samples".into()));
        }
        let support = self.encode_samples(&episode.support)?;
        let query = self.encode(&episode.query.image)?;
        let support_pairs: Vec<(Var, &BinaryMask)> = support
            .iter()
            .zip(&episode.support)
            .map(|(e, s)| (e.features, &s.mask))
            .collect();
        let mut all_pairs = support_pairs.clone();
        all_pairs.push((query.features, &episode.query.mask));

        let prototype_prior = self.prototype_prior(&support_pairs);
        let prototype_posterior = self.prototype_posterior(&all_pairs);
        let attention_prior = self.attention_prior(query.features);
        let attention_posterior = self.attention_posterior(query.features, &episode.query.mask);

        let (zd, md) = match source {
            LatentSource::Posterior => (prototype_posterior, attention_posterior),
            LatentSource::Prior => (prototype_prior, attention_prior),
        };
        let z = self.tape.reparameterize(zd.mean, zd.log_var, noise_z);
        let attention = if cfg.attention_enabled {
            let m = self.tape.reparameterize(md.mean, md.log_var, noise_m);
            Some(self.attention_map(query.features, m))
        } else {
            None
        };
        let logits = self.decode(&query, attention, z);
        Ok(TrainForward {
            logits,
            prototype_prior,
            prototype_posterior,
            attention_prior,
            attention_posterior,
        })
    }

    pub fn encode_samples(&mut self, samples: &[Sample]) -> Result<Vec<Encoded>> {
        samples.iter().map(|s| self.encode(&s.image)).collect()
    }
}
