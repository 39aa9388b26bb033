use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Every parameter shape is a function of this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of each 3x3 encoder convolution.
    pub encoder_channels: Vec<usize>,
    /// How many leading encoder layers use stride 2.
    pub downsample_layers: usize,
    /// Prototype latent dimension.
    pub prototype_dim: usize,
    /// Attention latent dimension; must equal the feature channel count.
    pub attention_dim: usize,
    /// Hidden width of the prior/posterior perceptrons.
    pub mlp_hidden: usize,
    /// Decoder widths: the 1x1 stem, then every up-block except the last,
    /// which always emits two logits.
    pub decoder_channels: Vec<usize>,
    pub attention_enabled: bool,
    /// Decode from prior means and drop the KL terms.
    pub deterministic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            encoder_channels: vec![16, 32, 64, 64],
            downsample_layers: 3,
            prototype_dim: 64,
            attention_dim: 64,
            mlp_hidden: 128,
            decoder_channels: vec![32, 32, 16],
            attention_enabled: true,
            deterministic: false,
        }
    }
}

impl ModelConfig {
    /// 8x8 images, four feature channels and four-dimensional latents.
    pub fn tiny() -> Self {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            encoder_channels: vec![3, 4, 4, 4],
            downsample_layers: 3,
            prototype_dim: 4,
            attention_dim: 4,
            mlp_hidden: 6,
            decoder_channels: vec![4, 3, 3],
            attention_enabled: true,
            deterministic: false,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated non-empty")
    }

    pub fn feature_size(&self) -> (usize, usize) {
        let f = 1 << self.downsample_layers;
        (self.image_height / f, self.image_width / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder needs at least one layer of positive width".into());
        }
        if self.downsample_layers == 0 || self.downsample_layers > self.encoder_channels.len() {
            return bad(format!(
                "downsample_layers {} must be in 1..={}",
                self.downsample_layers,
                self.encoder_channels.len()
            ));
        }
        let f = 1 << self.downsample_layers;
        if self.image_height % f != 0 || self.image_width % f != 0 || self.image_height == 0 {
            return bad(format!(
                "image size {}x{} must be a positive multiple of {f}",
                self.image_height, self.image_width
            ));
        }
        if self.attention_dim != self.feature_channels() {
            return bad(format!(
                "attention_dim {} must equal the feature channels {}",
                self.attention_dim,
                self.feature_channels()
            ));
        }
        if self.prototype_dim != self.feature_channels() {
            return bad(format!(
                "prototype_dim {} must equal the feature channels {}",
                self.prototype_dim,
                self.feature_channels()
            ));
        }
        if self.mlp_hidden == 0 {
            return bad("latent and hidden sizes must be positive".into());
        }
        if self.decoder_channels.len() != self.downsample_layers || self.decoder_channels.contains(&0) {
            return bad(format!(
                "decoder_channels needs {} positive entries (stem + {} blocks)",
                self.downsample_layers,
                self.downsample_layers - 1
            ));
        }
        Ok(())
    }

    /// Channel counts of the maps fed to each up-block as skip connections,
    /// coarsest first: the downsampled encoder maps, then the image itself.
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut skips: Vec<usize> = self.encoder_channels[..self.downsample_layers - 1]
            .iter()
            .rev()
            .copied()
            .collect();
        skips.push(3);
        skips
    }

    /// Every parameter array in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| shapes.push((name, shape));
        let mut cin = 3;
        for (i, &cout) in self.encoder_channels.iter().enumerate() {
            push(format!("encoder.{i}.weight"), vec![3, 3, cin, cout]);
            push(format!("encoder.{i}.bias"), vec![cout]);
            cin = cout;
        }
        let c = self.feature_channels();
        let h = self.mlp_hidden;
        let dz = self.prototype_dim;
        let dm = self.attention_dim;
        for head in ["prototype_prior", "prototype_posterior"] {
            for (i, (a, b)) in [(c, h), (h, h), (h, 2 * dz)].into_iter().enumerate() {
                push(format!("{head}.{i}.weight"), vec![a, b]);
                push(format!("{head}.{i}.bias"), vec![b]);
            }
        }
        for proj in ["query", "key", "value", "output"] {
            push(format!("attention_prior.{proj}.weight"), vec![c, c]);
            push(format!("attention_prior.{proj}.bias"), vec![c]);
        }
        for head in ["attention_prior", "attention_posterior"] {
            for (i, (a, b)) in [(c, h), (h, 2 * dm)].into_iter().enumerate() {
                push(format!("{head}.mlp.{i}.weight"), vec![a, b]);
                push(format!("{head}.mlp.{i}.bias"), vec![b]);
            }
        }
        let stem = self.decoder_channels[0];
        push("decoder.stem.0.weight".into(), vec![c + dz + 1, stem]);
        push("decoder.stem.0.bias".into(), vec![stem]);
        push("decoder.stem.1.weight".into(), vec![stem, stem]);
        push("decoder.stem.1.bias".into(), vec![stem]);
        let mut width = stem;
        for (i, skip) in self.skip_channels().into_iter().enumerate() {
            let out = self.decoder_channels.get(i + 1).copied().unwrap_or(2);
            push(format!("decoder.up.{i}.weight"), vec![3, 3, width + skip, out]);
            push(format!("decoder.up.{i}.bias"), vec![out]);
            width = out;
        }
        shapes
    }
}
