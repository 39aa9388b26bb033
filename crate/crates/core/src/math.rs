//! Value types and pure numerical operations on latent distributions and maps.
//!
//! Every function here is a plain function of its inputs. The differentiable
//! counterparts used during training live on [`crate::autodiff::Tape`] and
//! share the kernels in [`crate::autodiff::kernels`].

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};

/// Diagonal Gaussian stored as mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::dims("DiagonalGaussian::new", mean.len(), log_var.len()));
        }
        Ok(DiagonalGaussian { mean, log_var })
    }

    /// Builds from an explicit variance vector; every entry must be positive.
    pub fn from_variance(mean: Vec<f64>, variance: &[f64]) -> Result<Self> {
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!("variance {v} is not positive")));
        }
        Self::new(mean, variance.iter().map(|v| v.ln()).collect())
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| (0.5 * l).exp()).collect()
    }

    /// Log-density at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, l), x)| -HALF_LN_2PI - 0.5 * l - 0.5 * (x - m).powi(2) * (-l).exp())
            .sum()
    }
}

/// A reparameterised draw together with the noise that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub values: Vec<f64>,
    pub noise: Vec<f64>,
}

/// `[H, W, C]` grid of per-pixel feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(
                "FeatureMap::new",
                height * width * channels,
                data.len(),
            ));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("empty feature map".into()));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Per-pixel probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims("ProbMap::new", height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// `1` where the probability is at least `threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| u8::from(p >= threshold)).collect(),
        }
    }
}

/// Binary segmentation mask, entries exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims("BinaryMask::new", height * width, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    /// Nearest-neighbour resampling to `(height, width)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = nearest_index(y, height, self.height);
            for x in 0..width {
                let sx = nearest_index(x, width, self.width);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }
}

/// Source index of destination pixel `i` under nearest-neighbour resampling
/// with aligned pixel centres.
pub(crate) fn nearest_index(i: usize, dst: usize, src: usize) -> usize {
    let pos = (i as f64 + 0.5) * src as f64 / dst as f64;
    (pos.floor() as usize).min(src - 1)
}

/// Closed-form KL(q || p) between diagonal Gaussians.
pub fn kl_diag_gauss(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::dims("kl_diag_gauss", q.dim(), p.dim()));
    }
    let kl = kernels::kl_diag(&q.mean, &q.log_var, &p.mean, &p.log_var);
    // Rounding can leave a tiny negative value for nearly identical inputs.
    Ok(kl.max(0.0))
}

/// `g.mean + noise * sqrt(g.variance)`.
pub fn reparameterize(g: &DiagonalGaussian, noise: &[f64]) -> Result<LatentSample> {
    if noise.len() != g.dim() {
        return Err(Error::dims("reparameterize", g.dim(), noise.len()));
    }
    let values = g
        .mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((m, l), e)| m + e * (0.5 * l).exp())
        .collect();
    Ok(LatentSample {
        values,
        noise: noise.to_vec(),
    })
}

/// Stabilised cosine similarity, clamped to `[-1, 1]`; zero vectors give 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine_similarity", a.len(), b.len()));
    }
    Ok(kernels::cosine(a, b))
}

/// `sigmoid(cos(e_ij, r))` at every pixel of `e`.
pub fn attention_map(r: &LatentSample, e: &FeatureMap) -> Result<ProbMap> {
    if r.values.len() != e.channels {
        return Err(Error::dims("attention_map", e.channels, r.values.len()));
    }
    let data = e
        .data
        .chunks_exact(e.channels)
        .map(|px| kernels::sigmoid(kernels::cosine(px, &r.values)))
        .collect();
    ProbMap::new(e.height, e.width, data)
}

/// Per-pixel pooling weights of `mask` resampled to `(height, width)`:
/// `1/n` on the `n` foreground pixels, or uniform when none remain.
pub fn pooling_weights(mask: &BinaryMask, height: usize, width: usize) -> Vec<f64> {
    let small = mask.resize_nearest(height, width);
    let n = small.count();
    if n == 0 {
        vec![1.0 / (height * width) as f64; height * width]
    } else {
        small
            .data
            .iter()
            .map(|&v| if v == 1 { 1.0 / n as f64 } else { 0.0 })
            .collect()
    }
}

/// Mean feature vector over the mask foreground (mask downsampled to the
/// feature grid by nearest neighbour). An empty foreground falls back to the
/// global average.
pub fn masked_average_pool(f: &FeatureMap, mask: &BinaryMask) -> Vec<f64> {
    let weights = pooling_weights(mask, f.height, f.width);
    let mut out = vec![0.0; f.channels];
    for (px, w) in f.data.chunks_exact(f.channels).zip(&weights) {
        if *w != 0.0 {
            for (o, v) in out.iter_mut().zip(px) {
                *o += w * v;
            }
        }
    }
    out
}

/// Mean over pixels of `-log softmax(logits)[target]` for `[H, W, 2]` logits.
pub fn pixelwise_cross_entropy(logits: &[f64], target: &BinaryMask) -> Result<f64> {
    if logits.len() != 2 * target.data.len() {
        return Err(Error::dims(
            "pixelwise_cross_entropy",
            2 * target.data.len(),
            logits.len(),
        ));
    }
    Ok(kernels::cross_entropy2(logits, &target.data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_vec, stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_gaussian(rng: &mut impl Rng, dim: usize) -> DiagonalGaussian {
        let mean = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let log_var = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        DiagonalGaussian::new(mean, log_var).unwrap()
    }

    #[test]
    fn kl_of_identical_standard_normals_is_zero() {
        let g = DiagonalGaussian::standard(4);
        assert_eq!(kl_diag_gauss(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let q = DiagonalGaussian::new(vec![0.0], vec![0.0]).unwrap();
        let p = DiagonalGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_diag_gauss(&q, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        let q = DiagonalGaussian::standard(3);
        let p = DiagonalGaussian::standard(4);
        assert!(matches!(
            kl_diag_gauss(&q, &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kl_matches_monte_carlo_d8() {
        let mut rng = stream(11, 0);
        let q = random_gaussian(&mut rng, 8);
        let p = random_gaussian(&mut rng, 8);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = standard_normal_vec(&mut rng, 8);
            let x = reparameterize(&q, &eps).unwrap().values;
            acc += q.log_pdf(&x) - p.log_pdf(&x);
        }
        let mc = acc / n as f64;
        let exact = kl_diag_gauss(&q, &p).unwrap();
        assert!((mc - exact).abs() / exact < 0.02, "mc {mc} exact {exact}");
    }

    #[test]
    fn kl_is_additive_over_dimensions() {
        let mut rng = stream(3, 0);
        let q = random_gaussian(&mut rng, 6);
        let p = random_gaussian(&mut rng, 6);
        let parts: f64 = (0..6)
            .map(|d| {
                let q1 = DiagonalGaussian::new(vec![q.mean[d]], vec![q.log_var[d]]).unwrap();
                let p1 = DiagonalGaussian::new(vec![p.mean[d]], vec![p.log_var[d]]).unwrap();
                kl_diag_gauss(&q1, &p1).unwrap()
            })
            .sum();
        assert!((parts - kl_diag_gauss(&q, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_over_random_pairs() {
        let mut rng = stream(5, 0);
        for _ in 0..1000 {
            let dim = rng.random_range(1..10);
            let q = random_gaussian(&mut rng, dim);
            let p = random_gaussian(&mut rng, dim);
            assert!(kl_diag_gauss(&q, &p).unwrap() >= 0.0);
            assert_eq!(kl_diag_gauss(&q, &q).unwrap(), 0.0);
        }
    }

    #[test]
    fn reparameterize_examples() {
        let g = DiagonalGaussian::from_variance(vec![1.0, -2.0], &[4.0, 0.25]).unwrap();
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap().values, vec![1.0, -2.0]);
        let s = reparameterize(&g, &[1.0, 1.0]).unwrap();
        assert!((s.values[0] - 3.0).abs() < 1e-12);
        assert!((s.values[1] + 1.5).abs() < 1e-12);
        assert!(reparameterize(&g, &[1.0]).is_err());
    }

    #[test]
    fn reparameterized_mean_converges() {
        let g = DiagonalGaussian::from_variance(vec![0.5, -1.0, 2.0], &[0.3, 2.0, 1.0]).unwrap();
        let mut rng = stream(21, 0);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let eps = standard_normal_vec(&mut rng, 3);
            for (s, v) in sum.iter_mut().zip(reparameterize(&g, &eps).unwrap().values) {
                *s += v;
            }
        }
        for d in 0..3 {
            let se = (g.variance()[d] / n as f64).sqrt();
            assert!((sum[d] / n as f64 - g.mean[d]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn from_variance_rejects_nonpositive() {
        assert!(DiagonalGaussian::from_variance(vec![0.0], &[0.0]).is_err());
        assert!(DiagonalGaussian::from_variance(vec![0.0], &[-1.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-6);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn attention_map_examples() {
        let r = LatentSample {
            values: vec![1.0, 2.0],
            noise: vec![0.0, 0.0],
        };
        let e = FeatureMap::new(1, 3, 2, vec![1.0, 2.0, -1.0, -2.0, 2.0, -1.0]).unwrap();
        let m = attention_map(&r, &e).unwrap();
        assert!((m.get(0, 0) - 0.731_058_578_6).abs() < 1e-8);
        assert!((m.get(0, 1) - 0.268_941_421_4).abs() < 1e-8);
        assert!((m.get(0, 2) - 0.5).abs() < 1e-12);
        let bad = LatentSample {
            values: vec![1.0],
            noise: vec![0.0],
        };
        assert!(attention_map(&bad, &e).is_err());
    }

    #[test]
    fn attention_map_scale_invariant() {
        let mut rng = stream(8, 0);
        let data: Vec<f64> = (0..4 * 4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = FeatureMap::new(4, 4, 5, data).unwrap();
        let values: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = LatentSample {
            values: values.clone(),
            noise: vec![0.0; 5],
        };
        let r3 = LatentSample {
            values: values.iter().map(|v| v * 3.7).collect(),
            noise: vec![0.0; 5],
        };
        let a = attention_map(&r, &e).unwrap();
        let b = attention_map(&r3, &e).unwrap();
        // Equal up to the 1e-8 stabiliser in the denominator.
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn pooling_constant_map_returns_constant() {
        let v = [0.5, -2.0, 3.0];
        let data: Vec<f64> = (0..16).flat_map(|_| v).collect();
        let f = FeatureMap::new(4, 4, 3, data).unwrap();
        let mut mask = BinaryMask::zeros(8, 8);
        mask.set(2, 3, true);
        let pooled = masked_average_pool(&f, &mask);
        for (p, e) in pooled.iter().zip(v) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_empty_mask_is_global_average() {
        let data: Vec<f64> = (0..2 * 2 * 2).map(|i| i as f64).collect();
        let f = FeatureMap::new(2, 2, 2, data).unwrap();
        let pooled = masked_average_pool(&f, &BinaryMask::zeros(2, 2));
        assert_eq!(pooled, vec![3.0, 4.0]);
    }

    #[test]
    fn pooling_matches_brute_force() {
        let mut rng = stream(12, 0);
        let data: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = FeatureMap::new(4, 4, 3, data).unwrap();
        let fg = [(0, 1), (1, 1), (2, 3), (3, 0), (3, 3)];
        let mut mask = BinaryMask::zeros(4, 4);
        for (y, x) in fg {
            mask.set(y, x, true);
        }
        let mut expected = [0.0; 3];
        for (y, x) in fg {
            for c in 0..3 {
                expected[c] += f.pixel(y, x)[c];
            }
        }
        let pooled = masked_average_pool(&f, &mask);
        for c in 0..3 {
            assert!((pooled[c] - expected[c] / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_downsamples_mask_by_nearest_neighbour() {
        // 4x4 mask over a 2x2 grid: samples pixels (1,1), (1,3), (3,1), (3,3).
        let mut mask = BinaryMask::zeros(4, 4);
        mask.set(1, 3, true);
        mask.set(0, 0, true);
        let small = mask.resize_nearest(2, 2);
        assert_eq!(small.data(), &[0, 1, 0, 0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let target = BinaryMask::new(1, 2, vec![1, 0]).unwrap();
        assert!((pixelwise_cross_entropy(&[0.0; 4], &target).unwrap() - 2f64.ln()).abs() < 1e-12);
        // log-odds of ln((1 - 1e-7) / 1e-7) give the correct class p = 1 - 1e-7.
        let big = ((1.0 - 1e-7) / 1e-7f64).ln();
        let ce = pixelwise_cross_entropy(&[0.0, big, big, 0.0], &target).unwrap();
        assert!(ce < 1e-6);
        assert!(pixelwise_cross_entropy(&[0.0; 2], &target).is_err());
    }

    #[test]
    fn cross_entropy_matches_enumeration() {
        let logits: [f64; 8] = [0.3, -1.1, 2.0, 0.5, -0.4, -0.4, 1.7, 3.1];
        let target = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let mut expected = 0.0;
        for (px, &t) in logits.chunks(2).zip(target.data()) {
            let z: f64 = px[0].exp() + px[1].exp();
            expected -= (px[t as usize].exp() / z).ln();
        }
        expected /= 4.0;
        assert!((pixelwise_cross_entropy(&logits, &target).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn prob_map_thresholding() {
        let p = ProbMap::new(1, 3, vec![0.2, 0.5, 0.9]).unwrap();
        assert_eq!(p.threshold(0.5).data(), &[0, 1, 1]);
        assert!(ProbMap::new(1, 1, vec![1.5]).is_err());
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(
            seed in 0u64..1000,
            order in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let mut rng = stream(seed, 0);
            let data: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = FeatureMap::new(4, 4, 3, data).unwrap();
            let mask_bits: Vec<u8> = (0..16).map(|_| rng.random_range(0..2)).collect();
            let mask = BinaryMask::new(4, 4, mask_bits.clone()).unwrap();
            let reference = masked_average_pool(&f, &mask);
            // Visit foreground pixels in a shuffled order.
            let n = mask.count().max(1) as f64;
            let mut acc = [0.0; 3];
            for &i in &order {
                if mask_bits[i] == 1 || mask.count() == 0 {
                    let w = if mask.count() == 0 { 1.0 / 16.0 } else { 1.0 / n };
                    for c in 0..3 {
                        acc[c] += w * f.data()[i * 3 + c];
                    }
                }
            }
            for c in 0..3 {
                prop_assert!((acc[c] - reference[c]).abs() < 1e-12);
            }
        }
    }
}
