//! Training-time augmentation: crop, scale, rotation, horizontal flip and
//! Gaussian blur. Geometric transforms are composed into one affine warp so
//! image and mask are resampled exactly once and stay aligned. A colour
//! channel permutation can also be shared by every sample of an episode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::synthetic::{MAX_FOREGROUND, MIN_FOREGROUND};
use super::Sample;
use crate::math::BinaryMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_crop: f64,
    pub p_rotate: f64,
    pub p_scale: f64,
    pub p_blur: f64,
    /// Fraction of the image area kept by a crop.
    pub crop_area: (f64, f64),
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub blur_sigma: (f64, f64),
    /// Permute RGB channels, identically for the supports and the query.
    pub episode_channel_permutation: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_crop: 0.5,
            p_rotate: 0.5,
            p_scale: 0.5,
            p_blur: 0.5,
            crop_area: (0.7, 1.0),
            max_rotation_deg: 20.0,
            scale_range: (0.85, 1.15),
            blur_sigma: (0.4, 1.0),
            episode_channel_permutation: true,
        }
    }
}

/// Concrete augmentation choices for one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    /// Kept side fraction and window centre in `[0, 1]` image coordinates.
    pub crop: Option<(f64, f64, f64)>,
    /// Radians.
    pub rotate: Option<f64>,
    pub scale: Option<f64>,
    pub blur: Option<f64>,
}

impl AugmentPlan {
    /// Each transform is switched on independently with its probability.
    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut plan = AugmentPlan::default();
        if rng.random_bool(cfg.p_crop) {
            let area = rng.random_range(cfg.crop_area.0..=cfg.crop_area.1);
            let side = area.sqrt();
            let half = side / 2.0;
            let cx = rng.random_range(half..=1.0 - half);
            let cy = rng.random_range(half..=1.0 - half);
            plan.crop = Some((side, cx, cy));
        }
        if rng.random_bool(cfg.p_scale) {
            plan.scale = Some(rng.random_range(cfg.scale_range.0..=cfg.scale_range.1));
        }
        if rng.random_bool(cfg.p_rotate) {
            let max = cfg.max_rotation_deg.to_radians();
            plan.rotate = Some(rng.random_range(-max..=max));
        }
        plan.flip = rng.random_bool(cfg.p_flip);
        if rng.random_bool(cfg.p_blur) {
            plan.blur = Some(rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1));
        }
        plan
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPlan::default()
    }

    /// Forward affine map (source pixel index -> output pixel index) as
    /// `[a, b, tx, c, d, ty]`.
    pub fn forward_affine(&self, height: usize, width: usize) -> [f64; 6] {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let mut m = IDENTITY;
        if let Some((side, wx, wy)) = self.crop {
            // Window centre -> image centre, magnified by 1/side.
            let ox = wx * width as f64 - 0.5;
            let oy = wy * height as f64 - 0.5;
            m = compose(&about(1.0 / side, 0.0, 0.0, 1.0 / side, ox, oy, cx, cy), &m);
        }
        if let Some(s) = self.scale {
            m = compose(&about(s, 0.0, 0.0, s, cx, cy, cx, cy), &m);
        }
        if let Some(a) = self.rotate {
            let (sn, cs) = a.sin_cos();
            m = compose(&about(cs, -sn, sn, cs, cx, cy, cx, cy), &m);
        }
        if self.flip {
            m = compose(&about(-1.0, 0.0, 0.0, 1.0, cx, cy, cx, cy), &m);
        }
        m
    }

    /// Output pixel index -> source position.
    pub fn inverse_affine(&self, height: usize, width: usize) -> [f64; 6] {
        invert(&self.forward_affine(height, width))
    }

    /// Applies the plan without any fallback.
    pub fn apply(&self, s: &Sample) -> Sample {
        let (h, w) = (s.image.height(), s.image.width());
        let (mut image, mask) = if self.flip && self.crop.is_none() && self.rotate.is_none() && self.scale.is_none() {
            flip_exact(s)
        } else if self.crop.is_none() && self.rotate.is_none() && self.scale.is_none() {
            (s.image.clone(), s.mask.clone())
        } else {
            warp(s, &self.inverse_affine(h, w))
        };
        if let Some(sigma) = self.blur {
            image = gaussian_blur(&image, sigma);
        }
        Sample {
            image,
            mask,
            class_id: s.class_id,
        }
    }
}

const IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Linear part `[[a, b], [c, d]]` applied about `from`, landing on `to`.
#[allow(clippy::too_many_arguments)]
fn about(a: f64, b: f64, c: f64, d: f64, fx: f64, fy: f64, tx: f64, ty: f64) -> [f64; 6] {
    [a, b, tx - a * fx - b * fy, c, d, ty - c * fx - d * fy]
}

/// `outer ∘ inner`.
fn compose(outer: &[f64; 6], inner: &[f64; 6]) -> [f64; 6] {
    let [a, b, e, c, d, f] = *outer;
    let [a2, b2, e2, c2, d2, f2] = *inner;
    [
        a * a2 + b * c2,
        a * b2 + b * d2,
        a * e2 + b * f2 + e,
        c * a2 + d * c2,
        c * b2 + d * d2,
        c * e2 + d * f2 + f,
    ]
}

fn invert(m: &[f64; 6]) -> [f64; 6] {
    let [a, b, e, c, d, f] = *m;
    let det = a * d - b * c;
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
    [ia, ib, -(ia * e + ib * f), ic, id, -(ic * e + id * f)]
}

fn apply_affine(m: &[f64; 6], x: f64, y: f64) -> (f64, f64) {
    (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
}

fn flip_exact(s: &Sample) -> (Image, BinaryMask) {
    let (h, w) = (s.image.height(), s.image.width());
    let mut image = s.image.clone();
    let mut mask = s.mask.clone();
    for y in 0..h {
        for x in 0..w {
            image.set_pixel(y, x, s.image.pixel(y, w - 1 - x));
            mask.set(y, x, s.mask.get(y, w - 1 - x) == 1);
        }
    }
    (image, mask)
}

fn warp(s: &Sample, inverse: &[f64; 6]) -> (Image, BinaryMask) {
    let (h, w) = (s.image.height(), s.image.width());
    let mut image = Image::filled(h, w, [0.0; 3]);
    let mut mask = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = apply_affine(inverse, x as f64, y as f64);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            let weights = [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ];
            let mut rgb = [0.0; 3];
            let mut m = 0.0;
            for (dx, dy, wgt) in weights {
                let ix = x0 as i64 + dx;
                let iy = y0 as i64 + dy;
                // Image clamps to the border; mask is zero outside.
                let cx = ix.clamp(0, w as i64 - 1) as usize;
                let cy = iy.clamp(0, h as i64 - 1) as usize;
                let p = s.image.pixel(cy, cx);
                for c in 0..3 {
                    rgb[c] += wgt * p[c];
                }
                if ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h {
                    m += wgt * f64::from(s.mask.get(iy as usize, ix as usize));
                }
            }
            image.set_pixel(y, x, rgb.map(|v| v.clamp(0.0, 1.0)));
            mask.set(y, x, m >= 0.5);
        }
    }
    (image, mask)
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (2.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (img.height(), img.width());
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (k, wgt) in kernel.iter().enumerate() {
                    let off = k as i64 - radius;
                    let (sx, sy) = if horizontal {
                        ((x as i64 + off).clamp(0, w as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + off).clamp(0, h as i64 - 1) as usize)
                    };
                    let p = src.pixel(sy, sx);
                    for c in 0..3 {
                        acc[c] += wgt * p[c];
                    }
                }
                out.set_pixel(y, x, acc);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

pub const CHANNEL_PERMUTATIONS: [[usize; 3]; 6] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Output channel `c` takes input channel `perm[c]`.
pub fn permute_channels(img: &Image, perm: [usize; 3]) -> Image {
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|px| perm.map(|c| px[c]))
        .collect();
    Image::new(img.height(), img.width(), data).expect("same size")
}

/// Draws and applies a plan. Returns the input unchanged when the augmented
/// mask leaves the valid foreground range (in particular when it is empty).
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let plan = AugmentPlan::draw(cfg, rng);
    let out = plan.apply(s);
    let fraction = out.mask.foreground_fraction();
    if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction) {
        out
    } else {
        s.clone()
    }
}
