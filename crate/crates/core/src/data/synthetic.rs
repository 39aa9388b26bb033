//! Procedural shape scenes standing in for annotated photographs.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::shapes::ShapeFamily;
use super::Sample;
use crate::error::{Error, Result};
use crate::math::BinaryMask;

pub const MIN_FOREGROUND: f64 = 0.01;
pub const MAX_FOREGROUND: f64 = 0.60;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
    Noise,
}

/// Appearance distribution of one synthetic class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub family: ShapeFamily,
    /// Diameter as a fraction of the image side.
    pub scale: (f64, f64),
    /// Hue centre in degrees and half-width of the jitter around it.
    pub hue: (f64, f64),
    pub saturation: (f64, f64),
    pub value: (f64, f64),
    pub texture: Texture,
}

impl ClassSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "class {} has scale range {:?} outside (0, 1)",
                self.class_id, self.scale
            )));
        }
        Ok(())
    }

    fn color(&self, rng: &mut impl Rng) -> [f64; 3] {
        let h = self.hue.0 + rng.random_range(-self.hue.1..=self.hue.1);
        let s = rng.random_range(self.saturation.0..=self.saturation.1);
        let v = rng.random_range(self.value.0..=self.value.1);
        hsv_to_rgb(h, s, v)
    }
}

/// Twelve classes, one per shape family. Hues are spread so that any
/// contiguous block of class ids covers distant parts of the colour wheel.
pub fn default_catalog() -> Vec<ClassSpec> {
    const TEXTURES: [Texture; 4] = [
        Texture::Flat,
        Texture::Stripes,
        Texture::Checker,
        Texture::Noise,
    ];
    ShapeFamily::ALL
        .iter()
        .enumerate()
        .map(|(id, &family)| ClassSpec {
            class_id: id,
            family,
            scale: (0.15, 0.45),
            hue: (((id * 5) % 12) as f64 * 30.0, 8.0),
            saturation: (0.55, 1.0),
            value: (0.6, 1.0),
            texture: TEXTURES[id % 4],
        })
        .collect()
}

pub fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Placement of one shape in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub family: ShapeFamily,
    pub center: (f64, f64),
    /// Radius in pixels.
    pub radius: f64,
    pub rotation: f64,
}

impl Placement {
    /// Pixel `(y, x)` is inside when its centre falls inside the shape.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.center.0) / self.radius;
        let dy = (y as f64 + 0.5 - self.center.1) / self.radius;
        let (s, c) = (-self.rotation).sin_cos();
        self.family.contains(c * dx - s * dy, s * dx + c * dy)
    }

    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let mut mask = BinaryMask::zeros(height, width);
        let y0 = (self.center.1 - self.radius).floor().max(0.0) as usize;
        let y1 = ((self.center.1 + self.radius).ceil().max(0.0) as usize).min(height);
        let x0 = (self.center.0 - self.radius).floor().max(0.0) as usize;
        let x1 = ((self.center.0 + self.radius).ceil().max(0.0) as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.covers(y, x) {
                    mask.set(y, x, true);
                }
            }
        }
        mask
    }
}

/// Renders samples of a class catalog at a fixed image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Renderer {
    pub height: usize,
    pub width: usize,
    pub catalog: Vec<ClassSpec>,
    pub max_distractors: usize,
}

impl Renderer {
    pub fn new(height: usize, width: usize, catalog: Vec<ClassSpec>) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::InvalidArgument(format!(
                "image size {height}x{width} is too small"
            )));
        }
        let mut ids: Vec<usize> = catalog.iter().map(|c| c.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != catalog.len() {
            return Err(Error::InvalidArgument("duplicate class ids in catalog".into()));
        }
        for spec in &catalog {
            spec.validate()?;
        }
        Ok(Renderer {
            height,
            width,
            catalog,
            max_distractors: 2,
        })
    }

    pub fn spec(&self, class_id: usize) -> Option<&ClassSpec> {
        self.catalog.iter().find(|c| c.class_id == class_id)
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.catalog.iter().map(|c| c.class_id).collect()
    }

    fn random_placement(&self, family: ShapeFamily, scale: (f64, f64), rng: &mut impl Rng) -> Placement {
        let side = self.height.min(self.width) as f64;
        let radius = rng.random_range(scale.0..=scale.1) * side / 2.0;
        // Keep at least 70% of the radius inside the frame.
        let margin = 0.7 * radius;
        let cx = rng.random_range(margin..=(self.width as f64 - margin).max(margin));
        let cy = rng.random_range(margin..=(self.height as f64 - margin).max(margin));
        Placement {
            family,
            center: (cx, cy),
            radius,
            rotation: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn background(&self, spec: &ClassSpec, rng: &mut impl Rng) -> Image {
        let base = rng.random_range(0.15..0.45);
        let tint = [
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ];
        let amplitude = 0.08;
        let period = rng.random_range(4.0..10.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let angle: f64 = rng.random_range(0.0..PI);
        let (sa, ca) = angle.sin_cos();
        let mut img = Image::filled(self.height, self.width, [0.0; 3]);
        for y in 0..self.height {
            for x in 0..self.width {
                let (fx, fy) = (x as f64, y as f64);
                let pattern = match spec.texture {
                    Texture::Flat => 0.0,
                    Texture::Stripes => (2.0 * PI * (ca * fx + sa * fy) / period + phase).sin(),
                    Texture::Checker => {
                        let cx = ((fx / period).floor() as i64 + (fy / period).floor() as i64) % 2;
                        if cx == 0 { 1.0 } else { -1.0 }
                    }
                    Texture::Noise => rng.random_range(-1.0..1.0),
                };
                let jitter = rng.random_range(-0.02..0.02);
                let g = base + amplitude * pattern + jitter;
                img.set_pixel(
                    y,
                    x,
                    [
                        (g + tint[0]).clamp(0.0, 1.0),
                        (g + tint[1]).clamp(0.0, 1.0),
                        (g + tint[2]).clamp(0.0, 1.0),
                    ],
                );
            }
        }
        img
    }

    fn paint(img: &mut Image, mask: &BinaryMask, color: [f64; 3], rng: &mut impl Rng) {
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(y, x) == 1 {
                    let j = rng.random_range(-0.03..0.03);
                    img.set_pixel(y, x, color.map(|c| (c + j).clamp(0.0, 1.0)));
                }
            }
        }
    }

    /// Draws the target shape of `spec` over a textured background with up
    /// to `max_distractors` shapes of other families painted underneath.
    pub fn render_sample(&self, spec: &ClassSpec, rng: &mut impl Rng) -> Result<Sample> {
        spec.validate()?;
        let (h, w) = (self.height, self.width);
        for _ in 0..MAX_ATTEMPTS {
            let target = self.random_placement(spec.family, spec.scale, rng);
            let mask = target.rasterize(h, w);
            let fraction = mask.foreground_fraction();
            if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction) {
                continue;
            }
            let mut image = self.background(spec, rng);
            let others: Vec<&ClassSpec> = self
                .catalog
                .iter()
                .filter(|c| c.family != spec.family)
                .collect();
            let n_distractors = if others.is_empty() {
                0
            } else {
                rng.random_range(0..=self.max_distractors)
            };
            for _ in 0..n_distractors {
                let other = others[rng.random_range(0..others.len())];
                let upper = other.scale.1.min(0.35).max(other.scale.0);
                let placement = self.random_placement(other.family, (other.scale.0, upper), rng);
                let color = other.color(rng);
                Self::paint(&mut image, &placement.rasterize(h, w), color, rng);
            }
            let color = spec.color(rng);
            Self::paint(&mut image, &mask, color, rng);
            return Ok(Sample {
                image,
                mask,
                class_id: spec.class_id,
            });
        }
        Err(Error::Generation(format!(
            "class {} ({}) missed the foreground bounds in {MAX_ATTEMPTS} attempts",
            spec.class_id, spec.family
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn renderer() -> Renderer {
        Renderer::new(64, 64, default_catalog()).unwrap()
    }

    #[test]
    fn same_seed_same_sample() {
        let r = renderer();
        for spec in &r.catalog {
            let a = r.render_sample(spec, &mut stream(42, 1)).unwrap();
            let b = r.render_sample(spec, &mut stream(42, 1)).unwrap();
            assert_eq!(a.image.to_rgb8(), b.image.to_rgb8());
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn circle_area_matches_analytic() {
        for s in [0.15, 0.25, 0.35, 0.45] {
            let radius = s * 64.0 / 2.0;
            let p = Placement {
                family: ShapeFamily::Circle,
                center: (32.0, 32.0),
                radius,
                rotation: 0.7,
            };
            let count = p.rasterize(64, 64).count() as f64;
            let expected = PI * radius * radius;
            assert!((count - expected).abs() / expected < 0.05, "s={s}: {count} vs {expected}");
        }
    }

    #[test]
    fn foreground_fraction_within_bounds() {
        let r = renderer();
        let mut rng = stream(9, 0);
        for i in 0..1000 {
            let spec = &r.catalog[i % r.catalog.len()];
            let s = r.render_sample(spec, &mut rng).unwrap();
            let f = s.mask.foreground_fraction();
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "{f}");
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn impossible_bounds_fail_after_retries() {
        let r = renderer();
        let mut spec = r.catalog[0].clone();
        spec.scale = (0.01, 0.02);
        let err = r.render_sample(&spec, &mut stream(1, 0)).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn invalid_catalogs_rejected() {
        let mut cat = default_catalog();
        cat[1].class_id = 0;
        assert!(Renderer::new(64, 64, cat).is_err());
        let mut cat = default_catalog();
        cat[0].scale = (0.2, 1.5);
        assert!(Renderer::new(64, 64, cat).is_err());
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0.0, 0.0, 1.0]);
    }
}
