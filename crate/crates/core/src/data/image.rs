use crate::error::{Error, Result};

/// RGB image, `[H, W, 3]` row-major with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dims("Image::new", height * width * 3, data.len()));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image {
            height,
            width,
            data,
        }
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

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bit-exact 8-bit quantisation used for PNG export.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}
