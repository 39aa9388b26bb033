//! Image/mask folders on disk.
//!
//! Layout: `root/<class_name>/images/<id>.png` with a matching
//! `root/<class_name>/masks/<id>.png`. Masks are single-channel 8-bit and
//! binarised at 128.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use super::image::Image;
use super::{DatasetHandle, DatasetSource, Sample};
use crate::error::{Error, Result};
use crate::math::BinaryMask;

pub const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Debug)]
pub struct ExternalClass {
    pub name: String,
    pub class_id: usize,
    pub path: PathBuf,
    pub samples: Vec<Sample>,
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| dataset_err(path, format!("unreadable image: {e}")))
}

/// Loads every class folder under `root`, resizing to `(height, width)`.
/// Class ids follow the sorted folder names.
pub fn load_external_dataset(root: &Path, height: usize, width: usize) -> Result<DatasetHandle> {
    let mut classes = Vec::new();
    for class_dir in sorted_entries(root)? {
        if !class_dir.is_dir() {
            continue;
        }
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let images_dir = class_dir.join("images");
        let masks_dir = class_dir.join("masks");
        if !images_dir.is_dir() {
            return Err(dataset_err(&class_dir, "missing images/ folder"));
        }
        let class_id = classes.len();
        let mut samples = Vec::new();
        for image_path in sorted_entries(&images_dir)? {
            if image_path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let mask_path = masks_dir.join(image_path.file_name().expect("file entry"));
            if !mask_path.is_file() {
                return Err(dataset_err(&mask_path, "missing mask for image"));
            }
            let img = open(&image_path)?.to_rgb8();
            let mask = open(&mask_path)?.to_luma8();
            if img.dimensions() != mask.dimensions() {
                return Err(dataset_err(
                    &mask_path,
                    format!(
                        "mask is {:?} but image is {:?}",
                        mask.dimensions(),
                        img.dimensions()
                    ),
                ));
            }
            samples.push(Sample {
                image: resize_image(&img, height, width)?,
                mask: binarize(&mask).resize_nearest(height, width),
                class_id,
            });
        }
        if samples.len() < 2 {
            return Err(dataset_err(
                &class_dir,
                format!("class has {} samples, need at least 2", samples.len()),
            ));
        }
        classes.push(ExternalClass {
            name,
            class_id,
            path: class_dir,
            samples,
        });
    }
    if classes.is_empty() {
        return Err(dataset_err(root, "no class folders found"));
    }
    Ok(DatasetHandle {
        source: DatasetSource::External(classes),
        height,
        width,
    })
}

fn resize_image(img: &RgbImage, height: usize, width: usize) -> Result<Image> {
    let resized = if img.dimensions() == (width as u32, height as u32) {
        img.clone()
    } else {
        image::imageops::resize(img, width as u32, height as u32, FilterType::Triangle)
    };
    Image::from_rgb8(height, width, resized.as_raw())
}

fn binarize(mask: &GrayImage) -> BinaryMask {
    let (w, h) = mask.dimensions();
    let data = mask.as_raw().iter().map(|&v| u8::from(v >= MASK_THRESHOLD)).collect();
    BinaryMask::new(h as usize, w as usize, data).expect("dimensions from image")
}

/// Writes samples grouped by class name into the on-disk layout.
pub fn export_dataset(root: &Path, classes: &[(String, Vec<Sample>)]) -> Result<()> {
    for (name, samples) in classes {
        let images = root.join(name).join("images");
        let masks = root.join(name).join("masks");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        for (i, s) in samples.iter().enumerate() {
            let file = format!("{i:05}.png");
            let (h, w) = (s.image.height() as u32, s.image.width() as u32);
            let rgb = RgbImage::from_raw(w, h, s.image.to_rgb8()).expect("sized buffer");
            let path = images.join(&file);
            rgb.save(&path)
                .map_err(|e| dataset_err(&path, format!("write failed: {e}")))?;
            let gray = GrayImage::from_raw(w, h, s.mask.data().iter().map(|v| v * 255).collect())
                .expect("sized buffer");
            let path = masks.join(&file);
            gray.save(&path)
                .map_err(|e| dataset_err(&path, format!("write failed: {e}")))?;
        }
    }
    Ok(())
}
