//! Dataset directory layout:
//!
//! ```text
//! manifest.json        ordered sample ids, image size, bins, seed, config hash
//! <id>_img.png         8-bit RGB, dequantized by /255 on load
//! <id>_mask.png        8-bit gray, thresholded at 0.5 on load
//! <id>_meta.json       {"pose": .., "weather": .., "gt_box": ..}
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{CameraPose, Manifest, SceneDataset, SceneSample, WeatherParams};
use crate::error::{Error, Result};
use crate::raster::{BBox, Mask, Raster};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    pose: CameraPose,
    weather: WeatherParams,
    gt_box: BBox,
}

pub(crate) fn to_rgb8(raster: &Raster) -> RgbImage {
    ImageBuffer::from_fn(raster.width() as u32, raster.height() as u32, |x, y| {
        let px = |c| (raster.get(x as usize, y as usize, c).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub(crate) fn write_png_rgb(raster: &Raster, path: &Path) -> Result<()> {
    to_rgb8(raster).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_png_rgb(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_fn(w as usize, h as usize, 3, |x, y, c| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let soft: Vec<f64> = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Mask::from_soft(w as usize, h as usize, &soft)
}

/// Writes the dataset in the directory layout described in the module docs.
pub fn save_dataset(dataset: &SceneDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &dataset.samples {
        write_png_rgb(&s.image, &dir.join(format!("{}_img.png", s.id)))?;
        write_mask(&s.mask, &dir.join(format!("{}_mask.png", s.id)))?;
        let meta = SampleMeta {
            pose: s.pose,
            weather: s.weather,
            gt_box: s.gt_box,
        };
        let path = dir.join(format!("{}_meta.json", s.id));
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&dataset.manifest)?)
        .map_err(|e| Error::io(&path, e))
}

/// Loads a dataset directory, materializing samples in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SceneDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for id in &manifest.samples {
        let file = |suffix: &str| -> Result<std::path::PathBuf> {
            let p = dir.join(format!("{id}_{suffix}"));
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::Load {
                    sample: id.clone(),
                    message: format!("missing file {}", p.display()),
                })
            }
        };
        let load_err = |e: Error| Error::Load {
            sample: id.clone(),
            message: e.to_string(),
        };
        let image = read_png_rgb(&file("img.png")?).map_err(load_err)?;
        let mask = read_mask(&file("mask.png")?).map_err(load_err)?;
        let meta_path = file("meta.json")?;
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: SampleMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Load {
            sample: id.clone(),
            message: e.to_string(),
        })?;
        image.ensure_mask_shape(&mask, &format!("sample {id}"))?;
        samples.push(SceneSample {
            id: id.clone(),
            image,
            mask,
            pose: meta.pose,
            weather: meta.weather,
            gt_box: meta.gt_box,
        });
    }
    let mut dataset = SceneDataset::from_samples(samples)?;
    dataset.manifest.seed = manifest.seed;
    dataset.manifest.config_hash = manifest.config_hash;
    Ok(dataset)
}
