//! Scene samples, the foreground/background composition algebra, dataset
//! storage and the synthetic scene generator.

mod io;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{validate, Result};
use crate::raster::{BBox, Mask, Raster};

pub use io::{load_dataset, save_dataset, MANIFEST_FILE};
pub(crate) use io::{read_png_rgb, write_png_rgb};
pub use synth::{
    render_scene, synth_scenes, synth_scenes_with, SceneGenConfig, SceneRenderParams, FOG_COLOR,
};

/// Camera placement on a sphere around the object, angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub elevation: f64,
    pub azimuth: f64,
    pub distance: f64,
}

impl CameraPose {
    /// Validates ranges; azimuth is wrapped into [0, 360).
    pub fn new(elevation: f64, azimuth: f64, distance: f64) -> Result<Self> {
        validate(distance.is_finite() && distance > 0.0, || {
            format!("camera distance must be positive, got {distance}")
        })?;
        validate((-90.0..=90.0).contains(&elevation), || {
            format!("elevation {elevation} outside [-90, 90]")
        })?;
        validate(azimuth.is_finite(), || "azimuth must be finite".into())?;
        Ok(CameraPose {
            elevation,
            azimuth: azimuth.rem_euclid(360.0),
            distance,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let checked = CameraPose::new(self.elevation, self.azimuth, self.distance)?;
        validate(checked.azimuth == self.azimuth, || {
            format!("azimuth {} outside [0, 360)", self.azimuth)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherParams {
    pub fog_density: f64,
    /// Sun altitude above the horizon in degrees.
    pub sun_altitude: f64,
}

impl WeatherParams {
    pub fn new(fog_density: f64, sun_altitude: f64) -> Result<Self> {
        let w = WeatherParams {
            fog_density,
            sun_altitude,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        validate((0.0..=1.0).contains(&self.fog_density), || {
            format!("fog density {} outside [0,1]", self.fog_density)
        })?;
        validate(self.sun_altitude.is_finite(), || "sun altitude must be finite".into())
    }
}

/// One view of the vehicle with its cutout mask and ground truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub image: Raster,
    pub mask: Mask,
    pub pose: CameraPose,
    pub weather: WeatherParams,
    pub gt_box: BBox,
}

impl SceneSample {
    pub fn validate(&self) -> Result<()> {
        validate(self.image.channels() == 3, || {
            format!("sample {}: image must be RGB", self.id)
        })?;
        self.image
            .ensure_mask_shape(&self.mask, &format!("sample {}", self.id))?;
        validate(self.image.in_unit_range(), || {
            format!("sample {}: image values outside [0,1]", self.id)
        })?;
        self.pose.validate()?;
        self.weather.validate()?;
        let b = &self.gt_box;
        validate(
            b.is_valid()
                && b.area() > 0.0
                && b.x_min >= 0.0
                && b.y_min >= 0.0
                && b.x_max <= self.image.width() as f64
                && b.y_max <= self.image.height() as f64,
            || format!("sample {}: gt box {b:?} outside image or empty", self.id),
        )
    }

    /// `B = I ⊙ (1 − M)` for this sample.
    pub fn background(&self) -> Raster {
        compose_background(&self.image, &self.mask).expect("validated sample")
    }

    /// `X_ref = I ⊙ M` for this sample.
    pub fn reference(&self) -> Raster {
        extract_foreground(&self.image, &self.mask).expect("validated sample")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub image_width: usize,
    pub image_height: usize,
    pub samples: Vec<String>,
    /// Distinct values present per sweep dimension.
    pub bins: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub samples: Vec<SceneSample>,
    pub manifest: Manifest,
}

impl SceneDataset {
    /// Builds a dataset and its manifest from samples.
    pub fn from_samples(samples: Vec<SceneSample>) -> Result<Self> {
        validate(!samples.is_empty(), || "dataset must not be empty".into())?;
        let (w, h) = (samples[0].image.width(), samples[0].image.height());
        for s in &samples {
            s.validate()?;
            validate(s.image.width() == w && s.image.height() == h, || {
                format!("sample {} has a different image size", s.id)
            })?;
        }
        let manifest = Manifest {
            format: "camo-scenes".into(),
            version: 1,
            image_width: w,
            image_height: h,
            samples: samples.iter().map(|s| s.id.clone()).collect(),
            bins: collect_bins(&samples),
            seed: None,
            config_hash: None,
        };
        Ok(SceneDataset { samples, manifest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A new dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut out = SceneDataset::from_samples(
            indices.iter().map(|&i| self.samples[i].clone()).collect(),
        )?;
        out.manifest.seed = self.manifest.seed;
        out.manifest.config_hash = self.manifest.config_hash.clone();
        Ok(out)
    }
}

fn collect_bins(samples: &[SceneSample]) -> BTreeMap<String, Vec<f64>> {
    let dims: [(&str, fn(&SceneSample) -> f64); 5] = [
        ("elevation", |s| s.pose.elevation),
        ("azimuth", |s| s.pose.azimuth),
        ("distance", |s| s.pose.distance),
        ("fog", |s| s.weather.fog_density),
        ("sun", |s| s.weather.sun_altitude),
    ];
    dims.iter()
        .map(|(name, get)| {
            let mut vals: Vec<f64> = samples.iter().map(get).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            (name.to_string(), vals)
        })
        .collect()
}

/// `B = I ⊙ (1 − M)`, per channel.
pub fn compose_background(image: &Raster, mask: &Mask) -> Result<Raster> {
    image.ensure_mask_shape(mask, "compose_background")?;
    Ok(masked(image, mask, false))
}

/// `X_ref = I ⊙ M`, per channel.
pub fn extract_foreground(image: &Raster, mask: &Mask) -> Result<Raster> {
    image.ensure_mask_shape(mask, "extract_foreground")?;
    Ok(masked(image, mask, true))
}

fn masked(image: &Raster, mask: &Mask, keep: bool) -> Raster {
    let ch = image.channels();
    let mut out = image.clone();
    for (p, &m) in mask.values().iter().enumerate() {
        if (m != 0) != keep {
            out.data_mut()[p * ch..(p + 1) * ch].fill(0.0);
        }
    }
    out
}

/// `I_out = clamp(X ⊙ M + B ⊙ (1 − M), 0, 1)`.
pub fn composite_output(rendered_fg: &Raster, background: &Raster, mask: &Mask) -> Result<Raster> {
    rendered_fg.ensure_same_shape(background, "composite_output")?;
    rendered_fg.ensure_mask_shape(mask, "composite_output")?;
    let ch = rendered_fg.channels();
    let mut out = background.clone();
    for (p, &m) in mask.values().iter().enumerate() {
        let span = p * ch..(p + 1) * ch;
        if m != 0 {
            out.data_mut()[span.clone()].copy_from_slice(&rendered_fg.data()[span]);
        }
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Gradient of `sum(upstream ⊙ composite_output(fg, bg, M))` with respect to `fg`.
pub fn composite_output_backward(
    rendered_fg: &Raster,
    mask: &Mask,
    upstream: &Raster,
) -> Result<Raster> {
    rendered_fg.ensure_same_shape(upstream, "composite_output_backward")?;
    rendered_fg.ensure_mask_shape(mask, "composite_output_backward")?;
    let ch = rendered_fg.channels();
    let mut grad = Raster::zeros(rendered_fg.width(), rendered_fg.height(), ch);
    for (p, &m) in mask.values().iter().enumerate() {
        if m == 0 {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let v = rendered_fg.data()[i];
            if (0.0..=1.0).contains(&v) {
                grad.data_mut()[i] = upstream.data()[i];
            }
        }
    }
    Ok(grad)
}
