//! Deterministic synthetic scenes: a textured vehicle mesh over a procedural
//! background, lit by a directional sun and blended toward a fog color.
//!
//! Image formation per pixel, before 8-bit quantization:
//!
//! ```text
//! vehicle:    c = sun(alt) * shade(face) * texture(uv)
//! background: c = sun(alt) * background
//! final:      (1 - fog) * c + fog * fog_color
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CameraPose, SceneDataset, SceneSample, WeatherParams};
use crate::error::{validate, Error, Result};
use crate::fixtures::{vehicle_mesh_with, VehicleGeometry};
use crate::mesh::Mesh;
use crate::raster::{Mask, Raster};
use crate::renderer::{RenderPlan, RendererConfig, TextureImage};

pub const FOG_COLOR: [f64; 3] = [0.78, 0.8, 0.82];

/// Sun azimuth used for face shading, degrees.
const SUN_AZIMUTH: f64 = 135.0;
const AMBIENT: f64 = 0.45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub renderer: RendererConfig,
    pub elevations: Vec<f64>,
    pub azimuths: Vec<f64>,
    pub distances: Vec<f64>,
    pub fog_densities: Vec<f64>,
    pub sun_altitudes: Vec<f64>,
    pub fog_color: [f64; 3],
    /// Solid vehicle colors, cycled over samples in generation order.
    pub vehicle_colors: Vec<[f64; 3]>,
    pub texture_size: usize,
    pub geometry: VehicleGeometry,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            renderer: RendererConfig::default(),
            elevations: vec![10.0, 30.0],
            azimuths: vec![0.0, 90.0, 180.0, 270.0],
            distances: vec![8.0],
            fog_densities: vec![0.0],
            sun_altitudes: vec![45.0],
            fog_color: FOG_COLOR,
            vehicle_colors: vec![[0.55, 0.55, 0.55]],
            texture_size: 32,
            geometry: VehicleGeometry::default(),
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, grid) in [
            ("elevations", &self.elevations),
            ("azimuths", &self.azimuths),
            ("distances", &self.distances),
            ("fog_densities", &self.fog_densities),
            ("sun_altitudes", &self.sun_altitudes),
        ] {
            validate(!grid.is_empty(), || format!("scene grid `{name}` is empty"))?;
        }
        validate(!self.vehicle_colors.is_empty(), || {
            "scene config needs at least one vehicle color".into()
        })?;
        validate(self.texture_size > 0, || "texture_size must be positive".into())?;
        validate(
            self.renderer.image_width > 0 && self.renderer.image_height > 0,
            || "image size must be positive".into(),
        )
    }

    /// Every grid combination in generation order.
    pub fn grid(&self) -> Result<Vec<(CameraPose, WeatherParams)>> {
        let mut out = Vec::new();
        for &el in &self.elevations {
            for &az in &self.azimuths {
                for &d in &self.distances {
                    for &fog in &self.fog_densities {
                        for &sun in &self.sun_altitudes {
                            out.push((CameraPose::new(el, az, d)?, WeatherParams::new(fog, sun)?));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn render_params(&self) -> SceneRenderParams {
        SceneRenderParams {
            renderer: self.renderer,
            fog_color: self.fog_color,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SceneRenderParams {
    pub renderer: RendererConfig,
    pub fog_color: [f64; 3],
}

pub(crate) fn sun_brightness(altitude: f64) -> f64 {
    0.35 + 0.65 * altitude.clamp(0.0, 90.0).to_radians().sin()
}

fn face_shade(mesh: &Mesh, face: usize, sun_altitude: f64) -> f64 {
    let [a, b, c] = mesh.face_positions(face);
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let (alt, az) = (sun_altitude.to_radians(), SUN_AZIMUTH.to_radians());
    let l = [alt.cos() * az.cos(), alt.cos() * az.sin(), alt.sin()];
    let lambert = ((n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / len).max(0.0);
    AMBIENT + (1.0 - AMBIENT) * lambert
}

/// Procedural sky/ground background with a few box-shaped occluders.
fn background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Raster {
    let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64| {
        base.map(|v| (v + amp * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
    };
    let sky = jitter(rng, [0.55, 0.68, 0.85], 0.2);
    let ground = jitter(rng, [0.42, 0.4, 0.36], 0.2);
    let horizon = height as f64 * (0.3 + 0.2 * rng.random::<f64>());
    let mut img = Raster::from_fn(width, height, 3, |_, y, c| {
        let t = ((y as f64 + 0.5 - horizon) / 3.0).clamp(-1.0, 1.0) * 0.5 + 0.5;
        (1.0 - t) * sky[c] + t * ground[c]
    });
    for _ in 0..3 {
        let color = jitter(rng, [0.5, 0.5, 0.5], 0.6);
        let x0 = rng.random_range(0..width);
        let bw = rng.random_range(2..=width / 4 + 2);
        let bh = rng.random_range(2..=height / 3 + 2);
        let y1 = (horizon as usize + rng.random_range(0..3)).min(height);
        for y in y1.saturating_sub(bh)..y1 {
            for x in x0..(x0 + bw).min(width) {
                for c in 0..3 {
                    img.set(x, y, c, color[c]);
                }
            }
        }
    }
    img
}

/// Renders one scene and returns the quantized image with its vehicle mask.
pub fn render_scene(
    params: &SceneRenderParams,
    mesh: &Mesh,
    pose: &CameraPose,
    weather: &WeatherParams,
    texture: &TextureImage,
    rng: &mut ChaCha8Rng,
) -> Result<(Raster, Mask)> {
    let (w, h) = (params.renderer.image_width, params.renderer.image_height);
    let plan = RenderPlan::build(mesh, pose, &params.renderer, texture.width(), texture.height())?;
    let flat = plan.sample(texture.pixels())?;
    let mut img = background(w, h, rng);
    let sun = sun_brightness(weather.sun_altitude);
    let fog = weather.fog_density;
    for (p, s) in plan.samples().iter().enumerate() {
        let shade = s.map(|s| face_shade(mesh, s.face, weather.sun_altitude));
        for c in 0..3 {
            let i = p * 3 + c;
            let lit = match shade {
                Some(k) => sun * k * flat.data()[i],
                None => sun * img.data()[i],
            };
            img.data_mut()[i] = (1.0 - fog) * lit + fog * params.fog_color[c];
        }
    }
    Ok((img.quantize_u8(), plan.coverage()))
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Synthesizes the configured grid with solid vehicle colors.
pub fn synth_scenes(config: &SceneGenConfig, seed: u64) -> Result<SceneDataset> {
    config.validate()?;
    let mesh = vehicle_mesh_with(&config.geometry);
    let n = config.texture_size;
    let colors = config.vehicle_colors.clone();
    synth_scenes_with(config, &mesh, seed, move |i, _| {
        TextureImage::uniform(n, n, colors[i % colors.len()])
    })
}

/// Synthesizes the configured grid, asking `texture_for(index, rng)` for each
/// sample's vehicle texture. The rng is the sample's own stream.
pub fn synth_scenes_with<F>(
    config: &SceneGenConfig,
    mesh: &Mesh,
    seed: u64,
    texture_for: F,
) -> Result<SceneDataset>
where
    F: Fn(usize, &mut ChaCha8Rng) -> TextureImage + Sync,
{
    config.validate()?;
    let grid = config.grid()?;
    let params = config.render_params();
    let samples = grid
        .par_iter()
        .enumerate()
        .map(|(i, (pose, weather))| {
            let mut rng = sample_rng(seed, i);
            let texture = texture_for(i, &mut rng);
            let (image, mask) = render_scene(&params, mesh, pose, weather, &texture, &mut rng)?;
            let id = format!("s{i:04}");
            let gt_box = mask.bounding_box().ok_or_else(|| {
                Error::Validation(format!("sample {id}: vehicle not visible from {pose:?}"))
            })?;
            Ok(SceneSample {
                id,
                image,
                mask,
                pose: *pose,
                weather: *weather,
                gt_box,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dataset = SceneDataset::from_samples(samples)?;
    dataset.manifest.seed = Some(seed);
    Ok(dataset)
}
