//! Differentiable texture renderer.
//!
//! The reference [`ToyRenderer`] rasterizes a mesh with a per-pixel depth test
//! and perspective-correct barycentric UV interpolation, then samples the
//! texture bilinearly with clamp-to-edge addressing. There is no lighting:
//! each covered pixel is a fixed convex combination of at most four texels,
//! so the render is linear in the texture and its gradient is the transpose
//! of that combination. Faces are single-sided (back faces are culled).

use serde::{Deserialize, Serialize};

use crate::error::{validate, Result};
use crate::mesh::{Mesh, Vec2, Vec3};
use crate::raster::{Mask, Raster};
use crate::scenedata::CameraPose;

/// RGB UV-map texture with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct TextureImage(Raster);

impl TextureImage {
    pub fn new(pixels: Raster) -> Result<Self> {
        validate(pixels.channels() == 3, || "texture must have 3 channels".into())?;
        validate(pixels.width() > 0 && pixels.height() > 0, || {
            "texture must have positive dimensions".into()
        })?;
        validate(pixels.in_unit_range(), || "texture values must lie in [0,1]".into())?;
        Ok(TextureImage(pixels))
    }

    pub fn uniform(width: usize, height: usize, color: [f64; 3]) -> Self {
        TextureImage(Raster::from_fn(width, height, 3, |_, _, c| color[c]))
    }

    pub fn pixels(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::scenedata::write_png_rgb(&self.0, path.as_ref())
    }

    pub fn load_png(path: impl AsRef<std::path::Path>) -> Result<Self> {
        TextureImage::new(crate::scenedata::read_png_rgb(path.as_ref())?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub foreground: Raster,
    pub coverage_mask: Mask,
}

/// The rendering contract used by the attack pipeline.
pub trait Renderer: Send + Sync {
    fn render(&self, mesh: &Mesh, texture: &TextureImage, pose: &CameraPose) -> Result<RenderOutput>;

    /// Gradient of `sum(upstream * foreground)` with respect to texture pixels.
    fn render_gradient(
        &self,
        mesh: &Mesh,
        texture: &TextureImage,
        pose: &CameraPose,
        upstream: &Raster,
    ) -> Result<Raster>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Focal length in pixels.
    pub focal_px: f64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            image_width: 32,
            image_height: 32,
            focal_px: 40.0,
        }
    }
}

/// Pinhole camera looking at the world origin with +z up.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    position: Vec3,
    right: Vec3,
    up: Vec3,
    forward: Vec3,
    focal: f64,
    cx: f64,
    cy: f64,
}

const NEAR: f64 = 1e-3;

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn new(pose: &CameraPose, config: &RendererConfig) -> Self {
        let (el, az) = (pose.elevation.to_radians(), pose.azimuth.to_radians());
        let position = [
            pose.distance * el.cos() * az.cos(),
            pose.distance * el.cos() * az.sin(),
            pose.distance * el.sin(),
        ];
        let forward = normalize([-position[0], -position[1], -position[2]]);
        let world_up = if el.cos().abs() < 1e-9 {
            [-az.cos(), -az.sin(), 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let right = normalize(cross(forward, world_up));
        let up = cross(right, forward);
        Camera {
            position,
            right,
            up,
            forward,
            focal: config.focal_px,
            cx: config.image_width as f64 / 2.0,
            cy: config.image_height as f64 / 2.0,
        }
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    /// Projects a world point to `(x, y, depth)` in pixel coordinates, y down.
    pub fn project(&self, p: Vec3) -> [f64; 3] {
        let d = sub(p, self.position);
        let z = dot(d, self.forward);
        [
            self.cx + self.focal * dot(d, self.right) / z,
            self.cy - self.focal * dot(d, self.up) / z,
            z,
        ]
    }
}

/// Texel taps and weights for one covered pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelSample {
    pub face: usize,
    pub uv: Vec2,
    pub depth: f64,
    pub taps: [(usize, f64); 4],
}

/// The texture-to-image linear map for a fixed mesh, pose and texture size.
#[derive(Clone, Debug)]
pub struct RenderPlan {
    width: usize,
    height: usize,
    tex_width: usize,
    tex_height: usize,
    samples: Vec<Option<PixelSample>>,
}

/// Bilinear taps at `uv` with clamp-to-edge; v = 0 is the bottom texture row.
pub fn bilinear_taps(uv: Vec2, tex_width: usize, tex_height: usize) -> [(usize, f64); 4] {
    let tx = uv[0] * tex_width as f64 - 0.5;
    let ty = (1.0 - uv[1]) * tex_height as f64 - 0.5;
    let (x0, y0) = (tx.floor(), ty.floor());
    let (fx, fy) = (tx - x0, ty - y0);
    let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let xa = clampi(x0, tex_width);
    let xb = clampi(x0 + 1.0, tex_width);
    let ya = clampi(y0, tex_height);
    let yb = clampi(y0 + 1.0, tex_height);
    [
        (ya * tex_width + xa, (1.0 - fx) * (1.0 - fy)),
        (ya * tex_width + xb, fx * (1.0 - fy)),
        (yb * tex_width + xa, (1.0 - fx) * fy),
        (yb * tex_width + xb, fx * fy),
    ]
}

impl RenderPlan {
    pub fn build(
        mesh: &Mesh,
        pose: &CameraPose,
        config: &RendererConfig,
        tex_width: usize,
        tex_height: usize,
    ) -> Result<Self> {
        mesh.validate()?;
        validate(tex_width > 0 && tex_height > 0, || "texture must be non-empty".into())?;
        let camera = Camera::new(pose, config);
        let (w, h) = (config.image_width, config.image_height);
        let mut samples: Vec<Option<PixelSample>> = vec![None; w * h];

        for (fi, face) in mesh.faces.iter().enumerate() {
            let world = face.map(|i| mesh.vertices[i]);
            let normal = cross(sub(world[1], world[0]), sub(world[2], world[0]));
            if dot(normal, sub(camera.position, world[0])) <= 0.0 {
                continue;
            }
            let proj = world.map(|p| camera.project(p));
            if proj.iter().any(|p| p[2] <= NEAR) {
                continue;
            }
            let uvs = mesh.face_uv(fi);
            let area = edge(proj[0], proj[1], proj[2]);
            if area.abs() < 1e-12 {
                continue;
            }
            let xmin = proj.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let xmax = proj.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let ymin = proj.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let ymax = proj.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let px0 = (xmin - 0.5).ceil().max(0.0) as usize;
            let py0 = (ymin - 0.5).ceil().max(0.0) as usize;
            let px1 = ((xmax - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
            let py1 = ((ymax - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
            if px1 < 0.0 || py1 < 0.0 {
                continue;
            }
            for py in py0..=py1 as usize {
                for px in px0..=px1 as usize {
                    let p = [px as f64 + 0.5, py as f64 + 0.5, 0.0];
                    let b = [
                        edge(proj[1], proj[2], p) / area,
                        edge(proj[2], proj[0], p) / area,
                        edge(proj[0], proj[1], p) / area,
                    ];
                    if b.iter().any(|&v| v < -1e-12) {
                        continue;
                    }
                    // Perspective-correct weights.
                    let inv = [b[0] / proj[0][2], b[1] / proj[1][2], b[2] / proj[2][2]];
                    let inv_z = inv[0] + inv[1] + inv[2];
                    let depth = 1.0 / inv_z;
                    let slot = &mut samples[py * w + px];
                    if matches!(slot, Some(s) if s.depth <= depth) {
                        continue;
                    }
                    let wts = inv.map(|v| v * depth);
                    let uv = [
                        wts[0] * uvs[0][0] + wts[1] * uvs[1][0] + wts[2] * uvs[2][0],
                        wts[0] * uvs[0][1] + wts[1] * uvs[1][1] + wts[2] * uvs[2][1],
                    ];
                    *slot = Some(PixelSample {
                        face: fi,
                        uv,
                        depth,
                        taps: bilinear_taps(uv, tex_width, tex_height),
                    });
                }
            }
        }
        Ok(RenderPlan {
            width: w,
            height: h,
            tex_width,
            tex_height,
            samples,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[Option<PixelSample>] {
        &self.samples
    }

    pub fn coverage(&self) -> Mask {
        let covered: Vec<bool> = self.samples.iter().map(Option::is_some).collect();
        Mask::from_bools(self.width, self.height, &covered).expect("plan dimensions")
    }

    fn check_texture(&self, texture: &Raster) -> Result<()> {
        validate(
            texture.width() == self.tex_width
                && texture.height() == self.tex_height
                && texture.channels() == 3,
            || {
                format!(
                    "texture {}x{}x{} does not match plan {}x{}x3",
                    texture.width(),
                    texture.height(),
                    texture.channels(),
                    self.tex_width,
                    self.tex_height
                )
            },
        )
    }

    /// Samples a texture-shaped raster (values unchecked) through the plan.
    pub fn sample(&self, texture: &Raster) -> Result<Raster> {
        self.check_texture(texture)?;
        let tex = texture.data();
        let mut out = Raster::zeros(self.width, self.height, 3);
        let data = out.data_mut();
        for (p, s) in self.samples.iter().enumerate() {
            if let Some(s) = s {
                for c in 0..3 {
                    data[p * 3 + c] = s.taps.iter().map(|&(t, wt)| wt * tex[t * 3 + c]).sum();
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, texture: &TextureImage) -> Result<RenderOutput> {
        Ok(RenderOutput {
            foreground: self.sample(texture.pixels())?,
            coverage_mask: self.coverage(),
        })
    }

    /// Transpose of [`RenderPlan::sample`]: scatters pixel sensitivities onto texels.
    pub fn backward(&self, upstream: &Raster) -> Result<Raster> {
        validate(
            upstream.width() == self.width
                && upstream.height() == self.height
                && upstream.channels() == 3,
            || {
                format!(
                    "upstream {}x{}x{} does not match render {}x{}x3",
                    upstream.width(),
                    upstream.height(),
                    upstream.channels(),
                    self.width,
                    self.height
                )
            },
        )?;
        let up = upstream.data();
        let mut grad = Raster::zeros(self.tex_width, self.tex_height, 3);
        let g = grad.data_mut();
        for (p, s) in self.samples.iter().enumerate() {
            if let Some(s) = s {
                for &(t, wt) in &s.taps {
                    for c in 0..3 {
                        g[t * 3 + c] += wt * up[p * 3 + c];
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn edge(a: [f64; 3], b: [f64; 3], p: [f64; 3]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Reference rasterizer; see the module docs.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyRenderer {
    pub config: RendererConfig,
}

impl ToyRenderer {
    pub fn new(config: RendererConfig) -> Self {
        ToyRenderer { config }
    }

    pub fn plan(&self, mesh: &Mesh, pose: &CameraPose, texture: &TextureImage) -> Result<RenderPlan> {
        RenderPlan::build(mesh, pose, &self.config, texture.width(), texture.height())
    }
}

impl Renderer for ToyRenderer {
    fn render(&self, mesh: &Mesh, texture: &TextureImage, pose: &CameraPose) -> Result<RenderOutput> {
        self.plan(mesh, pose, texture)?.apply(texture)
    }

    fn render_gradient(
        &self,
        mesh: &Mesh,
        texture: &TextureImage,
        pose: &CameraPose,
        upstream: &Raster,
    ) -> Result<Raster> {
        self.plan(mesh, pose, texture)?.backward(upstream)
    }
}
