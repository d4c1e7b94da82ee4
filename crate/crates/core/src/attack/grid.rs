//! Small single-anchor grid detector trained on synthesized scenes.
//!
//! Four 3x3 conv layers (three followed by 2x2 average pooling) feed a 1x1
//! head predicting, per grid cell, `(tx, ty, tw, th, objectness, classes…)`.
//! Box centers are `(cell + σ(t)) · stride`, sizes `anchor · exp(t)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Detection, DetectionGrad, Detector};
use crate::error::{validate, Error, Result};
use crate::evalkit::iou;
use crate::mesh::Mesh;
use crate::nn::{self, sigmoid, Adam, BlockCache, Conv2d, ConvBlock, Tensor};
use crate::raster::{BBox, Raster};
use crate::renderer::TextureImage;
use crate::scenedata::{synth_scenes_with, SceneGenConfig};

const LOG_SIZE_LIMIT: f64 = 4.0;
const COORDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridDetectorConfig {
    pub width: usize,
    pub num_classes: usize,
    /// Reference box side in pixels.
    pub anchor: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for GridDetectorConfig {
    fn default() -> Self {
        GridDetectorConfig {
            width: 8,
            num_classes: 1,
            anchor: 12.0,
            conf_threshold: 0.01,
            nms_iou: 0.5,
            seed: 0,
        }
    }
}

impl GridDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        validate(self.width > 0 && self.num_classes > 0, || {
            "detector width and num_classes must be positive".into()
        })?;
        validate(self.anchor > 0.0, || "detector anchor must be positive".into())?;
        validate((0.0..=1.0).contains(&self.conf_threshold), || {
            "detector conf_threshold must lie in [0,1]".into()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    blocks: Vec<ConvBlock>,
    head: Conv2d,
    len: usize,
}

impl Layout {
    fn new(cfg: &GridDetectorConfig) -> Self {
        let w = cfg.width;
        let mut n = 0;
        let chans = [(3, w), (w, 2 * w), (2 * w, 4 * w), (4 * w, 4 * w)];
        let blocks = chans
            .iter()
            .map(|&(i, o)| ConvBlock::alloc(i, o, 1, &mut n))
            .collect();
        let head = Conv2d::alloc(4 * w, COORDS + cfg.num_classes, 1, &mut n);
        Layout { blocks, head, len: n }
    }
}

struct Cache {
    blocks: Vec<BlockCache>,
    raw: Tensor,
    image_w: usize,
    image_h: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDetector {
    pub config: GridDetectorConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

impl GridDetector {
    pub fn new(config: GridDetectorConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for b in &layout.blocks {
            b.init(&mut params, &mut rng);
        }
        layout.head.init(&mut params, &mut rng);
        Ok(GridDetector {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: GridDetectorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        validate(params.len() == layout.len, || {
            format!("detector parameter count {} does not match config ({})", params.len(), layout.len)
        })?;
        Ok(GridDetector {
            config,
            params,
            layout,
        })
    }

    fn forward(&self, image: &Raster) -> Result<Cache> {
        validate(image.channels() == 3, || "detector expects an RGB image".into())?;
        validate(image.width() >= 8 && image.height() >= 8, || {
            "detector needs images of at least 8x8 pixels".into()
        })?;
        let p = &self.params;
        let mut cur = Tensor::from_raster(image);
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for (i, b) in self.layout.blocks.iter().enumerate() {
            let cache = b.forward(p, &cur);
            cur = if i < 3 {
                nn::avg_pool2(cache.output())
            } else {
                cache.output().clone()
            };
            blocks.push(cache);
        }
        let raw = self.layout.head.forward(p, &cur);
        Ok(Cache {
            blocks,
            raw,
            image_w: image.width(),
            image_h: image.height(),
        })
    }

    fn raw_at(raw: &Tensor, ch: usize, cell: usize) -> f64 {
        raw.data[ch * raw.h * raw.w + cell]
    }

    fn strides(cache: &Cache) -> (f64, f64) {
        (
            cache.image_w as f64 / cache.raw.w as f64,
            cache.image_h as f64 / cache.raw.h as f64,
        )
    }

    fn decode(&self, cache: &Cache, cell: usize) -> Detection {
        let raw = &cache.raw;
        let (sx, sy) = Self::strides(cache);
        let (gx, gy) = ((cell % raw.w) as f64, (cell / raw.w) as f64);
        let t = |ch| Self::raw_at(raw, ch, cell);
        let cx = (gx + sigmoid(t(0))) * sx;
        let cy = (gy + sigmoid(t(1))) * sy;
        let w = self.config.anchor * t(2).clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
        let h = self.config.anchor * t(3).clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
        let classes = (0..self.config.num_classes).map(|k| sigmoid(t(COORDS + k))).collect();
        Detection::new(
            BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
            sigmoid(t(4)),
            classes,
        )
    }

    /// Post-NMS detections with the grid cell each came from.
    fn detect_cells(&self, cache: &Cache) -> Vec<(Detection, usize)> {
        let cells = cache.raw.h * cache.raw.w;
        let score = |d: &Detection| d.objectness * d.class_conf[d.class_id];
        let mut cands: Vec<(Detection, usize)> = (0..cells)
            .map(|c| (self.decode(cache, c), c))
            .filter(|(d, _)| score(d) >= self.config.conf_threshold)
            .collect();
        cands.sort_by(|a, b| score(&b.0).total_cmp(&score(&a.0)).then(a.1.cmp(&b.1)));
        let mut kept: Vec<(Detection, usize)> = Vec::new();
        for (d, c) in cands {
            if kept.iter().all(|(k, _)| iou(&k.bbox, &d.bbox) <= self.config.nms_iou) {
                kept.push((d, c));
            }
        }
        kept
    }

    fn backward(&self, cache: &Cache, graw: &Tensor, grads: &mut [f64]) -> Tensor {
        let p = &self.params;
        let head_in = cache.blocks[3].output();
        let mut g = self.layout.head.backward(p, head_in, graw, grads);
        for i in (0..self.layout.blocks.len()).rev() {
            if i < 3 {
                let out = cache.blocks[i].output();
                g = nn::avg_pool2_backward(&g, out.h, out.w);
            }
            g = self.layout.blocks[i].backward(p, &cache.blocks[i], &g, grads);
        }
        g
    }

    /// Gradient of the per-cell outputs into the raw head tensor.
    fn raw_gradient(&self, cache: &Cache, cell: usize, up: &DetectionGrad) -> Tensor {
        let raw = &cache.raw;
        let (sx, sy) = Self::strides(cache);
        let t = |ch| Self::raw_at(raw, ch, cell);
        let mut g = Tensor::zeros(raw.c, raw.h, raw.w);
        let hw = raw.h * raw.w;
        let [d0, d1, d2, d3] = up.d_box;
        let dsig = |v: f64| {
            let s = sigmoid(v);
            s * (1.0 - s)
        };
        let size = |v: f64| {
            if v.abs() < LOG_SIZE_LIMIT {
                self.config.anchor * v.exp()
            } else {
                0.0
            }
        };
        g.data[cell] = (d0 + d2) * sx * dsig(t(0));
        g.data[hw + cell] = (d1 + d3) * sy * dsig(t(1));
        g.data[2 * hw + cell] = 0.5 * (d2 - d0) * size(t(2));
        g.data[3 * hw + cell] = 0.5 * (d3 - d1) * size(t(3));
        g.data[4 * hw + cell] = up.d_objectness * dsig(t(4));
        for (k, &dc) in up.d_class_conf.iter().enumerate() {
            g.data[(COORDS + k) * hw + cell] = dc * dsig(t(COORDS + k));
        }
        g
    }

    /// Training loss and parameter gradient for one labelled image.
    fn example_gradient(&self, image: &Raster, gt: &BBox) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward(image)?;
        let raw = &cache.raw;
        let (sx, sy) = Self::strides(&cache);
        let hw = raw.h * raw.w;
        let cx = 0.5 * (gt.x_min + gt.x_max) / sx;
        let cy = 0.5 * (gt.y_min + gt.y_max) / sy;
        let gx = (cx.floor().max(0.0) as usize).min(raw.w - 1);
        let gy = (cy.floor().max(0.0) as usize).min(raw.h - 1);
        let cell = gy * raw.w + gx;
        let targets = [
            (cx - gx as f64).clamp(0.0, 1.0),
            (cy - gy as f64).clamp(0.0, 1.0),
            (gt.width() / self.config.anchor).ln(),
            (gt.height() / self.config.anchor).ln(),
        ];
        let mut graw = Tensor::zeros(raw.c, raw.h, raw.w);
        let mut loss = 0.0;
        let bce = |z: f64, t: f64| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        for c in 0..hw {
            let z = raw.data[4 * hw + c];
            let (t, w) = if c == cell { (1.0, 1.0) } else { (0.0, 0.5) };
            loss += w * bce(z, t);
            graw.data[4 * hw + c] = w * (sigmoid(z) - t);
        }
        for (k, &target) in targets.iter().enumerate() {
            let z = raw.data[k * hw + cell];
            if k < 2 {
                let s = sigmoid(z);
                loss += (s - target).powi(2);
                graw.data[k * hw + cell] = 2.0 * (s - target) * s * (1.0 - s);
            } else {
                loss += (z - target).powi(2);
                graw.data[k * hw + cell] = 2.0 * (z - target);
            }
        }
        for k in 0..self.config.num_classes {
            let z = raw.data[(COORDS + k) * hw + cell];
            let t = if k == 0 { 1.0 } else { 0.0 };
            loss += bce(z, t);
            graw.data[(COORDS + k) * hw + cell] = sigmoid(z) - t;
        }
        let mut grads = vec![0.0; self.params.len()];
        self.backward(&cache, &graw, &mut grads);
        Ok((loss, grads))
    }
}

impl Detector for GridDetector {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn detect(&self, image: &Raster) -> Result<Vec<Detection>> {
        let cache = self.forward(image)?;
        Ok(self.detect_cells(&cache).into_iter().map(|(d, _)| d).collect())
    }

    fn detection_gradient(&self, image: &Raster, index: usize, upstream: &DetectionGrad) -> Result<Raster> {
        validate(upstream.d_class_conf.len() == self.config.num_classes, || {
            "class sensitivity length does not match the detector".into()
        })?;
        let cache = self.forward(image)?;
        let cells = self.detect_cells(&cache);
        let (_, cell) = cells
            .get(index)
            .ok_or_else(|| Error::Validation(format!("no detection with index {index}")))?;
        let graw = self.raw_gradient(&cache, *cell, upstream);
        let mut scratch = vec![0.0; self.params.len()];
        Ok(self.backward(&cache, &graw, &mut scratch).to_raster())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 30,
            lr: 0.005,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Renders every grid cell `rounds` times, cycling through `textures`, each
/// round on fresh backgrounds.
pub fn detector_training_set(
    config: &SceneGenConfig,
    mesh: &Mesh,
    textures: &[TextureImage],
    rounds: usize,
    seed: u64,
) -> Result<Vec<(Raster, BBox)>> {
    validate(!textures.is_empty(), || "at least one texture is required".into())?;
    let mut out = Vec::new();
    for round in 0..rounds {
        let ds = synth_scenes_with(config, mesh, seed.wrapping_add(round as u64), |i, _| {
            textures[(i + round) % textures.len()].clone()
        })?;
        out.extend(ds.samples.into_iter().map(|s| (s.image, s.gt_box)));
    }
    Ok(out)
}

/// Trains with Adam and returns the per-epoch mean loss.
pub fn train_grid_detector(
    detector: &mut GridDetector,
    examples: &[(Raster, BBox)],
    config: &DetectorTrainConfig,
) -> Result<Vec<f64>> {
    validate(!examples.is_empty(), || "detector training set is empty".into())?;
    validate(config.lr > 0.0 && config.batch_size > 0, || {
        "detector lr and batch_size must be positive".into()
    })?;
    let mut adam = Adam::new(config.lr, detector.params.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let det = &*detector;
            let parts = chunk
                .par_iter()
                .map(|&i| det.example_gradient(&examples[i].0, &examples[i].1))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = vec![0.0; detector.params.len()];
            for (loss, g) in &parts {
                total += loss;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b / parts.len() as f64;
                }
            }
            adam.step(&mut detector.params, &grads);
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                step: epoch,
                detail: "detector training loss".into(),
            });
        }
        log::info!("detector epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

pub const DETECTOR_FORMAT: &str = "camo-detector";
pub const DETECTOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDetectorCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: GridDetectorConfig,
    pub loss_history: Vec<f64>,
    pub params: Vec<f64>,
}

impl GridDetectorCheckpoint {
    pub fn new(detector: &GridDetector, loss_history: Vec<f64>) -> Self {
        GridDetectorCheckpoint {
            format: DETECTOR_FORMAT.into(),
            version: DETECTOR_VERSION,
            config: detector.config,
            loss_history,
            params: detector.params.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: GridDetectorCheckpoint = serde_json::from_slice(&bytes)?;
        validate(ck.format == DETECTOR_FORMAT && ck.version == DETECTOR_VERSION, || {
            format!("{}: not a version {DETECTOR_VERSION} detector checkpoint", path.display())
        })?;
        Ok(ck)
    }

    pub fn detector(&self) -> Result<GridDetector> {
        GridDetector::from_params(self.config, self.params.clone())
    }
}
