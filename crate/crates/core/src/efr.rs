//! Environment feature renderer: a small U-Net that turns a flat render into
//! an image carrying the lighting and atmosphere of a reference photograph.
//!
//! The network sees `concat(x_ref, x_nr)` and ends in a 1x1 conv and a
//! sigmoid. In residual mode the 1x1 conv output is added to `logit(x_nr)`
//! (inputs clamped to `[1e-3, 1 − 1e-3]`), so an untrained model is close to
//! copying the flat render.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validate, Error, Result};
use crate::mesh::Mesh;
use crate::nn::{self, Adam, BlockCache, Conv2d, ConvBlock, Tensor};
use crate::raster::{Mask, Raster};
use crate::renderer::{RenderPlan, TextureImage};
use crate::scenedata::{render_scene, CameraPose, SceneGenConfig, WeatherParams};
use crate::scenedata::extract_foreground;
use crate::texgen::{encode_prompt, generate_texture, AdvFeature, GeneratorBackend, Tau, DEFAULT_STEPS};

pub const BCE_EPS: f64 = 1e-6;
pub const CHECKPOINT_FORMAT: &str = "camo-efr";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfrConfig {
    /// Number of 2x downsampling steps.
    pub levels: usize,
    pub base_width: usize,
    pub convs_per_block: usize,
    /// Adds the network's logits to `logit(x_nr)` instead of predicting the
    /// output from scratch.
    pub residual: bool,
    pub seed: u64,
}

impl Default for EfrConfig {
    fn default() -> Self {
        EfrConfig {
            levels: 3,
            base_width: 16,
            convs_per_block: 2,
            residual: true,
            seed: 0,
        }
    }
}

impl EfrConfig {
    pub fn validate(&self) -> Result<()> {
        validate(self.base_width > 0, || "efr base_width must be positive".into())?;
        validate(self.convs_per_block > 0, || "efr convs_per_block must be positive".into())?;
        validate(self.levels <= 6, || "efr levels must be at most 6".into())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoders: Vec<ConvBlock>,
    decoders: Vec<ConvBlock>,
    head: Conv2d,
    len: usize,
}

impl Layout {
    fn new(cfg: &EfrConfig) -> Self {
        let mut n = 0;
        let width = |l: usize| cfg.base_width << l;
        let encoders = (0..=cfg.levels)
            .map(|l| {
                let in_c = if l == 0 { 6 } else { width(l - 1) };
                ConvBlock::alloc(in_c, width(l), cfg.convs_per_block, &mut n)
            })
            .collect();
        let decoders = (0..cfg.levels)
            .map(|l| ConvBlock::alloc(width(l + 1) + width(l), width(l), cfg.convs_per_block, &mut n))
            .collect();
        let head = Conv2d::alloc(width(0), 3, 1, &mut n);
        Layout {
            encoders,
            decoders,
            head,
            len: n,
        }
    }
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct EfrCache {
    enc: Vec<BlockCache>,
    dec: Vec<BlockCache>,
    top: Tensor,
    x_nr: Tensor,
    out: Tensor,
}

impl EfrCache {
    pub fn output(&self) -> Raster {
        self.out.to_raster()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfrModel {
    pub config: EfrConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

impl EfrModel {
    pub fn new(config: EfrConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for block in layout.encoders.iter().chain(&layout.decoders) {
            block.init(&mut params, &mut rng);
        }
        layout.head.init(&mut params, &mut rng);
        Ok(EfrModel {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: EfrConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        validate(params.len() == layout.len, || {
            format!("efr parameter count {} does not match config ({})", params.len(), layout.len)
        })?;
        Ok(EfrModel {
            config,
            params,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_inputs(x_ref: &Raster, x_nr: &Raster) -> Result<()> {
        x_ref.ensure_same_shape(x_nr, "efr_forward")?;
        validate(x_ref.channels() == 3, || "efr inputs must be RGB".into())
    }

    pub fn forward_cached(&self, x_ref: &Raster, x_nr: &Raster) -> Result<EfrCache> {
        Self::check_inputs(x_ref, x_nr)?;
        let p = &self.params;
        let lay = &self.layout;
        let x_nr = Tensor::from_raster(x_nr);
        let input = Tensor::concat(&[&Tensor::from_raster(x_ref), &x_nr]);
        let mut enc: Vec<BlockCache> = Vec::with_capacity(lay.encoders.len());
        let mut cur = input;
        for (l, block) in lay.encoders.iter().enumerate() {
            if l > 0 {
                cur = nn::avg_pool2(enc[l - 1].output());
                validate(cur.h > 0 && cur.w > 0, || {
                    "image too small for the configured efr depth".into()
                })?;
            }
            enc.push(block.forward(p, &cur));
        }
        let mut dec: Vec<BlockCache> = Vec::with_capacity(lay.decoders.len());
        let mut below = enc.last().expect("at least one encoder").output().clone();
        for l in (0..lay.decoders.len()).rev() {
            let skip = enc[l].output();
            let up = nn::upsample2(&below, skip.h, skip.w);
            let x = Tensor::concat(&[&up, skip]);
            let cache = lay.decoders[l].forward(p, &x);
            below = cache.output().clone();
            dec.push(cache);
        }
        let mut logits = lay.head.forward(p, &below);
        if self.config.residual {
            for (l, &x) in logits.data.iter_mut().zip(&x_nr.data) {
                *l += input_logit(x);
            }
        }
        let out = Tensor {
            data: logits.data.iter().map(|&v| nn::sigmoid(v)).collect(),
            ..logits
        };
        Ok(EfrCache {
            enc,
            dec,
            top: below,
            x_nr,
            out,
        })
    }

    /// `X_ren = EFR(X_ref, X_nr)`, values in (0,1).
    pub fn forward(&self, x_ref: &Raster, x_nr: &Raster) -> Result<Raster> {
        Ok(self.forward_cached(x_ref, x_nr)?.output())
    }

    /// Backpropagates `upstream = dL/dX_ren`. Returns `dL/dX_nr` and
    /// accumulates parameter gradients into `param_grads` when given.
    pub fn backward(
        &self,
        cache: &EfrCache,
        upstream: &Raster,
        param_grads: Option<&mut [f64]>,
    ) -> Result<Raster> {
        cache.output().ensure_same_shape(upstream, "efr backward")?;
        let up = Tensor::from_raster(upstream);
        let glogits = Tensor {
            data: cache
                .out
                .data
                .iter()
                .zip(&up.data)
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect(),
            ..cache.out
        };
        self.backward_logits(cache, glogits, param_grads)
    }

    /// Like [`EfrModel::backward`] but starting from the gradient with respect
    /// to the pre-sigmoid logits (CHW layout).
    fn backward_logits(
        &self,
        cache: &EfrCache,
        glogits: Tensor,
        param_grads: Option<&mut [f64]>,
    ) -> Result<Raster> {
        let mut scratch;
        let grads = match param_grads {
            Some(g) => g,
            None => {
                scratch = vec![0.0; self.params.len()];
                &mut scratch[..]
            }
        };
        let p = &self.params;
        let lay = &self.layout;
        let mut g = lay.head.backward(p, &cache.top, &glogits, grads);
        let levels = lay.decoders.len();
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; levels];
        for l in 0..levels {
            let i = levels - 1 - l;
            let gx = lay.decoders[l].backward(p, &cache.dec[i], &g, grads);
            let (gup, gskip) = gx.split(gx.c - cache.enc[l].output().c);
            skip_grads[l] = Some(gskip);
            let below = if i == 0 {
                cache.enc[levels].output()
            } else {
                cache.dec[i - 1].output()
            };
            g = nn::upsample2_backward(&gup, below.h, below.w);
        }
        for l in (0..lay.encoders.len()).rev() {
            if let Some(s) = skip_grads.get(l).and_then(Option::as_ref) {
                g.add_assign(s);
            }
            let gin = lay.encoders[l].backward(p, &cache.enc[l], &g, grads);
            g = if l == 0 {
                gin
            } else {
                let prev = cache.enc[l - 1].output();
                nn::avg_pool2_backward(&gin, prev.h, prev.w)
            };
        }
        let (_, mut g_nr) = g.split(3);
        if self.config.residual {
            for ((gn, &gl), &x) in g_nr.data.iter_mut().zip(&glogits.data).zip(&cache.x_nr.data) {
                *gn += gl * input_logit_derivative(x);
            }
        }
        Ok(g_nr.to_raster())
    }
}

const INPUT_EPS: f64 = 1e-3;

fn input_logit(x: f64) -> f64 {
    let x = x.clamp(INPUT_EPS, 1.0 - INPUT_EPS);
    (x / (1.0 - x)).ln()
}

fn input_logit_derivative(x: f64) -> f64 {
    if x > INPUT_EPS && x < 1.0 - INPUT_EPS {
        1.0 / (x * (1.0 - x))
    } else {
        0.0
    }
}

/// `W = H·W/S`; `None` when the mask is empty and the sample must be skipped.
pub fn efr_weight(x_ref: &Raster, mask: &Mask) -> Result<Option<f64>> {
    x_ref.ensure_mask_shape(mask, "efr_weight")?;
    let s = mask.count();
    if s == 0 {
        return Ok(None);
    }
    Ok(Some((x_ref.width() * x_ref.height()) as f64 / s as f64))
}

/// `weight · mean(BCE(clamp(x_ren), gt))`.
pub fn efr_loss(x_ren: &Raster, gt: &Raster, weight: f64) -> Result<f64> {
    Ok(efr_loss_with_grad(x_ren, gt, weight)?.0)
}

/// Loss together with its gradient with respect to `x_ren`. The gradient is
/// zero where the clamp is active.
pub fn efr_loss_with_grad(x_ren: &Raster, gt: &Raster, weight: f64) -> Result<(f64, Raster)> {
    x_ren.ensure_same_shape(gt, "efr_loss")?;
    let n = x_ren.data().len() as f64;
    let mut total = 0.0;
    let mut grad = Raster::zeros(x_ren.width(), x_ren.height(), x_ren.channels());
    for ((&x, &t), g) in x_ren.data().iter().zip(gt.data()).zip(grad.data_mut()) {
        let p = x.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        if x > BCE_EPS && x < 1.0 - BCE_EPS {
            *g = weight * (p - t) / (p * (1.0 - p)) / n;
        }
    }
    Ok((weight * total / n, grad))
}

/// Mean absolute error over vehicle pixels (all channels).
pub fn masked_mae(a: &Raster, b: &Raster, mask: &Mask) -> Result<f64> {
    a.ensure_same_shape(b, "masked_mae")?;
    a.ensure_mask_shape(mask, "masked_mae")?;
    let ch = a.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, &m) in mask.values().iter().enumerate() {
        if m != 0 {
            for c in 0..ch {
                sum += (a.data()[p * ch + c] - b.data()[p * ch + c]).abs();
            }
            n += ch;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct EfrBatch {
    pub x_ref: Raster,
    pub x_nr: Raster,
    pub gt: Raster,
    pub mask: Mask,
}

impl EfrBatch {
    pub fn validate(&self) -> Result<()> {
        self.x_ref.ensure_same_shape(&self.x_nr, "efr batch x_nr")?;
        self.x_ref.ensure_same_shape(&self.gt, "efr batch gt")?;
        self.x_ref.ensure_mask_shape(&self.mask, "efr batch mask")
    }

    /// MAE of the copy-`x_nr` baseline.
    pub fn identity_mae(&self) -> Result<f64> {
        masked_mae(&self.x_nr, &self.gt, &self.mask)
    }
}

/// Eight solid colors spread over hue and brightness.
pub fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [0.9, 0.15, 0.1],
        [0.1, 0.7, 0.2],
        [0.15, 0.25, 0.85],
        [0.95, 0.85, 0.2],
        [0.1, 0.1, 0.1],
        [0.95, 0.95, 0.95],
        [0.6, 0.3, 0.7],
        [0.2, 0.75, 0.8],
    ]
}

/// Solid palette colors followed by `textured` generator textures decoded
/// from random adversarial tokens (uniform in `[-1.5, 1.5]`) and `prompt`.
pub fn preset_textures(
    palette: &[[f64; 3]],
    texture_size: usize,
    generator: &dyn GeneratorBackend,
    prompt: &str,
    textured: usize,
    seed: u64,
) -> Result<Vec<TextureImage>> {
    let mut out: Vec<TextureImage> = palette
        .iter()
        .map(|&c| TextureImage::uniform(texture_size, texture_size, c))
        .collect();
    if textured > 0 {
        let f_txt = encode_prompt(generator, prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..textured {
            let mut adv = AdvFeature::zeros(1, generator.embed_dim(), Tau::Unbounded)?;
            for v in &mut adv.tokens.data {
                *v = 3.0 * (rng.random::<f64>() - 0.5);
            }
            out.push(generate_texture(generator, &adv, &f_txt, seed.wrapping_add(i as u64), DEFAULT_STEPS)?);
        }
    }
    Ok(out)
}

/// Builds training pairs by rendering every grid cell once with the reference
/// vehicle color (for `x_ref`) and once per preset texture (for `gt`), on the
/// same procedural background.
pub fn synth_efr_batches(
    config: &SceneGenConfig,
    mesh: &Mesh,
    presets: &[TextureImage],
    seed: u64,
) -> Result<Vec<EfrBatch>> {
    synth_efr_batches_at(config, &config.grid()?, mesh, presets, seed)
}

/// Like [`synth_efr_batches`] over an explicit list of views instead of the
/// configured grid; the remaining render settings come from `config`.
pub fn synth_efr_batches_at(
    config: &SceneGenConfig,
    grid: &[(CameraPose, WeatherParams)],
    mesh: &Mesh,
    presets: &[TextureImage],
    seed: u64,
) -> Result<Vec<EfrBatch>> {
    config.validate()?;
    validate(!presets.is_empty(), || "at least one preset texture is required".into())?;
    let params = config.render_params();
    let n = config.texture_size;
    let reference = TextureImage::uniform(n, n, config.vehicle_colors[0]);
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..presets.len()).map(move |t| (g, t)))
        .collect();
    let out = jobs
        .par_iter()
        .map(|&(g, t)| {
            let (pose, weather) = &grid[g];
            let bg_rng = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(g as u64);
                rng
            };
            let (ref_img, mask) = render_scene(&params, mesh, pose, weather, &reference, &mut bg_rng())?;
            let (gt_img, _) = render_scene(&params, mesh, pose, weather, &presets[t], &mut bg_rng())?;
            let plan = RenderPlan::build(mesh, pose, &params.renderer, presets[t].width(), presets[t].height())?;
            Ok(EfrBatch {
                x_ref: extract_foreground(&ref_img, &mask)?,
                x_nr: plan.sample(presets[t].pixels())?,
                gt: extract_foreground(&gt_img, &mask)?,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().filter(|b| b.mask.count() > 0).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.01,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate(self.lr > 0.0 && self.lr.is_finite(), || "lr must be positive".into())?;
        validate(self.batch_size > 0, || "batch_size must be positive".into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest test MAE.
    pub best: EfrModel,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: EfrModel,
    pub history: Vec<EpochRecord>,
}

/// Weighted loss and parameter gradient for one example; `None` when skipped.
///
/// The gradient is taken through sigmoid and BCE jointly, `W·(s − t)/n` per
/// logit, which ignores the operand clamp once the output saturates.
pub fn example_gradient(model: &EfrModel, batch: &EfrBatch) -> Result<Option<(f64, Vec<f64>)>> {
    let Some(weight) = efr_weight(&batch.x_ref, &batch.mask)? else {
        warn!("skipping efr sample with an empty vehicle mask");
        return Ok(None);
    };
    let cache = model.forward_cached(&batch.x_ref, &batch.x_nr)?;
    let loss = efr_loss(&cache.output(), &batch.gt, weight)?;
    let gt = Tensor::from_raster(&batch.gt);
    let scale = weight / gt.data.len() as f64;
    let glogits = Tensor {
        data: cache.out.data.iter().zip(&gt.data).map(|(s, t)| scale * (s - t)).collect(),
        ..cache.out
    };
    let mut grads = vec![0.0; model.param_count()];
    model.backward_logits(&cache, glogits, Some(&mut grads))?;
    Ok(Some((loss, grads)))
}

/// Mean masked MAE of the model over `set`.
pub fn evaluate_mae(model: &EfrModel, set: &[EfrBatch]) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let maes = set
        .par_iter()
        .map(|b| masked_mae(&model.forward(&b.x_ref, &b.x_nr)?, &b.gt, &b.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(maes.iter().sum::<f64>() / maes.len() as f64)
}

/// Trains with Adam on shuffled mini-batches. `history` from a previous run is
/// extended, and epoch numbering continues from it.
pub fn train_efr(
    model: EfrModel,
    train: &[EfrBatch],
    test: &[EfrBatch],
    config: &TrainConfig,
    previous: &[EpochRecord],
) -> Result<TrainOutcome> {
    config.validate()?;
    validate(!train.is_empty(), || "efr training set is empty".into())?;
    for b in train.iter().chain(test) {
        b.validate()?;
    }
    let mut model = model;
    let mut adam = Adam::new(config.lr, model.param_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = previous.to_vec();
    let start = previous.len();
    let mut best = (f64::INFINITY, model.clone(), start);
    if let Some(r) = previous.iter().min_by(|a, b| a.test_mae.total_cmp(&b.test_mae)) {
        best.0 = r.test_mae;
        best.2 = r.epoch;
    }
    for epoch in start..start + config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let results = chunk
                .par_iter()
                .map(|&i| example_gradient(&model, &train[i]))
                .collect::<Result<Vec<_>>>()?;
            let used: Vec<_> = results.into_iter().flatten().collect();
            if used.is_empty() {
                continue;
            }
            let mut grads = vec![0.0; model.param_count()];
            for (loss, g) in &used {
                loss_sum += loss;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
            }
            counted += used.len();
            let scale = 1.0 / used.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut model.params, &grads);
        }
        if counted == 0 {
            return Err(Error::Validation("every efr training sample has an empty mask".into()));
        }
        let train_loss = loss_sum / counted as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite {
                step: epoch,
                detail: "efr training loss".into(),
            });
        }
        let test_mae = evaluate_mae(&model, if test.is_empty() { train } else { test })?;
        log::info!("efr epoch {epoch}: loss {train_loss:.6} test mae {test_mae:.6}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            test_mae,
        });
        if test_mae < best.0 {
            best = (test_mae, model.clone(), epoch);
        }
    }
    Ok(TrainOutcome {
        best: best.1,
        best_epoch: best.2,
        last: model,
        history,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: EfrConfig,
    best_epoch: Option<usize>,
    history: Vec<EpochRecord>,
    params: Vec<f64>,
}

/// A model with its training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EfrCheckpoint {
    pub model: EfrModel,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

impl EfrCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
            params: self.model.params.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)?;
        validate(file.format == CHECKPOINT_FORMAT, || {
            format!("{}: not an efr checkpoint (format {:?})", path.display(), file.format)
        })?;
        validate(file.version == CHECKPOINT_VERSION, || {
            format!("{}: unsupported efr checkpoint version {}", path.display(), file.version)
        })?;
        Ok(EfrCheckpoint {
            model: EfrModel::from_params(file.config, file.params)?,
            best_epoch: file.best_epoch,
            history: file.history,
        })
    }
}
