use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    adversarial_loss, adversarial_loss_derivative, best_detection, detection_score_grad, pgd_step,
    Detection, Detector,
};
use crate::efr::EfrModel;
use crate::error::{validate, Error, Result};
use crate::mesh::Mesh;
use crate::nn::Adam;
use crate::raster::Raster;
use crate::renderer::{Renderer, TextureImage};
use crate::scenedata::{composite_output, composite_output_backward, SceneDataset, SceneSample};
use crate::texgen::{
    clip_feature, encode_prompt, generate_texture, generate_texture_gradient, AdvFeature,
    GeneratorBackend, Matrix, Tau, TextFeature, DEFAULT_STEPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainPgd,
    AdamProjected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub prompt: String,
    pub tau: Tau,
    /// Step size; the Adam learning rate for `adam-projected`.
    pub eta: f64,
    pub epochs: usize,
    pub target_class: usize,
    pub seed: u64,
    pub optimizer_kind: OptimizerKind,
    pub batch_size: usize,
    pub n_adv: usize,
    /// Generator sampling steps.
    pub steps: usize,
    /// Stops early after this many updates.
    pub max_steps: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            prompt: "yellow black graffiti".into(),
            tau: Tau::Unbounded,
            eta: 0.01,
            epochs: 5,
            target_class: 0,
            seed: 0,
            optimizer_kind: OptimizerKind::AdamProjected,
            batch_size: 1,
            n_adv: 1,
            steps: DEFAULT_STEPS,
            max_steps: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        validate(self.eta > 0.0 && self.eta.is_finite(), || "eta must be positive".into())?;
        validate(self.epochs >= 1, || "epochs must be at least 1".into())?;
        validate(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        validate(self.n_adv >= 1, || "n_adv must be at least 1".into())?;
        validate(!self.prompt.trim().is_empty(), || "prompt must not be empty".into())
    }
}

/// The components a camouflage is optimized and evaluated through.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub generator: &'a dyn GeneratorBackend,
    pub mesh: &'a Mesh,
    pub renderer: &'a dyn Renderer,
    /// Without a model the flat render is composited directly.
    pub efr: Option<&'a EfrModel>,
    pub detector: &'a dyn Detector,
}

/// Forward (and optionally backward) result for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub detections: Vec<Detection>,
    pub ds: f64,
    pub loss: f64,
    /// `dL_adv/dT`, when requested.
    pub texture_grad: Option<Raster>,
}

impl Pipeline<'_> {
    /// `I_out` for a sample rendered with `texture`.
    pub fn compose(&self, sample: &SceneSample, texture: &TextureImage) -> Result<Raster> {
        Ok(self.compose_parts(sample, texture)?.0)
    }

    fn compose_parts(
        &self,
        sample: &SceneSample,
        texture: &TextureImage,
    ) -> Result<(Raster, Raster, Option<crate::efr::EfrCache>)> {
        let x_nr = self.renderer.render(self.mesh, texture, &sample.pose)?.foreground;
        let (x_ren, cache) = match self.efr {
            Some(m) => {
                let c = m.forward_cached(&sample.reference(), &x_nr)?;
                (c.output(), Some(c))
            }
            None => (x_nr, None),
        };
        let out = composite_output(&x_ren, &sample.background(), &sample.mask)?;
        Ok((out, x_ren, cache))
    }

    pub fn trace(
        &self,
        sample: &SceneSample,
        texture: &TextureImage,
        target_class: usize,
        with_grad: bool,
    ) -> Result<SampleTrace> {
        let run = || -> Result<SampleTrace> {
            let (image, x_ren, cache) = self.compose_parts(sample, texture)?;
            let detections = self.detector.detect(&image)?;
            let best = best_detection(&detections, &sample.gt_box, target_class);
            let ds = best.map_or(0.0, |(_, s)| s);
            let loss = adversarial_loss(ds);
            let texture_grad = match (with_grad, best) {
                (false, _) => None,
                (true, None) => Some(Raster::zeros(texture.width(), texture.height(), 3)),
                (true, Some((idx, _))) => {
                    let d_score = adversarial_loss_derivative(ds);
                    let up = detection_score_grad(&detections[idx], &sample.gt_box, target_class, d_score);
                    let g_img = self.detector.detection_gradient(&image, idx, &up)?;
                    let g_ren = composite_output_backward(&x_ren, &sample.mask, &g_img)?;
                    let g_nr = match (self.efr, &cache) {
                        (Some(m), Some(c)) => m.backward(c, &g_ren, None)?,
                        _ => g_ren,
                    };
                    Some(self.renderer.render_gradient(self.mesh, texture, &sample.pose, &g_nr)?)
                }
            };
            Ok(SampleTrace {
                detections,
                ds,
                loss,
                texture_grad,
            })
        };
        run().map_err(|e| e.context(format!("sample {}", sample.id)))
    }

    /// Mean `D_s` and mean `L_adv` over `dataset` for a fixed texture.
    pub fn mean_score(&self, dataset: &SceneDataset, texture: &TextureImage, target_class: usize) -> Result<(f64, f64)> {
        let traces = dataset
            .samples
            .par_iter()
            .map(|s| self.trace(s, texture, target_class, false))
            .collect::<Result<Vec<_>>>()?;
        let n = traces.len() as f64;
        Ok((
            traces.iter().map(|t| t.ds).sum::<f64>() / n,
            traces.iter().map(|t| t.loss).sum::<f64>() / n,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub mean_ds: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub texture: TextureImage,
    pub feature: AdvFeature,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    /// Dataset-wide mean `D_s` before the first and after the last update.
    pub initial_mean_ds: f64,
    pub final_mean_ds: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn optimize_camouflage(
    pipeline: &Pipeline<'_>,
    dataset: &SceneDataset,
    config: &AttackConfig,
) -> Result<AttackResult> {
    optimize_camouflage_from(pipeline, dataset, config, None)
}

/// Continues from `initial` (re-clipped to the configured τ) when given.
pub fn optimize_camouflage_from(
    pipeline: &Pipeline<'_>,
    dataset: &SceneDataset,
    config: &AttackConfig,
    initial: Option<AdvFeature>,
) -> Result<AttackResult> {
    config.validate()?;
    validate(!dataset.is_empty(), || "attack dataset is empty".into())?;
    let generator = pipeline.generator;
    let f_txt = encode_prompt(generator, &config.prompt)?;
    let mut f_adv = match initial {
        Some(f) => {
            validate(f.tokens.cols == generator.embed_dim(), || {
                "initial feature width does not match the generator".into()
            })?;
            clip_feature(&AdvFeature { tau: config.tau, ..f })
        }
        None => AdvFeature::zeros(config.n_adv, generator.embed_dim(), config.tau)?,
    };
    let texture_of = |f: &AdvFeature| generate_texture(generator, f, &f_txt, config.seed, config.steps);
    let (initial_mean_ds, initial_loss) =
        pipeline.mean_score(dataset, &texture_of(&f_adv)?, config.target_class)?;
    info!("attack start: mean D_s {initial_mean_ds:.5}");

    let mut adam = Adam::new(config.eta, f_adv.tokens.data.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let limit = config.max_steps.unwrap_or(usize::MAX);
    for epoch in 0..config.epochs {
        if steps.len() >= limit {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let first = steps.len();
        for chunk in order.chunks(config.batch_size) {
            if steps.len() >= limit {
                break;
            }
            let step = steps.len();
            let record = attack_step(pipeline, dataset, config, &f_txt, &mut f_adv, &mut adam, chunk, step, epoch)?;
            steps.push(record);
        }
        let taken = &steps[first..];
        if !taken.is_empty() {
            let n = taken.len() as f64;
            epochs.push(EpochSummary {
                epoch,
                mean_loss: taken.iter().map(|s| s.loss).sum::<f64>() / n,
                mean_ds: taken.iter().map(|s| s.mean_ds).sum::<f64>() / n,
            });
        }
    }

    let texture = texture_of(&f_adv)?;
    let (final_mean_ds, final_loss) = pipeline.mean_score(dataset, &texture, config.target_class)?;
    info!("attack end: mean D_s {final_mean_ds:.5} after {} steps", steps.len());
    Ok(AttackResult {
        texture,
        feature: f_adv,
        steps,
        epochs,
        initial_mean_ds,
        final_mean_ds,
        initial_loss,
        final_loss,
    })
}

/// Batch-mean `L_adv`, mean `D_s`, `∂L_adv/∂F_adv` and the per-sample traces
/// for the samples at `batch`.
pub fn feature_gradient(
    pipeline: &Pipeline<'_>,
    dataset: &SceneDataset,
    batch: &[usize],
    f_adv: &AdvFeature,
    f_txt: &TextFeature,
    config: &AttackConfig,
) -> Result<(f64, f64, Matrix, Vec<SampleTrace>)> {
    validate(!batch.is_empty(), || "empty batch".into())?;
    let generator = pipeline.generator;
    let texture = generate_texture(generator, f_adv, f_txt, config.seed, config.steps)?;
    let traces = batch
        .par_iter()
        .map(|&i| {
            let s = dataset
                .samples
                .get(i)
                .ok_or_else(|| Error::Validation(format!("sample index {i} out of range")))?;
            pipeline.trace(s, &texture, config.target_class, true)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = traces.len() as f64;
    let loss = traces.iter().map(|t| t.loss).sum::<f64>() / n;
    let mean_ds = traces.iter().map(|t| t.ds).sum::<f64>() / n;
    let mut g_tex = Raster::zeros(texture.width(), texture.height(), 3);
    for t in &traces {
        let g = t.texture_grad.as_ref().expect("gradient requested");
        for (a, b) in g_tex.data_mut().iter_mut().zip(g.data()) {
            *a += b / n;
        }
    }
    let grad = generate_texture_gradient(generator, f_adv, f_txt, config.seed, config.steps, &g_tex)?;
    Ok((loss, mean_ds, grad, traces))
}

#[allow(clippy::too_many_arguments)]
fn attack_step(
    pipeline: &Pipeline<'_>,
    dataset: &SceneDataset,
    config: &AttackConfig,
    f_txt: &TextFeature,
    f_adv: &mut AdvFeature,
    adam: &mut Adam,
    batch: &[usize],
    step: usize,
    epoch: usize,
) -> Result<StepRecord> {
    let (loss, mean_ds, grad, traces) = feature_gradient(pipeline, dataset, batch, f_adv, f_txt, config)
        .map_err(|e| e.context(format!("step {step}")))?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("loss {loss}; F_adv = {:?}", f_adv.tokens.data),
        });
    }
    let grad_norm = grad.norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient norm {grad_norm}; F_adv = {:?}", f_adv.tokens.data),
        });
    }
    if traces.iter().all(|t| t.detections.is_empty()) {
        warn!("step {step}: detector returned no boxes; gradient is zero");
    }
    *f_adv = match config.optimizer_kind {
        OptimizerKind::PlainPgd => pgd_step(f_adv, &grad, config.eta)?,
        OptimizerKind::AdamProjected => {
            let dir = Matrix {
                data: adam.direction(&grad.data),
                ..grad.clone()
            };
            pgd_step(f_adv, &dir, 1.0)?
        }
    };
    assert!(f_adv.satisfies_bound(), "clip bound violated after step {step}");
    Ok(StepRecord {
        step,
        epoch,
        loss,
        mean_ds,
        grad_norm,
    })
}
