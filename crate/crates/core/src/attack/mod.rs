//! Adversarial objective, clipped updates and the camouflage optimization loop.

mod analytic;
mod dual;
mod grid;
mod optimize;

use serde::{Deserialize, Serialize};

use crate::error::{validate, Result};
use crate::raster::{BBox, Raster};
use crate::texgen::{clip_feature, AdvFeature, Matrix};

pub use analytic::AnalyticDetector;
pub use grid::{
    detector_training_set, train_grid_detector, DetectorTrainConfig, GridDetector,
    GridDetectorCheckpoint, GridDetectorConfig,
};
pub use optimize::{
    feature_gradient, optimize_camouflage, optimize_camouflage_from, AttackConfig, AttackResult, EpochSummary,
    OptimizerKind, Pipeline, SampleTrace, StepRecord,
};

pub const LOSS_EPS: f64 = 1e-6;

/// One detector output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    pub class_conf: Vec<f64>,
    /// Index of the most confident class.
    pub class_id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, objectness: f64, class_conf: Vec<f64>) -> Self {
        let class_id = class_conf
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
            .0;
        Detection {
            bbox,
            objectness,
            class_conf,
            class_id,
        }
    }

    /// `D_o · D_c[target]`, the ranking confidence.
    pub fn confidence(&self, target_class: usize) -> f64 {
        self.objectness * self.class_conf.get(target_class).copied().unwrap_or(0.0)
    }
}

/// Sensitivities of a scalar with respect to one detection's outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionGrad {
    /// Order `x_min, y_min, x_max, y_max`.
    pub d_box: [f64; 4],
    pub d_objectness: f64,
    pub d_class_conf: Vec<f64>,
}

/// A differentiable object detector.
pub trait Detector: Send + Sync {
    fn num_classes(&self) -> usize;

    fn detect(&self, image: &Raster) -> Result<Vec<Detection>>;

    /// Gradient with respect to image pixels of
    /// `d_box·box + d_objectness·D_o + d_class_conf·D_c` for detection `index`
    /// of `detect(image)`. The detection set is held fixed.
    fn detection_gradient(&self, image: &Raster, index: usize, upstream: &DetectionGrad) -> Result<Raster>;
}

/// Intersection over union and its gradient with respect to the first box.
pub fn iou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let ix0 = a.x_min.max(b.x_min);
    let iy0 = a.y_min.max(b.y_min);
    let ix1 = a.x_max.min(b.x_max);
    let iy1 = a.y_max.min(b.y_max);
    let (iw, ih) = (ix1 - ix0, iy1 - iy0);
    let aw = a.x_max - a.x_min;
    let ah = a.y_max - a.y_min;
    let area_a = aw * ah;
    let area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    // d(area_a)/d(coords)
    let da = [-ah, -aw, ah, aw];
    let mut di = [0.0; 4];
    if inter > 0.0 {
        if a.x_min > b.x_min {
            di[0] = -ih;
        }
        if a.y_min > b.y_min {
            di[1] = -iw;
        }
        if a.x_max < b.x_max {
            di[2] = ih;
        }
        if a.y_max < b.y_max {
            di[3] = iw;
        }
    }
    let mut g = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        g[k] = (di[k] * union - inter * du) / (union * union);
    }
    (iou, g)
}

/// `IoU(D_b, gt) · D_c[target] · D_o` for one detection.
pub fn detection_product(d: &Detection, gt: &BBox, target_class: usize) -> f64 {
    iou_with_grad(&d.bbox, gt).0 * d.confidence(target_class)
}

/// Index and value of the highest-scoring detection.
pub fn best_detection(detections: &[Detection], gt: &BBox, target_class: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in detections.iter().enumerate() {
        let s = detection_product(d, gt, target_class);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

/// `D_s`: the maximum product over detections, 0 when there are none.
pub fn detection_score(detections: &[Detection], gt: &BBox, target_class: usize) -> f64 {
    best_detection(detections, gt, target_class).map_or(0.0, |(_, s)| s)
}

/// `L_adv = −ln(1 − min(D_s, 1 − ε))`.
pub fn adversarial_loss(ds_max: f64) -> f64 {
    -(1.0 - ds_max.min(1.0 - LOSS_EPS)).ln()
}

/// `dL_adv/dD_s`; zero where the guard is active.
pub fn adversarial_loss_derivative(ds_max: f64) -> f64 {
    if ds_max < 1.0 - LOSS_EPS {
        1.0 / (1.0 - ds_max)
    } else {
        0.0
    }
}

/// Chain rule from `D_s` of detection `d` to its outputs.
pub fn detection_score_grad(d: &Detection, gt: &BBox, target_class: usize, d_score: f64) -> DetectionGrad {
    let (iou, g_iou) = iou_with_grad(&d.bbox, gt);
    let dc = d.class_conf.get(target_class).copied().unwrap_or(0.0);
    let mut d_class_conf = vec![0.0; d.class_conf.len()];
    if target_class < d_class_conf.len() {
        d_class_conf[target_class] = d_score * iou * d.objectness;
    }
    DetectionGrad {
        d_box: g_iou.map(|g| d_score * g * dc * d.objectness),
        d_objectness: d_score * iou * dc,
        d_class_conf,
    }
}

/// `κ(F − η·grad)`: a descent step on the minimized loss followed by the clip.
pub fn pgd_step(f_adv: &AdvFeature, grad: &Matrix, eta: f64) -> Result<AdvFeature> {
    validate(grad.same_shape(&f_adv.tokens), || {
        format!(
            "gradient shape {}x{} does not match feature {}x{}",
            grad.rows, grad.cols, f_adv.tokens.rows, f_adv.tokens.cols
        )
    })?;
    let moved = AdvFeature {
        tokens: Matrix {
            data: f_adv
                .tokens
                .data
                .iter()
                .zip(&grad.data)
                .map(|(f, g)| f - eta * g)
                .collect(),
            ..f_adv.tokens.clone()
        },
        tau: f_adv.tau,
    };
    Ok(clip_feature(&moved))
}
