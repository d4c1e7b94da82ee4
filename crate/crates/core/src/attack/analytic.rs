//! Differentiable color-template detector.
//!
//! Every pixel gets a soft match `a = exp(−‖I − t‖² / 2σ²)` against the
//! template color `t`. The match field is summarized by six moments
//! `Σa, Σa·x, Σa·y, Σa·x², Σa·y², Σa²`, and a single detection is read off
//! them: the box is the match centroid ± √3 standard deviations (the extent of
//! a uniform blob with that spread), objectness is `m/(m + m0)` with `m = Σa`,
//! and the first class confidence is the match-weighted mean match `Σa²/Σa`.

use serde::{Deserialize, Serialize};

use super::dual::Dual;
use super::{Detection, DetectionGrad, Detector};
use crate::error::{validate, Result};
use crate::raster::{BBox, Raster};

type D6 = Dual<6>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticDetector {
    pub template: [f64; 3],
    pub sigma: f64,
    /// Match mass at which objectness reaches 1/2.
    pub m0: f64,
}

impl Default for AnalyticDetector {
    fn default() -> Self {
        AnalyticDetector {
            template: [0.55; 3],
            sigma: 0.15,
            m0: 20.0,
        }
    }
}

const MIN_MASS: f64 = 1e-9;

struct Outputs {
    bbox: [D6; 4],
    objectness: D6,
    vehicle: D6,
}

impl AnalyticDetector {
    fn check(&self, image: &Raster) -> Result<()> {
        validate(image.channels() == 3, || "detector expects an RGB image".into())
    }

    fn matches(&self, image: &Raster) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        image
            .data()
            .chunks_exact(3)
            .map(|px| {
                let d2: f64 = px.iter().zip(&self.template).map(|(v, t)| (v - t).powi(2)).sum();
                (-d2 * inv).exp()
            })
            .collect()
    }

    fn moments(&self, image: &Raster, a: &[f64]) -> [f64; 6] {
        let w = image.width();
        let mut s = [0.0; 6];
        for (p, &ap) in a.iter().enumerate() {
            let x = (p % w) as f64 + 0.5;
            let y = (p / w) as f64 + 0.5;
            s[0] += ap;
            s[1] += ap * x;
            s[2] += ap * y;
            s[3] += ap * x * x;
            s[4] += ap * y * y;
            s[5] += ap * ap;
        }
        s
    }

    fn outputs(&self, s: [f64; 6]) -> Outputs {
        let v: [D6; 6] = std::array::from_fn(|i| D6::variable(s[i], i));
        let m = v[0];
        let mx = v[1] / m;
        let my = v[2] / m;
        let pixel_var = 1.0 / 12.0;
        let half_x = (v[3] / m - mx * mx + pixel_var).sqrt() * 3f64.sqrt();
        let half_y = (v[4] / m - my * my + pixel_var).sqrt() * 3f64.sqrt();
        Outputs {
            bbox: [mx - half_x, my - half_y, mx + half_x, my + half_y],
            objectness: m / (m + self.m0),
            vehicle: v[5] / m,
        }
    }
}

impl Detector for AnalyticDetector {
    fn num_classes(&self) -> usize {
        2
    }

    fn detect(&self, image: &Raster) -> Result<Vec<Detection>> {
        self.check(image)?;
        let s = self.moments(image, &self.matches(image));
        if s[0] < MIN_MASS {
            return Ok(Vec::new());
        }
        let o = self.outputs(s);
        let b = o.bbox.map(|d| d.v);
        Ok(vec![Detection::new(
            BBox::new(b[0], b[1], b[2], b[3]),
            o.objectness.v,
            vec![o.vehicle.v, 1.0 - o.vehicle.v],
        )])
    }

    fn detection_gradient(&self, image: &Raster, index: usize, upstream: &DetectionGrad) -> Result<Raster> {
        self.check(image)?;
        validate(upstream.d_class_conf.len() == 2, || "expected two class sensitivities".into())?;
        let a = self.matches(image);
        let s = self.moments(image, &a);
        validate(index == 0 && s[0] >= MIN_MASS, || format!("no detection with index {index}"))?;
        let o = self.outputs(s);
        let mut ds = [0.0; 6];
        for k in 0..6 {
            ds[k] = (0..4).map(|j| upstream.d_box[j] * o.bbox[j].g[k]).sum::<f64>()
                + upstream.d_objectness * o.objectness.g[k]
                + (upstream.d_class_conf[0] - upstream.d_class_conf[1]) * o.vehicle.g[k];
        }
        let w = image.width();
        let inv_var = 1.0 / (self.sigma * self.sigma);
        let mut grad = Raster::zeros(image.width(), image.height(), 3);
        for (p, &ap) in a.iter().enumerate() {
            let x = (p % w) as f64 + 0.5;
            let y = (p / w) as f64 + 0.5;
            let da = ds[0] + ds[1] * x + ds[2] * y + ds[3] * x * x + ds[4] * y * y + ds[5] * 2.0 * ap;
            for c in 0..3 {
                let i = p * 3 + c;
                grad.data_mut()[i] = da * ap * -(image.data()[i] - self.template[c]) * inv_var;
            }
        }
        Ok(grad)
    }
}
