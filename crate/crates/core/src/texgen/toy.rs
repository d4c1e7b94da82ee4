//! Deterministic dependency-free generator backend.
//!
//! Encoding maps each whitespace-separated token and its position through
//! SHA-256 to a seed, and draws that token's embedding from a standard normal
//! stream. Decoding flattens the conditioning (zero-padded to `context_len`
//! rows), applies a fixed seeded affine map to a small RGB latent, adds seeded
//! noise with amplitude `noise_scale/sqrt(steps)`, upsamples bilinearly to the
//! texture size and applies a sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GeneratorBackend, Matrix, TextFeature};
use crate::error::{validate, Result};
use crate::nn::sigmoid;
use crate::raster::Raster;
use crate::renderer::TextureImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyGeneratorConfig {
    pub embed_dim: usize,
    /// Maximum number of conditioning rows.
    pub context_len: usize,
    pub latent_size: usize,
    pub texture_size: usize,
    /// Standard deviation of each weight is `gain / sqrt(embed_dim)`.
    pub gain: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        ToyGeneratorConfig {
            embed_dim: 32,
            context_len: 16,
            latent_size: 8,
            texture_size: 64,
            gain: 0.5,
            noise_scale: 0.5,
            seed: 0,
        }
    }
}

impl ToyGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        validate(self.embed_dim > 0 && self.context_len > 0, || {
            "generator embed_dim and context_len must be positive".into()
        })?;
        validate(self.latent_size > 0 && self.texture_size > 0, || {
            "generator latent_size and texture_size must be positive".into()
        })?;
        validate(self.gain.is_finite() && self.noise_scale.is_finite() && self.noise_scale >= 0.0, || {
            "generator gain and noise_scale must be finite".into()
        })
    }
}

#[derive(Clone, Debug)]
pub struct ToyGenerator {
    pub config: ToyGeneratorConfig,
    /// `latent_len x (context_len * embed_dim)`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ToyGenerator {
    pub fn new(config: ToyGeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.gain / (config.embed_dim as f64).sqrt();
        let inputs = config.context_len * config.embed_dim;
        let latent = config.latent_size * config.latent_size * 3;
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| scale * normal(&mut rng))
                .collect()
        };
        let weights = draw(latent * inputs, std);
        let bias = draw(latent, 0.1);
        Ok(ToyGenerator {
            config,
            weights,
            bias,
        })
    }

    fn latent_len(&self) -> usize {
        self.config.latent_size * self.config.latent_size * 3
    }

    fn check_conditioning(&self, cond: &Matrix) -> Result<()> {
        validate(cond.cols == self.config.embed_dim, || {
            format!(
                "conditioning width {} does not match embedding dimension {}",
                cond.cols, self.config.embed_dim
            )
        })?;
        validate(cond.rows >= 1 && cond.rows <= self.config.context_len, || {
            format!(
                "conditioning has {} rows; the generator accepts 1..={}",
                cond.rows, self.config.context_len
            )
        })
    }

    fn noise(&self, seed: u64, steps: usize) -> Vec<f64> {
        let amp = self.config.noise_scale / (steps.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.latent_len())
            .map(|_| amp * normal(&mut rng))
            .collect()
    }

    /// Latent in channel-last `L x L x 3` layout.
    fn latent(&self, cond: &Matrix, seed: u64, steps: usize) -> Vec<f64> {
        let inputs = self.config.context_len * self.config.embed_dim;
        let flat = &cond.data;
        self.noise(seed, steps)
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let row = &self.weights[i * inputs..i * inputs + flat.len()];
                self.bias[i] + n + row.iter().zip(flat).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Bilinear taps (latent index without channel, weight) for texel `(x, y)`.
    fn taps(&self, x: usize, y: usize) -> [(usize, f64); 4] {
        let l = self.config.latent_size;
        let s = l as f64 / self.config.texture_size as f64;
        let coord = |p: usize| ((p as f64 + 0.5) * s - 0.5).clamp(0.0, (l - 1) as f64);
        let (fx, fy) = (coord(x), coord(y));
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(l - 1), (y0 + 1).min(l - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        [
            (y0 * l + x0, (1.0 - ax) * (1.0 - ay)),
            (y0 * l + x1, ax * (1.0 - ay)),
            (y1 * l + x0, (1.0 - ax) * ay),
            (y1 * l + x1, ax * ay),
        ]
    }

    /// Texture-resolution values before the sigmoid.
    pub fn pre_activation(&self, cond: &Matrix, seed: u64, steps: usize) -> Result<Raster> {
        self.check_conditioning(cond)?;
        let z = self.latent(cond, seed, steps);
        let n = self.config.texture_size;
        Ok(Raster::from_fn(n, n, 3, |x, y, c| {
            self.taps(x, y).iter().map(|&(i, w)| w * z[i * 3 + c]).sum()
        }))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn token_seed(base: u64, position: usize, token: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((position as u64).to_le_bytes());
    h.update(token.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl GeneratorBackend for ToyGenerator {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn encode(&self, prompt: &str) -> Result<TextFeature> {
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        validate(!tokens.is_empty(), || "prompt must not be empty".into())?;
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, tok) in tokens.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(token_seed(self.config.seed, pos, tok));
            data.extend((0..d).map(|_| normal(&mut rng)));
        }
        Ok(TextFeature {
            prompt: prompt.to_string(),
            tokens: Matrix::from_vec(tokens.len(), d, data)?,
        })
    }

    fn decode(&self, cond: &Matrix, seed: u64, steps: usize) -> Result<TextureImage> {
        TextureImage::new(self.pre_activation(cond, seed, steps)?.map(sigmoid))
    }

    fn decode_gradient(
        &self,
        cond: &Matrix,
        seed: u64,
        steps: usize,
        rows: usize,
        upstream: &Raster,
    ) -> Result<Matrix> {
        let pre = self.pre_activation(cond, seed, steps)?;
        pre.ensure_same_shape(upstream, "generator upstream")?;
        validate(rows <= cond.rows, || "gradient rows exceed conditioning rows".into())?;
        let n = self.config.texture_size;
        let mut gz = vec![0.0; self.latent_len()];
        for y in 0..n {
            for x in 0..n {
                let taps = self.taps(x, y);
                for c in 0..3 {
                    let s = sigmoid(pre.get(x, y, c));
                    let g = upstream.get(x, y, c) * s * (1.0 - s);
                    for &(i, w) in &taps {
                        gz[i * 3 + c] += w * g;
                    }
                }
            }
        }
        let d = self.config.embed_dim;
        let inputs = self.config.context_len * d;
        let mut out = Matrix::zeros(rows, d);
        for (i, g) in gz.iter().enumerate() {
            let w = &self.weights[i * inputs..i * inputs + rows * d];
            for (o, wv) in out.data.iter_mut().zip(w) {
                *o += g * wv;
            }
        }
        Ok(out)
    }
}
