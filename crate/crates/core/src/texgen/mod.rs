//! Text-conditioned texture generation.
//!
//! A prompt is encoded into a token matrix `F_txt`. A small trainable matrix
//! `F_adv` is clipped elementwise to `[-τ, τ]`, placed in front of the text
//! rows, and the concatenation conditions a generator backend that decodes a
//! UV texture.

mod toy;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{validate, Error, Result};
use crate::raster::Raster;
use crate::renderer::TextureImage;

pub use toy::{ToyGenerator, ToyGeneratorConfig};

pub const DEFAULT_STEPS: usize = 20;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        validate(data.len() == rows * cols, || {
            format!("matrix data length {} does not match {rows}x{cols}", data.len())
        })?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

/// Encoded prompt `F_txt`: one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    pub prompt: String,
    pub tokens: Matrix,
}

/// Clip threshold for the adversarial feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tau {
    Bounded(f64),
    Unbounded,
}

impl Tau {
    pub fn new(value: f64) -> Result<Self> {
        if value == f64::INFINITY {
            return Ok(Tau::Unbounded);
        }
        validate(value.is_finite() && value > 0.0, || {
            format!("tau must be positive or \"inf\", got {value}")
        })?;
        Ok(Tau::Bounded(value))
    }

    pub fn value(&self) -> f64 {
        match self {
            Tau::Bounded(t) => *t,
            Tau::Unbounded => f64::INFINITY,
        }
    }

    /// `κ(v) = min(max(v, −τ), τ)`.
    pub fn clamp(&self, v: f64) -> f64 {
        match self {
            Tau::Bounded(t) => v.clamp(-t, *t),
            Tau::Unbounded => v,
        }
    }
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tau::Bounded(t) => write!(f, "{t}"),
            Tau::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for Tau {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "unbounded" => Ok(Tau::Unbounded),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Validation(format!("invalid tau {s:?}")))?;
                Tau::new(v)
            }
        }
    }
}

impl Serialize for Tau {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Tau::Bounded(t) => s.serialize_f64(*t),
            Tau::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Tau {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Num(v) => Tau::new(v),
            Repr::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Trainable adversarial tokens `F_adv` with their clip threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvFeature {
    pub tokens: Matrix,
    pub tau: Tau,
}

pub const ADV_FORMAT: &str = "camo-adv";
pub const ADV_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdvFile {
    format: String,
    version: u32,
    tau: Tau,
    n_adv: usize,
    d: usize,
    values: Vec<f64>,
}

impl AdvFeature {
    /// All-zero tokens.
    pub fn zeros(n_adv: usize, d: usize, tau: Tau) -> Result<Self> {
        validate(n_adv >= 1, || "n_adv must be at least 1".into())?;
        Ok(AdvFeature {
            tokens: Matrix::zeros(n_adv, d),
            tau,
        })
    }

    pub fn satisfies_bound(&self) -> bool {
        self.tokens.max_abs() <= self.tau.value()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = AdvFile {
            format: ADV_FORMAT.into(),
            version: ADV_VERSION,
            tau: self.tau,
            n_adv: self.tokens.rows,
            d: self.tokens.cols,
            values: self.tokens.data.clone(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: AdvFile = serde_json::from_slice(&bytes)?;
        validate(file.format == ADV_FORMAT && file.version == ADV_VERSION, || {
            format!("{}: not a version {ADV_VERSION} adversarial feature file", path.display())
        })?;
        Ok(AdvFeature {
            tokens: Matrix::from_vec(file.n_adv, file.d, file.values)?,
            tau: file.tau,
        })
    }
}

/// Elementwise `κ`.
pub fn clip_feature(f: &AdvFeature) -> AdvFeature {
    AdvFeature {
        tokens: Matrix {
            data: f.tokens.data.iter().map(|&v| f.tau.clamp(v)).collect(),
            ..f.tokens.clone()
        },
        tau: f.tau,
    }
}

/// `[κ(F_adv); F_txt]`, adversarial rows first.
pub fn concat_conditioning(f_adv: &AdvFeature, f_txt: &TextFeature) -> Result<Matrix> {
    validate(f_adv.tokens.cols == f_txt.tokens.cols, || {
        format!(
            "embedding dimension mismatch: adversarial {} vs text {}",
            f_adv.tokens.cols, f_txt.tokens.cols
        )
    })?;
    let clipped = clip_feature(f_adv);
    let mut data = clipped.tokens.data;
    data.extend_from_slice(&f_txt.tokens.data);
    Ok(Matrix {
        rows: f_adv.tokens.rows + f_txt.tokens.rows,
        cols: f_txt.tokens.cols,
        data,
    })
}

/// A conditional texture generator.
pub trait GeneratorBackend: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn encode(&self, prompt: &str) -> Result<TextFeature>;

    fn decode(&self, conditioning: &Matrix, seed: u64, steps: usize) -> Result<TextureImage>;

    /// Gradient of `sum(upstream ⊙ decode(conditioning))` with respect to the
    /// first `rows` conditioning rows.
    fn decode_gradient(
        &self,
        conditioning: &Matrix,
        seed: u64,
        steps: usize,
        rows: usize,
        upstream: &Raster,
    ) -> Result<Matrix>;
}

pub fn encode_prompt(backend: &dyn GeneratorBackend, prompt: &str) -> Result<TextFeature> {
    validate(!prompt.trim().is_empty(), || "prompt must not be empty".into())?;
    let f = backend.encode(prompt)?;
    validate(f.tokens.rows >= 1 && f.tokens.cols == backend.embed_dim(), || {
        "backend returned a malformed text feature".into()
    })?;
    Ok(f)
}

pub fn generate_texture(
    backend: &dyn GeneratorBackend,
    f_adv: &AdvFeature,
    f_txt: &TextFeature,
    seed: u64,
    steps: usize,
) -> Result<TextureImage> {
    let cond = concat_conditioning(f_adv, f_txt)?;
    backend
        .decode(&cond, seed, steps)
        .map_err(|e| e.context("texture generation failed"))
}

/// Gradient of `sum(upstream ⊙ texture)` with respect to the clipped
/// adversarial tokens `κ(F_adv)`.
pub fn generate_texture_gradient(
    backend: &dyn GeneratorBackend,
    f_adv: &AdvFeature,
    f_txt: &TextFeature,
    seed: u64,
    steps: usize,
    upstream: &Raster,
) -> Result<Matrix> {
    let cond = concat_conditioning(f_adv, f_txt)?;
    let g = backend
        .decode_gradient(&cond, seed, steps, f_adv.tokens.rows, upstream)
        .map_err(|e| e.context("texture gradient failed"))?;
    validate(g.same_shape(&f_adv.tokens), || "backend gradient has the wrong shape".into())?;
    Ok(g)
}
