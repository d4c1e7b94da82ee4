//! Adversarial vehicle camouflage toolkit.
//!
//! A texture for a vehicle mesh is decoded from a text embedding plus a small
//! trainable adversarial embedding, rendered into scene photographs, passed
//! through a learned environment renderer and fed to an object detector. The
//! adversarial embedding is optimized with clipped projected gradient steps so
//! the detector stops finding the vehicle, while the clip threshold keeps the
//! texture close to what the text prompt alone would produce.

pub mod adapter;
pub mod attack;
pub mod efr;
pub mod error;
pub mod evalkit;
pub mod fixtures;
pub mod mesh;
pub mod nn;
pub mod raster;
pub mod renderer;
pub mod scenedata;
pub mod texgen;
pub mod uvtools;

pub use error::{Error, Result};
pub use mesh::Mesh;
pub use raster::{BBox, Mask, Raster};
pub use renderer::{RenderOutput, Renderer, TextureImage, ToyRenderer};
pub use scenedata::{CameraPose, SceneDataset, SceneSample, WeatherParams};
