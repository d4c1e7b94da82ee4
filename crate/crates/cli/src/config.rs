//! Run configuration file.
//!
//! One TOML file drives every command. Relative paths are resolved against the
//! directory holding the file. Command-line flags override file values.

use std::path::{Path, PathBuf};

use camo_core::attack::{AnalyticDetector, AttackConfig, DetectorTrainConfig, GridDetectorConfig};
use camo_core::efr::{default_palette, EfrConfig, TrainConfig};
use camo_core::scenedata::SceneGenConfig;
use camo_core::texgen::{Tau, ToyGeneratorConfig};
use camo_core::uvtools::ReorderOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem; the binary maps it to its own exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub(crate) fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; all cores when absent.
    pub jobs: Option<usize>,
    pub dataset: DatasetSection,
    pub texgen: ToyGeneratorConfig,
    pub efr: EfrSection,
    pub detector: DetectorSection,
    pub attack: AttackConfig,
    pub eval: EvalSection,
    pub uv: ReorderOptions,
    pub outputs: Outputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: None,
            dataset: DatasetSection::default(),
            texgen: ToyGeneratorConfig::default(),
            efr: EfrSection::default(),
            detector: DetectorSection::default(),
            attack: AttackConfig::default(),
            eval: EvalSection::default(),
            uv: ReorderOptions::default(),
            outputs: Outputs::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub dir: PathBuf,
    pub scenes: SceneGenConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            dir: "data/scenes".into(),
            scenes: SceneGenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfrSection {
    /// Attack and eval composite the flat render directly when false.
    pub enabled: bool,
    pub model: EfrConfig,
    pub train: TrainConfig,
    /// Every n-th dataset view is held out for model selection.
    pub holdout_every: usize,
    pub palette: Vec<[f64; 3]>,
    /// Generator textures added to the solid palette.
    pub textured_presets: usize,
    pub preset_prompt: String,
}

impl Default for EfrSection {
    fn default() -> Self {
        EfrSection {
            enabled: true,
            model: EfrConfig::default(),
            train: TrainConfig::default(),
            holdout_every: 4,
            palette: default_palette(),
            textured_presets: 4,
            preset_prompt: AttackConfig::default().prompt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Grid,
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub kind: DetectorKind,
    pub grid: GridDetectorConfig,
    pub analytic: AnalyticDetector,
    pub train: DetectorTrainConfig,
    /// Training views; every cell is rendered `rounds` times.
    pub scenes: SceneGenConfig,
    pub rounds: usize,
    /// Solid training colors; generator textures are added on top.
    pub palette: Vec<[f64; 3]>,
    pub textured: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let mut palette = vec![[0.55; 3]];
        palette.extend(default_palette());
        DetectorSection {
            kind: DetectorKind::Grid,
            grid: GridDetectorConfig::default(),
            analytic: AnalyticDetector::default(),
            train: DetectorTrainConfig::default(),
            scenes: SceneGenConfig {
                elevations: vec![10.0, 20.0, 30.0, 40.0, 50.0],
                azimuths: (0..8).map(|i| 45.0 * i as f64).collect(),
                distances: vec![7.0, 8.0, 9.0],
                fog_densities: vec![0.0, 0.3],
                sun_altitudes: vec![30.0, 60.0],
                ..SceneGenConfig::default()
            },
            rounds: 1,
            palette,
            textured: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub efr: PathBuf,
    pub detector: PathBuf,
    pub attack: PathBuf,
    pub eval: PathBuf,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            efr: "runs/efr".into(),
            detector: "runs/detector".into(),
            attack: "runs/attack".into(),
            eval: "runs/eval".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f64,
    /// PNG path, or `gray` for the uniform reference color. Defaults to the
    /// attack output.
    pub texture: Option<String>,
    /// Second texture for a side-by-side table.
    pub compare: Option<String>,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            iou_threshold: 0.5,
            texture: None,
            compare: None,
            plots: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.dataset.dir,
            &mut self.outputs.efr,
            &mut self.outputs.detector,
            &mut self.outputs.attack,
            &mut self.outputs.eval,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for t in [&mut self.eval.texture, &mut self.eval.compare].into_iter().flatten() {
            if t != "gray" && Path::new(t.as_str()).is_relative() {
                *t = base.join(&*t).display().to_string();
            }
        }
    }

    /// Range checks that do not need the file system.
    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(config_error(msg)) };
        let core = |r: camo_core::Result<()>| r.map_err(|e| config_error(e.to_string()));
        core(self.dataset.scenes.validate())?;
        core(self.detector.scenes.validate())?;
        core(self.texgen.validate())?;
        core(self.attack.validate())?;
        core(self.efr.train.validate())?;
        core(self.detector.grid.validate())?;
        check(self.jobs != Some(0), "jobs must be at least 1")?;
        check(self.efr.holdout_every >= 2, "efr.holdout_every must be at least 2")?;
        check(!self.efr.palette.is_empty() || self.efr.textured_presets > 0, "efr needs at least one preset texture")?;
        check(!self.detector.palette.is_empty() || self.detector.textured > 0, "detector needs at least one training texture")?;
        check(self.detector.rounds >= 1, "detector.rounds must be at least 1")?;
        check(self.detector.train.lr > 0.0, "detector.train.lr must be positive")?;
        check(
            self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0,
            "eval.iou_threshold must lie in (0, 1]",
        )?;
        check(
            self.attack.n_adv + 1 <= self.texgen.context_len,
            "attack.n_adv leaves no room for prompt tokens in texgen.context_len",
        )?;
        let colors = self
            .efr
            .palette
            .iter()
            .chain(&self.detector.palette)
            .chain(&self.dataset.scenes.vehicle_colors);
        for c in colors {
            check(c.iter().all(|v| (0.0..=1.0).contains(v)), "colors must lie in [0, 1]")?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with every path cleared, hex
    /// encoded, so relocating inputs and outputs keeps the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset.dir = PathBuf::new();
        c.outputs = Outputs {
            efr: PathBuf::new(),
            detector: PathBuf::new(),
            attack: PathBuf::new(),
            eval: PathBuf::new(),
        };
        c.eval.texture = None;
        c.eval.compare = None;
        c.jobs = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn tau_label(&self) -> String {
        match self.attack.tau {
            Tau::Unbounded => "inf".into(),
            Tau::Bounded(v) => v.to_string(),
        }
    }
}
