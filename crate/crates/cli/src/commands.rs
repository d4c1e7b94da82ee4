//! Command implementations shared by the binary and the test suites.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camo_core::adapter::{
    serve_detector, serve_generator, RemoteDetector, RemoteGenerator, DETECTOR_CMD_ENV,
    GENERATOR_CMD_ENV,
};
use camo_core::attack::{
    detector_training_set, optimize_camouflage, train_grid_detector, AttackConfig, AttackResult,
    Detector, GridDetector, GridDetectorCheckpoint, Pipeline,
};
use camo_core::efr::{preset_textures, synth_efr_batches_at, train_efr, EfrCheckpoint, EfrModel};
use camo_core::evalkit::{
    emit_report, evaluate_camouflage, sweep_report, write_comparison, EvalRecord, ReportFormat,
    SweepReport,
};
use camo_core::fixtures::vehicle_mesh_with;
use camo_core::scenedata::{load_dataset, save_dataset, synth_scenes};
use camo_core::texgen::{GeneratorBackend, ToyGenerator};
use camo_core::uvtools::{adjacency_score, reorder_uv_with, validate_uv, UvReport};
use camo_core::{Mesh, SceneDataset, TextureImage, ToyRenderer};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{config_error, DetectorKind, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_FILE: &str = "last.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const TEXTURE_FILE: &str = "texture.png";
pub const FEATURE_FILE: &str = "feature.json";
pub const RECORDS_FILE: &str = "records.json";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// A validated configuration plus its provenance stamp.
pub struct Session {
    pub config: RunConfig,
    pub config_hash: String,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash();
        Ok(Session {
            config,
            config_hash,
        })
    }

    fn seed(&self, offset: u64) -> u64 {
        self.config.seed.wrapping_add(offset)
    }

    fn provenance(&self, command: &str) -> Vec<String> {
        vec![
            format!("command={command}"),
            format!("config_hash={}", self.config_hash),
            format!("seed={}", self.config.seed),
        ]
    }

    fn mesh(&self) -> Mesh {
        vehicle_mesh_with(&self.config.dataset.scenes.geometry)
    }

    fn renderer(&self) -> ToyRenderer {
        ToyRenderer::new(self.config.dataset.scenes.renderer)
    }

    /// The toy generator, or the external one named by the environment.
    pub fn generator(&self) -> Result<Box<dyn GeneratorBackend>> {
        match std::env::var(GENERATOR_CMD_ENV) {
            Ok(cmd) if !cmd.trim().is_empty() => Ok(Box::new(
                RemoteGenerator::spawn(&cmd).with_context(|| format!("generator backend `{cmd}`"))?,
            )),
            _ => Ok(Box::new(ToyGenerator::new(self.config.texgen)?)),
        }
    }

    /// The configured detector, or the external one named by the environment.
    pub fn detector(&self) -> Result<Box<dyn Detector>> {
        if let Ok(cmd) = std::env::var(DETECTOR_CMD_ENV) {
            if !cmd.trim().is_empty() {
                return Ok(Box::new(
                    RemoteDetector::spawn(&cmd).with_context(|| format!("detector backend `{cmd}`"))?,
                ));
            }
        }
        self.local_detector()
    }

    /// The configured in-process detector.
    pub fn local_detector(&self) -> Result<Box<dyn Detector>> {
        match self.config.detector.kind {
            DetectorKind::Analytic => Ok(Box::new(self.config.detector.analytic)),
            DetectorKind::Grid => {
                let path = self.config.outputs.detector.join(CHECKPOINT_FILE);
                let ck = GridDetectorCheckpoint::load(&path)
                    .with_context(|| format!("detector checkpoint {} (run train-detector)", path.display()))?;
                Ok(Box::new(ck.detector()?))
            }
        }
    }

    pub fn efr(&self) -> Result<Option<EfrModel>> {
        if !self.config.efr.enabled {
            return Ok(None);
        }
        let path = self.config.outputs.efr.join(CHECKPOINT_FILE);
        let ck = EfrCheckpoint::load(&path)
            .with_context(|| format!("efr checkpoint {} (run train-efr)", path.display()))?;
        Ok(Some(ck.model))
    }

    pub fn dataset(&self) -> Result<SceneDataset> {
        let dir = &self.config.dataset.dir;
        load_dataset(dir).with_context(|| format!("dataset {} (run synth)", dir.display()))
    }

    /// `gray` or a PNG path.
    pub fn texture(&self, spec: &str) -> Result<TextureImage> {
        if spec == "gray" {
            let n = self.config.texgen.texture_size;
            return Ok(TextureImage::uniform(n, n, self.config.dataset.scenes.vehicle_colors[0]));
        }
        TextureImage::load_png(spec).with_context(|| format!("texture {spec}"))
    }

    fn write_provenance(&self, dir: &Path, command: &str, artifacts: &[PathBuf]) -> Result<()> {
        #[derive(Serialize)]
        struct Entry {
            file: String,
            sha256: String,
        }
        #[derive(Serialize)]
        struct Provenance<'a> {
            command: &'a str,
            config_hash: &'a str,
            seed: u64,
            artifacts: Vec<Entry>,
        }
        let mut entries = Vec::new();
        for a in artifacts {
            let bytes = fs::read(a).with_context(|| format!("reading {}", a.display()))?;
            let name = a.strip_prefix(dir).unwrap_or(a).display().to_string();
            entries.push(Entry {
                file: name,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let p = Provenance {
            command,
            config_hash: &self.config_hash,
            seed: self.config.seed,
            artifacts: entries,
        };
        write(&dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(&p)?.as_bytes())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn csv_with_comments(comments: &[String], header: &str, rows: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        s.push_str(&format!("# {c}\n"));
    }
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub struct SynthSummary {
    pub dir: PathBuf,
    pub count: usize,
}

pub fn synth(session: &Session, out: Option<&Path>) -> Result<SynthSummary> {
    let dir = out.map_or_else(|| session.config.dataset.dir.clone(), Path::to_path_buf);
    let seed = session.seed(0);
    let mut ds = synth_scenes(&session.config.dataset.scenes, seed)?;
    ds.manifest.seed = Some(seed);
    ds.manifest.config_hash = Some(session.config_hash.clone());
    save_dataset(&ds, &dir).with_context(|| format!("writing dataset to {}", dir.display()))?;
    Ok(SynthSummary { dir, count: ds.len() })
}

pub struct EfrSummary {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub history: Vec<camo_core::efr::EpochRecord>,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Held-out MAE of copying `x_nr` unchanged.
    pub identity_mae: f64,
}

pub fn train_efr_cmd(session: &Session, resume: bool) -> Result<EfrSummary> {
    let cfg = &session.config;
    let out = &cfg.outputs.efr;
    let dataset = session.dataset()?;
    let generator = session.generator()?;
    let mesh = session.mesh();
    let views: Vec<_> = dataset.samples.iter().map(|s| (s.pose, s.weather)).collect();
    let k = cfg.efr.holdout_every;
    let (test_views, train_views): (Vec<_>, Vec<_>) =
        views.iter().enumerate().partition(|(i, _)| i % k == k - 1);
    let strip = |v: Vec<(usize, &_)>| v.into_iter().map(|(_, x)| *x).collect::<Vec<_>>();
    let (train_views, test_views) = (strip(train_views), strip(test_views));
    if train_views.is_empty() || test_views.is_empty() {
        return Err(config_error("dataset too small for the efr train/test split"));
    }
    let presets = preset_textures(
        &cfg.efr.palette,
        cfg.dataset.scenes.texture_size,
        generator.as_ref(),
        &cfg.efr.preset_prompt,
        cfg.efr.textured_presets,
        session.seed(1),
    )?;
    let scenes = &cfg.dataset.scenes;
    let train = synth_efr_batches_at(scenes, &train_views, &mesh, &presets, session.seed(2))?;
    let test = synth_efr_batches_at(scenes, &test_views, &mesh, &presets, session.seed(3))?;

    let (model, previous) = if resume {
        let path = out.join(LAST_FILE);
        let ck = EfrCheckpoint::load(&path).with_context(|| format!("resuming from {}", path.display()))?;
        (ck.model, ck.history)
    } else {
        let mut m = cfg.efr.model;
        m.seed = session.seed(m.seed);
        (EfrModel::new(m)?, Vec::new())
    };
    let mut train_cfg = cfg.efr.train;
    train_cfg.seed = session.seed(train_cfg.seed);
    let outcome = train_efr(model, &train, &test, &train_cfg, &previous)?;
    let identity_mae = test
        .iter()
        .map(|b| b.identity_mae())
        .sum::<camo_core::Result<f64>>()?
        / test.len() as f64;

    create_dir(out)?;
    let best = EfrCheckpoint {
        model: outcome.best,
        best_epoch: Some(outcome.best_epoch),
        history: outcome.history.clone(),
    };
    let last = EfrCheckpoint {
        model: outcome.last,
        best_epoch: Some(outcome.best_epoch),
        history: outcome.history.clone(),
    };
    let ck_path = out.join(CHECKPOINT_FILE);
    best.save(&ck_path)?;
    last.save(out.join(LAST_FILE))?;
    let mut comments = session.provenance("train-efr");
    comments.push(format!("best_epoch={}", outcome.best_epoch));
    comments.push(format!("identity_mae={identity_mae}"));
    let rows: Vec<String> = outcome
        .history
        .iter()
        .map(|r| format!("{},{},{}", r.epoch, r.train_loss, r.test_mae))
        .collect();
    write(
        &out.join(HISTORY_FILE),
        csv_with_comments(&comments, "epoch,train_loss,test_mae", &rows).as_bytes(),
    )?;
    session.write_provenance(
        out,
        "train-efr",
        &[ck_path.clone(), out.join(LAST_FILE), out.join(HISTORY_FILE)],
    )?;
    Ok(EfrSummary {
        checkpoint: ck_path,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
        train_pairs: train.len(),
        test_pairs: test.len(),
        identity_mae,
    })
}

pub struct DetectorSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<f64>,
    pub examples: usize,
}

pub fn train_detector_cmd(session: &Session) -> Result<DetectorSummary> {
    let cfg = &session.config;
    if cfg.detector.kind != DetectorKind::Grid {
        return Err(config_error("train-detector needs detector.kind = \"grid\""));
    }
    let generator = session.generator()?;
    let sec = &cfg.detector;
    let textures = preset_textures(
        &sec.palette,
        sec.scenes.texture_size,
        generator.as_ref(),
        &cfg.attack.prompt,
        sec.textured,
        session.seed(4),
    )?;
    let examples = detector_training_set(&sec.scenes, &session.mesh(), &textures, sec.rounds, session.seed(5))?;
    let mut grid = sec.grid;
    grid.seed = session.seed(grid.seed);
    let mut detector = GridDetector::new(grid)?;
    let mut train = sec.train;
    train.seed = session.seed(train.seed);
    let history = train_grid_detector(&mut detector, &examples, &train)?;

    let out = &cfg.outputs.detector;
    create_dir(out)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    GridDetectorCheckpoint::new(&detector, history.clone()).save(&ck_path)?;
    let rows: Vec<String> = history.iter().enumerate().map(|(i, l)| format!("{i},{l}")).collect();
    write(
        &out.join(HISTORY_FILE),
        csv_with_comments(&session.provenance("train-detector"), "epoch,loss", &rows).as_bytes(),
    )?;
    session.write_provenance(out, "train-detector", &[ck_path.clone(), out.join(HISTORY_FILE)])?;
    Ok(DetectorSummary {
        checkpoint: ck_path,
        history,
        examples: examples.len(),
    })
}

pub struct AttackSummary {
    pub result: AttackResult,
    pub artifacts: Vec<PathBuf>,
}

pub fn attack_cmd(session: &Session) -> Result<AttackSummary> {
    let cfg = &session.config;
    let dataset = session.dataset()?;
    let generator = session.generator()?;
    let detector = session.detector()?;
    let efr = session.efr()?;
    let mesh = session.mesh();
    let renderer = session.renderer();
    let pipeline = Pipeline {
        generator: generator.as_ref(),
        mesh: &mesh,
        renderer: &renderer,
        efr: efr.as_ref(),
        detector: detector.as_ref(),
    };
    let attack = AttackConfig {
        seed: session.seed(cfg.attack.seed),
        ..cfg.attack.clone()
    };
    let result = optimize_camouflage(&pipeline, &dataset, &attack)?;

    let out = &cfg.outputs.attack;
    create_dir(out)?;
    let texture = out.join(TEXTURE_FILE);
    let feature = out.join(FEATURE_FILE);
    let history = out.join(HISTORY_FILE);
    result.texture.save_png(&texture)?;
    result.feature.save(&feature)?;
    let mut comments = session.provenance("attack");
    comments.extend([
        format!("tau={}", cfg.tau_label()),
        format!("eta={}", attack.eta),
        format!("optimizer={}", serde_json::to_value(attack.optimizer_kind)?.as_str().unwrap_or("")),
        format!("initial_loss={}", result.initial_loss),
        format!("initial_mean_ds={}", result.initial_mean_ds),
        format!("final_loss={}", result.final_loss),
        format!("final_mean_ds={}", result.final_mean_ds),
    ]);
    let rows: Vec<String> = result
        .steps
        .iter()
        .map(|s| format!("{},{},{},{},{}", s.step, s.epoch, s.loss, s.mean_ds, s.grad_norm))
        .collect();
    write(
        &history,
        csv_with_comments(&comments, "step,epoch,loss,mean_ds,grad_norm", &rows).as_bytes(),
    )?;
    let artifacts = vec![texture, feature, history];
    session.write_provenance(out, "attack", &artifacts)?;
    Ok(AttackSummary { result, artifacts })
}

pub struct EvalSummary {
    pub report: SweepReport,
    pub records: Vec<EvalRecord>,
    pub compare: Option<SweepReport>,
    pub files: Vec<PathBuf>,
}

fn texture_label(spec: &str) -> String {
    if spec == "gray" {
        return spec.into();
    }
    let p = Path::new(spec);
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match p.parent().and_then(|d| d.file_name()) {
        Some(d) => format!("{}/{stem}", d.to_string_lossy()),
        None => stem,
    }
}

pub fn eval_cmd(session: &Session, texture: Option<&str>, compare: Option<&str>) -> Result<EvalSummary> {
    let cfg = &session.config;
    let default_texture = cfg.outputs.attack.join(TEXTURE_FILE).display().to_string();
    let primary = texture
        .map(str::to_string)
        .or_else(|| cfg.eval.texture.clone())
        .unwrap_or(default_texture);
    let compare = compare.map(str::to_string).or_else(|| cfg.eval.compare.clone());

    let dataset = session.dataset()?;
    let generator = session.generator()?;
    let detector = session.detector()?;
    let efr = session.efr()?;
    let mesh = session.mesh();
    let renderer = session.renderer();
    let pipeline = Pipeline {
        generator: generator.as_ref(),
        mesh: &mesh,
        renderer: &renderer,
        efr: efr.as_ref(),
        detector: detector.as_ref(),
    };
    let out = &cfg.outputs.eval;
    let mut formats = vec![ReportFormat::Table];
    if cfg.eval.plots {
        formats.push(ReportFormat::Plot);
    }
    let run = |spec: &str, dir: &Path| -> Result<(SweepReport, Vec<EvalRecord>, Vec<PathBuf>)> {
        let tex = session.texture(spec)?;
        let records = evaluate_camouflage(&pipeline, &tex, &dataset)?;
        let report = sweep_report(&records, cfg.eval.iou_threshold, cfg.attack.target_class)?;
        let mut prov = session.provenance("eval");
        prov.push(format!("texture={}", texture_label(spec)));
        let mut files = emit_report(&report, dir, &formats, &prov)?;
        let rec_path = dir.join(RECORDS_FILE);
        write(&rec_path, serde_json::to_string_pretty(&records)?.as_bytes())?;
        files.push(rec_path);
        Ok((report, records, files))
    };
    let (report, records, mut files) = run(&primary, out)?;
    let mut compare_report = None;
    if let Some(spec) = &compare {
        let (r, _, f) = run(spec, &out.join("compare"))?;
        let path = out.join(COMPARISON_FILE);
        write_comparison(
            (&texture_label(&primary), &report),
            (&texture_label(spec), &r),
            &path,
            &session.provenance("eval"),
        )?;
        files.extend(f);
        files.push(path);
        compare_report = Some(r);
    }
    session.write_provenance(out, "eval", &files)?;
    Ok(EvalSummary {
        report,
        records,
        compare: compare_report,
        files,
    })
}

pub struct UvSummary {
    pub before: f64,
    pub after: Option<f64>,
    pub report: UvReport,
}

pub fn uv_cmd(session: &Session, input: &Path, output: Option<&Path>, validate_only: bool) -> Result<UvSummary> {
    let mesh = Mesh::from_obj_file(input)?;
    let before = adjacency_score(&mesh);
    if validate_only {
        return Ok(UvSummary {
            before,
            after: None,
            report: validate_uv(&mesh),
        });
    }
    let Some(output) = output else {
        bail!(config_error("uv needs an output path unless --validate-only is given"));
    };
    let reordered = reorder_uv_with(&mesh, &session.config.uv)?;
    reordered.write_obj_file(output)?;
    Ok(UvSummary {
        before,
        after: Some(adjacency_score(&reordered)),
        report: validate_uv(&reordered),
    })
}

pub fn serve_generator_cmd(session: &Session) -> Result<()> {
    let generator = ToyGenerator::new(session.config.texgen)?;
    serve_generator(&generator, std::io::stdin().lock(), std::io::stdout().lock())?;
    Ok(())
}

pub fn serve_detector_cmd(session: &Session) -> Result<()> {
    let detector = session.local_detector()?;
    serve_detector(detector.as_ref(), std::io::stdin().lock(), std::io::stdout().lock())?;
    Ok(())
}
