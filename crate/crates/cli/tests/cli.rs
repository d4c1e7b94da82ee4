use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use camo_cli::commands::{self, Session};
use camo_cli::RunConfig;
use camo_core::evalkit::{average_precision, read_report_table, EvalRecord};

const CAMO: &str = env!("CARGO_BIN_EXE_camo");

/// Two elevations by two azimuths, a tiny EFR and the analytic detector.
const SMALL: &str = r#"
seed = 3

[dataset]
dir = "scenes"

[dataset.scenes]
elevations = [10.0, 30.0]
azimuths = [0.0, 90.0]

[texgen]
texture_size = 16

[efr]
holdout_every = 2
textured_presets = 1

[efr.model]
levels = 1
base_width = 4
convs_per_block = 1

[efr.train]
epochs = 2

[detector]
kind = "analytic"

[attack]
epochs = 1
batch_size = 2
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn camo(&self, args: &[&str]) -> Output {
        Command::new(CAMO)
            .current_dir(self.dir.path())
            .env_remove("CAMO_GENERATOR_CMD")
            .env_remove("CAMO_DETECTOR_CMD")
            .args(["-c", "run.toml"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.camo(args);
        assert!(
            out.status.success(),
            "camo {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn session(&self) -> Session {
        Session::new(RunConfig::load(self.path("run.toml")).unwrap()).unwrap()
    }
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn comment_value(path: &Path, key: &str) -> String {
    let text = fs::read_to_string(path).unwrap();
    let prefix = format!("# {key}=");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no {key} in {}", path.display()))
        .to_string()
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn synth_writes_triples_and_repeats_bytes() {
    let ws = Workspace::new(SMALL);
    let stdout = ws.ok(&["synth"]);
    assert!(stdout.contains("4 samples"), "{stdout}");
    let files = files_in(&ws.path("scenes"));
    assert_eq!(files.len(), 13);
    for suffix in ["_img.png", "_mask.png", "_meta.json"] {
        assert_eq!(files.iter().filter(|(n, _)| n.ends_with(suffix)).count(), 4);
    }
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));

    ws.ok(&["synth", "--out", "again"]);
    assert_eq!(files, files_in(&ws.path("again")));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let ws = Workspace::new(SMALL);
    fs::write(ws.path("blocker"), "").unwrap();
    let out = ws.camo(&["synth", "--out", "blocker/scenes"]);
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_RUNTIME));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.contains("blocker"), "{err}");
}

#[test]
fn invalid_configs_are_config_errors() {
    for bad in [
        "bogus = 1\n",
        "[attack]\neta = -1.0\n",
        "[attack]\ntau = \"sometimes\"\n",
        "[dataset.scenes]\nelevations = []\n",
        "[attack]\nn_adv = 40\n",
    ] {
        let ws = Workspace::new(bad);
        let out = ws.camo(&["synth"]);
        assert_eq!(out.status.code(), Some(camo_cli::EXIT_CONFIG), "config {bad:?}");
    }
    let ws = Workspace::new(SMALL);
    let out = ws.camo(&["attack", "--eta", "0"]);
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_CONFIG));
    // Missing inputs are runtime failures that name the missing piece.
    let out = ws.camo(&["attack"]);
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn train_efr_history_resume_and_best_epoch() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["synth"]);
    ws.ok(&["train-efr"]);
    let history = ws.path("runs/efr/history.csv");
    assert!(ws.path("runs/efr/checkpoint.json").exists());
    assert_eq!(data_lines(&history).len(), 2);

    ws.ok(&["train-efr", "--resume", "--epochs", "1"]);
    let rows = data_lines(&history);
    assert_eq!(rows.len(), 3);
    let parsed: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(parsed.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    let argmin = parsed
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0;
    assert_eq!(comment_value(&history, "best_epoch"), argmin.to_string());
    let ck = camo_core::efr::EfrCheckpoint::load(ws.path("runs/efr/checkpoint.json")).unwrap();
    assert_eq!(ck.best_epoch, Some(argmin));
}

#[test]
fn resume_without_checkpoint_fails() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["synth"]);
    let out = ws.camo(&["train-efr", "--resume"]);
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_RUNTIME));
}

#[test]
fn attack_writes_artifacts_and_logs_final_loss() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["synth"]);
    ws.ok(&["train-efr"]);
    let stdout = ws.ok(&["attack", "--tau", "inf"]);
    assert!(stdout.contains("final loss") && stdout.contains("mean D_s"), "{stdout}");
    for f in ["texture.png", "feature.json", "history.csv"] {
        assert!(ws.path("runs/attack").join(f).exists(), "{f}");
    }
    let history = ws.path("runs/attack/history.csv");
    assert_eq!(comment_value(&history, "tau"), "inf");
    assert_eq!(data_lines(&history).len(), 2);

    // The library call with the same configuration reproduces the logged value.
    let result = commands::attack_cmd(&ws.session()).unwrap().result;
    let logged: f64 = comment_value(&history, "final_loss").parse().unwrap();
    assert!((logged - result.final_loss).abs() <= 1e-9);

    ws.ok(&["attack", "--tau", "0.5"]);
    assert_eq!(comment_value(&history, "tau"), "0.5");
}

#[test]
fn attack_without_efr_checkpoint_names_it() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["synth"]);
    let out = ws.camo(&["attack"]);
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("efr checkpoint"));
}

#[test]
fn eval_reports_tables_plots_and_comparison() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["synth"]);
    ws.ok(&["train-efr"]);
    ws.ok(&["attack"]);
    let stdout = ws.ok(&["eval", "--compare", "gray"]);
    assert!(stdout.contains("overall AP@0.5"), "{stdout}");

    let eval = ws.path("runs/eval");
    let report = read_report_table(eval.join("report.csv")).unwrap();
    let dims: std::collections::BTreeSet<_> = report.bins.iter().map(|b| b.dimension.clone()).collect();
    assert_eq!(dims.len(), 5);
    for d in ["elevation", "azimuth", "distance", "fog", "sun"] {
        assert!(eval.join(format!("ap_{d}.png")).exists(), "{d}");
    }

    let records: Vec<EvalRecord> =
        serde_json::from_str(&fs::read_to_string(eval.join("records.json")).unwrap()).unwrap();
    let direct = average_precision(&records, 0.5, 0).unwrap();
    assert!((direct - report.overall).abs() <= 1e-12);

    let table = fs::read_to_string(eval.join("comparison.csv")).unwrap();
    let mut rows = table.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(rows.next().unwrap(), "dimension,value,attack/texture,gray");
    let overall: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(overall.len(), 4);
    let gray = read_report_table(eval.join("compare/report.csv")).unwrap();
    assert_eq!(overall[3].parse::<f64>().unwrap(), gray.overall);
}

#[test]
fn eval_with_missing_texture_fails() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["synth"]);
    ws.ok(&["train-efr"]);
    let out = ws.camo(&["eval", "--texture", "nowhere.png"]);
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.png"));
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

#[test]
fn uv_reorders_validates_and_reaches_a_fixpoint() {
    let ws = Workspace::new("");
    let cube = fixture("split_cube.obj");
    let cube = cube.to_str().unwrap();
    let stdout = ws.ok(&["uv", cube, "once.obj"]);
    assert!(stdout.contains("adjacency score: 0.333333 -> 0.611111 (change +0.277778)"), "{stdout}");
    assert!(stdout.contains("0 out of range, 0 overlapping pairs, 0 degenerate"));

    let stdout = ws.ok(&["uv", "once.obj", "twice.obj"]);
    assert!(stdout.contains("(change +0.000000)"), "{stdout}");

    let stdout = ws.ok(&["uv", "--validate-only", cube, "untouched.obj"]);
    assert!(stdout.contains("adjacency score: 0.333333\n"), "{stdout}");
    assert!(!ws.path("untouched.obj").exists());

    let vehicle = fixture("vehicle.obj");
    let stdout = ws.ok(&["uv", vehicle.to_str().unwrap(), "vehicle.obj"]);
    assert!(stdout.contains("0.400000 -> 0.633333"), "{stdout}");
}

#[test]
fn uv_parse_errors_carry_line_numbers() {
    let ws = Workspace::new("");
    fs::write(ws.path("broken.obj"), "v 0 0 0\nv 1 0 0\nvt 0 0\nf 1/1 2/1 9/1\n").unwrap();
    let out = ws.camo(&["uv", "broken.obj", "out.obj"]);
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn committed_meshes_match_the_builtin_fixtures() {
    let v = camo_core::Mesh::from_obj_file(fixture("vehicle.obj")).unwrap();
    assert_eq!(v, camo_core::fixtures::vehicle_mesh());
    let c = camo_core::Mesh::from_obj_file(fixture("split_cube.obj")).unwrap();
    assert_eq!(c, camo_core::fixtures::split_cube());
}

#[test]
fn backends_over_the_adapter_protocol() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["synth"]);
    ws.ok(&["train-efr"]);
    ws.ok(&["attack"]);
    ws.ok(&["eval"]);
    let local: Vec<EvalRecord> =
        serde_json::from_str(&fs::read_to_string(ws.path("runs/eval/records.json")).unwrap()).unwrap();

    let config = ws.path("run.toml");
    let out = Command::new(CAMO)
        .current_dir(ws.dir.path())
        .env("CAMO_GENERATOR_CMD", format!("'{CAMO}' -c '{}' serve-generator", config.display()))
        .env("CAMO_DETECTOR_CMD", format!("'{CAMO}' -c '{}' serve-detector", config.display()))
        .args(["-c", "run.toml", "eval"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let remote: Vec<EvalRecord> =
        serde_json::from_str(&fs::read_to_string(ws.path("runs/eval/records.json")).unwrap()).unwrap();
    assert_eq!(local.len(), remote.len());
    for (a, b) in local.iter().zip(&remote) {
        assert_eq!(a.detections.len(), b.detections.len());
        for (x, y) in a.detections.iter().zip(&b.detections) {
            // Tensors cross the wire as f32.
            assert!((x.objectness - y.objectness).abs() < 1e-5);
            for (p, q) in x.bbox.as_array().iter().zip(y.bbox.as_array()) {
                assert!((p - q).abs() < 1e-3);
            }
        }
    }

    let out = Command::new(CAMO)
        .current_dir(ws.dir.path())
        .env("CAMO_DETECTOR_CMD", "exit 1")
        .args(["-c", "run.toml", "eval"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("detector backend"));
}

#[test]
fn train_detector_feeds_grid_evaluation() {
    let config = SMALL.replace(
        "[detector]\nkind = \"analytic\"",
        "[detector]\nkind = \"grid\"\ntextured = 1\n\n[detector.scenes]\nelevations = [20.0]\nazimuths = [0.0, 90.0]\n\n[detector.train]\nepochs = 2",
    );
    let ws = Workspace::new(&config);
    ws.ok(&["synth"]);
    ws.ok(&["train-efr"]);
    let out = ws.camo(&["eval", "--texture", "gray"]);
    assert_eq!(out.status.code(), Some(camo_cli::EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("detector checkpoint"));

    let stdout = ws.ok(&["train-detector"]);
    assert!(stdout.contains("detector examples: 2\n"), "{stdout}");
    assert_eq!(data_lines(&ws.path("runs/detector/history.csv")).len(), 2);
    ws.ok(&["eval", "--texture", "gray"]);
    assert!(ws.path("runs/eval/report.csv").exists());
}
