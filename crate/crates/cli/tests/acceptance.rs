//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. Tolerances and time limits are pinned below.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use camo_cli::commands::{self, Session};
use camo_cli::RunConfig;
use camo_core::attack::{
    adversarial_loss, detection_score, feature_gradient, AnalyticDetector, AttackConfig,
    Detection, Pipeline,
};
use camo_core::efr::{efr_loss, efr_loss_with_grad, efr_weight, EfrConfig, EfrModel};
use camo_core::evalkit::{average_precision, iou, EvalRecord};
use camo_core::fixtures::vehicle_mesh;
use camo_core::renderer::RendererConfig;
use camo_core::scenedata::{composite_output, compose_background, extract_foreground, load_dataset};
use camo_core::texgen::{
    clip_feature, encode_prompt, generate_texture, generate_texture_gradient, AdvFeature, Matrix,
    GeneratorBackend, Tau, ToyGenerator, ToyGeneratorConfig,
};
use camo_core::uvtools::{adjacency_score, extract_islands, reorder_uv, validate_uv};
use camo_core::{BBox, CameraPose, Mask, Mesh, Raster, Renderer, TextureImage, ToyRenderer, WeatherParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAMO: &str = env!("CARGO_BIN_EXE_camo");

const TAUS: [f64; 4] = [0.1, 0.5, 1.0, 1.5];
const SINGLE_COMPONENT_TOL: f64 = 1e-3;
const FULL_STACK_TOL: f64 = 1e-2;
const FD_COORDS: usize = 6;
const LOSS_AT_036: f64 = 0.44629;
const LOSS_TOL: f64 = 1e-5;
const SCORE_TOL: f64 = 1e-12;
const AP_TOL: f64 = 1e-9;
const BCE_TOL: f64 = 1e-9;
const MAX_ATTACK_STEPS: usize = 200;
const MIN_DS_REDUCTION: f64 = 0.5;
const TRADEOFF_SEEDS: [u64; 3] = [1, 2, 3];
const TRADEOFF_STEPS: usize = 48;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64, atol: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(atol)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    workspace_root().join("fixtures").join(name)
}

/// The fixture configuration with every output redirected into `out`.
fn fixture_session(out: &Path) -> Session {
    let mut cfg = RunConfig::load(fixture("fixture.toml")).expect("fixture config loads");
    cfg.outputs.efr = out.join("efr");
    cfg.outputs.detector = out.join("detector");
    cfg.outputs.attack = out.join("attack");
    cfg.outputs.eval = out.join("eval");
    Session::new(cfg).expect("fixture config is valid")
}

// ---------------------------------------------------------------------------
// 1. Clip/projection

fn clip_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    for i in 0..1000 {
        let rows = rng.random_range(1..6);
        let cols = rng.random_range(4..40);
        let scale = rng.random_range(0.05..4.0);
        let data: Vec<f64> = (0..rows * cols).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
        for tau in TAUS {
            let f = AdvFeature {
                tokens: Matrix::from_vec(rows, cols, data.clone()).unwrap(),
                tau: Tau::Bounded(tau),
            };
            let once = clip_feature(&f);
            ensure(once.tokens.data.iter().all(|v| v.abs() <= tau) && once.satisfies_bound(), || {
                format!("feature {i}, tau {tau}: bound violated")
            })?;
            ensure(clip_feature(&once) == once, || format!("feature {i}, tau {tau}: not idempotent"))?;
            for (a, b) in data.iter().zip(&once.tokens.data) {
                ensure(a.abs() > tau || a == b, || {
                    format!("feature {i}, tau {tau}: in-ball value {a} moved to {b}")
                })?;
            }
            // A feature scaled entirely into the ball is returned unchanged.
            let m = f.tokens.max_abs();
            let inside = AdvFeature {
                tokens: Matrix::from_vec(rows, cols, data.iter().map(|v| v / m * tau).collect()).unwrap(),
                tau: Tau::Bounded(tau),
            };
            ensure(clip_feature(&inside) == inside, || format!("feature {i}, tau {tau}: ball not fixed"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} feature/tau pairs"))
}

// ---------------------------------------------------------------------------
// 2. Composition

fn composition_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for i in 0..100 {
        let (w, h) = (rng.random_range(1..48), rng.random_range(1..48));
        let image = Raster::from_fn(w, h, 3, |_, _, _| rng.random::<f64>());
        let bits: Vec<bool> = (0..w * h).map(|_| rng.random::<bool>()).collect();
        let mask = Mask::from_bools(w, h, &bits).unwrap();
        let b = compose_background(&image, &mask).unwrap();
        let x = extract_foreground(&image, &mask).unwrap();
        for ((bi, xi), ii) in b.data().iter().zip(x.data()).zip(image.data()) {
            ensure((bi + xi).to_bits() == ii.to_bits(), || format!("pair {i}: B + X_ref != I_in"))?;
        }
        let out = composite_output(&x, &b, &mask).unwrap();
        ensure(
            out.data().iter().zip(image.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("pair {i}: composite round trip differs"),
        )?;
    }
    Ok("100 image/mask pairs bitwise".into())
}

// ---------------------------------------------------------------------------
// 3. Gradients

fn renderer_gradient(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mesh = vehicle_mesh();
    let r = ToyRenderer::new(RendererConfig::default());
    let pose = CameraPose::new(25.0, 40.0, 7.0).unwrap();
    let tex = TextureImage::new(Raster::from_fn(8, 8, 3, |_, _, _| 0.05 + 0.9 * rng.random::<f64>())).unwrap();
    let up = Raster::from_fn(32, 32, 3, |_, _, _| rng.random::<f64>() - 0.5);
    let grad = r.render_gradient(&mesh, &tex, &pose, &up).unwrap();
    let objective = |t: &Raster| -> f64 {
        let out = r.render(&mesh, &TextureImage::new(t.clone()).unwrap(), &pose).unwrap();
        out.foreground.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    // Coordinates are drawn among texels some pixel samples.
    let live: Vec<usize> = (0..grad.data().len()).filter(|&i| grad.data()[i] != 0.0).collect();
    ensure(live.len() >= FD_COORDS, || "renderer: too few visible texels".into())?;
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..FD_COORDS {
        let i = live[rng.random_range(0..live.len())];
        let mut t = tex.pixels().clone();
        t.data_mut()[i] += h;
        let lp = objective(&t);
        t.data_mut()[i] -= 2.0 * h;
        let lm = objective(&t);
        worst = worst.max(rel_err((lp - lm) / (2.0 * h), grad.data()[i], 1e-9));
    }
    Ok(worst)
}

fn generator_gradient(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let g = ToyGenerator::new(ToyGeneratorConfig {
        texture_size: 16,
        ..ToyGeneratorConfig::default()
    })
    .unwrap();
    let txt = g.encode("yellow black graffiti").unwrap();
    let d = g.config.embed_dim;
    let adv = AdvFeature {
        tokens: Matrix::from_vec(2, d, (0..2 * d).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap(),
        tau: Tau::Unbounded,
    };
    let weights = Raster::from_fn(16, 16, 3, |_, _, _| rng.random::<f64>() - 0.5);
    let objective = |f: &AdvFeature| -> f64 {
        let t = generate_texture(&g, f, &txt, 5, 20).unwrap();
        t.pixels().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let grad = generate_texture_gradient(&g, &adv, &txt, 5, 20, &weights).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..FD_COORDS {
        let i = rng.random_range(0..adv.tokens.data.len());
        let mut p = adv.clone();
        p.tokens.data[i] += h;
        let lp = objective(&p);
        p.tokens.data[i] -= 2.0 * h;
        let lm = objective(&p);
        worst = worst.max(rel_err((lp - lm) / (2.0 * h), grad.data[i], 1e-9));
    }
    Ok(worst)
}

fn tiny_efr(seed: u64) -> EfrModel {
    EfrModel::new(EfrConfig {
        levels: 1,
        base_width: 4,
        convs_per_block: 1,
        residual: true,
        seed,
    })
    .unwrap()
}

fn efr_gradient(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let model = tiny_efr(5);
    let random = |rng: &mut ChaCha8Rng| Raster::from_fn(16, 16, 3, |_, _, _| rng.random::<f64>());
    let (x_ref, x_nr, gt) = (random(rng), random(rng), random(rng));
    let objective = |x: &Raster| efr_loss(&model.forward(&x_ref, x).unwrap(), &gt, 2.0).unwrap();
    let cache = model.forward_cached(&x_ref, &x_nr).unwrap();
    let (_, up) = efr_loss_with_grad(&cache.output(), &gt, 2.0).unwrap();
    let grad = model.backward(&cache, &up, None).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..FD_COORDS {
        let i = rng.random_range(0..x_nr.data().len());
        let mut x = x_nr.clone();
        x.data_mut()[i] += h;
        let lp = objective(&x);
        x.data_mut()[i] -= 2.0 * h;
        let lm = objective(&x);
        worst = worst.max(rel_err((lp - lm) / (2.0 * h), grad.data()[i], 1e-9));
    }
    Ok(worst)
}

fn full_stack_gradient(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let generator = ToyGenerator::new(ToyGeneratorConfig {
        texture_size: 32,
        ..ToyGeneratorConfig::default()
    })
    .unwrap();
    let mesh = vehicle_mesh();
    let renderer = ToyRenderer::new(RendererConfig::default());
    let efr = tiny_efr(2);
    let detector = AnalyticDetector::default();
    let pipeline = Pipeline {
        generator: &generator,
        mesh: &mesh,
        renderer: &renderer,
        efr: Some(&efr),
        detector: &detector,
    };
    let dataset = load_dataset(fixture("scenes")).map_err(|e| e.to_string())?;
    let config = AttackConfig {
        n_adv: 2,
        ..AttackConfig::default()
    };
    let f_txt = encode_prompt(&generator, &config.prompt).unwrap();
    let mut f = AdvFeature::zeros(2, generator.config.embed_dim, Tau::Unbounded).unwrap();
    for v in &mut f.tokens.data {
        *v = rng.random_range(-0.5..0.5);
    }
    let batch = [0, 5, 10, 15];
    let (_, _, grad, _) = feature_gradient(&pipeline, &dataset, &batch, &f, &f_txt, &config).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..FD_COORDS {
        let k = rng.random_range(0..f.tokens.data.len());
        let loss = |delta: f64| {
            let mut g = f.clone();
            g.tokens.data[k] += delta;
            feature_gradient(&pipeline, &dataset, &batch, &g, &f_txt, &config).unwrap().0
        };
        worst = worst.max(rel_err((loss(h) - loss(-h)) / (2.0 * h), grad.data[k], 1e-6));
    }
    Ok(worst)
}

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let r = renderer_gradient(&mut rng)?;
    let g = generator_gradient(&mut rng)?;
    let e = efr_gradient(&mut rng)?;
    let s = full_stack_gradient(&mut rng)?;
    for (name, err, tol) in [
        ("renderer", r, SINGLE_COMPONENT_TOL),
        ("generator", g, SINGLE_COMPONENT_TOL),
        ("efr", e, SINGLE_COMPONENT_TOL),
        ("full stack", s, FULL_STACK_TOL),
    ] {
        ensure(err < tol, || format!("{name}: max relative error {err:.2e} >= {tol:.0e}"))?;
    }
    Ok(format!(
        "max rel err renderer {r:.1e}, generator {g:.1e}, efr {e:.1e}, full stack {s:.1e} at {FD_COORDS} coords each"
    ))
}

// ---------------------------------------------------------------------------
// 4. Loss and score

fn random_detection(rng: &mut ChaCha8Rng) -> Detection {
    let x0 = rng.random_range(0.0..20.0);
    let y0 = rng.random_range(0.0..20.0);
    let b = BBox::new(x0, y0, x0 + rng.random_range(1.0..12.0), y0 + rng.random_range(1.0..12.0));
    Detection::new(b, rng.random(), vec![rng.random(), rng.random()])
}

fn score_oracle(dets: &[Detection], gt: &BBox, target: usize) -> f64 {
    let mut best = 0.0f64;
    for d in dets {
        let [ax0, ay0, ax1, ay1] = d.bbox.as_array();
        let [bx0, by0, bx1, by1] = gt.as_array();
        let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = w * h;
        let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
        let v = if union > 0.0 { inter / union } else { 0.0 };
        best = best.max(v * d.class_conf[target] * d.objectness);
    }
    best
}

fn loss_oracle() -> Check {
    let l = adversarial_loss(0.36);
    ensure((l - LOSS_AT_036).abs() <= LOSS_TOL, || format!("L_adv(0.36) = {l}"))?;
    ensure((l + 0.64f64.ln()).abs() <= 1e-15, || format!("L_adv(0.36) = {l} != -ln 0.64"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let gt = random_detection(&mut rng).bbox;
        let dets: Vec<Detection> = (0..rng.random_range(0..8)).map(|_| random_detection(&mut rng)).collect();
        let target = rng.random_range(0..2);
        worst = worst.max((detection_score(&dets, &gt, target) - score_oracle(&dets, &gt, target)).abs());
    }
    ensure(worst <= SCORE_TOL, || format!("detection_score off by {worst:e}"))?;
    Ok(format!("L_adv(0.36) = {l:.6}; 200 detection sets within {worst:.0e}"))
}

// ---------------------------------------------------------------------------
// 5. AP

fn ap_oracle(records: &[EvalRecord], thr: f64, target: usize) -> f64 {
    let mut confs: Vec<f64> = records
        .iter()
        .flat_map(|r| r.detections.iter().map(|d| d.objectness * d.class_conf[target]))
        .collect();
    confs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    confs.dedup();
    let npos = records.len() as f64;
    let mut curve = Vec::new();
    for &t in &confs {
        let mut kept = Vec::new();
        for (r, rec) in records.iter().enumerate() {
            for d in &rec.detections {
                let c = d.objectness * d.class_conf[target];
                if c >= t {
                    kept.push((c, r, d.bbox));
                }
            }
        }
        kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut used = vec![false; records.len()];
        let mut tp = 0.0;
        for &(_, r, b) in &kept {
            if iou(&b, &records[r].gt_box) >= thr && !used[r] {
                used[r] = true;
                tp += 1.0;
            }
        }
        curve.push((tp / npos, tp / kept.len() as f64));
    }
    let (mut ap, mut prev) = (0.0, 0.0);
    for &(r, _) in &curve {
        if r > prev {
            let p = curve.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

fn record(i: usize, gt: BBox, detections: Vec<Detection>) -> EvalRecord {
    EvalRecord {
        id: format!("r{i}"),
        pose: CameraPose::new(10.0 * (i % 4) as f64, 90.0 * (i % 4) as f64, 8.0).unwrap(),
        weather: WeatherParams::new(0.0, 45.0).unwrap(),
        gt_box: gt,
        detections,
    }
}

fn random_gt(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..20.0);
    let y = rng.random_range(0.0..20.0);
    BBox::new(x, y, x + rng.random_range(4.0..10.0), y + rng.random_range(4.0..10.0))
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<EvalRecord> {
    (0..rng.random_range(1..25))
        .map(|i| {
            let gt = random_gt(rng);
            let amount = rng.random_range(0.1..6.0);
            let dets = (0..rng.random_range(0..4))
                .map(|_| {
                    let mut a = gt.as_array();
                    for v in &mut a {
                        *v += rng.random_range(-amount..amount);
                    }
                    let b = BBox::new(a[0].min(a[2]), a[1].min(a[3]), a[0].max(a[2]), a[1].max(a[3]));
                    Detection::new(b, rng.random(), vec![rng.random(), rng.random()])
                })
                .collect();
            record(i, gt, dets)
        })
        .collect()
}

fn ap_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut sets = Vec::new();
    // Every target found with one exact box: AP 1.
    sets.push(
        (0..6)
            .map(|i| {
                let gt = random_gt(&mut rng);
                record(i, gt, vec![Detection::new(gt, 0.3 + 0.1 * i as f64, vec![0.9, 0.1])])
            })
            .collect::<Vec<_>>(),
    );
    // Only boxes far from every target: AP 0.
    sets.push(
        (0..6)
            .map(|i| {
                let gt = random_gt(&mut rng);
                let far = BBox::new(100.0, 100.0, 105.0, 105.0);
                record(i, gt, vec![Detection::new(far, 0.8, vec![0.9, 0.1])])
            })
            .collect::<Vec<_>>(),
    );
    while sets.len() < 50 {
        sets.push(random_records(&mut rng));
    }
    let mut worst = 0.0f64;
    let (mut ones, mut zeros) = (0, 0);
    for (k, set) in sets.iter().enumerate() {
        for thr in [0.5, 0.3] {
            let ap = average_precision(set, thr, 0).map_err(|e| e.to_string())?;
            let oracle = ap_oracle(set, thr, 0);
            worst = worst.max((ap - oracle).abs());
            ensure((ap - oracle).abs() <= AP_TOL, || format!("set {k} at {thr}: AP {ap} vs oracle {oracle}"))?;
            if thr == 0.5 {
                ones += usize::from(ap == 1.0);
                zeros += usize::from(ap == 0.0);
            }
        }
    }
    ensure(ones >= 1 && zeros >= 1, || "edge cases AP=1 and AP=0 not both present".into())?;
    Ok(format!("50 record sets within {worst:.0e} ({ones} with AP 1, {zeros} with AP 0)"))
}

// ---------------------------------------------------------------------------
// 6. End-to-end toy attack

fn end_to_end() -> Check {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let session = fixture_session(out.path());
    let err = |e: anyhow::Error| format!("{e:#}");
    let dataset = session.dataset().map_err(err)?;
    ensure(dataset.len() == 16, || format!("fixture has {} samples", dataset.len()))?;
    commands::train_efr_cmd(&session, false).map_err(err)?;
    commands::train_detector_cmd(&session).map_err(err)?;
    let attack = commands::attack_cmd(&session).map_err(err)?.result;
    let steps = attack.steps.len();
    ensure(steps <= MAX_ATTACK_STEPS, || format!("{steps} steps"))?;
    let reduction = 1.0 - attack.final_mean_ds / attack.initial_mean_ds;
    ensure(reduction >= MIN_DS_REDUCTION, || {
        format!(
            "mean D_s {:.4} -> {:.4} is only a {:.0}% reduction",
            attack.initial_mean_ds,
            attack.final_mean_ds,
            100.0 * reduction
        )
    })?;
    let eval = commands::eval_cmd(&session, None, Some("gray")).map_err(err)?;
    let attacked = eval.report.overall;
    let gray = eval.compare.expect("comparison requested").overall;
    ensure(attacked < gray, || format!("AP@0.5 attacked {attacked:.4} >= gray {gray:.4}"))?;
    Ok(format!(
        "{steps} steps, mean D_s {:.4} -> {:.4} ({:.0}% lower); AP@0.5 attacked {attacked:.4} vs gray {gray:.4}",
        attack.initial_mean_ds,
        attack.final_mean_ds,
        100.0 * reduction
    ))
}

// ---------------------------------------------------------------------------
// 7. Trade-off direction

fn tradeoff() -> Check {
    let generator = ToyGenerator::new(ToyGeneratorConfig::default()).unwrap();
    let mesh = vehicle_mesh();
    let renderer = ToyRenderer::new(RendererConfig::default());
    let detector = AnalyticDetector::default();
    let pipeline = Pipeline {
        generator: &generator,
        mesh: &mesh,
        renderer: &renderer,
        efr: None,
        detector: &detector,
    };
    let dataset = load_dataset(fixture("scenes")).map_err(|e| e.to_string())?;
    let mut losses: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in TRADEOFF_SEEDS {
        for (label, tau) in [("0.1", Tau::Bounded(0.1)), ("inf", Tau::Unbounded)] {
            let config = AttackConfig {
                tau,
                eta: 0.1,
                n_adv: 8,
                batch_size: 4,
                epochs: TRADEOFF_STEPS,
                max_steps: Some(TRADEOFF_STEPS),
                seed,
                ..AttackConfig::default()
            };
            let r = camo_core::attack::optimize_camouflage(&pipeline, &dataset, &config).map_err(|e| e.to_string())?;
            losses.entry(label).or_default().push(r.final_loss);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (bounded, free) = (mean(&losses["0.1"]), mean(&losses["inf"]));
    ensure(bounded >= free, || format!("mean final loss tau=0.1 {bounded:.5} < tau=inf {free:.5}"))?;
    Ok(format!(
        "mean final loss over {} seeds, {TRADEOFF_STEPS} steps: tau=0.1 {bounded:.5} >= tau=inf {free:.5}",
        TRADEOFF_SEEDS.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. EFR suite

fn bce_oracle(x: &Raster, gt: &Raster, weight: f64) -> f64 {
    let mut s = 0.0;
    for (&v, &t) in x.data().iter().zip(gt.data()) {
        let p = v.max(1e-6).min(1.0 - 1e-6);
        s -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    weight * s / x.data().len() as f64
}

fn efr_suite() -> Check {
    // 416 x 416 image with 17000 vehicle pixels.
    let img = Raster::zeros(416, 416, 3);
    let mut mask = Mask::zeros(416, 416);
    let mut left = 17000;
    'fill: for y in 0..416 {
        for x in 0..416 {
            if left == 0 {
                break 'fill;
            }
            mask.set(x, y, true);
            left -= 1;
        }
    }
    let w = efr_weight(&img, &mask).map_err(|e| e.to_string())?.ok_or("empty mask")?;
    ensure(w == 416.0 * 416.0 / 17000.0, || format!("weight {w}"))?;
    ensure((w - 10.18).abs() < 5e-3, || format!("weight {w} does not round to 10.18"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (wd, ht) = (rng.random_range(1..24), rng.random_range(1..24));
        // Includes values past the clamp on both sides.
        let x = Raster::from_fn(wd, ht, 3, |_, _, _| rng.random_range(-0.1..1.1));
        let gt = Raster::from_fn(wd, ht, 3, |_, _, _| rng.random::<f64>());
        let weight = rng.random_range(1.0..20.0);
        let l = efr_loss(&x, &gt, weight).map_err(|e| e.to_string())?;
        worst = worst.max((l - bce_oracle(&x, &gt, weight)).abs());
    }
    ensure(worst <= BCE_TOL, || format!("weighted BCE off by {worst:e}"))?;

    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let session = fixture_session(out.path());
    ensure(session.config.efr.train.epochs == 5, || "fixture efr epochs is not 5".into())?;
    let s = commands::train_efr_cmd(&session, false).map_err(|e| format!("{e:#}"))?;
    let mae = s.history[s.best_epoch].test_mae;
    ensure(mae < s.identity_mae, || {
        format!("held-out MAE {mae:.5} not below copy baseline {:.5}", s.identity_mae)
    })?;
    Ok(format!(
        "W = {w:.5}; BCE within {worst:.0e}; held-out MAE {mae:.5} < copy baseline {:.5} after {} epochs",
        s.identity_mae,
        s.history.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. UV tools

fn uv_tools() -> Check {
    let mut parts = Vec::new();
    for name in ["split_cube.obj", "vehicle.obj"] {
        let mesh = Mesh::from_obj_file(fixture(name)).map_err(|e| e.to_string())?;
        let once = reorder_uv(&mesh).map_err(|e| e.to_string())?;
        ensure(once.vertices == mesh.vertices && once.faces == mesh.faces, || {
            format!("{name}: geometry changed")
        })?;
        let (before, after) = (adjacency_score(&mesh), adjacency_score(&once));
        ensure(after > before, || format!("{name}: score {before} -> {after}"))?;
        let report = validate_uv(&once);
        ensure(report.overlaps.is_empty() && report.is_clean(), || format!("{name}: {report:?}"))?;
        let twice = reorder_uv(&once).map_err(|e| e.to_string())?;
        ensure(twice == once, || format!("{name}: second reorder changed the mesh"))?;
        parts.push(format!(
            "{name} {} -> {} islands, score {before:.4} -> {after:.4}",
            extract_islands(&mesh).len(),
            extract_islands(&once).len()
        ));
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------------------
// 10. Determinism

const DETERMINISM_CONFIG: &str = r#"
seed = 11

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
textured = 1

[detector.scenes]
elevations = [20.0]
azimuths = [0.0, 90.0, 180.0]

[detector.train]
epochs = 2

[attack]
epochs = 2
batch_size = 2
"#;

fn run_all_commands(dir: &Path) -> Result<Vec<String>, String> {
    fs::write(dir.join("run.toml"), DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let cube = fixture("split_cube.obj");
    let cube = cube.to_str().unwrap();
    let commands: [&[&str]; 6] = [
        &["synth"],
        &["train-efr"],
        &["train-detector"],
        &["attack"],
        &["eval", "--compare", "gray"],
        &["uv", cube, "cube.obj"],
    ];
    let mut stdout = Vec::new();
    for args in commands {
        let out = Command::new(CAMO)
            .current_dir(dir)
            .env_remove("CAMO_GENERATOR_CMD")
            .env_remove("CAMO_DETECTOR_CMD")
            .args(["-c", "run.toml"])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("camo {args:?}: {}", String::from_utf8_lossy(&out.stderr))
        })?;
        stdout.push(String::from_utf8_lossy(&out.stdout).into_owned());
    }
    Ok(stdout)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = run_all_commands(a.path())?;
    let out_b = run_all_commands(b.path())?;
    ensure(out_a == out_b, || "command output differs between runs".into())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "runs wrote different file sets".into())?;
    for (path, bytes) in &ta {
        ensure(&tb[path] == bytes, || format!("{} differs", path.display()))?;
    }
    Ok(format!("{} artifacts from 6 commands identical across two runs", ta.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, Duration, fn() -> Check); 10] = [
        ("clip/projection suite", Duration::from_secs(5), clip_suite),
        ("composition identities", Duration::from_secs(5), composition_identities),
        ("gradient checks", Duration::from_secs(120), gradient_checks),
        ("loss formula oracle", Duration::from_secs(5), loss_oracle),
        ("AP oracle equivalence", Duration::from_secs(30), ap_equivalence),
        ("end-to-end toy attack", Duration::from_secs(600), end_to_end),
        ("trade-off direction", Duration::from_secs(300), tradeoff),
        ("EFR suite", Duration::from_secs(300), efr_suite),
        ("UV tools", Duration::from_secs(30), uv_tools),
        ("determinism", Duration::from_secs(300), determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; took longer than {}s", limit.as_secs())),
            o => o,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name} ({:.1}s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        std::process::exit(1);
    }
}
