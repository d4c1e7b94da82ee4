use camo_core::texgen::{
    clip_feature, concat_conditioning, encode_prompt, generate_texture, generate_texture_gradient,
    AdvFeature, GeneratorBackend, Matrix, Tau, TextFeature, ToyGenerator, ToyGeneratorConfig,
};
use camo_core::Raster;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_gen() -> ToyGenerator {
    ToyGenerator::new(ToyGeneratorConfig {
        texture_size: 16,
        ..ToyGeneratorConfig::default()
    })
    .unwrap()
}

fn feature(rows: usize, cols: usize, values: Vec<f64>, tau: Tau) -> AdvFeature {
    AdvFeature {
        tokens: Matrix::from_vec(rows, cols, values).unwrap(),
        tau,
    }
}

#[test]
fn clip_example() {
    let f = feature(1, 3, vec![1.5, -0.3, -2.0], Tau::Bounded(1.0));
    assert_eq!(clip_feature(&f).tokens.data, vec![1.0, -0.3, -1.0]);
    let g = feature(1, 3, vec![1e9, -4.0, 0.0], Tau::Unbounded);
    assert_eq!(clip_feature(&g), g);
}

proptest! {
    #[test]
    fn clip_properties(
        values in prop::collection::vec(-3.0f64..3.0, 1..40),
        tau_i in 0usize..4,
    ) {
        let tau = Tau::Bounded([0.1, 0.5, 1.0, 1.5][tau_i]);
        let n = values.len();
        let f = feature(1, n, values.clone(), tau);
        let once = clip_feature(&f);
        prop_assert!(once.satisfies_bound());
        prop_assert_eq!(&clip_feature(&once), &once);
        for i in 0..n {
            for j in 0..n {
                if values[i] <= values[j] {
                    prop_assert!(once.tokens.data[i] <= once.tokens.data[j]);
                }
            }
            if values[i].abs() <= tau.value() {
                prop_assert_eq!(once.tokens.data[i], values[i]);
            }
        }
    }
}

#[test]
fn tau_parsing_and_serde() {
    assert_eq!("inf".parse::<Tau>().unwrap(), Tau::Unbounded);
    assert_eq!("0.5".parse::<Tau>().unwrap(), Tau::Bounded(0.5));
    assert!("-1".parse::<Tau>().is_err());
    assert!("0".parse::<Tau>().is_err());
    assert_eq!(serde_json::to_string(&Tau::Unbounded).unwrap(), "\"inf\"");
    assert_eq!(serde_json::from_str::<Tau>("1.5").unwrap(), Tau::Bounded(1.5));
    assert_eq!(serde_json::from_str::<Tau>("\"inf\"").unwrap(), Tau::Unbounded);
}

#[test]
fn encode_is_deterministic_and_shaped() {
    let g = small_gen();
    let a = encode_prompt(&g, "colorful camouflage").unwrap();
    let b = encode_prompt(&g, "colorful camouflage").unwrap();
    assert_eq!(a, b);
    assert_eq!((a.tokens.rows, a.tokens.cols), (2, 32));
    assert!(encode_prompt(&g, "").is_err());
    assert!(encode_prompt(&g, "   ").is_err());
}

#[test]
fn different_prompts_give_different_features() {
    let g = small_gen();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let words = ["red", "blue", "graffiti", "yellow", "black", "stripe", "camo", "dots"];
    let random_prompt = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..=4);
        (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    let mut checked = 0;
    while checked < 100 {
        let (p, q) = (random_prompt(&mut rng), random_prompt(&mut rng));
        if p == q {
            continue;
        }
        let (a, b) = (g.encode(&p).unwrap(), g.encode(&q).unwrap());
        assert!(a.tokens != b.tokens, "{p:?} vs {q:?}");
        checked += 1;
    }
}

#[test]
fn conditioning_layout() {
    let g = ToyGenerator::new(ToyGeneratorConfig {
        embed_dim: 8,
        ..ToyGeneratorConfig::default()
    })
    .unwrap();
    let txt = g.encode("a b c d").unwrap();
    let adv = feature(1, 8, (0..8).map(|i| i as f64 - 4.0).collect(), Tau::Bounded(2.0));
    let before = adv.clone();
    let c = concat_conditioning(&adv, &txt).unwrap();
    assert_eq!((c.rows, c.cols), (5, 8));
    assert_eq!(adv, before);
    assert_eq!(c.slice_rows(0, 1), clip_feature(&adv).tokens);
    assert_eq!(c.slice_rows(1, 5), txt.tokens);
    let zero = AdvFeature::zeros(1, 8, Tau::Unbounded).unwrap();
    assert_eq!(concat_conditioning(&zero, &txt).unwrap().slice_rows(1, 5), txt.tokens);
    let wrong = AdvFeature::zeros(1, 7, Tau::Unbounded).unwrap();
    assert!(concat_conditioning(&wrong, &txt).is_err());
}

#[test]
fn generation_is_deterministic_and_in_range() {
    let g = small_gen();
    let txt = g.encode("yellow black graffiti").unwrap();
    let adv = AdvFeature::zeros(1, 32, Tau::Bounded(1.0)).unwrap();
    let a = generate_texture(&g, &adv, &txt, 7, 20).unwrap();
    let b = generate_texture(&g, &adv, &txt, 7, 20).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.width(), a.height()), (16, 16));
    assert!(a.pixels().in_unit_range());
    let c = generate_texture(&g, &adv, &txt, 8, 20).unwrap();
    assert_ne!(a, c);
}

#[test]
fn perturbation_grows_texture_difference() {
    let g = small_gen();
    let txt = g.encode("yellow black graffiti").unwrap();
    let zero = AdvFeature::zeros(1, 32, Tau::Unbounded).unwrap();
    let base = generate_texture(&g, &zero, &txt, 1, 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir: Vec<f64> = (0..32).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut prev = 0.0;
    for scale in [1e-3, 1e-2, 1e-1] {
        let f = feature(1, 32, dir.iter().map(|v| v * scale).collect(), Tau::Unbounded);
        let t = generate_texture(&g, &f, &txt, 1, 20).unwrap();
        let diff: f64 = t
            .pixels()
            .data()
            .iter()
            .zip(base.pixels().data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff > prev);
        prev = diff;
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let g = small_gen();
    let txt = g.encode("yellow black graffiti").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let adv = feature(2, 32, (0..64).map(|_| rng.random::<f64>() - 0.5).collect(), Tau::Unbounded);
    let n = 16 * 16 * 3;
    let ones = Raster::filled(16, 16, 3, 1.0 / n as f64);
    let mean = |f: &AdvFeature| generate_texture(&g, f, &txt, 5, 20).unwrap().pixels().mean();
    let grad = generate_texture_gradient(&g, &adv, &txt, 5, 20, &ones).unwrap();
    let h = 1e-5;
    for _ in 0..8 {
        let i = rng.random_range(0..64);
        let mut p = adv.clone();
        p.tokens.data[i] += h;
        let up = mean(&p);
        p.tokens.data[i] -= 2.0 * h;
        let down = mean(&p);
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad.data[i]).abs() / fd.abs().max(grad.data[i].abs()).max(1e-10);
        assert!(rel < 1e-4, "element {i}: fd {fd} analytic {}", grad.data[i]);
    }
}

#[test]
fn lipschitz_bound_in_adversarial_tokens() {
    let g = small_gen();
    let txt = g.encode("colorful camouflage").unwrap();
    let zero = AdvFeature::zeros(1, 32, Tau::Unbounded).unwrap();
    let cond0 = concat_conditioning(&zero, &txt).unwrap();
    let pre0 = g.pre_activation(&cond0, 2, 20).unwrap();
    // Columns of the affine map restricted to the adversarial row.
    let mut frob2 = 0.0;
    for j in 0..32 {
        let mut c = cond0.clone();
        c.data[j] += 1.0;
        let pre = g.pre_activation(&c, 2, 20).unwrap();
        frob2 += pre.data().iter().zip(pre0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let bound = 0.25 * frob2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut measured: f64 = 0.0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..32).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let b: Vec<f64> = (0..32).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let ta = generate_texture(&g, &feature(1, 32, a.clone(), Tau::Unbounded), &txt, 2, 20).unwrap();
        let tb = generate_texture(&g, &feature(1, 32, b.clone(), Tau::Unbounded), &txt, 2, 20).unwrap();
        let dt: f64 = ta
            .pixels()
            .data()
            .iter()
            .zip(tb.pixels().data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let df: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        measured = measured.max(dt / df);
    }
    assert!(measured <= bound, "measured {measured} exceeds bound {bound}");
}

#[test]
fn context_overflow_is_an_error() {
    let g = small_gen();
    let txt: TextFeature = g.encode("a b c d e f g h i j k l m n o p").unwrap();
    let adv = AdvFeature::zeros(1, 32, Tau::Unbounded).unwrap();
    assert!(generate_texture(&g, &adv, &txt, 0, 20).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for tau in [Tau::Bounded(0.5), Tau::Unbounded] {
        let f = feature(2, 3, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.25], tau);
        let path = dir.path().join("adv.json");
        f.save(&path).unwrap();
        assert_eq!(AdvFeature::load(&path).unwrap(), f);
    }
}
