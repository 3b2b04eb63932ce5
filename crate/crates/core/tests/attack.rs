mod common;

use common::{image, peaky, samples, small, weights};
use tslab_autodiff::{gradcheck, AutodiffError, Graph, Tensor};
use tslab_core::attack::{
    baseline_attack, clean_distribution, loss_total, run_attack, AttackConfig, Baseline, Perturbation, Variant,
    Victim,
};
use tslab_core::data::Sample;
use tslab_core::metrics::infer;
use tslab_core::model::{ModelConfig, ModelWeights};
use tslab_core::sparsifiers::{Mechanism, MechanismConfig};

fn mcfg() -> MechanismConfig {
    MechanismConfig { ats_start_block: 2, ..MechanismConfig::default() }
}

fn victims<'a, F: tslab_autodiff::Real>(w: &'a ModelWeights<F>) -> Vec<Victim<'a, F>> {
    [Mechanism::Ats, Mechanism::AdaVit, Mechanism::AVit].into_iter().map(|m| Victim { mechanism: m, weights: w }).collect()
}

fn quick(variant: Variant, mechanisms: Vec<Mechanism>, iterations: usize) -> AttackConfig {
    AttackConfig { iterations, variant, mechanisms, batch_size: 3, ..AttackConfig::default() }
}

fn check_budget(p: &Perturbation, set: &[Sample], eps: f64) {
    for s in set {
        let adv = p.apply(s).unwrap();
        assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if !matches!(p.variant, Variant::Patch { .. }) {
            let gap = adv.data().iter().zip(s.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(gap as f64 <= eps + 1e-6, "{gap}");
        }
    }
    if !matches!(p.variant, Variant::Patch { .. }) {
        assert!(p.max_abs() <= eps + 1e-6);
    }
}

#[test]
fn zero_iterations_leave_images_untouched() {
    let cfg = small();
    let w: ModelWeights<f32> = weights(&cfg, 1);
    let set = samples(&cfg, 3, 1);
    for variant in [Variant::Single, Variant::Universal] {
        let p = run_attack(&cfg, &mcfg(), &victims(&w), &set, &quick(variant, vec![Mechanism::Ats], 0), "{}").unwrap();
        for s in &set {
            assert_eq!(p.apply(s).unwrap(), s.image);
        }
    }
}

#[test]
fn every_variant_respects_the_budget_and_pixel_range() {
    let cfg = small();
    let w: ModelWeights<f32> = peaky(&cfg, 2);
    let set = samples(&cfg, 4, 2);
    let variants = [
        Variant::Single,
        Variant::ClassUniversal { class: 1 },
        Variant::Universal,
        Variant::Patch { size: 3, x: 2, y: 1 },
    ];
    for variant in variants {
        for m in [vec![Mechanism::Ats], vec![Mechanism::AdaVit], vec![Mechanism::AVit], vec![Mechanism::Ats, Mechanism::AVit]] {
            let ac = quick(variant.clone(), m.clone(), 4);
            let p = run_attack(&cfg, &mcfg(), &victims(&w), &set, &ac, "{}").unwrap();
            assert_eq!(p.curve.len(), 4, "{variant:?} {m:?}");
            check_budget(&p, &set, ac.epsilon);
        }
    }
}

#[test]
fn patch_only_changes_its_square() {
    let cfg = small();
    let w: ModelWeights<f32> = peaky(&cfg, 3);
    let set = samples(&cfg, 2, 3);
    let ac = quick(Variant::Patch { size: 3, x: 2, y: 1 }, vec![Mechanism::Ats], 3);
    let p = run_attack(&cfg, &mcfg(), &victims(&w), &set, &ac, "{}").unwrap();
    assert_eq!(p.deltas[0].shape(), &[3, 3, 3]);
    let s = cfg.image_size;
    for sample in &set {
        let adv = p.apply(sample).unwrap();
        for c in 0..3 {
            for row in 0..s {
                for col in 0..s {
                    let i = (c * s + row) * s + col;
                    let inside = (1..4).contains(&row) && (2..5).contains(&col);
                    if inside {
                        assert_eq!(adv.data()[i], p.deltas[0].data()[(c * 3 + row - 1) * 3 + col - 2]);
                    } else {
                        assert_eq!(adv.data()[i], sample.image.data()[i]);
                    }
                }
            }
        }
    }
}

#[test]
fn double_precision_runs_are_repeatable() {
    let cfg = small();
    let w: ModelWeights<f64> = peaky(&cfg, 4);
    let set = samples(&cfg, 3, 4);
    for variant in [Variant::Single, Variant::Universal] {
        let ac = AttackConfig { random_init: true, ..quick(variant, vec![Mechanism::Ats, Mechanism::AdaVit], 5) };
        let a = run_attack(&cfg, &mcfg(), &victims(&w), &set, &ac, "{}").unwrap();
        let b = run_attack(&cfg, &mcfg(), &victims(&w), &set, &ac, "{}").unwrap();
        assert_eq!(a, b);
        let c = run_attack(&cfg, &mcfg(), &victims(&w), &set, &AttackConfig { seed: 1, ..ac }, "{}").unwrap();
        assert_ne!(a.deltas, c.deltas);
    }
}

#[test]
fn random_baseline_stays_in_range_and_is_not_trivial() {
    let cfg = small();
    let w: ModelWeights<f32> = weights(&cfg, 5);
    let set = samples(&cfg, 5, 5);
    let ac = AttackConfig::default();
    let v = Victim { mechanism: Mechanism::Ats, weights: &w };
    let p = baseline_attack(Baseline::Random, &cfg, &mcfg(), &v, &set, &ac, "{}").unwrap();
    check_budget(&p, &set, ac.epsilon);
    assert_eq!(p.image_ids, set.iter().map(|s| s.id).collect::<Vec<_>>());
    // Interior pixels see the full range of the uniform draw.
    assert!(p.max_abs() > 0.9 * ac.epsilon);
}

#[test]
fn sponge_raises_activation_energy_on_most_steps() {
    let cfg = small();
    let w: ModelWeights<f64> = weights(&cfg, 6);
    let set = samples(&cfg, 3, 6);
    let ac = AttackConfig { iterations: 30, ..AttackConfig::default() };
    let v = Victim { mechanism: Mechanism::Vanilla, weights: &w };
    let p = baseline_attack(Baseline::Sponge, &cfg, &mcfg(), &v, &set, &ac, "{}").unwrap();
    // The curve records negative energy.
    let falls = p.curve.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falls as f64 >= 0.8 * (p.curve.len() - 1) as f64, "{:?}", p.curve);
    check_budget(&p, &set, ac.epsilon);
}

#[test]
fn invalid_attack_configs_report_every_problem() {
    let cfg = small();
    let ac = AttackConfig {
        epsilon: 0.0,
        lambda: -1.0,
        mechanisms: vec![Mechanism::Vanilla],
        variant: Variant::Patch { size: 4, x: 6, y: 0 },
        ..AttackConfig::default()
    };
    assert_eq!(ac.problems(&cfg).len(), 4, "{:?}", ac.problems(&cfg));
    let w: ModelWeights<f32> = weights(&cfg, 7);
    assert!(run_attack(&cfg, &mcfg(), &victims(&w), &samples(&cfg, 1, 7), &ac, "{}").is_err());
}

#[test]
fn class_universal_without_images_of_the_class_fails() {
    let cfg = small();
    let w: ModelWeights<f32> = weights(&cfg, 8);
    let set: Vec<Sample> = samples(&cfg, 4, 8).into_iter().filter(|s| s.label != 2).collect();
    let ac = quick(Variant::ClassUniversal { class: 2 }, vec![Mechanism::Ats], 2);
    let err = run_attack(&cfg, &mcfg(), &victims(&w), &set, &ac, "{}");
    assert!(matches!(err, Err(tslab_core::CoreError::EmptyDataset(_))));
}

fn total_and_attack(cfg: &ModelConfig, w: &ModelWeights<f64>, x: &Tensor<f64>, m: Mechanism, lambda: f64) -> (f64, f64, f64) {
    let (clean, _) = infer(cfg, w, m, &mcfg(), x, None).unwrap();
    let p = clean_distribution(&clean);
    let mut g = Graph::new();
    let params = w.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let parts = loss_total(&mut g, cfg, &mcfg(), &params, xv, m, &p, lambda).unwrap();
    (g.value(parts.total).item(), g.value(parts.attack).item(), g.value(parts.cls).item())
}

#[test]
fn zero_lambda_is_the_pure_attack_loss() {
    let cfg = small();
    let w: ModelWeights<f64> = peaky(&cfg, 9);
    for m in [Mechanism::Ats, Mechanism::AdaVit, Mechanism::AVit] {
        let (total, attack, _) = total_and_attack(&cfg, &w, &image(&cfg, 10), m, 0.0);
        assert_eq!(total, attack, "{m}");
    }
}

#[test]
fn uniform_scores_on_the_clean_image_leave_only_the_scaled_entropy() {
    let cfg = small();
    let mut w: ModelWeights<f64> = weights(&cfg, 11);
    for b in &mut w.blocks {
        b.wq = Tensor::zeros(b.wq.shape());
        b.wk = Tensor::zeros(b.wk.shape());
        b.wv = Tensor::zeros(b.wv.shape());
        b.bv = Tensor::full(b.bv.shape(), 0.5);
    }
    let x = image(&cfg, 12);
    let lambda = 8e-4;
    let (total, attack, _) = total_and_attack(&cfg, &w, &x, Mechanism::Ats, lambda);
    assert!(attack.abs() < 1e-12, "{attack}");
    let (clean, _) = infer(&cfg, &w, Mechanism::Ats, &mcfg(), &x, None).unwrap();
    let p = clean_distribution(&clean);
    let entropy: f64 = -p.iter().map(|p| p * p.ln()).sum::<f64>();
    assert!((total - lambda * entropy / cfg.num_classes as f64).abs() < 1e-12);
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let cfg = small();
    let mut w: ModelWeights<f64> = weights(&cfg, 13);
    // Keep probabilities away from saturation so the gradients are not
    // below what central differences can resolve.
    for d in w.decisions.as_mut().unwrap() {
        d.patch_b = Tensor::zeros(d.patch_b.shape());
        d.head_b = Tensor::zeros(d.head_b.shape());
        d.block_b = Tensor::full(d.block_b.shape(), 0.5);
    }
    let x: Tensor<f64> = image(&cfg, 14);
    let coords = [5, 77, 150];
    for m in [Mechanism::Ats, Mechanism::AdaVit, Mechanism::AVit] {
        let (clean, _) = infer(&cfg, &w, m, &mcfg(), &x, None).unwrap();
        let p = clean_distribution(&clean);
        let delta = Tensor::full(x.shape(), 0.01);
        let samples = gradcheck::check(&delta, &coords, 1e-6, |g, d| {
            let params = w.bind(g, false);
            let xv = g.constant(x.clone());
            let img = g.add(xv, d)?;
            let parts = loss_total(g, &cfg, &mcfg(), &params, img, m, &p, 0.5)
                .map_err(|e| AutodiffError::InvalidArgument(e.to_string()))?;
            Ok(parts.total)
        })
        .unwrap();
        for s in samples {
            assert!(s.rel_error() < 1e-4, "{m} coord {}: {} vs {}", s.index, s.analytic, s.numeric);
        }
    }
}

#[test]
fn artifacts_round_trip() {
    let cfg = small();
    let w: ModelWeights<f32> = weights(&cfg, 15);
    let set = samples(&cfg, 2, 15);
    let p = run_attack(&cfg, &mcfg(), &victims(&w), &set, &quick(Variant::Single, vec![Mechanism::AVit], 2), "{\"a\":1}")
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.tslp");
    p.save(&path).unwrap();
    assert_eq!(Perturbation::load(&path).unwrap(), p);
    std::fs::write(&path, b"not an artifact").unwrap();
    assert!(Perturbation::load(&path).is_err());
}
