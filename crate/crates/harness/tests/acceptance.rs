//! End-to-end acceptance run: trains the toy victims, crafts the attack
//! matrix and checks criteria 1-9. Prints one PASS/FAIL line per criterion
//! to stderr (uncaptured) and fails if any criterion fails.
//!
//! Takes roughly 40 minutes on one core.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as pick;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tslab_autodiff::{gradcheck, AutodiffError, Tensor};
use tslab_core::attack::{clean_distribution, loss_total, run_attack, AttackConfig, Variant};
use tslab_core::metrics::{compute_flops, evaluate_set, infer, spearman};
use tslab_core::model::{ModelConfig, ModelWeights, Trace};
use tslab_core::sparsifiers::{ats_inverse_cdf_sample, Mechanism, MechanismConfig};
use tslab_harness::experiment::{
    craft_all, defend_all, evaluate_all, run_attack_stage, run_gen_data, run_train, spread, ExperimentConfig, Lab,
    Stage,
};

const MECHS: [Mechanism; 3] = [Mechanism::Ats, Mechanism::AdaVit, Mechanism::AVit];

fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(out: &mut Vec<Verdict>, id: usize, pass: bool, detail: String) {
    say(&format!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" }));
    out.push(Verdict { id, pass, detail });
}

fn config(root: &Path) -> ExperimentConfig {
    let attack = |variant: &str| json!({ "iterations": 100, "variant": { "kind": variant } });
    let v = json!({
        "seed": 0,
        "dataset": root.join("data"),
        "checkpoints": {
            "backbone": root.join("ckpt/backbone.tslw"),
            "adavit": root.join("ckpt/adavit.tslw"),
            "avit": root.join("ckpt/avit.tslw")
        },
        "attacks": [
            { "attack": attack("single") },
            { "attack": attack("universal") },
            { "attack": attack("single"), "ensemble": true }
        ],
        "baselines": ["random"],
        "defense": { "policy": "confidence", "holdout_size": 100 },
        "eval_images": 200,
        "universal_images": 200,
        "output_dir": root.join("run")
    });
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

// ------------------------------------------------------------- criterion 1

fn flop_model() -> (bool, String) {
    let cfg = ModelConfig::deit_small();
    let g = compute_flops(&cfg, &Trace::vanilla(&cfg)) / 1e9;
    ((g - 4.6).abs() <= 0.05 * 4.6, format!("DeiT-s {g:.3} GFLOPs"))
}

// ------------------------------------------------------------- criterion 2

fn gradient_fidelity(
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    victims: &BTreeMap<Mechanism, ModelWeights<f64>>,
    x: &Tensor<f64>,
    eps: f64,
) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let delta = Tensor::new(x.shape().to_vec(), (0..x.numel()).map(|_| rng.random_range(-eps..eps)).collect()).unwrap();
    // (component, mechanism, lambda)
    let mut jobs: Vec<(&str, Mechanism, f64)> = vec![("cls", Mechanism::Ats, 8e-4)];
    jobs.extend(MECHS.iter().map(|&m| ("attack", m, 8e-4)));
    jobs.extend(MECHS.iter().map(|&m| ("total", m, 8e-4)));
    let mut worst_all = 0.0f64;
    let mut parts = Vec::new();
    let mut ok = true;
    for (component, m, lambda) in jobs {
        let w = &victims[&m];
        let (clean, _) = infer(cfg, w, m, mcfg, x, None).unwrap();
        let p = clean_distribution(&clean);
        let coords = pick(&mut rng, x.numel(), 20).into_vec();
        // Step near the cube root of machine epsilon. At 1e-6 round-off
        // swamps the tiny cls gradients (~1e-7).
        let samples = gradcheck::check(&delta, &coords, 1e-5, |g, d| {
            let params = w.bind(g, false);
            let xv = g.constant(x.clone());
            let img = g.add(xv, d)?;
            let lp = loss_total(g, cfg, mcfg, &params, img, m, &p, lambda)
                .map_err(|e| AutodiffError::InvalidArgument(e.to_string()))?;
            Ok(match component {
                "cls" => lp.cls,
                "attack" => lp.attack,
                _ => lp.total,
            })
        })
        .unwrap();
        let worst = samples.iter().map(|s| s.rel_error()).fold(0.0, f64::max);
        ok &= samples.len() >= 20 && worst < 1e-4;
        worst_all = worst_all.max(worst);
        let name = if component == "cls" { "cls".to_string() } else { format!("{component}/{m}") };
        parts.push(format!("{name} {worst:.1e}"));
    }
    (ok, format!("20 coords each, worst relative error {worst_all:.2e} [{}]", parts.join(", ")))
}

// ------------------------------------------------------------- criterion 3

/// For every fixed point, scan the CDF from the first token.
fn cdf_walk(scores: &[f64], samples: usize) -> Vec<usize> {
    let last_positive = scores.iter().rposition(|&s| s > 0.0).unwrap_or(scores.len() - 1);
    let mut out: Vec<usize> = (1..=samples)
        .map(|i| {
            let r = (2 * i - 1) as f64 / (2 * samples) as f64;
            let mut acc = 0.0;
            for (n, s) in scores.iter().enumerate() {
                acc += s;
                if acc >= r {
                    return n.min(last_positive);
                }
            }
            last_positive
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn sampler_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=16);
        let r = rng.random_range(1..=16);
        let mut s: Vec<f64> =
            (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() }).collect();
        if s.iter().all(|&v| v == 0.0) {
            s[rng.random_range(0..n)] = 1.0;
        }
        let total: f64 = s.iter().sum();
        s.iter_mut().for_each(|v| *v /= total);
        mismatches += (ats_inverse_cdf_sample(&s, r) != cdf_walk(&s, r)) as usize;
    }
    let mut extremes = 0;
    for n in 1..=16usize {
        for r in 1..=16usize {
            if r <= n && ats_inverse_cdf_sample(&vec![1.0 / n as f64; n], r).len() != r {
                extremes += 1;
            }
            for hot in 0..n {
                let mut s = vec![0.0; n];
                s[hot] = 1.0;
                if ats_inverse_cdf_sample(&s, r) != vec![hot] {
                    extremes += 1;
                }
            }
        }
    }
    (
        mismatches == 0 && extremes == 0,
        format!("{mismatches}/1000 random simplexes differ, {extremes} extreme cases wrong"),
    )
}

// ---------------------------------------------------- criterion 9 (repeat)

fn repeatable_f64(base: &ExperimentConfig, root: &Path) -> (bool, String) {
    let mut cfg = base.clone();
    cfg.precision = tslab_harness::experiment::Precision::F64;
    cfg.eval_images = 6;
    cfg.universal_images = 8;
    cfg.defense = None;
    cfg.output_dir = root.join("repeat");
    for plan in &mut cfg.attacks {
        plan.attack.iterations = 5;
        plan.attack.random_init = true;
    }
    run_attack_stage(&cfg, &mut |_| {}).unwrap();
    let first = common::snapshot(&cfg.output_dir);
    run_attack_stage(&cfg, &mut |_| {}).unwrap();
    let second = common::snapshot(&cfg.output_dir);
    (first == second && !first.is_empty(), format!("{} f64 artifacts written twice, identical: {}", first.len(), first == second))
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = config(root);
    let mut out = Vec::new();
    let elapsed = || format!("{:.0}s", start.elapsed().as_secs_f64());

    let (pass, d) = flop_model();
    verdict(&mut out, 1, pass, d);

    run_gen_data(&cfg, None).unwrap();
    let log = run_train(&cfg, None, &mut |_, _| {}).unwrap();
    for v in &log.victims {
        say(&format!("INFO trained {:?}: test accuracy {:.3}, TUR {:.3}", v.victim, v.test_accuracy, v.test_tur));
    }
    say(&format!("INFO training done at {}", elapsed()));

    let lab = Lab::<f32>::open(&cfg, Stage::Defend).unwrap();
    let eps = AttackConfig::default().epsilon;

    {
        let victims: BTreeMap<Mechanism, ModelWeights<f64>> =
            MECHS.iter().map(|&m| (m, lab.victims[&m].cast::<f64>())).collect();
        let x: Tensor<f64> = lab.eval[0].image.cast();
        let (pass, d) = gradient_fidelity(&cfg.model, &cfg.mechanism, &victims, &x, eps);
        verdict(&mut out, 2, pass, d);
    }

    let (pass, d) = sampler_oracle();
    verdict(&mut out, 3, pass, d);

    let crafted = craft_all(&lab, &mut |msg| say(&format!("INFO attacking {msg} at {}", elapsed()))).unwrap();
    let (summary, table) = evaluate_all(&lab, &crafted).unwrap();
    let tur = |row: &str, m: Mechanism| summary.get(row, m).unwrap().mean.tur;
    for e in &summary.rows {
        say(&format!(
            "INFO {:<16} {:<7} TUR {:.3} GFLOPs {:.4} acc {:.3} preserved {:.3}",
            e.row, e.mechanism, e.mean.tur, e.mean.gflops, e.mean.accuracy, e.mean.preservation_rate
        ));
    }

    // 4
    {
        let clean = tur("clean", Mechanism::AVit);
        let rows = &table[&("single".to_string(), Mechanism::AVit, 0)];
        let hit = rows.iter().filter(|r| r.tur >= 0.95).count();
        let frac = hit as f64 / rows.len() as f64;
        let pass = clean <= 0.85 && rows.len() == 200 && frac >= 0.9;
        verdict(
            &mut out,
            4,
            pass,
            format!("A-ViT clean TUR {clean:.3}; {hit}/{} images reach TUR >= 0.95", rows.len()),
        );
    }

    // 5
    {
        let mut pass = true;
        let mut parts = Vec::new();
        for m in MECHS {
            let (c, u, s, r) = (tur("clean", m), tur("universal", m), tur("single", m), tur("random", m));
            pass &= c < u && u < s && s <= 1.0 && (r - c).abs() < 0.05 && s - c >= 0.10;
            parts.push(format!("{m}: clean {c:.3} random {r:.3} universal {u:.3} single {s:.3}"));
        }
        verdict(&mut out, 5, pass, parts.join("; "));
    }

    // 6
    {
        let subset = spread(lab.eval.clone(), 100);
        let ids: Vec<u64> = subset.iter().map(|s| s.id).collect();
        let mut pass = true;
        let mut parts = Vec::new();
        for m in MECHS {
            let rows = &table[&("single".to_string(), m, 0)];
            let full = summary.get("single", m).unwrap().mean.preservation_rate;
            let on_subset: Vec<_> = rows.iter().filter(|r| ids.contains(&r.id)).collect();
            let stealthy =
                on_subset.iter().filter(|r| r.adv_pred == r.clean_pred).count() as f64 / on_subset.len() as f64;
            let ac = AttackConfig {
                iterations: 100,
                lambda: 0.0,
                mechanisms: vec![m],
                variant: Variant::Single,
                ..AttackConfig::default()
            };
            let victims = [lab.victim(m)];
            let p = run_attack(&cfg.model, &cfg.mechanism, &victims, &subset, &ac, "{}").unwrap();
            let (rep, _) = evaluate_set(&cfg.model, &lab.victims[&m], m, &cfg.mechanism, &subset, Some(&p), None).unwrap();
            let gap = stealthy - rep.preservation_rate;
            pass &= full >= 0.85 && gap >= 0.10;
            parts.push(format!(
                "{m}: preserved {full:.3} on 200 images; on 100 images {stealthy:.3} vs {:.3} without the stealth term",
                rep.preservation_rate
            ));
        }
        verdict(&mut out, 6, pass, parts.join("; "));
        say(&format!("INFO stealth ablation done at {}", elapsed()));
    }

    // 7
    {
        let mut pass = true;
        let mut parts = Vec::new();
        for m in MECHS {
            let c = tur("clean", m);
            let (single, ens) = (tur("single", m) - c, tur("ensemble_single", m) - c);
            pass &= single > 0.0 && ens >= 0.6 * single;
            parts.push(format!("{m}: ensemble gain {ens:.3} vs single {single:.3}"));
        }
        verdict(&mut out, 7, pass, parts.join("; "));
    }

    // 8
    {
        let report = defend_all(&lab, &crafted).unwrap();
        let mut pass = true;
        let mut parts = Vec::new();
        for md in &report.mechanisms {
            let excess = md.rows.iter().map(|r| r.max_cap_excess).max().unwrap_or(0);
            let worst = md.rows.iter().map(|r| r.defended_flops / md.clean_flops).fold(0.0, f64::max);
            let drop = md.clean_accuracy - md.defended_clean_accuracy;
            pass &= excess == 0 && worst <= 1.10 && drop <= 0.02;
            parts.push(format!(
                "{}: caps {:?}, excess {excess}, worst defended/clean FLOPs {worst:.3}, clean accuracy {:.3} -> {:.3}",
                md.mechanism, md.defense.caps, md.clean_accuracy, md.defended_clean_accuracy
            ));
            for r in &md.rows {
                say(&format!(
                    "INFO defense {} {:<16} FLOPs {:.0} -> {:.0} (clean {:.0})",
                    md.mechanism, r.row, r.undefended_flops, r.defended_flops, md.clean_flops
                ));
            }
        }
        verdict(&mut out, 8, pass, parts.join("; "));
    }

    // 9
    {
        let mut worst = 0.0f64;
        let mut valid = true;
        for c in &crafted {
            worst = worst.max(c.perturbation.max_abs());
            for s in lab.eval_pool(&c.perturbation.variant) {
                let adv = c.perturbation.apply(&s).unwrap();
                valid &= adv.data().iter().all(|v| (0.0..=1.0).contains(v));
                let gap = adv.data().iter().zip(s.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
                worst = worst.max(gap as f64);
            }
        }
        let (same, d) = repeatable_f64(&cfg, root);
        let pass = worst <= eps + 1e-6 && valid && same;
        verdict(
            &mut out,
            9,
            pass,
            format!("{} perturbations, largest change {worst:.6} (budget {eps:.6}), pixels valid: {valid}; {d}", crafted.len()),
        );
    }

    for m in MECHS {
        let rows = &table[&("single".to_string(), m, 0)];
        let (t, f): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.tur, r.flops)).unzip();
        say(&format!("INFO {m}: Spearman(TUR, FLOPs) over attacked images {:.3}", spearman(&t, &f)));
    }
    say(&format!("INFO total {}", elapsed()));

    let failed: Vec<String> = out.iter().filter(|v| !v.pass).map(|v| format!("{}: {}", v.id, v.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

