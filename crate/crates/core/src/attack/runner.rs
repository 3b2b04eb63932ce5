use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tslab_autodiff::{Graph, Real, Tensor};

use super::config::{AttackConfig, Variant};
use super::losses::{clean_distribution, label_ce, loss_total};
use super::perturbation::{Method, Perturbation, SHARED};
use super::pgd::{cosine_step, pgd_step, project};
use crate::data::Sample;
use crate::error::{CoreError, Result};
use crate::metrics::{compute_flops, infer};
use crate::model::{ForwardOptions, ModelConfig, ModelWeights};
use crate::sparsifiers::{self, Mechanism, MechanismConfig, Setup};

/// A trained model together with the mechanism it runs.
pub struct Victim<'a, F: Real> {
    pub mechanism: Mechanism,
    pub weights: &'a ModelWeights<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Random,
    StandardPgd,
    Sponge,
}

/// What the inner loop minimizes.
#[derive(Clone, Copy, Debug)]
enum Objective {
    WorstCase { lambda: f64 },
    /// Negative label cross-entropy.
    StandardPgd,
    /// Negative activation energy.
    Sponge,
}

enum Placement<F> {
    Additive,
    /// `x * (1 - mask) + var * mask`.
    Paste { mask: Tensor<F> },
}

fn objective_grad<F: Real>(
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    victim: &Victim<F>,
    x: &Tensor<F>,
    var: &Tensor<F>,
    placement: &Placement<F>,
    label: usize,
    clean_probs: &[f64],
    objective: Objective,
) -> Result<(f64, Tensor<F>, f64)> {
    let mut g = Graph::new();
    let p = victim.weights.bind(&mut g, false);
    let v = g.param(var.clone());
    let image = match placement {
        Placement::Additive => {
            let xv = g.constant(x.clone());
            g.add(xv, v)?
        }
        Placement::Paste { mask } => {
            let kept = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(mask.data()).map(|(&xi, &m)| xi * (F::one() - m)).collect(),
            )?;
            let kv = g.constant(kept);
            let mv = g.constant(mask.clone());
            let pasted = g.mul(v, mv)?;
            g.add(kv, pasted)?
        }
    };
    let (loss, flops) = match objective {
        Objective::WorstCase { lambda } => {
            let parts = loss_total(&mut g, cfg, mcfg, &p, image, victim.mechanism, clean_probs, lambda)?;
            (parts.total, compute_flops(cfg, &parts.forward.trace))
        }
        Objective::StandardPgd => {
            let out =
                sparsifiers::run(&mut g, cfg, &p, image, victim.mechanism, mcfg, Setup::default(), ForwardOptions::default())?;
            let ce = label_ce(&mut g, out.logits, label)?;
            (g.scale(ce, -1.0)?, compute_flops(cfg, &out.trace))
        }
        Objective::Sponge => {
            let opts = ForwardOptions { track_energy: true };
            let out = sparsifiers::run(&mut g, cfg, &p, image, victim.mechanism, mcfg, Setup::default(), opts)?;
            let e = out.energy.ok_or_else(|| CoreError::Config("no activations were tracked".into()))?;
            (g.scale(e, -1.0)?, compute_flops(cfg, &out.trace))
        }
    };
    let value = g.value(loss).item().f64();
    if !value.is_finite() {
        return Err(CoreError::Diverged(format!("objective became {value}")));
    }
    g.backward(loss)?;
    let grad = g.grad(v).expect("perturbation leaf tracks gradients");
    Ok((value, grad, flops))
}

fn clean_probs<F: Real>(cfg: &ModelConfig, mcfg: &MechanismConfig, victim: &Victim<F>, x: &Tensor<F>) -> Result<Vec<f64>> {
    let (logits, _) = infer(cfg, victim.weights, victim.mechanism, mcfg, x, None)?;
    Ok(clean_distribution(&logits))
}

fn uniform_delta<F: Real>(shape: &[usize], eps: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-eps..=eps))).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

fn image_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn check_victims<F: Real>(ac: &AttackConfig, victims: &[Victim<F>]) -> Result<()> {
    for m in &ac.mechanisms {
        if !victims.iter().any(|v| v.mechanism == *m) {
            return Err(CoreError::MechanismUnavailable(format!("no victim runs {m}")));
        }
    }
    Ok(())
}

/// Per-image PGD under `objective`, cycling victims at random per iteration
/// when more than one is given.
fn per_image<F: Real>(
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    victims: &[Victim<F>],
    samples: &[Sample],
    ac: &AttackConfig,
    objective: Objective,
) -> Result<(Vec<u64>, Vec<Tensor<f32>>, Vec<f64>)> {
    let t_total = ac.iterations;
    let mut curve = vec![0.0; t_total];
    let mut ids = Vec::with_capacity(samples.len());
    let mut deltas = Vec::with_capacity(samples.len());
    for s in samples {
        let x: Tensor<F> = s.image.cast();
        let probs = victims.iter().map(|v| clean_probs(cfg, mcfg, v, &x)).collect::<Result<Vec<_>>>()?;
        let mut rng = image_rng(ac.seed, s.id);
        let mut delta = if ac.random_init {
            uniform_delta(x.shape(), ac.epsilon, &mut rng)
        } else {
            Tensor::zeros(x.shape())
        };
        project(&mut delta, ac.epsilon, Some(&x));
        // Token selection is discontinuous and the mechanism losses only
        // approximate usage, so a single-victim worst-case run keeps the
        // iterate with the most compute (lowest loss among ties).
        let select = victims.len() == 1 && matches!(objective, Objective::WorstCase { .. });
        let mut best = (f64::NEG_INFINITY, f64::INFINITY, delta.clone());
        for t in 0..=t_total {
            let k = if victims.len() == 1 { 0 } else { rng.random_range(0..victims.len()) };
            let (loss, grad, flops) =
                objective_grad(cfg, mcfg, &victims[k], &x, &delta, &Placement::Additive, s.label, &probs[k], objective)?;
            if select && (flops > best.0 || (flops == best.0 && loss < best.1)) {
                best = (flops, loss, delta.clone());
            }
            if t == t_total {
                break;
            }
            curve[t] += loss / samples.len() as f64;
            delta = pgd_step(&delta, &grad, cosine_step(ac.step_max(), t, t_total), ac.epsilon, Some(&x));
        }
        if select {
            delta = best.2;
        }
        ids.push(s.id);
        deltas.push(delta.cast());
    }
    Ok((ids, deltas, curve))
}

/// Universal, class-universal and patch optimization over batches of `pool`.
fn shared<F: Real>(
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    victims: &[Victim<F>],
    pool: &[&Sample],
    ac: &AttackConfig,
) -> Result<(Tensor<f32>, Vec<f64>)> {
    let shape = cfg.image_shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(ac.seed);
    let xs: Vec<Tensor<F>> = pool.iter().map(|s| s.image.cast()).collect();
    let probs: Vec<Vec<Vec<f64>>> = victims
        .iter()
        .map(|v| xs.iter().map(|x| clean_probs(cfg, mcfg, v, x)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;

    let (placement, mut var) = match ac.variant {
        Variant::Patch { size, x: px, y: py } => {
            let (h, w) = (cfg.image_size, cfg.image_size);
            let mut mask = Tensor::zeros(&shape);
            let mut init = Tensor::zeros(&shape);
            for c in 0..cfg.channels {
                for yy in py..py + size {
                    for xx in px..px + size {
                        let i = (c * h + yy) * w + xx;
                        mask.data_mut()[i] = F::one();
                        init.data_mut()[i] = F::of(rng.random_range(0.0..1.0));
                    }
                }
            }
            (Placement::Paste { mask }, init)
        }
        _ => {
            let mut d =
                if ac.random_init { uniform_delta(&shape, ac.epsilon, &mut rng) } else { Tensor::zeros(&shape) };
            project(&mut d, ac.epsilon, None);
            (Placement::Additive, d)
        }
    };

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(ac.iterations);
    for t in 0..ac.iterations {
        let k = if victims.len() == 1 { 0 } else { rng.random_range(0..victims.len()) };
        let mut grad = Tensor::zeros(&shape);
        let mut total = 0.0;
        let batch = ac.batch_size.min(pool.len());
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let (loss, g, _) = objective_grad(
                cfg,
                mcfg,
                &victims[k],
                &xs[i],
                &var,
                &placement,
                pool[i].label,
                &probs[k][i],
                Objective::WorstCase { lambda: ac.lambda },
            )?;
            total += loss;
            grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b);
        }
        curve.push(total / batch as f64);
        let alpha = cosine_step(ac.step_max(), t, ac.iterations);
        var = match &placement {
            Placement::Additive => pgd_step(&var, &grad, alpha, ac.epsilon, None),
            Placement::Paste { mask } => {
                let mut next = pgd_step(&var, &grad, alpha, f64::INFINITY, None);
                for (v, &m) in next.data_mut().iter_mut().zip(mask.data()) {
                    *v = if m > F::zero() { v.max(F::zero()).min(F::one()) } else { F::zero() };
                }
                next
            }
        };
    }

    let out = match ac.variant {
        Variant::Patch { size, x: px, y: py } => {
            let (h, w) = (cfg.image_size, cfg.image_size);
            let mut data = Vec::with_capacity(cfg.channels * size * size);
            for c in 0..cfg.channels {
                for yy in py..py + size {
                    for xx in px..px + size {
                        data.push(var.data()[(c * h + yy) * w + xx].f64() as f32);
                    }
                }
            }
            Tensor::new(vec![cfg.channels, size, size], data)?
        }
        _ => var.cast(),
    };
    Ok((out, curve))
}

fn record(ac: &AttackConfig, method: Method, config_json: &str) -> Perturbation {
    Perturbation {
        method,
        variant: ac.variant.clone(),
        epsilon: ac.epsilon,
        lambda: ac.lambda,
        iterations: ac.iterations,
        seed: ac.seed,
        mechanisms: ac.mechanisms.clone(),
        image_ids: Vec::new(),
        deltas: Vec::new(),
        curve: Vec::new(),
        config_json: config_json.to_string(),
    }
}

/// Crafts the configured perturbation against `victims` (one per mechanism
/// in `ac.mechanisms`). `config_json` is embedded verbatim in the artifact.
pub fn run_attack<F: Real>(
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    victims: &[Victim<F>],
    samples: &[Sample],
    ac: &AttackConfig,
    config_json: &str,
) -> Result<Perturbation> {
    ac.validate(cfg)?;
    check_victims(ac, victims)?;
    let active: Vec<Victim<F>> = ac
        .mechanisms
        .iter()
        .map(|m| {
            let v = victims.iter().find(|v| v.mechanism == *m).expect("checked above");
            Victim { mechanism: v.mechanism, weights: v.weights }
        })
        .collect();
    let mut out = record(ac, Method::Attack, config_json);
    match ac.variant {
        Variant::Single => {
            if samples.is_empty() {
                return Err(CoreError::EmptyDataset("no images to attack".into()));
            }
            let (ids, deltas, curve) =
                per_image(cfg, mcfg, &active, samples, ac, Objective::WorstCase { lambda: ac.lambda })?;
            out.image_ids = ids;
            out.deltas = deltas;
            out.curve = curve;
        }
        _ => {
            let pool: Vec<&Sample> = match ac.variant {
                Variant::ClassUniversal { class } => samples.iter().filter(|s| s.label == class).collect(),
                _ => samples.iter().collect(),
            };
            if pool.is_empty() {
                return Err(CoreError::EmptyDataset(format!("no images for the {} variant", ac.variant.name())));
            }
            let (delta, curve) = shared(cfg, mcfg, &active, &pool, ac)?;
            out.image_ids = vec![SHARED];
            out.deltas = vec![delta];
            out.curve = curve;
        }
    }
    Ok(out)
}

/// Reference perturbations: uniform noise, prediction-flipping PGD and
/// activation-maximizing (sponge) PGD, all per image.
pub fn baseline_attack<F: Real>(
    kind: Baseline,
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    victim: &Victim<F>,
    samples: &[Sample],
    ac: &AttackConfig,
    config_json: &str,
) -> Result<Perturbation> {
    if samples.is_empty() {
        return Err(CoreError::EmptyDataset("no images to attack".into()));
    }
    let method = match kind {
        Baseline::Random => Method::Random,
        Baseline::StandardPgd => Method::StandardPgd,
        Baseline::Sponge => Method::Sponge,
    };
    let mut ac = ac.clone();
    ac.variant = Variant::Single;
    ac.mechanisms = vec![victim.mechanism];
    let mut out = record(&ac, method, config_json);
    let victims = [Victim { mechanism: victim.mechanism, weights: victim.weights }];
    match kind {
        Baseline::Random => {
            for s in samples {
                let mut rng = image_rng(ac.seed, s.id);
                let mut d: Tensor<f32> = uniform_delta(s.image.shape(), ac.epsilon, &mut rng);
                project(&mut d, ac.epsilon, Some(&s.image));
                out.image_ids.push(s.id);
                out.deltas.push(d);
            }
        }
        Baseline::StandardPgd | Baseline::Sponge => {
            let objective = if kind == Baseline::Sponge { Objective::Sponge } else { Objective::StandardPgd };
            let (ids, deltas, curve) = per_image(cfg, mcfg, &victims, samples, &ac, objective)?;
            out.image_ids = ids;
            out.deltas = deltas;
            out.curve = curve;
        }
    }
    Ok(out)
}
