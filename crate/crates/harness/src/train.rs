//! Victim training: a plain backbone, then mechanism fine-tunes that learn
//! to drop tokens under a usage penalty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tslab_autodiff::{Graph, Real, Tensor, Var};
use tslab_core::attack::label_ce;
use tslab_core::data::Sample;
use tslab_core::metrics::{argmax, compute_tur, infer};
use tslab_core::model::{Extras, ForwardOptions, ModelConfig, ModelParams, ModelWeights, Trace};
use tslab_core::sparsifiers::{self, GateMode, Mechanism, MechanismConfig, MechanismSignals, Setup};
use tslab_core::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VictimKind {
    Backbone,
    AdaVit,
    AVit,
}

impl VictimKind {
    pub fn mechanism(self) -> Mechanism {
        match self {
            VictimKind::Backbone => Mechanism::Vanilla,
            VictimKind::AdaVit => Mechanism::AdaVit,
            VictimKind::AVit => Mechanism::AVit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of epochs with linear warmup; the rest decays on a cosine.
    pub warmup: f64,
    pub seed: u64,
    /// Desired fraction of token slots in use after fine-tuning.
    pub usage_target: f64,
    pub usage_weight: f64,
    /// Learning-rate multiplier for decision networks, whose keep-biased
    /// initial logits need to travel further than the fine-tuned backbone.
    pub decision_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup: 0.1,
            seed: 0,
            usage_target: 0.6,
            usage_weight: 2.0,
            decision_lr_scale: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("train.epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0) {
            out.push("train.lr must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.warmup) {
            out.push("train.warmup must lie in [0, 1)".to_string());
        }
        if !(self.usage_target > 0.0 && self.usage_target <= 1.0) {
            out.push("train.usage_target must lie in (0, 1]".to_string());
        }
        if !(self.decision_lr_scale > 0.0) {
            out.push("train.decision_lr_scale must be positive".to_string());
        }
        if self.usage_weight < 0.0 {
            out.push("train.usage_weight must be non-negative".to_string());
        }
        out
    }
}

/// Adam with decoupled weight decay on matrices.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decision_scale: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Real>(weights: &ModelWeights<F>, lr: f64, weight_decay: f64, decision_scale: f64) -> Self {
        let mut m = Vec::new();
        weights.visit(&mut |_, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, decision_scale, step: 0, m, v }
    }

    /// Applies one update; `grads` follows the weights' visit order.
    pub fn update<F: Real>(&mut self, weights: &mut ModelWeights<F>, grads: &[Vec<f64>], lr_scale: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let lr = self.lr * lr_scale;
        let mut k = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let ds = self.decision_scale;
        weights.visit_mut(&mut |name, t| {
            let decay = t.rank() >= 2;
            let lr = if name.starts_with("decisions.") { lr * ds } else { lr };
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let gi = grads[k][i];
                m[k][i] = b1 * m[k][i] + (1.0 - b1) * gi;
                v[k][i] = b2 * v[k][i] + (1.0 - b2) * gi * gi;
                let mut x = w.f64();
                if decay {
                    x -= lr * wd * x;
                }
                x -= lr * (m[k][i] / bc1) / ((v[k][i] / bc2).sqrt() + eps);
                *w = F::of(x);
            }
            k += 1;
        });
    }
}

/// Differentiable usage surrogates paired with the hard usage they stand
/// for. Empty for mechanisms without trainable gates.
fn usage_terms<F: Real>(g: &mut Graph<F>, signals: &MechanismSignals, trace: &Trace) -> Result<Vec<(Var, f64)>> {
    let frac = |v: &[bool]| v.iter().filter(|&&k| k).count() as f64 / v.len().max(1) as f64;
    match signals {
        MechanismSignals::AdaVit(blocks) if !blocks.is_empty() => {
            let k = blocks.len() as f64;
            let mut out = Vec::new();
            let mut kinds: [(Option<Var>, f64); 3] = [(None, 0.0), (None, 0.0), (None, 0.0)];
            for b in blocks {
                let hard = [frac(&b.patch_keep), frac(&b.heads), (b.msa as u8 + b.ffn as u8) as f64 / 2.0];
                for (i, p) in [b.patch_probs, b.head_probs, b.block_probs].into_iter().enumerate() {
                    // Summed within a block so each decision feels the
                    // penalty at full strength.
                    let m = g.sum(p, None)?;
                    kinds[i].0 = Some(match kinds[i].0 {
                        Some(a) => g.add(a, m)?,
                        None => m,
                    });
                    kinds[i].1 += hard[i] / k;
                }
            }
            for (soft, hard) in kinds {
                out.push((g.scale(soft.expect("non-empty"), 1.0 / k)?, hard));
            }
            Ok(out)
        }
        MechanismSignals::AVit(t) if !t.blocks.is_empty() => {
            // Remaining budget 1 - c over active tokens; lowering it makes
            // tokens halt sooner.
            let n = t.blocks[0].active.len();
            let mut acc: Option<Var> = None;
            for b in &t.blocks {
                let gate = b.active.iter().map(|&a| if a { F::one() } else { F::zero() }).collect();
                let gate = g.constant(Tensor::new(vec![n], gate)?);
                let one = g.constant(Tensor::full(&[n], F::one()));
                let rest = g.sub(one, b.cumulative)?;
                let r = g.mul(rest, gate)?;
                let s = g.sum(r, None)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
            let soft = g.scale(acc.expect("non-empty"), 1.0 / (n * t.blocks.len()) as f64)?;
            Ok(vec![(soft, compute_tur(trace))])
        }
        _ => Ok(Vec::new()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub usage: f64,
    pub train_accuracy: f64,
    /// Mean hard TUR over the epoch.
    pub tur: f64,
}

struct StepResult {
    loss: f64,
    ce: f64,
    usage: f64,
    correct: bool,
    tur: f64,
    grads: Vec<Vec<f64>>,
}

fn train_step<F: Real>(
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    tc: &TrainConfig,
    kind: VictimKind,
    weights: &ModelWeights<F>,
    sample: &Sample,
    gate_seed: u64,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let p: ModelParams<Var> = weights.bind(&mut g, true);
    let x = g.constant(sample.image.cast());
    let gate = match kind {
        VictimKind::AdaVit => GateMode::Train { seed: gate_seed },
        _ => GateMode::Eval,
    };
    let setup = Setup { gate, caps: None };
    let out = sparsifiers::run(&mut g, cfg, &p, x, kind.mechanism(), mcfg, setup, ForwardOptions::default())?;
    let ce = label_ce(&mut g, out.logits, sample.label)?;
    let mut loss = ce;
    let mut usage = 1.0;
    let terms = usage_terms(&mut g, &out.signals, &out.trace)?;
    if !terms.is_empty() {
        // Proportional control: the soft surrogate is pushed down while hard
        // usage is above target and up while below it.
        usage = terms.iter().map(|t| t.1).sum::<f64>() / terms.len() as f64;
        let w = tc.usage_weight / terms.len() as f64;
        for (soft, hard) in terms {
            let pen = g.scale(soft, w * (hard - tc.usage_target))?;
            loss = g.add(loss, pen)?;
        }
    }
    let value = g.value(loss).item().f64();
    if !value.is_finite() {
        return Err(CoreError::Diverged(format!("training loss became {value} on image {}", sample.id)));
    }
    let correct = argmax(&g.value(out.logits).to_f64_vec()) == sample.label;
    let tur = compute_tur(&out.trace);
    let ce_value = g.value(ce).item().f64();
    g.backward(loss)?;
    let mut grads = Vec::new();
    p.visit(&mut |_, &v| {
        grads.push(g.grad(v).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]));
    });
    Ok(StepResult { loss: value, ce: ce_value, usage, correct, tur, grads })
}

fn lr_scale(tc: &TrainConfig, step: usize, total: usize) -> f64 {
    let warm = (tc.warmup * total as f64).ceil() as usize;
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (total - warm).max(1) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Minibatch training. `init` continues from existing weights (adding the
/// mechanism parameters a fine-tune needs); otherwise weights start fresh.
pub fn train_victim<F: Real>(
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    tc: &TrainConfig,
    kind: VictimKind,
    train: &[Sample],
    init: Option<ModelWeights<F>>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(ModelWeights<F>, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(CoreError::EmptyDataset("training split is empty".into()));
    }
    let problems = tc.problems();
    if !problems.is_empty() {
        return Err(CoreError::Config(problems.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let extras = Extras { halting: kind == VictimKind::AVit, decisions: kind == VictimKind::AdaVit };
    let mut weights = match init {
        Some(mut w) => {
            let fresh = ModelWeights::<F>::init(cfg, extras, &mut rng);
            if extras.halting && w.halting.is_none() {
                w.halting = fresh.halting;
            }
            if extras.decisions && w.decisions.is_none() {
                w.decisions = fresh.decisions;
            }
            w
        }
        None => ModelWeights::init(cfg, extras, &mut rng),
    };
    let mut adam = Adam::new(&weights, tc.lr, tc.weight_decay, tc.decision_lr_scale);
    let batches = train.len().div_ceil(tc.batch_size);
    let total = tc.epochs * batches;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut ce, mut usage, mut correct, mut tur) = (0.0, 0.0, 0.0, 0usize, 0.0);
        for chunk in order.chunks(tc.batch_size) {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &i in chunk {
                let gate_seed = tc.seed ^ ((step as u64) << 20) ^ train[i].id;
                let r = train_step(cfg, mcfg, tc, kind, &weights, &train[i], gate_seed)?;
                loss += r.loss;
                ce += r.ce;
                usage += r.usage;
                tur += r.tur;
                correct += r.correct as usize;
                match &mut acc {
                    None => acc = Some(r.grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&r.grads) {
                            for (p, q) in x.iter_mut().zip(y) {
                                *p += q;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty chunk");
            let inv = 1.0 / chunk.len() as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= inv);
            adam.update(&mut weights, &grads, lr_scale(tc, step, total));
            step += 1;
        }
        let n = train.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: loss / n,
            ce: ce / n,
            usage: usage / n,
            train_accuracy: correct as f64 / n,
            tur: tur / n,
        };
        log(&entry);
        logs.push(entry);
    }
    Ok((weights, logs))
}

/// Clean accuracy and mean TUR of `weights` under `mechanism`.
pub fn clean_stats<F: Real>(
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    weights: &ModelWeights<F>,
    mechanism: Mechanism,
    samples: &[Sample],
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut tur = 0.0;
    for s in samples {
        let (logits, trace) = infer(cfg, weights, mechanism, mcfg, &s.image.cast(), None)?;
        correct += (argmax(&logits) == s.label) as usize;
        tur += compute_tur(&trace);
    }
    let n = samples.len().max(1) as f64;
    Ok((correct as f64 / n, tur / n))
}
