//! Attack objectives. Every mechanism term measures the distance to the
//! worst case (all tokens, heads and blocks in use) and is minimized.

use tslab_autodiff::{Graph, Real, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::model::{ForwardOptions, ForwardOutput, ModelConfig, ModelParams};
use crate::sparsifiers::{self, AVitTrace, AdaVitBlock, AtsBlock, Mechanism, MechanismConfig, MechanismSignals, Setup};

fn zero<F: Real>(g: &mut Graph<F>) -> Var {
    g.constant(Tensor::scalar(F::zero()))
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Class probabilities of frozen clean logits.
pub fn clean_distribution(clean_logits: &[f64]) -> Vec<f64> {
    softmax_f64(clean_logits)
}

/// `-(1/M) sum_m p_m log q_m` with `p` the frozen clean distribution and `q`
/// the softmax of the adversarial logits `[M]`.
pub fn loss_cls<F: Real>(g: &mut Graph<F>, logits: Var, clean_probs: &[f64]) -> Result<Var> {
    let m = g.shape(logits).iter().product::<usize>();
    if clean_probs.len() != m {
        return Err(CoreError::Dimension(format!("{} clean probabilities for {} logits", clean_probs.len(), m)));
    }
    let flat = g.reshape(logits, &[m])?;
    let logq = g.log_softmax(flat, 0)?;
    let p = g.constant(Tensor::from_f64(&[m], clean_probs)?);
    let prod = g.mul(logq, p)?;
    let s = g.sum(prod, None)?;
    Ok(g.scale(s, -1.0 / m as f64)?)
}

/// Cross-entropy of the logits against a true label, `-log q_y`.
pub fn label_ce<F: Real>(g: &mut Graph<F>, logits: Var, label: usize) -> Result<Var> {
    let m = g.shape(logits).iter().product::<usize>();
    let row = g.reshape(logits, &[1, m])?;
    let logq = g.log_softmax(row, 1)?;
    let t = g.reshape(logq, &[m, 1])?;
    let picked = g.gather_rows(t, &[label])?;
    let s = g.sum(picked, None)?;
    Ok(g.scale(s, -1.0)?)
}

/// Mean over attached blocks of `KL(S || 1/N)`, summed over entries with
/// positive score.
pub fn loss_ats<F: Real>(g: &mut Graph<F>, blocks: &[AtsBlock], num_patches: usize) -> Result<Var> {
    if blocks.is_empty() {
        return Ok(zero(g));
    }
    let ln_n = (num_patches as f64).ln();
    let mut acc: Option<Var> = None;
    for b in blocks {
        let k = g.shape(b.scores)[0];
        let keep: Vec<usize> = (0..k).filter(|&i| b.score_values[i] > 0.0).collect();
        let col = g.reshape(b.scores, &[k, 1])?;
        let s = g.gather_rows(col, &keep)?;
        let logs = g.log(s)?;
        let shift = g.constant(Tensor::scalar(F::of(ln_n)));
        let ratio = g.add(logs, shift)?;
        let terms = g.mul(s, ratio)?;
        let kl = g.sum(terms, None)?;
        acc = Some(match acc {
            Some(a) => g.add(a, kl)?,
            None => kl,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / blocks.len() as f64)?)
}

fn mse_to_one<F: Real>(g: &mut Graph<F>, probs: Var) -> Result<Var> {
    let one = g.constant(Tensor::scalar(F::one()));
    let gap = g.sub(probs, one)?;
    let sq = g.square(gap)?;
    Ok(g.mean(sq, None)?)
}

/// Mean over gated blocks of the component, head and patch squared gaps to
/// "keep". The head term only counts when the MSA decision is on.
pub fn loss_adavit<F: Real>(g: &mut Graph<F>, blocks: &[AdaVitBlock]) -> Result<Var> {
    if blocks.is_empty() {
        return Ok(zero(g));
    }
    let mut acc: Option<Var> = None;
    for b in blocks {
        let mut t = mse_to_one(g, b.block_probs)?;
        if b.msa {
            let h = mse_to_one(g, b.head_probs)?;
            t = g.add(t, h)?;
        }
        if g.shape(b.patch_probs)[0] > 0 {
            let p = mse_to_one(g, b.patch_probs)?;
            t = g.add(t, p)?;
        }
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / blocks.len() as f64)?)
}

/// `(1/N) sum_j (1/L) sum_l [token j active in block l] c_{j,l}^2`, with
/// `c` the running halting sums.
pub fn loss_avit<F: Real>(g: &mut Graph<F>, trace: &AVitTrace) -> Result<Var> {
    if trace.blocks.is_empty() {
        return Ok(zero(g));
    }
    let n = trace.blocks[0].active.len();
    let mut acc: Option<Var> = None;
    for b in &trace.blocks {
        let gate: Vec<F> = b.active.iter().map(|&a| if a { F::one() } else { F::zero() }).collect();
        let gate = g.constant(Tensor::new(vec![n], gate)?);
        let sq = g.square(b.cumulative)?;
        let gated = g.mul(sq, gate)?;
        let s = g.sum(gated, None)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / (n * trace.blocks.len()) as f64)?)
}

/// The mechanism-specific attack term for a finished forward pass.
pub fn mechanism_loss<F: Real>(g: &mut Graph<F>, cfg: &ModelConfig, signals: &MechanismSignals) -> Result<Var> {
    match signals {
        MechanismSignals::Ats(b) => loss_ats(g, b, cfg.num_patches()),
        MechanismSignals::AdaVit(b) => loss_adavit(g, b),
        MechanismSignals::AVit(t) => loss_avit(g, t),
        MechanismSignals::Vanilla => {
            Err(CoreError::MechanismUnavailable("the vanilla model has no sparsification to attack".into()))
        }
    }
}

pub struct LossParts {
    pub total: Var,
    pub attack: Var,
    pub cls: Var,
    pub forward: ForwardOutput,
}

/// Sparsified forward on `image` followed by `L_atk + lambda * L_cls`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total<F: Real>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    mcfg: &MechanismConfig,
    params: &ModelParams<Var>,
    image: Var,
    mechanism: Mechanism,
    clean_probs: &[f64],
    lambda: f64,
) -> Result<LossParts> {
    let forward = sparsifiers::run(g, cfg, params, image, mechanism, mcfg, Setup::default(), ForwardOptions::default())?;
    let attack = mechanism_loss(g, cfg, &forward.signals)?;
    let cls = loss_cls(g, forward.logits, clean_probs)?;
    let weighted = g.scale(cls, lambda)?;
    let total = g.add(attack, weighted)?;
    Ok(LossParts { total, attack, cls, forward })
}
