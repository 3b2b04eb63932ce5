//! AdaViT-style usage policies: per-block binary keep decisions for patches,
//! attention heads and the MSA/FFN components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tslab_autodiff::{gumbel_softmax, sample_gumbel, Graph, Real, Tensor, Var};

use super::{GateMode, MechanismConfig, MechanismSignals};
use crate::defense::CapEnforcer;
use crate::error::Result;
use crate::model::{BlockContext, BlockMasks, DecisionParams, Gates, TokenSparsifier};

/// One binary decision set.
struct Binary {
    /// Soft keep probability `[k, 1]`.
    prob: Var,
    keep: Vec<bool>,
    /// Straight-through keep gate `[k, 1]`, training only.
    gate: Option<Var>,
}

fn binary<F: Real>(
    g: &mut Graph<F>,
    logits: Var,
    temperature: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Binary> {
    let k = g.shape(logits)[0];
    let zeros = g.constant(Tensor::zeros(&[k, 1]));
    let pair = g.concat(&[logits, zeros], 1)?;
    let noise: Option<Tensor<F>> = rng.map(|r| sample_gumbel(&[k, 2], r));
    let soft = gumbel_softmax(g, pair, temperature, false, noise.as_ref())?;
    let prob = g.slice_cols(soft, 0, 1)?;
    let keep = g.value(soft).data().chunks(2).map(|r| r[0] >= r[1]).collect();
    let gate = match noise {
        Some(n) => {
            let hard = gumbel_softmax(g, pair, temperature, true, Some(&n))?;
            Some(g.slice_cols(hard, 0, 1)?)
        }
        None => None,
    };
    Ok(Binary { prob, keep, gate })
}

/// Decisions for one block.
pub struct AdaVitDecision {
    /// Keep probabilities `[N]`, `[H]` and `[2]` (MSA, FFN).
    pub patch_probs: Var,
    pub head_probs: Var,
    pub block_probs: Var,
    pub patch_keep: Vec<bool>,
    /// Raw head decisions, before conditioning on the MSA decision.
    pub head_keep: Vec<bool>,
    pub msa: bool,
    pub ffn: bool,
    /// Straight-through gates `[N,1]`, `[H,1]`, `[2,1]` when noise was drawn.
    pub gates: Option<(Var, Var, Var)>,
}

impl AdaVitDecision {
    /// Head masks after conditioning on the MSA decision.
    pub fn effective_heads(&self) -> Vec<bool> {
        self.head_keep.iter().map(|&h| h && self.msa).collect()
    }
}

/// Patch logits come from every patch row of `z`; head and component logits
/// from the class row. `rng = None` means zero Gumbel noise.
pub fn adavit_decide<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    p: &DecisionParams<Var>,
    temperature: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<AdaVitDecision> {
    let n = g.shape(z)[0];
    let cls = g.slice_rows(z, 0, 1)?;
    let patches = g.slice_rows(z, 1, n)?;
    let pl = g.matmul(patches, p.patch_w)?;
    let pl = g.add(pl, p.patch_b)?;
    let hl = g.matmul(cls, p.head_w)?;
    let hl = g.add(hl, p.head_b)?;
    let heads = g.shape(hl)[1];
    let hl = g.reshape(hl, &[heads, 1])?;
    let bl = g.matmul(cls, p.block_w)?;
    let bl = g.add(bl, p.block_b)?;
    let bl = g.reshape(bl, &[2, 1])?;
    let pd = binary(g, pl, temperature, rng.as_deref_mut())?;
    let hd = binary(g, hl, temperature, rng.as_deref_mut())?;
    let bd = binary(g, bl, temperature, rng.as_deref_mut())?;
    let gates = match (pd.gate, hd.gate, bd.gate) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    Ok(AdaVitDecision {
        patch_probs: g.reshape(pd.prob, &[n - 1])?,
        head_probs: g.reshape(hd.prob, &[heads])?,
        block_probs: g.reshape(bd.prob, &[2])?,
        patch_keep: pd.keep,
        head_keep: hd.keep,
        msa: bd.keep[0],
        ffn: bd.keep[1],
        gates,
    })
}

/// Per gated block record.
#[derive(Clone, Debug)]
pub struct AdaVitBlock {
    pub block: usize,
    pub patch_probs: Var,
    pub head_probs: Var,
    pub block_probs: Var,
    /// Hard MSA decision; gates the head term of the attack loss.
    pub msa: bool,
    pub ffn: bool,
    pub patch_keep: Vec<bool>,
    pub heads: Vec<bool>,
}

pub struct AdaVit<'a> {
    start: usize,
    temperature: f64,
    decisions: &'a [DecisionParams<Var>],
    rng: Option<ChaCha8Rng>,
    blocks: Vec<AdaVitBlock>,
    caps: Option<CapEnforcer>,
}

impl<'a> AdaVit<'a> {
    pub fn new(
        mcfg: &MechanismConfig,
        decisions: &'a [DecisionParams<Var>],
        gate: GateMode,
        caps: Option<CapEnforcer>,
    ) -> Self {
        AdaVit {
            start: mcfg.adavit_start_block.saturating_sub(1),
            temperature: mcfg.gumbel_temperature,
            decisions,
            rng: match gate {
                GateMode::Eval => None,
                GateMode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
            blocks: Vec::new(),
            caps,
        }
    }
}

impl<F: Real> TokenSparsifier<F> for AdaVit<'_> {
    fn begin_block(&mut self, g: &mut Graph<F>, ctx: &BlockContext, z: Var) -> Result<BlockMasks> {
        let n = ctx.rows.len();
        if ctx.block < self.start || ctx.block >= self.decisions.len() {
            let mut masks = BlockMasks::full(n, ctx.heads);
            if let Some(caps) = &mut self.caps {
                let mut patch = vec![true; n - 1];
                let conf: Vec<f64> = (0..n - 1).map(|i| -(i as f64)).collect();
                caps.apply(ctx.block, &mut patch, &conf);
                masks.tokens[1..].copy_from_slice(&patch);
            }
            return Ok(masks);
        }
        let d = adavit_decide(g, z, &self.decisions[ctx.block], self.temperature, self.rng.as_mut())?;
        let mut keep = d.patch_keep.clone();
        let mut capped = false;
        if let Some(caps) = &mut self.caps {
            let conf: Vec<f64> = g.value(d.patch_probs).data().iter().map(|x| x.f64()).collect();
            capped = caps.apply(ctx.block, &mut keep, &conf) > 0;
        }
        let heads = d.effective_heads();
        let gates = match d.gates {
            Some((pg, hg, bg)) => {
                let one = g.constant(Tensor::full(&[1, 1], F::one()));
                let mut tok = g.concat(&[one, pg], 0)?;
                if capped {
                    let mut m = vec![true];
                    m.extend_from_slice(&keep);
                    let t = Tensor::new(vec![n, 1], m.iter().map(|&k| if k { F::one() } else { F::zero() }).collect())?;
                    let c = g.constant(t);
                    tok = g.mul(tok, c)?;
                }
                let msa = g.slice_rows(bg, 0, 1)?;
                let ffn = g.slice_rows(bg, 1, 2)?;
                let hg = g.mul(hg, msa)?;
                Some(Gates {
                    tokens: g.reshape(tok, &[n])?,
                    heads: g.reshape(hg, &[ctx.heads])?,
                    msa: g.reshape(msa, &[1])?,
                    ffn: g.reshape(ffn, &[1])?,
                })
            }
            None => None,
        };
        let mut tokens = vec![true];
        tokens.extend_from_slice(&keep);
        self.blocks.push(AdaVitBlock {
            block: ctx.block,
            patch_probs: d.patch_probs,
            head_probs: d.head_probs,
            block_probs: d.block_probs,
            msa: d.msa,
            ffn: d.ffn,
            patch_keep: keep,
            heads: heads.clone(),
        });
        Ok(BlockMasks { tokens, heads, msa: d.msa, ffn: d.ffn, gates })
    }

    fn take_signals(&mut self) -> MechanismSignals {
        MechanismSignals::AdaVit(std::mem::take(&mut self.blocks))
    }
}
