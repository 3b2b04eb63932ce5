//! Adaptive token sampling: class-attention significance scores and
//! inverse-CDF sampling at fixed quantile points.

use tslab_autodiff::{Graph, Real, Tensor, Var};

use super::{MechanismConfig, MechanismSignals};
use crate::defense::CapEnforcer;
use crate::error::Result;
use crate::model::{AttentionOutput, BlockContext, BlockMasks, ModelConfig, Selection, TokenSparsifier};

/// Significance scores over the non-class tokens.
///
/// `class_attn[h][j]` is head `h`'s class-query attention on token `j` and
/// `value_norms[h][j]` the norm of that token's value vector. Each head is
/// normalized separately, then the heads are averaged. A head whose
/// denominator vanishes falls back to uniform and sets the returned flag.
pub fn ats_significance(class_attn: &[Vec<f64>], value_norms: &[Vec<f64>]) -> (Vec<f64>, bool) {
    let n = class_attn.first().map_or(0, Vec::len);
    let heads = class_attn.len();
    let mut s = vec![0.0; n];
    let mut fallback = false;
    for (a, v) in class_attn.iter().zip(value_norms) {
        let w: Vec<f64> = a.iter().zip(v).map(|(a, v)| a * v).collect();
        let denom: f64 = w.iter().sum();
        if denom > 0.0 && denom.is_finite() {
            s.iter_mut().zip(&w).for_each(|(s, w)| *s += w / denom);
        } else {
            fallback = true;
            s.iter_mut().for_each(|s| *s += 1.0 / n as f64);
        }
    }
    s.iter_mut().for_each(|s| *s /= heads as f64);
    (s, fallback)
}

/// Evaluates the inverse CDF of `scores` at `(2i - 1) / 2R`, `i = 1..=R`.
/// Returns the distinct 0-based token indices, sorted.
pub fn ats_inverse_cdf_sample(scores: &[f64], samples: usize) -> Vec<usize> {
    let mut picked = Vec::new();
    if scores.is_empty() || samples == 0 {
        return picked;
    }
    let last_positive = scores.iter().rposition(|&s| s > 0.0).unwrap_or(scores.len() - 1);
    let mut cdf = 0.0;
    let mut n = 0;
    cdf += scores[0];
    for i in 0..samples {
        let r = (2 * i + 1) as f64 / (2 * samples) as f64;
        while cdf < r && n < last_positive {
            n += 1;
            cdf += scores[n];
        }
        if picked.last() != Some(&n) {
            picked.push(n);
        }
    }
    picked
}

/// Per attached block record.
#[derive(Clone, Debug)]
pub struct AtsBlock {
    /// 0-based block index.
    pub block: usize,
    /// Differentiable scores `[k]` over the block's current non-class rows.
    pub scores: Var,
    pub score_values: Vec<f64>,
    /// Original token ids of the score entries.
    pub rows: Vec<usize>,
    /// Original ids of the non-class tokens kept after this block.
    pub kept: Vec<usize>,
    /// Distinct tokens returned by the sampler, before any cap.
    pub sampled: usize,
    pub fallback: bool,
}

pub struct Ats {
    start: usize,
    samples: usize,
    gather: bool,
    alive: Vec<bool>,
    blocks: Vec<AtsBlock>,
    caps: Option<CapEnforcer>,
}

impl Ats {
    pub fn new(mcfg: &MechanismConfig, cfg: &ModelConfig, caps: Option<CapEnforcer>) -> Self {
        Ats {
            start: mcfg.ats_start_block.saturating_sub(1),
            samples: mcfg.ats_samples.unwrap_or(cfg.seq_len()),
            gather: mcfg.ats_gather,
            alive: vec![true; cfg.seq_len()],
            blocks: Vec::new(),
            caps,
        }
    }

    fn scores<F: Real>(
        &self,
        g: &mut Graph<F>,
        att: &AttentionOutput,
        masks: &BlockMasks,
    ) -> Result<(Var, bool)> {
        let n = masks.tokens.len();
        let k = n - 1;
        let heads = att.attn.len();
        let mut acc: Option<Var> = None;
        let mut fallback = false;
        for (&attn, &vals) in att.attn.iter().zip(&att.values) {
            let row = g.slice_rows(attn, 0, 1)?;
            let a = g.slice_cols(row, 1, n)?;
            let norms = g.l2_norm(vals)?;
            let norms = g.reshape(norms, &[1, n])?;
            let v = g.slice_cols(norms, 1, n)?;
            let w = g.mul(a, v)?;
            let denom: f64 = g.value(w).data().iter().map(|x| x.f64()).sum();
            let s = if denom > 0.0 && denom.is_finite() {
                let total = g.sum(w, None)?;
                g.div(w, total)?
            } else {
                fallback = true;
                let active = masks.tokens[1..].iter().filter(|&&t| t).count().max(1);
                let u: Vec<F> = masks.tokens[1..]
                    .iter()
                    .map(|&t| if t { F::of(1.0 / active as f64) } else { F::zero() })
                    .collect();
                g.constant(Tensor::new(vec![1, k], u)?)
            };
            acc = Some(match acc {
                Some(prev) => g.add(prev, s)?,
                None => s,
            });
        }
        let total = acc.expect("at least one head");
        let mean = g.scale(total, 1.0 / heads as f64)?;
        Ok((g.reshape(mean, &[k])?, fallback))
    }
}

impl<F: Real> TokenSparsifier<F> for Ats {
    fn begin_block(&mut self, _g: &mut Graph<F>, ctx: &BlockContext, _z: Var) -> Result<BlockMasks> {
        if ctx.block < self.start {
            if let Some(caps) = &mut self.caps {
                // No scores yet: earlier tokens are kept first.
                let mut patch: Vec<bool> = ctx.rows[1..].iter().map(|&id| self.alive[id]).collect();
                let conf: Vec<f64> = (0..patch.len()).map(|i| -(i as f64)).collect();
                caps.apply(ctx.block, &mut patch, &conf);
                for (&id, &k) in ctx.rows[1..].iter().zip(&patch) {
                    self.alive[id] = k;
                }
            }
        }
        let tokens = ctx.rows.iter().map(|&id| self.alive[id]).collect();
        Ok(BlockMasks::from_tokens(tokens, ctx.heads))
    }

    fn after_attention(
        &mut self,
        g: &mut Graph<F>,
        ctx: &BlockContext,
        att: &AttentionOutput,
        masks: &BlockMasks,
    ) -> Result<Option<Selection>> {
        if ctx.block < self.start || ctx.rows.len() < 2 {
            return Ok(None);
        }
        let (scores, fallback) = self.scores(g, att, masks)?;
        let values: Vec<f64> = g.value(scores).data().iter().map(|x| x.f64()).collect();
        let picked = ats_inverse_cdf_sample(&values, self.samples);
        let mut keep = vec![false; values.len()];
        for &p in &picked {
            keep[p] = masks.tokens[p + 1];
        }
        if let Some(caps) = &mut self.caps {
            caps.apply(ctx.block, &mut keep, &values);
        }
        for (p, &id) in ctx.rows.iter().enumerate().skip(1) {
            self.alive[id] = keep[p - 1];
        }
        let kept: Vec<usize> = ctx.rows[1..].iter().zip(&keep).filter(|(_, &k)| k).map(|(&id, _)| id).collect();
        self.blocks.push(AtsBlock {
            block: ctx.block,
            scores,
            score_values: values,
            rows: ctx.rows[1..].to_vec(),
            kept,
            sampled: picked.len(),
            fallback,
        });
        let mut mask = vec![true];
        mask.extend_from_slice(&keep);
        Ok(Some(if self.gather {
            Selection::Gather(mask.iter().enumerate().filter(|(_, &k)| k).map(|(p, _)| p).collect())
        } else {
            Selection::Mask(mask)
        }))
    }

    fn take_signals(&mut self) -> MechanismSignals {
        MechanismSignals::Ats(std::mem::take(&mut self.blocks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significance_formula() {
        let (s, fb) = ats_significance(&[vec![0.5, 0.3, 0.2]], &[vec![2.0, 1.0, 1.0]]);
        assert!(!fb);
        for (a, b) in s.iter().zip([2.0 / 3.0, 0.2, 2.0 / 15.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn significance_uniform_and_single() {
        let (s, _) = ats_significance(&[vec![0.25; 4], vec![0.25; 4]], &[vec![3.0; 4], vec![1.0; 4]]);
        assert!(s.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        let (s, _) = ats_significance(&[vec![0.7]], &[vec![0.1]]);
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn significance_zero_denominator_falls_back() {
        let (s, fb) = ats_significance(&[vec![0.0, 0.0]], &[vec![0.0, 0.0]]);
        assert!(fb);
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn sampler_examples() {
        assert_eq!(ats_inverse_cdf_sample(&[0.5, 0.25, 0.25], 4), vec![0, 1, 2]);
        assert_eq!(ats_inverse_cdf_sample(&[0.125; 8], 8).len(), 8);
        assert_eq!(ats_inverse_cdf_sample(&[0.0, 1.0, 0.0, 0.0], 5), vec![1]);
    }
}
