//! A-ViT style adaptive halting from a dedicated embedding channel.

use tslab_autodiff::{Graph, Real, Var};

use super::{MechanismConfig, MechanismSignals};
use crate::defense::CapEnforcer;
use crate::error::Result;
use crate::model::{BlockContext, BlockMasks, ModelConfig, TokenSparsifier};

/// Halting accumulators over the N non-class tokens.
#[derive(Clone, Debug)]
pub struct HaltingState {
    pub tau: f64,
    /// Running sum of halting scores `[N]`; `None` before the first step.
    pub cumulative: Option<Var>,
    pub cumulative_values: Vec<f64>,
    /// Last block (0-based) each token was active in; `None` = never halted.
    pub halt_block: Vec<Option<usize>>,
    pub active: Vec<bool>,
}

impl HaltingState {
    pub fn new(tokens: usize, tau: f64) -> Self {
        HaltingState {
            tau,
            cumulative: None,
            cumulative_values: vec![0.0; tokens],
            halt_block: vec![None; tokens],
            active: vec![true; tokens],
        }
    }
}

/// Scores `sigmoid(gamma * z[j, 0] + beta)` for the non-class rows of the
/// output of `block`, adds them to the running sums and halts every active
/// token whose sum reached `1 - tau`. Returns the scores `[N]`.
pub fn avit_halting_step<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    gamma: Var,
    beta: Var,
    state: &mut HaltingState,
    block: usize,
) -> Result<Var> {
    let n = g.shape(z)[0];
    let rows = g.slice_rows(z, 1, n)?;
    let ch = g.slice_cols(rows, 0, 1)?;
    let scaled = g.mul(ch, gamma)?;
    let shifted = g.add(scaled, beta)?;
    let h = g.sigmoid(shifted)?;
    let h = g.reshape(h, &[n - 1])?;
    let cum = match state.cumulative {
        Some(c) => g.add(c, h)?,
        None => h,
    };
    state.cumulative = Some(cum);
    state.cumulative_values = g.value(cum).data().iter().map(|x| x.f64()).collect();
    let limit = 1.0 - state.tau;
    for j in 0..n - 1 {
        if state.active[j] && state.cumulative_values[j] >= limit {
            state.active[j] = false;
            state.halt_block[j] = Some(block);
        }
    }
    Ok(h)
}

/// Per block record for the attack loss.
#[derive(Clone, Debug)]
pub struct AVitBlock {
    pub block: usize,
    /// Running sums after this block `[N]`.
    pub cumulative: Var,
    /// Tokens active in this block.
    pub active: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct AVitTrace {
    pub blocks: Vec<AVitBlock>,
    pub halt_block: Vec<Option<usize>>,
}

pub struct AVit {
    gamma: Var,
    beta: Var,
    state: HaltingState,
    current: Vec<bool>,
    blocks: Vec<AVitBlock>,
    caps: Option<CapEnforcer>,
}

impl AVit {
    pub fn new(mcfg: &MechanismConfig, cfg: &ModelConfig, gamma: Var, beta: Var, caps: Option<CapEnforcer>) -> Self {
        AVit {
            gamma,
            beta,
            state: HaltingState::new(cfg.num_patches(), mcfg.halting_tau),
            current: Vec::new(),
            blocks: Vec::new(),
            caps,
        }
    }
}

impl<F: Real> TokenSparsifier<F> for AVit {
    fn begin_block(&mut self, _g: &mut Graph<F>, ctx: &BlockContext, _z: Var) -> Result<BlockMasks> {
        let mut active = self.state.active.clone();
        if let Some(caps) = &mut self.caps {
            let conf: Vec<f64> = self.state.cumulative_values.iter().map(|c| -c).collect();
            caps.apply(ctx.block, &mut active, &conf);
            for (j, (&before, &after)) in self.state.active.iter().zip(&active).enumerate() {
                if before && !after {
                    self.state.halt_block[j] = Some(ctx.block.saturating_sub(1));
                }
            }
            self.state.active.clone_from(&active);
        }
        let mut tokens = vec![true];
        tokens.extend_from_slice(&active);
        self.current = active;
        Ok(BlockMasks::from_tokens(tokens, ctx.heads))
    }

    fn end_block(&mut self, g: &mut Graph<F>, ctx: &BlockContext, z: Var, _rows: &[usize]) -> Result<()> {
        avit_halting_step(g, z, self.gamma, self.beta, &mut self.state, ctx.block)?;
        self.blocks.push(AVitBlock {
            block: ctx.block,
            cumulative: self.state.cumulative.expect("set by the step"),
            active: std::mem::take(&mut self.current),
        });
        Ok(())
    }

    fn take_signals(&mut self) -> MechanismSignals {
        MechanismSignals::AVit(AVitTrace {
            blocks: std::mem::take(&mut self.blocks),
            halt_block: self.state.halt_block.clone(),
        })
    }
}
