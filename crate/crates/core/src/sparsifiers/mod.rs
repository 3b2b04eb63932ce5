//! Token-sparsification mechanisms plugged into [`crate::model::model_forward`].

pub mod adavit;
pub mod ats;
pub mod avit;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tslab_autodiff::{Graph, Real, Var};

use crate::defense::CapEnforcer;
use crate::error::{CoreError, Result};
use crate::model::{
    model_forward, BlockContext, BlockMasks, ForwardOptions, ForwardOutput, ModelConfig, ModelParams, TokenSparsifier,
};

pub use adavit::{adavit_decide, AdaVitBlock, AdaVitDecision};
pub use ats::{ats_inverse_cdf_sample, ats_significance, AtsBlock};
pub use avit::{avit_halting_step, AVitBlock, AVitTrace, HaltingState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Vanilla,
    Ats,
    AdaVit,
    AVit,
}

impl Mechanism {
    pub const SPARSE: [Mechanism; 3] = [Mechanism::Ats, Mechanism::AdaVit, Mechanism::AVit];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Vanilla => "vanilla",
            Mechanism::Ats => "ats",
            Mechanism::AdaVit => "adavit",
            Mechanism::AVit => "avit",
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Mechanism::Vanilla => 0,
            Mechanism::Ats => 1,
            Mechanism::AdaVit => 2,
            Mechanism::AVit => 4,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mechanism::Vanilla),
            "ats" => Ok(Mechanism::Ats),
            "adavit" => Ok(Mechanism::AdaVit),
            "avit" => Ok(Mechanism::AVit),
            other => Err(CoreError::Config(format!("unknown mechanism {other:?}"))),
        }
    }
}

/// Mechanism hyperparameters. Block indices are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MechanismConfig {
    pub ats_start_block: usize,
    /// Fixed sampling points per block; `None` means N + 1.
    pub ats_samples: Option<usize>,
    /// Physically drop unsampled rows instead of masking them.
    pub ats_gather: bool,
    pub adavit_start_block: usize,
    pub gumbel_temperature: f64,
    pub halting_tau: f64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        MechanismConfig {
            ats_start_block: 4,
            ats_samples: None,
            ats_gather: true,
            adavit_start_block: 2,
            gumbel_temperature: 1.0,
            halting_tau: 0.01,
        }
    }
}

impl MechanismConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ats_start_block == 0 || self.ats_start_block > cfg.depth {
            return Err(CoreError::Config(format!("ats_start_block {} outside 1..={}", self.ats_start_block, cfg.depth)));
        }
        if self.adavit_start_block == 0 || self.adavit_start_block > cfg.depth {
            return Err(CoreError::Config(format!(
                "adavit_start_block {} outside 1..={}",
                self.adavit_start_block, cfg.depth
            )));
        }
        if self.ats_samples == Some(0) {
            return Err(CoreError::Config("ats_samples must be positive".into()));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(CoreError::Config("gumbel_temperature must be positive".into()));
        }
        if !(self.halting_tau > 0.0 && self.halting_tau < 1.0) {
            return Err(CoreError::Config("halting_tau must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// How AdaViT decisions are drawn.
#[derive(Clone, Debug, Default)]
pub enum GateMode {
    /// Zero noise, hard masks held constant; soft probabilities stay on the
    /// tape for the attack loss.
    #[default]
    Eval,
    /// Gumbel noise from this seed, straight-through masks.
    Train { seed: u64 },
}

/// Per-call options for building a sparsifier.
#[derive(Default)]
pub struct Setup {
    pub gate: GateMode,
    pub caps: Option<CapEnforcer>,
}

/// Differentiable per-block signals each mechanism exposes to the attack.
#[derive(Clone, Debug)]
pub enum MechanismSignals {
    Vanilla,
    Ats(Vec<AtsBlock>),
    AdaVit(Vec<AdaVitBlock>),
    AVit(AVitTrace),
}

/// No sparsification; optional caps remove tokens in index order or at random.
pub struct Vanilla {
    caps: Option<CapEnforcer>,
}

impl<F: Real> TokenSparsifier<F> for Vanilla {
    fn begin_block(&mut self, _g: &mut Graph<F>, ctx: &BlockContext, _z: Var) -> Result<BlockMasks> {
        let n = ctx.rows.len();
        let mut masks = BlockMasks::full(n, ctx.heads);
        if let Some(caps) = &mut self.caps {
            let mut patch = vec![true; n - 1];
            let conf: Vec<f64> = (0..n - 1).map(|i| -(i as f64)).collect();
            caps.apply(ctx.block, &mut patch, &conf);
            masks.tokens[1..].copy_from_slice(&patch);
        }
        Ok(masks)
    }

    fn take_signals(&mut self) -> MechanismSignals {
        MechanismSignals::Vanilla
    }
}

/// Builds the mechanism's hook object over graph-bound parameters.
pub fn build<'a, F: Real>(
    mechanism: Mechanism,
    mcfg: &MechanismConfig,
    cfg: &ModelConfig,
    params: &'a ModelParams<Var>,
    setup: Setup,
) -> Result<Box<dyn TokenSparsifier<F> + 'a>> {
    Ok(match mechanism {
        Mechanism::Vanilla => Box::new(Vanilla { caps: setup.caps }),
        Mechanism::Ats => Box::new(ats::Ats::new(mcfg, cfg, setup.caps)),
        Mechanism::AdaVit => {
            let decisions = params
                .decisions
                .as_ref()
                .ok_or_else(|| CoreError::MechanismUnavailable("weights carry no decision networks".into()))?;
            Box::new(adavit::AdaVit::new(mcfg, decisions, setup.gate, setup.caps))
        }
        Mechanism::AVit => {
            let halting = params
                .halting
                .as_ref()
                .ok_or_else(|| CoreError::MechanismUnavailable("weights carry no halting parameters".into()))?;
            Box::new(avit::AVit::new(mcfg, cfg, halting.gamma, halting.beta, setup.caps))
        }
    })
}

/// Forward pass under `mechanism`.
pub fn run<F: Real>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    image: Var,
    mechanism: Mechanism,
    mcfg: &MechanismConfig,
    setup: Setup,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    if mechanism == Mechanism::Vanilla && setup.caps.is_none() {
        return model_forward(g, cfg, params, image, None, opts);
    }
    let mut sp = build::<F>(mechanism, mcfg, cfg, params, setup)?;
    model_forward(g, cfg, params, image, Some(sp.as_mut()), opts)
}
