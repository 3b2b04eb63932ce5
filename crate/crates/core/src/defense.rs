//! Token-budget countermeasure: per-block caps on active non-class tokens.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tslab_autodiff::{Real, Tensor};

use crate::error::{CoreError, Result};
use crate::metrics::infer;
use crate::model::{ModelConfig, ModelWeights};
use crate::sparsifiers::{Mechanism, MechanismConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapPolicy {
    Random,
    Confidence,
}

/// Caps count non-class tokens; the class token is always kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub caps: Vec<usize>,
    pub policy: CapPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub holdout_size: usize,
    #[serde(default)]
    pub mechanism: Option<Mechanism>,
}

impl DefenseConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.caps.len() != cfg.depth {
            return Err(CoreError::Config(format!("{} caps for {} blocks", self.caps.len(), cfg.depth)));
        }
        if let Some(c) = self.caps.iter().find(|&&c| c == 0 || c > cfg.num_patches()) {
            return Err(CoreError::Config(format!("cap {c} outside 1..={}", cfg.num_patches())));
        }
        Ok(())
    }

    pub fn enforcer(&self, image_id: u64) -> CapEnforcer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(image_id);
        CapEnforcer { caps: self.caps.clone(), policy: self.policy, rng }
    }
}

/// Keeps at most `cap` of the `active` entries. The confidence policy keeps
/// the highest `confidence` (ties to the lower index); the random policy
/// keeps a uniform subset. Returns the removed indices.
pub fn enforce_caps(
    active: &mut [bool],
    cap: usize,
    policy: CapPolicy,
    confidence: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut on: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    if on.len() <= cap {
        return Vec::new();
    }
    match policy {
        CapPolicy::Confidence => on.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b))),
        CapPolicy::Random => on.shuffle(rng),
    }
    let mut removed = on.split_off(cap);
    removed.sort_unstable();
    for &i in &removed {
        active[i] = false;
    }
    removed
}

/// Cap state for one image.
#[derive(Clone, Debug)]
pub struct CapEnforcer {
    caps: Vec<usize>,
    policy: CapPolicy,
    rng: ChaCha8Rng,
}

impl CapEnforcer {
    /// Applies block `block`'s cap; returns how many tokens were removed.
    pub fn apply(&mut self, block: usize, active: &mut [bool], confidence: &[f64]) -> usize {
        match self.caps.get(block) {
            Some(&cap) => enforce_caps(active, cap, self.policy, confidence, &mut self.rng).len(),
            None => 0,
        }
    }
}

/// `cap_l = ceil(mean non-class active tokens at block l)` over `counts`,
/// one row of per-block totals (class token included) per image.
pub fn caps_from_counts(counts: &[Vec<usize>]) -> Result<Vec<usize>> {
    let first = counts.first().ok_or_else(|| CoreError::EmptyDataset("holdout is empty".into()))?;
    let n = counts.len();
    Ok((0..first.len())
        .map(|l| {
            let total: usize = counts.iter().map(|c| c[l].saturating_sub(1)).sum();
            total.div_ceil(n).max(1)
        })
        .collect())
}

/// Runs the undefended mechanism over clean holdout images and derives caps.
pub fn calibrate_caps<F: Real>(
    cfg: &ModelConfig,
    weights: &ModelWeights<F>,
    mechanism: Mechanism,
    mcfg: &MechanismConfig,
    holdout: &[Tensor<F>],
    policy: CapPolicy,
    seed: u64,
) -> Result<DefenseConfig> {
    if holdout.is_empty() {
        return Err(CoreError::EmptyDataset("holdout is empty".into()));
    }
    let mut counts = Vec::with_capacity(holdout.len());
    for img in holdout {
        let (_, trace) = infer(cfg, weights, mechanism, mcfg, img, None)?;
        counts.push(trace.active_counts());
    }
    Ok(DefenseConfig {
        caps: caps_from_counts(&counts)?,
        policy,
        seed,
        holdout_size: holdout.len(),
        mechanism: Some(mechanism),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn slack_removes_nothing() {
        let mut a = vec![true, false, true];
        assert!(enforce_caps(&mut a, 2, CapPolicy::Confidence, &[0.0; 3], &mut rng()).is_empty());
        assert_eq!(a, vec![true, false, true]);
    }

    #[test]
    fn cap_one_keeps_top_confidence() {
        let mut a = vec![true; 4];
        enforce_caps(&mut a, 1, CapPolicy::Confidence, &[0.1, 0.5, 0.3, 0.5], &mut rng());
        assert_eq!(a, vec![false, true, false, false]);
    }

    #[test]
    fn random_policy_respects_cap() {
        let mut a = vec![true; 10];
        let removed = enforce_caps(&mut a, 3, CapPolicy::Random, &[0.0; 10], &mut rng());
        assert_eq!(removed.len(), 7);
        assert_eq!(a.iter().filter(|&&x| x).count(), 3);
    }

    #[test]
    fn caps_are_ceiled_means() {
        let caps = caps_from_counts(&[vec![65, 40, 11], vec![65, 41, 11]]).unwrap();
        assert_eq!(caps, vec![64, 40, 10]);
        assert!(caps_from_counts(&[]).is_err());
    }
}
