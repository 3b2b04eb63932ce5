use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::sparsifiers::Mechanism;

/// Which images one perturbation serves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    /// One perturbation per image.
    Single,
    /// One perturbation for every image of `class`.
    ClassUniversal { class: usize },
    Universal,
    /// Universal unbounded square patch pasted with its top-left corner at
    /// (`x`, `y`).
    Patch { size: usize, x: usize, y: usize },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::ClassUniversal { .. } => "class_universal",
            Variant::Universal => "universal",
            Variant::Patch { .. } => "patch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L-infinity budget in pixel units; ignored by the patch variant.
    pub epsilon: f64,
    /// Number of update steps.
    pub iterations: usize,
    /// Weight of the prediction-preserving term.
    pub lambda: f64,
    pub variant: Variant,
    /// More than one mechanism trains an ensemble perturbation.
    pub mechanisms: Vec<Mechanism>,
    pub seed: u64,
    pub random_init: bool,
    /// Images per update for the universal variants.
    pub batch_size: usize,
    /// First step of the cosine schedule; defaults to epsilon / 10, or 0.1
    /// for patches.
    pub max_step: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            iterations: 250,
            lambda: 8e-4,
            variant: Variant::Single,
            mechanisms: vec![Mechanism::Ats],
            seed: 0,
            random_init: false,
            batch_size: 16,
            max_step: None,
        }
    }
}

impl AttackConfig {
    pub fn step_max(&self) -> f64 {
        self.max_step.unwrap_or(match self.variant {
            Variant::Patch { .. } => 0.1,
            _ => self.epsilon / 10.0,
        })
    }

    /// Collects every violation instead of stopping at the first.
    pub fn problems(&self, cfg: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            out.push(format!("epsilon {} outside (0, 1]", self.epsilon));
        }
        if !(self.lambda >= 0.0) {
            out.push(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.mechanisms.is_empty() {
            out.push("at least one mechanism is required".into());
        }
        if self.mechanisms.contains(&Mechanism::Vanilla) {
            out.push("the vanilla model cannot be attacked for efficiency".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if let Some(s) = self.max_step {
            if !(s > 0.0) {
                out.push(format!("max_step {s} must be positive"));
            }
        }
        match self.variant {
            Variant::ClassUniversal { class } if class >= cfg.num_classes => {
                out.push(format!("class {class} outside 0..{}", cfg.num_classes));
            }
            Variant::Patch { size, x, y } if size == 0 || x + size > cfg.image_size || y + size > cfg.image_size => {
                out.push(format!("patch {size}x{size} at ({x}, {y}) outside a {0}x{0} image", cfg.image_size));
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let p = self.problems(cfg);
        if p.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(p.join("; ")))
        }
    }
}
