//! Availability attack on token sparsification: projected sign-gradient
//! descent on a mechanism-specific worst-case distance plus a
//! prediction-preserving term.

pub mod config;
pub mod losses;
pub mod perturbation;
pub mod pgd;
pub mod runner;

pub use config::{AttackConfig, Variant};
pub use losses::{clean_distribution, label_ce, loss_adavit, loss_ats, loss_avit, loss_cls, loss_total, mechanism_loss, LossParts};
pub use perturbation::{apply_delta, Method, Perturbation};
pub use pgd::{cosine_step, pgd_step, project};
pub use runner::{baseline_attack, run_attack, Baseline, Victim};
