//! Config-driven experiment matrix: attacks, evaluation, defense and report.
//!
//! A run directory holds `perturbations/*.tslp` (from `attack`), per-row
//! CSVs plus `summary.json` (from `evaluate`), `defense.json` (from
//! `defend`) and `train_log.json` (from `train`). Every JSON artifact embeds
//! the resolved config; CSVs carry it on a leading `#` line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tslab_autodiff::{Real, Tensor};
use tslab_core::attack::{baseline_attack, run_attack, AttackConfig, Baseline, Perturbation, Variant, Victim};
use tslab_core::data::Sample;
use tslab_core::defense::{calibrate_caps, CapPolicy, DefenseConfig};
use tslab_core::metrics::{evaluate_set, summary_row, write_csv, ImageResult, MetricsReport, SummaryRow};
use tslab_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelWeights};
use tslab_core::sparsifiers::{Mechanism, MechanismConfig};
use tslab_core::{CoreError, Result};

use crate::dataset::{gen_dataset, load_manifest, load_split, DatasetSpec, Manifest, Split};
use crate::train::{clean_stats, train_victim, EpochLog, TrainConfig, VictimKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoints {
    /// Plain backbone; also the ATS victim.
    pub backbone: PathBuf,
    #[serde(default)]
    pub adavit: Option<PathBuf>,
    #[serde(default)]
    pub avit: Option<PathBuf>,
}

impl Checkpoints {
    pub fn path(&self, kind: VictimKind) -> Option<&Path> {
        match kind {
            VictimKind::Backbone => Some(&self.backbone),
            VictimKind::AdaVit => self.adavit.as_deref(),
            VictimKind::AVit => self.avit.as_deref(),
        }
    }
}

fn victim_kind(m: Mechanism) -> VictimKind {
    match m {
        Mechanism::Vanilla | Mechanism::Ats => VictimKind::Backbone,
        Mechanism::AdaVit => VictimKind::AdaVit,
        Mechanism::AVit => VictimKind::AVit,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub backbone: TrainConfig,
    pub adavit: TrainConfig,
    pub avit: TrainConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        let fine = TrainConfig { epochs: 4, lr: 5e-4, usage_target: 0.7, ..TrainConfig::default() };
        TrainPlan {
            backbone: TrainConfig { epochs: 12, ..TrainConfig::default() },
            adavit: fine.clone(),
            avit: fine,
        }
    }
}

impl TrainPlan {
    pub fn get(&self, kind: VictimKind) -> &TrainConfig {
        match kind {
            VictimKind::Backbone => &self.backbone,
            VictimKind::AdaVit => &self.adavit,
            VictimKind::AVit => &self.avit,
        }
    }
}

/// One attack row of the matrix. Without `ensemble` the attack runs once
/// per experiment mechanism; with it, once against all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    #[serde(default)]
    pub name: Option<String>,
    /// Its `mechanisms` and `seed` are filled in by the experiment.
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub ensemble: bool,
}

impl AttackPlan {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let base = match self.attack.variant {
            Variant::ClassUniversal { class } => format!("class_universal_{class}"),
            ref v => v.name().to_string(),
        };
        if self.ensemble {
            format!("ensemble_{base}")
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefensePlan {
    pub policy: CapPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_holdout")]
    pub holdout_size: usize,
}

fn default_holdout() -> usize {
    100
}

fn default_eval_images() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Multi-seed mode; empty means `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub precision: Precision,
    /// Dataset directory (manifest.csv + images/).
    pub dataset: PathBuf,
    /// Used by `gen-data`.
    #[serde(default)]
    pub generate: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mechanism: MechanismConfig,
    pub checkpoints: Checkpoints,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default = "all_sparse")]
    pub mechanisms: Vec<Mechanism>,
    #[serde(default)]
    pub attacks: Vec<AttackPlan>,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<Baseline>,
    /// Budget and iterations for the baselines.
    #[serde(default)]
    pub baseline_attack: AttackConfig,
    #[serde(default)]
    pub defense: Option<DefensePlan>,
    /// Test images per row, evenly spaced over the test split.
    #[serde(default = "default_eval_images")]
    pub eval_images: usize,
    /// Training images the universal variants optimize over.
    #[serde(default = "default_eval_images")]
    pub universal_images: usize,
    pub output_dir: PathBuf,
}

fn all_sparse() -> Vec<Mechanism> {
    Mechanism::SPARSE.to_vec()
}

fn default_baselines() -> Vec<Baseline> {
    vec![Baseline::Random]
}

/// Which subcommand a config is validated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train(Option<VictimKind>),
    Attack,
    Evaluate,
    Defend,
    Report,
}

fn jerr(e: serde_json::Error) -> CoreError {
    CoreError::Format(e.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CoreError::Config(format!("config file {} does not exist", path.display())));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    fn victims_needed(&self, stage: Stage) -> Vec<VictimKind> {
        let mut kinds = vec![VictimKind::Backbone];
        match stage {
            Stage::Train(Some(k)) => {
                if k != VictimKind::Backbone {
                    kinds.push(k);
                }
            }
            _ => {
                for m in &self.mechanisms {
                    let k = victim_kind(*m);
                    if !kinds.contains(&k) {
                        kinds.push(k);
                    }
                }
            }
        }
        kinds
    }

    /// Every problem with this config for `stage`, without doing any work.
    pub fn problems(&self, stage: Stage) -> Vec<String> {
        let mut out = Vec::new();
        let push = |out: &mut Vec<String>, r: Result<()>| {
            if let Err(e) = r {
                out.push(e.to_string());
            }
        };
        push(&mut out, self.model.validate());
        if self.model.validate().is_ok() {
            push(&mut out, self.mechanism.validate(&self.model));
        }
        if stage == Stage::GenData {
            push(&mut out, self.generate.validate());
            if self.generate.classes != self.model.num_classes || self.generate.image_size != self.model.image_size {
                out.push(format!(
                    "generate ({} classes, {}px) does not match the model ({} classes, {}px)",
                    self.generate.classes, self.generate.image_size, self.model.num_classes, self.model.image_size
                ));
            }
            return out;
        }
        if stage != Stage::Report && !self.dataset.join("manifest.csv").exists() {
            out.push(format!("dataset path {} has no manifest.csv", self.dataset.display()));
        }
        if self.mechanisms.is_empty() {
            out.push("mechanisms must not be empty".into());
        }
        if self.mechanisms.contains(&Mechanism::Vanilla) {
            out.push("mechanisms lists vanilla; the unsparsified model is always evaluated as clean_wo".into());
        }
        if self.eval_images == 0 {
            out.push("eval_images must be positive".into());
        }
        match stage {
            Stage::Train(which) => {
                let kinds = match which {
                    Some(k) => vec![k],
                    None => self.victims_needed(Stage::Evaluate),
                };
                for k in &kinds {
                    for p in self.train.get(*k).problems() {
                        out.push(format!("{k:?}: {p}"));
                    }
                    if self.checkpoints.path(*k).is_none() {
                        out.push(format!("checkpoints has no path for the {k:?} victim"));
                    }
                }
                if which.is_some_and(|k| k != VictimKind::Backbone) && !self.checkpoints.backbone.exists() {
                    out.push(format!("backbone checkpoint {} does not exist", self.checkpoints.backbone.display()));
                }
            }
            Stage::Attack | Stage::Evaluate | Stage::Defend => {
                for k in self.victims_needed(stage) {
                    match self.checkpoints.path(k) {
                        None => out.push(format!("checkpoints has no path for the {k:?} victim")),
                        Some(p) if !p.exists() => out.push(format!("checkpoint {} does not exist", p.display())),
                        _ => {}
                    }
                }
                for plan in &self.attacks {
                    let mut ac = plan.attack.clone();
                    ac.mechanisms.clone_from(&self.mechanisms);
                    for p in ac.problems(&self.model) {
                        out.push(format!("attack {}: {p}", plan.label()));
                    }
                }
                let mut base = self.baseline_attack.clone();
                base.mechanisms.clone_from(&self.mechanisms);
                for p in base.problems(&self.model) {
                    out.push(format!("baseline_attack: {p}"));
                }
                if stage == Stage::Defend {
                    match &self.defense {
                        None => out.push("defend needs a defense section".into()),
                        Some(d) if d.holdout_size == 0 => out.push("defense.holdout_size must be positive".into()),
                        _ => {}
                    }
                }
                let mut labels: Vec<String> = self.attacks.iter().map(AttackPlan::label).collect();
                labels.sort();
                labels.dedup();
                if labels.len() != self.attacks.len() {
                    out.push("attack rows need distinct names".into());
                }
            }
            Stage::Report => {
                if !self.output_dir.join("summary.json").exists() {
                    out.push(format!("no summary.json under {}; run evaluate first", self.output_dir.display()));
                }
            }
            Stage::GenData => {}
        }
        out
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        let p = self.problems(stage);
        if p.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(p.join("; ")))
        }
    }
}

/// Evenly spaced subset of at most `k` samples.
pub fn spread(samples: Vec<Sample>, k: usize) -> Vec<Sample> {
    let n = samples.len();
    if k >= n {
        return samples;
    }
    let keep: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    samples.into_iter().enumerate().filter(|(i, _)| keep.binary_search(i).is_ok()).map(|(_, s)| s).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value).map_err(jerr)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- gen-data

pub fn run_gen_data(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Manifest> {
    cfg.validate(Stage::GenData)?;
    gen_dataset(&cfg.generate, out.unwrap_or(&cfg.dataset))
}

// ------------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub victim: VictimKind,
    pub checkpoint: PathBuf,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub test_accuracy: f64,
    pub test_tur: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: serde_json::Value,
    pub victims: Vec<TrainRecord>,
}

/// Trains the requested victim, or every victim the experiment needs.
/// Fine-tunes start from the backbone checkpoint.
pub fn run_train(
    cfg: &ExperimentConfig,
    which: Option<VictimKind>,
    progress: &mut dyn FnMut(VictimKind, &EpochLog),
) -> Result<TrainLog> {
    cfg.validate(Stage::Train(which))?;
    let manifest = load_manifest(&cfg.dataset)?;
    check_geometry(&cfg.model, &manifest)?;
    let train = load_split(&cfg.dataset, &manifest, Split::Train)?;
    let test = spread(load_split(&cfg.dataset, &manifest, Split::Test)?, cfg.eval_images);
    let kinds = match which {
        Some(k) => vec![k],
        None => cfg.victims_needed(Stage::Evaluate),
    };
    let mut records = Vec::new();
    for kind in kinds {
        let mut tc = cfg.train.get(kind).clone();
        tc.seed ^= cfg.seed;
        let init = match kind {
            VictimKind::Backbone => None,
            _ => Some(load_victim(&cfg.model, &cfg.checkpoints.backbone)?),
        };
        let (weights, epochs) = match cfg.precision {
            Precision::F32 => {
                train_victim::<f32>(&cfg.model, &cfg.mechanism, &tc, kind, &train, init, &mut |e| progress(kind, e))?
            }
            Precision::F64 => {
                let init = init.map(|w| w.cast::<f64>());
                let (w, e) = train_victim::<f64>(&cfg.model, &cfg.mechanism, &tc, kind, &train, init, &mut |e| {
                    progress(kind, e)
                })?;
                (w.cast::<f32>(), e)
            }
        };
        let path = cfg.checkpoints.path(kind).expect("validated").to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        save_checkpoint(&path, &cfg.model, &weights)?;
        let (test_accuracy, test_tur) = clean_stats(&cfg.model, &cfg.mechanism, &weights, kind.mechanism(), &test)?;
        records.push(TrainRecord { victim: kind, checkpoint: path, config: tc, epochs, test_accuracy, test_tur });
    }
    let log = TrainLog { config: serde_json::from_str(&cfg.resolved_json()).map_err(jerr)?, victims: records };
    write_json(&cfg.output_dir.join("train_log.json"), &log)?;
    Ok(log)
}

fn check_geometry(model: &ModelConfig, m: &Manifest) -> Result<()> {
    if m.image_size != model.image_size || m.channels != model.channels || m.classes > model.num_classes {
        return Err(CoreError::Config(format!(
            "dataset ({} classes, {}px, {} channels) does not fit the model ({} classes, {}px, {} channels)",
            m.classes, m.image_size, m.channels, model.num_classes, model.image_size, model.channels
        )));
    }
    Ok(())
}

fn load_victim(model: &ModelConfig, path: &Path) -> Result<ModelWeights<f32>> {
    let (c, w) = load_checkpoint(path)?;
    if &c != model {
        return Err(CoreError::Config(format!("checkpoint {} was trained for a different model config", path.display())));
    }
    Ok(w)
}

// ------------------------------------------------------------------ shared

/// Loaded dataset splits and victims for one experiment.
pub struct Lab<F: Real> {
    pub cfg: ExperimentConfig,
    pub manifest: Manifest,
    pub eval: Vec<Sample>,
    pub train_pool: Vec<Sample>,
    pub holdout: Vec<Sample>,
    pub victims: BTreeMap<Mechanism, ModelWeights<F>>,
}

impl<F: Real> Lab<F> {
    pub fn open(cfg: &ExperimentConfig, stage: Stage) -> Result<Self> {
        cfg.validate(stage)?;
        let manifest = load_manifest(&cfg.dataset)?;
        check_geometry(&cfg.model, &manifest)?;
        let eval = spread(load_split(&cfg.dataset, &manifest, Split::Test)?, cfg.eval_images);
        let train = load_split(&cfg.dataset, &manifest, Split::Train)?;
        let holdout = load_split(&cfg.dataset, &manifest, Split::Holdout)?;
        let mut victims = BTreeMap::new();
        let backbone = load_victim(&cfg.model, &cfg.checkpoints.backbone)?.cast::<F>();
        victims.insert(Mechanism::Vanilla, backbone.clone());
        for &m in &cfg.mechanisms {
            let w = match victim_kind(m) {
                VictimKind::Backbone => backbone.clone(),
                k => load_victim(&cfg.model, cfg.checkpoints.path(k).expect("validated"))?.cast::<F>(),
            };
            victims.insert(m, w);
        }
        Ok(Lab { cfg: cfg.clone(), manifest, eval, train_pool: train, holdout, victims })
    }

    pub fn victim(&self, m: Mechanism) -> Victim<'_, F> {
        Victim { mechanism: m, weights: &self.victims[&m] }
    }

    /// Images a perturbation of this variant is optimized on.
    fn attack_pool(&self, variant: &Variant) -> Vec<Sample> {
        match variant {
            Variant::Single => self.eval.clone(),
            Variant::ClassUniversal { class } => self.train_pool.iter().filter(|s| s.label == *class).cloned().collect(),
            Variant::Universal | Variant::Patch { .. } => spread(self.train_pool.clone(), self.cfg.universal_images),
        }
    }

    /// Images a perturbation of this variant is evaluated on.
    pub fn eval_pool(&self, variant: &Variant) -> Vec<Sample> {
        match variant {
            Variant::ClassUniversal { class } => self.eval.iter().filter(|s| s.label == *class).cloned().collect(),
            _ => self.eval.clone(),
        }
    }
}

fn pert_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("perturbations")
}

fn pert_name(row: &str, target: &str, seed: u64) -> String {
    format!("{row}__{target}__s{seed}.tslp")
}

/// One crafted perturbation of the matrix.
#[derive(Clone, Debug)]
pub struct Crafted {
    pub row: String,
    /// Mechanism the perturbation targets; `None` for ensembles.
    pub target: Option<Mechanism>,
    pub seed: u64,
    pub perturbation: Perturbation,
}

/// The perturbation files `attack` writes for this config.
fn planned(cfg: &ExperimentConfig) -> Vec<(String, Option<Mechanism>, u64, PathBuf)> {
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        for b in &cfg.baselines {
            let row = baseline_row(*b).to_string();
            for &m in &cfg.mechanisms {
                out.push((row.clone(), Some(m), seed, pert_dir(cfg).join(pert_name(&row, m.name(), seed))));
            }
        }
        for plan in &cfg.attacks {
            let row = plan.label();
            if plan.ensemble {
                out.push((row.clone(), None, seed, pert_dir(cfg).join(pert_name(&row, "ensemble", seed))));
            } else {
                for &m in &cfg.mechanisms {
                    out.push((row.clone(), Some(m), seed, pert_dir(cfg).join(pert_name(&row, m.name(), seed))));
                }
            }
        }
    }
    out
}

fn baseline_row(b: Baseline) -> &'static str {
    match b {
        Baseline::Random => "random",
        Baseline::StandardPgd => "standard_pgd",
        Baseline::Sponge => "sponge",
    }
}

// ------------------------------------------------------------------ attack

pub fn craft_all<F: Real>(lab: &Lab<F>, progress: &mut dyn FnMut(&str)) -> Result<Vec<Crafted>> {
    let cfg = &lab.cfg;
    let json = cfg.resolved_json();
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        for &b in &cfg.baselines {
            for &m in &cfg.mechanisms {
                progress(&format!("{} on {m}, seed {seed}", baseline_row(b)));
                let mut ac = cfg.baseline_attack.clone();
                ac.seed = seed;
                let p = baseline_attack(b, &cfg.model, &cfg.mechanism, &lab.victim(m), &lab.eval, &ac, &json)?;
                out.push(Crafted { row: baseline_row(b).into(), target: Some(m), seed, perturbation: p });
            }
        }
        for plan in &cfg.attacks {
            let pool = lab.attack_pool(&plan.attack.variant);
            let groups: Vec<Vec<Mechanism>> = if plan.ensemble {
                vec![cfg.mechanisms.clone()]
            } else {
                cfg.mechanisms.iter().map(|m| vec![*m]).collect()
            };
            for mechs in groups {
                let mut ac = plan.attack.clone();
                ac.seed = seed;
                ac.mechanisms.clone_from(&mechs);
                let victims: Vec<Victim<F>> = mechs.iter().map(|m| lab.victim(*m)).collect();
                let target = if plan.ensemble { None } else { Some(mechs[0]) };
                progress(&format!(
                    "{} on {}, seed {seed}",
                    plan.label(),
                    target.map_or("ensemble".to_string(), |m| m.to_string())
                ));
                let p = run_attack(&cfg.model, &cfg.mechanism, &victims, &pool, &ac, &json)?;
                out.push(Crafted { row: plan.label(), target, seed, perturbation: p });
            }
        }
    }
    Ok(out)
}

/// Crafts every perturbation of the matrix and saves it under the run
/// directory.
pub fn run_attack_stage(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<Vec<PathBuf>> {
    let crafted = match cfg.precision {
        Precision::F32 => craft_all(&Lab::<f32>::open(cfg, Stage::Attack)?, progress)?,
        Precision::F64 => craft_all(&Lab::<f64>::open(cfg, Stage::Attack)?, progress)?,
    };
    fs::create_dir_all(pert_dir(cfg))?;
    let mut paths = Vec::new();
    for c in &crafted {
        let target = c.target.map_or("ensemble", |m| m.name());
        let path = pert_dir(cfg).join(pert_name(&c.row, target, c.seed));
        c.perturbation.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

fn load_crafted(cfg: &ExperimentConfig) -> Result<Vec<Crafted>> {
    let plan = planned(cfg);
    let missing: Vec<String> =
        plan.iter().filter(|p| !p.3.exists()).map(|p| p.3.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(CoreError::Config(format!("missing perturbations (run attack first): {}", missing.join(", "))));
    }
    plan.into_iter()
        .map(|(row, target, seed, path)| Ok(Crafted { row, target, seed, perturbation: Perturbation::load(&path)? }))
        .collect()
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub images: usize,
    pub row: SummaryRow,
    pub per_block_active: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub row: String,
    pub mechanism: Mechanism,
    /// Mean over seeds.
    pub mean: SummaryRow,
    pub per_seed: Vec<SeedRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryEntry>,
}

impl Summary {
    pub fn get(&self, row: &str, mechanism: Mechanism) -> Option<&SummaryEntry> {
        self.rows.iter().find(|r| r.row == row && r.mechanism == mechanism)
    }
}

/// Per-image results keyed by (row, mechanism, seed).
pub type ImageTable = BTreeMap<(String, Mechanism, u64), Vec<ImageResult>>;

fn mean_rows(rows: &[SummaryRow]) -> SummaryRow {
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&SummaryRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    SummaryRow {
        variant: rows[0].variant.clone(),
        mechanism: rows[0].mechanism,
        tur: avg(&|r| r.tur),
        tur_pct: avg(&|r| r.tur_pct),
        gflops: avg(&|r| r.gflops),
        gflops_pct: avg(&|r| r.gflops_pct),
        accuracy: avg(&|r| r.accuracy),
        preservation_rate: avg(&|r| r.preservation_rate),
        delta_tur: avg(&|r| r.delta_tur),
        delta_gflops: avg(&|r| r.delta_gflops),
    }
}

/// Evaluates clean, clean_wo and every crafted perturbation on every
/// mechanism it applies to.
pub fn evaluate_all<F: Real>(lab: &Lab<F>, crafted: &[Crafted]) -> Result<(Summary, ImageTable)> {
    let cfg = &lab.cfg;
    let (model, mcfg) = (&cfg.model, &cfg.mechanism);
    let mut table = ImageTable::new();
    let mut grouped: BTreeMap<(usize, String, Mechanism), Vec<SeedRow>> = BTreeMap::new();
    let (wo, wo_rows) = evaluate_set(model, &lab.victims[&Mechanism::Vanilla], Mechanism::Vanilla, mcfg, &lab.eval, None, None)?;
    let vanilla_flops = wo.flops;
    let mut clean_reports: BTreeMap<Mechanism, MetricsReport> = BTreeMap::new();
    for seed in cfg.seeds() {
        for &m in &cfg.mechanisms {
            let (clean, rows) = evaluate_set(model, &lab.victims[&m], m, mcfg, &lab.eval, None, None)?;
            let mut add = |order: usize, name: &str, rep: &MetricsReport, clean: &MetricsReport, rows: Vec<ImageResult>| {
                let row = summary_row(name, m, rep, clean, vanilla_flops);
                grouped.entry((order, name.to_string(), m)).or_default().push(SeedRow {
                    seed,
                    images: rep.images,
                    row,
                    per_block_active: rep.per_block_active.clone(),
                });
                table.insert((name.to_string(), m, seed), rows);
            };
            add(0, "clean", &clean, &clean, rows);
            add(1, "clean_wo", &wo, &clean, wo_rows.clone());
            for (k, c) in crafted.iter().enumerate().filter(|(_, c)| c.seed == seed) {
                let applies = match c.target {
                    Some(t) => t == m,
                    None => c.perturbation.mechanisms.contains(&m),
                };
                if !applies {
                    continue;
                }
                let pool = lab.eval_pool(&c.perturbation.variant);
                let (base, _) = if matches!(c.perturbation.variant, Variant::ClassUniversal { .. }) {
                    evaluate_set(model, &lab.victims[&m], m, mcfg, &pool, None, None)?
                } else {
                    (clean.clone(), Vec::new())
                };
                let (rep, rows) = evaluate_set(model, &lab.victims[&m], m, mcfg, &pool, Some(&c.perturbation), None)?;
                add(2 + k, &c.row, &rep, &base, rows);
            }
            clean_reports.insert(m, clean);
        }
    }
    let mut rows: Vec<SummaryEntry> = grouped
        .into_iter()
        .map(|((_, row, mechanism), per_seed)| {
            let mean = mean_rows(&per_seed.iter().map(|s| s.row.clone()).collect::<Vec<_>>());
            SummaryEntry { row, mechanism, mean, per_seed }
        })
        .collect();
    rows.sort_by_key(|r| cfg.mechanisms.iter().position(|m| *m == r.mechanism));
    let summary = Summary {
        config: serde_json::from_str(&cfg.resolved_json()).map_err(jerr)?,
        seeds: cfg.seeds(),
        rows,
    };
    Ok((summary, table))
}

fn write_tables(cfg: &ExperimentConfig, table: &ImageTable) -> Result<()> {
    let dir = cfg.output_dir.join("csv");
    fs::create_dir_all(&dir)?;
    for ((row, m, seed), rows) in table {
        let mut buf = Vec::new();
        use std::io::Write;
        writeln!(buf, "# config: {}", cfg.resolved_json())?;
        write_csv(&mut buf, row, *m, rows)?;
        fs::write(dir.join(format!("{row}__{m}__s{seed}.csv")), buf)?;
    }
    Ok(())
}

/// Evaluates the perturbations written by `attack`.
pub fn run_evaluate_stage(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate(Stage::Evaluate)?;
    let crafted = load_crafted(cfg)?;
    let (summary, table) = match cfg.precision {
        Precision::F32 => evaluate_all(&Lab::<f32>::open(cfg, Stage::Evaluate)?, &crafted)?,
        Precision::F64 => evaluate_all(&Lab::<f64>::open(cfg, Stage::Evaluate)?, &crafted)?,
    };
    write_tables(cfg, &table)?;
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

// ------------------------------------------------------------------ defend

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub row: String,
    pub seed: u64,
    pub undefended_flops: f64,
    pub defended_flops: f64,
    pub undefended_tur: f64,
    pub defended_tur: f64,
    pub defended_accuracy: f64,
    /// Largest per-block excess of active non-class tokens over the cap
    /// seen on any image; 0 when the caps held everywhere.
    pub max_cap_excess: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismDefense {
    pub mechanism: Mechanism,
    pub defense: DefenseConfig,
    pub clean_flops: f64,
    pub clean_accuracy: f64,
    pub defended_clean_flops: f64,
    pub defended_clean_accuracy: f64,
    pub rows: Vec<DefenseRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub config: serde_json::Value,
    pub mechanisms: Vec<MechanismDefense>,
}

fn cap_excess(rows: &[ImageResult], caps: &[usize]) -> usize {
    rows.iter()
        .flat_map(|r| r.active.iter().zip(caps).map(|(&a, &c)| a.saturating_sub(1).saturating_sub(c)))
        .max()
        .unwrap_or(0)
}

pub fn defend_all<F: Real>(lab: &Lab<F>, crafted: &[Crafted]) -> Result<DefenseReport> {
    let cfg = &lab.cfg;
    let plan = cfg.defense.as_ref().ok_or_else(|| CoreError::Config("no defense section".into()))?;
    let (model, mcfg) = (&cfg.model, &cfg.mechanism);
    let holdout: Vec<Tensor<F>> =
        spread(lab.holdout.clone(), plan.holdout_size).iter().map(|s| s.image.cast()).collect();
    let mut out = Vec::new();
    for &m in &cfg.mechanisms {
        let w = &lab.victims[&m];
        let def = calibrate_caps(model, w, m, mcfg, &holdout, plan.policy, plan.seed)?;
        let (clean, _) = evaluate_set(model, w, m, mcfg, &lab.eval, None, None)?;
        let (dclean, _) = evaluate_set(model, w, m, mcfg, &lab.eval, None, Some(&def))?;
        let mut rows = Vec::new();
        for c in crafted {
            let applies = match c.target {
                Some(t) => t == m,
                None => c.perturbation.mechanisms.contains(&m),
            };
            if !applies {
                continue;
            }
            let pool = lab.eval_pool(&c.perturbation.variant);
            let (und, _) = evaluate_set(model, w, m, mcfg, &pool, Some(&c.perturbation), None)?;
            let (dad, drows) = evaluate_set(model, w, m, mcfg, &pool, Some(&c.perturbation), Some(&def))?;
            rows.push(DefenseRow {
                row: c.row.clone(),
                seed: c.seed,
                undefended_flops: und.flops,
                defended_flops: dad.flops,
                undefended_tur: und.tur,
                defended_tur: dad.tur,
                defended_accuracy: dad.accuracy,
                max_cap_excess: cap_excess(&drows, &def.caps),
            });
        }
        out.push(MechanismDefense {
            mechanism: m,
            defense: def,
            clean_flops: clean.flops,
            clean_accuracy: clean.accuracy,
            defended_clean_flops: dclean.flops,
            defended_clean_accuracy: dclean.accuracy,
            rows,
        });
    }
    Ok(DefenseReport { config: serde_json::from_str(&cfg.resolved_json()).map_err(jerr)?, mechanisms: out })
}

pub fn run_defend_stage(cfg: &ExperimentConfig) -> Result<DefenseReport> {
    cfg.validate(Stage::Defend)?;
    let crafted = load_crafted(cfg)?;
    let report = match cfg.precision {
        Precision::F32 => defend_all(&Lab::<f32>::open(cfg, Stage::Defend)?, &crafted)?,
        Precision::F64 => defend_all(&Lab::<f64>::open(cfg, Stage::Defend)?, &crafted)?,
    };
    write_json(&cfg.output_dir.join("defense.json"), &report)?;
    Ok(report)
}

// ------------------------------------------------------------------ report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub row: String,
    pub mechanism: Mechanism,
    pub accuracy: f64,
    pub gflops: f64,
    pub tur: f64,
    /// Compute as a percentage of the unsparsified model.
    pub gflops_pct_of_upper: f64,
    pub tur_pct_of_upper: f64,
    /// Share of the gap between clean and unsparsified closed by this row.
    pub gflops_gain_pct: f64,
    pub tur_gain_pct: f64,
    pub preservation_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub defense: Option<DefenseReport>,
}

fn gain(x: f64, clean: f64, upper: f64) -> f64 {
    if (upper - clean).abs() < 1e-12 {
        0.0
    } else {
        (x - clean) / (upper - clean) * 100.0
    }
}

pub fn build_report(summary: &Summary, defense: Option<DefenseReport>) -> Report {
    let rows = summary
        .rows
        .iter()
        .map(|e| {
            let clean = summary.get("clean", e.mechanism).map(|c| &c.mean);
            let wo = summary.get("clean_wo", e.mechanism).map(|c| &c.mean);
            let (ct, cg) = clean.map_or((e.mean.tur, e.mean.gflops), |c| (c.tur, c.gflops));
            let (ut, ug) = wo.map_or((1.0, e.mean.gflops), |c| (c.tur, c.gflops));
            ReportRow {
                row: e.row.clone(),
                mechanism: e.mechanism,
                accuracy: e.mean.accuracy,
                gflops: e.mean.gflops,
                tur: e.mean.tur,
                gflops_pct_of_upper: e.mean.gflops_pct,
                tur_pct_of_upper: e.mean.tur_pct,
                gflops_gain_pct: gain(e.mean.gflops, cg, ug),
                tur_gain_pct: gain(e.mean.tur, ct, ut),
                preservation_rate: e.mean.preservation_rate,
            }
        })
        .collect();
    Report { config: summary.config.clone(), seeds: summary.seeds.clone(), rows, defense }
}

/// Reads a finished run; never writes into it.
pub fn run_report_stage(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate(Stage::Report)?;
    let summary: Summary = read_json(&cfg.output_dir.join("summary.json"))?;
    let dpath = cfg.output_dir.join("defense.json");
    let defense = if dpath.exists() { Some(read_json(&dpath)?) } else { None };
    Ok(build_report(&summary, defense))
}

/// Attack, evaluate and (when configured) defend in one go.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<Report> {
    run_attack_stage(cfg, progress)?;
    let summary = run_evaluate_stage(cfg)?;
    let defense = if cfg.defense.is_some() { Some(run_defend_stage(cfg)?) } else { None };
    Ok(build_report(&summary, defense))
}
