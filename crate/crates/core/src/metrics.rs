//! Token utilization, analytic compute, accuracy and report emission.

use std::io::Write;

use serde::{Deserialize, Serialize};
use tslab_autodiff::{Graph, Real, Tensor};

use crate::attack::Perturbation;
use crate::data::Sample;
use crate::defense::DefenseConfig;
use crate::error::{CoreError, Result};
use crate::model::{ForwardOptions, ModelConfig, ModelWeights, Trace};
use crate::sparsifiers::{self, Mechanism, MechanismConfig, Setup};

/// Active token slots over all slots, `sum_l n_l / (L (N + 1))`.
pub fn compute_tur(trace: &Trace) -> f64 {
    if trace.blocks.is_empty() {
        return 1.0;
    }
    let active: usize = trace.blocks.iter().map(|b| b.tokens).sum();
    active as f64 / (trace.blocks.len() * trace.seq_len) as f64
}

/// Multiply-accumulate count of one inference.
///
/// Per block, MSA costs `4 n d^2 + 2 n^2 d` scaled by the active head share
/// and FFN costs `2 r n d^2` (`r` the MLP ratio). Patch embedding and the
/// classifier head are always paid. Norms and softmax are ignored.
pub fn compute_flops(cfg: &ModelConfig, trace: &Trace) -> f64 {
    let d = cfg.embed_dim as f64;
    let mut total = (cfg.num_patches() * cfg.patch_dim() * cfg.embed_dim + cfg.embed_dim * cfg.num_classes) as f64;
    for b in &trace.blocks {
        let n = b.tokens as f64;
        if b.msa && b.heads > 0 {
            total += (4.0 * n * d * d + 2.0 * n * n * d) * b.heads as f64 / cfg.heads as f64;
        }
        if b.ffn {
            total += 2.0 * cfg.mlp_ratio as f64 * n * d * d;
        }
    }
    total
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

/// One undefended or defended inference without gradients.
pub fn infer<F: Real>(
    cfg: &ModelConfig,
    weights: &ModelWeights<F>,
    mechanism: Mechanism,
    mcfg: &MechanismConfig,
    image: &Tensor<F>,
    defense: Option<(&DefenseConfig, u64)>,
) -> Result<(Vec<f64>, Trace)> {
    let mut g = Graph::new();
    let p = weights.bind(&mut g, false);
    let x = g.constant(image.clone());
    let setup = Setup { caps: defense.map(|(d, id)| d.enforcer(id)), ..Setup::default() };
    let out = sparsifiers::run(&mut g, cfg, &p, x, mechanism, mcfg, setup, ForwardOptions::default())?;
    Ok((g.value(out.logits).to_f64_vec(), out.trace))
}

/// Per-image evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: u64,
    pub label: usize,
    pub tur: f64,
    pub flops: f64,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub active: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub tur: f64,
    /// Mean multiply-accumulates per image.
    pub flops: f64,
    pub accuracy: f64,
    pub preservation_rate: f64,
    /// Mean active tokens per block, class token included.
    pub per_block_active: Vec<f64>,
    /// Mean number of blocks each non-class token was active in.
    pub per_token_depth: Vec<f64>,
}

/// Aggregates TUR, compute, accuracy and prediction preservation. Clean
/// predictions come from the same mechanism and defense on the unperturbed
/// image.
pub fn evaluate_set<F: Real>(
    cfg: &ModelConfig,
    weights: &ModelWeights<F>,
    mechanism: Mechanism,
    mcfg: &MechanismConfig,
    samples: &[Sample],
    perturbation: Option<&Perturbation>,
    defense: Option<&DefenseConfig>,
) -> Result<(MetricsReport, Vec<ImageResult>)> {
    if samples.is_empty() {
        return Err(CoreError::EmptyDataset("evaluation set is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut depth = vec![0.0; cfg.num_patches()];
    for s in samples {
        let clean: Tensor<F> = s.image.cast();
        let (clean_logits, clean_trace) = infer(cfg, weights, mechanism, mcfg, &clean, defense.map(|d| (d, s.id)))?;
        let clean_pred = argmax(&clean_logits);
        let (adv_pred, trace) = match perturbation {
            Some(p) => {
                let adv: Tensor<F> = p.apply(s)?.cast();
                let (l, t) = infer(cfg, weights, mechanism, mcfg, &adv, defense.map(|d| (d, s.id)))?;
                (argmax(&l), t)
            }
            None => (clean_pred, clean_trace),
        };
        for (d, k) in depth.iter_mut().zip(&trace.token_depths()[1..]) {
            *d += *k as f64;
        }
        rows.push(ImageResult {
            id: s.id,
            label: s.label,
            tur: compute_tur(&trace),
            flops: compute_flops(cfg, &trace),
            clean_pred,
            adv_pred,
            active: trace.active_counts(),
        });
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&ImageResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let report = MetricsReport {
        images: rows.len(),
        tur: mean(&|r| r.tur),
        flops: mean(&|r| r.flops),
        accuracy: mean(&|r| (r.adv_pred == r.label) as u8 as f64),
        preservation_rate: mean(&|r| (r.adv_pred == r.clean_pred) as u8 as f64),
        per_block_active: (0..cfg.depth).map(|l| mean(&|r| r.active[l] as f64)).collect(),
        per_token_depth: depth.iter().map(|d| d / n).collect(),
    };
    Ok((report, rows))
}

/// Writes one CSV row per image.
pub fn write_csv<W: Write>(out: &mut W, variant: &str, mechanism: Mechanism, rows: &[ImageResult]) -> Result<()> {
    writeln!(out, "id,variant,mechanism,tur,flops,clean_pred,adv_pred")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.6},{:.0},{},{}", r.id, variant, mechanism, r.tur, r.flops, r.clean_pred, r.adv_pred)?;
    }
    Ok(())
}

/// Summary line, percentages relative to the unsparsified model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub mechanism: Mechanism,
    pub tur: f64,
    pub tur_pct: f64,
    pub gflops: f64,
    pub gflops_pct: f64,
    pub accuracy: f64,
    pub preservation_rate: f64,
    pub delta_tur: f64,
    pub delta_gflops: f64,
}

pub fn summary_row(
    variant: &str,
    mechanism: Mechanism,
    report: &MetricsReport,
    clean: &MetricsReport,
    vanilla_flops: f64,
) -> SummaryRow {
    SummaryRow {
        variant: variant.to_string(),
        mechanism,
        tur: report.tur,
        tur_pct: report.tur * 100.0,
        gflops: report.flops / 1e9,
        gflops_pct: report.flops / vanilla_flops * 100.0,
        accuracy: report.accuracy,
        preservation_rate: report.preservation_rate,
        delta_tur: report.tur - clean.tur,
        delta_gflops: (report.flops - clean.flops) / 1e9,
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockUsage;

    #[test]
    fn deit_small_is_four_point_six_giga() {
        let cfg = ModelConfig::deit_small();
        let g = compute_flops(&cfg, &Trace::vanilla(&cfg)) / 1e9;
        assert!((g - 4.6).abs() / 4.6 < 0.05, "{g}");
    }

    #[test]
    fn all_off_is_embed_plus_head() {
        let cfg = ModelConfig::default();
        let mut t = Trace::vanilla(&cfg);
        for b in &mut t.blocks {
            b.msa = false;
            b.ffn = false;
            b.heads = 0;
        }
        let expect = (64 * 48 * 64 + 64 * 10) as f64;
        assert_eq!(compute_flops(&cfg, &t), expect);
    }

    #[test]
    fn tur_half() {
        let cfg = ModelConfig { image_size: 12, patch_size: 4, ..ModelConfig::default() };
        let mut t = Trace::vanilla(&cfg);
        assert_eq!(compute_tur(&t), 1.0);
        for b in &mut t.blocks {
            *b = BlockUsage { tokens: 5, ..b.clone() };
        }
        assert_eq!(compute_tur(&t), 0.5);
    }

    #[test]
    fn spearman_extremes() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
