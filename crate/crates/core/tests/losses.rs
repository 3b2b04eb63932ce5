use proptest::prelude::*;
use tslab_autodiff::{Graph, Tensor, Var};
use tslab_core::attack::{clean_distribution, label_ce, loss_adavit, loss_ats, loss_avit, loss_cls};
use tslab_core::sparsifiers::{AVitBlock, AVitTrace, AdaVitBlock, AtsBlock};

fn vector(g: &mut Graph<f64>, v: &[f64]) -> Var {
    g.param(Tensor::from_f64(&[v.len()], v).unwrap())
}

fn ats_block(g: &mut Graph<f64>, s: &[f64]) -> AtsBlock {
    AtsBlock {
        block: 0,
        scores: vector(g, s),
        score_values: s.to_vec(),
        rows: (1..=s.len()).collect(),
        kept: (1..=s.len()).collect(),
        sampled: s.len(),
        fallback: false,
    }
}

fn adavit_block(g: &mut Graph<f64>, blocks: [f64; 2], heads: &[f64], patches: &[f64], msa: bool) -> AdaVitBlock {
    AdaVitBlock {
        block: 1,
        patch_probs: vector(g, patches),
        head_probs: vector(g, heads),
        block_probs: vector(g, &blocks),
        msa,
        ffn: true,
        patch_keep: vec![true; patches.len()],
        heads: vec![msa; heads.len()],
    }
}

/// Running sums from per-block halting scores `h[l][j]`, every token active.
fn avit_trace(g: &mut Graph<f64>, h: &[Vec<f64>]) -> (AVitTrace, Vec<Var>) {
    let mut leaves = Vec::new();
    let mut blocks = Vec::new();
    let mut cum: Option<Var> = None;
    for (l, row) in h.iter().enumerate() {
        let v = vector(g, row);
        leaves.push(v);
        let c = match cum {
            Some(c) => g.add(c, v).unwrap(),
            None => v,
        };
        cum = Some(c);
        blocks.push(AVitBlock { block: l, cumulative: c, active: vec![true; row.len()] });
    }
    let n = h[0].len();
    (AVitTrace { blocks, halt_block: vec![None; n] }, leaves)
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

#[test]
fn cls_at_the_clean_logits_is_entropy_over_classes_with_zero_gradient() {
    let logits = [1.5, -0.3, 0.2, 2.0];
    let p = clean_distribution(&logits);
    let mut g = Graph::new();
    let x = vector(&mut g, &logits);
    let l = loss_cls(&mut g, x, &p).unwrap();
    g.backward(l).unwrap();
    let entropy: f64 = -p.iter().map(|p| p * p.ln()).sum::<f64>();
    assert!((scalar(&g, l) - entropy / 4.0).abs() < 1e-12);
    assert!(g.grad(x).unwrap().max_abs() < 1e-6);
}

#[test]
fn cls_against_a_uniform_guess_exceeds_the_self_value() {
    let clean = [8.0, 0.0, 0.0, 0.0];
    let p = clean_distribution(&clean);
    let eval = |logits: &[f64]| {
        let mut g = Graph::new();
        let x = vector(&mut g, logits);
        let l = loss_cls(&mut g, x, &p).unwrap();
        scalar(&g, l)
    };
    assert!(eval(&[0.0; 4]) > eval(&clean));
}

proptest! {
    #[test]
    fn cls_matches_direct_summation(
        a in prop::collection::vec(-4.0..4.0f64, 5),
        b in prop::collection::vec(-4.0..4.0f64, 5),
    ) {
        let p = clean_distribution(&a);
        let z: f64 = b.iter().map(|x| x.exp()).sum();
        let want = -p.iter().zip(&b).map(|(p, x)| p * (x.exp() / z).ln()).sum::<f64>() / 5.0;
        let mut g = Graph::new();
        let x = vector(&mut g, &b);
        let l = loss_cls(&mut g, x, &p).unwrap();
        prop_assert!((scalar(&g, l) - want).abs() < 1e-12);
    }

    #[test]
    fn ats_loss_is_non_negative(raw in prop::collection::vec(0.001..1.0f64, 1..=16)) {
        let total: f64 = raw.iter().sum();
        let s: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut g = Graph::new();
        let b = ats_block(&mut g, &s);
        let l = loss_ats(&mut g, &[b], s.len()).unwrap();
        prop_assert!(scalar(&g, l) >= -1e-12);
    }
}

#[test]
fn cls_rejects_mismatched_lengths() {
    let mut g = Graph::new();
    let x = vector(&mut g, &[0.0; 3]);
    assert!(loss_cls(&mut g, x, &[0.5, 0.5]).is_err());
}

#[test]
fn label_ce_is_negative_log_probability() {
    let mut g = Graph::new();
    let x = vector(&mut g, &[0.0, (3.0f64).ln()]);
    let l = label_ce(&mut g, x, 1).unwrap();
    assert!((scalar(&g, l) + (0.75f64).ln()).abs() < 1e-12);
}

#[test]
fn ats_loss_examples() {
    let mut g = Graph::new();
    let b = ats_block(&mut g, &[0.5, 0.25, 0.25]);
    let l = loss_ats(&mut g, &[b], 3).unwrap();
    let want = 0.5 * 1.5f64.ln() + 0.5 * 0.75f64.ln();
    assert!((scalar(&g, l) - want).abs() < 1e-12);
    assert!((scalar(&g, l) - 0.0589).abs() < 5e-5);

    let u = ats_block(&mut g, &[0.25; 4]);
    let l = loss_ats(&mut g, &[u], 4).unwrap();
    assert!(scalar(&g, l).abs() < 1e-15);
}

#[test]
fn ats_loss_averages_blocks_and_skips_zero_scores() {
    let mut g = Graph::new();
    let a = ats_block(&mut g, &[0.5, 0.25, 0.25]);
    let b = ats_block(&mut g, &[0.5, 0.5, 0.0]);
    let l = loss_ats(&mut g, &[a, b], 3).unwrap();
    let ka = 0.5 * 1.5f64.ln() + 0.5 * 0.75f64.ln();
    let kb = 1.5f64.ln();
    assert!((scalar(&g, l) - (ka + kb) / 2.0).abs() < 1e-12);
    let empty = loss_ats(&mut g, &[], 3).unwrap();
    assert_eq!(scalar(&g, empty), 0.0);
}

#[test]
fn adavit_loss_examples() {
    let mut g = Graph::new();
    let b = adavit_block(&mut g, [0.5, 0.5], &[1.0; 3], &[1.0; 5], true);
    let l = loss_adavit(&mut g, &[b]).unwrap();
    assert!((scalar(&g, l) - 0.25).abs() < 1e-12);

    let b = adavit_block(&mut g, [1.0, 1.0], &[1.0; 3], &[1.0; 5], true);
    let l = loss_adavit(&mut g, &[b]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
}

#[test]
fn adavit_head_term_is_gated_by_the_msa_decision() {
    let mut g = Graph::new();
    let heads = [0.1, 0.7];
    let on = adavit_block(&mut g, [1.0, 1.0], &heads, &[1.0; 2], true);
    let off = adavit_block(&mut g, [1.0, 1.0], &heads, &[1.0; 2], false);
    let head_var = off.head_probs;
    let l_on = loss_adavit(&mut g, &[on]).unwrap();
    let want = (0.9f64.powi(2) + 0.3f64.powi(2)) / 2.0;
    assert!((scalar(&g, l_on) - want).abs() < 1e-12);
    let l_off = loss_adavit(&mut g, &[off]).unwrap();
    assert_eq!(scalar(&g, l_off), 0.0);
    g.backward(l_off).unwrap();
    assert!(g.grad(head_var).map_or(0.0, |t| t.max_abs()) == 0.0);
}

#[test]
fn adavit_loss_averages_over_blocks() {
    let mut g = Graph::new();
    let a = adavit_block(&mut g, [0.5, 0.5], &[1.0; 2], &[1.0; 2], true);
    let b = adavit_block(&mut g, [1.0, 1.0], &[1.0; 2], &[0.0, 1.0], true);
    let l = loss_adavit(&mut g, &[a, b]).unwrap();
    assert!((scalar(&g, l) - (0.25 + 0.5) / 2.0).abs() < 1e-12);
}

#[test]
fn avit_loss_examples() {
    let mut g = Graph::new();
    let (t, _) = avit_trace(&mut g, &[vec![0.2], vec![0.3]]);
    let l = loss_avit(&mut g, &t).unwrap();
    assert!((scalar(&g, l) - 0.145).abs() < 1e-12);

    let (t, _) = avit_trace(&mut g, &[vec![0.0; 3], vec![0.0; 3]]);
    let l = loss_avit(&mut g, &t).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
}

#[test]
fn avit_loss_ignores_blocks_after_a_halt() {
    let mut g = Graph::new();
    let (mut t, _) = avit_trace(&mut g, &[vec![0.2, 0.5], vec![0.3, 0.6]]);
    t.blocks[1].active[1] = false;
    let l = loss_avit(&mut g, &t).unwrap();
    let want = (0.2f64.powi(2) + 0.5f64.powi(2) + 0.5f64.powi(2)) / 4.0;
    assert!((scalar(&g, l) - want).abs() < 1e-12);
}

proptest! {
    #[test]
    fn avit_loss_falls_when_any_score_falls(
        h in prop::collection::vec(prop::collection::vec(0.0..0.3f64, 3), 1..5),
        pick in any::<prop::sample::Index>(),
        cut in 0.01..1.0f64,
    ) {
        let eval = |h: &[Vec<f64>]| {
            let mut g = Graph::new();
            let (t, _) = avit_trace(&mut g, h);
            let l = loss_avit(&mut g, &t).unwrap();
            scalar(&g, l)
        };
        let flat = pick.index(h.len() * 3);
        let (l, j) = (flat / 3, flat % 3);
        prop_assume!(h[l][j] > 1e-6);
        let mut lower = h.clone();
        lower[l][j] *= 1.0 - cut;
        prop_assert!(eval(&lower) < eval(&h));
    }
}

#[test]
fn avit_gradient_counts_every_later_active_block() {
    // d/dh_j^0 of the sum of squared running sums is 2 * sum_l c_j^l / (N L).
    let mut g = Graph::new();
    let (t, leaves) = avit_trace(&mut g, &[vec![0.2], vec![0.3], vec![0.1]]);
    let l = loss_avit(&mut g, &t).unwrap();
    g.backward(l).unwrap();
    let want = 2.0 * (0.2 + 0.5 + 0.6) / 3.0;
    assert!((g.grad(leaves[0]).unwrap().item() - want).abs() < 1e-12);
}
