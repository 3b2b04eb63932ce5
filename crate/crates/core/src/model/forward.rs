use tslab_autodiff::{Graph, Real, Tensor, Var};

use super::config::ModelConfig;
use super::params::{BlockParams, ModelParams};
use crate::error::{CoreError, Result};
use crate::sparsifiers::MechanismSignals;

pub const LN_EPS: f64 = 1e-5;

/// Straight-through gates used while training decision networks. Forward
/// values equal the hard masks; gradients reach the soft probabilities.
#[derive(Clone, Copy, Debug)]
pub struct Gates {
    /// `[n]` over current rows.
    pub tokens: Var,
    /// `[H]`, already multiplied by the MSA gate.
    pub heads: Var,
    pub msa: Var,
    pub ffn: Var,
}

/// Per-block execution masks over the current rows.
#[derive(Clone, Debug)]
pub struct BlockMasks {
    pub tokens: Vec<bool>,
    pub heads: Vec<bool>,
    pub msa: bool,
    pub ffn: bool,
    pub gates: Option<Gates>,
}

impl BlockMasks {
    pub fn full(rows: usize, heads: usize) -> Self {
        BlockMasks { tokens: vec![true; rows], heads: vec![true; heads], msa: true, ffn: true, gates: None }
    }

    pub fn from_tokens(tokens: Vec<bool>, heads: usize) -> Self {
        BlockMasks { tokens, ..BlockMasks::full(0, heads) }
    }
}

/// Row selection a sparsifier may request once attention is known.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    /// Physically keep these row positions (class row first).
    Gather(Vec<usize>),
    /// Keep every row, but only these stay active.
    Mask(Vec<bool>),
}

#[derive(Clone, Debug)]
pub struct BlockContext {
    /// 0-based block index.
    pub block: usize,
    pub depth: usize,
    pub heads: usize,
    /// Original token id of each current row; row 0 is the class token.
    pub rows: Vec<usize>,
}

pub struct AttentionOutput {
    /// Per-head `A V`, each `[n, d/H]`.
    pub heads: Vec<Var>,
    /// Per-head attention matrices `[n, n]`.
    pub attn: Vec<Var>,
    /// Per-head value matrices `[n, d/H]`.
    pub values: Vec<Var>,
}

/// Hooks a token-sparsification mechanism plugs into the forward pass.
pub trait TokenSparsifier<F: Real> {
    fn begin_block(&mut self, g: &mut Graph<F>, ctx: &BlockContext, z: Var) -> Result<BlockMasks>;

    fn after_attention(
        &mut self,
        _g: &mut Graph<F>,
        _ctx: &BlockContext,
        _att: &AttentionOutput,
        _masks: &BlockMasks,
    ) -> Result<Option<Selection>> {
        Ok(None)
    }

    /// Sees the block output and the original ids of its rows.
    fn end_block(&mut self, _g: &mut Graph<F>, _ctx: &BlockContext, _z: Var, _rows: &[usize]) -> Result<()> {
        Ok(())
    }

    fn take_signals(&mut self) -> MechanismSignals;
}

/// What one block actually executed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockUsage {
    /// Active rows including the class token.
    pub tokens: usize,
    pub heads: usize,
    pub msa: bool,
    pub ffn: bool,
    /// Activity of each original token id (length N+1).
    pub active: Vec<bool>,
}

impl BlockUsage {
    pub fn full(seq_len: usize, heads: usize) -> Self {
        BlockUsage { tokens: seq_len, heads, msa: true, ffn: true, active: vec![true; seq_len] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub seq_len: usize,
    pub heads: usize,
    pub blocks: Vec<BlockUsage>,
}

impl Trace {
    pub fn vanilla(cfg: &ModelConfig) -> Self {
        Trace {
            seq_len: cfg.seq_len(),
            heads: cfg.heads,
            blocks: (0..cfg.depth).map(|_| BlockUsage::full(cfg.seq_len(), cfg.heads)).collect(),
        }
    }

    pub fn active_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.tokens).collect()
    }

    /// Number of blocks each original token was active in.
    pub fn token_depths(&self) -> Vec<usize> {
        let mut d = vec![0; self.seq_len];
        for b in &self.blocks {
            for (i, &a) in b.active.iter().enumerate() {
                d[i] += a as usize;
            }
        }
        d
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Accumulate the sum of squared attention and GELU activations.
    pub track_energy: bool,
}

pub struct ForwardOutput {
    /// `[M]`.
    pub logits: Var,
    pub trace: Trace,
    pub signals: MechanismSignals,
    pub energy: Option<Var>,
}

/// `[C, H, W]` image to the `[N+1, d]` token sequence.
pub fn patchify_embed<F: Real>(g: &mut Graph<F>, cfg: &ModelConfig, p: &ModelParams<Var>, image: Var) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    if shape != cfg.image_shape() {
        return Err(CoreError::Dimension(format!("image {:?}, expected {:?}", shape, cfg.image_shape())));
    }
    let n = cfg.num_patches();
    let flat = g.reshape(image, &[shape.iter().product(), 1])?;
    let gathered = g.gather_rows(flat, &cfg.patch_gather_index())?;
    let patches = g.reshape(gathered, &[n, cfg.patch_dim()])?;
    let proj = g.matmul(patches, p.patch_w)?;
    let emb = g.add(proj, p.patch_b)?;
    let seq = g.concat(&[p.cls_token, emb], 0)?;
    Ok(g.add(seq, p.pos_embed)?)
}

fn linear<F: Real>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// Multi-head attention on already-normalized tokens. `key_weights` (`[n]`,
/// non-negative) removes keys with weight zero.
pub fn attention_forward<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    p: &BlockParams<Var>,
    heads: usize,
    key_weights: Option<Var>,
) -> Result<AttentionOutput> {
    let d = g.shape(x)[1];
    if d % heads != 0 {
        return Err(CoreError::Dimension(format!("embed dim {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let q = linear(g, x, p.wq, p.bq)?;
    let k = linear(g, x, p.wk, p.bk)?;
    let v = linear(g, x, p.wv, p.bv)?;
    let inv = 1.0 / (hd as f64).sqrt();
    let mut out = AttentionOutput { heads: Vec::new(), attn: Vec::new(), values: Vec::new() };
    for h in 0..heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(v, a, b)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let scores = g.scale(raw, inv)?;
        let attn = match key_weights {
            Some(w) => g.masked_softmax(scores, w)?,
            None => g.softmax(scores, 1)?,
        };
        let o = g.matmul(attn, vh)?;
        out.heads.push(o);
        out.attn.push(attn);
        out.values.push(vh);
    }
    Ok(out)
}

fn bool_tensor<F: Real>(mask: &[bool], shape: &[usize]) -> Tensor<F> {
    let data = mask.iter().map(|&m| if m { F::one() } else { F::zero() }).collect();
    Tensor::new(shape.to_vec(), data).expect("mask sized to shape")
}

/// Result of one block.
pub struct BlockOutput {
    pub z: Var,
    pub selection: Option<Selection>,
}

/// Pre-norm residual block. Inactive rows pass through unchanged, disabled
/// heads contribute nothing and a disabled component is the identity.
pub fn block_forward<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    p: &BlockParams<Var>,
    masks: &BlockMasks,
    hook: &mut dyn FnMut(&mut Graph<F>, &AttentionOutput) -> Result<Option<Selection>>,
    energy: Option<&mut Vec<Var>>,
) -> Result<BlockOutput> {
    let n = g.shape(z)[0];
    let heads = masks.heads.len();
    if masks.tokens.len() != n {
        return Err(CoreError::Dimension(format!("token mask of {} for {} rows", masks.tokens.len(), n)));
    }
    if heads == 0 {
        return Err(CoreError::Dimension("head mask is empty".into()));
    }
    if !masks.tokens[0] {
        return Err(CoreError::Config("class token masked".into()));
    }
    let all_tokens = masks.tokens.iter().all(|&t| t);
    let token_w = match &masks.gates {
        Some(gt) => Some(gt.tokens),
        None if !all_tokens => Some(g.constant(bool_tensor(&masks.tokens, &[n]))),
        None => None,
    };
    let mut energy = energy;
    let mut z = z;
    let mut row_w = token_w;
    let mut selection = None;

    if masks.msa || masks.gates.is_some() {
        let x = g.layer_norm(z, p.ln1_g, p.ln1_b, LN_EPS)?;
        let att = attention_forward(g, x, p, heads, token_w)?;
        selection = hook(g, &att)?;
        let all_heads = masks.heads.iter().all(|&h| h);
        let head_gate = match &masks.gates {
            Some(gt) => Some(g.reshape(gt.heads, &[1, heads])?),
            None if !all_heads => Some(g.constant(bool_tensor(&masks.heads, &[1, heads]))),
            None => None,
        };
        let mut parts = Vec::with_capacity(heads);
        for (h, &o) in att.heads.iter().enumerate() {
            match head_gate {
                Some(hg) => {
                    let s = g.slice_cols(hg, h, h + 1)?;
                    parts.push(g.mul(o, s)?);
                }
                None => parts.push(o),
            }
        }
        let cat = g.concat(&parts, 1)?;
        let mut out = linear(g, cat, p.wo, p.bo)?;
        if let Some(gt) = &masks.gates {
            out = g.mul(out, gt.msa)?;
        }
        match &selection {
            Some(Selection::Gather(keep)) => {
                z = g.gather_rows(z, keep)?;
                out = g.gather_rows(out, keep)?;
                row_w = None;
            }
            Some(Selection::Mask(m)) => {
                row_w = if m.iter().all(|&t| t) { None } else { Some(g.constant(bool_tensor(m, &[m.len()]))) };
            }
            None => {}
        }
        let rows = g.shape(out)[0];
        if let Some(w) = row_w {
            let col = g.reshape(w, &[rows, 1])?;
            out = g.mul(out, col)?;
        }
        if let Some(e) = energy.as_deref_mut() {
            let sq = g.square(cat)?;
            e.push(g.sum(sq, None)?);
        }
        z = g.add(z, out)?;
    }

    if masks.ffn || masks.gates.is_some() {
        let rows = g.shape(z)[0];
        let x = g.layer_norm(z, p.ln2_g, p.ln2_b, LN_EPS)?;
        let pre = linear(g, x, p.w1, p.b1)?;
        let hidden = g.gelu(pre)?;
        if let Some(e) = energy.as_deref_mut() {
            let sq = g.square(hidden)?;
            e.push(g.sum(sq, None)?);
        }
        let mut out = linear(g, hidden, p.w2, p.b2)?;
        if let Some(gt) = &masks.gates {
            out = g.mul(out, gt.ffn)?;
        }
        if let Some(w) = row_w {
            let col = g.reshape(w, &[rows, 1])?;
            out = g.mul(out, col)?;
        }
        z = g.add(z, out)?;
    }
    Ok(BlockOutput { z, selection })
}

/// Full forward pass. Without a sparsifier every token is active in every
/// block.
pub fn model_forward<F: Real>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    image: Var,
    mut sparsifier: Option<&mut dyn TokenSparsifier<F>>,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    if p.blocks.len() != cfg.depth {
        return Err(CoreError::Dimension(format!("{} blocks for depth {}", p.blocks.len(), cfg.depth)));
    }
    let seq = cfg.seq_len();
    let mut z = patchify_embed(g, cfg, p, image)?;
    let mut rows: Vec<usize> = (0..seq).collect();
    let mut usage = Vec::with_capacity(cfg.depth);
    let mut energy_terms = Vec::new();

    for (l, bp) in p.blocks.iter().enumerate() {
        let ctx = BlockContext { block: l, depth: cfg.depth, heads: cfg.heads, rows: rows.clone() };
        let masks = match sparsifier.as_deref_mut() {
            Some(s) => s.begin_block(g, &ctx, z)?,
            None => BlockMasks::full(rows.len(), cfg.heads),
        };
        let out = {
            let mut hook = |g: &mut Graph<F>, att: &AttentionOutput| match sparsifier.as_deref_mut() {
                Some(s) => s.after_attention(g, &ctx, att, &masks),
                None => Ok(None),
            };
            let e = if opts.track_energy { Some(&mut energy_terms) } else { None };
            block_forward(g, z, bp, &masks, &mut hook, e)?
        };
        z = out.z;
        let mut active = vec![false; seq];
        match &out.selection {
            Some(Selection::Gather(keep)) => {
                rows = keep.iter().map(|&r| rows[r]).collect();
                rows.iter().for_each(|&id| active[id] = true);
            }
            Some(Selection::Mask(m)) => {
                rows.iter().zip(m).for_each(|(&id, &a)| active[id] = a);
            }
            None => rows.iter().zip(&masks.tokens).for_each(|(&id, &a)| active[id] = a),
        }
        let msa_on = masks.msa && masks.heads.iter().any(|&h| h);
        usage.push(BlockUsage {
            tokens: active.iter().filter(|&&a| a).count(),
            heads: if msa_on { masks.heads.iter().filter(|&&h| h).count() } else { 0 },
            msa: msa_on,
            ffn: masks.ffn,
            active,
        });
        if let Some(s) = sparsifier.as_deref_mut() {
            s.end_block(g, &ctx, z, &rows)?;
        }
    }

    let cls = g.slice_rows(z, 0, 1)?;
    let normed = g.layer_norm(cls, p.norm_g, p.norm_b, LN_EPS)?;
    let out = linear(g, normed, p.head_w, p.head_b)?;
    let logits = g.reshape(out, &[cfg.num_classes])?;
    let mut energy = None;
    for e in energy_terms {
        energy = Some(match energy {
            Some(acc) => g.add(acc, e)?,
            None => e,
        });
    }
    let signals = match sparsifier {
        Some(s) => s.take_signals(),
        None => MechanismSignals::Vanilla,
    };
    Ok(ForwardOutput {
        logits,
        trace: Trace { seq_len: seq, heads: cfg.heads, blocks: usage },
        signals,
        energy,
    })
}
