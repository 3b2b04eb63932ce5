//! Parameter containers, generic over the leaf type so the same layout holds
//! stored tensors (`Tensor<F>`) and graph-bound handles (`Var`).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use tslab_autodiff::{Graph, Real, Tensor, Var};

use super::config::ModelConfig;

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name { $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)* }
            }

            pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

param_struct!(
    /// One pre-norm transformer block.
    BlockParams {
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2,
    }
);

param_struct!(
    /// Per-block decision heads: patch keep logits from each token, head and
    /// component logits from the class token.
    DecisionParams { patch_w, patch_b, head_w, head_b, block_w, block_b }
);

param_struct!(
    /// Shared halting scale and shift applied to embedding channel 0.
    HaltingParams { gamma, beta }
);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls_token: T,
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: T,
    pub norm_b: T,
    pub head_w: T,
    pub head_b: T,
    pub halting: Option<HaltingParams<T>>,
    pub decisions: Option<Vec<DecisionParams<T>>>,
}

/// Stored weights.
pub type ModelWeights<F> = ModelParams<Tensor<F>>;

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            patch_w: f("patch_w", &self.patch_w),
            patch_b: f("patch_b", &self.patch_b),
            cls_token: f("cls_token", &self.cls_token),
            pos_embed: f("pos_embed", &self.pos_embed),
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("blocks.{i}."), f)).collect(),
            norm_g: f("norm_g", &self.norm_g),
            norm_b: f("norm_b", &self.norm_b),
            head_w: f("head_w", &self.head_w),
            head_b: f("head_b", &self.head_b),
            halting: self.halting.as_ref().map(|h| h.map("halting.", f)),
            decisions: self
                .decisions
                .as_ref()
                .map(|d| d.iter().enumerate().map(|(i, p)| p.map(&format!("decisions.{i}."), f)).collect()),
        }
    }

    /// Visits every leaf with its checkpoint name, in a fixed order.
    pub fn visit(&self, f: &mut impl FnMut(String, &T)) {
        f("patch_w".into(), &self.patch_w);
        f("patch_b".into(), &self.patch_b);
        f("cls_token".into(), &self.cls_token);
        f("pos_embed".into(), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}."), f);
        }
        f("norm_g".into(), &self.norm_g);
        f("norm_b".into(), &self.norm_b);
        f("head_w".into(), &self.head_w);
        f("head_b".into(), &self.head_b);
        if let Some(h) = &self.halting {
            h.visit("halting.", f);
        }
        if let Some(d) = &self.decisions {
            for (i, p) in d.iter().enumerate() {
                p.visit(&format!("decisions.{i}."), f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        f("patch_w".into(), &mut self.patch_w);
        f("patch_b".into(), &mut self.patch_b);
        f("cls_token".into(), &mut self.cls_token);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}."), f);
        }
        f("norm_g".into(), &mut self.norm_g);
        f("norm_b".into(), &mut self.norm_b);
        f("head_w".into(), &mut self.head_w);
        f("head_b".into(), &mut self.head_b);
        if let Some(h) = &mut self.halting {
            h.visit_mut("halting.", f);
        }
        if let Some(d) = &mut self.decisions {
            for (i, p) in d.iter_mut().enumerate() {
                p.visit_mut(&format!("decisions.{i}."), f);
            }
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

/// Which optional mechanism parameters a weight set carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Extras {
    pub halting: bool,
    pub decisions: bool,
}

fn trunc_normal<F: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::of(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

impl<F: Real> ModelWeights<F> {
    /// Truncated-normal (std 0.02) initialization; norms at identity.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, extras: Extras, rng: &mut R) -> Self {
        let (d, hd, n) = (cfg.embed_dim, cfg.hidden_dim(), cfg.seq_len());
        let std = 0.02;
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_g: Tensor::full(&[d], F::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: trunc_normal(&[d, d], std, rng),
                bq: Tensor::zeros(&[d]),
                wk: trunc_normal(&[d, d], std, rng),
                bk: Tensor::zeros(&[d]),
                wv: trunc_normal(&[d, d], std, rng),
                bv: Tensor::zeros(&[d]),
                wo: trunc_normal(&[d, d], std, rng),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], F::one()),
                ln2_b: Tensor::zeros(&[d]),
                w1: trunc_normal(&[d, hd], std, rng),
                b1: Tensor::zeros(&[hd]),
                w2: trunc_normal(&[hd, d], std, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let mut w = ModelParams {
            patch_w: trunc_normal(&[cfg.patch_dim(), d], std, rng),
            patch_b: Tensor::zeros(&[d]),
            cls_token: trunc_normal(&[1, d], std, rng),
            pos_embed: trunc_normal(&[n, d], std, rng),
            blocks,
            norm_g: Tensor::full(&[d], F::one()),
            norm_b: Tensor::zeros(&[d]),
            head_w: trunc_normal(&[d, cfg.num_classes], std, rng),
            head_b: Tensor::zeros(&[cfg.num_classes]),
            halting: None,
            decisions: None,
        };
        if extras.halting {
            w.halting = Some(HaltingParams::init_default());
        }
        if extras.decisions {
            w.decisions = Some(DecisionParams::init_all(cfg, rng));
        }
        w
    }

    /// Binds every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |_, t| g.leaf(t.clone(), trainable))
    }

    pub fn cast<G: Real>(&self) -> ModelWeights<G> {
        self.map(&mut |_, t| t.cast())
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn extras(&self) -> Extras {
        Extras { halting: self.halting.is_some(), decisions: self.decisions.is_some() }
    }
}

impl<F: Real> HaltingParams<Tensor<F>> {
    /// `h = sigmoid(gamma * z0 + beta)` starts near sigmoid(-3): little halting.
    pub fn init_default() -> Self {
        HaltingParams { gamma: Tensor::full(&[1], F::one()), beta: Tensor::full(&[1], F::of(-3.0)) }
    }
}

impl<F: Real> DecisionParams<Tensor<F>> {
    /// Small random weights with keep-biased logits so fresh heads keep
    /// everything.
    pub fn init_all<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Vec<Self> {
        let d = cfg.embed_dim;
        (0..cfg.depth)
            .map(|_| DecisionParams {
                patch_w: trunc_normal(&[d, 1], 0.02, rng),
                patch_b: Tensor::full(&[1], F::of(3.0)),
                head_w: trunc_normal(&[d, cfg.heads], 0.02, rng),
                head_b: Tensor::full(&[cfg.heads], F::of(3.0)),
                block_w: trunc_normal(&[d, 2], 0.02, rng),
                block_b: Tensor::full(&[2], F::of(3.0)),
            })
            .collect()
    }
}
