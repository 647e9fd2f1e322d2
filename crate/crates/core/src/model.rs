//! The dual-branch network.
//!
//! The SID branch looks up per-level code embeddings, weighs the L
//! granularity views with intent-conditioned fusion weights, and encodes the
//! fused sequence. The HID branch looks up unique item embeddings, injects
//! semantics through alpha-weighted cross attention over the granularity
//! views (with a residual back to the HID sequence), and encodes the result.
//! Candidate scores are the sum of the two branches' dot products.
//!
//! Both attention stacks are causal: position t never reads positions > t,
//! and pad keys are masked out entirely.

#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::quantizer::SidAssignment;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const N_LAYERS: usize = 2;
pub const N_HEADS: usize = 2;
pub const FFN_MULT: usize = 4;
pub const DROPOUT: f64 = 0.2;

pub const H2CK_MAGIC: &[u8; 4] = b"H2CK";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub n_items: usize,
    pub d: usize,
    pub levels: usize,
    pub k_codes: usize,
    pub max_len: usize,
}

impl ModelDims {
    pub fn new(n_items: usize, d: usize, levels: usize, k_codes: usize, max_len: usize) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(N_HEADS) {
            return Err(Error::Config(format!(
                "model dim {d} must be a positive multiple of {N_HEADS}"
            )));
        }
        if n_items == 0 || levels == 0 || k_codes == 0 || max_len < 2 {
            return Err(Error::Config(
                "n_items, levels, k_codes must be positive and max_len >= 2".into(),
            ));
        }
        Ok(ModelDims {
            n_items,
            d,
            levels,
            k_codes,
            max_len,
        })
    }

    pub fn pad_id(&self) -> usize {
        self.n_items
    }
}

#[derive(Clone, Debug)]
pub struct LayerOf<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln1_g: T,
    pub ln1_b: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub ln2_g: T,
    pub ln2_b: T,
}

#[derive(Clone, Debug)]
pub struct EncoderOf<T> {
    pub pos: T,
    pub layers: Vec<LayerOf<T>>,
}

/// Every learnable tensor of the model, generic over the payload so the same
/// traversal yields named tensors, graph vars, or gradient slots.
#[derive(Clone, Debug)]
pub struct ParamsOf<T> {
    pub e_hid: T,
    pub e_code: Vec<T>,
    pub fusion_w1: T,
    pub fusion_b1: T,
    pub fusion_w2: T,
    pub fusion_b2: T,
    pub b_prior: T,
    pub cross_wq: T,
    pub cross_wk: T,
    pub cross_wv: T,
    pub mask_token: T,
    pub enc_sid: EncoderOf<T>,
    pub enc_hid: EncoderOf<T>,
}

pub type ModelParams<S> = ParamsOf<Tensor<S>>;
pub type ParamVars = ParamsOf<Var>;

impl<T> LayerOf<T> {
    fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> LayerOf<U> {
        LayerOf {
            wq: f(format!("{prefix}.wq"), &self.wq),
            wk: f(format!("{prefix}.wk"), &self.wk),
            wv: f(format!("{prefix}.wv"), &self.wv),
            wo: f(format!("{prefix}.wo"), &self.wo),
            ln1_g: f(format!("{prefix}.ln1_g"), &self.ln1_g),
            ln1_b: f(format!("{prefix}.ln1_b"), &self.ln1_b),
            ffn_w1: f(format!("{prefix}.ffn_w1"), &self.ffn_w1),
            ffn_b1: f(format!("{prefix}.ffn_b1"), &self.ffn_b1),
            ffn_w2: f(format!("{prefix}.ffn_w2"), &self.ffn_w2),
            ffn_b2: f(format!("{prefix}.ffn_b2"), &self.ffn_b2),
            ln2_g: f(format!("{prefix}.ln2_g"), &self.ln2_g),
            ln2_b: f(format!("{prefix}.ln2_b"), &self.ln2_b),
        }
    }

    fn flat_mut(&mut self, prefix: &str, out: &mut Vec<(String, *mut T)>) {
        out.push((format!("{prefix}.wq"), &mut self.wq as *mut T));
        out.push((format!("{prefix}.wk"), &mut self.wk as *mut T));
        out.push((format!("{prefix}.wv"), &mut self.wv as *mut T));
        out.push((format!("{prefix}.wo"), &mut self.wo as *mut T));
        out.push((format!("{prefix}.ln1_g"), &mut self.ln1_g as *mut T));
        out.push((format!("{prefix}.ln1_b"), &mut self.ln1_b as *mut T));
        out.push((format!("{prefix}.ffn_w1"), &mut self.ffn_w1 as *mut T));
        out.push((format!("{prefix}.ffn_b1"), &mut self.ffn_b1 as *mut T));
        out.push((format!("{prefix}.ffn_w2"), &mut self.ffn_w2 as *mut T));
        out.push((format!("{prefix}.ffn_b2"), &mut self.ffn_b2 as *mut T));
        out.push((format!("{prefix}.ln2_g"), &mut self.ln2_g as *mut T));
        out.push((format!("{prefix}.ln2_b"), &mut self.ln2_b as *mut T));
    }
}

impl<T> EncoderOf<T> {
    fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> EncoderOf<U> {
        EncoderOf {
            pos: f(format!("{prefix}.pos"), &self.pos),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_named(&format!("{prefix}.layer{i}"), f))
                .collect(),
        }
    }

    fn flat_mut(&mut self, prefix: &str, out: &mut Vec<(String, *mut T)>) {
        out.push((format!("{prefix}.pos"), &mut self.pos as *mut T));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.flat_mut(&format!("{prefix}.layer{i}"), out);
        }
    }
}

impl<T> ParamsOf<T> {
    /// Canonical traversal. Field order here defines the parameter order used
    /// by the optimizer, the checkpoint format, and the gradient checker.
    pub fn map_named<U>(&self, f: &mut impl FnMut(String, &T) -> U) -> ParamsOf<U> {
        ParamsOf {
            e_hid: f("e_hid".into(), &self.e_hid),
            e_code: self
                .e_code
                .iter()
                .enumerate()
                .map(|(i, t)| f(format!("e_code.{i}"), t))
                .collect(),
            fusion_w1: f("fusion_w1".into(), &self.fusion_w1),
            fusion_b1: f("fusion_b1".into(), &self.fusion_b1),
            fusion_w2: f("fusion_w2".into(), &self.fusion_w2),
            fusion_b2: f("fusion_b2".into(), &self.fusion_b2),
            b_prior: f("b_prior".into(), &self.b_prior),
            cross_wq: f("cross_wq".into(), &self.cross_wq),
            cross_wk: f("cross_wk".into(), &self.cross_wk),
            cross_wv: f("cross_wv".into(), &self.cross_wv),
            mask_token: f("mask_token".into(), &self.mask_token),
            enc_sid: self.enc_sid.map_named("enc_sid", f),
            enc_hid: self.enc_hid.map_named("enc_hid", f),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map_named(&mut |name, t| {
            // Stash raw pointers to keep the borrow checker out of the
            // closure; lifetimes are tied to &self.
            out.push((name, t as *const T));
        });
        out.into_iter()
            .map(|(n, p)| (n, unsafe { &*p }))
            .collect()
    }

    /// Mutable references in the same canonical order as `named`.
    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut raw = Vec::new();
        raw.push(("e_hid".to_string(), &mut self.e_hid as *mut T));
        for (i, t) in self.e_code.iter_mut().enumerate() {
            raw.push((format!("e_code.{i}"), t as *mut T));
        }
        raw.push(("fusion_w1".into(), &mut self.fusion_w1 as *mut T));
        raw.push(("fusion_b1".into(), &mut self.fusion_b1 as *mut T));
        raw.push(("fusion_w2".into(), &mut self.fusion_w2 as *mut T));
        raw.push(("fusion_b2".into(), &mut self.fusion_b2 as *mut T));
        raw.push(("b_prior".into(), &mut self.b_prior as *mut T));
        raw.push(("cross_wq".into(), &mut self.cross_wq as *mut T));
        raw.push(("cross_wk".into(), &mut self.cross_wk as *mut T));
        raw.push(("cross_wv".into(), &mut self.cross_wv as *mut T));
        raw.push(("mask_token".into(), &mut self.mask_token as *mut T));
        self.enc_sid.flat_mut("enc_sid", &mut raw);
        self.enc_hid.flat_mut("enc_hid", &mut raw);
        raw.into_iter()
            .map(|(n, p)| (n, unsafe { &mut *p }))
            .collect()
    }
}

fn random_encoder<S: Scalar>(dims: &ModelDims, rng: &mut Rng) -> EncoderOf<Tensor<S>> {
    let d = dims.d;
    let scale = 1.0 / (d as f64).sqrt();
    let layers = (0..N_LAYERS)
        .map(|_| LayerOf {
            wq: Tensor::randn(&[d, d], scale, rng),
            wk: Tensor::randn(&[d, d], scale, rng),
            wv: Tensor::randn(&[d, d], scale, rng),
            wo: Tensor::randn(&[d, d], scale, rng),
            ln1_g: Tensor::full(&[d], S::ONE),
            ln1_b: Tensor::zeros(&[d]),
            ffn_w1: Tensor::randn(&[d, FFN_MULT * d], scale, rng),
            ffn_b1: Tensor::zeros(&[FFN_MULT * d]),
            ffn_w2: Tensor::randn(&[FFN_MULT * d, d], 1.0 / ((FFN_MULT * d) as f64).sqrt(), rng),
            ffn_b2: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], S::ONE),
            ln2_b: Tensor::zeros(&[d]),
        })
        .collect();
    EncoderOf {
        pos: Tensor::randn(&[dims.max_len, d], scale, rng),
        layers,
    }
}

/// Prior bias over granularities: linearly descending from +0.5 at the
/// coarsest level to -0.5 at the finest.
pub fn default_b_prior<S: Scalar>(levels: usize) -> Tensor<S> {
    let vals: Vec<S> = (0..levels)
        .map(|l| {
            if levels == 1 {
                S::ZERO
            } else {
                S::from_f64(0.5 - l as f64 / (levels - 1) as f64)
            }
        })
        .collect();
    Tensor::from_vec(&[levels], vals)
}

impl<S: Scalar> ModelParams<S> {
    /// Small-random initialization (embedding tables included). The pad row
    /// of `e_hid` is zero.
    pub fn random(dims: &ModelDims, rng: &mut Rng) -> Self {
        let d = dims.d;
        let l = dims.levels;
        let scale = 1.0 / (d as f64).sqrt();
        let mut e_hid = Tensor::randn(&[dims.n_items + 1, d], scale, rng);
        let pad = dims.n_items;
        for v in e_hid.data_mut()[pad * d..(pad + 1) * d].iter_mut() {
            *v = S::ZERO;
        }
        ModelParams {
            e_hid,
            e_code: (0..l)
                .map(|_| Tensor::randn(&[dims.k_codes, d], scale, rng))
                .collect(),
            fusion_w1: Tensor::randn(&[d + l, d], 1.0 / ((d + l) as f64).sqrt(), rng),
            fusion_b1: Tensor::zeros(&[d]),
            fusion_w2: Tensor::randn(&[d, l], scale, rng),
            fusion_b2: Tensor::zeros(&[l]),
            b_prior: default_b_prior(l),
            cross_wq: Tensor::randn(&[d, d], scale, rng),
            cross_wk: Tensor::randn(&[d, d], scale, rng),
            cross_wv: Tensor::randn(&[d, d], scale, rng),
            mask_token: Tensor::randn(&[d], scale, rng),
            enc_sid: random_encoder(dims, rng),
            enc_hid: random_encoder(dims, rng),
        }
    }

    pub fn zeros(dims: &ModelDims) -> Self {
        let mut rng = Rng::new(0);
        let mut p = Self::random(dims, &mut rng);
        for (_, t) in p.named_mut() {
            for v in t.data_mut() {
                *v = S::ZERO;
            }
        }
        p
    }

    pub fn dims(&self) -> ModelDims {
        let d = self.mask_token.shape()[0];
        ModelDims {
            n_items: self.e_hid.shape()[0] - 1,
            d,
            levels: self.e_code.len(),
            k_codes: self.e_code[0].shape()[0],
            max_len: self.enc_sid.pos.shape()[0],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<T2: Scalar>(&self) -> ModelParams<T2> {
        self.map_named(&mut |_, t| t.cast::<T2>())
    }
}

/// Register every parameter as a graph input, preserving canonical order.
pub fn to_vars<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>) -> ParamVars {
    params.map_named(&mut |_, t| g.input(t.clone()))
}

/// Ablation switches. `no_fn` fixes alpha to uniform; `no_mca` bypasses cross
/// attention; `hid_only` / `sid_only` restrict scoring to one branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_fn: bool,
    pub no_mca: bool,
    pub no_ca: bool,
    pub no_msg: bool,
    pub hid_only: bool,
    pub sid_only: bool,
}

/// One padded batch as the model sees it.
#[derive(Clone, Copy)]
pub struct BatchView<'a> {
    pub b: usize,
    pub t: usize,
    /// [B, T], pad = n_items.
    pub seqs: &'a [ItemId],
    /// [B, T].
    pub pad_mask: &'a [bool],
    /// [B].
    pub last_pos: &'a [usize],
}

impl BatchView<'_> {
    fn valid_f<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            &[self.b * self.t],
            self.pad_mask
                .iter()
                .map(|&m| if m { S::ONE } else { S::ZERO })
                .collect(),
        )
    }

    /// allowed[b,q,k] = causal and k is a real item.
    fn causal_pad_mask(&self) -> Arc<Vec<bool>> {
        let (b, t) = (self.b, self.t);
        let mut m = vec![false; b * t * t];
        for bi in 0..b {
            for q in 0..t {
                for k in 0..=q {
                    m[(bi * t + q) * t + k] = self.pad_mask[bi * t + k];
                }
            }
        }
        Arc::new(m)
    }
}

pub struct ForwardOutput {
    /// [B, L] fusion weights (uniform when the fusion network is ablated).
    pub alpha: Var,
    /// Fused SID embedding sequence [B, T, d], present when the SID branch ran.
    pub sid_seq: Option<Var>,
    /// HID-branch encoder input after cross attention [B, T, d].
    pub fused_seq: Option<Var>,
    pub sid_hidden: Option<Var>,
    pub hid_hidden: Option<Var>,
    pub u_sid: Option<Var>,
    pub u_hid: Option<Var>,
    pub u_sid_masked: Option<Var>,
}

/// Training-time extras for the forward pass.
pub struct TrainMode<'a> {
    pub dropout: f64,
    pub rng: &'a mut Rng,
    /// Granularity level to mask for the second SID view (0-based).
    pub msg_level: Option<usize>,
}

/// Per-level code-embedding lookup for the batch items; pad positions are
/// zero at every level.
pub fn granularity_sequences<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    view: &BatchView<'_>,
    sids: &SidAssignment,
    valid_f: Var,
) -> Vec<Var> {
    let (b, t) = (view.b, view.t);
    let d = g.val(pv.e_code[0]).shape()[1];
    let levels = pv.e_code.len();
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let idx: Vec<usize> = view
            .seqs
            .iter()
            .zip(view.pad_mask)
            .map(|(&it, &valid)| {
                if valid {
                    sids.code(it as usize, l) as usize
                } else {
                    0
                }
            })
            .collect();
        let rows = g.gather_rows(pv.e_code[l], Arc::new(idx));
        let seq = g.reshape(rows, &[b, t, d]);
        // Zero out pad positions.
        out.push(g.scale_blocks(seq, valid_f));
    }
    out
}

/// Importance scores and softmax weights from the last valid item's HID
/// embedding concatenated with the prior bias.
pub fn fusion_weights<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    view: &BatchView<'_>,
) -> (Var, Var) {
    let b = view.b;
    let last_ids: Vec<usize> = (0..b)
        .map(|bi| view.seqs[bi * view.t + view.last_pos[bi]] as usize)
        .collect();
    let e_last = g.gather_rows(pv.e_hid, Arc::new(last_ids));
    let bp = g.broadcast_rows(pv.b_prior, b);
    let cat = g.concat_last(e_last, bp);
    let h = g.matmul(cat, pv.fusion_w1);
    let h = g.add_bias(h, pv.fusion_b1);
    let h = g.tanh(h);
    let s = g.matmul(h, pv.fusion_w2);
    let s = g.add_bias(s, pv.fusion_b2);
    let bp2 = g.broadcast_rows(pv.b_prior, b);
    let s = g.add(s, bp2);
    let alpha = g.softmax_masked(s, None);
    (s, alpha)
}

/// Convex combination of the granularity sequences with per-sequence weights.
pub fn fuse_sid_sequence<S: Scalar>(g: &mut Graph<S>, gran: &[Var], alpha: Var) -> Var {
    let mut acc: Option<Var> = None;
    for (l, &seq) in gran.iter().enumerate() {
        let w = g.col(alpha, l);
        let scaled = g.scale_blocks(seq, w);
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled),
        });
    }
    acc.expect("at least one granularity level")
}

/// Replace level `m` with the broadcast mask token at valid positions.
pub fn masked_view<S: Scalar>(
    g: &mut Graph<S>,
    gran: &[Var],
    m: usize,
    pv: &ParamVars,
    view: &BatchView<'_>,
    valid_f: Var,
) -> Vec<Var> {
    assert!(m < gran.len(), "mask level out of range");
    let (b, t) = (view.b, view.t);
    let d = g.val(pv.mask_token).shape()[0];
    let mt = g.broadcast_rows(pv.mask_token, b * t);
    let mt = g.reshape(mt, &[b, t, d]);
    let mt = g.scale_blocks(mt, valid_f);
    gran.iter()
        .enumerate()
        .map(|(l, &seq)| if l == m { mt } else { seq })
        .collect()
}

/// Alpha-weighted single-head cross attention from the HID sequence into each
/// granularity view, plus a residual back to the HID sequence. Causal: query
/// t attends keys <= t only.
pub fn cross_attention<S: Scalar>(
    g: &mut Graph<S>,
    e_hid_seq: Var,
    gran: &[Var],
    alpha: Var,
    pv: &ParamVars,
    view: &BatchView<'_>,
) -> Var {
    let d = g.val(pv.cross_wq).shape()[0];
    let (b, t) = (view.b, view.t);
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let mask = view.causal_pad_mask();
    let q = g.matmul(e_hid_seq, pv.cross_wq);
    let q = g.reshape(q, &[b, t, d]);
    let mut acc: Option<Var> = None;
    for (l, &seq) in gran.iter().enumerate() {
        let k = g.matmul(seq, pv.cross_wk);
        let k = g.reshape(k, &[b, t, d]);
        let v = g.matmul(seq, pv.cross_wv);
        let v = g.reshape(v, &[b, t, d]);
        let logits = g.bmm(q, k, false, true);
        let logits = g.scale(logits, scale);
        let attn = g.softmax_masked(logits, Some(mask.clone()));
        let ctx = g.bmm(attn, v, false, false);
        let w = g.col(alpha, l);
        let weighted = g.scale_blocks(ctx, w);
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted),
        });
    }
    g.add(acc.expect("at least one level"), e_hid_seq)
}

fn maybe_dropout<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    dropout: f64,
    rng: &mut Option<&mut TrainMode<'_>>,
) -> Var {
    if dropout <= 0.0 {
        return x;
    }
    let Some(mode) = rng else { return x };
    let n = g.val(x).numel();
    let keep_prob = 1.0 - dropout;
    let keep: Vec<bool> = (0..n).map(|_| mode.rng.uniform() >= dropout).collect();
    g.dropout(x, Arc::new(keep), keep_prob)
}

/// Causal multi-head self-attention encoder. Returns the full hidden sequence
/// and the representation at each row's last valid position.
pub fn encode_sequence<S: Scalar>(
    g: &mut Graph<S>,
    enc: &EncoderOf<Var>,
    seq: Var,
    view: &BatchView<'_>,
    valid_f: Var,
    mode: &mut Option<&mut TrainMode<'_>>,
) -> (Var, Var) {
    let (b, t) = (view.b, view.t);
    let d = g.val(seq).last_dim();
    let dh = d / N_HEADS;
    let mask = view.causal_pad_mask();
    let dropout = mode.as_ref().map_or(0.0, |m| m.dropout);

    // Learned positional embeddings, broadcast over the batch; pad positions
    // are then re-zeroed.
    let pos_flat = g.reshape(enc.pos, &[t * d]);
    let pos_b = g.broadcast_rows(pos_flat, b);
    let pos_b = g.reshape(pos_b, &[b, t, d]);
    let mut x = g.add(seq, pos_b);
    x = g.scale_blocks(x, valid_f);

    for layer in &enc.layers {
        let q = g.matmul(x, layer.wq);
        let k = g.matmul(x, layer.wk);
        let v = g.matmul(x, layer.wv);
        let q = g.reshape(q, &[b, t, d]);
        let k = g.reshape(k, &[b, t, d]);
        let v = g.reshape(v, &[b, t, d]);
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(N_HEADS);
        for h in 0..N_HEADS {
            let qh = g.slice_last(q, h * dh, dh);
            let kh = g.slice_last(k, h * dh, dh);
            let vh = g.slice_last(v, h * dh, dh);
            let logits = g.bmm(qh, kh, false, true);
            let logits = g.scale(logits, scale);
            let attn = g.softmax_masked(logits, Some(mask.clone()));
            heads.push(g.bmm(attn, vh, false, false));
        }
        let mut ctx = heads[0];
        for &h in &heads[1..] {
            ctx = g.concat_last(ctx, h);
        }
        let ctx = g.matmul(ctx, layer.wo);
        let ctx = maybe_dropout(g, ctx, dropout, mode);
        let res = g.add(x, ctx);
        x = g.layer_norm(res, layer.ln1_g, layer.ln1_b);

        let f = g.matmul(x, layer.ffn_w1);
        let f = g.add_bias(f, layer.ffn_b1);
        let f = g.gelu(f);
        let f = g.matmul(f, layer.ffn_w2);
        let f = g.add_bias(f, layer.ffn_b2);
        let f = maybe_dropout(g, f, dropout, mode);
        let res = g.add(x, f);
        x = g.layer_norm(res, layer.ln2_g, layer.ln2_b);
    }
    let u = g.gather_time(x, Arc::new(view.last_pos.to_vec()));
    (x, u)
}

/// Full dual-branch forward for one batch.
pub fn forward_batch<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    dims: &ModelDims,
    view: &BatchView<'_>,
    sids: &SidAssignment,
    flags: &AblationFlags,
    mut mode: Option<&mut TrainMode<'_>>,
) -> ForwardOutput {
    let (b, t) = (view.b, view.t);
    let d = dims.d;
    let valid_f = g.input(view.valid_f::<S>());

    let need_sid_branch = !flags.hid_only || !flags.no_msg;
    let need_hid_branch = !flags.sid_only;
    let need_gran = need_sid_branch || !flags.no_mca;

    // HID embedding sequence (also drives fusion weights).
    let idx_seq: Vec<usize> = view.seqs.iter().map(|&x| x as usize).collect();
    let e_hid_rows = g.gather_rows(pv.e_hid, Arc::new(idx_seq));
    let e_hid_seq = g.reshape(e_hid_rows, &[b, t, d]);
    let e_hid_seq = g.scale_blocks(e_hid_seq, valid_f);

    let alpha = if flags.no_fn {
        let uniform = S::from_f64(1.0 / dims.levels as f64);
        g.input(Tensor::full(&[b, dims.levels], uniform))
    } else {
        fusion_weights(g, pv, view).1
    };

    let gran = if need_gran {
        granularity_sequences(g, pv, view, sids, valid_f)
    } else {
        Vec::new()
    };

    let (sid_seq, sid_hidden, u_sid, u_sid_masked) = if need_sid_branch {
        let fused = fuse_sid_sequence(g, &gran, alpha);
        let (hidden, u) = encode_sequence(g, &pv.enc_sid, fused, view, valid_f, &mut mode);
        let masked = match mode.as_ref().and_then(|m| m.msg_level) {
            Some(m) if !flags.no_msg => {
                let mgran = masked_view(g, &gran, m, pv, view, valid_f);
                let mfused = fuse_sid_sequence(g, &mgran, alpha);
                let (_, mu) = encode_sequence(g, &pv.enc_sid, mfused, view, valid_f, &mut mode);
                Some(mu)
            }
            _ => None,
        };
        (Some(fused), Some(hidden), Some(u), masked)
    } else {
        (None, None, None, None)
    };

    let (fused_seq, hid_hidden, u_hid) = if need_hid_branch {
        let fused = if flags.no_mca {
            e_hid_seq
        } else {
            cross_attention(g, e_hid_seq, &gran, alpha, pv, view)
        };
        let (hidden, u) = encode_sequence(g, &pv.enc_hid, fused, view, valid_f, &mut mode);
        (Some(fused), Some(hidden), Some(u))
    } else {
        (None, None, None)
    };

    ForwardOutput {
        alpha,
        sid_seq,
        fused_seq,
        sid_hidden,
        hid_hidden,
        u_sid,
        u_hid,
        u_sid_masked,
    }
}

/// Candidate SID embedding: sum over levels of alpha_l * E_C^l[c^l], one row
/// per id. `ids` has logical shape `lead_shape`; the result appends d.
pub fn candidate_sid_embed<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    alpha: Var,
    ids: &[ItemId],
    lead_shape: &[usize],
    sids: &SidAssignment,
    pad_id: usize,
) -> Var {
    let d = g.val(pv.e_code[0]).shape()[1];
    let mut full_shape = lead_shape.to_vec();
    full_shape.push(d);
    let mut acc: Option<Var> = None;
    for l in 0..pv.e_code.len() {
        let idx: Vec<usize> = ids
            .iter()
            .map(|&it| {
                if (it as usize) == pad_id {
                    0
                } else {
                    sids.code(it as usize, l) as usize
                }
            })
            .collect();
        let rows = g.gather_rows(pv.e_code[l], Arc::new(idx));
        let rows = g.reshape(rows, &full_shape);
        let w = g.col(alpha, l);
        let scaled = g.scale_blocks(rows, w);
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled),
        });
    }
    acc.expect("at least one level")
}

/// Positive/negative scores for every position (targets [B,T], negatives
/// [B,T,K]): dot(e_sid, u_sid) + dot(e_hid, u_hid) subject to branch flags.
#[allow(clippy::too_many_arguments)]
pub fn training_scores<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    out: &ForwardOutput,
    dims: &ModelDims,
    view: &BatchView<'_>,
    targets: &[ItemId],
    negatives: &[ItemId],
    n_neg: usize,
    sids: &SidAssignment,
    flags: &AblationFlags,
) -> (Var, Var) {
    let (b, t) = (view.b, view.t);
    let d = dims.d;
    let mut pos: Option<Var> = None;
    let mut neg: Option<Var> = None;

    if !flags.sid_only {
        let hid_hidden = out.hid_hidden.expect("hid branch required");
        let tgt_idx: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
        let e_tgt = g.gather_rows(pv.e_hid, Arc::new(tgt_idx));
        let e_tgt = g.reshape(e_tgt, &[b, t, d]);
        let s_pos = g.rows_dot(hid_hidden, e_tgt);
        let neg_idx: Vec<usize> = negatives.iter().map(|&x| x as usize).collect();
        let e_neg = g.gather_rows(pv.e_hid, Arc::new(neg_idx));
        let e_neg = g.reshape(e_neg, &[b, t, n_neg, d]);
        let s_neg = g.rows_dot_bcast(hid_hidden, e_neg);
        pos = Some(s_pos);
        neg = Some(s_neg);
    }
    if !flags.hid_only {
        let sid_hidden = out.sid_hidden.expect("sid branch required");
        let e_tgt = candidate_sid_embed(g, pv, out.alpha, targets, &[b, t], sids, dims.pad_id());
        let s_pos = g.rows_dot(sid_hidden, e_tgt);
        let e_neg =
            candidate_sid_embed(g, pv, out.alpha, negatives, &[b, t, n_neg], sids, dims.pad_id());
        let s_neg = g.rows_dot_bcast(sid_hidden, e_neg);
        pos = Some(match pos {
            None => s_pos,
            Some(p) => g.add(p, s_pos),
        });
        neg = Some(match neg {
            None => s_neg,
            Some(x) => g.add(x, s_neg),
        });
    }
    (pos.expect("at least one branch"), neg.expect("at least one branch"))
}

/// Inference-side candidate scoring with plain arithmetic (no graph).
/// alpha/u vectors come from a prior forward pass.
#[allow(clippy::too_many_arguments)]
pub fn score_candidates(
    params: &ModelParams<f32>,
    sids: &SidAssignment,
    alpha: &[f32],
    u_sid: Option<&[f32]>,
    u_hid: Option<&[f32]>,
    candidates: &[ItemId],
) -> Result<Vec<f32>> {
    let dims = params.dims();
    let d = dims.d;
    let mut out = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let ci = c as usize;
        if ci >= dims.n_items {
            return Err(Error::InvalidArg(format!(
                "candidate {ci} out of catalog (pad id is not scoreable)"
            )));
        }
        let mut score = 0.0f64;
        if let Some(uh) = u_hid {
            let row = &params.e_hid.data()[ci * d..(ci + 1) * d];
            score += row
                .iter()
                .zip(uh)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
        }
        if let Some(us) = u_sid {
            for l in 0..dims.levels {
                let code = sids.code(ci, l) as usize;
                let row = &params.e_code[l].data()[code * d..(code + 1) * d];
                let al = alpha[l] as f64;
                score += al
                    * row
                        .iter()
                        .zip(us)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>();
            }
        }
        out.push(score as f32);
    }
    Ok(out)
}

// ---- checkpoint io ----

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated field: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor_section(
    w: &mut impl Write,
    name: &str,
    t: &Tensor<f32>,
) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape().len() as u32)?;
    for &dim in t.shape() {
        write_u32(w, dim as u32)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_section(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let name_len = read_u32(r)? as usize;
    if name_len == 0 || name_len > 4096 {
        return Err(Error::Format(format!("bad tensor name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("name not utf-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("bad tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let dim = read_u32(r)? as usize;
        numel = numel
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        shape.push(dim);
    }
    if numel > (1 << 28) {
        return Err(Error::Format(format!("tensor too large: {numel} values")));
    }
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor::from_vec(&shape, data)))
}

/// H2CK layout: magic, u32 version, dims (n_items, d, levels, k, max_len),
/// u32 tensor count, then named tensor sections.
pub fn write_params(params: &ModelParams<f32>, mut w: impl Write) -> std::io::Result<()> {
    let dims = params.dims();
    w.write_all(H2CK_MAGIC)?;
    write_u32(&mut w, 1)?;
    for v in [dims.n_items, dims.d, dims.levels, dims.k_codes, dims.max_len] {
        write_u32(&mut w, v as u32)?;
    }
    let named = params.named();
    write_u32(&mut w, named.len() as u32)?;
    for (name, t) in named {
        write_tensor_section(&mut w, &name, t)?;
    }
    Ok(())
}

pub fn read_params(mut r: impl Read) -> Result<ModelParams<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &magic != H2CK_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected H2CK",
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n_items = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let levels = read_u32(&mut r)? as usize;
    let k_codes = read_u32(&mut r)? as usize;
    let max_len = read_u32(&mut r)? as usize;
    let dims = ModelDims::new(n_items, d, levels, k_codes, max_len)?;
    let count = read_u32(&mut r)? as usize;
    if count > 100_000 {
        return Err(Error::Format(format!("implausible tensor count {count}")));
    }
    let mut by_name: HashMap<String, Tensor<f32>> = HashMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor_section(&mut r)?;
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }
    let mut params = ModelParams::<f32>::zeros(&dims);
    for (name, slot) in params.named_mut() {
        let t = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::Format(format!("tensor '{name}' contains NaN/Inf")));
        }
        *slot = t;
    }
    if !by_name.is_empty() {
        let extra: Vec<_> = by_name.keys().cloned().collect();
        return Err(Error::Format(format!("unexpected tensors: {extra:?}")));
    }
    Ok(params)
}

pub fn save_params(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_params(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(BufReader::new(f))
}
