//! Forward evaluation of the encoder graph, with optional simulated
//! quantization at every registered slot, plus the reverse pass used by the
//! gradient-based step-size refinement.
//!
//! The forward code is written once; full-precision mode simply skips the
//! quantizer at each slot. In quantized mode a slot with calibrated
//! parameters applies fake quantization (quantize, clamp, dequantize); a
//! disabled slot passes through; an enabled slot without parameters is an
//! error, so a half-calibrated model cannot silently masquerade as working.

use crate::error::{Error, Result};
use crate::model::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, ModelGraph,
};
use crate::quantizer::{self, QuantParams};
use crate::slot::{self, SlotClass};
use crate::tensor::{self, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Full precision; every quant node is ignored.
    Fp,
    /// Simulated quantization at every enabled node.
    Quant,
}

/// Clamp applied to one activation class during a full-precision run,
/// used by the clip-impact diagnostic to measure how much network output
/// actually depends on the largest activations.
#[derive(Debug, Clone, Copy)]
pub struct HardClip {
    pub class: SlotClass,
    /// Activations are clamped to `[-value, value]`.
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub mode: RunMode,
    /// Capture the tensor arriving at every activation slot (before any
    /// quantization), keyed by slot name.
    pub capture_slots: bool,
    /// Only meaningful in `Fp` mode.
    pub hard_clip: Option<HardClip>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: RunMode::Fp,
            capture_slots: false,
            hard_clip: None,
        }
    }
}

impl ForwardOptions {
    pub fn fp() -> Self {
        Self::default()
    }

    pub fn quant() -> Self {
        ForwardOptions {
            mode: RunMode::Quant,
            ..Self::default()
        }
    }
}

/// Count of tokens touched by a [`HardClip`], one entry per occurrence of
/// the clipped slot class in graph order.
#[derive(Debug, Clone, Default)]
pub struct ClipTally {
    /// (tokens with at least one clamped element, total tokens).
    pub per_slot: Vec<(usize, usize)>,
}

#[derive(Debug)]
pub struct ForwardResult {
    /// Final hidden state `[batch, seq, hidden]` after the last block's
    /// ffn_ln slot (quantized in `Quant` mode). This is the tensor the
    /// calibration loss compares.
    pub hidden: Tensor,
    /// One logit per sequence from the mean-pooled classification head.
    pub logits: Vec<f64>,
    pub captures: BTreeMap<String, Tensor>,
    pub clip_tally: Option<ClipTally>,
}

/// Everything the reverse pass needs, recorded per block. Tensors named
/// `*_pre` are the values arriving at a quant slot; the unsuffixed twin is
/// the value leaving it.
pub(crate) struct BlockTape {
    pub q_pre: Tensor,
    pub k_pre: Tensor,
    pub v_pre: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub probs_pre: Tensor,
    pub probs: Tensor,
    pub ctx_pre: Tensor,
    pub r1: Tensor,
    pub ln1_raw: Tensor,
    pub h_pre: Tensor,
    pub g_pre: Tensor,
    pub r2: Tensor,
    pub ln2_raw: Tensor,
}

pub(crate) struct Tape {
    pub emb_pre: Tensor,
    pub blocks: Vec<BlockTape>,
}

/// Quantized view of a parameter tensor: fake-quantize when the slot is
/// enabled and calibrated, raw otherwise.
fn effective_weight(model: &ModelGraph, name: &str, raw: &Tensor, mode: RunMode) -> Result<Tensor> {
    if mode == RunMode::Fp {
        return Ok(raw.clone());
    }
    let node = model.node(name)?;
    if !node.enabled {
        return Ok(raw.clone());
    }
    match &node.params {
        Some(p) => quantizer::fake_quant(raw, p),
        None => Err(Error::MissingParams(name.to_string())),
    }
}

struct SlotCtx<'a> {
    model: &'a ModelGraph,
    opts: &'a ForwardOptions,
    captures: BTreeMap<String, Tensor>,
    tally: ClipTally,
}

impl<'a> SlotCtx<'a> {
    fn apply(&mut self, name: &str, class: SlotClass, x: Tensor) -> Result<Tensor> {
        if self.opts.capture_slots {
            self.captures.insert(name.to_string(), x.clone());
        }
        match self.opts.mode {
            RunMode::Fp => {
                if let Some(hc) = &self.opts.hard_clip {
                    if hc.class == class {
                        return Ok(self.clamp_counting(x, hc.value));
                    }
                }
                Ok(x)
            }
            RunMode::Quant => {
                let node = self.model.node(name)?;
                if !node.enabled {
                    return Ok(x);
                }
                match &node.params {
                    Some(p) => quantizer::fake_quant(&x, p),
                    None => Err(Error::MissingParams(name.to_string())),
                }
            }
        }
    }

    fn clamp_counting(&mut self, mut x: Tensor, c: f64) -> Tensor {
        let rows = x.rows();
        let mut clipped_rows = 0usize;
        for r in 0..rows {
            let mut touched = false;
            for v in x.row_mut(r) {
                if *v > c {
                    *v = c;
                    touched = true;
                } else if *v < -c {
                    *v = -c;
                    touched = true;
                }
            }
            if touched {
                clipped_rows += 1;
            }
        }
        self.tally.per_slot.push((clipped_rows, rows));
        x
    }
}

fn check_batch(model: &ModelGraph, batch: &[Vec<u32>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::config("forward called with an empty batch"));
    }
    for seq in batch {
        if seq.len() != model.meta.seq_len {
            return Err(Error::shape(
                "input sequence",
                model.meta.seq_len.to_string(),
                seq.len().to_string(),
            ));
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= model.meta.vocab) {
            return Err(Error::format(format!(
                "token id {id} out of range for vocab {}",
                model.meta.vocab
            )));
        }
    }
    Ok(())
}

fn embed(model: &ModelGraph, batch: &[Vec<u32>], mode: RunMode) -> Result<Tensor> {
    let n = model.meta.hidden;
    let t = model.meta.seq_len;
    let tok = effective_weight(model, &slot::token_embedding(), &model.tok_embedding, mode)?;
    let pos = effective_weight(model, &slot::position_embedding(), &model.pos_embedding, mode)?;
    let mut x = Tensor::zeros(vec![batch.len(), t, n]);
    for (b, seq) in batch.iter().enumerate() {
        for (ti, &id) in seq.iter().enumerate() {
            let dst = x.row_mut(b * t + ti);
            let trow = tok.row(id as usize);
            let prow = pos.row(ti);
            for j in 0..n {
                dst[j] = trow[j] + prow[j];
            }
        }
    }
    Ok(x)
}

/// `scores[b,h,i,j] = q_i . k_j / sqrt(dh)` then row softmax.
pub(crate) fn attention_scores(q: &Tensor, k: &Tensor, bsz: usize, t: usize, heads: usize) -> Tensor {
    let n = q.last_dim();
    let dh = n / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut scores = Tensor::zeros(vec![bsz, heads, t, t]);
    for b in 0..bsz {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qrow = &q.row(b * t + i)[off..off + dh];
                let srow = scores.row_mut((b * heads + h) * t + i);
                for j in 0..t {
                    let krow = &k.row(b * t + j)[off..off + dh];
                    srow[j] = tensor::dot(qrow, krow) * inv;
                }
            }
        }
    }
    scores
}

fn softmax_rows(x: &mut Tensor) {
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `ctx[b,i,off+d] = sum_j probs[b,h,i,j] * v[b,j,off+d]`.
pub(crate) fn attention_context(probs: &Tensor, v: &Tensor, bsz: usize, t: usize, heads: usize) -> Tensor {
    let n = v.last_dim();
    let dh = n / heads;
    let mut ctx = Tensor::zeros(vec![bsz, t, n]);
    for b in 0..bsz {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let prow = probs.row((b * heads + h) * t + i);
                let crow = ctx.row_mut(b * t + i);
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &v.row(b * t + j)[off..off + dh];
                    tensor::axpy(p, vrow, &mut crow[off..off + dh]);
                }
            }
        }
    }
    ctx
}

fn residual_add(main: &Tensor, shortcut: &Tensor, gamma: &Option<Vec<f64>>) -> Tensor {
    let mut out = main.clone();
    let n = out.last_dim();
    match gamma {
        None => {
            for (o, s) in out.data_mut().iter_mut().zip(shortcut.data()) {
                *o += s;
            }
        }
        Some(g) => {
            for (i, (o, s)) in out.data_mut().iter_mut().zip(shortcut.data()).enumerate() {
                *o += s * g[i % n];
            }
        }
    }
    out
}

/// Run the model on a batch of token-id sequences.
pub fn forward(model: &ModelGraph, batch: &[Vec<u32>], opts: &ForwardOptions) -> Result<ForwardResult> {
    let (result, _) = forward_inner(model, batch, opts, false)?;
    Ok(result)
}

/// Quantized forward that also records the tape for the reverse pass.
pub(crate) fn forward_with_tape(
    model: &ModelGraph,
    batch: &[Vec<u32>],
) -> Result<(ForwardResult, Tape)> {
    let (result, tape) = forward_inner(model, batch, &ForwardOptions::quant(), true)?;
    Ok((result, tape.expect("tape requested")))
}

fn forward_inner(
    model: &ModelGraph,
    batch: &[Vec<u32>],
    opts: &ForwardOptions,
    record: bool,
) -> Result<(ForwardResult, Option<Tape>)> {
    check_batch(model, batch)?;
    let meta = &model.meta;
    let (bsz, t, heads) = (batch.len(), meta.seq_len, meta.heads);
    let mode = opts.mode;
    let mut ctx_state = SlotCtx {
        model,
        opts,
        captures: BTreeMap::new(),
        tally: ClipTally::default(),
    };
    let mut tape_blocks = Vec::new();

    let emb_pre = embed(model, batch, mode)?;
    let mut x = ctx_state.apply(
        &slot::input_embedding(),
        SlotClass::InputEmbedding,
        emb_pre.clone(),
    )?;
    let emb_pre_rec = if record { emb_pre } else { Tensor::zeros(vec![1]) };

    for (bi, block) in model.blocks.iter().enumerate() {
        let name = |class: SlotClass| slot::activation(class, bi);
        let wq = effective_weight(model, &slot::block_weight(bi, "wq"), &block.wq.weight, mode)?;
        let wk = effective_weight(model, &slot::block_weight(bi, "wk"), &block.wk.weight, mode)?;
        let wv = effective_weight(model, &slot::block_weight(bi, "wv"), &block.wv.weight, mode)?;
        let wo = effective_weight(model, &slot::block_weight(bi, "wo"), &block.wo.weight, mode)?;
        let w1 = effective_weight(model, &slot::block_weight(bi, "w1"), &block.w1.weight, mode)?;
        let w2 = effective_weight(model, &slot::block_weight(bi, "w2"), &block.w2.weight, mode)?;

        let q_pre = tensor::linear(&x, &wq, &block.wq.bias);
        let k_pre = tensor::linear(&x, &wk, &block.wk.bias);
        let v_pre = tensor::linear(&x, &wv, &block.wv.bias);
        let q = ctx_state.apply(&name(SlotClass::Query), SlotClass::Query, q_pre.clone())?;
        let k = ctx_state.apply(&name(SlotClass::Key), SlotClass::Key, k_pre.clone())?;
        let v = ctx_state.apply(&name(SlotClass::Value), SlotClass::Value, v_pre.clone())?;

        let mut probs_pre = attention_scores(&q, &k, bsz, t, heads);
        softmax_rows(&mut probs_pre);
        let probs =
            ctx_state.apply(&name(SlotClass::AttnProbs), SlotClass::AttnProbs, probs_pre.clone())?;

        let ctx_pre = attention_context(&probs, &v, bsz, t, heads);
        let ctx = ctx_state.apply(&name(SlotClass::Context), SlotClass::Context, ctx_pre.clone())?;

        let attn_out = tensor::linear(&ctx, &wo, &block.wo.bias);
        let r1 = residual_add(&attn_out, &x, &block.resid1_gamma);
        let ln1_raw = layer_norm(&r1, &block.mha_ln, meta.ln_eps, meta.ln_mode);
        let ln1 = ctx_state.apply(&name(SlotClass::MhaLn), SlotClass::MhaLn, ln1_raw.clone())?;

        let h_pre = tensor::linear(&ln1, &w1, &block.w1.bias);
        let g_pre = gelu(&h_pre);
        let g = ctx_state.apply(&name(SlotClass::Gelu), SlotClass::Gelu, g_pre.clone())?;
        let ffn_out = tensor::linear(&g, &w2, &block.w2.bias);
        let r2 = residual_add(&ffn_out, &ln1, &block.resid2_gamma);
        let ln2_raw = layer_norm(&r2, &block.ffn_ln, meta.ln_eps, meta.ln_mode);
        let ln2 = ctx_state.apply(&name(SlotClass::FfnLn), SlotClass::FfnLn, ln2_raw.clone())?;

        if record {
            tape_blocks.push(BlockTape {
                q_pre,
                k_pre,
                v_pre,
                q,
                k,
                v,
                probs_pre,
                probs,
                ctx_pre,
                r1,
                ln1_raw,
                h_pre,
                g_pre,
                r2,
                ln2_raw,
            });
        }
        x = ln2;
    }

    if !x.is_finite() {
        return Err(Error::numerical(
            "forward pass produced a non-finite hidden state",
        ));
    }

    let head_w = effective_weight(model, &slot::head_weight(), &model.head.weight, mode)?;
    let n = meta.hidden;
    let mut logits = Vec::with_capacity(bsz);
    let mut pooled = vec![0.0; n];
    for b in 0..bsz {
        pooled.iter_mut().for_each(|v| *v = 0.0);
        for ti in 0..t {
            for (p, v) in pooled.iter_mut().zip(x.row(b * t + ti)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|v| *v /= t as f64);
        logits.push(tensor::dot(&pooled, head_w.row(0)) + model.head.bias[0]);
    }

    let result = ForwardResult {
        hidden: x,
        logits,
        captures: ctx_state.captures,
        clip_tally: if opts.hard_clip.is_some() {
            Some(ctx_state.tally)
        } else {
            None
        },
    };
    let tape = if record {
        Some(Tape {
            emb_pre: emb_pre_rec,
            blocks: tape_blocks,
        })
    } else {
        None
    };
    Ok((result, tape))
}

/// Accumulator for step-size gradients keyed by activation slot name.
pub(crate) type StepGrads = BTreeMap<String, f64>;

/// Backward through one quant slot: pass-through when the node is disabled,
/// straight-through estimate otherwise. Accumulates the step gradient.
fn slot_backward(
    model: &ModelGraph,
    name: &str,
    x_pre: &Tensor,
    dy: Tensor,
    grads: &mut StepGrads,
) -> Result<Tensor> {
    let node = model.node(name)?;
    if !node.enabled {
        return Ok(dy);
    }
    let p: &QuantParams = node
        .params
        .as_ref()
        .ok_or_else(|| Error::MissingParams(name.to_string()))?;
    let (dx, ds) = quantizer::ste_backward(x_pre, p, &dy)?;
    *grads.entry(name.to_string()).or_insert(0.0) += ds;
    Ok(dx)
}

fn softmax_backward(probs: &Tensor, dp: &Tensor) -> Tensor {
    let mut out = dp.clone();
    for r in 0..probs.rows() {
        let prow = probs.row(r);
        let drow = out.row_mut(r);
        let dot: f64 = prow.iter().zip(drow.iter()).map(|(p, d)| p * d).sum();
        for (d, p) in drow.iter_mut().zip(prow) {
            *d = *p * (*d - dot);
        }
    }
    out
}

/// Gradients of the attention block: given d(ctx), produce d(probs) and d(v);
/// given d(scores), produce d(q) and d(k).
fn attention_backward_ctx(
    d_ctx: &Tensor,
    probs: &Tensor,
    v: &Tensor,
    bsz: usize,
    t: usize,
    heads: usize,
) -> (Tensor, Tensor) {
    let n = v.last_dim();
    let dh = n / heads;
    let mut d_probs = Tensor::zeros(vec![bsz, heads, t, t]);
    let mut d_v = Tensor::zeros(vec![bsz, t, n]);
    for b in 0..bsz {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let dc = &d_ctx.row(b * t + i)[off..off + dh];
                let prow = probs.row((b * heads + h) * t + i).to_vec();
                let dprow = d_probs.row_mut((b * heads + h) * t + i);
                for j in 0..t {
                    let vrow = &v.row(b * t + j)[off..off + dh];
                    dprow[j] = tensor::dot(dc, vrow);
                }
                for (j, &p) in prow.iter().enumerate() {
                    let dvrow = &mut d_v.row_mut(b * t + j)[off..off + dh];
                    tensor::axpy(p, dc, dvrow);
                }
            }
        }
    }
    (d_probs, d_v)
}

fn attention_backward_scores(
    d_scores: &Tensor,
    q: &Tensor,
    k: &Tensor,
    bsz: usize,
    t: usize,
    heads: usize,
) -> (Tensor, Tensor) {
    let n = q.last_dim();
    let dh = n / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut d_q = Tensor::zeros(vec![bsz, t, n]);
    let mut d_k = Tensor::zeros(vec![bsz, t, n]);
    for b in 0..bsz {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let dsrow = d_scores.row((b * heads + h) * t + i).to_vec();
                for (j, &ds) in dsrow.iter().enumerate() {
                    let coeff = ds * inv;
                    let krow = k.row(b * t + j)[off..off + dh].to_vec();
                    let qrow = q.row(b * t + i)[off..off + dh].to_vec();
                    tensor::axpy(coeff, &krow, &mut d_q.row_mut(b * t + i)[off..off + dh]);
                    tensor::axpy(coeff, &qrow, &mut d_k.row_mut(b * t + j)[off..off + dh]);
                }
            }
        }
    }
    (d_q, d_k)
}

fn split_residual(d_out: &Tensor, gamma: &Option<Vec<f64>>) -> (Tensor, Tensor) {
    // d(main) = d_out; d(shortcut) = d_out * gamma (elementwise broadcast).
    let d_main = d_out.clone();
    let mut d_short = d_out.clone();
    if let Some(g) = gamma {
        let n = d_short.last_dim();
        for (i, v) in d_short.data_mut().iter_mut().enumerate() {
            *v *= g[i % n];
        }
    }
    (d_main, d_short)
}

/// Reverse pass of the quantized forward, propagating `d_hidden` (gradient of
/// a scalar loss with respect to the final hidden state) back to every
/// activation-slot step size. Weight quantizers are constants here: only
/// activation steps are being tuned. Returns the per-slot step gradients and
/// the gradient with respect to the pre-quantizer embedding sum (useful for
/// validating the chain end to end).
pub(crate) fn backward_step_grads(
    model: &ModelGraph,
    tape: &Tape,
    d_hidden: &Tensor,
) -> Result<(StepGrads, Tensor)> {
    let meta = &model.meta;
    let (t, heads) = (meta.seq_len, meta.heads);
    let bsz = d_hidden.rows() / t;
    let mut grads = StepGrads::new();
    let mut dy = d_hidden.clone();

    for (bi, block) in model.blocks.iter().enumerate().rev() {
        let tape_b = &tape.blocks[bi];
        let name = |class: SlotClass| slot::activation(class, bi);
        let mode = RunMode::Quant;
        let wo = effective_weight(model, &slot::block_weight(bi, "wo"), &block.wo.weight, mode)?;
        let w1 = effective_weight(model, &slot::block_weight(bi, "w1"), &block.w1.weight, mode)?;
        let w2 = effective_weight(model, &slot::block_weight(bi, "w2"), &block.w2.weight, mode)?;
        let wq = effective_weight(model, &slot::block_weight(bi, "wq"), &block.wq.weight, mode)?;
        let wk = effective_weight(model, &slot::block_weight(bi, "wk"), &block.wk.weight, mode)?;
        let wv = effective_weight(model, &slot::block_weight(bi, "wv"), &block.wv.weight, mode)?;

        // ffn_ln slot, then the LayerNorm itself.
        let d_ln2_raw = slot_backward(model, &name(SlotClass::FfnLn), &tape_b.ln2_raw, dy, &mut grads)?;
        let d_r2 = layer_norm_backward(&tape_b.r2, &d_ln2_raw, &block.ffn_ln, meta.ln_eps, meta.ln_mode);

        let (d_ffn_out, d_ln1_short) = split_residual(&d_r2, &block.resid2_gamma);
        let d_g = tensor::linear_backward_input(&d_ffn_out, &w2);
        let d_g_pre = slot_backward(model, &name(SlotClass::Gelu), &tape_b.g_pre, d_g, &mut grads)?;
        let d_h = gelu_backward(&tape_b.h_pre, &d_g_pre);
        let mut d_ln1 = tensor::linear_backward_input(&d_h, &w1);
        for (a, b) in d_ln1.data_mut().iter_mut().zip(d_ln1_short.data()) {
            *a += b;
        }

        let d_ln1_raw = slot_backward(model, &name(SlotClass::MhaLn), &tape_b.ln1_raw, d_ln1, &mut grads)?;
        let d_r1 = layer_norm_backward(&tape_b.r1, &d_ln1_raw, &block.mha_ln, meta.ln_eps, meta.ln_mode);

        let (d_attn_out, d_x_short) = split_residual(&d_r1, &block.resid1_gamma);
        let d_ctx = tensor::linear_backward_input(&d_attn_out, &wo);
        let d_ctx_pre = slot_backward(model, &name(SlotClass::Context), &tape_b.ctx_pre, d_ctx, &mut grads)?;

        let (d_probs, d_v) =
            attention_backward_ctx(&d_ctx_pre, &tape_b.probs, &tape_b.v, bsz, t, heads);
        let d_probs_pre =
            slot_backward(model, &name(SlotClass::AttnProbs), &tape_b.probs_pre, d_probs, &mut grads)?;
        let d_scores = softmax_backward(&tape_b.probs_pre, &d_probs_pre);
        let (d_q, d_k) = attention_backward_scores(&d_scores, &tape_b.q, &tape_b.k, bsz, t, heads);

        let d_q_pre = slot_backward(model, &name(SlotClass::Query), &tape_b.q_pre, d_q, &mut grads)?;
        let d_k_pre = slot_backward(model, &name(SlotClass::Key), &tape_b.k_pre, d_k, &mut grads)?;
        let d_v_pre = slot_backward(model, &name(SlotClass::Value), &tape_b.v_pre, d_v, &mut grads)?;

        let mut d_x = d_x_short;
        for (d_out, w) in [(&d_q_pre, &wq), (&d_k_pre, &wk), (&d_v_pre, &wv)] {
            let contrib = tensor::linear_backward_input(d_out, w);
            for (a, b) in d_x.data_mut().iter_mut().zip(contrib.data()) {
                *a += b;
            }
        }
        dy = d_x;
    }

    let d_emb = slot_backward(model, &slot::input_embedding(), &tape.emb_pre, dy, &mut grads)?;
    Ok((grads, d_emb))
}
