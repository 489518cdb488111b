//! Range calibration: everything that decides quantizer parameters.
//!
//! Five methods share one entry point, [`calibrate`]:
//!
//! * `minmax` — ranges from observed extremes.
//! * `omse` — per-activation-slot search over shrink factors of the minmax
//!   range, minimizing local quantization MSE, via a 30-factor grid or a
//!   golden-section search. Weights stay at per-channel minmax.
//! * `percentile` — a 2048-bin histogram per activation slot; the range
//!   keeps a configurable central mass, trimming equal tails.
//! * `easyquant` — alternating search over activation/weight step scales per
//!   matmul, maximizing cosine similarity of that matmul's output against
//!   full precision. Covers activation-activation matmuls (scores, context)
//!   so every slot participates; embedding tables stay at minmax.
//! * `twc` — token-wise clipping: a coarse stage picks one clip ratio
//!   `alpha` shared by all activation slots by minimizing the end-to-end
//!   error of the final hidden state, then a fine stage refines each step
//!   size by gradient descent through the quantized network.
//!
//! All methods are deterministic: no randomness, ordered reductions, sorted
//! maps. Calibrating the same model and data twice produces byte-identical
//! output files.

use crate::error::{Error, Result};
use crate::forward::{self, forward, ForwardOptions};
use crate::io::DataSet;
use crate::metrics::CosineAcc as CosAcc;
use crate::model::{BitsSpec, LnMode, ModelGraph, QuantNode};
use crate::quantizer::{self, ClipRange, QuantParams};
use crate::slot::{self, SlotClass};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MinMax,
    Omse,
    Percentile,
    EasyQuant,
    Twc,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Method::MinMax),
            "omse" => Ok(Method::Omse),
            "percentile" => Ok(Method::Percentile),
            "easyquant" => Ok(Method::EasyQuant),
            "twc" => Ok(Method::Twc),
            other => Err(Error::config(format!(
                "unknown method `{other}`; expected minmax, omse, percentile, easyquant or twc"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::MinMax => "minmax",
            Method::Omse => "omse",
            Method::Percentile => "percentile",
            Method::EasyQuant => "easyquant",
            Method::Twc => "twc",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub method: Method,
    pub bits: BitsSpec,
    /// Number of clip ratios the coarse stage tries: `alpha = 1 - 0.01*k`
    /// for `k` in `0..alpha_iters`.
    pub alpha_iters: usize,
    /// Learning rate of the fine stage.
    pub lr: f64,
    /// Full-batch epochs of the fine stage.
    pub epochs: usize,
    /// Central mass kept by the percentile method.
    pub percentile_ratio: f64,
    /// How the omse method searches the shrink-factor interval.
    pub omse_search: OmseSearch,
    /// Forward-pass batch size.
    pub batch: usize,
}

/// Search strategy for the omse shrink factor on `[1/30, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmseSearch {
    /// 30 evenly spaced factors, keep the best.
    #[default]
    Grid,
    /// Golden-section to 1e-3 relative bracket width on the same interval.
    GoldenSection,
}

impl CalibrationConfig {
    pub fn new(method: Method, bits: BitsSpec) -> Self {
        CalibrationConfig {
            method,
            bits,
            alpha_iters: 30,
            lr: 1e-5,
            epochs: 3,
            percentile_ratio: 0.9999,
            omse_search: OmseSearch::default(),
            batch: 32,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_iters == 0 || self.alpha_iters > 100 {
            return Err(Error::config("alpha_iters must be in 1..=100"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive and finite"));
        }
        if !(0.0 < self.percentile_ratio && self.percentile_ratio <= 1.0) {
            return Err(Error::config("percentile_ratio must be in (0, 1]"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        Ok(())
    }
}

/// Per-slot result as written to the calibration file. `loss` carries the
/// method's own objective where one exists: quantization MSE for omse,
/// final cosine (in percent) for easyquant slots tuned through a matmul
/// pair. `alpha` is the shared clip ratio for twc activation slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotCalibration {
    #[serde(flatten)]
    pub params: QuantParams,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: String,
    pub bits: String,
    /// Whether the model had been gamma-migrated when calibrated.
    pub migrated: bool,
    /// End-to-end calibration loss (squared error of the final hidden state
    /// against full precision) for methods that measure it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    pub slots: BTreeMap<String, SlotCalibration>,
}

/// Loss curves recorded by the twc method for the trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    /// (alpha, end-to-end loss) for every coarse candidate, in search order.
    pub coarse: Vec<(f64, f64)>,
    /// End-to-end loss before fine tuning and after each epoch.
    pub fine: Vec<f64>,
    /// Fine-stage updates rejected by the safeguard.
    pub rejected: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub result: CalibrationResult,
    pub trace: Option<LossTrace>,
    /// (phase, seconds) wall-clock timings, in execution order.
    pub timings: Vec<(String, f64)>,
}

// ---------------------------------------------------------------------------
// Statistics helpers.
// ---------------------------------------------------------------------------

/// Linear-interpolation quantile of ascending `sorted` (the convention where
/// the `q`-quantile sits at fractional rank `q * (n - 1)`). `q` outside
/// `[0, 1]` is clamped.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let q = q.clamp(0.0, 1.0);
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}

/// Per-row extremes over the last axis: (upper per row, lower per row).
pub fn token_bounds(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let rows = x.rows();
    let mut uppers = Vec::with_capacity(rows);
    let mut lowers = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for &v in row {
            hi = hi.max(v);
            lo = lo.min(v);
        }
        uppers.push(hi);
        lowers.push(lo);
    }
    (uppers, lowers)
}

/// Clip range from per-token bounds at ratio `alpha`: the upper bound is the
/// `alpha`-quantile of the token maxima and the lower bound is the mirrored
/// `(1 - alpha)`-quantile of the token minima, so `alpha = 1` reproduces the
/// exact observed range. Both inputs must be sorted ascending.
pub fn clip_from_ratio(sorted_uppers: &[f64], sorted_lowers: &[f64], alpha: f64) -> Result<ClipRange> {
    debug_assert!(sorted_uppers.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(sorted_lowers.windows(2).all(|w| w[0] <= w[1]));
    let upper = quantile(sorted_uppers, alpha);
    let lower = quantile(sorted_lowers, 1.0 - alpha);
    widened(lower.min(upper), upper.max(lower))
}

/// A valid range even when the bounds collapse.
fn widened(lo: f64, hi: f64) -> Result<ClipRange> {
    if hi - lo < 1e-12 {
        ClipRange::new(lo - 5e-13, lo + 5e-13)
    } else {
        ClipRange::new(lo, hi)
    }
}

// ---------------------------------------------------------------------------
// Activation cache.
// ---------------------------------------------------------------------------

/// Full-precision tensors captured at every activation slot, per batch, plus
/// the reference final hidden state the end-to-end loss compares against.
pub struct ActivationCache {
    pub batches: Vec<Vec<Vec<u32>>>,
    pub captures: Vec<BTreeMap<String, Tensor>>,
    pub fp_hidden: Vec<Tensor>,
}

pub fn build_cache(model: &ModelGraph, seqs: &[Vec<u32>], batch: usize) -> Result<ActivationCache> {
    if seqs.is_empty() {
        return Err(Error::config("calibration set is empty"));
    }
    let opts = ForwardOptions {
        capture_slots: true,
        ..ForwardOptions::fp()
    };
    let mut cache = ActivationCache {
        batches: Vec::new(),
        captures: Vec::new(),
        fp_hidden: Vec::new(),
    };
    for chunk in seqs.chunks(batch) {
        let r = forward(model, chunk, &opts)?;
        cache.batches.push(chunk.to_vec());
        cache.captures.push(r.captures);
        cache.fp_hidden.push(r.hidden);
    }
    Ok(cache)
}

/// Per-dimension weights that put the final hidden state back into the
/// network's original output frame. A migrated model's last LayerNorm no
/// longer multiplies by gamma, so its hidden state is a rescaled version of
/// the original one; weighting errors by that gamma makes losses comparable
/// across the rewrite (the weighted full-precision hidden states describe
/// the identical function). Unmigrated models need no weighting.
fn output_frame(model: &ModelGraph) -> Option<Vec<f64>> {
    match model.meta.ln_mode {
        LnMode::Scaling => None,
        LnMode::NonScaling => model.blocks.last().map(|b| b.ffn_ln.gamma.clone()),
    }
}

/// Sum of squared errors of the quantized final hidden state against the
/// cached full-precision reference, over the whole calibration set, measured
/// in the original output frame (see [`output_frame`]).
pub fn quant_loss(model: &ModelGraph, cache: &ActivationCache) -> Result<f64> {
    let opts = ForwardOptions::quant();
    let frame = output_frame(model);
    let mut total = 0.0;
    for (batch, fp) in cache.batches.iter().zip(&cache.fp_hidden) {
        let r = forward(model, batch, &opts)?;
        match &frame {
            None => total += r.hidden.sq_distance(fp),
            Some(g) => {
                let n = g.len();
                for (i, (a, b)) in r.hidden.data().iter().zip(fp.data()).enumerate() {
                    let d = g[i % n] * (a - b);
                    total += d * d;
                }
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Range builders. Weight tensors always quantize symmetrically per channel;
// these decide how far to shrink each range.
// ---------------------------------------------------------------------------

fn act_slot_names(model: &ModelGraph) -> Vec<String> {
    slot::activation_slots(model.meta.blocks)
}

fn minmax_act_range(cache: &ActivationCache, name: &str) -> Result<ClipRange> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for caps in &cache.captures {
        let t = caps
            .get(name)
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))?;
        let (l, h) = t.min_max()?;
        lo = lo.min(l);
        hi = hi.max(h);
    }
    widened(lo, hi)
}

fn set_minmax_weights(model: &mut ModelGraph) -> Result<()> {
    for name in slot::parameter_slots(model.meta.blocks) {
        let t = crate::io::parameter_tensor(model, &name)?.clone();
        let bits = model.node(&name)?.bits;
        let p = QuantParams::per_channel_for_tensor(&t, bits)?;
        model.set_params(&name, p)?;
    }
    Ok(())
}

fn set_minmax_acts(model: &mut ModelGraph, cache: &ActivationCache) -> Result<()> {
    for name in act_slot_names(model) {
        let range = minmax_act_range(cache, &name)?;
        let bits = model.node(&name)?.bits;
        model.set_params(&name, QuantParams::from_range(range, bits)?)?;
    }
    Ok(())
}

/// Quantization MSE of one activation slot's cached tensors under `params`.
fn act_mse(cache: &ActivationCache, name: &str, params: &QuantParams) -> Result<f64> {
    let mut total = 0.0;
    for caps in &cache.captures {
        let x = &caps[name];
        let xhat = quantizer::fake_quant(x, params)?;
        total += xhat.sq_distance(x);
    }
    Ok(total)
}

/// Golden-section minimization of `f` on `[a, b]`, to relative width 1e-3.
/// Returns the midpoint of the final bracket and its value.
fn golden_min(mut a: f64, mut b: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - (b - a) * INV_PHI;
    let mut x2 = a + (b - a) * INV_PHI;
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (b - a) > 1e-3 * b.abs().max(1e-9) {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - (b - a) * INV_PHI;
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + (b - a) * INV_PHI;
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (a + b);
    let fm = f(mid);
    (mid, fm)
}

/// MSE-optimal shrink of a minmax range over factors in `[1/30, 1]`:
/// either the 30-point grid `1 - k/30` for `k < 30`, or golden-section on
/// the same interval (which assumes the MSE is unimodal in the factor).
fn omse_shrink(search: OmseSearch, mut mse_of: impl FnMut(f64) -> f64) -> (f64, f64) {
    const GRID: usize = 30;
    match search {
        OmseSearch::Grid => {
            let mut best_f = 1.0;
            let mut best = f64::INFINITY;
            for k in 0..GRID {
                let f = 1.0 - k as f64 / GRID as f64;
                let m = mse_of(f);
                if m < best {
                    best = m;
                    best_f = f;
                }
            }
            (best_f, best)
        }
        OmseSearch::GoldenSection => golden_min(1.0 / GRID as f64, 1.0, &mut mse_of),
    }
}

fn omse_act(
    cache: &ActivationCache,
    name: &str,
    bits: u8,
    search: OmseSearch,
) -> Result<(QuantParams, f64)> {
    let base = minmax_act_range(cache, name)?;
    let params_at = |f: f64| -> Result<QuantParams> {
        QuantParams::from_range(widened(base.lower * f, base.upper * f)?, bits)
    };
    let mut failed = None;
    let (f_star, mse) = omse_shrink(search, |f| {
        match params_at(f).and_then(|p| act_mse(cache, name, &p)) {
            Ok(m) => m,
            Err(e) => {
                failed = Some(e);
                f64::INFINITY
            }
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    Ok((params_at(f_star)?, mse))
}

/// Histogram-based central-mass range for one activation slot.
fn percentile_act(cache: &ActivationCache, name: &str, ratio: f64) -> Result<ClipRange> {
    const BINS: usize = 2048;
    let base = minmax_act_range(cache, name)?;
    let (gmin, gmax) = (base.lower, base.upper);
    let width = (gmax - gmin) / BINS as f64;
    if width <= 0.0 {
        return widened(gmin, gmax);
    }
    let mut counts = [0u64; BINS];
    let mut total = 0u64;
    for caps in &cache.captures {
        for &v in caps[name].data() {
            let idx = (((v - gmin) / width) as usize).min(BINS - 1);
            counts[idx] += 1;
            total += 1;
        }
    }
    let tail = (1.0 - ratio) / 2.0 * total as f64;
    // Walk in from each end, interpolating linearly inside the boundary bin.
    let mut cum = 0.0;
    let mut lower = gmin;
    for (i, &c) in counts.iter().enumerate() {
        let c = c as f64;
        if cum + c >= tail {
            let frac = if c > 0.0 { (tail - cum) / c } else { 0.0 };
            lower = gmin + (i as f64 + frac) * width;
            break;
        }
        cum += c;
    }
    let mut cum = 0.0;
    let mut upper = gmax;
    for (i, &c) in counts.iter().enumerate().rev() {
        let c = c as f64;
        if cum + c >= tail {
            let frac = if c > 0.0 { (tail - cum) / c } else { 0.0 };
            upper = gmin + ((i + 1) as f64 - frac) * width;
            break;
        }
        cum += c;
    }
    widened(lower.min(upper), upper.max(lower))
}

// ---------------------------------------------------------------------------
// EasyQuant: alternating cosine search per matmul.
// ---------------------------------------------------------------------------

/// One side of an alternating pair: which parameter the candidate scale
/// multiplies.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    A,
    B,
}

/// A matmul whose two quantized operands are tuned against its
/// full-precision output. `a` is always an activation slot; `b` is either a
/// weight slot or a second activation slot.
struct Pair<'a> {
    /// Activation slot name.
    a: String,
    /// Partner slot name (weight or activation).
    b: String,
    /// Cached full-precision operand tensors per batch, and a closure-free
    /// description of how to combine them.
    op: PairOp<'a>,
    /// Tune both sides, or only `b` (used when `a` was already tuned by an
    /// earlier pair and should stay fixed).
    tune_a: bool,
}

enum PairOp<'a> {
    /// `x @ W^T` — activation times weight. Holds per-batch fp inputs and a
    /// copy of the raw weight (copied so the model stays mutably borrowable
    /// while the pair is tuned).
    ActWeight { x: Vec<&'a Tensor>, w: Tensor },
    /// Attention scores `Q K^T / sqrt(dh)` per head.
    Scores { q: Vec<&'a Tensor>, k: Vec<&'a Tensor>, heads: usize },
    /// Attention context `P V` per head.
    Context { p: Vec<&'a Tensor>, v: Vec<&'a Tensor>, heads: usize },
}

fn batch_dims(x: &Tensor, seq_len: usize) -> (usize, usize) {
    let rows = x.rows();
    (rows / seq_len, seq_len)
}

impl<'a> PairOp<'a> {
    /// Cosine (percent) between the quantized and full-precision matmul
    /// outputs, with operand quantizers `pa` (activation) and `pb`.
    fn cosine(&self, pa: &QuantParams, pb: &QuantParams, seq_len: usize) -> Result<f64> {
        let mut acc = CosAcc::default();
        match self {
            PairOp::ActWeight { x, w } => {
                let wq = quantizer::fake_quant(w, pb)?;
                let zeros = vec![0.0; w.shape()[0]];
                for xb in x {
                    let xq = quantizer::fake_quant(xb, pa)?;
                    let out_q = crate::tensor::linear(&xq, &wq, &zeros);
                    let out_fp = crate::tensor::linear(xb, w, &zeros);
                    acc.add(out_q.data(), out_fp.data());
                }
            }
            PairOp::Scores { q, k, heads } => {
                for (qb, kb) in q.iter().zip(k) {
                    let (bsz, t) = batch_dims(qb, seq_len);
                    let qq = quantizer::fake_quant(qb, pa)?;
                    let kq = quantizer::fake_quant(kb, pb)?;
                    let out_q = forward::attention_scores(&qq, &kq, bsz, t, *heads);
                    let out_fp = forward::attention_scores(qb, kb, bsz, t, *heads);
                    acc.add(out_q.data(), out_fp.data());
                }
            }
            PairOp::Context { p, v, heads } => {
                for (pb_t, vb) in p.iter().zip(v) {
                    let (bsz, t) = batch_dims(vb, seq_len);
                    let pq = quantizer::fake_quant(pb_t, pa)?;
                    let vq = quantizer::fake_quant(vb, pb)?;
                    let out_q = forward::attention_context(&pq, &vq, bsz, t, *heads);
                    let out_fp = forward::attention_context(pb_t, vb, bsz, t, *heads);
                    acc.add(out_q.data(), out_fp.data());
                }
            }
        }
        Ok(acc.pct())
    }
}

fn scaled(p: &QuantParams, factor: f64) -> Result<QuantParams> {
    let steps = p.step.iter().map(|s| s * factor).collect();
    QuantParams::with_steps(p.scheme, p.bits, steps, p.zero_point.clone())
}

/// Alternating candidate-scale search on one pair. Returns the final cosine.
fn tune_pair(model: &mut ModelGraph, pair: &Pair<'_>, seq_len: usize) -> Result<f64> {
    const CANDIDATES: usize = 10;
    const ROUNDS: usize = 3;
    let factors: Vec<f64> = (0..CANDIDATES)
        .map(|i| 0.5 + 0.7 * i as f64 / (CANDIDATES - 1) as f64)
        .collect();
    let mut pa = model
        .node(&pair.a)?
        .params
        .clone()
        .ok_or_else(|| Error::MissingParams(pair.a.clone()))?;
    let mut pb = model
        .node(&pair.b)?
        .params
        .clone()
        .ok_or_else(|| Error::MissingParams(pair.b.clone()))?;
    let mut best = pair.op.cosine(&pa, &pb, seq_len)?;
    let sides: Vec<Side> = if pair.tune_a {
        vec![Side::A, Side::B]
    } else {
        vec![Side::B]
    };
    for _round in 0..ROUNDS {
        let mut improved = false;
        for &side in &sides {
            for &f in &factors {
                let (ca, cb) = match side {
                    Side::A => (scaled(&pa, f)?, pb.clone()),
                    Side::B => (pa.clone(), scaled(&pb, f)?),
                };
                let cos = pair.op.cosine(&ca, &cb, seq_len)?;
                if cos > best {
                    best = cos;
                    pa = ca;
                    pb = cb;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    model.set_params(&pair.a, pa)?;
    model.set_params(&pair.b, pb)?;
    Ok(best)
}

/// Run the alternating search over every matmul in graph order. Returns the
/// final cosine per tuned slot.
fn easyquant(
    model: &mut ModelGraph,
    cache: &ActivationCache,
    seq_len: usize,
) -> Result<BTreeMap<String, f64>> {
    let blocks = model.meta.blocks;
    let heads = model.meta.heads;
    let mut cosines: BTreeMap<String, f64> = BTreeMap::new();
    for bi in 0..blocks {
        let x_name = if bi == 0 {
            slot::input_embedding()
        } else {
            slot::activation(SlotClass::FfnLn, bi - 1)
        };
        let caps = |name: &str| -> Vec<&Tensor> {
            cache.captures.iter().map(|c| &c[name]).collect()
        };
        let q_name = slot::activation(SlotClass::Query, bi);
        let k_name = slot::activation(SlotClass::Key, bi);
        let v_name = slot::activation(SlotClass::Value, bi);
        let p_name = slot::activation(SlotClass::AttnProbs, bi);
        let ctx_name = slot::activation(SlotClass::Context, bi);
        let ln1_name = slot::activation(SlotClass::MhaLn, bi);
        let gelu_name = slot::activation(SlotClass::Gelu, bi);
        // The pair list mirrors the dataflow: the shared block input is
        // tuned once (against wq), then held fixed for wk/wv.
        let pairs = vec![
            (x_name.clone(), slot::block_weight(bi, "wq"), true),
            (x_name.clone(), slot::block_weight(bi, "wk"), false),
            (x_name.clone(), slot::block_weight(bi, "wv"), false),
            (q_name.clone(), k_name.clone(), true),
            (p_name.clone(), v_name.clone(), true),
            (ctx_name.clone(), slot::block_weight(bi, "wo"), true),
            (ln1_name.clone(), slot::block_weight(bi, "w1"), true),
            (gelu_name.clone(), slot::block_weight(bi, "w2"), true),
        ];
        for (a, b, tune_a) in pairs {
            let op = if b == k_name {
                PairOp::Scores {
                    q: caps(&a),
                    k: caps(&b),
                    heads,
                }
            } else if b == v_name {
                PairOp::Context {
                    p: caps(&a),
                    v: caps(&b),
                    heads,
                }
            } else {
                let w = crate::io::parameter_tensor(model, &b)?.clone();
                PairOp::ActWeight { x: caps(&a), w }
            };
            let pair = Pair {
                a: a.clone(),
                b: b.clone(),
                op,
                tune_a,
            };
            let cos = tune_pair(model, &pair, seq_len)?;
            cosines.insert(a, cos);
            cosines.insert(b, cos);
        }
    }
    // Final LayerNorm output against the classification head.
    let last_act = slot::activation(SlotClass::FfnLn, blocks - 1);
    let x: Vec<&Tensor> = cache.captures.iter().map(|c| &c[&last_act]).collect();
    let w = model.head.weight.clone();
    let pair = Pair {
        a: last_act.clone(),
        b: slot::head_weight(),
        op: PairOp::ActWeight { x, w },
        tune_a: true,
    };
    let cos = tune_pair(model, &pair, seq_len)?;
    cosines.insert(last_act, cos);
    cosines.insert(slot::head_weight(), cos);
    Ok(cosines)
}

// ---------------------------------------------------------------------------
// Token-wise clipping: coarse ratio search, then gradient fine tuning.
// ---------------------------------------------------------------------------

/// Sorted per-token bounds for every activation slot, pooled over batches.
struct TokenStats {
    uppers: BTreeMap<String, Vec<f64>>,
    lowers: BTreeMap<String, Vec<f64>>,
}

fn collect_token_stats(model: &ModelGraph, cache: &ActivationCache) -> TokenStats {
    let mut uppers: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut lowers: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for name in act_slot_names(model) {
        let mut u = Vec::new();
        let mut l = Vec::new();
        for caps in &cache.captures {
            let (bu, bl) = token_bounds(&caps[&name]);
            u.extend(bu);
            l.extend(bl);
        }
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        l.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uppers.insert(name.clone(), u);
        lowers.insert(name, l);
    }
    TokenStats { uppers, lowers }
}

fn set_acts_at_alpha(
    model: &mut ModelGraph,
    stats: &TokenStats,
    alpha: f64,
) -> Result<()> {
    for name in act_slot_names(model) {
        let range = clip_from_ratio(&stats.uppers[&name], &stats.lowers[&name], alpha)?;
        let bits = model.node(&name)?.bits;
        model.set_params(&name, QuantParams::from_range(range, bits)?)?;
    }
    Ok(())
}

/// Coarse stage: try `alpha = 1 - 0.01 k`, score each by the end-to-end
/// loss, keep the best (earliest candidate on ties, i.e. the least clipping).
pub struct CoarseOutcome {
    pub alpha: f64,
    pub best_loss: f64,
    pub losses: Vec<(f64, f64)>,
}

pub fn coarse_search(
    model: &mut ModelGraph,
    cache: &ActivationCache,
    alpha_iters: usize,
) -> Result<CoarseOutcome> {
    let stats = collect_token_stats(model, cache);
    let mut best_loss = f64::INFINITY;
    let mut best_alpha = 1.0;
    let mut best_params: BTreeMap<String, QuantParams> = BTreeMap::new();
    let mut losses = Vec::with_capacity(alpha_iters);
    for k in 0..alpha_iters {
        let alpha = 1.0 - 0.01 * k as f64;
        set_acts_at_alpha(model, &stats, alpha)?;
        let loss = quant_loss(model, cache)?;
        losses.push((alpha, loss));
        if loss < best_loss {
            best_loss = loss;
            best_alpha = alpha;
            best_params = act_slot_names(model)
                .into_iter()
                .map(|n| {
                    let p = model.node(&n).unwrap().params.clone().unwrap();
                    (n, p)
                })
                .collect();
        }
    }
    for (name, p) in best_params {
        model.set_params(&name, p)?;
    }
    Ok(CoarseOutcome {
        alpha: best_alpha,
        best_loss,
        losses,
    })
}

/// Fine stage: full-batch gradient descent on every activation step size
/// through the straight-through estimator, with a safeguard that rejects an
/// epoch whose update increases the loss (or drives a step nonpositive) and
/// stops — the search is deterministic, so retrying cannot help.
pub struct FineOutcome {
    /// Loss before tuning and after each accepted epoch.
    pub epoch_losses: Vec<f64>,
    pub rejected: usize,
}

pub fn fine_tune(
    model: &mut ModelGraph,
    cache: &ActivationCache,
    lr: f64,
    epochs: usize,
) -> Result<FineOutcome> {
    let mut losses = vec![quant_loss(model, cache)?];
    let frame = output_frame(model);
    // The learning-rate default is calibrated against the per-element mean
    // of the loss (the convention of mainstream training stacks); the loss
    // itself stays a plain Frobenius sum. Dividing the accumulated gradient
    // by the element count makes the update exactly mean-loss descent.
    let norm: f64 = cache.fp_hidden.iter().map(|t| t.data().len() as f64).sum();
    let mut rejected = 0;
    for _epoch in 0..epochs {
        let mut grads: forward::StepGrads = BTreeMap::new();
        for (batch, fp) in cache.batches.iter().zip(&cache.fp_hidden) {
            let (res, tape) = forward::forward_with_tape(model, batch)?;
            let mut d_hidden = res.hidden;
            match &frame {
                None => {
                    for (d, r) in d_hidden.data_mut().iter_mut().zip(fp.data()) {
                        *d = 2.0 * (*d - r);
                    }
                }
                Some(g) => {
                    let n = g.len();
                    for (i, (d, r)) in
                        d_hidden.data_mut().iter_mut().zip(fp.data()).enumerate()
                    {
                        *d = 2.0 * g[i % n] * g[i % n] * (*d - r);
                    }
                }
            }
            let (batch_grads, _) = forward::backward_step_grads(model, &tape, &d_hidden)?;
            for (k, v) in batch_grads {
                *grads.entry(k).or_insert(0.0) += v;
            }
        }
        // Propose the update, remembering the previous steps for rollback.
        let mut previous: BTreeMap<String, QuantParams> = BTreeMap::new();
        let mut valid = true;
        for (name, g) in &grads {
            let node = model.node(name)?;
            let p = node
                .params
                .clone()
                .ok_or_else(|| Error::MissingParams(name.clone()))?;
            let new_step = p.step[0] - lr * g / norm;
            if !(new_step > 0.0) || !new_step.is_finite() {
                valid = false;
                break;
            }
            previous.insert(name.clone(), p);
        }
        if valid {
            for (name, g) in &grads {
                let p = &previous[name];
                let new = QuantParams::with_steps(
                    p.scheme,
                    p.bits,
                    vec![p.step[0] - lr * g / norm],
                    p.zero_point.clone(),
                )?;
                model.set_params(name, new)?;
            }
            let new_loss = quant_loss(model, cache)?;
            if new_loss <= *losses.last().unwrap() {
                losses.push(new_loss);
                continue;
            }
            for (name, p) in previous {
                model.set_params(&name, p)?;
            }
        }
        rejected += 1;
        break;
    }
    Ok(FineOutcome {
        epoch_losses: losses,
        rejected,
    })
}

// ---------------------------------------------------------------------------
// Top-level entry.
// ---------------------------------------------------------------------------

fn slot_entry(
    model: &ModelGraph,
    name: &str,
    method: &str,
    alpha: Option<f64>,
    loss: Option<f64>,
) -> Result<SlotCalibration> {
    let node = model.node(name)?;
    let params = node
        .params
        .clone()
        .ok_or_else(|| Error::MissingParams(name.to_string()))?;
    Ok(SlotCalibration {
        params,
        method: method.to_string(),
        alpha,
        loss,
    })
}

/// Calibrate every quant node of `model` in place and describe the outcome.
/// The model must not have quant nodes placed yet; placement uses
/// `cfg.bits`. `data.calibration` drives every statistic.
pub fn calibrate(
    model: &mut ModelGraph,
    data: &DataSet,
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    if data.seq_len != model.meta.seq_len || data.vocab != model.meta.vocab {
        return Err(Error::format(format!(
            "data (seq_len {}, vocab {}) does not match model (seq_len {}, vocab {})",
            data.seq_len, data.vocab, model.meta.seq_len, model.meta.vocab
        )));
    }
    model.place_quant_nodes(cfg.bits)?;
    let mut timings = Vec::new();
    let t0 = Instant::now();
    let cache = build_cache(model, &data.calibration, cfg.batch)?;
    timings.push(("cache".to_string(), t0.elapsed().as_secs_f64()));

    let method_name = cfg.method.to_string();
    let migrated = model.meta.ln_mode == crate::model::LnMode::NonScaling;
    let mut slots: BTreeMap<String, SlotCalibration> = BTreeMap::new();
    let mut trace = None;
    let mut final_loss = None;

    match cfg.method {
        Method::MinMax => {
            let t = Instant::now();
            set_minmax_weights(model)?;
            set_minmax_acts(model, &cache)?;
            timings.push(("ranges".to_string(), t.elapsed().as_secs_f64()));
            for name in model.nodes.keys().cloned().collect::<Vec<_>>() {
                slots.insert(name.clone(), slot_entry(model, &name, "minmax", None, None)?);
            }
        }
        Method::Omse => {
            let t = Instant::now();
            set_minmax_weights(model)?;
            for name in slot::parameter_slots(model.meta.blocks) {
                slots.insert(name.clone(), slot_entry(model, &name, "minmax", None, None)?);
            }
            timings.push(("weights".to_string(), t.elapsed().as_secs_f64()));
            let t = Instant::now();
            for name in act_slot_names(model) {
                let bits = model.node(&name)?.bits;
                let (p, mse) = omse_act(&cache, &name, bits, cfg.omse_search)?;
                model.set_params(&name, p)?;
                slots.insert(
                    name.clone(),
                    slot_entry(model, &name, "omse", None, Some(mse))?,
                );
            }
            timings.push(("activations".to_string(), t.elapsed().as_secs_f64()));
        }
        Method::Percentile => {
            let t = Instant::now();
            set_minmax_weights(model)?;
            for name in slot::parameter_slots(model.meta.blocks) {
                slots.insert(name.clone(), slot_entry(model, &name, "minmax", None, None)?);
            }
            for name in act_slot_names(model) {
                let range = percentile_act(&cache, &name, cfg.percentile_ratio)?;
                let bits = model.node(&name)?.bits;
                model.set_params(&name, QuantParams::from_range(range, bits)?)?;
                slots.insert(
                    name.clone(),
                    slot_entry(model, &name, "percentile", None, None)?,
                );
            }
            timings.push(("ranges".to_string(), t.elapsed().as_secs_f64()));
        }
        Method::EasyQuant => {
            let t = Instant::now();
            set_minmax_weights(model)?;
            set_minmax_acts(model, &cache)?;
            timings.push(("init".to_string(), t.elapsed().as_secs_f64()));
            let t = Instant::now();
            let cosines = easyquant(model, &cache, model.meta.seq_len)?;
            timings.push(("search".to_string(), t.elapsed().as_secs_f64()));
            for name in model.nodes.keys().cloned().collect::<Vec<_>>() {
                let (m, cos) = match cosines.get(&name) {
                    Some(c) => ("easyquant", Some(*c)),
                    None => ("minmax", None), // embedding tables
                };
                slots.insert(name.clone(), slot_entry(model, &name, m, None, cos)?);
            }
        }
        Method::Twc => {
            let t = Instant::now();
            set_minmax_weights(model)?;
            timings.push(("weights".to_string(), t.elapsed().as_secs_f64()));
            let t = Instant::now();
            let coarse = coarse_search(model, &cache, cfg.alpha_iters)?;
            timings.push(("coarse".to_string(), t.elapsed().as_secs_f64()));
            let t = Instant::now();
            let fine = fine_tune(model, &cache, cfg.lr, cfg.epochs)?;
            timings.push(("fine".to_string(), t.elapsed().as_secs_f64()));
            final_loss = Some(*fine.epoch_losses.last().unwrap());
            for name in slot::parameter_slots(model.meta.blocks) {
                slots.insert(name.clone(), slot_entry(model, &name, "minmax", None, None)?);
            }
            for name in act_slot_names(model) {
                slots.insert(
                    name.clone(),
                    slot_entry(model, &name, "twc", Some(coarse.alpha), None)?,
                );
            }
            trace = Some(LossTrace {
                coarse: coarse.losses,
                fine: fine.epoch_losses,
                rejected: fine.rejected,
            });
        }
    }

    if final_loss.is_none() {
        let t = Instant::now();
        final_loss = Some(quant_loss(model, &cache)?);
        timings.push(("loss".to_string(), t.elapsed().as_secs_f64()));
    }
    let total = timings.iter().map(|(_, s)| s).sum();
    timings.push(("total".to_string(), total));

    Ok(CalibrationOutcome {
        result: CalibrationResult {
            method: method_name,
            bits: cfg.bits.to_string(),
            migrated,
            final_loss,
            slots,
        },
        trace,
        timings,
    })
}

/// Install a saved calibration onto a freshly loaded model: places quant
/// nodes according to the file and sets every slot's parameters. The file
/// must cover exactly the slots this model has, and its migrated flag must
/// match the model's LayerNorm mode.
pub fn apply_calibration(model: &mut ModelGraph, result: &CalibrationResult) -> Result<()> {
    let migrated = model.meta.ln_mode == crate::model::LnMode::NonScaling;
    if migrated != result.migrated {
        return Err(Error::config(format!(
            "calibration was produced for a {} model but this model is {}",
            if result.migrated { "migrated" } else { "non-migrated" },
            if migrated { "migrated" } else { "non-migrated" },
        )));
    }
    if !model.nodes.is_empty() {
        return Err(Error::config(
            "model already has quant nodes; apply a calibration to a clean model",
        ));
    }
    let mut expected: Vec<String> = slot::activation_slots(model.meta.blocks);
    expected.extend(slot::parameter_slots(model.meta.blocks));
    expected.sort();
    let got: Vec<String> = result.slots.keys().cloned().collect();
    if expected != got {
        return Err(Error::config(format!(
            "calibration covers {} slots but the model expects {}",
            got.len(),
            expected.len()
        )));
    }
    for (name, sc) in &result.slots {
        sc.params.check()?;
        model.nodes.insert(
            name.clone(),
            QuantNode {
                scheme: sc.params.scheme,
                bits: sc.params.bits,
                enabled: true,
                params: Some(sc.params.clone()),
            },
        );
    }
    Ok(())
}

/// CSV text of a twc loss trace: coarse rows then fine rows.
pub fn render_loss_trace_csv(trace: &LossTrace) -> String {
    let mut out = String::from("phase,alpha_or_epoch,loss\n");
    for (alpha, loss) in &trace.coarse {
        out.push_str(&format!("coarse,{alpha:.2},{loss:.9e}\n"));
    }
    for (epoch, loss) in trace.fine.iter().enumerate() {
        out.push_str(&format!("fine,{epoch},{loss:.9e}\n"));
    }
    out
}

/// CSV text of calibration phase timings.
pub fn render_timing_csv(timings: &[(String, f64)]) -> String {
    let mut out = String::from("phase,seconds\n");
    for (phase, secs) in timings {
        out.push_str(&format!("{phase},{secs:.3}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::LabeledSet;
    use crate::testutil::{batch, random_model};

    fn small_data(model: &ModelGraph, n_calib: usize) -> DataSet {
        let seqs = batch(77, n_calib, model.meta.seq_len, model.meta.vocab as u32);
        DataSet {
            seq_len: model.meta.seq_len,
            vocab: model.meta.vocab,
            calibration: seqs,
            eval: LabeledSet {
                sequences: batch(78, 4, model.meta.seq_len, model.meta.vocab as u32),
                labels: vec![0, 1, 0, 1],
            },
        }
    }

    #[test]
    fn quantile_linear_interpolation_values() {
        let v = [1.0, 2.0, 3.0, 100.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 100.0);
        // rank h = 0.75 * 3 = 2.25 -> 3 + 0.25 * (100 - 3)
        assert!((quantile(&v, 0.75) - 27.25).abs() < 1e-12);
        // median of four values interpolates the middle pair
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-12);
        let odd = [10.0, 20.0, 30.0];
        assert_eq!(quantile(&odd, 0.5), 20.0);
    }

    #[test]
    fn clip_from_ratio_alpha_one_is_exact_minmax() {
        let uppers = [1.0, 2.0, 3.0, 100.0];
        let lowers = [-50.0, -3.0, -2.0, -1.0];
        let r = clip_from_ratio(&uppers, &lowers, 1.0).unwrap();
        assert_eq!(r.upper, 100.0);
        assert_eq!(r.lower, -50.0);
    }

    #[test]
    fn clip_from_ratio_trims_both_tails_symmetrically() {
        let uppers = [1.0, 2.0, 3.0, 100.0];
        let lowers = [-100.0, -3.0, -2.0, -1.0];
        let r = clip_from_ratio(&uppers, &lowers, 0.75).unwrap();
        assert!((r.upper - 27.25).abs() < 1e-12);
        assert!((r.lower - (-27.25)).abs() < 1e-12);
    }

    #[test]
    fn token_bounds_per_row() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -4.0, 2.0, 0.5, 0.7, 0.6]).unwrap();
        let (u, l) = token_bounds(&x);
        assert_eq!(u, vec![2.0, 0.7]);
        assert_eq!(l, vec![-4.0, 0.5]);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, fx) = golden_min(0.0, 1.0, |x| (x - 0.3) * (x - 0.3) + 2.0);
        assert!((x - 0.3).abs() < 2e-3, "found {x}");
        assert!((fx - 2.0).abs() < 1e-5);
    }

    #[test]
    fn percentile_range_on_uniform_ramp() {
        // Values 0..1000 in one capture: keeping 90% central mass should
        // put the bounds near the 5th and 95th percentiles.
        let model = random_model(301, 1, 8, 2);
        let data: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let t = Tensor::new(vec![1000 / 8, 8], data).unwrap();
        let mut caps = BTreeMap::new();
        caps.insert("block0.query".to_string(), t);
        let cache = ActivationCache {
            batches: vec![],
            captures: vec![caps],
            fp_hidden: vec![],
        };
        let r = percentile_act(&cache, "block0.query", 0.9).unwrap();
        let bin = 999.0 / 2048.0;
        assert!((r.lower - 50.0).abs() < 2.0 * bin + 1.0, "lower {}", r.lower);
        assert!((r.upper - 950.0).abs() < 2.0 * bin + 1.0, "upper {}", r.upper);
        // ratio 1 keeps everything
        let full = percentile_act(&cache, "block0.query", 1.0).unwrap();
        assert_eq!(full.lower, 0.0);
        assert_eq!(full.upper, 999.0);
        let _ = model;
    }

    #[test]
    fn omse_shrinks_range_under_outliers() {
        // 65535 values in [0, 1) and one outlier at 100. At 4 bits the full
        // range wastes nearly every level on empty space (per-element error
        // ~1/3, total ~21800), while clipping near 4 costs (100-4)^2 ~ 9200
        // once and almost nothing per element, so the MSE-optimal range is
        // far below the outlier. Nonnegative data keeps the two-sided
        // factor shrink from clipping real mass at the bottom.
        let mut data: Vec<f64> = (0..65535).map(|i| (i % 2000) as f64 / 2000.0).collect();
        data.push(100.0);
        let t = Tensor::new(vec![8192, 8], data).unwrap();
        let mut caps = BTreeMap::new();
        caps.insert("block0.query".to_string(), t);
        let cache = ActivationCache {
            batches: vec![],
            captures: vec![caps],
            fp_hidden: vec![],
        };
        let (p, mse) = omse_act(&cache, "block0.query", 4, OmseSearch::Grid).unwrap();
        let minmax = QuantParams::from_range(
            minmax_act_range(&cache, "block0.query").unwrap(),
            4,
        )
        .unwrap();
        let minmax_mse = act_mse(&cache, "block0.query", &minmax).unwrap();
        assert!(mse < minmax_mse, "omse {mse} should beat minmax {minmax_mse}");
        assert!(
            p.range_max(0) < 0.5 * 100.0,
            "range {} should have shrunk well below the outlier",
            p.range_max(0)
        );
        // recorded mse matches an independent recomputation
        let recomputed = act_mse(&cache, "block0.query", &p).unwrap();
        assert!((mse - recomputed).abs() < 1e-9 * mse.max(1.0));
    }

    #[test]
    fn omse_grid_and_golden_section_agree_on_heavy_tailed_data() {
        use rand::{Rng, SeedableRng};
        // Student-t with 3 degrees of freedom: heavy tails, finite variance.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let dist = rand_distr::StudentT::new(3.0).unwrap();
        for seed_round in 0..4 {
            let data: Vec<f64> = (0..4096).map(|_| rng.sample(dist)).collect();
            let t = Tensor::new(vec![512, 8], data).unwrap();
            let mut caps = BTreeMap::new();
            caps.insert("block0.query".to_string(), t);
            let cache = ActivationCache {
                batches: vec![],
                captures: vec![caps],
                fp_hidden: vec![],
            };
            let (_, grid) =
                omse_act(&cache, "block0.query", 4, OmseSearch::Grid).unwrap();
            let (_, golden) =
                omse_act(&cache, "block0.query", 4, OmseSearch::GoldenSection).unwrap();
            let floor = grid.min(golden);
            assert!(
                (grid - golden).abs() <= 0.01 * floor,
                "round {seed_round}: grid {grid} vs golden {golden} differ by \
                 more than 1% of {floor}"
            );
        }
    }

    #[test]
    fn calibrate_minmax_covers_every_slot_and_runs_quantized() {
        let mut model = random_model(302, 2, 8, 2);
        let data = small_data(&model, 8);
        let cfg = CalibrationConfig::new(Method::MinMax, BitsSpec::uniform(6));
        let out = calibrate(&mut model, &data, &cfg).unwrap();
        assert_eq!(out.result.slots.len(), model.nodes.len());
        assert_eq!(out.result.method, "minmax");
        assert_eq!(out.result.bits, "6-6-6");
        assert!(!out.result.migrated);
        assert!(out.result.final_loss.unwrap() >= 0.0);
        let b = batch(5, 2, 5, 16);
        forward(&model, &b, &ForwardOptions::quant()).unwrap();
    }

    #[test]
    fn calibrate_rejects_mismatched_data() {
        let mut model = random_model(303, 1, 8, 2);
        let mut data = small_data(&model, 4);
        data.seq_len = 7;
        data.calibration = vec![vec![0; 7]];
        data.eval.sequences = vec![vec![0; 7]];
        data.eval.labels = vec![0];
        let cfg = CalibrationConfig::new(Method::MinMax, BitsSpec::uniform(8));
        assert!(calibrate(&mut model, &data, &cfg).is_err());
    }

    #[test]
    fn coarse_search_alpha_one_equals_minmax_loss() {
        let mut model = random_model(304, 2, 8, 2);
        let data = small_data(&model, 8);
        model.place_quant_nodes(BitsSpec::uniform(4)).unwrap();
        let cache = build_cache(&model, &data.calibration, 4).unwrap();
        set_minmax_weights(&mut model).unwrap();

        // loss under plain minmax activations
        let mut mm = model.clone();
        set_minmax_acts(&mut mm, &cache).unwrap();
        let mm_loss = quant_loss(&mm, &cache).unwrap();

        let outcome = coarse_search(&mut model, &cache, 10).unwrap();
        assert_eq!(outcome.losses.len(), 10);
        assert!((outcome.losses[0].0 - 1.0).abs() < 1e-12);
        assert_eq!(
            outcome.losses[0].1, mm_loss,
            "alpha=1 must reproduce the unclipped loss exactly"
        );
        // the chosen alpha's loss is the minimum of the trace
        let min = outcome
            .losses
            .iter()
            .map(|(_, l)| *l)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_loss, min);
        // model holds the winning parameters: re-evaluating gives best_loss
        let reloss = quant_loss(&model, &cache).unwrap();
        assert_eq!(reloss, outcome.best_loss);
    }

    #[test]
    fn fine_tune_never_increases_loss() {
        let mut model = random_model(305, 1, 8, 2);
        let data = small_data(&model, 8);
        model.place_quant_nodes(BitsSpec::uniform(4)).unwrap();
        let cache = build_cache(&model, &data.calibration, 4).unwrap();
        set_minmax_weights(&mut model).unwrap();
        coarse_search(&mut model, &cache, 10).unwrap();
        let out = fine_tune(&mut model, &cache, 1e-5, 3).unwrap();
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] <= w[0], "loss increased: {:?}", out.epoch_losses);
        }
        let final_loss = quant_loss(&model, &cache).unwrap();
        assert_eq!(final_loss, *out.epoch_losses.last().unwrap());
    }

    #[test]
    fn fine_tune_rejects_a_hostile_learning_rate() {
        let mut model = random_model(306, 1, 8, 2);
        let data = small_data(&model, 8);
        model.place_quant_nodes(BitsSpec::uniform(4)).unwrap();
        let cache = build_cache(&model, &data.calibration, 4).unwrap();
        set_minmax_weights(&mut model).unwrap();
        coarse_search(&mut model, &cache, 5).unwrap();
        let before = quant_loss(&model, &cache).unwrap();
        // An absurd learning rate must either push a step nonpositive or
        // worsen the loss; both trigger the safeguard and leave the model
        // no worse than before.
        let out = fine_tune(&mut model, &cache, 1e6, 3).unwrap();
        assert_eq!(out.rejected, 1);
        let after = quant_loss(&model, &cache).unwrap();
        assert!(after <= before * (1.0 + 1e-12));
    }

    #[test]
    fn easyquant_improves_its_own_objective() {
        let mut model = random_model(307, 1, 8, 2);
        let data = small_data(&model, 8);
        let cfg = CalibrationConfig::new(Method::EasyQuant, BitsSpec::uniform(4));
        // Baseline: the pair cosine under plain minmax.
        let mut mm_model = model.clone();
        let mm_cfg = CalibrationConfig::new(Method::MinMax, BitsSpec::uniform(4));
        calibrate(&mut mm_model, &data, &mm_cfg).unwrap();
        let cache = build_cache(&mm_model, &data.calibration, cfg.batch).unwrap();
        let x: Vec<&Tensor> = cache.captures.iter().map(|c| &c["block0.mha_ln"]).collect();
        let op = PairOp::ActWeight {
            x,
            w: mm_model.blocks[0].w1.weight.clone(),
        };
        let pa = mm_model.node("block0.mha_ln").unwrap().params.clone().unwrap();
        let pb = mm_model.node("block0.w1.weight").unwrap().params.clone().unwrap();
        let mm_cos = op.cosine(&pa, &pb, 5).unwrap();

        let out = calibrate(&mut model, &data, &cfg).unwrap();
        let tuned = out.result.slots["block0.mha_ln"].loss.unwrap();
        assert!(
            tuned >= mm_cos - 1e-9,
            "tuned cosine {tuned} must not fall below the minmax start {mm_cos}"
        );
        // embeddings stay minmax
        assert_eq!(out.result.slots["embedding.token"].method, "minmax");
        assert_eq!(out.result.slots["block0.query"].method, "easyquant");
    }

    #[test]
    fn twc_calibration_reports_alpha_and_trace() {
        let mut model = random_model(308, 1, 8, 2);
        let data = small_data(&model, 8);
        let mut cfg = CalibrationConfig::new(Method::Twc, BitsSpec::uniform(4));
        cfg.alpha_iters = 8;
        cfg.epochs = 2;
        let out = calibrate(&mut model, &data, &cfg).unwrap();
        let trace = out.trace.as_ref().unwrap();
        assert_eq!(trace.coarse.len(), 8);
        assert!(!trace.fine.is_empty());
        let alpha = out.result.slots["block0.query"].alpha.unwrap();
        assert!(out.trace.unwrap().coarse.iter().any(|(a, _)| *a == alpha));
        assert_eq!(out.result.slots["block0.wq.weight"].method, "minmax");
        assert_eq!(out.result.slots["block0.query"].method, "twc");
        assert_eq!(
            out.result.final_loss.unwrap(),
            quant_loss(&model, &build_cache(&model, &data.calibration, cfg.batch).unwrap())
                .unwrap()
        );
    }

    #[test]
    fn calibration_is_deterministic() {
        let make = || {
            let mut model = random_model(309, 1, 8, 2);
            let data = small_data(&model, 8);
            let mut cfg = CalibrationConfig::new(Method::Twc, BitsSpec::uniform(6));
            cfg.alpha_iters = 5;
            let out = calibrate(&mut model, &data, &cfg).unwrap();
            serde_json::to_string(&out.result).unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn apply_calibration_reproduces_the_calibrated_model() {
        let mut model = random_model(310, 2, 8, 2);
        let pristine = model.clone();
        let data = small_data(&model, 8);
        let cfg = CalibrationConfig::new(Method::MinMax, BitsSpec::uniform(6));
        let out = calibrate(&mut model, &data, &cfg).unwrap();

        let mut fresh = pristine.clone();
        apply_calibration(&mut fresh, &out.result).unwrap();
        let b = batch(5, 3, 5, 16);
        let a = forward(&model, &b, &ForwardOptions::quant()).unwrap();
        let c = forward(&fresh, &b, &ForwardOptions::quant()).unwrap();
        assert_eq!(a.logits, c.logits);

        // serde round trip preserves the result exactly
        let text = serde_json::to_string(&out.result).unwrap();
        let parsed: CalibrationResult = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, out.result);

        // migrated-flag mismatch is refused
        let mut migrated = pristine.clone();
        crate::migration::migrate(&mut migrated).unwrap();
        assert!(apply_calibration(&mut migrated, &out.result).is_err());
    }

    #[test]
    fn method_names_parse() {
        for (s, m) in [
            ("minmax", Method::MinMax),
            ("omse", Method::Omse),
            ("percentile", Method::Percentile),
            ("easyquant", Method::EasyQuant),
            ("twc", Method::Twc),
        ] {
            assert_eq!(Method::from_str(s).unwrap(), m);
            assert_eq!(m.to_string(), s);
        }
        assert!(Method::from_str("magic").is_err());
    }
}
