//! Diagnostics: where quantization error comes from, what it costs, and
//! what it buys.
//!
//! * [`node_report`] — per-slot cosine similarity between each activation
//!   and a fake-quantized copy of itself at a given bit width, sorted
//!   worst-first; slots below 99% get flagged.
//! * [`outlier_structure`] — per-dimension and per-token maxima at the
//!   LayerNorm-output and embedding slots, plus the fraction of tokens a
//!   given clip value would touch. This is the evidence that outliers
//!   concentrate in a few hidden dimensions and a few tokens.
//! * [`clip_impact_sweep`] — clamps LayerNorm outputs at a range of values
//!   during full-precision evaluation and records accuracy, showing how
//!   little of the extreme activation mass the task actually uses.
//! * [`model_size`] — bit-accounted storage sizes against an f32 baseline.
//! * [`evaluate`] — classification accuracy in either run mode.

use crate::error::{Error, Result};
use crate::forward::{forward, ForwardOptions, HardClip, RunMode};
use crate::io::LabeledSet;
use crate::model::ModelGraph;
use crate::quantizer::{self, ClipRange, QuantParams};
use crate::slot::{self, SlotClass};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Streaming cosine over several pairs of tensors, reported in percent.
#[derive(Default, Clone, Copy)]
pub(crate) struct CosineAcc {
    dot: f64,
    na: f64,
    nb: f64,
}

impl CosineAcc {
    pub(crate) fn add(&mut self, a: &[f64], b: &[f64]) {
        for (&x, &y) in a.iter().zip(b) {
            self.dot += x * y;
            self.na += x * x;
            self.nb += y * y;
        }
    }

    pub(crate) fn pct(&self) -> f64 {
        let denom = (self.na * self.nb).sqrt();
        if denom == 0.0 {
            if self.na == 0.0 && self.nb == 0.0 {
                return 100.0;
            }
            return 0.0;
        }
        100.0 * self.dot / denom
    }
}

/// Cosine similarity of two equal-length vectors, in percent.
pub fn cosine_similarity_pct(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine over mismatched lengths");
    let mut acc = CosineAcc::default();
    acc.add(a, b);
    acc.pct()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeReportRow {
    pub slot: String,
    pub cosine_pct: f64,
    /// True when the cosine falls below 99%.
    pub flagged: bool,
}

const FLAG_THRESHOLD_PCT: f64 = 99.0;

/// Fake-quantize each slot's full-precision activation at `bits` — with an
/// asymmetric per-tensor range read off that activation itself — and report
/// the cosine similarity against the original, worst first. Each slot is
/// measured in isolation: the rest of the network stays at full precision,
/// so a bad rank means the slot's own value distribution quantizes poorly,
/// not that upstream error compounded through the graph.
pub fn node_report(
    model: &ModelGraph,
    seqs: &[Vec<u32>],
    bits: u8,
    batch: usize,
) -> Result<Vec<NodeReportRow>> {
    let fp_opts = ForwardOptions {
        capture_slots: true,
        ..ForwardOptions::fp()
    };
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for chunk in seqs.chunks(batch) {
        let fp = forward(model, chunk, &fp_opts)?;
        for (name, t) in &fp.captures {
            pooled
                .entry(name.clone())
                .or_default()
                .extend_from_slice(t.data());
        }
    }
    let mut rows = Vec::with_capacity(pooled.len());
    for (slot, data) in pooled {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = if hi - lo < 1e-12 {
            ClipRange::new(lo - 5e-13, lo + 5e-13)?
        } else {
            ClipRange::new(lo, hi)?
        };
        let t = Tensor::new(vec![data.len()], data)?;
        let q = quantizer::fake_quant(&t, &QuantParams::from_range(range, bits)?)?;
        let cosine_pct = cosine_similarity_pct(q.data(), t.data());
        rows.push(NodeReportRow {
            slot,
            cosine_pct,
            flagged: cosine_pct < FLAG_THRESHOLD_PCT,
        });
    }
    rows.sort_by(|a, b| {
        a.cosine_pct
            .partial_cmp(&b.cosine_pct)
            .unwrap()
            .then_with(|| a.slot.cmp(&b.slot))
    });
    Ok(rows)
}

pub fn render_node_report_csv(rows: &[NodeReportRow]) -> String {
    let mut out = String::from("slot,cosine_pct,flagged\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{}\n", r.slot, r.cosine_pct, r.flagged));
    }
    out
}

/// Outlier geometry of one slot, over a full dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutliers {
    pub slot: String,
    /// Maximum |x| seen in each feature dimension.
    pub dim_max_abs: Vec<f64>,
    /// The `top_tokens` largest per-token maxima as (global token index,
    /// max |x|), sorted descending. The global index counts tokens in
    /// dataset order: `sequence_index * seq_len + position`.
    pub top_tokens: Vec<(usize, f64)>,
    /// For each probed clip value: (clip value, fraction of tokens whose
    /// max |x| exceeds it).
    pub clipped_fraction: Vec<(f64, f64)>,
}

const TOP_TOKENS: usize = 16;

/// Slots whose rows are tokens with residual-stream geometry: the embedding
/// sum and every LayerNorm output.
fn outlier_slots(blocks: usize) -> Vec<(String, SlotClass)> {
    let mut v = vec![(slot::input_embedding(), SlotClass::InputEmbedding)];
    for b in 0..blocks {
        v.push((slot::activation(SlotClass::MhaLn, b), SlotClass::MhaLn));
        v.push((slot::activation(SlotClass::FfnLn, b), SlotClass::FfnLn));
    }
    v
}

/// Measure per-dimension and per-token maxima at the embedding and
/// LayerNorm slots of a full-precision run.
pub fn outlier_structure(
    model: &ModelGraph,
    seqs: &[Vec<u32>],
    batch: usize,
    clip_values: &[f64],
) -> Result<Vec<SlotOutliers>> {
    let opts = ForwardOptions {
        capture_slots: true,
        ..ForwardOptions::fp()
    };
    let n = model.meta.hidden;
    let slots = outlier_slots(model.meta.blocks);
    let mut dim_max: BTreeMap<String, Vec<f64>> =
        slots.iter().map(|(s, _)| (s.clone(), vec![0.0; n])).collect();
    let mut token_max: BTreeMap<String, Vec<f64>> =
        slots.iter().map(|(s, _)| (s.clone(), Vec::new())).collect();
    for chunk in seqs.chunks(batch) {
        let r = forward(model, chunk, &opts)?;
        for (name, _) in &slots {
            let t = &r.captures[name];
            let dm = dim_max.get_mut(name).unwrap();
            let tm = token_max.get_mut(name).unwrap();
            for row_i in 0..t.rows() {
                let row = t.row(row_i);
                let mut row_peak = 0.0f64;
                for (j, &v) in row.iter().enumerate() {
                    let a = v.abs();
                    if a > dm[j] {
                        dm[j] = a;
                    }
                    row_peak = row_peak.max(a);
                }
                tm.push(row_peak);
            }
        }
    }
    let mut out = Vec::with_capacity(slots.len());
    for (name, _) in slots {
        let tm = &token_max[&name];
        let total = tm.len() as f64;
        let mut indexed: Vec<(usize, f64)> = tm.iter().copied().enumerate().collect();
        indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        indexed.truncate(TOP_TOKENS);
        let clipped_fraction = clip_values
            .iter()
            .map(|&c| (c, tm.iter().filter(|&&m| m > c).count() as f64 / total))
            .collect();
        out.push(SlotOutliers {
            slot: name.clone(),
            dim_max_abs: dim_max.remove(&name).unwrap(),
            top_tokens: indexed,
            clipped_fraction,
        });
    }
    Ok(out)
}

pub fn render_outlier_csv(slots: &[SlotOutliers]) -> String {
    let mut out = String::from("slot,kind,index,value\n");
    for s in slots {
        for (j, v) in s.dim_max_abs.iter().enumerate() {
            out.push_str(&format!("{},dim,{j},{v:.6}\n", s.slot));
        }
        for (idx, v) in &s.top_tokens {
            out.push_str(&format!("{},token,{idx},{v:.6}\n", s.slot));
        }
        for (c, f) in &s.clipped_fraction {
            out.push_str(&format!("{},clip,{c:.6},{f:.6}\n", s.slot));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSweepRow {
    pub clip_value: f64,
    pub accuracy_pct: f64,
    /// Fraction of tokens clamped, one entry per block's ffn_ln slot.
    pub clipped_fraction: Vec<f64>,
}

/// Clamp every block's ffn_ln output to `±(fraction * peak)` during
/// full-precision evaluation, for each fraction, where `peak` is the largest
/// |x| those slots reach on the evaluation set. Returns one row per
/// fraction, in the given order. `fraction = 1` clips nothing and must
/// reproduce the unclipped accuracy.
pub fn clip_impact_sweep(
    model: &ModelGraph,
    eval: &LabeledSet,
    fractions: &[f64],
    batch: usize,
) -> Result<Vec<ClipSweepRow>> {
    // Peak over all ffn_ln slots.
    let opts = ForwardOptions {
        capture_slots: true,
        ..ForwardOptions::fp()
    };
    let mut peak = 0.0f64;
    for chunk in eval.sequences.chunks(batch) {
        let r = forward(model, chunk, &opts)?;
        for b in 0..model.meta.blocks {
            let t = &r.captures[&slot::activation(SlotClass::FfnLn, b)];
            peak = peak.max(t.max_abs());
        }
    }
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(f > 0.0) {
            return Err(Error::config(format!("clip fraction {f} must be positive")));
        }
        let clip = HardClip {
            class: SlotClass::FfnLn,
            value: f * peak,
        };
        let opts = ForwardOptions {
            hard_clip: Some(clip),
            ..ForwardOptions::fp()
        };
        let mut correct = 0usize;
        let mut clipped = vec![0usize; model.meta.blocks];
        let mut totals = vec![0usize; model.meta.blocks];
        let mut offset = 0usize;
        for chunk in eval.sequences.chunks(batch) {
            let r = forward(model, chunk, &opts)?;
            for (i, &logit) in r.logits.iter().enumerate() {
                let pred = u8::from(logit > 0.0);
                if pred == eval.labels[offset + i] {
                    correct += 1;
                }
            }
            offset += chunk.len();
            let tally = r.clip_tally.expect("hard clip requested");
            for (b, &(c, t)) in tally.per_slot.iter().enumerate() {
                clipped[b] += c;
                totals[b] += t;
            }
        }
        rows.push(ClipSweepRow {
            clip_value: f * peak,
            accuracy_pct: 100.0 * correct as f64 / eval.sequences.len() as f64,
            clipped_fraction: clipped
                .iter()
                .zip(&totals)
                .map(|(&c, &t)| c as f64 / t as f64)
                .collect(),
        });
    }
    Ok(rows)
}

pub fn render_clip_sweep_csv(rows: &[ClipSweepRow]) -> String {
    let blocks = rows.first().map_or(0, |r| r.clipped_fraction.len());
    let mut out = String::from("clip_value,accuracy_pct");
    for b in 0..blocks {
        out.push_str(&format!(",clipped_frac_block{b}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:.6},{:.2}", r.clip_value, r.accuracy_pct));
        for f in &r.clipped_fraction {
            out.push_str(&format!(",{f:.6}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub weight_params: usize,
    pub embedding_params: usize,
    pub weight_mib: f64,
    pub embedding_mib: f64,
    pub total_mib: f64,
    /// Same parameters stored as 4-byte floats.
    pub fp32_mib: f64,
    pub compression_ratio: f64,
}

const MIB: f64 = 1024.0 * 1024.0;

/// Storage size with every tensor at its quant node's bit width. Parameters
/// without their own node (biases, LayerNorm scales/offsets, migrated
/// shortcut multipliers) count at the weight-class width. Requires quant
/// nodes to be placed.
pub fn model_size(model: &ModelGraph) -> Result<SizeReport> {
    if model.nodes.is_empty() {
        return Err(Error::config(
            "model has no quant nodes; place them before sizing",
        ));
    }
    let (weight_params, embedding_params) = model.param_counts();
    let weight_class_bits = model.node(&slot::head_weight())?.bits as f64;
    let mut weight_bits = 0.0;
    let mut embedding_bits = 0.0;
    let mut slot_covered = 0usize;
    for name in slot::parameter_slots(model.meta.blocks) {
        let numel = crate::io::parameter_tensor(model, &name)?.numel();
        let bits = model.node(&name)?.bits as f64;
        if slot::is_embedding(&name) {
            embedding_bits += numel as f64 * bits;
        } else {
            weight_bits += numel as f64 * bits;
            slot_covered += numel;
        }
    }
    let leftover = weight_params - slot_covered;
    weight_bits += leftover as f64 * weight_class_bits;
    let weight_mib = weight_bits / 8.0 / MIB;
    let embedding_mib = embedding_bits / 8.0 / MIB;
    let total_mib = weight_mib + embedding_mib;
    let fp32_mib = (weight_params + embedding_params) as f64 * 4.0 / MIB;
    Ok(SizeReport {
        weight_params,
        embedding_params,
        weight_mib,
        embedding_mib,
        total_mib,
        fp32_mib,
        compression_ratio: fp32_mib / total_mib,
    })
}

pub fn render_size_csv(r: &SizeReport) -> String {
    let mut out = String::from("class,params,mib\n");
    out.push_str(&format!("weight,{},{:.6}\n", r.weight_params, r.weight_mib));
    out.push_str(&format!(
        "embedding,{},{:.6}\n",
        r.embedding_params, r.embedding_mib
    ));
    out.push_str(&format!(
        "total,{},{:.6}\n",
        r.weight_params + r.embedding_params,
        r.total_mib
    ));
    out.push_str(&format!(
        "fp32_reference,{},{:.6}\n",
        r.weight_params + r.embedding_params,
        r.fp32_mib
    ));
    out
}

/// Classification accuracy (percent) of `model` on a labeled set.
pub fn evaluate(model: &ModelGraph, set: &LabeledSet, mode: RunMode, batch: usize) -> Result<f64> {
    if set.sequences.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    if set.sequences.len() != set.labels.len() {
        return Err(Error::format("evaluation labels do not match sequences"));
    }
    let opts = match mode {
        RunMode::Fp => ForwardOptions::fp(),
        RunMode::Quant => ForwardOptions::quant(),
    };
    let mut correct = 0usize;
    let mut offset = 0usize;
    for chunk in set.sequences.chunks(batch) {
        let r = forward(model, chunk, &opts)?;
        for (i, &logit) in r.logits.iter().enumerate() {
            if u8::from(logit > 0.0) == set.labels[offset + i] {
                correct += 1;
            }
        }
        offset += chunk.len();
    }
    Ok(100.0 * correct as f64 / set.sequences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BitsSpec;
    use crate::testutil::{batch, random_model, rough_calibrate};

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity_pct(&[1.0, 0.0], &[2.0, 0.0]) - 100.0).abs() < 1e-12);
        assert!(cosine_similarity_pct(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
        assert!((cosine_similarity_pct(&[1.0, 1.0], &[-1.0, -1.0]) + 100.0).abs() < 1e-12);
        // hand value: cos between (1,2) and (2,1) = 4/5
        assert!((cosine_similarity_pct(&[1.0, 2.0], &[2.0, 1.0]) - 80.0).abs() < 1e-9);
        assert_eq!(cosine_similarity_pct(&[0.0], &[0.0]), 100.0);
        assert_eq!(cosine_similarity_pct(&[0.0], &[1.0]), 0.0);
    }

    #[test]
    fn node_report_sorted_and_flags_only_clear_as_bits_rise() {
        let seqs = batch(41, 6, 5, 16);
        let model = random_model(401, 2, 8, 2);
        let report_at = |bits: u8| node_report(&model, &seqs, bits, 3).unwrap();
        let coarse = report_at(4);
        assert_eq!(coarse.len(), crate::slot::activation_slots(2).len());
        for w in coarse.windows(2) {
            assert!(w[0].cosine_pct <= w[1].cosine_pct, "rows must sort ascending");
        }
        for r in &coarse {
            assert_eq!(r.flagged, r.cosine_pct < 99.0);
        }
        // Same activations, rising bits: a slot that a lower width left
        // unflagged must never become flagged at a higher width.
        let flagged_at = |rows: &[NodeReportRow]| -> std::collections::BTreeSet<String> {
            rows.iter()
                .filter(|r| r.flagged)
                .map(|r| r.slot.clone())
                .collect()
        };
        let mut prev = flagged_at(&coarse);
        for bits in [6u8, 8, 30] {
            let rows = report_at(bits);
            let cur = flagged_at(&rows);
            assert!(
                cur.is_subset(&prev),
                "bits {bits} flagged {cur:?}, not a subset of {prev:?}"
            );
            prev = cur;
        }
        assert!(prev.is_empty(), "30 bits should flag nothing");
    }

    #[test]
    fn outlier_structure_finds_a_planted_dimension() {
        // Boost one embedding column so dimension 5 dominates the input
        // embedding slot; the report must rank it first there.
        let mut model = random_model(402, 1, 8, 2);
        for r in 0..model.meta.vocab {
            model.tok_embedding.row_mut(r)[5] *= 50.0;
        }
        let seqs = batch(42, 4, 5, 16);
        let out = outlier_structure(&model, &seqs, 2, &[1e9]).unwrap();
        let emb = out.iter().find(|s| s.slot == "input_embedding").unwrap();
        let top_dim = emb
            .dim_max_abs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(top_dim, 5);
        assert_eq!(emb.top_tokens.len(), TOP_TOKENS.min(4 * 5));
        // nothing exceeds an absurd clip value
        assert_eq!(emb.clipped_fraction[0].1, 0.0);
        // slots covered: input_embedding + 2 per block
        assert_eq!(out.len(), 1 + 2);
    }

    #[test]
    fn clip_sweep_fraction_one_is_lossless() {
        let model = random_model(403, 2, 8, 2);
        let seqs = batch(43, 8, 5, 16);
        let labels = {
            // label by the model's own fp sign so accuracy is 100%
            let r = forward(&model, &seqs, &ForwardOptions::fp()).unwrap();
            r.logits.iter().map(|&l| u8::from(l > 0.0)).collect()
        };
        let eval = LabeledSet {
            sequences: seqs,
            labels,
        };
        let rows = clip_impact_sweep(&model, &eval, &[1.0, 0.05], 4).unwrap();
        assert_eq!(rows[0].accuracy_pct, 100.0);
        assert!(rows[0].clipped_fraction.iter().all(|&f| f == 0.0));
        // clipping at 5% of peak touches almost every token
        assert!(rows[1].clipped_fraction.iter().all(|&f| f > 0.5));
    }

    #[test]
    fn size_report_follows_bit_widths() {
        let mut model = random_model(404, 2, 8, 2);
        model.place_quant_nodes(BitsSpec::uniform(8)).unwrap();
        let r8 = model_size(&model).unwrap();
        // 8-bit everything is exactly a quarter of f32
        assert!((r8.total_mib * 4.0 - r8.fp32_mib).abs() < 1e-12);
        assert!((r8.compression_ratio - 4.0).abs() < 1e-12);

        let mut model30 = random_model(404, 2, 8, 2);
        model30.place_quant_nodes(BitsSpec::uniform(30)).unwrap();
        let r30 = model_size(&model30).unwrap();
        assert!((r30.total_mib / r8.total_mib - 30.0 / 8.0).abs() < 1e-9);

        // mixed widths: embeddings at 4, weights at 8
        let mut mixed = random_model(404, 2, 8, 2);
        mixed
            .place_quant_nodes(BitsSpec {
                weight: 8,
                embedding: 4,
                activation: 8,
            })
            .unwrap();
        let rm = model_size(&mixed).unwrap();
        assert!((rm.embedding_mib * 2.0 - r8.embedding_mib).abs() < 1e-12);
        assert_eq!(rm.weight_mib, r8.weight_mib);

        let unplaced = random_model(404, 2, 8, 2);
        assert!(model_size(&unplaced).is_err());
    }

    #[test]
    fn evaluate_counts_sign_matches() {
        let model = random_model(405, 1, 8, 2);
        let seqs = batch(44, 6, 5, 16);
        let r = forward(&model, &seqs, &ForwardOptions::fp()).unwrap();
        let labels: Vec<u8> = r.logits.iter().map(|&l| u8::from(l > 0.0)).collect();
        let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
        let set = LabeledSet {
            sequences: seqs.clone(),
            labels,
        };
        assert_eq!(evaluate(&model, &set, RunMode::Fp, 4).unwrap(), 100.0);
        let bad = LabeledSet {
            sequences: seqs,
            labels: flipped,
        };
        assert_eq!(evaluate(&model, &bad, RunMode::Fp, 4).unwrap(), 0.0);
    }

    #[test]
    fn csv_renderers_have_stable_headers() {
        assert!(render_node_report_csv(&[]).starts_with("slot,cosine_pct,flagged\n"));
        assert!(render_outlier_csv(&[]).starts_with("slot,kind,index,value\n"));
        assert!(render_clip_sweep_csv(&[]).starts_with("clip_value,accuracy_pct\n"));
        let mut model = random_model(406, 1, 8, 2);
        model.place_quant_nodes(BitsSpec::uniform(6)).unwrap();
        let csv = render_size_csv(&model_size(&model).unwrap());
        assert!(csv.starts_with("class,params,mib\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
