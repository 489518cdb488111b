//! Synthetic benchmark generator: a random encoder whose activations show
//! structured outliers, plus a labeled token-classification dataset it can
//! solve almost perfectly at full precision.
//!
//! The construction plants two kinds of structure on purpose:
//!
//! * **Outlier dimensions** — a few hidden dimensions get LayerNorm scales
//!   around `spike_gamma` while the rest sit near 1, so post-LayerNorm
//!   activations spike in those dimensions (and only those). Only the
//!   *attention* LayerNorm of each spiked block carries the spike: once it
//!   has multiplied the spiked dims for every token, those dims arrive
//!   saturated at the FFN LayerNorm — attention pools the special token's
//!   value vector into every position, so after one scaled normalization
//!   all tokens share the ceiling — and a second spike on the same dims
//!   would barely change that LayerNorm's scaled output.
//! * **Outlier tokens** — a few reserved vocabulary ids have embedding rows
//!   with large norm concentrated on the spiked dimensions. Every sequence
//!   carries exactly one such token at position 0, so a small, predictable
//!   fraction of tokens dominates the activation range.
//!
//! Labels come from a planted linear direction orthogonal to the spiked
//! dimensions, read off the mean-pooled final hidden state. The scoring head
//! is then fit by ridge regression on held-out sequences, which makes the
//! task solvable by the model itself (not just in principle). Sequences too
//! close to the decision boundary are rejected, so full-precision accuracy
//! is high and drops under quantization damage are attributable to the
//! quantizer rather than boundary noise.
//!
//! Everything is driven by one seeded RNG stream: the same config always
//! produces byte-identical model and data files.

use crate::error::{Error, Result};
use crate::forward::{forward, ForwardOptions, RunMode};
use crate::io::{DataSet, LabeledSet};
use crate::metrics;
use crate::model::{EncoderBlock, LayerNormParams, Linear, LnMode, ModelGraph, ModelMeta};
use crate::tensor::{dot, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    /// How many hidden dimensions carry spiked LayerNorm scales.
    pub spiked_dims: usize,
    /// Multiplier applied to the LayerNorm scale of spiked dimensions.
    pub spike_gamma: f64,
    /// How many leading blocks have their attention LayerNorm scale spiked.
    /// Spiking every block makes the spiked share of *every* token grow
    /// toward its cap at each successive LayerNorm, which washes out the
    /// planted token-level structure by mid-depth; spiking only the first
    /// block(s) keeps a few tokens dominant all the way to the output.
    pub spiked_blocks: usize,
    /// Reserved vocabulary ids (0..special_tokens) with outlier embeddings;
    /// each sequence starts with one of them.
    pub special_tokens: usize,
    /// Special embedding row norm, in units of sqrt(hidden).
    pub special_scale: f64,
    /// Relative spread of special row norms across the reserved ids: id k
    /// gets scale `special_scale * (1 + special_spread * u)` with `u` spaced
    /// evenly in [-1, 1]. Without a spread all special occurrences share one
    /// peak value and a token-quantile clip can only keep or drop the whole
    /// band; the spread builds the graded tail that staged clipping bites
    /// into one id at a time.
    pub special_spread: f64,
    /// Fraction of a special row's squared norm placed on spiked dimensions
    /// (as sqrt: tilt 0.8 puts 64% of the mass there).
    pub special_tilt: f64,
    /// Shrink applied to spiked dimensions of ordinary embedding rows, so
    /// spikes come from the planted structure rather than from noise.
    pub ordinary_shrink: f64,
    pub calib_sequences: usize,
    pub eval_sequences: usize,
    /// Unlabeled pool used to fit the scoring head.
    pub train_sequences: usize,
    /// Sequences within this many standard deviations of the label
    /// threshold are rejected.
    pub margin_sigma: f64,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            blocks: 2,
            hidden: 64,
            heads: 4,
            seq_len: 32,
            vocab: 256,
            spiked_dims: 2,
            spike_gamma: 8.0,
            spiked_blocks: 1,
            special_tokens: 3,
            special_scale: 6.0,
            special_spread: 0.5,
            special_tilt: 0.8,
            ordinary_shrink: 0.35,
            calib_sequences: 256,
            eval_sequences: 256,
            train_sequences: 512,
            margin_sigma: 0.35,
            ridge_lambda: 1e-3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::config("blocks, hidden and heads must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len must be at least 2"));
        }
        if self.special_tokens == 0 || self.special_tokens >= self.vocab {
            return Err(Error::config(
                "special_tokens must be at least 1 and leave room for ordinary ids",
            ));
        }
        if self.spiked_dims == 0 || self.spiked_dims >= self.hidden {
            return Err(Error::config(
                "spiked_dims must be at least 1 and below hidden",
            ));
        }
        if self.spiked_blocks == 0 || self.spiked_blocks > self.blocks {
            return Err(Error::config(
                "spiked_blocks must be at least 1 and at most blocks",
            ));
        }
        if !(self.special_tilt > 0.0 && self.special_tilt < 1.0) {
            return Err(Error::config("special_tilt must lie in (0, 1)"));
        }
        if !(self.special_scale > 0.0)
            || !(self.spike_gamma > 0.0)
            || !(self.ordinary_shrink > 0.0)
        {
            return Err(Error::config(
                "special_scale, spike_gamma and ordinary_shrink must be positive",
            ));
        }
        if !(self.special_spread >= 0.0 && self.special_spread < 1.0) {
            return Err(Error::config("special_spread must lie in [0, 1)"));
        }
        if self.calib_sequences == 0 || self.eval_sequences == 0 {
            return Err(Error::config("calibration and eval sets must be nonempty"));
        }
        if self.train_sequences < 2 * (self.hidden + 1) {
            return Err(Error::config(format!(
                "train_sequences {} too small to fit a {}-dim head; need at least {}",
                self.train_sequences,
                self.hidden,
                2 * (self.hidden + 1)
            )));
        }
        if !(self.margin_sigma >= 0.0) || !(self.ridge_lambda > 0.0) {
            return Err(Error::config(
                "margin_sigma must be nonnegative and ridge_lambda positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SynthOutput {
    pub model: ModelGraph,
    pub data: DataSet,
    /// Ground truth: which hidden dimensions carry the planted spikes.
    pub spiked_dims: Vec<usize>,
    /// Slot names of the LayerNorms whose scale carries the spikes (the
    /// attention LayerNorms of the leading `spiked_blocks` blocks).
    pub spiked_lns: Vec<String>,
    /// Accuracy of the generated model on the generated eval split, full
    /// precision.
    pub fp_eval_accuracy: f64,
}

const BATCH: usize = 32;
/// Candidate-generation rounds before giving up on filling the eval set.
const MAX_REJECTION_ROUNDS: usize = 200;

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spiked = pick_dims(&mut rng, cfg.spiked_dims, cfg.hidden, &[]);
    let mut model = build_model(&mut rng, cfg, &spiked)?;

    // Fit the head: score an unlabeled pool along the planted direction,
    // threshold at the median, drop sequences inside the margin, then ridge-
    // regress pooled features onto +-1 targets.
    let mut seq_counter = 0usize;
    let train: Vec<Vec<u32>> = (0..cfg.train_sequences)
        .map(|_| gen_sequence(&mut rng, cfg, &mut seq_counter))
        .collect();
    let feats = pooled_features(&model, &train)?;
    let w_plant = planted_direction(&mut rng, cfg, &spiked);
    let scores: Vec<f64> = feats.iter().map(|f| dot(f, &w_plant)).collect();
    let threshold = median(scores.clone());
    let margin = cfg.margin_sigma * std_dev(&scores);
    let kept: Vec<(&[f64], f64)> = feats
        .iter()
        .zip(&scores)
        .filter(|(_, &z)| (z - threshold).abs() > margin)
        .map(|(f, &z)| (f.as_slice(), if z > threshold { 1.0 } else { -1.0 }))
        .collect();
    if kept.len() < cfg.hidden + 1 {
        return Err(Error::numerical(format!(
            "margin rejection left only {} of {} training sequences",
            kept.len(),
            cfg.train_sequences
        )));
    }
    let (head_w, head_b) = ridge_fit(&kept, cfg.hidden, cfg.ridge_lambda)?;
    model.head = Linear {
        weight: Tensor::new(vec![1, cfg.hidden], head_w)?,
        bias: vec![head_b],
    };

    let calibration: Vec<Vec<u32>> = (0..cfg.calib_sequences)
        .map(|_| gen_sequence(&mut rng, cfg, &mut seq_counter))
        .collect();

    // Eval split: rejection-sample sequences outside the margin, labeled by
    // the planted direction (not by the fitted head).
    let mut eval_seqs: Vec<Vec<u32>> = Vec::with_capacity(cfg.eval_sequences);
    let mut labels: Vec<u8> = Vec::with_capacity(cfg.eval_sequences);
    let mut rounds = 0usize;
    while eval_seqs.len() < cfg.eval_sequences {
        rounds += 1;
        if rounds > MAX_REJECTION_ROUNDS {
            return Err(Error::numerical(
                "could not fill the eval set; margin_sigma rejects too much",
            ));
        }
        let cand: Vec<Vec<u32>> = (0..BATCH)
            .map(|_| gen_sequence(&mut rng, cfg, &mut seq_counter))
            .collect();
        let cand_feats = pooled_features(&model, &cand)?;
        for (seq, f) in cand.into_iter().zip(cand_feats) {
            if eval_seqs.len() == cfg.eval_sequences {
                break;
            }
            let z = dot(&f, &w_plant);
            if (z - threshold).abs() > margin {
                labels.push(u8::from(z > threshold));
                eval_seqs.push(seq);
            }
        }
    }
    let eval = LabeledSet {
        sequences: eval_seqs,
        labels,
    };
    let fp_eval_accuracy = metrics::evaluate(&model, &eval, RunMode::Fp, BATCH)?;

    let data = DataSet {
        seq_len: cfg.seq_len,
        vocab: cfg.vocab,
        calibration,
        eval,
    };
    data.validate()?;
    let spiked_lns = (0..cfg.spiked_blocks)
        .map(|b| crate::slot::activation(crate::slot::SlotClass::MhaLn, b))
        .collect();
    Ok(SynthOutput {
        model,
        data,
        spiked_dims: spiked,
        spiked_lns,
        fp_eval_accuracy,
    })
}

/// The model half of [`generate`].
pub fn gen_model(cfg: &SynthConfig) -> Result<ModelGraph> {
    Ok(generate(cfg)?.model)
}

/// The data half of [`generate`].
pub fn gen_data(cfg: &SynthConfig) -> Result<DataSet> {
    Ok(generate(cfg)?.data)
}

fn pick_dims(rng: &mut ChaCha8Rng, count: usize, hidden: usize, avoid: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(count);
    while dims.len() < count {
        let d = rng.gen_range(0..hidden);
        if !dims.contains(&d) && !avoid.contains(&d) {
            dims.push(d);
        }
    }
    dims.sort_unstable();
    dims
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, sd: f64) -> Tensor {
    let dist = Normal::new(0.0, sd).expect("valid normal");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, sd: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, sd).expect("valid normal");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Embedding row for reserved outlier token `id`: norm `special_scale *
/// sqrt(hidden)` scaled by the id's position in the `special_spread` ladder,
/// with `special_tilt^2` of the squared mass on the spiked dimensions and
/// the rest spread isotropically over the others.
fn special_row(rng: &mut ChaCha8Rng, cfg: &SynthConfig, spiked: &[usize], id: usize) -> Vec<f64> {
    let n = cfg.hidden;
    let u = if cfg.special_tokens > 1 {
        2.0 * id as f64 / (cfg.special_tokens - 1) as f64 - 1.0
    } else {
        0.0
    };
    let norm_target = cfg.special_scale * (1.0 + cfg.special_spread * u) * (n as f64).sqrt();
    let spike_amp =
        (cfg.special_tilt.powi(2) * norm_target.powi(2) / spiked.len() as f64).sqrt();
    let ordinary_norm = (1.0 - cfg.special_tilt.powi(2)).sqrt() * norm_target;

    let mut row = normal_vec(rng, n, 1.0);
    for &d in spiked {
        row[d] = 0.0;
    }
    let raw_norm = dot(&row, &row).sqrt().max(1e-12);
    for v in &mut row {
        *v *= ordinary_norm / raw_norm;
    }
    for &d in spiked {
        row[d] = if rng.gen_bool(0.5) { spike_amp } else { -spike_amp };
    }
    row
}

fn layer_norm_params(rng: &mut ChaCha8Rng, cfg: &SynthConfig, spiked: &[usize]) -> LayerNormParams {
    let mut gamma: Vec<f64> = (0..cfg.hidden).map(|_| rng.gen_range(0.8..1.2)).collect();
    for &d in spiked {
        gamma[d] *= cfg.spike_gamma;
    }
    LayerNormParams {
        gamma,
        beta: normal_vec(rng, cfg.hidden, 0.05),
    }
}

fn linear_layer(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Linear {
    Linear {
        weight: normal_tensor(rng, vec![out_dim, in_dim], (in_dim as f64).powf(-0.5)),
        bias: normal_vec(rng, out_dim, 0.02),
    }
}

fn build_model(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    attn_spiked: &[usize],
    ffn_spiked: &[usize],
) -> Result<ModelGraph> {
    let n = cfg.hidden;
    let mut tok = Vec::with_capacity(cfg.vocab * n);
    for id in 0..cfg.vocab {
        if id < cfg.special_tokens {
            tok.extend(special_row(rng, cfg, attn_spiked, id));
        } else {
            let mut row = normal_vec(rng, n, 1.0);
            for &d in attn_spiked {
                row[d] *= cfg.ordinary_shrink;
            }
            tok.extend(row);
        }
    }
    let tok_embedding = Tensor::new(vec![cfg.vocab, n], tok)?;
    let mut pos = normal_tensor(rng, vec![cfg.seq_len, n], 0.3);
    for r in 0..cfg.seq_len {
        for &d in attn_spiked {
            pos.row_mut(r)[d] *= cfg.ordinary_shrink;
        }
    }

    let blocks = (0..cfg.blocks)
        .map(|i| {
            let spiked_block = i < cfg.spiked_blocks;
            let mha_spiked = if spiked_block { attn_spiked } else { &[] };
            let ffn_spiked = if spiked_block { ffn_spiked } else { &[] };
            EncoderBlock {
                wq: linear_layer(rng, n, n),
                wk: linear_layer(rng, n, n),
                wv: linear_layer(rng, n, n),
                wo: linear_layer(rng, n, n),
                mha_ln: layer_norm_params(rng, cfg, mha_spiked),
                w1: linear_layer(rng, 4 * n, n),
                w2: linear_layer(rng, n, 4 * n),
                ffn_ln: layer_norm_params(rng, cfg, ffn_spiked),
                resid1_gamma: None,
                resid2_gamma: None,
            }
        })
        .collect();

    let model = ModelGraph {
        meta: ModelMeta {
            blocks: cfg.blocks,
            hidden: n,
            heads: cfg.heads,
            vocab: cfg.vocab,
            seq_len: cfg.seq_len,
            ln_mode: LnMode::Scaling,
            ln_eps: 1e-12,
        },
        tok_embedding,
        pos_embedding: pos,
        blocks,
        head: Linear {
            weight: Tensor::zeros(vec![1, n]),
            bias: vec![0.0],
        },
        nodes: BTreeMap::new(),
        migration: Vec::new(),
    };
    model.validate_dims()?;
    Ok(model)
}

/// One sequence: a rotating special token at position 0, ordinary ids after.
fn gen_sequence(rng: &mut ChaCha8Rng, cfg: &SynthConfig, counter: &mut usize) -> Vec<u32> {
    let mut seq = Vec::with_capacity(cfg.seq_len);
    seq.push((*counter % cfg.special_tokens) as u32);
    *counter += 1;
    for _ in 1..cfg.seq_len {
        seq.push(rng.gen_range(cfg.special_tokens..cfg.vocab) as u32);
    }
    seq
}

/// Unit vector with zero weight on the spiked dimensions, so the label
/// signal and the outlier structure live in disjoint subspaces.
fn planted_direction(rng: &mut ChaCha8Rng, cfg: &SynthConfig, spiked: &[usize]) -> Vec<f64> {
    let mut w = normal_vec(rng, cfg.hidden, 1.0);
    for &d in spiked {
        w[d] = 0.0;
    }
    let norm = dot(&w, &w).sqrt();
    for v in &mut w {
        *v /= norm;
    }
    w
}

/// Mean over sequence positions of the final hidden state, full precision.
fn pooled_features(model: &ModelGraph, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    let opts = ForwardOptions::fp();
    let n = model.meta.hidden;
    let t = model.meta.seq_len;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(BATCH) {
        let r = forward(model, chunk, &opts)?;
        for s in 0..chunk.len() {
            let mut f = vec![0.0; n];
            for pos in 0..t {
                for (acc, &v) in f.iter_mut().zip(r.hidden.row(s * t + pos)) {
                    *acc += v;
                }
            }
            for v in &mut f {
                *v /= t as f64;
            }
            out.push(f);
        }
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Ridge regression with an unpenalized-by-convention bias column folded in:
/// minimizes ||Xw + b - y||^2 + lambda ||(w, b)||^2. Returns (w, b).
fn ridge_fit(samples: &[(&[f64], f64)], dim: usize, lambda: f64) -> Result<(Vec<f64>, f64)> {
    let d = dim + 1;
    let mut a = vec![vec![0.0; d]; d];
    let mut c = vec![0.0; d];
    for (x, y) in samples {
        for i in 0..dim {
            for j in 0..dim {
                a[i][j] += x[i] * x[j];
            }
            a[i][dim] += x[i];
            a[dim][i] += x[i];
            c[i] += x[i] * y;
        }
        a[dim][dim] += 1.0;
        c[dim] += y;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += lambda;
    }
    let mut sol = solve_linear(a, c)?;
    let b = sol.pop().expect("bias slot present");
    Ok((sol, b))
}

/// Dense Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::numerical("singular system while fitting the head"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let d = a[col][col];
        for i in col + 1..n {
            let f = a[i][col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[i][j] -= f * a[col][j];
            }
            b[i] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= a[i][j] * x[j];
        }
        x[i] = s / a[i][i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slot;

    /// Small enough to run in milliseconds, large enough to show the
    /// planted structure.
    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            blocks: 2,
            hidden: 16,
            heads: 2,
            seq_len: 8,
            vocab: 32,
            calib_sequences: 24,
            eval_sequences: 32,
            train_sequences: 128,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn solve_linear_matches_hand_solution() {
        // 2x + y = 5, x + 3y = 10  =>  x = 1, y = 3
        let x = solve_linear(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
        // needs the row swap: zero pivot first
        let x = solve_linear(vec![vec![0.0, 1.0], vec![2.0, 0.0]], vec![3.0, 4.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
        assert!(solve_linear(vec![vec![1.0, 1.0], vec![2.0, 2.0]], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn ridge_fit_satisfies_normal_equations() {
        let xs: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0],
            vec![0.5, 1.0],
            vec![-1.0, 0.3],
            vec![0.2, -0.8],
            vec![1.5, 1.1],
        ];
        let samples: Vec<(&[f64], f64)> = xs
            .iter()
            .map(|x| (x.as_slice(), x[0] - 2.0 * x[1] + 0.5))
            .collect();
        let lambda = 1e-3;
        let (w, b) = ridge_fit(&samples, 2, lambda).unwrap();
        // gradient of the ridge objective must vanish at the solution
        let mut grad = vec![0.0; 3];
        for (x, y) in &samples {
            let pred = dot(x, &w) + b;
            let r = pred - y;
            grad[0] += 2.0 * r * x[0];
            grad[1] += 2.0 * r * x[1];
            grad[2] += 2.0 * r;
        }
        grad[0] += 2.0 * lambda * w[0];
        grad[1] += 2.0 * lambda * w[1];
        grad[2] += 2.0 * lambda * b;
        for g in grad {
            assert!(g.abs() < 1e-9, "nonzero gradient {g}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_projections_agree() {
        let cfg = tiny_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let ja = serde_json::to_string(&crate::io::model_to_file(&a.model)).unwrap();
        let jb = serde_json::to_string(&crate::io::model_to_file(&b.model)).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(
            serde_json::to_string(&a.data).unwrap(),
            serde_json::to_string(&b.data).unwrap()
        );
        assert_eq!(a.spiked_dims, b.spiked_dims);
        assert_eq!(a.fp_eval_accuracy, b.fp_eval_accuracy);
        let m = gen_model(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&crate::io::model_to_file(&m)).unwrap(), ja);
        let d = gen_data(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            serde_json::to_string(&a.data).unwrap()
        );
        let other = generate(&SynthConfig {
            seed: 12,
            ..tiny_cfg()
        })
        .unwrap();
        assert_ne!(serde_json::to_string(&crate::io::model_to_file(&other.model)).unwrap(), ja);
    }

    #[test]
    fn sequences_carry_one_special_token_each() {
        let cfg = tiny_cfg();
        let out = generate(&cfg).unwrap();
        let mut seen = [false; 3];
        for seq in out
            .data
            .calibration
            .iter()
            .chain(&out.data.eval.sequences)
        {
            assert_eq!(seq.len(), cfg.seq_len);
            assert!((seq[0] as usize) < cfg.special_tokens);
            seen[seq[0] as usize] = true;
            for &t in &seq[1..] {
                assert!((t as usize) >= cfg.special_tokens && (t as usize) < cfg.vocab);
            }
        }
        assert!(seen.iter().all(|&s| s), "all special ids should rotate in");
        assert!(out.data.validate().is_ok());
    }

    #[test]
    fn gamma_spikes_sit_on_the_chosen_dimensions() {
        let cfg = tiny_cfg();
        assert!(cfg.spiked_blocks < cfg.blocks, "test needs an unspiked block");
        let out = generate(&cfg).unwrap();
        assert_eq!(out.attn_spiked_dims.len(), cfg.spiked_dims);
        assert_eq!(out.ffn_spiked_dims.len(), cfg.spiked_dims);
        assert!(
            out.attn_spiked_dims.iter().all(|d| !out.ffn_spiked_dims.contains(d)),
            "attention and FFN spike sets must be disjoint"
        );
        let mut union: Vec<usize> = out
            .attn_spiked_dims
            .iter()
            .chain(&out.ffn_spiked_dims)
            .copied()
            .collect();
        union.sort_unstable();
        assert_eq!(union, out.spiked_dims);
        for (bi, block) in out.model.blocks.iter().enumerate() {
            for (ln, own_dims) in [
                (&block.mha_ln, &out.attn_spiked_dims),
                (&block.ffn_ln, &out.ffn_spiked_dims),
            ] {
                let ordinary_max = ln
                    .gamma
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !own_dims.contains(i))
                    .map(|(_, g)| g.abs())
                    .fold(0.0f64, f64::max);
                for &d in own_dims.iter() {
                    if bi < cfg.spiked_blocks {
                        assert!(
                            ln.gamma[d] > 5.0 * ordinary_max,
                            "block {bi}: spiked gamma {} vs ordinary max {ordinary_max}",
                            ln.gamma[d]
                        );
                    } else {
                        assert!(
                            ln.gamma[d] < 1.5 * ordinary_max,
                            "block {bi} past spiked_blocks should be flat, got {}",
                            ln.gamma[d]
                        );
                    }
                }
                // The other LayerNorm's set stays ordinary here.
                let other: Vec<usize> = out
                    .spiked_dims
                    .iter()
                    .copied()
                    .filter(|d| !own_dims.contains(d))
                    .collect();
                for d in other {
                    assert!(
                        ln.gamma[d] < 1.5 * ordinary_max,
                        "block {bi}: dim {d} spiked at the wrong LayerNorm"
                    );
                }
            }
        }
    }

    #[test]
    fn activation_outliers_land_on_spiked_dims_and_special_tokens() {
        let cfg = tiny_cfg();
        let out = generate(&cfg).unwrap();
        let report =
            metrics::outlier_structure(&out.model, &out.data.calibration, BATCH, &[]).unwrap();
        // Per-dimension concentration: at the embedding and at every
        // LayerNorm that carries planted gamma spikes, the hottest
        // dimensions are exactly the ones planted *for that slot* —
        // attention-side dims at the embedding and attention LayerNorms,
        // FFN-side dims at FFN LayerNorms. LayerNorms of later, unspiked
        // blocks see only whatever residual mass survives, so they make no
        // such promise.
        let planted_for = |name: &str| -> Option<&[usize]> {
            if name == slot::input_embedding() {
                return Some(&out.attn_spiked_dims);
            }
            for b in 0..cfg.spiked_blocks {
                if name == slot::activation(slot::SlotClass::MhaLn, b) {
                    return Some(&out.attn_spiked_dims);
                }
                if name == slot::activation(slot::SlotClass::FfnLn, b) {
                    return Some(&out.ffn_spiked_dims);
                }
            }
            None
        };
        for slot_report in &report {
            if let Some(planted) = planted_for(&slot_report.slot) {
                // top dims by max |x| are exactly the planted ones
                let mut ranked: Vec<usize> = (0..cfg.hidden).collect();
                ranked.sort_by(|&i, &j| {
                    slot_report.dim_max_abs[j]
                        .partial_cmp(&slot_report.dim_max_abs[i])
                        .unwrap()
                });
                let mut top: Vec<usize> = ranked[..cfg.spiked_dims].to_vec();
                top.sort_unstable();
                assert_eq!(
                    top, planted,
                    "slot {} should spike on the planted dims",
                    slot_report.slot
                );
                // Outlier tokens sit at sequence starts (the special
                // positions). The embedding slot is exact by construction.
                if slot_report.slot == slot::input_embedding() {
                    for &(idx, _) in &slot_report.top_tokens {
                        assert_eq!(
                            idx % cfg.seq_len,
                            0,
                            "embedding outlier token {idx} not at a special position"
                        );
                    }
                }
            }
        }
        let ln_slots: Vec<&str> = report
            .iter()
            .map(|s| s.slot.as_str())
            .collect();
        assert_eq!(ln_slots.len(), 1 + 2 * cfg.blocks);
        assert!(ln_slots.contains(&"input_embedding"));

        // Special positions run hotter than ordinary ones — strongly at the
        // embedding, and still visibly after the first (spiked) block's
        // attention LayerNorm. Spiking only the leading block matters here:
        // a gamma spike at every LayerNorm would re-amplify the spiked
        // dimensions of ordinary tokens at each depth until they reach the
        // same ceiling as the specials, erasing the per-token contrast this
        // asserts.
        let opts = ForwardOptions {
            capture_slots: true,
            ..ForwardOptions::fp()
        };
        let batch = &out.data.calibration[..BATCH.min(out.data.calibration.len())];
        let r = forward(&out.model, batch, &opts).unwrap();
        for (name, floor) in [
            (slot::input_embedding(), 3.0),
            (slot::activation(slot::SlotClass::MhaLn, 0), 1.3),
        ] {
            let t = &r.captures[&name];
            let mut special = (0.0, 0usize);
            let mut ordinary = (0.0, 0usize);
            for row_i in 0..t.rows() {
                let peak = t.row(row_i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if row_i % cfg.seq_len == 0 {
                    special = (special.0 + peak, special.1 + 1);
                } else {
                    ordinary = (ordinary.0 + peak, ordinary.1 + 1);
                }
            }
            let ratio = (special.0 / special.1 as f64) / (ordinary.0 / ordinary.1 as f64);
            assert!(
                ratio > floor,
                "slot {name}: special/ordinary mean peak ratio only {ratio}"
            );
        }
    }

    #[test]
    fn labels_are_balanced_and_solvable_at_full_precision() {
        let out = generate(&tiny_cfg()).unwrap();
        let ones = out
            .data
            .eval
            .labels
            .iter()
            .filter(|&&l| l == 1)
            .count();
        let frac = ones as f64 / out.data.eval.labels.len() as f64;
        assert!(
            (0.25..=0.75).contains(&frac),
            "eval labels unbalanced: {frac}"
        );
        assert!(
            out.fp_eval_accuracy >= 85.0,
            "full-precision accuracy only {}",
            out.fp_eval_accuracy
        );
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = |f: fn(&mut SynthConfig)| {
            let mut c = tiny_cfg();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.heads = 3));
        assert!(bad(|c| c.special_tokens = 0));
        assert!(bad(|c| c.special_tokens = c.vocab));
        assert!(bad(|c| c.spiked_dims = 0));
        assert!(bad(|c| c.spiked_dims = c.hidden));
        assert!(bad(|c| c.spiked_dims = c.hidden / 2));
        assert!(bad(|c| c.special_tilt = 1.0));
        assert!(bad(|c| c.train_sequences = 10));
        assert!(bad(|c| c.seq_len = 1));
        assert!(bad(|c| c.ridge_lambda = 0.0));
    }
}
