//! Shared fixtures for the unit tests: small random models and batches,
//! plus a range-based calibration good enough to exercise quantized mode.

use crate::forward::{forward, ForwardOptions};
use crate::model::{
    EncoderBlock, LayerNormParams, Linear, LnMode, ModelGraph, ModelMeta,
};
use crate::quantizer::{ClipRange, QuantParams};
use crate::slot;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| (rng.gen::<f64>() - 0.5) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

fn rand_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Linear {
    Linear {
        weight: rand_tensor(rng, vec![out, inp], 0.6),
        bias: rand_tensor(rng, vec![out], 0.2).into_data(),
    }
}

fn rand_ln(rng: &mut ChaCha8Rng, n: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: rand_tensor(rng, vec![n], 0.4)
            .into_data()
            .iter()
            .map(|v| 1.0 + v)
            .collect(),
        beta: rand_tensor(rng, vec![n], 0.2).into_data(),
    }
}

/// Small random model with weights drawn from scaled uniforms; vocab 16,
/// sequence length 5.
pub fn random_model(seed: u64, blocks: usize, hidden: usize, heads: usize) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = hidden;
    let vocab = 16;
    let seq = 5;
    let blocks_v: Vec<EncoderBlock> = (0..blocks)
        .map(|_| EncoderBlock {
            wq: rand_linear(&mut rng, n, n),
            wk: rand_linear(&mut rng, n, n),
            wv: rand_linear(&mut rng, n, n),
            wo: rand_linear(&mut rng, n, n),
            mha_ln: rand_ln(&mut rng, n),
            w1: rand_linear(&mut rng, 4 * n, n),
            w2: rand_linear(&mut rng, n, 4 * n),
            ffn_ln: rand_ln(&mut rng, n),
            resid1_gamma: None,
            resid2_gamma: None,
        })
        .collect();
    ModelGraph {
        meta: ModelMeta {
            blocks,
            hidden: n,
            heads,
            vocab,
            seq_len: seq,
            ln_mode: LnMode::Scaling,
            ln_eps: 1e-12,
        },
        tok_embedding: rand_tensor(&mut rng, vec![vocab, n], 2.0),
        pos_embedding: rand_tensor(&mut rng, vec![seq, n], 0.5),
        blocks: blocks_v,
        head: rand_linear(&mut rng, 1, n),
        nodes: BTreeMap::new(),
        migration: Vec::new(),
    }
}

pub fn batch(seed: u64, bsz: usize, seq: usize, vocab: u32) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..bsz)
        .map(|_| (0..seq).map(|_| rng.gen_range(0..vocab)).collect())
        .collect()
}

/// Calibrate every placed node from observed full-precision ranges so
/// quantized mode can run. Not a tuned calibration — just valid parameters.
pub fn rough_calibrate(model: &mut ModelGraph) {
    let b = batch(7, 3, model.meta.seq_len, model.meta.vocab as u32);
    let opts = ForwardOptions {
        capture_slots: true,
        ..ForwardOptions::fp()
    };
    let caps = forward(model, &b, &opts).unwrap().captures;
    for name in slot::activation_slots(model.meta.blocks) {
        let x = &caps[&name];
        let (lo, hi) = x.min_max().unwrap();
        let node = model.node(&name).unwrap().clone();
        let p = QuantParams::from_range(
            ClipRange::new(lo.min(0.0), hi.max(lo + 1e-6)).unwrap(),
            node.bits,
        )
        .unwrap();
        model.set_params(&name, p).unwrap();
    }
    for name in slot::parameter_slots(model.meta.blocks) {
        let t = crate::io::parameter_tensor(model, &name).unwrap().clone();
        let bits = model.node(&name).unwrap().bits;
        let p = QuantParams::per_channel_for_tensor(&t, bits).unwrap();
        model.set_params(&name, p).unwrap();
    }
}
