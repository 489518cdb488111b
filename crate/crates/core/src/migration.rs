//! Gamma migration: a function-preserving rewrite that moves each
//! LayerNorm's per-dimension scale `gamma` out of the normalization and into
//! the layers that consume its output.
//!
//! Outlier activations tend to sit in the same few hidden dimensions as the
//! largest LayerNorm scales, so dividing `gamma` out of the activation path
//! shrinks the dynamic range a per-tensor quantizer has to cover. Each
//! LayerNorm output feeds exactly two consumers in this architecture: the
//! next linear layer (where `gamma` folds into weight columns, since
//! `(x * gamma) @ W^T = x @ (W * gamma)^T` column-wise) and a residual
//! shortcut (which gains an explicit elementwise multiplier). The final
//! block's ffn_ln feeds only the classification head, so its `gamma` folds
//! into the head weight with no shortcut term.
//!
//! After the rewrite every LayerNorm runs in non-scaling mode,
//! `y = (x - mean)/sqrt(var + eps) + beta/gamma`, keeping its original
//! parameters stored so the offset stays available. The rewrite is exact:
//! outputs match the original network to floating-point accuracy.

use crate::error::{Error, Result};
use crate::forward::{forward, ForwardOptions};
use crate::model::{LnMode, MigrationRecord, ModelGraph};
use crate::slot;
use crate::tensor::Tensor;

/// Scale column `j` of a `[out, in]` weight by `gamma[j]`.
fn scale_columns(name: &str, w: &mut Tensor, gamma: &[f64]) -> Result<()> {
    let cols = w.last_dim();
    if cols != gamma.len() {
        return Err(Error::UnsupportedTopology(format!(
            "cannot fold a length-{} gamma into `{name}` with {cols} input columns",
            gamma.len()
        )));
    }
    for r in 0..w.rows() {
        for (v, g) in w.row_mut(r).iter_mut().zip(gamma) {
            *v *= g;
        }
    }
    Ok(())
}

fn check_gamma(ln_name: &str, gamma: &[f64]) -> Result<()> {
    if let Some(idx) = gamma.iter().position(|&g| g == 0.0) {
        return Err(Error::numerical(format!(
            "`{ln_name}` gamma[{idx}] is exactly zero; the rewrite would divide by it"
        )));
    }
    Ok(())
}

/// Rewrite the model in place. Returns the per-LayerNorm log; the same log
/// is also stored on the model. Fails on an already-migrated model and on
/// any exactly-zero gamma entry, leaving the model unchanged in both cases.
pub fn migrate(model: &mut ModelGraph) -> Result<Vec<MigrationRecord>> {
    if model.meta.ln_mode == LnMode::NonScaling {
        return Err(Error::config(
            "model is already migrated (LayerNorms are in non-scaling mode)",
        ));
    }
    for (i, block) in model.blocks.iter().enumerate() {
        check_gamma(&slot::activation(slot::SlotClass::MhaLn, i), &block.mha_ln.gamma)?;
        check_gamma(&slot::activation(slot::SlotClass::FfnLn, i), &block.ffn_ln.gamma)?;
    }

    let n_blocks = model.blocks.len();
    let mut records = Vec::with_capacity(2 * n_blocks);
    for i in 0..n_blocks {
        // mha_ln feeds this block's w1 and the resid2 shortcut.
        let gamma = model.blocks[i].mha_ln.gamma.clone();
        let w1_name = slot::block_weight(i, "w1");
        scale_columns(&w1_name, &mut model.blocks[i].w1.weight, &gamma)?;
        model.blocks[i].resid2_gamma = Some(gamma.clone());
        records.push(MigrationRecord {
            ln: slot::activation(slot::SlotClass::MhaLn, i),
            gamma,
            rescaled: vec![w1_name],
            shortcut: Some(format!("block{i}.resid2")),
        });

        // ffn_ln feeds the next block's query/key/value projections and its
        // resid1 shortcut — or only the head after the last block.
        let gamma = model.blocks[i].ffn_ln.gamma.clone();
        if i + 1 < n_blocks {
            let mut rescaled = Vec::new();
            for w in ["wq", "wk", "wv"] {
                let name = slot::block_weight(i + 1, w);
                let lin = match w {
                    "wq" => &mut model.blocks[i + 1].wq,
                    "wk" => &mut model.blocks[i + 1].wk,
                    _ => &mut model.blocks[i + 1].wv,
                };
                scale_columns(&name, &mut lin.weight, &gamma)?;
                rescaled.push(name);
            }
            model.blocks[i + 1].resid1_gamma = Some(gamma.clone());
            records.push(MigrationRecord {
                ln: slot::activation(slot::SlotClass::FfnLn, i),
                gamma,
                rescaled,
                shortcut: Some(format!("block{}.resid1", i + 1)),
            });
        } else {
            scale_columns(&slot::head_weight(), &mut model.head.weight, &gamma)?;
            records.push(MigrationRecord {
                ln: slot::activation(slot::SlotClass::FfnLn, i),
                gamma,
                rescaled: vec![slot::head_weight()],
                shortcut: None,
            });
        }
    }
    model.meta.ln_mode = LnMode::NonScaling;
    model.migration = records.clone();
    Ok(records)
}

/// Largest symmetric relative difference between two values.
fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-12)
}

/// Verify that a migrated model computes the same function as the original
/// on a batch: logits must agree, and the migrated final hidden state times
/// the last ffn_ln gamma must reproduce the original hidden state. Returns
/// the worst relative difference observed.
pub fn equivalence_check(
    original: &ModelGraph,
    migrated: &ModelGraph,
    batch: &[Vec<u32>],
) -> Result<f64> {
    if original.meta.ln_mode != LnMode::Scaling || migrated.meta.ln_mode != LnMode::NonScaling {
        return Err(Error::config(
            "equivalence check expects (original, migrated) in that order",
        ));
    }
    let fp = ForwardOptions::fp();
    let a = forward(original, batch, &fp)?;
    let b = forward(migrated, batch, &fp)?;
    let mut worst: f64 = 0.0;
    for (x, y) in a.logits.iter().zip(&b.logits) {
        worst = worst.max(rel_diff(*x, *y));
    }
    let gamma = &migrated
        .blocks
        .last()
        .ok_or_else(|| Error::config("model has no blocks"))?
        .ffn_ln
        .gamma;
    let n = a.hidden.last_dim();
    for (i, (x, y)) in a.hidden.data().iter().zip(b.hidden.data()).enumerate() {
        worst = worst.max(rel_diff(*x, y * gamma[i % n]));
    }
    Ok(worst)
}
