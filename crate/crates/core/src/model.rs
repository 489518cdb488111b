//! Encoder model graph.
//!
//! A small post-norm transformer encoder for classification: token + position
//! embeddings, `L` blocks of `{multi-head attention, LayerNorm, feed-forward
//! with GELU, LayerNorm}` with residual connections, and a mean-pooled linear
//! head producing one logit. The graph carries a registry of quantization
//! nodes (see [`crate::slot`]) so the same structure runs in full-precision
//! or simulated-quantization mode.
//!
//! LayerNorm runs in one of two modes. `Scaling` is the ordinary form
//! `y = (x - mean) / sqrt(var + eps) * gamma + beta`. `NonScaling` drops the
//! per-dimension scale from the normalization itself, `y = (x - mean) /
//! sqrt(var + eps) + beta / gamma`, and relies on the migration rewrite
//! ([`crate::migration`]) having folded `gamma` into the consumers; the two
//! modes are numerically equivalent end to end because `scaling_out =
//! non_scaling_out * gamma` per dimension.

use crate::error::{Error, Result};
use crate::quantizer::{QuantParams, Scheme};
use crate::slot;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnMode {
    Scaling,
    NonScaling,
}

/// Bit widths for the three parameter/activation classes, written `W-E-A`
/// on the command line (e.g. `6-6-6`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitsSpec {
    pub weight: u8,
    pub embedding: u8,
    pub activation: u8,
}

/// Bit widths the toolkit publishes; 30 approximates "effectively
/// unquantized" while staying on the integer-code path.
pub const ALLOWED_BITS: [u8; 6] = [2, 4, 6, 8, 16, 30];

impl BitsSpec {
    pub fn uniform(bits: u8) -> Self {
        BitsSpec {
            weight: bits,
            embedding: bits,
            activation: bits,
        }
    }
}

impl FromStr for BitsSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "bits spec `{s}` must be W-E-A, e.g. 6-6-6"
            )));
        }
        let mut vals = [0u8; 3];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p
                .parse()
                .map_err(|_| Error::config(format!("bits spec `{s}`: `{p}` is not a number")))?;
            if !ALLOWED_BITS.contains(v) {
                return Err(Error::config(format!(
                    "bit width {v} not supported; choose one of {ALLOWED_BITS:?}"
                )));
            }
        }
        Ok(BitsSpec {
            weight: vals[0],
            embedding: vals[1],
            activation: vals[2],
        })
    }
}

impl std::fmt::Display for BitsSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}-{}", self.weight, self.embedding, self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`, row-major.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mha_ln: LayerNormParams,
    pub w1: Linear,
    pub w2: Linear,
    pub ffn_ln: LayerNormParams,
    /// Multiplier on the block-input residual branch, installed by migration
    /// when the previous block's ffn_ln gamma moves here.
    pub resid1_gamma: Option<Vec<f64>>,
    /// Multiplier on the mha_ln-output residual branch (that LayerNorm's
    /// migrated gamma).
    pub resid2_gamma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub ln_mode: LnMode,
    pub ln_eps: f64,
}

/// One entry of the gamma-migration log: which LayerNorm was rewritten, the
/// gamma vector that moved, which weights absorbed it, and where the explicit
/// shortcut multiplier landed (none when the LayerNorm only feeds the head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationRecord {
    pub ln: String,
    pub gamma: Vec<f64>,
    pub rescaled: Vec<String>,
    pub shortcut: Option<String>,
}

/// A quantizer attached to one slot. `enabled = false` makes the slot a
/// pass-through in quantized mode (used by diagnostics that isolate nodes);
/// an enabled slot without parameters is a configuration error at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantNode {
    pub scheme: Scheme,
    pub bits: u8,
    pub enabled: bool,
    pub params: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub meta: ModelMeta,
    /// `[vocab, hidden]`.
    pub tok_embedding: Tensor,
    /// `[seq_len, hidden]`.
    pub pos_embedding: Tensor,
    pub blocks: Vec<EncoderBlock>,
    /// `[1, hidden]` weight; one logit.
    pub head: Linear,
    pub nodes: BTreeMap<String, QuantNode>,
    pub migration: Vec<MigrationRecord>,
}

impl ModelGraph {
    /// Register a quantization node on every slot: asymmetric per-tensor for
    /// the activation slots, symmetric per-channel for weights and embedding
    /// tables, with class bit widths from `bits`. Refuses to run twice.
    pub fn place_quant_nodes(&mut self, bits: BitsSpec) -> Result<()> {
        if !self.nodes.is_empty() {
            return Err(Error::config(
                "quant nodes already placed; placement must happen exactly once",
            ));
        }
        for name in slot::activation_slots(self.meta.blocks) {
            self.nodes.insert(
                name,
                QuantNode {
                    scheme: Scheme::AsymPerTensor,
                    bits: bits.activation,
                    enabled: true,
                    params: None,
                },
            );
        }
        for name in slot::parameter_slots(self.meta.blocks) {
            let b = if slot::is_embedding(&name) {
                bits.embedding
            } else {
                bits.weight
            };
            self.nodes.insert(
                name,
                QuantNode {
                    scheme: Scheme::SymPerChannel,
                    bits: b,
                    enabled: true,
                    params: None,
                },
            );
        }
        Ok(())
    }

    pub fn node(&self, name: &str) -> Result<&QuantNode> {
        self.nodes
            .get(name)
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))
    }

    pub fn set_params(&mut self, name: &str, params: QuantParams) -> Result<()> {
        let node = self
            .nodes
            .get_mut(name)
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))?;
        node.bits = params.bits;
        node.scheme = params.scheme;
        node.params = Some(params);
        Ok(())
    }

    pub fn set_enabled(&mut self, name: &str, enabled: bool) -> Result<()> {
        let node = self
            .nodes
            .get_mut(name)
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))?;
        node.enabled = enabled;
        Ok(())
    }

    pub fn set_all_enabled(&mut self, enabled: bool) {
        for node in self.nodes.values_mut() {
            node.enabled = enabled;
        }
    }

    /// Parameter counts by size class: (weight-class, embedding-class).
    /// Weight class covers block linears with biases, LayerNorm parameters,
    /// migrated shortcut multipliers, and the head; embedding class covers
    /// the token and position tables.
    pub fn param_counts(&self) -> (usize, usize) {
        let mut weight = 0usize;
        for b in &self.blocks {
            for lin in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                weight += lin.weight.numel() + lin.bias.len();
            }
            weight += b.mha_ln.gamma.len() + b.mha_ln.beta.len();
            weight += b.ffn_ln.gamma.len() + b.ffn_ln.beta.len();
            weight += b.resid1_gamma.as_ref().map_or(0, |g| g.len());
            weight += b.resid2_gamma.as_ref().map_or(0, |g| g.len());
        }
        weight += self.head.weight.numel() + self.head.bias.len();
        let embedding = self.tok_embedding.numel() + self.pos_embedding.numel();
        (weight, embedding)
    }

    pub fn validate_dims(&self) -> Result<()> {
        let m = &self.meta;
        if m.hidden == 0 || m.heads == 0 || m.hidden % m.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} must be a positive multiple of heads {}",
                m.hidden, m.heads
            )));
        }
        let check = |name: &str, t: &Tensor, expect: &[usize]| -> Result<()> {
            if t.shape() != expect {
                return Err(Error::shape(name, format!("{expect:?}"), format!("{:?}", t.shape())));
            }
            Ok(())
        };
        check("embedding.token", &self.tok_embedding, &[m.vocab, m.hidden])?;
        check("embedding.position", &self.pos_embedding, &[m.seq_len, m.hidden])?;
        if self.blocks.len() != m.blocks {
            return Err(Error::config(format!(
                "meta says {} blocks, graph has {}",
                m.blocks,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let n = m.hidden;
            for (w, lin) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                check(&format!("block{i}.{w}"), &lin.weight, &[n, n])?;
            }
            let ffn = b.w1.weight.shape()[0];
            check(&format!("block{i}.w1"), &b.w1.weight, &[ffn, n])?;
            check(&format!("block{i}.w2"), &b.w2.weight, &[n, ffn])?;
            for (ln_name, ln) in [("mha_ln", &b.mha_ln), ("ffn_ln", &b.ffn_ln)] {
                if ln.gamma.len() != n || ln.beta.len() != n {
                    return Err(Error::shape(
                        &format!("block{i}.{ln_name}"),
                        format!("gamma/beta of length {n}"),
                        format!("{}/{}", ln.gamma.len(), ln.beta.len()),
                    ));
                }
            }
        }
        check("head.weight", &self.head.weight, &[1, m.hidden])?;
        Ok(())
    }
}

/// LayerNorm over the last axis with biased variance, in either mode.
pub fn layer_norm(x: &Tensor, p: &LayerNormParams, eps: f64, mode: LnMode) -> Tensor {
    let n = x.last_dim();
    debug_assert_eq!(p.gamma.len(), n);
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        match mode {
            LnMode::Scaling => {
                for (v, (&g, &b)) in row.iter_mut().zip(p.gamma.iter().zip(&p.beta)) {
                    *v = (*v - mean) * inv * g + b;
                }
            }
            LnMode::NonScaling => {
                for (v, (&g, &b)) in row.iter_mut().zip(p.gamma.iter().zip(&p.beta)) {
                    *v = (*v - mean) * inv + b / g;
                }
            }
        }
    }
    out
}

/// Gradient of [`layer_norm`] with respect to its input. `x` is the tensor
/// the forward pass normalized.
pub fn layer_norm_backward(
    x: &Tensor,
    dy: &Tensor,
    p: &LayerNormParams,
    eps: f64,
    mode: LnMode,
) -> Tensor {
    let n = x.last_dim();
    let nf = n as f64;
    let mut out = dy.clone();
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / nf;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let inv = 1.0 / (var + eps).sqrt();
        let dyr = out.row_mut(r);
        // dyhat = dy * gamma in scaling mode; the beta/gamma offset in
        // non-scaling mode is constant and drops out.
        let mut sum_dyh = 0.0;
        let mut sum_dyh_xhat = 0.0;
        let mut dyh = vec![0.0; n];
        let mut xhat = vec![0.0; n];
        for j in 0..n {
            let g = match mode {
                LnMode::Scaling => p.gamma[j],
                LnMode::NonScaling => 1.0,
            };
            dyh[j] = dyr[j] * g;
            xhat[j] = (xr[j] - mean) * inv;
            sum_dyh += dyh[j];
            sum_dyh_xhat += dyh[j] * xhat[j];
        }
        let m1 = sum_dyh / nf;
        let m2 = sum_dyh_xhat / nf;
        for j in 0..n {
            dyr[j] = inv * (dyh[j] - m1 - xhat[j] * m2);
        }
    }
    out
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact-erf GELU: `x * Phi(x)` with the standard normal CDF.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = *v * 0.5 * (1.0 + libm::erf(*v / std::f64::consts::SQRT_2));
    }
    out
}

/// Elementwise derivative of GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let phi_cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let phi_pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
        *g *= phi_cdf + v * phi_pdf;
    }
    out
}
