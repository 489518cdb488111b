//! Uniform affine fake quantization.
//!
//! A quantizer maps a real value to one of `2^bits` codes and back:
//!
//! ```text
//! code  = clamp(round_half_even(x / step) + zero_point, 0, 2^bits - 1)
//! xhat  = (code - zero_point) * step
//! ```
//!
//! Two parameterizations are supported: asymmetric per-tensor (one step and
//! zero point for the whole tensor; used for activations) and symmetric
//! per-channel (one step per leading-axis channel, fixed midpoint zero;
//! used for weights and embedding tables). `ste_step_grad` exposes the
//! straight-through gradient of `xhat` with respect to the step, in the
//! three-case form used by learned-step-size methods: clipped elements are
//! exactly linear in the step, in-range elements contribute their rounding
//! residual.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One (step, zero_point) for the whole tensor; arbitrary real range.
    AsymPerTensor,
    /// One step per channel (axis 0), zero point fixed at `2^(bits-1) - 1`,
    /// covering a signed range symmetric about zero.
    SymPerChannel,
}

/// Inclusive real-valued range a quantizer is calibrated to cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub lower: f64,
    pub upper: f64,
}

impl ClipRange {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite clip range ({lower}, {upper})"
            )));
        }
        if lower > upper {
            return Err(Error::config(format!(
                "clip range lower {lower} exceeds upper {upper}"
            )));
        }
        Ok(ClipRange { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Width guard for degenerate (constant) tensors so the step stays positive.
const MIN_WIDTH: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub scheme: Scheme,
    pub bits: u8,
    /// Length 1 for per-tensor, one entry per channel for per-channel.
    pub step: Vec<f64>,
    /// Same length as `step`.
    pub zero_point: Vec<i64>,
}

impl QuantParams {
    /// Verify the invariants every constructor enforces; useful after
    /// deserializing from an untrusted file.
    pub fn check(&self) -> Result<()> {
        if !(2..=30).contains(&self.bits) {
            return Err(Error::config(format!(
                "unsupported bit width {}; expected 2..=30",
                self.bits
            )));
        }
        if self.step.len() != self.zero_point.len() || self.step.is_empty() {
            return Err(Error::config(
                "step and zero_point must be non-empty and equal length",
            ));
        }
        let qmax = self.qmax();
        for (&s, &z) in self.step.iter().zip(&self.zero_point) {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::numerical(format!("non-positive quant step {s}")));
            }
            if z < 0 || z > qmax {
                return Err(Error::config(format!(
                    "zero point {z} outside code range 0..={qmax}"
                )));
            }
        }
        Ok(())
    }

    fn validated(self) -> Result<Self> {
        self.check()?;
        Ok(self)
    }

    /// Build parameters from explicit step/zero-point vectors, validating.
    pub fn with_steps(
        scheme: Scheme,
        bits: u8,
        step: Vec<f64>,
        zero_point: Vec<i64>,
    ) -> Result<Self> {
        QuantParams {
            scheme,
            bits,
            step,
            zero_point,
        }
        .validated()
    }

    /// Largest code, `2^bits - 1`.
    pub fn qmax(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    pub fn is_per_tensor(&self) -> bool {
        self.step.len() == 1
    }

    /// Asymmetric per-tensor parameters covering `range`:
    /// `step = width / (2^bits - 1)`, `zero_point = clamp(round(-lower/step))`.
    pub fn from_range(range: ClipRange, bits: u8) -> Result<Self> {
        let qmax = (1i64 << bits) - 1;
        let width = range.width().max(MIN_WIDTH);
        let step = width / qmax as f64;
        let z_real = (-range.lower / step).round_ties_even();
        let zero_point = (z_real as i64).clamp(0, qmax);
        QuantParams {
            scheme: Scheme::AsymPerTensor,
            bits,
            step: vec![step],
            zero_point: vec![zero_point],
        }
        .validated()
    }

    /// Symmetric per-channel parameters: per channel
    /// `step_c = max(|lower_c|, |upper_c|) / (2^(bits-1) - 1)` with the zero
    /// point pinned to the signed midpoint `2^(bits-1) - 1`.
    pub fn per_channel_symmetric(ranges: &[ClipRange], bits: u8) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::config("per-channel params need at least one channel"));
        }
        let half = (1i64 << (bits - 1)) - 1;
        let step = ranges
            .iter()
            .map(|r| (r.lower.abs().max(r.upper.abs())).max(MIN_WIDTH) / half as f64)
            .collect();
        QuantParams {
            scheme: Scheme::SymPerChannel,
            bits,
            step,
            zero_point: vec![half; ranges.len()],
        }
        .validated()
    }

    /// Symmetric per-channel parameters sized to a weight tensor's own
    /// extremes, channel = axis 0.
    pub fn per_channel_for_tensor(t: &Tensor, bits: u8) -> Result<Self> {
        let shape = t.shape();
        if shape.is_empty() {
            return Err(Error::config("cannot quantize a rank-0 tensor per channel"));
        }
        let channels = shape[0];
        let chunk = t.numel() / channels.max(1);
        if channels == 0 || chunk == 0 {
            return Err(Error::config("cannot quantize an empty tensor"));
        }
        let mut ranges = Vec::with_capacity(channels);
        for c in 0..channels {
            let slice = &t.data()[c * chunk..(c + 1) * chunk];
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in slice {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            ranges.push(ClipRange::new(lo, hi)?);
        }
        Self::per_channel_symmetric(&ranges, bits)
    }

    /// Real value the smallest code dequantizes to.
    pub fn range_min(&self, channel: usize) -> f64 {
        (0 - self.zero_point[channel]) as f64 * self.step[channel]
    }

    /// Real value the largest code dequantizes to.
    pub fn range_max(&self, channel: usize) -> f64 {
        (self.qmax() - self.zero_point[channel]) as f64 * self.step[channel]
    }

    fn channel_layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        if self.is_per_tensor() {
            return Ok((1, x.numel()));
        }
        let channels = self.step.len();
        if x.shape().first() != Some(&channels) {
            return Err(Error::shape(
                "per-channel quantization",
                format!("axis 0 of extent {channels}"),
                format!("{:?}", x.shape()),
            ));
        }
        Ok((channels, x.numel() / channels))
    }
}

#[inline]
fn fq_element(x: f64, step: f64, z: i64, qmax: i64) -> f64 {
    let q_unclamped = (x / step).round_ties_even() + z as f64;
    let q = q_unclamped.clamp(0.0, qmax as f64);
    (q - z as f64) * step
}

/// Integer codes for `x`. Mainly useful in tests and storage experiments;
/// simulation works on dequantized values from [`fake_quant`].
pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<Vec<i64>> {
    let (channels, chunk) = p.channel_layout(x)?;
    let qmax = p.qmax();
    let mut out = Vec::with_capacity(x.numel());
    for c in 0..channels {
        let (s, z) = (p.step[c], p.zero_point[c]);
        for &v in &x.data()[c * chunk..(c + 1) * chunk] {
            let q = ((v / s).round_ties_even() + z as f64).clamp(0.0, qmax as f64);
            out.push(q as i64);
        }
    }
    Ok(out)
}

/// Reconstruct real values from integer codes.
pub fn dequantize(codes: &[i64], shape: Vec<usize>, p: &QuantParams) -> Result<Tensor> {
    let mut t = Tensor::new(shape, codes.iter().map(|&q| q as f64).collect())?;
    let (channels, chunk) = p.channel_layout(&t)?;
    let data = t.data_mut();
    for c in 0..channels {
        let (s, z) = (p.step[c], p.zero_point[c]);
        for v in &mut data[c * chunk..(c + 1) * chunk] {
            *v = (*v - z as f64) * s;
        }
    }
    Ok(t)
}

/// Quantize-dequantize round trip: the simulated-quantization value of `x`.
pub fn fake_quant(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let (channels, chunk) = p.channel_layout(x)?;
    let qmax = p.qmax();
    let mut out = x.clone();
    let data = out.data_mut();
    for c in 0..channels {
        let (s, z) = (p.step[c], p.zero_point[c]);
        for v in &mut data[c * chunk..(c + 1) * chunk] {
            *v = fq_element(*v, s, z, qmax);
        }
    }
    Ok(out)
}

/// Per-element straight-through gradient of `fake_quant(x)` with respect to
/// the step size (asymmetric per-tensor only):
///
/// * in-range: `(xhat - x) / step` (the rounding residual in code units)
/// * clipped low: `-zero_point`
/// * clipped high: `2^bits - 1 - zero_point`
///
/// The clipped cases are the true local derivative (the output is exactly
/// linear in the step there); the in-range case is the straight-through
/// surrogate that drives learned-step-size updates.
pub fn ste_step_grad(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    if !p.is_per_tensor() || p.scheme != Scheme::AsymPerTensor {
        return Err(Error::config(
            "ste_step_grad expects asymmetric per-tensor parameters",
        ));
    }
    let (s, z, qmax) = (p.step[0], p.zero_point[0], p.qmax());
    let mut out = x.clone();
    for v in out.data_mut() {
        let x_i = *v;
        let q_unclamped = (x_i / s).round_ties_even() + z as f64;
        *v = if q_unclamped < 0.0 {
            -(z as f64)
        } else if q_unclamped > qmax as f64 {
            (qmax - z) as f64
        } else {
            let xhat = (q_unclamped - z as f64) * s;
            (xhat - x_i) / s
        };
    }
    Ok(out)
}

/// Fused backward through a per-tensor fake-quant node: given upstream
/// gradient `dy`, returns the input gradient (pass-through on in-range
/// elements, zero on clipped ones) and the accumulated step gradient
/// `sum(dy * d xhat/d step)`. One pass, same case analysis as
/// [`ste_step_grad`].
pub fn ste_backward(x: &Tensor, p: &QuantParams, dy: &Tensor) -> Result<(Tensor, f64)> {
    if !p.is_per_tensor() || p.scheme != Scheme::AsymPerTensor {
        return Err(Error::config(
            "ste_backward expects asymmetric per-tensor parameters",
        ));
    }
    debug_assert_eq!(x.shape(), dy.shape());
    let (s, z, qmax) = (p.step[0], p.zero_point[0], p.qmax());
    let mut dx = dy.clone();
    let mut ds = 0.0;
    for (g, &x_i) in dx.data_mut().iter_mut().zip(x.data()) {
        let q_unclamped = (x_i / s).round_ties_even() + z as f64;
        if q_unclamped < 0.0 {
            ds += *g * -(z as f64);
            *g = 0.0;
        } else if q_unclamped > qmax as f64 {
            ds += *g * (qmax - z) as f64;
            *g = 0.0;
        } else {
            let xhat = (q_unclamped - z as f64) * s;
            ds += *g * (xhat - x_i) / s;
            // in-range: straight-through, dy passes to dx unchanged
        }
    }
    Ok((dx, ds))
}

// --- serde: step / zero_point collapse to scalars for per-tensor params ---

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
    fn from_slice(v: &[T]) -> Self {
        if v.len() == 1 {
            OneOrMany::One(v[0].clone())
        } else {
            OneOrMany::Many(v.to_vec())
        }
    }
}

#[derive(Serialize, Deserialize)]
struct QuantParamsRepr {
    scheme: Scheme,
    bits: u8,
    step: OneOrMany<f64>,
    zero_point: OneOrMany<i64>,
}

impl Serialize for QuantParams {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        QuantParamsRepr {
            scheme: self.scheme,
            bits: self.bits,
            step: OneOrMany::from_slice(&self.step),
            zero_point: OneOrMany::from_slice(&self.zero_point),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for QuantParams {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = QuantParamsRepr::deserialize(de)?;
        QuantParams {
            scheme: repr.scheme,
            bits: repr.bits,
            step: repr.step.into_vec(),
            zero_point: repr.zero_point.into_vec(),
        }
        .validated()
        .map_err(serde::de::Error::custom)
    }
}
