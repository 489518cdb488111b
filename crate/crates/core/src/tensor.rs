//! Dense row-major f64 tensor.
//!
//! Everything in this crate computes in f64; activations are `[batch, seq,
//! hidden]`, weights are `[out, in]`, per-token statistics flatten all leading
//! axes and treat the last axis as the feature axis. The type stays small on
//! purpose — heavier math (attention, layer norm) lives next to the model code
//! that owns it.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Wire form of [`Tensor`]; deserialization funnels through [`Tensor::new`]
/// so a hand-edited file cannot produce a shape/data length mismatch.
#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = String;

    fn try_from(raw: RawTensor) -> std::result::Result<Self, String> {
        Tensor::new(raw.shape, raw.data).map_err(|e| e.to_string())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{numel} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar_like(&self, value: f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![value; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis; per-token statistics reduce over it.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.last_dim() == 0 {
            0
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let d = self.last_dim();
        &mut self.data[r * d..(r + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Global (min, max) over all elements. Errors on an empty tensor.
    pub fn min_max(&self) -> Result<(f64, f64)> {
        if self.data.is_empty() {
            return Err(Error::config("min_max of empty tensor"));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        Ok((lo, hi))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Squared Frobenius distance to `other`.
    pub fn sq_distance(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }
}

/// Dot product of two equal-length slices, unrolled four wide so the
/// optimizer vectorizes it; this is the hot loop of every linear layer.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// `y += alpha * x` over two equal-length slices.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x @ w^T + bias` with `x: [.., in]` flattened to rows and `w: [out, in]`.
/// Output shape copies `x` with the last axis replaced by `out`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &[f64]) -> Tensor {
    let d_in = x.last_dim();
    let (d_out, w_in) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(d_in, w_in, "linear: input dim vs weight columns");
    debug_assert!(bias.is_empty() || bias.len() == d_out);
    let rows = x.rows();
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = d_out;
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        let xr = x.row(r);
        let or = &mut out[r * d_out..(r + 1) * d_out];
        for (o, slot) in or.iter_mut().enumerate() {
            let mut v = dot(xr, w.row(o));
            if !bias.is_empty() {
                v += bias[o];
            }
            *slot = v;
        }
    }
    Tensor {
        shape: out_shape,
        data: out,
    }
}

/// Backward of [`linear`] with respect to the input: `dx = dy @ w`.
pub fn linear_backward_input(dy: &Tensor, w: &Tensor) -> Tensor {
    let d_out = dy.last_dim();
    debug_assert_eq!(d_out, w.shape()[0]);
    let d_in = w.shape()[1];
    let rows = dy.rows();
    let mut out_shape = dy.shape().to_vec();
    *out_shape.last_mut().unwrap() = d_in;
    let mut out = vec![0.0; rows * d_in];
    for r in 0..rows {
        let dyr = dy.row(r);
        let dxr = &mut out[r * d_in..(r + 1) * d_in];
        for (o, &g) in dyr.iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(o), dxr);
            }
        }
    }
    Tensor {
        shape: out_shape,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rows_view_matches_shape() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.rows(), 4);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.last_dim(), 3);
    }

    #[test]
    fn dot_matches_naive_loop() {
        // Oracle: plain accumulation in index order on an awkward length.
        let a: Vec<f64> = (0..11).map(|v| 0.3 * v as f64 - 1.0).collect();
        let b: Vec<f64> = (0..11).map(|v| 0.7 - 0.2 * v as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_hand_computed_product() {
        // x: [1,2] rows, w: [2,2] -> y = x w^T + b, checked by hand.
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let y = linear(&x, &w, &[10.0, 20.0]);
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[11.0, 21.0]); // (1*1+2*0)+10, (1*3+2*-1)+20
    }

    #[test]
    fn linear_backward_is_transpose_product() {
        let dy = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let dx = linear_backward_input(&dy, &w);
        // dx_j = sum_o dy_o * w[o][j]
        assert_eq!(dx.data(), &[1.0 - 8.0, 2.0 - 10.0, 3.0 - 12.0]);
    }

    #[test]
    fn min_max_and_distance() {
        let a = Tensor::new(vec![4], vec![-1.0, 3.0, 0.5, 2.0]).unwrap();
        assert_eq!(a.min_max().unwrap(), (-1.0, 3.0));
        let b = Tensor::new(vec![4], vec![0.0, 3.0, 0.5, 0.0]).unwrap();
        assert!((a.sq_distance(&b) - (1.0 + 4.0)).abs() < 1e-12);
    }
}
