//! Pure forward kernels over [`Tensor`]s plus the raw slice routines the
//! tape reuses for gradient rules. No fused operators, no fast-math
//! approximations; correctness outranks speed at this scale.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Raw slice kernels (shared by forward ops and tape VJPs)
// ---------------------------------------------------------------------------

/// out[p×r] = a[p×q] · b[q×r]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let o_row = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik != 0.0 {
                let b_row = &b[k * r..(k + 1) * r];
                for (o, &bkj) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += aik * bkj;
                }
            }
        }
    }
    out
}

/// out[p×r] = a[p×q] · b[r×q]ᵀ
pub(crate) fn mm_nt(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b[j * q..(j + 1) * q];
            let mut acc = 0.0;
            for k in 0..q {
                acc += a_row[k] * b_row[k];
            }
            out[i * r + j] = acc;
        }
    }
    out
}

/// out[q×r] = a[p×q]ᵀ · b[p×r]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; q * r];
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let b_row = &b[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik != 0.0 {
                let o_row = &mut out[k * r..(k + 1) * r];
                for (o, &bij) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += aik * bij;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Standard matrix product. Dimension mismatches report both shapes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (q2, r) = b.dims2()?;
    if q != q2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::from_vec(vec![p, r], mm_nn(a.data(), b.data(), p, q, r))
}

/// a · bᵀ without materializing the transpose.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (r, q2) = b.dims2()?;
    if q != q2 {
        return Err(Error::shape(format!(
            "matmul_bt trailing dimensions disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::from_vec(vec![p, r], mm_nt(a.data(), b.data(), p, q, r))
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op} requires equal shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|x| x * c).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Gated-GELU gate nonlinearity (tanh form).
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn gelu_tensor(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| gelu(x)).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// RMS normalization
// ---------------------------------------------------------------------------

/// RMS-normalize over the last axis and scale by a learned gain:
/// `out_i = x_i / sqrt(mean(x²) + eps) · gain_i`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, d) = x.rows_last();
    if gain.shape() != [d] {
        return Err(Error::shape(format!(
            "rms_norm gain shape {:?} does not match last axis {} of {:?}",
            gain.shape(),
            d,
            x.shape()
        )));
    }
    let g = gain.data();
    let mut out = vec![0.0; rows * d];
    for row in 0..rows {
        let xr = &x.data()[row * d..(row + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        let or = &mut out[row * d..(row + 1) * d];
        for i in 0..d {
            or[i] = xr[i] * inv * g[i];
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Masked softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax restricted to visible entries. Masked entries are exactly
/// zero in the output. The multiplicative mask of the attention formula is
/// realized as additive −∞ on the logits: the row maximum and the
/// normalization run over visible entries only.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(logits, mask, "masked_softmax")?;
    let (rows, cols) = logits.dims2()?;
    let mut out = vec![0.0; rows * cols];
    for row in 0..rows {
        let l = &logits.data()[row * cols..(row + 1) * cols];
        let m = &mask.data()[row * cols..(row + 1) * cols];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..cols {
            if m[j] != 0.0 && l[j] > mx {
                mx = l[j];
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(Error::data(format!(
                "masked_softmax: row {row} is fully masked (invalid mask construction)"
            )));
        }
        let o = &mut out[row * cols..(row + 1) * cols];
        let mut denom = 0.0;
        for j in 0..cols {
            if m[j] != 0.0 {
                let e = (l[j] - mx).exp();
                o[j] = e;
                denom += e;
            }
        }
        for v in o.iter_mut() {
            *v /= denom;
        }
    }
    Tensor::from_vec(vec![rows, cols], out)
}

// ---------------------------------------------------------------------------
// Rotary rotation
// ---------------------------------------------------------------------------

/// Rotate the last-axis pairs of `x` by position-dependent angles:
/// pair `j` of the row at sequence index `t` turns by
/// `(positions[t] / pi_scale) · base^(−2j/d)`.
///
/// `x` has shape `[T, ..., d]` with `d` even; every row under sequence index
/// `t` shares that index's angle. `invert` applies the inverse rotation
/// (used by the gradient rule — rotations are orthogonal).
pub fn rope_rotate(
    x: &Tensor,
    positions: &[usize],
    base_freq: f64,
    pi_scale: f64,
    invert: bool,
) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    if !d.is_multiple_of(2) {
        return Err(Error::config(format!(
            "rotary dimension must be even, got {d}"
        )));
    }
    let t_len = x.shape()[0];
    if positions.len() != t_len {
        return Err(Error::shape(format!(
            "positions length {} does not match leading axis {} of {:?}",
            positions.len(),
            t_len,
            x.shape()
        )));
    }
    let out = rope_rotate_raw(x.data(), x.shape(), positions, base_freq, pi_scale, invert);
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Unvalidated rotation kernel; the gradient rule uses it directly so a
/// non-finite cotangent surfaces through the backward sweep's finite check
/// rather than a panic here.
pub(crate) fn rope_rotate_raw(
    src: &[f64],
    shape: &[usize],
    positions: &[usize],
    base_freq: f64,
    pi_scale: f64,
    invert: bool,
) -> Vec<f64> {
    let d = *shape.last().unwrap();
    let t_len = shape[0];
    let rows_per_t = src.len() / (t_len * d);
    let half = d / 2;
    // Per-pair inverse frequencies are position-independent.
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| base_freq.powf(-2.0 * j as f64 / d as f64))
        .collect();
    let mut out = vec![0.0; src.len()];
    for (t, &pos) in positions.iter().enumerate() {
        let p = pos as f64 / pi_scale;
        for r in 0..rows_per_t {
            let base = (t * rows_per_t + r) * d;
            for j in 0..half {
                let angle = p * inv_freq[j];
                let (sin, cos) = if invert {
                    ((-angle).sin(), (-angle).cos())
                } else {
                    (angle.sin(), angle.cos())
                };
                let a = src[base + 2 * j];
                let b = src[base + 2 * j + 1];
                out[base + 2 * j] = a * cos - b * sin;
                out[base + 2 * j + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Row concatenation / column slicing
// ---------------------------------------------------------------------------

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows of zero tensors".to_string()));
    }
    let cols = parts[0].dims2()?.1;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = p.dims2()?;
        if c != cols {
            return Err(Error::shape(format!(
                "concat_rows column mismatch: {} vs {}",
                cols, c
            )));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(vec![rows, cols], data)
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if start + len > cols {
        return Err(Error::shape(format!(
            "slice_cols [{start}, {}) out of range for {cols} columns",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(rows * len);
    for row in 0..rows {
        data.extend_from_slice(&x.data()[row * cols + start..row * cols + start + len]);
    }
    Tensor::from_vec(vec![rows, len], data)
}
