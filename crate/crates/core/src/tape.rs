//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with the value tensors it needs for the backward sweep. Replaying the
//! tape in reverse accumulates a gradient for every variable that
//! participated in the output; variables that did not participate read back
//! as exact zero. One tape serves one forward/backward pair and is
//! single-threaded — parallelism happens across independent tapes.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackwardFn = Box<dyn Fn(&[f64], &mut Gradients)>;

struct Node {
    out: usize,
    backward: BackwardFn,
}

/// Gradient accumulators produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    fn accumulate(&mut self, id: usize, contribution: Vec<f64>) {
        match &mut self.slots[id] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), contribution.len());
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    /// Gradient of the seeded output with respect to `v`, if any flowed.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.id].as_deref()
    }

    /// Like [`Gradients::get`] but materializes the exact-zero gradient of a
    /// non-participating variable.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<f64> {
        match &self.slots[v.id] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    constant: Vec<bool>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, t: Tensor, constant: bool) -> Var {
        let id = self.values.len();
        self.values.push(t);
        self.constant.push(constant);
        Var { id }
    }

    /// Register a differentiable leaf (a parameter or probed input).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, false)
    }

    /// Register a leaf that never receives gradient (frozen weights,
    /// precomputed embeddings). Backward skips accumulation into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn record(&mut self, out: Var, backward: impl Fn(&[f64], &mut Gradients) + 'static) {
        self.nodes.push(Node {
            out: out.id,
            backward: Box::new(backward),
        });
    }

    /// Skip-aware accumulate: constants do not collect gradient.
    fn wants_grad(&self, v: Var) -> bool {
        !self.constant[v.id]
    }

    // -- primitives ---------------------------------------------------------

    /// Matrix product. Gradient rules: d/dA = G·Bᵀ, d/dB = Aᵀ·G.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let out = ops::matmul(&ta, &tb)?;
        let v = self.push(out, false);
        let (p, q) = ta.dims2()?;
        let r = tb.dims2()?.1;
        let (need_a, need_b) = (self.wants_grad(a), self.wants_grad(b));
        self.record(v, move |d_out, grads| {
            if need_a {
                grads.accumulate(a.id, ops::mm_nt(d_out, tb.data(), p, r, q));
            }
            if need_b {
                grads.accumulate(b.id, ops::mm_tn(ta.data(), d_out, p, q, r));
            }
        });
        Ok(v)
    }

    /// a · bᵀ. Gradients: d/da = G·B, d/db = Gᵀ·A.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let out = ops::matmul_bt(&ta, &tb)?;
        let v = self.push(out, false);
        let (p, q) = ta.dims2()?;
        let r = tb.dims2()?.0;
        let (need_a, need_b) = (self.wants_grad(a), self.wants_grad(b));
        self.record(v, move |d_out, grads| {
            if need_a {
                grads.accumulate(a.id, ops::mm_nn(d_out, tb.data(), p, r, q));
            }
            if need_b {
                grads.accumulate(b.id, ops::mm_tn(d_out, ta.data(), p, r, q));
            }
        });
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let v = self.push(out, false);
        let (need_a, need_b) = (self.wants_grad(a), self.wants_grad(b));
        self.record(v, move |d_out, grads| {
            if need_a {
                grads.accumulate(a.id, d_out.to_vec());
            }
            if need_b {
                grads.accumulate(b.id, d_out.to_vec());
            }
        });
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let out = ops::mul(&ta, &tb)?;
        let v = self.push(out, false);
        let (need_a, need_b) = (self.wants_grad(a), self.wants_grad(b));
        self.record(v, move |d_out, grads| {
            if need_a {
                grads.accumulate(
                    a.id,
                    d_out.iter().zip(tb.data()).map(|(d, y)| d * y).collect(),
                );
            }
            if need_b {
                grads.accumulate(
                    b.id,
                    d_out.iter().zip(ta.data()).map(|(d, x)| d * x).collect(),
                );
            }
        });
        Ok(v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = ops::scale(self.value(a), c)?;
        let v = self.push(out, false);
        let need_a = self.wants_grad(a);
        self.record(v, move |d_out, grads| {
            if need_a {
                grads.accumulate(a.id, d_out.iter().map(|d| d * c).collect());
            }
        });
        Ok(v)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        let out = ops::gelu_tensor(&ta)?;
        let v = self.push(out, false);
        let need_a = self.wants_grad(a);
        self.record(v, move |d_out, grads| {
            if need_a {
                grads.accumulate(
                    a.id,
                    d_out
                        .iter()
                        .zip(ta.data())
                        .map(|(d, &x)| d * ops::gelu_prime(x))
                        .collect(),
                );
            }
        });
        Ok(v)
    }

    /// RMS norm over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x).clone();
        let tg = self.value(gain).clone();
        let out = ops::rms_norm(&tx, &tg, eps)?;
        let v = self.push(out, false);
        let (rows, d) = tx.rows_last();
        let (need_x, need_g) = (self.wants_grad(x), self.wants_grad(gain));
        self.record(v, move |d_out, grads| {
            let g = tg.data();
            let mut d_x = if need_x { vec![0.0; rows * d] } else { Vec::new() };
            let mut d_g = if need_g { vec![0.0; d] } else { Vec::new() };
            for row in 0..rows {
                let xr = &tx.data()[row * d..(row + 1) * d];
                let dr = &d_out[row * d..(row + 1) * d];
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                if need_g {
                    for i in 0..d {
                        d_g[i] += dr[i] * xr[i] * inv;
                    }
                }
                if need_x {
                    // y_i = x_i·s·g_i with s = (mean(x²)+eps)^(−1/2):
                    // dy_i/dx_j = s·g_i·δ_ij − s³·g_i·x_i·x_j/d
                    let dot: f64 = (0..d).map(|i| dr[i] * g[i] * xr[i]).sum();
                    let s3_over_d = inv * inv * inv / d as f64;
                    let dxr = &mut d_x[row * d..(row + 1) * d];
                    for j in 0..d {
                        dxr[j] = dr[j] * g[j] * inv - dot * s3_over_d * xr[j];
                    }
                }
            }
            if need_x {
                grads.accumulate(x.id, d_x);
            }
            if need_g {
                grads.accumulate(gain.id, d_g);
            }
        });
        Ok(v)
    }

    /// Softmax restricted to visible entries of a constant 0/1 mask.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let tl = self.value(logits).clone();
        let out = ops::masked_softmax(&tl, mask)?;
        let probs = out.clone();
        let v = self.push(out, false);
        let (rows, cols) = tl.dims2()?;
        let need = self.wants_grad(logits);
        self.record(v, move |d_out, grads| {
            if !need {
                return;
            }
            // Masked entries have p = 0, so the standard softmax VJP
            // p_j·(d_j − Σ p_k d_k) already zeroes them.
            let mut d_l = vec![0.0; rows * cols];
            for row in 0..rows {
                let p = &probs.data()[row * cols..(row + 1) * cols];
                let dr = &d_out[row * cols..(row + 1) * cols];
                let dot: f64 = p.iter().zip(dr).map(|(pj, dj)| pj * dj).sum();
                let out_row = &mut d_l[row * cols..(row + 1) * cols];
                for j in 0..cols {
                    out_row[j] = p[j] * (dr[j] - dot);
                }
            }
            grads.accumulate(logits.id, d_l);
        });
        Ok(v)
    }

    /// Rotary rotation of last-axis pairs; the backward applies the inverse
    /// rotation (rotations are orthogonal).
    pub fn rope(
        &mut self,
        x: Var,
        positions: &[usize],
        base_freq: f64,
        pi_scale: f64,
    ) -> Result<Var> {
        let tx = self.value(x).clone();
        let out = ops::rope_rotate(&tx, positions, base_freq, pi_scale, false)?;
        let shape = tx.shape().to_vec();
        let v = self.push(out, false);
        let need = self.wants_grad(x);
        let positions = positions.to_vec();
        self.record(v, move |d_out, grads| {
            if !need {
                return;
            }
            let back =
                ops::rope_rotate_raw(d_out, &shape, &positions, base_freq, pi_scale, true);
            grads.accumulate(x.id, back);
        });
        Ok(v)
    }

    /// Row gather from an embedding table, scaled by `scale`; the backward
    /// scatter-adds into the table.
    pub fn embed(&mut self, table: Var, ids: &[u32], scale: f64) -> Result<Var> {
        let tt = self.value(table).clone();
        let (vocab, d) = tt.dims2()?;
        if ids.is_empty() {
            return Err(Error::data("embed of empty id list".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::data(format!(
                "token id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let row = &tt.data()[id as usize * d..(id as usize + 1) * d];
            data.extend(row.iter().map(|x| x * scale));
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data)?;
        let v = self.push(out, false);
        let ids = ids.to_vec();
        let need = self.wants_grad(table);
        self.record(v, move |d_out, grads| {
            if !need {
                return;
            }
            let mut d_table = vec![0.0; vocab * d];
            for (t, &id) in ids.iter().enumerate() {
                let dst = &mut d_table[id as usize * d..(id as usize + 1) * d];
                let src = &d_out[t * d..(t + 1) * d];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b * scale;
                }
            }
            grads.accumulate(table.id, d_table);
        });
        Ok(v)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let out = ops::concat_rows(&refs)?;
        let cols = out.dims2()?.1;
        let v = self.push(out, false);
        let spans: Vec<(usize, usize, bool)> = {
            let mut offset = 0;
            parts
                .iter()
                .zip(&tensors)
                .map(|(p, t)| {
                    let rows = t.dims2().unwrap().0;
                    let span = (p.id, offset, self.wants_grad(*p));
                    offset += rows * cols;
                    (span.0, span.1, span.2)
                })
                .collect()
        };
        let sizes: Vec<usize> = tensors.iter().map(|t| t.numel()).collect();
        self.record(v, move |d_out, grads| {
            for ((id, offset, need), len) in spans.iter().zip(&sizes) {
                if *need {
                    grads.accumulate(*id, d_out[*offset..*offset + len].to_vec());
                }
            }
        });
        Ok(v)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let out = ops::slice_cols(&tx, start, len)?;
        let v = self.push(out, false);
        let (rows, cols) = tx.dims2()?;
        let need = self.wants_grad(x);
        self.record(v, move |d_out, grads| {
            if !need {
                return;
            }
            let mut d_x = vec![0.0; rows * cols];
            for row in 0..rows {
                d_x[row * cols + start..row * cols + start + len]
                    .copy_from_slice(&d_out[row * len..(row + 1) * len]);
            }
            grads.accumulate(x.id, d_x);
        });
        Ok(v)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero tensors".to_string()));
        }
        let tensors: Vec<Tensor> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let rows = tensors[0].dims2()?.0;
        let mut total_cols = 0;
        for t in &tensors {
            let (r, c) = t.dims2()?;
            if r != rows {
                return Err(Error::shape(format!(
                    "concat_cols row mismatch: {rows} vs {r}"
                )));
            }
            total_cols += c;
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for t in &tensors {
            let c = t.dims2()?.1;
            for row in 0..rows {
                data[row * total_cols + offset..row * total_cols + offset + c]
                    .copy_from_slice(&t.data()[row * c..(row + 1) * c]);
            }
            offset += c;
        }
        let out = Tensor::from_vec(vec![rows, total_cols], data)?;
        let v = self.push(out, false);
        let spans: Vec<(usize, usize, usize, bool)> = {
            let mut offset = 0;
            parts
                .iter()
                .zip(&tensors)
                .map(|(p, t)| {
                    let c = t.dims2().unwrap().1;
                    let s = (p.id, offset, c, self.wants_grad(*p));
                    offset += c;
                    s
                })
                .collect()
        };
        self.record(v, move |d_out, grads| {
            for (id, offset, c, need) in &spans {
                if !need {
                    continue;
                }
                let mut d_p = vec![0.0; rows * c];
                for row in 0..rows {
                    d_p[row * c..(row + 1) * c].copy_from_slice(
                        &d_out[row * total_cols + offset..row * total_cols + offset + c],
                    );
                }
                grads.accumulate(*id, d_p);
            }
        });
        Ok(v)
    }

    /// Sum of every element, as a scalar. Backward broadcasts the seed.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let total: f64 = tx.data().iter().sum();
        if !total.is_finite() {
            return Err(Error::numeric(format!("sum_all produced {total}")));
        }
        let v = self.push(Tensor::scalar(total)?, false);
        let n = tx.numel();
        let need = self.wants_grad(x);
        self.record(v, move |d_out, grads| {
            if need {
                grads.accumulate(x.id, vec![d_out[0]; n]);
            }
        });
        Ok(v)
    }

    /// Sum of token-level cross-entropies over rows whose target is not the
    /// ignored id. Returns the scalar variable and how many rows counted.
    /// The caller divides by the number of counted tokens (usually across a
    /// whole batch) by seeding the backward pass accordingly.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: Option<u32>,
    ) -> Result<(Var, usize)> {
        let tl = self.value(logits).clone();
        let (rows, vocab) = tl.dims2()?;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy targets length {} vs {} logit rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| Some(t) != ignore && t as usize >= vocab)
        {
            return Err(Error::data(format!(
                "target id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let counted: Vec<usize> = (0..rows)
            .filter(|&r| Some(targets[r]) != ignore)
            .collect();
        let n = counted.len();
        let mut total = 0.0;
        // Stabilized per-row softmax cached for the backward.
        let mut probs = vec![0.0; rows * vocab];
        for &r in &counted {
            let row = &tl.data()[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..vocab {
                let e = (row[j] - mx).exp();
                probs[r * vocab + j] = e;
                denom += e;
            }
            for j in 0..vocab {
                probs[r * vocab + j] /= denom;
            }
            total += denom.ln() + mx - row[targets[r] as usize];
        }
        if !total.is_finite() {
            return Err(Error::numeric(format!(
                "cross-entropy produced non-finite loss {total}"
            )));
        }
        let v = self.push(Tensor::scalar(total)?, false);
        let targets = targets.to_vec();
        let need = self.wants_grad(logits);
        self.record(v, move |d_out, grads| {
            if !need {
                return;
            }
            let seed = d_out[0];
            let mut d_l = vec![0.0; rows * vocab];
            for &r in &counted {
                let t = targets[r] as usize;
                let p = &probs[r * vocab..(r + 1) * vocab];
                let dst = &mut d_l[r * vocab..(r + 1) * vocab];
                for j in 0..vocab {
                    dst[j] = seed * p[j];
                }
                dst[t] -= seed;
            }
            grads.accumulate(logits.id, d_l);
        });
        Ok((v, n))
    }

    // -- backward -----------------------------------------------------------

    /// Replay the tape in reverse from `output`, seeding its gradient with
    /// `seed` (the output must be scalar for a plain derivative; any shape
    /// works if you interpret the seed as a broadcast cotangent).
    pub fn backward(&self, output: Var, seed: f64) -> Result<Gradients> {
        let mut grads = Gradients {
            slots: vec![None; self.values.len()],
        };
        let out_numel = self.values[output.id].numel();
        grads.slots[output.id] = Some(vec![seed; out_numel]);
        for node in self.nodes.iter().rev() {
            let d_out = match &grads.slots[node.out] {
                Some(g) => g.clone(),
                None => continue,
            };
            (node.backward)(&d_out, &mut grads);
        }
        for (i, slot) in grads.slots.iter().enumerate() {
            if let Some(g) = slot {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient {bad} for tape variable {i}"
                    )));
                }
            }
        }
        Ok(grads)
    }
}
