//! Merged self/cross attention.
//!
//! The decoder runs a single attention module per layer whose keys and
//! values are the concatenation of the decoder states `X` and the encoder
//! output `H` (in that order), with one set of projection weights serving
//! both portions and the softmax normalized jointly across decoder and
//! encoder columns. Query heads are grouped onto fewer key/value heads,
//! per-head queries and keys are RMS-normalized before the rotary rotation,
//! and layers alternate between sliding-window and full attention with
//! separate rotary base frequencies.

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rotary position parameters for one layer kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    /// 10 000 on local layers, 1 000 000 on global layers by default.
    pub base_freq: f64,
    /// Positional-interpolation divisor; 1 disables interpolation. Positions
    /// are divided by this before the angle is computed, mapping longer
    /// contexts into the trained positional range.
    pub pi_scale: f64,
}

impl RopeConfig {
    pub fn new(base_freq: f64, pi_scale: f64) -> Result<RopeConfig> {
        if base_freq.is_nan() || base_freq <= 0.0 {
            return Err(Error::config(format!("rope base must be positive, got {base_freq}")));
        }
        if pi_scale.is_nan() || pi_scale < 1.0 {
            return Err(Error::config(format!("pi_scale must be ≥ 1, got {pi_scale}")));
        }
        Ok(RopeConfig { base_freq, pi_scale })
    }
}

/// Attention reach of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Local { window: usize },
    Global,
}

/// Projection weights and QK-norm gains of one attention module. One set of
/// weights serves both the self and cross portions of merged attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    /// `[d, n_q_heads·d_head]`
    pub w_q: Var,
    /// `[d, n_kv_heads·d_head]`
    pub w_k: Var,
    /// `[d, n_kv_heads·d_head]`
    pub w_v: Var,
    /// `[n_q_heads·d_head, d]`
    pub w_o: Var,
    /// `[d_head]`, shared across heads.
    pub q_gain: Var,
    /// `[d_head]`, shared across heads.
    pub k_gain: Var,
}

/// Apply the rotary rotation to `x` of shape `[T, heads, d_head]` (or
/// `[T, d_head]`); pair `j` of position `p` turns by
/// `(p / pi_scale) · base^(−2j/d_head)`. Pure (off-tape) variant.
pub fn rope_apply(x: &Tensor, positions: &[usize], cfg: &RopeConfig) -> Result<Tensor> {
    ops::rope_rotate(x, positions, cfg.base_freq, cfg.pi_scale, false)
}

/// Visibility mask of merged attention: `[m, m+n]` with decoder columns
/// first (matching the `[X; H]` concatenation) and encoder columns after.
/// Decoder column `j` is visible from row `i` iff `j ≤ i` and, on local
/// layers, `i − j < window`. Encoder columns are always fully visible —
/// cross visibility is never windowed.
pub fn build_merged_mask(m: usize, n: usize, kind: LayerKind) -> Result<Tensor> {
    if m == 0 {
        return Err(Error::shape("merged mask requires at least one decoder row"));
    }
    let cols = m + n;
    let mut data = vec![0.0; m * cols];
    for i in 0..m {
        let row = &mut data[i * cols..(i + 1) * cols];
        for (j, cell) in row.iter_mut().enumerate().take(m) {
            let causal = j <= i;
            let in_window = match kind {
                LayerKind::Global => true,
                LayerKind::Local { window } => i - j.min(i) < window,
            };
            if causal && in_window {
                *cell = 1.0;
            }
        }
        row[m..].fill(1.0);
    }
    Tensor::from_vec(vec![m, cols], data)
}

/// Bidirectional visibility for encoder self-attention: all-ones when
/// global, the symmetric band `|i − j| < window` when local.
pub fn build_encoder_mask(n: usize, kind: LayerKind) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::shape("encoder mask requires at least one row"));
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let visible = match kind {
                LayerKind::Global => true,
                LayerKind::Local { window } => i.abs_diff(j) < window,
            };
            if visible {
                data[i * n + j] = 1.0;
            }
        }
    }
    Tensor::from_vec(vec![n, n], data)
}

/// Shared core: queries from `x`, keys/values from `kv`, an arbitrary
/// visibility mask, explicit query/key positions. Returns the output and
/// the per-head attention probabilities.
#[allow(clippy::too_many_arguments)]
fn attention_core(
    tape: &mut Tape,
    x: Var,
    kv: Var,
    w: &AttentionWeights,
    mask: &Tensor,
    q_positions: &[usize],
    k_positions: &[usize],
    rope: &RopeConfig,
    norm_eps: f64,
) -> Result<(Var, Vec<Var>)> {
    let d_head = tape.value(w.q_gain).shape()[0];
    let q_cols = tape.value(w.w_q).dims2()?.1;
    let kv_cols = tape.value(w.w_k).dims2()?.1;
    if !q_cols.is_multiple_of(d_head) || !kv_cols.is_multiple_of(d_head) {
        return Err(Error::config(format!(
            "projection widths {q_cols}/{kv_cols} not divisible by head dim {d_head}"
        )));
    }
    let n_q_heads = q_cols / d_head;
    let n_kv_heads = kv_cols / d_head;
    if !n_q_heads.is_multiple_of(n_kv_heads) {
        return Err(Error::config(format!(
            "{n_q_heads} query heads not divisible by {n_kv_heads} kv heads"
        )));
    }
    let group = n_q_heads / n_kv_heads;

    let q_all = tape.matmul(x, w.w_q)?;
    let k_all = tape.matmul(kv, w.w_k)?;
    let v_all = tape.matmul(kv, w.w_v)?;

    // Per-head key/value streams; QK-norm precedes the rotary rotation.
    let mut k_heads = Vec::with_capacity(n_kv_heads);
    let mut v_heads = Vec::with_capacity(n_kv_heads);
    for g in 0..n_kv_heads {
        let k_g = tape.slice_cols(k_all, g * d_head, d_head)?;
        let k_g = tape.rms_norm(k_g, w.k_gain, norm_eps)?;
        let k_g = tape.rope(k_g, k_positions, rope.base_freq, rope.pi_scale)?;
        k_heads.push(k_g);
        v_heads.push(tape.slice_cols(v_all, g * d_head, d_head)?);
    }

    let scale = 1.0 / (d_head as f64).sqrt();
    let mut ctx_heads = Vec::with_capacity(n_q_heads);
    let mut prob_heads = Vec::with_capacity(n_q_heads);
    for h in 0..n_q_heads {
        let q_h = tape.slice_cols(q_all, h * d_head, d_head)?;
        let q_h = tape.rms_norm(q_h, w.q_gain, norm_eps)?;
        let q_h = tape.rope(q_h, q_positions, rope.base_freq, rope.pi_scale)?;
        let kv_head = h / group;
        let scores = tape.matmul_bt(q_h, k_heads[kv_head])?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scores, mask)?;
        prob_heads.push(probs);
        ctx_heads.push(tape.matmul(probs, v_heads[kv_head])?);
    }
    let ctx = tape.concat_cols(&ctx_heads)?;
    let out = tape.matmul(ctx, w.w_o)?;
    Ok((out, prob_heads))
}

/// Merged attention: `Q = X·W_q`, `K = [X;H]·W_k`, `V = [X;H]·W_v`,
/// jointly normalized softmax over decoder and encoder columns, `O = A·W_o`.
/// `h` may be absent, in which case this reduces to standard causal
/// self-attention. Keys take decoder positions for the `X` rows and encoder
/// positions for the `H` rows.
#[allow(clippy::too_many_arguments)]
pub fn merged_attention(
    tape: &mut Tape,
    x: Var,
    h: Option<Var>,
    w: &AttentionWeights,
    kind: LayerKind,
    rope: &RopeConfig,
    dec_positions: &[usize],
    enc_positions: &[usize],
    norm_eps: f64,
) -> Result<Var> {
    merged_attention_probed(
        tape,
        x,
        h,
        w,
        kind,
        rope,
        dec_positions,
        enc_positions,
        norm_eps,
    )
    .map(|(out, _)| out)
}

/// Same as [`merged_attention`] but also returns the per-head attention
/// probability matrices, for instrumented runs.
#[allow(clippy::too_many_arguments)]
pub fn merged_attention_probed(
    tape: &mut Tape,
    x: Var,
    h: Option<Var>,
    w: &AttentionWeights,
    kind: LayerKind,
    rope: &RopeConfig,
    dec_positions: &[usize],
    enc_positions: &[usize],
    norm_eps: f64,
) -> Result<(Var, Vec<Var>)> {
    let m = tape.value(x).dims2()?.0;
    if dec_positions.len() != m {
        return Err(Error::shape(format!(
            "decoder positions length {} vs {} rows",
            dec_positions.len(),
            m
        )));
    }
    let (kv, n, k_positions) = match h {
        Some(h_var) => {
            let n = tape.value(h_var).dims2()?.0;
            if enc_positions.len() != n {
                return Err(Error::shape(format!(
                    "encoder positions length {} vs {} rows",
                    enc_positions.len(),
                    n
                )));
            }
            let kv = tape.concat_rows(&[x, h_var])?;
            let mut pos = dec_positions.to_vec();
            pos.extend_from_slice(enc_positions);
            (kv, n, pos)
        }
        None => (x, 0, dec_positions.to_vec()),
    };
    let mask = build_merged_mask(m, n, kind)?;
    attention_core(tape, x, kv, w, &mask, dec_positions, &k_positions, rope, norm_eps)
}

/// Encoder self-attention: same machinery under the bidirectional encoder
/// mask.
#[allow(clippy::too_many_arguments)]
pub fn encoder_self_attention(
    tape: &mut Tape,
    x: Var,
    w: &AttentionWeights,
    kind: LayerKind,
    rope: &RopeConfig,
    positions: &[usize],
    norm_eps: f64,
) -> Result<Var> {
    let n = tape.value(x).dims2()?.0;
    if positions.len() != n {
        return Err(Error::shape(format!(
            "encoder positions length {} vs {} rows",
            positions.len(),
            n
        )));
    }
    let mask = build_encoder_mask(n, kind)?;
    let (out, _) = attention_core(tape, x, x, w, &mask, positions, positions, rope, norm_eps)?;
    Ok(out)
}

/// Register a full set of attention parameter tensors on a tape.
#[derive(Debug, Clone)]
pub struct AttentionTensors {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub q_gain: Tensor,
    pub k_gain: Tensor,
}

impl AttentionTensors {
    pub fn register(&self, tape: &mut Tape) -> AttentionWeights {
        AttentionWeights {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            w_o: tape.param(self.w_o.clone()),
            q_gain: tape.param(self.q_gain.clone()),
            k_gain: tape.param(self.k_gain.clone()),
        }
    }

    pub fn random(
        d_model: usize,
        d_head: usize,
        n_q_heads: usize,
        n_kv_heads: usize,
        rng: &mut crate::rng::Rng,
    ) -> AttentionTensors {
        AttentionTensors {
            w_q: Tensor::uniform(vec![d_model, n_q_heads * d_head], -0.5, 0.5, rng),
            w_k: Tensor::uniform(vec![d_model, n_kv_heads * d_head], -0.5, 0.5, rng),
            w_v: Tensor::uniform(vec![d_model, n_kv_heads * d_head], -0.5, 0.5, rng),
            w_o: Tensor::uniform(vec![n_q_heads * d_head, d_model], -0.5, 0.5, rng),
            q_gain: Tensor::uniform(vec![d_head], 0.5, 1.5, rng),
            k_gain: Tensor::uniform(vec![d_head], 0.5, 1.5, rng),
        }
    }
}
