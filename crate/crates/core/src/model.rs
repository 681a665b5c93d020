//! The encoder-decoder model: tied embeddings, local/global layer stacks,
//! merged decoder attention, the frozen vision-token path, parameter
//! counting and greedy decoding.

use std::collections::{BTreeMap, BTreeSet};

use crate::attention::{
    encoder_self_attention, merged_attention, AttentionWeights, LayerKind,
};
use crate::config::{CrossAttentionLayers, ModelConfig, PositionScheme, TOKENS_PER_IMAGE};
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::{hash_name, mix, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One item of an encoder input sequence: a token id or a precomputed image
/// embedding block of 256 rows.
#[derive(Debug, Clone)]
pub enum SeqItem {
    Token(u32),
    Image(Tensor),
}

/// Ordered mixed token/image sequence. An image expands to 256 positions.
#[derive(Debug, Clone, Default)]
pub struct MixedSequence {
    items: Vec<SeqItem>,
}

impl MixedSequence {
    pub fn new(items: Vec<SeqItem>) -> MixedSequence {
        MixedSequence { items }
    }

    pub fn from_tokens(ids: &[u32]) -> MixedSequence {
        MixedSequence {
            items: ids.iter().map(|&t| SeqItem::Token(t)).collect(),
        }
    }

    pub fn items(&self) -> &[SeqItem] {
        &self.items
    }

    pub fn push(&mut self, item: SeqItem) {
        self.items.push(item);
    }

    pub fn expanded_len(&self) -> usize {
        self.items
            .iter()
            .map(|i| match i {
                SeqItem::Token(_) => 1,
                SeqItem::Image(_) => TOKENS_PER_IMAGE,
            })
            .sum()
    }
}

/// Parameter map plus configuration. Parameters are immutable tensors;
/// training replaces them wholesale through [`Model::set_param`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of one forward pass.
pub struct ForwardVars {
    vars: BTreeMap<String, Var>,
}

impl ForwardVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }
}

fn attn_names(stack: &str, layer: usize) -> [String; 6] {
    [
        format!("{stack}.layer{layer}.attn.w_q"),
        format!("{stack}.layer{layer}.attn.w_k"),
        format!("{stack}.layer{layer}.attn.w_v"),
        format!("{stack}.layer{layer}.attn.w_o"),
        format!("{stack}.layer{layer}.attn.q_gain"),
        format!("{stack}.layer{layer}.attn.k_gain"),
    ]
}

/// Tensor schema for one stack layer, shared by the encoder, the decoder
/// and decoder-only checkpoints.
pub(crate) fn layer_shapes(cfg: &ModelConfig, stack: &str, layer: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let p = |s: &str| format!("{stack}.layer{layer}.{s}");
    vec![
        (p("attn.w_q"), vec![d, cfg.n_q_heads * dh]),
        (p("attn.w_k"), vec![d, cfg.n_kv_heads * dh]),
        (p("attn.w_v"), vec![d, cfg.n_kv_heads * dh]),
        (p("attn.w_o"), vec![cfg.n_q_heads * dh, d]),
        (p("attn.q_gain"), vec![dh]),
        (p("attn.k_gain"), vec![dh]),
        (p("attn.pre_norm"), vec![d]),
        (p("attn.post_norm"), vec![d]),
        (p("ffn.w_gate"), vec![d, cfg.d_ffn]),
        (p("ffn.w_up"), vec![d, cfg.d_ffn]),
        (p("ffn.w_down"), vec![cfg.d_ffn, d]),
        (p("ffn.pre_norm"), vec![d]),
        (p("ffn.post_norm"), vec![d]),
    ]
}

impl Model {
    /// Full tensor schema implied by a configuration. Only the merged
    /// decoder architecture is constructible; the separate-cross-attention
    /// baseline exists solely in the parameter arithmetic.
    pub fn expected_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
        cfg.validate()?;
        if !cfg.merged_attention {
            return Err(Error::config(
                "only the merged-attention decoder is constructible; \
                 merged_attention=false is supported by count_params only",
            ));
        }
        let mut shapes = BTreeMap::new();
        if cfg.tied_embeddings {
            shapes.insert("embedding".to_string(), vec![cfg.vocab_size, cfg.d_model]);
        } else {
            shapes.insert(
                "encoder_embedding".to_string(),
                vec![cfg.vocab_size, cfg.d_model],
            );
            shapes.insert(
                "decoder_embedding".to_string(),
                vec![cfg.vocab_size, cfg.d_model],
            );
        }
        for stack in ["encoder", "decoder"] {
            for layer in 0..cfg.n_layers {
                for (name, shape) in layer_shapes(cfg, stack, layer) {
                    shapes.insert(name, shape);
                }
            }
            shapes.insert(format!("{stack}.final_norm"), vec![cfg.d_model]);
        }
        if let Some(v) = &cfg.vision {
            shapes.insert(
                "vision_projection".to_string(),
                vec![v.d_vision, cfg.d_model],
            );
        }
        Ok(shapes)
    }

    /// Names that never receive gradient nor optimizer updates.
    pub fn frozen_names(cfg: &ModelConfig) -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        if cfg.vision.is_some() {
            s.insert("vision_projection".to_string());
        }
        s
    }

    /// Initialize a fresh model. Deterministic per (cfg, seed): every tensor
    /// draws from its own named stream, so the map is bitwise reproducible.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        let shapes = Model::expected_shapes(cfg)?;
        let emb_std = 1.0 / (cfg.d_model as f64).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in shapes {
            let mut rng = Rng::new(mix(seed, hash_name(&name)));
            let t = if name.ends_with("_norm") || name.ends_with("_gain") {
                Tensor::full(shape, 1.0)?
            } else if name.contains("embedding") {
                Tensor::truncated_normal(shape, emb_std, &mut rng)
            } else {
                Tensor::truncated_normal(shape, 0.02, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Model {
            cfg: cfg.clone(),
            params,
        })
    }

    /// Wrap an existing parameter map, validating every shape against the
    /// configuration schema.
    pub fn from_param_map(cfg: &ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Model> {
        let shapes = Model::expected_shapes(cfg)?;
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(Error::config(format!("missing parameter tensor '{name}'"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape(format!(
                        "parameter '{name}' has shape {:?}, schema requires {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        for name in params.keys() {
            if !shapes.contains_key(name) {
                return Err(Error::config(format!(
                    "unexpected parameter tensor '{name}'"
                )));
            }
        }
        Ok(Model {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.params.get(name) {
            Some(old) if old.shape() == t.shape() => {
                self.params.insert(name.to_string(), t);
                Ok(())
            }
            Some(old) => Err(Error::shape(format!(
                "set_param '{name}': shape {:?} vs existing {:?}",
                t.shape(),
                old.shape()
            ))),
            None => Err(Error::config(format!("no parameter named '{name}'"))),
        }
    }

    /// Total allocated parameter elements (including frozen tensors).
    pub fn allocated_params(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    // -- tape forward --------------------------------------------------------

    /// Register every parameter on a tape; frozen tensors become constants.
    pub fn register_params(&self, tape: &mut Tape) -> ForwardVars {
        let frozen = Model::frozen_names(&self.cfg);
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if frozen.contains(name) {
                    tape.constant(t.clone())
                } else {
                    tape.param(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        ForwardVars { vars }
    }

    fn attn_weights(&self, vars: &ForwardVars, stack: &str, layer: usize) -> AttentionWeights {
        let [q, k, v, o, qg, kg] = attn_names(stack, layer);
        AttentionWeights {
            w_q: vars.get(&q),
            w_k: vars.get(&k),
            w_v: vars.get(&v),
            w_o: vars.get(&o),
            q_gain: vars.get(&qg),
            k_gain: vars.get(&kg),
        }
    }

    fn embedding_var(&self, vars: &ForwardVars, stack: &str) -> Var {
        if self.cfg.tied_embeddings {
            vars.get("embedding")
        } else {
            vars.get(&format!("{stack}_embedding"))
        }
    }

    /// Pre-norm → sub-layer → post-norm → residual.
    fn sandwich(
        &self,
        tape: &mut Tape,
        vars: &ForwardVars,
        x: Var,
        pre: &str,
        post: &str,
        inner: impl FnOnce(&mut Tape, Var) -> Result<Var>,
    ) -> Result<Var> {
        let eps = self.cfg.norm_eps;
        let normed = tape.rms_norm(x, vars.get(pre), eps)?;
        let out = inner(tape, normed)?;
        let out = tape.rms_norm(out, vars.get(post), eps)?;
        tape.add(x, out)
    }

    fn ffn(
        &self,
        tape: &mut Tape,
        vars: &ForwardVars,
        stack: &str,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let p = |s: &str| format!("{stack}.layer{layer}.ffn.{s}");
        let gate = tape.matmul(x, vars.get(&p("w_gate")))?;
        let up = tape.matmul(x, vars.get(&p("w_up")))?;
        let act = tape.gelu(gate)?;
        let prod = tape.mul(act, up)?;
        tape.matmul(prod, vars.get(&p("w_down")))
    }

    /// Embed a mixed sequence: token runs through the (scaled) embedding
    /// table, image blocks through the frozen projection. Image rows enter
    /// the tape as constants — the projection and the precomputed vision
    /// embeddings receive exactly zero gradient.
    fn embed_sequence(
        &self,
        tape: &mut Tape,
        vars: &ForwardVars,
        seq: &MixedSequence,
    ) -> Result<Var> {
        let n = seq.expanded_len();
        if n == 0 {
            return Err(Error::data("cannot encode an empty sequence"));
        }
        if n > self.cfg.max_seq {
            return Err(Error::data(format!(
                "sequence expands to {n} positions, max_seq is {}",
                self.cfg.max_seq
            )));
        }
        let scale = (self.cfg.d_model as f64).sqrt();
        let table = self.embedding_var(vars, "encoder");
        let mut segments: Vec<Var> = Vec::new();
        let mut run: Vec<u32> = Vec::new();
        for item in seq.items() {
            match item {
                SeqItem::Token(id) => run.push(*id),
                SeqItem::Image(img) => {
                    if !run.is_empty() {
                        segments.push(tape.embed(table, &run, scale)?);
                        run.clear();
                    }
                    let vcfg = self.cfg.vision.as_ref().ok_or_else(|| {
                        Error::config("sequence contains an image but vision is disabled")
                    })?;
                    if img.shape() != [TOKENS_PER_IMAGE, vcfg.d_vision] {
                        return Err(Error::shape(format!(
                            "image embedding has shape {:?}, expected [{TOKENS_PER_IMAGE}, {}]",
                            img.shape(),
                            vcfg.d_vision
                        )));
                    }
                    let projected = ops::matmul(img, self.param("vision_projection"))?;
                    segments.push(tape.constant(projected));
                }
            }
        }
        if !run.is_empty() {
            segments.push(tape.embed(table, &run, scale)?);
        }
        if segments.len() == 1 {
            Ok(segments[0])
        } else {
            tape.concat_rows(&segments)
        }
    }

    /// Encoder forward on a tape; returns the final hidden states `[n, d]`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ForwardVars,
        seq: &MixedSequence,
    ) -> Result<Var> {
        let mut x = self.embed_sequence(tape, vars, seq)?;
        let n = tape.value(x).dims2()?.0;
        let positions: Vec<usize> = (0..n).collect();
        for (layer, kind) in self.cfg.layer_kinds().into_iter().enumerate() {
            let mask_kind = if self.cfg.encoder_full_visibility {
                LayerKind::Global
            } else {
                kind
            };
            let rope = self.cfg.rope_for(kind);
            let w = self.attn_weights(vars, "encoder", layer);
            let eps = self.cfg.norm_eps;
            let positions = &positions;
            x = self.sandwich(
                tape,
                vars,
                x,
                &format!("encoder.layer{layer}.attn.pre_norm"),
                &format!("encoder.layer{layer}.attn.post_norm"),
                |tape, inp| {
                    encoder_self_attention(tape, inp, &w, mask_kind, &rope, positions, eps)
                },
            )?;
            x = self.sandwich(
                tape,
                vars,
                x,
                &format!("encoder.layer{layer}.ffn.pre_norm"),
                &format!("encoder.layer{layer}.ffn.post_norm"),
                |tape, inp| self.ffn(tape, vars, "encoder", layer, inp),
            )?;
        }
        tape.rms_norm(x, vars.get("encoder.final_norm"), self.cfg.norm_eps)
    }

    /// Decoder forward on a tape over target ids (BOS-prefixed by the
    /// caller); returns logits `[m, vocab]`. `h_for_layer` supplies the
    /// encoder states visible to each layer — `None` yields pure causal
    /// self-attention for that layer (the decoder-only degenerate case).
    fn decode_on_tape_with(
        &self,
        tape: &mut Tape,
        vars: &ForwardVars,
        ids: &[u32],
        enc_len: usize,
        mut h_for_layer: impl FnMut(&mut Tape, usize, LayerKind) -> Option<Var>,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::data("decoder input must hold at least one id"));
        }
        let m = ids.len();
        let scale = (self.cfg.d_model as f64).sqrt();
        let table = self.embedding_var(vars, "decoder");
        let mut x = tape.embed(table, ids, scale)?;
        let dec_positions: Vec<usize> = match self.cfg.position_scheme {
            PositionScheme::Continued => (enc_len..enc_len + m).collect(),
            PositionScheme::Restart => (0..m).collect(),
        };
        let enc_positions: Vec<usize> = (0..enc_len).collect();
        for (layer, kind) in self.cfg.layer_kinds().into_iter().enumerate() {
            let h = h_for_layer(tape, layer, kind);
            let rope = self.cfg.rope_for(kind);
            let w = self.attn_weights(vars, "decoder", layer);
            let eps = self.cfg.norm_eps;
            let (dp, ep) = (&dec_positions, &enc_positions);
            x = self.sandwich(
                tape,
                vars,
                x,
                &format!("decoder.layer{layer}.attn.pre_norm"),
                &format!("decoder.layer{layer}.attn.post_norm"),
                |tape, inp| merged_attention(tape, inp, h, &w, kind, &rope, dp, ep, eps),
            )?;
            x = self.sandwich(
                tape,
                vars,
                x,
                &format!("decoder.layer{layer}.ffn.pre_norm"),
                &format!("decoder.layer{layer}.ffn.post_norm"),
                |tape, inp| self.ffn(tape, vars, "decoder", layer, inp),
            )?;
        }
        let final_h = tape.rms_norm(x, vars.get("decoder.final_norm"), self.cfg.norm_eps)?;
        // Output logits share the embedding table when tied.
        tape.matmul_bt(final_h, self.embedding_var(vars, "decoder"))
    }

    /// Whether a decoder layer of the given kind sees the encoder output.
    pub fn layer_sees_encoder(&self, kind: LayerKind) -> bool {
        match self.cfg.cross_attention_layers {
            CrossAttentionLayers::All => true,
            CrossAttentionLayers::GlobalOnly => kind == LayerKind::Global,
        }
    }

    /// Standard decoder forward on a tape.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ForwardVars,
        h: Option<Var>,
        enc_len: usize,
        ids: &[u32],
    ) -> Result<Var> {
        self.decode_on_tape_with(tape, vars, ids, enc_len, |_, _, kind| {
            h.filter(|_| self.layer_sees_encoder(kind))
        })
    }

    // -- pure inference ------------------------------------------------------

    /// Encoder forward; returns hidden states `[expanded_len, d]`.
    pub fn encode(&self, seq: &MixedSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_params(&mut tape);
        let h = self.encode_on_tape(&mut tape, &vars, seq)?;
        Ok(tape.value(h).clone())
    }

    /// Decoder forward over BOS-prefixed target ids. `h` may be `None`, in
    /// which case every layer runs pure causal self-attention (empty
    /// encoder concatenation).
    pub fn decode(&self, h: Option<&Tensor>, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_params(&mut tape);
        let (hv, enc_len) = match h {
            Some(t) => (Some(tape.constant(t.clone())), t.dims2()?.0),
            None => (None, 0),
        };
        let logits = self.decode_on_tape(&mut tape, &vars, hv, enc_len, ids)?;
        Ok(tape.value(logits).clone())
    }

    /// Iterative argmax decoding with EOS stop. Returns the generated ids
    /// (the BOS prefix is internal, the EOS — when produced — is included).
    pub fn greedy_decode(&self, seq: &MixedSequence, max_new_tokens: usize) -> Result<Vec<u32>> {
        if max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be ≥ 1"));
        }
        let specials = self.cfg.specials();
        let h = self.encode(seq)?;
        let mut ids = vec![specials.bos];
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            let logits = self.decode(Some(&h), &ids)?;
            let (rows, vocab) = logits.dims2()?;
            let last = &logits.data()[(rows - 1) * vocab..rows * vocab];
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i as u32)
                .unwrap();
            out.push(next);
            if next == specials.eos {
                break;
            }
            ids.push(next);
        }
        Ok(out)
    }

    /// Per-decoder-layer gradient norms of the loss with respect to the
    /// encoder states consumed by that layer. Layers that do not see the
    /// encoder report exactly zero.
    pub fn h_layer_grad_norms(&self, seq: &MixedSequence, target: &[u32]) -> Result<Vec<f64>> {
        let h = self.encode(seq)?;
        let enc_len = h.dims2()?.0;
        let specials = self.cfg.specials();
        let mut ids = vec![specials.bos];
        ids.extend_from_slice(&target[..target.len() - 1]);

        let mut tape = Tape::new();
        let vars = self.register_params(&mut tape);
        let mut probes: Vec<Option<Var>> = vec![None; self.cfg.n_layers];
        let logits = self.decode_on_tape_with(&mut tape, &vars, &ids, enc_len, |tape, layer, kind| {
            if self.layer_sees_encoder(kind) {
                let v = tape.param(h.clone());
                probes[layer] = Some(v);
                Some(v)
            } else {
                None
            }
        })?;
        let (loss, n) = tape.cross_entropy_sum(logits, target, Some(specials.pad))?;
        let grads = tape.backward(loss, 1.0 / (n.max(1)) as f64)?;
        Ok(probes
            .iter()
            .map(|p| match p {
                Some(v) => grads
                    .get(*v)
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
                    .unwrap_or(0.0),
                None => 0.0,
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Parameter arithmetic
// ---------------------------------------------------------------------------

/// Closed-form parameter counts per component. Unlike the model itself,
/// this covers the untied and separate-cross-attention baselines so the
/// architecture ablations can be compared arithmetically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub vision_projection: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.encoder + self.decoder + self.vision_projection
    }
}

pub fn count_params(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.d_model as u64;
    let dh = cfg.d_head as u64;
    let hq = cfg.n_q_heads as u64;
    let hkv = cfg.n_kv_heads as u64;
    let layers = cfg.n_layers as u64;
    let v = cfg.vocab_size as u64;

    // One attention module: q/k/v/o projections plus the QK-norm gains.
    let attn_module = d * hq * dh + 2 * d * hkv * dh + hq * dh * d + 2 * dh;
    // Each sub-layer is wrapped in pre+post RMSNorm gains.
    let sublayer_norms = 2 * d;
    let ffn = 3 * d * cfg.d_ffn as u64;
    let layer = attn_module + sublayer_norms + ffn + sublayer_norms;

    let encoder = layers * layer + d;
    let decoder = if cfg.merged_attention {
        encoder
    } else {
        // Separate cross-attention adds one attention module plus its own
        // norm pair per cross-equipped layer.
        let n_cross = match cfg.cross_attention_layers {
            CrossAttentionLayers::All => layers,
            CrossAttentionLayers::GlobalOnly => cfg
                .layer_kinds()
                .iter()
                .filter(|k| **k == LayerKind::Global)
                .count() as u64,
        };
        encoder + n_cross * (attn_module + sublayer_norms)
    };
    let embedding = if cfg.tied_embeddings { v * d } else { 2 * v * d };
    let vision_projection = cfg.vision.map_or(0, |vc| vc.d_vision as u64 * d);
    ParamBreakdown {
        embedding,
        encoder,
        decoder,
        vision_projection,
    }
}
