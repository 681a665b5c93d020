//! Checkpoints: an ordered name→tensor map with metadata, a bit-exact file
//! format, initialization of encoder-decoder parameter maps from
//! decoder-only checkpoints, and checkpoint averaging.
//!
//! File layout:
//!
//! ```text
//! magic "EDCK" | version u32 | metadata length u32
//! metadata: canonical key=value text (family, step, dtype, model.*)
//! tensor count u32
//! per tensor: name length u16 + bytes | rank u8 | extents u32×rank |
//!             dtype code u8 (1 = f32, 2 = f64) | raw little-endian payload
//! trailing CRC-32 over everything after the 12-byte header
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{parse_kv_text, render_kv_text, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{layer_shapes, Model};
use crate::rng::{hash_name, mix, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Dtype> {
        match c {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn from_name(s: &str) -> Result<Dtype> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::format(format!("unknown dtype '{other}'"))),
        }
    }
}

/// Which parameter schema the checkpoint follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    DecoderOnly,
    EncoderDecoder,
}

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::DecoderOnly => "decoder_only",
            Family::EncoderDecoder => "encoder_decoder",
        }
    }

    fn from_name(s: &str) -> Result<Family> {
        match s {
            "decoder_only" => Ok(Family::DecoderOnly),
            "encoder_decoder" => Ok(Family::EncoderDecoder),
            other => Err(Error::format(format!("unknown checkpoint family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
    pub dtype: Dtype,
    pub family: Family,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: BTreeMap<String, Tensor>,
}

/// Tensor schema of a decoder-only checkpoint: one layer stack, one
/// embedding, one final norm.
pub fn decoder_only_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    cfg.validate()?;
    let mut shapes = BTreeMap::new();
    shapes.insert("embedding".to_string(), vec![cfg.vocab_size, cfg.d_model]);
    for layer in 0..cfg.n_layers {
        for (name, shape) in decoder_only_layer_shapes(cfg, layer) {
            shapes.insert(name, shape);
        }
    }
    shapes.insert("final_norm".to_string(), vec![cfg.d_model]);
    Ok(shapes)
}

fn decoder_only_layer_shapes(cfg: &ModelConfig, layer: usize) -> Vec<(String, Vec<usize>)> {
    // Same per-layer schema as a stack layer, without the stack prefix.
    layer_shapes(cfg, "", layer)
        .into_iter()
        .map(|(name, shape)| (name.trim_start_matches('.').to_string(), shape))
        .collect()
}

impl Checkpoint {
    /// Build a checkpoint, validating every tensor against the schema the
    /// metadata implies. A 32-bit dtype snaps all payloads through f32 so
    /// that save/load round-trips stay bitwise.
    pub fn new(meta: CheckpointMeta, tensors: BTreeMap<String, Tensor>) -> Result<Checkpoint> {
        let shapes = match meta.family {
            Family::DecoderOnly => decoder_only_shapes(&meta.config)?,
            Family::EncoderDecoder => Model::expected_shapes(&meta.config)?,
        };
        for (name, shape) in &shapes {
            match tensors.get(name) {
                None => {
                    return Err(Error::config(format!("checkpoint missing tensor '{name}'")))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape(format!(
                        "checkpoint tensor '{name}' has shape {:?}, metadata implies {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        for name in tensors.keys() {
            if !shapes.contains_key(name) {
                return Err(Error::config(format!(
                    "checkpoint holds unexpected tensor '{name}'"
                )));
            }
        }
        let tensors = if meta.dtype == Dtype::F32 {
            tensors.into_iter().map(|(n, t)| (n, t.snap_f32())).collect()
        } else {
            tensors
        };
        Ok(Checkpoint { meta, tensors })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no tensor '{name}'")))
    }

    pub fn manifest(&self) -> String {
        let mut out = format!(
            "EDCK v{VERSION} family={} step={} dtype={} tensors={}\n",
            self.meta.family.name(),
            self.meta.step,
            self.meta.dtype.name(),
            self.tensors.len()
        );
        let mut total = 0u64;
        for (name, t) in &self.tensors {
            total += t.numel() as u64;
            out.push_str(&format!(
                "{name}\t{:?}\t{}\t{}\n",
                t.shape(),
                self.meta.dtype.name(),
                t.numel()
            ));
        }
        out.push_str(&format!("total_elements\t{total}\n"));
        out
    }

    fn meta_text(&self) -> String {
        let mut kv = vec![
            ("family".to_string(), self.meta.family.name().to_string()),
            ("step".to_string(), self.meta.step.to_string()),
            ("dtype".to_string(), self.meta.dtype.name().to_string()),
        ];
        kv.extend(self.meta.config.to_kv());
        render_kv_text(&kv)
    }

    fn meta_from_text(text: &str) -> Result<CheckpointMeta> {
        let pairs = parse_kv_text(text)?;
        let mut family = None;
        let mut step = None;
        let mut dtype = None;
        for (k, v) in &pairs {
            match k.as_str() {
                "family" => family = Some(Family::from_name(v)?),
                "step" => {
                    step = Some(v.parse::<u64>().map_err(|_| {
                        Error::format(format!("bad step value '{v}' in metadata"))
                    })?)
                }
                "dtype" => dtype = Some(Dtype::from_name(v)?),
                _ => {}
            }
        }
        let config = ModelConfig::from_kv(&pairs)?;
        Ok(CheckpointMeta {
            config,
            step: step.ok_or_else(|| Error::format("metadata missing 'step'"))?,
            dtype: dtype.ok_or_else(|| Error::format("metadata missing 'dtype'"))?,
            family: family.ok_or_else(|| Error::format("metadata missing 'family'"))?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta_text().into_bytes();
        let mut body = Vec::new();
        body.extend_from_slice(&meta);
        body.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            body.extend_from_slice(&(name.len() as u16).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(t.rank() as u8);
            for &e in t.shape() {
                body.extend_from_slice(&(e as u32).to_le_bytes());
            }
            body.push(self.meta.dtype.code());
            match self.meta.dtype {
                Dtype::F32 => {
                    for &v in t.data() {
                        body.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for &v in t.data() {
                        body.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(12 + body.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 {
            return Err(Error::format(format!(
                "checkpoint too short: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let crc = crc32fast::hash(body);
        if crc != stored_crc {
            return Err(Error::format(format!(
                "checkpoint checksum mismatch: computed {crc:#010x}, stored {stored_crc:#010x}"
            )));
        }
        if meta_len > body.len() {
            return Err(Error::format(format!(
                "metadata length {meta_len} exceeds body size {}",
                body.len()
            )));
        }
        let meta_text = std::str::from_utf8(&body[..meta_len])
            .map_err(|_| Error::format("metadata is not UTF-8"))?;
        let meta = Checkpoint::meta_from_text(meta_text)?;
        let mut off = meta_len;
        let need = |off: usize, n: usize, what: &str| -> Result<()> {
            if off + n > body.len() {
                Err(Error::format(format!(
                    "checkpoint truncated reading {what}: need {} bytes, body holds {}",
                    off + n,
                    body.len()
                )))
            } else {
                Ok(())
            }
        };
        need(off, 4, "tensor count")?;
        let count = u32::from_le_bytes(body[off..off + 4].try_into().unwrap());
        off += 4;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            need(off, 2, "name length")?;
            let name_len = u16::from_le_bytes(body[off..off + 2].try_into().unwrap()) as usize;
            off += 2;
            need(off, name_len, "name")?;
            let name = std::str::from_utf8(&body[off..off + name_len])
                .map_err(|_| Error::format("tensor name is not UTF-8"))?
                .to_string();
            off += name_len;
            need(off, 1, "rank")?;
            let rank = body[off] as usize;
            off += 1;
            need(off, rank * 4, "extents")?;
            let mut shape = Vec::with_capacity(rank);
            for r in 0..rank {
                shape.push(
                    u32::from_le_bytes(body[off + r * 4..off + r * 4 + 4].try_into().unwrap())
                        as usize,
                );
            }
            off += rank * 4;
            need(off, 1, "dtype")?;
            let dtype = Dtype::from_code(body[off])?;
            off += 1;
            let numel: usize = shape.iter().product();
            let width = match dtype {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
            };
            need(off, numel * width, "payload")?;
            let mut data = Vec::with_capacity(numel);
            match dtype {
                Dtype::F32 => {
                    for i in 0..numel {
                        data.push(f32::from_le_bytes(
                            body[off + i * 4..off + i * 4 + 4].try_into().unwrap(),
                        ) as f64);
                    }
                }
                Dtype::F64 => {
                    for i in 0..numel {
                        data.push(f64::from_le_bytes(
                            body[off + i * 8..off + i * 8 + 8].try_into().unwrap(),
                        ));
                    }
                }
            }
            off += numel * width;
            tensors.insert(name, Tensor::from_vec(shape, data)?);
        }
        if off != body.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} trailing bytes",
                body.len() - off
            )));
        }
        Checkpoint::new(meta, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
        f.write_all(&bytes)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.bitwise_eq(bt))
    }
}

/// Snapshot a model into a checkpoint.
pub fn model_to_checkpoint(model: &Model, step: u64, dtype: Dtype) -> Result<Checkpoint> {
    Checkpoint::new(
        CheckpointMeta {
            config: model.cfg.clone(),
            step,
            dtype,
            family: Family::EncoderDecoder,
        },
        model.params().clone(),
    )
}

/// Rebuild a model from an encoder-decoder checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    if ckpt.meta.family != Family::EncoderDecoder {
        return Err(Error::config(
            "expected an encoder-decoder checkpoint, found decoder-only",
        ));
    }
    Model::from_param_map(&ckpt.meta.config, ckpt.tensors.clone())
}

/// Random decoder-only checkpoint, for adaptation sources in tests and
/// demos. Uses the same initializer rules as model construction.
pub fn synthesize_decoder_only(cfg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    let shapes = decoder_only_shapes(cfg)?;
    let emb_std = 1.0 / (cfg.d_model as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape) in shapes {
        let mut rng = Rng::new(mix(seed, hash_name(&name)));
        let t = if name.ends_with("_norm") || name.ends_with("_gain") {
            Tensor::full(shape, 1.0)?
        } else if name.contains("embedding") {
            Tensor::truncated_normal(shape, emb_std, &mut rng)
        } else {
            Tensor::truncated_normal(shape, 0.02, &mut rng)
        };
        tensors.insert(name, t);
    }
    Checkpoint::new(
        CheckpointMeta {
            config: cfg.clone(),
            step: 0,
            dtype: Dtype::F64,
            family: Family::DecoderOnly,
        },
        tensors,
    )
}

/// Initialize an encoder-decoder parameter map from a decoder-only
/// checkpoint: both stacks copy the source self-attention, feed-forward
/// and norm tensors layer by layer (the merged decoder module reuses the
/// self-attention weights for its cross portion), the embedding is stored
/// once and shared, and the vision projection is copied when present or
/// freshly initialized otherwise.
pub fn adapt_from_decoder_only(src: &Checkpoint, tgt_cfg: &ModelConfig) -> Result<Checkpoint> {
    if src.meta.family != Family::DecoderOnly {
        return Err(Error::config("adaptation source must be decoder-only"));
    }
    if !tgt_cfg.merged_attention {
        return Err(Error::config(
            "adaptation requires merged_attention=true in the target config",
        ));
    }
    if src.meta.config.n_layers != tgt_cfg.n_layers {
        return Err(Error::config(format!(
            "layer count mismatch: source has {} layers, target wants {} \
             (first unmapped tensor: 'layer{}.attn.w_q')",
            src.meta.config.n_layers,
            tgt_cfg.n_layers,
            src.meta.config.n_layers.min(tgt_cfg.n_layers)
        )));
    }
    let tgt_shapes = Model::expected_shapes(tgt_cfg)?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in &tgt_shapes {
        let src_name = if let Some(rest) = name.strip_prefix("encoder.") {
            map_stack_name(rest)
        } else if let Some(rest) = name.strip_prefix("decoder.") {
            map_stack_name(rest)
        } else if name == "embedding" || name == "encoder_embedding" || name == "decoder_embedding"
        {
            Some("embedding".to_string())
        } else if name == "vision_projection" {
            None
        } else {
            return Err(Error::config(format!("unmapped target tensor '{name}'")));
        };
        let tensor = match src_name {
            Some(sn) => {
                let t = src.tensors.get(&sn).ok_or_else(|| {
                    Error::config(format!("source checkpoint missing tensor '{sn}'"))
                })?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "source tensor '{sn}' has shape {:?}, target '{name}' needs {:?}",
                        t.shape(),
                        shape
                    )));
                }
                t.clone()
            }
            None => {
                // Fresh frozen projection; deterministic given the source.
                let mut rng = Rng::new(mix(hash_name("vision_projection"), src.meta.step));
                Tensor::truncated_normal(shape.clone(), 0.02, &mut rng)
            }
        };
        tensors.insert(name.clone(), tensor);
    }
    Checkpoint::new(
        CheckpointMeta {
            config: tgt_cfg.clone(),
            step: src.meta.step,
            dtype: src.meta.dtype,
            family: Family::EncoderDecoder,
        },
        tensors,
    )
}

fn map_stack_name(rest: &str) -> Option<String> {
    if rest == "final_norm" {
        Some("final_norm".to_string())
    } else {
        // layerN.* maps one to one.
        Some(rest.to_string())
    }
}

/// Elementwise arithmetic mean of checkpoints with identical schemas.
/// Accumulation is in f64 regardless of payload dtype; the result carries
/// the inputs' dtype and the maximum step.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    if ckpts.is_empty() {
        return Err(Error::config("average of zero checkpoints"));
    }
    let first = &ckpts[0];
    for (i, c) in ckpts.iter().enumerate().skip(1) {
        if c.meta.family != first.meta.family || c.meta.dtype != first.meta.dtype {
            return Err(Error::config(format!(
                "checkpoint {i} family/dtype differs from the first"
            )));
        }
        let a: Vec<&String> = first.tensors.keys().collect();
        let b: Vec<&String> = c.tensors.keys().collect();
        if a != b {
            let missing = a.iter().find(|k| !c.tensors.contains_key(**k));
            let extra = b.iter().find(|k| !first.tensors.contains_key(**k));
            return Err(Error::config(format!(
                "checkpoint {i} name set differs (missing {missing:?}, extra {extra:?})"
            )));
        }
        for (name, t) in &c.tensors {
            if t.shape() != first.tensors[name].shape() {
                return Err(Error::shape(format!(
                    "checkpoint {i} tensor '{name}' shape {:?} vs {:?}",
                    t.shape(),
                    first.tensors[name].shape()
                )));
            }
        }
    }
    let mut tensors = BTreeMap::new();
    for (name, t0) in &first.tensors {
        // Running mean: identical inputs come back bitwise unchanged.
        let mut acc = t0.data().to_vec();
        for (j, c) in ckpts.iter().enumerate().skip(1) {
            let inv = 1.0 / (j as f64 + 1.0);
            for (a, v) in acc.iter_mut().zip(c.tensors[name].data()) {
                *a += (v - *a) * inv;
            }
        }
        tensors.insert(name.clone(), Tensor::from_vec(t0.shape().to_vec(), acc)?);
    }
    Checkpoint::new(
        CheckpointMeta {
            config: first.meta.config.clone(),
            step: ckpts.iter().map(|c| c.meta.step).max().unwrap(),
            dtype: first.meta.dtype,
            family: first.meta.family,
        },
        tensors,
    )
}

/// Causal language model forward straight off a decoder-only checkpoint:
/// embedding lookup (scaled), the layer stack with causal self-attention,
/// final norm, logits through the tied embedding.
pub fn decoder_only_forward(ckpt: &Checkpoint, ids: &[u32]) -> Result<Tensor> {
    if ckpt.meta.family != Family::DecoderOnly {
        return Err(Error::config("decoder_only_forward needs a decoder-only checkpoint"));
    }
    if ids.is_empty() {
        return Err(Error::data("decoder input must hold at least one id"));
    }
    let cfg = &ckpt.meta.config;
    let mut tape = Tape::new();
    let mut var_of = BTreeMap::new();
    for (name, t) in &ckpt.tensors {
        var_of.insert(name.clone(), tape.constant(t.clone()));
    }
    let scale = (cfg.d_model as f64).sqrt();
    let emb = var_of["embedding"];
    let mut x = tape.embed(emb, ids, scale)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let eps = cfg.norm_eps;
    for (layer, kind) in cfg.layer_kinds().into_iter().enumerate() {
        let rope = cfg.rope_for(kind);
        let w = crate::attention::AttentionWeights {
            w_q: var_of[&format!("layer{layer}.attn.w_q")],
            w_k: var_of[&format!("layer{layer}.attn.w_k")],
            w_v: var_of[&format!("layer{layer}.attn.w_v")],
            w_o: var_of[&format!("layer{layer}.attn.w_o")],
            q_gain: var_of[&format!("layer{layer}.attn.q_gain")],
            k_gain: var_of[&format!("layer{layer}.attn.k_gain")],
        };
        let pre = tape.rms_norm(x, var_of[&format!("layer{layer}.attn.pre_norm")], eps)?;
        let attn = crate::attention::merged_attention(
            &mut tape, pre, None, &w, kind, &rope, &positions, &[], eps,
        )?;
        let post = tape.rms_norm(attn, var_of[&format!("layer{layer}.attn.post_norm")], eps)?;
        x = tape.add(x, post)?;
        let pre = tape.rms_norm(x, var_of[&format!("layer{layer}.ffn.pre_norm")], eps)?;
        let gate = tape.matmul(pre, var_of[&format!("layer{layer}.ffn.w_gate")])?;
        let up = tape.matmul(pre, var_of[&format!("layer{layer}.ffn.w_up")])?;
        let act = tape.gelu(gate)?;
        let prod = tape.mul(act, up)?;
        let ffn = tape.matmul(prod, var_of[&format!("layer{layer}.ffn.w_down")])?;
        let post = tape.rms_norm(ffn, var_of[&format!("layer{layer}.ffn.post_norm")], eps)?;
        x = tape.add(x, post)?;
    }
    let final_h = tape.rms_norm(x, var_of["final_norm"], eps)?;
    let logits = tape.matmul_bt(final_h, emb)?;
    Ok(tape.value(logits).clone())
}
