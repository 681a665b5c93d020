//! Model configuration: architectural hyperparameters, the special-token
//! layout at the top of the vocabulary, and a flat `key=value` text codec
//! shared by checkpoint metadata and run-config files.

use crate::attention::LayerKind;
use crate::error::{Error, Result};

/// How the per-stack layer kinds are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPattern {
    /// Five sliding-window layers followed by one full-attention layer,
    /// repeated; requires the layer count to be divisible by 6.
    FiveLocalOneGlobal,
    /// Every layer global (useful for toy configs whose depth is not a
    /// multiple of six).
    AllGlobal,
    /// Every layer local.
    AllLocal,
}

/// Which decoder layers see the encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossAttentionLayers {
    All,
    /// Rejected-ablation flag: only layers with global self-attention get
    /// encoder visibility (one in six under the 5:1 pattern).
    GlobalOnly,
}

/// Position numbering for decoder tokens in merged attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionScheme {
    /// Encoder tokens occupy 0..n−1 and decoder tokens continue at n.
    Continued,
    /// Decoder positions restart at 0.
    Restart,
}

/// Vision-token path parameters. The vision tower itself is out of scope;
/// images arrive as precomputed embeddings that a frozen linear layer
/// projects into the model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisionConfig {
    pub d_vision: usize,
    /// Fixed at 256 tokens per image.
    pub tokens_per_image: usize,
}

pub const TOKENS_PER_IMAGE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    /// Layers per stack (the encoder and decoder are equally deep).
    pub n_layers: usize,
    pub layer_pattern: LayerPattern,
    pub local_window: usize,
    pub d_ffn: usize,
    pub rope_base_local: f64,
    pub rope_base_global: f64,
    pub pi_scale: f64,
    pub tied_embeddings: bool,
    pub merged_attention: bool,
    pub cross_attention_layers: CrossAttentionLayers,
    /// When true, encoder self-attention ignores the local/global pattern
    /// and every encoder token sees every other.
    pub encoder_full_visibility: bool,
    pub position_scheme: PositionScheme,
    pub norm_eps: f64,
    pub max_seq: usize,
    pub num_sentinels: usize,
    pub vision: Option<VisionConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            d_head: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            n_layers: 6,
            layer_pattern: LayerPattern::FiveLocalOneGlobal,
            local_window: 512,
            d_ffn: 256,
            rope_base_local: 10_000.0,
            rope_base_global: 1_000_000.0,
            pi_scale: 1.0,
            tied_embeddings: true,
            merged_attention: true,
            cross_attention_layers: CrossAttentionLayers::All,
            encoder_full_visibility: false,
            position_scheme: PositionScheme::Continued,
            norm_eps: 1e-6,
            max_seq: 16_384,
            num_sentinels: 64,
            vision: None,
        }
    }
}

/// Reserved ids live at the top of the vocabulary: sentinels ascending,
/// then BOS, EOS and PAD. Ordinary text ids must stay below the sentinel
/// block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: u32,
    pub eos: u32,
    pub bos: u32,
    pub sentinel_base: u32,
    pub num_sentinels: u32,
}

impl SpecialTokens {
    /// Sentinel `k`; ids increase with `k`.
    pub fn sentinel(&self, k: u32) -> Result<u32> {
        if k >= self.num_sentinels {
            return Err(Error::data(format!(
                "sentinel index {k} exceeds budget {}",
                self.num_sentinels
            )));
        }
        Ok(self.sentinel_base + k)
    }

    pub fn sentinel_index(&self, id: u32) -> Option<u32> {
        if id >= self.sentinel_base && id < self.sentinel_base + self.num_sentinels {
            Some(id - self.sentinel_base)
        } else {
            None
        }
    }

    /// Exclusive upper bound for ordinary text ids.
    pub fn text_limit(&self) -> u32 {
        self.sentinel_base
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::config(format!(
                "d_head must be even for rotary pairs, got {}",
                self.d_head
            )));
        }
        if self.n_kv_heads == 0 || !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::config(format!(
                "n_q_heads ({}) must be a positive multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be positive"));
        }
        if self.layer_pattern == LayerPattern::FiveLocalOneGlobal && !self.n_layers.is_multiple_of(6) {
            return Err(Error::config(format!(
                "n_layers must be divisible by 6 under the 5:1 local/global pattern, got {}",
                self.n_layers
            )));
        }
        if matches!(self.layer_pattern, LayerPattern::FiveLocalOneGlobal | LayerPattern::AllLocal)
            && self.local_window == 0
        {
            return Err(Error::config("local_window must be positive"));
        }
        if self.pi_scale < 1.0 {
            return Err(Error::config(format!(
                "pi_scale must be ≥ 1, got {}",
                self.pi_scale
            )));
        }
        if let Some(v) = &self.vision {
            if v.tokens_per_image != TOKENS_PER_IMAGE {
                return Err(Error::config(format!(
                    "tokens_per_image is fixed at {TOKENS_PER_IMAGE}, got {}",
                    v.tokens_per_image
                )));
            }
            if v.d_vision == 0 {
                return Err(Error::config("d_vision must be positive"));
            }
        }
        let reserved = self.num_sentinels + 3;
        if self.vocab_size <= reserved {
            return Err(Error::config(format!(
                "vocab_size {} cannot hold {} reserved ids",
                self.vocab_size, reserved
            )));
        }
        Ok(())
    }

    /// Layer kinds of one stack, in order.
    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (0..self.n_layers)
            .map(|i| match self.layer_pattern {
                LayerPattern::AllGlobal => LayerKind::Global,
                LayerPattern::AllLocal => LayerKind::Local {
                    window: self.local_window,
                },
                LayerPattern::FiveLocalOneGlobal => {
                    if i % 6 == 5 {
                        LayerKind::Global
                    } else {
                        LayerKind::Local {
                            window: self.local_window,
                        }
                    }
                }
            })
            .collect()
    }

    pub fn specials(&self) -> SpecialTokens {
        let v = self.vocab_size as u32;
        let ns = self.num_sentinels as u32;
        SpecialTokens {
            pad: v - 1,
            eos: v - 2,
            bos: v - 3,
            sentinel_base: v - 3 - ns,
            num_sentinels: ns,
        }
    }

    /// Rope parameters for a layer kind.
    pub fn rope_for(&self, kind: LayerKind) -> crate::attention::RopeConfig {
        let base = match kind {
            LayerKind::Global => self.rope_base_global,
            LayerKind::Local { .. } => self.rope_base_local,
        };
        crate::attention::RopeConfig {
            base_freq: base,
            pi_scale: self.pi_scale,
        }
    }

    // -- flat key=value codec ------------------------------------------------

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("model.vocab_size", self.vocab_size.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.d_head", self.d_head.to_string()),
            ("model.n_q_heads", self.n_q_heads.to_string()),
            ("model.n_kv_heads", self.n_kv_heads.to_string()),
            ("model.n_layers", self.n_layers.to_string()),
            (
                "model.layer_pattern",
                match self.layer_pattern {
                    LayerPattern::FiveLocalOneGlobal => "five_local_one_global".to_string(),
                    LayerPattern::AllGlobal => "all_global".to_string(),
                    LayerPattern::AllLocal => "all_local".to_string(),
                },
            ),
            ("model.local_window", self.local_window.to_string()),
            ("model.d_ffn", self.d_ffn.to_string()),
            ("model.rope_base_local", fmt_f64(self.rope_base_local)),
            ("model.rope_base_global", fmt_f64(self.rope_base_global)),
            ("model.pi_scale", fmt_f64(self.pi_scale)),
            ("model.tied_embeddings", self.tied_embeddings.to_string()),
            ("model.merged_attention", self.merged_attention.to_string()),
            (
                "model.cross_attention_layers",
                match self.cross_attention_layers {
                    CrossAttentionLayers::All => "all".to_string(),
                    CrossAttentionLayers::GlobalOnly => "global_only".to_string(),
                },
            ),
            (
                "model.encoder_full_visibility",
                self.encoder_full_visibility.to_string(),
            ),
            (
                "model.position_scheme",
                match self.position_scheme {
                    PositionScheme::Continued => "continued".to_string(),
                    PositionScheme::Restart => "restart".to_string(),
                },
            ),
            ("model.norm_eps", fmt_f64(self.norm_eps)),
            ("model.max_seq", self.max_seq.to_string()),
            ("model.num_sentinels", self.num_sentinels.to_string()),
            (
                "model.vision",
                self.vision.map_or("off".to_string(), |_| "on".to_string()),
            ),
        ];
        if let Some(v) = &self.vision {
            kv.push(("model.d_vision", v.d_vision.to_string()));
            kv.push(("model.tokens_per_image", v.tokens_per_image.to_string()));
        }
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Build from key=value pairs, starting from defaults. Unknown
    /// `model.*` keys are rejected; keys outside the `model.` namespace are
    /// ignored (they belong to other sections of a run config).
    pub fn from_kv(pairs: &[(String, String)]) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        let mut d_vision: Option<usize> = None;
        let mut tokens_per_image: Option<usize> = None;
        let mut vision_on = false;
        for (k, v) in pairs {
            if !k.starts_with("model.") {
                continue;
            }
            match k.as_str() {
                "model.vocab_size" => cfg.vocab_size = parse(k, v)?,
                "model.d_model" => cfg.d_model = parse(k, v)?,
                "model.d_head" => cfg.d_head = parse(k, v)?,
                "model.n_q_heads" => cfg.n_q_heads = parse(k, v)?,
                "model.n_kv_heads" => cfg.n_kv_heads = parse(k, v)?,
                "model.n_layers" => cfg.n_layers = parse(k, v)?,
                "model.layer_pattern" => {
                    cfg.layer_pattern = match v.as_str() {
                        "five_local_one_global" => LayerPattern::FiveLocalOneGlobal,
                        "all_global" => LayerPattern::AllGlobal,
                        "all_local" => LayerPattern::AllLocal,
                        other => {
                            return Err(Error::config(format!(
                                "unknown layer pattern '{other}'"
                            )))
                        }
                    }
                }
                "model.local_window" => cfg.local_window = parse(k, v)?,
                "model.d_ffn" => cfg.d_ffn = parse(k, v)?,
                "model.rope_base_local" => cfg.rope_base_local = parse(k, v)?,
                "model.rope_base_global" => cfg.rope_base_global = parse(k, v)?,
                "model.pi_scale" => cfg.pi_scale = parse(k, v)?,
                "model.tied_embeddings" => cfg.tied_embeddings = parse_bool(k, v)?,
                "model.merged_attention" => cfg.merged_attention = parse_bool(k, v)?,
                "model.cross_attention_layers" => {
                    cfg.cross_attention_layers = match v.as_str() {
                        "all" => CrossAttentionLayers::All,
                        "global_only" => CrossAttentionLayers::GlobalOnly,
                        other => {
                            return Err(Error::config(format!(
                                "unknown cross-attention mode '{other}'"
                            )))
                        }
                    }
                }
                "model.encoder_full_visibility" => {
                    cfg.encoder_full_visibility = parse_bool(k, v)?
                }
                "model.position_scheme" => {
                    cfg.position_scheme = match v.as_str() {
                        "continued" => PositionScheme::Continued,
                        "restart" => PositionScheme::Restart,
                        other => {
                            return Err(Error::config(format!(
                                "unknown position scheme '{other}'"
                            )))
                        }
                    }
                }
                "model.norm_eps" => cfg.norm_eps = parse(k, v)?,
                "model.max_seq" => cfg.max_seq = parse(k, v)?,
                "model.num_sentinels" => cfg.num_sentinels = parse(k, v)?,
                "model.vision" => {
                    vision_on = match v.as_str() {
                        "on" => true,
                        "off" => false,
                        other => {
                            return Err(Error::config(format!(
                                "model.vision must be on/off, got '{other}'"
                            )))
                        }
                    }
                }
                "model.d_vision" => d_vision = Some(parse(k, v)?),
                "model.tokens_per_image" => tokens_per_image = Some(parse(k, v)?),
                other => return Err(Error::config(format!("unknown config key '{other}'"))),
            }
        }
        cfg.vision = if vision_on {
            Some(VisionConfig {
                d_vision: d_vision
                    .ok_or_else(|| Error::config("model.vision=on requires model.d_vision"))?,
                tokens_per_image: tokens_per_image.unwrap_or(TOKENS_PER_IMAGE),
            })
        } else {
            None
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation; stable across runs.
    format!("{v}")
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("cannot parse '{v}' for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!(
            "cannot parse '{other}' as bool for key {key}"
        ))),
    }
}

/// Parse flat `key=value` text: one pair per line, `#` comments and blank
/// lines skipped, duplicate keys rejected.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        let k = k.trim().to_string();
        let v = v.trim().to_string();
        if !seen.insert(k.clone()) {
            return Err(Error::config(format!("duplicate key '{k}'")));
        }
        pairs.push((k, v));
    }
    Ok(pairs)
}

/// Render pairs as canonical text: sorted by key, `k=v` lines.
pub fn render_kv_text(pairs: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (k, v) in sorted {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}
