//! Mixture-of-denoisers preprocessing.
//!
//! Raw token streams become (input, target) training pairs through five
//! denoisers: four multi-span corruption tasks and one suffix task that
//! hides the last three quarters of the sequence, mixed 1:1:1:1:4.
//! Image-bearing documents instead split at the final image into a prefix
//! and a text target.
//!
//! Corrupted spans are replaced in the input by sentinel ids (ascending,
//! from the reserved block at the top of the vocabulary); the target lists
//! each sentinel followed by the hidden span, closed by one final sentinel.
//! Spans never touch (at least one kept token between them) so the
//! sentinel structure is unambiguous and exactly invertible.

use crate::config::SpecialTokens;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One item of a pipeline sequence: a token id or an index into a
/// companion vision fixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipeItem {
    Token(u32),
    ImageRef(u32),
}

/// Which denoiser produced a pair. `Denoiser(k)` is an index into the
/// configured bank; the vision prefix split has its own tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PairTag {
    Denoiser(u8),
    VisionPrefix,
}

impl PairTag {
    pub fn to_byte(self) -> u8 {
        match self {
            PairTag::Denoiser(k) => k,
            PairTag::VisionPrefix => 255,
        }
    }

    pub fn from_byte(b: u8) -> PairTag {
        if b == 255 {
            PairTag::VisionPrefix
        } else {
            PairTag::Denoiser(b)
        }
    }
}

/// A preprocessed training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePair {
    pub input: Vec<PipeItem>,
    pub target: Vec<u32>,
    pub tag: PairTag,
}

/// Hard cap on either side of a pair; documents are chunked beneath it
/// before corruption, never truncated mid-span.
pub const MAX_PAIR_LEN: usize = 16_384;

/// Mean span length: a token count, or three quarters of the sequence
/// length (resolved per document).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanSpan {
    Tokens(f64),
    ThreeQuartersL,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanPolicy {
    MultiSpan,
    SingleSuffix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserSpec {
    pub mean_span: MeanSpan,
    pub corruption_rate: f64,
    pub policy: SpanPolicy,
    pub weight: f64,
}

/// The standard five-denoiser bank with mixture weights 1:1:1:1:4.
pub fn standard_bank() -> Vec<DenoiserSpec> {
    let multi = |mu: f64, r: f64| DenoiserSpec {
        mean_span: MeanSpan::Tokens(mu),
        corruption_rate: r,
        policy: SpanPolicy::MultiSpan,
        weight: 1.0,
    };
    vec![
        multi(3.0, 0.15),
        multi(12.0, 0.5),
        multi(32.0, 0.15),
        multi(32.0, 0.5),
        DenoiserSpec {
            mean_span: MeanSpan::ThreeQuartersL,
            corruption_rate: 0.75,
            policy: SpanPolicy::SingleSuffix,
            weight: 4.0,
        },
    ]
}

/// Round half to even, fixed for cross-language determinism everywhere a
/// count is derived from a rate.
pub fn round_half_even(x: f64) -> u64 {
    debug_assert!(x >= 0.0);
    let floor = x.floor();
    let frac = x - floor;
    let f = floor as u64;
    if frac > 0.5 || (frac == 0.5 && !f.is_multiple_of(2)) {
        f + 1
    } else {
        f
    }
}

/// Categorical draw proportional to the bank weights.
pub fn sample_denoiser<'a>(bank: &'a [DenoiserSpec], rng: &mut Rng) -> Result<(usize, &'a DenoiserSpec)> {
    if bank.is_empty() {
        return Err(Error::config("denoiser bank is empty"));
    }
    if bank.iter().any(|s| s.weight.is_nan() || s.weight <= 0.0) {
        return Err(Error::config("denoiser weights must be positive"));
    }
    let total: f64 = bank.iter().map(|s| s.weight).sum();
    let mut u = rng.next_f64() * total;
    for (i, spec) in bank.iter().enumerate() {
        if u < spec.weight {
            return Ok((i, spec));
        }
        u -= spec.weight;
    }
    Ok((bank.len() - 1, bank.last().unwrap()))
}

/// Number of spans for a noise budget: the real-valued span count
/// `noise/μ` is rounded randomly between its two neighbouring integers,
/// weighted so the expected mean span length comes out at μ (plain
/// rounding biases the mean when the count is small).
fn sample_span_count(noise: u64, mu: f64, rng: &mut Rng) -> u64 {
    if noise as f64 <= mu {
        return 1;
    }
    let x = noise as f64 / mu;
    let lo = x.floor() as u64;
    let hi = x.ceil() as u64;
    if lo == hi {
        return lo.max(1);
    }
    let mean_lo = noise as f64 / lo as f64;
    let mean_hi = noise as f64 / hi as f64;
    let p_hi = ((mean_lo - mu) / (mean_lo - mean_hi)).clamp(0.0, 1.0);
    let n = if rng.next_f64() < p_hi { hi } else { lo };
    n.clamp(1, noise)
}

/// Composition of `total` into `parts` positive parts, uniform over
/// compositions.
fn sample_composition(total: u64, parts: u64, rng: &mut Rng) -> Vec<u64> {
    debug_assert!(parts >= 1 && parts <= total);
    if parts == 1 {
        return vec![total];
    }
    let cuts = rng.distinct_sorted((parts - 1) as usize, total - 1);
    let mut out = Vec::with_capacity(parts as usize);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

/// Weak composition of `total` into `bins` nonnegative parts, uniform.
/// Stars and bars: `bins−1` distinct separators in 1..=total+bins−1.
fn sample_weak_composition(total: u64, bins: u64, rng: &mut Rng) -> Vec<u64> {
    debug_assert!(bins >= 1);
    if bins == 1 {
        return vec![total];
    }
    if total == 0 {
        return vec![0; bins as usize];
    }
    let cuts = rng.distinct_sorted((bins - 1) as usize, total + bins - 1);
    let mut out = Vec::with_capacity(bins as usize);
    let mut prev = 0u64;
    for c in &cuts {
        out.push(c - prev - 1);
        prev = *c;
    }
    out.push(total + bins - 1 - prev);
    out
}

fn suffix_pair(tokens: &[u32], rate: f64, tag: PairTag, specials: &SpecialTokens) -> Result<ExamplePair> {
    let l = tokens.len() as u64;
    let suffix_len = round_half_even(rate * l as f64).clamp(1, l) as usize;
    let split = tokens.len() - suffix_len;
    let s0 = specials.sentinel(0)?;
    let s1 = specials.sentinel(1)?;
    let mut input: Vec<PipeItem> = tokens[..split].iter().map(|&t| PipeItem::Token(t)).collect();
    input.push(PipeItem::Token(s0));
    let mut target = Vec::with_capacity(suffix_len + 2);
    target.push(s0);
    target.extend_from_slice(&tokens[split..]);
    target.push(s1);
    if target.len() > MAX_PAIR_LEN {
        return Err(Error::data(format!(
            "suffix target of {} tokens exceeds the {MAX_PAIR_LEN} cap",
            target.len()
        )));
    }
    Ok(ExamplePair { input, target, tag })
}

/// Corrupt a token stream per one denoiser. Multi-span placement is
/// uniform over non-overlapping, non-adjacent layouts; if the noise budget
/// leaves no feasible multi-span layout the call falls back to the suffix
/// policy rather than failing.
pub fn corrupt_spans(
    tokens: &[u32],
    spec: &DenoiserSpec,
    tag: PairTag,
    specials: &SpecialTokens,
    rng: &mut Rng,
) -> Result<ExamplePair> {
    let l = tokens.len();
    if l < 2 {
        return Err(Error::data(format!(
            "corrupt_spans needs at least 2 tokens, got {l}"
        )));
    }
    if l > MAX_PAIR_LEN {
        return Err(Error::data(format!(
            "document of {l} tokens exceeds the {MAX_PAIR_LEN} cap; chunk before corrupting"
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= specials.text_limit()) {
        return Err(Error::data(format!(
            "token id {bad} collides with the reserved id block (text ids must be < {})",
            specials.text_limit()
        )));
    }
    let noise = round_half_even(spec.corruption_rate * l as f64);
    if spec.policy == SpanPolicy::SingleSuffix {
        return suffix_pair(tokens, spec.corruption_rate, tag, specials);
    }
    if noise < 1 {
        // Tiny document for this rate; the suffix policy is always feasible.
        return suffix_pair(tokens, spec.corruption_rate, tag, specials);
    }
    let noise = noise.min(l as u64);
    let mu = match spec.mean_span {
        MeanSpan::Tokens(m) => m,
        MeanSpan::ThreeQuartersL => 0.75 * l as f64,
    };
    let mut n = sample_span_count(noise, mu, rng);
    // Non-adjacency needs n−1 kept tokens between spans.
    let kept = l as u64 - noise;
    if n > kept + 1 {
        n = kept + 1;
    }
    if n < 1 || n + 1 > u64::from(specials.num_sentinels) {
        return Err(Error::data(format!(
            "corruption needs {} sentinels but only {} are reserved",
            n + 1,
            specials.num_sentinels
        )));
    }
    let lengths = sample_composition(noise, n, rng);
    let extra = kept - (n - 1);
    let bins = sample_weak_composition(extra, n + 1, rng);
    // Gap k before span k; interior gaps get the mandatory kept token.
    let mut input = Vec::with_capacity(l - noise as usize + n as usize);
    let mut target = Vec::with_capacity(noise as usize + n as usize + 1);
    let mut cursor = 0usize;
    for k in 0..n as usize {
        let gap = bins[k] + if k == 0 { 0 } else { 1 };
        for _ in 0..gap {
            input.push(PipeItem::Token(tokens[cursor]));
            cursor += 1;
        }
        let sentinel = specials.sentinel(k as u32)?;
        input.push(PipeItem::Token(sentinel));
        target.push(sentinel);
        for _ in 0..lengths[k] {
            target.push(tokens[cursor]);
            cursor += 1;
        }
    }
    for &t in &tokens[cursor..] {
        input.push(PipeItem::Token(t));
    }
    target.push(specials.sentinel(n as u32)?);
    if target.len() > MAX_PAIR_LEN {
        return Err(Error::data(format!(
            "target of {} tokens exceeds the {MAX_PAIR_LEN} cap (noise {noise} in {n} spans)",
            target.len()
        )));
    }
    Ok(ExamplePair { input, target, tag })
}

/// Splice the target spans back into the input, reconstructing the
/// original token stream exactly. Rejects malformed sentinel structure.
pub fn uncorrupt(pair: &ExamplePair, specials: &SpecialTokens) -> Result<Vec<u32>> {
    let mut input_tokens = Vec::with_capacity(pair.input.len());
    for item in &pair.input {
        match item {
            PipeItem::Token(t) => input_tokens.push(*t),
            PipeItem::ImageRef(_) => {
                return Err(Error::data("uncorrupt on an image-bearing pair"))
            }
        }
    }
    // Input sentinels must be 0, 1, 2, … in order.
    let mut n_spans = 0u32;
    for &t in &input_tokens {
        if let Some(k) = specials.sentinel_index(t) {
            if k != n_spans {
                return Err(Error::data(format!(
                    "input sentinel {k} out of order (expected {n_spans})"
                )));
            }
            n_spans += 1;
        }
    }
    if n_spans == 0 {
        return Err(Error::data("input holds no sentinel"));
    }
    // Parse the target into spans keyed by sentinel.
    let mut spans: Vec<Vec<u32>> = Vec::with_capacity(n_spans as usize);
    let mut iter = pair.target.iter().peekable();
    for k in 0..n_spans {
        match iter.next() {
            Some(&t) if specials.sentinel_index(t) == Some(k) => {}
            other => {
                return Err(Error::data(format!(
                    "target missing sentinel {k} (found {other:?})"
                )))
            }
        }
        let mut span = Vec::new();
        while let Some(&&t) = iter.peek() {
            if specials.sentinel_index(t).is_some() {
                break;
            }
            span.push(t);
            iter.next();
        }
        if span.is_empty() {
            return Err(Error::data(format!("span {k} is empty in the target")));
        }
        spans.push(span);
    }
    match iter.next() {
        Some(&t) if specials.sentinel_index(t) == Some(n_spans) => {}
        other => {
            return Err(Error::data(format!(
                "target missing final sentinel {n_spans} (found {other:?})"
            )))
        }
    }
    if iter.next().is_some() {
        return Err(Error::data("trailing tokens after the final sentinel"));
    }
    // Splice.
    let mut out = Vec::new();
    let mut span_iter = spans.into_iter();
    for &t in &input_tokens {
        if specials.sentinel_index(t).is_some() {
            out.extend(span_iter.next().expect("span count checked above"));
        } else {
            out.push(t);
        }
    }
    Ok(out)
}

/// Prefix-LM split for image-bearing documents: everything up to and
/// including the final image is the input, the trailing text tokens are
/// the target. Returns `Ok(None)` (a skip signal) when no text follows the
/// final image; documents without any image are the caller's to route to
/// the span denoisers.
pub fn vision_prefix_split(doc: &[PipeItem]) -> Result<Option<ExamplePair>> {
    let last_img = doc
        .iter()
        .rposition(|i| matches!(i, PipeItem::ImageRef(_)))
        .ok_or_else(|| Error::data("vision_prefix_split on a document without images"))?;
    let mut target = Vec::new();
    for item in &doc[last_img + 1..] {
        match item {
            PipeItem::Token(t) => target.push(*t),
            PipeItem::ImageRef(_) => unreachable!("no image after the last image"),
        }
    }
    if target.is_empty() {
        return Ok(None);
    }
    Ok(Some(ExamplePair {
        input: doc[..=last_img].to_vec(),
        target,
        tag: PairTag::VisionPrefix,
    }))
}

/// Split an oversize token stream into consecutive chunks of at most
/// `max_len`, dropping a trailing fragment too short to corrupt rather
/// than truncating mid-span.
pub fn chunk_tokens(tokens: &[u32], max_len: usize) -> Vec<&[u32]> {
    assert!(max_len >= 2, "chunks must hold at least 2 tokens");
    tokens
        .chunks(max_len)
        .filter(|c| c.len() >= 2)
        .collect()
}

/// Span statistics measured from a produced pair (not from generator
/// internals): (original length, corrupted token count, span count).
pub fn pair_span_stats(pair: &ExamplePair, specials: &SpecialTokens) -> Result<(usize, usize, usize)> {
    let mut kept = 0usize;
    let mut spans = 0usize;
    for item in &pair.input {
        match item {
            PipeItem::Token(t) if specials.sentinel_index(*t).is_some() => spans += 1,
            PipeItem::Token(_) => kept += 1,
            PipeItem::ImageRef(_) => {
                return Err(Error::data("span stats on an image-bearing pair"))
            }
        }
    }
    let corrupted = pair
        .target
        .iter()
        .filter(|t| specials.sentinel_index(**t).is_none())
        .count();
    Ok((kept + corrupted, corrupted, spans))
}
