//! Deterministic synthetic tasks and corpora for tests, benchmarks and CLI
//! demos.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::ul2::{ExamplePair, PairTag, PipeItem};

/// Copy task: the decoder must reproduce the encoder's token sequence.
pub fn copy_task_pairs(
    cfg: &ModelConfig,
    count: usize,
    seq_len: usize,
    seed: u64,
) -> Vec<ExamplePair> {
    let limit = cfg.specials().text_limit();
    (0..count)
        .map(|i| {
            let mut rng = Rng::from_stream(seed, i as u64);
            let tokens: Vec<u32> = (0..seq_len).map(|_| rng.below(u64::from(limit)) as u32).collect();
            ExamplePair {
                input: tokens.iter().map(|&t| PipeItem::Token(t)).collect(),
                target: tokens,
                tag: PairTag::Denoiser(0),
            }
        })
        .collect()
}

/// Key/value layout of the retrieval probe, carved out of the text id
/// range of a config.
#[derive(Debug, Clone, Copy)]
pub struct NeedleTask {
    pub n_keys: u32,
    pub n_values: u32,
    pub key_base: u32,
    pub value_base: u32,
}

impl NeedleTask {
    pub fn for_config(cfg: &ModelConfig) -> NeedleTask {
        let limit = cfg.specials().text_limit();
        let n = (limit / 2).min(16);
        NeedleTask {
            n_keys: n,
            n_values: n,
            key_base: 0,
            value_base: n,
        }
    }
}

/// Retrieval examples: encoder input `k₁ v₁ k₂ v₂ … k_q`, target `v_q`.
/// Keys within one haystack are distinct so the answer is well defined.
pub fn needle_pairs(
    task: &NeedleTask,
    haystack_pairs: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ExamplePair>> {
    if haystack_pairs == 0 {
        return Err(Error::config("haystack must hold at least one pair"));
    }
    if haystack_pairs as u32 > task.n_keys {
        return Err(Error::config(format!(
            "haystack of {haystack_pairs} pairs needs more than the {} distinct keys available",
            task.n_keys
        )));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = Rng::from_stream(seed, i as u64);
            let keys = rng.distinct_sorted(haystack_pairs, u64::from(task.n_keys));
            let mut items = Vec::with_capacity(haystack_pairs * 2 + 1);
            let mut values = Vec::with_capacity(haystack_pairs);
            for k in &keys {
                let v = task.value_base + rng.below(u64::from(task.n_values)) as u32;
                items.push(PipeItem::Token(task.key_base + (*k as u32 - 1)));
                items.push(PipeItem::Token(v));
                values.push(v);
            }
            let q = rng.below_usize(haystack_pairs);
            items.push(PipeItem::Token(task.key_base + (keys[q] as u32 - 1)));
            ExamplePair {
                input: items,
                target: vec![values[q]],
                tag: PairTag::Denoiser(0),
            }
        })
        .collect())
}

/// Synthetic text corpus: one document per line, whitespace-separated
/// integer token ids below the reserved block.
pub fn synth_text_corpus(
    cfg: &ModelConfig,
    docs: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> String {
    let limit = cfg.specials().text_limit();
    let mut out = String::new();
    for i in 0..docs {
        let mut rng = Rng::from_stream(seed, i as u64);
        let len = min_len + rng.below_usize(max_len - min_len + 1);
        let doc: Vec<String> = (0..len)
            .map(|_| rng.below(u64::from(limit)).to_string())
            .collect();
        out.push_str(&doc.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            num_sentinels: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn copy_pairs_reproduce_input() {
        let pairs = copy_task_pairs(&cfg(), 5, 7, 1);
        for p in &pairs {
            let input: Vec<u32> = p
                .input
                .iter()
                .map(|i| match i {
                    PipeItem::Token(t) => *t,
                    _ => unreachable!(),
                })
                .collect();
            assert_eq!(input, p.target);
        }
        // deterministic
        let again = copy_task_pairs(&cfg(), 5, 7, 1);
        assert_eq!(pairs, again);
    }

    #[test]
    fn needle_answers_match_haystack() {
        let task = NeedleTask::for_config(&cfg());
        let pairs = needle_pairs(&task, 4, 50, 2).unwrap();
        for p in &pairs {
            let toks: Vec<u32> = p
                .input
                .iter()
                .map(|i| match i {
                    PipeItem::Token(t) => *t,
                    _ => unreachable!(),
                })
                .collect();
            let query = *toks.last().unwrap();
            let mut answer = None;
            for pair in toks[..toks.len() - 1].chunks(2) {
                if pair[0] == query {
                    answer = Some(pair[1]);
                }
            }
            assert_eq!(answer.unwrap(), p.target[0]);
        }
    }

    #[test]
    fn needle_rejects_oversized_haystack() {
        let task = NeedleTask::for_config(&cfg());
        assert!(needle_pairs(&task, 1000, 1, 0).is_err());
    }

    #[test]
    fn corpus_lines_parse_as_ids() {
        let text = synth_text_corpus(&cfg(), 10, 3, 9, 3);
        let limit = cfg().specials().text_limit();
        for line in text.lines() {
            let n = line.split_whitespace().count();
            assert!((3..=9).contains(&n));
            for tok in line.split_whitespace() {
                let id: u32 = tok.parse().unwrap();
                assert!(id < limit);
            }
        }
    }
}
