//! Toy-scale optimization: cross-entropy over preprocessed pairs, cosine
//! learning-rate schedule with linear warmup, global gradient-norm
//! clipping, adaptive moments with decoupled weight decay, periodic
//! checkpoints, and small evaluation probes.
//!
//! Per-example gradients are computed on independent tapes (data-parallel
//! under the `parallel` feature) and reduced in index order, so runs are
//! bitwise reproducible for a fixed seed regardless of thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::ckpt::{model_to_checkpoint, Dtype};
use crate::error::{Error, Result};
use crate::gradcheck::GradMap;
use crate::model::{MixedSequence, Model, SeqItem};
use crate::parallel;
use crate::tape::Tape;
use crate::ul2::{ExamplePair, PairTag, PipeItem};
use crate::vision::VisionFixture;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub keep_last: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Evaluate teacher-forced accuracy every this many steps (0 = never).
    pub eval_every: u64,
    /// Stop early once the evaluated accuracy reaches this level.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            peak_lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
            clip_norm: 1.0,
            weight_decay: 0.1,
            batch_size: 8,
            seed: 0,
            checkpoint_interval: 0,
            keep_last: 5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            eval_every: 0,
            target_accuracy: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return Err(Error::config(format!(
                "need 0 ≤ min_lr ≤ peak_lr and peak_lr > 0, got {} / {}",
                self.min_lr, self.peak_lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        use crate::config::fmt_f64 as f;
        let kv = vec![
            ("train.peak_lr", f(self.peak_lr)),
            ("train.min_lr", f(self.min_lr)),
            ("train.warmup_steps", self.warmup_steps.to_string()),
            ("train.total_steps", self.total_steps.to_string()),
            ("train.clip_norm", f(self.clip_norm)),
            ("train.weight_decay", f(self.weight_decay)),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.checkpoint_interval", self.checkpoint_interval.to_string()),
            ("train.keep_last", self.keep_last.to_string()),
            ("train.beta1", f(self.beta1)),
            ("train.beta2", f(self.beta2)),
            ("train.adam_eps", f(self.adam_eps)),
            ("train.eval_every", self.eval_every.to_string()),
            (
                "train.target_accuracy",
                self.target_accuracy.map_or("none".to_string(), f),
            ),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<TrainOptions> {
        let mut o = TrainOptions::default();
        for (k, v) in pairs {
            if !k.starts_with("train.") {
                continue;
            }
            let bad = || Error::config(format!("cannot parse '{v}' for key {k}"));
            match k.as_str() {
                "train.peak_lr" => o.peak_lr = v.parse().map_err(|_| bad())?,
                "train.min_lr" => o.min_lr = v.parse().map_err(|_| bad())?,
                "train.warmup_steps" => o.warmup_steps = v.parse().map_err(|_| bad())?,
                "train.total_steps" => o.total_steps = v.parse().map_err(|_| bad())?,
                "train.clip_norm" => o.clip_norm = v.parse().map_err(|_| bad())?,
                "train.weight_decay" => o.weight_decay = v.parse().map_err(|_| bad())?,
                "train.batch_size" => o.batch_size = v.parse().map_err(|_| bad())?,
                "train.checkpoint_interval" => {
                    o.checkpoint_interval = v.parse().map_err(|_| bad())?
                }
                "train.keep_last" => o.keep_last = v.parse().map_err(|_| bad())?,
                "train.beta1" => o.beta1 = v.parse().map_err(|_| bad())?,
                "train.beta2" => o.beta2 = v.parse().map_err(|_| bad())?,
                "train.adam_eps" => o.adam_eps = v.parse().map_err(|_| bad())?,
                "train.eval_every" => o.eval_every = v.parse().map_err(|_| bad())?,
                "train.target_accuracy" => {
                    o.target_accuracy = if v == "none" {
                        None
                    } else {
                        Some(v.parse().map_err(|_| bad())?)
                    }
                }
                other => return Err(Error::config(format!("unknown config key '{other}'"))),
            }
        }
        Ok(o)
    }
}

/// Linear warmup to the peak, then cosine decay to the floor.
pub fn lr_at(step: u64, opts: &TrainOptions) -> f64 {
    let w = opts.warmup_steps;
    if step <= w {
        if w == 0 {
            return opts.peak_lr;
        }
        return opts.peak_lr * step as f64 / w as f64;
    }
    let progress = (step - w) as f64 / (opts.total_steps - w) as f64;
    opts.min_lr
        + 0.5 * (opts.peak_lr - opts.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Joint L2 norm over every gradient tensor; if it exceeds `max_norm`,
/// every tensor is scaled by `max_norm / norm`. Returns the pre-clip norm
/// and whether clipping fired.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> Result<(f64, bool)> {
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
        Ok((norm, true))
    } else {
        Ok((norm, false))
    }
}

/// Resolve pipeline items into a model input sequence, dereferencing image
/// indices through the vision fixture.
pub fn resolve_sequence(
    items: &[PipeItem],
    vision: Option<&VisionFixture>,
) -> Result<MixedSequence> {
    let mut seq = MixedSequence::default();
    for item in items {
        match item {
            PipeItem::Token(t) => seq.push(SeqItem::Token(*t)),
            PipeItem::ImageRef(i) => {
                let fx = vision.ok_or_else(|| {
                    Error::data("example references an image but no vision fixture is loaded")
                })?;
                seq.push(SeqItem::Image(fx.image(*i)?.clone()));
            }
        }
    }
    Ok(seq)
}

/// Sum cross-entropy, token count, and gradients of the sum for one
/// example, computed on its own tape.
pub fn example_loss_and_grads(
    model: &Model,
    pair: &ExamplePair,
    vision: Option<&VisionFixture>,
) -> Result<(f64, usize, GradMap)> {
    let specials = model.cfg.specials();
    let seq = resolve_sequence(&pair.input, vision)?;
    let mut tape = Tape::new();
    let vars = model.register_params(&mut tape);
    let h = model.encode_on_tape(&mut tape, &vars, &seq)?;
    let enc_len = seq.expanded_len();
    let mut dec_input = vec![specials.bos];
    dec_input.extend_from_slice(&pair.target[..pair.target.len() - 1]);
    let logits = model.decode_on_tape(&mut tape, &vars, Some(h), enc_len, &dec_input)?;
    let (loss, n) = tape.cross_entropy_sum(logits, &pair.target, Some(specials.pad))?;
    let loss_value = tape.value(loss).item()?;
    if n == 0 {
        return Ok((0.0, 0, GradMap::new()));
    }
    let grads = tape.backward(loss, 1.0)?;
    let frozen = Model::frozen_names(&model.cfg);
    let mut out = GradMap::new();
    for name in vars.names() {
        if frozen.contains(name) {
            continue;
        }
        let var = vars.get(name);
        out.insert(
            name.clone(),
            grads.get_or_zeros(var, model.param(name).numel()),
        );
    }
    Ok((loss_value, n, out))
}

fn reduce_batch(
    model: &Model,
    results: Vec<(f64, usize, GradMap)>,
) -> Result<(f64, usize, GradMap)> {
    let total_tokens: usize = results.iter().map(|(_, n, _)| n).sum();
    if total_tokens == 0 {
        return Err(Error::data("batch holds no loss-bearing tokens"));
    }
    // Canonical-order sum of per-example loss sums: the batch loss is then
    // exactly invariant under example reordering.
    let mut sums: Vec<f64> = results.iter().map(|(s, _, _)| *s).collect();
    sums.sort_by(|a, b| a.total_cmp(b));
    let loss = sums.iter().sum::<f64>() / total_tokens as f64;
    let mut acc = GradMap::new();
    for (_, _, grads) in results {
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    let scale = 1.0 / total_tokens as f64;
    for name in model.params().keys() {
        if Model::frozen_names(&model.cfg).contains(name) {
            continue;
        }
        let numel = model.param(name).numel();
        let entry = acc.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
        for v in entry.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss, total_tokens, acc))
}

/// Mean loss and mean-loss gradients over a batch; per-example work fans
/// out data-parallel, the reduction runs in fixed index order.
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[&ExamplePair],
    vision: Option<&VisionFixture>,
) -> Result<(f64, usize, GradMap)> {
    let results = parallel::try_map_indexed(batch, |_, pair| {
        example_loss_and_grads(model, pair, vision)
    })?;
    reduce_batch(model, results)
}

/// Sequential reference path (always compiled; the bench suite compares it
/// against the parallel path, and a test pins their bitwise equality).
pub fn batch_loss_and_grads_sequential(
    model: &Model,
    batch: &[&ExamplePair],
    vision: Option<&VisionFixture>,
) -> Result<(f64, usize, GradMap)> {
    let results = parallel::try_map_indexed_seq(batch, |_, pair| {
        example_loss_and_grads(model, pair, vision)
    })?;
    reduce_batch(model, results)
}

/// Adaptive-moment optimizer state with decoupled weight decay. Decay acts
/// only on the matmul projection weights, never on norm gains, embeddings
/// or the frozen vision projection.
#[derive(Debug, Default)]
pub struct Optimizer {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

pub fn decays(name: &str) -> bool {
    [
        ".attn.w_q",
        ".attn.w_k",
        ".attn.w_v",
        ".attn.w_o",
        ".ffn.w_gate",
        ".ffn.w_up",
        ".ffn.w_down",
    ]
    .iter()
    .any(|s| name.ends_with(s))
}

impl Optimizer {
    pub fn new() -> Optimizer {
        Optimizer::default()
    }

    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &GradMap,
        lr: f64,
        opts: &TrainOptions,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - opts.beta1.powi(self.t as i32);
        let bc2 = 1.0 - opts.beta2.powi(self.t as i32);
        let frozen = Model::frozen_names(&model.cfg);
        let names: Vec<String> = model.params().keys().cloned().collect();
        for name in names {
            if frozen.contains(&name) {
                continue;
            }
            let g = match grads.get(&name) {
                Some(g) => g,
                None => continue,
            };
            let tensor = model.param(&name).clone();
            let numel = tensor.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let mut data = tensor.data().to_vec();
            let wd = if decays(&name) { opts.weight_decay } else { 0.0 };
            for i in 0..numel {
                m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * g[i];
                v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + opts.adam_eps) + wd * data[i]);
            }
            model.set_param(&name, crate::tensor::Tensor::from_vec(tensor.shape().to_vec(), data)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl StepMetrics {
    /// One tab-separated line: `step, lr, loss, grad_norm, clipped(0|1)`.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step,
            self.lr,
            self.loss,
            self.grad_norm,
            u8::from(self.clipped)
        )
    }
}

pub struct TrainData<'a> {
    pub pairs: &'a [ExamplePair],
    pub vision: Option<&'a VisionFixture>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub metrics: Vec<StepMetrics>,
    pub final_accuracy: Option<f64>,
    pub saved_checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn metrics_log(&self) -> String {
        let mut s = String::new();
        for m in &self.metrics {
            s.push_str(&m.tsv_line());
            s.push('\n');
        }
        s
    }
}

/// Run the training loop. Batches cycle deterministically through the
/// pairs; a non-finite loss aborts with the step number and last learning
/// rate. Checkpoints (when enabled) go to `ckpt_dir`, keeping the last
/// `keep_last`.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    opts: &TrainOptions,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    opts.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    let mut optimizer = Optimizer::new();
    let mut metrics = Vec::new();
    let mut saved: Vec<PathBuf> = Vec::new();
    let mut final_accuracy = None;
    let eval_pairs: Vec<&ExamplePair> = data.pairs.iter().take(64).collect();
    let mut steps_run = 0;
    for step in 1..=opts.total_steps {
        let batch: Vec<&ExamplePair> = (0..opts.batch_size)
            .map(|i| {
                let idx = ((step - 1) as usize * opts.batch_size + i) % data.pairs.len();
                &data.pairs[idx]
            })
            .collect();
        let lr = lr_at(step, opts);
        let (loss, _tokens, mut grads) = batch_loss_and_grads(model, &batch, data.vision)
            .map_err(|e| match e {
                Error::Numeric(m) => {
                    Error::numeric(format!("{m} (aborting at step {step}, lr {lr})"))
                }
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "loss became non-finite at step {step} (lr {lr})"
            )));
        }
        let (grad_norm, clipped) = clip_global_norm(&mut grads, opts.clip_norm)?;
        optimizer.step(model, &grads, lr, opts)?;
        metrics.push(StepMetrics {
            step,
            lr,
            loss,
            grad_norm,
            clipped,
        });
        steps_run = step;
        if opts.checkpoint_interval > 0 && step % opts.checkpoint_interval == 0 {
            if let Some(dir) = ckpt_dir {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Error::data(format!("cannot create {}: {e}", dir.display())))?;
                let path = dir.join(format!("ckpt_step{step}.edck"));
                model_to_checkpoint(model, step, Dtype::F64)?.save(&path)?;
                saved.push(path);
                while saved.len() > opts.keep_last {
                    let old = saved.remove(0);
                    let _ = std::fs::remove_file(old);
                }
            }
        }
        if opts.eval_every > 0 && step % opts.eval_every == 0 {
            let acc = teacher_forced_accuracy(model, &eval_pairs, data.vision)?;
            final_accuracy = Some(acc);
            if let Some(target) = opts.target_accuracy {
                if acc >= target {
                    break;
                }
            }
        }
    }
    if opts.eval_every > 0 && final_accuracy.is_none() {
        final_accuracy = Some(teacher_forced_accuracy(model, &eval_pairs, data.vision)?);
    }
    Ok(TrainOutcome {
        steps_run,
        metrics,
        final_accuracy,
        saved_checkpoints: saved,
    })
}

/// Fraction of non-pad target tokens whose argmax logit matches, teacher
/// forced.
pub fn teacher_forced_accuracy(
    model: &Model,
    pairs: &[&ExamplePair],
    vision: Option<&VisionFixture>,
) -> Result<f64> {
    let counts = parallel::try_map_indexed(pairs, |_, pair| -> Result<(usize, usize)> {
        let (correct, total, _) = example_eval(model, pair, vision)?;
        Ok((correct, total))
    })?;
    let (correct, total) = counts
        .into_iter()
        .fold((0usize, 0usize), |(c, t), (dc, dt)| (c + dc, t + dt));
    if total == 0 {
        return Err(Error::data("no loss-bearing tokens to evaluate"));
    }
    Ok(correct as f64 / total as f64)
}

fn example_eval(
    model: &Model,
    pair: &ExamplePair,
    vision: Option<&VisionFixture>,
) -> Result<(usize, usize, f64)> {
    let specials = model.cfg.specials();
    let seq = resolve_sequence(&pair.input, vision)?;
    let h = model.encode(&seq)?;
    let mut dec_input = vec![specials.bos];
    dec_input.extend_from_slice(&pair.target[..pair.target.len() - 1]);
    let logits = model.decode(Some(&h), &dec_input)?;
    let (rows, vocab) = logits.dims2()?;
    let mut correct = 0;
    let mut total = 0;
    let mut ce = 0.0;
    for (row, &target) in pair.target.iter().enumerate().take(rows) {
        if target == specials.pad {
            continue;
        }
        let l = &logits.data()[row * vocab..(row + 1) * vocab];
        let argmax = l
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i as u32)
            .unwrap();
        if argmax == target {
            correct += 1;
        }
        let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = l.iter().map(|v| (v - mx).exp()).sum();
        ce += denom.ln() + mx - l[target as usize];
        total += 1;
    }
    Ok((correct, total, ce))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub tokens: usize,
    pub accuracy: f64,
    pub perplexity: f64,
}

/// Teacher-forced token accuracy and perplexity per denoiser tag.
pub fn eval_denoising(
    model: &Model,
    pairs: &[ExamplePair],
    vision: Option<&VisionFixture>,
) -> Result<BTreeMap<PairTag, EvalStats>> {
    let rows = parallel::try_map_indexed(pairs, |_, pair| -> Result<(PairTag, usize, usize, f64)> {
        let (correct, total, ce) = example_eval(model, pair, vision)?;
        Ok((pair.tag, correct, total, ce))
    })?;
    let mut agg: BTreeMap<PairTag, (usize, usize, f64)> = BTreeMap::new();
    for (tag, correct, total, ce) in rows {
        let e = agg.entry(tag).or_insert((0, 0, 0.0));
        e.0 += correct;
        e.1 += total;
        e.2 += ce;
    }
    Ok(agg
        .into_iter()
        .map(|(tag, (correct, total, ce))| {
            let stats = EvalStats {
                tokens: total,
                accuracy: if total > 0 {
                    correct as f64 / total as f64
                } else {
                    0.0
                },
                perplexity: if total > 0 { (ce / total as f64).exp() } else { f64::NAN },
            };
            (tag, stats)
        })
        .collect())
}

/// Batch mean loss without gradients (used as the objective of the
/// finite-difference harness; follows the same canonical-order reduction
/// as the gradient path).
pub fn batch_mean_loss(
    model: &Model,
    batch: &[&ExamplePair],
    vision: Option<&VisionFixture>,
) -> Result<f64> {
    let rows = parallel::try_map_indexed(batch, |_, pair| {
        example_eval(model, pair, vision).map(|(_, n, ce)| (ce, n))
    })?;
    let total: usize = rows.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::data("batch holds no loss-bearing tokens"));
    }
    let mut sums: Vec<f64> = rows.into_iter().map(|(ce, _)| ce).collect();
    sums.sort_by(|a, b| a.total_cmp(b));
    Ok(sums.iter().sum::<f64>() / total as f64)
}

/// End-to-end gradient check of the full model loss: tape gradients of a
/// fixed synthetic batch against central finite differences, probing
/// `samples_per_tensor` elements of every trainable tensor.
pub fn model_gradcheck(
    cfg: &crate::config::ModelConfig,
    seed: u64,
    opts: &crate::gradcheck::GradCheckOptions,
) -> Result<crate::gradcheck::GradCheckReport> {
    let base = Model::build(cfg, seed)?;
    let seq_len = 6.min(cfg.max_seq);
    let pairs = crate::synth::copy_task_pairs(cfg, 2, seq_len, crate::rng::mix(seed, 1));
    let frozen = Model::frozen_names(&base.cfg);
    let trainable: crate::gradcheck::ParamMap = base
        .params()
        .iter()
        .filter(|(n, _)| !frozen.contains(*n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let with_frozen = |p: &crate::gradcheck::ParamMap| {
        let mut full = p.clone();
        for name in &frozen {
            full.insert(name.clone(), base.param(name).clone());
        }
        full
    };
    crate::gradcheck::finite_diff_check(
        &trainable,
        |p| {
            let m = Model::from_param_map(cfg, with_frozen(p))?;
            let refs: Vec<&ExamplePair> = pairs.iter().collect();
            batch_mean_loss(&m, &refs, None)
        },
        |p| {
            let m = Model::from_param_map(cfg, with_frozen(p))?;
            let refs: Vec<&ExamplePair> = pairs.iter().collect();
            let (_, _, grads) = batch_loss_and_grads(&m, &refs, None)?;
            Ok(grads)
        },
        opts,
    )
}

/// Synthetic key-value retrieval probe: the encoder sees (key, value)
/// pairs followed by a query key, the decoder must produce that key's
/// value. `pi_scale` overrides the model's positional-interpolation factor
/// at evaluation time, which is how contexts beyond the trained length are
/// mapped back into range. Returns exact-match accuracy.
pub fn eval_needle(
    model: &Model,
    haystack_pairs: usize,
    pi_scale: f64,
    cases: usize,
    seed: u64,
) -> Result<f64> {
    let mut cfg = model.cfg.clone();
    cfg.pi_scale = pi_scale;
    let eval_model = Model::from_param_map(&cfg, model.params().clone())?;
    let task = crate::synth::NeedleTask::for_config(&model.cfg);
    let pairs = crate::synth::needle_pairs(&task, haystack_pairs, cases, seed)?;
    let pair_refs: Vec<&ExamplePair> = pairs.iter().collect();
    teacher_forced_accuracy(&eval_model, &pair_refs, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LayerPattern, ModelConfig};

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            d_model: 16,
            d_head: 4,
            n_q_heads: 4,
            n_kv_heads: 2,
            n_layers: 2,
            layer_pattern: LayerPattern::AllGlobal,
            d_ffn: 32,
            num_sentinels: 8,
            max_seq: 512,
            ..ModelConfig::default()
        }
    }

    fn opts() -> TrainOptions {
        TrainOptions {
            peak_lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let o = opts();
        assert_eq!(lr_at(0, &o), 0.0);
        assert_eq!(lr_at(o.warmup_steps, &o), o.peak_lr);
        let end = lr_at(o.total_steps, &o);
        assert!((end - o.min_lr).abs() <= 1e-15);
        // halfway through decay: midpoint of peak and min
        let mid = lr_at((o.total_steps + o.warmup_steps) / 2, &o);
        assert!((mid - (o.peak_lr + o.min_lr) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut g = GradMap::new();
        g.insert("a".into(), vec![0.3, 0.4]);
        let (norm, clipped) = clip_global_norm(&mut g, 1.0).unwrap();
        assert!((norm - 0.5).abs() <= 1e-15);
        assert!(!clipped);
        assert_eq!(g["a"], vec![0.3, 0.4]);
    }

    #[test]
    fn clip_halves_a_norm_two_gradient() {
        let mut g = GradMap::new();
        g.insert("a".into(), vec![2.0, 0.0]);
        g.insert("b".into(), vec![0.0]);
        // construct ‖g‖ = 2
        let (norm, clipped) = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 2.0);
        assert!(clipped);
        let post: f64 = g.values().flat_map(|v| v.iter().map(|x| x * x)).sum::<f64>().sqrt();
        assert!((post - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn clip_three_four_five() {
        let mut g = GradMap::new();
        g.insert("a".into(), vec![3.0, 0.0]);
        g.insert("b".into(), vec![0.0, 4.0]);
        let (norm, clipped) = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!(clipped);
        assert_eq!(g["a"][0], 3.0 * 0.2);
        assert_eq!(g["b"][1], 4.0 * 0.2);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut g = GradMap::new();
        g.insert("a".into(), vec![5.0, -2.0, 0.7]);
        clip_global_norm(&mut g, 1.0).unwrap();
        let once = g.clone();
        let (norm2, clipped2) = clip_global_norm(&mut g, 1.0).unwrap();
        assert!((norm2 - 1.0).abs() <= 1e-12);
        assert!(!clipped2);
        assert_eq!(g, once);
    }

    #[test]
    fn clip_rejects_non_finite() {
        let mut g = GradMap::new();
        g.insert("a".into(), vec![f64::NAN]);
        assert!(clip_global_norm(&mut g, 1.0).is_err());
    }

    #[test]
    fn zero_lr_step_leaves_parameters_unchanged() {
        let cfg = toy_cfg();
        let mut model = Model::build(&cfg, 1).unwrap();
        let before = model.params().clone();
        let pairs = crate::synth::copy_task_pairs(&cfg, 4, 6, 3);
        let batch: Vec<&ExamplePair> = pairs.iter().collect();
        let (_, _, mut grads) = batch_loss_and_grads(&model, &batch, None).unwrap();
        clip_global_norm(&mut grads, 1.0).unwrap();
        let mut optimizer = Optimizer::new();
        optimizer.step(&mut model, &grads, 0.0, &opts()).unwrap();
        for (name, t) in model.params() {
            assert!(t.bitwise_eq(&before[name]), "{name} changed under lr 0");
        }
        assert_eq!(optimizer.t, 1, "optimizer state still advances");
    }

    #[test]
    fn weight_decay_spares_gains_embeddings_and_frozen() {
        assert!(decays("decoder.layer0.attn.w_q"));
        assert!(decays("encoder.layer1.ffn.w_down"));
        assert!(!decays("embedding"));
        assert!(!decays("decoder.layer0.attn.q_gain"));
        assert!(!decays("decoder.layer0.attn.pre_norm"));
        assert!(!decays("encoder.final_norm"));
        assert!(!decays("vision_projection"));
        // Behavioral check: zero gradients, nonzero decay → only matmul
        // weights move.
        let cfg = toy_cfg();
        let mut model = Model::build(&cfg, 2).unwrap();
        let before = model.params().clone();
        let mut grads = GradMap::new();
        for (name, t) in model.params() {
            grads.insert(name.clone(), vec![0.0; t.numel()]);
        }
        let mut optimizer = Optimizer::new();
        optimizer.step(&mut model, &grads, 0.5, &opts()).unwrap();
        for (name, t) in model.params() {
            if decays(name) {
                assert!(!t.bitwise_eq(&before[name]), "{name} should have decayed");
            } else {
                assert!(t.bitwise_eq(&before[name]), "{name} must not decay");
            }
        }
    }

    #[test]
    fn batch_loss_invariant_under_example_order() {
        let cfg = toy_cfg();
        let model = Model::build(&cfg, 3).unwrap();
        let pairs = crate::synth::copy_task_pairs(&cfg, 6, 5, 4);
        let fwd: Vec<&ExamplePair> = pairs.iter().collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let (loss_f, n_f, _) = batch_loss_and_grads(&model, &fwd, None).unwrap();
        let (loss_r, n_r, _) = batch_loss_and_grads(&model, &rev, None).unwrap();
        assert_eq!(n_f, n_r);
        assert_eq!(loss_f.to_bits(), loss_r.to_bits(), "mean reduction must not depend on order");
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_batches_are_bitwise_equal() {
        let cfg = toy_cfg();
        let model = Model::build(&cfg, 4).unwrap();
        let pairs = crate::synth::copy_task_pairs(&cfg, 8, 6, 5);
        let batch: Vec<&ExamplePair> = pairs.iter().collect();
        let (loss_p, _, grads_p) = batch_loss_and_grads(&model, &batch, None).unwrap();
        let (loss_s, _, grads_s) = batch_loss_and_grads_sequential(&model, &batch, None).unwrap();
        assert_eq!(loss_p.to_bits(), loss_s.to_bits());
        for (name, g) in &grads_p {
            let gs = &grads_s[name];
            assert!(g.iter().zip(gs).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
        }
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let cfg = toy_cfg();
        let pairs = crate::synth::copy_task_pairs(&cfg, 16, 6, 6);
        let o = TrainOptions {
            total_steps: 5,
            warmup_steps: 2,
            batch_size: 4,
            ..opts()
        };
        let run = || {
            let mut model = Model::build(&cfg, 7).unwrap();
            train(
                &mut model,
                &TrainData {
                    pairs: &pairs,
                    vision: None,
                },
                &o,
                None,
            )
            .unwrap()
            .metrics_log()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exploding_learning_rate_aborts_with_step_context() {
        let cfg = toy_cfg();
        let mut model = Model::build(&cfg, 11).unwrap();
        let pairs = crate::synth::copy_task_pairs(&cfg, 8, 6, 12);
        let o = TrainOptions {
            peak_lr: 1e18,
            min_lr: 1e17,
            warmup_steps: 1,
            total_steps: 10,
            batch_size: 4,
            ..TrainOptions::default()
        };
        let err = train(
            &mut model,
            &TrainData {
                pairs: &pairs,
                vision: None,
            },
            &o,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, crate::error::Error::Numeric(_)), "{err}");
        assert!(err.to_string().contains("step"), "{err}");
    }

    #[test]
    fn uniform_logit_model_has_perplexity_vocab() {
        let cfg = toy_cfg();
        let mut model = Model::build(&cfg, 8).unwrap();
        // Zero embedding → all logits zero → uniform distribution.
        let emb = model.param("embedding").clone();
        model
            .set_param("embedding", crate::tensor::Tensor::zeros(emb.shape().to_vec()))
            .unwrap();
        let pairs = crate::synth::copy_task_pairs(&cfg, 4, 6, 9);
        let stats = eval_denoising(&model, &pairs, None).unwrap();
        let s = stats[&PairTag::Denoiser(0)];
        assert!((s.perplexity - cfg.vocab_size as f64).abs() <= 1e-9);
    }
}
