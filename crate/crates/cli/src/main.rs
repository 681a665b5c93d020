//! One binary, subcommand per operation. Every command echoes its resolved
//! configuration, prints a machine-readable `RESULT`-prefixed summary line
//! on success, and exits with a class-specific code on failure:
//! 2 config, 3 data, 4 numeric, 5 format.

mod runcfg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use edlm::ckpt::{
    adapt_from_decoder_only, average_checkpoints, model_from_checkpoint, model_to_checkpoint,
    synthesize_decoder_only, Checkpoint, Dtype,
};
use edlm::error::{Error, Result};
use edlm::gradcheck::GradCheckOptions;
use edlm::model::{count_params, Model};
use edlm::parallel;
use edlm::rng::Rng;
use edlm::shard::{read_shard, write_shard};
use edlm::training::{eval_denoising, eval_needle, model_gradcheck, train, TrainData};
use edlm::ul2::{
    corrupt_spans, pair_span_stats, sample_denoiser, vision_prefix_split, ExamplePair, PairTag,
    PipeItem,
};
use edlm::vision::VisionFixture;
use runcfg::RunConfig;

#[derive(Parser)]
#[command(
    name = "edlm",
    version,
    about = "Desk-scale encoder-decoder language model lab",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run-config file (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); overrides win over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let rc = RunConfig::resolve(self.config.as_deref(), &self.set)?;
        rc.echo();
        Ok(rc)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Corrupt a corpus (one document per line) into a training shard and
    /// report the denoiser mixture statistics.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus path; overrides paths.corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output shard path; overrides paths.shards.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a freshly initialized checkpoint for the configured model.
    Init {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Emit a decoder-only checkpoint (an adaptation source).
        #[arg(long)]
        decoder_only: bool,
    },
    /// Initialize encoder-decoder parameters from a decoder-only checkpoint.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Source decoder-only checkpoint.
        #[arg(long)]
        src: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Elementwise-average checkpoints with identical schemas.
    Average {
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Input checkpoints (at least one).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train on preprocessed shards per the config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shard path; overrides paths.shards.
        #[arg(long)]
        shards: Option<PathBuf>,
        /// Output directory for checkpoints and the metrics log; overrides
        /// paths.out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Teacher-forced evaluation of a checkpoint on shards, or the
    /// synthetic key-value retrieval probe.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Shard path; overrides paths.shards.
        #[arg(long)]
        shards: Option<PathBuf>,
        /// Run the retrieval probe with this many key/value pairs instead
        /// of the shard evaluation.
        #[arg(long)]
        needle: Option<usize>,
        /// Positional-interpolation factor for the retrieval probe.
        #[arg(long)]
        pi_scale: Option<f64>,
        /// Number of retrieval probe cases.
        #[arg(long, default_value_t = 200)]
        needle_cases: usize,
    },
    /// Closed-form parameter counts for the configured model.
    ParamCount {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of the full-model gradients.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Elements probed per tensor (0 checks every element).
        #[arg(long, default_value_t = 6)]
        samples: usize,
    },
    /// Print the tensor manifest of a checkpoint.
    Describe {
        /// Checkpoint path.
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            let code = match e {
                Error::Config(_) | Error::Shape(_) => 2,
                Error::Data(_) => 3,
                Error::Numeric(_) => 4,
                Error::Format(_) => 5,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Preprocess { cfg, corpus, out } => cmd_preprocess(&cfg.resolve()?, corpus, out),
        Cmd::Init {
            cfg,
            out,
            decoder_only,
        } => cmd_init(&cfg.resolve()?, &out, decoder_only),
        Cmd::Adapt { cfg, src, out } => cmd_adapt(&cfg.resolve()?, &src, &out),
        Cmd::Average { out, inputs } => cmd_average(&out, &inputs),
        Cmd::Train {
            cfg,
            shards,
            out_dir,
            from,
        } => cmd_train(&cfg.resolve()?, shards, out_dir, from),
        Cmd::Eval {
            cfg,
            ckpt,
            shards,
            needle,
            pi_scale,
            needle_cases,
        } => cmd_eval(&cfg.resolve()?, &ckpt, shards, needle, pi_scale, needle_cases),
        Cmd::ParamCount { cfg } => cmd_param_count(&cfg.resolve()?),
        Cmd::GradCheck { cfg, samples } => cmd_grad_check(&cfg.resolve()?, samples),
        Cmd::Describe { ckpt } => cmd_describe(&ckpt),
    }
}

/// Whitespace tokenizer stub: integer token ids, `img:N` image references.
fn parse_document(line: &str, lineno: usize, text_limit: u32) -> Result<Vec<PipeItem>> {
    line.split_whitespace()
        .map(|field| {
            if let Some(idx) = field.strip_prefix("img:") {
                let i: u32 = idx.parse().map_err(|_| {
                    Error::data(format!("line {lineno}: bad image reference '{field}'"))
                })?;
                Ok(PipeItem::ImageRef(i))
            } else {
                let id: u32 = field.parse().map_err(|_| {
                    Error::data(format!("line {lineno}: token '{field}' is not an id"))
                })?;
                if id >= text_limit {
                    return Err(Error::data(format!(
                        "line {lineno}: token id {id} collides with the reserved block (< {text_limit})"
                    )));
                }
                Ok(PipeItem::Token(id))
            }
        })
        .collect()
}

fn cmd_preprocess(rc: &RunConfig, corpus: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let corpus_path = corpus
        .or_else(|| rc.paths.corpus.clone())
        .ok_or_else(|| Error::config("preprocess needs --corpus or paths.corpus".to_string()))?;
    let out_path = out
        .or_else(|| rc.paths.shards.clone())
        .ok_or_else(|| Error::config("preprocess needs --out or paths.shards".to_string()))?;
    let text = std::fs::read_to_string(&corpus_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", corpus_path.display())))?;
    let specials = rc.model.specials();
    let docs: Vec<Vec<PipeItem>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_document(l, i + 1, specials.text_limit()))
        .collect::<Result<_>>()?;
    if docs.is_empty() {
        return Err(Error::data("no documents in corpus".to_string()));
    }
    // Per-document RNG streams keyed by (seed, index): sharded preprocessing
    // is order-independent and reruns are byte-identical.
    let bank = rc.bank.clone();
    let model = rc.model.clone();
    let seed = rc.seed;
    let results: Vec<Result<Vec<ExamplePair>>> = parallel::map_indexed(&docs, |i, doc| {
        let mut rng = Rng::from_stream(seed, i as u64);
        let has_image = doc.iter().any(|d| matches!(d, PipeItem::ImageRef(_)));
        if has_image {
            return Ok(vision_prefix_split(doc)?.into_iter().collect());
        }
        let tokens: Vec<u32> = doc
            .iter()
            .map(|d| match d {
                PipeItem::Token(t) => *t,
                PipeItem::ImageRef(_) => unreachable!(),
            })
            .collect();
        let mut pairs = Vec::new();
        for chunk in edlm::ul2::chunk_tokens(&tokens, model.max_seq) {
            let (k, spec) = sample_denoiser(&bank, &mut rng)?;
            pairs.push(corrupt_spans(
                chunk,
                spec,
                PairTag::Denoiser(k as u8),
                &specials,
                &mut rng,
            )?);
        }
        Ok(pairs)
    });
    let mut pairs = Vec::new();
    for r in results {
        pairs.extend(r?);
    }
    write_shard(&out_path, &pairs)?;

    // Mixture statistics measured from the produced pairs.
    let mut counts: std::collections::BTreeMap<PairTag, usize> = std::collections::BTreeMap::new();
    let mut corrupted = 0usize;
    let mut original = 0usize;
    let mut spans = 0usize;
    for p in &pairs {
        *counts.entry(p.tag).or_insert(0) += 1;
        if p.tag != PairTag::VisionPrefix {
            let (l, c, s) = pair_span_stats(p, &specials)?;
            original += l;
            corrupted += c;
            spans += s;
        }
    }
    for (tag, n) in &counts {
        println!("REPORT\tdenoiser={tag:?}\tcount={n}");
    }
    let rate = corrupted as f64 / original.max(1) as f64;
    let mean_span = corrupted as f64 / spans.max(1) as f64;
    println!(
        "RESULT\tcmd=preprocess\texamples={}\tshard={}\tcorruption_rate={rate:.4}\tmean_span={mean_span:.3}",
        pairs.len(),
        out_path.display()
    );
    Ok(())
}

fn cmd_init(rc: &RunConfig, out: &Path, decoder_only: bool) -> Result<()> {
    let ckpt = if decoder_only {
        synthesize_decoder_only(&rc.model, rc.seed)?
    } else {
        model_to_checkpoint(&Model::build(&rc.model, rc.seed)?, 0, Dtype::F64)?
    };
    ckpt.save(out)?;
    println!(
        "RESULT\tcmd=init\tfamily={}\ttensors={}\tout={}",
        if decoder_only { "decoder_only" } else { "encoder_decoder" },
        ckpt.tensors().len(),
        out.display()
    );
    Ok(())
}

fn cmd_adapt(rc: &RunConfig, src: &Path, out: &Path) -> Result<()> {
    let src_ckpt = Checkpoint::load(src)?;
    let adapted = adapt_from_decoder_only(&src_ckpt, &rc.model)?;
    adapted.save(out)?;
    println!(
        "RESULT\tcmd=adapt\ttensors={}\tstep={}\tout={}",
        adapted.tensors().len(),
        adapted.meta.step,
        out.display()
    );
    Ok(())
}

fn cmd_average(out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let ckpts: Vec<Checkpoint> = inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
    let avg = average_checkpoints(&ckpts)?;
    avg.save(out)?;
    println!(
        "RESULT\tcmd=average\tinputs={}\tstep={}\tout={}",
        inputs.len(),
        avg.meta.step,
        out.display()
    );
    Ok(())
}

fn load_vision(rc: &RunConfig) -> Result<Option<VisionFixture>> {
    match &rc.paths.vision_fixture {
        Some(p) => Ok(Some(VisionFixture::load(p)?)),
        None => Ok(None),
    }
}

fn cmd_train(
    rc: &RunConfig,
    shards: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    from: Option<PathBuf>,
) -> Result<()> {
    let shard_path = shards
        .or_else(|| rc.paths.shards.clone())
        .ok_or_else(|| Error::config("train needs --shards or paths.shards".to_string()))?;
    let out_dir = out_dir
        .or_else(|| rc.paths.out_dir.clone())
        .ok_or_else(|| Error::config("train needs --out-dir or paths.out_dir".to_string()))?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let pairs = read_shard(&shard_path)?;
    let vision = load_vision(rc)?;
    let mut model = match from {
        Some(p) => model_from_checkpoint(&Checkpoint::load(&p)?)?,
        None => Model::build(&rc.model, rc.seed)?,
    };
    let outcome = train(
        &mut model,
        &TrainData {
            pairs: &pairs,
            vision: vision.as_ref(),
        },
        &rc.train,
        Some(&out_dir),
    )?;
    let metrics_path = rc
        .paths
        .metrics
        .clone()
        .unwrap_or_else(|| out_dir.join("metrics.tsv"));
    std::fs::write(&metrics_path, outcome.metrics_log())
        .map_err(|e| Error::data(format!("cannot write {}: {e}", metrics_path.display())))?;
    let final_path = out_dir.join("ckpt_final.edck");
    model_to_checkpoint(&model, outcome.steps_run, Dtype::F64)?.save(&final_path)?;
    let last_loss = outcome.metrics.last().map_or(f64::NAN, |m| m.loss);
    println!(
        "RESULT\tcmd=train\tsteps={}\tfinal_loss={last_loss}\taccuracy={}\tmetrics={}\tfinal_ckpt={}",
        outcome.steps_run,
        outcome
            .final_accuracy
            .map_or("none".to_string(), |a| format!("{a}")),
        metrics_path.display(),
        final_path.display()
    );
    Ok(())
}

fn cmd_eval(
    rc: &RunConfig,
    ckpt: &Path,
    shards: Option<PathBuf>,
    needle: Option<usize>,
    pi_scale: Option<f64>,
    needle_cases: usize,
) -> Result<()> {
    let model = model_from_checkpoint(&Checkpoint::load(ckpt)?)?;
    if let Some(haystack) = needle {
        let pi = pi_scale.unwrap_or(model.cfg.pi_scale);
        let acc = eval_needle(&model, haystack, pi, needle_cases, rc.seed)?;
        println!(
            "RESULT\tcmd=eval\tprobe=needle\thaystack={haystack}\tpi_scale={pi}\tcases={needle_cases}\taccuracy={acc}"
        );
        return Ok(());
    }
    let shard_path = shards
        .or_else(|| rc.paths.shards.clone())
        .ok_or_else(|| Error::config("eval needs --shards, paths.shards, or --needle".to_string()))?;
    let pairs = read_shard(&shard_path)?;
    let vision = load_vision(rc)?;
    let stats = eval_denoising(&model, &pairs, vision.as_ref())?;
    let mut total_tokens = 0usize;
    let mut weighted_acc = 0.0;
    for (tag, s) in &stats {
        println!(
            "REPORT\tdenoiser={tag:?}\ttokens={}\taccuracy={}\tperplexity={}",
            s.tokens, s.accuracy, s.perplexity
        );
        total_tokens += s.tokens;
        weighted_acc += s.accuracy * s.tokens as f64;
    }
    println!(
        "RESULT\tcmd=eval\texamples={}\ttokens={total_tokens}\taccuracy={}",
        pairs.len(),
        weighted_acc / total_tokens.max(1) as f64
    );
    Ok(())
}

fn cmd_param_count(rc: &RunConfig) -> Result<()> {
    let b = count_params(&rc.model);
    println!(
        "RESULT\tcmd=param_count\tembedding={}\tencoder={}\tdecoder={}\tvision_projection={}\ttotal={}",
        b.embedding,
        b.encoder,
        b.decoder,
        b.vision_projection,
        b.total()
    );
    Ok(())
}

fn cmd_grad_check(rc: &RunConfig, samples: usize) -> Result<()> {
    let opts = GradCheckOptions {
        samples_per_tensor: samples,
        ..GradCheckOptions::default()
    };
    let report = model_gradcheck(&rc.model, rc.seed, &opts)?;
    for t in &report.per_tensor {
        println!(
            "REPORT\ttensor={}\tmax_rel_err={}\tchecked={}",
            t.name, t.max_rel_err, t.checked
        );
    }
    println!(
        "RESULT\tcmd=grad_check\tmax_rel_err={}\ttol={}\tpass={}",
        report.max_rel_err, report.tol, report.pass
    );
    if !report.pass {
        return Err(Error::numeric(format!(
            "gradient check failed: max relative error {} exceeds {}",
            report.max_rel_err, report.tol
        )));
    }
    Ok(())
}

fn cmd_describe(ckpt: &Path) -> Result<()> {
    let c = Checkpoint::load(ckpt)?;
    print!("{}", c.manifest());
    let total: u64 = c.tensors().values().map(|t| t.numel() as u64).sum();
    println!(
        "RESULT\tcmd=describe\ttensors={}\ttotal_elements={total}\tstep={}",
        c.tensors().len(),
        c.meta.step
    );
    Ok(())
}
