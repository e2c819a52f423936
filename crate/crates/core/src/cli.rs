//! Command-line front end. `run` parses arguments, executes one subcommand
//! and maps failures to exit codes: 0 success, 1 runtime failure, 2 usage.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::artifact::{load_model, save_model, ModelArtifact, Provenance};
use crate::corpus::{
    build_vocabulary, extract_corpus, parse_heads_line, read_lines, read_parallel_corpus, tokenize,
    AlignedSentencePair,
};
use crate::encoder::{Arch, EncoderConfig, Fusion, GlobalFusion};
use crate::error::{Error, Result};
use crate::jointlm::PredictorConfig;
use crate::model::{perplexity, Model, ModelConfig, INIT_SCALE};
use crate::nbest::{score_nbest, DEFAULT_FEATURE};
use crate::training::{grad_check_config, gradient_check, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "cnnjm", version, about = "Guided convolutional joint language models")]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on an aligned parallel corpus.
    Train(TrainArgs),
    /// Held-out perplexity of a trained model.
    EvalPpl(EvalArgs),
    /// Append the model score as a feature to every n-best entry.
    ScoreNbest(ScoreArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
    /// Dump configuration, parameter statistics and gate histograms.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Source-target alignment, one line of `i-j` pairs per sentence.
    #[arg(long)]
    align: PathBuf,
    /// Dependency heads of the source words (`-1` marks the root).
    #[arg(long)]
    heads: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    Generic,
    Tag,
    TagDep,
    Attention,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Arch {
        match a {
            ArchArg::Generic => Arch::Generic,
            ArchArg::Tag => Arch::Tag,
            ArchArg::TagDep => Arch::TagDep,
            ArchArg::Attention => Arch::Attention,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Gating,
    Pooling,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Fusion {
        match f {
            FusionArg::Gating => Fusion::Gating,
            FusionArg::Pooling => Fusion::Pooling,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, requires_all = ["dev_tgt", "dev_align"])]
    dev_src: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    dev_tgt: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    dev_align: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    dev_heads: Option<PathBuf>,
    /// Output model file.
    #[arg(long, short)]
    out: PathBuf,
    /// Also append per-epoch metrics lines to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "tag")]
    arch: ArchArg,
    #[arg(long, value_enum, default_value = "gating")]
    fusion: FusionArg,
    /// k of the global k-max pooling (pooling fusion only).
    #[arg(long, default_value_t = 2)]
    pool_k: usize,
    #[arg(long, default_value_t = 100)]
    emb_dim: usize,
    /// Target embedding dimension; defaults to --emb-dim.
    #[arg(long)]
    target_emb_dim: Option<usize>,
    #[arg(long, default_value_t = 100)]
    attn_dim: usize,
    #[arg(long, default_value_t = 1)]
    attn_depth: usize,
    /// Feature maps in both convolution layers.
    #[arg(long, default_value_t = 100)]
    filters: usize,
    #[arg(long, default_value_t = 100)]
    repr_dim: usize,
    #[arg(long, default_value_t = 200)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    hidden_layers: usize,
    #[arg(long, default_value_t = 40)]
    maxlen: usize,
    /// n-gram order; the history holds n-1 target words.
    #[arg(long, default_value_t = 4)]
    ngram: usize,
    #[arg(long, default_value_t = 20000)]
    vocab_limit: usize,

    #[arg(long, default_value_t = 500)]
    minibatch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long)]
    lr_halving: bool,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = INIT_SCALE)]
    init_scale: f64,
    /// Do not predict the sentence end.
    #[arg(long)]
    no_eos: bool,
    /// Reduce gradients in arbitrary order (faster, not reproducible).
    #[arg(long)]
    fast: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long, short)]
    model: PathBuf,
    /// Source sentences; n-best ids index this file from 0.
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long)]
    heads: Option<PathBuf>,
    /// Output file (default: standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_FEATURE)]
    feature_name: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchSel {
    All,
    Generic,
    Tag,
    TagDep,
    Attention,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionSel {
    All,
    Gating,
    Pooling,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, value_enum, default_value = "all")]
    arch: ArchSel,
    #[arg(long, value_enum, default_value = "all")]
    fusion: FusionSel,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Corpus whose global-gate weights are histogrammed; without it the
    /// gate parameters themselves are.
    #[arg(long, requires_all = ["tgt", "align"])]
    src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    tgt: Option<PathBuf>,
    #[arg(long, requires = "src")]
    align: Option<PathBuf>,
    #[arg(long, requires = "src")]
    heads: Option<PathBuf>,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            report("usage", first);
            return 2;
        }
    };
    if let Some(n) = cli.threads {
        // the global pool can only be configured once per process
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("--threads ignored: {e}");
        }
    }
    let result = dispatch(cli.command, out);
    match result {
        Ok(code) => code,
        Err(e) => {
            report(e.kind(), &e.to_string());
            match e {
                Error::Config(_) | Error::MissingAlignment { .. } | Error::MissingGuide { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn report(kind: &str, message: &str) {
    let message = serde_json::to_string(message).unwrap_or_default();
    eprintln!("error kind={kind} message={message}");
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(a, out),
        Command::EvalPpl(a) => cmd_eval(a, out),
        Command::ScoreNbest(a) => cmd_score(a, out),
        Command::GradCheck(a) => cmd_grad_check(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

fn read_corpus(c: &CorpusArgs, arch: Arch) -> Result<Vec<AlignedSentencePair>> {
    if arch == Arch::TagDep && c.heads.is_none() {
        return Err(Error::MissingGuide {
            arch: arch.name(),
            what: "dependency heads (--heads)",
        });
    }
    let heads = if arch == Arch::TagDep {
        c.heads.as_deref()
    } else {
        None
    };
    read_parallel_corpus(&c.src, &c.tgt, &c.align, heads)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    if a.ngram < 2 {
        return Err(Error::Config("--ngram must be at least 2".into()));
    }
    let arch = Arch::from(a.arch);
    let config = ModelConfig {
        encoder: EncoderConfig {
            arch,
            src_emb_dim: a.emb_dim,
            tgt_emb_dim: a.target_emb_dim.unwrap_or(a.emb_dim),
            attn_dim: a.attn_dim,
            attn_depth: a.attn_depth,
            conv1_maps: a.filters,
            conv3_maps: a.filters,
            repr_dim: a.repr_dim,
            maxlen: a.maxlen,
            history: a.ngram - 1,
            fusion: a.fusion.into(),
            pool_k: a.pool_k,
        },
        predictor: PredictorConfig {
            hidden_dim: a.hidden,
            hidden_layers: a.hidden_layers,
        },
    };
    config.validate()?;
    let tc = TrainConfig {
        learning_rate: a.lr,
        minibatch: a.minibatch,
        epochs: a.epochs,
        seed: a.seed,
        lr_halving: a.lr_halving,
        grad_clip: a.grad_clip,
        init_scale: a.init_scale,
        deterministic: !a.fast,
    };
    tc.validate()?;
    let emit_eos = !a.no_eos;

    let pairs = read_corpus(&a.corpus, arch)?;
    let usable: Vec<&AlignedSentencePair> = pairs
        .iter()
        .filter(|p| p.source_tokens.len() <= a.maxlen)
        .collect();
    let src_vocab = build_vocabulary(usable.iter().map(|p| &p.source_tokens), a.vocab_limit)?;
    let tgt_vocab = build_vocabulary(usable.iter().map(|p| &p.target_tokens), a.vocab_limit)?;
    let k = a.ngram - 1;
    let (samples, stats) = extract_corpus(&pairs, &src_vocab, &tgt_vocab, k, a.maxlen, emit_eos);
    log::info!(
        "{} pairs, {} samples, {} too long, {} unalignable",
        stats.pairs,
        samples.len(),
        stats.skipped_too_long,
        stats.skipped_unalignable
    );
    let held_out = match &a.dev_src {
        Some(src) => {
            let dev = CorpusArgs {
                src: src.clone(),
                tgt: a.dev_tgt.clone().expect("clap enforces"),
                align: a.dev_align.clone().expect("clap enforces"),
                heads: a.dev_heads.clone(),
            };
            let dev_pairs = read_corpus(&dev, arch)?;
            Some(extract_corpus(&dev_pairs, &src_vocab, &tgt_vocab, k, a.maxlen, emit_eos).0)
        }
        None => None,
    };

    let model = Model::init_with_scale(config, src_vocab.len(), tgt_vocab.len(), a.seed, a.init_scale)?;
    let mut metrics_file = a.metrics.as_deref().map(File::create).transpose()?;
    let mut io_err = None;
    let outcome = train(model, &samples, &tc, held_out.as_deref(), &mut |m| {
        let line = m.to_line();
        let mut write = || -> io::Result<()> {
            writeln!(out, "{line}")?;
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{line}")?;
                f.flush()?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }

    let provenance = Provenance {
        seed: a.seed,
        corpus_lines: pairs.len(),
        samples: samples.len(),
        extract: stats,
        metrics: outcome.metrics,
    };
    let artifact = ModelArtifact::new(outcome.model, tc, src_vocab, tgt_vocab, emit_eos, provenance)?;
    save_model(&artifact, &a.out)?;
    match outcome.aborted {
        Some(e) => Err(e),
        None => Ok(0),
    }
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let art = load_model(&a.model)?;
    let enc = &art.model.config.encoder;
    let pairs = read_corpus(&a.corpus, enc.arch)?;
    let (samples, stats) = extract_corpus(
        &pairs,
        &art.src_vocab,
        &art.tgt_vocab,
        enc.history,
        enc.maxlen,
        art.emit_eos,
    );
    let ppl = perplexity(&samples, &art.model)?;
    writeln!(
        out,
        "perplexity={ppl:.6} samples={} pairs={} skipped_too_long={} skipped_unalignable={}",
        samples.len(),
        stats.pairs,
        stats.skipped_too_long,
        stats.skipped_unalignable
    )?;
    Ok(0)
}

fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> Result<i32> {
    let art = load_model(&a.model)?;
    let sources: Vec<Vec<String>> = read_lines(&a.src)?.iter().map(|l| tokenize(l)).collect();
    let heads = match &a.heads {
        Some(p) => {
            let lines = read_lines(p)?;
            if lines.len() != sources.len() {
                return Err(Error::LineCountMismatch {
                    file: p.display().to_string(),
                    line: lines.len().min(sources.len()) + 1,
                });
            }
            let parsed = lines
                .iter()
                .zip(&sources)
                .enumerate()
                .map(|(i, (l, s))| {
                    parse_heads_line(l, s.len()).map_err(|e| Error::Input {
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(parsed)
        }
        None => None,
    };
    let lines = read_lines(&a.nbest)?;
    let start = Instant::now();
    let scored = score_nbest(&art, &sources, heads.as_deref(), &lines, &a.feature_name)?;
    log::info!("scored {} hypotheses in {:.2}s", scored.len(), start.elapsed().as_secs_f64());
    match &a.out {
        Some(p) => write_lines(&scored, &mut BufWriter::new(File::create(p)?))?,
        None => write_lines(&scored, out)?,
    }
    Ok(0)
}

fn write_lines(lines: &[String], w: &mut dyn Write) -> Result<()> {
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs, out: &mut dyn Write) -> Result<i32> {
    let archs: Vec<Arch> = match a.arch {
        ArchSel::All => Arch::ALL.to_vec(),
        ArchSel::Generic => vec![Arch::Generic],
        ArchSel::Tag => vec![Arch::Tag],
        ArchSel::TagDep => vec![Arch::TagDep],
        ArchSel::Attention => vec![Arch::Attention],
    };
    let fusions = match a.fusion {
        FusionSel::All => vec![Fusion::Gating, Fusion::Pooling],
        FusionSel::Gating => vec![Fusion::Gating],
        FusionSel::Pooling => vec![Fusion::Pooling],
    };
    let mut all_pass = true;
    for &arch in &archs {
        for &fusion in &fusions {
            let report = gradient_check(&grad_check_config(arch, fusion), a.seed, a.epsilon)?;
            for g in &report.groups {
                writeln!(
                    out,
                    "arch={arch} fusion={} group={} coords={} max_rel_error={:.3e} status={}",
                    fusion_name(fusion),
                    g.name,
                    g.coords,
                    g.max_rel_error,
                    if g.max_rel_error < a.tolerance { "ok" } else { "FAIL" }
                )?;
            }
            let pass = report.passes(a.tolerance);
            all_pass &= pass;
            writeln!(
                out,
                "summary arch={arch} fusion={} max_rel_error={:.3e} status={}",
                fusion_name(fusion),
                report.max_error(),
                if pass { "ok" } else { "FAIL" }
            )?;
        }
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn fusion_name(f: Fusion) -> &'static str {
    match f {
        Fusion::Gating => "gating",
        Fusion::Pooling => "pooling",
    }
}

struct TensorStats {
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    l2: f64,
}

fn stats(v: &[f64]) -> TensorStats {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    TensorStats {
        mean,
        std: var.sqrt(),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        l2: v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Equal-width histogram over `[lo, hi]`; the top edge falls in the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let i = if width > 0.0 {
            (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        counts[i] += 1;
    }
    counts
}

fn gate_weights(art: &ModelArtifact, a: &InspectArgs) -> Result<Option<(&'static str, Vec<f64>, f64, f64)>> {
    let params = &art.model.encoder;
    let Some(w_g) = &params.gate_global_w else {
        return Ok(None);
    };
    let Some(src) = &a.src else {
        let s = stats(w_g.data());
        return Ok(Some(("parameters", w_g.data().to_vec(), s.min, s.max)));
    };
    let corpus = CorpusArgs {
        src: src.clone(),
        tgt: a.tgt.clone().expect("clap enforces"),
        align: a.align.clone().expect("clap enforces"),
        heads: a.heads.clone(),
    };
    let enc = &art.model.config.encoder;
    let pairs = read_corpus(&corpus, enc.arch)?;
    let (samples, _) = extract_corpus(
        &pairs,
        &art.src_vocab,
        &art.tgt_vocab,
        enc.history,
        enc.maxlen,
        art.emit_eos,
    );
    let mut omega = Vec::new();
    for s in &samples {
        let (trace, _) = art.model.forward(s)?;
        if let GlobalFusion::Weights(w) = trace.global {
            omega.extend(w);
        }
    }
    Ok(Some(("omega", omega, 0.0, 1.0)))
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<i32> {
    if a.bins == 0 {
        return Err(Error::Config("--bins must be positive".into()));
    }
    let art = load_model(&a.model)?;
    let gate = gate_weights(&art, &a)?;
    let tensors = art.model.tensors();
    match a.format {
        Format::Text => {
            writeln!(out, "config {}", serde_json::to_string(&art.model.config)?)?;
            writeln!(out, "train {}", serde_json::to_string(&art.train_config)?)?;
            writeln!(
                out,
                "arch={} emit_eos={} src_vocab={} tgt_vocab={} parameters={}",
                art.model.arch(),
                art.emit_eos,
                art.src_vocab.len(),
                art.tgt_vocab.len(),
                art.model.parameter_count()
            )?;
            for (name, t) in &tensors {
                let s = stats(t.data());
                writeln!(
                    out,
                    "tensor name={name} shape={:?} mean={:.6} std={:.6} min={:.6} max={:.6} l2={:.6}",
                    t.shape(),
                    s.mean,
                    s.std,
                    s.min,
                    s.max,
                    s.l2
                )?;
            }
            for m in &art.provenance.metrics {
                writeln!(out, "metrics {}", m.to_line())?;
            }
            match &gate {
                Some((source, values, lo, hi)) => {
                    writeln!(out, "gate_histogram source={source} values={}", values.len())?;
                    let width = (hi - lo) / a.bins as f64;
                    for (i, c) in histogram(values, *lo, *hi, a.bins).iter().enumerate() {
                        let b = lo + i as f64 * width;
                        writeln!(out, "bin lo={b:.6} hi={:.6} count={c}", b + width)?;
                    }
                }
                None => writeln!(out, "gate_histogram none (pooling fusion)")?,
            }
        }
        Format::Csv => {
            writeln!(out, "tensor,shape,mean,std,min,max,l2")?;
            for (name, t) in &tensors {
                let s = stats(t.data());
                let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                writeln!(
                    out,
                    "{name},{},{},{},{},{},{}",
                    shape.join("x"),
                    s.mean,
                    s.std,
                    s.min,
                    s.max,
                    s.l2
                )?;
            }
            if let Some((source, values, lo, hi)) = &gate {
                writeln!(out)?;
                writeln!(out, "source,bin_lo,bin_hi,count")?;
                let width = (hi - lo) / a.bins as f64;
                for (i, c) in histogram(values, *lo, *hi, a.bins).iter().enumerate() {
                    let b = lo + i as f64 * width;
                    writeln!(out, "{source},{b},{},{c}", b + width)?;
                }
            }
        }
    }
    Ok(0)
}
