//! `suta`: train, adapt, sweep, and analyze single-utterance test-time
//! adaptation experiments on synthetic corpora.
//!
//! All outputs are deterministic for a fixed flag set: reruns produce
//! byte-identical files. Relative output paths resolve against the
//! `SUTA_OUT_DIR` environment variable (default: current directory).
//! On failure the process exits nonzero and writes a one-line JSON error
//! record to stderr.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use suta_core::adapt::{AdaptConfig, AdaptMethod};
use suta_core::corpus::{generate_corpus, load_corpus, save_corpus, save_transcript_sidecar, CorpusSpec};
use suta_core::harness::{
    adapt_over_corpora, buckets_csv, curves_csv, fmt_float, length_analysis, run_method, sweep,
    SweepAxes,
};
use suta_core::losses::EntropyNorm;
use suta_core::model::{train_source, ModelConfig, ModelState, ParamPartition};
use suta_core::{Error, Utterance};

#[derive(Parser)]
#[command(name = "suta", about = "Single-utterance test-time adaptation for CTC models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file (optionally with covariate shift).
    GenCorpus(GenCorpusArgs),
    /// Train the source model on a clean corpus and save a checkpoint.
    Train(TrainArgs),
    /// Run adaptation methods over corpora and report WER/WERR tables.
    Adapt(AdaptArgs),
    /// Cross-product hyperparameter sweep over one corpus.
    Sweep(SweepArgs),
    /// Compare baseline vs adapted WER in short/long duration buckets.
    LengthAnalysis(LengthAnalysisArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 50)]
    utterances: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1)]
    words_min: usize,
    #[arg(long, default_value_t = 5)]
    words_max: usize,
    #[arg(long, default_value_t = 2)]
    word_chars_min: usize,
    #[arg(long, default_value_t = 4)]
    word_chars_max: usize,
    #[arg(long, default_value_t = 4)]
    frames_per_char: usize,
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    /// Additive Gaussian feature noise amplitude (0 = clean).
    #[arg(long, default_value_t = 0.0)]
    noise_delta: f64,
    /// Disallow doubled letters inside words. Doubled letters are inherently
    /// ambiguous under greedy CTC; evaluation corpora usually want this on.
    #[arg(long)]
    avoid_repeats: bool,
    /// Seeds the shared character prototypes; keep it equal across corpora
    /// that must share an acoustic alphabet.
    #[arg(long, default_value_t = 1234)]
    template_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus file.
    #[arg(long)]
    out: PathBuf,
    /// Optional tab-separated id/transcript sidecar.
    #[arg(long)]
    transcripts: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Optional held-out corpus; its WER is appended to the log.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Model initialization seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 2)]
    conv_layers: usize,
    #[arg(long, default_value_t = 3)]
    kernel_width: usize,
    #[arg(long, default_value_t = 32)]
    conv_channels: usize,
    #[arg(long, default_value_t = 1)]
    conv_stride: usize,
    #[arg(long, default_value_t = 2)]
    encoder_blocks: usize,
    #[arg(long, default_value_t = 64)]
    encoder_hidden: usize,
    /// Checkpoint output path.
    #[arg(long)]
    model_out: PathBuf,
    /// Training log CSV (epoch, mean CTC loss; plus a held-out WER line).
    #[arg(long)]
    log: Option<PathBuf>,
}

/// Adaptation flags shared by adapt / sweep / length-analysis.
#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 2.5)]
    temperature: f64,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Adaptable parameters: ln | feat | ln+feat | all.
    #[arg(long, default_value = "ln+feat")]
    params: String,
    /// Learning rate override (defaults depend on --params).
    #[arg(long)]
    lr: Option<f64>,
    /// Entropy denominator: retained | full.
    #[arg(long, default_value = "retained")]
    entropy_norm: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parallel adaptation jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl ConfigArgs {
    fn to_config(&self, method: AdaptMethod) -> Result<AdaptConfig, Error> {
        let entropy_norm = match self.entropy_norm.as_str() {
            "retained" => EntropyNorm::RetainedFrames,
            "full" => EntropyNorm::FullLength,
            other => {
                return Err(Error::Contract(format!(
                    "unknown entropy norm '{other}' (expected retained|full)"
                )))
            }
        };
        let config = AdaptConfig {
            method,
            alpha: self.alpha,
            temperature: self.temperature,
            iterations: self.iters,
            partition: ParamPartition::from_str(&self.params)?,
            lr: self.lr,
            entropy_norm,
            seed: self.seed,
            ..Default::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct AdaptArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Corpus as tag=path; repeat for several corpora.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<String>,
    /// Method to run (none|suta|sdpl); repeat to compare several.
    #[arg(long = "method", default_values_t = [String::from("suta")])]
    methods: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Results CSV.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Optional results JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Optional per-iteration WER/loss curves CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus as tag=path.
    #[arg(long)]
    corpus: String,
    /// Comma-separated axis values; omitted axes use the base flags.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    temperatures: Vec<f64>,
    #[arg(long = "iters-list", value_delimiter = ',')]
    iters_list: Vec<usize>,
    #[arg(long = "partitions", value_delimiter = ',')]
    partitions: Vec<String>,
    #[arg(long = "methods", value_delimiter = ',')]
    methods: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// Optional per-iteration curves CSV over all config points.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct LengthAnalysisArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus as tag=path.
    #[arg(long)]
    corpus: String,
    /// Method to compare against the unadapted baseline.
    #[arg(long, default_value = "suta")]
    method: String,
    /// Input-frame threshold separating short from long utterances.
    #[arg(long)]
    threshold: usize,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "buckets.csv")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(args) => cmd_gen_corpus(args),
        Command::Train(args) => cmd_train(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::LengthAnalysis(args) => cmd_length_analysis(args),
    };
    if let Err(e) = result {
        let kind = match &e {
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        };
        eprintln!(
            "{}",
            serde_json::json!({ "error": { "kind": kind, "message": e.to_string() } })
        );
        std::process::exit(1);
    }
}

/// Relative paths land in $SUTA_OUT_DIR (default: cwd).
fn out_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("SUTA_OUT_DIR") {
        Some(dir) => PathBuf::from(dir).join(path),
        None => path.to_path_buf(),
    }
}

fn parse_tagged_corpus(spec: &str) -> Result<(String, Vec<Utterance>), Error> {
    let (tag, path) = spec.split_once('=').ok_or_else(|| {
        Error::Contract(format!("corpus '{spec}' must be tag=path"))
    })?;
    Ok((tag.to_string(), load_corpus(Path::new(path))?))
}

fn parse_methods(names: &[String]) -> Result<Vec<AdaptMethod>, Error> {
    names.iter().map(|n| AdaptMethod::from_str(n)).collect()
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    std::fs::write(path, contents)?;
    Ok(())
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<(), Error> {
    let spec = CorpusSpec {
        utterances: args.utterances,
        feature_dim: args.feature_dim,
        words_min: args.words_min,
        words_max: args.words_max,
        word_chars_min: args.word_chars_min,
        word_chars_max: args.word_chars_max,
        frames_per_char: args.frames_per_char,
        template_jitter: args.jitter,
        noise_delta: args.noise_delta,
        avoid_repeats: args.avoid_repeats,
        template_seed: args.template_seed,
        seed: args.seed,
    };
    let corpus = generate_corpus(&spec)?;
    let out = out_path(&args.out);
    save_corpus(&out, &corpus)?;
    if let Some(sidecar) = &args.transcripts {
        save_transcript_sidecar(&out_path(sidecar), &corpus)?;
    }
    println!("wrote {} utterances to {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let corpus = load_corpus(&args.corpus)?;
    let config = ModelConfig {
        feature_dim: args.feature_dim,
        conv_layers: args.conv_layers,
        kernel_width: args.kernel_width,
        conv_channels: args.conv_channels,
        conv_stride: args.conv_stride,
        encoder_blocks: args.encoder_blocks,
        encoder_hidden: args.encoder_hidden,
        seed: args.seed,
        ..Default::default()
    };
    let mut model = ModelState::init(&config)?;
    let losses = train_source(&mut model, &corpus, args.epochs, args.lr)?;

    let mut log = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        log.push_str(&format!("{epoch},{}\n", fmt_float(*loss)));
    }

    let holdout_wer = match &args.holdout {
        Some(path) => {
            let holdout = load_corpus(path)?;
            let eval = AdaptConfig { method: AdaptMethod::None, ..Default::default() };
            let outcome = run_method(&model, &holdout, &eval, 1)?;
            log.push_str(&format!("holdout_wer,{}\n", fmt_float(outcome.corpus_wer)));
            Some(outcome.corpus_wer)
        }
        None => None,
    };

    let model_out = out_path(&args.model_out);
    model.save(&model_out)?;
    if let Some(log_path) = &args.log {
        write_file(&out_path(log_path), &log)?;
    }
    match holdout_wer {
        Some(wer) => println!(
            "trained {} epochs, final loss {}, holdout WER {}",
            args.epochs,
            fmt_float(*losses.last().unwrap_or(&f64::NAN)),
            fmt_float(wer)
        ),
        None => println!(
            "trained {} epochs, final loss {}",
            args.epochs,
            fmt_float(*losses.last().unwrap_or(&f64::NAN))
        ),
    }
    println!("checkpoint: {}", model_out.display());
    Ok(())
}

fn cmd_adapt(args: AdaptArgs) -> Result<(), Error> {
    let model = ModelState::load(&args.model)?;
    let corpora: Result<Vec<_>, Error> =
        args.corpora.iter().map(|s| parse_tagged_corpus(s)).collect();
    let corpora = corpora?;
    let methods = parse_methods(&args.methods)?;
    let base = args.config.to_config(AdaptMethod::Suta)?;

    let (table, outcomes) = adapt_over_corpora(&model, &corpora, &base, &methods, args.config.jobs)?;
    table.write_csv(&out_path(&args.out))?;
    if let Some(json) = &args.json {
        table.write_json(&out_path(json))?;
    }
    if let Some(curves) = &args.curves {
        let entries: Vec<_> = outcomes
            .iter()
            .map(|((tag, method), outcome)| {
                let mut cfg = base.clone();
                cfg.method = AdaptMethod::from_str(method).expect("methods validated");
                if cfg.method == AdaptMethod::Sdpl {
                    cfg.partition = ParamPartition::Ln;
                }
                (tag.clone(), cfg, outcome.clone())
            })
            .collect();
        write_file(&out_path(curves), &curves_csv(&entries))?;
    }
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let model = ModelState::load(&args.model)?;
    let (tag, corpus) = parse_tagged_corpus(&args.corpus)?;
    let base = args.config.to_config(AdaptMethod::Suta)?;
    let partitions: Result<Vec<_>, Error> = args
        .partitions
        .iter()
        .map(|p| ParamPartition::from_str(p))
        .collect();
    let axes = SweepAxes {
        alphas: args.alphas.clone(),
        temperatures: args.temperatures.clone(),
        iterations: args.iters_list.clone(),
        partitions: partitions?,
        methods: parse_methods(&args.methods)?,
    };

    let (table, outcomes) = sweep(&model, &tag, &corpus, &base, &axes, args.config.jobs)?;
    table.write_csv(&out_path(&args.out))?;
    if let Some(curves) = &args.curves {
        let entries: Vec<_> = outcomes
            .iter()
            .map(|(cfg, outcome)| (tag.clone(), cfg.clone(), outcome.clone()))
            .collect();
        write_file(&out_path(curves), &curves_csv(&entries))?;
    }
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_length_analysis(args: LengthAnalysisArgs) -> Result<(), Error> {
    let model = ModelState::load(&args.model)?;
    let (_, corpus) = parse_tagged_corpus(&args.corpus)?;
    let method = AdaptMethod::from_str(&args.method)?;
    if method == AdaptMethod::None {
        return Err(Error::Contract(
            "length analysis compares an adaptation method against the baseline; \
             --method none is the baseline itself"
                .into(),
        ));
    }
    let baseline_cfg = AdaptConfig {
        method: AdaptMethod::None,
        ..args.config.to_config(AdaptMethod::Suta)?
    };
    let adapted_cfg = args.config.to_config(method)?;

    let baseline = run_method(&model, &corpus, &baseline_cfg, args.config.jobs)?;
    let adapted = run_method(&model, &corpus, &adapted_cfg, args.config.jobs)?;
    let rows = length_analysis(&baseline, &adapted, args.threshold)?;
    let csv = buckets_csv(&rows);
    write_file(&out_path(&args.out), &csv)?;
    print!("{csv}");
    Ok(())
}
