use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqhtr::data::{load_dataset, random_text, render_line, write_dataset, FontSpec, LineSample};
use seqhtr::harness::{evaluate, recognize_file, train, Decoding, TrainOptions};
use seqhtr::{Alphabet, ExperimentConfig, ModelKind, Recognizer, Regime};

#[derive(Parser)]
#[command(name = "seqhtr", version, about = "Handwritten text line recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic line dataset.
    Synth(SynthArgs),
    /// Train a sequence model as configured.
    Train(TrainArgs),
    /// Train an encoder with the CTC head only.
    PretrainCtc(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Transcribe line images.
    Recognize(RecognizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value = "abcdefghijklmnopqrstuvwxyz ")]
    alphabet: String,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `data.output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding an index file.
    #[arg(long)]
    data: PathBuf,
    /// Beam width; 0 decodes greedily. Defaults to the checkpoint's setting.
    #[arg(long)]
    beam: Option<usize>,
    /// Per-line TSV report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RecognizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Write attention matrices as CSV and PGM into this directory.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

fn decoding(beam: Option<usize>, model: &Recognizer) -> Decoding {
    match beam.unwrap_or(model.config.decoder.beam_width) {
        0 => Decoding::Greedy,
        w => Decoding::Beam(w),
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    if args.min_len == 0 || args.min_len > args.max_len {
        bail!("need 0 < --min-len <= --max-len");
    }
    let chars: Vec<char> = args.alphabet.chars().collect();
    if chars.is_empty() {
        bail!("--alphabet is empty");
    }
    let font = FontSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut lines = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let text = random_text(&mut rng, &chars, args.min_len, args.max_len);
        let image = render_line(&text, &font, args.seed.wrapping_add(i as u64))?;
        lines.push((format!("line-{i:06}"), image, text));
    }
    let n = write_dataset(
        &args.out,
        lines.iter().map(|(id, img, text)| (id.as_str(), img, text.as_str())),
    )?;
    println!("wrote {n} lines to {}", args.out.display());
    Ok(())
}

fn load_split(path: Option<&Path>, what: &str) -> Result<Option<Vec<LineSample>>> {
    path.map(|p| load_dataset(p).with_context(|| format!("loading {what} set {}", p.display())))
        .transpose()
}

fn run_training(args: &TrainArgs, kind: ModelKind) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.output {
        config.data.output_dir = Some(out.clone());
    }
    let Some(train_set) = load_split(config.data.train.as_deref(), "training")? else {
        bail!("data.train is not set in {}", args.config.display());
    };
    let valid_set = load_split(config.data.valid.as_deref(), "validation")?;
    let alphabet = Alphabet::from_texts(train_set.iter().map(|s| s.transcript.as_str()))?;
    let mut model = match kind {
        ModelKind::Seq2seq => Recognizer::for_regime(&config, &alphabet)?,
        ModelKind::Encoder => {
            let mut check = config.clone();
            check.regime = Regime::Hybrid;
            check.loss.ctc_enabled = true;
            check.validate()?;
            Recognizer::new(&config, &alphabet, ModelKind::Encoder)?
        }
    };
    log::info!(
        "{} training lines, {} validation lines, alphabet of {} characters",
        train_set.len(),
        valid_set.as_ref().map_or(0, Vec::len),
        alphabet.len()
    );
    let opts = TrainOptions {
        output_dir: config.data.output_dir.clone(),
    };
    let report = train(&mut model, &train_set, valid_set.as_deref(), &opts)?;
    let last = report.epochs.last().context("no epochs were run")?;
    println!(
        "trained {} epochs ({} steps), final loss {:.4}",
        report.epochs.len(),
        report.steps.len(),
        last.total
    );
    if let Some(dir) = &opts.output_dir {
        println!("checkpoints in {}", dir.display());
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (model, _) = Recognizer::load(&args.checkpoint)?;
    let samples = load_dataset(&args.data)?;
    let outcome = evaluate(&model, &samples, decoding(args.beam, &model))?;
    if let Some(r) = &outcome.encoder {
        println!("encoder {}", r.summary());
    }
    if let Some(r) = &outcome.decoder {
        println!("decoder {}", r.summary());
    }
    if let Some(path) = &args.report {
        let r = outcome.decoder.as_ref().or(outcome.encoder.as_ref()).context("nothing was scored")?;
        r.save_tsv(path)?;
    }
    Ok(())
}

fn recognize(args: &RecognizeArgs) -> Result<bool> {
    let (model, _) = Recognizer::load(&args.checkpoint)?;
    let mode = decoding(args.beam, &model);
    let mut ok = true;
    for path in &args.images {
        match recognize_file(&model, path, mode, args.dump_attention.as_deref()) {
            Ok(text) => println!("{}\t{text}", path.display()),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Train(a) => run_training(a, ModelKind::Seq2seq)?,
        Command::PretrainCtc(a) => run_training(a, ModelKind::Encoder)?,
        Command::Eval(a) => eval(a)?,
        Command::Recognize(a) => return recognize(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(ToString::to_string) {
                if !msg.ends_with(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
