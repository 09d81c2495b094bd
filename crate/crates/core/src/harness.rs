//! Training loop, evaluation and recognition.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqhtr_tensor::{adam_step, clip_gradients, AdamState, Graph, Tensor};

use crate::alphabet::Alphabet;
use crate::config::lr_schedule;
use crate::data::{load_image, preprocess, AugmentConfig, Batch, BatchConfig, EpochPlan, LineSample};
use crate::decoder::class_targets;
use crate::encoder::{argmax, greedy_ctc_output, EncodedFeatures};
use crate::error::{io_err, HtrError, Result};
use crate::loss::{cross_entropy, ctc_loss, hybrid_loss_var};
use crate::metrics::{corpus_cer, EvalReport};
use crate::model::{ModelKind, Recognizer};
use crate::search::{beam_search, greedy_search, SearchResult};
use crate::session::DecodeSession;

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ctc: Option<f64>,
    pub ce: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ctc: Option<f64>,
    pub ce: Option<f64>,
    pub valid_encoder_cer: Option<f64>,
    pub valid_decoder_cer: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Number of CTC loss evaluations performed.
    pub ctc_evaluations: usize,
    /// Items skipped by CTC because their label cannot fit their frames.
    pub ctc_skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints and TSV logs go here when set.
    pub output_dir: Option<PathBuf>,
}

pub const EPOCH_LOG: &str = "train_log.tsv";
pub const STEP_LOG: &str = "steps.tsv";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x}"))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

fn mix(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64 + 1)
}

fn check_alphabet(alphabet: &Alphabet, samples: &[LineSample]) -> Result<()> {
    let mut missing: Vec<char> = samples
        .iter()
        .flat_map(|s| s.transcript.chars())
        .filter(|c| !alphabet.contains(*c))
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(HtrError::AlphabetMismatch(format!(
            "characters {missing:?} are not in the model alphabet {:?}",
            alphabet.as_string()
        )))
    }
}

/// Losses of one batch, recorded on `g`.
pub struct BatchLoss {
    pub total: seqhtr_tensor::Var,
    pub ctc: Option<f64>,
    pub ce: Option<f64>,
    pub ctc_skipped: usize,
}

/// Builds the regime's loss for `batch` on a fresh tape.
pub fn batch_loss(model: &Recognizer, g: &mut Graph, batch: &Batch, train: bool, rng: &mut ChaCha8Rng) -> Result<BatchLoss> {
    let lambda = match model.kind() {
        ModelKind::Encoder => 1.0,
        ModelKind::Seq2seq => model.config.effective_lambda(),
    };
    let images = g.constant(batch.images.clone());
    let encoder_train = train && !model.encoder_frozen();
    let enc = model.encoder.encode(g, &model.params, images, &batch.widths, encoder_train, rng)?;
    let (mut ctc, mut ce) = (None, None);
    let mut ctc_skipped = 0;
    if lambda > 0.0 {
        if !enc.ctc_compatible {
            return Err(HtrError::Config("CTC loss needs a CTC-compatible encoder head".into()));
        }
        let out = ctc_loss(g, enc.features, &enc.lengths, &batch.labels(), model.alphabet.blank_id())?;
        ctc_skipped = out.skipped.len();
        ctc = Some(out.loss);
    }
    if lambda < 1.0 {
        let decoder = model.decoder.as_ref().expect("sequence model");
        let mem = decoder.prepare(g, &model.params, enc.features, &enc.lengths)?;
        let noise = if train { model.config.training.teacher_noise } else { 0.0 };
        let unroll = decoder.teacher_forced_unroll(g, &model.params, &mem, &batch.targets, noise, train, rng)?;
        let targets = class_targets(&model.alphabet, &batch.targets)?;
        ce = Some(cross_entropy(g, &unroll.probs, &targets)?);
    }
    let total = hybrid_loss_var(g, ctc, ce, lambda)?;
    Ok(BatchLoss {
        total,
        ctc: ctc.map(|v| g.value(v).item()),
        ce: ce.map(|v| g.value(v).item()),
        ctc_skipped,
    })
}

/// Trains `model` for `config.training.epochs` epochs.
pub fn train(model: &mut Recognizer, train: &[LineSample], valid: Option<&[LineSample]>, opts: &TrainOptions) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(HtrError::Empty("training set".into()));
    }
    check_alphabet(&model.alphabet, train)?;
    if let Some(v) = valid {
        check_alphabet(&model.alphabet, v)?;
    }
    let cfg = model.config.training.clone();
    let batch_cfg = BatchConfig {
        batch_size: cfg.batch_size,
        epoch_size: cfg.epoch_size,
        bucket_width: cfg.bucket_width,
        augment: cfg.augment.then(AugmentConfig::default),
    };
    let widths: Vec<usize> = train.iter().map(|s| s.image.width).collect();
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();

    let mut step_log = None;
    let mut epoch_log = None;
    if let Some(dir) = &opts.output_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join(STEP_LOG);
        let mut f = fs::File::create(&p).map_err(io_err(&p))?;
        writeln!(f, "epoch\tstep\tlr\tctc\tce\ttotal\tgrad_norm").map_err(io_err(&p))?;
        step_log = Some((f, p));
        let p = dir.join(EPOCH_LOG);
        let mut f = fs::File::create(&p).map_err(io_err(&p))?;
        writeln!(f, "epoch\tlr\ttotal\tctc\tce\tvalid_encoder_cer\tvalid_decoder_cer\tseconds").map_err(io_err(&p))?;
        epoch_log = Some((f, p));
        model.save(&checkpoint_path(dir, model.epoch), Some(&adam))?;
    }

    let first = model.epoch + 1;
    for epoch in first..first + cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch - first + 1, &cfg);
        let plan = EpochPlan::new(&widths, &batch_cfg, mix(cfg.seed, epoch))?;
        let (mut sum_total, mut sum_ctc, mut sum_ce) = (0.0, 0.0, 0.0);
        for i in 0..plan.len() {
            let batch = plan.materialize(i, train, &model.alphabet, batch_cfg.augment.as_ref())?;
            let mut g = Graph::new();
            let loss = batch_loss(model, &mut g, &batch, true, &mut rng)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(HtrError::NonFiniteLoss {
                    epoch,
                    step: i + 1,
                    ids: batch.ids.clone(),
                });
            }
            if loss.ctc.is_some() {
                report.ctc_evaluations += 1;
            }
            if loss.ctc_skipped > 0 {
                log::warn!("epoch {epoch} step {}: {} items too long for CTC were skipped", i + 1, loss.ctc_skipped);
            }
            report.ctc_skipped += loss.ctc_skipped;
            g.backward(loss.total)?;
            g.store_param_grads(&mut model.params);
            drop(g);
            let grad_norm = if cfg.clip_norm > 0.0 {
                clip_gradients(&mut model.params, cfg.clip_norm)
            } else {
                global_norm(&model.params)
            };
            adam_step(&mut model.params, &mut adam, lr)?;
            let rec = StepRecord {
                epoch,
                step: i + 1,
                lr,
                ctc: loss.ctc,
                ce: loss.ce,
                total,
                grad_norm,
            };
            if let Some((f, p)) = step_log.as_mut() {
                writeln!(
                    f,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    rec.epoch,
                    rec.step,
                    rec.lr,
                    opt(rec.ctc),
                    opt(rec.ce),
                    rec.total,
                    rec.grad_norm
                )
                .map_err(io_err(&*p))?;
            }
            sum_total += total;
            sum_ctc += loss.ctc.unwrap_or(0.0);
            sum_ce += loss.ce.unwrap_or(0.0);
            report.steps.push(rec);
        }
        model.epoch = epoch;
        let n = plan.len() as f64;
        let (venc, vdec) = match valid {
            Some(v) if !v.is_empty() => {
                let out = evaluate(model, v, Decoding::GreedyBatch)?;
                (out.encoder.map(|r| r.cer), out.decoder.map(|r| r.cer))
            }
            _ => (None, None),
        };
        let rec = EpochRecord {
            epoch,
            lr,
            total: sum_total / n,
            ctc: report.steps.last().and_then(|s| s.ctc).map(|_| sum_ctc / n),
            ce: report.steps.last().and_then(|s| s.ce).map(|_| sum_ce / n),
            valid_encoder_cer: venc,
            valid_decoder_cer: vdec,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {:.4} ctc {} ce {} valid encoder CER {} decoder CER {} ({:.1}s)",
            rec.total,
            opt(rec.ctc),
            opt(rec.ce),
            opt(rec.valid_encoder_cer),
            opt(rec.valid_decoder_cer),
            rec.seconds
        );
        if let Some((f, p)) = epoch_log.as_mut() {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
                rec.epoch,
                rec.lr,
                rec.total,
                opt(rec.ctc),
                opt(rec.ce),
                opt(rec.valid_encoder_cer),
                opt(rec.valid_decoder_cer),
                rec.seconds
            )
            .map_err(io_err(&*p))?;
        }
        if let Some(dir) = &opts.output_dir {
            model.save(&checkpoint_path(dir, epoch), Some(&adam))?;
        }
        report.epochs.push(rec);
    }
    Ok(report)
}

fn global_norm(params: &seqhtr_tensor::ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    /// Per-line arg-max decoding.
    Greedy,
    /// Per-line beam search of the given width.
    Beam(usize),
    /// Arg-max decoding of whole batches at once (validation during training).
    GreedyBatch,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub decoder: Option<EvalReport>,
    /// Best-path CTC output of the encoder head, when it has one.
    pub encoder: Option<EvalReport>,
    pub hypotheses: Vec<Transcription>,
}

#[derive(Clone, Debug)]
pub struct Transcription {
    pub text: String,
    pub finished: bool,
    /// `T x M` attention weights, one row per emitted step.
    pub attention: Vec<Vec<f64>>,
}

/// Encodes samples in width-sorted batches; returns per-sample features
/// `[1, M_i, o]`, lengths and greedy CTC strings.
fn encode_all(model: &Recognizer, samples: &[LineSample], batch_size: usize) -> Result<Vec<(Tensor, usize, Option<String>)>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| samples[i].image.width);
    let mut out: Vec<Option<(Tensor, usize, Option<String>)>> = vec![None; samples.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in order.chunks(batch_size.max(1)) {
        let items: Vec<LineSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
        let widths: Vec<usize> = items.iter().map(|s| s.image.width).collect();
        let batch = Batch::from_samples(&items, &model.alphabet)?;
        let mut g = Graph::new();
        let images = g.constant(batch.images);
        let enc = model.encoder.encode(&mut g, &model.params, images, &widths, false, &mut rng)?;
        let feats = g.value(enc.features);
        let ctc = if enc.ctc_compatible {
            Some(greedy_ctc_output(feats, &enc, &model.alphabet)?)
        } else {
            None
        };
        let (m, o) = (feats.dim(1), feats.dim(2));
        for (k, &i) in chunk.iter().enumerate() {
            let len = enc.lengths[k];
            let data = feats.data()[k * m * o..(k * m + len) * o].to_vec();
            out[i] = Some((
                Tensor::new(vec![1, len, o], data)?,
                len,
                ctc.as_ref().map(|c| c[k].clone()),
            ));
        }
    }
    Ok(out.into_iter().map(|x| x.expect("every sample encoded")).collect())
}

/// Decodes one line's features.
pub fn decode_features(model: &Recognizer, features: Tensor, length: usize, decoding: Decoding) -> Result<Transcription> {
    let decoder = model
        .decoder
        .as_ref()
        .ok_or_else(|| HtrError::InputContract("model has no decoder".into()))?;
    let mut session = DecodeSession::new(decoder, &model.params, features, length);
    let max_steps = session.max_steps();
    let res: SearchResult = match decoding {
        Decoding::Greedy | Decoding::GreedyBatch => greedy_search(&mut session, max_steps)?,
        Decoding::Beam(w) => beam_search(&mut session, w.max(1), max_steps)?,
    };
    Ok(Transcription {
        text: model.alphabet.decode(&res.classes),
        finished: res.finished,
        attention: res.trace,
    })
}

fn greedy_batch(model: &Recognizer, samples: &[LineSample]) -> Result<Vec<String>> {
    let decoder = model.decoder.as_ref().expect("decoder");
    let mut out = vec![String::new(); samples.len()];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| samples[i].image.width);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eos = model.alphabet.len();
    for chunk in order.chunks(model.config.training.batch_size.max(1)) {
        let items: Vec<LineSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
        let batch = Batch::from_samples(&items, &model.alphabet)?;
        let mut g = Graph::new();
        let images = g.constant(batch.images.clone());
        let enc: EncodedFeatures = model.encoder.encode(&mut g, &model.params, images, &batch.widths, false, &mut rng)?;
        let mem = decoder.prepare(&mut g, &model.params, enc.features, &enc.lengths)?;
        let mut state = decoder.initial_state(&mut g, &model.params, &mem, &mut rng)?;
        let max_steps = enc.lengths.iter().map(|&l| decoder.config().max_steps(l)).max().unwrap_or(0);
        let mut tokens = vec![model.alphabet.sos_id(); chunk.len()];
        let mut done = vec![false; chunk.len()];
        let mut emitted: Vec<Vec<usize>> = vec![Vec::new(); chunk.len()];
        for t in 0..max_steps {
            let (step, next) = decoder.step(&mut g, &model.params, &mem, &tokens, &state, false, &mut rng)?;
            let probs = g.value(step.probs);
            let k = probs.last_dim();
            for r in 0..chunk.len() {
                if done[r] {
                    continue;
                }
                let c = argmax(&probs.data()[r * k..(r + 1) * k]);
                if c != eos {
                    emitted[r].push(c);
                }
                done[r] = c == eos || t + 1 >= decoder.config().max_steps(enc.lengths[r]);
                tokens[r] = model.alphabet.class_to_token(c);
            }
            state = next;
            if done.iter().all(|&d| d) {
                break;
            }
        }
        for (r, &i) in chunk.iter().enumerate() {
            out[i] = model.alphabet.decode(&emitted[r]);
        }
    }
    Ok(out)
}

/// Decoder CER (and encoder CER when a CTC head exists) over `samples`.
pub fn evaluate(model: &Recognizer, samples: &[LineSample], decoding: Decoding) -> Result<EvalOutcome> {
    check_alphabet(&model.alphabet, samples)?;
    let encoded = encode_all(model, samples, model.config.training.batch_size)?;
    let encoder = if model.encoder.ctc_compatible() {
        Some(corpus_cer(samples.iter().zip(&encoded).map(|(s, e)| {
            (s.id.clone(), e.2.clone().unwrap_or_default(), s.transcript.clone())
        }))?)
    } else {
        None
    };
    let mut hypotheses = Vec::new();
    let decoder = if model.decoder.is_some() {
        if decoding == Decoding::GreedyBatch {
            hypotheses = greedy_batch(model, samples)?
                .into_iter()
                .map(|text| Transcription {
                    text,
                    finished: true,
                    attention: Vec::new(),
                })
                .collect();
        } else {
            for (feat, len, _) in encoded {
                hypotheses.push(decode_features(model, feat, len, decoding)?);
            }
        }
        Some(corpus_cer(
            samples
                .iter()
                .zip(&hypotheses)
                .map(|(s, h)| (s.id.clone(), h.text.clone(), s.transcript.clone())),
        )?)
    } else {
        None
    };
    Ok(EvalOutcome {
        decoder,
        encoder,
        hypotheses,
    })
}

/// Transcribes one image file; optionally writes `<stem>.attn.csv` and
/// `<stem>.attn.pgm` (`M` rows by `T` columns) into `dump_dir`.
pub fn recognize_file(model: &Recognizer, path: &Path, decoding: Decoding, dump_dir: Option<&Path>) -> Result<String> {
    let raw = load_image(path)?;
    let image = preprocess(&raw)?;
    let sample = LineSample {
        image,
        transcript: String::new(),
        id: path.display().to_string(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let w = sample.image.width;
    let images = g.constant(Tensor::new(vec![1, sample.image.height, w, 1], sample.image.data)?);
    let enc = model.encoder.encode(&mut g, &model.params, images, &[w], false, &mut rng)?;
    let feats = g.value(enc.features).clone();
    if model.decoder.is_none() {
        return Ok(greedy_ctc_output(&feats, &enc, &model.alphabet)?.remove(0));
    }
    let len = enc.lengths[0];
    let t = decode_features(model, feats, len, decoding)?;
    if let Some(dir) = dump_dir {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        write_attention(dir, &stem, &t.attention, len)?;
    }
    Ok(t.text)
}

/// Writes the `M x T` attention matrix as CSV and as an 8-bit PGM.
pub fn write_attention(dir: &Path, stem: &str, steps: &[Vec<f64>], m: usize) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join(format!("{stem}.attn.csv"));
    let mut text = String::new();
    for j in 0..m {
        let row: Vec<String> = steps.iter().map(|s| format!("{}", s.get(j).copied().unwrap_or(0.0))).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&csv, text).map_err(io_err(&csv))?;
    let pgm = dir.join(format!("{stem}.attn.pgm"));
    let mut bytes = format!("P5\n{} {}\n255\n", steps.len(), m).into_bytes();
    for j in 0..m {
        for s in steps {
            bytes.push((s.get(j).copied().unwrap_or(0.0).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(&pgm, bytes).map_err(io_err(&pgm))?;
    Ok((csv, pgm))
}
