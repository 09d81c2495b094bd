//! Attention LSTM decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};
use seqhtr_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::alphabet::Alphabet;
use crate::attention::{Attention, AttentionConfig, AttentionMemory, AttentionState};
use crate::encoder::LstmParams;
use crate::error::{HtrError, Result};
use crate::layers::{xavier, Dense};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden_units: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub beam_width: usize,
    /// Fixed step bound; `None` means `2 M + 10` for a sequence of `M` positions.
    pub max_decode_steps: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden_units: 256,
            embedding_dim: 64,
            dropout: 0.5,
            beam_width: 16,
            max_decode_steps: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(HtrError::Config("decoder.beam_width must be >= 1".into()));
        }
        if self.hidden_units == 0 || self.embedding_dim == 0 {
            return Err(HtrError::Config("decoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HtrError::Config("decoder.dropout must lie in [0, 1)".into()));
        }
        if self.max_decode_steps == Some(0) {
            return Err(HtrError::Config("decoder.max_decode_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_steps(&self, positions: usize) -> usize {
        self.max_decode_steps.unwrap_or(2 * positions + 10)
    }
}

/// Recurrent carry between decoding steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    /// Attention summary of the previous step, fed back as input.
    pub summary: Var,
    pub attention: AttentionState,
}

impl DecoderState {
    pub fn rows(&self, g: &Graph) -> usize {
        g.shape(self.h)[0]
    }

    pub fn select(&self, g: &mut Graph, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            h: g.embedding(self.h, rows)?,
            c: g.embedding(self.c, rows)?,
            summary: g.embedding(self.summary, rows)?,
            attention: self.attention.select(g, rows)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[B, classes]` distribution over characters + eos.
    pub probs: Var,
    /// `[B, M]` attention weights of this step.
    pub weights: Var,
}

pub struct Unroll {
    /// One `[B, classes]` distribution per target position `1..T`.
    pub probs: Vec<Var>,
    /// `(step, item)` pairs whose input token was sampled instead of gold.
    pub sampled: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    alphabet: Alphabet,
    attention: Attention,
    embedding: ParamId,
    lstm: LstmParams,
    out: Dense,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &DecoderConfig,
        attention: &AttentionConfig,
        alphabet: &Alphabet,
        memory_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden_units;
        let attention = Attention::new(store, rng, attention, memory_dim, hidden)?;
        let summary = attention.summary_dim();
        let (v, e) = (alphabet.token_count(), cfg.embedding_dim);
        Ok(Self {
            cfg: cfg.clone(),
            alphabet: alphabet.clone(),
            embedding: xavier(store, rng, "decoder/embedding".into(), &[v, e], v, e)?,
            lstm: LstmParams::new(store, rng, "decoder/lstm", e + summary, hidden)?,
            out: Dense::new(store, rng, "decoder/out", hidden + summary, alphabet.decoder_classes())?,
            attention,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn attention(&self) -> &Attention {
        &self.attention
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn prepare(&self, g: &mut Graph, store: &ParamStore, features: Var, lengths: &[usize]) -> Result<AttentionMemory> {
        self.attention.prepare(g, store, features, lengths)
    }

    /// Zero LSTM state; the first summary comes from attending with a zero
    /// decoder state, whose attention update is discarded.
    pub fn initial_state<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &AttentionMemory,
        rng: &mut R,
    ) -> Result<DecoderState> {
        let b = mem.batch();
        let zero = g.constant(Tensor::zeros(&[b, self.cfg.hidden_units]));
        let attention = self.attention.initial_state(g, mem);
        let (att, _) = self.attention.attend(g, store, mem, zero, &attention, false, rng)?;
        Ok(DecoderState {
            h: zero,
            c: zero,
            summary: att.summary,
            attention,
        })
    }

    /// Consumes `prev_tokens` (one per row) and predicts the next class.
    pub fn step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &AttentionMemory,
        prev_tokens: &[usize],
        state: &DecoderState,
        train: bool,
        rng: &mut R,
    ) -> Result<(StepOutput, DecoderState)> {
        let rows = state.rows(g);
        if prev_tokens.len() != rows || mem.batch() != rows {
            return Err(HtrError::InputContract(format!(
                "{} tokens, {} memory rows, {} state rows",
                prev_tokens.len(),
                mem.batch(),
                rows
            )));
        }
        if let Some(&t) = prev_tokens.iter().find(|&&t| t >= self.alphabet.token_count()) {
            return Err(HtrError::InputContract(format!(
                "token id {t} outside vocabulary of {}",
                self.alphabet.token_count()
            )));
        }
        let table = g.param(store, self.embedding);
        let emb = g.embedding(table, prev_tokens)?;
        let x = g.concat(&[emb, state.summary])?;
        let xp = self.lstm.project_input(g, store, x)?;
        let (h, c) = self.lstm.step(g, store, xp, state.h, state.c)?;
        let s = g.dropout(h, self.cfg.dropout, train, rng)?;
        let (att, attention) = self.attention.attend(g, store, mem, s, &state.attention, train, rng)?;
        let feat = g.concat(&[s, att.summary])?;
        let logits = self.out.forward(g, store, feat)?;
        let probs = g.softmax(logits, None)?;
        Ok((
            StepOutput {
                probs,
                weights: att.weights,
            },
            DecoderState {
                h,
                c,
                summary: att.summary,
                attention,
            },
        ))
    }

    /// Runs the decoder over `targets` (token ids `sos .. eos`). With
    /// probability `noise` an item's input at step `t > 1` is sampled from
    /// its own step `t - 1` distribution instead of the gold token.
    pub fn teacher_forced_unroll<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &AttentionMemory,
        targets: &[Vec<usize>],
        noise: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Unroll> {
        if targets.len() != mem.batch() {
            return Err(HtrError::InputContract(format!(
                "{} targets for batch of {}",
                targets.len(),
                mem.batch()
            )));
        }
        let sos = self.alphabet.sos_id();
        let eos = self.alphabet.eos_id();
        for t in targets {
            if t.len() < 2 || t[0] != sos || *t.last().expect("non-empty") != eos {
                return Err(HtrError::InputContract("targets must be sos .. eos with at least eos".into()));
            }
        }
        let steps = targets.iter().map(|t| t.len() - 1).max().unwrap_or(0);
        let mut state = self.initial_state(g, store, mem, rng)?;
        let mut probs: Vec<Var> = Vec::with_capacity(steps);
        let mut sampled = Vec::new();
        for t in 0..steps {
            let mut prev = Vec::with_capacity(targets.len());
            for (b, tgt) in targets.iter().enumerate() {
                let gold = tgt.get(t).copied().unwrap_or(self.alphabet.pad_id());
                let active = t < tgt.len() - 1;
                if t > 0 && active && noise > 0.0 && rng.gen::<f64>() < noise {
                    let dist = g.value(probs[t - 1]);
                    let k = dist.last_dim();
                    let class = sample(&dist.data()[b * k..(b + 1) * k], rng);
                    prev.push(self.alphabet.class_to_token(class));
                    sampled.push((t, b));
                } else {
                    prev.push(gold);
                }
            }
            let (out, next) = self.step(g, store, mem, &prev, &state, train, rng)?;
            probs.push(out.probs);
            state = next;
        }
        Ok(Unroll { probs, sampled })
    }
}

fn sample<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &v) in p.iter().enumerate() {
        u -= v;
        if u < 0.0 {
            return i;
        }
    }
    p.len() - 1
}

/// Class targets (positions `1..`) from token targets (`sos .. eos`).
pub fn class_targets(alphabet: &Alphabet, targets: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    targets
        .iter()
        .map(|t| {
            t.iter()
                .skip(1)
                .map(|&tok| {
                    alphabet
                        .token_to_class(tok)
                        .ok_or_else(|| HtrError::InputContract(format!("token {tok} has no output class")))
                })
                .collect()
        })
        .collect()
}
