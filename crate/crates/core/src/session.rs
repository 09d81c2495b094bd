//! Inference-time decoding of one encoded line through [`StepModel`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqhtr_tensor::{Graph, ParamStore, Tensor};

use crate::attention::AttentionState;
use crate::decoder::{Decoder, DecoderState};
use crate::error::Result;
use crate::search::StepModel;

/// Value snapshot of a [`DecoderState`], one row per hypothesis.
#[derive(Clone, Debug)]
pub struct StateValues {
    h: Tensor,
    c: Tensor,
    summary: Tensor,
    prev_weights: Tensor,
    log_accumulator: Option<Tensor>,
    kappa: Option<Tensor>,
    step: usize,
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let n = t.last_dim();
    let mut data = Vec::with_capacity(rows.len() * n);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("gathered shape")
}

impl StateValues {
    fn capture(g: &Graph, s: &DecoderState) -> Self {
        Self {
            h: g.value(s.h).clone(),
            c: g.value(s.c).clone(),
            summary: g.value(s.summary).clone(),
            prev_weights: g.value(s.attention.prev_weights).clone(),
            log_accumulator: s.attention.log_accumulator.map(|v| g.value(v).clone()),
            kappa: s.attention.kappa.map(|v| g.value(v).clone()),
            step: s.attention.step,
        }
    }

    fn restore(&self, g: &mut Graph) -> DecoderState {
        DecoderState {
            h: g.constant(self.h.clone()),
            c: g.constant(self.c.clone()),
            summary: g.constant(self.summary.clone()),
            attention: AttentionState {
                prev_weights: g.constant(self.prev_weights.clone()),
                log_accumulator: self.log_accumulator.clone().map(|t| g.constant(t)),
                kappa: self.kappa.clone().map(|t| g.constant(t)),
                step: self.step,
            },
        }
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            h: gather(&self.h, rows),
            c: gather(&self.c, rows),
            summary: gather(&self.summary, rows),
            prev_weights: gather(&self.prev_weights, rows),
            log_accumulator: self.log_accumulator.as_ref().map(|t| gather(t, rows)),
            kappa: self.kappa.as_ref().map(|t| gather(t, rows)),
            step: self.step,
        }
    }
}

/// Decodes a single line's features `[1, M, o]`. Each step runs on a fresh
/// tape holding only the current hypotheses, so memory stays bounded.
pub struct DecodeSession<'a> {
    decoder: &'a Decoder,
    store: &'a ParamStore,
    features: Tensor,
    length: usize,
    rng: ChaCha8Rng,
}

impl<'a> DecodeSession<'a> {
    pub fn new(decoder: &'a Decoder, store: &'a ParamStore, features: Tensor, length: usize) -> Self {
        Self {
            decoder,
            store,
            features,
            length,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn positions(&self) -> usize {
        self.features.dim(1)
    }

    pub fn max_steps(&self) -> usize {
        self.decoder.config().max_steps(self.length)
    }
}

impl StepModel for DecodeSession<'_> {
    type State = StateValues;

    fn classes(&self) -> usize {
        self.decoder.alphabet().decoder_classes()
    }

    fn eos_class(&self) -> usize {
        self.decoder.alphabet().len()
    }

    fn start_token(&self) -> usize {
        self.decoder.alphabet().sos_id()
    }

    fn class_token(&self, class: usize) -> usize {
        self.decoder.alphabet().class_to_token(class)
    }

    fn initial(&mut self) -> Result<StateValues> {
        let mut g = Graph::new();
        let f = g.constant(self.features.clone());
        let mem = self.decoder.prepare(&mut g, self.store, f, &[self.length])?;
        let s = self.decoder.initial_state(&mut g, self.store, &mem, &mut self.rng)?;
        Ok(StateValues::capture(&g, &s))
    }

    fn step(&mut self, state: &StateValues, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, StateValues)> {
        let mut g = Graph::new();
        let f = g.constant(self.features.clone());
        let mut mem = self.decoder.prepare(&mut g, self.store, f, &[self.length])?;
        if tokens.len() != 1 {
            mem = mem.replicate(&mut g, tokens.len())?;
        }
        let s = state.restore(&mut g);
        let (out, next) = self.decoder.step(&mut g, self.store, &mem, tokens, &s, false, &mut self.rng)?;
        let probs = g.value(out.probs);
        let k = probs.last_dim();
        let logp = probs.data().chunks(k).map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        let w = g.value(out.weights);
        let m = w.last_dim();
        let trace = w.data().chunks(m).map(<[f64]>::to_vec).collect();
        Ok((logp, trace, StateValues::capture(&g, &next)))
    }

    fn select(&mut self, state: &StateValues, rows: &[usize]) -> Result<StateValues> {
        Ok(state.select(rows))
    }
}
