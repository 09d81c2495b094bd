//! Greedy and beam search over any step-wise scorer.

use crate::error::Result;

/// A left-to-right model scoring output classes one step at a time.
///
/// States hold one row per live hypothesis; `select` builds a new state
/// from chosen rows, so siblings never share mutable carry-over.
pub trait StepModel {
    type State;

    fn classes(&self) -> usize;
    fn eos_class(&self) -> usize;
    /// Input token fed at the first step.
    fn start_token(&self) -> usize;
    /// Input token that feeds back an emitted class.
    fn class_token(&self, class: usize) -> usize;

    /// Single-row start state.
    fn initial(&mut self) -> Result<Self::State>;

    /// Consumes one input token per row; returns per-row log-probabilities
    /// over classes, a per-row trace (e.g. attention weights) and the next state.
    fn step(&mut self, state: &Self::State, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Self::State)>;

    fn select(&mut self, state: &Self::State, rows: &[usize]) -> Result<Self::State>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Emitted classes, without the final eos.
    pub classes: Vec<usize>,
    pub log_prob: f64,
    /// False if the step bound was hit before any hypothesis finished.
    pub finished: bool,
    /// Per emitted step (eos included) the model's trace row.
    pub trace: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct Hyp {
    classes: Vec<usize>,
    log_prob: f64,
    trace: Vec<Vec<f64>>,
}

/// Beam search with a finished pool and raw log-probability scores.
///
/// Each step keeps the `width` best extensions of all live hypotheses
/// (ties: lower class id, then earlier parent); extensions ending in eos
/// move to the finished pool. Search stops when no live hypothesis can
/// beat the best finished one or after `max_steps` steps.
pub fn beam_search<M: StepModel>(model: &mut M, width: usize, max_steps: usize) -> Result<SearchResult> {
    assert!(width >= 1, "beam width must be positive");
    let eos = model.eos_class();
    let mut live = vec![Hyp {
        classes: Vec::new(),
        log_prob: 0.0,
        trace: Vec::new(),
    }];
    let mut tokens = vec![model.start_token()];
    let mut state = model.initial()?;
    let mut finished: Vec<Hyp> = Vec::new();

    for _ in 0..max_steps {
        let (logp, trace, next) = model.step(&state, &tokens)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * model.classes());
        for (r, h) in live.iter().enumerate() {
            for (k, &lp) in logp[r].iter().enumerate() {
                cands.push((h.log_prob + lp, k, r));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width);

        let mut new_live = Vec::new();
        let mut rows = Vec::new();
        for &(score, k, r) in &cands {
            if score == f64::NEG_INFINITY {
                continue;
            }
            let mut h = Hyp {
                classes: live[r].classes.clone(),
                log_prob: score,
                trace: live[r].trace.clone(),
            };
            h.trace.push(trace[r].clone());
            if k == eos {
                finished.push(h);
            } else {
                h.classes.push(k);
                new_live.push(h);
                rows.push(r);
            }
        }
        live = new_live;
        let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (!finished.is_empty() && best_finished >= best_live) {
            break;
        }
        tokens = live.iter().map(|h| model.class_token(*h.classes.last().expect("extended"))).collect();
        state = model.select(&next, &rows)?;
    }

    let pick = |pool: Vec<Hyp>, done: bool| {
        pool.into_iter()
            .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
            .map(|h| SearchResult {
                classes: h.classes,
                log_prob: h.log_prob,
                finished: done,
                trace: h.trace,
            })
    };
    Ok(match pick(finished, true) {
        Some(r) => r,
        None => pick(live, false).unwrap_or(SearchResult {
            classes: Vec::new(),
            log_prob: f64::NEG_INFINITY,
            finished: false,
            trace: Vec::new(),
        }),
    })
}

/// Arg-max decoding; identical to `beam_search` with width 1.
pub fn greedy_search<M: StepModel>(model: &mut M, max_steps: usize) -> Result<SearchResult> {
    let eos = model.eos_class();
    let mut state = model.initial()?;
    let mut token = model.start_token();
    let mut out = SearchResult {
        classes: Vec::new(),
        log_prob: 0.0,
        finished: false,
        trace: Vec::new(),
    };
    for _ in 0..max_steps {
        let (logp, trace, next) = model.step(&state, &[token])?;
        let row = &logp[0];
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        out.log_prob += row[best];
        out.trace.push(trace[0].clone());
        if best == eos {
            out.finished = true;
            break;
        }
        out.classes.push(best);
        token = model.class_token(best);
        state = next;
    }
    Ok(out)
}
