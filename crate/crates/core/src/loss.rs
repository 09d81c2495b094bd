//! Sequence losses: cross-entropy over decoder steps, CTC over encoder
//! frames, and their convex combination.

use serde::{Deserialize, Serialize};
use seqhtr_tensor::{CustomOp, Graph, Tensor, Var};

use crate::error::{HtrError, Result};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub ctc_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            ctc_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.lambda > 0.0 && !self.ctc_enabled {
            return Err(HtrError::Config("lambda > 0 requires ctc_enabled".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(HtrError::Config(format!("lambda {lambda} outside [0, 1]")))
    }
}

/// `lambda * ctc + (1 - lambda) * ce`.
pub fn hybrid_loss(ctc: f64, ce: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * ctc + (1.0 - lambda) * ce)
}

/// Graph form of [`hybrid_loss`]; a `None` component must carry zero weight.
pub fn hybrid_loss_var(g: &mut Graph, ctc: Option<Var>, ce: Option<Var>, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    match (ctc, ce) {
        (Some(c), Some(e)) => {
            let a = g.scale(c, lambda);
            let b = g.scale(e, 1.0 - lambda);
            Ok(g.add(a, b)?)
        }
        (Some(c), None) if lambda == 1.0 => Ok(c),
        (None, Some(e)) if lambda == 0.0 => Ok(e),
        _ => Err(HtrError::Config(format!(
            "lambda {lambda} needs both loss components"
        ))),
    }
}

/// Summed over steps, averaged over items.
///
/// `step_probs[t]` is `[B, classes]`; `targets[b]` holds class ids for
/// positions `1..`, i.e. without sos and ending with eos.
pub fn cross_entropy(g: &mut Graph, step_probs: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    let Some(&first) = step_probs.first() else {
        return Err(HtrError::Empty("no decoder steps".into()));
    };
    let batch = g.shape(first)[0];
    if targets.len() != batch {
        return Err(HtrError::InputContract(format!(
            "{} targets for batch of {batch}",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.len() > step_probs.len() || t.is_empty()) {
        return Err(HtrError::InputContract(format!(
            "target of length {} against {} decoder steps",
            t.len(),
            step_probs.len()
        )));
    }
    let mut terms = Vec::with_capacity(step_probs.len());
    for (t, &p) in step_probs.iter().enumerate() {
        let tg = targets.iter().map(|row| row.get(t).copied()).collect();
        terms.push(g.nll_probs(p, tg, PROB_FLOOR)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / batch as f64))
}

// ── CTC ─────────────────────────────────────────────────────────────

/// Fewest frames able to emit `label`: one per symbol plus a separating
/// blank between each pair of equal neighbours.
pub fn ctc_required_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// Negative log-likelihood of `label` under `log_probs` (`frames x classes`,
/// rows already log-normalized) and its gradient with respect to the
/// logits that produced those rows.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    label: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    assert_eq!(log_probs.len(), frames * classes, "log_probs size");
    assert!(blank < classes && label.iter().all(|&c| c < classes && c != blank));
    let required = ctc_required_frames(label);
    if frames < required.max(1) {
        return Err(HtrError::LabelTooLong {
            label_len: label.len(),
            required: required.max(1),
            frames,
        });
    }
    let s_len = 2 * label.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { label[s / 2] })
        .collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| log_probs[t * classes + ext[s]];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { ninf };
            let c = if skip_ok(s) { prev[s - 2] } else { ninf };
            cur[s] = lse3(a, b, c) + lp(t, s);
        }
    }
    let last = (frames - 1) * s_len;
    let ll = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let a = next[s];
            let b = if s + 1 < s_len { next[s + 1] } else { ninf };
            let c = if s + 2 < s_len && skip_ok(s + 2) { next[s + 2] } else { ninf };
            cur[s] = lse3(a, b, c) + lp(t, s);
        }
    }

    let mut grad = vec![0.0; frames * classes];
    let mut occ = vec![ninf; classes];
    for t in 0..frames {
        occ.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, s);
            occ[ext[s]] = lse2(occ[ext[s]], v);
        }
        for k in 0..classes {
            let p = log_probs[t * classes + k].exp();
            let gamma = (occ[k] - ll).exp();
            grad[t * classes + k] = p - gamma;
        }
    }
    Ok((-ll, grad))
}

struct CtcOp {
    grads: Vec<f64>,
    per_item: usize,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_output: &[f64], input_grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = input_grads[0].as_mut() {
            for (b, &go) in grad_output.iter().enumerate() {
                let span = b * self.per_item..(b + 1) * self.per_item;
                for (d, s) in gx[span.clone()].iter_mut().zip(&self.grads[span]) {
                    *d += go * s;
                }
            }
        }
    }
}

pub struct CtcOutput {
    /// Mean negative log-likelihood over the items that were evaluated.
    pub loss: Var,
    /// Per item; `None` for skipped items.
    pub per_item: Vec<Option<f64>>,
    /// Batch positions whose label cannot fit into their frame count.
    pub skipped: Vec<usize>,
}

/// CTC loss of `logits: [B, M, classes]` (raw, un-normalized) against
/// `labels`, with item `b` using only its first `lengths[b]` frames.
pub fn ctc_loss(g: &mut Graph, logits: Var, lengths: &[usize], labels: &[Vec<usize>], blank: usize) -> Result<CtcOutput> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != lengths.len() || shape[0] != labels.len() {
        return Err(HtrError::InputContract(format!(
            "ctc logits {shape:?} with {} lengths and {} labels",
            lengths.len(),
            labels.len()
        )));
    }
    let (batch, m, classes) = (shape[0], shape[1], shape[2]);
    if blank >= classes || labels.iter().flatten().any(|&c| c >= classes || c == blank) {
        return Err(HtrError::InputContract(format!(
            "label ids must lie in 0..{classes} excluding blank {blank}"
        )));
    }
    let per = m * classes;
    let x = g.value(logits).data();
    let mut grads = vec![0.0; batch * per];
    let mut losses = vec![0.0; batch];
    let mut per_item = Vec::with_capacity(batch);
    let mut skipped = Vec::new();
    for b in 0..batch {
        let frames = lengths[b].min(m);
        let mut lp = x[b * per..b * per + frames * classes].to_vec();
        for row in lp.chunks_mut(classes) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= z);
        }
        match ctc_forward_backward(&lp, frames, classes, &labels[b], blank) {
            Ok((nll, gr)) => {
                losses[b] = nll;
                grads[b * per..b * per + frames * classes].copy_from_slice(&gr);
                per_item.push(Some(nll));
            }
            Err(HtrError::LabelTooLong { .. }) => {
                per_item.push(None);
                skipped.push(b);
            }
            Err(e) => return Err(e),
        }
    }
    let evaluated = batch - skipped.len();
    if evaluated == 0 {
        return Err(HtrError::LabelTooLong {
            label_len: labels.iter().map(Vec::len).max().unwrap_or(0),
            required: labels.iter().map(|l| ctc_required_frames(l)).max().unwrap_or(0),
            frames: lengths.iter().copied().max().unwrap_or(0),
        });
    }
    let items = g.custom(
        &[logits],
        Tensor::from_vec(losses),
        Box::new(CtcOp { grads, per_item: per }),
    );
    let weights = per_item
        .iter()
        .map(|p| if p.is_some() { 1.0 / evaluated as f64 } else { 0.0 })
        .collect();
    let weighted = g.mul_const(items, weights)?;
    let loss = g.sum_all(weighted);
    Ok(CtcOutput {
        loss,
        per_item,
        skipped,
    })
}
