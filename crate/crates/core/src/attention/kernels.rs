//! Row kernels for monotonic and chunkwise attention, plus tape ops wrapping
//! them with hand-derived vector-Jacobian products.

use seqhtr_tensor::{CustomOp, Graph, Tensor, Var};

use crate::error::{HtrError, Result};

/// Expected monotonic alignment for one row.
///
/// `q_0 = prev_0`, `q_j = (1 - p_{j-1}) q_{j-1} + prev_j`, `alpha_j = p_j q_j`.
pub fn monotonic_row(p: &[f64], prev: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    let mut q = 0.0;
    for j in 0..p.len() {
        q = if j == 0 { prev[0] } else { (1.0 - p[j - 1]) * q + prev[j] };
        out[j] = p[j] * q;
    }
    out
}

fn monotonic_row_backward(p: &[f64], prev: &[f64], g: &[f64], gp: &mut [f64], gprev: Option<&mut [f64]>) {
    let m = p.len();
    let mut q = vec![0.0; m];
    for j in 0..m {
        q[j] = if j == 0 { prev[0] } else { (1.0 - p[j - 1]) * q[j - 1] + prev[j] };
    }
    let mut gq_next = 0.0;
    let mut gq = vec![0.0; m];
    for j in (0..m).rev() {
        let carry = if j + 1 < m { gq_next } else { 0.0 };
        gq[j] = g[j] * p[j] + carry * (1.0 - p[j]);
        gp[j] += g[j] * q[j] - carry * q[j];
        gq_next = gq[j];
    }
    if let Some(ga) = gprev {
        for (d, s) in ga.iter_mut().zip(&gq) {
            *d += s;
        }
    }
}

/// Chunkwise redistribution for one row over its first `len` positions:
/// `beta_j = E_j * sum_{k=j}^{j+w-1} alpha_k / sum_{l=k-w+1}^{k} E_l` with
/// `E = exp(u - max u)` and windows truncated at the row start. A window of
/// one returns `alpha` unchanged.
pub fn chunkwise_row(alpha: &[f64], u: &[f64], len: usize, w: usize) -> Vec<f64> {
    let m = alpha.len();
    let mut beta = vec![0.0; m];
    if w == 1 {
        beta[..len].copy_from_slice(&alpha[..len]);
        return beta;
    }
    if len == 0 {
        return beta;
    }
    let (e, _, r) = chunk_terms(alpha, u, len, w);
    for j in 0..len {
        let hi = (j + w).min(len);
        beta[j] = e[j] * r[j..hi].iter().sum::<f64>();
    }
    beta
}

fn chunk_terms(alpha: &[f64], u: &[f64], len: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mx = u[..len].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u[..len].iter().map(|v| (v - mx).exp()).collect();
    let mut d = vec![0.0; len];
    let mut r = vec![0.0; len];
    for k in 0..len {
        let lo = (k + 1).saturating_sub(w);
        d[k] = e[lo..=k].iter().sum();
        r[k] = alpha[k] / d[k];
    }
    (e, d, r)
}

fn chunkwise_row_backward(
    alpha: &[f64],
    u: &[f64],
    len: usize,
    w: usize,
    g: &[f64],
    galpha: Option<&mut [f64]>,
    gu: Option<&mut [f64]>,
) {
    if w == 1 {
        if let Some(ga) = galpha {
            ga[..len].iter_mut().zip(g).for_each(|(d, s)| *d += s);
        }
        return;
    }
    if len == 0 {
        return;
    }
    let (e, d, r) = chunk_terms(alpha, u, len, w);
    // gR_k = sum_{j=k-w+1..k} g_j E_j
    let mut gr = vec![0.0; len];
    for k in 0..len {
        let lo = (k + 1).saturating_sub(w);
        gr[k] = (lo..=k).map(|j| g[j] * e[j]).sum();
    }
    if let Some(ga) = galpha {
        for k in 0..len {
            ga[k] += gr[k] / d[k];
        }
    }
    if let Some(gu) = gu {
        let gd: Vec<f64> = (0..len).map(|k| -gr[k] * alpha[k] / (d[k] * d[k])).collect();
        for l in 0..len {
            let hi = (l + w).min(len);
            let s: f64 = r[l..hi].iter().sum();
            let ge = g[l] * s + gd[l..hi].iter().sum::<f64>();
            gu[l] += ge * e[l];
        }
    }
}

fn check_pair(g: &Graph, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(HtrError::InputContract(format!("{what}: shapes {sa:?} and {sb:?}")));
    }
    Ok((sa[0], sa[1]))
}

struct MonotonicOp {
    m: usize,
}

impl CustomOp for MonotonicOp {
    fn name(&self) -> &'static str {
        "monotonic_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_output: &[f64], input_grads: &mut [Option<Vec<f64>>]) {
        let (p, prev) = (inputs[0].data(), inputs[1].data());
        let m = self.m;
        let rows = p.len() / m.max(1);
        let (gp_all, rest) = input_grads.split_at_mut(1);
        let mut scratch = vec![0.0; m];
        for r in 0..rows {
            let span = r * m..(r + 1) * m;
            let gp: &mut [f64] = match gp_all[0].as_mut() {
                Some(v) => &mut v[span.clone()],
                None => {
                    scratch.iter_mut().for_each(|x| *x = 0.0);
                    &mut scratch
                }
            };
            let gprev = rest[0].as_mut().map(|v| &mut v[span.clone()]);
            monotonic_row_backward(&p[span.clone()], &prev[span.clone()], &grad_output[span], gp, gprev);
        }
    }
}

/// Expected monotonic alignment for `p, prev: [B, M]`.
pub fn monotonic_attention(g: &mut Graph, p: Var, prev: Var) -> Result<Var> {
    let (b, m) = check_pair(g, p, prev, "monotonic_attention")?;
    let (pv, av) = (g.value(p).data(), g.value(prev).data());
    let mut out = Vec::with_capacity(b * m);
    for r in 0..b {
        out.extend(monotonic_row(&pv[r * m..(r + 1) * m], &av[r * m..(r + 1) * m]));
    }
    let t = Tensor::new(vec![b, m], out)?;
    Ok(g.custom(&[p, prev], t, Box::new(MonotonicOp { m })))
}

struct ChunkwiseOp {
    m: usize,
    w: usize,
    lengths: Vec<usize>,
}

impl CustomOp for ChunkwiseOp {
    fn name(&self) -> &'static str {
        "chunkwise_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_output: &[f64], input_grads: &mut [Option<Vec<f64>>]) {
        let (alpha, u) = (inputs[0].data(), inputs[1].data());
        let m = self.m;
        let (ga_all, gu_all) = input_grads.split_at_mut(1);
        for (r, &len) in self.lengths.iter().enumerate() {
            let span = r * m..(r + 1) * m;
            chunkwise_row_backward(
                &alpha[span.clone()],
                &u[span.clone()],
                len,
                self.w,
                &grad_output[span.clone()],
                ga_all[0].as_mut().map(|v| &mut v[span.clone()]),
                gu_all[0].as_mut().map(|v| &mut v[span.clone()]),
            );
        }
    }
}

/// Chunkwise attention weights for `alpha, u: [B, M]` with per-row valid
/// lengths and window `w >= 1`.
pub fn chunkwise_attention(g: &mut Graph, alpha: Var, u: Var, lengths: &[usize], w: usize) -> Result<Var> {
    let (b, m) = check_pair(g, alpha, u, "chunkwise_attention")?;
    if w == 0 {
        return Err(HtrError::Config("chunk window must be at least 1".into()));
    }
    if lengths.len() != b || lengths.iter().any(|&l| l > m) {
        return Err(HtrError::InputContract(format!("lengths {lengths:?} for [{b}, {m}]")));
    }
    let (av, uv) = (g.value(alpha).data(), g.value(u).data());
    let mut out = Vec::with_capacity(b * m);
    for (r, &len) in lengths.iter().enumerate() {
        out.extend(chunkwise_row(&av[r * m..(r + 1) * m], &uv[r * m..(r + 1) * m], len, w));
    }
    let t = Tensor::new(vec![b, m], out)?;
    Ok(g.custom(
        &[alpha, u],
        t,
        Box::new(ChunkwiseOp {
            m,
            w,
            lengths: lengths.to_vec(),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic_extremes() {
        let prev = [1.0, 0.0, 0.0];
        assert_eq!(monotonic_row(&[1.0; 3], &prev), vec![1.0, 0.0, 0.0]);
        assert_eq!(monotonic_row(&[0.0; 3], &prev), vec![0.0; 3]);
    }

    #[test]
    fn chunk_window_one_is_identity() {
        let a = [0.1, 0.5, 0.2, 0.0];
        let u = [3.0, -1.0, 0.5, 2.0];
        assert_eq!(chunkwise_row(&a, &u, 4, 1), a.to_vec());
    }

    #[test]
    fn chunk_uniform_energies_spread_equally() {
        let a = [0.0, 0.0, 0.9, 0.0];
        let b = chunkwise_row(&a, &[0.0; 4], 4, 3);
        for v in &b[..3] {
            assert!((v - 0.3).abs() < 1e-12);
        }
        assert_eq!(b[3], 0.0);
    }
}
