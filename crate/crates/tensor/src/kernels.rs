//! Raw slice kernels behind the differentiable ops.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `[m, k]` and
/// `op(b)` is `[k, n]`. With `trans_a` the buffer `a` holds `[k, m]`, with
/// `trans_b` the buffer `b` holds `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the row-major buffers whose lengths
    // are asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output length and leading padding for "same" padding with ceiling
/// division. The leading pad only depends on kernel and stride, so an item's
/// valid outputs never depend on how far the batch was padded.
pub fn same_geometry(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let pad = kernel.saturating_sub(stride) / 2;
    (out, pad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dGeom {
    pub fn new(
        batch: usize,
        in_h: usize,
        in_w: usize,
        in_c: usize,
        (k_h, k_w): (usize, usize),
        (s_h, s_w): (usize, usize),
    ) -> Self {
        let (out_h, pad_h) = same_geometry(in_h, k_h, s_h);
        let (out_w, pad_w) = same_geometry(in_w, k_w, s_w);
        Conv2dGeom {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            s_h,
            s_w,
            out_h,
            out_w,
            pad_h,
            pad_w,
        }
    }

    pub fn patch(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input offset for output `(oy, ox)` and kernel tap `(ky, kx)`, or `None`
    /// when the tap falls into the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.s_h + ky).checked_sub(self.pad_h)?;
        let ix = (ox * self.s_w + kx).checked_sub(self.pad_w)?;
        if iy < self.in_h && ix < self.in_w {
            Some((iy, ix))
        } else {
            None
        }
    }
}

/// NHWC image to `[B*Ho*Wo, kh*kw*C]` patch matrix.
pub fn im2col(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut col = vec![0.0; g.out_positions() * patch];
    for b in 0..g.batch {
        let xb = &x[b * g.in_h * g.in_w * g.in_c..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.k_h {
                    for kx in 0..g.k_w {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let src = (iy * g.in_w + ix) * g.in_c;
                            let dst = row + (ky * g.k_w + kx) * g.in_c;
                            col[dst..dst + g.in_c].copy_from_slice(&xb[src..src + g.in_c]);
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a patch-matrix gradient back onto the NHWC input gradient.
pub fn col2im_add(col: &[f64], g: &Conv2dGeom, gx: &mut [f64]) {
    let patch = g.patch();
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * g.in_c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.k_h {
                    for kx in 0..g.k_w {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let dst = base + (iy * g.in_w + ix) * g.in_c;
                            let src = row + (ky * g.k_w + kx) * g.in_c;
                            for c in 0..g.in_c {
                                gx[dst + c] += col[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over NHWC input. Taps outside the input read as zero, matching
/// the masked region of a padded batch. Returns the pooled values and, per
/// output element, the winning input index (`usize::MAX` for padding).
pub fn maxpool_forward(x: &[f64], g: &Conv2dGeom) -> (Vec<f64>, Vec<usize>) {
    let c_n = g.in_c;
    let n_out = g.out_positions() * c_n;
    let mut out = vec![0.0; n_out];
    let mut arg = vec![usize::MAX; n_out];
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * c_n;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * c_n;
                for c in 0..c_n {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..g.k_h {
                        for kx in 0..g.k_w {
                            let (v, i) = match g.source(oy, ox, ky, kx) {
                                Some((iy, ix)) => {
                                    let i = base + (iy * g.in_w + ix) * c_n + c;
                                    (x[i], i)
                                }
                                None => (0.0, usize::MAX),
                            };
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    out[o + c] = best;
                    arg[o + c] = best_i;
                }
            }
        }
    }
    (out, arg)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fused LSTM cell. `z` holds pre-activations `[B, 4H]` in gate order
/// input, forget, cell, output. Writes `[B, 2H]` as `[h | c]`.
pub fn lstm_cell_forward(z: &[f64], c_prev: &[f64], batch: usize, hidden: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * 2 * hidden];
    for b in 0..batch {
        let zr = &z[b * 4 * hidden..(b + 1) * 4 * hidden];
        let cp = &c_prev[b * hidden..(b + 1) * hidden];
        let (h_out, c_out) = out[b * 2 * hidden..(b + 1) * 2 * hidden].split_at_mut(hidden);
        for j in 0..hidden {
            let i = sigmoid(zr[j]);
            let f = sigmoid(zr[hidden + j]);
            let gg = zr[2 * hidden + j].tanh();
            let o = sigmoid(zr[3 * hidden + j]);
            let c = f * cp[j] + i * gg;
            c_out[j] = c;
            h_out[j] = o * c.tanh();
        }
    }
    out
}

/// Backward of [`lstm_cell_forward`]; accumulates into `gz` and `gc_prev`
/// when present.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_backward(
    z: &[f64],
    c_prev: &[f64],
    out: &[f64],
    gout: &[f64],
    batch: usize,
    hidden: usize,
    mut gz: Option<&mut [f64]>,
    mut gc_prev: Option<&mut [f64]>,
) {
    for b in 0..batch {
        let zr = &z[b * 4 * hidden..(b + 1) * 4 * hidden];
        let cp = &c_prev[b * hidden..(b + 1) * hidden];
        let o_row = &out[b * 2 * hidden..(b + 1) * 2 * hidden];
        let g_row = &gout[b * 2 * hidden..(b + 1) * 2 * hidden];
        for j in 0..hidden {
            let i = sigmoid(zr[j]);
            let f = sigmoid(zr[hidden + j]);
            let gg = zr[2 * hidden + j].tanh();
            let o = sigmoid(zr[3 * hidden + j]);
            let c = o_row[hidden + j];
            let tc = c.tanh();
            let gh = g_row[j];
            let gc = g_row[hidden + j] + gh * o * (1.0 - tc * tc);
            if let Some(gz) = gz.as_deref_mut() {
                let r = &mut gz[b * 4 * hidden..(b + 1) * 4 * hidden];
                r[j] += gc * gg * i * (1.0 - i);
                r[hidden + j] += gc * cp[j] * f * (1.0 - f);
                r[2 * hidden + j] += gc * i * (1.0 - gg * gg);
                r[3 * hidden + j] += gh * tc * o * (1.0 - o);
            }
            if let Some(gcp) = gc_prev.as_deref_mut() {
                gcp[b * hidden + j] += gc * f;
            }
        }
    }
}

/// Numerically stable `ln(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_geometry_ceil_and_pad() {
        assert_eq!(same_geometry(64, 6, 4), (16, 1));
        assert_eq!(same_geometry(256, 4, 2), (128, 1));
        assert_eq!(same_geometry(255, 4, 2), (128, 1));
        assert_eq!(same_geometry(16, 6, 1), (16, 2));
        assert_eq!(same_geometry(7, 2, 2), (4, 0));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn lstm_zero_everything_gives_zero_state() {
        let z = vec![0.0; 2 * 4 * 3];
        let c = vec![0.0; 2 * 3];
        let out = lstm_cell_forward(&z, &c, 2, 3);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
