//! Parameter registration helpers and the dense layer.

use rand::Rng;
use seqhtr_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

pub(crate) fn xavier<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: String,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Result<ParamId> {
    Ok(store.add(name, Tensor::xavier_uniform(shape, fan_in, fan_out, rng))?)
}

pub(crate) fn constant(store: &mut ParamStore, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
    Ok(store.add(name, Tensor::full(shape, value))?)
}

/// `x @ w + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            w: xavier(store, rng, format!("{prefix}/w"), &[input, output], input, output)?,
            b: constant(store, format!("{prefix}/b"), &[output], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }
}

/// Zero-one row mask for `[B, M]` sequences with per-item valid lengths.
pub fn sequence_mask(lengths: &[usize], m: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&l| (0..m).map(move |j| j < l))
        .collect()
}

pub(crate) fn mask_to_f64(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
}
