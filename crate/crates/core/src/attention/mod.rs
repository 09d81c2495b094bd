//! Attention over encoded feature sequences: scoring functions, the seven
//! weighting mechanisms, positional encodings and the context summary.

mod kernels;
mod positional;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use seqhtr_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub use kernels::{chunkwise_attention, chunkwise_row, monotonic_attention, monotonic_row};
pub use positional::sinusoid_table;

use crate::error::{HtrError, Result};
use crate::layers::{constant, mask_to_f64, sequence_mask, xavier, Dense};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Content,
    Penalized,
    Location,
    Monotonic,
    Chunkwise,
    HybridMonotonic,
    HybridChunkwise,
}

impl Mechanism {
    pub const ALL: [Mechanism; 7] = [
        Mechanism::Content,
        Mechanism::Penalized,
        Mechanism::Location,
        Mechanism::Monotonic,
        Mechanism::Chunkwise,
        Mechanism::HybridMonotonic,
        Mechanism::HybridChunkwise,
    ];

    pub fn is_monotonic(self) -> bool {
        matches!(
            self,
            Mechanism::Monotonic | Mechanism::Chunkwise | Mechanism::HybridMonotonic | Mechanism::HybridChunkwise
        )
    }

    pub fn is_chunkwise(self) -> bool {
        matches!(self, Mechanism::Chunkwise | Mechanism::HybridChunkwise)
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, Mechanism::HybridMonotonic | Mechanism::HybridChunkwise)
    }

    /// Weights form a distribution over valid positions at every step.
    pub fn is_normalized(self) -> bool {
        matches!(self, Mechanism::Content | Mechanism::Penalized | Mechanism::Location)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreForm {
    Standard,
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreStyle {
    Bahdanau,
    Luong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEncoding {
    None,
    Sinusoid,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    pub score_form: ScoreForm,
    pub score_style: ScoreStyle,
    pub attention_dim: usize,
    pub chunk_window: usize,
    pub location_kernel: usize,
    pub location_filters: usize,
    pub positional_encoding: PositionalEncoding,
    pub max_positions: usize,
    pub summary_dim: usize,
    /// Standard deviation of Gaussian noise added to monotonic energies
    /// during training; 0 disables it.
    pub energy_noise: f64,
    /// Initial value of the scalar offset `r` of normalized scoring.
    pub score_offset_init: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::HybridMonotonic,
            score_form: ScoreForm::Normalized,
            score_style: ScoreStyle::Bahdanau,
            attention_dim: 128,
            chunk_window: 3,
            location_kernel: 7,
            location_filters: 20,
            positional_encoding: PositionalEncoding::None,
            max_positions: 512,
            summary_dim: 128,
            energy_noise: 0.0,
            score_offset_init: -1.0,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HtrError::Config(m.to_string()));
        if self.chunk_window == 0 {
            return bad("attention.chunk_window must be >= 1");
        }
        if self.attention_dim == 0 || self.summary_dim == 0 {
            return bad("attention dimensions must be positive");
        }
        if self.location_kernel == 0 || self.location_filters == 0 {
            return bad("location convolution must have a positive kernel and filter count");
        }
        if self.score_style == ScoreStyle::Luong {
            if self.score_form == ScoreForm::Normalized {
                return bad("normalized scoring is defined for the bahdanau style only");
            }
            if self.mechanism.is_hybrid() {
                return bad("hybrid mechanisms need bahdanau scoring");
            }
        }
        if self.energy_noise < 0.0 {
            return bad("attention.energy_noise must be >= 0");
        }
        Ok(())
    }
}

/// Additive scorer `v' tanh(W_s s + W_h h + [W_f f] + b) [+ r]` with
/// `v' = v` or `g v / |v|`.
#[derive(Clone, Debug)]
struct Bahdanau {
    w_s: ParamId,
    w_h: ParamId,
    b: ParamId,
    v: ParamId,
    gain: Option<ParamId>,
    offset: Option<ParamId>,
    location: Option<LocationFeatures>,
}

#[derive(Clone, Debug)]
struct LocationFeatures {
    kernel: ParamId,
    bias: ParamId,
    w_f: ParamId,
}

#[derive(Clone, Debug)]
enum Scorer {
    Bahdanau(Bahdanau),
    Luong { w: ParamId },
}

#[derive(Clone, Debug)]
pub struct Attention {
    cfg: AttentionConfig,
    memory_dim: usize,
    state_dim: usize,
    scorer: Option<Scorer>,
    chunk_scorer: Option<Bahdanau>,
    window: Option<Dense>,
    summary: Dense,
    pe_table: Option<ParamId>,
}

/// Per-sequence attention inputs, with projections cached once.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    /// `[B, M, o]` encoder features with positional encodings added.
    pub h: Var,
    pub lengths: Vec<usize>,
    pub mask: Vec<bool>,
    proj: Option<Var>,
    chunk_proj: Option<Var>,
}

impl AttentionMemory {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn positions(&self) -> usize {
        if self.lengths.is_empty() {
            0
        } else {
            self.mask.len() / self.lengths.len()
        }
    }

    /// Repeats a single-item memory `k` times.
    pub fn replicate(&self, g: &mut Graph, k: usize) -> Result<Self> {
        if self.batch() != 1 {
            return Err(HtrError::InputContract("replicate expects a batch of one".into()));
        }
        let rep = |g: &mut Graph, v: Var| -> Result<Var> {
            let s = g.shape(v).to_vec();
            let flat = g.reshape(v, &[1, s[1] * s[2]])?;
            let r = g.repeat_rows(flat, k)?;
            Ok(g.reshape(r, &[k, s[1], s[2]])?)
        };
        Ok(Self {
            h: rep(g, self.h)?,
            lengths: vec![self.lengths[0]; k],
            mask: self.mask.repeat(k),
            proj: self.proj.map(|p| rep(g, p)).transpose()?,
            chunk_proj: self.chunk_proj.map(|p| rep(g, p)).transpose()?,
        })
    }
}

/// Mechanism carry-over between decoding steps.
#[derive(Clone, Debug)]
pub struct AttentionState {
    /// `[B, M]`; for chunkwise mechanisms this is the monotonic alignment.
    pub prev_weights: Var,
    /// `[B, M]`, `ln sum_{i<t} exp(e_i)` for penalized attention.
    pub log_accumulator: Option<Var>,
    /// `[B, 1]` window centre for location attention.
    pub kappa: Option<Var>,
    pub step: usize,
}

impl AttentionState {
    /// Gathers the given rows, e.g. the parents of surviving beam entries.
    pub fn select(&self, g: &mut Graph, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            prev_weights: g.embedding(self.prev_weights, rows)?,
            log_accumulator: self.log_accumulator.map(|v| g.embedding(v, rows)).transpose()?,
            kappa: self.kappa.map(|v| g.embedding(v, rows)).transpose()?,
            step: self.step,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[B, M]` weights used to form the context.
    pub weights: Var,
    /// `[B, o]`.
    pub context: Var,
    /// `[B, summary_dim]`, `tanh(dense([c; s]))`.
    pub summary: Var,
}

fn bahdanau<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cfg: &AttentionConfig,
    memory_dim: usize,
    state_dim: usize,
    hybrid: bool,
) -> Result<Bahdanau> {
    let a = cfg.attention_dim;
    let normalized = cfg.score_form == ScoreForm::Normalized;
    let location = if hybrid {
        let (k, f) = (cfg.location_kernel, cfg.location_filters);
        Some(LocationFeatures {
            kernel: xavier(store, rng, format!("{prefix}/loc_conv/kernel"), &[k, 1, f], k, k * f)?,
            bias: constant(store, format!("{prefix}/loc_conv/bias"), &[f], 0.0)?,
            w_f: xavier(store, rng, format!("{prefix}/w_f"), &[f, a], f, a)?,
        })
    } else {
        None
    };
    Ok(Bahdanau {
        w_s: xavier(store, rng, format!("{prefix}/w_s"), &[state_dim, a], state_dim, a)?,
        w_h: xavier(store, rng, format!("{prefix}/w_h"), &[memory_dim, a], memory_dim, a)?,
        b: constant(store, format!("{prefix}/b"), &[a], 0.0)?,
        v: xavier(store, rng, format!("{prefix}/v"), &[a, 1], a, 1)?,
        gain: normalized
            .then(|| constant(store, format!("{prefix}/g"), &[1], 1.0 / (a as f64).sqrt()))
            .transpose()?,
        offset: normalized
            .then(|| constant(store, format!("{prefix}/r"), &[1], cfg.score_offset_init))
            .transpose()?,
        location,
    })
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &AttentionConfig,
        memory_dim: usize,
        state_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mech = cfg.mechanism;
        let scorer = match (mech, cfg.score_style) {
            (Mechanism::Location, _) => None,
            (_, ScoreStyle::Luong) => Some(Scorer::Luong {
                w: xavier(store, rng, "attention/score/w".into(), &[state_dim, memory_dim], state_dim, memory_dim)?,
            }),
            (_, ScoreStyle::Bahdanau) => Some(Scorer::Bahdanau(bahdanau(
                store,
                rng,
                "attention/score",
                cfg,
                memory_dim,
                state_dim,
                mech.is_hybrid(),
            )?)),
        };
        let chunk_scorer = if mech.is_chunkwise() {
            let plain = AttentionConfig {
                score_form: ScoreForm::Standard,
                ..cfg.clone()
            };
            Some(bahdanau(store, rng, "attention/chunk", &plain, memory_dim, state_dim, false)?)
        } else {
            None
        };
        let window = if mech == Mechanism::Location {
            Some(Dense::new(store, rng, "attention/window", state_dim, 2)?)
        } else {
            None
        };
        let summary = Dense::new(store, rng, "attention/summary", memory_dim + state_dim, cfg.summary_dim)?;
        let pe_table = if cfg.positional_encoding == PositionalEncoding::Learned {
            let (p, o) = (cfg.max_positions, memory_dim);
            Some(xavier(store, rng, "attention/positions".into(), &[p, o], p, o)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            memory_dim,
            state_dim,
            scorer,
            chunk_scorer,
            window,
            summary,
            pe_table,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn summary_dim(&self) -> usize {
        self.cfg.summary_dim
    }

    /// Adds the configured positional encoding to `h: [B, M, o]`.
    pub fn positional_encoding(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.memory_dim {
            return Err(HtrError::InputContract(format!("features {s:?}, expected depth {}", self.memory_dim)));
        }
        let (b, m, o) = (s[0], s[1], s[2]);
        match self.cfg.positional_encoding {
            PositionalEncoding::None => Ok(h),
            PositionalEncoding::Sinusoid => {
                let table = sinusoid_table(m, o);
                let tiled = Tensor::new(vec![b, m, o], table.data().repeat(b))?;
                let pe = g.constant(tiled);
                Ok(g.add(h, pe)?)
            }
            PositionalEncoding::Learned => {
                if m > self.cfg.max_positions {
                    return Err(HtrError::InputContract(format!(
                        "sequence of {m} positions exceeds the {} learned positional encodings",
                        self.cfg.max_positions
                    )));
                }
                let table = g.param(store, self.pe_table.expect("learned table"));
                let ids: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
                let rows = g.embedding(table, &ids)?;
                let pe = g.reshape(rows, &[b, m, o])?;
                Ok(g.add(h, pe)?)
            }
        }
    }

    /// Prepares encoder features for attention: positional encoding plus
    /// the step-independent projections `W_h h`.
    pub fn prepare(&self, g: &mut Graph, store: &ParamStore, features: Var, lengths: &[usize]) -> Result<AttentionMemory> {
        let h = self.positional_encoding(g, store, features)?;
        let (b, m) = (g.shape(h)[0], g.shape(h)[1]);
        if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > m) {
            return Err(HtrError::InputContract(format!("lengths {lengths:?} for {b} sequences of {m}")));
        }
        let project = |g: &mut Graph, sc: &Bahdanau| -> Result<Var> {
            let w = g.param(store, sc.w_h);
            Ok(g.matmul(h, w)?)
        };
        let proj = match &self.scorer {
            Some(Scorer::Bahdanau(sc)) => Some(project(g, sc)?),
            _ => None,
        };
        let chunk_proj = self.chunk_scorer.as_ref().map(|sc| project(g, sc)).transpose()?;
        Ok(AttentionMemory {
            h,
            lengths: lengths.to_vec(),
            mask: sequence_mask(lengths, m),
            proj,
            chunk_proj,
        })
    }

    pub fn initial_state(&self, g: &mut Graph, mem: &AttentionMemory) -> AttentionState {
        let (b, m) = (mem.batch(), mem.positions());
        let mut onehot = vec![0.0; b * m];
        for r in 0..b {
            onehot[r * m] = 1.0;
        }
        let prev_weights = g.constant(Tensor::new(vec![b, m], onehot).expect("shape"));
        let kappa = (self.cfg.mechanism == Mechanism::Location).then(|| g.constant(Tensor::zeros(&[b, 1])));
        AttentionState {
            prev_weights,
            log_accumulator: None,
            kappa,
            step: 0,
        }
    }

    fn bahdanau_score(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sc: &Bahdanau,
        proj: Var,
        s: Var,
        prev: Option<Var>,
    ) -> Result<Var> {
        let (b, m, a) = {
            let sh = g.shape(proj);
            (sh[0], sh[1], sh[2])
        };
        let w_s = g.param(store, sc.w_s);
        let bias = g.param(store, sc.b);
        let sp = g.matmul(s, w_s)?;
        let sp = g.add_bias(sp, bias)?;
        let sp = g.repeat_rows(sp, m)?;
        let mut pre = g.add(proj, sp)?;
        if let Some(loc) = &sc.location {
            let prev = prev.ok_or_else(|| HtrError::InputContract("hybrid score needs previous weights".into()))?;
            let f_in = g.reshape(prev, &[b, m, 1])?;
            let k = g.param(store, loc.kernel);
            let kb = g.param(store, loc.bias);
            let f = g.conv1d(f_in, k, kb)?;
            let w_f = g.param(store, loc.w_f);
            let fp = g.matmul(f, w_f)?;
            pre = g.add(pre, fp)?;
        }
        let t = g.tanh(pre);
        let mut v = g.param(store, sc.v);
        if let Some(gain) = sc.gain {
            let gain = g.param(store, gain);
            let norm = g.norm2(v);
            let inv = g.recip(norm);
            let scaled = g.mul_scalar(v, gain)?;
            v = g.mul_scalar(scaled, inv)?;
        }
        let e = g.matmul(t, v)?;
        let mut e = g.reshape(e, &[b, m])?;
        debug_assert_eq!(a, g.shape(v)[0]);
        if let Some(r) = sc.offset {
            let r = g.param(store, r);
            e = g.add_scalar_var(e, r)?;
        }
        Ok(e)
    }

    /// Raw energies `e_t: [B, M]` of the main scorer.
    pub fn score(&self, g: &mut Graph, store: &ParamStore, mem: &AttentionMemory, s: Var, prev: Option<Var>) -> Result<Var> {
        let ss = g.shape(s);
        if ss.len() != 2 || ss[1] != self.state_dim || ss[0] != mem.batch() {
            return Err(HtrError::Tensor(seqhtr_tensor::TensorError::Shape {
                op: "attention score",
                detail: format!("state {:?}, expected [{}, {}]", ss, mem.batch(), self.state_dim),
            }));
        }
        match &self.scorer {
            Some(Scorer::Bahdanau(sc)) => self.bahdanau_score(g, store, sc, mem.proj.expect("projection"), s, prev),
            Some(Scorer::Luong { w }) => {
                let w = g.param(store, *w);
                let q = g.matmul(s, w)?;
                Ok(g.batch_dot(mem.h, q)?)
            }
            None => Err(HtrError::Config("location attention has no content scorer".into())),
        }
    }

    /// One attention step for decoder state `s: [B, state_dim]`.
    pub fn attend<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &AttentionMemory,
        s: Var,
        state: &AttentionState,
        train: bool,
        rng: &mut R,
    ) -> Result<(Attended, AttentionState)> {
        let mech = self.cfg.mechanism;
        let mut next = AttentionState {
            step: state.step + 1,
            ..state.clone()
        };
        let weights = match mech {
            Mechanism::Content => {
                let e = self.score(g, store, mem, s, None)?;
                content_weights(g, e, &mem.mask)?
            }
            Mechanism::Penalized => {
                let e = self.score(g, store, mem, s, None)?;
                let (w, acc) = penalized_weights(g, e, state.log_accumulator, &mem.mask)?;
                next.log_accumulator = Some(acc);
                w
            }
            Mechanism::Location => {
                let dense = self.window.as_ref().expect("window layer");
                let raw = dense.forward(g, store, s)?;
                let pos = g.exp(raw);
                let dk = g.slice_last(pos, 0, 1)?;
                let sigma = g.slice_last(pos, 1, 1)?;
                let kappa = g.add(state.kappa.expect("kappa"), dk)?;
                next.kappa = Some(kappa);
                location_weights(g, kappa, sigma, &mem.mask)?
            }
            _ => {
                let mut e = self.score(g, store, mem, s, Some(state.prev_weights))?;
                if train && self.cfg.energy_noise > 0.0 {
                    let n = Normal::new(0.0, self.cfg.energy_noise).expect("finite std");
                    let shape = g.shape(e).to_vec();
                    let noise: Vec<f64> = (0..shape.iter().product()).map(|_| n.sample(rng)).collect();
                    let nv = g.constant(Tensor::new(shape, noise)?);
                    e = g.add(e, nv)?;
                }
                let p = g.sigmoid(e);
                let p = g.mul_const(p, mask_to_f64(&mem.mask))?;
                let alpha = monotonic_attention(g, p, state.prev_weights)?;
                next.prev_weights = alpha;
                if mech.is_chunkwise() {
                    let sc = self.chunk_scorer.as_ref().expect("chunk scorer");
                    let u = self.bahdanau_score(g, store, sc, mem.chunk_proj.expect("chunk projection"), s, None)?;
                    chunkwise_attention(g, alpha, u, &mem.lengths, self.cfg.chunk_window)?
                } else {
                    alpha
                }
            }
        };
        if !mech.is_monotonic() {
            next.prev_weights = weights;
        }
        let attended = self.context(g, store, mem, weights, s)?;
        Ok((attended, next))
    }

    /// `c = sum_j w_j h_j` and `c_bar = tanh(dense([c; s]))`.
    pub fn context(&self, g: &mut Graph, store: &ParamStore, mem: &AttentionMemory, weights: Var, s: Var) -> Result<Attended> {
        let context = g.weighted_sum(weights, mem.h)?;
        let cs = g.concat(&[context, s])?;
        let z = self.summary.forward(g, store, cs)?;
        let summary = g.tanh(z);
        Ok(Attended {
            weights,
            context,
            summary,
        })
    }
}

/// Masked softmax of the energies.
pub fn content_weights(g: &mut Graph, e: Var, mask: &[bool]) -> Result<Var> {
    Ok(g.softmax(e, Some(mask))?)
}

/// `alpha = e' / sum e'` with `e' = exp(e) / sum_{i<t} exp(e_i)`, computed
/// as a masked softmax of `e - ln A`. Returns the weights and the updated
/// log-accumulator.
pub fn penalized_weights(g: &mut Graph, e: Var, log_acc: Option<Var>, mask: &[bool]) -> Result<(Var, Var)> {
    match log_acc {
        None => Ok((g.softmax(e, Some(mask))?, e)),
        Some(acc) => {
            let shifted = g.sub(e, acc)?;
            let w = g.softmax(shifted, Some(mask))?;
            let acc = g.log_add_exp(acc, e)?;
            Ok((w, acc))
        }
    }
}

/// Gaussian window weights `exp(-(j - kappa)^2 / (2 sigma^2))`, normalized
/// over valid positions; `kappa, sigma: [B, 1]`.
pub fn location_weights(g: &mut Graph, kappa: Var, sigma: Var, mask: &[bool]) -> Result<Var> {
    let b = g.shape(kappa)[0];
    let m = mask.len() / b.max(1);
    let grid: Vec<f64> = (0..b).flat_map(|_| (0..m).map(|j| j as f64)).collect();
    let grid = g.constant(Tensor::new(vec![b, m], grid)?);
    let neg = g.scale(kappa, -1.0);
    let d = g.add_col(grid, neg)?;
    let sq = g.mul(d, d)?;
    let var = g.mul(sigma, sigma)?;
    let inv = g.recip(var);
    let z = g.mul_col(sq, inv)?;
    let z = g.scale(z, -0.5);
    Ok(g.softmax(z, Some(mask))?)
}
