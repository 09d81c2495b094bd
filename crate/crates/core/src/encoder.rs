//! Convolutional + bidirectional-LSTM encoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use seqhtr_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::alphabet::Alphabet;
use crate::error::{HtrError, Result};
use crate::layers::{constant, mask_to_f64, sequence_mask, xavier, Dense};

/// One convolution or max-pool layer; kernel and stride are `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        kernel: (usize, usize),
        stride: (usize, usize),
        filters: usize,
    },
    Pool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
}

impl LayerSpec {
    pub fn stride(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv { stride, .. } | LayerSpec::Pool { stride, .. } => stride,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv { kernel, stride, filters } => {
                write!(f, "C{}x{}/{}x{}[{}]", kernel.0, kernel.1, stride.0, stride.1, filters)
            }
            LayerSpec::Pool { kernel, stride } => {
                write!(f, "P{}x{}/{}x{}", kernel.0, kernel.1, stride.0, stride.1)
            }
        }
    }
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('x')?;
    let (a, b) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
    (a > 0 && b > 0).then_some((a, b))
}

impl FromStr for LayerSpec {
    type Err = HtrError;

    /// `C<ky>x<kx>/<sy>x<sx>[<filters>]` or `P<ky>x<kx>/<sy>x<sx>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || HtrError::Config(format!("bad layer spec {s:?}"));
        let s = s.trim();
        let (kind, rest) = s.split_at(s.chars().next().map_or(0, char::len_utf8));
        match kind {
            "C" => {
                let (geom, filters) = rest.strip_suffix(']').and_then(|r| r.split_once('[')).ok_or_else(bad)?;
                let (k, st) = geom.split_once('/').ok_or_else(bad)?;
                let filters: usize = filters.parse().map_err(|_| bad())?;
                if filters == 0 {
                    return Err(bad());
                }
                Ok(LayerSpec::Conv {
                    kernel: parse_pair(k).ok_or_else(bad)?,
                    stride: parse_pair(st).ok_or_else(bad)?,
                    filters,
                })
            }
            "P" => {
                let (k, st) = rest.split_once('/').ok_or_else(bad)?;
                Ok(LayerSpec::Pool {
                    kernel: parse_pair(k).ok_or_else(bad)?,
                    stride: parse_pair(st).ok_or_else(bad)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Ordered layer stack, written as space-separated layer specs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvStack(pub Vec<LayerSpec>);

impl Default for ConvStack {
    fn default() -> Self {
        "C6x4/4x2[8] C6x4/1x1[32] P4x2/4x2 C3x3/1x1[64] P1x2/1x2"
            .parse()
            .expect("default stack")
    }
}

impl FromStr for ConvStack {
    type Err = HtrError;

    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty() && *t != "->")
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(ConvStack(layers))
    }
}

impl fmt::Display for ConvStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

impl Serialize for ConvStack {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ConvStack {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub conv_stack: ConvStack,
    pub blstm_units: usize,
    pub blstm_layers: usize,
    /// Output depth `o`; `None` sizes the head for CTC (characters + blank).
    pub output_channels: Option<usize>,
    pub dropout: f64,
    pub input_height: usize,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_stack: ConvStack::default(),
            blstm_units: 256,
            blstm_layers: 3,
            output_channels: None,
            dropout: 0.5,
            input_height: 64,
            leaky_slope: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn width_subsampling(&self) -> usize {
        self.conv_stack.0.iter().map(|l| l.stride().1).product()
    }

    /// Sequence length produced for an input of the given width.
    pub fn output_length(&self, width: usize) -> usize {
        self.conv_stack.0.iter().fold(width, |w, l| w.div_ceil(l.stride().1))
    }

    /// Depth of the column vectors fed to the recurrent stack.
    pub fn column_depth(&self) -> Result<usize> {
        let mut h = self.input_height;
        let mut c = 1;
        for l in &self.conv_stack.0 {
            h = h.div_ceil(l.stride().0);
            if let LayerSpec::Conv { filters, .. } = l {
                c = *filters;
            }
        }
        Ok(h * c)
    }

    pub fn resolved_output_channels(&self, alphabet: &Alphabet) -> usize {
        self.output_channels.unwrap_or(alphabet.ctc_classes())
    }

    pub fn validate(&self, ctc_enabled: bool, alphabet: &Alphabet) -> Result<()> {
        if self.conv_stack.0.is_empty() {
            return Err(HtrError::Config("encoder.conv_stack is empty".into()));
        }
        if !self.conv_stack.0.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
            return Err(HtrError::Config("encoder.conv_stack needs a convolution".into()));
        }
        if self.blstm_units == 0 {
            return Err(HtrError::Config("encoder.blstm_units must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HtrError::Config("encoder.dropout must lie in [0, 1)".into()));
        }
        let o = self.resolved_output_channels(alphabet);
        if o == 0 {
            return Err(HtrError::Config("encoder.output_channels must be positive".into()));
        }
        if ctc_enabled && o != alphabet.ctc_classes() {
            return Err(HtrError::Config(format!(
                "CTC needs {} output channels (characters + blank), got {o}",
                alphabet.ctc_classes()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    /// Xavier weights, zero biases except the forget gate at 1.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Ok(Self {
            w_ih: xavier(store, rng, format!("{prefix}/w_ih"), &[input, 4 * hidden], input, 4 * hidden)?,
            w_hh: xavier(store, rng, format!("{prefix}/w_hh"), &[hidden, 4 * hidden], hidden, 4 * hidden)?,
            b: store.add(format!("{prefix}/b"), Tensor::from_vec(bias))?,
            hidden,
        })
    }

    /// One step given the already projected input `x W_ih + b`; returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_hh = g.param(store, self.w_hh);
        let rec = g.matmul(h, w_hh)?;
        let z = g.add(x_proj, rec)?;
        let hc = g.lstm_cell(z, c)?;
        let h = g.slice_last(hc, 0, self.hidden)?;
        let c = g.slice_last(hc, self.hidden, self.hidden)?;
        Ok((h, c))
    }

    pub fn project_input(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w_ih);
        let b = g.param(store, self.b);
        let p = g.matmul(x, w)?;
        Ok(g.add_bias(p, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct BlstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

fn run_direction(
    g: &mut Graph,
    store: &ParamStore,
    p: &LstmParams,
    x: Var,
    lengths: &[usize],
    reverse: bool,
) -> Result<Vec<Var>> {
    let (b, m) = (g.shape(x)[0], g.shape(x)[1]);
    let proj = p.project_input(g, store, x)?;
    let zero = g.constant(Tensor::zeros(&[b, p.hidden]));
    let (mut h, mut c) = (zero, zero);
    let mut outs = vec![zero; m];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..m).rev()) } else { Box::new(0..m) };
    for t in order {
        let valid: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
        let xt = g.time_step(proj, t)?;
        let (hn, cn) = p.step(g, store, xt, h, c)?;
        if valid.iter().all(|&v| v) {
            (h, c) = (hn, cn);
            outs[t] = hn;
        } else {
            h = g.select_rows(valid.clone(), hn, h)?;
            c = g.select_rows(valid.clone(), cn, c)?;
            outs[t] = g.select_rows(valid, hn, zero)?;
        }
    }
    Ok(outs)
}

/// Bidirectional layer over `x: [B, M, F]`; returns the sum of both
/// directions' hidden states, `[B, M, H]`, zero beyond each item's length.
/// The backward direction starts at each item's last valid position.
pub fn blstm_layer(g: &mut Graph, store: &ParamStore, p: &BlstmParams, x: Var, lengths: &[usize]) -> Result<Var> {
    let f = run_direction(g, store, &p.fwd, x, lengths, false)?;
    let r = run_direction(g, store, &p.bwd, x, lengths, true)?;
    let fs = g.stack_time(&f)?;
    let rs = g.stack_time(&r)?;
    Ok(g.add(fs, rs)?)
}

/// Encoder output for a batch.
#[derive(Clone, Debug)]
pub struct EncodedFeatures {
    /// `[B, M, o]`, zero at padded positions.
    pub features: Var,
    pub lengths: Vec<usize>,
    /// `o` equals characters + blank, so the features double as CTC logits.
    pub ctc_compatible: bool,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        kernel: ParamId,
        bias: ParamId,
        stride: (usize, usize),
    },
    Pool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    layers: Vec<Layer>,
    blstm: Vec<BlstmParams>,
    head: Dense,
    output_channels: usize,
    ctc_compatible: bool,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig, alphabet: &Alphabet) -> Result<Self> {
        cfg.validate(false, alphabet)?;
        let mut layers = Vec::new();
        let mut channels = 1;
        for (i, spec) in cfg.conv_stack.0.iter().enumerate() {
            layers.push(match *spec {
                LayerSpec::Conv { kernel, stride, filters } => {
                    let (ky, kx) = kernel;
                    let fan = ky * kx;
                    let k = xavier(
                        store,
                        rng,
                        format!("encoder/conv{i}/kernel"),
                        &[ky, kx, channels, filters],
                        fan * channels,
                        fan * filters,
                    )?;
                    let b = constant(store, format!("encoder/conv{i}/bias"), &[filters], 0.0)?;
                    channels = filters;
                    Layer::Conv {
                        kernel: k,
                        bias: b,
                        stride,
                    }
                }
                LayerSpec::Pool { kernel, stride } => Layer::Pool { kernel, stride },
            });
        }
        let mut input = cfg.column_depth()?;
        let mut blstm = Vec::new();
        for l in 0..cfg.blstm_layers {
            let h = cfg.blstm_units;
            blstm.push(BlstmParams {
                fwd: LstmParams::new(store, rng, &format!("encoder/blstm{l}/fwd"), input, h)?,
                bwd: LstmParams::new(store, rng, &format!("encoder/blstm{l}/bwd"), input, h)?,
            });
            input = h;
        }
        let o = cfg.resolved_output_channels(alphabet);
        let head = Dense::new(store, rng, "encoder/out", input, o)?;
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            blstm,
            head,
            output_channels: o,
            ctc_compatible: o == alphabet.ctc_classes(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn output_channels(&self) -> usize {
        self.output_channels
    }

    pub fn ctc_compatible(&self) -> bool {
        self.ctc_compatible
    }

    pub fn blstm_params(&self) -> &[BlstmParams] {
        &self.blstm
    }

    /// Encodes `images: [B, H, W, 1]` whose item `b` occupies the first
    /// `widths[b]` columns.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: Var,
        widths: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<EncodedFeatures> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[3] != 1 {
            return Err(HtrError::InputContract(format!("images must be [B, H, W, 1], got {s:?}")));
        }
        if s[1] != self.cfg.input_height {
            return Err(HtrError::InputContract(format!(
                "image height {} but the encoder expects {}",
                s[1], self.cfg.input_height
            )));
        }
        if widths.len() != s[0] || widths.iter().any(|&w| w == 0 || w > s[2]) {
            return Err(HtrError::InputContract(format!("widths {widths:?} for images {s:?}")));
        }
        let mut widths = widths.to_vec();
        let mut x = mask_columns(g, images, &widths)?;
        let slope = self.cfg.leaky_slope;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { kernel, bias, stride } => {
                    let k = g.param(store, kernel);
                    let b = g.param(store, bias);
                    let y = g.conv2d(x, k, b, stride)?;
                    x = g.leaky_relu(y, slope);
                    widths.iter_mut().for_each(|w| *w = w.div_ceil(stride.1));
                }
                Layer::Pool { kernel, stride } => {
                    x = g.maxpool2d(x, kernel, stride)?;
                    widths.iter_mut().for_each(|w| *w = w.div_ceil(stride.1));
                }
            }
            x = mask_columns(g, x, &widths)?;
        }
        let mut seq = g.columns_to_sequence(x)?;
        let m = g.shape(seq)[1];
        let keep = mask_to_f64(&sequence_mask(&widths, m));
        for p in &self.blstm {
            let y = blstm_layer(g, store, p, seq, &widths)?;
            seq = g.dropout(y, self.cfg.dropout, train, rng)?;
        }
        let out = self.head.forward(g, store, seq)?;
        let o = self.output_channels;
        let features = g.mul_const(out, keep.iter().flat_map(|&k| std::iter::repeat(k).take(o)).collect())?;
        Ok(EncodedFeatures {
            features,
            lengths: widths,
            ctc_compatible: self.ctc_compatible,
        })
    }
}

/// Zeroes columns at or beyond each item's width in `[B, H, W, C]`.
fn mask_columns(g: &mut Graph, x: Var, widths: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if widths.iter().all(|&v| v >= w) {
        return Ok(x);
    }
    let mut mask = Vec::with_capacity(b * h * w * c);
    for &valid in widths.iter().take(b) {
        for _ in 0..h {
            for col in 0..w {
                let v = if col < valid { 1.0 } else { 0.0 };
                mask.extend(std::iter::repeat(v).take(c));
            }
        }
    }
    Ok(g.mul_const(x, mask)?)
}

/// Removes repeats, then blanks.
pub fn ctc_collapse(frames: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &f in frames {
        if Some(f) != prev && f != blank {
            out.push(f);
        }
        prev = Some(f);
    }
    out
}

/// Per-item best-path decoding of CTC-compatible features.
pub fn greedy_ctc_output(features: &Tensor, enc: &EncodedFeatures, alphabet: &Alphabet) -> Result<Vec<String>> {
    if !enc.ctc_compatible {
        return Err(HtrError::InputContract("encoder head is not CTC-compatible".into()));
    }
    let s = features.shape();
    let (m, o) = (s[1], s[2]);
    Ok(enc
        .lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let frames: Vec<usize> = (0..len.min(m))
                .map(|t| {
                    let row = &features.data()[(b * m + t) * o..(b * m + t + 1) * o];
                    argmax(row)
                })
                .collect();
            alphabet.decode(&ctc_collapse(&frames, alphabet.blank_id()))
        })
        .collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_spec_round_trip() {
        let s = ConvStack::default();
        assert_eq!(s.to_string(), "C6x4/4x2[8] C6x4/1x1[32] P4x2/4x2 C3x3/1x1[64] P1x2/1x2");
        assert_eq!(s.to_string().parse::<ConvStack>().unwrap(), s);
        assert!("C6x4[8]".parse::<LayerSpec>().is_err());
        assert!("X1x1/1x1".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn default_geometry() {
        let c = EncoderConfig::default();
        assert_eq!(c.width_subsampling(), 8);
        assert_eq!(c.column_depth().unwrap(), 256);
        assert_eq!(c.output_length(256), 32);
    }

    #[test]
    fn collapse_rule() {
        assert_eq!(ctc_collapse(&[0, 0, 2, 1], 2), vec![0, 1]);
        assert_eq!(ctc_collapse(&[2, 2], 2), Vec::<usize>::new());
        assert_eq!(ctc_collapse(&[0, 2, 0], 2), vec![0, 0]);
    }
}
