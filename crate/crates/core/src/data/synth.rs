use font8x8::{UnicodeFonts, BASIC_FONTS, LATIN_FONTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::{preprocess, GrayImage};
use super::LineSample;
use crate::error::{HtrError, Result};

/// Rendering parameters for synthetic lines built from 8x8 bitmap glyphs.
#[derive(Clone, Debug, PartialEq)]
pub struct FontSpec {
    /// Pixels per glyph cell.
    pub scale: f64,
    /// Relative per-glyph scale jitter.
    pub scale_jitter: f64,
    /// Maximum horizontal shear per glyph.
    pub shear: f64,
    /// Maximum rotation per glyph, radians.
    pub rotation: f64,
    /// Maximum vertical glyph offset, pixels.
    pub baseline_jitter: f64,
    /// Gap between glyphs, in glyph cells.
    pub spacing: f64,
    /// Maximum extra gap per glyph, pixels.
    pub spacing_jitter: f64,
    pub canvas_height: usize,
    pub margin: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for FontSpec {
    fn default() -> Self {
        Self {
            scale: 3.0,
            scale_jitter: 0.08,
            shear: 0.2,
            rotation: 0.05,
            baseline_jitter: 2.0,
            spacing: 1.0,
            spacing_jitter: 2.0,
            canvas_height: 48,
            margin: 6.0,
            noise: 0.03,
        }
    }
}

fn glyph(c: char) -> Option<[u8; 8]> {
    if c.is_control() {
        return None;
    }
    BASIC_FONTS.get(c).or_else(|| LATIN_FONTS.get(c))
}

pub fn drawable(c: char) -> bool {
    glyph(c).is_some()
}

/// Column range holding ink, or a fixed blank cell for spaces.
fn ink_columns(rows: &[u8; 8]) -> (f64, f64) {
    let bits = rows.iter().fold(0u8, |a, r| a | r);
    if bits == 0 {
        return (0.0, 4.0);
    }
    let lo = bits.trailing_zeros() as f64;
    let hi = 8.0 - bits.leading_zeros() as f64;
    (lo, hi)
}

struct Placement {
    rows: [u8; 8],
    cols: (f64, f64),
    left: f64,
    scale: f64,
    shear: f64,
    rotation: f64,
    dy: f64,
    ink: f64,
}

fn bitmap_sample(rows: &[u8; 8], v: f64, u: f64) -> f64 {
    let (v0, u0) = (v.floor(), u.floor());
    let (fv, fu) = (v - v0, u - u0);
    let at = |r: f64, c: f64| -> f64 {
        if !(0.0..8.0).contains(&r) || !(0.0..8.0).contains(&c) {
            0.0
        } else {
            ((rows[r as usize] >> c as u32) & 1) as f64
        }
    };
    at(v0, u0) * (1.0 - fv) * (1.0 - fu)
        + at(v0, u0 + 1.0) * (1.0 - fv) * fu
        + at(v0 + 1.0, u0) * fv * (1.0 - fu)
        + at(v0 + 1.0, u0 + 1.0) * fv * fu
}

/// Renders `text` left to right at the font's canvas height, ink = 1.
pub fn render_line(text: &str, font: &FontSpec, seed: u64) -> Result<GrayImage> {
    if text.is_empty() {
        return Err(HtrError::Empty("cannot render an empty transcript".into()));
    }
    let mut missing: Vec<char> = text.chars().filter(|&c| !drawable(c)).collect();
    missing.dedup();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(HtrError::Undrawable(missing));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = font.margin + rng.gen_range(0.0..=font.margin);
    let right = font.margin + rng.gen_range(0.0..=font.margin);
    let mut cursor = left;
    let mut glyphs = Vec::new();
    for c in text.chars() {
        let rows = glyph(c).expect("checked");
        let cols = ink_columns(&rows);
        let scale = font.scale * (1.0 + rng.gen_range(-font.scale_jitter..=font.scale_jitter));
        let p = Placement {
            rows,
            cols,
            left: cursor,
            scale,
            shear: rng.gen_range(-font.shear..=font.shear),
            rotation: rng.gen_range(-font.rotation..=font.rotation),
            dy: rng.gen_range(-font.baseline_jitter..=font.baseline_jitter),
            ink: rng.gen_range(0.8..=1.0),
        };
        let gap = font.spacing * font.scale + rng.gen_range(0.0..=font.spacing_jitter);
        cursor += (cols.1 - cols.0) * scale + gap;
        glyphs.push(p);
    }
    let width = (cursor + right).ceil() as usize;
    let height = font.canvas_height;
    let mut img = GrayImage::zeros(height, width);
    for p in &glyphs {
        let (lo, hi) = p.cols;
        let gw = (hi - lo) * p.scale;
        let cx = p.left + gw / 2.0;
        let cy = height as f64 / 2.0 + p.dy;
        let (sin, cos) = p.rotation.sin_cos();
        let reach = 6.0 * p.scale + 2.0;
        let x_range = ((cx - reach).floor().max(0.0) as usize)..((cx + reach).ceil().min(width as f64) as usize);
        let y_range = ((cy - reach).floor().max(0.0) as usize)..((cy + reach).ceil().min(height as f64) as usize);
        for y in y_range {
            for x in x_range.clone() {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let rx = cos * dx + sin * dy;
                let ry = -sin * dx + cos * dy;
                let rx = rx + p.shear * ry;
                let u = rx / p.scale + (lo + hi) / 2.0;
                let v = ry / p.scale + 4.0;
                let s = bitmap_sample(&p.rows, v - 0.5, u - 0.5) * p.ink;
                let px = &mut img.data[y * width + x];
                *px = px.max(s);
            }
        }
    }
    if font.noise > 0.0 {
        let n = Normal::new(0.0, font.noise).expect("finite noise");
        for v in img.data.iter_mut() {
            *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Renders and normalizes a synthetic line.
pub fn synth_line(text: &str, font: &FontSpec, seed: u64) -> Result<LineSample> {
    let raw = render_line(text, font, seed)?;
    Ok(LineSample {
        image: preprocess(&raw)?,
        transcript: text.to_string(),
        id: format!("synth-{seed}"),
    })
}

/// Random string over `chars` with length in `min..=max`, never starting
/// or ending with a space.
pub fn random_text<R: Rng + ?Sized>(rng: &mut R, chars: &[char], min: usize, max: usize) -> String {
    let len = rng.gen_range(min.max(1)..=max.max(min.max(1)));
    let inner: Vec<char> = chars.iter().copied().filter(|c| *c != ' ').collect();
    let pool = if inner.is_empty() { chars } else { &inner };
    (0..len)
        .map(|i| {
            if i == 0 || i + 1 == len {
                pool[rng.gen_range(0..pool.len())]
            } else {
                chars[rng.gen_range(0..chars.len())]
            }
        })
        .collect()
}
