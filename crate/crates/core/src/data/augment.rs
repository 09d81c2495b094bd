use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::GrayImage;
use super::LineSample;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Independent probability of each transform.
    pub probability: f64,
    pub grid_spacing: usize,
    pub grid_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            grid_spacing: 32,
            grid_sigma: 2.0,
        }
    }
}

fn morph(img: &GrayImage, pick: fn(f64, f64) -> f64) -> GrayImage {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut v = img.get(y, x);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    v = pick(v, img.get(yy, xx));
                }
            }
            out.data[y * w + x] = v;
        }
    }
    out
}

/// 3x3 grey-level dilation (ink grows).
pub fn dilate3x3(img: &GrayImage) -> GrayImage {
    morph(img, f64::max)
}

/// 3x3 grey-level erosion (ink shrinks).
pub fn erode3x3(img: &GrayImage) -> GrayImage {
    morph(img, f64::min)
}

/// Warps `img` by jittering a regular control grid with Gaussian offsets and
/// interpolating the displacement field bilinearly.
pub fn grid_distort<R: Rng + ?Sized>(img: &GrayImage, spacing: usize, sigma: f64, rng: &mut R) -> GrayImage {
    let (h, w) = (img.height, img.width);
    let gy = (h.saturating_sub(1)).div_ceil(spacing) + 1;
    let gx = (w.saturating_sub(1)).div_ceil(spacing) + 1;
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let offsets: Vec<(f64, f64)> = (0..gy * gx).map(|_| (n.sample(rng), n.sample(rng))).collect();
    let s = spacing as f64;
    let mut out = GrayImage::zeros(h, w);
    for y in 0..h {
        let cy = y as f64 / s;
        let (i0, ty) = (cy.floor() as usize, cy.fract());
        let i1 = (i0 + 1).min(gy - 1);
        for x in 0..w {
            let cx = x as f64 / s;
            let (j0, tx) = (cx.floor() as usize, cx.fract());
            let j1 = (j0 + 1).min(gx - 1);
            let lerp = |f: fn(&(f64, f64)) -> f64| {
                let a = f(&offsets[i0 * gx + j0]) * (1.0 - tx) + f(&offsets[i0 * gx + j1]) * tx;
                let b = f(&offsets[i1 * gx + j0]) * (1.0 - tx) + f(&offsets[i1 * gx + j1]) * tx;
                a * (1.0 - ty) + b * ty
            };
            let dy = lerp(|o| o.0);
            let dx = lerp(|o| o.1);
            out.data[y * w + x] = img.sample(y as f64 + dy, x as f64 + dx);
        }
    }
    out
}

/// Applies dilation, erosion and grid distortion, each independently with
/// the configured probability.
pub fn augment_with(img: &GrayImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> GrayImage {
    let draws = [
        rng.gen::<f64>() < cfg.probability,
        rng.gen::<f64>() < cfg.probability,
        rng.gen::<f64>() < cfg.probability,
    ];
    let mut out = img.clone();
    if draws[0] {
        out = dilate3x3(&out);
    }
    if draws[1] {
        out = erode3x3(&out);
    }
    if draws[2] {
        out = grid_distort(&out, cfg.grid_spacing, cfg.grid_sigma, rng);
    }
    out
}

pub fn augment(sample: &LineSample, seed: u64) -> LineSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LineSample {
        image: augment_with(&sample.image, &AugmentConfig::default(), &mut rng),
        ..sample.clone()
    }
}
