use crate::error::{HtrError, Result};

pub const LINE_HEIGHT: usize = 64;

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(HtrError::InputContract(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates; outside is 0.
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let at = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                0.0
            } else {
                self.get(yy as usize, xx as usize)
            }
        };
        at(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + at(y0, x0 + 1.0) * (1.0 - fy) * fx
            + at(y0 + 1.0, x0) * fy * (1.0 - fx)
            + at(y0 + 1.0, x0 + 1.0) * fy * fx
    }
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(img.width - 1);
            let top = img.get(y0, x0) * (1.0 - tx) + img.get(y0, x1) * tx;
            let bot = img.get(y1, x0) * (1.0 - tx) + img.get(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    GrayImage {
        height,
        width,
        data: out,
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Maps the 5th/95th intensity percentiles to 0/1 (clamped), then scales to
/// `LINE_HEIGHT` rows keeping the aspect ratio.
pub fn preprocess(raw: &GrayImage) -> Result<GrayImage> {
    if raw.height == 0 || raw.width == 0 {
        return Err(HtrError::Empty(format!("{}x{} image", raw.height, raw.width)));
    }
    let mut sorted = raw.data.clone();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, 0.05), percentile(&sorted, 0.95));
    let data = if hi - lo > 1e-12 {
        raw.data.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; raw.data.len()]
    };
    let normalized = GrayImage { data, ..*raw };
    let width = ((raw.width * LINE_HEIGHT) as f64 / raw.height as f64).round().max(1.0) as usize;
    Ok(resize_bilinear(&normalized, LINE_HEIGHT, width))
}
