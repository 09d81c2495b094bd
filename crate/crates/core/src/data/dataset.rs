use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};

use super::image::{preprocess, GrayImage};
use super::LineSample;
use crate::error::{io_err, HtrError, Result};

pub const INDEX_FILE: &str = "lines.tsv";

/// One row of `lines.tsv`: `id <TAB> relative-path <TAB> transcript`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub path: PathBuf,
    pub transcript: String,
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    let f = fs::File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(rel), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(HtrError::Index {
                path: path.clone(),
                line: n + 1,
                message: "expected three tab-separated columns".into(),
            });
        };
        out.push(IndexEntry {
            id: id.to_string(),
            path: dir.join(rel),
            transcript: text.to_string(),
        });
    }
    Ok(out)
}

/// Reads a PNG/PGM line image stored dark-on-light and returns it with ink = 1.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| HtrError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let data = luma.pixels().map(|p| 1.0 - p.0[0] as f64 / 255.0).collect();
    GrayImage::new(h as usize, w as usize, data)
}

/// Writes an ink = 1 image as dark-on-light 8-bit grayscale (format from extension).
pub fn save_png(path: &Path, img: &GrayImage) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let v = img.get(y as usize, x as usize).clamp(0.0, 1.0);
        Luma([((1.0 - v) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| HtrError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads and preprocesses every line listed in `dir/lines.tsv`.
pub fn load_dataset(dir: &Path) -> Result<Vec<LineSample>> {
    read_index(dir)?
        .into_iter()
        .map(|e| {
            let raw = load_image(&e.path)?;
            Ok(LineSample {
                image: preprocess(&raw)?,
                transcript: e.transcript,
                id: e.id,
            })
        })
        .collect()
}

/// Writes `images/<id>.png` files and the index for `(id, raw image, transcript)` items.
pub fn write_dataset<'a>(dir: &Path, items: impl IntoIterator<Item = (&'a str, &'a GrayImage, &'a str)>) -> Result<usize> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let index = dir.join(INDEX_FILE);
    let f = fs::File::create(&index).map_err(io_err(&index))?;
    let mut w = BufWriter::new(f);
    let mut n = 0;
    for (id, img, text) in items {
        if id.contains(['\t', '\n', '/']) || text.contains(['\t', '\n']) {
            return Err(HtrError::InputContract(format!("id or transcript of {id:?} contains a separator")));
        }
        let rel = format!("images/{id}.png");
        save_png(&dir.join(&rel), img)?;
        writeln!(w, "{id}\t{rel}\t{text}").map_err(io_err(&index))?;
        n += 1;
    }
    w.flush().map_err(io_err(&index))?;
    Ok(n)
}
