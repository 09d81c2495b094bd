//! Line images: synthesis, normalization, augmentation, batching and the
//! on-disk dataset layout.

mod augment;
mod batch;
mod dataset;
mod image;
mod synth;

pub use augment::{augment, augment_with, dilate3x3, erode3x3, grid_distort, AugmentConfig};
pub use batch::{make_batches, Batch, BatchConfig, EpochPlan};
pub use dataset::{load_dataset, load_image, read_index, save_png, write_dataset, IndexEntry, INDEX_FILE};
pub use image::{preprocess, resize_bilinear, GrayImage, LINE_HEIGHT};
pub use synth::{drawable, random_text, render_line, synth_line, FontSpec};

/// A normalized line image (ink 1, background 0) and its transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct LineSample {
    pub image: GrayImage,
    pub transcript: String,
    pub id: String,
}
