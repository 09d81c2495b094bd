use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqhtr_tensor::Tensor;

use super::augment::{augment_with, AugmentConfig};
use super::image::LINE_HEIGHT;
use super::LineSample;
use crate::alphabet::Alphabet;
use crate::error::{HtrError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub epoch_size: usize,
    pub bucket_width: usize,
    pub augment: Option<AugmentConfig>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epoch_size: 8192,
            bucket_width: 64,
            augment: Some(AugmentConfig::default()),
        }
    }
}

/// Padded mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 64, W_max, 1]`, background-padded on the right.
    pub images: Tensor,
    pub widths: Vec<usize>,
    /// Token ids `sos .. eos` per item.
    pub targets: Vec<Vec<usize>>,
    pub transcripts: Vec<String>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_samples(samples: &[LineSample], alphabet: &Alphabet) -> Result<Self> {
        if samples.is_empty() {
            return Err(HtrError::Empty("batch without samples".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.image.height != LINE_HEIGHT || s.image.width == 0) {
            return Err(HtrError::InputContract(format!(
                "sample {} is {}x{}, expected height {LINE_HEIGHT}",
                s.id, s.image.height, s.image.width
            )));
        }
        let w_max = samples.iter().map(|s| s.image.width).max().expect("non-empty");
        let b = samples.len();
        let mut data = vec![0.0; b * LINE_HEIGHT * w_max];
        for (i, s) in samples.iter().enumerate() {
            for y in 0..LINE_HEIGHT {
                let dst = (i * LINE_HEIGHT + y) * w_max;
                data[dst..dst + s.image.width].copy_from_slice(&s.image.data[y * s.image.width..(y + 1) * s.image.width]);
            }
        }
        let targets = samples
            .iter()
            .map(|s| {
                if s.transcript.is_empty() {
                    Err(HtrError::Empty(format!("sample {} has an empty transcript", s.id)))
                } else {
                    alphabet.encode_target(&s.transcript)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images: Tensor::new(vec![b, LINE_HEIGHT, w_max, 1], data)?,
            widths: samples.iter().map(|s| s.image.width).collect(),
            targets,
            transcripts: samples.iter().map(|s| s.transcript.clone()).collect(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn max_width(&self) -> usize {
        self.images.dim(2)
    }

    /// `[B, T_max]` token matrix padded with `pad`, and the row lengths.
    pub fn target_matrix(&self, pad: usize) -> (Vec<usize>, usize, Vec<usize>) {
        let t = self.targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut m = Vec::with_capacity(self.len() * t);
        for row in &self.targets {
            m.extend(row);
            m.extend(std::iter::repeat(pad).take(t - row.len()));
        }
        (m, t, self.targets.iter().map(Vec::len).collect())
    }

    /// Character ids without sos/eos, as used by CTC.
    pub fn labels(&self) -> Vec<Vec<usize>> {
        self.targets.iter().map(|t| t[1..t.len() - 1].to_vec()).collect()
    }
}

/// Composition of one epoch: per batch the sample indices and the seed of
/// each item's augmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Vec<(usize, u64)>>,
}

impl EpochPlan {
    /// Draws `epoch_size` samples with replacement, orders them by width
    /// bucket (shuffled within buckets), cuts batches and shuffles those.
    pub fn new(widths: &[usize], cfg: &BatchConfig, seed: u64) -> Result<Self> {
        if widths.is_empty() {
            return Err(HtrError::Empty("no samples to draw an epoch from".into()));
        }
        if cfg.batch_size == 0 || cfg.epoch_size == 0 || cfg.bucket_width == 0 {
            return Err(HtrError::Config("batch size, epoch size and bucket width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buckets: BTreeMap<usize, Vec<(usize, u64)>> = BTreeMap::new();
        for _ in 0..cfg.epoch_size {
            let i = rng.gen_range(0..widths.len());
            let s: u64 = rng.gen();
            buckets.entry(widths[i] / cfg.bucket_width).or_default().push((i, s));
        }
        let mut order = Vec::with_capacity(cfg.epoch_size);
        for items in buckets.values_mut() {
            items.shuffle(&mut rng);
            order.extend(items.iter().copied());
        }
        let mut batches: Vec<Vec<(usize, u64)>> = order.chunks(cfg.batch_size).map(<[_]>::to_vec).collect();
        batches.shuffle(&mut rng);
        Ok(Self { batches })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn materialize(&self, i: usize, samples: &[LineSample], alphabet: &Alphabet, augment: Option<&AugmentConfig>) -> Result<Batch> {
        let items: Vec<LineSample> = self.batches[i]
            .iter()
            .map(|&(idx, seed)| {
                let s = &samples[idx];
                match augment {
                    Some(cfg) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        LineSample {
                            image: augment_with(&s.image, cfg, &mut rng),
                            ..s.clone()
                        }
                    }
                    None => s.clone(),
                }
            })
            .collect();
        Batch::from_samples(&items, alphabet)
    }
}

/// Lazily built batches of one epoch.
pub fn make_batches<'a>(
    samples: &'a [LineSample],
    alphabet: &'a Alphabet,
    cfg: &'a BatchConfig,
    seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let widths: Vec<usize> = samples.iter().map(|s| s.image.width).collect();
    let plan = EpochPlan::new(&widths, cfg, seed)?;
    Ok((0..plan.len()).map(move |i| plan.materialize(i, samples, alphabet, cfg.augment.as_ref())))
}
