//! Synthetic 2D segmentation data.
//!
//! Class 1 is a disk and, with three classes, class 2 is an axis-aligned
//! rectangle. Each shape is drawn in one of several appearance modes: mode 0
//! is a bright uniform fill, mode 1 a dark fill with a bright rim, and higher
//! modes interpolate the fill between the two. Several modes share one label,
//! which is the structure a multi-prototype head can exploit.
//!
//! Every sample is a pure function of `(spec, index)`: the generator for
//! index `i` is the ChaCha stream `i` under the dataset seed.

use std::collections::BTreeSet;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Element, Tensor};

pub const BACKGROUND_LEVEL: f32 = 0.2;
pub const BRIGHT_FILL: f32 = 0.8;
pub const DARK_FILL: f32 = 0.35;
pub const RIM_LEVEL: f32 = 0.9;
/// Rim thickness in pixels for dark-mode shapes.
pub const RIM_WIDTH: f64 = 2.0;

const MAX_SPLIT_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("sample index {index} out of range for {count} images")]
    Index { index: usize, count: usize },
    #[error("num_labeled must be in 1..={max}, got {got}")]
    NumLabeled { got: usize, max: usize },
    #[error("no labeled subset of size {num_labeled} covering all {num_classes} classes found after {MAX_SPLIT_ATTEMPTS} draws")]
    Coverage { num_labeled: usize, num_classes: usize },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub num_images: usize,
    pub num_classes: usize,
    pub modes_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_images: 200,
            num_classes: 2,
            modes_per_class: 2,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

/// Which disjoint image pool a derived spec draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(DataError::Spec(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        if self.image_size < 8 {
            return Err(DataError::Spec("image_size must be at least 8".into()));
        }
        if self.num_images == 0 {
            return Err(DataError::Spec("num_images must be at least 1".into()));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(DataError::Spec(format!(
                "num_classes must be 2 or 3, got {}",
                self.num_classes
            )));
        }
        if self.modes_per_class < 2 {
            return Err(DataError::Spec("modes_per_class must be at least 2".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(DataError::Spec(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Spec for a held-out pool of `count` images. Validation and test pools
    /// use seeds derived from the training seed, so they never share a
    /// generator stream with the training images.
    pub fn partition(&self, partition: Partition, count: usize) -> DatasetSpec {
        let seed = match partition {
            Partition::Train => self.seed,
            Partition::Validation => self.seed ^ 0x5641_4c49_4441_5445,
            Partition::Test => self.seed ^ 0x5445_5354_5345_5421,
        };
        DatasetSpec {
            num_images: count,
            seed,
            ..*self
        }
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub size: usize,
    /// `[1, H, W]` intensities.
    pub image: Vec<f32>,
    /// `[H, W]` class labels.
    pub mask: Option<Vec<u8>>,
    /// Appearance mode of each foreground class, class 1 first.
    pub modes: Vec<usize>,
}

/// Fill and rim intensity of appearance mode `m` out of `modes`.
pub fn mode_levels(m: usize, modes: usize) -> (f32, Option<f32>) {
    if m == 0 {
        return (BRIGHT_FILL, None);
    }
    let t = m as f64 / (modes - 1) as f64;
    let fill = BRIGHT_FILL as f64 + (DARK_FILL as f64 - BRIGHT_FILL as f64) * t;
    (if m == modes - 1 { DARK_FILL } else { fill as f32 }, Some(RIM_LEVEL))
}

/// Renders sample `index`. Pure in `(spec, index)`.
pub fn render_sample(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    if index >= spec.num_images {
        return Err(DataError::Index {
            index,
            count: spec.num_images,
        });
    }
    let s = spec.image_size;
    let sf = s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let mut image = vec![BACKGROUND_LEVEL; s * s];
    let mut mask = vec![0u8; s * s];
    let mut modes = Vec::new();

    // Shape parameters are drawn before the paint so the draw order is fixed.
    let rect = (spec.num_classes == 3).then(|| {
        let lo = (0.2 * sf).round() as usize;
        let hi = (0.45 * sf).round() as usize;
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let x0 = rng.gen_range(1..=s - 1 - w);
        let y0 = rng.gen_range(1..=s - 1 - h);
        let mode = rng.gen_range(0..spec.modes_per_class);
        (x0, y0, w, h, mode)
    });
    let radius = rng.gen_range(0.15 * sf..=0.3 * sf);
    let cx = rng.gen_range(radius + 1.0..=sf - radius - 1.0);
    let cy = rng.gen_range(radius + 1.0..=sf - radius - 1.0);
    let disk_mode = rng.gen_range(0..spec.modes_per_class);

    modes.push(disk_mode);
    if let Some((x0, y0, w, h, mode)) = rect {
        modes.push(mode);
        let (fill, rim) = mode_levels(mode, spec.modes_per_class);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let edge = (x - x0).min(x0 + w - 1 - x).min(y - y0).min(y0 + h - 1 - y) as f64;
                let i = y * s + x;
                mask[i] = 2;
                image[i] = match rim {
                    Some(r) if edge < RIM_WIDTH => r,
                    _ => fill,
                };
            }
        }
    }
    let (fill, rim) = mode_levels(disk_mode, spec.modes_per_class);
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            if d <= radius {
                let i = y * s + x;
                mask[i] = 1;
                image[i] = match rim {
                    Some(r) if radius - d < RIM_WIDTH => r,
                    _ => fill,
                };
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in image.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }

    Ok(Sample {
        size: s,
        image,
        mask: Some(mask),
        modes,
    })
}

pub fn render_all(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    (0..spec.num_images).map(|i| render_sample(spec, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
}

/// Uniformly draws `num_labeled` images without replacement, redrawing until
/// every class has at least one labeled pixel.
pub fn split(spec: &DatasetSpec, num_labeled: usize, split_seed: u64) -> Result<SplitIndex> {
    spec.validate()?;
    if num_labeled == 0 || num_labeled > spec.num_images {
        return Err(DataError::NumLabeled {
            got: num_labeled,
            max: spec.num_images,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let mut labeled = sample_indices(&mut rng, spec.num_images, num_labeled).into_vec();
        labeled.sort_unstable();
        let mut seen = BTreeSet::new();
        for &i in &labeled {
            let s = render_sample(spec, i)?;
            seen.extend(s.mask.expect("rendered samples carry masks").iter().copied());
            if seen.len() == spec.num_classes {
                break;
            }
        }
        if seen.len() == spec.num_classes {
            let chosen: BTreeSet<usize> = labeled.iter().copied().collect();
            let unlabeled = (0..spec.num_images).filter(|i| !chosen.contains(i)).collect();
            return Ok(SplitIndex {
                labeled_ids: labeled,
                unlabeled_ids: unlabeled,
            });
        }
    }
    Err(DataError::Coverage {
        num_labeled,
        num_classes: spec.num_classes,
    })
}

/// Mirrors every row of a row-major `[.., W]` buffer.
pub fn flip_rows<T: Copy>(src: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks_exact(width) {
        out.extend(row.iter().rev().copied());
    }
    out
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let s = sample.size;
    Sample {
        size: s,
        image: flip_rows(&sample.image, s),
        mask: sample.mask.as_deref().map(|m| flip_rows(m, s)),
        modes: sample.modes.clone(),
    }
}

/// Random horizontal flip (p = 0.5) of image and mask, then Gaussian noise
/// with standard deviation `noise_sigma / 2` on the image only. Returns the
/// augmented sample and whether it was flipped.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, noise_sigma: f64, rng: &mut R) -> (Sample, bool) {
    let flipped = rng.gen_bool(0.5);
    let mut out = if flipped {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    let sigma = noise_sigma / 2.0;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for v in out.image.iter_mut() {
            *v = (*v as f64 + normal.sample(rng)) as f32;
        }
    }
    (out, flipped)
}

/// Stacks sample images into a `[B, 1, H, W]` tensor.
pub fn batch_images<T: Element>(samples: &[&Sample]) -> Tensor<T> {
    let s = samples[0].size;
    let data = samples
        .iter()
        .flat_map(|smp| smp.image.iter().map(|&v| T::lit(v as f64)))
        .collect();
    Tensor::constant(&[samples.len(), 1, s, s], data).expect("samples share one size")
}

/// One-hot `[B, C, H, W]` targets from sample masks.
pub fn batch_one_hot<T: Element>(samples: &[&Sample], num_classes: usize) -> Tensor<T> {
    let s = samples[0].size;
    let hw = s * s;
    let mut data = vec![T::zero(); samples.len() * num_classes * hw];
    for (b, smp) in samples.iter().enumerate() {
        let mask = smp.mask.as_ref().expect("labeled sample");
        for (p, &k) in mask.iter().enumerate() {
            data[(b * num_classes + k as usize) * hw + p] = T::one();
        }
    }
    Tensor::constant(&[samples.len(), num_classes, s, s], data).expect("samples share one size")
}
