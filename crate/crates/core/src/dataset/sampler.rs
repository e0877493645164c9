use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augment_rotate, DatasetIndex, Image, RotationPolicy};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_rotation_fraction() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability that each batch element is rotated.
    #[serde(default = "default_rotation_fraction")]
    pub rotation_fraction: f64,
    #[serde(default)]
    pub rotation_policy: RotationPolicy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            rotation_fraction: default_rotation_fraction(),
            rotation_policy: RotationPolicy::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rotation_fraction) {
            return Err(Error::Config(format!(
                "rotation_fraction {} outside [0, 1]",
                self.rotation_fraction
            )));
        }
        Ok(())
    }
}

/// One training batch. Parallel vectors, one entry per distinct speed bin.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Position of the source sample in the index.
    pub sample_indices: Vec<usize>,
    pub images: Vec<Arc<Image>>,
    pub speeds: Vec<f32>,
    pub rotated: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    /// Stacks the images into `[N, 1, size, size]`, resizing when needed.
    pub fn to_tensor(&self, size: usize) -> Tensor<f32> {
        images_to_tensor(self.images.iter().map(Arc::as_ref), size)
    }
}

/// Stacks images into `[N, 1, size, size]`, resizing when needed.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a Image>, size: usize) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        if img.size() == size {
            data.extend_from_slice(img.pixels());
        } else {
            data.extend_from_slice(img.resize(size).pixels());
        }
        n += 1;
    }
    Tensor::new([n, 1, size, size], data).expect("stacked images")
}

/// Draws one image per distinct speed bin: first a storm uniformly among the
/// storms that have that speed, then an image uniformly among that storm's
/// images at that speed. Each pick is rotated with `rotation_fraction`.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    index: &'a DatasetIndex,
    config: SamplerConfig,
}

impl<'a> BatchSampler<'a> {
    pub fn new(index: &'a DatasetIndex, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if index.is_empty() {
            return Err(Error::Data("cannot sample batches from an empty dataset".into()));
        }
        Ok(BatchSampler { index, config })
    }

    pub fn index(&self) -> &'a DatasetIndex {
        self.index
    }

    pub fn batch_size(&self) -> usize {
        self.index.speed_count()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Batch {
        let n = self.batch_size();
        let mut batch = Batch {
            sample_indices: Vec::with_capacity(n),
            images: Vec::with_capacity(n),
            speeds: Vec::with_capacity(n),
            rotated: Vec::with_capacity(n),
        };
        for speed in self.index.speeds() {
            let storms = self.index.storms_at_speed(speed).expect("speed from index");
            let pick = rng.random_range(0..storms.len());
            let images = storms.values().nth(pick).expect("in range");
            let i = images[rng.random_range(0..images.len())];
            let sample = &self.index.samples()[i];
            let rotate = self.config.rotation_fraction > 0.0 && rng.random::<f64>() < self.config.rotation_fraction;
            let image = if rotate {
                Arc::new(augment_rotate(&sample.image, self.config.rotation_policy, rng))
            } else {
                sample.image.clone()
            };
            batch.sample_indices.push(i);
            batch.images.push(image);
            batch.speeds.push(sample.wind_speed);
            batch.rotated.push(rotate);
        }
        batch
    }
}
