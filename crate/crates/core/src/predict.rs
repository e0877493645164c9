//! Batch inference over images of any size.

use rayon::prelude::*;

use crate::dataset::{images_to_tensor, Image};
use crate::error::Result;
use crate::network::Model;

/// Images per forward pass during inference.
pub const PREDICT_CHUNK: usize = 64;

/// Anything that maps images to wind speeds in knots.
pub trait SpeedPredictor: Sync {
    fn predict_speeds(&self, images: &[&Image]) -> Result<Vec<f32>>;
}

impl SpeedPredictor for Model<f32> {
    /// Resizes each image to the network input size and runs eval-mode
    /// forward passes in chunks.
    fn predict_speeds(&self, images: &[&Image]) -> Result<Vec<f32>> {
        let size = self.config().input_size;
        let chunks: Vec<Result<Vec<f32>>> = images
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| self.predict(&images_to_tensor(chunk.iter().copied(), size)))
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

impl<P: SpeedPredictor + ?Sized> SpeedPredictor for &P {
    fn predict_speeds(&self, images: &[&Image]) -> Result<Vec<f32>> {
        (**self).predict_speeds(images)
    }
}
