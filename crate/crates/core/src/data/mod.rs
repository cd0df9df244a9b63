//! Synthetic phantom lenses, PPM/PGM image files, dataset directories and
//! checkpoints.

mod checkpoint;
mod dataset;
mod phantom;
mod pnm;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_model, save_checkpoint, MAGIC, VERSION};
pub use dataset::{read_dataset, split, write_dataset, Manifest};
pub use phantom::{gen_phantom, render_phantom, threshold_segment, Ellipse, PhantomSpec, CLASS_INTENSITY, NUM_CLASSES};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_image, read_mask, write_image, write_mask};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square map of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    side: usize,
    ids: Vec<u8>,
}

impl Mask {
    pub fn new(side: usize, ids: Vec<u8>) -> Result<Self> {
        if side == 0 || ids.len() != side * side {
            return Err(Error::shape(format!(
                "mask of side {side} needs {} ids, got {}",
                side * side,
                ids.len()
            )));
        }
        Ok(Self { side, ids })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.side + col]
    }
}

/// One image (`3×S×S`, values in `[0, 1]`) with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != mask.side || s[2] != mask.side {
            return Err(Error::shape(format!(
                "image {s:?} does not match a {0}×{0} mask",
                mask.side
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn side(&self) -> usize {
        self.mask.side
    }
}
