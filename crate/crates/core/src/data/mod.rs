//! Synthetic ribbon data, annotation parsers, augmentation and manifests.

mod augment;
mod manifest;
mod parse;
mod synth;

pub use augment::{augment, choose_crop, crop_resize, rotate_sample, AugmentConfig, CropBox, Rotation};
pub use manifest::{
    load_image, load_samples, read_manifest, resolve, save_image, save_samples, write_manifest, ManifestAnnotation,
    ManifestEntry,
};
pub use parse::{parse_ctw_polygons, parse_polygon_list, serialize_ctw, serialize_polygon_list, CTW_POINTS, IGNORE_TAG};
pub use synth::{
    generate_sample, random_spec, random_specs, synthetic_sample, synthetic_set, RibbonSpec, SynthConfig, NOISE_SIGMA,
};

use crate::fox::TextAnnotation;
use crate::tensor::Tensor;

/// An image `[3, h, w]` and its text instances in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub annotations: Vec<TextAnnotation>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}
