//! Turning manifest entries into the four branch inputs.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::layers::Tensor3;
use crate::fusion::BRANCHES;
use crate::imaging::{extract_roi_pyramid, ImageTensor, ImagingError, RoiPyramid};

/// Where decoded images come from.
pub trait ImageSource: Sync {
    fn load(&self, image_id: &str, path: &Path) -> Result<ImageTensor, ImagingError>;
}

/// Decodes image files from disk.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileSource;

impl ImageSource for FileSource {
    fn load(&self, _image_id: &str, path: &Path) -> Result<ImageTensor, ImagingError> {
        ImageTensor::open(path)
    }
}

/// Images held in memory, keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: HashMap<String, ImageTensor>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, image: ImageTensor) {
        self.images.insert(image_id.into(), image);
    }
}

impl ImageSource for MemorySource {
    fn load(&self, image_id: &str, _path: &Path) -> Result<ImageTensor, ImagingError> {
        self.images
            .get(image_id)
            .cloned()
            .ok_or_else(|| ImagingError::Missing(image_id.to_string()))
    }
}

/// Preprocessing shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub scales: [f64; BRANCHES],
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Normalized channel-major inputs, level k for branch k.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchInputs {
    pub levels: [Tensor3; BRANCHES],
}

impl Preprocess {
    pub fn pyramid_inputs(&self, pyramid: &RoiPyramid) -> Result<BranchInputs, ImagingError> {
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(ImagingError::BadStd(self.std));
        }
        // same arithmetic as `normalize_channels` then `to_planar_f64`, in one pass
        let level = |k: usize| -> Result<Tensor3, ImagingError> {
            let img = pyramid.level(k);
            let plane = img.height() * img.width();
            let mut out = vec![0.0; plane * 3];
            for (i, px) in img.data().chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = f64::from((px[c] - self.mean[c]) / self.std[c]);
                }
            }
            Ok(Tensor3::new(3, img.height(), img.width(), out))
        };
        Ok(BranchInputs {
            levels: [level(0)?, level(1)?, level(2)?, level(3)?],
        })
    }

    pub fn inputs(&self, image: &ImageTensor, flip: bool) -> Result<BranchInputs, ImagingError> {
        let pyramid = if flip {
            extract_roi_pyramid(&image.flip_horizontal(), &self.scales)?
        } else {
            extract_roi_pyramid(image, &self.scales)?
        };
        self.pyramid_inputs(&pyramid)
    }
}

/// An image failed to load or preprocess.
#[derive(Debug, thiserror::Error)]
#[error("image {image_id}: {source}")]
pub struct SampleError {
    pub image_id: String,
    #[source]
    pub source: ImagingError,
}

/// Loads and preprocesses samples in parallel; output order follows `items`.
pub fn load_inputs<'a, I>(
    source: &dyn ImageSource,
    preprocess: &Preprocess,
    items: I,
) -> Result<Vec<BranchInputs>, SampleError>
where
    I: IntoParallelIterator<Item = (&'a str, &'a Path, bool)>,
    I::Iter: IndexedParallelIterator,
{
    items
        .into_par_iter()
        .map(|(image_id, path, flip)| {
            source
                .load(image_id, path)
                .and_then(|img| preprocess.inputs(&img, flip))
                .map_err(|source| SampleError {
                    image_id: image_id.to_string(),
                    source,
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{normalize_channels, DEFAULT_SCALES, IMAGENET_MEAN, IMAGENET_STD};

    #[test]
    fn fused_normalization_matches_two_step() {
        let img = ImageTensor::from_fn(40, 50, |y, x| {
            std::array::from_fn(|c| ((y * 7 + x * 3 + c * 11) % 17) as f32 / 16.0)
        })
        .unwrap();
        let pp = Preprocess {
            scales: DEFAULT_SCALES,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        };
        let pyramid = extract_roi_pyramid(&img, &DEFAULT_SCALES).unwrap();
        let fused = pp.pyramid_inputs(&pyramid).unwrap();
        for k in 0..BRANCHES {
            let n = normalize_channels(pyramid.level(k), IMAGENET_MEAN, IMAGENET_STD).unwrap();
            assert_eq!(fused.levels[k].data, n.to_planar_f64());
        }
    }

    #[test]
    fn memory_source_reports_missing_ids() {
        let src = MemorySource::new();
        assert!(matches!(
            src.load("nope", Path::new("x")),
            Err(ImagingError::Missing(_))
        ));
    }
}
