//! Synthetic multiscale lesion images.
//!
//! Every image shows a noisy skin-coloured background with a small dark blob at
//! the centre. For the fine-scale classes the blob is shifted towards a
//! class-specific colour and carries a pixel-level checkerboard along the same
//! colour direction; both cues cover a small fraction of the full image and are
//! best resolved in the tightest crops. The coarse-scale classes instead tint
//! the whole image.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, DatasetError, DiagnosisClass, ManifestEntry};
use crate::imaging::{center_crop_window, ImageTensor, ImagingError};

/// Classes whose cue is a fine central texture.
pub const FINE_SCALE_CLASSES: [DiagnosisClass; 4] = [
    DiagnosisClass::Mel,
    DiagnosisClass::Bcc,
    DiagnosisClass::Akiec,
    DiagnosisClass::Df,
];

/// Classes whose cue is a whole-image tint.
pub const COARSE_SCALE_CLASSES: [DiagnosisClass; 3] = [DiagnosisClass::Nv, DiagnosisClass::Bkl, DiagnosisClass::Vasc];

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub seed: u64,
    /// Side of the square source images.
    pub side: usize,
    pub blob_radius: f64,
    /// Maximum centre offset of the blob along each axis.
    pub blob_jitter: f64,
    pub texture_amplitude: f32,
    /// Mean colour offset of fine-scale blobs along the class colour direction.
    pub colour_shift: f32,
    pub tint_amplitude: f32,
    pub noise_std: f32,
    /// Fraction of each class held out for the test split.
    pub test_fraction: f64,
}

impl SynthSpec {
    pub fn new(n_images: usize, seed: u64) -> Self {
        Self {
            n_images,
            seed,
            side: 256,
            blob_radius: 20.0,
            blob_jitter: 4.0,
            texture_amplitude: 0.15,
            colour_shift: 0.1,
            tint_amplitude: 0.09,
            noise_std: 0.05,
            test_fraction: 0.2,
        }
    }

    /// Images per class, remainder going to the first classes.
    pub fn class_counts(&self) -> [usize; DiagnosisClass::COUNT] {
        let base = self.n_images / DiagnosisClass::COUNT;
        let extra = self.n_images % DiagnosisClass::COUNT;
        std::array::from_fn(|i| base + usize::from(i < extra))
    }

    /// Test images for a class of `count` images (at least one, never all).
    pub fn test_count(&self, count: usize) -> usize {
        ((count as f64 * self.test_fraction).round() as usize).clamp(1, count - 1)
    }

    /// Whether every pixel the blob can touch lies inside the centre crop at
    /// `scale`, derived from the generator parameters alone.
    pub fn blob_inside_crop(&self, scale: f64) -> bool {
        let w = center_crop_window(self.side, self.side, scale);
        let centre = self.side as f64 / 2.0;
        let reach = self.blob_radius + self.blob_jitter;
        let lo = centre - reach;
        let hi = centre + reach;
        let (top, left, side) = (w.top as f64, w.left as f64, w.side as f64);
        lo >= top.max(left) && hi <= (top + side).min(left + side)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("need at least 14 images (one per class per split), got {0}")]
    TooFew(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image_id: String,
    pub class: DiagnosisClass,
    pub test: bool,
    pub image: ImageTensor,
}

/// Colour direction of the blob cue of each fine-scale class.
fn texture_colour(class: DiagnosisClass) -> [f32; 3] {
    match class {
        DiagnosisClass::Mel => [1.0, -0.5, -0.5],
        DiagnosisClass::Bcc => [-0.5, 1.0, -0.5],
        DiagnosisClass::Akiec => [-0.5, -0.5, 1.0],
        DiagnosisClass::Df => [0.5, 0.5, -1.0],
        _ => [0.0; 3],
    }
}

fn tint(class: DiagnosisClass) -> [f32; 3] {
    match class {
        DiagnosisClass::Nv => [1.0, 1.0, 1.0],
        DiagnosisClass::Bkl => [-1.0, -1.0, -1.0],
        DiagnosisClass::Vasc => [0.5, -1.0, 0.5],
        _ => [0.0; 3],
    }
}

fn render(spec: &SynthSpec, class: DiagnosisClass, rng: &mut ChaCha8Rng) -> Result<ImageTensor, ImagingError> {
    let noise = Normal::new(0.0f32, spec.noise_std).expect("valid noise std");
    let skin = [
        0.80 + rng.random_range(-0.04..0.04),
        0.62 + rng.random_range(-0.04..0.04),
        0.52 + rng.random_range(-0.04..0.04),
    ];
    let lesion = [0.42f32, 0.28, 0.22];
    let half = spec.side as f64 / 2.0;
    let cy = half + rng.random_range(-spec.blob_jitter..=spec.blob_jitter);
    let cx = half + rng.random_range(-spec.blob_jitter..=spec.blob_jitter);
    let t = tint(class);
    let fine = FINE_SCALE_CLASSES.contains(&class);
    let tc = texture_colour(class);
    let mut data = Vec::with_capacity(spec.side * spec.side * 3);
    for y in 0..spec.side {
        for x in 0..spec.side {
            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
            let inside = d2 <= spec.blob_radius * spec.blob_radius;
            // zero-mean checkerboard: invisible once averaged over 2x2 pixels
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            let tex = if inside && fine {
                spec.texture_amplitude * sign
            } else {
                0.0
            };
            let shift = if fine { spec.colour_shift } else { 0.0 };
            for c in 0..3 {
                let base = if inside {
                    lesion[c] + (shift + tex) * tc[c]
                } else {
                    skin[c]
                };
                let v = base + spec.tint_amplitude * t[c] + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(spec.side, spec.side, data)
}

/// Generates all samples in memory, class by class.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSample>, SynthError> {
    if spec.n_images < 2 * DiagnosisClass::COUNT {
        return Err(SynthError::TooFew(spec.n_images));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_images);
    for (class, count) in DiagnosisClass::ALL.into_iter().zip(spec.class_counts()) {
        let test = spec.test_count(count);
        for i in 0..count {
            out.push(SynthSample {
                image_id: format!("synth_{}_{i:04}", class.code().to_lowercase()),
                class,
                test: i >= count - test,
                image: render(spec, class, &mut rng)?,
            });
        }
    }
    Ok(out)
}

/// Metadata written next to a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub spec: SynthSpec,
    pub fine_scale_classes: Vec<DiagnosisClass>,
    pub coarse_scale_classes: Vec<DiagnosisClass>,
    pub train_images: usize,
    pub test_images: usize,
}

/// Paths of a generated dataset.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub meta: SynthMeta,
}

/// Writes `images/*.png`, labeled `train.csv` and `test.csv`, and `synth_meta.json`.
pub fn write_dataset(out_dir: &Path, spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    let samples = generate(spec)?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(io(&images))?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in &samples {
        let rel = format!("images/{}.png", s.image_id);
        let path = out_dir.join(&rel);
        s.image
            .to_rgb8()
            .save(&path)
            .map_err(|source| SynthError::Encode { path, source })?;
        let entry = ManifestEntry {
            image_id: s.image_id.clone(),
            file_path: rel,
            label: Some(s.class),
        };
        if s.test {
            test.push(entry);
        } else {
            train.push(entry);
        }
    }
    let train_manifest = out_dir.join("train.csv");
    let test_manifest = out_dir.join("test.csv");
    write_manifest(&train_manifest, &train)?;
    write_manifest(&test_manifest, &test)?;
    let meta = SynthMeta {
        spec: spec.clone(),
        fine_scale_classes: FINE_SCALE_CLASSES.to_vec(),
        coarse_scale_classes: COARSE_SCALE_CLASSES.to_vec(),
        train_images: train.len(),
        test_images: test.len(),
    };
    let meta_path = out_dir.join("synth_meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&meta_path, json).map_err(io(&meta_path))?;
    Ok(SynthOutput {
        train_manifest,
        test_manifest,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_and_splits() {
        let spec = SynthSpec::new(70, 1);
        assert_eq!(spec.class_counts(), [10; 7]);
        assert_eq!(spec.test_count(10), 2);
        let spec = SynthSpec::new(350, 1);
        assert_eq!(spec.test_count(50), 10);
        assert_eq!(SynthSpec::new(16, 0).class_counts(), [3, 3, 2, 2, 2, 2, 2]);
        assert_eq!(SynthSpec::new(14, 0).test_count(2), 1);
    }

    #[test]
    fn blob_fits_every_pyramid_level() {
        let spec = SynthSpec::new(70, 1);
        for s in [1.0, 0.8, 0.6, 0.4] {
            assert!(spec.blob_inside_crop(s), "scale {s}");
        }
        let tight = SynthSpec {
            blob_radius: 60.0,
            ..spec
        };
        assert!(!tight.blob_inside_crop(0.4));
    }

    #[test]
    fn too_few_images() {
        assert!(matches!(generate(&SynthSpec::new(13, 0)), Err(SynthError::TooFew(13))));
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = generate(&SynthSpec::new(14, 5)).unwrap();
        let b = generate(&SynthSpec::new(14, 5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&SynthSpec::new(14, 6)).unwrap());
    }
}
