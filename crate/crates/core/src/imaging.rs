//! Image tensors, bilinear resampling, the multiscale ROI pyramid and channel
//! normalization.
//!
//! Resampling uses pixel-center alignment: output pixel `i` samples source
//! coordinate `(i + 0.5) * in / out - 0.5`, clamped to the border.

use std::path::Path;

use serde::{Deserialize, Serialize};

/// Side of every network input.
pub const INPUT_SIDE: usize = 224;

/// Number of pyramid levels, one per ensemble branch.
pub const PYRAMID_LEVELS: usize = 4;

/// Default ROI scales, as fractions of the shorter image side.
pub const DEFAULT_SCALES: [f64; PYRAMID_LEVELS] = [1.0, 0.8, 0.6, 0.4];

/// Smallest crop side accepted by [`extract_roi_pyramid`].
pub const MIN_CROP_SIDE: usize = 8;

/// ImageNet channel statistics used by the pretrained backbone.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("invalid image dimensions {height}x{width}")]
    BadDimensions { height: usize, width: usize },
    #[error("pixel buffer has {found} values, expected {expected}")]
    BadBuffer { expected: usize, found: usize },
    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("invalid scales {scales:?}: {reason}")]
    BadScales { scales: Vec<f64>, reason: String },
    #[error("crop side {side} px is below the {MIN_CROP_SIDE} px minimum")]
    CropTooSmall { side: usize },
    #[error("channel std must be positive, got {0:?}")]
    BadStd([f32; 3]),
    #[error("no image for id {0:?}")]
    Missing(String),
    #[error("decoding {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// An H×W×3 raster of intensities in [0, 1], stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImagingError> {
        if height == 0 || width == 0 {
            return Err(ImagingError::BadDimensions { height, width });
        }
        let expected = height * width * 3;
        if data.len() != expected {
            return Err(ImagingError::BadBuffer {
                expected,
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::OutOfRange { index, value });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self, ImagingError> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data)
    }

    /// Builds from a closure returning the RGB value at (row, col).
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self, ImagingError> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self, ImagingError> {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Decodes an 8-bit raster file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|source| ImagingError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_rgb8(&decoded.to_rgb8())
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length matches dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn channel_range(&self, c: usize) -> (f32, f32) {
        self.data
            .iter()
            .skip(c)
            .step_by(3)
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copies the `side`×`side` window whose top-left corner is (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self, ImagingError> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(ImagingError::BadDimensions { height, width });
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Self { height, width, data })
    }

    /// Mirrors the image left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Source sampling positions for one axis: (lower index, upper index, weight of upper).
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize with pixel-center alignment and border clamping.
pub fn bilinear_resize(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor, ImagingError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImagingError::BadDimensions {
            height: out_h,
            width: out_w,
        });
    }
    let rows = axis_taps(img.height, out_h);
    let cols = axis_taps(img.width, out_w);
    let stride = img.width * 3;
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, ty) in &rows {
        let r0 = &img.data[y0 * stride..(y0 + 1) * stride];
        let r1 = &img.data[y1 * stride..(y1 + 1) * stride];
        for &(x0, x1, tx) in &cols {
            for c in 0..3 {
                let (a, b) = (x0 * 3 + c, x1 * 3 + c);
                let top = (1.0 - tx) * f64::from(r0[a]) + tx * f64::from(r0[b]);
                let bottom = (1.0 - tx) * f64::from(r1[a]) + tx * f64::from(r1[b]);
                // the f32 cast snaps any f64 rounding excess back onto the source range
                data.push(((1.0 - ty) * top + ty * bottom) as f32);
            }
        }
    }
    Ok(ImageTensor {
        height: out_h,
        width: out_w,
        data,
    })
}

/// Placement of a centered square crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Centered square crop whose side is `floor(scale * min(h, w))`.
pub fn center_crop_window(height: usize, width: usize, scale: f64) -> CropWindow {
    // the epsilon keeps products like 0.6 * 500 from flooring to 299
    let side = (scale * height.min(width) as f64 + 1e-9).floor() as usize;
    let side = side.min(height.min(width));
    CropWindow {
        top: (height - side) / 2,
        left: (width - side) / 2,
        side,
    }
}

/// Four fixed-size views of one source image, one per ensemble level.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPyramid {
    levels: [ImageTensor; PYRAMID_LEVELS],
    scales: [f64; PYRAMID_LEVELS],
}

impl RoiPyramid {
    pub fn levels(&self) -> &[ImageTensor; PYRAMID_LEVELS] {
        &self.levels
    }

    pub fn scales(&self) -> [f64; PYRAMID_LEVELS] {
        self.scales
    }

    pub fn level(&self, k: usize) -> &ImageTensor {
        &self.levels[k]
    }
}

/// Checks the scale contract: first scale 1.0, the rest strictly decreasing in (0, 1).
pub fn validate_scales(scales: &[f64]) -> Result<[f64; PYRAMID_LEVELS], ImagingError> {
    let bad = |reason: &str| ImagingError::BadScales {
        scales: scales.to_vec(),
        reason: reason.to_string(),
    };
    let arr: [f64; PYRAMID_LEVELS] = scales.try_into().map_err(|_| bad("exactly 4 scales are required"))?;
    if arr.iter().any(|s| !s.is_finite()) {
        return Err(bad("scales must be finite"));
    }
    if arr[0] != 1.0 {
        return Err(bad("the first scale must be 1.0"));
    }
    if arr[1..].iter().any(|&s| s <= 0.0 || s >= 1.0) {
        return Err(bad("scales after the first must lie in (0, 1)"));
    }
    if arr.windows(2).any(|w| w[1] >= w[0]) {
        return Err(bad("scales must be strictly decreasing"));
    }
    Ok(arr)
}

/// Level 0 is the whole image resized to 224×224; level k ≥ 1 is the centered
/// square crop at `scales[k]` of the shorter side, resized to 224×224.
pub fn extract_roi_pyramid(img: &ImageTensor, scales: &[f64]) -> Result<RoiPyramid, ImagingError> {
    let scales = validate_scales(scales)?;
    let smallest = center_crop_window(img.height, img.width, scales[PYRAMID_LEVELS - 1]);
    if smallest.side < MIN_CROP_SIDE {
        return Err(ImagingError::CropTooSmall { side: smallest.side });
    }
    let level = |k: usize| -> Result<ImageTensor, ImagingError> {
        if k == 0 {
            return bilinear_resize(img, INPUT_SIDE, INPUT_SIDE);
        }
        let w = center_crop_window(img.height, img.width, scales[k]);
        let crop = img.crop(w.top, w.left, w.side, w.side)?;
        bilinear_resize(&crop, INPUT_SIDE, INPUT_SIDE)
    };
    Ok(RoiPyramid {
        levels: [level(0)?, level(1)?, level(2)?, level(3)?],
        scales,
    })
}

/// Per-channel standardized image; values may leave [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl NormalizedImage {
    /// Planar channel-major copy in f64, the layout the networks consume.
    pub fn to_planar_f64(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = f64::from(px[c]);
            }
        }
        out
    }
}

/// `(x - mean[c]) / std[c]` per channel.
pub fn normalize_channels(img: &ImageTensor, mean: [f32; 3], std: [f32; 3]) -> Result<NormalizedImage, ImagingError> {
    if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(ImagingError::BadStd(std));
    }
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % 3]) / std[i % 3])
        .collect();
    Ok(NormalizedImage {
        height: img.height,
        width: img.width,
        data,
    })
}

/// Inverse of [`normalize_channels`].
pub fn denormalize_channels(img: &NormalizedImage, mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
    img.data
        .iter()
        .enumerate()
        .map(|(i, &v)| v * std[i % 3] + mean[i % 3])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn rejects_bad_tensors() {
        assert!(ImageTensor::new(0, 3, vec![]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0; 2]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = ImageTensor::filled(7, 13, [0.5; 3]).unwrap();
        for (h, w) in [(1, 1), (224, 224), (3, 50)] {
            let out = bilinear_resize(&img, h, w).unwrap();
            assert_eq!((out.height(), out.width()), (h, w));
            assert!(out.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = random_image(224, 224, 3);
        assert_eq!(bilinear_resize(&img, 224, 224).unwrap(), img);
    }

    #[test]
    fn two_by_two_upsample_matches_hand_oracle() {
        // columns [0, 1]; target columns sample x = -0.25, 0.25, 0.75, 1.25
        // -> clamped to 0, 0.25, 0.75, 1 -> values 0, 0.25, 0.75, 1
        let img = ImageTensor::from_fn(2, 2, |_, x| [x as f32; 3]).unwrap();
        let out = bilinear_resize(&img, 4, 4).unwrap();
        let expected_row = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for (x, &want) in expected_row.iter().enumerate() {
                for c in 0..3 {
                    assert_eq!(out.get(y, x, c), want, "({y},{x},{c})");
                }
            }
        }
    }

    #[test]
    fn zero_target_rejected() {
        let img = ImageTensor::filled(2, 2, [0.0; 3]).unwrap();
        assert!(bilinear_resize(&img, 0, 4).is_err());
        assert!(bilinear_resize(&img, 4, 0).is_err());
    }

    #[test]
    fn crop_windows() {
        let w = center_crop_window(448, 448, 0.8);
        assert_eq!(
            w,
            CropWindow {
                top: 45,
                left: 45,
                side: 358
            }
        );
        let w = center_crop_window(300, 500, 0.5);
        assert_eq!(
            w,
            CropWindow {
                top: 75,
                left: 175,
                side: 150
            }
        );
        assert_eq!(center_crop_window(500, 500, 0.6).side, 300);
    }

    #[test]
    fn pyramid_levels() {
        let img = random_image(448, 448, 11);
        let p = extract_roi_pyramid(&img, &DEFAULT_SCALES).unwrap();
        assert_eq!(p.levels().len(), 4);
        for level in p.levels() {
            assert_eq!((level.height(), level.width()), (INPUT_SIDE, INPUT_SIDE));
        }
        assert_eq!(p.level(0), &bilinear_resize(&img, 224, 224).unwrap());
        let crop = img.crop(45, 45, 358, 358).unwrap();
        assert_eq!(p.level(1), &bilinear_resize(&crop, 224, 224).unwrap());
    }

    #[test]
    fn pyramid_of_constant_is_constant() {
        let img = ImageTensor::filled(100, 160, [0.2, 0.4, 0.6]).unwrap();
        let p = extract_roi_pyramid(&img, &DEFAULT_SCALES).unwrap();
        for level in p.levels() {
            for px in level.data().chunks_exact(3) {
                assert_eq!(px, [0.2, 0.4, 0.6]);
            }
        }
    }

    #[test]
    fn pyramid_scale_errors() {
        let img = ImageTensor::filled(40, 40, [0.5; 3]).unwrap();
        for bad in [
            vec![0.9, 0.8, 0.6, 0.4],
            vec![1.0, 0.6, 0.8, 0.4],
            vec![1.0, 0.8, 0.6],
            vec![1.0, 0.8, 0.6, 0.0],
            vec![1.0, 0.8, 0.8, 0.4],
        ] {
            assert!(matches!(
                extract_roi_pyramid(&img, &bad),
                Err(ImagingError::BadScales { .. })
            ));
        }
        // floor(0.1 * 40) = 4 < 8
        assert!(matches!(
            extract_roi_pyramid(&img, &[1.0, 0.5, 0.3, 0.1]),
            Err(ImagingError::CropTooSmall { side: 4 })
        ));
    }

    #[test]
    fn nested_crops_compose() {
        // a lesion-like patch on a constant background
        let img = ImageTensor::from_fn(400, 400, |y, x| {
            if (150..250).contains(&y) && (150..250).contains(&x) {
                [((y * 7 + x) % 13) as f32 / 13.0, 0.3, 0.9]
            } else {
                [0.5; 3]
            }
        })
        .unwrap();
        let outer = center_crop_window(400, 400, 0.5);
        let pre = img.crop(outer.top, outer.left, outer.side, outer.side).unwrap();
        let inner = center_crop_window(pre.height(), pre.width(), 0.5);
        let twice = pre.crop(inner.top, inner.left, inner.side, inner.side).unwrap();
        let composed = center_crop_window(400, 400, 0.25);
        let once = img
            .crop(composed.top, composed.left, composed.side, composed.side)
            .unwrap();
        let a = bilinear_resize(&twice, 224, 224).unwrap();
        let b = bilinear_resize(&once, 224, 224).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn normalization() {
        let img = random_image(5, 6, 2);
        let id = normalize_channels(&img, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(id.data, img.data());
        let half = ImageTensor::filled(3, 3, [0.5; 3]).unwrap();
        let zero = normalize_channels(&half, [0.5; 3], [0.25; 3]).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        assert!(normalize_channels(&img, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(normalize_channels(&img, [0.0; 3], [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let img = random_image(32, 17, 9);
        let n = normalize_channels(&img, IMAGENET_MEAN, IMAGENET_STD).unwrap();
        let back = denormalize_channels(&n, IMAGENET_MEAN, IMAGENET_STD);
        for (a, b) in back.iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn planar_layout() {
        let img = ImageTensor::from_fn(1, 2, |_, x| [x as f32, 0.5, 1.0]).unwrap();
        let n = normalize_channels(&img, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(n.to_planar_f64(), vec![0.0, 1.0, 0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = random_image(4, 7, 5);
        assert_ne!(img.flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    proptest! {
        #[test]
        fn resize_preserves_channel_bounds(
            h in 1usize..12, w in 1usize..12, oh in 1usize..30, ow in 1usize..30, seed in any::<u64>()
        ) {
            let img = random_image(h, w, seed);
            let out = bilinear_resize(&img, oh, ow).unwrap();
            for c in 0..3 {
                let (lo, hi) = img.channel_range(c);
                let (olo, ohi) = out.channel_range(c);
                prop_assert!(olo >= lo && ohi <= hi);
            }
        }

        #[test]
        fn pyramid_is_deterministic(h in 20usize..60, w in 20usize..60, seed in any::<u64>()) {
            let img = random_image(h, w, seed);
            let a = extract_roi_pyramid(&img, &DEFAULT_SCALES).unwrap();
            let b = extract_roi_pyramid(&img, &DEFAULT_SCALES).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
