//! RGB image buffers in linear `[0, 1]` space, the two blending operators,
//! the deterministic fog translator and PNG I/O.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("mixing weight must be in [0, 1], got {0}")]
    DeltaOutOfRange(f64),
    #[error("buffer length {len} does not match {height}x{width}x3")]
    BadLength {
        len: usize,
        height: usize,
        width: usize,
    },
    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("invalid fog parameters: {0}")]
    InvalidFog(String),
    #[error("{path}: expected an 8-bit RGB PNG, found {found}")]
    NotRgb8 { path: PathBuf, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Height x width x 3 pixels, row-major `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != height * width * CHANNELS {
            return Err(ImageError::BadLength {
                len: data.len(),
                height,
                width,
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(ImageError::PixelOutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    /// Builds from bytes, mapping `v` to `v / 255`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Quantizes with `round(x * 255)`, half away from zero.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&x| (x * 255.0).round() as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; CHANNELS] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes one pixel, clamping into `[0, 1]`.
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; CHANNELS]) {
        let i = (row * self.width + col) * CHANNELS;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }
}

fn mix(base: &ImageBuffer, other: &ImageBuffer, delta: f64) -> Result<ImageBuffer, ImageError> {
    if base.dims() != other.dims() {
        return Err(ImageError::DimensionMismatch {
            left: base.dims(),
            right: other.dims(),
        });
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(ImageError::DeltaOutOfRange(delta));
    }
    // The endpoints are copied so that they hold bitwise.
    let data = if delta == 0.0 {
        base.data.clone()
    } else if delta == 1.0 {
        other.data.clone()
    } else {
        base.data
            .iter()
            .zip(&other.data)
            .map(|(&b, &o)| (delta * o + (1.0 - delta) * b).clamp(0.0, 1.0))
            .collect()
    };
    Ok(ImageBuffer {
        height: base.height,
        width: base.width,
        data,
    })
}

/// `delta * translated + (1 - delta) * source`, per pixel.
pub fn blend_images(
    source: &ImageBuffer,
    translated: &ImageBuffer,
    delta: f64,
) -> Result<ImageBuffer, ImageError> {
    mix(source, translated, delta)
}

/// `delta * target + (1 - delta) * source`, per pixel. The two images need
/// not depict the same scene but must have the same shape.
pub fn blend_source_target(
    source: &ImageBuffer,
    target: &ImageBuffer,
    delta: f64,
) -> Result<ImageBuffer, ImageError> {
    mix(source, target, delta)
}

/// Parameters of the fog corruption used in place of a learned translator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FogParams {
    /// Weight of the gray veil, in `[0, 1]`.
    pub fog_strength: f64,
    pub veil_luminance: f64,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl FogParams {
    pub fn identity() -> Self {
        Self {
            fog_strength: 0.0,
            veil_luminance: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let unit = |name: &str, v: f64| {
            if v.is_finite() && (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ImageError::InvalidFog(format!(
                    "{name} must be in [0, 1], got {v}"
                )))
            }
        };
        unit("fog_strength", self.fog_strength)?;
        unit("veil_luminance", self.veil_luminance)?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(ImageError::InvalidFog(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Same corruption with a different noise stream.
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// `clamp((1 - s) * x + s * veil + noise)`; geometry is preserved.
pub fn fog_translate(source: &ImageBuffer, params: &FogParams) -> Result<ImageBuffer, ImageError> {
    params.validate()?;
    let s = params.fog_strength;
    let veil = s * params.veil_luminance;
    let mut data: Vec<f64> = source.data.iter().map(|&x| (1.0 - s) * x + veil).collect();
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| ImageError::InvalidFog(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(ImageBuffer {
        height: source.height,
        width: source.width,
        data,
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    let path = path.as_ref();
    let codec = |source| ImageError::Codec {
        path: path.to_path_buf(),
        source,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let decoded = reader.decode().map_err(codec)?;
    match decoded {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            ImageBuffer::from_rgb8(h as usize, w as usize, rgb.as_raw())
        }
        other => Err(ImageError::NotRgb8 {
            path: path.to_path_buf(),
            found: format!("{:?}", other.color()),
        }),
    }
}

pub fn write_image(buffer: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    image::save_buffer_with_format(
        path,
        &buffer.to_rgb8(),
        buffer.width as u32,
        buffer.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|source| ImageError::Codec {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn solid(v: f64) -> ImageBuffer {
        ImageBuffer::filled(2, 3, v).unwrap()
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let s = solid(0.2);
        let t = solid(0.8);
        assert_eq!(blend_images(&s, &t, 0.0).unwrap(), s);
        assert_eq!(blend_images(&s, &t, 1.0).unwrap(), t);
        let mid = blend_images(&s, &t, 0.7).unwrap();
        assert!(mid.data().iter().all(|&v| (v - 0.62).abs() < 1e-12));

        let st = blend_source_target(&solid(0.0), &solid(1.0), 0.5).unwrap();
        assert!(st.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn blend_rejects_mismatch_and_bad_delta() {
        let a = ImageBuffer::filled(2, 2, 0.5).unwrap();
        let b = ImageBuffer::filled(2, 3, 0.5).unwrap();
        assert!(matches!(
            blend_images(&a, &b, 0.5),
            Err(ImageError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            blend_source_target(&a, &a, 1.01),
            Err(ImageError::DeltaOutOfRange(_))
        ));
        assert!(matches!(
            blend_images(&a, &a, f64::NAN),
            Err(ImageError::DeltaOutOfRange(_))
        ));
    }

    #[test]
    fn buffer_validation() {
        assert!(matches!(
            ImageBuffer::new(1, 1, vec![0.0; 2]),
            Err(ImageError::BadLength { .. })
        ));
        assert!(matches!(
            ImageBuffer::new(1, 1, vec![0.0, 1.5, 0.0]),
            Err(ImageError::PixelOutOfRange { index: 1, .. })
        ));
        assert!(ImageBuffer::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn fog_examples() {
        let src = solid(0.5);
        let none = FogParams {
            fog_strength: 0.0,
            veil_luminance: 0.8,
            noise_sigma: 0.0,
            seed: 1,
        };
        assert_eq!(fog_translate(&src, &none).unwrap(), src);
        let full = FogParams {
            fog_strength: 1.0,
            ..none
        };
        assert!(fog_translate(&src, &full)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.8));
        let partial = FogParams {
            fog_strength: 0.6,
            ..none
        };
        let out = fog_translate(&src, &partial).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.68).abs() < 1e-12));
    }

    #[test]
    fn fog_noise_is_seeded() {
        let src = solid(0.5);
        let p = FogParams {
            fog_strength: 0.3,
            veil_luminance: 0.7,
            noise_sigma: 0.05,
            seed: 9,
        };
        let a = fog_translate(&src, &p).unwrap();
        assert_eq!(a, fog_translate(&src, &p).unwrap());
        assert_ne!(a, fog_translate(&src, &p.with_seed(10)).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fog_validation() {
        let bad = FogParams {
            fog_strength: 1.2,
            ..FogParams::identity()
        };
        assert!(fog_translate(&solid(0.1), &bad).is_err());
        let bad = FogParams {
            noise_sigma: -1.0,
            ..FogParams::identity()
        };
        assert!(fog_translate(&solid(0.1), &bad).is_err());
    }

    #[test]
    fn byte_mapping() {
        let img = ImageBuffer::from_rgb8(1, 1, &[255, 0, 128]).unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert_eq!(img.to_rgb8(), vec![255, 0, 128]);
        // half away from zero: 0.5/255 * 255 = 0.5 rounds to 1
        let half = ImageBuffer::new(1, 1, vec![0.5 / 255.0, 1.5 / 255.0, 0.0]).unwrap();
        assert_eq!(half.to_rgb8(), vec![1, 2, 0]);
    }

    #[test]
    fn exhaustive_byte_round_trip() {
        let bytes: Vec<u8> = (0..=255u8).flat_map(|b| [b, 255 - b, b / 2]).collect();
        let img = ImageBuffer::from_rgb8(16, 16, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
    }

    #[test]
    fn png_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..5 * 7 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImageBuffer::from_rgb8(5, 7, &bytes).unwrap();
        let path = dir.path().join("a.png");
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.dims(), (5, 7));
        assert_eq!(back.to_rgb8(), bytes);

        assert!(matches!(
            read_image(dir.path().join("missing.png")),
            Err(ImageError::Io { .. })
        ));

        let corrupt = dir.path().join("corrupt.png");
        std::fs::write(&corrupt, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(read_image(&corrupt).is_err());

        let gray = dir.path().join("gray.png");
        image::save_buffer(
            &gray,
            &[0u8, 10, 20, 30],
            2,
            2,
            image::ExtendedColorType::L8,
        )
        .unwrap();
        assert!(matches!(read_image(&gray), Err(ImageError::NotRgb8 { .. })));
    }

    fn pair() -> impl Strategy<Value = (ImageBuffer, ImageBuffer)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            let n = h * w * CHANNELS;
            (
                proptest::collection::vec(0.0f64..=1.0, n),
                proptest::collection::vec(0.0f64..=1.0, n),
            )
                .prop_map(move |(a, b)| {
                    (
                        ImageBuffer::new(h, w, a).unwrap(),
                        ImageBuffer::new(h, w, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn blend_is_convex_and_symmetric((a, b) in pair(), delta in 0.0f64..=1.0) {
            let ab = blend_images(&a, &b, delta).unwrap();
            let ba = blend_source_target(&b, &a, delta).unwrap();
            for i in 0..a.data().len() {
                let (x, y) = (a.data()[i], b.data()[i]);
                prop_assert!(ab.data()[i] >= x.min(y) - 1e-15 && ab.data()[i] <= x.max(y) + 1e-15);
                prop_assert!((ab.data()[i] + ba.data()[i] - x - y).abs() < 1e-12);
            }
            prop_assert_eq!(blend_images(&a, &a, delta).unwrap().data().iter().zip(a.data()).filter(|(p, q)| (*p - *q).abs() > 1e-15).count(), 0);
        }

        #[test]
        fn fog_monotone_toward_veil((a, _) in pair(), veil in 0.0f64..=1.0, s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let p = FogParams { fog_strength: lo, veil_luminance: veil, noise_sigma: 0.0, seed: 0 };
            let weak = fog_translate(&a, &p).unwrap();
            let strong = fog_translate(&a, &FogParams { fog_strength: hi, ..p }).unwrap();
            for i in 0..a.data().len() {
                prop_assert!((strong.data()[i] - veil).abs() <= (weak.data()[i] - veil).abs() + 1e-12);
            }
        }
    }
}
