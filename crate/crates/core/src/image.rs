//! Float RGB images and PNG I/O.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{dim_err, Error, Result};

pub const MIN_SIDE: usize = 16;

/// An RGB image with values in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub id: String,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImagePatch {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(dim_err!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            ));
        }
        if pixels.len() != height * width * 3 {
            return Err(dim_err!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "pixel value {bad} outside [0, 1] or not finite"
            )));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    /// Builds an image, clipping values into `[0, 1]` (NaN becomes 0).
    pub fn from_clipped(id: impl Into<String>, height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for v in pixels.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(id, height, width, pixels)
    }

    pub fn constant(id: impl Into<String>, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(id, height, width, vec![value; height * width * 3])
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

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * 3 + ch]
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, ch: usize) -> Vec<f32> {
        self.pixels.iter().skip(ch).step_by(3).copied().collect()
    }

    pub fn from_channels(id: impl Into<String>, height: usize, width: usize, planes: [&[f32]; 3]) -> Result<Self> {
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(dim_err!("channel planes must each hold {n} values"));
        }
        let mut pixels = Vec::with_capacity(n * 3);
        for i in 0..n {
            pixels.extend(planes.iter().map(|p| p[i]));
        }
        Self::new(id, height, width, pixels)
    }

    /// Luminance with weights 0.299 / 0.587 / 0.114, in f64.
    pub fn luminance(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Crops a `h x w` window at `(row0, col0)`.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if row0 + h > self.height || col0 + w > self.width {
            return Err(dim_err!(
                "crop {h}x{w} at ({row0}, {col0}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for r in row0..row0 + h {
            let start = (r * self.width + col0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Self::new(format!("{}@{row0},{col0}", self.id), h, w, pixels)
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (self.height, self.width, 3), &Device::Cpu)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?
            .contiguous()?;
        Ok(t)
    }

    /// Stacks images of equal size into `(B, 3, H, W)`.
    pub fn batch_to_tensor(images: &[&ImagePatch], dtype: DType) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Validation("empty image batch".into()));
        }
        let dims = images[0].dims();
        if images.iter().any(|im| im.dims() != dims) {
            return Err(dim_err!("images in a batch must share dimensions"));
        }
        let ts = images
            .iter()
            .map(|im| im.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Converts a `(1, 3, H, W)` or `(3, H, W)` tensor, clipping to `[0, 1]`.
    pub fn from_tensor(id: impl Into<String>, t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(dim_err!("expected rank 3 or 4 image tensor, got rank {r}")),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(dim_err!("expected 3 channels, got {c}"));
        }
        let pixels = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::from_clipped(id, h, w, pixels)
    }
}

/// Loads an 8- or 16-bit RGB raster, normalizing by the bit-depth maximum.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePatch> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match img {
        DynamicImage::ImageRgb8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageRgb16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| (v as f64 / 65535.0) as f32)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: expected an RGB image, found {} channel(s)",
                path.display(),
                other.color().channel_count()
            )))
        }
    };
    ImagePatch::new(id, h, w, pixels)
}

/// Writes an 8-bit RGB PNG (values rounded to the nearest level).
pub fn save_png(image: &ImagePatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = image
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, raw)
            .ok_or_else(|| dim_err!("pixel buffer does not match image dimensions"))?;
    ensure_parent(path)?;
    buf.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes a single-channel map in `[0, 1]` through a blue-to-red colormap.
pub fn colormap(values: &[f32], height: usize, width: usize, max: f32) -> Result<ImagePatch> {
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut pixels = Vec::with_capacity(values.len() * 3);
    for &v in values {
        let x = (v * scale).clamp(0.0, 1.0);
        // piecewise-linear blue -> cyan -> yellow -> red
        let (r, g, b) = if x < 1.0 / 3.0 {
            (0.0, 3.0 * x, 1.0)
        } else if x < 2.0 / 3.0 {
            let u = 3.0 * x - 1.0;
            (u, 1.0, 1.0 - u)
        } else {
            (1.0, 3.0 - 3.0 * x, 0.0)
        };
        pixels.extend_from_slice(&[r, g, b]);
    }
    ImagePatch::new("colormap", height, width, pixels)
}

/// Places images left to right; heights must match.
pub fn hconcat(images: &[&ImagePatch]) -> Result<ImagePatch> {
    let h = images.first().map(|i| i.height()).unwrap_or(0);
    if images.iter().any(|i| i.height() != h) {
        return Err(dim_err!("hconcat needs equal heights"));
    }
    let w: usize = images.iter().map(|i| i.width()).sum();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for im in images {
            let start = r * im.width() * 3;
            pixels.extend_from_slice(&im.pixels()[start..start + im.width() * 3]);
        }
    }
    ImagePatch::new("hconcat", h, w, pixels)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_rgb16(path: &Path, value: u16) {
        let buf: ImageBuffer<Rgb<u16>, _> =
            ImageBuffer::from_raw(16, 16, vec![value; 16 * 16 * 3]).unwrap();
        buf.save(path).unwrap();
    }

    #[test]
    fn eight_bit_extremes_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut raw = vec![0u8; 16 * 16 * 3];
        raw[0] = 255;
        let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(16, 16, raw).unwrap();
        buf.save(&p).unwrap();
        let im = load_image(&p).unwrap();
        assert_eq!(im.get(0, 0, 0), 1.0);
        assert_eq!(im.get(0, 0, 1), 0.0);
        assert_eq!(im.id, "a");
    }

    #[test]
    fn sixteen_bit_divides_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        write_rgb16(&p, 32768);
        let im = load_image(&p).unwrap();
        let expected = 32768.0f64 / 65535.0;
        assert!((im.get(3, 3, 2) as f64 - expected).abs() < 1e-7);
        assert!((im.get(3, 3, 2) - 0.500_007_63).abs() < 1e-7);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/nonexistent/nope.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn grayscale_is_format_error_naming_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let buf: ImageBuffer<image::Luma<u8>, _> =
            ImageBuffer::from_raw(16, 16, vec![7u8; 256]).unwrap();
        buf.save(&p).unwrap();
        match load_image(&p).unwrap_err() {
            Error::Format(msg) => assert!(msg.contains("1 channel"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn invariants_enforced() {
        assert!(ImagePatch::new("x", 8, 16, vec![0.0; 8 * 16 * 3]).is_err());
        assert!(ImagePatch::new("x", 16, 16, vec![1.5; 16 * 16 * 3]).is_err());
        assert!(ImagePatch::new("x", 16, 16, vec![f32::NAN; 16 * 16 * 3]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let px: Vec<f32> = (0..16 * 20 * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        let im = ImagePatch::new("t", 16, 20, px).unwrap();
        let t = im.to_tensor(DType::F32).unwrap();
        assert_eq!(t.dims(), &[1, 3, 16, 20]);
        let back = ImagePatch::from_tensor("t", &t).unwrap();
        assert_eq!(back, im);
    }

    #[test]
    fn png_round_trip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let px: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        let im = ImagePatch::new("c", 16, 16, px).unwrap();
        save_png(&im, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.pixels(), im.pixels());
    }
}
