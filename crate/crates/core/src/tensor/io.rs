//! 8-bit PNG and binary PPM (P6) image files.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

/// An image with values in `[0, 1]`, stored row-major as `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image extents must be >= 1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::shape("image value count does not match extents"));
        }
        Ok(Image {
            height,
            width,
            channels,
            values,
        })
    }

    /// Build from a single-item `1 × H × W × C` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, h, w, c) = t.dims4()?;
        if b != 1 {
            return Err(Error::shape("image tensors must have batch extent 1"));
        }
        Image::new(h, w, c, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.height, self.width, self.channels],
            self.values.clone(),
        )
        .expect("image extents are valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Replicate a gray image into three channels; RGB images are returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let values = self.values.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            values,
        }
    }

    /// BT.601 luma as a single-channel image.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let values = self
            .values
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            values,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "ppm" || e == "pnm"
    )
}

/// Load a PNG (8-bit gray or RGB) or binary PPM file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes, path);
    }
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = match decoded {
        image::DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        image::DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported pixel format {:?} (need 8-bit gray or RGB)", other.color()),
            ))
        }
    };
    Image::new(h, w, channels, raw.iter().map(|&v| v as f64 / 255.0).collect())
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    // header: "P6" <ws> width <ws> height <ws> maxval <single ws> data
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(path, "truncated PPM header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed PPM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed PPM header number"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("unsupported PPM bit depth (maxval {maxval}, need 255)"),
        ));
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::format(path, "malformed PPM header terminator"));
    }
    pos += 1;
    let n = w * h * 3;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::format(path, "truncated PPM pixel data"))?;
    Image::new(h, w, 3, data.iter().map(|&v| v as f64 / 255.0).collect())
}

/// Save as PPM when the extension is `.ppm`, otherwise PNG. Values are clamped.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.to_bytes();
    if is_ppm(path) {
        let rgb = if img.channels == 3 {
            bytes
        } else {
            bytes.iter().flat_map(|&v| [v, v, v]).collect()
        };
        let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
        out.extend_from_slice(&rgb);
        return fs::write(path, out).map_err(|e| Error::io(path, e));
    }
    let color = if img.channels == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}
