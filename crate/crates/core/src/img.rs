//! In-memory RGB images and the small amount of I/O the pipeline needs.
//!
//! Pixels are f32 in [0, 1], stored channel-major (all of red, then green,
//! then blue) so an image feeds the convolutional extractor without a
//! transpose.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("decode: {0}")]
    Decode(#[from] image::ImageError),
    #[error("bad image data: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_channel_major(
        width: usize,
        height: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if data.len() != 3 * width * height {
            return Err(ImageError::Format(format!(
                "expected {} samples for {}x{}, got {}",
                3 * width * height,
                width,
                height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel_major(&self) -> &[f32] {
        &self.data
    }

    pub fn channel_major_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let at = y * self.width + x;
        [self.data[at], self.data[plane + at], self.data[2 * plane + at]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.width * self.height;
        let at = y * self.width + x;
        self.data[at] = rgb[0];
        self.data[plane + at] = rgb[1];
        self.data[2 * plane + at] = rgb[2];
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).unwrap()
    }

    /// Bilinear resample with half-pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, self.height as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, self.width as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                let p00 = self.get(x0, y0);
                let p10 = self.get(x1, y0);
                let p01 = self.get(x0, y1);
                let p11 = self.get(x1, y1);
                let mut px = [0.0f32; 3];
                for c in 0..3 {
                    let top = p00[c] * (1.0 - wx) + p10[c] * wx;
                    let bot = p01[c] * (1.0 - wx) + p11[c] * wx;
                    px[c] = top * (1.0 - wy) + bot * wy;
                }
                out.set(x, y, px);
            }
        }
        out
    }

    fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut bytes = Vec::with_capacity(3 * plane);
        for at in 0..plane {
            for c in 0..3 {
                bytes.push((self.data[c * plane + at].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        bytes
    }

    fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0f32; 3 * plane];
        for at in 0..plane {
            for c in 0..3 {
                data[c * plane + at] = bytes[3 * at + c] as f32 / 255.0;
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.to_rgb8())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String, ImageError> {
            while pos < bytes.len() {
                match bytes[pos] {
                    b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Format("truncated ppm header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token(&bytes)?;
        if magic != "P6" {
            return Err(ImageError::Format(format!("unsupported ppm magic {magic}")));
        }
        let width: usize = token(&bytes)?
            .parse()
            .map_err(|_| ImageError::Format("bad width".into()))?;
        let height: usize = token(&bytes)?
            .parse()
            .map_err(|_| ImageError::Format("bad height".into()))?;
        let maxval = token(&bytes)?;
        if maxval != "255" {
            return Err(ImageError::Format(format!("unsupported maxval {maxval}")));
        }
        pos += 1;
        let need = 3 * width * height;
        if bytes.len() < pos + need {
            return Err(ImageError::Format("truncated ppm pixel data".into()));
        }
        Ok(Self::from_rgb8(width, height, &bytes[pos..pos + need]))
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let buf = self.to_rgb8();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )?;
        Ok(())
    }

    /// Reads any format the decoder understands; alpha is composited over
    /// white, matching the renderer's default background.
    pub fn read_png(path: &Path) -> Result<Self, ImageError> {
        let decoded = image::open(path)?.to_rgba8();
        let (width, height) = (decoded.width() as usize, decoded.height() as usize);
        let plane = width * height;
        let mut data = vec![0.0f32; 3 * plane];
        for (at, px) in decoded.pixels().enumerate() {
            let alpha = px[3] as f32 / 255.0;
            for c in 0..3 {
                let v = px[c] as f32 / 255.0;
                data[c * plane + at] = v * alpha + (1.0 - alpha);
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Dispatches on extension: .png via the decoder, anything else as binary
    /// ppm.
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => self.write_png(path),
            _ => self.write_ppm(path),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => Self::read_ppm(path),
            _ => Self::read_png(path),
        }
    }
}

/// Peak signal-to-noise ratio in dB against a unit dynamic range. Identical
/// images give infinity.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, ImageError> {
    if a.width != b.width || a.height != b.height {
        return Err(ImageError::Format(format!(
            "size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}
