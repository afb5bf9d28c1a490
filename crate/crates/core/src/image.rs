//! Binary PPM (P6) images and conversion to the network input tensor.

use std::fs;
use std::path::Path;

use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Config(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        RgbImage {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        parse_ppm(&fs::read(path)?)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Draws a rectangle outline of `thickness` pixels for a normalized box.
    pub fn draw_box(&mut self, b: &BBox, rgb: [u8; 3], thickness: usize) {
        let to_px = |v: f32, extent: usize| -> usize {
            ((v.clamp(0.0, 1.0) * extent as f32).round() as usize).min(extent - 1)
        };
        let (x0, x1) = (to_px(b.xmin, self.width), to_px(b.xmax, self.width));
        let (y0, y1) = (to_px(b.ymin, self.height), to_px(b.ymax, self.height));
        for t in 0..thickness {
            for x in x0..=x1 {
                for y in [y0 + t, y1.saturating_sub(t)] {
                    if y < self.height {
                        self.put(x, y, rgb);
                    }
                }
            }
            for y in y0..=y1 {
                for x in [x0 + t, x1.saturating_sub(t)] {
                    if x < self.width {
                        self.put(x, y, rgb);
                    }
                }
            }
        }
    }
}

/// Parses a binary P6 PPM. Header comments are allowed; `maxval` below 255 is rescaled.
pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "not a binary PPM (expected P6)"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(Error::format(start, format!("expected {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start, format!("{name} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(3, "zero image extent"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format(pos, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "missing whitespace after header")),
    }
    let len = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::format(3, "image extents overflow"))?;
    let data = bytes.get(pos..pos + len).ok_or_else(|| {
        Error::format(
            bytes.len(),
            format!("pixel data truncated, need {len} bytes"),
        )
    })?;
    let pixels = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| {
                ((v.min(maxval as u8) as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8
            })
            .collect()
    };
    RgbImage::new(width, height, pixels)
}

/// Resize and normalisation applied before the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub size: usize,
    /// Subtracted from the B, G, R planes respectively.
    pub mean_bgr: [f32; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            size: 300,
            mean_bgr: [104.0, 117.0, 123.0],
        }
    }
}

/// Bilinear resize (half-pixel centres, edge clamped) to `size x size`, BGR planes,
/// per-channel mean subtraction. Returns a `1x3xSxS` tensor.
pub fn preprocess_image(img: &RgbImage, cfg: &Preprocess) -> Tensor {
    let size = cfg.size;
    let xs = sample_grid(img.width, size);
    let ys = sample_grid(img.height, size);
    let mut data = vec![0.0f32; 3 * size * size];
    for (plane, (rgb_index, mean)) in [
        (2usize, cfg.mean_bgr[0]),
        (1, cfg.mean_bgr[1]),
        (0, cfg.mean_bgr[2]),
    ]
    .into_iter()
    .enumerate()
    {
        let out = &mut data[plane * size * size..(plane + 1) * size * size];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let px = |x: usize, y: usize| img.get(x, y)[rgb_index] as f32;
                let top = lerp(px(x0, y0), px(x1, y0), fx);
                let bottom = lerp(px(x0, y1), px(x1, y1), fx);
                out[oy * size + ox] = lerp(top, bottom, fy) - mean;
            }
        }
    }
    Tensor::new(Shape::new(1, 3, size, size), data).expect("preprocess shape")
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Source taps and weight for each destination coordinate.
fn sample_grid(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}
