//! Dense NCHW tensors and the raw `TNSR` file format.
//!
//! A `TNSR` file is the 4-byte magic `TNSR`, four little-endian `u32` extents
//! `(n, c, h, w)`, then `n*c*h*w` little-endian `f32` values in row-major order.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";

/// Extents of a rank-4 tensor in (batch, channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        assert!(!shape.dims().contains(&0), "zero extent in {shape}");
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    /// Contiguous `h*w` plane for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Data for one batch item, all channels.
    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies channels `start..start + count` into a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let s = self.shape;
        if count == 0 || start + count > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} out of {}", start + count, s.c),
            ));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * count * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Tensor::new(Shape::new(s.n, count, s.h, s.w), data)
    }

    pub fn to_tnsr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(TNSR_MAGIC);
        for d in self.shape.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_tnsr_bytes(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 4 || &bytes[..4] != TNSR_MAGIC {
            return Err(Error::format(0, "missing TNSR magic"));
        }
        if bytes.len() < 20 {
            return Err(Error::format(bytes.len(), "truncated TNSR header"));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let at = 4 + 4 * i;
            *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            if *d == 0 {
                return Err(Error::format(at, "zero extent"));
            }
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = &bytes[20..];
        let expected = shape
            .dims()
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(4, "extents overflow"))?;
        if payload.len() != expected {
            return Err(Error::format(
                20 + payload.len().min(expected),
                format!("payload is {} bytes, expected {expected}", payload.len()),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn read_tnsr(path: impl AsRef<Path>) -> Result<Tensor> {
        Tensor::from_tnsr_bytes(&fs::read(path)?)
    }

    pub fn write_tnsr(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tnsr_bytes())?;
        Ok(())
    }
}
