//! Dense row-major arrays plus the planar image/latent wrappers built on them.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(shape, self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Channel-planar `C×H×W` array shared by images and latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::shape((channels, height, width), data.len()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }
}

/// Image with values in `[0, 1]`; 3 (RGB) or 4 (RGBA) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Planes);

impl ImageTensor {
    /// Builds an image, clipping every value into `[0, 1]`.
    pub fn new(channels: usize, height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 3 && channels != 4 {
            return Err(Error::InvalidArgument(format!(
                "image must have 3 or 4 channels, got {channels}"
            )));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self(Planes::new(channels, height, width, data)?))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self(Planes::filled(channels, height, width, value.clamp(0.0, 1.0)))
    }

    pub fn from_planes(planes: Planes) -> Result<Self> {
        Self::new(planes.channels, planes.height, planes.width, planes.data)
    }

    pub fn planes(&self) -> &Planes {
        &self.0
    }

    pub fn into_planes(self) -> Planes {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.get(c, y, x)
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.0.set(c, y, x, v.clamp(0.0, 1.0))
    }

    pub fn is_rgb(&self) -> bool {
        self.0.channels == 3
    }

    /// RGB part of an RGBA image (or a copy of an RGB one).
    pub fn rgb(&self) -> ImageTensor {
        let n = self.height() * self.width();
        ImageTensor(Planes {
            channels: 3,
            height: self.height(),
            width: self.width(),
            data: self.0.data[..3 * n].to_vec(),
        })
    }

    /// Alpha plane; all ones for an RGB image.
    pub fn alpha(&self) -> Vec<f64> {
        if self.channels() == 4 {
            self.0.plane(3).to_vec()
        } else {
            vec![1.0; self.height() * self.width()]
        }
    }

    /// Snaps every value onto the 8-bit grid so PNG storage is lossless.
    pub fn quantize8(&mut self) {
        for v in &mut self.0.data {
            *v = quantize8(*v);
        }
    }

    pub fn quantized8(mut self) -> Self {
        self.quantize8();
        self
    }

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }
}

#[inline]
pub fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Latent array `f×h×w` produced by a codec; values must stay finite.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor(Planes);

impl LatentTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent contains non-finite values".into()));
        }
        Ok(Self(Planes::new(channels, height, width, data)?))
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Planes::filled(channels, height, width, 0.0))
    }

    pub fn from_planes(planes: Planes) -> Result<Self> {
        Self::new(planes.channels, planes.height, planes.width, planes.data)
    }

    pub fn planes(&self) -> &Planes {
        &self.0
    }

    pub fn into_planes(self) -> Planes {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
