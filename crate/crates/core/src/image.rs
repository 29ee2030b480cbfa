//! RGB images with real channel values, nominally in `[0, 1]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `height × width × 3`, channel-interleaved row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub const CHANNELS: usize = 3;

impl<T: Scalar> ImageTensor<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(Error::Dimension(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0);
        ImageTensor { height, width, data: vec![value; height * width * CHANNELS] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageTensor { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x, c| self.get(top + y, left + x, c)))
    }

    /// Extend to `height × width` by repeating the last row and column.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        Self::from_fn(height, width, |y, x, c| self.get(y.min(self.height - 1), x.min(self.width - 1), c))
    }

    /// Rotate 90° counter-clockwise.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(w, h, |y, x, c| self.get(x, w - 1 - y, c))
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// `[height * width, 3]` token matrix.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.pixels(), CHANNELS], self.data.clone()).expect("image dims are consistent")
    }
}

/// Equally sized images stacked as `[n * height * width, 3]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    len: usize,
    height: usize,
    width: usize,
    pixels: Tensor<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn from_images(images: &[ImageTensor<T>]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Dimension("empty image batch".into()))?;
        if images.iter().any(|im| !im.same_dims(first)) {
            return Err(Error::Dimension("images in a batch must share dimensions".into()));
        }
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            data.extend_from_slice(&im.data);
        }
        let pixels = Tensor::new(vec![images.len() * first.pixels(), CHANNELS], data)?;
        Ok(ImageBatch { len: images.len(), height: first.height, width: first.width, pixels })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> ImageTensor<T> {
        let n = self.height * self.width * CHANNELS;
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.pixels.data()[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn images(&self) -> Vec<ImageTensor<T>> {
        (0..self.len).map(|i| self.image(i)).collect()
    }

    pub fn pad_replicate(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let padded: Vec<_> = self.images().iter().map(|im| im.pad_replicate(height, width)).collect();
        ImageBatch::from_images(&padded).expect("padded images share dimensions")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_four_times_is_identity() {
        let img = ImageTensor::<f32>::from_fn(3, 5, |y, x, c| (y * 100 + x * 10 + c) as f32);
        let r = img.rotate90();
        assert_eq!((r.height(), r.width()), (5, 3));
        assert_eq!(r.rotate90().rotate90().rotate90(), img);
    }

    #[test]
    fn replicate_padding_copies_edges() {
        let img = ImageTensor::<f64>::from_fn(2, 2, |y, x, _| (y * 2 + x) as f64);
        let p = img.pad_replicate(3, 4);
        assert_eq!(p.get(2, 3, 0), 3.0);
        assert_eq!(p.get(0, 3, 1), 1.0);
        assert_eq!(p.crop(0, 0, 2, 2).unwrap(), img);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(ImageTensor::<f32>::new(2, 2, vec![0.0; 11]).is_err());
        assert!(ImageTensor::<f32>::filled(2, 2, 0.0).crop(1, 1, 2, 1).is_err());
    }
}
