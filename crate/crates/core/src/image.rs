//! The pipeline's image currency: an `H×W×3` float array with values in `[0, 1]`.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major, channel-interleaved RGB image stored in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image must have positive area, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Dimension(format!(
                "buffer of {} values does not match {height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn ensure_same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Image::from_fn(h, w, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    /// Counter-clockwise rotation by `quarter_turns * 90` degrees.
    pub fn rot90(&self, quarter_turns: u8) -> Image {
        let (h, w) = self.dims();
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Image::from_fn(w, h, |y, x, c| self.get(x, w - 1 - y, c)).unwrap(),
            2 => Image::from_fn(h, w, |y, x, c| self.get(h - 1 - y, w - 1 - x, c)).unwrap(),
            _ => Image::from_fn(w, h, |y, x, c| self.get(h - 1 - x, y, c)).unwrap(),
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c)).unwrap()
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, c| self.get(self.height - 1 - y, x, c)).unwrap()
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Self::batch_to_tensor(std::slice::from_ref(self), dtype, device)?)
    }

    /// Stacks equally sized images into an `(N, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dimension("empty image batch".into()))?;
        let (h, w) = first.dims();
        let mut planar: Vec<f64> = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            first.ensure_same_dims(img, "batch images differ in size")?;
            for c in 0..CHANNELS {
                planar.extend(img.data.iter().skip(c).step_by(CHANNELS));
            }
        }
        let t = Tensor::from_vec(planar, (images.len(), CHANNELS, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::batch_to_tensor`]; accepts `(N, 3, H, W)` or `(3, H, W)`.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let t = match t.rank() {
            3 => t.unsqueeze(0)?,
            4 => t.clone(),
            r => return Err(Error::Dimension(format!("expected rank 3 or 4, got {r}"))),
        };
        let (n, c, h, w) = t.dims4()?;
        if c != CHANNELS {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let plane = h * w;
        (0..n)
            .map(|i| {
                let base = i * CHANNELS * plane;
                let mut data = vec![0.0; CHANNELS * plane];
                for ch in 0..CHANNELS {
                    for p in 0..plane {
                        data[p * CHANNELS + ch] = flat[base + ch * plane + p];
                    }
                }
                Image::new(h, w, data)
            })
            .collect()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let mut v = Self::batch_from_tensor(t)?;
        if v.len() != 1 {
            return Err(Error::Dimension(format!(
                "expected a single image, got a batch of {}",
                v.len()
            )));
        }
        Ok(v.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| (y * 100 + x * 10 + c) as f64).unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = ramp(3, 5);
        let r = img.rot90(1).rot90(1).rot90(1).rot90(1);
        assert_eq!(r, img);
        assert_eq!(img.rot90(1).dims(), (5, 3));
    }

    #[test]
    fn rot90_moves_top_right_to_top_left() {
        let img = ramp(3, 5);
        // counter-clockwise: the right column becomes the top row
        assert_eq!(img.rot90(1).get(0, 0, 0), img.get(0, 4, 0));
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(4, 6).map(|v| v / 1000.0);
        let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 6]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}
