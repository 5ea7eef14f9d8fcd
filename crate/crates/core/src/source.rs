//! Source images as `3 x H x W` arrays in `[0, 1]`.

use hjscc_nn::Tensor;
use image::RgbImage;

use crate::error::{HjsccError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(HjsccError::Contract(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        let data = Tensor::from_vec(&[3, height, width], data)?;
        Ok(Self { data })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let s = t.shape().to_vec();
        let (h, w) = match s.as_slice() {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => {
                return Err(HjsccError::Contract(format!(
                    "expected a 3xHxW image, got {s:?}"
                )))
            }
        };
        Self::new(h, w, t.into_data())
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = f64::from(p[c]) / 255.0;
            }
        }
        Self {
            data: Tensor::from_vec(&[3, h, w], data).expect("shape"),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.data.data();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (d[(c * h + y as usize) * w + x as usize] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Source dimension count `N = 3 * H * W`.
    pub fn num_source_dims(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    /// Checks `H` and `W` are multiples of `factor`.
    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        if !self.height().is_multiple_of(factor) || !self.width().is_multiple_of(factor) {
            return Err(HjsccError::Config(format!(
                "image {}x{} is not divisible by the hierarchy downsampling factor {factor}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(HjsccError::Contract(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let (h, w) = (self.height(), self.width());
        let d = self.data.data();
        let mut out = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in top..top + height {
                let row = (c * h + y) * w;
                out.extend_from_slice(&d[row + left..row + left + width]);
            }
        }
        Ok(Self {
            data: Tensor::from_vec(&[3, height, width], out)?,
        })
    }

    /// Pad right and bottom by edge replication up to multiples of `factor`.
    pub fn pad_to_multiple(&self, factor: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        let ph = h.div_ceil(factor) * factor;
        let pw = w.div_ceil(factor) * factor;
        if ph == h && pw == w {
            return self.clone();
        }
        let d = self.data.data();
        let mut out = Vec::with_capacity(3 * ph * pw);
        for c in 0..3 {
            for y in 0..ph {
                let sy = y.min(h - 1);
                for x in 0..pw {
                    out.push(d[(c * h + sy) * w + x.min(w - 1)]);
                }
            }
        }
        Self {
            data: Tensor::from_vec(&[3, ph, pw], out).expect("shape"),
        }
    }

    /// Batch of images as an `[N, 3, H, W]` tensor.
    pub fn batch(images: &[ImageTensor]) -> Result<Tensor> {
        let parts: Vec<Tensor> = images.iter().map(|i| i.data.clone()).collect();
        Ok(Tensor::stack(&parts)?)
    }
}
