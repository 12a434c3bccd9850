//! Image and latent batch conventions.
//!
//! Images live in `[-1, 1]` everywhere inside the toolkit; the affine map
//! `(x + 1) / 2` (clamped) is applied exactly once, at codec and metric
//! boundaries. 8-bit data uses `round(unit * 255)`.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

/// N x 3 x H x W batch in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    /// Wraps a tensor, enforcing layout; the range invariant is checked in
    /// debug builds only.
    pub fn new(t: Tensor) -> Result<Self> {
        let (_, c, _, _) = t.dims4().map_err(|_| Error::Shape {
            context: "ImageBatch::new".to_string(),
            expected: "(n, 3, h, w)".to_string(),
            actual: format!("{:?}", t.shape()),
        })?;
        if c != 3 {
            return Err(Error::Shape {
                context: "ImageBatch::new".to_string(),
                expected: "3 channels".to_string(),
                actual: format!("{c} channels"),
            });
        }
        debug_assert_range(&t, "ImageBatch::new");
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("validated at construction")
    }

    pub fn len(&self) -> usize {
        self.dims().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<ImageBatch> {
        Ok(Self(self.0.narrow(0, i, 1)?))
    }

    /// `[0, 1]` view for codecs and metrics.
    pub fn to_unit(&self) -> Result<Tensor> {
        Ok(to_unit(&self.0)?)
    }

    /// Wraps a `[0, 1]` tensor back into the internal convention.
    pub fn from_unit(t: &Tensor) -> Result<Self> {
        let x = ((t.clamp(0.0, 1.0)? * 2.0)? - 1.0)?;
        Self::new(x)
    }

    pub fn to_rgb8(&self) -> Result<Vec<RgbImage>> {
        let (n, _, h, w) = self.dims();
        let unit = self.to_unit()?.to_dtype(DType::F32)?;
        let data = unit.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let base = i * 3 * plane;
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let idx = y as usize * w + x as usize;
                let px = |c: usize| {
                    let v = data[base + c * plane + idx];
                    (v * 255.0).round().clamp(0.0, 255.0) as u8
                };
                image::Rgb([px(0), px(1), px(2)])
            });
            out.push(img);
        }
        Ok(out)
    }

    pub fn from_rgb8(images: &[RgbImage], device: &Device) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("empty image list".to_string()));
        }
        let (w, h) = images[0].dimensions();
        let plane = (w * h) as usize;
        let mut data = Vec::with_capacity(images.len() * 3 * plane);
        for img in images {
            if img.dimensions() != (w, h) {
                return Err(Error::Shape {
                    context: "ImageBatch::from_rgb8".to_string(),
                    expected: format!("{w}x{h}"),
                    actual: format!("{:?}", img.dimensions()),
                });
            }
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let v = img.get_pixel(x, y).0[c] as f32 / 255.0;
                        data.push(v * 2.0 - 1.0);
                    }
                }
            }
        }
        let t = Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?;
        Self::new(t)
    }
}

/// Maps `[-1, 1]` to clamped `[0, 1]`.
pub fn to_unit(t: &Tensor) -> candle_core::Result<Tensor> {
    (t.clamp(-1.0, 1.0)? + 1.0)? / 2.0
}

/// Debug-build range check applied at module boundaries.
pub fn debug_assert_range(t: &Tensor, context: &str) {
    if cfg!(debug_assertions) {
        let check = || -> candle_core::Result<(f64, f64)> {
            let f = t.to_dtype(DType::F64)?.flatten_all()?;
            let min = f.min(0)?.to_scalar::<f64>()?;
            let max = f.max(0)?.to_scalar::<f64>()?;
            Ok((min, max))
        };
        if let Ok((min, max)) = check() {
            debug_assert!(
                (-1.0001..=1.0001).contains(&min) && (-1.0001..=1.0001).contains(&max),
                "{context}: image values outside [-1, 1]: min {min}, max {max}"
            );
        }
    }
}

/// N x C x h x w latent batch.
#[derive(Clone, Debug)]
pub struct LatentBatch(Tensor);

impl LatentBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims4().map_err(|_| Error::Shape {
            context: "LatentBatch::new".to_string(),
            expected: "(n, c, h, w)".to_string(),
            actual: format!("{:?}", t.shape()),
        })?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("validated at construction")
    }

    pub fn channels(&self) -> usize {
        self.dims().1
    }

    pub fn len(&self) -> usize {
        self.dims().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<LatentBatch> {
        Ok(Self(self.0.narrow(0, i, 1)?))
    }
}
