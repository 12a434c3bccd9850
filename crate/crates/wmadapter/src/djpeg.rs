//! Differentiable JPEG approximation for training-time augmentation.
//!
//! Follows the baseline codec: RGB -> YCbCr, 8x8 orthonormal block DCT,
//! quality-scaled quantization (the standard table-scaling rule), then the
//! inverse path. Quantization rounding uses a straight-through estimator, so
//! gradients flow while the forward value matches hard rounding. No chroma
//! subsampling (the reference codec here encodes 4:4:4). Evaluation-time
//! attacks always use the real codec, never this approximation.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::images::to_unit;

const LUMA_TABLE: [f32; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

const CHROMA_TABLE: [f32; 64] = [
    17.0, 18.0, 24.0, 47.0, 99.0, 99.0, 99.0, 99.0, //
    18.0, 21.0, 26.0, 66.0, 99.0, 99.0, 99.0, 99.0, //
    24.0, 26.0, 56.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    47.0, 66.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
];

/// Standard quality scaling: tables scaled by `5000/q` below 50, `200 - 2q`
/// at or above, floored at 1.
fn scaled_table(base: &[f32; 64], quality: u32) -> Vec<f32> {
    let scale = if quality < 50 {
        5000.0 / quality as f32
    } else {
        200.0 - 2.0 * quality as f32
    };
    base.iter()
        .map(|&t| ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
        .collect()
}

/// Orthonormal DCT-II basis, 8x8.
fn dct_matrix(dtype: DType, device: &Device) -> Result<Tensor> {
    let mut vals = Vec::with_capacity(64);
    for u in 0..8 {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for x in 0..8 {
            vals.push(c * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos());
        }
    }
    Ok(Tensor::from_vec(vals, (8, 8), device)?.to_dtype(dtype)?)
}

/// Forward value of hard rounding, gradient of identity.
fn straight_through_round(x: &Tensor) -> Result<Tensor> {
    let hard = x.round()?.sub(x)?.detach();
    Ok(x.add(&hard)?)
}

fn pad_to_multiple_of_8(x: &Tensor) -> Result<(Tensor, usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    let mut out = x.clone();
    let ph = (8 - h % 8) % 8;
    let pw = (8 - w % 8) % 8;
    if ph > 0 {
        let edge = out.narrow(2, h - 1, 1)?;
        let reps: Vec<Tensor> = std::iter::once(out.clone())
            .chain(std::iter::repeat_n(edge, ph))
            .collect();
        out = Tensor::cat(&reps, 2)?;
    }
    if pw > 0 {
        let (_, _, _, cur_w) = out.dims4()?;
        let edge = out.narrow(3, cur_w - 1, 1)?;
        let reps: Vec<Tensor> = std::iter::once(out.clone())
            .chain(std::iter::repeat_n(edge, pw))
            .collect();
        out = Tensor::cat(&reps, 3)?;
    }
    Ok((out, h, w))
}

fn blockify(x: &Tensor) -> Result<(Tensor, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (hb, wb) = (h / 8, w / 8);
    let t = x
        .reshape((n, c, hb, 8, wb, 8))?
        .permute((0, 1, 2, 4, 3, 5))?
        .contiguous()?
        .reshape((n * c * hb * wb, 8, 8))?;
    Ok((t, n, c, hb, wb))
}

fn unblockify(t: &Tensor, n: usize, c: usize, hb: usize, wb: usize) -> Result<Tensor> {
    Ok(t
        .reshape((n, c, hb, wb, 8, 8))?
        .permute((0, 1, 2, 4, 3, 5))?
        .contiguous()?
        .reshape((n, c, hb * 8, wb * 8))?)
}

fn quantize_plane(plane: &Tensor, table: &Tensor, dct: &Tensor) -> Result<Tensor> {
    let (blocks, n, c, hb, wb) = blockify(plane)?;
    let dct_b = dct.unsqueeze(0)?;
    let dct_t = dct.t()?.unsqueeze(0)?;
    let coeffs = dct_b.broadcast_matmul(&blocks)?.broadcast_matmul(&dct_t)?;
    let q = straight_through_round(&coeffs.broadcast_div(table)?)?;
    let deq = q.broadcast_mul(table)?;
    let rec = dct_t.broadcast_matmul(&deq)?.broadcast_matmul(&dct_b)?;
    unblockify(&rec, n, c, hb, wb)
}

/// Differentiable JPEG round trip at the given quality, `[-1,1]` in and out.
pub fn differentiable_jpeg(x: &Tensor, quality: u32) -> Result<Tensor> {
    if !(10..=100).contains(&quality) {
        return Err(Error::Config(format!(
            "jpeg quality must be in [10, 100], got {quality}"
        )));
    }
    let (_, c, _, _) = x.dims4().map_err(|_| Error::Shape {
        context: "differentiable_jpeg".to_string(),
        expected: "(n, 3, h, w)".to_string(),
        actual: format!("{:?}", x.shape()),
    })?;
    if c != 3 {
        return Err(Error::Shape {
            context: "differentiable_jpeg".to_string(),
            expected: "3 channels".to_string(),
            actual: format!("{c} channels"),
        });
    }
    let dtype = x.dtype();
    let device = x.device();

    let v255 = to_unit(x)?.affine(255.0, 0.0)?;
    let r = v255.narrow(1, 0, 1)?;
    let g = v255.narrow(1, 1, 1)?;
    let b = v255.narrow(1, 2, 1)?;
    // JFIF conversion; luma shifted by -128 for the DCT, chroma already
    // centered (the +128 offset and level shift cancel).
    let y = (r.affine(0.299, 0.0)? + g.affine(0.587, 0.0)?)?
        .add(&b.affine(0.114, -128.0)?)?;
    let cb = (r.affine(-0.168736, 0.0)? + g.affine(-0.331264, 0.0)?)?
        .add(&b.affine(0.5, 0.0)?)?;
    let cr = (r.affine(0.5, 0.0)? + g.affine(-0.418688, 0.0)?)?
        .add(&b.affine(-0.081312, 0.0)?)?;

    let dct = dct_matrix(dtype, device)?;
    let luma_t = Tensor::from_vec(scaled_table(&LUMA_TABLE, quality), (8, 8), device)?
        .to_dtype(dtype)?;
    let chroma_t = Tensor::from_vec(scaled_table(&CHROMA_TABLE, quality), (8, 8), device)?
        .to_dtype(dtype)?;

    let (y_pad, h0, w0) = pad_to_multiple_of_8(&y)?;
    let (cb_pad, _, _) = pad_to_multiple_of_8(&cb)?;
    let (cr_pad, _, _) = pad_to_multiple_of_8(&cr)?;

    let y_rec = quantize_plane(&y_pad, &luma_t, &dct)?.narrow(2, 0, h0)?.narrow(3, 0, w0)?;
    let cb_rec = quantize_plane(&cb_pad, &chroma_t, &dct)?.narrow(2, 0, h0)?.narrow(3, 0, w0)?;
    let cr_rec = quantize_plane(&cr_pad, &chroma_t, &dct)?.narrow(2, 0, h0)?.narrow(3, 0, w0)?;

    let y_full = y_rec.affine(1.0, 128.0)?;
    let r = y_full.add(&cr_rec.affine(1.402, 0.0)?)?;
    let g = y_full
        .add(&cb_rec.affine(-0.344136, 0.0)?)?
        .add(&cr_rec.affine(-0.714136, 0.0)?)?;
    let b = y_full.add(&cb_rec.affine(1.772, 0.0)?)?;
    let rgb = Tensor::cat(&[&r, &g, &b], 1)?;
    let unit = rgb.affine(1.0 / 255.0, 0.0)?.clamp(0.0, 1.0)?;
    Ok(unit.affine(2.0, -1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn device() -> Device {
        Device::Cpu
    }

    /// Mixed-gradient test pattern with texture, in [-1,1].
    fn fixture(n: usize, size: usize) -> Tensor {
        let mut vals = Vec::with_capacity(n * 3 * size * size);
        for img in 0..n {
            for c in 0..3 {
                for i in 0..size {
                    for j in 0..size {
                        let fx = (img + 1) as f32 * 0.13 + c as f32 * 0.07;
                        let v = (i as f32 * fx * 0.4).sin() * 0.4
                            + (j as f32 * 0.23 + c as f32).cos() * 0.3
                            + ((i + j) as f32 * 0.05).sin() * 0.2;
                        vals.push(v.clamp(-1.0, 1.0));
                    }
                }
            }
        }
        Tensor::from_vec(vals, (n, 3, size, size), &device()).unwrap()
    }

    fn psnr_unit(a: &Tensor, b: &Tensor) -> f64 {
        let d = a.sub(b).unwrap();
        let mse = d
            .sqr()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
            / 4.0; // [-1,1] -> [0,1] scale factor squared
        10.0 * (1.0 / mse.max(1e-12)).log10()
    }

    #[test]
    fn quality_100_nearly_lossless() {
        let x = fixture(1, 32);
        let y = differentiable_jpeg(&x, 100).unwrap();
        let psnr = psnr_unit(&x, &y);
        assert!(psnr >= 40.0, "psnr {psnr}");
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::full(0.25f32, (1, 3, 16, 16), &device()).unwrap();
        let y = differentiable_jpeg(&x, 60).unwrap();
        for c in 0..3 {
            let plane = y.narrow(1, c, 1).unwrap().flatten_all().unwrap();
            let min = plane.min(0).unwrap().to_scalar::<f32>().unwrap();
            let max = plane.max(0).unwrap().to_scalar::<f32>().unwrap();
            assert!(max - min < 1e-5, "channel {c}: {min}..{max}");
        }
    }

    #[test]
    fn matches_reference_codec_at_q80() {
        let x = crate::images::ImageBatch::new(fixture(2, 64)).unwrap();
        let approx = differentiable_jpeg(x.tensor(), 80).unwrap();

        // Reference codec round trip through 8-bit data.
        let mut decoded = Vec::new();
        for img in x.to_rgb8().unwrap() {
            let mut buf = Vec::new();
            let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, 80);
            use image::ImageEncoder;
            enc.write_image(
                img.as_raw(),
                img.width(),
                img.height(),
                image::ExtendedColorType::Rgb8,
            )
            .unwrap();
            decoded.push(image::load_from_memory(&buf).unwrap().to_rgb8());
        }
        let reference = crate::images::ImageBatch::from_rgb8(&decoded, &device()).unwrap();

        let mad = approx
            .sub(reference.tensor())
            .unwrap()
            .abs()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
            / 2.0; // [-1,1] -> [0,1]
        assert!(mad <= 0.02, "mean abs difference vs codec: {mad}");
    }

    #[test]
    fn padding_handles_non_multiple_of_8() {
        let x = fixture(1, 70).narrow(2, 0, 67).unwrap().narrow(3, 0, 70).unwrap();
        let x = x.contiguous().unwrap();
        let y = differentiable_jpeg(&x, 80).unwrap();
        assert_eq!(y.dims(), x.dims());
    }

    #[test]
    fn gradients_flow_through() {
        let var = Var::from_tensor(&fixture(1, 16)).unwrap();
        let y = differentiable_jpeg(var.as_tensor(), 70).unwrap();
        let loss = y.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&var).expect("input gradient");
        let gmax = g.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(gmax > 0.0);
    }

    #[test]
    fn rejects_bad_quality() {
        let x = fixture(1, 16);
        assert!(differentiable_jpeg(&x, 5).is_err());
        assert!(differentiable_jpeg(&x, 101).is_err());
    }
}
