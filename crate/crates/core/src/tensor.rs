//! Small tensor helpers shared by every module: image conversion, activations
//! and resampling written in terms of ops that have well-behaved gradients.

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Rgb, RgbImage};

use crate::error::{shape_err, Result};

pub const DEVICE: Device = Device::Cpu;

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// RGB image to a `(3, H, W)` tensor with values mapped to `[-1, 1]`.
pub fn rgb_to_tensor(img: &RgbImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &DEVICE)?.to_dtype(dtype)?)
}

/// Grayscale mask to a `(1, H, W)` tensor in `[0, 1]`.
pub fn gray_to_tensor(img: &GrayImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.pixels().map(|p| p[0] as f32 / 255.0).collect();
    Ok(Tensor::from_vec(data, (1, h as usize, w as usize), &DEVICE)?.to_dtype(dtype)?)
}

/// `(3, H, W)` tensor in `[-1, 1]` back to an 8-bit image. Values are clamped
/// here and nowhere else.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(shape_err!("expected 3 channels, got {c}"));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                let val = data[ch * h * w + y * w + x];
                *v = ((val + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// `(1, H, W)` tensor in `[0, 1]` to an 8-bit mask image.
pub fn tensor_to_gray(t: &Tensor) -> Result<GrayImage> {
    let (_, h, w) = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let buf = data
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::from_raw(w as u32, h as u32, buf).ok_or_else(|| shape_err!("mask buffer"))
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LEAKY_SLOPE)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Nearest-neighbour upsampling of a `(B, C, H, W)` tensor by an integer factor.
///
/// Built from broadcast + reshape so that the backward pass accumulates into
/// the input gradient like any other op.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?;
    Ok(y)
}

/// Nearest resize of a square map to `size`; `size` must be a multiple of the
/// input size.
pub fn resize_nearest(x: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h != w || size % h != 0 {
        return Err(shape_err!("cannot nearest-resize {h}x{w} to {size}x{size}"));
    }
    upsample_nearest(x, size / h)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_gradient_accumulates_with_other_uses() {
        let x = candle_core::Var::from_tensor(
            &Tensor::arange(0f32, 4., &DEVICE).unwrap().reshape((1, 1, 2, 2)).unwrap(),
        )
        .unwrap();
        let up = upsample_nearest(x.as_tensor(), 2).unwrap();
        // x also used directly: d/dx [sum(up) + sum(x)] = 4 + 1
        let loss = (up.sum_all().unwrap() + x.as_tensor().sum_all().unwrap()).unwrap();
        let g = loss.backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(gx, vec![5.0; 4]);
    }

    #[test]
    fn image_roundtrip_is_lossless() {
        let mut img = RgbImage::new(3, 2);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = Rgb([i as u8 * 40, 255 - i as u8 * 7, 3]);
        }
        let t = rgb_to_tensor(&img, DType::F32).unwrap();
        assert_eq!(tensor_to_rgb(&t).unwrap(), img);
    }
}
