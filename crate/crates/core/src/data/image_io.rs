//! PNG decoding and encoding to and from `[3, H, W]` tensors in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Caps decoded images; larger inputs are rejected before allocation.
pub const MAX_PIXELS: u64 = 4096 * 4096;

fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let reader = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| Error::Image(e.to_string()))?;
    if w as u64 * h as u64 > MAX_PIXELS || w == 0 || h == 0 {
        return Err(Error::Image(format!("image of {w}x{h} pixels is out of range")));
    }
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
    Ok(to_tensor(&img.to_rgb8()))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c}")));
    }
    let mut raw = vec![0u8; h * w * 3];
    for (p, px) in raw.chunks_exact_mut(3).enumerate() {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (t.data()[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Image("buffer size mismatch".into()))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb(t)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn write_png(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_png(t)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantised() {
        let t = Tensor::from_fn([3, 5, 7], |i| (i % 256) as f64 / 255.0);
        let back = decode_image(&encode_png(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), &[3, 5, 7]);
        assert!(back.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn garbage_rejected() {
        assert!(decode_image(b"not an image").is_err());
        assert!(decode_image(&[]).is_err());
    }
}
