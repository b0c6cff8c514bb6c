//! Support chip preparation and query resizing.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::tensor::Tensor;

/// Region of a chip holding image content; everything else is zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContentRect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportChip {
    /// `[3, S, S]`.
    pub pixels: Tensor,
    pub source_box: BBox,
    pub content: ContentRect,
}

impl SupportChip {
    /// `[1, S, S]` with ones over the content region.
    pub fn mask(&self) -> Tensor {
        let (_, s, w) = self.pixels.dims3().expect("chips are 3-d");
        let c = self.content;
        Tensor::from_fn([1, s, w], |i| {
            let (y, x) = (i / w, i % w);
            let inside = y >= c.y && y < c.y + c.height && x >= c.x && x < c.x + c.width;
            if inside {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Pixel-aligned crop `[y0, y1) x [x0, x1)` covering `bbox`.
pub fn crop_region(image: &Tensor, bbox: &BBox) -> Result<(Tensor, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    bbox.validate()?;
    let eps = 1e-9;
    if bbox.x1 < -eps || bbox.y1 < -eps || bbox.x2 > w as f64 + eps || bbox.y2 > h as f64 + eps {
        return Err(Error::InvalidArgument(format!("box {bbox:?} lies outside the {w}x{h} image")));
    }
    let x0 = (bbox.x1.max(0.0).floor() as usize).min(w - 1);
    let y0 = (bbox.y1.max(0.0).floor() as usize).min(h - 1);
    let x1 = (bbox.x2.ceil() as usize).clamp(x0 + 1, w);
    let y1 = (bbox.y2.ceil() as usize).clamp(y0 + 1, h);
    let (ch, cw) = (y1 - y0, x1 - x0);
    let crop = Tensor::from_fn([c, ch, cw], |i| {
        let (k, y, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
        image.at3(k, y0 + y, x0 + x)
    });
    Ok((crop, y0, x0))
}

/// Crops `bbox`, scales the longer side to `size`, centres the content and
/// zero-pads the shorter side.
pub fn crop_support(image: &Tensor, bbox: &BBox, size: usize) -> Result<SupportChip> {
    if size == 0 {
        return Err(Error::InvalidArgument("support size must be positive".into()));
    }
    let (crop, _, _) = crop_region(image, bbox)?;
    let (c, ch, cw) = crop.dims3()?;
    let scale = size as f64 / ch.max(cw) as f64;
    let nh = ((ch as f64 * scale).round() as usize).clamp(1, size);
    let nw = ((cw as f64 * scale).round() as usize).clamp(1, size);
    let resized = bilinear_resize(&crop, nh, nw)?;
    let content = ContentRect {
        y: (size - nh) / 2,
        x: (size - nw) / 2,
        height: nh,
        width: nw,
    };
    let mut pixels = Tensor::zeros([c, size, size]);
    let data = pixels.data_mut();
    for k in 0..c {
        for y in 0..nh {
            let dst = (k * size + content.y + y) * size + content.x;
            let src = (k * nh + y) * nw;
            data[dst..dst + nw].copy_from_slice(&resized.data()[src..src + nw]);
        }
    }
    Ok(SupportChip {
        pixels,
        source_box: *bbox,
        content,
    })
}

/// Downscales so the longer side is at most `max_side`; returns the image and
/// the applied scale factor (1 when unchanged).
pub fn fit_image(image: &Tensor, max_side: usize) -> Result<(Tensor, f64)> {
    let (_, h, w) = image.dims3()?;
    let longest = h.max(w);
    if max_side == 0 || longest <= max_side {
        return Ok((image.clone(), 1.0));
    }
    let scale = max_side as f64 / longest as f64;
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    Ok((bilinear_resize(image, nh, nw)?, scale))
}
