//! 8-bit PNG export and import of `[3, h, w]` images in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_rgb(image: &Tensor) -> Result<RgbImage> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "png export",
            detail: format!("expected [3, h, w], got {shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let data = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| quantize(data[c * h * w + p])))
    }))
}

pub fn png_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let rgb = to_rgb(image)?;
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Io(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, png_bytes(image)?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let rgb = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Io(e.to_string()))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_png(&bytes)
}
