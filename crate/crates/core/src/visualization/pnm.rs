//! Binary portable graymap / pixmap writers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `P5` file from an `[H, W]` tensor with values in `[0, 1]`.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = img.dims2()?;
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(img.data().iter().map(|&x| to_byte(x)));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// `P6` file from a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("write_ppm", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            buf.push(to_byte(d[c * h * w + i]));
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour upscaling of the last two axes by `factor`.
pub fn upscale(img: &Tensor, factor: usize) -> Tensor {
    let s = img.shape();
    let n = s.len();
    let (h, w) = (s[n - 2], s[n - 1]);
    let planes: usize = s[..n - 2].iter().product();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out.push(img.data()[(p * h + y / factor) * w + x / factor]);
            }
        }
    }
    let mut shape = s.to_vec();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(shape, out).expect("upscaled shape")
}
