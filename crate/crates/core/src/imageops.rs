//! Channel-first float images (`C x H x W`, values in [0, 1]) and the few
//! geometric operations the pipeline needs.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn load_rgb<T: Scalar>(path: impl AsRef<Path>) -> Result<Array3<T>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8<T: Scalar>(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Array3<T> {
    let (w, h) = img.dimensions();
    let scale = T::lit(1.0 / 255.0);
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = T::lit(px[c] as f64) * scale;
        }
    }
    out
}

/// Quantizes to 8 bits per channel (round to nearest, clamped).
pub fn to_rgb8<T: Scalar>(img: ArrayView3<T>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (_, h, w) = img.dim();
    let mut out = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let mut rgb = [0u8; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            let f = img[[c.min(img.dim().0 - 1), y as usize, x as usize]].as_f64();
            *v = (f.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        *px = Rgb(rgb);
    }
    out
}

pub fn save_png<T: Scalar>(path: impl AsRef<Path>, img: ArrayView3<T>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(img).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear resampling with half-pixel centers (no corner alignment).
pub fn resize_bilinear<T: Scalar>(img: ArrayView3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (c, h, w) = img.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "empty image");
    if h == out_h && w == out_w {
        return img.to_owned();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = img.index_axis(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::lit(fx);
                let top = plane[[y0, x0]] + (plane[[y0, x1]] - plane[[y0, x0]]) * fx;
                let bot = plane[[y1, x0]] + (plane[[y1, x1]] - plane[[y1, x0]]) * fx;
                out[[ch, oy, ox]] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Integer pixel window covered by a floating-point box, clipped to the image.
pub fn bbox_window(bbox: [f64; 4], h: usize, w: usize) -> (usize, usize, usize, usize) {
    let [x, y, bw, bh] = bbox;
    let x0 = (x.floor().max(0.0) as usize).min(w - 1);
    let y0 = (y.floor().max(0.0) as usize).min(h - 1);
    let x1 = ((x + bw).ceil() as usize).clamp(x0 + 1, w);
    let y1 = ((y + bh).ceil() as usize).clamp(y0 + 1, h);
    (x0, y0, x1, y1)
}

/// Cuts the person box out of the full image and resizes it to `out x out`.
pub fn crop_resize<T: Scalar>(img: ArrayView3<T>, bbox: [f64; 4], out: usize) -> Array3<T> {
    let (_, h, w) = img.dim();
    let (x0, y0, x1, y1) = bbox_window(bbox, h, w);
    let window = img.slice(s![.., y0..y1, x0..x1]);
    resize_bilinear(window, out, out)
}

pub fn flip_horizontal<T: Scalar>(img: ArrayView3<T>) -> Array3<T> {
    img.slice(s![.., .., ..;-1]).to_owned()
}

/// ITU-R BT.601 luma.
pub fn luminance<T: Scalar>(img: ArrayView3<T>) -> Array2<T> {
    let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let mut out = img.index_axis(Axis(0), 0).mapv(|v| v * r);
    out.zip_mut_with(&img.index_axis(Axis(0), 1), |o, &v| *o += v * g);
    out.zip_mut_with(&img.index_axis(Axis(0), 2), |o, &v| *o += v * b);
    out
}
