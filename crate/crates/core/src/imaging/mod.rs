//! Grid resampling and Netpbm image I/O.

pub mod netpbm;

pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage, RgbImage};

/// Bilinear resampling of a row-major `h×w` grid to `nh×nw`, using
/// half-pixel centers (the align-corners=false convention). Source
/// coordinates are clamped to the border, so output values stay within the
/// source range.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "grid size mismatch");
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(nh, h);
    let xs = axis(nw, w);
    let mut out = Vec::with_capacity(nh * nw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Resizes each channel of a `c×h×w` planar image.
pub fn resize_planar(src: &[f64], c: usize, h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    src.chunks_exact(h * w)
        .take(c)
        .flat_map(|plane| resize_bilinear(plane, h, w, nh, nw))
        .collect()
}
