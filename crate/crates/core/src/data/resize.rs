//! Bilinear image resize with half-pixel sample centers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resizes a `[c, h, w]` image to `[c, target_h, target_w]` by bilinear
/// interpolation. Source coordinates use half-pixel centers
/// (`src = (dst + 0.5) * scale - 0.5`), edges clamp, and output values are
/// clamped to `[0, 1]`.
pub fn resize_bilinear(image: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "resize: expected [c,h,w], got {s:?}"
        )));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::Config("resize: target dims must be positive".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let scale_h = h as f64 / target_h as f64;
    let scale_w = w as f64 / target_w as f64;
    let src = image.data();
    let mut out = vec![0.0; c * target_h * target_w];
    for ch in 0..c {
        for oy in 0..target_h {
            let sy = ((oy as f64 + 0.5) * scale_h - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..target_w {
                let sx = ((ox as f64 + 0.5) * scale_w - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let p = |y: usize, x: usize| src[(ch * h + y) * w + x];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * target_h + oy) * target_w + ox] =
                    (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![c, target_h, target_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.8]).unwrap();
        let out = resize_bilinear(&img, 2, 3).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(vec![2, 5, 7], 0.37);
        let out = resize_bilinear(&img, 3, 4).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn checkerboard_downsample_matches_direct_interpolation() {
        // 4x4 checkerboard to 2x2. With half-pixel centers the sample point
        // for output (0,0) is src (0.5, 0.5): the average of the 2x2 block.
        let mut data = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                data[y * 4 + x] = ((x + y) % 2) as f64;
            }
        }
        let img = Tensor::new(vec![1, 4, 4], data.clone()).unwrap();
        let out = resize_bilinear(&img, 2, 2).unwrap();
        // direct loop oracle
        for oy in 0..2 {
            for ox in 0..2 {
                let sy = (oy as f64 + 0.5) * 2.0 - 0.5;
                let sx = (ox as f64 + 0.5) * 2.0 - 0.5;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let p = |y: usize, x: usize| data[y * 4 + x];
                let expect = p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + p(y0, x0 + 1) * (1.0 - fy) * fx
                    + p(y0 + 1, x0) * fy * (1.0 - fx)
                    + p(y0 + 1, x0 + 1) * fy * fx;
                let got = out.data()[oy * 2 + ox];
                assert!((got - expect).abs() < 1e-12, "({oy},{ox}): {got} vs {expect}");
            }
        }
    }
}
