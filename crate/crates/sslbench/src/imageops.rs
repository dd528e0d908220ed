//! Low-level image primitives: resampling, blurring, colour adjustment,
//! affine warps, padding, and PNG input/output.
//!
//! Images are `Array3<f64>` in channel-first `[3, H, W]` layout with values
//! in `[0, 1]` (until normalization). Single planes (masks, depth maps) are
//! `Array2<f64>`.

use ndarray::{Array2, Array3};
use std::path::Path;

use crate::{Error, Result};

/// Fixed channel statistics used by the normalization step (RGB order).
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Resampling filter for [`resample_plane`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    Nearest,
    Bilinear,
    /// Catmull-Rom cubic with kernel widening (anti-aliasing) on downscale.
    BicubicAa,
}

fn cubic(x: f64) -> f64 {
    // Catmull-Rom (a = -0.5)
    let x = x.abs();
    if x < 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

fn triangle(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

/// Per-output-pixel taps (clamped source indices and normalized weights)
/// along one axis.
fn axis_weights(n_in: usize, n_out: usize, filter: Filter) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let (support, widen): (f64, f64) = match filter {
        Filter::Nearest => (0.0, 1.0),
        Filter::Bilinear => (1.0, 1.0),
        Filter::BicubicAa => (2.0, scale.max(1.0)),
    };
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            if filter == Filter::Nearest {
                let idx = (((o as f64 + 0.5) * scale).floor() as isize)
                    .clamp(0, n_in as isize - 1) as usize;
                return vec![(idx, 1.0)];
            }
            let radius = support * widen;
            let lo = (center - radius).floor() as isize;
            let hi = (center + radius).ceil() as isize;
            let mut taps = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let x = (i as f64 - center) / widen;
                let w = match filter {
                    Filter::Bilinear => triangle(x),
                    _ => cubic(x),
                };
                if w != 0.0 {
                    let idx = i.clamp(0, n_in as isize - 1) as usize;
                    taps.push((idx, w));
                    total += w;
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable resampling of a single plane.
pub fn resample_plane(plane: &Array2<f64>, oh: usize, ow: usize, filter: Filter) -> Array2<f64> {
    let (h, w) = plane.dim();
    if (h, w) == (oh, ow) && filter != Filter::BicubicAa {
        return plane.clone();
    }
    let wx = axis_weights(w, ow, filter);
    let wy = axis_weights(h, oh, filter);
    // horizontal pass
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for (x, taps) in wx.iter().enumerate() {
            tmp[[y, x]] = taps.iter().map(|&(i, wt)| plane[[y, i]] * wt).sum();
        }
    }
    // vertical pass
    let mut out = Array2::<f64>::zeros((oh, ow));
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..ow {
            out[[y, x]] = taps.iter().map(|&(i, wt)| tmp[[i, x]] * wt).sum();
        }
    }
    out
}

/// Resample every channel of an RGB image.
pub fn resample_rgb(img: &Array3<f64>, oh: usize, ow: usize, filter: Filter) -> Array3<f64> {
    let c = img.dim().0;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ch in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resample_plane(&plane, oh, ow, filter));
    }
    out
}

/// Resample a boolean mask with nearest-neighbour lookup.
pub fn resample_mask(mask: &Array2<bool>, oh: usize, ow: usize) -> Array2<bool> {
    let plane = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    resample_plane(&plane, oh, ow, Filter::Nearest).mapv(|v| v > 0.5)
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur_rgb(img: &Array3<f64>, sigma: f64, ksize: usize) -> Array3<f64> {
    assert!(ksize % 2 == 1, "blur kernel size must be odd");
    let r = (ksize / 2) as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (c, h, w) = img.dim();
    let clampw = |i: isize| i.clamp(0, w as isize - 1) as usize;
    let clamph = |i: isize| i.clamp(0, h as isize - 1) as usize;
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    acc += img[[ch, y, clampw(x as isize + j as isize - r)]] * kv;
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    acc += tmp[[ch, clamph(y as isize + j as isize - r), x]] * kv;
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

/// Pad to `max(h, w)` squared, adding rows below / columns to the right.
/// Returns the padded image; original content keeps its coordinates.
pub fn pad_to_square_rgb(img: &Array3<f64>, fill: f64) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let side = h.max(w);
    let mut out = Array3::<f64>::from_elem((c, side, side), fill);
    out.slice_mut(ndarray::s![.., ..h, ..w]).assign(img);
    out
}

/// Plane counterpart of [`pad_to_square_rgb`].
pub fn pad_to_square_plane(plane: &Array2<f64>, fill: f64) -> Array2<f64> {
    let (h, w) = plane.dim();
    let side = h.max(w);
    let mut out = Array2::<f64>::from_elem((side, side), fill);
    out.slice_mut(ndarray::s![..h, ..w]).assign(plane);
    out
}

/// Horizontal mirror (flips the x axis).
pub fn flip_h_rgb(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(2));
    out
}

/// Vertical mirror (flips the y axis).
pub fn flip_v_rgb(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out
}

pub fn flip_h_plane(plane: &Array2<f64>) -> Array2<f64> {
    let mut out = plane.clone();
    out.invert_axis(ndarray::Axis(1));
    out
}

pub fn flip_v_plane(plane: &Array2<f64>) -> Array2<f64> {
    let mut out = plane.clone();
    out.invert_axis(ndarray::Axis(0));
    out
}

/// Rotate a plane 90° clockwise: `out[y, x] = in[h-1-x, y]`.
pub fn rot90_plane(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((w, h), |(y, x)| plane[[h - 1 - x, y]])
}

/// Rotate an image 90° clockwise, channel by channel.
pub fn rot90_rgb(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, w, h));
    for ch in 0..c {
        for y in 0..w {
            for x in 0..h {
                out[[ch, y, x]] = img[[ch, h - 1 - x, y]];
            }
        }
    }
    out
}

/// 2×3 affine matrix in row-major order `[a, b, c, d, e, f]` mapping
/// `(x, y) -> (a·x + b·y + c, d·x + e·y + f)`.
pub type Affine = [f64; 6];

/// Forward matrix for rotate/scale/shear/translate about the image centre.
pub fn affine_about_center(
    h: usize,
    w: usize,
    angle_deg: f64,
    scale: f64,
    shear_deg: f64,
    tx: f64,
    ty: f64,
) -> Affine {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let th = angle_deg.to_radians();
    let sh = shear_deg.to_radians().tan();
    // rotation ∘ shear-x, both scaled
    let a = scale * (th.cos() + sh * th.sin());
    let b = scale * (-th.sin() + sh * th.cos());
    let d = scale * (th.sin());
    let e = scale * (th.cos());
    let c = cx + tx - a * cx - b * cy;
    let f = cy + ty - d * cx - e * cy;
    [a, b, c, d, e, f]
}

/// Invert an affine matrix.
pub fn invert_affine(m: &Affine) -> Affine {
    let det = m[0] * m[4] - m[1] * m[3];
    assert!(det.abs() > 1e-12, "singular affine transform");
    let ia = m[4] / det;
    let ib = -m[1] / det;
    let id = -m[3] / det;
    let ie = m[0] / det;
    let ic = -(ia * m[2] + ib * m[5]);
    let if_ = -(id * m[2] + ie * m[5]);
    [ia, ib, ic, id, ie, if_]
}

/// Apply a forward affine map to a point.
pub fn apply_affine(m: &Affine, x: f64, y: f64) -> (f64, f64) {
    (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
}

/// Warp a plane under a forward affine map. Each output pixel is looked up
/// at the inverse-mapped source location.
pub fn warp_plane(plane: &Array2<f64>, forward: &Affine, filter: Filter, fill: f64) -> Array2<f64> {
    let inv = invert_affine(forward);
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sx, sy) = apply_affine(&inv, x as f64, y as f64);
        match filter {
            Filter::Nearest => {
                let ix = sx.round() as isize;
                let iy = sy.round() as isize;
                if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                    fill
                } else {
                    plane[[iy as usize, ix as usize]]
                }
            }
            _ => {
                if sx < -1.0 || sy < -1.0 || sx > w as f64 || sy > h as f64 {
                    return fill;
                }
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let sample = |ix: isize, iy: isize| -> f64 {
                    if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                        fill
                    } else {
                        plane[[iy as usize, ix as usize]]
                    }
                };
                let x0 = x0 as isize;
                let y0 = y0 as isize;
                sample(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + sample(x0 + 1, y0) * fx * (1.0 - fy)
                    + sample(x0, y0 + 1) * (1.0 - fx) * fy
                    + sample(x0 + 1, y0 + 1) * fx * fy
            }
        }
    })
}

/// Warp every channel of an RGB image bilinearly.
pub fn warp_rgb(img: &Array3<f64>, forward: &Affine, fill: f64) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&warp_plane(&plane, forward, Filter::Bilinear, fill));
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Colour jitter: multiplicative brightness, contrast about the mean grey,
/// saturation blend with per-pixel grey, and a multiplicative factor on the
/// hue angle. Output clamped to `[0, 1]`.
pub fn color_jitter(
    img: &Array3<f64>,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
) -> Array3<f64> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "colour jitter needs an RGB image");
    // contrast pivots on the mean luma of the brightness-adjusted image
    let luma = |r: f64, g: f64, b: f64| 0.299 * r + 0.587 * g + 0.114 * b;
    let bright = img.mapv(|v| (v * brightness).clamp(0.0, 1.0));
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += luma(bright[[0, y, x]], bright[[1, y, x]], bright[[2, y, x]]);
        }
    }
    mean /= (h * w) as f64;
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let r = bright[[0, y, x]];
            let g = bright[[1, y, x]];
            let b = bright[[2, y, x]];
            let (r, g, b) = (
                ((r - mean) * contrast + mean).clamp(0.0, 1.0),
                ((g - mean) * contrast + mean).clamp(0.0, 1.0),
                ((b - mean) * contrast + mean).clamp(0.0, 1.0),
            );
            let grey = luma(r, g, b);
            let (r, g, b) = (
                (grey + (r - grey) * saturation).clamp(0.0, 1.0),
                (grey + (g - grey) * saturation).clamp(0.0, 1.0),
                (grey + (b - grey) * saturation).clamp(0.0, 1.0),
            );
            let (hh, ss, vv) = rgb_to_hsv(r, g, b);
            let (r, g, b) = hsv_to_rgb(hh * hue, ss, vv);
            out[[0, y, x]] = r.clamp(0.0, 1.0);
            out[[1, y, x]] = g.clamp(0.0, 1.0);
            out[[2, y, x]] = b.clamp(0.0, 1.0);
        }
    }
    out
}

/// Channel-wise `(x - mean) / std` normalization.
pub fn normalize(img: &Array3<f64>, mean: &[f64; 3], std: &[f64; 3]) -> Array3<f64> {
    let mut out = img.clone();
    for ch in 0..3 {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .mapv_inplace(|v| (v - mean[ch]) / std[ch]);
    }
    out
}

// ---------------------------------------------------------------------------
// PNG input/output
// ---------------------------------------------------------------------------

/// Read an 8-bit RGB PNG into `[3, H, W]` with values in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = p.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Write `[3, H, W]` unit-range values as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "expected an RGB image");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| (img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Read a 0/255 single-channel PNG as a boolean mask.
pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(y, x)| img.get_pixel(x as u32, y as u32).0[0] >= 128,
    ))
}

/// Write a boolean mask as a 0/255 single-channel PNG.
pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask[[y, x]] { 255 } else { 0 }]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Read a 16-bit grayscale PNG mapped to the unit range (`value / 65535`).
pub fn read_gray16_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(y, x)| img.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0,
    ))
}

/// Write unit-range values as a 16-bit grayscale PNG.
pub fn write_gray16_png(path: &Path, plane: &Array2<f64>) -> Result<()> {
    let (h, w) = plane.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (plane[[y, x]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Validate that a plane holds only finite values; used when ingesting
/// external prediction files.
pub fn ensure_finite(plane: &Array2<f64>, what: &str) -> Result<()> {
    if plane.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what} contains non-finite values")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| (y * w + x) as f64 / (h * w) as f64)
    }

    #[test]
    fn resample_identity_preserves_values() {
        let p = ramp(5, 7);
        for f in [Filter::Nearest, Filter::Bilinear] {
            let out = resample_plane(&p, 5, 7, f);
            assert_abs_diff_eq!(out, p, epsilon = 1e-12);
        }
        // bicubic identity: weights collapse to the centre tap
        let out = resample_plane(&p, 5, 7, Filter::BicubicAa);
        assert_abs_diff_eq!(out, p, epsilon = 1e-9);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let p = Array2::from_elem((6, 6), 0.37);
        for f in [Filter::Nearest, Filter::Bilinear, Filter::BicubicAa] {
            for (oh, ow) in [(3, 3), (12, 12), (5, 9)] {
                let out = resample_plane(&p, oh, ow, f);
                for v in out.iter() {
                    assert!((v - 0.37).abs() < 1e-9, "{f:?} {oh}x{ow}: {v}");
                }
            }
        }
    }

    #[test]
    fn bicubic_downscale_averages_not_samples() {
        // alternating columns: plain point sampling would return 0 or 1,
        // a widened (anti-aliased) kernel returns something near the mean
        let p = Array2::from_shape_fn((8, 8), |(_, x)| (x % 2) as f64);
        let out = resample_plane(&p, 2, 2, Filter::BicubicAa);
        for v in out.iter() {
            assert!((v - 0.5).abs() < 0.2, "got {v}");
        }
    }

    #[test]
    fn blur_preserves_mass_of_constant() {
        let img = Array3::from_elem((3, 10, 10), 0.6);
        let out = gaussian_blur_rgb(&img, 1.3, 25);
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.6, epsilon = 1e-12);
        }
    }

    #[test]
    fn pad_to_square_keeps_content_top_left() {
        let img = Array3::from_shape_fn((3, 2, 4), |(c, y, x)| (c + y + x) as f64 / 10.0);
        let out = pad_to_square_rgb(&img, 0.0);
        assert_eq!(out.dim(), (3, 4, 4));
        assert_eq!(out[[2, 1, 3]], img[[2, 1, 3]]);
        assert_eq!(out[[0, 3, 0]], 0.0);
    }

    #[test]
    fn flips_and_rot90_are_exact_permutations() {
        let p = ramp(3, 4);
        let fh = flip_h_plane(&p);
        assert_eq!(fh[[1, 0]], p[[1, 3]]);
        let fv = flip_v_plane(&p);
        assert_eq!(fv[[0, 2]], p[[2, 2]]);
        let r = rot90_plane(&p);
        assert_eq!(r.dim(), (4, 3));
        // out[y, x] = in[h-1-x, y]
        assert_eq!(r[[0, 0]], p[[2, 0]]);
        assert_eq!(r[[3, 2]], p[[0, 3]]);
        // four clockwise quarter turns = identity
        let mut q = p.clone();
        for _ in 0..4 {
            q = rot90_plane(&q);
        }
        assert_abs_diff_eq!(q, p, epsilon = 0.0);
    }

    #[test]
    fn affine_identity_roundtrip() {
        let m = affine_about_center(9, 9, 0.0, 1.0, 0.0, 0.0, 0.0);
        let (x, y) = apply_affine(&m, 3.0, 5.0);
        assert_abs_diff_eq!(x, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 5.0, epsilon = 1e-12);
        let rot = affine_about_center(9, 9, 90.0, 1.0, 0.0, 0.0, 0.0);
        let inv = invert_affine(&rot);
        let (fx, fy) = apply_affine(&rot, 1.0, 2.0);
        let (bx, by) = apply_affine(&inv, fx, fy);
        assert_abs_diff_eq!(bx, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(by, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn warp_rotation_moves_known_pixel() {
        // 180° rotation about the centre maps (x, y) to (w-1-x, h-1-y)
        let p = ramp(5, 5);
        let m = affine_about_center(5, 5, 180.0, 1.0, 0.0, 0.0, 0.0);
        let out = warp_plane(&p, &m, Filter::Nearest, -1.0);
        for y in 0..5 {
            for x in 0..5 {
                assert_abs_diff_eq!(out[[y, x]], p[[4 - y, 4 - x]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn jitter_identity_parameters_are_noop() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            0.2 + 0.1 * c as f64 + 0.05 * y as f64 + 0.02 * x as f64
        });
        let out = color_jitter(&img, 1.0, 1.0, 1.0, 1.0);
        assert_abs_diff_eq!(out, img, epsilon = 1e-9);
    }

    #[test]
    fn jitter_brightness_scales_means() {
        let img = Array3::from_elem((3, 4, 4), 0.4);
        let out = color_jitter(&img, 1.25, 1.0, 1.0, 1.0);
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn normalize_maps_mean_to_zero() {
        let img = Array3::from_shape_fn((3, 2, 2), |(c, _, _)| IMAGENET_MEAN[c]);
        let out = normalize(&img, &IMAGENET_MEAN, &IMAGENET_STD);
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn png_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 6, 5), |(c, y, x)| {
            ((c * 37 + y * 11 + x * 3) % 256) as f64 / 255.0
        });
        let p = dir.path().join("img.png");
        write_rgb_png(&p, &img).unwrap();
        let back = read_rgb_png(&p).unwrap();
        assert_abs_diff_eq!(back, img, epsilon = 1e-9);

        let mask = Array2::from_shape_fn((6, 5), |(y, x)| (y + x) % 3 == 0);
        let mp = dir.path().join("mask.png");
        write_mask_png(&mp, &mask).unwrap();
        assert_eq!(read_mask_png(&mp).unwrap(), mask);

        let depth = Array2::from_shape_fn((6, 5), |(y, x)| (y as f64 * 5.0 + x as f64) / 29.0);
        let dp = dir.path().join("depth.png");
        write_gray16_png(&dp, &depth).unwrap();
        let back = read_gray16_png(&dp).unwrap();
        assert_abs_diff_eq!(back, depth, epsilon = 1e-4);
    }
}
