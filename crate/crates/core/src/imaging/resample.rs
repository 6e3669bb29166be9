use crate::autograd::{Mat, RowMix};
use crate::error::{Error, Result};

use super::query::make_query_grid;
use super::{Image, StereoPair};

const CUBIC_A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x * x * x - (CUBIC_A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        CUBIC_A * x * x * x - 5.0 * CUBIC_A * x * x + 8.0 * CUBIC_A * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Per-output-sample taps along one axis. When shrinking, the kernel is
/// stretched by the scale factor so it also acts as the antialiasing
/// prefilter. Taps falling outside are clamped to the edge sample.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let radius = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - radius).floor() as isize;
            let hi = (center + radius).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let wgt = cubic_kernel((center - j as f64) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                total += wgt;
                let idx = j.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Bicubic resize with antialiasing when shrinking and edge-clamped borders.
/// The result is clipped to `[0, 1]`; a same-size target returns the input.
pub fn bicubic_resample(image: &Image, target: (usize, usize)) -> Result<Image> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::arg(format!("bicubic target {th}x{tw} must be positive")));
    }
    let (h, w) = image.dims();
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    let col_taps = axis_taps(w, tw);
    let row_taps = axis_taps(h, th);

    let mut horiz = vec![0.0; h * tw * 3];
    for y in 0..h {
        for (x, taps) in col_taps.iter().enumerate() {
            for c in 0..3 {
                horiz[(y * tw + x) * 3 + c] = taps.iter().map(|&(j, wgt)| wgt * image.get(y, j, c)).sum();
            }
        }
    }
    let mut out = Image::filled(th, tw, 0.0);
    for (y, taps) in row_taps.iter().enumerate() {
        for x in 0..tw {
            for c in 0..3 {
                let v: f64 = taps.iter().map(|&(j, wgt)| wgt * horiz[(j * tw + x) * 3 + c]).sum();
                out.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Fractional pixel position of a normalized coordinate under the
/// cell-center convention, clamped to the valid sample range.
#[inline]
pub(crate) fn to_pixel(u: f64, n: usize) -> f64 {
    (((u + 1.0) * n as f64 - 1.0) * 0.5).clamp(0.0, (n - 1) as f64)
}

/// Bilinear sampling operator over an `h x w` lattice for normalized
/// `(y, x)` coordinates, with edge clamping.
pub fn bilinear_mix(h: usize, w: usize, coords: &[[f64; 2]]) -> RowMix {
    let mut mix = RowMix::new(coords.len(), 4);
    for (i, &[cy, cx]) in coords.iter().enumerate() {
        let py = to_pixel(cy, h);
        let px = to_pixel(cx, w);
        let (y0, x0) = (py.floor() as usize, px.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ay, ax) = (py - y0 as f64, px - x0 as f64);
        mix.set(i, 0, y0 * w + x0, (1.0 - ay) * (1.0 - ax));
        mix.set(i, 1, y0 * w + x1, (1.0 - ay) * ax);
        mix.set(i, 2, y1 * w + x0, ay * (1.0 - ax));
        mix.set(i, 3, y1 * w + x1, ay * ax);
    }
    mix
}

/// Bilinear samples of `image` at normalized coordinates, `N x 3`.
pub fn bilinear_sample(image: &Image, coords: &[[f64; 2]]) -> Mat {
    bilinear_mix(image.height(), image.width(), coords).apply(image.pixels())
}

pub fn bilinear_upsample(image: &Image, target: (usize, usize)) -> Result<Image> {
    let grid = make_query_grid(target.0, target.1, 1.0)?;
    Image::new(target.0, target.1, bilinear_sample(image, &grid.coords))
}

/// LR/HR evaluation pair for scale `r`: the LR side is `floor(H/r) x floor(W/r)`
/// and the HR image is cropped (top-left) to `round(r * lr)` so that
/// super-resolving the LR image at `r` lands exactly on the HR crop.
pub fn degrade(hr: &Image, r: f64) -> Result<(Image, Image)> {
    if !(r >= 1.0 && r.is_finite()) {
        return Err(Error::arg(format!("degradation scale must be >= 1, got {r}")));
    }
    let (h, w) = hr.dims();
    let (lh, lw) = ((h as f64 / r).floor() as usize, (w as f64 / r).floor() as usize);
    if lh == 0 || lw == 0 {
        return Err(Error::arg(format!("{h}x{w} is too small for x{r}")));
    }
    let (ch, cw) = ((lh as f64 * r).round() as usize, (lw as f64 * r).round() as usize);
    let crop = hr.crop(0, 0, ch, cw)?;
    Ok((bicubic_resample(&crop, (lh, lw))?, crop))
}

/// [`degrade`] applied to both views: `(lr, hr_crop)`.
pub fn degrade_pair(hr: &StereoPair, r: f64) -> Result<(StereoPair, StereoPair)> {
    let (ll, lh) = degrade(&hr.left, r)?;
    let (rl, rh) = degrade(&hr.right, r)?;
    Ok((StereoPair::new(ll, rl)?, StereoPair::new(lh, rh)?))
}
