//! Geometric resampling of interleaved multi-channel planes.

use crate::color::{LinearImage, CHANNELS};

/// Source indices and weights covering each output index under exact area
/// averaging of `n_in` cells onto `n_out` cells.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Area-average resize of an `h × w × ch` plane.
pub fn resize_area_plane(
    data: &[f64],
    h: usize,
    w: usize,
    ch: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    let mut tmp = vec![0.0; h * out_w * ch];
    for r in 0..h {
        for (oc, taps) in wx.iter().enumerate() {
            for &(c, wt) in taps {
                for k in 0..ch {
                    tmp[(r * out_w + oc) * ch + k] += wt * data[(r * w + c) * ch + k];
                }
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * ch];
    for (or, taps) in wy.iter().enumerate() {
        for &(r, wt) in taps {
            for i in 0..out_w * ch {
                out[or * out_w * ch + i] += wt * tmp[r * out_w * ch + i];
            }
        }
    }
    out
}

pub fn resize_area(image: &LinearImage, out_h: usize, out_w: usize) -> LinearImage {
    if image.height() == out_h && image.width() == out_w {
        return image.clone();
    }
    let data = resize_area_plane(
        image.data(),
        image.height(),
        image.width(),
        CHANNELS,
        out_h,
        out_w,
    );
    LinearImage::from_vec_unchecked(out_h, out_w, data.into_iter().map(|v| v.max(0.0)).collect())
}

/// Bilinear sample at continuous pixel coordinates (pixel centers at integers),
/// clamped to the plane.
pub fn sample_bilinear(
    data: &[f64],
    h: usize,
    w: usize,
    ch: usize,
    y: f64,
    x: f64,
    out: &mut [f64],
) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    for k in 0..ch {
        let v00 = data[(y0 * w + x0) * ch + k];
        let v01 = data[(y0 * w + x1) * ch + k];
        let v10 = data[(y1 * w + x0) * ch + k];
        let v11 = data[(y1 * w + x1) * ch + k];
        out[k] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    }
}
