//! Bilinear resampling with half-pixel centres (`align_corners = false`).

use crate::tensor::Mat;

fn source_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// `(dst_h·dst_w) × (src_h·src_w)` interpolation matrix; left-multiplying a
/// row-major feature map resizes it.
pub fn bilinear_matrix(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Mat {
    let mut m = Mat::zeros(dst_h * dst_w, src_h * src_w);
    for y in 0..dst_h {
        let (y0, y1, fy) = source_taps(y, src_h, dst_h);
        for x in 0..dst_w {
            let (x0, x1, fx) = source_taps(x, src_w, dst_w);
            let row = y * dst_w + x;
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for (sy, sx, w) in taps {
                let col = sy * src_w + sx;
                m.set(row, col, m.get(row, col) + w);
            }
        }
    }
    m
}

/// Resizes a single-channel `src_h×src_w` map.
pub fn resize_plane(src: &[f64], src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), src_h * src_w, "resize_plane size mismatch");
    let mut out = vec![0.0; dst_h * dst_w];
    let xs: Vec<_> = (0..dst_w).map(|x| source_taps(x, src_w, dst_w)).collect();
    for y in 0..dst_h {
        let (y0, y1, fy) = source_taps(y, src_h, dst_h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bot = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out[y * dst_w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Binary mask downsampled by area coverage: a cell is set when at least half
/// of the source pixels it covers are set.
pub fn downsample_mask(mask: &[u8], h: usize, w: usize, dst_h: usize, dst_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; dst_h * dst_w];
    for oy in 0..dst_h {
        let y_lo = oy * h / dst_h;
        let y_hi = ((oy + 1) * h).div_ceil(dst_h).min(h);
        for ox in 0..dst_w {
            let x_lo = ox * w / dst_w;
            let x_hi = ((ox + 1) * w).div_ceil(dst_w).min(w);
            let mut on = 0usize;
            let mut total = 0usize;
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    total += 1;
                    on += usize::from(mask[y * w + x] != 0);
                }
            }
            out[oy * dst_w + ox] = if total > 0 && 2 * on >= total { 1.0 } else { 0.0 };
        }
    }
    out
}
