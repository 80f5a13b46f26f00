//! Tensor primitives for the segmentation network, with explicit backward
//! passes.
//!
//! Feature maps are channel-major `Array3` (channels, height, width).
//! Convolutions are expressed as im2col + matrix multiplication so both
//! directions reduce to GEMM; every other op has a hand-written adjoint.
//! Everything is generic over the float type so gradient-check tests can run
//! the exact same code in `f64`.

use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, NdFloat};

/// Reinterprets a `(c, h*w)` matrix as a `(c, h, w)` feature map.
pub fn rows_to_map<T: NdFloat>(a: Array2<T>, h: usize, w: usize) -> Array3<T> {
    let c = a.nrows();
    Array3::from_shape_vec((c, h, w), a.into_raw_vec_and_offset().0)
        .expect("matrix rows match map size")
}

/// Reinterprets a `(c, h, w)` feature map as a `(c, h*w)` matrix.
pub fn map_to_rows<T: NdFloat>(a: Array3<T>) -> Array2<T> {
    let (c, h, w) = a.dim();
    Array2::from_shape_vec((c, h * w), a.into_raw_vec_and_offset().0).expect("map is contiguous")
}

/// Unfolds `x` into the column matrix of a same-padded `k`x`k` dilated
/// convolution: rows index (channel, tap), columns index output pixels.
pub fn im2col<T: NdFloat>(x: &Array3<T>, k: usize, dilation: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let half = ((k - 1) / 2 * dilation) as isize;
    let mut col = Array2::zeros((c * k * k, h * w));
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize * dilation as isize - half;
            for kx in 0..k {
                let dx = kx as isize * dilation as isize - half;
                let row = (ci * k + ky) * k + kx;
                let mut col_row = col.row_mut(row);
                let col_row = col_row.as_slice_mut().expect("row is contiguous");
                // valid output x-range for this tap
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![ci, sy as usize, ..]);
                    let src = src.as_slice().expect("input is contiguous");
                    let s0 = (x0 as isize + dx) as usize;
                    let s1 = (x1 as isize + dx) as usize;
                    col_row[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s1]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds column-matrix gradients back onto the input.
pub fn col2im<T: NdFloat>(
    dcol: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
) -> Array3<T> {
    let half = ((k - 1) / 2 * dilation) as isize;
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize * dilation as isize - half;
            for kx in 0..k {
                let dx_off = kx as isize * dilation as isize - half;
                let row = (ci * k + ky) * k + kx;
                let col_row = dcol.row(row);
                let col_row = col_row.as_slice().expect("row is contiguous");
                let x0 = (-dx_off).max(0) as usize;
                let x1 = ((w as isize - dx_off).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let mut dst = dx.slice_mut(s![ci, sy as usize, ..]);
                    let dst = dst.as_slice_mut().expect("input is contiguous");
                    let s0 = (x0 as isize + dx_off) as usize;
                    for (d, &g) in dst[s0..].iter_mut().zip(&col_row[y * w + x0..y * w + x1]) {
                        *d += g;
                    }
                }
            }
        }
    }
    dx
}

/// GEMM convolution on an unfolded input: `weights (c_out x c_in*k*k)` times
/// `col` plus per-channel bias. Returns `(c_out, pixels)`.
pub fn conv_apply<T: NdFloat>(weights: ArrayView2<T>, col: &Array2<T>, bias: &[T]) -> Array2<T> {
    let mut out = weights.dot(col);
    for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
        row += b;
    }
    out
}

/// Gradients of [`conv_apply`]: weight, bias, and column-matrix gradients.
pub fn conv_gradients<T: NdFloat>(
    dout: &Array2<T>,
    col: &Array2<T>,
    weights: ArrayView2<T>,
) -> (Array2<T>, Array1<T>, Array2<T>) {
    let dweights = dout.dot(&col.t());
    let dbias = dout.sum_axis(Axis(1));
    let dcol = weights.t().dot(dout);
    (dweights, dbias, dcol)
}

pub fn relu<T: NdFloat>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| v.max(T::zero()))
}

/// Gradient through relu given the relu *output*.
pub fn relu_backward<T: NdFloat>(dout: &Array3<T>, out: &Array3<T>) -> Array3<T> {
    let mut dx = dout.clone();
    dx.zip_mut_with(out, |d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat index of its source pixel.
pub fn maxpool2<T: NdFloat>(x: &Array3<T>) -> Result<(Array3<T>, Vec<u32>)> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidDimension(format!(
            "pooling needs even dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut argmax = vec![0u32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[[ci, 2 * oy, 2 * ox]];
                let mut best_idx = (ci * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let v = x[[ci, 2 * oy + dy, 2 * ox + dx]];
                    if v > best {
                        best = v;
                        best_idx = (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
                    }
                }
                out[[ci, oy, ox]] = best;
                argmax[(ci * oh + oy) * ow + ox] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Scatters pooled gradients back to the argmax source pixels.
pub fn maxpool2_backward<T: NdFloat>(
    dout: &Array3<T>,
    argmax: &[u32],
    in_dims: (usize, usize, usize),
) -> Array3<T> {
    let mut dx = Array3::zeros(in_dims);
    let dx_flat = dx.as_slice_mut().expect("contiguous");
    for (&g, &idx) in dout.iter().zip(argmax) {
        dx_flat[idx as usize] += g;
    }
    dx
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample_nearest2<T: NdFloat>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for y in 0..2 * h {
            for xq in 0..2 * w {
                out[[ci, y, xq]] = x[[ci, y / 2, xq / 2]];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2`]: sums each 2x2 block.
pub fn upsample_nearest2_backward<T: NdFloat>(dout: &Array3<T>) -> Array3<T> {
    let (c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h2 {
            for xq in 0..w2 {
                dx[[ci, y / 2, xq / 2]] += dout[[ci, y, xq]];
            }
        }
    }
    dx
}

/// Bin edges of adaptive pooling: output cell `i` of `s` covers input range
/// `[floor(i*n/s), ceil((i+1)*n/s))`.
fn pool_bins(n: usize, s: usize) -> Vec<(usize, usize)> {
    (0..s)
        .map(|i| (i * n / s, ((i + 1) * n).div_ceil(s)))
        .collect()
}

/// Adaptive average pooling to an `s`x`s` map.
pub fn adaptive_avg_pool<T: NdFloat>(x: &Array3<T>, s: usize) -> Result<Array3<T>> {
    let (c, h, w) = x.dim();
    if s == 0 || s > h || s > w {
        return Err(Error::InvalidDimension(format!(
            "pooling scale {s} does not fit a {h}x{w} map"
        )));
    }
    let (ybins, xbins) = (pool_bins(h, s), pool_bins(w, s));
    let mut out = Array3::zeros((c, s, s));
    for ci in 0..c {
        for (oy, &(y0, y1)) in ybins.iter().enumerate() {
            for (ox, &(x0, x1)) in xbins.iter().enumerate() {
                let window = x.slice(s![ci, y0..y1, x0..x1]);
                let area = T::from(((y1 - y0) * (x1 - x0)) as f64).expect("area fits");
                out[[ci, oy, ox]] = window.sum() / area;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`adaptive_avg_pool`].
pub fn adaptive_avg_pool_backward<T: NdFloat>(
    dout: &Array3<T>,
    in_h: usize,
    in_w: usize,
) -> Array3<T> {
    let (c, s, _) = dout.dim();
    let (ybins, xbins) = (pool_bins(in_h, s), pool_bins(in_w, s));
    let mut dx = Array3::zeros((c, in_h, in_w));
    for ci in 0..c {
        for (oy, &(y0, y1)) in ybins.iter().enumerate() {
            for (ox, &(x0, x1)) in xbins.iter().enumerate() {
                let area = T::from(((y1 - y0) * (x1 - x0)) as f64).expect("area fits");
                let g = dout[[ci, oy, ox]] / area;
                let mut window = dx.slice_mut(s![ci, y0..y1, x0..x1]);
                window += g;
            }
        }
    }
    dx
}

/// Per-axis bilinear taps under the half-pixel-center convention: for each
/// output index, the two source indices and the weight of the second.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `out_h` x `out_w` (half-pixel centers).
pub fn bilinear_resize<T: NdFloat>(x: &Array3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    let (ytaps, xtaps) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
    let mut out = Array3::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            let (wy0, wy1) = (T::from(1.0 - fy).unwrap(), T::from(fy).unwrap());
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let (wx0, wx1) = (T::from(1.0 - fx).unwrap(), T::from(fx).unwrap());
                out[[ci, oy, ox]] = x[[ci, y0, x0]] * wy0 * wx0
                    + x[[ci, y0, x1]] * wy0 * wx1
                    + x[[ci, y1, x0]] * wy1 * wx0
                    + x[[ci, y1, x1]] * wy1 * wx1;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatters gradients with the same taps.
pub fn bilinear_resize_backward<T: NdFloat>(
    dout: &Array3<T>,
    in_h: usize,
    in_w: usize,
) -> Array3<T> {
    let (c, oh, ow) = dout.dim();
    let (ytaps, xtaps) = (bilinear_taps(in_h, oh), bilinear_taps(in_w, ow));
    let mut dx = Array3::zeros((c, in_h, in_w));
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            let (wy0, wy1) = (T::from(1.0 - fy).unwrap(), T::from(fy).unwrap());
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let (wx0, wx1) = (T::from(1.0 - fx).unwrap(), T::from(fx).unwrap());
                let g = dout[[ci, oy, ox]];
                dx[[ci, y0, x0]] += g * wy0 * wx0;
                dx[[ci, y0, x1]] += g * wy0 * wx1;
                dx[[ci, y1, x0]] += g * wy1 * wx0;
                dx[[ci, y1, x1]] += g * wy1 * wx1;
            }
        }
    }
    dx
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<T: NdFloat>(logits: &Array3<T>) -> Array3<T> {
    let (c, h, w) = logits.dim();
    let mut out = logits.clone();
    for y in 0..h {
        for x in 0..w {
            let mut maxv = out[[0, y, x]];
            for ci in 1..c {
                maxv = maxv.max(out[[ci, y, x]]);
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (out[[ci, y, x]] - maxv).exp();
                out[[ci, y, x]] = e;
                sum += e;
            }
            for ci in 0..c {
                out[[ci, y, x]] /= sum;
            }
        }
    }
    out
}

/// Gradient through the per-pixel softmax given probability gradients.
pub fn softmax_channels_backward<T: NdFloat>(dprobs: &Array3<T>, probs: &Array3<T>) -> Array3<T> {
    let (c, h, w) = probs.dim();
    let mut dlogits = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = T::zero();
            for ci in 0..c {
                dot += dprobs[[ci, y, x]] * probs[[ci, y, x]];
            }
            for ci in 0..c {
                dlogits[[ci, y, x]] = probs[[ci, y, x]] * (dprobs[[ci, y, x]] - dot);
            }
        }
    }
    dlogits
}

/// Reflect-pads the bottom/right so both spatial dims become multiples of
/// `multiple` (no edge repeat: pad row 1 mirrors row `h-2`).
pub fn pad_to_multiple_reflect<T: NdFloat>(x: &Array3<T>, multiple: usize) -> Result<Array3<T>> {
    let (c, h, w) = x.dim();
    let nh = h.div_ceil(multiple) * multiple;
    let nw = w.div_ceil(multiple) * multiple;
    if nh - h >= h || nw - w >= w {
        return Err(Error::InvalidDimension(format!(
            "cannot reflect-pad {h}x{w} to {nh}x{nw}: padding exceeds size"
        )));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let mut out = Array3::zeros((c, nh, nw));
    for ci in 0..c {
        for y in 0..nh {
            let sy = reflect(y, h);
            for xq in 0..nw {
                out[[ci, y, xq]] = x[[ci, sy, reflect(xq, w)]];
            }
        }
    }
    Ok(out)
}

/// Keeps the top-left `h` x `w` window.
pub fn crop_spatial<T: NdFloat>(x: &Array3<T>, h: usize, w: usize) -> Array3<T> {
    x.slice(s![.., ..h, ..w]).to_owned()
}

/// Adjoint of [`crop_spatial`]: embeds gradients into a zero map.
pub fn crop_spatial_backward<T: NdFloat>(dout: &Array3<T>, h: usize, w: usize) -> Array3<T> {
    let (c, ch, cw) = dout.dim();
    let mut dx = Array3::zeros((c, h, w));
    dx.slice_mut(s![.., ..ch, ..cw]).assign(dout);
    dx
}
