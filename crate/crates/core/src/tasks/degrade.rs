//! Antialiased bicubic downsampling with symmetric boundary handling.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        1.5 * t.powi(3) - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t.powi(3) + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let p = i.rem_euclid(2 * n);
    (if p < n { p } else { 2 * n - 1 - p }) as usize
}

/// Sparse rows of the `len/factor × len` resampling matrix: for each output
/// sample, `(input index, weight)` with weights summing to one. The kernel
/// is stretched by `factor` so it also acts as the antialiasing filter.
pub fn downsample_weights(len: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    let f = factor as f64;
    let support = 2.0 * f;
    (0..len / factor)
        .map(|i| {
            let center = (i as f64 + 0.5) * f - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for p in lo..=hi {
                let w = cubic((center - p as f64) / f) / f;
                if w == 0.0 {
                    continue;
                }
                total += w;
                let idx = mirror(p, len);
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            taps.into_iter().map(|(j, w)| (j, w / total)).collect()
        })
        .collect()
}

/// Downsamples a `(c, h, w)` or `(b, c, h, w)` tensor by `factor` per side.
pub fn degrade(image: &Tensor, factor: usize) -> Result<Tensor> {
    let dims = image.dims().to_vec();
    let (lead, h, w) = match dims.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [b, c, h, w] => (b * c, *h, *w),
        _ => return Err(Error::Unsupported(format!("degrade expects 3 or 4 dims, got {dims:?}"))),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::SpatialSize(format!("{h}x{w} is not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let rows = downsample_weights(h, factor);
    let cols = downsample_weights(w, factor);
    let data = image
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    let mut out = vec![0.0; lead * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for plane in 0..lead {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for (x, taps) in cols.iter().enumerate() {
                tmp[y * ow + x] = taps.iter().map(|&(j, k)| k * src[y * w + j]).sum();
            }
        }
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (y, taps) in rows.iter().enumerate() {
            for x in 0..ow {
                dst[y * ow + x] = taps.iter().map(|&(i, k)| k * tmp[i * ow + x]).sum();
            }
        }
    }
    let mut shape = dims;
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Ok(Tensor::from_vec(out, shape, image.device())?.to_dtype(image.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device};

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::full(0.37f64, (3, 128, 128), &Device::Cpu).unwrap();
        let lr = degrade(&img, 4).unwrap();
        assert_eq!(lr.dims(), &[3, 32, 32]);
        assert!(to_vec_f64(&lr).unwrap().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn indivisible_is_rejected() {
        let img = Tensor::zeros((3, 30, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(degrade(&img, 4), Err(Error::SpatialSize(_))));
    }

    /// Direct 2-D evaluation of the stretched cubic kernel, written in
    /// continuous coordinates without the separable tap tables.
    fn reference_impulse_response(n: usize, factor: usize, py: usize, px: usize) -> Vec<f64> {
        let f = factor as f64;
        let k = |t: f64| {
            let t = t.abs();
            let a = -0.5;
            if t <= 1.0 {
                (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
            } else if t < 2.0 {
                a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
            } else {
                0.0
            }
        };
        let m = n / factor;
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let (cy, cx) = ((i as f64 + 0.5) * f - 0.5, (j as f64 + 0.5) * f - 0.5);
                let mut norm = 0.0;
                let mut val = 0.0;
                for p in 0..n {
                    for q in 0..n {
                        let wgt = k((cy - p as f64) / f) * k((cx - q as f64) / f);
                        norm += wgt;
                        if p == py && q == px {
                            val = wgt;
                        }
                    }
                }
                out[i * m + j] = val / norm;
            }
        }
        out
    }

    #[test]
    fn impulse_matches_reference_kernel() {
        let n = 64;
        let (py, px) = (29, 34);
        let mut v = vec![0.0f64; n * n];
        v[py * n + px] = 1.0;
        let img = Tensor::from_vec(v, (1, n, n), &Device::Cpu).unwrap();
        let got = to_vec_f64(&degrade(&img, 4).unwrap()).unwrap();
        let want = reference_impulse_response(n, 4, py, px);
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert!(want.iter().any(|w| *w > 0.05));
    }
}
