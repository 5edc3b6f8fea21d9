//! Layer building blocks shared by the extractor, heads and generators.

pub mod fused;
pub mod ops;

use candle_core::{DType, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use fused::{BatchNormTrain, ChannelAffine, ChannelStats, LeakyRelu};
use ops::{Im2Col, MaxPool, Window};

/// Whether a forward pass is part of training (batch statistics, running
/// statistic updates) or evaluation (running statistics, no side effects).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 2-D convolution of an NCHW batch with an `(out, in, kh, kw)` kernel.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, kc, kh, kw) = kernel.dims4()?;
    if kc != c {
        return Err(Error::ShapeMismatch {
            name: "conv2d input channels".into(),
            expected: vec![kc],
            found: vec![c],
        });
    }
    let window = Window {
        kh,
        kw,
        stride,
        padding,
    };
    let (oh, ow) = window
        .output_dims(h, w)
        .ok_or_else(|| Error::SpatialSize(format!("{h}x{w} input is smaller than a {kh}x{kw} kernel")))?;
    let k2d = kernel.reshape((o, c * kh * kw))?;
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        let per_sample =
            |xi: &Tensor| -> Result<Tensor> { Ok(k2d.matmul(&xi.reshape((c, h * w))?)?.reshape((1, o, oh, ow))?) };
        if b == 1 {
            return per_sample(x);
        }
        let outs = (0..b)
            .map(|i| per_sample(&x.narrow(0, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Tensor::cat(&outs, 0)?);
    }
    let cols = x.contiguous()?.apply_op1(Im2Col { window })?;
    let out = cols.matmul(&k2d.t()?)?;
    Ok(out
        .reshape((b, oh * ow, o))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, o, oh, ow))?)
}

pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let window = Window {
        kh: kernel,
        kw: kernel,
        stride,
        padding,
    };
    Ok(x.contiguous()?.apply_op1(MaxPool { window })?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu { slope })?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Rearranges `(b, c·r², h, w)` into `(b, c, h·r, w·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, crr, h, w) = x.dims4()?;
    if crr % (r * r) != 0 {
        return Err(Error::ShapeMismatch {
            name: "pixel_shuffle channels".into(),
            expected: vec![r * r],
            found: vec![crr],
        });
    }
    let c = crr / (r * r);
    Ok(x.reshape((b, c, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, c, h * r, w * r))?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}

fn use_weight(var: &Var, trainable: bool) -> Tensor {
    if trainable {
        var.as_tensor().clone()
    } else {
        var.as_tensor().detach()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub weight_name: String,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight_name = format!("{name}.weight");
        let weight = store.param(
            &weight_name,
            (out_channels, in_channels, kernel, kernel),
            Init::KaimingNormal { fan_in },
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), out_channels, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            weight_name,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Runs the convolution with an explicit kernel (e.g. a spectrally
    /// normalized view of `self.weight`).
    pub fn forward_with_kernel(&self, x: &Tensor, kernel: &Tensor, trainable: bool) -> Result<Tensor> {
        let y = conv2d(x, kernel, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&use_weight(b, trainable).reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn forward(&self, x: &Tensor, trainable: bool) -> Result<Tensor> {
        self.forward_with_kernel(x, &use_weight(&self.weight, trainable), trainable)
    }
}

/// Batch normalization over the channel axis of an NCHW batch.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), channels, Init::Ones)?,
            bias: store.param(&format!("{name}.bias"), channels, Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), channels, Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), channels, Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// A trainable layer in `Mode::Train` normalizes with batch statistics
    /// and folds them into the running estimates. A frozen layer always
    /// behaves as in evaluation and leaves its running statistics untouched.
    pub fn forward(&self, x: &Tensor, mode: Mode, trainable: bool) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let x = x.contiguous()?;
        let gamma = use_weight(&self.weight, trainable);
        let beta = use_weight(&self.bias, trainable);
        if mode == Mode::Train && trainable {
            let n = b * h * w;
            let stats = x.apply_op1_no_bwd(&ChannelStats)?;
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (stats.get(0)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (stats.get(1)? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            return Ok(x.apply_op3(&gamma, &beta, BatchNormTrain { eps: self.eps })?);
        }
        let rm = self.running_mean.as_tensor().detach();
        let rv = self.running_var.as_tensor().detach();
        let scale = (gamma * (rv + self.eps)?.sqrt()?.recip()?)?;
        let shift = (beta - (rm * &scale)?)?;
        Ok(x.apply_op3(&scale, &shift, ChannelAffine)?)
    }
}

pub(crate) fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub(crate) fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn naive_conv(
        x: &[f64],
        (b, c, h, w): (usize, usize, usize, usize),
        k: &[f64],
        (o, kh, kw): (usize, usize, usize),
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * s + i) as isize - p as isize;
                                    let ix = (xx * s + j) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k[((oi * c + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oi) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let dev = Device::Cpu;
        for &(b, c, h, w, o, k, s, p) in &[
            (2, 3, 9, 7, 4, 3, 2, 1),
            (1, 5, 8, 8, 2, 1, 1, 0),
            (3, 2, 6, 6, 3, 1, 1, 0),
            (1, 3, 16, 16, 4, 7, 2, 3),
            (2, 2, 5, 5, 3, 4, 1, 2),
        ] {
            let xv = lcg(b * c * h * w, 1);
            let kv = lcg(o * c * k * k, 2);
            let x = Tensor::from_vec(xv.clone(), (b, c, h, w), &dev).unwrap();
            let kt = Tensor::from_vec(kv.clone(), (o, c, k, k), &dev).unwrap();
            let got = to_vec_f64(&conv2d(&x, &kt, s, p).unwrap()).unwrap();
            let want = naive_conv(&xv, (b, c, h, w), &kv, (o, k, k), s, p);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let (b, c, h, w, o, k) = (2, 2, 6, 5, 3, 3);
        let xv = lcg(b * c * h * w, 3);
        let kv = lcg(o * c * k * k, 4);
        let x = Var::from_tensor(&Tensor::from_vec(xv.clone(), (b, c, h, w), &dev).unwrap()).unwrap();
        let kt = Var::from_tensor(&Tensor::from_vec(kv.clone(), (o, c, k, k), &dev).unwrap()).unwrap();
        let y = conv2d(x.as_tensor(), kt.as_tensor(), 2, 1).unwrap();
        let loss = y.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let gx = to_vec_f64(grads.get(x.as_tensor()).unwrap()).unwrap();
        let gk = to_vec_f64(grads.get(kt.as_tensor()).unwrap()).unwrap();
        let f = |xv: &[f64], kv: &[f64]| {
            naive_conv(xv, (b, c, h, w), kv, (o, k, k), 2, 1)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
        };
        let eps = 1e-6;
        for i in [0, 7, 19, 33, 59] {
            let mut xp = xv.clone();
            xp[i] += eps;
            let mut xm = xv.clone();
            xm[i] -= eps;
            let fd = (f(&xp, &kv) - f(&xm, &kv)) / (2.0 * eps);
            assert!(
                (fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "dx[{i}] {fd} vs {}",
                gx[i]
            );
        }
        for i in [0, 5, 17, 53] {
            let mut kp = kv.clone();
            kp[i] += eps;
            let mut km = kv.clone();
            km[i] -= eps;
            let fd = (f(&xv, &kp) - f(&xv, &km)) / (2.0 * eps);
            assert!(
                (fd - gk[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "dk[{i}] {fd} vs {}",
                gk[i]
            );
        }
    }

    #[test]
    fn max_pool_forward_and_backward() {
        let dev = Device::Cpu;
        let v: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64).collect();
        let x = Var::from_tensor(&Tensor::from_vec(v.clone(), (1, 1, 5, 5), &dev).unwrap()).unwrap();
        let y = max_pool2d(x.as_tensor(), 3, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        let yv = to_vec_f64(&y).unwrap();
        for oy in 0..3usize {
            for ox in 0..3usize {
                let mut m = f64::NEG_INFINITY;
                for iy in (2 * oy).saturating_sub(1)..=(2 * oy + 1).min(4) {
                    for ix in (2 * ox).saturating_sub(1)..=(2 * ox + 1).min(4) {
                        m = m.max(v[iy * 5 + ix]);
                    }
                }
                assert_eq!(yv[oy * 3 + ox], m);
            }
        }
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g = to_vec_f64(grads.get(x.as_tensor()).unwrap()).unwrap();
        assert_eq!(g.iter().sum::<f64>(), 9.0);
    }

    #[test]
    fn pixel_shuffle_places_subpixels() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 8.0, &dev).unwrap().reshape((1, 4, 1, 2)).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 4]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
    }

    #[test]
    fn leaky_relu_slope() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &dev).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f64>().unwrap();
        assert!((y[0] + 0.4).abs() < 1e-15 && y[1] == 0.0 && (y[2] - 3.0).abs() < 1e-15);
    }

    fn reference_bn(x: &Tensor, g: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        let c = g.dims()[0];
        let mean = x
            .mean_keepdim(3)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(0)
            .unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = xc
            .sqr()
            .unwrap()
            .mean_keepdim(3)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(0)
            .unwrap();
        let xhat = xc.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap();
        xhat.broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn fused_batch_norm_matches_composite_ops() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(DType::F64, 5);
        let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
        bn.weight
            .set(&Tensor::new(&[0.5f64, 1.5, -2.0], &dev).unwrap())
            .unwrap();
        bn.bias.set(&Tensor::new(&[0.1f64, -0.2, 0.3], &dev).unwrap()).unwrap();
        let x = Var::from_tensor(&Tensor::from_vec(lcg(2 * 3 * 4 * 5, 9), (2, 3, 4, 5), &dev).unwrap()).unwrap();
        let w = Tensor::from_vec(lcg(2 * 3 * 4 * 5, 10), (2, 3, 4, 5), &dev).unwrap();

        let y = bn.forward(x.as_tensor(), Mode::Train, true).unwrap();
        let loss = (y * &w).unwrap().sum_all().unwrap();
        let g1 = loss.backward().unwrap();
        let y_ref = reference_bn(x.as_tensor(), bn.weight.as_tensor(), bn.bias.as_tensor(), bn.eps);
        let loss_ref = (y_ref * &w).unwrap().sum_all().unwrap();
        let g2 = loss_ref.backward().unwrap();
        assert!((scalar_f64(&loss).unwrap() - scalar_f64(&loss_ref).unwrap()).abs() < 1e-12);
        for t in [x.as_tensor(), bn.weight.as_tensor(), bn.bias.as_tensor()] {
            let a = to_vec_f64(g1.get(t).unwrap()).unwrap();
            let b = to_vec_f64(g2.get(t).unwrap()).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }
        }
        // Running statistics moved toward the batch moments.
        let rm = to_vec_f64(bn.running_mean.as_tensor()).unwrap();
        assert!(rm.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn eval_batch_norm_uses_running_statistics() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(DType::F64, 5);
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        bn.running_mean
            .set(&Tensor::new(&[1.0f64, -1.0], &dev).unwrap())
            .unwrap();
        bn.running_var
            .set(&Tensor::new(&[4.0f64, 0.25], &dev).unwrap())
            .unwrap();
        let x = Tensor::new(&[3.0f64, 0.0], &dev)
            .unwrap()
            .reshape((1, 2, 1, 1))
            .unwrap();
        let y = to_vec_f64(&bn.forward(&x, Mode::Eval, true).unwrap()).unwrap();
        assert!((y[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!((y[1] - 1.0 / (0.25f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
}
