//! Fused per-channel kernels (batch normalization, channel affine, leaky
//! rectification). Each routes its backward pass through a single native
//! kernel that packs all input gradients into one buffer.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

fn slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused kernel: input must be contiguous"),
    }
}

/// `(b, c, h, w)` layout helper: `(channels, plane size, batch)`.
fn geometry(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (b, c, h, w) = layout.shape().dims4()?;
    Ok((c, h * w, b))
}

fn channel_moments<T: WithDType>(x: &[T], c: usize, plane: usize, batch: usize) -> Vec<(f64, f64)> {
    let n = (plane * batch) as f64;
    (0..c)
        .map(|ci| {
            let mut sum = 0.0;
            for bi in 0..batch {
                let off = (bi * c + ci) * plane;
                sum += x[off..off + plane].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for bi in 0..batch {
                let off = (bi * c + ci) * plane;
                sq += x[off..off + plane]
                    .iter()
                    .map(|v| (v.to_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            (mean, sq / n)
        })
        .collect()
}

fn affine_planes<T: WithDType>(x: &[T], coef: &[(T, T)], c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (i, (dst, src)) in out.chunks_exact_mut(plane).zip(x.chunks_exact(plane)).enumerate() {
        let (s, t) = coef[i % c];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v * s + t;
        }
    }
    out
}

/// Per-channel `[mean; biased variance]` of an NCHW batch, shape `(2, c)`.
pub struct ChannelStats;

impl CustomOp1 for ChannelStats {
    fn name(&self) -> &'static str {
        "channel-stats"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, plane, batch) = geometry(l)?;
        fn go<T: WithDType>(x: &[T], c: usize, plane: usize, batch: usize) -> Vec<T> {
            let m = channel_moments(x, c, plane, batch);
            m.iter()
                .map(|p| T::from_f64(p.0))
                .chain(m.iter().map(|p| T::from_f64(p.1)))
                .collect()
        }
        let shape = Shape::from((2, c));
        match s {
            CpuStorage::F32(x) => Ok((CpuStorage::F32(go(slice(x, l)?, c, plane, batch)), shape)),
            CpuStorage::F64(x) => Ok((CpuStorage::F64(go(slice(x, l)?, c, plane, batch)), shape)),
            _ => candle_core::bail!("channel-stats: unsupported dtype"),
        }
    }
}

/// `y = x * scale[c] + shift[c]`.
pub struct ChannelAffine;

struct ChannelAffineBackward;

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, plane, _) = geometry(l1)?;
        fn go<T: WithDType>(x: &[T], scale: &[T], shift: &[T], c: usize, plane: usize) -> Vec<T> {
            let coef: Vec<(T, T)> = scale.iter().copied().zip(shift.iter().copied()).collect();
            affine_planes(x, &coef, c, plane)
        }
        let shape = l1.shape().clone();
        match (s1, s2, s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(d)) => Ok((
                CpuStorage::F32(go(slice(a, l1)?, slice(b, l2)?, slice(d, l3)?, c, plane)),
                shape,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(d)) => Ok((
                CpuStorage::F64(go(slice(a, l1)?, slice(b, l2)?, slice(d, l3)?, c, plane)),
                shape,
            )),
            _ => candle_core::bail!("channel-affine: unsupported or mixed dtypes"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.elem_count();
        let c = scale.elem_count();
        let packed =
            grad.contiguous()?
                .apply_op3_no_bwd(&x.contiguous()?, &scale.contiguous()?, &ChannelAffineBackward)?;
        Ok((
            Some(packed.narrow(0, 0, n)?.reshape(x.shape())?),
            Some(packed.narrow(0, n, c)?),
            Some(packed.narrow(0, n + c, c)?),
        ))
    }
}

impl CustomOp3 for ChannelAffineBackward {
    fn name(&self) -> &'static str {
        "channel-affine-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, plane, _) = geometry(l1)?;
        let n = l1.shape().elem_count();
        fn go<T: WithDType>(g: &[T], x: &[T], scale: &[T], c: usize, plane: usize) -> Vec<T> {
            let n = g.len();
            let mut out = vec![T::zero(); n + 2 * c];
            let mut ds = vec![0f64; c];
            let mut dt = vec![0f64; c];
            for (i, (gp, xp)) in g.chunks_exact(plane).zip(x.chunks_exact(plane)).enumerate() {
                let ci = i % c;
                let s = scale[ci];
                for (k, (&gv, &xv)) in gp.iter().zip(xp).enumerate() {
                    out[i * plane + k] = gv * s;
                    ds[ci] += (gv * xv).to_f64();
                    dt[ci] += gv.to_f64();
                }
            }
            for ci in 0..c {
                out[n + ci] = T::from_f64(ds[ci]);
                out[n + c + ci] = T::from_f64(dt[ci]);
            }
            out
        }
        let shape = Shape::from(n + 2 * c);
        match (s1, s2, s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(d)) => Ok((
                CpuStorage::F32(go(slice(a, l1)?, slice(b, l2)?, slice(d, l3)?, c, plane)),
                shape,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(d)) => Ok((
                CpuStorage::F64(go(slice(a, l1)?, slice(b, l2)?, slice(d, l3)?, c, plane)),
                shape,
            )),
            _ => candle_core::bail!("channel-affine-backward: unsupported or mixed dtypes"),
        }
    }
}

/// Training-mode batch normalization with batch statistics,
/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
pub struct BatchNormTrain {
    pub eps: f64,
}

struct BatchNormTrainBackward {
    eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, plane, batch) = geometry(l1)?;
        let eps = self.eps;
        fn go<T: WithDType>(
            x: &[T],
            gamma: &[T],
            beta: &[T],
            c: usize,
            plane: usize,
            batch: usize,
            eps: f64,
        ) -> Vec<T> {
            let m = channel_moments(x, c, plane, batch);
            let coef: Vec<(f64, f64)> = m
                .iter()
                .enumerate()
                .map(|(ci, &(mean, var))| {
                    let s = gamma[ci].to_f64() / (var + eps).sqrt();
                    (s, beta[ci].to_f64() - mean * s)
                })
                .collect();
            let coef: Vec<(T, T)> = coef.iter().map(|&(s, t)| (T::from_f64(s), T::from_f64(t))).collect();
            affine_planes(x, &coef, c, plane)
        }
        let shape = l1.shape().clone();
        match (s1, s2, s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(d)) => Ok((
                CpuStorage::F32(go(slice(a, l1)?, slice(b, l2)?, slice(d, l3)?, c, plane, batch, eps)),
                shape,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(d)) => Ok((
                CpuStorage::F64(go(slice(a, l1)?, slice(b, l2)?, slice(d, l3)?, c, plane, batch, eps)),
                shape,
            )),
            _ => candle_core::bail!("batch-norm-train: unsupported or mixed dtypes"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.elem_count();
        let c = gamma.elem_count();
        let packed = grad.contiguous()?.apply_op3_no_bwd(
            &x.contiguous()?,
            &gamma.contiguous()?,
            &BatchNormTrainBackward { eps: self.eps },
        )?;
        Ok((
            Some(packed.narrow(0, 0, n)?.reshape(x.shape())?),
            Some(packed.narrow(0, n, c)?),
            Some(packed.narrow(0, n + c, c)?),
        ))
    }
}

impl CustomOp3 for BatchNormTrainBackward {
    fn name(&self) -> &'static str {
        "batch-norm-train-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, plane, batch) = geometry(l1)?;
        let eps = self.eps;
        fn go<T: WithDType>(g: &[T], x: &[T], gamma: &[T], c: usize, plane: usize, batch: usize, eps: f64) -> Vec<T> {
            let n = g.len();
            let count = (plane * batch) as f64;
            let m = channel_moments(x, c, plane, batch);
            let inv: Vec<f64> = m.iter().map(|&(_, v)| 1.0 / (v + eps).sqrt()).collect();
            let mut sum_g = vec![0f64; c];
            let mut sum_gx = vec![0f64; c];
            for (i, (gp, xp)) in g.chunks_exact(plane).zip(x.chunks_exact(plane)).enumerate() {
                let ci = i % c;
                let (mean, _) = m[ci];
                for (&gv, &xv) in gp.iter().zip(xp) {
                    let gv = gv.to_f64();
                    sum_g[ci] += gv;
                    sum_gx[ci] += gv * (xv.to_f64() - mean) * inv[ci];
                }
            }
            let mut out = vec![T::zero(); n + 2 * c];
            for (i, (gp, xp)) in g.chunks_exact(plane).zip(x.chunks_exact(plane)).enumerate() {
                let ci = i % c;
                let (mean, _) = m[ci];
                let k = gamma[ci].to_f64() * inv[ci] / count;
                let dst = &mut out[i * plane..(i + 1) * plane];
                for ((d, &gv), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                    let xhat = (xv.to_f64() - mean) * inv[ci];
                    *d = T::from_f64(k * (count * gv.to_f64() - sum_g[ci] - xhat * sum_gx[ci]));
                }
            }
            for ci in 0..c {
                out[n + ci] = T::from_f64(sum_gx[ci]);
                out[n + c + ci] = T::from_f64(sum_g[ci]);
            }
            out
        }
        let shape = Shape::from(l1.shape().elem_count() + 2 * c);
        match (s1, s2, s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(d)) => Ok((
                CpuStorage::F32(go(slice(a, l1)?, slice(b, l2)?, slice(d, l3)?, c, plane, batch, eps)),
                shape,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(d)) => Ok((
                CpuStorage::F64(go(slice(a, l1)?, slice(b, l2)?, slice(d, l3)?, c, plane, batch, eps)),
                shape,
            )),
            _ => candle_core::bail!("batch-norm-train-backward: unsupported or mixed dtypes"),
        }
    }
}

/// `max(x, 0) + slope * min(x, 0)`.
pub struct LeakyRelu {
    pub slope: f64,
}

struct LeakyReluBackward {
    slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let slope = self.slope;
        fn go<T: WithDType>(x: &[T], slope: f64) -> Vec<T> {
            let k = T::from_f64(slope);
            x.iter().map(|&v| if v >= T::zero() { v } else { v * k }).collect()
        }
        let shape = l.shape().clone();
        match s {
            CpuStorage::F32(x) => Ok((CpuStorage::F32(go(slice(x, l)?, slope)), shape)),
            CpuStorage::F64(x) => Ok((CpuStorage::F64(go(slice(x, l)?, slope)), shape)),
            _ => candle_core::bail!("leaky-relu: unsupported dtype"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(
            &grad.contiguous()?,
            &LeakyReluBackward { slope: self.slope },
        )?))
    }
}

impl CustomOp2 for LeakyReluBackward {
    fn name(&self) -> &'static str {
        "leaky-relu-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let slope = self.slope;
        fn go<T: WithDType>(x: &[T], g: &[T], slope: f64) -> Vec<T> {
            let k = T::from_f64(slope);
            x.iter()
                .zip(g)
                .map(|(&v, &gv)| if v >= T::zero() { gv } else { gv * k })
                .collect()
        }
        let shape = l1.shape().clone();
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                Ok((CpuStorage::F32(go(slice(a, l1)?, slice(b, l2)?, slope)), shape))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                Ok((CpuStorage::F64(go(slice(a, l1)?, slice(b, l2)?, slope)), shape))
            }
            _ => candle_core::bail!("leaky-relu-backward: unsupported or mixed dtypes"),
        }
    }
}

/// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
#[derive(Debug, Clone, Copy)]
pub struct Softplus;

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = l.shape().clone();
        match s {
            CpuStorage::F32(x) => Ok((
                CpuStorage::F32(
                    slice(x, l)?
                        .iter()
                        .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
                        .collect(),
                ),
                shape,
            )),
            CpuStorage::F64(x) => Ok((
                CpuStorage::F64(
                    slice(x, l)?
                        .iter()
                        .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
                        .collect(),
                ),
                shape,
            )),
            _ => candle_core::bail!("softplus: unsupported dtype"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let sig = (arg.neg()?.exp()? + 1.0)?.recip()?;
        Ok(Some(grad.mul(&sig)?))
    }
}
