//! Convolution and pooling kernels for the CPU backend.
//!
//! Convolution is lowered to `im2col` followed by a single matrix product so
//! that the heavy lifting happens inside the backend's gemm. `Im2Col` and
//! `Col2Im` are adjoint linear maps, which gives each the other's backward pass
//! for free.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kh || pw < self.kw || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// `(b, c, h, w)` -> `(b * oh * ow, c * kh * kw)`: one row per output pixel,
/// so the convolution becomes `cols · kernelᵀ` with a tall, contiguous lhs.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    pub window: Window,
}

/// Adjoint of [`Im2Col`], scattering columns back onto a `(b, c, h, w)` grid.
#[derive(Debug, Clone, Copy)]
pub struct Col2Im {
    pub window: Window,
    pub dims: (usize, usize, usize, usize),
}

fn im2col_kernel<T: WithDType>(
    x: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    win: Window,
) -> (Vec<T>, usize, usize) {
    let (oh, ow) = win.output_dims(h, w).expect("validated by caller");
    let rows = b * oh * ow;
    let cols = c * win.kh * win.kw;
    let mut out = vec![T::zero(); rows * cols];
    let pad = win.padding as isize;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let y0 = (oy * win.stride) as isize - pad;
                let x0 = (ox * win.stride) as isize - pad;
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for ki in 0..win.kh {
                        let iy = y0 + ki as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let d = &mut dst[(ci * win.kh + ki) * win.kw..(ci * win.kh + ki + 1) * win.kw];
                        for (kj, dv) in d.iter_mut().enumerate() {
                            let ix = x0 + kj as isize;
                            if ix >= 0 && ix < w as isize {
                                *dv = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, rows, cols)
}

fn col2im_kernel<T: WithDType>(cols_data: &[T], (b, c, h, w): (usize, usize, usize, usize), win: Window) -> Vec<T> {
    let (oh, ow) = win.output_dims(h, w).expect("validated by caller");
    let cols = c * win.kh * win.kw;
    let mut out = vec![T::zero(); b * c * h * w];
    let pad = win.padding as isize;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let src = &cols_data[row * cols..(row + 1) * cols];
                let y0 = (oy * win.stride) as isize - pad;
                let x0 = (ox * win.stride) as isize - pad;
                for ci in 0..c {
                    let plane = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for ki in 0..win.kh {
                        let iy = y0 + ki as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let s = &src[(ci * win.kh + ki) * win.kw..(ci * win.kh + ki + 1) * win.kw];
                        for (kj, &sv) in s.iter().enumerate() {
                            let ix = x0 + kj as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        if self.window.output_dims(dims.2, dims.3).is_none() {
            candle_core::bail!("im2col: input {dims:?} smaller than window {:?}", self.window);
        }
        match storage {
            CpuStorage::F32(data) => {
                let (out, r, c) = im2col_kernel(contiguous(data, layout, "im2col")?, dims, self.window);
                Ok((CpuStorage::F32(out), Shape::from((r, c))))
            }
            CpuStorage::F64(data) => {
                let (out, r, c) = im2col_kernel(contiguous(data, layout, "im2col")?, dims, self.window);
                Ok((CpuStorage::F64(out), Shape::from((r, c))))
            }
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2Im {
            window: self.window,
            dims: arg.dims4()?,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let Some((oh, ow)) = self.window.output_dims(h, w) else {
            candle_core::bail!("col2im: target {:?} smaller than window", self.dims);
        };
        let expected = (b * oh * ow, c * self.window.kh * self.window.kw);
        if layout.shape().dims2()? != expected {
            candle_core::bail!("col2im: got {:?}, expected {expected:?}", layout.shape());
        }
        let shape = Shape::from(self.dims);
        match storage {
            CpuStorage::F32(data) => Ok((
                CpuStorage::F32(col2im_kernel(
                    contiguous(data, layout, "col2im")?,
                    self.dims,
                    self.window,
                )),
                shape,
            )),
            CpuStorage::F64(data) => Ok((
                CpuStorage::F64(col2im_kernel(
                    contiguous(data, layout, "col2im")?,
                    self.dims,
                    self.window,
                )),
                shape,
            )),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col { window: self.window })?))
    }
}

/// Max pooling with implicit `-inf` padding. The backward pass routes each
/// output gradient to the first maximal element of its window; NaN propagates.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool {
    pub window: Window,
}

struct MaxPoolBackward {
    window: Window,
}

fn max_pool_scan<T: WithDType>(
    x: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    win: Window,
    mut visit: impl FnMut(usize, usize),
) {
    let (oh, ow) = win.output_dims(h, w).expect("validated by caller");
    let pad = win.padding as isize;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(usize, T)> = None;
                for ki in 0..win.kh {
                    let iy = (oy * win.stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..win.kw {
                        let ix = (ox * win.stride) as isize + kj as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = x[idx];
                        // A NaN in the window wins and sticks.
                        #[allow(clippy::eq_op)]
                        let replace = best.is_none_or(|(_, b)| b == b && (v > b || v != v));
                        if replace {
                            best = Some((idx, v));
                        }
                    }
                }
                let (idx, _) = best.expect("window always overlaps the input");
                visit((plane * oh + oy) * ow + ox, idx);
            }
        }
    }
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let Some((oh, ow)) = self.window.output_dims(dims.2, dims.3) else {
            candle_core::bail!("max-pool: input {dims:?} smaller than window");
        };
        if self.window.padding >= self.window.kh.min(self.window.kw) {
            candle_core::bail!("max-pool: padding must be smaller than the window");
        }
        let shape = Shape::from((dims.0, dims.1, oh, ow));
        fn run<T: WithDType>(x: &[T], dims: (usize, usize, usize, usize), win: Window, n: usize) -> Vec<T> {
            let mut out = vec![T::zero(); n];
            max_pool_scan(x, dims, win, |o, i| out[o] = x[i]);
            out
        }
        let n = shape.elem_count();
        match storage {
            CpuStorage::F32(d) => Ok((
                CpuStorage::F32(run(contiguous(d, layout, "max-pool")?, dims, self.window, n)),
                shape,
            )),
            CpuStorage::F64(d) => Ok((
                CpuStorage::F64(run(contiguous(d, layout, "max-pool")?, dims, self.window, n)),
                shape,
            )),
            other => candle_core::bail!("max-pool: unsupported dtype {:?}", other.dtype()),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let arg = arg.contiguous()?;
        let grad = grad_res.contiguous()?;
        Ok(Some(
            arg.apply_op2_no_bwd(&grad, &MaxPoolBackward { window: self.window })?,
        ))
    }
}

impl CustomOp2 for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "max-pool-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        fn run<T: WithDType>(x: &[T], g: &[T], dims: (usize, usize, usize, usize), win: Window) -> Vec<T> {
            let mut out = vec![T::zero(); x.len()];
            max_pool_scan(x, dims, win, |o, i| out[i] += g[o]);
            out
        }
        let shape = l1.shape().clone();
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => Ok((
                CpuStorage::F32(run(
                    contiguous(x, l1, "max-pool")?,
                    contiguous(g, l2, "max-pool")?,
                    dims,
                    self.window,
                )),
                shape,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => Ok((
                CpuStorage::F64(run(
                    contiguous(x, l1, "max-pool")?,
                    contiguous(g, l2, "max-pool")?,
                    dims,
                    self.window,
                )),
                shape,
            )),
            _ => candle_core::bail!("max-pool-backward: dtype mismatch"),
        }
    }
}
