//! Patch extraction for convolution as matrix multiplication, with the
//! adjoint scatter as its gradient.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Calls `f(row, out_index, in_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (oh, ow) = (self.out_height(), self.out_width());
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let in_row = (c * self.height + iy as usize) * self.width;
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < self.width as isize {
                                f(row, oy * ow + ox, in_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

fn gather<T: Copy + Default>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let in_size = g.channels * g.height * g.width;
    let mut out = vec![T::default(); batch * rows * cols];
    for b in 0..batch {
        let src = &src[b * in_size..(b + 1) * in_size];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        g.for_each_tap(|row, o, i| dst[row * cols + o] = src[i]);
    }
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    batch: usize,
    g: &Geometry,
) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let in_size = g.channels * g.height * g.width;
    let mut out = vec![T::default(); batch * in_size];
    for b in 0..batch {
        let src = &src[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * in_size..(b + 1) * in_size];
        g.for_each_tap(|row, o, i| dst[i] += src[row * cols + o]);
    }
    out
}

/// `(B, C, H, W) -> (B, C*k*k, Ho*Wo)`.
pub(crate) struct Im2Col(pub Geometry);

/// Adjoint of [`Im2Col`]: `(B, C*k*k, Ho*Wo) -> (B, C, H, W)`.
pub(crate) struct Col2Im(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous(v, layout)?, batch, g)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous(v, layout)?, batch, g)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2D convolution (no dilation, no groups) as patch extraction followed by a
/// matrix product.
pub(crate) fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c_in != c || k != k2 {
        candle_core::bail!(
            "conv2d weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        );
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    let (oh, ow) = (g.out_height(), g.out_width());
    let w2 = weight.reshape((c_out, c * k * k))?;
    let y = if k == 1 && stride == 1 && padding == 0 {
        w2.broadcast_matmul(&x.reshape((b, c, h * w))?)?
    } else {
        let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
        w2.broadcast_matmul(&cols)?
    };
    y.reshape((b, c_out, oh, ow))
}

/// Transposed convolution with kernel equal to stride and no padding:
/// every input pixel expands into its own `s x s` output block.
pub(crate) fn conv_transpose_blocks(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let (wc_in, c_out, s, s2) = weight.dims4()?;
    if wc_in != c_in || s != s2 {
        candle_core::bail!(
            "transposed conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        );
    }
    let w2 = weight.reshape((c_in, c_out * s * s))?;
    let xt = x.reshape((b, c_in, h * w))?.transpose(1, 2)?;
    let y = xt.broadcast_matmul(&w2)?;
    y.reshape((b, h, w, c_out, s, s))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, c_out, h * s, w * s))
}
