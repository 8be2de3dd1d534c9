//! 2-D convolution kernels (NCHW activations, OIHW weights).

use super::{Result, Scalar, Tensor, TensorError};

/// Output extent of a strided, zero-padded convolution or pooling window.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: weight.to_vec(),
        };
        if x.len() != 4 || weight.len() != 4 || x[1] != weight[1] {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if b != [weight[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: weight.to_vec(),
                    rhs: b.to_vec(),
                });
            }
        }
        let oh = conv_output_len(x[2], weight[2], stride, pad).ok_or_else(mismatch)?;
        let ow = conv_output_len(x[3], weight[3], stride, pad).ok_or_else(mismatch)?;
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            co: weight[0],
            kh: weight[2],
            kw: weight[3],
            oh,
            ow,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.co, self.oh, self.ow]
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Plain nested-loop convolution. Terms are accumulated in (channel, row, col)
/// order starting from zero; the bias is added last.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.map(|b| b.shape()), stride, pad)?;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = Tensor::zeros(g.out_shape());
    let od = out.data_mut();
    for n in 0..g.n {
        for co in 0..g.co {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for c in 0..g.c {
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                let xv = xd[((n * g.c + c) * g.h + iy) * g.w + ix];
                                let wv = wd[((co * g.c + c) * g.kh + ky) * g.kw + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc = acc + b.data()[co];
                    }
                    od[((n * g.co + co) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn im2col<T: Scalar>(g: &ConvGeom, sample: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    match g.src(oy, ky, g.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &sample[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(ox, kx, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], sample: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            sample[(c * g.h + iy) * g.w + ix] =
                                sample[(c * g.h + iy) * g.w + ix] + cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if T::DIRECT_CONV {
        return conv2d_direct(x, weight, bias, stride, pad);
    }
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.map(|b| b.shape()), stride, pad)?;
    let (k, p) = (g.patch(), g.positions());
    let mut out = Tensor::zeros(g.out_shape());
    let mut cols = vec![T::zero(); k * p];
    let sample_in = g.c * g.h * g.w;
    let sample_out = g.co * p;
    for n in 0..g.n {
        im2col(&g, &x.data()[n * sample_in..(n + 1) * sample_in], &mut cols);
        let dst = &mut out.data_mut()[n * sample_out..(n + 1) * sample_out];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.co,
            k,
            p,
            T::one(),
            weight.data(),
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            beta,
            dst,
            p as isize,
            1,
        );
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), None, stride, pad)?;
    let (k, p) = (g.patch(), g.positions());
    let sample_in = g.c * g.h * g.w;
    let sample_out = g.co * p;
    let mut dx = want.0.then(|| Tensor::zeros(x.shape()));
    let mut dw = want.1.then(|| Tensor::zeros(weight.shape()));
    let mut db = (want.2 && has_bias).then(|| Tensor::zeros([g.co]));
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..g.n {
        let go = &grad_out.data()[n * sample_out..(n + 1) * sample_out];
        if let Some(dw) = dw.as_mut() {
            im2col(&g, &x.data()[n * sample_in..(n + 1) * sample_in], &mut cols);
            T::gemm(
                g.co,
                p,
                k,
                T::one(),
                go,
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                T::one(),
                dw.data_mut(),
                k as isize,
                1,
            );
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in go.chunks(p).enumerate() {
                db.data_mut()[co] = db.data()[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                k,
                g.co,
                p,
                T::one(),
                weight.data(),
                1,
                k as isize,
                go,
                p as isize,
                1,
                T::zero(),
                &mut dcols,
                p as isize,
                1,
            );
            col2im_add(&g, &dcols, &mut dx.data_mut()[n * sample_in..(n + 1) * sample_in]);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_len() {
        assert_eq!(conv_output_len(28, 3, 1, 1), Some(28));
        assert_eq!(conv_output_len(32, 3, 2, 1), Some(16));
        assert_eq!(conv_output_len(2, 3, 1, 0), None);
    }

    #[test]
    fn ones_kernel_on_ones_image() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full([1, 1, 2, 2], 1.0);
        let out = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
        let out32 = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), None, 1, 0).unwrap();
        assert_eq!(out32.data(), &[4.0f32; 4]);
    }

    #[test]
    fn gemm_path_matches_direct() {
        let x = Tensor::<f32>::from_fn([2, 3, 7, 6], |i| ((i * 37 % 11) as f32 - 5.0) / 7.0);
        let w = Tensor::<f32>::from_fn([4, 3, 3, 3], |i| ((i * 13 % 7) as f32 - 3.0) / 5.0);
        let b = Tensor::<f32>::from_fn([4], |i| i as f32 * 0.1);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let fast = conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = conv2d_direct(&x, &w, Some(&b), stride, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 2, 2]);
        let err = conv2d_forward(&x, &w, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }
}
