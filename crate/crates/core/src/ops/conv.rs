//! 3x3 stride-1 convolution with zero padding 1, lowered to GEMM via im2col.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const K: usize = 3;
const TAPS: usize = K * K;

/// `col[(c*9 + ky*3 + kx) * ld + y*w + x] = img[c, y+ky-1, x+kx-1]`, zero outside.
fn im2col<T: Scalar>(img: &[T], c_in: usize, h: usize, w: usize, col: &mut [T], ld: usize) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut col[(c * TAPS + ky * K + kx) * ld..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image gradient.
fn col2im<T: Scalar>(col: &[T], c_in: usize, h: usize, w: usize, img: &mut [T], ld: usize) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &col[(c * TAPS + ky * K + kx) * ld..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &v)| *d += v),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &v)| *d += v),
                    }
                }
            }
        }
    }
}

/// Images per GEMM so each call sees at least ~2048 columns.
fn group_size(hw: usize, b: usize) -> usize {
    2048usize.div_ceil(hw.max(1)).clamp(1, b.max(1))
}

fn check_shapes<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, c_in, h, w) = x.dims4("conv2d")?;
    let (c_out, wc_in, kh, kw) = weight.dims4("conv2d")?;
    if kh != K {
        return Err(Error::dim("conv2d", "kernel height", K, kh));
    }
    if kw != K {
        return Err(Error::dim("conv2d", "kernel width", K, kw));
    }
    if wc_in != c_in {
        return Err(Error::dim("conv2d", "input channels", wc_in, c_in));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim(
            "conv2d",
            "bias",
            format!("[{c_out}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    Ok((b, c_in, h, w, c_out))
}

/// Cross-correlation plus per-channel bias; output keeps the input's spatial size.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c_in, h, w, c_out) = check_shapes(x, weight, bias)?;
    let hw = h * w;
    let kdim = c_in * TAPS;
    let mut out = vec![T::zero(); b * c_out * hw];
    if b == 0 || hw == 0 {
        return Tensor::new(&[b, c_out, h, w], out);
    }
    let xs = x.data();
    let ws = weight.data();
    let bs = bias.data();
    let g = group_size(hw, b);
    out.par_chunks_mut(g * c_out * hw).enumerate().for_each_init(
        || (vec![T::zero(); kdim * g * hw], vec![T::zero(); c_out * g * hw]),
        |(col, tmp), (gi, dst)| {
            let n_img = dst.len() / (c_out * hw);
            let ld = n_img * hw;
            for j in 0..n_img {
                let i = gi * g + j;
                im2col(&xs[i * c_in * hw..(i + 1) * c_in * hw], c_in, h, w, &mut col[j * hw..], ld);
            }
            T::gemm(
                c_out, kdim, ld, T::one(), ws, kdim as isize, 1, col, ld as isize, 1, T::zero(),
                tmp, ld as isize, 1,
            );
            for j in 0..n_img {
                for o in 0..c_out {
                    let src = &tmp[o * ld + j * hw..][..hw];
                    let plane = &mut dst[(j * c_out + o) * hw..][..hw];
                    let bo = bs[o];
                    plane.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bo);
                }
            }
        },
    );
    Tensor::new(&[b, c_out, h, w], out)
}

/// `avgpool2(relu(conv2d(x)))` without materializing the full-resolution
/// activation. Forward only.
pub fn conv2d_relu_avgpool2<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c_in, h, w, c_out) = check_shapes(x, weight, bias)?;
    if h < 2 {
        return Err(Error::dim("conv2d_relu_avgpool2", "height", ">= 2", h));
    }
    if w < 2 {
        return Err(Error::dim("conv2d_relu_avgpool2", "width", ">= 2", w));
    }
    let (hw, oh, ow) = (h * w, h / 2, w / 2);
    let ohw = oh * ow;
    let kdim = c_in * TAPS;
    let mut out = vec![T::zero(); b * c_out * ohw];
    if b == 0 {
        return Tensor::new(&[b, c_out, oh, ow], out);
    }
    let xs = x.data();
    let ws = weight.data();
    let bs = bias.data();
    let quarter = T::from_f64_lossy(0.25);
    let g = group_size(hw, b);
    out.par_chunks_mut(g * c_out * ohw).enumerate().for_each_init(
        || (vec![T::zero(); kdim * g * hw], vec![T::zero(); c_out * g * hw]),
        |(col, tmp), (gi, dst)| {
            let n_img = dst.len() / (c_out * ohw);
            let ld = n_img * hw;
            for j in 0..n_img {
                let i = gi * g + j;
                im2col(&xs[i * c_in * hw..(i + 1) * c_in * hw], c_in, h, w, &mut col[j * hw..], ld);
            }
            T::gemm(
                c_out, kdim, ld, T::one(), ws, kdim as isize, 1, col, ld as isize, 1, T::zero(),
                tmp, ld as isize, 1,
            );
            for j in 0..n_img {
                for o in 0..c_out {
                    let src = &tmp[o * ld + j * hw..][..hw];
                    let plane = &mut dst[(j * c_out + o) * ohw..][..ohw];
                    let bo = bs[o];
                    let r = |v: T| {
                        let v = v + bo;
                        if v > T::zero() {
                            v
                        } else {
                            T::zero()
                        }
                    };
                    for y in 0..oh {
                        let r0 = &src[2 * y * w..];
                        let r1 = &src[(2 * y + 1) * w..];
                        for (xx, d) in plane[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                            *d = (r(r0[2 * xx]) + r(r0[2 * xx + 1]) + r(r1[2 * xx]) + r(r1[2 * xx + 1]))
                                * quarter;
                        }
                    }
                }
            }
        },
    );
    Tensor::new(&[b, c_out, oh, ow], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass. Images are reduced in index order so weight gradients are
/// reproducible bit-for-bit.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (b, c_in, h, w) = x.dims4("conv2d_backward")?;
    let c_out = weight.shape()[0];
    let hw = h * w;
    let kdim = c_in * TAPS;
    if grad_out.shape() != [b, c_out, h, w] {
        return Err(Error::dim(
            "conv2d_backward",
            "grad",
            format!("{:?}", [b, c_out, h, w]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut dw = vec![T::zero(); c_out * kdim];
    let mut db = vec![T::zero(); c_out];
    let mut dx = if need_input {
        Some(vec![T::zero(); x.len()])
    } else {
        None
    };
    let g = group_size(hw, b);
    let mut col = vec![T::zero(); kdim * g * hw];
    let mut dcol = vec![T::zero(); kdim * g * hw];
    let mut gg = vec![T::zero(); c_out * g * hw];
    let xs = x.data();
    let gs = grad_out.data();
    let ws = weight.data();
    for start in (0..b).step_by(g) {
        let n_img = g.min(b - start);
        let ld = n_img * hw;
        for j in 0..n_img {
            let i = start + j;
            im2col(&xs[i * c_in * hw..(i + 1) * c_in * hw], c_in, h, w, &mut col[j * hw..], ld);
            for o in 0..c_out {
                let src = &gs[(i * c_out + o) * hw..][..hw];
                gg[o * ld + j * hw..][..hw].copy_from_slice(src);
                db[o] += src.iter().copied().sum::<T>();
            }
        }
        // dW += G · colᵀ
        T::gemm(
            c_out, ld, kdim, T::one(), &gg, ld as isize, 1, &col, 1, ld as isize, T::one(),
            &mut dw, kdim as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · G
            T::gemm(
                kdim, c_out, ld, T::one(), ws, 1, kdim as isize, &gg, ld as isize, 1, T::zero(),
                &mut dcol, ld as isize, 1,
            );
            for j in 0..n_img {
                let i = start + j;
                col2im(&dcol[j * hw..], c_in, h, w, &mut dx[i * c_in * hw..(i + 1) * c_in * hw], ld);
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[c_out], db)?,
    })
}
