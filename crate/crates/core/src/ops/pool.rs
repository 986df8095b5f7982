use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-overlapping 2x2 mean pool with stride 2. A trailing odd row or column is dropped.
pub fn avgpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("avgpool2")?;
    if h < 2 {
        return Err(Error::dim("avgpool2", "height", ">= 2", h));
    }
    if w < 2 {
        return Err(Error::dim("avgpool2", "width", ">= 2", w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let xs = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in xs.chunks(h * w) {
        for y in 0..oh {
            let r0 = &plane[2 * y * w..];
            let r1 = &plane[(2 * y + 1) * w..];
            for xx in 0..ow {
                let s = r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1];
                out.push(s * quarter);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// `avgpool2(relu(x))` in one pass, for forward-only evaluation.
pub fn relu_avgpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("relu_avgpool2")?;
    if h < 2 {
        return Err(Error::dim("relu_avgpool2", "height", ">= 2", h));
    }
    if w < 2 {
        return Err(Error::dim("relu_avgpool2", "width", ">= 2", w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let r = |v: T| if v > T::zero() { v } else { T::zero() };
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let r0 = &plane[2 * y * w..];
            let r1 = &plane[(2 * y + 1) * w..];
            for xx in 0..ow {
                let s = r(r0[2 * xx]) + r(r0[2 * xx + 1]) + r(r1[2 * xx]) + r(r1[2 * xx + 1]);
                out.push(s * quarter);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// Spreads each output gradient uniformly (grad / 4) over its window.
pub fn avgpool2_backward<T: Scalar>(input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, g) in dx.data_mut().chunks_mut(h * w).zip(grad.data().chunks(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[y * ow + xx] * quarter;
                plane[2 * y * w + 2 * xx] = v;
                plane[2 * y * w + 2 * xx + 1] = v;
                plane[(2 * y + 1) * w + 2 * xx] = v;
                plane[(2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    dx
}
